//! Every contrastive objective on random unit embeddings.

use rand_distr::{Distribution, StandardNormal};
use viewlab::batching::{IndexMap, MultiviewBatch};
use viewlab::losses::{self, LossConfig, LossVariant};
use viewlab::modelzoo::zoo;
use viewlab::{rng, Result};
use viewlab_autodiff::Tensor;

fn random_batch(map: IndexMap, dim: usize, seed: u64) -> Result<MultiviewBatch> {
    let mut r = rng::stream(&[seed]);
    let mut z: Vec<f64> = (0..map.len() * dim).map(|_| StandardNormal.sample(&mut r)).collect();
    for row in z.chunks_mut(dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    let ids = (0..map.len()).map(|i| map.anchor_of(i) as u64).collect();
    MultiviewBatch::new(Tensor::zeros(&[map.len(), 1]), ids, map)?.with_embeddings(Tensor::matrix(map.len(), dim, z))
}

pub fn run() -> Result<()> {
    let (anchors, generated, dim) = (8, 2, 16);
    let two_view = random_batch(IndexMap::build_two_view(anchors)?, dim, 1)?;
    let multiview = random_batch(IndexMap::build_two_view(anchors)?.append_generated(generated)?, dim, 2)?;
    let predictor = zoo::predictor(dim, 32, 3)?;
    println!(
        "two-view batch: {} views; multiview batch: {} views ({generated} generated per anchor)",
        two_view.len(),
        multiview.len()
    );

    for variant in LossVariant::ALL {
        let cfg = LossConfig::with_variant(variant);
        let value = match variant {
            LossVariant::SimClr => losses::simclr_loss(&two_view, &cfg)?,
            LossVariant::InfoNce => losses::infonce_two_set(&two_view, &cfg)?,
            LossVariant::SimSiam => losses::simsiam_loss(&two_view, &predictor, &cfg)?,
            LossVariant::A2SimSiam => losses::a2_simsiam_loss(&multiview, &predictor, &cfg)?,
            _ => losses::a2_loss(&multiview, &cfg)?,
        };
        println!("{variant:?}: {value:.6}");
    }
    let align = losses::align_term(&multiview, &LossConfig::with_variant(LossVariant::A2InfoNce))?;
    println!("alignment term (subtracted by the A2 losses): {align:.6}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
