//! Contrastive pretraining with generated views appended as extra positives.

use viewlab::dataset::{make_dataset, DatasetConfig};
use viewlab::modelzoo::{zoo, DifferentiableMap, LatentCode};
use viewlab::trainer::{self, TrainConfig};
use viewlab::viewcache::{self, ViewSource};
use viewlab::viewgen::PerturbConfig;
use viewlab::Result;

pub fn run() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let dcfg = DatasetConfig {
        train_per_class: 32,
        test_per_class: 16,
        height: 16,
        width: 16,
        ..DatasetConfig::default()
    };
    let (train, test) = make_dataset(&dcfg)?;
    let g = zoo::blob_generator(dcfg.blob_spec())?;

    // An untrained inverter is enough to show the plumbing.
    let e = zoo::toy_inverter(train.image_shape(), dcfg.blob_spec().latent_dim(), 1)?;
    let latents = (0..train.len())
        .map(|i| Ok(LatentCode(e.eval(&train.gather(&[i]))?.into_data())))
        .collect::<Result<Vec<_>>>()?;
    let inv = dir.path().join("latents.vlc");
    viewcache::write_inversions(&inv, &train, &g, &latents, None)?;
    let inversions = viewcache::read_cache(&inv)?;
    let views = dir.path().join("w_perturb.vlc");
    let source = ViewSource::Perturb {
        config: PerturbConfig { sigma: 0.2, count: 4 },
        inversions: &inversions,
    };
    viewcache::generate_and_cache(&train, &g, source, 0, &views, None)?;
    let cache = viewcache::read_cache(&views)?;

    let cfg = TrainConfig {
        batch_size: 32,
        epochs: 6,
        knn_every: 2,
        ..TrainConfig::default()
    };
    let encoder = zoo::toy_encoder(
        train.image_shape(),
        zoo::EncoderSpec {
            widths: [4, 8, 8],
            hidden: 32,
            embed_dim: 16,
        },
        2,
    )?;
    let report = trainer::pretrain(&cfg, encoder, &train, Some(&test), Some(&cache))?;
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        println!("epoch {}: loss {loss:.4}", epoch + 1);
    }
    for row in report.rows.iter().filter(|r| r.knn5_acc.is_some()) {
        println!("epoch {}: 5-NN {:.3}", row.epoch, row.knn5_acc.unwrap_or_default());
    }
    print!("{}", report.metrics_csv(None).lines().take(3).collect::<Vec<_>>().join("\n"));
    println!("\n...");
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
