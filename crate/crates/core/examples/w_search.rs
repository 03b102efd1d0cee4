//! Searching the generator's latent space for views at a fixed embedding radius.

use viewlab::modelzoo::{generate, zoo, BlobSpec, LatentCode};
use viewlab::viewgen::{self, WSearchConfig};
use viewlab::{rng, Result};
use viewlab_autodiff::Tensor;

pub fn run() -> Result<()> {
    // With identity maps the views should land on the circle of radius epsilon1
    // and spread at least epsilon2 apart.
    let id = zoo::identity(2)?;
    let cfg = WSearchConfig {
        views: 2,
        steps: 4000,
        normalize_embeddings: false,
        ..WSearchConfig::default()
    };
    let out = viewgen::w_search(&Tensor::vector(vec![0.0, 0.0]), &id, &id, &id, &cfg, &mut rng::stream(&[1]))?;
    println!("toy: radius residuals {:?}, mean pairwise {:.4}", out.residuals, out.mean_pairwise);

    // The same search on blob images through an untrained encoder and inverter.
    let spec = BlobSpec {
        height: 16,
        width: 16,
        ..BlobSpec::default()
    };
    let g = zoo::blob_generator(spec)?;
    let f = zoo::toy_encoder(
        spec.image_shape(),
        zoo::EncoderSpec {
            widths: [4, 8, 8],
            hidden: 32,
            embed_dim: 16,
        },
        2,
    )?;
    let e = zoo::toy_inverter(spec.image_shape(), spec.latent_dim(), 3)?;
    let anchor = generate(&g, &LatentCode(vec![0.3; spec.latent_dim()]))?;
    let cfg = WSearchConfig {
        views: 4,
        steps: 100,
        step_size: 0.5,
        ..WSearchConfig::default()
    };
    let out = viewgen::w_search(&anchor, &f, &g, &e, &cfg, &mut rng::stream(&[4]))?;
    println!(
        "blobs: {} views after {} steps, objective {:.5}, residuals {:?}, mean pairwise {:.4}",
        out.views.len(),
        out.steps_taken,
        out.objective,
        out.residuals.iter().map(|r| (r * 1e4).round() / 1e4).collect::<Vec<_>>(),
        out.mean_pairwise
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
