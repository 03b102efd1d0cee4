//! Gaussian perturbation of an inverted latent, decoded back to images.

use viewlab::modelzoo::{generate, zoo, BlobSpec, LatentCode};
use viewlab::viewgen::{self, PerturbConfig};
use viewlab::{rng, Result};

pub fn run() -> Result<()> {
    let spec = BlobSpec::default();
    let g = zoo::blob_generator(spec)?;
    let w = LatentCode((0..spec.latent_dim()).map(|i| 0.1 * i as f64 - 0.8).collect());
    let anchor = generate(&g, &w)?;
    for sigma in [0.0, 0.1, 0.2, 0.4, 1.0] {
        let views = viewgen::w_perturb_latent(&w, &g, &PerturbConfig { sigma, count: 8 }, &mut rng::stream(&[7]))?;
        let mean_dist = views
            .iter()
            .map(|(_, img)| img.data().iter().zip(anchor.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .sum::<f64>()
            / views.len() as f64;
        println!("sigma {sigma:>4}: mean pixel distance to the anchor {mean_dist:.4}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
