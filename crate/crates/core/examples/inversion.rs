//! In-domain inversion: train an inverter, then refine each latent from its warm start.

use viewlab::dataset::{make_dataset, DatasetConfig};
use viewlab::inversion::{self, InversionConfig, InversionModels};
use viewlab::modelzoo::zoo;
use viewlab::Result;

pub fn run() -> Result<()> {
    let dcfg = DatasetConfig {
        train_per_class: 32,
        test_per_class: 8,
        height: 16,
        width: 16,
        ..DatasetConfig::default()
    };
    let (train, test) = make_dataset(&dcfg)?;
    let shape = train.image_shape();
    let g = zoo::blob_generator(dcfg.blob_spec())?;
    let h = zoo::perceptual_net(shape, 1)?;
    let cfg = InversionConfig {
        encoder_steps: 100,
        discriminator_steps: 40,
        latent_opt_steps: 20,
        ..InversionConfig::default()
    };
    let d = inversion::train_discriminator(&train.images, &g, zoo::toy_discriminator(shape, 2)?, &cfg)?;
    let models = InversionModels { g: &g, d: &d, h: &h };
    let e = zoo::toy_inverter(shape, dcfg.blob_spec().latent_dim(), 3)?;
    let (e, report) = inversion::train_inverter(&train.images, &test.images, e, models, &cfg)?;
    println!(
        "inverter: held-out loss {:.4} -> {:.4} over {} steps",
        report.initial_heldout, report.final_heldout, cfg.encoder_steps
    );
    let fits = inversion::invert_dataset(&test.images, &e, models, &cfg)?;
    let n = fits.len() as f64;
    let before = fits.iter().map(|f| f.initial_loss).sum::<f64>() / n;
    let after = fits.iter().map(|f| f.final_loss).sum::<f64>() / n;
    println!("refinement on {} test images: mean loss {before:.4} -> {after:.4}", fits.len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
