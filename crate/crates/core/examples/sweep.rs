//! A two-cell perturbation-strength sweep over one shared dataset and inversion.

use viewlab::cli::{self, Axis, Context, ExperimentConfig, GridSpec, SeedPolicy, Stage};
use viewlab::Result;

pub fn run() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let base = ExperimentConfig::default().apply_overrides(&[
        "dataset.train_per_class=16".into(),
        "dataset.test_per_class=8".into(),
        "dataset.height=16".into(),
        "dataset.width=16".into(),
        "inversion.encoder_steps=20".into(),
        "inversion.discriminator_steps=10".into(),
        "inversion.latent_opt_steps=5".into(),
        "viewgen.perturb.count=2".into(),
        "train.epochs=2".into(),
        "train.batch_size=16".into(),
    ])?;
    let base = ExperimentConfig {
        output_dir: dir.path().to_path_buf(),
        ..base
    };

    // Shared upstream artifacts; every cell reads them from the base directory.
    let ctx = Context::new(base.clone())?;
    cli::make_dataset_cmd(&ctx)?;
    cli::invert_cmd(&ctx)?;

    let grid = GridSpec {
        axes: vec![Axis::single("viewgen.perturb.sigma", vec![0.1.into(), 0.4.into()])],
        stages: vec![Stage::GenViews, Stage::Pretrain, Stage::Probe, Stage::Knn],
        seeds: SeedPolicy::PerCell,
    };
    let (path, rows) = cli::run_sweep(&base, &grid, 1)?;
    for row in &rows {
        println!(
            "cell {} {:?}: {} seed {} probe {} 5-NN {}",
            row.cell,
            row.overrides,
            row.status,
            row.seed,
            row.metrics.get("probe_acc").map_or("-".into(), |v| v.to_string()),
            row.metrics.get("knn5_acc").map_or("-".into(), |v| v.to_string())
        );
    }
    println!("{} lines in {}", rows.len(), path.display());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
