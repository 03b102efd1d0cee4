//! Precomputing generated views once and reading them back by anchor id.

use viewlab::dataset::{make_dataset, DatasetConfig};
use viewlab::modelzoo::{zoo, DifferentiableMap, LatentCode};
use viewlab::viewcache::{self, ViewSource};
use viewlab::viewgen::PerturbConfig;
use viewlab::Result;

pub fn run() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let dcfg = DatasetConfig {
        train_per_class: 8,
        test_per_class: 2,
        height: 16,
        width: 16,
        ..DatasetConfig::default()
    };
    let (train, _) = make_dataset(&dcfg)?;
    let g = zoo::blob_generator(dcfg.blob_spec())?;
    let e = zoo::toy_inverter(train.image_shape(), dcfg.blob_spec().latent_dim(), 1)?;
    let latents = (0..train.len())
        .map(|i| Ok(LatentCode(e.eval(&train.gather(&[i]))?.into_data())))
        .collect::<Result<Vec<_>>>()?;

    let inv_path = dir.path().join("latents.vlc");
    viewcache::write_inversions(&inv_path, &train, &g, &latents, None)?;
    let inversions = viewcache::read_cache(&inv_path)?;

    let path = dir.path().join("w_perturb.vlc");
    let source = ViewSource::Perturb {
        config: PerturbConfig { sigma: 0.2, count: 4 },
        inversions: &inversions,
    };
    let summary = viewcache::generate_and_cache(&train, &g, source, 0, &path, None)?;
    println!(
        "wrote {} anchors x {} views ({} bytes), sha256 {}",
        summary.records,
        summary.views_per_anchor,
        std::fs::metadata(&path)?.len(),
        &summary.checksum[..16]
    );

    let cache = viewcache::read_cache(&path)?;
    let id = train.ids[3];
    let record = cache.record(id)?;
    let view = record.image(2, train.image_shape());
    println!("anchor {id}: view 2 has shape {:?}, latent dim {}", view.shape(), record.latent(2, cache.header.latent_dim).dim());

    let mut bytes = std::fs::read(&path)?;
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes)?;
    match viewcache::read_cache(&path) {
        Err(e) => println!("corrupted copy rejected: {e}"),
        Ok(_) => println!("corrupted copy was accepted"),
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
