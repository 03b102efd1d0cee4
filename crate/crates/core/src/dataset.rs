//! Procedural blob-image datasets and their on-disk format.
//!
//! Every class fixes the layout of the blobs (positions and sizes); colours are
//! drawn per image, so class identity is geometric and survives colour jitter.
//!
//! A split file is `b"VLDSET01"`, a `u32` little-endian header length, a JSON
//! header, then per record the id (`u64`), label (`u32`) and image (`f32`), all
//! little-endian.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use viewlab_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::modelzoo::{zoo, BlobSpec, DifferentiableMap, ImageTensor};
use crate::rng::{self, purpose};
use crate::stamp::Stamp;

const MAGIC: &[u8; 8] = b"VLDSET01";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub height: usize,
    pub width: usize,
    /// Std of the per-blob offset added to the class layout latents.
    pub layout_jitter: f64,
    /// Std of one position offset shared by all blobs of an image.
    pub shift_jitter: f64,
    /// Std of the colour latents.
    pub color_spread: f64,
    /// Std of additive pixel noise.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: 4,
            train_per_class: 500,
            test_per_class: 100,
            height: 32,
            width: 32,
            layout_jitter: 0.3,
            shift_jitter: 1.5,
            color_spread: 1.5,
            pixel_noise: 0.02,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("a dataset needs at least two classes"));
        }
        if self.train_per_class == 0 {
            return Err(Error::config("train_per_class must be positive"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("images must be at least 8x8"));
        }
        if !(self.layout_jitter >= 0.0 && self.shift_jitter >= 0.0 && self.color_spread >= 0.0 && self.pixel_noise >= 0.0) {
            return Err(Error::config("dataset noise levels must be non-negative"));
        }
        Ok(())
    }

    pub fn blob_spec(&self) -> BlobSpec {
        BlobSpec {
            height: self.height,
            width: self.width,
            ..BlobSpec::default()
        }
    }

    pub fn id(&self) -> String {
        format!(
            "blobs-c{}-n{}-{}x{}-s{}",
            self.classes, self.train_per_class, self.height, self.width, self.seed
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.vds",
            Split::Test => "test.vds",
        }
    }

    fn key(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

/// Labeled images `[N, C, H, W]` with stable per-image ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub split: Split,
    pub classes: usize,
    pub images: Tensor,
    pub labels: Vec<u32>,
    pub ids: Vec<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> ImageTensor {
        ImageTensor::new(self.image_shape().to_vec(), self.images.row(i).to_vec())
    }

    /// Images `[k, C, H, W]` at the given positions.
    pub fn gather(&self, rows: &[usize]) -> Tensor {
        self.images.select_rows(rows)
    }

    /// Position of each id.
    pub fn position_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    /// The first `n` images, for quick experiments.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let rows: Vec<usize> = (0..n).collect();
        Dataset {
            id: self.id.clone(),
            split: self.split,
            classes: self.classes,
            images: self.gather(&rows),
            labels: self.labels[..n].to_vec(),
            ids: self.ids[..n].to_vec(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Class layout latents: `(x, y, scale)` for every blob.
fn class_layout(cfg: &DatasetConfig, class: usize, spec: &BlobSpec) -> Vec<f64> {
    let mut r = rng::stream(&[cfg.seed, purpose::DATASET, 99, class as u64]);
    (0..spec.blobs * 3).map(|_| 1.2 * Distribution::<f64>::sample(&StandardNormal, &mut r)).collect()
}

fn make_split(cfg: &DatasetConfig, split: Split) -> Result<Dataset> {
    let spec = cfg.blob_spec();
    let g = zoo::blob_generator(spec)?;
    let per_class = match split {
        Split::Train => cfg.train_per_class,
        Split::Test => cfg.test_per_class,
    };
    let layouts: Vec<Vec<f64>> = (0..cfg.classes).map(|c| class_layout(cfg, c, &spec)).collect();
    let n = per_class * cfg.classes;
    let m = spec.latent_dim();
    let mut latents = Vec::with_capacity(n * m);
    let mut labels = Vec::with_capacity(n);
    // Interleave classes so every prefix is close to balanced.
    for i in 0..per_class {
        for (c, layout) in layouts.iter().enumerate() {
            let mut r = rng::stream(&[cfg.seed, purpose::DATASET, split.key(), c as u64, i as u64]);
            let shift: [f64; 2] = [StandardNormal.sample(&mut r), StandardNormal.sample(&mut r)];
            for b in 0..spec.blobs {
                for k in 0..3 {
                    let jitter: f64 = StandardNormal.sample(&mut r);
                    let moved = if k < 2 { cfg.shift_jitter * shift[k] } else { 0.0 };
                    latents.push(layout[b * 3 + k] + moved + cfg.layout_jitter * jitter);
                }
                for _ in 0..spec.channels {
                    let col: f64 = StandardNormal.sample(&mut r);
                    latents.push(cfg.color_spread * col);
                }
            }
            labels.push(c as u32);
        }
    }
    let mut images = g.eval(&Tensor::matrix(n, m, latents))?;
    if cfg.pixel_noise > 0.0 {
        let noise = Normal::new(0.0, cfg.pixel_noise).map_err(|e| Error::config(e.to_string()))?;
        let mut r = rng::stream(&[cfg.seed, purpose::DATASET, split.key(), 7]);
        for v in images.data_mut() {
            *v = (*v + noise.sample(&mut r)).clamp(0.0, 1.0);
        }
    }
    // Stored precision is f32; keep the in-memory copy identical to a reload.
    for v in images.data_mut() {
        *v = *v as f32 as f64;
    }
    let offset = match split {
        Split::Train => 0,
        Split::Test => (cfg.train_per_class * cfg.classes) as u64,
    };
    Ok(Dataset {
        id: cfg.id(),
        split,
        classes: cfg.classes,
        images: images.reshape(&[n, spec.channels, spec.height, spec.width]),
        labels,
        ids: (0..n as u64).map(|i| offset + i).collect(),
    })
}

/// Generates the train and test splits.
pub fn make_dataset(cfg: &DatasetConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    Ok((make_split(cfg, Split::Train)?, make_split(cfg, Split::Test)?))
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dataset_id: String,
    split: Split,
    count: usize,
    classes: usize,
    image_shape: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stamp: Option<Stamp>,
}

pub fn to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    to_bytes_stamped(ds, None)
}

pub fn to_bytes_stamped(ds: &Dataset, stamp: Option<&Stamp>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        dataset_id: ds.id.clone(),
        split: ds.split,
        count: ds.len(),
        classes: ds.classes,
        image_shape: ds.image_shape(),
        stamp: stamp.cloned(),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + ds.images.numel() * 4 + ds.len() * 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for i in 0..ds.len() {
        out.extend_from_slice(&ds.ids[i].to_le_bytes());
        out.extend_from_slice(&ds.labels[i].to_le_bytes());
        for &v in ds.images.row(i) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn read_header<'b>(bytes: &'b [u8], origin: &Path) -> Result<(Header, &'b [u8])> {
    let bad = |reason: &str| Error::Format {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a dataset file"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = serde_json::from_slice(bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?)?;
    Ok((header, &bytes[12 + hlen..]))
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Dataset> {
    let bad = |reason: &str| Error::Format {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    let (header, body) = read_header(bytes, origin)?;
    let [c, h, w] = header.image_shape;
    let pixels = c * h * w;
    let record = 12 + 4 * pixels;
    if body.len() != header.count * record {
        return Err(bad("payload length does not match the record count"));
    }
    let mut ids = Vec::with_capacity(header.count);
    let mut labels = Vec::with_capacity(header.count);
    let mut data = Vec::with_capacity(header.count * pixels);
    for rec in body.chunks_exact(record) {
        ids.push(u64::from_le_bytes(rec[..8].try_into().unwrap()));
        let label = u32::from_le_bytes(rec[8..12].try_into().unwrap());
        if label as usize >= header.classes {
            return Err(bad("label out of range"));
        }
        labels.push(label);
        data.extend(rec[12..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64));
    }
    Ok(Dataset {
        id: header.dataset_id,
        split: header.split,
        classes: header.classes,
        images: Tensor::new(vec![header.count, c, h, w], data),
        labels,
        ids,
    })
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(ds)?)
}

pub fn save_stamped(ds: &Dataset, path: &Path, stamp: Option<&Stamp>) -> Result<()> {
    write_atomic(path, &to_bytes_stamped(ds, stamp)?)
}

/// The provenance recorded in a dataset file header, if any.
pub fn read_stamp(path: &Path) -> Result<Option<Stamp>> {
    Ok(read_header(&fs::read(path)?, path)?.0.stamp)
}

pub fn load(path: &Path) -> Result<Dataset> {
    from_bytes(&fs::read(path)?, path)
}

/// Source of labeled splits; other image collections plug in here.
pub trait DatasetLoader {
    fn load_split(&self, split: Split) -> Result<Dataset>;
}

/// Reads splits written by [`save`] from a directory.
#[derive(Clone, Debug)]
pub struct DirLoader {
    pub dir: PathBuf,
}

impl DatasetLoader for DirLoader {
    fn load_split(&self, split: Split) -> Result<Dataset> {
        let path = self.dir.join(split.file_name());
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                command: "make-dataset".into(),
            });
        }
        load(&path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetConfig {
        DatasetConfig {
            classes: 3,
            train_per_class: 8,
            test_per_class: 2,
            height: 16,
            width: 16,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn splits_are_balanced_and_ids_unique() {
        let (train, test) = make_dataset(&tiny()).unwrap();
        assert_eq!(train.len(), 24);
        assert_eq!(train.class_counts(), vec![8, 8, 8]);
        assert_eq!(test.class_counts(), vec![2, 2, 2]);
        let mut all: Vec<u64> = train.ids.iter().chain(&test.ids).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 30);
        assert!(train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let (train, _) = make_dataset(&tiny()).unwrap();
        let bytes = to_bytes(&train).unwrap();
        let back = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, train);
        assert!(from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = to_bytes(&make_dataset(&tiny()).unwrap().0).unwrap();
        let b = to_bytes(&make_dataset(&tiny()).unwrap().0).unwrap();
        assert_eq!(a, b);
        let other = DatasetConfig { seed: 1, ..tiny() };
        assert_ne!(a, to_bytes(&make_dataset(&other).unwrap().0).unwrap());
    }

    #[test]
    fn rejects_degenerate_configs() {
        assert!(make_dataset(&DatasetConfig { classes: 1, ..tiny() }).is_err());
        assert!(make_dataset(&DatasetConfig { train_per_class: 0, ..tiny() }).is_err());
    }
}
