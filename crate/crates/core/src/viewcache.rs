//! Binary store of generated views so training never calls the generator.
//!
//! Layout: `b"VLVCACHE"`, format version (`u32`), header length (`u32`), a JSON
//! [`CacheHeader`], then one record per anchor: the anchor id (`u64`), its
//! `n` latents and, when the cache holds images, its `n` images. Numbers are
//! little-endian and values are `f32`. The header carries the SHA-256 of the
//! record payload.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use viewlab_autodiff::Tensor;

use crate::dataset::{write_atomic, Dataset};
use crate::error::{Error, Result};
use crate::modelzoo::{checkpoint, DifferentiableMap, LatentCode, Network};
use crate::rng::{self, purpose};
use crate::stamp::Stamp;
use crate::viewgen::{self, PerturbConfig, WSearchConfig};

pub const MAGIC: &[u8; 8] = b"VLVCACHE";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheHeader {
    pub dataset_id: String,
    /// SHA-256 of the generator checkpoint bytes.
    pub generator_hash: String,
    /// Which operation produced the records (`w_perturb`, `w_search`, `inversion`).
    pub source: String,
    pub views_per_anchor: usize,
    pub image_shape: [usize; 3],
    pub latent_dim: usize,
    pub records: usize,
    pub has_images: bool,
    pub payload_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stamp: Option<Stamp>,
}

/// Everything in the header except the derived fields.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheMeta {
    pub dataset_id: String,
    pub generator_hash: String,
    pub source: String,
    pub views_per_anchor: usize,
    pub image_shape: [usize; 3],
    pub latent_dim: usize,
    pub has_images: bool,
    pub stamp: Option<Stamp>,
}

/// One anchor's views, stored at `f32` precision.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub anchor_id: u64,
    /// `n * latent_dim` values.
    pub latents: Vec<f32>,
    /// `n * C * H * W` values, empty for latent-only caches.
    pub images: Vec<f32>,
}

impl CacheEntry {
    pub fn from_views(anchor_id: u64, views: &[(LatentCode, Tensor)], with_images: bool) -> Self {
        CacheEntry {
            anchor_id,
            latents: views.iter().flat_map(|(w, _)| w.as_slice().iter().map(|&v| v as f32)).collect(),
            images: if with_images {
                views.iter().flat_map(|(_, x)| x.data().iter().map(|&v| v as f32)).collect()
            } else {
                Vec::new()
            },
        }
    }

    pub fn latent(&self, k: usize, dim: usize) -> LatentCode {
        LatentCode(self.latents[k * dim..(k + 1) * dim].iter().map(|&v| v as f64).collect())
    }

    /// View `k` as a `[C, H, W]` image.
    pub fn image(&self, k: usize, shape: [usize; 3]) -> Tensor {
        let n = shape.iter().product::<usize>();
        Tensor::new(shape.to_vec(), self.images[k * n..(k + 1) * n].iter().map(|&v| v as f64).collect())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn generator_hash(g: &Network) -> Result<String> {
    Ok(sha256_hex(&checkpoint::to_bytes(g)?))
}

fn record_len(views: usize, latent_dim: usize, image_shape: [usize; 3], has_images: bool) -> usize {
    let images = if has_images {
        views * image_shape.iter().product::<usize>()
    } else {
        0
    };
    8 + 4 * (views * latent_dim + images)
}

impl CacheMeta {
    fn record_len(&self) -> usize {
        record_len(self.views_per_anchor, self.latent_dim, self.image_shape, self.has_images)
    }
}

fn encode(meta: &CacheMeta, entries: &[CacheEntry]) -> Result<(Vec<u8>, String)> {
    if entries.is_empty() {
        return Err(Error::config("refusing to write an empty view cache"));
    }
    if meta.views_per_anchor == 0 || meta.latent_dim == 0 {
        return Err(Error::config("cache needs at least one view and a non-empty latent"));
    }
    let n = meta.views_per_anchor;
    let pixels: usize = meta.image_shape.iter().product();
    let mut seen = std::collections::HashSet::new();
    let mut payload = Vec::with_capacity(entries.len() * meta.record_len());
    for e in entries {
        if !seen.insert(e.anchor_id) {
            return Err(Error::config(format!("duplicate anchor id {} in cache entries", e.anchor_id)));
        }
        let want_images = if meta.has_images { n * pixels } else { 0 };
        if e.latents.len() != n * meta.latent_dim || e.images.len() != want_images {
            return Err(Error::shape(
                format!("cache entry for anchor {}", e.anchor_id),
                &[n * meta.latent_dim, want_images],
                &[e.latents.len(), e.images.len()],
            ));
        }
        payload.extend_from_slice(&e.anchor_id.to_le_bytes());
        for v in e.latents.iter().chain(&e.images) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = sha256_hex(&payload);
    let header = CacheHeader {
        dataset_id: meta.dataset_id.clone(),
        generator_hash: meta.generator_hash.clone(),
        source: meta.source.clone(),
        views_per_anchor: n,
        image_shape: meta.image_shape,
        latent_dim: meta.latent_dim,
        records: entries.len(),
        has_images: meta.has_images,
        payload_sha256: checksum.clone(),
        stamp: meta.stamp.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok((out, checksum))
}

impl CacheHeader {
    fn record_len(&self) -> usize {
        record_len(self.views_per_anchor, self.latent_dim, self.image_shape, self.has_images)
    }
}

/// Writes the cache atomically and returns the payload checksum.
pub fn write_cache(path: &Path, meta: &CacheMeta, entries: &[CacheEntry]) -> Result<String> {
    let (bytes, checksum) = encode(meta, entries)?;
    write_atomic(path, &bytes)?;
    Ok(checksum)
}

/// A validated cache held in memory; records are decoded on access.
#[derive(Clone, Debug)]
pub struct ViewCache {
    pub header: CacheHeader,
    payload: Vec<u8>,
    index: HashMap<u64, usize>,
}

impl ViewCache {
    pub fn from_bytes(mut bytes: Vec<u8>, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: origin.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a view cache (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported view cache version {version} (this build reads version {VERSION})")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let json = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: CacheHeader = serde_json::from_slice(json)?;
        let payload = bytes.split_off(16 + hlen);
        let actual = sha256_hex(&payload);
        if actual != header.payload_sha256 {
            return Err(Error::Checksum {
                expected: header.payload_sha256,
                actual,
            });
        }
        let rec = header.record_len();
        if payload.len() != rec * header.records {
            return Err(bad("payload length does not match the record count".into()));
        }
        let mut index = HashMap::with_capacity(header.records);
        for (i, chunk) in payload.chunks_exact(rec).enumerate() {
            let id = u64::from_le_bytes(chunk[..8].try_into().unwrap());
            if index.insert(id, i).is_some() {
                return Err(bad(format!("anchor id {id} appears twice")));
            }
        }
        Ok(ViewCache { header, payload, index })
    }

    pub fn len(&self) -> usize {
        self.header.records
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, anchor_id: u64) -> bool {
        self.index.contains_key(&anchor_id)
    }

    fn decode(&self, i: usize) -> CacheEntry {
        let h = &self.header;
        let rec = h.record_len();
        let chunk = &self.payload[i * rec..(i + 1) * rec];
        let mut floats = chunk[8..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()));
        let latents = floats.by_ref().take(h.views_per_anchor * h.latent_dim).collect();
        CacheEntry {
            anchor_id: u64::from_le_bytes(chunk[..8].try_into().unwrap()),
            latents,
            images: floats.collect(),
        }
    }

    /// Random access by anchor id.
    pub fn record(&self, anchor_id: u64) -> Result<CacheEntry> {
        self.index
            .get(&anchor_id)
            .map(|&i| self.decode(i))
            .ok_or(Error::MissingRecord(anchor_id))
    }

    /// Records in file order.
    pub fn iter(&self) -> impl Iterator<Item = CacheEntry> + '_ {
        (0..self.len()).map(|i| self.decode(i))
    }

    /// The raw record payload.
    pub fn payload(&self) -> &[u8] {
        &self.payload
    }
}

pub fn read_cache(path: &Path) -> Result<ViewCache> {
    ViewCache::from_bytes(fs::read(path)?, path)
}

/// How views are produced for each anchor.
pub enum ViewSource<'a> {
    /// Gaussian perturbations of cached inversions.
    Perturb {
        config: PerturbConfig,
        inversions: &'a ViewCache,
    },
    /// Latent search around the anchor's embedding under `encoder`.
    Search {
        config: WSearchConfig,
        encoder: &'a dyn DifferentiableMap,
        inverter: &'a dyn DifferentiableMap,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheSummary {
    pub records: usize,
    pub skipped: Vec<u64>,
    pub views_per_anchor: usize,
    pub source: String,
    /// Mean `| ||z_k - z0|| - epsilon1 |` over all searched views.
    pub mean_abs_residual: Option<f64>,
    pub sigma: Option<f64>,
    pub checksum: String,
    pub wall_clock_secs: f64,
}

/// Largest fraction of anchors that may fail before the whole run fails.
pub const MAX_SKIP_FRACTION: f64 = 0.01;

/// Generates views for every anchor of `dataset` and writes them to `path`.
pub fn generate_and_cache(
    dataset: &Dataset,
    g: &Network,
    source: ViewSource<'_>,
    seed: u64,
    path: &Path,
    stamp: Option<&Stamp>,
) -> Result<CacheSummary> {
    let start = Instant::now();
    let latent_dim: usize = g.input_shape().iter().product();
    let shape = dataset.image_shape();
    let (n, name, sigma) = match &source {
        ViewSource::Perturb { config, .. } => (config.count, "w_perturb", Some(config.sigma)),
        ViewSource::Search { config, .. } => (config.views, "w_search", None),
    };
    let mut entries = Vec::with_capacity(dataset.len());
    let mut skipped = Vec::new();
    let mut residuals = Vec::new();
    for i in 0..dataset.len() {
        let id = dataset.ids[i];
        let produced = match &source {
            ViewSource::Perturb { config, inversions } => inversions.record(id).and_then(|rec| {
                let w0 = rec.latent(0, inversions.header.latent_dim);
                viewgen::w_perturb_latent(&w0, g, config, &mut rng::stream(&[seed, purpose::PERTURB, id]))
            }),
            ViewSource::Search {
                config,
                encoder,
                inverter,
            } => viewgen::w_search(
                &dataset.image(i),
                *encoder,
                g,
                *inverter,
                config,
                &mut rng::stream(&[seed, purpose::SEARCH, id]),
            )
            .map(|out| {
                residuals.extend(out.residuals.iter().map(|r| r.abs()));
                out.views
            }),
        };
        match produced {
            Ok(views) => entries.push(CacheEntry::from_views(id, &views, true)),
            Err(e) => {
                log::warn!("view generation failed for anchor {id}: {e}");
                skipped.push(id);
            }
        }
    }
    if skipped.len() as f64 > MAX_SKIP_FRACTION * dataset.len() as f64 {
        return Err(Error::Diverged(format!(
            "view generation failed for {} of {} anchors",
            skipped.len(),
            dataset.len()
        )));
    }
    let meta = CacheMeta {
        dataset_id: dataset.id.clone(),
        generator_hash: generator_hash(g)?,
        source: name.into(),
        views_per_anchor: n,
        image_shape: shape,
        latent_dim,
        has_images: true,
        stamp: stamp.cloned(),
    };
    let checksum = write_cache(path, &meta, &entries)?;
    Ok(CacheSummary {
        records: entries.len(),
        skipped,
        views_per_anchor: n,
        source: name.into(),
        mean_abs_residual: (!residuals.is_empty()).then(|| residuals.iter().sum::<f64>() / residuals.len() as f64),
        sigma,
        checksum,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Stores one latent per anchor (an inversion cache).
pub fn write_inversions(
    path: &Path,
    dataset: &Dataset,
    g: &Network,
    latents: &[LatentCode],
    stamp: Option<&Stamp>,
) -> Result<String> {
    if latents.len() != dataset.len() {
        return Err(Error::config("one latent per dataset image is required"));
    }
    let latent_dim: usize = g.input_shape().iter().product();
    let entries: Vec<CacheEntry> = dataset
        .ids
        .iter()
        .zip(latents)
        .map(|(&id, w)| CacheEntry {
            anchor_id: id,
            latents: w.as_slice().iter().map(|&v| v as f32).collect(),
            images: Vec::new(),
        })
        .collect();
    let meta = CacheMeta {
        dataset_id: dataset.id.clone(),
        generator_hash: generator_hash(g)?,
        source: "inversion".into(),
        views_per_anchor: 1,
        image_shape: dataset.image_shape(),
        latent_dim,
        has_images: false,
        stamp: stamp.cloned(),
    };
    write_cache(path, &meta, &entries)
}
