//! Contrastive pretraining with expert views and, optionally, cached generated views.
//!
//! Three ways of using generated views:
//! - `Baseline`: two expert views per anchor.
//! - `A1`: the second expert view is replaced by a weakly transformed cached view.
//! - `A2`: both expert views are kept and `m` cached views are appended as extra positives.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use viewlab_autodiff::{Tape, Tensor};

use crate::batching::{IndexMap, MultiviewBatch};
use crate::dataset::{write_atomic, Dataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{self, LossConfig, LossVariant, Reduction};
use crate::modelzoo::{checkpoint, encode_var, zoo, DifferentiableMap, Network};
use crate::optim::{cosine_lr, param_grads, Sgd, SgdConfig};
use crate::rng::{self, purpose};
use crate::stamp::Stamp;
use crate::viewcache::ViewCache;
use crate::viewgen::{expert_transform, TransformConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assimilation {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "a1")]
    A1,
    #[serde(rename = "a2")]
    A2,
}

/// Where the non-expert views come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSourceKind {
    Expert,
    WSearchCache,
    WPerturbCache,
}

impl ViewSourceKind {
    /// The `source` tag a matching cache carries.
    pub fn cache_tag(self) -> Option<&'static str> {
        match self {
            ViewSourceKind::Expert => None,
            ViewSourceKind::WSearchCache => Some("w_search"),
            ViewSourceKind::WPerturbCache => Some("w_perturb"),
        }
    }
}

/// Published large-scale schedules, kept for reference runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Cifar10,
    Cifar100,
    TinyImageNet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub assimilation: Assimilation,
    pub view_source: ViewSourceKind,
    pub sgd: SgdConfig,
    pub cosine_decay: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossConfig,
    pub seed: u64,
    /// Cached views appended per anchor in A2 batches.
    pub generated_per_anchor: usize,
    pub expert: TransformConfig,
    pub weak: TransformConfig,
    /// Apply `weak` to A2's appended views too (A1 always applies it).
    pub weak_on_generated: bool,
    /// Epochs between k-NN evaluations; 0 disables them.
    pub knn_every: usize,
    pub knn_k: usize,
    /// Hidden width of the predictor used by the SimSiam losses.
    pub predictor_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            assimilation: Assimilation::A2,
            view_source: ViewSourceKind::WPerturbCache,
            // Best of {0.02, 0.1} for the baseline on the 32x32 blob set.
            sgd: SgdConfig {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            cosine_decay: true,
            batch_size: 64,
            epochs: 50,
            loss: LossConfig {
                reduction: Reduction::Mean,
                ..LossConfig::default()
            },
            seed: 0,
            generated_per_anchor: 1,
            expert: TransformConfig::full(),
            weak: TransformConfig::weak(),
            weak_on_generated: true,
            knn_every: 5,
            knn_k: 5,
            predictor_hidden: 64,
        }
    }
}

impl TrainConfig {
    /// Two expert views per anchor with the two-set InfoNCE loss.
    pub fn baseline() -> Self {
        TrainConfig {
            assimilation: Assimilation::Baseline,
            view_source: ViewSourceKind::Expert,
            loss: LossConfig {
                variant: LossVariant::InfoNce,
                ..TrainConfig::default().loss
            },
            ..TrainConfig::default()
        }
    }

    /// The full-scale schedule for `b` with A2 assimilation.
    pub fn benchmark(b: Benchmark) -> Self {
        let (lr, wd, batch, epochs, variant) = match b {
            Benchmark::Cifar10 => (0.015, 5e-5, 128, 800, LossVariant::A2InfoNce),
            Benchmark::Cifar100 => (0.5, 1e-4, 512, 1200, LossVariant::A2SimClr),
            Benchmark::TinyImageNet => (0.5, 1e-4, 512, 1000, LossVariant::A2SimClr),
        };
        let d = TrainConfig::default();
        TrainConfig {
            sgd: SgdConfig {
                lr,
                momentum: 0.9,
                weight_decay: wd,
            },
            cosine_decay: true,
            batch_size: batch,
            epochs,
            loss: LossConfig {
                temperature: 0.5,
                variant,
                ..d.loss
            },
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.sgd.lr >= 0.0 && self.sgd.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be finite and non-negative, got {}", self.sgd.lr)));
        }
        self.loss.validate()?;
        self.expert.validate()?;
        self.weak.validate()?;
        let variant = self.loss.variant;
        match self.assimilation {
            Assimilation::Baseline => {
                if variant.is_multiview() && variant != LossVariant::A2Full {
                    return Err(Error::config(format!("{variant:?} needs generated views; use assimilation a2")));
                }
            }
            Assimilation::A1 | Assimilation::A2 => {
                if self.view_source == ViewSourceKind::Expert {
                    return Err(Error::config(format!(
                        "{:?} assimilation needs a w_search_cache or w_perturb_cache view source",
                        self.assimilation
                    )));
                }
                if self.assimilation == Assimilation::A1 && variant.is_multiview() && variant != LossVariant::A2Full {
                    return Err(Error::config(format!("A1 batches hold two views per anchor; {variant:?} needs a2")));
                }
                if self.assimilation == Assimilation::A2 {
                    if !variant.is_multiview() {
                        return Err(Error::config(format!("A2 batches need a multiview loss, got {variant:?}")));
                    }
                    if self.generated_per_anchor == 0 {
                        return Err(Error::config("A2 needs at least one generated view per anchor"));
                    }
                }
            }
        }
        if self.knn_every > 0 && self.knn_k == 0 {
            return Err(Error::config("knn_k must be at least 1"));
        }
        Ok(())
    }

    fn uses_cache(&self) -> bool {
        self.assimilation != Assimilation::Baseline
    }
}

fn check_cache(cfg: &TrainConfig, ds: &Dataset, cache: Option<&ViewCache>) -> Result<()> {
    if !cfg.uses_cache() {
        return Ok(());
    }
    let cache = cache.ok_or_else(|| Error::config(format!("{:?} assimilation needs a view cache", cfg.assimilation)))?;
    let h = &cache.header;
    if !h.has_images {
        return Err(Error::config("the view cache holds latents only; run gen-views first"));
    }
    if h.image_shape != ds.image_shape() {
        return Err(Error::shape("cached view", &ds.image_shape(), &h.image_shape));
    }
    if h.dataset_id != ds.id {
        return Err(Error::config(format!(
            "view cache was built for dataset {} but training uses {}",
            h.dataset_id, ds.id
        )));
    }
    if let Some(tag) = cfg.view_source.cache_tag() {
        if h.source != tag {
            return Err(Error::config(format!("view source {tag} given a {} cache", h.source)));
        }
    }
    Ok(())
}

/// Builds the batch for the anchors at `positions` of `ds` in epoch `epoch`.
///
/// Each anchor draws from its own streams keyed by `(seed, epoch, anchor id)`,
/// so the result does not depend on batch composition or order.
pub fn assemble_views(
    ds: &Dataset,
    positions: &[usize],
    cfg: &TrainConfig,
    cache: Option<&ViewCache>,
    epoch: u64,
) -> Result<MultiviewBatch> {
    let n = positions.len();
    let two = IndexMap::build_two_view(n)?;
    let map = match cfg.assimilation {
        Assimilation::A2 => two.append_generated(cfg.generated_per_anchor)?,
        _ => two,
    };
    let shape = ds.image_shape();
    let mut views = vec![None; map.len()];
    let mut anchor_ids = vec![0; map.len()];
    for (a, &pos) in positions.iter().enumerate() {
        let id = ds.ids[pos];
        let x = ds.image(pos);
        let mut tr = rng::stream(&[cfg.seed, purpose::TRANSFORM, epoch, id]);
        let mut pick = rng::stream(&[cfg.seed, purpose::CACHE_PICK, epoch, id]);
        let mut cached = |weak: bool, tr: &mut rng::StreamRng| -> Result<Tensor> {
            let cache = cache.ok_or_else(|| Error::config("generated views requested without a view cache"))?;
            let rec = cache.record(id)?;
            let k = pick.random_range(0..cache.header.views_per_anchor);
            let img = rec.image(k, shape);
            if weak {
                expert_transform(&img, &cfg.weak, tr)
            } else {
                Ok(img)
            }
        };
        let first = expert_transform(&x, &cfg.expert, &mut tr)?;
        let second = match cfg.assimilation {
            Assimilation::A1 => cached(true, &mut tr)?,
            _ => expert_transform(&x, &cfg.expert, &mut tr)?,
        };
        let mut slots = vec![(map.first_set().start + a, first), (map.second_set().start + a, second)];
        for slot in map.generated_of(a) {
            slots.push((slot, cached(cfg.weak_on_generated, &mut tr)?));
        }
        for (slot, v) in slots {
            views[slot] = Some(v);
            anchor_ids[slot] = id;
        }
    }
    let views: Vec<Tensor> = views.into_iter().map(|v| v.expect("every slot filled")).collect();
    MultiviewBatch::new(Tensor::stack(&views), anchor_ids, map)
}

/// The encoder (and predictor, for the SimSiam losses) with their optimizers.
#[derive(Clone, Debug)]
pub struct Learner {
    pub encoder: Network,
    pub predictor: Option<Network>,
    opt: Sgd,
    pred_opt: Sgd,
}

impl Learner {
    pub fn new(encoder: Network, cfg: &TrainConfig) -> Result<Self> {
        let predictor = if cfg.loss.variant.needs_predictor() {
            let dim = encoder.output_shape().iter().product();
            Some(zoo::predictor(dim, cfg.predictor_hidden, rng::mix(&[cfg.seed, purpose::INIT, 1]))?)
        } else {
            None
        };
        Ok(Learner {
            encoder,
            predictor,
            opt: Sgd::new(cfg.sgd),
            pred_opt: Sgd::new(cfg.sgd),
        })
    }

    /// One momentum-SGD update at learning rate `lr`; returns the loss before the update.
    pub fn train_step(&mut self, batch: &MultiviewBatch, loss_cfg: &LossConfig, lr: f64) -> Result<f64> {
        let (value, enc_grads, pred_grads) = {
            let tape = Tape::new();
            let fp = self.encoder.bind(&tape);
            let z = encode_var(&self.encoder, tape.constant(batch.views.clone()), &fp);
            let pp = self.predictor.as_ref().map(|p| p.bind(&tape));
            let pred = self.predictor.as_ref().zip(pp.as_deref());
            let loss = losses::graph::loss(z, &batch.index_map, loss_cfg, pred)?;
            let value = loss.item();
            if !value.is_finite() {
                let mut ids = batch.anchor_ids[..batch.index_map.anchors()].to_vec();
                ids.truncate(16);
                return Err(Error::NonFinite {
                    what: format!("training loss ({value}) on a batch with anchors {ids:?}"),
                    index: 0,
                });
            }
            let grads = tape.backward(loss);
            (value, param_grads(&grads, &fp), pp.map(|v| param_grads(&grads, &v)))
        };
        self.opt.step(self.encoder.params_mut(), &enc_grads, lr)?;
        if let (Some(p), Some(g)) = (self.predictor.as_mut(), pred_grads) {
            self.pred_opt.step(p.params_mut(), &g, lr)?;
        }
        Ok(value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub knn5_acc: Option<f64>,
}

pub const METRIC_COLUMNS: &str = "step,epoch,lr,loss,knn5_acc";

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub encoder: Network,
    pub predictor: Option<Network>,
    pub rows: Vec<MetricRow>,
    /// Mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn metrics_csv(&self, stamp: Option<&Stamp>) -> String {
        let mut out = String::new();
        if let Some(s) = stamp {
            out.push_str(&s.csv_comment());
            out.push('\n');
        }
        out.push_str(METRIC_COLUMNS);
        out.push('\n');
        for r in &self.rows {
            let knn = r.knn5_acc.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.step, r.epoch, r.lr, r.loss, knn);
        }
        out
    }

    /// Writes `encoder.ckpt` and `metrics.csv` under `dir`.
    pub fn save(&self, dir: &Path, stamp: Option<&Stamp>) -> Result<TrainArtifacts> {
        std::fs::create_dir_all(dir)?;
        let art = TrainArtifacts::in_dir(dir);
        checkpoint::save_stamped(&self.encoder, &art.checkpoint, stamp)?;
        write_atomic(&art.metrics, self.metrics_csv(stamp).as_bytes())?;
        Ok(art)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl TrainArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        TrainArtifacts {
            checkpoint: dir.join("encoder.ckpt"),
            metrics: dir.join("metrics.csv"),
        }
    }
}

/// Parses a metric CSV written by [`TrainReport::metrics_csv`].
pub fn read_metrics(text: &str) -> Result<Vec<MetricRow>> {
    let bad = |line: usize, why: &str| Error::Format {
        path: PathBuf::from("metrics.csv"),
        reason: format!("line {line}: {why}"),
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == METRIC_COLUMNS => {}
        Some((i, _)) => return Err(bad(i + 1, "unexpected header")),
        None => return Err(bad(0, "empty file")),
    }
    lines
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad(i + 1, "expected 5 fields"));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(i + 1, "not a number"));
            Ok(MetricRow {
                step: f[0].trim().parse().map_err(|_| bad(i + 1, "bad step"))?,
                epoch: f[1].trim().parse().map_err(|_| bad(i + 1, "bad epoch"))?,
                lr: num(f[2])?,
                loss: num(f[3])?,
                knn5_acc: if f[4].trim().is_empty() { None } else { Some(num(f[4])?) },
            })
        })
        .collect()
}

/// Runs `cfg.epochs` epochs over `train`, logging every step and the k-NN
/// accuracy on `heldout` (queries against `train`) every `knn_every` epochs
/// and after the last one.
pub fn pretrain(
    cfg: &TrainConfig,
    encoder: Network,
    train: &Dataset,
    heldout: Option<&Dataset>,
    cache: Option<&ViewCache>,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_cache(cfg, train, cache)?;
    if train.len() < cfg.batch_size {
        return Err(Error::config(format!(
            "training set of {} images is smaller than batch_size {}",
            train.len(),
            cfg.batch_size
        )));
    }
    encoder.check_batch(&train.gather(&[0]))?;
    let mut learner = Learner::new(encoder, cfg)?;
    let steps_per_epoch = train.len() / cfg.batch_size;
    let total = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rows = Vec::with_capacity(total);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(&[cfg.seed, purpose::SHUFFLE, epoch as u64]));
        let mut sum = 0.0;
        for chunk in order.chunks_exact(cfg.batch_size) {
            let lr = if cfg.cosine_decay { cosine_lr(step, total, cfg.sgd.lr) } else { cfg.sgd.lr };
            let batch = assemble_views(train, chunk, cfg, cache, epoch as u64)?;
            let loss = learner.train_step(&batch, &cfg.loss, lr)?;
            sum += loss;
            step += 1;
            rows.push(MetricRow {
                step,
                epoch,
                lr,
                loss,
                knn5_acc: None,
            });
        }
        epoch_losses.push(sum / steps_per_epoch as f64);
        let due = cfg.knn_every > 0 && (epoch % cfg.knn_every == 0 || epoch == cfg.epochs);
        if let (true, Some(test)) = (due, heldout) {
            let acc = eval::knn_eval(&learner.encoder, train, test, cfg.knn_k)?;
            log::info!("epoch {epoch}: loss {:.4}, {}-NN {:.3}", epoch_losses[epoch - 1], cfg.knn_k, acc);
            if let Some(last) = rows.last_mut() {
                last.knn5_acc = Some(acc);
            }
        }
    }
    Ok(TrainReport {
        encoder: learner.encoder,
        predictor: learner.predictor,
        rows,
        epoch_losses,
    })
}
