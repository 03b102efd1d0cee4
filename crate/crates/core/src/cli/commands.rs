use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use viewlab_autodiff::Tensor;

use super::config::{Calibration, ExperimentConfig, GeneratedSource, MiSpace};
use super::plot::{self, Curve};
use crate::dataset::{self, make_dataset, write_atomic, Dataset, DatasetLoader, DirLoader, Split};
use crate::error::{Error, Result};
use crate::eval::{self, ResultRow};
use crate::inversion::{self, InversionModels};
use crate::modelzoo::{checkpoint, zoo, DifferentiableMap, LatentCode, Network};
use crate::rng::{self, purpose};
use crate::stamp::Stamp;
use crate::trainer::{self, Assimilation};
use crate::viewcache::{self, ViewSource};
use crate::viewgen;

/// Where each subcommand reads and writes, relative to the output directory.
///
/// Reads fall back to `upstream` (a sweep's base directory) when the file is
/// not present locally.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
    pub upstream: Option<PathBuf>,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout {
            root: root.into(),
            upstream: None,
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn inverter(&self) -> PathBuf {
        self.root.join("inversion/inverter.ckpt")
    }
    pub fn inversions(&self) -> PathBuf {
        self.root.join("inversion/latents.vlc")
    }
    pub fn views(&self, source: GeneratedSource) -> PathBuf {
        self.root.join(format!("views/{}.vlc", source.tag()))
    }
    pub fn run_dir(&self, run: &str) -> PathBuf {
        self.root.join("pretrain").join(run)
    }
    pub fn eval_dir(&self, run: &str) -> PathBuf {
        self.root.join("eval").join(run)
    }
    pub fn plot(&self) -> PathBuf {
        self.root.join("plots/knn_curves.svg")
    }

    /// `path` (under `root`) if it exists, else its counterpart under `upstream`.
    fn find(&self, path: PathBuf, command: &str) -> Result<PathBuf> {
        if path.exists() {
            return Ok(path);
        }
        if let Some(up) = &self.upstream {
            if let Ok(rel) = path.strip_prefix(&self.root) {
                let alt = up.join(rel);
                if alt.exists() {
                    return Ok(alt);
                }
            }
        }
        Err(Error::MissingArtifact {
            path,
            command: command.into(),
        })
    }
}

/// What a subcommand produced; printed as JSON by the binary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Outcome {
    pub command: String,
    pub artifacts: Vec<PathBuf>,
    pub summary: Value,
}

/// A JSON results file: provenance, metric rows and free-form details.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub stamp: Stamp,
    pub rows: Vec<ResultRow>,
    #[serde(default)]
    pub details: Value,
}

/// A resolved configuration with its hash and artifact layout.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub layout: Layout,
    pub force: bool,
}

impl Context {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let config = config.resolved()?;
        let config_hash = config.hash()?;
        let layout = Layout::new(config.output_dir.clone());
        Ok(Context {
            config,
            config_hash,
            layout,
            force: false,
        })
    }

    pub fn stamp(&self) -> Stamp {
        Stamp::new(self.config_hash.clone(), self.config.seed)
    }

    fn row(&self, metric: &str, value: f64) -> ResultRow {
        ResultRow {
            metric: metric.into(),
            value,
            config_hash: self.config_hash.clone(),
            seed: self.config.seed,
        }
    }

    /// Name of the pretraining run selected by `train.assimilation`.
    pub fn run_name(&self) -> &'static str {
        run_name(self.config.train.assimilation)
    }

    fn load_split(&self, split: Split) -> Result<Dataset> {
        let dir = self
            .layout
            .find(self.layout.dataset_dir().join(split.file_name()), "make-dataset")?
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let ds = DirLoader { dir }.load_split(split)?;
        let want = self.config.dataset.id();
        if ds.id != want {
            return Err(Error::config(format!(
                "dataset on disk is {} but the config describes {want}; rerun make-dataset",
                ds.id
            )));
        }
        Ok(ds)
    }

    fn load_encoder(&self, run: &str) -> Result<Network> {
        let path = self.layout.find(
            trainer::TrainArtifacts::in_dir(&self.layout.run_dir(run)).checkpoint,
            &format!("pretrain (train.assimilation = {run})"),
        )?;
        checkpoint::load(&path)
    }

    fn write_results(&self, path: &Path, rows: Vec<ResultRow>, details: Value) -> Result<()> {
        let file = ResultFile {
            stamp: self.stamp(),
            rows,
            details,
        };
        write_atomic(path, &serde_json::to_vec_pretty(&file)?)
    }
}

pub fn run_name(a: Assimilation) -> &'static str {
    match a {
        Assimilation::Baseline => "baseline",
        Assimilation::A1 => "a1",
        Assimilation::A2 => "a2",
    }
}

pub fn read_results(path: &Path) -> Result<ResultFile> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn generator(ctx: &Context) -> Result<Network> {
    zoo::blob_generator(ctx.config.dataset.blob_spec())
}

/// Drops timing fields so persisted summaries are identical across re-runs.
fn without_timings(v: &Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.iter()
                .filter(|(k, _)| k.as_str() != "wall_clock_secs")
                .map(|(k, v)| (k.clone(), without_timings(v)))
                .collect(),
        ),
        other => other.clone(),
    }
}

fn write_summary(path: &Path, stamp: &Stamp, summary: &Value) -> Result<()> {
    let doc = json!({"stamp": stamp, "summary": without_timings(summary)});
    write_atomic(path, &serde_json::to_vec_pretty(&doc)?)
}

fn dir_is_nonempty(dir: &Path) -> Result<bool> {
    Ok(dir.is_dir() && fs::read_dir(dir)?.next().is_some())
}

/// Writes the train and test splits and a JSON description.
pub fn make_dataset_cmd(ctx: &Context) -> Result<Outcome> {
    let dir = ctx.layout.dataset_dir();
    if dir_is_nonempty(&dir)? && !ctx.force {
        return Err(Error::config(format!(
            "{} is not empty; pass --force to overwrite it",
            dir.display()
        )));
    }
    let (train, test) = make_dataset(&ctx.config.dataset)?;
    let stamp = ctx.stamp();
    let mut artifacts = Vec::new();
    for ds in [&train, &test] {
        let path = dir.join(ds.split.file_name());
        dataset::save_stamped(ds, &path, Some(&stamp))?;
        artifacts.push(path);
    }
    let summary = json!({
        "dataset_id": train.id,
        "train": train.len(),
        "test": test.len(),
        "classes": train.classes,
        "train_per_class": train.class_counts(),
        "test_per_class": test.class_counts(),
    });
    let meta = dir.join("dataset.json");
    write_summary(&meta, &stamp, &summary)?;
    artifacts.push(meta);
    Ok(Outcome {
        command: "make-dataset".into(),
        artifacts,
        summary,
    })
}

/// Trains the inverter and inverts every training image.
pub fn invert_cmd(ctx: &Context) -> Result<Outcome> {
    let start = Instant::now();
    let cfg = &ctx.config;
    let train = ctx.load_split(Split::Train)?;
    let test = ctx.load_split(Split::Test)?;
    let shape = train.image_shape();
    let seeds = cfg.model_seeds();
    let g = generator(ctx)?;
    let latent_dim: usize = g.input_shape().iter().product();
    let h = zoo::perceptual_net(shape, seeds.perceptual)?;
    let d0 = zoo::toy_discriminator(shape, seeds.discriminator)?;
    let d = if cfg.inversion.lambda_adv > 0.0 {
        inversion::train_discriminator(&train.images, &g, d0, &cfg.inversion)?
    } else {
        d0.freeze()
    };
    let m = InversionModels { g: &g, d: &d, h: &h };
    let heldout: Vec<usize> = (0..test.len().min(256)).collect();
    let e0 = zoo::toy_inverter(shape, latent_dim, seeds.inverter)?;
    let (e, report) = inversion::train_inverter(&train.images, &test.gather(&heldout), e0, m, &cfg.inversion)?;
    let fits = inversion::invert_dataset(&train.images, &e, m, &cfg.inversion)?;
    let n = fits.len() as f64;
    let warm = fits.iter().map(|f| f.initial_loss).sum::<f64>() / n;
    let refined = fits.iter().map(|f| f.final_loss).sum::<f64>() / n;
    let latents: Vec<LatentCode> = fits.into_iter().map(|f| f.latent).collect();

    let stamp = ctx.stamp();
    checkpoint::save_stamped(&e, &ctx.layout.inverter(), Some(&stamp))?;
    viewcache::write_inversions(&ctx.layout.inversions(), &train, &g, &latents, Some(&stamp))?;
    let summary = json!({
        "images": latents.len(),
        "inverter": report,
        "mean_warm_start_loss": warm,
        "mean_refined_loss": refined,
        "wall_clock_secs": start.elapsed().as_secs_f64(),
    });
    let report_path = ctx.layout.root.join("inversion/report.json");
    write_summary(&report_path, &stamp, &summary)?;
    Ok(Outcome {
        command: "invert".into(),
        artifacts: vec![ctx.layout.inverter(), ctx.layout.inversions(), report_path],
        summary,
    })
}

/// Generates and caches views for every training image.
pub fn gen_views_cmd(ctx: &Context) -> Result<Outcome> {
    let cfg = &ctx.config;
    let train = ctx.load_split(Split::Train)?;
    let g = generator(ctx)?;
    let path = ctx.layout.views(cfg.viewgen.source);
    let stamp = ctx.stamp();
    let mut details = json!({});
    let summary = match cfg.viewgen.source {
        GeneratedSource::WPerturb => {
            let inv = viewcache::read_cache(&ctx.layout.find(ctx.layout.inversions(), "invert")?)?;
            let source = ViewSource::Perturb {
                config: cfg.viewgen.perturb,
                inversions: &inv,
            };
            viewcache::generate_and_cache(&train, &g, source, cfg.seed, &path, Some(&stamp))?
        }
        GeneratedSource::WSearch => {
            let e = checkpoint::load(&ctx.layout.find(ctx.layout.inverter(), "invert")?)?;
            let f = ctx.load_encoder(run_name(Assimilation::Baseline))?;
            let mut search = cfg.viewgen.search;
            let n = cfg.viewgen.calibration_images.min(train.len()).max(1);
            let images: Vec<_> = (0..n).map(|i| train.image(i)).collect();
            let estimate = match cfg.viewgen.calibrate {
                Calibration::Off => None,
                Calibration::Embedding => Some(viewgen::calibrate_epsilon(&f, &images, &cfg.train.expert, cfg.seed)?),
                Calibration::Latent => {
                    Some(viewgen::calibrate_epsilon_latent(&e, &images, &cfg.train.expert, cfg.seed)?)
                }
            };
            if let Some(est) = estimate {
                log::info!("calibrated epsilon1 {:.4}, epsilon2 {:.4}", est.epsilon1, est.epsilon2);
                search.epsilon1 = est.epsilon1;
                search.epsilon2 = est.epsilon2;
                details = json!({"calibration": est});
            }
            let source = ViewSource::Search {
                config: search,
                encoder: &f,
                inverter: &e,
            };
            viewcache::generate_and_cache(&train, &g, source, cfg.seed, &path, Some(&stamp))?
        }
    };
    let summary = json!({"cache": summary, "details": details});
    let meta = path.with_extension("json");
    write_summary(&meta, &stamp, &summary)?;
    Ok(Outcome {
        command: "gen-views".into(),
        artifacts: vec![path, meta],
        summary,
    })
}

/// Contrastive pretraining of a fresh encoder.
pub fn pretrain_cmd(ctx: &Context) -> Result<Outcome> {
    let start = Instant::now();
    let cfg = &ctx.config;
    let train = ctx.load_split(Split::Train)?;
    let test = ctx.load_split(Split::Test)?;
    let cache = if cfg.train.assimilation == Assimilation::Baseline {
        None
    } else {
        let path = ctx.layout.find(ctx.layout.views(cfg.viewgen.source), "gen-views")?;
        Some(viewcache::read_cache(&path)?)
    };
    let encoder = zoo::toy_encoder(train.image_shape(), cfg.model.encoder, cfg.model_seeds().encoder)?;
    let report = trainer::pretrain(&cfg.train, encoder, &train, Some(&test), cache.as_ref())?;
    let run = ctx.run_name();
    let dir = ctx.layout.run_dir(run);
    let stamp = ctx.stamp();
    let art = report.save(&dir, Some(&stamp))?;
    let knn: Vec<(usize, f64)> = report.rows.iter().filter_map(|r| r.knn5_acc.map(|a| (r.epoch, a))).collect();
    let summary = json!({
        "run": run,
        "steps": report.rows.len(),
        "epoch_losses": report.epoch_losses,
        "knn_curve": knn,
        "wall_clock_secs": start.elapsed().as_secs_f64(),
    });
    let meta = dir.join("run.json");
    write_summary(&meta, &stamp, &summary)?;
    Ok(Outcome {
        command: "pretrain".into(),
        artifacts: vec![art.checkpoint, art.metrics, meta],
        summary,
    })
}

/// Linear probe accuracy of the pretrained encoder.
pub fn probe_cmd(ctx: &Context) -> Result<Outcome> {
    let run = ctx.run_name();
    let f = ctx.load_encoder(run)?;
    let train = ctx.load_split(Split::Train)?;
    let test = ctx.load_split(Split::Test)?;
    let acc = eval::linear_probe(&f, &train, &test, &ctx.config.eval.probe)?;
    let path = ctx.layout.eval_dir(run).join("probe.json");
    ctx.write_results(&path, vec![ctx.row("probe_acc", acc)], json!({"run": run}))?;
    Ok(Outcome {
        command: "probe".into(),
        artifacts: vec![path],
        summary: json!({"run": run, "probe_acc": acc}),
    })
}

/// k-NN accuracy of the pretrained encoder.
pub fn knn_cmd(ctx: &Context) -> Result<Outcome> {
    let run = ctx.run_name();
    let f = ctx.load_encoder(run)?;
    let train = ctx.load_split(Split::Train)?;
    let test = ctx.load_split(Split::Test)?;
    let k = ctx.config.eval.probe.k;
    let acc = eval::knn_eval(&f, &train, &test, k)?;
    let metric = format!("knn{k}_acc");
    let path = ctx.layout.eval_dir(run).join("knn.json");
    ctx.write_results(&path, vec![ctx.row(&metric, acc)], json!({"run": run, "k": k}))?;
    Ok(Outcome {
        command: "knn".into(),
        artifacts: vec![path],
        summary: json!({"run": run, metric: acc}),
    })
}

/// Average-pools `[N, C, H, W]` images over `p x p` windows into `[N, C * H/p * W/p]`.
pub fn pool_pixels(images: &Tensor, p: usize) -> Tensor {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / p, w / p);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for i in 0..n {
        let img = images.row(i);
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    let mut sum = 0.0;
                    for dy in 0..p {
                        for dx in 0..p {
                            sum += img[ch * h * w + (y * p + dy) * w + x * p + dx];
                        }
                    }
                    out.push(sum / (p * p) as f64);
                }
            }
        }
    }
    Tensor::matrix(n, c * ho * wo, out)
}

/// MINE estimates between anchors, expert views and generated views.
pub fn mi_cmd(ctx: &Context) -> Result<Outcome> {
    let cfg = &ctx.config;
    let run = ctx.run_name();
    let train = ctx.load_split(Split::Train)?;
    let cache = viewcache::read_cache(&ctx.layout.find(ctx.layout.views(cfg.viewgen.source), "gen-views")?)?;
    let f = match cfg.eval.mi_space {
        MiSpace::Embedding => Some(ctx.load_encoder(run)?),
        MiSpace::Pixels => None,
    };
    let n_views = cache.header.views_per_anchor;
    let total = train.len() * n_views;
    let picked = eval::subsample(total, cfg.eval.mi_max_pairs.min(total), cfg.seed);
    let shape = train.image_shape();
    let (mut orig, mut expert, mut generated) = (Vec::new(), Vec::new(), Vec::new());
    for &p in &picked {
        let (i, k) = (p / n_views, p % n_views);
        let id = train.ids[i];
        let x = train.image(i);
        let mut r = rng::stream(&[cfg.seed, purpose::MINE, id, k as u64]);
        expert.push(viewgen::expert_transform(&x, &cfg.train.expert, &mut r)?);
        generated.push(cache.record(id)?.image(k, shape));
        orig.push(x);
    }
    let represent = |views: &[Tensor]| -> Result<Tensor> {
        let batch = Tensor::stack(views);
        match &f {
            Some(f) => eval::embed(f, &batch),
            None => Ok(pool_pixels(&batch, cfg.eval.mi_pixel_pool)),
        }
    };
    let (o, e, g) = (represent(&orig)?, represent(&expert)?, represent(&generated)?);
    let mut rows = Vec::new();
    let mut details = serde_json::Map::new();
    for (name, u, v) in [
        ("mi_original_expert", &o, &e),
        ("mi_original_generated", &o, &g),
        ("mi_expert_generated", &e, &g),
    ] {
        let est = eval::mine_estimate(u, v, &cfg.eval.mine)?;
        log::info!("{name}: {:.4} nats", est.nats);
        rows.push(ctx.row(name, est.nats));
        details.insert(name.into(), serde_json::to_value(&est)?);
    }
    details.insert("pairs".into(), json!(picked.len()));
    details.insert("space".into(), serde_json::to_value(cfg.eval.mi_space)?);
    details.insert("source".into(), json!(cache.header.source));
    let path = ctx.layout.eval_dir(run).join("mi.json");
    let summary: Value = rows.iter().map(|r| (r.metric.clone(), json!(r.value))).collect::<serde_json::Map<_, _>>().into();
    ctx.write_results(&path, rows, Value::Object(details))?;
    Ok(Outcome {
        command: "mi".into(),
        artifacts: vec![path],
        summary,
    })
}

/// Overlays k-NN accuracy curves from metric CSVs into one SVG.
///
/// With no explicit inputs every `pretrain/<run>/metrics.csv` is used.
pub fn plot_cmd(ctx: &Context, inputs: &[(String, PathBuf)], out: Option<&Path>) -> Result<Outcome> {
    let mut inputs = inputs.to_vec();
    if inputs.is_empty() {
        for run in ["baseline", "a1", "a2"] {
            let path = trainer::TrainArtifacts::in_dir(&ctx.layout.run_dir(run)).metrics;
            if path.exists() {
                inputs.push((run.to_string(), path));
            }
        }
        if inputs.is_empty() {
            return Err(Error::MissingArtifact {
                path: ctx.layout.root.join("pretrain"),
                command: "pretrain".into(),
            });
        }
    }
    let mut curves = Vec::new();
    for (label, path) in &inputs {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.clone(),
                command: "pretrain".into(),
            });
        }
        let rows = trainer::read_metrics(&fs::read_to_string(path)?)?;
        curves.push(Curve {
            label: label.clone(),
            points: rows.iter().filter_map(|r| r.knn5_acc.map(|a| (r.epoch as f64, a))).collect(),
        });
    }
    let svg = plot::line_chart("k-NN accuracy during training", "epoch", "5-NN accuracy", &curves, Some(&ctx.stamp()));
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| ctx.layout.plot());
    write_atomic(&path, svg.as_bytes())?;
    Ok(Outcome {
        command: "plot".into(),
        artifacts: vec![path],
        summary: json!({"curves": curves.iter().map(|c| json!({"label": c.label, "points": c.points.len()})).collect::<Vec<_>>()}),
    })
}
