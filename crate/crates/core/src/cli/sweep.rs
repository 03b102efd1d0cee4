use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::commands::{self, Context, Layout};
use super::config::ExperimentConfig;
use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::rng;
use crate::stamp::CODE_VERSION;

/// One grid dimension. A single `path` takes scalar values; several `paths`
/// move together and take one array per value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paths: Vec<String>,
    pub values: Vec<Value>,
}

impl Axis {
    pub fn single(path: &str, values: Vec<Value>) -> Self {
        Axis {
            path: Some(path.into()),
            paths: Vec::new(),
            values,
        }
    }

    fn bindings(&self, i: usize) -> Result<Vec<(String, Value)>> {
        let v = &self.values[i];
        match (&self.path, self.paths.as_slice()) {
            (Some(p), []) => Ok(vec![(p.clone(), v.clone())]),
            (None, paths) if !paths.is_empty() => {
                let arr = v
                    .as_array()
                    .filter(|a| a.len() == paths.len())
                    .ok_or_else(|| Error::config(format!("axis {paths:?} needs arrays of {} values", paths.len())))?;
                Ok(paths.iter().cloned().zip(arr.iter().cloned()).collect())
            }
            _ => Err(Error::config("a sweep axis needs exactly one of `path` or `paths`")),
        }
    }
}

/// Stages a sweep cell runs, in pipeline order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    MakeDataset,
    Invert,
    GenViews,
    Pretrain,
    Probe,
    Knn,
    Mi,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// Each cell's seed is mixed from the base seed and the cell index.
    #[default]
    PerCell,
    /// Every cell uses the base seed.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub axes: Vec<Axis>,
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub seeds: SeedPolicy,
}

fn default_stages() -> Vec<Stage> {
    vec![Stage::GenViews, Stage::Pretrain, Stage::Probe, Stage::Knn]
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read grid spec {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// The sigma grid of the perturbation ablation.
    pub fn sigma() -> Self {
        GridSpec {
            axes: vec![Axis::single("viewgen.perturb.sigma", [0.1, 0.2, 0.4, 1.0].map(Value::from).to_vec())],
            stages: default_stages(),
            seeds: SeedPolicy::PerCell,
        }
    }

    /// The boundary-radius ablation, spread radius kept 0.2 above it.
    pub fn epsilon() -> Self {
        let values = [0.1, 0.2, 0.3, 0.5, 0.7, 0.9]
            .iter()
            .map(|&e: &f64| Value::from(vec![e, ((e + 0.2) * 10.0).round() / 10.0]))
            .collect();
        GridSpec {
            axes: vec![Axis {
                path: None,
                paths: vec!["viewgen.search.epsilon1".into(), "viewgen.search.epsilon2".into()],
                values,
            }],
            stages: default_stages(),
            seeds: SeedPolicy::PerCell,
        }
    }

    /// The uniformity-weight ablation.
    pub fn lambda() -> Self {
        GridSpec {
            axes: vec![Axis::single("viewgen.search.lambda", [0.0, 0.005, 0.01, 0.02].map(Value::from).to_vec())],
            stages: default_stages(),
            seeds: SeedPolicy::PerCell,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    /// Overrides of cell `index`; the last axis varies fastest.
    pub fn cell(&self, index: usize) -> Result<Vec<(String, Value)>> {
        let mut rest = index;
        let mut picks = vec![0; self.axes.len()];
        for (a, axis) in self.axes.iter().enumerate().rev() {
            picks[a] = rest % axis.values.len();
            rest /= axis.values.len();
        }
        let mut out = Vec::new();
        for (axis, &i) in self.axes.iter().zip(&picks) {
            out.extend(axis.bindings(i)?);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() || self.axes.iter().any(|a| a.values.is_empty()) {
            return Err(Error::config("a sweep needs at least one axis and every axis at least one value"));
        }
        if self.stages.is_empty() {
            return Err(Error::config("a sweep needs at least one stage"));
        }
        for a in &self.axes {
            a.bindings(0)?;
        }
        Ok(())
    }
}

/// One line of `results.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub overrides: Map<String, Value>,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub output_dir: PathBuf,
    /// `ok` or `failed`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<Value>,
    pub metrics: Map<String, Value>,
}

/// The cell's configuration: base plus overrides, with its own seed and directory.
pub fn cell_config(base: &ExperimentConfig, grid: &GridSpec, index: usize) -> Result<ExperimentConfig> {
    let overrides = grid.cell(index)?;
    let mut cfg = base.set_paths(&overrides)?;
    let seed_fixed = overrides.iter().any(|(p, _)| p == "seed");
    if grid.seeds == SeedPolicy::PerCell && !seed_fixed {
        cfg = cfg.with_seed(rng::mix(&[base.seed, index as u64]) >> 32)?;
    }
    cfg.output_dir = base.output_dir.join("sweep").join(format!("cell-{index:03}"));
    Ok(cfg)
}

fn run_stage(ctx: &Context, stage: Stage) -> Result<commands::Outcome> {
    match stage {
        Stage::MakeDataset => commands::make_dataset_cmd(ctx),
        Stage::Invert => commands::invert_cmd(ctx),
        Stage::GenViews => commands::gen_views_cmd(ctx),
        Stage::Pretrain => commands::pretrain_cmd(ctx),
        Stage::Probe => commands::probe_cmd(ctx),
        Stage::Knn => commands::knn_cmd(ctx),
        Stage::Mi => commands::mi_cmd(ctx),
    }
}

fn error_json(e: &Error) -> Value {
    serde_json::json!({"kind": e.kind(), "message": e.to_string()})
}

fn run_cell(base: &ExperimentConfig, grid: &GridSpec, index: usize) -> SweepRow {
    let overrides: Map<String, Value> = grid.cell(index).unwrap_or_default().into_iter().collect();
    let mut row = SweepRow {
        cell: index,
        overrides,
        config_hash: String::new(),
        seed: base.seed,
        version: CODE_VERSION.to_string(),
        output_dir: base.output_dir.join("sweep").join(format!("cell-{index:03}")),
        status: "failed".into(),
        error: None,
        metrics: Map::new(),
    };
    let ctx = match cell_config(base, grid, index).and_then(|cfg| {
        let mut ctx = Context::new(cfg)?;
        ctx.layout = Layout {
            root: ctx.config.output_dir.clone(),
            upstream: Some(base.output_dir.clone()),
        };
        ctx.force = true;
        Ok(ctx)
    }) {
        Ok(ctx) => ctx,
        Err(e) => {
            row.error = Some(error_json(&e));
            return row;
        }
    };
    row.config_hash = ctx.config_hash.clone();
    row.seed = ctx.config.seed;
    for &stage in &grid.stages {
        match run_stage(&ctx, stage) {
            Ok(out) => {
                if let Value::Object(m) = out.summary {
                    for (k, v) in m {
                        if v.is_number() {
                            row.metrics.insert(k, v);
                        }
                    }
                }
            }
            Err(e) => {
                log::warn!("sweep cell {index} failed at {stage:?}: {e}");
                row.error = Some(serde_json::json!({"stage": stage, "kind": e.kind(), "message": e.to_string()}));
                return row;
            }
        }
    }
    row.status = "ok".into();
    row
}

/// Runs every cell (up to `jobs` at a time) and writes `sweep/results.jsonl`.
///
/// A failing cell is recorded and the sweep moves on.
pub fn run_sweep(base: &ExperimentConfig, grid: &GridSpec, jobs: usize) -> Result<(PathBuf, Vec<SweepRow>)> {
    grid.validate()?;
    let base = base.clone().resolved()?;
    let n = grid.cell_count();
    let jobs = jobs.max(1);
    let mut rows = Vec::with_capacity(n);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(jobs) {
        if jobs == 1 {
            rows.push(run_cell(&base, grid, chunk[0]));
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&i| s.spawn({
                let base = &base;
                move || run_cell(base, grid, i)
            })).collect();
            for (h, &i) in handles.into_iter().zip(chunk) {
                rows.push(h.join().unwrap_or_else(|_| {
                    let mut r = run_cell_panicked(&base, grid, i);
                    r.error = Some(serde_json::json!({"kind": "panic", "message": "cell thread panicked"}));
                    r
                }));
            }
        });
    }
    let mut text = String::new();
    for r in &rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    let path = base.output_dir.join("sweep/results.jsonl");
    write_atomic(&path, text.as_bytes())?;
    Ok((path, rows))
}

fn run_cell_panicked(base: &ExperimentConfig, grid: &GridSpec, index: usize) -> SweepRow {
    SweepRow {
        cell: index,
        overrides: grid.cell(index).unwrap_or_default().into_iter().collect(),
        config_hash: String::new(),
        seed: base.seed,
        version: CODE_VERSION.to_string(),
        output_dir: base.output_dir.join("sweep").join(format!("cell-{index:03}")),
        status: "failed".into(),
        error: None,
        metrics: Map::new(),
    }
}

/// Parses `results.jsonl`.
pub fn read_results(text: &str) -> Result<Vec<SweepRow>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
