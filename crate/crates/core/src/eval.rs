//! Downstream evaluation of a frozen encoder: linear probe, k-NN and MINE.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use viewlab_autodiff::{Tape, Tensor};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::modelzoo::{encode_batch, zoo, Activation, DifferentiableMap, Network};
use crate::optim::{cosine_lr, param_grads, Adam, AdamConfig, Sgd, SgdConfig};
use crate::rng::{self, purpose};

/// One line of evaluation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
    pub seed: u64,
}

const CHUNK: usize = 256;

fn map_chunks(images: &Tensor, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut rows = Vec::new();
    let mut width = 0;
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let part = f(&images.select_rows(&idx))?;
        width = part.numel() / idx.len();
        rows.extend(part.into_data());
    }
    Ok(Tensor::matrix(n, width, rows))
}

/// Unit embeddings `[N, K]` for a whole image set.
pub fn embed(f: &Network, images: &Tensor) -> Result<Tensor> {
    map_chunks(images, |x| encode_batch(f, x))
}

/// Backbone features `[N, D]`, read without touching the encoder.
pub fn backbone_features(f: &Network, images: &Tensor) -> Result<Tensor> {
    map_chunks(images, |x| {
        f.check_batch(x)?;
        let tape = Tape::new();
        let params = f.bind_frozen(&tape);
        let h = f.features(tape.constant(x.clone()), &params).flatten();
        let out = (*h.value()).clone();
        Ok(out)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Neighbours for k-NN accuracy.
    pub k: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            batch_size: 256,
            sgd: SgdConfig {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            k: 5,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.k == 0 || self.batch_size == 0 {
            return Err(Error::config("probe epochs, batch size and k must be at least 1"));
        }
        Ok(())
    }
}

fn check_labels(features: &Tensor, labels: &[u32], what: &str) -> Result<()> {
    if features.shape().len() != 2 || features.rows() != labels.len() {
        return Err(Error::shape(what, &[labels.len()], &[features.shape()[0]]));
    }
    Ok(())
}

/// Per-feature standardisation fitted on the training rows.
fn standardize(train: &Tensor, test: &Tensor) -> (Tensor, Tensor) {
    let (n, d) = (train.rows(), train.row_len());
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(train.row(i)) {
            *m += v / n as f64;
        }
    }
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v.sqrt() + 1e-8)).collect();
    let apply = |t: &Tensor| {
        let mut out = t.clone();
        for i in 0..out.rows() {
            for ((o, m), s) in out.row_mut(i).iter_mut().zip(&mean).zip(&scale) {
                *o = (*o - m) * s;
            }
        }
        out
    };
    (apply(train), apply(test))
}

/// Top-1 accuracy of a softmax-regression layer trained on fixed features.
pub fn linear_probe_features(
    train: &Tensor,
    train_labels: &[u32],
    test: &Tensor,
    test_labels: &[u32],
    cfg: &ProbeConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_labels(train, train_labels, "probe training features")?;
    check_labels(test, test_labels, "probe test features")?;
    if test_labels.is_empty() {
        return Err(Error::config("probe test set is empty"));
    }
    let classes = train_labels.iter().chain(test_labels).max().map_or(0, |&c| c as usize + 1);
    let first = train_labels.first().copied();
    if train_labels.iter().all(|&l| Some(l) == first) {
        return Err(Error::config("linear probe needs at least two classes in the training set"));
    }
    let (train, test) = standardize(train, test);
    let dim = train.row_len();
    let mut head = zoo::mlp("probe", dim, &[], classes, Activation::Relu, rng::mix(&[cfg.seed, purpose::PROBE]))?;
    let mut opt = Sgd::new(cfg.sgd);
    let n = train.rows();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(&[cfg.seed, purpose::PROBE, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.select_rows(chunk);
            let picks: Rc<[usize]> = chunk
                .iter()
                .enumerate()
                .map(|(r, &i)| r * classes + train_labels[i] as usize)
                .collect();
            let tape = Tape::new();
            let params = head.bind(&tape);
            let logits = head.forward(tape.constant(x), &params);
            let loss = logits.logsumexp_rows(None).sub(logits.gather(picks)).mean();
            let grads = tape.backward(loss);
            let g = param_grads(&grads, &params);
            opt.step(head.params_mut(), &g, cosine_lr(step, total, cfg.sgd.lr))?;
            step += 1;
        }
    }
    let logits = head.eval(&test)?;
    let correct = (0..test.rows())
        .filter(|&i| argmax(logits.row(i)) == test_labels[i] as usize)
        .count();
    Ok(correct as f64 / test.rows() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Linear-probe accuracy on the encoder's backbone features. The encoder is only read.
pub fn linear_probe(f: &Network, train: &Dataset, test: &Dataset, cfg: &ProbeConfig) -> Result<f64> {
    let a = backbone_features(f, &train.images)?;
    let b = backbone_features(f, &test.images)?;
    linear_probe_features(&a, &train.labels, &b, &test.labels, cfg)
}

/// k-NN labels for each query row by cosine similarity.
///
/// Rows are normalised here, so callers may pass raw features. Equal
/// similarities go to the smaller training index. A tied vote goes to the
/// label whose best neighbour ranks first.
pub fn knn_predict(train: &Tensor, train_labels: &[u32], queries: &Tensor, k: usize) -> Result<Vec<u32>> {
    check_labels(train, train_labels, "k-NN training embeddings")?;
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    if k > train.rows() {
        return Err(Error::config(format!("k = {k} exceeds the {} training points", train.rows())));
    }
    if queries.row_len() != train.row_len() {
        return Err(Error::shape("k-NN queries", &[train.row_len()], &[queries.row_len()]));
    }
    let unit = |t: &Tensor| {
        (0..t.rows())
            .map(|i| {
                let r = t.row(i);
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| if n > 0.0 { v / n } else { 0.0 }).collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    };
    let bank = unit(train);
    let mut out = Vec::with_capacity(queries.rows());
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(bank.len());
    for q in unit(queries) {
        scored.clear();
        scored.extend(bank.iter().enumerate().map(|(j, b)| (dot(&q, b), j)));
        let closer = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, closer);
            scored.truncate(k);
        }
        scored.sort_unstable_by(closer);
        let mut votes: Vec<(u32, usize, usize)> = Vec::new();
        for (rank, &(_, j)) in scored.iter().enumerate() {
            let label = train_labels[j];
            match votes.iter_mut().find(|v| v.0 == label) {
                Some(v) => v.1 += 1,
                None => votes.push((label, 1, rank)),
            }
        }
        let best = votes
            .iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
            .expect("k >= 1");
        out.push(best.0);
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fraction of queries whose k-NN label matches.
pub fn knn_accuracy(train: &Tensor, train_labels: &[u32], queries: &Tensor, query_labels: &[u32], k: usize) -> Result<f64> {
    check_labels(queries, query_labels, "k-NN queries")?;
    if query_labels.is_empty() {
        return Err(Error::config("k-NN query set is empty"));
    }
    let pred = knn_predict(train, train_labels, queries, k)?;
    let hits = pred.iter().zip(query_labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / query_labels.len() as f64)
}

/// k-NN accuracy of the encoder's unit embeddings.
pub fn knn_eval(f: &Network, train: &Dataset, test: &Dataset, k: usize) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::config("k-NN training set is empty"));
    }
    let a = embed(f, &train.images)?;
    let b = embed(f, &test.images)?;
    knn_accuracy(&a, &train.labels, &b, &test.labels, k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MineConfig {
    /// Width of both hidden layers of the critic.
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Decay of the moving average used for the partition-term gradient.
    pub ema_decay: f64,
    /// Shuffles averaged in the final bound.
    pub eval_shuffles: usize,
    pub seed: u64,
}

impl Default for MineConfig {
    fn default() -> Self {
        MineConfig {
            hidden: 128,
            steps: 3000,
            batch_size: 256,
            lr: 1e-3,
            ema_decay: 0.99,
            eval_shuffles: 4,
            seed: 0,
        }
    }
}

/// Minimum sample count accepted by [`mine_estimate`].
pub const MINE_MIN_PAIRS: usize = 1000;
/// Bounds above this are treated as a diverged critic.
pub const MINE_MAX_NATS: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MineEstimate {
    /// Donsker-Varadhan bound on all pairs, clamped at 0.
    pub nats: f64,
    /// Moving average of the per-batch training bound.
    pub smoothed_training_bound: f64,
    pub steps: usize,
}

fn pair_rows(u: &Tensor, v: &Tensor, rows_u: &[usize], rows_v: &[usize]) -> Tensor {
    let (du, dv) = (u.row_len(), v.row_len());
    let mut data = Vec::with_capacity(rows_u.len() * (du + dv));
    for (&i, &j) in rows_u.iter().zip(rows_v) {
        data.extend_from_slice(u.row(i));
        data.extend_from_slice(v.row(j));
    }
    Tensor::matrix(rows_u.len(), du + dv, data)
}

fn log_mean_exp(t: &[f64]) -> f64 {
    let m = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + (t.iter().map(|x| (x - m).exp()).sum::<f64>() / t.len() as f64).ln()
}

/// Mutual information between paired rows of `u` and `v` in nats.
///
/// Trains a critic on `E_joint[T] - log E_marginal[e^T]`, with the marginal
/// formed by shuffling `v` within each batch.
pub fn mine_estimate(u: &Tensor, v: &Tensor, cfg: &MineConfig) -> Result<MineEstimate> {
    let n = u.rows();
    if v.rows() != n {
        return Err(Error::shape("MINE pairs", &[n], &[v.rows()]));
    }
    if n < MINE_MIN_PAIRS {
        return Err(Error::config(format!("MINE needs at least {MINE_MIN_PAIRS} pairs, got {n}")));
    }
    if cfg.batch_size < 2 || cfg.hidden == 0 || cfg.eval_shuffles == 0 {
        return Err(Error::config("MINE batch size must be at least 2 and hidden width positive"));
    }
    let mut critic = zoo::mlp(
        "mine_critic",
        u.row_len() + v.row_len(),
        &[cfg.hidden, cfg.hidden],
        1,
        Activation::Relu,
        rng::mix(&[cfg.seed, purpose::MINE, 0]),
    )?;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut r = rng::stream(&[cfg.seed, purpose::MINE, 1]);
    let b = cfg.batch_size.min(n);
    let mut ema: Option<f64> = None;
    let mut smoothed: Option<f64> = None;
    for step in 0..cfg.steps {
        let rows: Vec<usize> = (0..b).map(|_| r.random_range(0..n)).collect();
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut r);
        let tape = Tape::new();
        let params = critic.bind(&tape);
        let tj = critic.forward(tape.constant(pair_rows(u, v, &rows, &rows)), &params);
        let tm = critic.forward(tape.constant(pair_rows(u, v, &rows, &shuffled)), &params);
        let joint = tj.mean();
        let exp_m = tm.exp().mean();
        let bound = joint.item() - log_mean_exp(tm.value().data());
        if !bound.is_finite() || bound > MINE_MAX_NATS {
            return Err(Error::Diverged(format!(
                "MINE critic unstable at step {step}: bound {bound} nats"
            )));
        }
        let e = exp_m.item();
        let avg = match ema {
            Some(a) => cfg.ema_decay * a + (1.0 - cfg.ema_decay) * e,
            None => e,
        };
        ema = Some(avg);
        smoothed = Some(match smoothed {
            Some(s) => cfg.ema_decay * s + (1.0 - cfg.ema_decay) * bound,
            None => bound,
        });
        // Gradient of log E[e^T] with the moving average in the denominator.
        let loss = joint.sub(exp_m.scale(1.0 / avg)).neg();
        let grads = tape.backward(loss);
        let g = param_grads(&grads, &params);
        opt.step(critic.params_mut(), &g, cfg.lr)?;
    }
    let all: Vec<usize> = (0..n).collect();
    let tj = critic.eval(&pair_rows(u, v, &all, &all))?;
    let joint = tj.data().iter().sum::<f64>() / n as f64;
    let mut total = 0.0;
    for s in 0..cfg.eval_shuffles {
        let mut perm = all.clone();
        perm.shuffle(&mut rng::stream(&[cfg.seed, purpose::MINE, 2, s as u64]));
        let tm = critic.eval(&pair_rows(u, v, &all, &perm))?;
        total += joint - log_mean_exp(tm.data());
    }
    let bound = total / cfg.eval_shuffles as f64;
    if !bound.is_finite() || bound > MINE_MAX_NATS {
        return Err(Error::Diverged(format!("MINE final bound {bound} nats")));
    }
    Ok(MineEstimate {
        nats: bound.max(0.0),
        smoothed_training_bound: smoothed.unwrap_or(0.0),
        steps: cfg.steps,
    })
}

/// Deterministic subsample of `n` positions, used to cap evaluation cost.
pub fn subsample(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if n < len {
        idx.shuffle(&mut rng::stream(&[seed, purpose::PROBE, 7]));
        idx.truncate(n);
        idx.sort_unstable();
    }
    idx
}
