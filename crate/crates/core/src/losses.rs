//! Contrastive objectives over unit embeddings.
//!
//! [`graph`] builds each loss on the autodiff tape from an embedding matrix
//! `z: [V, K]` laid out as described by an [`IndexMap`]; the free functions at
//! the top level evaluate the same losses on a [`MultiviewBatch`] with
//! precomputed embeddings.

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use viewlab_autodiff::{Tape, Tensor, Var};

use crate::batching::{IndexMap, MultiviewBatch};
use crate::error::{Error, Result};
use crate::modelzoo::{DifferentiableMap, Network, UnitEmbedding};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossVariant {
    #[serde(rename = "simclr")]
    SimClr,
    #[serde(rename = "infonce")]
    InfoNce,
    #[serde(rename = "a2-simclr")]
    A2SimClr,
    #[serde(rename = "a2-infonce")]
    A2InfoNce,
    #[serde(rename = "a2-full")]
    A2Full,
    #[serde(rename = "simsiam")]
    SimSiam,
    #[serde(rename = "a2-simsiam")]
    A2SimSiam,
}

impl LossVariant {
    pub const ALL: [LossVariant; 7] = [
        LossVariant::SimClr,
        LossVariant::InfoNce,
        LossVariant::A2SimClr,
        LossVariant::A2InfoNce,
        LossVariant::A2Full,
        LossVariant::SimSiam,
        LossVariant::A2SimSiam,
    ];

    /// Whether the loss consumes appended generated views.
    pub fn is_multiview(self) -> bool {
        matches!(
            self,
            LossVariant::A2SimClr | LossVariant::A2InfoNce | LossVariant::A2Full | LossVariant::A2SimSiam
        )
    }

    pub fn needs_predictor(self) -> bool {
        matches!(self, LossVariant::SimSiam | LossVariant::A2SimSiam)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Sum over anchor rows.
    #[default]
    Sum,
    /// Average over anchor rows.
    Mean,
}

/// Sign of the similarity `D` used by the SimSiam losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineSign {
    /// `D = -cos`, minimized by aligned pairs.
    #[default]
    Negative,
    /// `D = +cos`.
    Positive,
}

impl CosineSign {
    fn factor(self) -> f64 {
        match self {
            CosineSign::Negative => -1.0,
            CosineSign::Positive => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub variant: LossVariant,
    /// Put generated views into the SimCLR / InfoNCE denominators of the A2 losses.
    pub include_generated_negatives: bool,
    pub reduction: Reduction,
    pub simsiam_sign: CosineSign,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.5,
            alpha: 0.5,
            variant: LossVariant::A2InfoNce,
            include_generated_negatives: false,
            reduction: Reduction::Sum,
            simsiam_sign: CosineSign::Negative,
        }
    }
}

impl LossConfig {
    pub fn with_variant(variant: LossVariant) -> Self {
        LossConfig {
            variant,
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }

    fn row_scale(&self, rows: usize) -> f64 {
        match self.reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / rows as f64,
        }
    }
}

/// Tape-level construction of every loss.
pub mod graph {
    use super::*;

    /// Scaled similarities `z_i . z_a / tau` for expert rows `i` against all views `a`: `[2N, V]`.
    fn similarities<'t>(z: Var<'t>, map: &IndexMap, tau: f64) -> Var<'t> {
        let rows: Rc<[usize]> = map.expert_indices().collect();
        z.select_rows(rows).matmul_t(z).scale(1.0 / tau)
    }

    fn mask(map: &IndexMap, keep: impl Fn(usize, usize) -> bool) -> Rc<[bool]> {
        let v = map.len();
        (0..map.expert_count() * v)
            .map(|k| keep(k / v, k % v))
            .collect()
    }

    fn partner_entries(map: &IndexMap) -> Rc<[usize]> {
        let v = map.len();
        map.expert_indices()
            .map(|i| i * v + map.partner(i).expect("expert view has a partner"))
            .collect()
    }

    fn check_rows(z: Var<'_>, map: &IndexMap) -> Result<()> {
        let shape = z.shape();
        if shape.len() != 2 || shape[0] != map.len() {
            return Err(Error::shape("embedding matrix", &[map.len(), 0], &shape));
        }
        Ok(())
    }

    /// `-sum_i log(exp(s_ij) / sum_{a in A(i)} exp(s_ia))` over the expert rows.
    pub fn simclr<'t>(z: Var<'t>, map: &IndexMap, cfg: &LossConfig) -> Result<Var<'t>> {
        check_rows(z, map)?;
        let s = similarities(z, map, cfg.temperature);
        let include = cfg.include_generated_negatives;
        let m = mask(map, |i, a| a != i && (map.is_expert(a) || include));
        let lse = s.logsumexp_rows(Some(m)).sum();
        let pos = s.gather(partner_entries(map)).sum();
        Ok(lse.sub(pos).scale(cfg.row_scale(map.expert_count())))
    }

    /// Two-set InfoNCE: anchors in I1 contrast against I2 only, and vice versa.
    pub fn infonce<'t>(z: Var<'t>, map: &IndexMap, cfg: &LossConfig) -> Result<Var<'t>> {
        check_rows(z, map)?;
        let s = similarities(z, map, cfg.temperature);
        let include = cfg.include_generated_negatives;
        let n = map.anchors();
        let m = mask(map, |i, a| {
            let other_set = if i < n { map.second_set() } else { map.first_set() };
            other_set.contains(&a) || (include && !map.is_expert(a))
        });
        let lse = s.logsumexp_rows(Some(m)).sum();
        let pos = s.gather(partner_entries(map)).sum();
        Ok(lse.sub(pos).scale(cfg.row_scale(map.expert_count())))
    }

    /// `sum_i alpha/|k(i)| sum_{p in k(i)} z_i . z_p / tau`.
    pub fn align<'t>(z: Var<'t>, map: &IndexMap, cfg: &LossConfig) -> Result<Var<'t>> {
        check_rows(z, map)?;
        if map.generated_per_anchor() == 0 {
            return Err(Error::config("alignment term needs at least one generated view per anchor"));
        }
        let s = similarities(z, map, cfg.temperature);
        let v = map.len();
        let scale = cfg.row_scale(map.expert_count());
        let mut w = vec![0.0; map.expert_count() * v];
        for i in map.expert_indices() {
            let k = map.generated_of(i);
            for p in &k {
                w[i * v + p] += cfg.alpha / k.len() as f64 * scale;
            }
        }
        Ok(s.weighted_sum(w.into()))
    }

    /// Multi-positive loss averaged over `P(i)` with the enlarged denominator `A(i) = I \ {i}`.
    pub fn a2_full<'t>(z: Var<'t>, map: &IndexMap, cfg: &LossConfig) -> Result<Var<'t>> {
        check_rows(z, map)?;
        let s = similarities(z, map, cfg.temperature);
        let v = map.len();
        let lse = s.logsumexp_rows(Some(mask(map, |i, a| a != i))).sum();
        let mut w = vec![0.0; map.expert_count() * v];
        for i in map.expert_indices() {
            let p = map.positives(i);
            for &q in &p {
                w[i * v + q] += 1.0 / p.len() as f64;
            }
        }
        let pos = s.weighted_sum(w.into());
        Ok(lse.sub(pos).scale(cfg.row_scale(map.expert_count())))
    }

    /// Predictor outputs for `online` against targets, both row-normalized: `[V, V]` cosines.
    fn predicted_cosines<'t>(
        online: Var<'t>,
        targets: Var<'t>,
        predictor: &Network,
        pred_params: &[Var<'t>],
    ) -> Result<Var<'t>> {
        let k = online.shape()[1];
        if predictor.input_shape() != [k] || predictor.output_shape() != [k] || targets.shape() != online.shape() {
            return Err(Error::shape(
                "predictor dimensions",
                &[k, k],
                &[predictor.input_shape().iter().product(), predictor.output_shape().iter().product()],
            ));
        }
        let p = predictor.forward(online, pred_params).normalize_rows();
        Ok(p.matmul_t(targets.normalize_rows()))
    }

    /// SimSiam objective with explicit target embeddings; the alignment part
    /// over generated views is included whenever the layout has them.
    ///
    /// [`simsiam`] and [`a2_simsiam`] pass `online.detach()` as `targets`.
    pub fn simsiam_with_targets<'t>(
        online: Var<'t>,
        targets: Var<'t>,
        map: &IndexMap,
        cfg: &LossConfig,
        predictor: &Network,
        pred_params: &[Var<'t>],
    ) -> Result<Var<'t>> {
        check_rows(online, map)?;
        let c = predicted_cosines(online, targets, predictor, pred_params)?;
        let v = map.len();
        let n = map.anchors();
        let sign = cfg.simsiam_sign.factor();
        let scale = cfg.row_scale(map.expert_count());
        let mut w = vec![0.0; v * v];
        for a in 0..n {
            w[a * v + a + n] += sign * 0.5 / n as f64;
            w[(a + n) * v + a] += sign * 0.5 / n as f64;
        }
        for i in map.expert_indices() {
            let k = map.generated_of(i);
            for &p in &k {
                w[p * v + i] += sign * cfg.alpha / k.len() as f64 * scale;
            }
        }
        Ok(c.weighted_sum(w.into()))
    }

    /// Symmetric stop-gradient loss averaged over anchors.
    pub fn simsiam<'t>(
        z: Var<'t>,
        map: &IndexMap,
        cfg: &LossConfig,
        predictor: &Network,
        pred_params: &[Var<'t>],
    ) -> Result<Var<'t>> {
        if map.generated_per_anchor() != 0 {
            return Err(Error::config("SimSiam takes two-view batches"));
        }
        simsiam_with_targets(z, z.detach(), map, cfg, predictor, pred_params)
    }

    /// SimSiam plus `sum_i alpha/|k(i)| sum_p D(pred(z_p), stop(z_i))`.
    pub fn a2_simsiam<'t>(
        z: Var<'t>,
        map: &IndexMap,
        cfg: &LossConfig,
        predictor: &Network,
        pred_params: &[Var<'t>],
    ) -> Result<Var<'t>> {
        if map.generated_per_anchor() == 0 {
            return Err(Error::config("A2-SimSiam needs appended generated views"));
        }
        simsiam_with_targets(z, z.detach(), map, cfg, predictor, pred_params)
    }

    /// Dispatches on `cfg.variant`, checking that the batch layout fits the variant.
    pub fn loss<'t>(
        z: Var<'t>,
        map: &IndexMap,
        cfg: &LossConfig,
        predictor: Option<(&Network, &[Var<'t>])>,
    ) -> Result<Var<'t>> {
        cfg.validate()?;
        let m = map.generated_per_anchor();
        let variant = cfg.variant;
        if !variant.is_multiview() && m > 0 {
            return Err(Error::config(format!(
                "{variant:?} takes two-view batches, but this batch has {m} generated views per anchor"
            )));
        }
        if variant.is_multiview() && variant != LossVariant::A2Full && m == 0 {
            return Err(Error::config(format!("{variant:?} needs appended generated views")));
        }
        let need_pred = || {
            predictor.ok_or_else(|| Error::config(format!("{variant:?} needs a predictor network")))
        };
        match variant {
            LossVariant::SimClr => simclr(z, map, cfg),
            LossVariant::InfoNce => infonce(z, map, cfg),
            LossVariant::A2SimClr => Ok(simclr(z, map, cfg)?.sub(align(z, map, cfg)?)),
            LossVariant::A2InfoNce => Ok(infonce(z, map, cfg)?.sub(align(z, map, cfg)?)),
            LossVariant::A2Full => a2_full(z, map, cfg),
            LossVariant::SimSiam => {
                let (p, params) = need_pred()?;
                simsiam(z, map, cfg, p, params)
            }
            LossVariant::A2SimSiam => {
                let (p, params) = need_pred()?;
                a2_simsiam(z, map, cfg, p, params)
            }
        }
    }
}

/// Fails unless every row of `z` is unit-norm within [`UnitEmbedding::TOLERANCE`].
pub fn check_unit_rows(z: &Tensor) -> Result<()> {
    for i in 0..z.rows() {
        let norm = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UnitEmbedding::TOLERANCE {
            return Err(Error::NotNormalized { row: i, norm });
        }
    }
    Ok(())
}

fn embeddings(batch: &MultiviewBatch) -> Result<&Tensor> {
    let z = batch
        .embeddings
        .as_ref()
        .ok_or_else(|| Error::config("batch has no embeddings"))?;
    check_unit_rows(z)?;
    Ok(z)
}

fn evaluate(
    batch: &MultiviewBatch,
    build: impl for<'t> FnOnce(Var<'t>) -> Result<Var<'t>>,
) -> Result<f64> {
    let z = embeddings(batch)?;
    let tape = Tape::new();
    let v = build(tape.constant(z.clone()))?;
    let value = v.item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "loss value".into(),
            index: 0,
        });
    }
    Ok(value)
}

fn require_two_view(batch: &MultiviewBatch) -> Result<()> {
    if batch.index_map.generated_per_anchor() != 0 {
        return Err(Error::config("expected a two-view batch without generated views"));
    }
    Ok(())
}

/// SimCLR loss on a two-view batch.
pub fn simclr_loss(batch: &MultiviewBatch, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    require_two_view(batch)?;
    evaluate(batch, |z| graph::simclr(z, &batch.index_map, cfg))
}

/// Two-set InfoNCE loss on a two-view batch.
pub fn infonce_two_set(batch: &MultiviewBatch, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    require_two_view(batch)?;
    evaluate(batch, |z| graph::infonce(z, &batch.index_map, cfg))
}

pub fn align_term(batch: &MultiviewBatch, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    evaluate(batch, |z| graph::align(z, &batch.index_map, cfg))
}

/// A2-SimCLR, A2-InfoNCE or A2-full according to `cfg.variant`.
pub fn a2_loss(batch: &MultiviewBatch, cfg: &LossConfig) -> Result<f64> {
    if !matches!(
        cfg.variant,
        LossVariant::A2SimClr | LossVariant::A2InfoNce | LossVariant::A2Full
    ) {
        return Err(Error::config(format!("{:?} is not an A2 contrastive variant", cfg.variant)));
    }
    evaluate(batch, |z| graph::loss(z, &batch.index_map, cfg, None))
}

pub fn simsiam_loss(batch: &MultiviewBatch, predictor: &Network, cfg: &LossConfig) -> Result<f64> {
    require_two_view(batch)?;
    evaluate(batch, |z| {
        let params = predictor.bind_frozen(z.tape());
        graph::simsiam(z, &batch.index_map, cfg, predictor, &params)
    })
}

pub fn a2_simsiam_loss(batch: &MultiviewBatch, predictor: &Network, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    evaluate(batch, |z| {
        let params = predictor.bind_frozen(z.tape());
        graph::a2_simsiam(z, &batch.index_map, cfg, predictor, &params)
    })
}
