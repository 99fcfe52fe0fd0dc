//! Three-term watermarking loss, Gram correlation term, contractive penalty
//! and the per-component gradient routing used in training.
//!
//! Routing: the extraction term updates every component; the fidelity and
//! correlation terms only reach the encoder and embedder (they depend on no
//! other parameters); the penalty only reaches the invariance layer, whose
//! input is detached before the penalty is evaluated.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{BlockOutput, Forward, WatermarkingModel};
use crate::tensor::{Float, Gradients, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// λ₁, extraction.
    pub extraction: f64,
    /// λ₂, fidelity.
    pub fidelity: f64,
    /// λ₃, correlation (information) term.
    pub information: f64,
    /// λ₄, contractive penalty.
    pub penalty: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            extraction: 1.0,
            fidelity: 1.0,
            information: 1.0,
            penalty: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.extraction, self.fidelity, self.information, self.penalty];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!("loss weights must be finite and nonnegative, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub extraction: f64,
    pub fidelity: f64,
    pub information: f64,
    pub penalty: f64,
    /// λ₁·extraction + λ₂·fidelity + λ₃·information.
    pub total: f64,
    /// total + λ₄·penalty.
    pub objective: f64,
}

impl LossBreakdown {
    pub fn from_parts(extraction: f64, fidelity: f64, information: f64, penalty: f64, weights: &LossWeights) -> Self {
        let total = weights.extraction * extraction + weights.fidelity * fidelity + weights.information * information;
        LossBreakdown {
            extraction,
            fidelity,
            information,
            penalty,
            total,
            objective: total + weights.penalty * penalty,
        }
    }

    /// Component-wise mean, with totals recomputed from the averaged parts.
    pub fn mean(items: &[LossBreakdown], weights: &LossWeights) -> Self {
        if items.is_empty() {
            return Self::default();
        }
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self::from_parts(
            avg(|b| b.extraction),
            avg(|b| b.fidelity),
            avg(|b| b.information),
            avg(|b| b.penalty),
            weights,
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.extraction, self.fidelity, self.information, self.penalty, self.total, self.objective]
            .iter()
            .all(|v| v.is_finite())
    }

    /// CSV fields after the step column: extraction,fidelity,information,penalty,total,objective.
    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.extraction, self.fidelity, self.information, self.penalty, self.total, self.objective
        )
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "extraction={:.6} fidelity={:.6} information={:.6} penalty={:.6} total={:.6} objective={:.6}",
            self.extraction, self.fidelity, self.information, self.penalty, self.total, self.objective
        )
    }
}

/// ψ = ½·(mae(g(B₁(w_f)), g(B₁(m))) + mae(g(B₂(w_f)), g(B₂(m)))).
pub fn correlation_loss<T: Float>(tape: &mut Tape<T>, on_code: &BlockOutput, on_marked: &BlockOutput) -> Result<Var> {
    let mut parts = Vec::with_capacity(2);
    for (a, b) in [(on_code.b1, on_marked.b1), (on_code.b2, on_marked.b2)] {
        if tape.shape(a) != tape.shape(b) {
            return Err(Error::shape("correlation_loss", tape.shape(a), tape.shape(b)));
        }
        let ga = tape.gram(a)?;
        let gb = tape.gram(b)?;
        parts.push(tape.mae(ga, gb)?);
    }
    let sum = tape.add(parts[0], parts[1])?;
    Ok(tape.scale(sum, T::from_f64_lossy(0.5)))
}

/// L = λ₁·mae(w*, w) + λ₂·mae(m, c) + λ₃·ψ.
pub fn total_loss<T: Float>(
    tape: &mut Tape<T>,
    extracted: Var,
    watermark: Var,
    marked: Var,
    cover: Var,
    psi: Var,
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let ext = tape.mae(extracted, watermark)?;
    let fid = tape.mae(marked, cover)?;
    weighted_sum(
        tape,
        &[(weights.extraction, ext), (weights.fidelity, fid), (weights.information, psi)],
        true,
    )
}

/// Σ λ·term. With `keep_zero` false, zero-weight terms are left out of the
/// graph entirely.
fn weighted_sum<T: Float>(tape: &mut Tape<T>, terms: &[(f64, Var)], keep_zero: bool) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(lambda, v) in terms {
        if lambda == 0.0 && !keep_zero {
            continue;
        }
        let scaled = tape.scale(v, T::from_f64_lossy(lambda));
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    Ok(match acc {
        Some(v) => v,
        None => tape.input(Tensor::scalar(T::zero())),
    })
}

/// P = mean over pixels of Σ_j (1−h_j²)² Σ_i ω_ij² for tanh activations h.
pub fn contractive_penalty<T: Float>(tape: &mut Tape<T>, h: Var, weight: Var) -> Result<Var> {
    tape.contractive_penalty(h, weight)
}

/// Scalar terms of one evaluated pair.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveTerms {
    pub extraction: Var,
    pub fidelity: Var,
    pub information: Var,
    /// Penalty on the detached marked image (absent without an invariance layer).
    pub penalty: Option<Var>,
}

/// Records the four loss terms for a completed forward pass.
pub fn record_terms<T: Float>(model: &WatermarkingModel<T>, tape: &mut Tape<T>, fwd: &Forward) -> Result<ObjectiveTerms> {
    let extraction = tape.mae(fwd.extracted, fwd.watermark)?;
    let fidelity = tape.mae(fwd.marked, fwd.cover)?;
    let information = correlation_loss(tape, &fwd.block_b_code, &fwd.block_b_marked)?;
    let penalty = match model.invariance() {
        Some(inv) => {
            let detached = tape.detach(fwd.marked);
            let h = model.invariance_forward(tape, detached)?;
            let w = tape.param(model.params(), inv.weight);
            Some(contractive_penalty(tape, h, w)?)
        }
        None => None,
    };
    Ok(ObjectiveTerms {
        extraction,
        fidelity,
        information,
        penalty,
    })
}

fn scalar<T: Float>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().to_f64_lossy()
}

pub fn breakdown<T: Float>(tape: &Tape<T>, terms: &ObjectiveTerms, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown::from_parts(
        scalar(tape, terms.extraction),
        scalar(tape, terms.fidelity),
        scalar(tape, terms.information),
        terms.penalty.map_or(0.0, |p| scalar(tape, p)),
        weights,
    )
}

/// Builds λ₁E + λ₂F + λ₃ψ + λ₄P with zero-weight terms omitted.
pub fn objective_var<T: Float>(tape: &mut Tape<T>, terms: &ObjectiveTerms, weights: &LossWeights) -> Result<Var> {
    let mut list = vec![
        (weights.extraction, terms.extraction),
        (weights.fidelity, terms.fidelity),
        (weights.information, terms.information),
    ];
    if let Some(p) = terms.penalty {
        list.push((weights.penalty, p));
    }
    weighted_sum(tape, &list, false)
}

/// Routed gradient of the objective for one (watermark, cover) pair,
/// accumulated into `grads`.
pub fn apply_objective_gradients<T: Float>(
    model: &WatermarkingModel<T>,
    watermark: &Tensor<T>,
    cover: &Tensor<T>,
    weights: &LossWeights,
    grads: &mut Gradients<T>,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let mut tape = Tape::new();
    let fwd = model.forward_full(&mut tape, watermark, cover)?;
    let terms = record_terms(model, &mut tape, &fwd)?;
    let objective = objective_var(&mut tape, &terms, weights)?;
    tape.backward(objective, grads, &ParamSet::all(model.params().len()))?;
    Ok(breakdown(&tape, &terms, weights))
}

/// Batch-mean routed gradients. Samples may be evaluated in parallel; the
/// reduction always runs in sample order.
pub fn batch_gradients<T: Float>(
    model: &WatermarkingModel<T>,
    pairs: &[(&Tensor<T>, &Tensor<T>)],
    weights: &LossWeights,
) -> Result<(Gradients<T>, LossBreakdown)> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("batch has no samples".into()));
    }
    let per_sample: Vec<Result<(Gradients<T>, LossBreakdown)>> = pairs
        .par_iter()
        .map(|(w, c)| {
            let mut g = Gradients::zeros_like(model.params());
            let b = apply_objective_gradients(model, w, c, weights, &mut g)?;
            Ok((g, b))
        })
        .collect();
    let mut total = Gradients::zeros_like(model.params());
    let mut parts = Vec::with_capacity(pairs.len());
    let inv = T::from_f64_lossy(1.0 / pairs.len() as f64);
    for item in per_sample {
        let (g, b) = item?;
        total.add_scaled(&g, inv);
        parts.push(b);
    }
    Ok((total, LossBreakdown::mean(&parts, weights)))
}

/// Loss terms without any gradient computation (validation).
pub fn evaluate<T: Float>(
    model: &WatermarkingModel<T>,
    watermark: &Tensor<T>,
    cover: &Tensor<T>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let fwd = model.forward_full(&mut tape, watermark, cover)?;
    let terms = record_terms(model, &mut tape, &fwd)?;
    Ok(breakdown(&tape, &terms, weights))
}
