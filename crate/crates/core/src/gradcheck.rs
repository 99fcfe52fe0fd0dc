//! Finite-difference verification of the reverse-mode gradients in f64, and
//! of the closed-form contractive penalty against a numeric Jacobian.
//!
//! Difference quotients are taken on the smooth piece of the base point:
//! perturbed evaluations replay the base recording's ReLU masks and MAE
//! signs (see [`Tape::with_frozen_kinks`]), which is the function whose
//! derivative reverse mode computes.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fixtures::synthetic_cover;
use crate::net::{Component, ModelConfig, WatermarkingModel, DEFAULT_REDUNDANCY};
use crate::objective::{apply_objective_gradients, correlation_loss, LossWeights};
use crate::tensor::{Gradients, ParamId, ParamSet, ParamStore, Tape, Tensor, Var};

/// Largest accepted relative gradient error.
pub const TOLERANCE: f64 = 1e-4;
/// Largest accepted gap between closed-form and numeric Jacobian energy.
pub const PENALTY_TOLERANCE: f64 = 1e-6;
/// Random instances per op and per model variant in [`run_suite`].
pub const SUITE_INSTANCES: usize = 10;
const STEP: f64 = 1e-5;
const JACOBIAN_STEP: f64 = 1e-5;
/// Gradients below `FLOOR · max(1, |loss|)` are compared in absolute terms;
/// that is the scale of the rounding noise of a difference quotient.
const FLOOR: f64 = 1e-6;
const MAX_COORDS_PER_INSTANCE: usize = 48;

pub fn relative_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR * loss.abs().max(1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: String,
    pub instances: usize,
    /// Coordinates compared.
    pub checked: usize,
    pub max_rel_err: f64,
}

impl OpReport {
    fn new(name: impl Into<String>) -> Self {
        OpReport {
            name: name.into(),
            instances: 0,
            checked: 0,
            max_rel_err: 0.0,
        }
    }

    fn absorb(&mut self, errors: &[f64]) {
        self.instances += 1;
        self.checked += errors.len();
        self.max_rel_err = errors.iter().fold(self.max_rel_err, |a, &b| a.max(b));
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < TOLERANCE
    }
}

impl fmt::Display for OpReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<22} instances={:<3} coords={:<4} max_rel_err={:.3e} {}",
            self.name,
            self.instances,
            self.checked,
            self.max_rel_err,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Builds the op under test from the leaves of a parameter store.
type OpFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with |v| ≥ 0.1, away from the ReLU kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// (f(θ+h) − f(θ−h)) / 2h, where `eval_at(v)` is f with the coordinate at v.
fn difference_quotient(orig: f64, mut eval_at: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let plus = eval_at(orig + STEP)?;
    let minus = eval_at(orig - STEP)?;
    Ok((plus - minus) / (2.0 * STEP))
}

/// Scalar loss Σ sᵢ·(outᵢ − tᵢ) expressed as n·mae(out, t), with random signs
/// sᵢ and targets at least 0.5 away.
fn projected_loss(tape: &mut Tape<f64>, store: &ParamStore<f64>, op: OpFn, target: Option<&Tensor<f64>>) -> Result<(Var, Tensor<f64>)> {
    let leaves: Vec<Var> = store.ids().map(|id| tape.param(store, id)).collect();
    let out = op(tape, &leaves)?;
    let out_value = tape.value(out).clone();
    let t = match target {
        Some(t) => tape.input(t.clone()),
        None => tape.input(out_value.clone()),
    };
    let mae = tape.mae(out, t)?;
    Ok((tape.scale(mae, out_value.len() as f64), out_value))
}

/// Relative errors of every (or at most [`MAX_COORDS_PER_INSTANCE`] random)
/// coordinates of one op instance.
fn op_instance(store: ParamStore<f64>, op: OpFn, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mut probe = Tape::new();
    let (_, out) = projected_loss(&mut probe, &store, op, None)?;
    let target = Tensor::new(
        out.shape(),
        out.data()
            .iter()
            .map(|&v| {
                let margin = rng.random_range(0.5..1.5);
                if rng.random::<bool>() {
                    v - margin
                } else {
                    v + margin
                }
            })
            .collect(),
    )?;
    let mut tape = Tape::new();
    let (loss, _) = projected_loss(&mut tape, &store, op, Some(&target))?;
    let mut grads = Gradients::zeros_like(&store);
    tape.backward(loss, &mut grads, &ParamSet::all(store.len()))?;
    let base_sig = tape.kink_signature();
    let base_loss = tape.value(loss).item();
    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.value(id).len()).map(move |i| (id, i)))
        .collect();
    let picked: Vec<usize> = if coords.len() <= MAX_COORDS_PER_INSTANCE {
        (0..coords.len()).collect()
    } else {
        let mut v = sample(rng, coords.len(), MAX_COORDS_PER_INSTANCE).into_vec();
        v.sort_unstable();
        v
    };
    let mut work = store;
    let mut errors = Vec::with_capacity(picked.len());
    for k in picked {
        let (id, i) = coords[k];
        let orig = work.value(id).data()[i];
        let numeric = difference_quotient(orig, |v| {
            work.value_mut(id).data_mut()[i] = v;
            let mut t = Tape::with_frozen_kinks(base_sig.clone());
            let (l, _) = projected_loss(&mut t, &work, op, Some(&target))?;
            Ok(t.value(l).item())
        })?;
        work.value_mut(id).data_mut()[i] = orig;
        errors.push(relative_error(grads.get(id)[i], numeric, base_loss));
    }
    Ok(errors)
}

fn store_of(values: Vec<Tensor<f64>>) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    for (k, v) in values.into_iter().enumerate() {
        store.add(format!("leaf{k}"), v);
    }
    store
}

struct OpCase {
    name: &'static str,
    make: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    op: OpFn,
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "conv2d_1x1",
            make: |r| vec![uniform(r, &[5, 6, 3], -1.0, 1.0), uniform(r, &[1, 1, 3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
            op: |t, v| t.conv2d(v[0], v[1], v[2]),
        },
        OpCase {
            name: "conv2d_3x3",
            make: |r| vec![uniform(r, &[5, 6, 3], -1.0, 1.0), uniform(r, &[3, 3, 3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
            op: |t, v| t.conv2d(v[0], v[1], v[2]),
        },
        OpCase {
            name: "conv2d_5x5",
            make: |r| vec![uniform(r, &[7, 6, 2], -1.0, 1.0), uniform(r, &[5, 5, 2, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            op: |t, v| t.conv2d(v[0], v[1], v[2]),
        },
        OpCase {
            name: "dense_channels",
            make: |r| vec![uniform(r, &[4, 5, 3], -1.0, 1.0), uniform(r, &[3, 6], -1.0, 1.0), uniform(r, &[6], -1.0, 1.0)],
            op: |t, v| t.dense_channels(v[0], v[1], v[2]),
        },
        OpCase {
            name: "relu",
            make: |r| vec![off_zero(r, &[4, 5, 3])],
            op: |t, v| Ok(t.relu(v[0])),
        },
        OpCase {
            name: "tanh",
            make: |r| vec![uniform(r, &[4, 5, 3], -2.0, 2.0)],
            op: |t, v| Ok(t.tanh(v[0])),
        },
        OpCase {
            name: "sigmoid",
            make: |r| vec![uniform(r, &[4, 5, 3], -4.0, 4.0)],
            op: |t, v| Ok(t.sigmoid(v[0])),
        },
        OpCase {
            name: "concat_channels",
            make: |r| vec![uniform(r, &[3, 4, 2], -1.0, 1.0), uniform(r, &[3, 4, 3], -1.0, 1.0)],
            op: |t, v| t.concat_channels(v[0], v[1]),
        },
        OpCase {
            name: "depth_to_space",
            make: |r| vec![uniform(r, &[2, 3, 8], -1.0, 1.0)],
            op: |t, v| t.depth_to_space(v[0], 2),
        },
        OpCase {
            name: "space_to_depth",
            make: |r| vec![uniform(r, &[4, 6, 2], -1.0, 1.0)],
            op: |t, v| t.space_to_depth(v[0], 2),
        },
        OpCase {
            name: "gram",
            make: |r| vec![uniform(r, &[4, 5, 3], -1.0, 1.0)],
            op: |t, v| t.gram(v[0]),
        },
        OpCase {
            name: "mae",
            make: |r| {
                let a = uniform(r, &[4, 5, 3], -1.0, 1.0);
                let b = a.map(|v| v + 0.3);
                let flip = off_zero(r, &[4, 5, 3]);
                let b = Tensor::new(
                    b.shape(),
                    b.data().iter().zip(flip.data()).zip(a.data()).map(|((&bv, &f), &av)| if f > 0.0 { bv } else { 2.0 * av - bv }).collect(),
                )
                .unwrap();
                vec![a, b]
            },
            op: |t, v| t.mae(v[0], v[1]),
        },
        OpCase {
            name: "add",
            make: |r| vec![uniform(r, &[3, 4, 2], -1.0, 1.0), uniform(r, &[3, 4, 2], -1.0, 1.0)],
            op: |t, v| t.add(v[0], v[1]),
        },
        OpCase {
            name: "scale",
            make: |r| vec![uniform(r, &[3, 4, 2], -1.0, 1.0)],
            op: |t, v| Ok(t.scale(v[0], -1.7)),
        },
        OpCase {
            name: "contractive_penalty",
            make: |r| vec![uniform(r, &[3, 4, 6], -0.95, 0.95), uniform(r, &[3, 6], -1.0, 1.0)],
            op: |t, v| t.contractive_penalty(v[0], v[1]),
        },
        OpCase {
            name: "conv_relu_chain",
            make: |r| vec![uniform(r, &[5, 5, 2], -1.0, 1.0), uniform(r, &[3, 3, 2, 3], -1.0, 1.0), uniform(r, &[3], -0.2, 0.2)],
            op: |t, v| {
                let y = t.conv2d(v[0], v[1], v[2])?;
                let y = t.relu(y);
                let z = t.tanh(y);
                t.gram(z)
            },
        },
    ]
}

/// Every primitive op on `instances` random inputs each.
pub fn check_ops(instances: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();
    for (k, case) in op_cases().into_iter().enumerate() {
        let mut report = OpReport::new(case.name);
        for inst in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64) << 32) ^ inst as u64);
            let store = store_of((case.make)(&mut rng));
            report.absorb(&op_instance(store, case.op, &mut rng)?);
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Objective whose plain gradient equals the routed training gradient: the
/// penalty is evaluated on the fixed marked image `m0`, so it reaches the
/// invariance layer only.
fn routed_objective(
    tape: &mut Tape<f64>,
    model: &WatermarkingModel<f64>,
    watermark: &Tensor<f64>,
    cover: &Tensor<f64>,
    m0: &Tensor<f64>,
    weights: &LossWeights,
) -> Result<f64> {
    let fwd = model.forward_full(tape, watermark, cover)?;
    let e = tape.mae(fwd.extracted, fwd.watermark)?;
    let f = tape.mae(fwd.marked, fwd.cover)?;
    let psi = correlation_loss(tape, &fwd.block_b_code, &fwd.block_b_marked)?;
    let mut total = weights.extraction * tape.value(e).item()
        + weights.fidelity * tape.value(f).item()
        + weights.information * tape.value(psi).item();
    if let Some(inv) = model.invariance() {
        let m = tape.input(m0.clone());
        let h = model.invariance_forward(tape, m)?;
        let w = tape.param(model.params(), inv.weight);
        let p = tape.contractive_penalty(h, w)?;
        total += weights.penalty * tape.value(p).item();
    }
    Ok(total)
}

/// Full-model check over `instances` random models: the routed objective
/// gradient against central differences of [`routed_objective`] for
/// `coords_per_component` random coordinates of every component. Parameters
/// are jittered first so the zero-initialized fuse convolutions do not hide
/// the block internals. One report per component.
pub fn check_model(config: ModelConfig, seed: u64, instances: usize, coords_per_component: usize) -> Result<Vec<OpReport>> {
    let suffix = if config.invariance { "" } else { "_no_tau" };
    let mut reports: Vec<OpReport> = Component::ALL
        .iter()
        .filter(|&&c| config.invariance || c != Component::Invariance)
        .map(|c| OpReport::new(format!("model.{}{suffix}", c.prefix())))
        .collect();
    for inst in 0..instances as u64 {
        let errors = model_instance(config, seed.wrapping_add(inst), coords_per_component)?;
        for (report, e) in reports.iter_mut().zip(errors) {
            report.absorb(&e);
        }
    }
    Ok(reports)
}

fn model_instance(config: ModelConfig, seed: u64, coords_per_component: usize) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = WatermarkingModel::<f32>::new(config, seed)?.cast::<f64>();
    for id in model.params().ids().collect::<Vec<_>>() {
        for v in model.params_mut().value_mut(id).data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let watermark = Tensor::<f64>::from_fn(&config.watermark_shape(), |_| f64::from(rng.random::<bool>()));
    let cover = synthetic_cover(seed, config.cover_size()).cast::<f64>();
    let weights = LossWeights::default();
    let mut grads = Gradients::zeros_like(model.params());
    apply_objective_gradients(&model, &watermark, &cover, &weights, &mut grads)?;
    let m0 = model.embed_image(&watermark, &cover)?;
    let mut base = Tape::new();
    let base_loss = routed_objective(&mut base, &model, &watermark, &cover, &m0, &weights)?;
    let base_sig = base.kink_signature();
    drop(base);
    let mut out = Vec::new();
    for comp in Component::ALL {
        let coords: Vec<(ParamId, usize)> = model
            .params()
            .ids()
            .filter(|&id| model.owner(id) == comp)
            .flat_map(|id| (0..model.params().value(id).len()).map(move |i| (id, i)))
            .collect();
        if coords.is_empty() {
            continue;
        }
        let mut errors = Vec::new();
        for k in sample(&mut rng, coords.len(), coords_per_component.min(coords.len())) {
            let (id, i) = coords[k];
            let orig = model.params().value(id).data()[i];
            let numeric = difference_quotient(orig, |v| {
                model.params_mut().value_mut(id).data_mut()[i] = v;
                let mut t = Tape::with_frozen_kinks(base_sig.clone());
                routed_objective(&mut t, &model, &watermark, &cover, &m0, &weights)
            });
            model.params_mut().value_mut(id).data_mut()[i] = orig;
            errors.push(relative_error(grads.get(id)[i], numeric?, base_loss));
        }
        out.push(errors);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenaltyReport {
    pub instances: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

impl PenaltyReport {
    pub fn passed(&self) -> bool {
        self.instances > 0 && self.max_abs_err <= PENALTY_TOLERANCE
    }
}

impl fmt::Display for PenaltyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<22} instances={} max_abs_err={:.3e} max_rel_err={:.3e} {}",
            "penalty_vs_jacobian",
            self.instances,
            self.max_abs_err,
            self.max_rel_err,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn tanh_layer(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.input(x.clone()), tape.input(w.clone()), tape.input(b.clone()));
    let pre = tape.dense_channels(x, w, b)?;
    let h = tape.tanh(pre);
    Ok(tape.value(h).clone())
}

/// Closed-form penalty of `tanh(x·W + b)` against the mean over pixels of the
/// squared Frobenius norm of the Jacobian dh/dx, the latter built column by
/// column from central differences of the layer itself.
pub fn check_penalty(instances: usize, redundancy: usize, seed: u64) -> Result<PenaltyReport> {
    let mut report = PenaltyReport {
        instances: 0,
        max_abs_err: 0.0,
        max_rel_err: 0.0,
    };
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(inst as u64));
        let (h, w) = (rng.random_range(2..6usize), rng.random_range(2..6usize));
        let x = uniform(&mut rng, &[h, w, 3], 0.0, 1.0);
        let wt = uniform(&mut rng, &[3, redundancy], -1.5, 1.5);
        let b = uniform(&mut rng, &[redundancy], -0.5, 0.5);

        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let wv = tape.input(wt.clone());
        let bv = tape.input(b.clone());
        let pre = tape.dense_channels(xv, wv, bv)?;
        let act = tape.tanh(pre);
        let p = tape.contractive_penalty(act, wv)?;
        let closed = tape.value(p).item();

        let pixels = h * w;
        let mut energy = 0.0;
        let mut xp = x.clone();
        for pix in 0..pixels {
            for ch in 0..3 {
                let k = pix * 3 + ch;
                let orig = x.data()[k];
                xp.data_mut()[k] = orig + JACOBIAN_STEP;
                let hp = tanh_layer(&xp, &wt, &b)?;
                xp.data_mut()[k] = orig - JACOBIAN_STEP;
                let hm = tanh_layer(&xp, &wt, &b)?;
                xp.data_mut()[k] = orig;
                for j in 0..redundancy {
                    let idx = pix * redundancy + j;
                    let d = (hp.data()[idx] - hm.data()[idx]) / (2.0 * JACOBIAN_STEP);
                    energy += d * d;
                }
            }
        }
        let numeric = energy / pixels as f64;
        let abs = (closed - numeric).abs();
        report.instances += 1;
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(abs / numeric.abs().max(FLOOR));
    }
    Ok(report)
}

/// Everything `deepmark gradcheck` runs.
pub struct SuiteReport {
    pub ops: Vec<OpReport>,
    pub penalty: PenaltyReport,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpReport::passed) && self.penalty.passed()
    }
}

/// The full architecture at a 32×32 cover. Every layer is size-agnostic, and
/// f64 differences of the 128×128 model cost 16 times as much.
pub fn suite_config(config: ModelConfig) -> ModelConfig {
    ModelConfig {
        watermark_size: 8,
        ..config
    }
}

pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let mut ops = check_ops(SUITE_INSTANCES, seed)?;
    ops.extend(check_model(suite_config(ModelConfig::default()), seed, SUITE_INSTANCES, 4)?);
    ops.extend(check_model(suite_config(ModelConfig::without_invariance()), seed ^ 0x5eed, SUITE_INSTANCES, 2)?);
    let penalty = check_penalty(20, DEFAULT_REDUNDANCY, seed)?;
    Ok(SuiteReport { ops, penalty })
}
