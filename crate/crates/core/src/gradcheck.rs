//! Randomized finite-difference checks of every graph op and of the full
//! adversarial losses on tiny models.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check_stats, GradCheckStats, Graph, Matrix, Op, ParamSet, Var};
use crate::data::{Domain, Unlabeled, VideoSample};
use crate::error::{Error, Result};
use crate::filtration::{normalize, ClassWeights};
use crate::model::{ModelConfig, PatanModel, Pooling};
use crate::train::{loss_dann, loss_pada, loss_patan, Ablation, JointForward, Lambdas};

pub const EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    /// `max |a - n| / max(1e-8, |n|)` over every gradient entry of every trial.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// The same, restricted to entries with `|n| >= 1e-6`.
    pub max_rel_error_resolvable: f64,
}

impl CheckResult {
    fn new(name: &str, trials: usize, st: GradCheckStats) -> Self {
        Self {
            name: name.to_string(),
            trials,
            max_rel_error: st.max_rel_error,
            max_abs_error: st.max_abs_error,
            max_rel_error_resolvable: st.max_rel_error_resolvable,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
    Array2::from_shape_simple_fn((r, c), || rng.gen_range(lo..hi))
}

/// Away from zero so `relu` never sits within `EPS` of its kink.
fn off_kink(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Array2::from_shape_simple_fn((r, c), || {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

type Builder = Box<dyn Fn(&mut Graph, &ParamSet) -> Result<Var>>;

/// Contracts a non-scalar output against fixed random weights so every
/// entry of the gradient is exercised.
fn contract(g: &mut Graph, out: Var, probe: &Matrix) -> Result<Var> {
    let w = g.constant(probe.clone());
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

const OPS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "add_bias",
    "mul",
    "relu",
    "tanh",
    "exp",
    "log_clamped",
    "mean",
    "sum",
    "row_sum",
    "scale",
    "add_scalar",
    "scale_rows",
    "concat_rows",
    "slice_rows",
    "sum_groups",
    "log_softmax",
    "softmax",
    "pick_cols",
    "cross_entropy_rows",
    "grl",
];

/// One random instance of `op`: its parameters and a scalar-valued builder.
fn op_case(op: &str, rng: &mut ChaCha8Rng) -> Result<(ParamSet, Builder, f64)> {
    let r = rng.gen_range(1..=4);
    // a single column makes softmax-based ops constant
    let c = rng.gen_range(2..=4);
    let mut ps = ParamSet::new();
    let a = ps.add("a", uniform(rng, r, c, -1.0, 1.0))?;
    let probe_rc = uniform(rng, r, c, -1.0, 1.0);
    let mut scale = 1.0;
    let build: Builder = match op {
        "matmul" => {
            let n = rng.gen_range(1..=4);
            let b = ps.add("b", uniform(rng, c, n, -1.0, 1.0))?;
            let probe = uniform(rng, r, n, -1.0, 1.0);
            Box::new(move |g, p| {
                let (x, y) = (g.param(p, a), g.param(p, b));
                let o = g.matmul(x, y)?;
                contract(g, o, &probe)
            })
        }
        "add" | "sub" | "mul" => {
            let b = ps.add("b", uniform(rng, r, c, -1.0, 1.0))?;
            let op = op.to_string();
            Box::new(move |g, p| {
                let (x, y) = (g.param(p, a), g.param(p, b));
                let o = match op.as_str() {
                    "add" => g.add(x, y)?,
                    "sub" => g.sub(x, y)?,
                    _ => g.mul(x, y)?,
                };
                contract(g, o, &probe_rc)
            })
        }
        "add_bias" => {
            let b = ps.add("b", uniform(rng, 1, c, -1.0, 1.0))?;
            Box::new(move |g, p| {
                let (x, y) = (g.param(p, a), g.param(p, b));
                let o = g.add_bias(x, y)?;
                contract(g, o, &probe_rc)
            })
        }
        "relu" => {
            *ps.value_mut(a) = off_kink(rng, r, c);
            Box::new(move |g, p| {
                let x = g.param(p, a);
                let o = g.relu(x);
                contract(g, o, &probe_rc)
            })
        }
        "log_clamped" => {
            *ps.value_mut(a) = uniform(rng, r, c, 0.1, 1.0);
            Box::new(move |g, p| {
                let x = g.param(p, a);
                let o = g.log_clamped(x, 1e-8);
                contract(g, o, &probe_rc)
            })
        }
        "tanh" | "exp" | "log_softmax" | "softmax" | "grl" | "scale" | "add_scalar" => {
            let op = op.to_string();
            let k: f64 = rng.gen_range(0.1..2.0);
            if op == "grl" {
                // identity forward: analytic = -k * numeric
                scale = -k;
            }
            Box::new(move |g, p| {
                let x = g.param(p, a);
                let o = match op.as_str() {
                    "tanh" => g.tanh(x),
                    "exp" => g.exp(x),
                    "log_softmax" => g.log_softmax(x),
                    "softmax" => g.softmax(x),
                    "grl" => g.grl(x, k),
                    "scale" => g.scale(x, k),
                    _ => g.add_scalar(x, k),
                };
                contract(g, o, &probe_rc)
            })
        }
        "mean" | "sum" => {
            let op = op.to_string();
            Box::new(move |g, p| {
                let x = g.param(p, a);
                let s = if op == "mean" { g.mean(x) } else { g.sum(x) };
                // square so the gradient depends on the value
                g.mul(s, s)
            })
        }
        "row_sum" => {
            let probe = uniform(rng, r, 1, -1.0, 1.0);
            Box::new(move |g, p| {
                let x = g.param(p, a);
                let o = g.row_sum(x);
                contract(g, o, &probe)
            })
        }
        "scale_rows" => {
            let w = ps.add("w", uniform(rng, r, 1, -1.0, 1.0))?;
            Box::new(move |g, p| {
                let (x, y) = (g.param(p, a), g.param(p, w));
                let o = g.scale_rows(x, y)?;
                contract(g, o, &probe_rc)
            })
        }
        "concat_rows" => {
            let r2 = rng.gen_range(1..=3);
            let b = ps.add("b", uniform(rng, r2, c, -1.0, 1.0))?;
            let probe = uniform(rng, r + r2, c, -1.0, 1.0);
            Box::new(move |g, p| {
                let (x, y) = (g.param(p, a), g.param(p, b));
                let o = g.concat_rows(&[x, y])?;
                contract(g, o, &probe)
            })
        }
        "slice_rows" => {
            let start = rng.gen_range(0..r);
            let len = rng.gen_range(1..=r - start);
            let probe = uniform(rng, len, c, -1.0, 1.0);
            Box::new(move |g, p| {
                let x = g.param(p, a);
                let o = g.slice_rows(x, start, len)?;
                contract(g, o, &probe)
            })
        }
        "sum_groups" => {
            let group = rng.gen_range(1..=3);
            let groups = rng.gen_range(1..=3);
            let b = ps.add("b", uniform(rng, group * groups, c, -1.0, 1.0))?;
            let probe = uniform(rng, groups, c, -1.0, 1.0);
            Box::new(move |g, p| {
                let x = g.param(p, b);
                let o = g.sum_groups(x, group)?;
                contract(g, o, &probe)
            })
        }
        "pick_cols" => {
            let cols: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
            let probe = uniform(rng, r, 1, -1.0, 1.0);
            Box::new(move |g, p| {
                let x = g.param(p, a);
                let o = g.pick_cols(x, &cols)?;
                contract(g, o, &probe)
            })
        }
        "cross_entropy_rows" => {
            let labels: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
            let probe = uniform(rng, r, 1, -1.0, 1.0);
            Box::new(move |g, p| {
                let x = g.param(p, a);
                let o = g.cross_entropy_rows(x, &labels)?;
                contract(g, o, &probe)
            })
        }
        other => unreachable!("no grad-check case for op `{other}`"),
    };
    Ok((ps, build, scale))
}

/// `trials` random instances of every op; one result per op.
pub fn check_ops(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OPS.iter()
        .map(|&op| {
            let mut st = GradCheckStats::default();
            for _ in 0..trials {
                let (mut ps, build, scale) = op_case(op, &mut rng)?;
                st = st.merge(grad_check_stats(&mut ps, EPS, scale, build)?);
            }
            Ok(CheckResult::new(op, trials, st))
        })
        .collect()
}

/// A random tiny model and batch: `k <= 4`, `d_in <= 6`, at most 5 classes.
/// Attention is left differentiable and every reversal runs with coefficient
/// -1 (identity backward), so backprop computes the true derivative of the
/// assembled loss. Auxiliary heads are sharpened so some scales get non-zero
/// attention.
struct LossCase {
    model: PatanModel,
    source: Vec<VideoSample>,
    target: Vec<Matrix>,
    gamma: ClassWeights,
    lambdas: Lambdas,
}

/// Central differences straddle a ReLU kink (hidden units and the attention
/// clamp alike) when its input lies this close to zero; such points are
/// redrawn.
const KINK_MARGIN: f64 = 1e-3;

fn near_kink(g: &Graph) -> bool {
    g.vars().any(|v| match &g.node(v).op {
        Op::Relu(a) => g.value(*a).iter().any(|x| x.abs() <= KINK_MARGIN),
        _ => false,
    })
}

fn loss_case(rng: &mut ChaCha8Rng) -> Result<LossCase> {
    for _ in 0..1000 {
        let case = draw_case(rng)?;
        let src: Vec<&VideoSample> = case.source.iter().collect();
        let tgt: Vec<Unlabeled> = case.target.iter().map(|f| Unlabeled { id: "t", frames: f }).collect();
        let mut clear = true;
        for pooling in [Pooling::Attentive, Pooling::Uniform] {
            let mut g = Graph::new();
            JointForward::new(&mut g, &case.model, &src, &tgt, pooling, -1.0)?;
            clear &= !near_kink(&g);
        }
        if clear {
            return Ok(case);
        }
    }
    Err(Error::Runtime("no kink-free grad-check case in 1000 draws".into()))
}

fn draw_case(rng: &mut ChaCha8Rng) -> Result<LossCase> {
    let k = rng.gen_range(2..=4);
    let d_in = rng.gen_range(1..=6);
    let classes = rng.gen_range(2..=5);
    let mut cfg = ModelConfig::new(d_in, k, classes, rng.gen());
    cfg.d_sp = 3;
    cfg.d_t = 3;
    cfg.h_rel = 4;
    cfg.stop_grad_attention = false;
    let mut model = PatanModel::new(cfg)?;
    // Zero biases put rows of all-dead units exactly on the next ReLU's kink;
    // a random parameter point avoids that.
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        if model.params.name(id).ends_with(".b") {
            let v = model.params.value_mut(id);
            *v = uniform(rng, v.nrows(), v.ncols(), -0.5, 0.5);
        }
    }
    let sharpen: f64 = rng.gen_range(1.0..3.0);
    for head in model.aux.clone() {
        model.params.value_mut(head.w).mapv_inplace(|v| v * sharpen);
    }
    let source = (0..rng.gen_range(1..=3))
        .map(|i| {
            let label = rng.gen_range(0..classes);
            VideoSample::new(format!("s{i}"), Domain::Source, label, uniform(rng, k, d_in, -1.0, 1.0))
        })
        .collect();
    let target = (0..rng.gen_range(1..=3)).map(|_| uniform(rng, k, d_in, -1.0, 1.0)).collect();
    let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..1.0)).collect();
    Ok(LossCase {
        model,
        source,
        target,
        gamma: ClassWeights {
            gamma: normalize(&raw)?,
            epoch_computed: 1,
        },
        lambdas: Lambdas {
            sp: rng.gen_range(0.1..1.5),
            t: rng.gen_range(0.1..1.5),
            aux: rng.gen_range(0.1..1.5),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LossKind {
    Dann,
    Pada,
    Patan,
}

fn check_loss(kind: LossKind, trials: usize, rng: &mut ChaCha8Rng) -> Result<GradCheckStats> {
    let mut st = GradCheckStats::default();
    for _ in 0..trials {
        let case = loss_case(rng)?;
        let mut params = case.model.params.clone();
        let pooling = if kind == LossKind::Patan { Pooling::Attentive } else { Pooling::Uniform };
        let build = |g: &mut Graph, p: &ParamSet| -> Result<Var> {
            let mut m = case.model.clone();
            m.params = p.clone();
            let src: Vec<&VideoSample> = case.source.iter().collect();
            let tgt: Vec<Unlabeled> = case.target.iter().map(|f| Unlabeled { id: "t", frames: f }).collect();
            let jf = JointForward::new(g, &m, &src, &tgt, pooling, -1.0)?;
            let terms = match kind {
                LossKind::Dann => loss_dann(g, &jf, case.lambdas)?,
                LossKind::Pada => loss_pada(g, &jf, &case.gamma, case.lambdas)?,
                LossKind::Patan => loss_patan(g, &jf, &case.gamma, case.lambdas, Ablation::None)?,
            };
            Ok(terms.total)
        };
        st = st.merge(grad_check_stats(&mut params, EPS, 1.0, build)?);
    }
    Ok(st)
}

/// DANN, PADA and PATAN losses, `trials` random tiny models each.
pub fn check_losses(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [("loss_dann", LossKind::Dann), ("loss_pada", LossKind::Pada), ("loss_patan", LossKind::Patan)]
        .into_iter()
        .map(|(name, kind)| {
            Ok(CheckResult::new(name, trials, check_loss(kind, trials, &mut rng)?))
        })
        .collect()
}

/// Every op, then every loss.
pub fn run_all(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = check_ops(trials, seed)?;
    out.extend(check_losses(trials, seed.wrapping_add(1))?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_within_tolerance() {
        for r in check_ops(100, 7).unwrap() {
            assert!(r.max_rel_error < 1e-4, "{}: {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn losses_within_tolerance() {
        for r in check_losses(3, 3).unwrap() {
            assert!(r.max_rel_error < 1e-4, "{}: {}", r.name, r.max_rel_error);
        }
    }
}
