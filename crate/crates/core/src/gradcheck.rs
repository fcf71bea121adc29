//! Central finite-difference verification of tape gradients, and the named
//! suite of checks covering every differentiable operation.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregate::{Aggregator, AggregatorConfig, Method};
use crate::backbone::{LayerKind, LayerSpec, ResBlock};
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Mode, Var};
use crate::kernels::Window3;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so entries whose true gradient
/// is ~0 are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |tape - fd| / max(|tape|, |fd|, REL_ERROR_FLOOR)` over all entries.
    pub max_rel_error: f64,
    /// (input index, element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn eval_scalar<F>(f: &F, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, store, &vars)?;
    g.value(out).item()
}

struct Tracker {
    report: GradCheckReport,
}

impl Tracker {
    fn record(&mut self, slot: usize, element: usize, analytic: f64, hi: f64, lo: f64, epsilon: f64) {
        let fd = (hi - lo) / (2.0 * epsilon);
        let denom = analytic.abs().max(fd.abs()).max(REL_ERROR_FLOOR);
        let rel = (analytic - fd).abs() / denom;
        let r = &mut self.report;
        r.checked += 1;
        if r.worst.is_none() || rel > r.max_rel_error {
            r.max_rel_error = rel;
            r.worst = Some((slot, element));
        }
    }
}

/// Compare the tape gradient of scalar `f` with `(f(x+ε) - f(x-ε)) / 2ε`
/// for every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], epsilon: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_params(|g, _, v| f(g, v), &ParamStore::new(), inputs, epsilon, tolerance)
}

/// [`grad_check`] that also perturbs every trainable tensor of `store`.
/// Parameters are numbered after the inputs in [`GradCheckReport::worst`].
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut store = store.clone();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &store, &vars)?;
    if g.value(out).len() != 1 {
        return Err(shape_err("grad_check", "function must be scalar valued"));
    }
    let grads = g.backward(out)?;
    store.zero_grads();
    store.accumulate_grads(&g, &grads);

    let mut t = Tracker {
        report: GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
            tolerance,
            passed: true,
        },
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let tape = grads.get(*var).map(|t| t.data().to_vec());
        for e in 0..inputs[i].len() {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + epsilon;
            let hi = eval_scalar(&f, &store, &probe)?;
            probe[i].data_mut()[e] = orig - epsilon;
            let lo = eval_scalar(&f, &store, &probe)?;
            probe[i].data_mut()[e] = orig;
            t.record(i, e, tape.as_ref().map_or(0.0, |t| t[e]), hi, lo, epsilon);
        }
    }
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let tape = store.grad(id).data().to_vec();
        for (e, &analytic) in tape.iter().enumerate() {
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + epsilon;
            let hi = eval_scalar(&f, &store, &probe)?;
            store.value_mut(id).data_mut()[e] = orig - epsilon;
            let lo = eval_scalar(&f, &store, &probe)?;
            store.value_mut(id).data_mut()[e] = orig;
            t.record(inputs.len() + k, e, analytic, hi, lo, epsilon);
        }
    }
    let mut report = t.report;
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}

/// Relative tolerance for single operations.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
/// Relative tolerance for cells, blocks and whole sequences.
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
/// Seeds each case runs under.
pub const SUITE_SEEDS: u64 = 5;

/// A named gradient check, run once per seed.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub composite: bool,
    pub run: fn(u64) -> Result<GradCheckReport>,
}

impl GradCase {
    pub fn tolerance(&self) -> f64 {
        if self.composite {
            COMPOSITE_TOLERANCE
        } else {
            PRIMITIVE_TOLERANCE
        }
    }
}

impl core::fmt::Debug for GradCase {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("GradCase")
            .field("name", &self.name)
            .field("composite", &self.composite)
            .finish()
    }
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rng
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for inputs of kinked functions.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values at least 0.01 apart, for max pooling.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(shape, |i| order[i] as f64 * 0.01 - 0.5)
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output element matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = uniform(g.shape(y), -1.0, 1.0, &mut rng_for(seed, 99));
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn unary(seed: u64, x: Tensor<f64>, op: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Result<GradCheckReport> {
    grad_check(
        |g, v| {
            let y = op(g, v[0])?;
            project(g, y, seed)
        },
        &[x],
        DEFAULT_EPSILON,
        PRIMITIVE_TOLERANCE,
    )
}

fn binary(seed: u64, op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 1);
    let a = uniform(&[2, 3, 2], -1.0, 1.0, &mut rng);
    let b = uniform(&[2, 3, 2], -1.0, 1.0, &mut rng);
    grad_check(
        |g, v| {
            let y = op(g, v[0], v[1])?;
            project(g, y, seed)
        },
        &[a, b],
        DEFAULT_EPSILON,
        PRIMITIVE_TOLERANCE,
    )
}

fn conv_case(seed: u64, x_shape: [usize; 5], k_shape: [usize; 5], window: Window3) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 2);
    let x = uniform(&x_shape, -1.0, 1.0, &mut rng);
    let k = uniform(&k_shape, -1.0, 1.0, &mut rng);
    grad_check(
        |g, v| {
            let y = g.conv3d(v[0], v[1], window)?;
            project(g, y, seed)
        },
        &[x, k],
        DEFAULT_EPSILON,
        PRIMITIVE_TOLERANCE,
    )
}

fn case_conv3d(seed: u64) -> Result<GradCheckReport> {
    conv_case(seed, [2, 3, 3, 3, 2], [3, 3, 3, 2, 3], Window3::new([1, 1, 1], [1, 1, 1]))
}

fn case_conv3d_strided(seed: u64) -> Result<GradCheckReport> {
    conv_case(seed, [1, 4, 5, 4, 2], [2, 3, 1, 2, 2], Window3::new([2, 2, 1], [0, 1, 0]))
}

fn case_pointwise_conv(seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 3);
    let x = uniform(&[2, 2, 2, 2, 3], -1.0, 1.0, &mut rng);
    let w = uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let b = uniform(&[4], -1.0, 1.0, &mut rng);
    grad_check(
        |g, v| {
            let y = g.pointwise_conv(v[0], v[1], Some(v[2]))?;
            project(g, y, seed)
        },
        &[x, w, b],
        DEFAULT_EPSILON,
        PRIMITIVE_TOLERANCE,
    )
}

fn case_dense(seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 4);
    let x = uniform(&[3, 5], -1.0, 1.0, &mut rng);
    let w = uniform(&[5, 2], -1.0, 1.0, &mut rng);
    let b = uniform(&[2], -1.0, 1.0, &mut rng);
    grad_check(
        |g, v| {
            let y = g.dense(v[0], v[1], Some(v[2]))?;
            project(g, y, seed)
        },
        &[x, w, b],
        DEFAULT_EPSILON,
        PRIMITIVE_TOLERANCE,
    )
}

fn case_sigmoid(seed: u64) -> Result<GradCheckReport> {
    let x = uniform(&[3, 4], -3.0, 3.0, &mut rng_for(seed, 5));
    unary(seed, x, |g, v| g.sigmoid(v))
}

fn case_tanh(seed: u64) -> Result<GradCheckReport> {
    let x = uniform(&[3, 4], -3.0, 3.0, &mut rng_for(seed, 6));
    unary(seed, x, |g, v| g.tanh(v))
}

fn case_relu(seed: u64) -> Result<GradCheckReport> {
    let x = off_zero(&[3, 4], &mut rng_for(seed, 7));
    unary(seed, x, |g, v| g.relu(v))
}

fn case_add(seed: u64) -> Result<GradCheckReport> {
    binary(seed, |g, a, b| g.add(a, b))
}

fn case_sub(seed: u64) -> Result<GradCheckReport> {
    binary(seed, |g, a, b| g.sub(a, b))
}

fn case_mul(seed: u64) -> Result<GradCheckReport> {
    binary(seed, |g, a, b| g.mul(a, b))
}

fn case_convex_mix(seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 8);
    let a = uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let b = uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let z = uniform(&[2, 3], 0.05, 0.95, &mut rng);
    grad_check(
        |g, v| {
            let y = g.convex_mix(v[0], v[1], v[2])?;
            project(g, y, seed)
        },
        &[a, b, z],
        DEFAULT_EPSILON,
        PRIMITIVE_TOLERANCE,
    )
}

fn case_scale(seed: u64) -> Result<GradCheckReport> {
    let x = uniform(&[4, 2], -1.0, 1.0, &mut rng_for(seed, 9));
    unary(seed, x, |g, v| g.scale(v, -1.75))
}

fn case_sum(seed: u64) -> Result<GradCheckReport> {
    let x = uniform(&[3, 2, 2], -1.0, 1.0, &mut rng_for(seed, 10));
    grad_check(|g, v| g.sum(v[0]), &[x], DEFAULT_EPSILON, PRIMITIVE_TOLERANCE)
}

fn case_mean(seed: u64) -> Result<GradCheckReport> {
    let x = uniform(&[3, 2, 2], -1.0, 1.0, &mut rng_for(seed, 11));
    grad_check(|g, v| g.mean(v[0]), &[x], DEFAULT_EPSILON, PRIMITIVE_TOLERANCE)
}

fn case_reshape(seed: u64) -> Result<GradCheckReport> {
    let x = uniform(&[2, 6], -1.0, 1.0, &mut rng_for(seed, 12));
    unary(seed, x, |g, v| g.reshape(v, &[3, 2, 2]))
}

fn case_global_avg_pool(seed: u64) -> Result<GradCheckReport> {
    let x = uniform(&[2, 2, 3, 2, 3], -1.0, 1.0, &mut rng_for(seed, 13));
    unary(seed, x, |g, v| g.global_avg_pool(v))
}

fn case_max_pool3d(seed: u64) -> Result<GradCheckReport> {
    let x = distinct(&[1, 2, 5, 5, 2], &mut rng_for(seed, 14));
    unary(seed, x, |g, v| {
        g.max_pool3d(v, [1, 3, 3], Window3::new([1, 2, 2], [0, 1, 1]))
    })
}

fn case_batch_norm_train(seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 15);
    let x = uniform(&[3, 2, 2, 3], -1.0, 1.0, &mut rng);
    let gamma = uniform(&[3], 0.5, 1.5, &mut rng);
    let beta = uniform(&[3], -0.5, 0.5, &mut rng);
    grad_check(
        |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], None, Mode::Train)?;
            project(g, y, seed)
        },
        &[x, gamma, beta],
        DEFAULT_EPSILON,
        PRIMITIVE_TOLERANCE,
    )
}

fn case_batch_norm_eval(seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 16);
    let x = uniform(&[4, 3], -1.0, 1.0, &mut rng);
    let gamma = uniform(&[3], 0.5, 1.5, &mut rng);
    let beta = uniform(&[3], -0.5, 0.5, &mut rng);
    let mean: Vec<f64> = (0..3).map(|_| rng.random_range(-0.3..0.3)).collect();
    let var: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..2.0)).collect();
    grad_check(
        |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), Mode::Eval)?;
            project(g, y, seed)
        },
        &[x, gamma, beta],
        DEFAULT_EPSILON,
        PRIMITIVE_TOLERANCE,
    )
}

fn case_softmax_cross_entropy(seed: u64) -> Result<GradCheckReport> {
    let x = uniform(&[3, 4], -2.0, 2.0, &mut rng_for(seed, 17));
    grad_check(
        |g, v| g.softmax_cross_entropy(v[0], &[0, 3, 1]),
        &[x],
        DEFAULT_EPSILON,
        PRIMITIVE_TOLERANCE,
    )
}

/// Aggregator with every trainable tensor redrawn from `U[-0.5, 0.5]` so no
/// gradient path is switched off by a zero initialization.
fn random_aggregator(method: Method, seed: u64) -> Result<(Aggregator, ParamStore<f64>)> {
    let mut rng = rng_for(seed, 20);
    let mut store = ParamStore::new();
    let agg = Aggregator::build(AggregatorConfig::new(method, 8, 3), &mut store, &mut rng)?;
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = uniform(&shape, -0.5, 0.5, &mut rng);
    }
    Ok((agg, store))
}

fn feature_shape(method: Method) -> Vec<usize> {
    if method.is_spatial() {
        alloc::vec![2, 1, 2, 2, 8]
    } else {
        alloc::vec![2, 8]
    }
}

fn step_case(seed: u64, method: Method) -> Result<GradCheckReport> {
    let (agg, store) = random_aggregator(method, seed)?;
    let mut rng = rng_for(seed, 21);
    let shape = feature_shape(method);
    let state = uniform(&shape, -1.0, 1.0, &mut rng);
    let x = uniform(&shape, -1.0, 1.0, &mut rng);
    grad_check_params(
        |g, s, v| {
            let y = match method {
                Method::FastGru => agg.fast_gru_step(g, s, v[0], v[1])?,
                Method::Gru => agg.gru_step(g, s, v[0], v[1])?,
                Method::Concat => agg.concat_step(g, s, v[0], v[1], Mode::Train)?,
                Method::Lstm => {
                    let cell = g.scale(v[0], 0.5)?;
                    let (h, c) = agg.lstm_step(g, s, (v[0], cell), v[1])?;
                    g.add(h, c)?
                }
                Method::AvgPool => {
                    let state = agg.init_state(g, s, v[0])?;
                    let state = agg.step(g, s, state, v[1], Mode::Train)?;
                    agg.classify_head(g, s, state)?
                }
            };
            project(g, y, seed)
        },
        &store,
        &[state, x],
        DEFAULT_EPSILON,
        COMPOSITE_TOLERANCE,
    )
}

fn sequence_case(seed: u64, method: Method) -> Result<GradCheckReport> {
    let (agg, store) = random_aggregator(method, seed)?;
    let mut rng = rng_for(seed, 22);
    let clips: Vec<Tensor<f64>> = (0..3).map(|_| uniform(&[2, 1, 2, 2, 8], -1.0, 1.0, &mut rng)).collect();
    grad_check_params(
        |g, s, v| {
            let logits = agg.aggregate_sequence(g, s, v, Mode::Train)?;
            g.softmax_cross_entropy(logits, &[2, 0])
        },
        &store,
        &clips,
        DEFAULT_EPSILON,
        COMPOSITE_TOLERANCE,
    )
}

fn block_case(seed: u64, kind: LayerKind) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 23);
    let stage = LayerSpec {
        name: "block".into(),
        kind,
        kernel: if kind == LayerKind::Bottleneck21d { [3, 3, 3] } else { [1, 3, 3] },
        stride: if kind == LayerKind::Bottleneck21d { [2, 2, 2] } else { [1, 2, 2] },
        padding: [if kind == LayerKind::Bottleneck21d { 1 } else { 0 }, 1, 1],
        in_channels: 3,
        width: 2,
        mid_channels: 3,
        out_channels: 8,
        repeats: 1,
    };
    let mut store = ParamStore::new();
    let block = ResBlock::register(&stage, 0, &mut store, &mut rng);
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        let lo = if store.name(id).ends_with(".gamma") { 0.5 } else { -0.5 };
        *store.value_mut(id) = uniform(&shape, lo, lo + 1.0, &mut rng);
    }
    let x = uniform(&[2, 2, 4, 4, 3], -1.0, 1.0, &mut rng);
    grad_check_params(
        |g, s, v| {
            let y = block.forward(g, s, v[0], Mode::Train)?;
            project(g, y, seed)
        },
        &store,
        &[x],
        DEFAULT_EPSILON,
        COMPOSITE_TOLERANCE,
    )
}

macro_rules! cases {
    ($($name:literal => $composite:literal, $f:expr;)*) => {
        alloc::vec![$(GradCase { name: $name, composite: $composite, run: $f }),*]
    };
}

/// Every differentiable operation and every aggregator step, by name.
pub fn suite() -> Vec<GradCase> {
    cases! {
        "conv3d" => false, case_conv3d;
        "conv3d_strided" => false, case_conv3d_strided;
        "pointwise_conv" => false, case_pointwise_conv;
        "dense" => false, case_dense;
        "sigmoid" => false, case_sigmoid;
        "tanh" => false, case_tanh;
        "relu" => false, case_relu;
        "add" => false, case_add;
        "sub" => false, case_sub;
        "mul" => false, case_mul;
        "convex_mix" => false, case_convex_mix;
        "scale" => false, case_scale;
        "sum" => false, case_sum;
        "mean" => false, case_mean;
        "reshape" => false, case_reshape;
        "global_avg_pool" => false, case_global_avg_pool;
        "max_pool3d" => false, case_max_pool3d;
        "batch_norm_train" => false, case_batch_norm_train;
        "batch_norm_eval" => false, case_batch_norm_eval;
        "softmax_cross_entropy" => false, case_softmax_cross_entropy;
        "fast_gru_step" => true, |s| step_case(s, Method::FastGru);
        "gru_step" => true, |s| step_case(s, Method::Gru);
        "lstm_step" => true, |s| step_case(s, Method::Lstm);
        "concat_step" => true, |s| step_case(s, Method::Concat);
        "avg_pool_step" => true, |s| step_case(s, Method::AvgPool);
        "sequence_fast_gru" => true, |s| sequence_case(s, Method::FastGru);
        "sequence_gru" => true, |s| sequence_case(s, Method::Gru);
        "sequence_lstm" => true, |s| sequence_case(s, Method::Lstm);
        "sequence_concat" => true, |s| sequence_case(s, Method::Concat);
        "sequence_avg_pool" => true, |s| sequence_case(s, Method::AvgPool);
        "res_block_2d" => true, |s| block_case(s, LayerKind::Bottleneck2d);
        "res_block_21d" => true, |s| block_case(s, LayerKind::Bottleneck21d);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_matches_differences() {
        let x = Tensor::from_fn(&[3, 2], |i| i as f64 * 0.25 - 0.6);
        let r = grad_check(|g, v| g.sum(v[0]), &[x], DEFAULT_EPSILON, 1e-9).unwrap();
        assert!(r.max_rel_error < 1e-9);
        assert!(r.passed);
        assert_eq!(r.checked, 6);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu has a kink at 0; evaluating exactly on it makes the one-sided
        // tape gradient disagree with the central difference
        let x = Tensor::new(&[1], alloc::vec![0.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let y = g.relu(v[0])?;
                g.sum(y)
            },
            &[x],
            1e-3,
            1e-5,
        )
        .unwrap();
        assert!(!r.passed);
    }
}
