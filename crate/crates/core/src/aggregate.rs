//! Sequence aggregators: `o_t = f(o_{t-1}, x_t)` with `o_0 = x_0`, followed by
//! a global-average-pool + fully-connected head.
//!
//! Feature maps are batched `[n, l, h, w, c]` tensors. FAST-GRU keeps that
//! resolution in its state; GRU, LSTM and concat work on the pooled `[n, c]`
//! vector; score averaging applies the head per clip and averages logits.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::param::{BatchNormParams, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    FastGru,
    Gru,
    Lstm,
    Concat,
    AvgPool,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::FastGru,
        Method::Gru,
        Method::Lstm,
        Method::Concat,
        Method::AvgPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FastGru => "fast-gru",
            Method::Gru => "gru",
            Method::Lstm => "lstm",
            Method::Concat => "concat",
            Method::AvgPool => "avg-pool",
        }
    }

    /// Whether the state keeps the feature map's spatio-temporal resolution.
    pub fn is_spatial(self) -> bool {
        self == Method::FastGru
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregation method '{}'", s)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregatorConfig {
    pub method: Method,
    /// Feature channels `c`.
    pub channels: usize,
    /// FAST-GRU gate bottleneck factor `r`.
    pub reduction: usize,
    pub num_classes: usize,
    /// Initial bias of the gate pre-activations.
    pub gate_bias: f64,
}

impl AggregatorConfig {
    pub fn new(method: Method, channels: usize, num_classes: usize) -> Self {
        Self {
            method,
            channels,
            reduction: 4,
            num_classes,
            gate_bias: 0.0,
        }
    }
}

/// Recurrent state carried between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggState {
    /// `[n, l, h, w, c]`, FAST-GRU.
    Spatial(Var),
    /// `[n, c]`, GRU and concat.
    Vector(Var),
    /// LSTM hidden output and cell, both `[n, c]`.
    VectorCell { hidden: Var, cell: Var },
    /// Running sum of per-clip logits and the number of clips consumed.
    ScoreSum { sum: Var, count: usize },
}

/// Weight `[cin, cout]` plus optional bias `[cout]`.
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Affine {
    fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        bias: Option<f64>,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(&format!("{name}.weight"), &[cin, cout], cin, rng);
        let bias = bias.map(|b| store.add_weight(&format!("{name}.bias"), Tensor::full(&[cout], T::of(b))));
        Self { weight, bias }
    }

    /// Pointwise conv for rank-5 inputs, dense for `[n, c]`.
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        if g.shape(x).len() == 5 {
            g.pointwise_conv(x, w, b)
        } else {
            g.dense(x, w, b)
        }
    }
}

#[derive(Debug, Clone)]
pub struct FastGruParams {
    pub u_rx: Affine,
    pub u_ro: Affine,
    pub u_zx: Affine,
    pub u_zo: Affine,
    pub w_r: Affine,
    pub w_z: Affine,
    pub v_x: Affine,
    pub v_o: Affine,
}

/// Intermediate values of one FAST-GRU transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FastGruParts {
    pub reset: Var,
    pub update: Var,
    pub candidate: Var,
    pub next: Var,
}

#[derive(Debug, Clone)]
pub struct GruParams {
    pub g_rx: Affine,
    pub g_ro: Affine,
    pub g_zx: Affine,
    pub g_zo: Affine,
    pub v_x: Affine,
    pub v_o: Affine,
}

/// One `(input, recurrent)` projection pair per LSTM gate.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub input_gate: (Affine, Affine),
    pub forget_gate: (Affine, Affine),
    pub output_gate: (Affine, Affine),
    pub candidate: (Affine, Affine),
}

#[derive(Debug, Clone)]
pub struct ConcatParams {
    pub w: Affine,
    pub u: Affine,
    pub bn: BatchNormParams,
}

#[derive(Debug, Clone)]
pub enum CellParams {
    FastGru(FastGruParams),
    Gru(GruParams),
    Lstm(LstmParams),
    Concat(ConcatParams),
    AvgPool,
}

/// An aggregation cell plus its classification head. Parameters live in the
/// store passed to [`Aggregator::build`].
#[derive(Debug, Clone)]
pub struct Aggregator {
    config: AggregatorConfig,
    cell: CellParams,
    head: Affine,
}

impl Aggregator {
    pub fn build<T: Real, R: Rng>(
        config: AggregatorConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let c = config.channels;
        if c == 0 || config.num_classes == 0 {
            return Err(Error::Config("aggregator needs channels and classes".into()));
        }
        let gb = Some(config.gate_bias);
        let zero = Some(0.0);
        let cell = match config.method {
            Method::FastGru => {
                let r = config.reduction;
                if r == 0 || c % r != 0 {
                    return Err(Error::Config(format!(
                        "channels {} not divisible by reduction factor {}",
                        c, r
                    )));
                }
                let m = c / r;
                CellParams::FastGru(FastGruParams {
                    u_rx: Affine::register(store, "fast_gru.u_rx", c, m, zero, rng),
                    u_ro: Affine::register(store, "fast_gru.u_ro", c, m, None, rng),
                    u_zx: Affine::register(store, "fast_gru.u_zx", c, m, zero, rng),
                    u_zo: Affine::register(store, "fast_gru.u_zo", c, m, None, rng),
                    w_r: Affine::register(store, "fast_gru.w_r", m, c, gb, rng),
                    w_z: Affine::register(store, "fast_gru.w_z", m, c, gb, rng),
                    v_x: Affine::register(store, "fast_gru.v_x", c, c, zero, rng),
                    v_o: Affine::register(store, "fast_gru.v_o", c, c, None, rng),
                })
            }
            Method::Gru => CellParams::Gru(GruParams {
                g_rx: Affine::register(store, "gru.g_rx", c, c, gb, rng),
                g_ro: Affine::register(store, "gru.g_ro", c, c, None, rng),
                g_zx: Affine::register(store, "gru.g_zx", c, c, gb, rng),
                g_zo: Affine::register(store, "gru.g_zo", c, c, None, rng),
                v_x: Affine::register(store, "gru.v_x", c, c, zero, rng),
                v_o: Affine::register(store, "gru.v_o", c, c, None, rng),
            }),
            Method::Lstm => {
                let mut pair = |name: &str, bias| {
                    (
                        Affine::register(store, &format!("lstm.{name}_x"), c, c, bias, rng),
                        Affine::register(store, &format!("lstm.{name}_h"), c, c, None, rng),
                    )
                };
                CellParams::Lstm(LstmParams {
                    input_gate: pair("input", gb),
                    forget_gate: pair("forget", gb),
                    output_gate: pair("output", gb),
                    candidate: pair("candidate", zero),
                })
            }
            Method::Concat => CellParams::Concat(ConcatParams {
                w: Affine::register(store, "concat.w", c, c, None, rng),
                u: Affine::register(store, "concat.u", c, c, zero, rng),
                bn: BatchNormParams::register(store, "concat.bn", c),
            }),
            Method::AvgPool => CellParams::AvgPool,
        };
        let head = Affine::register(store, "head", c, config.num_classes, zero, rng);
        Ok(Self { config, cell, head })
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    pub fn method(&self) -> Method {
        self.config.method
    }

    pub fn cell(&self) -> &CellParams {
        &self.cell
    }

    pub fn head(&self) -> &Affine {
        &self.head
    }

    fn wrong_method(&self, wanted: Method) -> Error {
        Error::Config(format!("{} step called on a {} aggregator", wanted, self.config.method))
    }

    fn check_input<T: Real>(&self, g: &Graph<T>, op: &'static str, x: Var, rank: Option<usize>) -> Result<()> {
        let s = g.shape(x);
        if s.last().copied() != Some(self.config.channels) {
            return Err(shape_err(
                op,
                format!("expected {} channels, input is {:?}", self.config.channels, s),
            ));
        }
        if let Some(r) = rank {
            if s.len() != r {
                return Err(shape_err(op, format!("expected rank {}, input is {:?}", r, s)));
            }
        }
        Ok(())
    }

    fn sum_pair<T: Real>(
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        (px, po): &(Affine, Affine),
        x: Var,
        o: Var,
    ) -> Result<Var> {
        let a = px.apply(g, store, x)?;
        let b = po.apply(g, store, o)?;
        g.add(a, b)
    }

    /// One FAST-GRU transition on `[n, l, h, w, c]` state and input.
    pub fn fast_gru_step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        state: Var,
        x: Var,
    ) -> Result<Var> {
        Ok(self.fast_gru_parts(g, store, state, x)?.next)
    }

    /// [`Aggregator::fast_gru_step`] with its gates and candidate exposed.
    pub fn fast_gru_parts<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        state: Var,
        x: Var,
    ) -> Result<FastGruParts> {
        let CellParams::FastGru(p) = &self.cell else {
            return Err(self.wrong_method(Method::FastGru));
        };
        self.check_input(g, "fast_gru_step", x, Some(5))?;
        if g.shape(state) != g.shape(x) {
            return Err(shape_err(
                "fast_gru_step",
                format!("state {:?} vs input {:?}", g.shape(state), g.shape(x)),
            ));
        }
        let rc = Self::sum_pair(g, store, &(p.u_rx, p.u_ro), x, state)?;
        let rc = g.relu(rc)?;
        let zc = Self::sum_pair(g, store, &(p.u_zx, p.u_zo), x, state)?;
        let zc = g.relu(zc)?;
        let r = p.w_r.apply(g, store, rc)?;
        let r = g.sigmoid(r)?;
        let z = p.w_z.apply(g, store, zc)?;
        let z = g.sigmoid(z)?;
        let gated = g.mul(r, state)?;
        let cand = Self::sum_pair(g, store, &(p.v_x, p.v_o), x, gated)?;
        let cand = g.tanh(cand)?;
        let next = g.convex_mix(state, cand, z)?;
        debug_assert_eq!(g.shape(next), g.shape(state));
        Ok(FastGruParts {
            reset: r,
            update: z,
            candidate: cand,
            next,
        })
    }

    /// One GRU transition on pooled `[n, c]` vectors.
    pub fn gru_step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        state: Var,
        x: Var,
    ) -> Result<Var> {
        let CellParams::Gru(p) = &self.cell else {
            return Err(self.wrong_method(Method::Gru));
        };
        self.check_input(g, "gru_step", x, Some(2))?;
        self.check_input(g, "gru_step", state, Some(2))?;
        let r = Self::sum_pair(g, store, &(p.g_rx, p.g_ro), x, state)?;
        let r = g.sigmoid(r)?;
        let z = Self::sum_pair(g, store, &(p.g_zx, p.g_zo), x, state)?;
        let z = g.sigmoid(z)?;
        let gated = g.mul(r, state)?;
        let cand = Self::sum_pair(g, store, &(p.v_x, p.v_o), x, gated)?;
        let cand = g.tanh(cand)?;
        g.convex_mix(state, cand, z)
    }

    /// One LSTM transition; returns `(hidden, cell)`.
    pub fn lstm_step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        (hidden, cell): (Var, Var),
        x: Var,
    ) -> Result<(Var, Var)> {
        let CellParams::Lstm(p) = &self.cell else {
            return Err(self.wrong_method(Method::Lstm));
        };
        self.check_input(g, "lstm_step", x, Some(2))?;
        self.check_input(g, "lstm_step", hidden, Some(2))?;
        self.check_input(g, "lstm_step", cell, Some(2))?;
        let i = Self::sum_pair(g, store, &p.input_gate, x, hidden)?;
        let i = g.sigmoid(i)?;
        let f = Self::sum_pair(g, store, &p.forget_gate, x, hidden)?;
        let f = g.sigmoid(f)?;
        let o = Self::sum_pair(g, store, &p.output_gate, x, hidden)?;
        let o = g.sigmoid(o)?;
        let cand = Self::sum_pair(g, store, &p.candidate, x, hidden)?;
        let cand = g.tanh(cand)?;
        let keep = g.mul(f, cell)?;
        let write = g.mul(i, cand)?;
        let cell = g.add(keep, write)?;
        let squashed = g.tanh(cell)?;
        let hidden = g.mul(o, squashed)?;
        Ok((hidden, cell))
    }

    /// `ReLU(BN(W·o + U·x))`.
    pub fn concat_step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        state: Var,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let CellParams::Concat(p) = &self.cell else {
            return Err(self.wrong_method(Method::Concat));
        };
        self.check_input(g, "concat_step", x, Some(2))?;
        self.check_input(g, "concat_step", state, Some(2))?;
        let s = Self::sum_pair(g, store, &(p.u, p.w), x, state)?;
        let s = g.batch_norm_param(store, &p.bn, s, mode)?;
        g.relu(s)
    }

    fn pooled<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
        if g.shape(x).len() == 2 {
            Ok(x)
        } else {
            g.global_avg_pool(x)
        }
    }

    fn head_logits<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let pooled = Self::pooled(g, x)?;
        self.check_input(g, "classify_head", pooled, Some(2))?;
        self.head.apply(g, store, pooled)
    }

    /// `o_0 = x_0`: the raw map for FAST-GRU, its pooled vector otherwise.
    pub fn init_state<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x0: Var) -> Result<AggState> {
        self.check_input(g, "init_state", x0, None)?;
        Ok(match self.config.method {
            Method::FastGru => {
                if g.shape(x0).len() != 5 {
                    return Err(shape_err(
                        "init_state",
                        format!("FAST-GRU needs [n,l,h,w,c] features, got {:?}", g.shape(x0)),
                    ));
                }
                AggState::Spatial(x0)
            }
            Method::Gru | Method::Concat => AggState::Vector(Self::pooled(g, x0)?),
            Method::Lstm => {
                let hidden = Self::pooled(g, x0)?;
                let zeros = Tensor::zeros(g.shape(hidden));
                let cell = g.constant(zeros);
                AggState::VectorCell { hidden, cell }
            }
            Method::AvgPool => AggState::ScoreSum {
                sum: self.head_logits(g, store, x0)?,
                count: 1,
            },
        })
    }

    pub fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        state: AggState,
        x: Var,
        mode: Mode,
    ) -> Result<AggState> {
        Ok(match (self.config.method, state) {
            (Method::FastGru, AggState::Spatial(o)) => AggState::Spatial(self.fast_gru_step(g, store, o, x)?),
            (Method::Gru, AggState::Vector(o)) => {
                let x = Self::pooled(g, x)?;
                AggState::Vector(self.gru_step(g, store, o, x)?)
            }
            (Method::Concat, AggState::Vector(o)) => {
                let x = Self::pooled(g, x)?;
                AggState::Vector(self.concat_step(g, store, o, x, mode)?)
            }
            (Method::Lstm, AggState::VectorCell { hidden, cell }) => {
                let x = Self::pooled(g, x)?;
                let (hidden, cell) = self.lstm_step(g, store, (hidden, cell), x)?;
                AggState::VectorCell { hidden, cell }
            }
            (Method::AvgPool, AggState::ScoreSum { sum, count }) => {
                let logits = self.head_logits(g, store, x)?;
                AggState::ScoreSum {
                    sum: g.add(sum, logits)?,
                    count: count + 1,
                }
            }
            (m, s) => {
                return Err(Error::Config(format!("state {:?} does not belong to a {} aggregator", s, m)));
            }
        })
    }

    /// Class logits `[n, k]` from a final state.
    pub fn classify_head<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, state: AggState) -> Result<Var> {
        match state {
            AggState::Spatial(o) | AggState::Vector(o) => self.head_logits(g, store, o),
            AggState::VectorCell { hidden, .. } => self.head_logits(g, store, hidden),
            AggState::ScoreSum { sum, count } => g.scale(sum, T::one() / T::of_usize(count)),
        }
    }

    /// Fold a clip sequence into video logits. Every feature map must have the
    /// same shape; feature maps may come from either backbone.
    pub fn aggregate_sequence<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: &[Var],
        mode: Mode,
    ) -> Result<Var> {
        let (&first, rest) = features.split_first().ok_or(Error::Empty("aggregate_sequence needs a clip"))?;
        let shape = g.shape(first).to_vec();
        let mut state = self.init_state(g, store, first)?;
        for (t, &x) in rest.iter().enumerate() {
            if g.shape(x) != shape.as_slice() {
                return Err(shape_err(
                    "aggregate_sequence",
                    format!("clip {} has shape {:?}, clip 0 has {:?}", t + 1, g.shape(x), shape),
                ));
            }
            state = self.step(g, store, state, x, mode)?;
        }
        self.classify_head(g, store, state)
    }

    /// Weight count of the gate subnetworks (biases excluded).
    pub fn gate_weight_count<T: Real>(&self, store: &ParamStore<T>) -> usize {
        let n = |a: &Affine| store.value(a.weight).len();
        match &self.cell {
            CellParams::FastGru(p) => [p.u_rx, p.u_ro, p.u_zx, p.u_zo, p.w_r, p.w_z].iter().map(n).sum(),
            CellParams::Gru(p) => [p.g_rx, p.g_ro, p.g_zx, p.g_zo].iter().map(n).sum(),
            CellParams::Lstm(p) => [p.input_gate, p.forget_gate, p.output_gate]
                .iter()
                .map(|(a, b)| n(a) + n(b))
                .sum(),
            CellParams::Concat(_) | CellParams::AvgPool => 0,
        }
    }
}

/// Per-class mean of clip score vectors. The sum runs over the inputs in
/// ascending lexicographic order so the result is bitwise independent of
/// the order they were given in.
pub fn avg_pool_aggregate<T: Real>(scores: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = scores.first().ok_or(Error::Empty("avg_pool_aggregate needs at least one score vector"))?;
    for s in scores {
        if s.shape() != first.shape() {
            return Err(shape_err(
                "avg_pool_aggregate",
                format!("{:?} vs {:?}", s.shape(), first.shape()),
            ));
        }
    }
    let mut order: Vec<&Tensor<T>> = scores.iter().collect();
    order.sort_by(|a, b| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x.partial_cmp(y).unwrap_or(core::cmp::Ordering::Equal))
            .find(|o| o.is_ne())
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let mut sum = Tensor::zeros(first.shape());
    for s in order {
        for (a, &v) in sum.data_mut().iter_mut().zip(s.data()) {
            *a = *a + v;
        }
    }
    let inv = T::one() / T::of_usize(scores.len());
    Ok(sum.map(|v| v * inv))
}

/// Name of every aggregation method, for usage messages.
pub fn method_names() -> String {
    Method::ALL.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
}
