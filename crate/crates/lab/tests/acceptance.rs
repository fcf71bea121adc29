//! Acceptance criteria 1 to 9. Each test prints one `criterion N PASS|FAIL`
//! line on stdout, even when output capture is on, then asserts.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use faster_core::aggregate::{avg_pool_aggregate, AggState, Aggregator, AggregatorConfig, Method};
use faster_core::backbone::{BackboneConfig, Family};
use faster_core::flops::{aggregator_flops, backbone_flops, head_flops, schedule_flops, Macs, ScheduleCosts};
use faster_core::gradcheck::{suite, SUITE_SEEDS};
use faster_core::schedule::{ClipSchedule, PatternKind};
use faster_core::synth::{clairvoyant_cap, gen_task, Dataset, TaskSpec};
use faster_core::{Graph, Mode, ParamStore, Tensor, Window3};
use faster_lab::trainer::{
    stream_rng, train_aggregator, train_backbone, AggregatorModel, BackboneModel, Backbones, FeatureCache, Sampling,
    TrainOptions, TrainReport,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, title: &str, checks: &[(bool, String)]) {
    let pass = checks.iter().all(|c| c.0);
    let detail: Vec<&str> = checks.iter().map(|c| c.1.as_str()).collect();
    let line = format!("criterion {n} {}: {title}: {}", if pass { "PASS" } else { "FAIL" }, detail.join("; "));
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
    assert!(pass, "{line}");
}

fn rel(got: f64, want: f64) -> f64 {
    (got - want).abs() / want
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

const CHEAP: [(usize, f64); 3] = [(8, 3.2), (16, 6.0), (32, 12.7)];
const EXPENSIVE: [(usize, f64); 3] = [(8, 30.0), (16, 60.0), (32, 119.9)];

fn published(table: &[(usize, f64)], l: usize) -> f64 {
    table.iter().find(|(x, _)| *x == l).unwrap().1
}

fn step_cost(l: usize) -> Macs {
    aggregator_flops(Method::FastGru, [l / 8, 7, 7, 2048], 4).unwrap()
}

#[test]
fn criterion_1_backbone_costs() {
    let mut checks = Vec::new();
    for (family, table) in [(Family::R2d, CHEAP), (Family::R21d, EXPENSIVE)] {
        for (l, want) in table {
            let got = backbone_flops(&BackboneConfig::full_spec(family, l)).unwrap().total.gflops();
            checks.push((rel(got, want) <= 0.10, format!("{} L={l} {got:.2}/{want}", family.name())));
        }
    }
    verdict(1, "per-clip backbone GFLOPs within 10%", &checks);
}

#[test]
fn criterion_2_schedule_totals() {
    // Every feasible (pattern, L) cell at a 256-frame budget.
    let cells: [(usize, usize, f64); 14] = [
        (0, 8, 982.4),
        (1, 8, 553.6),
        (3, 8, 339.2),
        (7, 8, 230.4),
        (15, 8, 176.0),
        (31, 8, 150.4),
        (0, 16, 980.2),
        (1, 16, 552.0),
        (3, 16, 337.6),
        (7, 16, 230.4),
        (15, 16, 176.0),
        (0, 32, 979.2),
        (1, 32, 550.4),
        (3, 32, 336.0),
    ];
    let mut checks = Vec::new();
    let mut worst = 0.0f64;
    for (x, l, want) in cells {
        let costs = ScheduleCosts {
            expensive: Macs::from_gflops(published(&EXPENSIVE, l)),
            cheap: Macs::from_gflops(published(&CHEAP, l)),
            step: step_cost(l),
            head: head_flops(Method::FastGru, 2048, 400),
        };
        let s = ClipSchedule::with_budget(l, 256, PatternKind::from_ratio(x)).unwrap();
        let got = schedule_flops(&s, &costs).total.gflops();
        worst = worst.max(rel(got, want));
        if rel(got, want) > 0.05 {
            checks.push((false, format!("1:{x} L={l} {got:.1}/{want}")));
        }
    }
    checks.push((worst <= 0.05, format!("{} cells, worst error {:.2}%", cells.len(), 100.0 * worst)));
    verdict(2, "per-video totals within 5%", &checks);
}

#[test]
fn criterion_3_step_cost_oracle() {
    let short = (step_cost(8).gflops(), (982.4 - 32.0 * 30.0) / 31.0);
    let long = (step_cost(32).gflops(), (979.2 - 8.0 * 119.9) / 7.0);
    verdict(
        3,
        "FAST-GRU step cost against the difference oracle",
        &[
            (rel(short.0, short.1) <= 0.05, format!("l=1 {:.4}/{:.4}", short.0, short.1)),
            (rel(long.0, long.1) <= 0.05, format!("l=4 {:.4}/{:.4}", long.0, long.1)),
        ],
    );
}

#[test]
fn criterion_4_gradient_suite() {
    let start = Instant::now();
    let cases = suite();
    let mut checks = Vec::new();
    let mut worst = 0.0f64;
    for case in &cases {
        for seed in 0..SUITE_SEEDS {
            let ok = match (case.run)(seed) {
                Ok(r) => {
                    worst = worst.max(r.max_rel_error / r.tolerance);
                    r.passed && r.checked > 0
                }
                Err(_) => false,
            };
            if !ok {
                checks.push((false, format!("{} seed {seed}", case.name)));
            }
        }
    }
    checks.push((SUITE_SEEDS >= 5, format!("{} cases x {} seeds", cases.len(), SUITE_SEEDS)));
    let secs = start.elapsed().as_secs_f64();
    checks.push((secs < 120.0, format!("worst error/tolerance {worst:.2e}, {secs:.1}s")));
    verdict(4, "finite-difference gradient checks", &checks);
}

/// Padded, strided cross-correlation by direct summation.
fn conv_loops(x: &Tensor<f64>, k: &Tensor<f64>, stride: [usize; 3], pad: [usize; 3]) -> Option<Tensor<f64>> {
    let [n, t, h, w, cin] = x.shape().try_into().unwrap();
    let [kt, kh, kw, _, cout] = k.shape().try_into().unwrap();
    let (ext, kern) = ([t, h, w], [kt, kh, kw]);
    let mut out = [0; 3];
    for a in 0..3 {
        if ext[a] + 2 * pad[a] < kern[a] {
            return None;
        }
        out[a] = (ext[a] + 2 * pad[a] - kern[a]) / stride[a] + 1;
    }
    let mut y = Tensor::zeros(&[n, out[0], out[1], out[2], cout]);
    let mut idx = 0;
    for b in 0..n {
        for o0 in 0..out[0] {
            for o1 in 0..out[1] {
                for o2 in 0..out[2] {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for (a, i, j) in (0..kt).flat_map(|a| (0..kh).flat_map(move |i| (0..kw).map(move |j| (a, i, j)))) {
                            let pos = [o0 * stride[0] + a, o1 * stride[1] + i, o2 * stride[2] + j];
                            if (0..3).any(|d| pos[d] < pad[d] || pos[d] - pad[d] >= ext[d]) {
                                continue;
                            }
                            let (it, ih, iw) = (pos[0] - pad[0], pos[1] - pad[1], pos[2] - pad[2]);
                            for ci in 0..cin {
                                let xv = x.data()[(((b * t + it) * h + ih) * w + iw) * cin + ci];
                                let kv = k.data()[(((a * kh + i) * kw + j) * cin + ci) * cout + co];
                                acc += xv * kv;
                            }
                        }
                        y.data_mut()[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    Some(y)
}

#[test]
fn criterion_5_kernel_oracles() {
    let start = Instant::now();
    let mut r = rng(5);
    let mut axis = Vec::new();
    for e in 1..=4 {
        for k in 1..=4 {
            for s in 1..=2 {
                for p in 0..=1 {
                    axis.push((e, k, s, p));
                }
            }
        }
    }
    let (mut compared, mut disagreements, mut worst) = (0usize, 0usize, 0.0f64);
    for &(et, kt, st, pt) in &axis {
        for &(eh, kh, sh, ph) in &axis {
            for &(ew, kw, sw, pw) in &axis {
                let x = random(&[1, et, eh, ew, 2], -1.0, 1.0, &mut r);
                let k = random(&[kt, kh, kw, 2, 2], -1.0, 1.0, &mut r);
                let (stride, pad) = ([st, sh, sw], [pt, ph, pw]);
                let mut g = Graph::inference();
                let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
                let got = g.conv3d(xv, kv, Window3::new(stride, pad)).map(|y| g.value(y).clone());
                match (conv_loops(&x, &k, stride, pad), got) {
                    (Some(want), Ok(got)) if got.shape() == want.shape() => {
                        worst = worst.max(got.max_abs_diff(&want).unwrap());
                        compared += 1;
                    }
                    (None, Err(_)) => {}
                    _ => disagreements += 1,
                }
            }
        }
    }

    let mut pw_worst = 0.0f64;
    for (l, hw, cin, cout) in (1..=4).flat_map(|l| (1..=4).flat_map(move |hw| (1..=4).flat_map(move |ci| (1..=4).map(move |co| (l, hw, ci, co))))) {
        let x = random(&[1, l, hw, hw, cin], -1.0, 1.0, &mut r);
        let w = random(&[cin, cout], -1.0, 1.0, &mut r);
        let mut g = Graph::inference();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.pointwise_conv(xv, wv, None).unwrap();
        let got = g.value(y).data();
        for row in 0..l * hw * hw {
            for co in 0..cout {
                let want: f64 = (0..cin).map(|ci| x.data()[row * cin + ci] * w.data()[ci * cout + co]).sum();
                pw_worst = pw_worst.max((got[row * cout + co] - want).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        5,
        "kernels against direct summation",
        &[
            (disagreements == 0 && worst < 1e-6, format!("conv3d {compared} shapes, max diff {worst:.1e}")),
            (pw_worst < 1e-6, format!("pointwise max diff {pw_worst:.1e}")),
            (secs < 60.0, format!("{secs:.1}s")),
        ],
    );
}

fn build(method: Method, c: usize, seed: u64) -> (Aggregator, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let agg = Aggregator::build(AggregatorConfig::new(method, c, 2), &mut store, &mut rng(seed)).unwrap();
    if store.id("concat.bn.tracked").is_some() {
        store.set("concat.bn.tracked", Tensor::full(&[1], 1.0)).unwrap();
    }
    (agg, store)
}

fn states(agg: &Aggregator, store: &ParamStore<f64>, xs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    let mut g = Graph::inference();
    let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let value = |g: &Graph<f64>, s: AggState| match s {
        AggState::Spatial(v) | AggState::Vector(v) => g.value(v).clone(),
        AggState::VectorCell { hidden, .. } => g.value(hidden).clone(),
        AggState::ScoreSum { sum, .. } => g.value(sum).clone(),
    };
    let mut s = agg.init_state(&mut g, store, vars[0]).unwrap();
    let mut out = vec![value(&g, s)];
    for &x in &vars[1..] {
        s = agg.step(&mut g, store, s, x, Mode::Eval).unwrap();
        out.push(value(&g, s));
    }
    out
}

fn logits(agg: &Aggregator, store: &ParamStore<f64>, xs: &[Tensor<f64>]) -> Tensor<f64> {
    let mut g = Graph::inference();
    let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let y = agg.aggregate_sequence(&mut g, store, &vars, Mode::Eval).unwrap();
    g.value(y).clone()
}

#[test]
fn criterion_6_structure() {
    let mut r = rng(6);
    let (fg, fs) = build(Method::FastGru, 16, 1);

    let mut shapes_kept = true;
    for shape in [[1, 1, 1, 1, 16], [2, 1, 3, 2, 16], [1, 2, 7, 7, 16]] {
        let mut g = Graph::inference();
        let o = g.constant(random(&shape, -1.0, 1.0, &mut r));
        let x = g.constant(random(&shape, -1.0, 1.0, &mut r));
        let next = fg.fast_gru_step(&mut g, &fs, o, x).unwrap();
        shapes_kept &= g.shape(next) == shape;
    }

    let mut causal = true;
    for method in [Method::FastGru, Method::Gru, Method::Lstm, Method::Concat, Method::AvgPool] {
        let (agg, store) = build(method, 8, 2);
        let xs: Vec<_> = (0..6).map(|_| random(&[1, 1, 2, 2, 8], -1.0, 1.0, &mut r)).collect();
        let base = states(&agg, &store, &xs);
        for k in 1..xs.len() {
            let mut ys = xs.clone();
            ys[k] = random(&[1, 1, 2, 2, 8], -3.0, 3.0, &mut r);
            let moved = states(&agg, &store, &ys);
            causal &= (0..k).all(|t| moved[t] == base[t]) && moved[k] != base[k];
        }
    }

    let (mut gates_inside, mut convex) = (true, true);
    for _ in 0..50 {
        let mut g = Graph::inference();
        let o = g.constant(random(&[1, 1, 3, 3, 16], -1.0, 1.0, &mut r));
        let x = g.constant(random(&[1, 1, 3, 3, 16], -6.0, 6.0, &mut r));
        let p = fg.fast_gru_parts(&mut g, &fs, o, x).unwrap();
        for gate in [p.reset, p.update] {
            gates_inside &= g.value(gate).data().iter().all(|&v| v > 0.0 && v < 1.0);
        }
        let (ov, cv, nv) = (g.value(o).data(), g.value(p.candidate).data(), g.value(p.next).data());
        convex &= (0..nv.len()).all(|i| nv[i] >= ov[i].min(cv[i]) - 1e-15 && nv[i] <= ov[i].max(cv[i]) + 1e-15);
    }

    let mut invariant = true;
    for n in 1..10 {
        let scores: Vec<_> = (0..n).map(|_| random(&[1, 4], -10.0, 10.0, &mut r)).collect();
        let base = avg_pool_aggregate(&scores).unwrap();
        for _ in 0..10 {
            let mut shuffled = scores.clone();
            shuffled.shuffle(&mut r);
            let again = avg_pool_aggregate(&shuffled).unwrap();
            invariant &= base.data().iter().zip(again.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        }
    }

    let (fw, fws) = build(Method::FastGru, 8, 3);
    let (ap, aps) = build(Method::AvgPool, 8, 3);
    let a = random(&[1, 1, 2, 2, 8], -1.0, 1.0, &mut r);
    let b = random(&[1, 1, 2, 2, 8], -1.0, 1.0, &mut r);
    let (ab, ba) = ([a.clone(), b.clone()], [b, a]);
    let witness = logits(&fw, &fws, &ab).max_abs_diff(&logits(&fw, &fws, &ba)).unwrap();
    let pooled = logits(&ap, &aps, &ab).max_abs_diff(&logits(&ap, &aps, &ba)).unwrap();

    verdict(
        6,
        "aggregator structure",
        &[
            (shapes_kept, "shape preserved".into()),
            (causal, "causal for all five methods".into()),
            (gates_inside, "gates in (0,1)".into()),
            (convex, "state between previous and candidate".into()),
            (invariant, "avg-pool bitwise permutation invariant".into()),
            (witness > 1e-6 && pooled < 1e-12, format!("order witness {witness:.2e} vs avg-pool {pooled:.1e}")),
        ],
    );
}

/// The order task at 64 frames and two backbones trained on it, shared by
/// criteria 7 and 8.
struct OrderLab {
    train: Dataset,
    test: Dataset,
    expensive: BackboneModel,
    cheap: BackboneModel,
}

fn order_lab() -> &'static OrderLab {
    static LAB: OnceLock<OrderLab> = OnceLock::new();
    LAB.get_or_init(|| {
        let spec = TaskSpec::order(64, 32);
        let train = gen_task(&spec, 2000, &mut stream_rng(1, 10)).unwrap();
        let test = gen_task(&spec, 500, &mut stream_rng(2, 10)).unwrap();
        // Single clips cannot tell the classes apart; the backbones only
        // need to learn the two events.
        let opts = TrainOptions {
            epochs: 3,
            augment: false,
            ..TrainOptions::default()
        };
        let mut expensive = BackboneModel::init(BackboneConfig::tiny(Family::R21d, 8, 2), 1).unwrap();
        train_backbone(&mut expensive, &train, &opts, None).unwrap();
        let mut cheap = BackboneModel::init(BackboneConfig::tiny(Family::R2d, 8, 2), 2).unwrap();
        train_backbone(&mut cheap, &train, &opts, None).unwrap();
        OrderLab {
            train,
            test,
            expensive,
            cheap,
        }
    })
}

/// Train each method on the same frozen features; returns `(method, report)`
/// with the test row last.
fn train_methods(lab: &OrderLab, train: &Dataset, test: &Dataset, sched: &ClipSchedule, methods: &[Method]) -> Vec<(Method, TrainReport)> {
    let bbs = Backbones {
        expensive: &lab.expensive,
        cheap: &lab.cheap,
    };
    let opts = TrainOptions {
        epochs: 20,
        lr: 0.05,
        augment: false,
        ..TrainOptions::default()
    };
    let (mut train_cache, mut test_cache) = (FeatureCache::default(), FeatureCache::default());
    methods
        .iter()
        .map(|&m| {
            let mut model = AggregatorModel::init(AggregatorConfig::new(m, 128, 2), 3).unwrap();
            let report = train_aggregator(
                &mut model,
                &bbs,
                train,
                sched,
                &opts,
                Sampling::Uniform,
                Some(&mut train_cache),
                Some((test, Some(&mut test_cache))),
            )
            .unwrap();
            (m, report)
        })
        .collect()
}

fn test_top1(r: &TrainReport) -> f64 {
    let last = r.records.last().unwrap();
    assert_eq!(last.split, "test");
    last.top1
}

fn loss_fell(r: &TrainReport) -> bool {
    let train = r.train_losses();
    train.last().unwrap() < &train[0]
}

#[test]
fn criterion_7_order_task() {
    let start = Instant::now();
    let lab = order_lab();
    let sched = ClipSchedule::new(8, 8, PatternKind::OneTo(1)).unwrap();
    let runs = train_methods(lab, &lab.train, &lab.test, &sched, &[Method::FastGru, Method::AvgPool]);
    let (fast, avg) = (test_top1(&runs[0].1), test_top1(&runs[1].1));
    let cap = clairvoyant_cap(&TaskSpec::order(64, 32), 8, 8, 10_000, 10_000, &mut rng(7)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        7,
        "order task, 2000/500 videos, L=8 N=8 1:1",
        &[
            (fast >= 0.90, format!("fast-gru {:.1}%", 100.0 * fast)),
            (avg <= 0.60, format!("avg-pool {:.1}%", 100.0 * avg)),
            (cap <= 0.55, format!("clairvoyant cap {:.1}%", 100.0 * cap)),
            (loss_fell(&runs[0].1) && loss_fell(&runs[1].1), "train loss fell".into()),
            (secs < 600.0, format!("{secs:.0}s")),
        ],
    );
}

#[test]
fn criterion_8_aggregator_ranking() {
    let start = Instant::now();
    let lab = order_lab();
    // 16 clips of 8 frames tile a 128-frame video.
    let spec = TaskSpec::order(128, 32);
    let train = gen_task(&spec, 1000, &mut stream_rng(3, 10)).unwrap();
    let test = gen_task(&spec, 500, &mut stream_rng(4, 10)).unwrap();
    let sched = ClipSchedule::new(8, 16, PatternKind::OneTo(7)).unwrap();
    let runs = train_methods(lab, &train, &test, &sched, &[Method::FastGru, Method::Gru, Method::AvgPool]);
    let acc: Vec<f64> = runs.iter().map(|(_, r)| test_top1(r)).collect();
    let secs = start.elapsed().as_secs_f64();
    let tie = 0.01;
    verdict(
        8,
        "N=16 ranking fast-gru >= gru >= avg-pool",
        &[
            (acc[0] + tie >= acc[1], format!("fast-gru {:.1}%", 100.0 * acc[0])),
            (acc[1] + tie >= acc[2], format!("gru {:.1}%", 100.0 * acc[1])),
            (true, format!("avg-pool {:.1}%", 100.0 * acc[2])),
            (secs < 1800.0, format!("{secs:.0}s")),
        ],
    );
}

fn cli(args: &[&str]) -> String {
    let o = Command::new(env!("CARGO_BIN_EXE_faster-lab")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// gen, both training stages and eval through the binary; returns every
/// metrics CSV in order.
fn pipeline(dir: &Path) -> Vec<String> {
    let at = |n: &str| dir.join(n).to_str().unwrap().to_string();
    let mut out = Vec::new();
    for (name, n, seed) in [("train.fvd", "64", "11"), ("test.fvd", "32", "12")] {
        out.push(cli(&["gen", "--task", "order", "--n", n, "--frames", "32", "--seed", seed, "--out", &at(name)]));
    }
    for (name, family) in [("e", "r21d"), ("c", "r2d")] {
        out.push(cli(&[
            "train", "--stage", "backbone", "--family", family, "--data", &at("train.fvd"), "--test-data", &at("test.fvd"),
            "--out", &at(name), "--epochs", "2",
        ]));
    }
    out.push(cli(&[
        "train", "--stage", "aggregator", "--method", "fast-gru", "--expensive", &at("e"), "--cheap", &at("c"),
        "--data", &at("train.fvd"), "--test-data", &at("test.fvd"), "--out", &at("agg"), "--clips", "4",
        "--pattern", "1:1", "--epochs", "3",
    ]));
    out.push(cli(&["eval", "--checkpoint", &at("agg"), "--data", &at("test.fvd")]));
    for run in ["e", "c", "agg"] {
        out.push(std::fs::read_to_string(dir.join(run).join("metrics.csv")).unwrap());
    }
    out
}

#[test]
fn criterion_9_pipeline_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    let same = first.iter().zip(&second).filter(|(x, y)| x == y).count();
    let bytes_same = std::fs::read(a.path().join("agg").join("tensors.bin")).unwrap()
        == std::fs::read(b.path().join("agg").join("tensors.bin")).unwrap();
    verdict(
        9,
        "gen, train, eval twice with one seed",
        &[
            (same == first.len(), format!("{same}/{} outputs identical", first.len())),
            (bytes_same, "aggregator weights identical".into()),
        ],
    );
}

/// The speed task separates the backbones: after the same 4-epoch budget the
/// expensive one leads by at least 10 points, and the cheap one can still fit
/// the training set given 20 epochs.
fn speed_data() -> &'static (Dataset, Dataset) {
    static DATA: OnceLock<(Dataset, Dataset)> = OnceLock::new();
    DATA.get_or_init(|| {
        let spec = TaskSpec::speed(64, 32);
        (
            gen_task(&spec, 2000, &mut stream_rng(1, 10)).unwrap(),
            gen_task(&spec, 500, &mut stream_rng(2, 10)).unwrap(),
        )
    })
}

fn speed_run(family: Family, seed: u64, epochs: usize) -> TrainReport {
    let (train, test) = speed_data();
    let mut m = BackboneModel::init(BackboneConfig::tiny(family, 8, 2), seed).unwrap();
    let opts = TrainOptions {
        epochs,
        ..TrainOptions::default()
    };
    train_backbone(&mut m, train, &opts, Some(test)).unwrap()
}

#[test]
fn speed_task_separates_the_backbones() {
    let e = speed_run(Family::R21d, 1, 4);
    let c = speed_run(Family::R2d, 2, 4);
    let (ea, ca) = (test_top1(&e), test_top1(&c));
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "speed task: expensive {:.1}%, cheap {:.1}% after 4 epochs", 100.0 * ea, 100.0 * ca);
    assert!(ea - ca >= 0.10, "gap {:.1} points", 100.0 * (ea - ca));
    assert!(loss_fell(&e) && loss_fell(&c));
}

#[test]
fn cheap_backbone_fits_the_speed_task() {
    let r = speed_run(Family::R2d, 2, 20);
    let best = r.records.iter().filter(|x| x.split == "train").map(|x| x.top1).fold(0.0, f64::max);
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "speed task: cheap train accuracy {:.1}% within 20 epochs", 100.0 * best);
    assert!(best >= 0.95, "{best}");
}
