//! Cost model against published per-clip and per-video totals.

use faster_core::aggregate::Method;
use faster_core::backbone::{BackboneConfig, Family, LayerKind, LayerSpec};
use faster_core::flops::{aggregator_flops, backbone_flops, head_flops, layer_flops, schedule_flops, Macs, ScheduleCosts};
use faster_core::schedule::{ClipSchedule, PatternKind};

fn rel(got: f64, want: f64) -> f64 {
    (got - want).abs() / want
}

/// Published per-clip GFLOPs of the cheap and expensive backbones at L = 8, 16, 32.
const CHEAP: [(usize, f64); 3] = [(8, 3.2), (16, 6.0), (32, 12.7)];
const EXPENSIVE: [(usize, f64); 3] = [(8, 30.0), (16, 60.0), (32, 119.9)];

/// `(pattern ratio, L, published total)` for every feasible cell at a 256-frame budget.
const TRADE_OFF: [(usize, usize, f64); 14] = [
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

fn published(table: &[(usize, f64)], l: usize) -> f64 {
    table.iter().find(|(x, _)| *x == l).unwrap().1
}

fn step(l: usize) -> Macs {
    aggregator_flops(Method::FastGru, [l / 8, 7, 7, 2048], 4).unwrap()
}

fn published_costs(l: usize) -> ScheduleCosts {
    ScheduleCosts {
        expensive: Macs::from_gflops(published(&EXPENSIVE, l)),
        cheap: Macs::from_gflops(published(&CHEAP, l)),
        step: step(l),
        head: head_flops(Method::FastGru, 2048, 400),
    }
}

#[test]
fn closed_form_layer_counts() {
    let pw = LayerSpec::simple("pw", LayerKind::Conv3d, [1, 1, 1], [1, 1, 1], [0, 0, 0], 2048, 512);
    assert_eq!(layer_flops(&pw, [1, 7, 7, 2048]).unwrap(), Macs(51_380_224));
    let fc = LayerSpec::simple("fc", LayerKind::Dense, [1, 1, 1], [1, 1, 1], [0, 0, 0], 2048, 400);
    assert_eq!(layer_flops(&fc, [1, 1, 1, 2048]).unwrap(), Macs(819_200));
    let gap = LayerSpec::simple("gap", LayerKind::GlobalAvgPool, [1, 1, 1], [1, 1, 1], [0, 0, 0], 64, 64);
    assert_eq!(layer_flops(&gap, [2, 7, 7, 64]).unwrap(), Macs::ZERO);
}

#[test]
fn backbone_costs_match_published_per_clip_values() {
    for (family, table) in [(Family::R2d, CHEAP), (Family::R21d, EXPENSIVE)] {
        for (l, want) in table {
            let got = backbone_flops(&BackboneConfig::full_spec(family, l)).unwrap().total.gflops();
            assert!(rel(got, want) <= 0.10, "{family:?} L={l}: {got:.3} vs {want}");
        }
    }
}

#[test]
fn expensive_backbone_costs_about_ten_cheap_ones() {
    for l in [8, 16, 32] {
        let e = backbone_flops(&BackboneConfig::full_spec(Family::R21d, l)).unwrap().total.gflops();
        let c = backbone_flops(&BackboneConfig::full_spec(Family::R2d, l)).unwrap().total.gflops();
        assert!((8.0..12.0).contains(&(e / c)), "L={l}: ratio {}", e / c);
    }
}

#[test]
fn schedule_totals_match_every_feasible_trade_off_cell() {
    for (x, l, want) in TRADE_OFF {
        let s = ClipSchedule::with_budget(l, 256, PatternKind::from_ratio(x)).unwrap();
        let got = schedule_flops(&s, &published_costs(l)).total.gflops();
        assert!(rel(got, want) <= 0.05, "1:{x} at L={l}: {got:.1} vs {want}");
    }
}

#[test]
fn infeasible_trade_off_cells_are_rejected() {
    for (x, l) in [(31, 16), (15, 32), (31, 32)] {
        let err = ClipSchedule::with_budget(l, 256, PatternKind::from_ratio(x)).unwrap_err();
        assert!(err.to_string().contains("infeasible"), "{err}");
    }
}

#[test]
fn fast_gru_step_matches_the_difference_oracle() {
    let oracle = (982.4 - 32.0 * 30.0) / 31.0;
    let short = step(8).gflops();
    assert_eq!(step(8).0, 49 * 2048 * 2048 * 7 / 2);
    assert!(rel(short, oracle) <= 0.05, "{short} vs {oracle}");
    let oracle = (979.2 - 8.0 * 119.9) / 7.0;
    let long = step(32).gflops();
    assert_eq!(step(32).0, 4 * 49 * 2048 * 2048 * 7 / 2);
    assert!(rel(long, oracle) <= 0.05, "{long} vs {oracle}");
}

#[test]
fn all_cheap_score_averaging_total() {
    let s = ClipSchedule::with_budget(32, 256, PatternKind::AllCheap).unwrap();
    let analytic = backbone_flops(&BackboneConfig::full_spec(Family::R2d, 32)).unwrap().total;
    let costs = ScheduleCosts {
        expensive: backbone_flops(&BackboneConfig::full_spec(Family::R21d, 32)).unwrap().total,
        cheap: analytic,
        step: aggregator_flops(Method::AvgPool, [4, 7, 7, 2048], 4).unwrap(),
        head: head_flops(Method::AvgPool, 2048, 400),
    };
    let got = schedule_flops(&s, &costs).total.gflops();
    assert!(rel(got, 101.3) <= 0.05, "{got}");
    let table_costs = ScheduleCosts {
        cheap: Macs::from_gflops(12.7),
        ..costs
    };
    assert!(rel(schedule_flops(&s, &table_costs).total.gflops(), 101.3) <= 0.05);
}

#[test]
fn avg_pool_adds_no_aggregation_cost() {
    assert_eq!(aggregator_flops(Method::AvgPool, [1, 7, 7, 2048], 4).unwrap(), Macs::ZERO);
    assert_eq!(head_flops(Method::AvgPool, 2048, 400), Macs::ZERO);
    assert!(aggregator_flops(Method::FastGru, [1, 7, 7, 2048], 3).is_err());
}

#[test]
fn totals_grow_with_expensive_clips_length_and_count() {
    let costs = |l: usize| ScheduleCosts {
        expensive: backbone_flops(&BackboneConfig::full_spec(Family::R21d, l)).unwrap().total,
        cheap: backbone_flops(&BackboneConfig::full_spec(Family::R2d, l)).unwrap().total,
        step: step(l),
        head: head_flops(Method::FastGru, 2048, 400),
    };
    let total = |l: usize, n: usize, kind| schedule_flops(&ClipSchedule::new(l, n, kind).unwrap(), &costs(l)).total;

    let mut by_e: Vec<_> = [31, 15, 7, 3, 1, 0]
        .into_iter()
        .map(|x| total(8, 32, PatternKind::from_ratio(x)))
        .collect();
    by_e.insert(0, total(8, 32, PatternKind::AllCheap));
    assert!(by_e.windows(2).all(|w| w[0] < w[1]), "{by_e:?}");

    for kind in [PatternKind::AllExpensive, PatternKind::OneTo(1), PatternKind::AllCheap] {
        assert!(total(8, 8, kind) < total(16, 8, kind));
        assert!(total(16, 8, kind) < total(32, 8, kind));
        assert!(total(8, 8, kind) < total(8, 16, kind));
        assert!(total(8, 16, kind) < total(8, 32, kind));
    }
}

#[test]
fn totals_add_up_from_all_cheap() {
    for l in [8, 16, 32] {
        let costs = published_costs(l);
        let base = ClipSchedule::with_budget(l, 256, PatternKind::AllCheap).unwrap();
        let all_c = schedule_flops(&base, &costs).total;
        for x in [0, 1, 3, 7, 15, 31] {
            let Ok(s) = ClipSchedule::with_budget(l, 256, PatternKind::from_ratio(x)) else {
                continue;
            };
            let delta = Macs(costs.expensive.0 - costs.cheap.0) * s.expensive_count() as u64;
            let report = schedule_flops(&s, &costs);
            assert_eq!(report.total, all_c + delta);
            assert_eq!(report.total, report.entries.iter().map(|e| e.macs).sum());
        }
    }
}

#[test]
fn cost_csv_lists_layers_then_total() {
    let r = backbone_flops(&BackboneConfig::full_spec(Family::R2d, 8)).unwrap();
    let csv = r.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layer,macs,gflops"));
    assert_eq!(csv.lines().count(), r.entries.len() + 2);
    let last = csv.lines().last().unwrap();
    assert_eq!(last, format!("total,{},{:.6}", r.total.0, r.total.gflops()));
}
