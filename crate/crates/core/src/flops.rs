//! Analytic compute cost. One multiply-accumulate counts as one FLOP;
//! activations, normalization, pooling and elementwise ops count as zero.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write as _};
use core::ops::{Add, AddAssign, Mul};

use crate::aggregate::Method;
use crate::backbone::{block_convs, spec_table, BackboneConfig, ConvDesc, LayerKind, LayerSpec};
use crate::error::{shape_err, Error, Result};
use crate::kernels::Window3;
use crate::schedule::{ClipSchedule, Source};

/// Multiply-accumulate count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Macs(pub u64);

impl Macs {
    pub const ZERO: Macs = Macs(0);

    /// Nearest integer count for a cost quoted in GFLOPs.
    pub fn from_gflops(g: f64) -> Self {
        Macs(num_traits::Float::round(g * 1e9) as u64)
    }

    pub fn gflops(self) -> f64 {
        self.0 as f64 / 1e9
    }
}

impl Add for Macs {
    type Output = Macs;
    fn add(self, rhs: Macs) -> Macs {
        Macs(self.0 + rhs.0)
    }
}

impl AddAssign for Macs {
    fn add_assign(&mut self, rhs: Macs) {
        self.0 += rhs.0;
    }
}

impl Mul<u64> for Macs {
    type Output = Macs;
    fn mul(self, rhs: u64) -> Macs {
        Macs(self.0 * rhs)
    }
}

impl core::iter::Sum for Macs {
    fn sum<I: Iterator<Item = Macs>>(iter: I) -> Macs {
        iter.fold(Macs::ZERO, Add::add)
    }
}

impl fmt::Display for Macs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} GFLOPs", self.gflops())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostEntry {
    pub name: String,
    pub macs: Macs,
}

/// Itemized cost. `total` is always the exact sum of `entries`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
    pub total: Macs,
}

impl CostReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, macs: Macs) {
        self.total += macs;
        self.entries.push(CostEntry { name: name.into(), macs });
    }

    pub fn get(&self, name: &str) -> Option<Macs> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.macs)
    }

    /// `layer,macs,gflops` rows followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,macs,gflops\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{:.6}", e.name, e.macs.0, e.macs.gflops());
        }
        let _ = writeln!(out, "total,{},{:.6}", self.total.0, self.total.gflops());
        out
    }
}

/// `out_positions · kt·kh·kw · cin · cout`.
pub fn conv_macs(desc: &ConvDesc, input: [usize; 3]) -> Result<(Macs, [usize; 3])> {
    let out = desc.output_extents(input)?;
    let positions = (out[0] * out[1] * out[2]) as u64;
    let taps = (desc.kernel[0] * desc.kernel[1] * desc.kernel[2]) as u64;
    Ok((Macs(positions * taps * desc.cin as u64 * desc.cout as u64), out))
}

/// Cost of one table row at input `(t, h, w, c)`, itemized per convolution,
/// with the row's output geometry.
pub fn layer_cost(spec: &LayerSpec, input: [usize; 4]) -> Result<(CostReport, [usize; 4])> {
    let [t, h, w, c] = input;
    if c != spec.in_channels {
        return Err(shape_err(
            "layer_flops",
            format!("'{}' expects {} input channels, got {}", spec.name, spec.in_channels, c),
        ));
    }
    let mut report = CostReport::new();
    let mut ext = [t, h, w];
    let out_c;
    match spec.kind {
        LayerKind::Conv3d => {
            let desc = ConvDesc {
                name: spec.name.clone(),
                kernel: spec.kernel,
                window: Window3::new(spec.stride, spec.padding),
                cin: spec.in_channels,
                cout: spec.out_channels,
            };
            let (m, o) = conv_macs(&desc, ext)?;
            report.push(spec.name.clone(), m);
            ext = o;
            out_c = spec.out_channels;
        }
        LayerKind::MaxPool => {
            ext = Window3::new(spec.stride, spec.padding).output_extents("max_pool3d", ext, spec.kernel)?;
            out_c = c;
        }
        LayerKind::Bottleneck2d | LayerKind::Bottleneck21d => {
            for b in 0..spec.repeats {
                let (convs, shortcut) = block_convs(spec, b);
                let block_in = ext;
                for conv in &convs {
                    let (m, o) = conv_macs(conv, ext)?;
                    report.push(conv.name.clone(), m);
                    ext = o;
                }
                if let Some(sc) = shortcut {
                    let (m, o) = conv_macs(&sc, block_in)?;
                    if o != ext {
                        return Err(shape_err(
                            "layer_flops",
                            format!("shortcut '{}' gives {:?}, branch gives {:?}", sc.name, o, ext),
                        ));
                    }
                    report.push(sc.name, m);
                }
            }
            out_c = spec.out_channels;
        }
        LayerKind::GlobalAvgPool => {
            ext = [1, 1, 1];
            out_c = c;
        }
        LayerKind::Dense => {
            if ext != [1, 1, 1] {
                return Err(shape_err(
                    "layer_flops",
                    format!("dense '{}' needs pooled input, got extents {:?}", spec.name, ext),
                ));
            }
            report.push(spec.name.clone(), Macs((spec.in_channels * spec.out_channels) as u64));
            out_c = spec.out_channels;
        }
    }
    Ok((report, [ext[0], ext[1], ext[2], out_c]))
}

/// MAC count of one table row at input `(t, h, w, c)`.
pub fn layer_flops(spec: &LayerSpec, input: [usize; 4]) -> Result<Macs> {
    Ok(layer_cost(spec, input)?.0.total)
}

/// Per-clip cost of a backbone at its configured clip length and resolution.
pub fn backbone_flops(config: &BackboneConfig) -> Result<CostReport> {
    let table = spec_table(config)?;
    let mut shape = [config.clip_len, config.resolution, config.resolution, 3];
    let mut report = CostReport::new();
    for layer in &table {
        let (part, out) = layer_cost(layer, shape)?;
        for e in part.entries {
            report.push(e.name, e.macs);
        }
        shape = out;
    }
    Ok(report)
}

/// Cost of one recurrent step over a feature map `[l, h, w, c]`.
///
/// FAST-GRU: `P·c²·(6/r + 2)` with `P = l·h·w` (four gate compressions,
/// two recoveries, two candidate convs). Vector cells act on the pooled
/// `c`-vector: GRU `6c²`, LSTM `8c²`, concat `2c²`. Average pooling has no step.
pub fn aggregator_flops(method: Method, feature: [usize; 4], reduction: usize) -> Result<Macs> {
    let [l, h, w, c] = feature;
    let p = (l * h * w) as u64;
    let c = c as u64;
    Ok(match method {
        Method::FastGru => {
            if reduction == 0 || c % reduction as u64 != 0 {
                return Err(Error::Config(format!(
                    "FAST-GRU needs channels divisible by r; got c={} r={}",
                    c, reduction
                )));
            }
            let cr = c / reduction as u64;
            Macs(p * (4 * c * cr + 2 * cr * c + 2 * c * c))
        }
        Method::Gru => Macs(6 * c * c),
        Method::Lstm => Macs(8 * c * c),
        Method::Concat => Macs(2 * c * c),
        Method::AvgPool => Macs::ZERO,
    })
}

/// Inputs to a whole-video cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleCosts {
    /// Per-clip cost of the expensive backbone.
    pub expensive: Macs,
    /// Per-clip cost of the cheap backbone.
    pub cheap: Macs,
    /// One aggregation step.
    pub step: Macs,
    /// Video-level classifier applied once after aggregation.
    pub head: Macs,
}

/// Σ per-clip backbone cost by pattern + (N−1)·step + head.
pub fn schedule_flops(schedule: &ClipSchedule, costs: &ScheduleCosts) -> CostReport {
    let e = schedule.expensive_count() as u64;
    let c = schedule.pattern.iter().filter(|s| **s == Source::Cheap).count() as u64;
    let steps = schedule.num_clips.saturating_sub(1) as u64;
    let mut report = CostReport::new();
    report.push("expensive_clips", costs.expensive * e);
    report.push("cheap_clips", costs.cheap * c);
    report.push("aggregation", costs.step * steps);
    report.push("head", costs.head);
    report
}

/// Head cost of an aggregator over `c` channels and `k` classes. Average
/// pooling reuses the backbone classifiers and adds nothing.
pub fn head_flops(method: Method, channels: usize, classes: usize) -> Macs {
    match method {
        Method::AvgPool => Macs::ZERO,
        _ => Macs((channels * classes) as u64),
    }
}
