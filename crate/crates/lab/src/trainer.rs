//! Two-stage training: backbones on single clips, then an aggregator on the
//! frozen backbones' feature maps.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use faster_core::aggregate::{avg_pool_aggregate, Aggregator, AggregatorConfig, Method};
use faster_core::backbone::{build_backbone, Backbone, BackboneConfig, Family, Preset};
use faster_core::optim::{cosine_lr, Sgd, SgdConfig};
use faster_core::schedule::{sample_clips_eval, sample_clips_train, ClipSchedule, ClipSet, Source};
use faster_core::synth::{clip_tensor, CropBox, Dataset, ScaleJitter, VideoSample};
use faster_core::{Error as CoreError, Graph, Mode, ParamStore, Tensor};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, Metadata};
use crate::error::{LabError, Result};

/// Training precision.
pub type F = f32;

const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
/// Videos per forward pass when only evaluating.
const EVAL_CHUNK: usize = 32;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sgd: SgdConfig,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 0.05,
            sgd: SgdConfig::default(),
            seed: 1,
            augment: true,
        }
    }
}

impl TrainOptions {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(LabError::Config(format!(
                "epochs, batch size and learning rate must be positive (got {}, {}, {})",
                self.epochs, self.batch_size, self.lr
            )));
        }
        if !(self.sgd.momentum >= 0.0 && self.sgd.momentum < 1.0 && self.sgd.weight_decay >= 0.0) {
            return Err(LabError::Config("momentum must be in [0, 1) and weight decay non-negative".into()));
        }
        Ok(())
    }
}

/// One `epoch,split,loss,top1` row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub top1: f64,
}

pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,split,loss,top1\n");
    for r in records {
        out.push_str(&format!("{},{},{:.6},{:.6}\n", r.epoch, r.split, r.loss, r.top1));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Word position of the data stream at the end of training.
    pub rng_word_pos: u128,
}

impl TrainReport {
    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().filter(|r| r.split == "train").map(|r| r.loss).collect()
    }
}

/// Whether `label` is among the `k` best scores; ties rank the lower class
/// index first.
pub fn in_top_k(scores: &[F], label: usize, k: usize) -> bool {
    let s = scores[label];
    let rank = scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < label))
        .count();
    rank < k
}

/// Index of the best score, lowest index on ties.
pub fn argmax(scores: &[F]) -> usize {
    let mut best = 0;
    for (j, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = j;
        }
    }
    best
}

fn row_loss(scores: &[F], label: usize) -> f64 {
    let m = scores.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
    let z: f64 = scores.iter().map(|&v| (v as f64 - m).exp()).sum();
    m + z.ln() - scores[label] as f64
}

/// Running loss and accuracy over a sequence of logit rows.
#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    loss: f64,
    hits: usize,
    count: usize,
}

impl Tally {
    fn add_rows(&mut self, logits: &Tensor<F>, labels: &[usize], k: usize) {
        let classes = logits.shape()[1];
        for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
            self.loss += row_loss(row, label);
            self.hits += in_top_k(row, label, k) as usize;
            self.count += 1;
        }
    }

    fn mean_loss(&self) -> f64 {
        self.loss / self.count.max(1) as f64
    }

    fn accuracy(&self) -> f64 {
        self.hits as f64 / self.count.max(1) as f64
    }
}

fn check_dataset(data: &Dataset, classes: usize, resolution: usize, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(LabError::Data(format!("{} dataset is empty", what)));
    }
    for s in &data.samples {
        if s.label as usize >= classes {
            return Err(CoreError::LabelOutOfRange {
                label: s.label as usize,
                classes,
            }
            .into());
        }
        if s.height != resolution || s.width != resolution {
            return Err(LabError::Data(format!(
                "{} video {} is {}×{}, the model expects {}×{}",
                what, s.id, s.height, s.width, resolution, resolution
            )));
        }
    }
    Ok(())
}

fn non_finite(loss: f64, epoch: usize, step: usize, lr: f64) -> LabError {
    LabError::Numeric(format!(
        "loss became {} at epoch {} step {} (lr {:.3e}); lower the learning rate",
        loss, epoch, step, lr
    ))
}

/// A backbone and its parameters.
#[derive(Debug, Clone)]
pub struct BackboneModel {
    pub backbone: Backbone,
    pub store: ParamStore<F>,
}

impl BackboneModel {
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = build_backbone(config, &mut store, &mut stream_rng(seed, INIT_STREAM))?;
        Ok(Self { backbone, store })
    }

    pub fn config(&self) -> &BackboneConfig {
        self.backbone.config()
    }

    /// The same network reading clips of another length.
    pub fn with_clip_len(&self, clip_len: usize) -> Result<Backbone> {
        let mut b = self.backbone.clone();
        b.set_clip_len(clip_len)?;
        Ok(b)
    }

    pub fn attributes(&self) -> BTreeMap<String, String> {
        let c = self.config();
        BTreeMap::from([
            ("family".into(), c.family.name().into()),
            (
                "preset".into(),
                match c.preset {
                    Preset::FullSpec => "full",
                    Preset::Tiny => "tiny",
                }
                .into(),
            ),
            ("channel_scale".into(), format!("{}/{}", c.channel_scale.0, c.channel_scale.1)),
            ("resolution".into(), c.resolution.to_string()),
            ("clip_len".into(), c.clip_len.to_string()),
            ("repeats".into(), c.repeats.map(|r| r.to_string()).join(",")),
            ("classes".into(), c.num_classes.to_string()),
        ])
    }

    pub fn to_checkpoint(&self, mut metadata: Metadata) -> Checkpoint {
        metadata.kind = "backbone".into();
        metadata.attributes.extend(self.attributes());
        Checkpoint::from_store(&self.store, metadata)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<Self> {
        let m = &ckpt.metadata;
        if m.kind != "backbone" {
            return Err(LabError::Data(format!("{} holds a {} checkpoint, not a backbone", path.display(), m.kind)));
        }
        let bad = |k: &str| LabError::Data(format!("{}: bad '{}' in checkpoint metadata", path.display(), k));
        let family: Family = m.attr("family")?.parse()?;
        let preset = match m.attr("preset")? {
            "full" => Preset::FullSpec,
            "tiny" => Preset::Tiny,
            _ => return Err(bad("preset")),
        };
        let (num, den) = m.attr("channel_scale")?.split_once('/').ok_or_else(|| bad("channel_scale"))?;
        let num_of = |s: &str, k: &str| s.trim().parse::<usize>().map_err(|_| bad(k));
        let repeats: Vec<usize> = m
            .attr("repeats")?
            .split(',')
            .map(|s| num_of(s, "repeats"))
            .collect::<Result<_>>()?;
        let config = BackboneConfig {
            family,
            preset,
            channel_scale: (num_of(num, "channel_scale")?, num_of(den, "channel_scale")?),
            resolution: num_of(m.attr("resolution")?, "resolution")?,
            clip_len: num_of(m.attr("clip_len")?, "clip_len")?,
            repeats: repeats.try_into().map_err(|_| bad("repeats"))?,
            num_classes: num_of(m.attr("classes")?, "classes")?,
        };
        let mut model = Self::init(config, 0)?;
        ckpt.load_into(&mut model.store, path)?;
        Ok(model)
    }

    /// Normalized clip batch `[n, L, S, S, 3]`.
    fn clip_batch(samples: &[&VideoSample], windows: &[faster_core::schedule::ClipWindow], crops: &[CropBox]) -> Result<Tensor<F>> {
        let clips: Vec<Tensor<F>> = samples
            .iter()
            .zip(windows)
            .zip(crops)
            .map(|((s, w), c)| clip_tensor(s, w, c))
            .collect();
        Ok(Tensor::stack(&clips)?)
    }
}

/// Video-level loss and accuracy of a backbone alone: logits of `num_clips`
/// evenly spaced clips are averaged.
pub fn evaluate_backbone(model: &BackboneModel, data: &Dataset, num_clips: usize, k: usize) -> Result<(f64, f64)> {
    let cfg = model.config();
    check_dataset(data, cfg.num_classes, cfg.resolution, "evaluation")?;
    let res = cfg.resolution;
    let chunks: Vec<&[VideoSample]> = data.samples.chunks(EVAL_CHUNK.div_ceil(num_clips.max(1))).collect();
    let parts = chunks
        .par_iter()
        .map(|chunk| -> Result<Tally> {
            let mut samples = Vec::new();
            let mut windows = Vec::new();
            for s in chunk.iter() {
                let set = sample_clips_eval(s.id, s.frames, cfg.clip_len, num_clips);
                for w in set.windows {
                    samples.push(s);
                    windows.push(w);
                }
            }
            let crops = vec![CropBox::identity(res); samples.len()];
            let batch = BackboneModel::clip_batch(&samples, &windows, &crops)?;
            let logits = model.backbone.logits(&model.store, batch)?;
            let mut tally = Tally::default();
            for (v, s) in chunk.iter().enumerate() {
                let rows: Vec<Tensor<F>> = (0..num_clips).map(|i| logits.select(v * num_clips + i)).collect::<std::result::Result<_, _>>()?;
                let avg = avg_pool_aggregate(&rows)?;
                let avg = avg.reshape(&[1, cfg.num_classes])?;
                tally.add_rows(&avg, &[s.label as usize], k);
            }
            Ok(tally)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = parts.iter().fold(Tally::default(), |a, t| Tally {
        loss: a.loss + t.loss,
        hits: a.hits + t.hits,
        count: a.count + t.count,
    });
    Ok((total.mean_loss(), total.accuracy()))
}

/// Stage one: single-clip classification with SGD, momentum, weight decay and
/// a cosine schedule. Row 0 is the untrained model's loss over the training
/// set (one centered clip per video, batch statistics); rows 1.. are running
/// means over each epoch's steps.
pub fn train_backbone(model: &mut BackboneModel, train: &Dataset, opts: &TrainOptions, test: Option<&Dataset>) -> Result<TrainReport> {
    opts.validate()?;
    let cfg = *model.config();
    check_dataset(train, cfg.num_classes, cfg.resolution, "training")?;
    if let Some(t) = test {
        check_dataset(t, cfg.num_classes, cfg.resolution, "test")?;
    }
    let res = cfg.resolution;
    let jitter = ScaleJitter::for_crop(res);
    let mut rng = stream_rng(opts.seed, DATA_STREAM);
    let mut sgd = Sgd::new(opts.sgd);
    let steps_per_epoch = train.len().div_ceil(opts.batch_size);
    let total_steps = opts.epochs * steps_per_epoch;
    let mut records = Vec::new();

    let mut tally = Tally::default();
    for chunk in train.samples.chunks(opts.batch_size) {
        let samples: Vec<&VideoSample> = chunk.iter().collect();
        let windows: Vec<_> = samples.iter().map(|s| sample_clips_eval(s.id, s.frames, cfg.clip_len, 1).windows[0]).collect();
        let batch = BackboneModel::clip_batch(&samples, &windows, &vec![CropBox::identity(res); samples.len()])?;
        let mut g = Graph::inference();
        let x = g.constant(batch);
        let logits = model.backbone.forward_logits(&mut g, &model.store, x, Mode::Train)?;
        let labels: Vec<usize> = samples.iter().map(|s| s.label as usize).collect();
        tally.add_rows(g.value(logits), &labels, 1);
    }
    records.push(EpochRecord {
        epoch: 0,
        split: "train",
        loss: tally.mean_loss(),
        top1: tally.accuracy(),
    });
    info!("{} epoch 0: loss {:.4} top1 {:.3}", cfg.family, tally.mean_loss(), tally.accuracy());

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut tally = Tally::default();
        for idx in order.chunks(opts.batch_size) {
            let samples: Vec<&VideoSample> = idx.iter().map(|&i| &train.samples[i]).collect();
            let mut windows = Vec::with_capacity(samples.len());
            let mut crops = Vec::with_capacity(samples.len());
            for s in &samples {
                windows.push(sample_clips_train(s.id, s.frames, cfg.clip_len, 1, &mut rng).windows[0]);
                crops.push(if opts.augment { jitter.sample(&mut rng) } else { CropBox::identity(res) });
            }
            let labels: Vec<usize> = samples.iter().map(|s| s.label as usize).collect();
            let batch = BackboneModel::clip_batch(&samples, &windows, &crops)?;
            let lr = cosine_lr(step, total_steps, opts.lr);
            let mut g = Graph::new();
            let x = g.constant(batch);
            let logits = model.backbone.forward_logits(&mut g, &model.store, x, Mode::Train)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            let lv = g.value(loss).item()? as f64;
            if !lv.is_finite() {
                return Err(non_finite(lv, epoch, step, lr));
            }
            tally.add_rows(g.value(logits), &labels, 1);
            let grads = g.backward(loss)?;
            model.store.zero_grads();
            model.store.accumulate_grads(&g, &grads);
            sgd.step(&mut model.store, lr);
            model.store.apply_stat_updates(&mut g);
            step += 1;
        }
        debug!("{} epoch {}: loss {:.4} top1 {:.3}", cfg.family, epoch, tally.mean_loss(), tally.accuracy());
        records.push(EpochRecord {
            epoch,
            split: "train",
            loss: tally.mean_loss(),
            top1: tally.accuracy(),
        });
    }
    info!(
        "{} epoch {}: loss {:.4} top1 {:.3}",
        cfg.family,
        opts.epochs,
        records.last().unwrap().loss,
        records.last().unwrap().top1
    );
    if let Some(t) = test {
        let (loss, top1) = evaluate_backbone(model, t, 1, 1)?;
        info!("{} test: loss {:.4} top1 {:.3}", cfg.family, loss, top1);
        records.push(EpochRecord {
            epoch: opts.epochs,
            split: "test",
            loss,
            top1,
        });
    }
    Ok(TrainReport {
        records,
        rng_word_pos: rng.get_word_pos(),
    })
}

/// The two frozen backbones feeding an aggregator.
#[derive(Debug, Clone, Copy)]
pub struct Backbones<'a> {
    pub expensive: &'a BackboneModel,
    pub cheap: &'a BackboneModel,
}

impl<'a> Backbones<'a> {
    /// Feature shape `[l, h, w, c]` at clip length `clip_len`; both backbones
    /// must agree.
    pub fn feature_shape(&self, clip_len: usize) -> Result<[usize; 4]> {
        let e = self.expensive.with_clip_len(clip_len)?.feature_shape()?;
        let c = self.cheap.with_clip_len(clip_len)?.feature_shape()?;
        if e != c {
            return Err(LabError::Data(format!(
                "feature maps differ: expensive {:?}, cheap {:?}; an aggregator needs one shape",
                e, c
            )));
        }
        let (re, rc) = (self.expensive.config().resolution, self.cheap.config().resolution);
        if re != rc {
            return Err(LabError::Data(format!("backbone resolutions differ: {} vs {}", re, rc)));
        }
        Ok(e)
    }

    fn model(&self, src: Source) -> &BackboneModel {
        match src {
            Source::Expensive => self.expensive,
            Source::Cheap => self.cheap,
        }
    }
}

/// Feature maps keyed by `(backbone, video index, clip start)`.
#[derive(Debug, Clone, Default)]
pub struct FeatureCache {
    map: HashMap<(Source, usize, usize), Tensor<F>>,
}

impl FeatureCache {
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn to_checkpoint(&self, metadata: Metadata) -> Checkpoint {
        let mut keys: Vec<_> = self.map.keys().copied().collect();
        keys.sort_by_key(|(s, v, t)| (s.letter(), *v, *t));
        let mut ckpt = Checkpoint::new(Metadata {
            kind: "features".into(),
            ..metadata
        });
        for k in keys {
            ckpt.push(format!("{}/{}/{}", k.0.letter(), k.1, k.2), &self.map[&k]);
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<Self> {
        let mut map = HashMap::new();
        for (name, t) in &ckpt.tensors {
            let bad = || LabError::Data(format!("{}: bad feature key '{}'", path.display(), name));
            let mut parts = name.split('/');
            let src = match parts.next() {
                Some("E") => Source::Expensive,
                Some("C") => Source::Cheap,
                _ => return Err(bad()),
            };
            let v = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            let s = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            map.insert((src, v, s), t.to_real());
        }
        Ok(Self { map })
    }
}

/// Per-video clip features in clip order, each `[l, h, w, c]`.
fn gather_features(
    bbs: &Backbones,
    clip_len: usize,
    jobs: &[(usize, &VideoSample, ClipSet)],
    pattern: &[Source],
    cache: Option<&mut FeatureCache>,
) -> Result<Vec<Vec<Tensor<F>>>> {
    let nets = [
        (Source::Expensive, bbs.expensive.with_clip_len(clip_len)?),
        (Source::Cheap, bbs.cheap.with_clip_len(clip_len)?),
    ];
    let res = bbs.expensive.config().resolution;
    let lookup = cache.as_deref();
    let computed = jobs
        .par_iter()
        .map(|(index, sample, set)| -> Result<(Vec<Tensor<F>>, Vec<((Source, usize, usize), Tensor<F>)>)> {
            let mut out: Vec<Option<Tensor<F>>> = vec![None; set.windows.len()];
            let mut fresh = Vec::new();
            for (src, net) in &nets {
                let todo: Vec<usize> = (0..set.windows.len())
                    .filter(|&i| pattern[i] == *src)
                    .filter(|&i| {
                        let hit = lookup.and_then(|c| c.map.get(&(*src, *index, set.windows[i].start)));
                        match hit {
                            Some(t) => {
                                out[i] = Some(t.clone());
                                false
                            }
                            None => true,
                        }
                    })
                    .collect();
                if todo.is_empty() {
                    continue;
                }
                let samples = vec![*sample; todo.len()];
                let windows: Vec<_> = todo.iter().map(|&i| set.windows[i]).collect();
                let batch = BackboneModel::clip_batch(&samples, &windows, &vec![CropBox::identity(res); todo.len()])?;
                let model = bbs.model(*src);
                let feats = net.features(&model.store, batch)?;
                for (j, &i) in todo.iter().enumerate() {
                    let f = feats.select(j)?;
                    fresh.push(((*src, *index, set.windows[i].start), f.clone()));
                    out[i] = Some(f);
                }
            }
            Ok((out.into_iter().map(|t| t.expect("every clip assigned")).collect(), fresh))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut result = Vec::with_capacity(computed.len());
    let mut cache = cache;
    for (feats, fresh) in computed {
        if let Some(c) = cache.as_deref_mut() {
            c.map.extend(fresh);
        }
        result.push(feats);
    }
    Ok(result)
}

/// Clip-major batches `[n, l, h, w, c]`, one per clip index.
fn clip_major(per_video: &[Vec<Tensor<F>>]) -> Result<Vec<Tensor<F>>> {
    let clips = per_video[0].len();
    (0..clips)
        .map(|i| {
            let items: Vec<Tensor<F>> = per_video.iter().map(|v| v[i].clone()).collect();
            Ok(Tensor::stack(&items)?)
        })
        .collect()
}

/// How stage two picks clip starts during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Independent uniform starts per video and epoch, sorted.
    Random,
    /// The evenly spaced evaluation windows.
    Uniform,
}

impl std::str::FromStr for Sampling {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "random" => Ok(Sampling::Random),
            "uniform" => Ok(Sampling::Uniform),
            other => Err(format!("unknown sampling '{}' (random | uniform)", other)),
        }
    }
}

/// An aggregator and its parameters.
#[derive(Debug, Clone)]
pub struct AggregatorModel {
    pub aggregator: Aggregator,
    pub store: ParamStore<F>,
}

impl AggregatorModel {
    pub fn init(config: AggregatorConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let aggregator = Aggregator::build(config, &mut store, &mut stream_rng(seed, INIT_STREAM))?;
        Ok(Self { aggregator, store })
    }

    pub fn attributes(&self) -> BTreeMap<String, String> {
        let c = self.aggregator.config();
        BTreeMap::from([
            ("method".into(), c.method.name().into()),
            ("channels".into(), c.channels.to_string()),
            ("reduction".into(), c.reduction.to_string()),
            ("classes".into(), c.num_classes.to_string()),
            ("gate_bias".into(), c.gate_bias.to_string()),
        ])
    }

    pub fn to_checkpoint(&self, mut metadata: Metadata) -> Checkpoint {
        metadata.kind = "aggregator".into();
        metadata.attributes.extend(self.attributes());
        Checkpoint::from_store(&self.store, metadata)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<Self> {
        let m = &ckpt.metadata;
        if m.kind != "aggregator" {
            return Err(LabError::Data(format!("{} holds a {} checkpoint, not an aggregator", path.display(), m.kind)));
        }
        let bad = |k: &str| LabError::Data(format!("{}: bad '{}' in checkpoint metadata", path.display(), k));
        let method: Method = m.attr("method")?.parse()?;
        let mut config = AggregatorConfig::new(
            method,
            m.attr("channels")?.parse().map_err(|_| bad("channels"))?,
            m.attr("classes")?.parse().map_err(|_| bad("classes"))?,
        );
        config.reduction = m.attr("reduction")?.parse().map_err(|_| bad("reduction"))?;
        config.gate_bias = m.attr("gate_bias")?.parse().map_err(|_| bad("gate_bias"))?;
        let mut model = Self::init(config, 0)?;
        ckpt.load_into(&mut model.store, path)?;
        Ok(model)
    }

    fn logits(&self, g: &mut Graph<F>, batches: Vec<Tensor<F>>, mode: Mode) -> Result<faster_core::Var> {
        let vars: Vec<_> = batches.into_iter().map(|b| g.constant(b)).collect();
        Ok(self.aggregator.aggregate_sequence(g, &self.store, &vars, mode)?)
    }
}

fn check_aggregator_inputs(model: &AggregatorModel, bbs: &Backbones, schedule: &ClipSchedule, data: &Dataset, what: &str) -> Result<()> {
    let shape = bbs.feature_shape(schedule.clip_len)?;
    let cfg = model.aggregator.config();
    if shape[3] != cfg.channels {
        return Err(LabError::Data(format!(
            "aggregator expects {} channels, backbones give {}",
            cfg.channels, shape[3]
        )));
    }
    check_dataset(data, cfg.num_classes, bbs.expensive.config().resolution, what)
}

/// Stage two. Backbones run in evaluation mode on inference tapes, so no
/// gradient can reach them. Row 0 is the untrained aggregator's loss over the
/// training set on evenly spaced clips.
#[allow(clippy::too_many_arguments)]
pub fn train_aggregator(
    model: &mut AggregatorModel,
    bbs: &Backbones,
    train: &Dataset,
    schedule: &ClipSchedule,
    opts: &TrainOptions,
    sampling: Sampling,
    mut cache: Option<&mut FeatureCache>,
    test: Option<(&Dataset, Option<&mut FeatureCache>)>,
) -> Result<TrainReport> {
    opts.validate()?;
    check_aggregator_inputs(model, bbs, schedule, train, "training")?;
    let (l, n) = (schedule.clip_len, schedule.num_clips);
    let mut rng = stream_rng(opts.seed, DATA_STREAM);
    let mut sgd = Sgd::new(opts.sgd);
    let steps_per_epoch = train.len().div_ceil(opts.batch_size);
    let total_steps = opts.epochs * steps_per_epoch;
    let mut records = Vec::new();
    let method = model.aggregator.method();

    let mut tally = Tally::default();
    let all: Vec<usize> = (0..train.len()).collect();
    for idx in all.chunks(opts.batch_size) {
        let jobs: Vec<_> = idx
            .iter()
            .map(|&i| {
                let s = &train.samples[i];
                (i, s, sample_clips_eval(s.id, s.frames, l, n))
            })
            .collect();
        let feats = gather_features(bbs, l, &jobs, &schedule.pattern, cache.as_deref_mut())?;
        let mut g = Graph::inference();
        let logits = model.logits(&mut g, clip_major(&feats)?, Mode::Train)?;
        let labels: Vec<usize> = jobs.iter().map(|j| j.1.label as usize).collect();
        tally.add_rows(g.value(logits), &labels, 1);
    }
    records.push(EpochRecord {
        epoch: 0,
        split: "train",
        loss: tally.mean_loss(),
        top1: tally.accuracy(),
    });
    info!("{} epoch 0: loss {:.4} top1 {:.3}", method, tally.mean_loss(), tally.accuracy());

    let mut order = all.clone();
    let mut step = 0;
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut tally = Tally::default();
        for idx in order.chunks(opts.batch_size) {
            let jobs: Vec<_> = idx
                .iter()
                .map(|&i| {
                    let s = &train.samples[i];
                    let set = match sampling {
                        Sampling::Random => sample_clips_train(s.id, s.frames, l, n, &mut rng),
                        Sampling::Uniform => sample_clips_eval(s.id, s.frames, l, n),
                    };
                    (i, s, set)
                })
                .collect();
            let feats = gather_features(bbs, l, &jobs, &schedule.pattern, cache.as_deref_mut())?;
            let labels: Vec<usize> = jobs.iter().map(|j| j.1.label as usize).collect();
            let lr = cosine_lr(step, total_steps, opts.lr);
            let mut g = Graph::new();
            let logits = model.logits(&mut g, clip_major(&feats)?, Mode::Train)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            let lv = g.value(loss).item()? as f64;
            if !lv.is_finite() {
                return Err(non_finite(lv, epoch, step, lr));
            }
            tally.add_rows(g.value(logits), &labels, 1);
            let grads = g.backward(loss)?;
            model.store.zero_grads();
            model.store.accumulate_grads(&g, &grads);
            sgd.step(&mut model.store, lr);
            model.store.apply_stat_updates(&mut g);
            step += 1;
        }
        debug!("{} epoch {}: loss {:.4} top1 {:.3}", method, epoch, tally.mean_loss(), tally.accuracy());
        records.push(EpochRecord {
            epoch,
            split: "train",
            loss: tally.mean_loss(),
            top1: tally.accuracy(),
        });
    }
    model.store.initialize_running_stats();
    info!(
        "{} epoch {}: loss {:.4} top1 {:.3}",
        method,
        opts.epochs,
        records.last().unwrap().loss,
        records.last().unwrap().top1
    );
    if let Some((t, tcache)) = test {
        let (loss, top1) = evaluate_aggregator(model, bbs, t, schedule, 1, tcache)?;
        info!("{} test: loss {:.4} top1 {:.3}", method, loss, top1);
        records.push(EpochRecord {
            epoch: opts.epochs,
            split: "test",
            loss,
            top1,
        });
    }
    Ok(TrainReport {
        records,
        rng_word_pos: rng.get_word_pos(),
    })
}

/// Video-level mean loss and top-k accuracy with evenly spaced clips, the
/// schedule's backbone assignment and lowest-index tie-breaking.
pub fn evaluate_aggregator(
    model: &AggregatorModel,
    bbs: &Backbones,
    data: &Dataset,
    schedule: &ClipSchedule,
    k: usize,
    mut cache: Option<&mut FeatureCache>,
) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(LabError::Config("top-k needs k ≥ 1".into()));
    }
    check_aggregator_inputs(model, bbs, schedule, data, "evaluation")?;
    let (l, n) = (schedule.clip_len, schedule.num_clips);
    let mut tally = Tally::default();
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_CHUNK) {
        let jobs: Vec<_> = idx
            .iter()
            .map(|&i| {
                let s = &data.samples[i];
                (i, s, sample_clips_eval(s.id, s.frames, l, n))
            })
            .collect();
        let feats = gather_features(bbs, l, &jobs, &schedule.pattern, cache.as_deref_mut())?;
        let mut g = Graph::inference();
        let logits = model.logits(&mut g, clip_major(&feats)?, Mode::Eval)?;
        let labels: Vec<usize> = jobs.iter().map(|j| j.1.label as usize).collect();
        tally.add_rows(g.value(logits), &labels, k);
    }
    Ok((tally.mean_loss(), tally.accuracy()))
}
