//! Three-stage training, evaluation and the per-epoch log.
//!
//! Stage 1 trains the backbone with the per-canvas head, stage 2 trains the
//! attention model on frozen backbone features, stage 3 trains backbone and
//! attention jointly. Baseline variants without attention run stage 1 only,
//! for the combined length of stages 1 and 3.

use std::fmt;
use std::rc::Rc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::aggregate_prediction;
use crate::canvas::{attention_support, scale_blocks, validate_sequence, Canvas, CanvasPlan, Rect};
use crate::checkpoint::NamedTensors;
use crate::data::{iterate_minibatches, within_scale_permutation, Example};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{total_loss, LossConfig};
use crate::model::{DvanModel, Head};
use crate::optim::{Sgd, SgdConfig};
use crate::params::{Bindings, ParamGroup};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub sgd: SgdConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.sgd.validate()
    }
}

/// Stage number (1–3) and the epochs it runs for this model.
pub fn schedule(model: &DvanModel, epochs: [usize; 3]) -> Vec<(u8, usize)> {
    if model.attention.is_some() {
        vec![(1, epochs[0]), (2, epochs[1]), (3, epochs[2])]
    } else {
        vec![(1, epochs[0] + epochs[2])]
    }
}

fn trainable(stage: u8, group: ParamGroup) -> bool {
    match stage {
        1 => matches!(group, ParamGroup::Backbone | ParamGroup::CanvasHead),
        2 => group == ParamGroup::Attention,
        _ => matches!(group, ParamGroup::Backbone | ParamGroup::Attention),
    }
}

fn head_for(stage: u8) -> Head {
    if stage == 1 {
        Head::Canvas
    } else {
        Head::Attention
    }
}

/// Last completed `(stage, epoch)`; `(0, 0)` before any training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct Position {
    pub stage: u8,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    /// Mean per-example training objective over the epoch.
    pub loss: f64,
    /// Train-split accuracy measured after the epoch.
    pub accuracy: f64,
    /// `NaN` when the head has no attention maps.
    pub mean_ldiv: f64,
    pub mean_overlap: f64,
    pub wall_seconds: f64,
}

pub const LOG_HEADER: &str = "stage,epoch,loss,accuracy,mean_Ldiv,mean_overlap,wall_seconds";

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{:.3}",
            self.stage, self.epoch, self.loss, self.accuracy, self.mean_ldiv, self.mean_overlap, self.wall_seconds
        )
    }
}

impl EpochRecord {
    pub fn parse(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Input(format!("log line has {} fields: {line}", fields.len())));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::Input(format!("bad number {:?} in log line", fields[i])))
        };
        let int = |i: usize| -> Result<usize> {
            fields[i]
                .parse()
                .map_err(|_| Error::Input(format!("bad integer {:?} in log line", fields[i])))
        };
        Ok(Self {
            stage: int(0)? as u8,
            epoch: int(1)?,
            loss: num(2)?,
            accuracy: num(3)?,
            mean_ldiv: num(4)?,
            mean_overlap: num(5)?,
            wall_seconds: num(6)?,
        })
    }

    /// Everything but the wall-clock field, as text.
    pub fn reproducible_fields(&self) -> String {
        let s = self.to_string();
        s[..s.rfind(',').unwrap()].to_string()
    }
}

/// Backbone features of every example, in the fixed canvas order.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub features: Vec<Vec<Tensor>>,
    /// Canvas footprints per example (pixels dropped).
    pub frames: Vec<Vec<Canvas>>,
}

/// Canvases reduced to their geometry.
fn frames_of(canvases: &[Canvas]) -> Vec<Canvas> {
    canvases
        .iter()
        .map(|c| Canvas { pixels: Tensor::zeros(&[1, 1, 1]), ..c.clone() })
        .collect()
}

impl FeatureCache {
    pub fn build(model: &DvanModel, examples: &[Example]) -> Result<Self> {
        let mut features = Vec::with_capacity(examples.len());
        let mut frames = Vec::with_capacity(examples.len());
        for e in examples {
            let canvases = model.canvases(&e.image)?;
            features.push(model.extract_features(&canvases)?);
            frames.push(frames_of(&canvases));
        }
        Ok(Self { features, frames })
    }
}

/// Outcome for one evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceResult {
    pub label: usize,
    pub prediction: usize,
    pub probs: Vec<f64>,
    /// Attention maps per step, in canvas order.
    pub maps: Option<Vec<Vec<f64>>>,
    pub frames: Vec<Canvas>,
    pub ldiv: Option<f64>,
    pub overlap: Option<f64>,
    pub violations: usize,
    /// Whether some step's support region touches a ground-truth glyph.
    pub localized: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_ldiv: f64,
    pub mean_overlap: f64,
    /// Violating neighbour pairs over all neighbour pairs.
    pub violation_rate: f64,
    /// Share of correctly classified images whose attention touches a glyph.
    pub localization_rate: f64,
    pub results: Vec<SequenceResult>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn evaluate_one(
    model: &DvanModel,
    features: &[Tensor],
    frames: Vec<Canvas>,
    example: &Example,
    head: Head,
    loss: &LossConfig,
) -> Result<SequenceResult> {
    let mut g = Graph::new();
    g.set_finite_check(false);
    let p = model.store.bind(&mut g, |_| false);
    let vars: Vec<Var> = features.iter().map(|f| g.constant(f.clone())).collect();
    let out = model.forward_features(&mut g, &p, &vars, head)?;
    let step: Vec<&[f64]> = out.step_probs.iter().map(|&v| g.data(v)).collect();
    let probs = aggregate_prediction(&step)?;
    let prediction = argmax(&probs);
    let maps: Option<Vec<Vec<f64>>> =
        out.maps.as_ref().map(|m| m.iter().map(|&v| g.data(v).to_vec()).collect());
    let (mut ldiv, mut overlap, mut violations, mut localized) = (None, None, 0, None);
    if let Some(m) = &maps {
        localized = Some(touches_glyph(&frames, m, example, loss.mass_threshold)?);
        let div = crate::loss::diversity_loss(&mut g, out.maps.as_ref().unwrap())?;
        ldiv = Some(g.value(div).item());
        let report = validate_sequence(&frames, m, loss.beta, loss.mass_threshold)?;
        overlap = report.mean_ratio();
        violations = report.violations.len();
    }
    let label = example.label;
    Ok(SequenceResult { label, prediction, probs, maps, frames, ldiv, overlap, violations, localized })
}

fn touches_glyph(frames: &[Canvas], maps: &[Vec<f64>], example: &Example, mass_threshold: f64) -> Result<bool> {
    let width = example.image.shape()[2] as f64;
    for (frame, map) in frames.iter().zip(maps) {
        let support = attention_support(map, frame, mass_threshold)?;
        let s = frame.image_width as f64 / width;
        for r in &example.glyphs {
            if support.intersects_rect(&Rect::new(r.x0 * s, r.y0 * s, r.x1 * s, r.y1 * s)) {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Fixed-order evaluation with the given head.
pub fn evaluate(
    model: &DvanModel,
    examples: &[Example],
    head: Head,
    loss: &LossConfig,
    cache: Option<&FeatureCache>,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let mut results = Vec::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        let r = match cache {
            Some(c) => evaluate_one(model, &c.features[i], c.frames[i].clone(), e, head, loss)?,
            None => {
                let canvases = model.canvases(&e.image)?;
                let features = model.extract_features(&canvases)?;
                evaluate_one(model, &features, frames_of(&canvases), e, head, loss)?
            }
        };
        results.push(r);
    }
    let correct = results.iter().filter(|r| r.prediction == r.label).count();
    let pairs: usize = results.iter().filter(|r| r.maps.is_some()).map(|r| r.frames.len().saturating_sub(1)).sum();
    let violations: usize = results.iter().map(|r| r.violations).sum();
    Ok(EvalReport {
        accuracy: correct as f64 / results.len() as f64,
        mean_ldiv: mean_of(results.iter().filter_map(|r| r.ldiv)),
        mean_overlap: mean_of(results.iter().filter_map(|r| r.overlap)),
        violation_rate: if pairs == 0 { f64::NAN } else { violations as f64 / pairs as f64 },
        localization_rate: mean_of(
            results
                .iter()
                .filter(|r| r.prediction == r.label)
                .filter_map(|r| r.localized.map(|l| if l { 1.0 } else { 0.0 })),
        ),
        results,
    })
}

/// Per-epoch randomness, independent of everything that ran before.
pub fn epoch_rng(seed: u64, stage: u8, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 32) | epoch as u64);
    rng
}

pub struct Trainer<'a> {
    pub model: DvanModel,
    pub examples: &'a [Example],
    pub config: TrainConfig,
    pub sgd: Sgd,
    pub position: Position,
    pub log: Vec<EpochRecord>,
    cache: Option<Rc<FeatureCache>>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: DvanModel, examples: &'a [Example], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if examples.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let sgd = Sgd::new(config.sgd.learning_rate, config.sgd.momentum);
        Ok(Self { model, examples, config, sgd, position: Position::default(), log: Vec::new(), cache: None })
    }

    /// Shares a feature cache built from the current backbone, e.g. across variants.
    pub fn set_feature_cache(&mut self, cache: Rc<FeatureCache>) {
        self.cache = Some(cache);
    }

    pub fn feature_cache(&mut self) -> Result<Rc<FeatureCache>> {
        if self.cache.is_none() {
            self.cache = Some(Rc::new(FeatureCache::build(&self.model, self.examples)?));
        }
        Ok(self.cache.clone().unwrap())
    }

    pub fn schedule(&self) -> Vec<(u8, usize)> {
        schedule(&self.model, self.config.sgd.epochs)
    }

    /// Runs every remaining epoch of the schedule, calling `on_epoch` after each.
    pub fn train(&mut self, mut on_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        for (stage, epochs) in self.schedule() {
            if stage < self.position.stage {
                continue;
            }
            let first = if stage == self.position.stage { self.position.epoch + 1 } else { 1 };
            if first == 1 {
                self.sgd.reset();
            }
            for epoch in first..=epochs {
                self.run_epoch(stage, epoch)?;
                on_epoch(self)?;
            }
        }
        Ok(())
    }

    /// Runs epochs of `stage` until it has completed `until` of them.
    pub fn run_stage(&mut self, stage: u8, until: usize) -> Result<()> {
        let first = if stage == self.position.stage { self.position.epoch + 1 } else { 1 };
        if first == 1 {
            self.sgd.reset();
        }
        for epoch in first..=until {
            self.run_epoch(stage, epoch)?;
        }
        Ok(())
    }

    /// Forward and backward pass of one example; returns the loss, graph and bindings.
    fn example_loss(&self, index: usize, stage: u8, rng: &mut ChaCha8Rng) -> Result<(f64, Graph, Bindings)> {
        let example = &self.examples[index];
        let model = &self.model;
        let mut g = Graph::new();
        g.set_finite_check(false);
        let p = model.store.bind(&mut g, |grp| trainable(stage, grp));
        let features = if stage == 2 {
            let cache = self.cache.as_ref().expect("stage 2 runs on cached features");
            let f = &cache.features[index];
            let blocks = scale_blocks(&cache.frames[index].iter().map(|c| c.scale_index).collect::<Vec<_>>());
            within_scale_permutation(&blocks, rng)
                .into_iter()
                .map(|i| g.constant(f[i].clone()))
                .collect::<Vec<_>>()
        } else {
            let canvases = model.canvases(&example.image)?;
            let blocks = scale_blocks(&canvases.iter().map(|c| c.scale_index).collect::<Vec<_>>());
            let order: Vec<&Canvas> =
                within_scale_permutation(&blocks, rng).into_iter().map(|i| &canvases[i]).collect();
            model.features(&mut g, &p, &order)?
        };
        let out = model.forward_features(&mut g, &p, &features, head_for(stage))?;
        let terms = total_loss(&mut g, &out.step_probs, out.maps.as_deref(), example.label, &self.config.loss)?;
        let value = g.value(terms.total).item();
        if !value.is_finite() {
            return Err(Error::Contract(format!("non-finite loss {value} at example {index}")));
        }
        g.backward(terms.total)?;
        Ok((value, g, p))
    }

    fn run_epoch(&mut self, stage: u8, epoch: usize) -> Result<()> {
        let start = Instant::now();
        self.sgd.learning_rate = self.config.sgd.learning_rate_for(stage);
        if stage == 2 {
            self.feature_cache()?;
        } else {
            self.cache = None;
        }
        let mut rng = epoch_rng(self.config.sgd.seed, stage, epoch);
        let batches = iterate_minibatches(self.examples.len(), self.config.sgd.batch_size, Some(&mut rng));
        let mut total = 0.0;
        for batch in batches {
            self.model.store.zero_grads();
            for &i in &batch {
                let (value, g, p) = self.example_loss(i, stage, &mut rng)?;
                self.model.store.accumulate(&g, &p);
                total += value;
            }
            self.model.store.scale_grads(1.0 / batch.len() as f64);
            self.sgd.step(&mut self.model.store, |grp| trainable(stage, grp))?;
        }
        self.model.store.zero_grads();
        let cache = if stage == 2 { self.cache.clone() } else { None };
        let report = evaluate(&self.model, self.examples, head_for(stage), &self.config.loss, cache.as_deref())?;
        self.position = Position { stage, epoch };
        self.log.push(EpochRecord {
            stage,
            epoch,
            loss: total / self.examples.len() as f64,
            accuracy: report.accuracy,
            mean_ldiv: report.mean_ldiv,
            mean_overlap: report.mean_overlap,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        Ok(())
    }

    /// Parameters, optimizer state and position as named tensors.
    pub fn checkpoint(&self) -> NamedTensors {
        let mut out: NamedTensors =
            self.model.store.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
        for (name, v) in self.sgd.export(&self.model.store) {
            out.push((format!("sgd/velocity/{name}"), Tensor::vector(v)));
        }
        out.push((
            "meta/position".into(),
            Tensor::vector(vec![self.position.stage as f64, self.position.epoch as f64]),
        ));
        out
    }

    /// Restores what [`Trainer::checkpoint`] saved.
    pub fn restore(&mut self, named: &NamedTensors) -> Result<()> {
        let (params, rest): (Vec<_>, Vec<_>) =
            named.iter().cloned().partition(|(n, _)| !n.starts_with("sgd/") && !n.starts_with("meta/"));
        restore_params(&mut self.model, &params)?;
        let velocities: Vec<(String, Vec<f64>)> = rest
            .iter()
            .filter_map(|(n, t)| n.strip_prefix("sgd/velocity/").map(|n| (n.to_string(), t.data().to_vec())))
            .collect();
        self.sgd.import(&self.model.store, &velocities)?;
        if let Some((_, pos)) = rest.iter().find(|(n, _)| n == "meta/position") {
            let d = pos.data();
            if d.len() != 2 {
                return Err(Error::Input("malformed meta/position".into()));
            }
            self.position = Position { stage: d[0] as u8, epoch: d[1] as usize };
        }
        self.cache = None;
        Ok(())
    }
}

/// Loads parameter values by name; every model parameter must be present.
pub fn restore_params(model: &mut DvanModel, named: &NamedTensors) -> Result<()> {
    for p in model.store.iter() {
        if !named.iter().any(|(n, _)| n == &p.name) {
            return Err(Error::Input(format!("checkpoint lacks parameter {}", p.name)));
        }
    }
    model.store.load_values(named)
}

/// Canvas geometry for an image of the given size.
pub fn frames(plan: &CanvasPlan, height: usize, width: usize) -> Result<Vec<Canvas>> {
    let image = Tensor::zeros(&[1, height, width]);
    let small = CanvasPlan { output_size: 1, ..plan.clone() };
    Ok(frames_of(&crate::canvas::generate_canvases(&image, &small)?))
}
