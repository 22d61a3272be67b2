//! Flat `key = value` run configuration.
//!
//! Every key has a default; a config file and `--set key=value` overrides are
//! layered on top. [`RunConfig::to_text`] writes back every key, so the saved
//! file reproduces the run on its own.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{BackboneConfig, ConvBlock};
use crate::canvas::{CanvasPlan, Scale};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::experiment::{ExperimentConfig, VariantSpec};
use crate::loss::LossConfig;
use crate::model::{ModelConfig, Variant};
use crate::optim::SgdConfig;
use crate::train::TrainConfig;

/// Name of the resolved config inside a run directory.
pub const RESOLVED_NAME: &str = "config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
    pub lambdas: Vec<f64>,
    pub scales: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub variant: Variant,
    pub hidden: usize,
    pub data: SyntheticSpec,
    /// Real-image manifests; when set they replace the synthetic splits.
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Every available scale; runs use the `scales` coarsest.
    pub canvas: CanvasPlan,
    pub scales: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    pub loss: LossConfig,
    pub sgd: SgdConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            variant: Variant::Dvan,
            hidden: 32,
            data: SyntheticSpec::default(),
            train_manifest: None,
            test_manifest: None,
            canvas: CanvasPlan::desk(32),
            scales: 2,
            channels: vec![8, 16],
            kernel: 3,
            pool: 2,
            loss: LossConfig::default(),
            sgd: SgdConfig {
                learning_rate: 0.005,
                stage_learning_rates: [None, Some(0.003), None],
                epochs: [4, 30, 0],
                ..SgdConfig::training()
            },
            ablate: AblateConfig {
                variants: vec![
                    Variant::SingleImage,
                    Variant::MultiCanvas,
                    Variant::DvanAvg,
                    Variant::DvanMax,
                    Variant::Dvan,
                ],
                lambdas: vec![0.0, 0.5, 1.0, 2.0, 10.0],
                scales: vec![1, 2, 3],
                seeds: vec![0, 1, 2],
            },
        }
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_one<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|v| parse_one(key, v)).collect()
}

fn opt_path(raw: &str) -> Option<PathBuf> {
    let raw = raw.trim();
    (!raw.is_empty()).then(|| PathBuf::from(raw))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Every key with its current value, in a stable order.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let d = &self.data;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("variant", self.variant.name().to_string());
        put("hidden", self.hidden.to_string());
        put("data.image_size", d.image_size.to_string());
        put("data.classes", d.classes.to_string());
        put("data.slots", d.slots.to_string());
        put("data.glyph_size", d.glyph_size.to_string());
        put("data.body_radius", d.body_radius.to_string());
        put("data.clutter", d.clutter.to_string());
        put("data.decoys", d.decoys.to_string());
        put("data.body_decoys", d.body_decoys.to_string());
        put("data.jitter", d.jitter.to_string());
        put("data.noise", d.noise.to_string());
        put("data.train_per_class", d.train_per_class.to_string());
        put("data.test_per_class", d.test_per_class.to_string());
        put("data.train_manifest", path_text(&self.train_manifest));
        put("data.test_manifest", path_text(&self.test_manifest));
        put("canvas.short_edge", self.canvas.normalized_short_edge.to_string());
        put("canvas.windows", join(&self.canvas.scales.iter().map(|s| s.window).collect::<Vec<_>>()));
        put("canvas.strides", join(&self.canvas.scales.iter().map(|s| s.stride).collect::<Vec<_>>()));
        put("canvas.output_size", self.canvas.output_size.to_string());
        put("canvas.center_per_scale", self.canvas.include_center_per_scale.to_string());
        put("canvas.scales", self.scales.to_string());
        put("backbone.channels", join(&self.channels));
        put("backbone.kernel", self.kernel.to_string());
        put("backbone.pool", self.pool.to_string());
        put("loss.lambda", self.loss.lambda.to_string());
        put("loss.beta", self.loss.beta.to_string());
        put("loss.mass_threshold", self.loss.mass_threshold.to_string());
        put("sgd.learning_rate", self.sgd.learning_rate.to_string());
        put(
            "sgd.stage_learning_rates",
            self.sgd
                .stage_learning_rates
                .iter()
                .map(|v| v.map(|v| v.to_string()).unwrap_or_else(|| "-".into()))
                .collect::<Vec<_>>()
                .join(","),
        );
        put("sgd.momentum", self.sgd.momentum.to_string());
        put("sgd.epochs", join(&self.sgd.epochs));
        put("sgd.batch_size", self.sgd.batch_size.to_string());
        put("ablate.variants", self.ablate.variants.iter().map(|v| v.name()).collect::<Vec<_>>().join(","));
        put("ablate.lambdas", join(&self.ablate.lambdas));
        put("ablate.scales", join(&self.ablate.scales));
        put("ablate.seeds", join(&self.ablate.seeds));
        m
    }

    /// Applies `key = value` pairs; unknown keys are rejected.
    pub fn apply(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        let mut m = self.to_pairs();
        for (k, v) in pairs {
            if !m.contains_key(k) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
            m.insert(k.clone(), v.clone());
        }
        *self = Self::from_pairs(&m)?;
        Ok(())
    }

    fn from_pairs(m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| m[k].as_str();
        let seed: u64 = parse_one("seed", get("seed"))?;
        let windows: Vec<usize> = parse_list("canvas.windows", get("canvas.windows"))?;
        let strides: Vec<usize> = parse_list("canvas.strides", get("canvas.strides"))?;
        if windows.len() != strides.len() {
            return Err(Error::Config(format!(
                "canvas.windows has {} entries but canvas.strides has {}",
                windows.len(),
                strides.len()
            )));
        }
        let stage_lr: Vec<Option<f64>> = get("sgd.stage_learning_rates")
            .split(',')
            .map(|v| match v.trim() {
                "-" | "" => Ok(None),
                v => parse_one("sgd.stage_learning_rates", v).map(Some),
            })
            .collect::<Result<_>>()?;
        let epochs: Vec<usize> = parse_list("sgd.epochs", get("sgd.epochs"))?;
        let stage_learning_rates: [Option<f64>; 3] = stage_lr
            .try_into()
            .map_err(|_| Error::Config("sgd.stage_learning_rates needs three entries".into()))?;
        let epochs: [usize; 3] =
            epochs.try_into().map_err(|_| Error::Config("sgd.epochs needs three entries".into()))?;
        let parse_variant = |key: &str, raw: &str| {
            Variant::parse(raw.trim()).ok_or_else(|| Error::Config(format!("{key}: unknown variant {raw:?}")))
        };
        Ok(Self {
            seed,
            out_dir: PathBuf::from(get("out_dir")),
            variant: parse_variant("variant", get("variant"))?,
            hidden: parse_one("hidden", get("hidden"))?,
            data: SyntheticSpec {
                image_size: parse_one("data.image_size", get("data.image_size"))?,
                classes: parse_one("data.classes", get("data.classes"))?,
                slots: parse_one("data.slots", get("data.slots"))?,
                glyph_size: parse_one("data.glyph_size", get("data.glyph_size"))?,
                body_radius: parse_one("data.body_radius", get("data.body_radius"))?,
                clutter: parse_one("data.clutter", get("data.clutter"))?,
                decoys: parse_one("data.decoys", get("data.decoys"))?,
                body_decoys: parse_one("data.body_decoys", get("data.body_decoys"))?,
                jitter: parse_one("data.jitter", get("data.jitter"))?,
                noise: parse_one("data.noise", get("data.noise"))?,
                train_per_class: parse_one("data.train_per_class", get("data.train_per_class"))?,
                test_per_class: parse_one("data.test_per_class", get("data.test_per_class"))?,
                seed,
            },
            train_manifest: opt_path(get("data.train_manifest")),
            test_manifest: opt_path(get("data.test_manifest")),
            scales: parse_one("canvas.scales", get("canvas.scales"))?,
            canvas: CanvasPlan {
                normalized_short_edge: parse_one("canvas.short_edge", get("canvas.short_edge"))?,
                scales: windows.into_iter().zip(strides).map(|(window, stride)| Scale { window, stride }).collect(),
                output_size: parse_one("canvas.output_size", get("canvas.output_size"))?,
                include_center_per_scale: parse_one("canvas.center_per_scale", get("canvas.center_per_scale"))?,
            },
            channels: parse_list("backbone.channels", get("backbone.channels"))?,
            kernel: parse_one("backbone.kernel", get("backbone.kernel"))?,
            pool: parse_one("backbone.pool", get("backbone.pool"))?,
            loss: LossConfig {
                lambda: parse_one("loss.lambda", get("loss.lambda"))?,
                beta: parse_one("loss.beta", get("loss.beta"))?,
                mass_threshold: parse_one("loss.mass_threshold", get("loss.mass_threshold"))?,
            },
            sgd: SgdConfig {
                learning_rate: parse_one("sgd.learning_rate", get("sgd.learning_rate"))?,
                stage_learning_rates,
                momentum: parse_one("sgd.momentum", get("sgd.momentum"))?,
                epochs,
                batch_size: parse_one("sgd.batch_size", get("sgd.batch_size"))?,
                seed,
            },
            ablate: AblateConfig {
                variants: get("ablate.variants")
                    .split(',')
                    .filter(|v| !v.trim().is_empty())
                    .map(|v| parse_variant("ablate.variants", v))
                    .collect::<Result<_>>()?,
                lambdas: parse_list("ablate.lambdas", get("ablate.lambdas"))?,
                scales: parse_list("ablate.scales", get("ablate.scales"))?,
                seeds: parse_list("ablate.seeds", get("ablate.seeds"))?,
            },
        })
    }

    /// Defaults, then the file (if any), then overrides; validated.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply(&parse_text(&text)?)?;
        }
        let mut pairs = BTreeMap::new();
        for o in overrides {
            let (k, v) = split_pair(o).ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            pairs.insert(k, v);
        }
        cfg.apply(&pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            input_size: self.canvas.output_size,
            in_channels: 3,
            blocks: self.channels.iter().map(|&c| ConvBlock::new(c, self.kernel, 1, self.pool)).collect(),
        }
    }

    /// The canvas plan of a run: the `scales` coarsest scales.
    pub fn plan(&self) -> CanvasPlan {
        self.canvas.clone().with_scale_count(self.scales)
    }

    pub fn model(&self) -> ModelConfig {
        self.model_for(self.variant)
    }

    pub fn model_for(&self, variant: Variant) -> ModelConfig {
        ModelConfig {
            plan: self.plan(),
            backbone: self.backbone(),
            hidden: self.hidden,
            classes: self.data.classes,
            variant,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig { loss: self.loss, sgd: self.sgd.clone() }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        let model = ModelConfig { plan: self.canvas.clone(), ..self.model() };
        ExperimentConfig { data: self.data.clone(), model, train: self.train() }
    }

    /// Rows of the ablation table: variants at the configured λ and scale
    /// count, then DVAN over the λ sweep, then DVAN over the scale sweep.
    pub fn ablation_variants(&self) -> Vec<VariantSpec> {
        let scales = self.scales;
        let mut out: Vec<VariantSpec> =
            self.ablate.variants.iter().map(|&v| VariantSpec::new(v, self.loss.lambda, scales)).collect();
        for &l in &self.ablate.lambdas {
            out.push(VariantSpec::new(Variant::Dvan, l, scales).named(format!("dvan-lambda-{l}")));
        }
        for &s in &self.ablate.scales {
            out.push(VariantSpec::new(Variant::Dvan, self.loss.lambda, s).named(format!("dvan-scales-{s}")));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden must be positive".into()));
        }
        if self.data.classes == 0 {
            return Err(Error::Config("data.classes must be positive".into()));
        }
        if self.train_manifest.is_some() != self.test_manifest.is_some() {
            return Err(Error::Config("set both data.train_manifest and data.test_manifest, or neither".into()));
        }
        self.data.validate()?;
        self.loss.validate()?;
        self.sgd.validate()?;
        self.canvas.validate()?;
        if self.scales == 0 || self.scales > self.canvas.scales.len() {
            return Err(Error::Config(format!("canvas.scales {} outside 1..={}", self.scales, self.canvas.scales.len())));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("backbone.channels needs positive entries".into()));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) || self.pool == 0 {
            return Err(Error::Config("backbone.kernel must be odd and backbone.pool positive".into()));
        }
        self.model().validate()?;
        for &s in &self.ablate.scales {
            if s == 0 || s > self.canvas.scales.len() {
                return Err(Error::Config(format!(
                    "ablate.scales entry {s} outside 1..={}",
                    self.canvas.scales.len()
                )));
            }
        }
        for &l in &self.ablate.lambdas {
            LossConfig { lambda: l, ..self.loss }.validate()?;
        }
        Ok(())
    }
}

fn split_pair(line: &str) -> Option<(String, String)> {
    let (k, v) = line.split_once('=')?;
    let k = k.trim();
    (!k.is_empty()).then(|| (k.to_string(), v.trim().to_string()))
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = split_pair(line).ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        if out.insert(k.clone(), v).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
    }
    Ok(out)
}
