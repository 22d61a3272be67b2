//! Variant comparisons under a shared seed and budget.
//!
//! Variants on the same canvas plan start from one stage-1 run: stage 1 does
//! not depend on the pooling mode or on λ, so training it once per plan gives
//! the same weights every variant would have reached on its own.

use std::rc::Rc;

use crate::canvas::CanvasPlan;
use crate::data::{generate_synthetic, Dataset, SyntheticSpec};
use crate::error::Result;
use crate::model::{DvanModel, ModelConfig, Variant};
use crate::params::ParamGroup;
use crate::train::{evaluate, EpochRecord, EvalReport, FeatureCache, Position, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: SyntheticSpec,
    /// Variant field is ignored; each [`VariantSpec`] sets its own.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSpec {
    pub name: String,
    pub variant: Variant,
    pub lambda: f64,
    /// Number of canvas scales, coarsest first.
    pub scales: usize,
}

impl VariantSpec {
    pub fn new(variant: Variant, lambda: f64, scales: usize) -> Self {
        Self { name: variant.name().to_string(), variant, lambda, scales }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub name: String,
    pub seed: u64,
    pub test: EvalReport,
    pub log: Vec<EpochRecord>,
    pub model: DvanModel,
}

fn plan_for(base: &CanvasPlan, scales: usize) -> CanvasPlan {
    base.clone().with_scale_count(scales)
}

/// Trains and tests every variant for one seed. `progress` receives each finished result.
pub fn run_seed(
    cfg: &ExperimentConfig,
    variants: &[VariantSpec],
    seed: u64,
    mut progress: impl FnMut(&VariantResult),
) -> Result<Vec<VariantResult>> {
    let data = generate_synthetic(&SyntheticSpec { seed, ..cfg.data.clone() })?;
    let mut results: Vec<Option<VariantResult>> = vec![None; variants.len()];
    let mut train_cfg = cfg.train.clone();
    train_cfg.sgd.seed = seed;
    let [e1, _, e3] = train_cfg.sgd.epochs;

    let mut groups: Vec<(usize, bool)> = Vec::new();
    for v in variants {
        let key = (v.scales, v.variant == Variant::SingleImage);
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    for (scales, single) in groups {
        let members: Vec<usize> = (0..variants.len())
            .filter(|&i| variants[i].scales == scales && (variants[i].variant == Variant::SingleImage) == single)
            .collect();
        let plan = plan_for(&cfg.model.plan, scales);
        let base_variant = if single { Variant::SingleImage } else { Variant::MultiCanvas };
        let base_cfg = ModelConfig { plan: plan.clone(), variant: base_variant, ..cfg.model.clone() };
        let mut base = Trainer::new(DvanModel::new(base_cfg, seed)?, &data.train, train_cfg.clone())?;
        base.run_stage(1, e1)?;
        let snapshot: Vec<(String, crate::tensor::Tensor)> = base
            .model
            .store
            .iter()
            .filter(|p| p.group != ParamGroup::Attention)
            .map(|p| (p.name.clone(), p.tensor.clone()))
            .collect();
        let snapshot_log = base.log.clone();
        let attention_members: Vec<usize> =
            members.iter().copied().filter(|&i| variants[i].variant.uses_attention()).collect();

        if !attention_members.is_empty() {
            let train_cache = Rc::new(FeatureCache::build(&base.model, &data.train)?);
            let test_cache = if e3 == 0 { Some(FeatureCache::build(&base.model, &data.test)?) } else { None };
            for (n, &i) in attention_members.iter().enumerate() {
                let spec = &variants[i];
                let twin = attention_members[..n]
                    .iter()
                    .copied()
                    .find(|&j| variants[j].variant == spec.variant && variants[j].lambda == spec.lambda);
                if let Some(j) = twin {
                    let mut r = results[j].clone().expect("earlier variant ran");
                    r.name = spec.name.clone();
                    progress(&r);
                    results[i] = Some(r);
                    continue;
                }
                let model_cfg = ModelConfig { plan: plan.clone(), variant: spec.variant, ..cfg.model.clone() };
                let mut model = DvanModel::new(model_cfg, seed)?;
                model.store.load_values(&snapshot)?;
                let mut tcfg = train_cfg.clone();
                tcfg.loss.lambda = spec.lambda;
                let mut t = Trainer::new(model, &data.train, tcfg)?;
                t.position = Position { stage: 1, epoch: e1 };
                t.log = snapshot_log.clone();
                t.set_feature_cache(train_cache.clone());
                t.train(|_| Ok(()))?;
                let test = evaluate(&t.model, &data.test, t.model.final_head(), &t.config.loss, test_cache.as_ref())?;
                let r = VariantResult { name: spec.name.clone(), seed, test, log: t.log, model: t.model };
                progress(&r);
                results[i] = Some(r);
            }
        }
        let baselines: Vec<usize> =
            members.iter().copied().filter(|&i| !variants[i].variant.uses_attention()).collect();
        if !baselines.is_empty() {
            base.run_stage(1, e1 + e3)?;
            let test = evaluate(&base.model, &data.test, base.model.final_head(), &base.config.loss, None)?;
            for i in baselines {
                let r = VariantResult {
                    name: variants[i].name.clone(),
                    seed,
                    test: test.clone(),
                    log: base.log.clone(),
                    model: base.model.clone(),
                };
                progress(&r);
                results[i] = Some(r);
            }
        }
    }
    Ok(results.into_iter().map(|r| r.expect("every variant ran")).collect())
}

/// Convenience: the synthetic dataset an experiment sees for `seed`.
pub fn dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    generate_synthetic(&SyntheticSpec { seed, ..cfg.data.clone() })
}

/// Mean over seeds of a per-result statistic.
pub fn seed_mean(results: &[VariantResult], name: &str, stat: impl Fn(&VariantResult) -> f64) -> f64 {
    let values: Vec<f64> = results.iter().filter(|r| r.name == name).map(stat).collect();
    values.iter().sum::<f64>() / values.len() as f64
}
