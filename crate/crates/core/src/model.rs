//! Full classifier: canvases → backbone → attention LSTM (or a per-canvas head).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, AttentionModel, Linear, Pooling, StepVars};
use crate::backbone::{Backbone, BackboneConfig};
use crate::canvas::{generate_canvases, normalize_image, Canvas, CanvasPlan, Scale};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bindings, ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Dvan,
    DvanAvg,
    DvanMax,
    /// Per-canvas classifier, predictions averaged over canvases.
    MultiCanvas,
    /// Per-canvas classifier on a single whole-image canvas.
    SingleImage,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::SingleImage, Variant::MultiCanvas, Variant::DvanAvg, Variant::DvanMax, Variant::Dvan];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dvan => "dvan",
            Variant::DvanAvg => "dvan-avg",
            Variant::DvanMax => "dvan-max",
            Variant::MultiCanvas => "multi-canvas",
            Variant::SingleImage => "single-image",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn pooling(self) -> Option<Pooling> {
        match self {
            Variant::Dvan => Some(Pooling::Attention),
            Variant::DvanAvg => Some(Pooling::Average),
            Variant::DvanMax => Some(Pooling::Max),
            Variant::MultiCanvas | Variant::SingleImage => None,
        }
    }

    pub fn uses_attention(self) -> bool {
        self.pooling().is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub plan: CanvasPlan,
    pub backbone: BackboneConfig,
    /// LSTM state size.
    pub hidden: usize,
    pub classes: usize,
    pub variant: Variant,
}

impl ModelConfig {
    /// The canvas plan actually used: one whole-image canvas for [`Variant::SingleImage`].
    pub fn effective_plan(&self) -> CanvasPlan {
        if self.variant == Variant::SingleImage {
            let edge = self.plan.normalized_short_edge;
            CanvasPlan {
                scales: vec![Scale { window: edge, stride: edge }],
                include_center_per_scale: false,
                ..self.plan.clone()
            }
        } else {
            self.plan.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        if self.backbone.input_size != self.plan.output_size {
            return Err(Error::Config(format!(
                "canvas output size {} differs from backbone input {}",
                self.plan.output_size, self.backbone.input_size
            )));
        }
        self.backbone.output_dims()?;
        Ok(())
    }
}

/// Which classifier produces the prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Per-canvas `GAP → FC → ReLU → FC` head.
    Canvas,
    Attention,
}

/// Pixel scale divisor for backbone inputs.
pub const INPUT_SPREAD: f64 = 0.25;

/// `GAP → Linear(D→C) → softmax`.
#[derive(Debug, Clone)]
pub struct CanvasHead {
    pub output: Linear,
}

impl CanvasHead {
    pub fn forward(&self, g: &mut Graph, p: &Bindings, features: Var) -> Result<Var> {
        let shape = g.shape(features).to_vec();
        let [d, k, k2] = shape[..] else {
            return Err(Error::Dimension(format!("feature map of shape {shape:?}")));
        };
        let m = g.reshape(features, &[d, k * k2])?;
        let s = g.sum_axis1(m)?;
        let gap = g.scale(s, 1.0 / (k * k2) as f64);
        let logits = self.output.forward(g, p, gap)?;
        g.softmax(logits)
    }
}

/// Graph outputs of one image.
#[derive(Debug, Clone)]
pub struct Forward {
    pub step_probs: Vec<Var>,
    /// Attention maps, when the pooling mode has them.
    pub maps: Option<Vec<Var>>,
    pub steps: Option<Vec<StepVars>>,
}

#[derive(Debug, Clone)]
pub struct DvanModel {
    pub config: ModelConfig,
    pub plan: CanvasPlan,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub canvas_head: CanvasHead,
    pub attention: Option<AttentionModel>,
}

/// Independent initialisation stream per component, so variants sharing a seed share weights.
fn init_rng(seed: u64, component: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(component);
    rng
}

impl DvanModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(config.backbone.clone(), &mut store, &mut init_rng(seed, 1))?;
        let (k, d) = (backbone.feature_side(), backbone.feature_dim());
        let mut rng = init_rng(seed, 2);
        let canvas_head = CanvasHead {
            output: Linear::new(&mut store, "canvas_head/output", ParamGroup::CanvasHead, d, config.classes, &mut rng),
        };
        let attention = match config.variant.pooling() {
            Some(pooling) => Some(AttentionModel::new(
                AttentionConfig { feature_side: k, feature_dim: d, hidden: config.hidden, classes: config.classes, pooling },
                &mut store,
                &mut init_rng(seed, 3),
            )?),
            None => None,
        };
        let plan = config.effective_plan();
        Ok(Self { config, plan, store, backbone, canvas_head, attention })
    }

    /// Head used for predictions once training is complete.
    pub fn final_head(&self) -> Head {
        if self.attention.is_some() {
            Head::Attention
        } else {
            Head::Canvas
        }
    }

    /// Normalizes `image` and cuts its canvas sequence.
    pub fn canvases(&self, image: &Tensor) -> Result<Vec<Canvas>> {
        let normalized = normalize_image(image, self.plan.normalized_short_edge)?;
        generate_canvases(&normalized, &self.plan)
    }

    /// Backbone input for a canvas: pixels centred at 0.5 and scaled to roughly unit spread.
    pub fn canvas_input(canvas: &Canvas) -> Tensor {
        let mut t = canvas.pixels.clone();
        t.data_mut().iter_mut().for_each(|v| *v = (*v - 0.5) / INPUT_SPREAD);
        t
    }

    pub fn features(&self, g: &mut Graph, p: &Bindings, canvases: &[&Canvas]) -> Result<Vec<Var>> {
        canvases
            .iter()
            .map(|c| {
                let x = g.constant(Self::canvas_input(c));
                self.backbone.forward(g, p, x)
            })
            .collect()
    }

    /// Feature maps without gradient tracking.
    pub fn extract_features(&self, canvases: &[Canvas]) -> Result<Vec<Tensor>> {
        canvases
            .iter()
            .map(|c| {
                let mut g = Graph::new();
                g.set_finite_check(false);
                let p = self.store.bind(&mut g, |_| false);
                let x = g.constant(Self::canvas_input(c));
                let y = self.backbone.forward(&mut g, &p, x)?;
                Ok(g.value(y).clone())
            })
            .collect()
    }

    /// Class distributions per step from already computed feature maps.
    pub fn forward_features(&self, g: &mut Graph, p: &Bindings, features: &[Var], head: Head) -> Result<Forward> {
        match head {
            Head::Canvas => {
                let step_probs = features
                    .iter()
                    .map(|&f| self.canvas_head.forward(g, p, f))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Forward { step_probs, maps: None, steps: None })
            }
            Head::Attention => {
                let att = self
                    .attention
                    .as_ref()
                    .ok_or_else(|| Error::Contract("variant has no attention model".into()))?;
                let steps = att.forward_sequence(g, p, features)?;
                let step_probs = steps.iter().map(|s| s.probs).collect();
                let maps = steps.iter().map(|s| s.attention).collect::<Option<Vec<_>>>();
                Ok(Forward { step_probs, maps, steps: Some(steps) })
            }
        }
    }
}
