//! LSTM-driven soft attention over a sequence of feature maps.
//!
//! At each step the previous hidden state and the current feature map score
//! every spatial location; the softmax of those scores pools the feature map
//! into one vector, which the LSTM integrates. A shared linear head turns
//! `tanh(h_t)` into class probabilities and the final prediction averages them
//! over all steps.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{fan_in_uniform, Bindings, ParamGroup, ParamId, ParamStore};
use crate::tensor::{argmax, Tensor};

/// How a feature map is reduced to the LSTM input at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Learned soft attention.
    Attention,
    /// Spatial mean of the feature map.
    Average,
    /// Per-channel spatial maximum.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    /// `K`: feature maps are `K×K`.
    pub feature_side: usize,
    /// `D`: feature channels.
    pub feature_dim: usize,
    /// `d`: LSTM state size.
    pub hidden: usize,
    /// `C`: class count.
    pub classes: usize,
    pub pooling: Pooling,
}

impl AttentionConfig {
    pub fn locations(&self) -> usize {
        self.feature_side * self.feature_side
    }
}

/// Affine map `x[in] → x·W + b`, `W` stored `in×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}/weight"),
            group,
            fan_in_uniform(&[inputs, outputs], inputs, rng),
        );
        let bias = store.add(format!("{name}/bias"), group, Tensor::zeros(&[outputs]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let y = g.vecmat(x, p.var(self.weight))?;
        g.add(y, p.var(self.bias))
    }
}

/// One tanh hidden layer followed by a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.tanh(h);
        self.output.forward(g, p, h)
    }
}

/// Gate transformation `M: R^(d+D) → R^(4d)` plus bias; gate blocks ordered `i, f, o, g`.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
    pub input: usize,
}

/// Location-score weights: column `i` of `w_h` (`d×K²`) and of `w_x` (`D×K²`) score location `i`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_h: ParamId,
    pub w_x: ParamId,
    pub bias: ParamId,
}

/// Graph handles produced by one time step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    /// Attention map `l_t` over `K²` locations; absent for max pooling.
    pub attention: Option<Var>,
    pub pooled: Var,
    pub cell: Var,
    pub hidden: Var,
    pub logits: Var,
    pub probs: Var,
}

/// Values of one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub attention: Option<Tensor>,
    pub pooled: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

impl StepOutput {
    pub fn from_vars(g: &Graph, s: &StepVars) -> Self {
        Self {
            attention: s.attention.map(|v| g.value(v).clone()),
            pooled: g.value(s.pooled).clone(),
            logits: g.value(s.logits).clone(),
            probs: g.value(s.probs).clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionModel {
    pub config: AttentionConfig,
    pub lstm: LstmParams,
    /// Present only for [`Pooling::Attention`].
    pub scores: Option<AttentionParams>,
    pub init_cell: Mlp,
    pub init_hidden: Mlp,
    pub head: Linear,
}

fn mlp<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, width: usize, rng: &mut R) -> Mlp {
    Mlp {
        hidden: Linear::new(store, &format!("{name}/hidden"), ParamGroup::Attention, inputs, width, rng),
        output: Linear::new(store, &format!("{name}/output"), ParamGroup::Attention, width, width, rng),
    }
}

impl AttentionModel {
    pub fn new<R: Rng + ?Sized>(config: AttentionConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let AttentionConfig { feature_side, feature_dim, hidden, classes, .. } = config;
        if feature_side == 0 || feature_dim == 0 || hidden == 0 || classes < 2 {
            return Err(Error::Config(format!("invalid attention config {config:?}")));
        }
        let (d, dd) = (hidden, feature_dim);
        let group = ParamGroup::Attention;
        let weight = store.add(
            "attention/lstm/weight",
            group,
            fan_in_uniform(&[d + dd, 4 * d], d + dd, rng),
        );
        let mut b = Tensor::zeros(&[4 * d]);
        b.data_mut()[d..2 * d].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.add("attention/lstm/bias", group, b);
        let lstm = LstmParams { weight, bias, hidden: d, input: dd };

        let k2 = config.locations();
        let scores = (config.pooling == Pooling::Attention).then(|| AttentionParams {
            w_h: store.add("attention/score/w_h", group, fan_in_uniform(&[d, k2], d, rng)),
            w_x: store.add("attention/score/w_x", group, fan_in_uniform(&[dd, k2], dd, rng)),
            bias: store.add("attention/score/bias", group, Tensor::zeros(&[k2])),
        });
        let init_cell = mlp(store, "attention/init_c", dd, d, rng);
        let init_hidden = mlp(store, "attention/init_h", dd, d, rng);
        let head = Linear::new(store, "attention/head", group, d, classes, rng);
        Ok(Self { config, lstm, scores, init_cell, init_hidden, head })
    }

    fn check_features(&self, g: &Graph, x: Var) -> Result<()> {
        let c = &self.config;
        let want = [c.feature_dim, c.feature_side, c.feature_side];
        if g.shape(x) != want {
            return dim_err(format!("feature map {:?}, expected {want:?}", g.shape(x)));
        }
        Ok(())
    }

    /// Feature map as a `D×K²` matrix (column `i` is location `i`, row-major over the grid).
    fn as_locations(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_features(g, x)?;
        g.reshape(x, &[self.config.feature_dim, self.config.locations()])
    }

    /// `c_0, h_0` from the two MLPs applied to the mean feature vector over all steps and locations.
    pub fn init_states(&self, g: &mut Graph, p: &Bindings, features: &[Var]) -> Result<(Var, Var)> {
        if features.is_empty() {
            return Err(Error::Input("init_states needs at least one feature map".into()));
        }
        let mut total: Option<Var> = None;
        for &x in features {
            let m = self.as_locations(g, x)?;
            let s = g.sum_axis1(m)?;
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
        let n = (features.len() * self.config.locations()) as f64;
        let mean = g.scale(total.unwrap(), 1.0 / n);
        let c0 = self.init_cell.forward(g, p, mean)?;
        let h0 = self.init_hidden.forward(g, p, mean)?;
        Ok((c0, h0))
    }

    /// `l_t = softmax_i(W_{h,i}·h_prev + W_{x,i}·X_{t,i} + b_i)`.
    pub fn predict_attention(&self, g: &mut Graph, p: &Bindings, h_prev: Var, x: Var) -> Result<Var> {
        let scores = self
            .scores
            .as_ref()
            .ok_or_else(|| Error::Contract("model was built without attention scores".into()))?;
        if g.value(h_prev).numel() != self.config.hidden {
            return dim_err("hidden state size does not match the model");
        }
        let locs = self.as_locations(g, x)?;
        let from_h = g.vecmat(h_prev, p.var(scores.w_h))?;
        let weighted = g.mul(locs, p.var(scores.w_x))?;
        let from_x = g.sum_axis0(weighted)?;
        let s = g.add(from_h, from_x)?;
        let s = g.add(s, p.var(scores.bias))?;
        g.softmax(s)
    }

    /// `x_t = Σ_i l_{t,i} X_{t,i}`.
    pub fn attentive_pool(&self, g: &mut Graph, attention: Var, x: Var) -> Result<Var> {
        let total: f64 = g.data(attention).iter().sum();
        if (total - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!("attention map sums to {total}")));
        }
        let locs = self.as_locations(g, x)?;
        let k2 = self.config.locations();
        if g.value(attention).numel() != k2 {
            return dim_err("attention map size does not match the feature map");
        }
        let col = g.reshape(attention, &[k2, 1])?;
        let pooled = g.matmul(locs, col)?;
        g.reshape(pooled, &[self.config.feature_dim])
    }

    /// Spatial mean of the feature map.
    pub fn average_pool(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let locs = self.as_locations(g, x)?;
        let s = g.sum_axis1(locs)?;
        Ok(g.scale(s, 1.0 / self.config.locations() as f64))
    }

    /// Per-channel spatial maximum.
    pub fn max_pool(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let locs = self.as_locations(g, x)?;
        g.max_axis1(locs)
    }

    /// One LSTM update; returns `(c_t, h_t)`.
    pub fn lstm_step(&self, g: &mut Graph, p: &Bindings, x: Var, c_prev: Var, h_prev: Var) -> Result<(Var, Var)> {
        let d = self.lstm.hidden;
        if g.value(x).numel() != self.lstm.input
            || g.value(c_prev).numel() != d
            || g.value(h_prev).numel() != d
        {
            return dim_err("lstm_step operand sizes do not match the model");
        }
        let joint = g.concat(&[h_prev, x])?;
        let z = g.vecmat(joint, p.var(self.lstm.weight))?;
        let z = g.add(z, p.var(self.lstm.bias))?;
        let zi = g.slice(z, 0, d)?;
        let zf = g.slice(z, d, d)?;
        let zo = g.slice(z, 2 * d, d)?;
        let zg = g.slice(z, 3 * d, d)?;
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let o = g.sigmoid(zo);
        let cand = g.tanh(zg);
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((c, h))
    }

    /// `logits = tanh(h_t)·W + b`, `ŷ_t = softmax(logits)`.
    pub fn classify_step(&self, g: &mut Graph, p: &Bindings, h: Var) -> Result<(Var, Var)> {
        let th = g.tanh(h);
        let logits = self.head.forward(g, p, th)?;
        let probs = g.softmax(logits)?;
        Ok((logits, probs))
    }

    /// Reduces one feature map to the LSTM input according to the pooling mode.
    fn pool(&self, g: &mut Graph, p: &Bindings, h_prev: Var, x: Var) -> Result<(Option<Var>, Var)> {
        match self.config.pooling {
            Pooling::Attention => {
                let l = self.predict_attention(g, p, h_prev, x)?;
                let pooled = self.attentive_pool(g, l, x)?;
                Ok((Some(l), pooled))
            }
            Pooling::Average => {
                let pooled = self.average_pool(g, x)?;
                let k2 = self.config.locations();
                let l = g.constant(Tensor::full(&[k2], 1.0 / k2 as f64));
                Ok((Some(l), pooled))
            }
            Pooling::Max => Ok((None, self.max_pool(g, x)?)),
        }
    }

    /// Runs the full sequence: state initialisation, then pool → LSTM → classify per step.
    pub fn forward_sequence(&self, g: &mut Graph, p: &Bindings, features: &[Var]) -> Result<Vec<StepVars>> {
        let (mut c, mut h) = self.init_states(g, p, features)?;
        let mut out = Vec::with_capacity(features.len());
        for &x in features {
            let (attention, pooled) = self.pool(g, p, h, x)?;
            let (c_t, h_t) = self.lstm_step(g, p, pooled, c, h)?;
            let (logits, probs) = self.classify_step(g, p, h_t)?;
            out.push(StepVars { attention, pooled, cell: c_t, hidden: h_t, logits, probs });
            c = c_t;
            h = h_t;
        }
        Ok(out)
    }

    /// Convenience forward over plain feature maps, without gradients.
    pub fn run(&self, store: &ParamStore, features: &[Tensor]) -> Result<Vec<StepOutput>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let vars: Vec<Var> = features.iter().map(|f| g.constant(f.clone())).collect();
        let steps = self.forward_sequence(&mut g, &p, &vars)?;
        Ok(steps.iter().map(|s| StepOutput::from_vars(&g, s)).collect())
    }
}

/// Mean of the per-step class distributions.
pub fn aggregate_prediction(step_probs: &[&[f64]]) -> Result<Vec<f64>> {
    let Some(first) = step_probs.first() else {
        return Err(Error::Input("no time steps to aggregate".into()));
    };
    let mut mean = vec![0.0; first.len()];
    for p in step_probs {
        if p.len() != mean.len() {
            return dim_err("step distributions differ in length");
        }
        mean.iter_mut().zip(*p).for_each(|(m, v)| *m += v);
    }
    let t = step_probs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= t);
    Ok(mean)
}

/// Aggregated distribution and its arg-max (lowest index on ties).
pub fn predict(outputs: &[StepOutput]) -> Result<(Vec<f64>, usize)> {
    let probs: Vec<&[f64]> = outputs.iter().map(|o| o.probs.data()).collect();
    let mean = aggregate_prediction(&probs)?;
    let class = argmax(&mean);
    Ok((mean, class))
}
