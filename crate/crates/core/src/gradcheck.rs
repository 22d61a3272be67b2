//! Central finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, AttentionModel, Pooling};
use crate::backbone::{Backbone, BackboneConfig, ConvBlock};
use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::loss::{total_loss, LossConfig, PROB_FLOOR};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Outcome of checking one input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of scalar `f` at `point` with central differences.
///
/// `f` receives a fresh graph and the leaf holding the point, and must return
/// a scalar node.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    Ok(grad_check_detailed(f, point, eps, None)?.max_relative_error)
}

pub fn grad_check_detailed<F>(
    f: F,
    point: &Tensor,
    eps: f64,
    fault: Option<OpKind>,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    g.inject_fault(fault);
    let x = g.leaf(point.clone());
    let out = f(&mut g, x)?;
    g.backward(out)?;
    let analytic = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p.clone());
        let out = f(&mut g, x)?;
        Ok(g.value(out).item())
    };

    let mut numeric = Vec::with_capacity(point.numel());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }

    let (mut worst, mut worst_index) = (0.0, 0);
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(a, n);
        if e > worst {
            worst = e;
            worst_index = i;
        }
    }
    Ok(GradCheck {
        max_relative_error: worst,
        worst_index,
        analytic,
        numeric,
    })
}

/// One line of a gradient-check report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

type OpFn = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

/// Per-op checks at their tolerances. `fault` corrupts one backward rule.
pub fn op_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::uniform(shape, 1.0, &mut rng);
    let b53 = r(&[5, 3]);
    let k = r(&[2, 2, 3, 3]);
    let bias = r(&[2]);
    let other = r(&[6]);
    let w = r(&[4]);
    let cases: Vec<(&str, f64, Tensor, OpFn)> = vec![
        ("matmul", 1e-6, r(&[4, 5]), Box::new(move |g, x| {
            let b = g.constant(b53.clone());
            let m = g.matmul(x, b)?;
            Ok(g.sum(m))
        })),
        ("conv2d", 1e-5, r(&[2, 5, 5]), Box::new(move |g, x| {
            let k = g.constant(k.clone());
            let c = g.conv2d(x, k, 1, 1)?;
            let sq = g.mul(c, c)?;
            Ok(g.sum(sq))
        })),
        ("channel_bias", 1e-6, r(&[2, 3, 3]), Box::new(move |g, x| {
            let b = g.constant(bias.clone());
            let y = g.channel_bias(x, b)?;
            let t = g.tanh(y);
            Ok(g.sum(t))
        })),
        ("add_mul", 1e-6, r(&[6]), Box::new(move |g, x| {
            let o = g.constant(other.clone());
            let a = g.add(x, o)?;
            let m = g.mul(a, x)?;
            let s = g.scale(m, 0.7);
            Ok(g.sum(s))
        })),
        ("sigmoid", 1e-6, r(&[6]), Box::new(|g, x| {
            let y = g.sigmoid(x);
            g.dot(y, y)
        })),
        ("tanh", 1e-6, r(&[6]), Box::new(|g, x| {
            let y = g.tanh(x);
            g.dot(y, y)
        })),
        ("relu", 1e-6, r(&[6]), Box::new(|g, x| {
            let y = g.relu(x);
            g.dot(y, y)
        })),
        ("softmax", 1e-6, r(&[5]), Box::new(move |g, x| {
            let p = g.softmax(x)?;
            let w = g.constant(Tensor::vector(vec![0.3, -1.0, 2.0, 0.5, 1.5]));
            g.dot(p, w)
        })),
        ("max_pool2d", 1e-6, r(&[2, 4, 4]), Box::new(|g, x| {
            let y = g.max_pool2d(x, 2)?;
            g.dot(y, y)
        })),
        ("sum_axes", 1e-6, r(&[3, 4]), Box::new(|g, x| {
            let a = g.sum_axis0(x)?;
            let b = g.sum_axis1(x)?;
            let aa = g.dot(a, a)?;
            let bb = g.dot(b, b)?;
            g.add(aa, bb)
        })),
        ("max_axis1", 1e-6, r(&[3, 4]), Box::new(|g, x| {
            let m = g.max_axis1(x)?;
            g.dot(m, m)
        })),
        ("slice_concat_reshape", 1e-6, r(&[6]), Box::new(move |g, x| {
            let a = g.slice(x, 0, 2)?;
            let b = g.slice(x, 3, 3)?;
            let c = g.concat(&[b, a])?;
            let m = g.reshape(c, &[5])?;
            let t = g.tanh(m);
            let w5 = g.constant(Tensor::vector(w.data().iter().copied().chain([0.2]).collect()));
            g.dot(t, w5)
        })),
        ("neg_log_pick", 1e-6, r(&[4]), Box::new(|g, x| {
            let p = g.softmax(x)?;
            g.neg_log_pick(p, 2, PROB_FLOOR)
        })),
    ];
    cases
        .into_iter()
        .map(|(name, tolerance, point, f)| {
            let error = grad_check_detailed(f, &point, 1e-6, fault)?.max_relative_error;
            Ok(CheckLine { name: name.to_string(), error, tolerance })
        })
        .collect()
}

/// End-to-end check of the full objective on the tiny configuration
/// (`K=2, D=3, d=4, C=2, T=3`): one line per parameter tensor plus one for
/// the input pixels.
pub fn tiny_model_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckLine>> {
    const TOLERANCE: f64 = 1e-4;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = Backbone::new(
        BackboneConfig { input_size: 8, in_channels: 3, blocks: vec![ConvBlock::new(3, 3, 1, 4)] },
        &mut store,
        &mut rng,
    )?;
    let attention = AttentionModel::new(
        AttentionConfig { feature_side: 2, feature_dim: 3, hidden: 4, classes: 2, pooling: Pooling::Attention },
        &mut store,
        &mut rng,
    )?;
    let pixels: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[3, 8, 8], 1.0, &mut rng)).collect();
    let loss = LossConfig::default();
    let objective = |g: &mut Graph, p: &crate::params::Bindings, first: Var| -> Result<Var> {
        let mut features = Vec::with_capacity(pixels.len());
        for (t, px) in pixels.iter().enumerate() {
            let x = if t == 0 { first } else { g.constant(px.clone()) };
            features.push(backbone.forward(g, p, x)?);
        }
        let steps = attention.forward_sequence(g, p, &features)?;
        let probs: Vec<Var> = steps.iter().map(|s| s.probs).collect();
        let maps: Vec<Var> = steps.iter().filter_map(|s| s.attention).collect();
        Ok(total_loss(g, &probs, Some(&maps), 1, &loss)?.total)
    };
    let mut lines = Vec::new();
    let ids: Vec<_> = store.iter().map(|p| (p.name.clone(), store.find(&p.name).expect("own name"))).collect();
    for (name, id) in ids {
        let r = grad_check_detailed(
            |g, point| {
                let mut p = store.bind(g, |_| false);
                p.replace(id, point);
                let first = g.constant(pixels[0].clone());
                objective(g, &p, first)
            },
            store.get(id),
            1e-5,
            fault,
        )?;
        lines.push(CheckLine { name, error: r.max_relative_error, tolerance: TOLERANCE });
    }
    let r = grad_check_detailed(
        |g, point| {
            let p = store.bind(g, |_| false);
            objective(g, &p, point)
        },
        &pixels[0],
        1e-5,
        fault,
    )?;
    lines.push(CheckLine { name: "input".into(), error: r.max_relative_error, tolerance: TOLERANCE });
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_is_exact() {
        let p = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let err = grad_check(|g, x| Ok(g.sum(x)), &p, 1e-6).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn sigmoid_of_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::uniform(&[6], 1.0, &mut rng);
        let p = Tensor::uniform(&[6], 1.0, &mut rng);
        let err = grad_check(
            |g, x| {
                let w = g.constant(w.clone());
                let d = g.dot(w, x)?;
                Ok(g.sigmoid(d))
            },
            &p,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let p = Tensor::vector(vec![1.0]);
        assert!(grad_check(|g, x| Ok(g.sum(x)), &p, 0.0).is_err());
    }

    #[test]
    fn detects_corrupted_rule() {
        let p = Tensor::vector(vec![0.3, -0.7]);
        let f = |g: &mut Graph, x: Var| -> Result<Var> {
            let s = g.sigmoid(x);
            Ok(g.sum(s))
        };
        let ok = grad_check_detailed(f, &p, 1e-6, None).unwrap();
        let bad = grad_check_detailed(f, &p, 1e-6, Some(OpKind::Sigmoid)).unwrap();
        assert!(ok.max_relative_error < 1e-6);
        assert!(bad.max_relative_error > 0.1);
    }

    #[test]
    fn every_op_within_tolerance() {
        for line in op_suite(11, None).unwrap() {
            assert!(line.passed(), "{line:?}");
        }
    }

    #[test]
    fn tiny_model_within_tolerance() {
        let lines = tiny_model_suite(5, None).unwrap();
        assert!(lines.len() > 10);
        for line in lines {
            assert!(line.passed(), "{line:?}");
        }
    }

    #[test]
    fn corrupted_rule_fails_the_suite() {
        let ops = op_suite(11, Some(OpKind::Softmax)).unwrap();
        assert!(!ops.iter().find(|l| l.name == "softmax").unwrap().passed());
        let model = tiny_model_suite(5, Some(OpKind::Tanh)).unwrap();
        assert!(model.iter().any(|l| !l.passed()));
    }
}
