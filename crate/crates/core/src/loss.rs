//! Per-sequence training objective: summed step cross-entropy plus a penalty
//! on the overlap of temporally adjacent attention maps.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Diversity coefficient `λ`.
    pub lambda: f64,
    /// Overlap threshold `β`, used only by the canvas validator.
    pub beta: f64,
    /// Attention mass that defines a support region.
    pub mass_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 1.0, beta: 0.5, mass_threshold: 0.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if !(self.mass_threshold > 0.0 && self.mass_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "mass threshold must lie in (0, 1], got {}",
                self.mass_threshold
            )));
        }
        Ok(())
    }
}

/// `−Σ_t ln max(ŷ_{t,label}, 1e-12)`.
pub fn classification_loss(g: &mut Graph, step_probs: &[Var], label: usize) -> Result<Var> {
    if step_probs.is_empty() {
        return Err(Error::Input("classification loss over zero steps".into()));
    }
    let mut total: Option<Var> = None;
    for &p in step_probs {
        let l = g.neg_log_pick(p, label, PROB_FLOOR)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(total.unwrap())
}

/// Mean inner product of adjacent attention maps; zero for fewer than two maps.
pub fn diversity_loss(g: &mut Graph, maps: &[Var]) -> Result<Var> {
    for &m in maps {
        let s: f64 = g.data(m).iter().sum();
        if (s - 1.0).abs() > 1e-6 || g.data(m).iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(format!("attention map is not a distribution (sum {s})")));
        }
    }
    if maps.len() < 2 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut total: Option<Var> = None;
    for pair in maps.windows(2) {
        let d = g.dot(pair[0], pair[1])?;
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / (maps.len() - 1) as f64))
}

/// The loss terms of one sequence.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub classification: Var,
    /// Absent when there are no attention maps (max pooling).
    pub diversity: Option<Var>,
}

/// `L = L_c + λ·L_div`. With `λ = 0` the result is the classification node itself.
pub fn total_loss(
    g: &mut Graph,
    step_probs: &[Var],
    maps: Option<&[Var]>,
    label: usize,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let classification = classification_loss(g, step_probs, label)?;
    let diversity = maps.map(|m| diversity_loss(g, m)).transpose()?;
    let total = match diversity {
        Some(d) if cfg.lambda != 0.0 => {
            let weighted = g.scale(d, cfg.lambda);
            g.add(classification, weighted)?
        }
        _ => classification,
    };
    Ok(LossTerms { total, classification, diversity })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use proptest::prelude::*;

    fn consts(g: &mut Graph, rows: &[Vec<f64>]) -> Vec<Var> {
        rows.iter().map(|r| g.constant(Tensor::vector(r.clone()))).collect()
    }

    fn one_hot(n: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn perfect_predictions_cost_nothing() {
        let mut g = Graph::new();
        let p = consts(&mut g, &[one_hot(3, 2), one_hot(3, 2)]);
        let l = classification_loss(&mut g, &p, 2).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn uniform_predictions() {
        let mut g = Graph::new();
        let p = consts(&mut g, &[vec![0.25; 4], vec![0.25; 4]]);
        let l = classification_loss(&mut g, &p, 1).unwrap();
        assert!((g.value(l).item() - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let mut g = Graph::new();
        let p = consts(&mut g, &[vec![0.5; 2]]);
        assert!(matches!(classification_loss(&mut g, &p, 2), Err(Error::Input(_))));
    }

    #[test]
    fn zero_probability_is_clamped() {
        let mut g = Graph::new();
        let p = consts(&mut g, &[one_hot(2, 0)]);
        let l = classification_loss(&mut g, &p, 1).unwrap();
        assert!((g.value(l).item() + PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn diversity_closed_forms() {
        let mut g = Graph::new();
        let same = consts(&mut g, &[one_hot(9, 4), one_hot(9, 4), one_hot(9, 4)]);
        let d = diversity_loss(&mut g, &same).unwrap();
        assert_eq!(g.value(d).item(), 1.0);

        let disjoint = consts(&mut g, &[one_hot(9, 0), one_hot(9, 1), one_hot(9, 0)]);
        let d = diversity_loss(&mut g, &disjoint).unwrap();
        assert_eq!(g.value(d).item(), 0.0);

        let uniform = consts(&mut g, &vec![vec![1.0 / 64.0; 64]; 4]);
        let d = diversity_loss(&mut g, &uniform).unwrap();
        assert!((g.value(d).item() - 1.0 / 64.0).abs() < 1e-12);

        let single = consts(&mut g, &[vec![0.5, 0.5]]);
        let d = diversity_loss(&mut g, &single).unwrap();
        assert_eq!(g.value(d).item(), 0.0);
    }

    #[test]
    fn diversity_rejects_unnormalized() {
        let mut g = Graph::new();
        let m = consts(&mut g, &[vec![0.5, 0.6], vec![0.5, 0.5]]);
        assert!(matches!(diversity_loss(&mut g, &m), Err(Error::Contract(_))));
    }

    #[test]
    fn lambda_zero_is_classification_bitwise() {
        let mut g = Graph::new();
        let p = consts(&mut g, &[vec![0.2, 0.8], vec![0.7, 0.3]]);
        let m = consts(&mut g, &[vec![0.4, 0.6], vec![0.9, 0.1]]);
        let cfg = LossConfig { lambda: 0.0, ..LossConfig::default() };
        let terms = total_loss(&mut g, &p, Some(&m), 0, &cfg).unwrap();
        let lc = classification_loss(&mut g, &p, 0).unwrap();
        assert_eq!(g.value(terms.total).item().to_bits(), g.value(lc).item().to_bits());

        let cfg = LossConfig { lambda: 2.0, ..LossConfig::default() };
        let terms = total_loss(&mut g, &p, Some(&m), 0, &cfg).unwrap();
        let expected = g.value(lc).item() + 2.0 * (0.4 * 0.9 + 0.6 * 0.1);
        assert!((g.value(terms.total).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn diversity_gradient() {
        let raw = Tensor::vector(vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.7, 1.2, 0.0, 0.4]);
        let err = grad_check(
            |g, x| {
                let maps = (0..3)
                    .map(|t| {
                        let s = g.slice(x, 3 * t, 3)?;
                        g.softmax(s)
                    })
                    .collect::<Result<Vec<_>>>()?;
                diversity_loss(g, &maps)
            },
            &raw,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_map(|v| {
            let v: Vec<f64> = v.iter().map(|x| x + 1e-3).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn diversity_within_unit_interval(maps in prop::collection::vec(distribution(6), 1..6)) {
            let mut g = Graph::new();
            let vars = consts(&mut g, &maps);
            let d = diversity_loss(&mut g, &vars).unwrap();
            let d = g.value(d).item();
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn classification_matches_loop(probs in prop::collection::vec(distribution(5), 1..5), label in 0usize..5) {
            let mut g = Graph::new();
            let vars = consts(&mut g, &probs);
            let l = classification_loss(&mut g, &vars, label).unwrap();
            let l = g.value(l).item();
            let mut expected = 0.0;
            for p in &probs {
                expected -= p[label].max(PROB_FLOOR).ln();
            }
            prop_assert!((l - expected).abs() < 1e-9);
        }
    }
}
