//! Central finite-difference check of the analytic gradient of the full
//! objective (NLL plus weight penalty) on small random models.
//!
//! Masks are frozen across all evaluations: the variational regime reuses
//! one sampled `DropoutMaskSet`, the naive regime replays a cloned `Rng`.

use std::fmt;

use crate::cells::{CellKind, InjectedFault};
use crate::error::Result;
use crate::math::Rng;
use crate::network::{
    forward_sequence, sample_mask_set, Direction, DropoutMaskSet, Mode, ModelConfig, ModelParams, Regime,
};
use crate::training::{add_decay_gradient, bptt_with, sequence_loss, total_objective};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSpec {
    pub seq_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub label_count: usize,
    pub vocab_size: usize,
    pub drop_prob: f64,
    pub weight_decay: f64,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that entries whose true
    /// gradient is ~0 are judged by absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        GradcheckSpec {
            seq_len: 4,
            embed_dim: 5,
            hidden_dim: 5,
            label_count: 3,
            vocab_size: 6,
            drop_prob: 0.5,
            weight_decay: 1e-3,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            seed: 1,
        }
    }
}

/// Largest relative error seen in one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorError {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckResult {
    pub cell: CellKind,
    pub direction: Direction,
    pub regime: Regime,
    pub per_tensor: Vec<TensorError>,
}

impl GradcheckResult {
    pub fn worst(&self) -> &TensorError {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .expect("a model has tensors")
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().rel_error
    }

    /// Tensors whose error exceeds `tolerance`.
    pub fn failing(&self, tolerance: f64) -> Vec<&TensorError> {
        self.per_tensor
            .iter()
            .filter(|t| t.rel_error >= tolerance || t.rel_error.is_nan())
            .collect()
    }
}

impl fmt::Display for GradcheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.worst();
        write!(
            f,
            "{}\t{}\t{}\t{:.3e}\t{}",
            self.cell, self.direction, self.regime, w.rel_error, w.tensor
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Frozen source of masks for one check.
enum Frozen {
    None,
    Variational(DropoutMaskSet),
    Naive(Box<Rng>),
}

fn objective(
    params: &ModelParams,
    config: &ModelConfig,
    tokens: &[usize],
    labels: &[usize],
    frozen: &Frozen,
    lambda: f64,
) -> Result<f64> {
    let (logits, _) = match frozen {
        Frozen::None => forward_sequence(params, config, tokens, None, None, Mode::Train)?,
        Frozen::Variational(m) => forward_sequence(params, config, tokens, Some(m), None, Mode::Train)?,
        Frozen::Naive(rng) => {
            let mut rng = Rng::clone(rng);
            forward_sequence(params, config, tokens, None, Some(&mut rng), Mode::Train)?
        }
    };
    Ok(total_objective(params, sequence_loss(&logits, labels)?, lambda))
}

/// Compares analytic and numeric gradients for one architecture.
pub fn check(
    cell: CellKind,
    direction: Direction,
    regime: Regime,
    spec: &GradcheckSpec,
    fault: Option<InjectedFault>,
) -> Result<GradcheckResult> {
    let config = ModelConfig {
        embed_dim: spec.embed_dim,
        hidden_dim: spec.hidden_dim,
        label_count: spec.label_count,
        regime,
        drop_prob: spec.drop_prob,
        ..ModelConfig::new(cell, direction, spec.vocab_size)
    };
    let mut rng = Rng::new(spec.seed);
    let mut params = ModelParams::init(&config, &mut rng)?;
    // Non-zero biases so their gradients are exercised away from init.
    for (_, kind, t) in params.tensors_mut() {
        if kind == crate::math::TensorKind::Bias {
            for v in t.values_mut() {
                *v += rng.uniform_range(-0.5, 0.5);
            }
        }
    }
    let tokens: Vec<usize> = (0..spec.seq_len).map(|_| rng.below(spec.vocab_size)).collect();
    let labels: Vec<usize> = (0..spec.seq_len).map(|_| rng.below(spec.label_count)).collect();
    let frozen = match regime {
        Regime::None => Frozen::None,
        Regime::Variational => Frozen::Variational(sample_mask_set(&config, &mut rng)?),
        Regime::Naive => Frozen::Naive(Box::new(rng.clone())),
    };

    let (logits, tape) = match &frozen {
        Frozen::None => forward_sequence(&params, &config, &tokens, None, None, Mode::Train)?,
        Frozen::Variational(m) => forward_sequence(&params, &config, &tokens, Some(m), None, Mode::Train)?,
        Frozen::Naive(r) => {
            let mut r = Rng::clone(r);
            forward_sequence(&params, &config, &tokens, None, Some(&mut r), Mode::Train)?
        }
    };
    let (_, mut grads) = bptt_with(&params, &logits, &tape, &labels, fault)?;
    add_decay_gradient(&params, &mut grads, spec.weight_decay);

    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, _, t)| (n, t.values().to_vec()))
        .collect();
    let mut per_tensor = Vec::with_capacity(analytic.len());
    for (ti, (name, grad)) in analytic.iter().enumerate() {
        let mut worst = TensorError {
            tensor: name.clone(),
            index: 0,
            analytic: 0.0,
            numeric: 0.0,
            rel_error: 0.0,
        };
        for (k, &a) in grad.iter().enumerate() {
            let orig = params.tensors()[ti].2.values()[k];
            let mut eval_at = |v: f64| -> Result<f64> {
                params.tensors_mut()[ti].2.values_mut()[k] = v;
                objective(&params, &config, &tokens, &labels, &frozen, spec.weight_decay)
            };
            let plus = eval_at(orig + spec.step)?;
            let minus = eval_at(orig - spec.step)?;
            eval_at(orig)?;
            let numeric = (plus - minus) / (2.0 * spec.step);
            let e = relative_error(a, numeric, spec.floor);
            if e > worst.rel_error || e.is_nan() {
                worst = TensorError {
                    tensor: name.clone(),
                    index: k,
                    analytic: a,
                    numeric,
                    rel_error: e,
                };
            }
        }
        per_tensor.push(worst);
    }
    Ok(GradcheckResult {
        cell,
        direction,
        regime,
        per_tensor,
    })
}

/// Every combination of the given cells, directions and regimes.
pub fn check_all(
    cells: &[CellKind],
    directions: &[Direction],
    regimes: &[Regime],
    spec: &GradcheckSpec,
    fault: Option<InjectedFault>,
) -> Result<Vec<GradcheckResult>> {
    let mut out = Vec::new();
    for &c in cells {
        for &d in directions {
            for &r in regimes {
                out.push(check(c, d, r, spec, fault)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIRS: [Direction; 2] = [Direction::Uni, Direction::Bi];
    const REGIMES: [Regime; 3] = [Regime::None, Regime::Naive, Regime::Variational];

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(1.0, 0.5, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn all_architectures_pass() {
        let spec = GradcheckSpec::default();
        for r in check_all(&CellKind::ALL, &DIRS, &REGIMES, &spec, None).unwrap() {
            assert!(r.max_rel_error() < spec.tolerance, "{r} {:?}", r.worst());
        }
    }

    #[test]
    fn covers_every_tensor() {
        let spec = GradcheckSpec::default();
        let r = check(CellKind::Gru, Direction::Bi, Regime::None, &spec, None).unwrap();
        assert_eq!(r.per_tensor.len(), 1 + 9 + 9 + 2);
        assert_eq!(r.per_tensor[0].tensor, "embedding");
    }

    #[test]
    fn injected_forget_gate_fault_is_caught() {
        let spec = GradcheckSpec::default();
        for d in DIRS {
            let r = check(
                CellKind::Lstm,
                d,
                Regime::None,
                &spec,
                Some(InjectedFault::ForgetGateSign),
            )
            .unwrap();
            let failing: Vec<&str> = r
                .failing(spec.tolerance)
                .iter()
                .map(|t| t.tensor.as_str())
                .collect();
            assert!(failing.contains(&"fwd.W_hf"), "{failing:?}");
        }
    }
}
