//! Signed residual injection at a window of MLP outputs.
//!
//! The residual `α·v_vfv + β·v_mrv` is added, scaled by the gate `γ(t)`, to
//! the MLP output of every window layer: once at the last prompt position
//! during prefill (with `γ(0)`), then once in each generated token's forward
//! pass.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::PositionPrior;
use crate::extraction::{ContextPreferenceVector, CpvKind};
use crate::linalg::{Matrix, Vector};
use crate::model::{generate_greedy_timed, GenerationTrace, ModelError, ResidualInjector, TokenId, Transformer};
use crate::{DenseVector, Scalar};

#[derive(Debug, Error)]
pub enum SteeringError {
    #[error("{kind} has a nonzero coefficient but no vector was supplied")]
    MissingVector { kind: CpvKind },
    #[error("{kind} has no vector for layer {layer}")]
    MissingLayerVector { kind: CpvKind, layer: usize },
    #[error("no vector supplied to infer the residual width")]
    NoVectors,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("gate {0} is outside [0, 1]")]
    InvalidGate(f64),
    #[error("steering strengths must be finite")]
    NonFiniteStrength,
    #[error("layer {layer} is outside 0..{n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, SteeringError>;

/// Position schedule for the injected residual.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    #[default]
    ConstantOne,
    TemperedPrior(PositionPrior),
}

impl Gate {
    /// `γ(t)` in `[0, 1]` for generated token `t`.
    pub fn at(&self, t: usize) -> f64 {
        match self {
            Gate::ConstantOne => 1.0,
            Gate::TemperedPrior(prior) => prior.gate(t),
        }
    }
}

/// The mid-early window used unless configured otherwise.
pub fn default_window() -> BTreeSet<usize> {
    (11..=14).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub layers: BTreeSet<usize>,
    /// Strength on the visual-fidelity vector.
    pub alpha: f64,
    /// Strength on the modality-reliance vector.
    pub beta: f64,
    pub gate: Gate,
}

impl Default for InjectionSpec {
    fn default() -> Self {
        Self {
            layers: default_window(),
            alpha: 0.0,
            beta: 0.0,
            gate: Gate::ConstantOne,
        }
    }
}

fn contribution(
    kind: CpvKind,
    coefficient: f64,
    cpv: Option<&ContextPreferenceVector>,
    layer: usize,
) -> Result<Option<&DenseVector>> {
    if coefficient == 0.0 {
        return Ok(None);
    }
    let cpv = cpv.ok_or(SteeringError::MissingVector { kind })?;
    cpv.vector(layer)
        .map(Some)
        .ok_or(SteeringError::MissingLayerVector { kind, layer })
}

fn compose_with_dim(
    dim: usize,
    layer: usize,
    alpha: f64,
    beta: f64,
    vfv: Option<&ContextPreferenceVector>,
    mrv: Option<&ContextPreferenceVector>,
) -> Result<Vec<f64>> {
    let a = contribution(CpvKind::Vfv, alpha, vfv, layer)?;
    let b = contribution(CpvKind::Mrv, beta, mrv, layer)?;
    for v in [a, b].into_iter().flatten() {
        if v.dim() != dim {
            return Err(SteeringError::DimensionMismatch {
                expected: dim,
                got: v.dim(),
            });
        }
    }
    Ok((0..dim)
        .map(|i| {
            let x = a.map_or(0.0, |v| alpha * v[i]);
            let y = b.map_or(0.0, |v| beta * v[i]);
            x + y
        })
        .collect())
}

/// `α·v_vfv[layer] + β·v_mrv[layer]`; a vector whose coefficient is zero may
/// be absent or lack the layer.
pub fn compose_residual(
    layer: usize,
    alpha: f64,
    beta: f64,
    vfv: Option<&ContextPreferenceVector>,
    mrv: Option<&ContextPreferenceVector>,
) -> Result<DenseVector> {
    let dim = vfv.or(mrv).ok_or(SteeringError::NoVectors)?.d_model;
    let r = compose_with_dim(dim, layer, alpha, beta, vfv, mrv)?;
    Ok(Vector::new(r).expect("composed residual is finite and nonempty"))
}

/// `h + γ·residual`.
pub fn apply_injection<S: Scalar>(h: &Vector<S>, residual: &Vector<S>, gamma: S) -> Result<Vector<S>> {
    if h.dim() != residual.dim() {
        return Err(SteeringError::DimensionMismatch {
            expected: h.dim(),
            got: residual.dim(),
        });
    }
    if !(gamma >= S::zero() && gamma <= S::one()) {
        return Err(SteeringError::InvalidGate(gamma.to_f64_lossy()));
    }
    let out = h.iter().zip(residual.iter()).map(|(x, r)| *x + gamma * *r).collect();
    Ok(Vector::new(out).expect("finite inputs give a finite sum"))
}

/// Injection configuration bound to one model shape, plus a counter of
/// forward segments it was applied in.
#[derive(Debug, Clone)]
pub struct InjectionHandle<S: Scalar> {
    spec: InjectionSpec,
    vfv: Option<ContextPreferenceVector>,
    mrv: Option<ContextPreferenceVector>,
    /// Per model layer; `None` outside the window or when the residual is zero.
    residuals: Vec<Option<Vec<S>>>,
    application_count: usize,
}

impl<S: Scalar> InjectionHandle<S> {
    pub fn new(
        spec: InjectionSpec,
        vfv: Option<ContextPreferenceVector>,
        mrv: Option<ContextPreferenceVector>,
        model: &Transformer<S>,
    ) -> Result<Self> {
        if !(spec.alpha.is_finite() && spec.beta.is_finite()) {
            return Err(SteeringError::NonFiniteStrength);
        }
        let n_layers = model.n_layers();
        let d = model.d_model();
        if let Some(&layer) = spec.layers.iter().find(|&&l| l >= n_layers) {
            return Err(SteeringError::LayerOutOfRange { layer, n_layers });
        }
        for cpv in [&vfv, &mrv].into_iter().flatten() {
            if cpv.d_model != d {
                return Err(SteeringError::DimensionMismatch {
                    expected: d,
                    got: cpv.d_model,
                });
            }
        }
        let mut residuals = vec![None; n_layers];
        for &layer in &spec.layers {
            let r = compose_with_dim(d, layer, spec.alpha, spec.beta, vfv.as_ref(), mrv.as_ref())?;
            if r.iter().any(|x| *x != 0.0) {
                residuals[layer] = Some(r.into_iter().map(S::from_f64_lossy).collect());
            }
        }
        Ok(Self {
            spec,
            vfv,
            mrv,
            residuals,
            application_count: 0,
        })
    }

    /// Handle that injects nothing; generation with it matches vanilla.
    pub fn vanilla(model: &Transformer<S>) -> Self {
        Self::new(InjectionSpec::default(), None, None, model).expect("zero strengths need no vectors")
    }

    pub fn spec(&self) -> &InjectionSpec {
        &self.spec
    }

    pub fn vfv(&self) -> Option<&ContextPreferenceVector> {
        self.vfv.as_ref()
    }

    pub fn mrv(&self) -> Option<&ContextPreferenceVector> {
        self.mrv.as_ref()
    }

    /// Residual added at `layer` before gating, if any.
    pub fn residual(&self, layer: usize) -> Option<&[S]> {
        self.residuals.get(layer)?.as_deref()
    }

    pub fn application_count(&self) -> usize {
        self.application_count
    }

    pub fn reset_count(&mut self) {
        self.application_count = 0;
    }
}

impl<S: Scalar> ResidualInjector<S> for InjectionHandle<S> {
    fn gate(&self, t: usize) -> S {
        S::from_f64_lossy(self.spec.gate.at(t).clamp(0.0, 1.0))
    }

    fn begin_segment(&mut self) {
        self.application_count += 1;
    }

    fn apply(&mut self, layer: usize, gamma: S, output: &mut [S]) {
        if gamma == S::zero() {
            return;
        }
        if let Some(r) = self.residuals.get(layer).and_then(Option::as_ref) {
            for (o, x) in output.iter_mut().zip(r) {
                *o += gamma * *x;
            }
        }
    }
}

/// Greedy generation with the handle's residual injected.
pub fn steer_generate<S: Scalar>(
    model: &Transformer<S>,
    handle: &mut InjectionHandle<S>,
    prefix: &Matrix<S>,
    prompt: &[TokenId],
    max_new: usize,
) -> Result<GenerationTrace<S>> {
    Ok(generate_greedy_timed(
        model,
        prefix,
        prompt,
        max_new,
        Some(handle),
        None,
    )?)
}

/// As [`steer_generate`], recording per-token decode times.
pub fn steer_generate_timed<S: Scalar>(
    model: &Transformer<S>,
    handle: &mut InjectionHandle<S>,
    prefix: &Matrix<S>,
    prompt: &[TokenId],
    max_new: usize,
    step_times: &mut Vec<Duration>,
) -> Result<GenerationTrace<S>> {
    Ok(generate_greedy_timed(
        model,
        prefix,
        prompt,
        max_new,
        Some(handle),
        Some(step_times),
    )?)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::extraction::LayerFit;

    fn cpv(kind: CpvKind, layer: usize, w: &[f64]) -> ContextPreferenceVector {
        ContextPreferenceVector {
            kind,
            per_layer: BTreeMap::from([(
                layer,
                LayerFit {
                    weights: Vector::new(w.to_vec()).unwrap(),
                    intercept: 0.0,
                    r_squared: 1.0,
                    cv_r2: None,
                },
            )]),
            lambda: 1.0,
            epsilon: 0.1,
            n_used: 2,
            d_model: w.len(),
            source_corpus_hash: String::new(),
        }
    }

    #[test]
    fn compose_examples() {
        let v = cpv(CpvKind::Vfv, 3, &[0.0, 1.0]);
        let m = cpv(CpvKind::Mrv, 3, &[1.0, 0.0]);
        let r = compose_residual(3, 2.0, -1.0, Some(&v), Some(&m)).unwrap();
        assert_eq!(r.as_slice(), &[-1.0, 2.0]);
        let z = compose_residual(3, 0.0, 0.0, Some(&v), Some(&m)).unwrap();
        assert!(z.is_zero());
        assert!(matches!(
            compose_residual(4, 1.0, 0.0, Some(&v), Some(&m)),
            Err(SteeringError::MissingLayerVector { layer: 4, .. })
        ));
        // a zero coefficient tolerates the missing layer
        assert!(compose_residual(4, 0.0, 0.0, Some(&v), None).unwrap().is_zero());
        assert!(matches!(
            compose_residual(3, 0.0, 1.0, Some(&v), None),
            Err(SteeringError::MissingVector { kind: CpvKind::Mrv })
        ));
    }

    #[test]
    fn apply_examples() {
        let h = Vector::new(vec![2.0, 0.0]).unwrap();
        let r = Vector::new(vec![0.0, 4.0]).unwrap();
        assert_eq!(apply_injection(&h, &r, 0.0).unwrap(), h);
        assert_eq!(apply_injection(&h, &r, 0.5).unwrap().as_slice(), &[2.0, 2.0]);
        assert!(apply_injection(&h, &h.neg(), 1.0).unwrap().is_zero());
        assert!(matches!(
            apply_injection(&h, &r, 1.5),
            Err(SteeringError::InvalidGate(_))
        ));
        let short = Vector::new(vec![1.0]).unwrap();
        assert!(matches!(
            apply_injection(&h, &short, 1.0),
            Err(SteeringError::DimensionMismatch { .. })
        ));
    }
}
