//! Feedback-gated ReLU: the saturating feedback function β, the resulting
//! gain, the gated activation itself, the learned-threshold variant, and
//! their exact derivatives.
//!
//! The activation is `f(μ_S, μ_D) = max(0, μ_S) / (1 − β(μ_D))` with
//! `β(μ_D) = min(β_max/η · μ_D, β_max)`. Zero feedback gives β = 0, so the
//! function reduces exactly to a plain ReLU. Negative feedback yields a
//! negative β (gain below 1); β is deliberately not clamped from below.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Real;

/// Gain override used by the constant-gain baselines: either one constant for
/// every unit in the layer or one value per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainValue {
    Constant(Real),
    PerUnit(Vec<Real>),
}

/// Hyperparameters of the gated activation.
///
/// `beta_max` is the ceiling of the feedback function and must stay below 1
/// (β = 1 divides by zero, β > 1 flips the slope sign). `eta` is the feedback
/// level at which the ceiling is reached. `alpha`, when present, enables the
/// learned-threshold variant `max(0, μ_S + α·μ_D) / (1 − β(μ_D))`.
/// `gain_override`, when present, replaces the whole feedback path by a fixed
/// multiplicative gain on rectified activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FgReluParams {
    beta_max: Real,
    eta: Real,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Real>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_override: Option<GainValue>,
}

impl FgReluParams {
    pub fn new(beta_max: Real, eta: Real) -> Result<Self> {
        if !(beta_max > 0.0 && beta_max < 1.0) {
            return Err(Error::Parameter(format!(
                "beta_max must lie in (0, 1), got {beta_max}"
            )));
        }
        if !(eta > 0.0) {
            return Err(Error::Parameter(format!("eta must be > 0, got {eta}")));
        }
        Ok(FgReluParams { beta_max, eta, alpha: None, gain_override: None })
    }

    /// Grid-search optimum reported for the MNIST autoencoders.
    pub fn default_mnist() -> Self {
        FgReluParams::new(0.95, 5.0).expect("constants are valid")
    }

    pub fn with_alpha(mut self, alpha: Real) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_gain_override(mut self, value: GainValue) -> Self {
        self.gain_override = Some(value);
        self
    }

    pub fn beta_max(&self) -> Real {
        self.beta_max
    }

    pub fn eta(&self) -> Real {
        self.eta
    }

    /// Largest gain the activation can produce: `1 / (1 − β_max)`.
    pub fn max_gain(&self) -> Real {
        1.0 / (1.0 - self.beta_max)
    }
}

/// Saturating feedback function `β(μ_D) = min(β_max/η · μ_D, β_max)`.
///
/// Applied literally: negative `mu_d` gives a negative β and therefore a gain
/// below 1.
pub fn beta(mu_d: Real, params: &FgReluParams) -> Real {
    (params.beta_max / params.eta * mu_d).min(params.beta_max)
}

/// Gain `1 / (1 − β(μ_D))`; always positive, at most `1/(1 − β_max)`.
pub fn gain(mu_d: Real, params: &FgReluParams) -> Real {
    1.0 / (1.0 - beta(mu_d, params))
}

/// The feedback-gated ReLU `max(0, μ_S) / (1 − β(μ_D))`.
pub fn fg_relu(mu_s: Real, mu_d: Real, params: &FgReluParams) -> Real {
    mu_s.max(0.0) * gain(mu_d, params)
}

/// Threshold variant `max(0, μ_S + α·μ_D) / (1 − β(μ_D))`; requires `alpha`.
pub fn fg_relu_threshold(mu_s: Real, mu_d: Real, params: &FgReluParams) -> Result<Real> {
    let alpha = params
        .alpha
        .ok_or_else(|| Error::Parameter("fg_relu_threshold requires alpha".into()))?;
    Ok((mu_s + alpha * mu_d).max(0.0) * gain(mu_d, params))
}

/// Exact partial derivatives of the gated activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FgReluGrads {
    pub d_mu_s: Real,
    pub d_mu_d: Real,
    /// Present only for the threshold variant.
    pub d_alpha: Option<Real>,
}

/// Closed-form derivatives of `fg_relu` (or of the threshold variant when
/// `alpha` is set).
///
/// Kink conventions are fixed: `μ_S = 0` (numerator = 0 in the threshold
/// variant) takes the dead branch, `μ_D = η` takes the saturated branch.
pub fn fg_relu_grads(mu_s: Real, mu_d: Real, params: &FgReluParams) -> FgReluGrads {
    let slope = params.beta_max / params.eta;
    let saturated = mu_d >= params.eta;
    let g = gain(mu_d, params);
    match params.alpha {
        None => {
            if mu_s <= 0.0 {
                FgReluGrads { d_mu_s: 0.0, d_mu_d: 0.0, d_alpha: None }
            } else if saturated {
                FgReluGrads { d_mu_s: g, d_mu_d: 0.0, d_alpha: None }
            } else {
                FgReluGrads { d_mu_s: g, d_mu_d: mu_s * slope * g * g, d_alpha: None }
            }
        }
        Some(alpha) => {
            let numerator = mu_s + alpha * mu_d;
            if numerator <= 0.0 {
                FgReluGrads { d_mu_s: 0.0, d_mu_d: 0.0, d_alpha: Some(0.0) }
            } else {
                let d_mu_d = if saturated {
                    alpha * g
                } else {
                    alpha * g + numerator * slope * g * g
                };
                FgReluGrads { d_mu_s: g, d_mu_d, d_alpha: Some(mu_d * g) }
            }
        }
    }
}

/// Constant/per-unit gain applied to rectified activations:
/// `override ⊙ max(0, μ_S)`. A vector override must match the unit count.
pub fn apply_gain_override(mu_s: &Tensor, value: &GainValue) -> Result<Tensor> {
    match value {
        GainValue::Constant(g) => Ok(mu_s.map(|x| x.max(0.0) * g)),
        GainValue::PerUnit(gains) => {
            let units = *mu_s
                .shape()
                .last()
                .ok_or_else(|| Error::dim("gain override on empty tensor"))?;
            if gains.len() != units {
                return Err(Error::dim(format!(
                    "gain override length {} != unit count {units} (shape {:?})",
                    gains.len(),
                    mu_s.shape()
                )));
            }
            let mut out = mu_s.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v = v.max(0.0) * gains[i % units];
            }
            Ok(out)
        }
    }
}

/// One observed (feedback, gain) pair for a gated unit on one input instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateEntry {
    pub layer: usize,
    pub unit: usize,
    pub mu_d: Real,
    pub gain: Real,
}

/// Feedback and gain values recorded over a dataset, used for the
/// distribution analyses.
#[derive(Debug, Clone, Default)]
pub struct GateRecord {
    pub entries: Vec<GateEntry>,
}

impl GateRecord {
    pub fn record(&mut self, layer: usize, unit: usize, mu_d: Real, params: &FgReluParams) {
        self.entries.push(GateEntry { layer, unit, mu_d, gain: gain(mu_d, params) });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Layers that contributed at least one entry, ascending.
    pub fn layers(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = self.entries.iter().map(|e| e.layer).collect();
        layers.sort_unstable();
        layers.dedup();
        layers
    }

    /// CSV dump, one row per recorded unit-instance.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "layer,unit,mu_d,gain")?;
        for e in &self.entries {
            writeln!(w, "{},{},{},{}", e.layer, e.unit, e.mu_d, e.gain)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> FgReluParams {
        FgReluParams::new(0.95, 5.0).unwrap()
    }

    const TOL: Real = 1e-12;

    #[test]
    fn params_validation() {
        assert!(FgReluParams::new(1.0, 5.0).is_err());
        assert!(FgReluParams::new(0.0, 5.0).is_err());
        assert!(FgReluParams::new(-0.1, 5.0).is_err());
        assert!(FgReluParams::new(0.5, 0.0).is_err());
        assert!(FgReluParams::new(0.5, -1.0).is_err());
        assert!(FgReluParams::new(0.95, 5.0).is_ok());
    }

    #[test]
    fn beta_values() {
        let p = params();
        assert_eq!(beta(0.0, &p), 0.0);
        assert!((beta(2.5, &p) - 0.475).abs() < TOL);
        assert!((beta(10.0, &p) - 0.95).abs() < TOL);
        // No lower clamp: negative feedback gives negative beta.
        assert!(beta(-5.0, &p) < 0.0);
    }

    #[test]
    fn gain_values() {
        let p = params();
        assert_eq!(gain(0.0, &p), 1.0);
        assert!((gain(2.5, &p) - 1.0 / 0.525).abs() < TOL);
        assert!((gain(10.0, &p) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn fg_relu_values() {
        let p = params();
        assert_eq!(fg_relu(3.0, 0.0, &p), 3.0);
        assert_eq!(fg_relu(-1.0, 10.0, &p), 0.0);
        assert!((fg_relu(2.0, 10.0, &p) - 40.0).abs() < 1e-9);
    }

    #[test]
    fn threshold_variant_values() {
        let p = params().with_alpha(0.1);
        assert!((fg_relu_threshold(1.0, 10.0, &p).unwrap() - 40.0).abs() < 1e-9);
        let p2 = params().with_alpha(0.05);
        assert_eq!(fg_relu_threshold(-1.0, 10.0, &p2).unwrap(), 0.0);
        // alpha = 0 reduces to the pure-gain variant everywhere.
        let p3 = params().with_alpha(0.0);
        for &(s, d) in &[(3.0, 0.0), (-1.0, 10.0), (2.0, 10.0), (0.5, -4.0)] {
            assert_eq!(fg_relu_threshold(s, d, &p3).unwrap(), fg_relu(s, d, &params()));
        }
        assert!(fg_relu_threshold(1.0, 1.0, &params()).is_err());
    }

    #[test]
    fn grads_match_hand_values() {
        let p = params();
        let g = fg_relu_grads(2.0, 2.5, &p);
        assert!((g.d_mu_s - 1.0 / 0.525).abs() < 1e-9);
        assert!((g.d_mu_d - 2.0 * 0.19 * (1.0 / 0.525) * (1.0 / 0.525)).abs() < 1e-9);

        let dead = fg_relu_grads(-3.0, 1.0, &p);
        assert_eq!((dead.d_mu_s, dead.d_mu_d), (0.0, 0.0));

        let sat = fg_relu_grads(2.0, 50.0, &p);
        assert!((sat.d_mu_s - 20.0).abs() < 1e-9);
        assert_eq!(sat.d_mu_d, 0.0);
    }

    #[test]
    fn grads_kink_conventions() {
        let p = params();
        // mu_s = 0 takes the dead branch.
        let at_zero = fg_relu_grads(0.0, 1.0, &p);
        assert_eq!((at_zero.d_mu_s, at_zero.d_mu_d), (0.0, 0.0));
        // mu_d = eta takes the saturated branch.
        let at_eta = fg_relu_grads(1.0, 5.0, &p);
        assert_eq!(at_eta.d_mu_d, 0.0);
    }

    fn central_diff(f: impl Fn(Real) -> Real, x: Real) -> Real {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn grads_match_finite_differences() {
        let p = params();
        let pts = [(2.0, 2.5), (0.7, -3.0), (1.5, 4.0), (3.0, 8.0), (0.2, 0.3)];
        for &(s, d) in &pts {
            let g = fg_relu_grads(s, d, &p);
            let fd_s = central_diff(|x| fg_relu(x, d, &p), s);
            let fd_d = central_diff(|x| fg_relu(s, x, &p), d);
            assert!((g.d_mu_s - fd_s).abs() / fd_s.abs().max(1.0) < 1e-6, "at ({s},{d})");
            assert!((g.d_mu_d - fd_d).abs() / fd_d.abs().max(1.0) < 1e-6, "at ({s},{d})");
        }
    }

    #[test]
    fn threshold_grads_match_finite_differences() {
        let p = params().with_alpha(0.07);
        let pts = [(2.0, 2.5), (0.7, -3.0), (1.5, 4.0), (3.0, 8.0)];
        for &(s, d) in &pts {
            let g = fg_relu_grads(s, d, &p);
            let fd_s = central_diff(|x| fg_relu_threshold(x, d, &p).unwrap(), s);
            let fd_d = central_diff(|x| fg_relu_threshold(s, x, &p).unwrap(), d);
            let fd_a = central_diff(
                |a| fg_relu_threshold(s, d, &params().with_alpha(a)).unwrap(),
                0.07,
            );
            assert!((g.d_mu_s - fd_s).abs() / fd_s.abs().max(1.0) < 1e-6);
            assert!((g.d_mu_d - fd_d).abs() / fd_d.abs().max(1.0) < 1e-6);
            assert!((g.d_alpha.unwrap() - fd_a).abs() / fd_a.abs().max(1.0) < 1e-6);
        }
    }

    #[test]
    fn gain_override_tensor() {
        let x = Tensor::from_vec(vec![2.0, -1.0]);
        let out = apply_gain_override(&x, &GainValue::Constant(10.0)).unwrap();
        assert_eq!(out.data(), &[20.0, 0.0]);

        let plain = apply_gain_override(&x, &GainValue::Constant(1.0)).unwrap();
        assert_eq!(plain.data(), &[2.0, 0.0]);

        let per_unit: Vec<Real> = (0..11).map(|i| i as Real).collect();
        let ones = Tensor::ones(&[11]);
        let out = apply_gain_override(&ones, &GainValue::PerUnit(per_unit.clone())).unwrap();
        assert_eq!(out.data(), per_unit.as_slice());

        let bad = apply_gain_override(&ones, &GainValue::PerUnit(vec![1.0; 3]));
        assert!(matches!(bad, Err(Error::Dimension(_))));
    }

    #[test]
    fn gate_record_csv() {
        let p = params();
        let mut rec = GateRecord::default();
        rec.record(1, 0, 0.0, &p);
        rec.record(1, 1, 10.0, &p);
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("layer,unit,mu_d,gain\n"));
        assert_eq!(text.lines().count(), 3);
        assert!(rec.entries.iter().all(|e| e.gain > 0.0 && e.gain <= p.max_gain()));
    }

    proptest! {
        #[test]
        fn zero_feedback_is_exact_relu(s in -10.0..10.0_f64) {
            let s = s as Real;
            prop_assert_eq!(fg_relu(s, 0.0, &params()), s.max(0.0));
        }

        #[test]
        fn monotone_in_feedback(s in 0.01..10.0_f64, d1 in -20.0..20.0_f64, d2 in -20.0..20.0_f64) {
            let (s, d1, d2) = (s as Real, d1 as Real, d2 as Real);
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(fg_relu(s, lo, &params()) <= fg_relu(s, hi, &params()) + 1e-12 as Real);
        }

        #[test]
        fn monotone_in_somatic(d in -20.0..20.0_f64, s1 in -10.0..10.0_f64, s2 in -10.0..10.0_f64) {
            let (d, s1, s2) = (d as Real, s1 as Real, s2 as Real);
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            prop_assert!(fg_relu(lo, d, &params()) <= fg_relu(hi, d, &params()) + 1e-12 as Real);
        }

        #[test]
        fn bounded_by_max_gain(s in -10.0..10.0_f64, d in -50.0..50.0_f64) {
            let (s, d) = (s as Real, d as Real);
            let p = params();
            prop_assert!(fg_relu(s, d, &p) <= s.max(0.0) * p.max_gain() + 1e-12 as Real);
        }

        #[test]
        fn positive_homogeneous(s in -5.0..5.0_f64, d in -20.0..20.0_f64, c in 0.0..4.0_f64) {
            let (s, d, c) = (s as Real, d as Real, c as Real);
            let p = params();
            let lhs = fg_relu(c * s, d, &p);
            let rhs = c * fg_relu(s, d, &p);
            prop_assert!((lhs - rhs).abs() <= 1e-9 as Real * rhs.abs().max(1.0));
        }

        #[test]
        fn gain_always_in_bounds(d in -100.0..100.0_f64) {
            let p = params();
            let g = gain(d as Real, &p);
            prop_assert!(g > 0.0 && g <= p.max_gain());
        }
    }
}
