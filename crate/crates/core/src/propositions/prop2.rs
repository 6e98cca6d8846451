//! The reduced surrogate `h(w) = Σⱼ yⱼ/(γ + βw²) + ln(γ + cⱼw²)` and the
//! finite `γ` beyond which its minimiser over `w ∈ [0, 1]` is `w = 0`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::report::{Check, PropositionReport};
use crate::error::{Error, Result};
use crate::rng::{seeded, LabRng};

/// Grid spacing for the dense `w` search.
pub const W_GRID_STEP: f64 = 1e-3;
/// Returned when `y = 0`, where every `γ > 0` thresholds.
pub const GAMMA_FLOOR: f64 = 1e-8;
/// Minimiser above this counts as interior.
pub const INTERIOR_W: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedSurrogate {
    pub y: Vec<f64>,
    /// `L/2`
    pub beta: f64,
    pub c: Vec<f64>,
    pub gamma: f64,
    pub lipschitz_l: f64,
}

impl ReducedSurrogate {
    /// Builds the surrogate from a Lipschitz constant, setting `β = L/2`.
    pub fn new(y: Vec<f64>, c: Vec<f64>, lipschitz_l: f64, gamma: f64) -> Result<Self> {
        let s = ReducedSurrogate {
            y,
            beta: lipschitz_l / 2.0,
            c,
            gamma,
            lipschitz_l,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        ReducedSurrogate {
            gamma,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.y.len() != self.c.len() || self.y.is_empty() {
            return Err(Error::Parameter(format!(
                "y and c must be non-empty and equal length, got {} and {}",
                self.y.len(),
                self.c.len()
            )));
        }
        if self.y.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Parameter("y_j must be finite and >= 0".into()));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Parameter(format!("beta must be > 0, got {}", self.beta)));
        }
        check_decoder(&self.c)
    }
}

fn check_decoder(c: &[f64]) -> Result<()> {
    if let Some(j) = c.iter().position(|v| *v == 0.0) {
        return Err(Error::Degenerate(format!(
            "c[{j}] = 0: the decoder is degenerate (no sensitivity to the encoder scale)"
        )));
    }
    if c.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Parameter("c_j must be finite and > 0".into()));
    }
    Ok(())
}

pub fn happr_reduced(s: &ReducedSurrogate, w: f64) -> f64 {
    let w2 = w * w;
    s.y
        .iter()
        .zip(&s.c)
        .map(|(y, c)| y / (s.gamma + s.beta * w2) + (s.gamma + c * w2).ln())
        .sum()
}

/// `∂h/∂(w²)`.
pub fn happr_grad_w2(s: &ReducedSurrogate, w2: f64) -> f64 {
    s.y
        .iter()
        .zip(&s.c)
        .map(|(y, c)| {
            let a = s.gamma + s.beta * w2;
            -s.beta * y / (a * a) + c / (s.gamma + c * w2)
        })
        .sum()
}

/// Sufficient-condition margin `γ²·Σ cⱼ/(γ+cⱼ) − β·Σ yⱼ`. It is increasing
/// in `γ`, and positive values guarantee `∂h/∂(w²) > 0` on `[0, 1]`.
fn margin(s: &ReducedSurrogate, gamma: f64) -> f64 {
    let sc: f64 = s.c.iter().map(|c| c / (gamma + c)).sum();
    let sy: f64 = s.y.iter().sum();
    gamma * gamma * sc - s.beta * sy
}

/// Smallest `γ` (to bisection resolution) satisfying the sufficient
/// condition `Σ cⱼ/(γ+cⱼ) > β·Σ yⱼ/γ²`. `s.gamma` is ignored.
pub fn happr_gamma_prime(s: &ReducedSurrogate) -> Result<f64> {
    s.validate()?;
    if s.y.iter().all(|y| *y == 0.0) {
        return Ok(GAMMA_FLOOR);
    }
    let mut lo = GAMMA_FLOOR;
    let mut hi = 1.0;
    while margin(s, hi) <= 0.0 {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::NonFinite("gamma bracket".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if margin(s, mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    Ok(hi)
}

/// Argmin of `h` over `w ∈ {0, step, 2·step, …, 1}`; ties go to the smaller `w`.
pub fn grid_argmin(s: &ReducedSurrogate) -> f64 {
    let steps = (1.0 / W_GRID_STEP).round() as usize;
    let mut best = (happr_reduced(s, 0.0), 0.0);
    for k in 1..=steps {
        let w = k as f64 * W_GRID_STEP;
        let h = happr_reduced(s, w);
        if h < best.0 {
            best = (h, w);
        }
    }
    best.1
}

/// `γ` multiples at and above `2γ′` that must all threshold.
const ABOVE_FACTORS: [f64; 5] = [1.0, 1.5, 3.0, 10.0, 100.0];
/// Halvings of `γ′` probed for an interior minimiser.
const BELOW_HALVINGS: i32 = 40;

/// Instance outcome of the threshold check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdOutcome {
    pub gamma_prime: f64,
    pub zero_above: bool,
    /// `None` when `y = 0` (nothing to find).
    pub interior_below: Option<f64>,
}

pub fn threshold_outcome(s: &ReducedSurrogate) -> Result<ThresholdOutcome> {
    let gp = happr_gamma_prime(s)?;
    let zero_above = ABOVE_FACTORS
        .iter()
        .all(|f| grid_argmin(&s.with_gamma(2.0 * gp * f)) == 0.0);
    let interior_below = if s.y.iter().all(|y| *y == 0.0) {
        None
    } else {
        (1..=BELOW_HALVINGS)
            .map(|k| gp * 2f64.powi(-k))
            .find(|g| grid_argmin(&s.with_gamma(*g)) > INTERIOR_W)
    };
    Ok(ThresholdOutcome {
        gamma_prime: gp,
        zero_above,
        interior_below,
    })
}

/// Random instance with `c ∈ [0.01, 2]`, `y ∈ [0, 5]`, `β ∈ [0.1, 5]`.
pub fn random_surrogate(rng: &mut LabRng, len: usize) -> ReducedSurrogate {
    let y = (0..len).map(|_| rng.random_range(0.0..=5.0)).collect();
    let c = (0..len).map(|_| rng.random_range(0.01..=2.0)).collect();
    let beta: f64 = rng.random_range(0.1..=5.0);
    ReducedSurrogate {
        y,
        beta,
        c,
        gamma: 1.0,
        lipschitz_l: 2.0 * beta,
    }
}

pub fn prop2_suite(n_instances: usize, seed: u64) -> Result<PropositionReport> {
    if n_instances == 0 {
        return Err(Error::Parameter("n_instances must be >= 1".into()));
    }
    let mut rng = seeded(seed);
    let mut rows = Vec::new();
    let mut all_zero = true;
    let mut all_interior = true;
    let mut with_signal = 0usize;
    for _ in 0..n_instances {
        let len = rng.random_range(2..=8);
        let s = random_surrogate(&mut rng, len);
        let o = threshold_outcome(&s)?;
        all_zero &= o.zero_above;
        if s.y.iter().any(|y| *y != 0.0) {
            with_signal += 1;
            all_interior &= o.interior_below.is_some();
        }
        rows.push(json!({"surrogate": s, "outcome": o}));
    }
    let checks = vec![
        Check::flag("grid argmin is w = 0 for every gamma >= 2 gamma'", all_zero),
        Check::flag("interior argmin for some gamma below gamma' (y != 0)", all_interior),
    ];
    Ok(PropositionReport::new(
        "prop2",
        checks,
        Some(json!({"instances": rows, "instances_with_signal": with_signal})),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single() -> ReducedSurrogate {
        ReducedSurrogate::new(vec![1.0], vec![1.0], 2.0, 1.0).unwrap()
    }

    #[test]
    fn direct_values() {
        let s = single();
        assert!((happr_reduced(&s, 0.0) - 1.0).abs() < 1e-15);
        assert!((happr_reduced(&s, 1.0) - (0.5 + 2f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let s = ReducedSurrogate::new(vec![0.3, 2.0, 4.1], vec![0.2, 1.5, 0.05], 3.0, 0.7).unwrap();
        for &t in &[0.0, 0.1, 0.5, 0.9] {
            let h = 1e-6;
            let f = |t: f64| happr_reduced(&s, t.max(0.0).sqrt());
            // one-sided second-order stencil at the boundary
            let fd = if t == 0.0 {
                (-3.0 * f(0.0) + 4.0 * f(h) - f(2.0 * h)) / (2.0 * h)
            } else {
                (f(t + h) - f(t - h)) / (2.0 * h)
            };
            assert!((fd - happr_grad_w2(&s, t)).abs() <= 1e-7, "t={t}");
        }
    }

    #[test]
    fn golden_ratio_threshold() {
        // γ² = γ + 1 for the single-term instance
        let gp = happr_gamma_prime(&single()).unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((gp - phi).abs() < 1e-9);
        assert_eq!(grid_argmin(&single().with_gamma(gp)), 0.0);
        assert!(grid_argmin(&single().with_gamma(gp / 2.0)) > INTERIOR_W);
    }

    #[test]
    fn zero_signal_returns_floor() {
        let s = ReducedSurrogate::new(vec![0.0, 0.0], vec![0.5, 1.0], 1.0, 1.0).unwrap();
        assert_eq!(happr_gamma_prime(&s).unwrap(), GAMMA_FLOOR);
        assert_eq!(grid_argmin(&s.with_gamma(0.01)), 0.0);
    }

    #[test]
    fn degenerate_decoder_is_rejected() {
        let s = ReducedSurrogate {
            y: vec![1.0],
            beta: 1.0,
            c: vec![0.0],
            gamma: 1.0,
            lipschitz_l: 2.0,
        };
        assert!(matches!(happr_gamma_prime(&s), Err(Error::Degenerate(_))));
    }

    #[test]
    fn scaling_signal_raises_threshold() {
        let s = ReducedSurrogate::new(vec![1.0, 0.4], vec![0.3, 1.2], 1.0, 1.0).unwrap();
        let mut t = s.clone();
        t.y.iter_mut().for_each(|y| *y *= 10.0);
        assert!(happr_gamma_prime(&t).unwrap() > happr_gamma_prime(&s).unwrap());
    }

    #[test]
    fn suite_passes() {
        let r = prop2_suite(50, 7).unwrap();
        assert!(r.pass, "{:?}", r.failed().collect::<Vec<_>>());
    }
}
