//! The soft-threshold counterexample: on `{(1,1), (−1,−1)}` with `d = 2`,
//! `n = 2`, `κ = 1` and `μ_x = π_α(W_x z) + b_x`, the fully collapsed point
//! is a strict local minimum that is not global.
//!
//! Encoder moments are free per-datum parameters. Every expectation over
//! `ε` is evaluated in closed form by splitting on the soft-threshold
//! regimes; Monte Carlo is only used as an independent cross-check.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::report::{Check, PropositionReport};
use crate::diff::soft_threshold;
use crate::error::{Error, Result};
use crate::linalg::sym_eigen;
use crate::objective::interval_quadratic_expectation;
use crate::rng::LabRng;

const N: usize = 2;
const D: usize = 2;
const X: [[f64; 2]; 2] = [[1.0, 1.0], [-1.0, -1.0]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Config {
    pub alpha: f64,
    /// Strictly descending, each in `(0, 1/(α+1))`.
    pub delta_grid: Vec<f64>,
    /// Draws for the Monte-Carlo cross-check.
    pub mc_samples: usize,
}

impl Prop1Config {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.delta_grid.is_empty() {
            return Err(Error::Parameter("delta grid is empty".into()));
        }
        for &d in &self.delta_grid {
            check_delta(d, self.alpha)?;
        }
        if self.delta_grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Parameter("delta grid must be strictly descending".into()));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Parameter(format!(
            "the counterexample requires alpha > 0, got {alpha}"
        )));
    }
    Ok(())
}

fn check_delta(delta: f64, alpha: f64) -> Result<()> {
    let hi = 1.0 / (alpha + 1.0);
    if !(delta > 0.0 && delta < hi) {
        return Err(Error::Parameter(format!(
            "delta = {delta} outside (0, 1/(alpha+1)) = (0, {hi}), where the residual bound holds"
        )));
    }
    Ok(())
}

/// Free variational parameters and decoder for the two-point problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Point {
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    pub w: [f64; 2],
    pub b: [f64; 2],
    pub gamma: f64,
}

impl Prop1Point {
    /// `[W1, W2, b1, b2, μ1, μ2, σ1, σ2, γ]`
    pub fn to_vec(&self) -> [f64; 9] {
        [
            self.w[0], self.w[1], self.b[0], self.b[1], self.mu[0], self.mu[1], self.sigma[0],
            self.sigma[1], self.gamma,
        ]
    }

    pub fn from_vec(v: &[f64; 9]) -> Self {
        Prop1Point {
            w: [v[0], v[1]],
            b: [v[2], v[3]],
            mu: [v[4], v[5]],
            sigma: [v[6], v[7]],
            gamma: v[8],
        }
    }
}

/// `μ_z = 0`, `σ_z = 1`, `W_x = 0`, `b_x = x̄ = 0`, `γ = γ̄ = 1`, with its energy.
pub fn prop1_collapsed_point() -> (Prop1Point, f64) {
    let p = Prop1Point {
        mu: [0.0; 2],
        sigma: [1.0; 2],
        w: [0.0; 2],
        b: [0.0; 2],
        gamma: 1.0,
    };
    let e = prop1_energy(&p, 1.0).expect("collapsed point is valid");
    (p, e)
}

/// Expectation over a region of `ε` where `x = loc + s·ε`, with `s` of
/// either sign.
fn region(lo: f64, hi: f64, p: [f64; 3], loc: f64, s: f64) -> f64 {
    // ε ↦ −ε leaves N(0,1) unchanged, so a negative scale flips the odd term
    let (s, p) = if s < 0.0 { (-s, [p[0], -p[1], p[2]]) } else { (s, p) };
    interval_quadratic_expectation(lo, hi, p, loc, s).expect("scale checked positive")
}

/// `E[(c − π_α(loc + s·ε))²]` for `ε ~ N(0, 1)`.
pub fn soft_threshold_residual_moment(c: f64, loc: f64, s: f64, alpha: f64) -> f64 {
    if s == 0.0 {
        let r = c - soft_threshold(loc, alpha);
        return r * r;
    }
    let inf = f64::INFINITY;
    let (sp, lp) = if s < 0.0 { (-s, loc) } else { (s, loc) };
    // x > α: residual (c − loc + α) − sε; x < −α: (c − loc − α) − sε
    let quad = |k: f64| [k * k, -2.0 * k * sp, sp * sp];
    region(alpha, inf, quad(c - lp + alpha), lp, sp)
        + region(-alpha, alpha, [c * c, 0.0, 0.0], lp, sp)
        + region(-inf, -alpha, quad(c - lp - alpha), lp, sp)
}

/// Closed-form energy of the two-point problem:
/// `Σᵢ (1/γ)Σₖ E(xᵢₖ − π_α(Wₖzᵢ) − bₖ)² + d ln γ + σᵢ² − ln σᵢ² + μᵢ² − 1`.
pub fn prop1_energy(p: &Prop1Point, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::Parameter(format!("alpha must be >= 0, got {alpha}")));
    }
    if !(p.gamma > 0.0) || p.sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Parameter("gamma and sigma must be > 0".into()));
    }
    let mut total = 0.0;
    for i in 0..N {
        let mut data = 0.0;
        for k in 0..D {
            data += soft_threshold_residual_moment(
                X[i][k] - p.b[k],
                p.w[k] * p.mu[i],
                p.w[k] * p.sigma[i],
                alpha,
            );
        }
        let s2 = p.sigma[i] * p.sigma[i];
        total += data / p.gamma + D as f64 * p.gamma.ln() + s2 - s2.ln() + p.mu[i] * p.mu[i] - 1.0;
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("two-point energy".into()));
    }
    Ok(total)
}

/// Monte-Carlo estimate of [`prop1_energy`] with its standard error.
pub fn prop1_energy_mc(p: &Prop1Point, alpha: f64, samples: usize, rng: &mut LabRng) -> (f64, f64) {
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for _ in 0..samples {
        let mut v = 0.0;
        for i in 0..N {
            let e: f64 = StandardNormal.sample(rng);
            let z = p.mu[i] + p.sigma[i] * e;
            for k in 0..D {
                let r = X[i][k] - soft_threshold(p.w[k] * z, alpha) - p.b[k];
                v += r * r;
            }
        }
        sum += v;
        sum2 += v * v;
    }
    let m = sum / samples as f64;
    let var = (sum2 / samples as f64 - m * m).max(0.0) * samples as f64 / (samples - 1).max(1) as f64;
    let se = (var / samples as f64).sqrt() / p.gamma;
    let mut rest = 0.0;
    for i in 0..N {
        let s2 = p.sigma[i] * p.sigma[i];
        rest += D as f64 * p.gamma.ln() + s2 - s2.ln() + p.mu[i] * p.mu[i] - 1.0;
    }
    (m / p.gamma + rest, se)
}

/// `E[(1 − π_α((α+1)(1 + δε)))²]`.
pub fn prop1_family_residual(delta: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_delta(delta, alpha)?;
    let a1 = alpha + 1.0;
    Ok(soft_threshold_residual_moment(1.0, a1, a1 * delta, alpha))
}

/// `μ_z = ±1`, `W_x = (α+1, α+1)`, `b_x = 0`, `σ_z = δ`,
/// `γ = 2·E[(1 − π_α((α+1)(1+δε)))²]`.
pub fn prop1_family_point(delta: f64, alpha: f64) -> Result<Prop1Point> {
    let r = prop1_family_residual(delta, alpha)?;
    let a1 = alpha + 1.0;
    Ok(Prop1Point {
        mu: [1.0, -1.0],
        sigma: [delta; 2],
        w: [a1; 2],
        b: [0.0; 2],
        gamma: 2.0 * r,
    })
}

pub fn prop1_family_energy(delta: f64, alpha: f64) -> Result<f64> {
    prop1_energy(&prop1_family_point(delta, alpha)?, alpha)
}

/// Sampling estimate of the family energy where `γ` itself is replaced by
/// its sample value. Returns the estimate and a delta-method standard error.
pub fn prop1_family_energy_mc(delta: f64, alpha: f64, samples: usize, rng: &mut LabRng) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    check_delta(delta, alpha)?;
    if samples < 2 {
        return Err(Error::Parameter("need at least 2 samples".into()));
    }
    let a1 = alpha + 1.0;
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for _ in 0..samples {
        // both data points, each with its own draw; coordinates share z
        let mut v = 0.0;
        for sign in [1.0, -1.0] {
            let e: f64 = StandardNormal.sample(rng);
            let z = sign + delta * e;
            let r = sign - soft_threshold(a1 * z, alpha);
            v += 2.0 * r * r;
        }
        sum += v;
        sum2 += v * v;
    }
    let nf = samples as f64;
    let m = sum / nf;
    let var = (sum2 / nf - m * m).max(0.0) * nf / (nf - 1.0);
    let se_m = (var / nf).sqrt();
    // Σᵢ E‖·‖² = S, γ = S/2: energy = 2 + 4 ln(S/2) + 2δ² − 4 ln δ
    let d2 = delta * delta;
    let energy = 2.0 + 4.0 * (m / 2.0).ln() + 2.0 * (d2 - d2.ln());
    Ok((energy, 4.0 * se_m / m))
}

/// Closed-form `∂E/∂W_j` at an arbitrary point.
pub fn prop1_gradient_w(p: &Prop1Point, alpha: f64) -> [f64; 2] {
    let inf = f64::INFINITY;
    let mut g = [0.0; 2];
    for (k, gk) in g.iter_mut().enumerate() {
        let wk = p.w[k];
        let mut acc = 0.0;
        for i in 0..N {
            let (mu, sd) = (p.mu[i], p.sigma[i]);
            let c = X[i][k] - p.b[k];
            let loc = wk * mu;
            let s = wk * sd;
            if s == 0.0 {
                // deterministic z = μ
                let u = wk * mu;
                if u.abs() > alpha {
                    acc += mu * (c - soft_threshold(u, alpha));
                }
                continue;
            }
            // E[z·(c − π(Wz))·1{|Wz| > α}], z = μ + σε, residual (c ∓ α − Wμ) − Wσε
            let poly = |kk: f64| {
                let r0 = kk - wk * mu;
                [mu * r0, sd * r0 - wk * mu * sd, -wk * sd * sd]
            };
            acc += region(alpha, inf, poly(c + alpha), loc, s);
            acc += region(-inf, -alpha, poly(c - alpha), loc, s);
        }
        *gk = -2.0 / p.gamma * acc;
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PullbackReport {
    pub w: [f64; 2],
    pub grad: [f64; 2],
    /// `sign(grad_j) = sign(W_j)` or `grad_j = 0`, for both coordinates.
    pub pass: bool,
}

/// Gradient in `W_x` with every other parameter at the collapsed values.
pub fn prop1_gradient_pullback(w: [f64; 2], alpha: f64) -> PullbackReport {
    let (mut p, _) = prop1_collapsed_point();
    p.w = w;
    let grad = prop1_gradient_w(&p, alpha);
    let pass = (0..2).all(|j| grad[j] == 0.0 || grad[j].signum() == w[j].signum());
    PullbackReport { w, grad, pass }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianBlockReport {
    /// `b_x` block per datum (total block divided by `n`).
    pub block_bx: [[f64; 2]; 2],
    /// `b_x` block of the summed energy.
    pub block_bx_total: [[f64; 2]; 2],
    pub block_wx_max_abs: f64,
    pub cross_blocks_max_abs: f64,
    /// `[μ1, μ2, σ1, σ2]` block.
    pub block_encoder: Vec<Vec<f64>>,
    pub encoder_min_eigenvalue: f64,
    pub block_gamma: f64,
    pub full: Vec<Vec<f64>>,
}

const BLOCK_OF: [usize; 9] = [0, 0, 1, 1, 2, 2, 2, 2, 3];

/// Central-difference Hessian of the closed-form energy at the collapsed point.
pub fn prop1_hessian_blocks(fd_step: f64, alpha: f64) -> Result<HessianBlockReport> {
    if !(1e-5..=1e-3).contains(&fd_step) {
        return Err(Error::Parameter(format!(
            "fd_step must lie in [1e-5, 1e-3], got {fd_step}"
        )));
    }
    check_alpha(alpha)?;
    let (p0, _) = prop1_collapsed_point();
    let x0 = p0.to_vec();
    let f = |v: &[f64; 9]| prop1_energy(&Prop1Point::from_vec(v), alpha);
    let h = fd_step;
    let f0 = f(&x0)?;
    let mut hess = vec![vec![0.0; 9]; 9];
    for i in 0..9 {
        let mut up = x0;
        up[i] += h;
        let mut dn = x0;
        dn[i] -= h;
        hess[i][i] = (f(&up)? - 2.0 * f0 + f(&dn)?) / (h * h);
        for j in (i + 1)..9 {
            let shifted = |si: f64, sj: f64| {
                let mut v = x0;
                v[i] += si * h;
                v[j] += sj * h;
                f(&v)
            };
            let v = (shifted(1.0, 1.0)? - shifted(1.0, -1.0)? - shifted(-1.0, 1.0)?
                + shifted(-1.0, -1.0)?)
                / (4.0 * h * h);
            hess[i][j] = v;
            hess[j][i] = v;
        }
    }
    let mut cross = 0.0f64;
    for i in 0..9 {
        for j in 0..9 {
            if BLOCK_OF[i] != BLOCK_OF[j] {
                cross = cross.max(hess[i][j].abs());
            }
        }
    }
    let wmax = (0..2)
        .flat_map(|i| (0..2).map(move |j| (i, j)))
        .map(|(i, j)| hess[i][j].abs())
        .fold(0.0, f64::max);
    let total = [[hess[2][2], hess[2][3]], [hess[3][2], hess[3][3]]];
    let per = total.map(|r| r.map(|v| v / N as f64));
    let enc: Vec<Vec<f64>> = (4..8).map(|i| hess[i][4..8].to_vec()).collect();
    let flat: Vec<f64> = enc.iter().flatten().copied().collect();
    let min_eig = *sym_eigen(&flat, 4).values.last().expect("4x4");
    Ok(HessianBlockReport {
        block_bx: per,
        block_bx_total: total,
        block_wx_max_abs: wmax,
        cross_blocks_max_abs: cross,
        block_encoder: enc,
        encoder_min_eigenvalue: min_eig,
        block_gamma: hess[8][8],
        full: hess,
    })
}

/// Least-squares slope of `e` against `ln δ`.
pub fn log_slope(deltas: &[f64], energies: &[f64]) -> f64 {
    let xs: Vec<f64> = deltas.iter().map(|d| d.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = energies.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(energies).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Tolerance on the collapsed energy.
const COLLAPSED_TOL: f64 = 1e-9;
const HESSIAN_TOL: f64 = 1e-4;
const PULLBACK_PROBES: usize = 100;

/// Full verification: collapsed energy, the δ-family table, the asymptotic
/// slope, the Monte-Carlo cross-check, Hessian blocks and the pull-back scan.
pub fn prop1_suite(cfg: &Prop1Config, rng: &mut LabRng) -> Result<PropositionReport> {
    cfg.validate()?;
    let alpha = cfg.alpha;
    let mut checks = Vec::new();
    let (_, e0) = prop1_collapsed_point();
    checks.push(Check::near("collapsed energy vs nd = 4", e0, 4.0, COLLAPSED_TOL));

    let energies: Vec<f64> = cfg
        .delta_grid
        .iter()
        .map(|&d| prop1_family_energy(d, alpha))
        .collect::<Result<_>>()?;
    let decreasing = energies.windows(2).all(|w| w[1] < w[0]);
    checks.push(Check::flag("family energy strictly decreasing as delta shrinks", decreasing));
    let last = *energies.last().expect("non-empty grid");
    checks.push(Check::at_most("smallest-delta family energy below collapsed energy", last, 4.0 - 1e-12));

    let tail = cfg.delta_grid.len().min(3);
    let k0 = cfg.delta_grid.len() - tail;
    if tail >= 2 {
        let slope = log_slope(&cfg.delta_grid[k0..], &energies[k0..]);
        checks.push(Check::near("slope of energy vs ln delta (target 4)", slope, 4.0, 0.1));
    }

    let mut mc_rows = Vec::new();
    if cfg.mc_samples >= 2 {
        for (&d, &e) in cfg.delta_grid.iter().zip(&energies) {
            let (m, se) = prop1_family_energy_mc(d, alpha, cfg.mc_samples, rng)?;
            let z = (m - e).abs() / se.max(f64::MIN_POSITIVE);
            checks.push(Check::at_most(format!("closed form vs Monte Carlo at delta={d:e} (std errors)"), z, 4.0));
            mc_rows.push(json!({"delta": d, "mc": m, "stderr": se}));
        }
    }

    let hb = prop1_hessian_blocks(1e-4, alpha)?;
    let g = 1.0;
    for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let target = if i == j { 2.0 / g } else { 0.0 };
        checks.push(Check::near(format!("per-datum b_x hessian [{i}][{j}]"), hb.block_bx[i][j], target, HESSIAN_TOL));
        let target_total = if i == j { 2.0 * N as f64 / g } else { 0.0 };
        checks.push(Check::near(
            format!("summed b_x hessian [{i}][{j}]"),
            hb.block_bx_total[i][j],
            target_total,
            HESSIAN_TOL,
        ));
    }
    checks.push(Check::near("gamma second derivative (target 4)", hb.block_gamma, 4.0 / (g * g), HESSIAN_TOL));
    checks.push(Check::at_most("W_x hessian block max |entry|", hb.block_wx_max_abs, HESSIAN_TOL));
    checks.push(Check::at_most("cross blocks max |entry|", hb.cross_blocks_max_abs, HESSIAN_TOL));
    checks.push(Check::above("encoder block min eigenvalue", hb.encoder_min_eigenvalue, 0.0));

    use rand::Rng;
    let mut passed = 0usize;
    let mut probes = 0usize;
    while probes < PULLBACK_PROBES {
        let w = [rng.random_range(-0.5..=0.5), rng.random_range(-0.5..=0.5)];
        if w == [0.0, 0.0] {
            continue;
        }
        probes += 1;
        if prop1_gradient_pullback(w, alpha).pass {
            passed += 1;
        }
    }
    checks.push(Check::at_least(
        "pull-back sign property pass fraction",
        passed as f64 / probes as f64,
        1.0,
    ));

    let table: Vec<_> = cfg
        .delta_grid
        .iter()
        .zip(&energies)
        .map(|(d, e)| json!({"delta": d, "energy": e}))
        .collect();
    let data = json!({
        "alpha": alpha,
        "collapsed_energy": e0,
        "energy_table": table,
        "monte_carlo": mc_rows,
        "hessian": hb,
    });
    Ok(PropositionReport::new("prop1", checks, Some(data)))
}
