//! The Gaussian VAE energy, the deterministic AE loss, the optimal `γ`, and
//! Gaussian tail moments.
//!
//! Energies are sums over data (not means) and use natural logarithms:
//!
//! ```text
//! E = Σᵢ (1/γ)·Ê‖x⁽ⁱ⁾ − μ_x(z)‖² + d·ln γ + ‖σ⁽ⁱ⁾‖² − Σⱼ ln σⱼ⁽ⁱ⁾² + ‖μ⁽ⁱ⁾‖² − κ
//! ```
//!
//! The `−κ` makes the KL part vanish at `q(z|x) = N(0, I)`.

use serde::{Deserialize, Serialize};

use crate::datasets::DataBatch;
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{Bound, DecodeTrace, EncodeTrace, LatentGaussian, VaeModel};
use crate::rng::{normal_vec, LabRng};

/// Rows decoded per chunk during Monte-Carlo evaluation.
const EVAL_CHUNK_ROWS: usize = 8192;

/// Per-dimension `½(μ² + σ² − ln σ² − 1)`, averaged over the batch.
pub fn kl_diag_gaussian(lg: &LatentGaussian) -> Vec<f64> {
    let (n, k) = (lg.n(), lg.kappa());
    let mut out = vec![0.0; k];
    if n == 0 {
        return out;
    }
    for i in 0..n {
        for (j, o) in out.iter_mut().enumerate() {
            *o += kl_term(lg.mu().get(i, j), lg.sigma().get(i, j));
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    out
}

/// `½(μ² + σ² − ln σ² − 1)` for one coordinate.
pub fn kl_term(mu: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    0.5 * (mu * mu + s2 - s2.ln() - 1.0)
}

/// How `γ` is chosen during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum GammaMode {
    Learned,
    Fixed { value: f64 },
    /// `(iteration, γ)` breakpoints, log-linear in between. After the last
    /// breakpoint `γ` is learned, starting from the final scheduled value.
    WarmStart { schedule: Vec<(usize, f64)> },
}

impl GammaMode {
    /// Log-linear ramp from `start` to `end` over the first `fraction` of
    /// `iterations`.
    pub fn warm_start(start: f64, end: f64, iterations: usize, fraction: f64) -> Self {
        let handoff = ((iterations as f64 * fraction).round() as usize).max(1);
        GammaMode::WarmStart {
            schedule: vec![(0, start), (handoff, end)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GammaMode::Learned => Ok(()),
            GammaMode::Fixed { value } => {
                if *value > 0.0 && value.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Parameter(format!("fixed gamma must be > 0, got {value}")))
                }
            }
            GammaMode::WarmStart { schedule } => {
                if schedule.is_empty() {
                    return Err(Error::Parameter("warm-start schedule is empty".into()));
                }
                if schedule.iter().any(|(_, g)| !(*g > 0.0) || !g.is_finite()) {
                    return Err(Error::Parameter("schedule gammas must be > 0".into()));
                }
                if schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err(Error::Parameter(
                        "schedule iterations must be strictly increasing".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Prescribed `γ` at `iter`, or `None` where `γ` is learned.
    pub fn gamma_at(&self, iter: usize) -> Option<f64> {
        match self {
            GammaMode::Learned => None,
            GammaMode::Fixed { value } => Some(*value),
            GammaMode::WarmStart { schedule } => {
                let (first_it, first_g) = schedule[0];
                let (last_it, last_g) = schedule[schedule.len() - 1];
                if iter <= first_it {
                    return Some(first_g);
                }
                if iter > last_it {
                    return None;
                }
                if iter == last_it {
                    return Some(last_g);
                }
                let k = schedule.partition_point(|(it, _)| *it <= iter);
                let (i0, g0) = schedule[k - 1];
                let (i1, g1) = schedule[k];
                let t = (iter - i0) as f64 / (i1 - i0) as f64;
                Some((g0.ln() + t * (g1.ln() - g0.ln())).exp())
            }
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, GammaMode::Fixed { .. })
    }
}

/// Decomposed energy of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `Σᵢ Ê‖x⁽ⁱ⁾ − μ_x‖² / (nd)`.
    pub recon: f64,
    /// Standard error of `recon` across Monte-Carlo draws (0 for one draw).
    pub recon_stderr: f64,
    /// Mean nats per latent dimension.
    pub kl_per_dim: Vec<f64>,
    pub kl_total: f64,
    pub gamma: f64,
    pub total_energy: f64,
}

impl LossBreakdown {
    fn assemble(
        recon: f64,
        recon_stderr: f64,
        kl_per_dim: Vec<f64>,
        gamma: f64,
        n: usize,
        d: usize,
    ) -> Result<Self> {
        let kl_total: f64 = kl_per_dim.iter().sum();
        let nd = (n * d) as f64;
        let total_energy = recon * nd / gamma + nd * gamma.ln() + 2.0 * n as f64 * kl_total;
        if !total_energy.is_finite() {
            return Err(Error::NonFinite("total energy".into()));
        }
        Ok(LossBreakdown {
            recon,
            recon_stderr,
            kl_per_dim,
            kl_total,
            gamma,
            total_energy,
        })
    }
}

fn resolve_gamma(model: &VaeModel, gamma: Option<f64>) -> Result<f64> {
    let g = gamma.unwrap_or_else(|| model.gamma());
    if !(g > 0.0) || !g.is_finite() {
        return Err(Error::Parameter(format!("gamma must be > 0, got {g}")));
    }
    Ok(g)
}

/// Per-draw reconstruction sums `Σᵢ ‖x⁽ⁱ⁾ − μ_x(z_s⁽ⁱ⁾)‖²`.
fn residual_sums<F>(model: &VaeModel, batch: &DataBatch, lg: &LatentGaussian, draws: usize, mut eps: F) -> Result<Vec<f64>>
where
    F: FnMut(usize) -> Vec<f64>,
{
    let (n, k, d) = (batch.n(), model.latent_dim(), batch.d());
    let per_chunk = (EVAL_CHUNK_ROWS / n.max(1)).max(1);
    let mut sums = Vec::with_capacity(draws);
    let mut s = 0;
    while s < draws {
        let m = per_chunk.min(draws - s);
        let mut z = Vec::with_capacity(m * n * k);
        for _ in 0..m {
            let e = eps(n * k);
            z.extend(
                lg.mu()
                    .values()
                    .iter()
                    .zip(lg.sigma().values())
                    .zip(&e)
                    .map(|((mu, sd), e)| mu + sd * e),
            );
        }
        let out = model.decode(&Tensor::from_parts(vec![m * n, k], z))?;
        for b in 0..m {
            let mut acc = 0.0;
            for i in 0..n {
                let r = out.row(b * n + i);
                acc += r
                    .iter()
                    .zip(batch.x().row(i))
                    .map(|(a, x)| (x - a) * (x - a))
                    .sum::<f64>();
            }
            debug_assert_eq!(out.cols(), d);
            sums.push(acc);
        }
        s += m;
    }
    Ok(sums)
}

fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (m, (var / v.len() as f64).sqrt())
}

/// Monte-Carlo energy with `n_mc` reparameterized draws per datum.
///
/// `gamma = None` uses the model's own `γ`.
pub fn vae_energy(
    model: &VaeModel,
    batch: &DataBatch,
    gamma: Option<f64>,
    n_mc: usize,
    rng: &mut LabRng,
) -> Result<LossBreakdown> {
    if n_mc == 0 {
        return Err(Error::Parameter("n_mc must be >= 1".into()));
    }
    let g = resolve_gamma(model, gamma)?;
    let lg = model.encode(batch.x())?;
    let sums = residual_sums(model, batch, &lg, n_mc, |len| normal_vec(rng, len))?;
    let nd = (batch.n() * batch.d()) as f64;
    let per_draw: Vec<f64> = sums.iter().map(|s| s / nd).collect();
    let (recon, se) = mean_and_stderr(&per_draw);
    LossBreakdown::assemble(recon, se, kl_diag_gaussian(&lg), g, batch.n(), batch.d())
}

/// Energy with every draw forced to `z = μ_z`.
pub fn vae_energy_deterministic(
    model: &VaeModel,
    batch: &DataBatch,
    gamma: Option<f64>,
) -> Result<LossBreakdown> {
    let g = resolve_gamma(model, gamma)?;
    let lg = model.encode(batch.x())?;
    let sums = residual_sums(model, batch, &lg, 1, |len| vec![0.0; len])?;
    let recon = sums[0] / (batch.n() * batch.d()) as f64;
    LossBreakdown::assemble(recon, 0.0, kl_diag_gaussian(&lg), g, batch.n(), batch.d())
}

/// `(1/nd) Σ ‖x − μ_x(μ_z(x))‖²`.
pub fn ae_loss(model: &VaeModel, batch: &DataBatch) -> Result<f64> {
    let xh = model.reconstruct(batch.x())?;
    let ss: f64 = xh
        .values()
        .iter()
        .zip(batch.x().values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(ss / (batch.n() * batch.d()) as f64)
}

/// `γ* = (1/nd) Σᵢ Ê‖x⁽ⁱ⁾ − μ_x(z)‖²`, the minimiser in `γ` with everything
/// else held fixed.
pub fn optimal_gamma(model: &VaeModel, batch: &DataBatch, n_mc: usize, rng: &mut LabRng) -> Result<f64> {
    Ok(optimal_gamma_with_stderr(model, batch, n_mc, rng)?.0)
}

pub fn optimal_gamma_with_stderr(
    model: &VaeModel,
    batch: &DataBatch,
    n_mc: usize,
    rng: &mut LabRng,
) -> Result<(f64, f64)> {
    let lb = vae_energy(model, batch, None, n_mc, rng)?;
    Ok((lb.recon, lb.recon_stderr))
}

/// Tape nodes of one energy evaluation.
pub struct EnergyGraph {
    pub total: Var,
    pub encode: EncodeTrace,
    pub decode: DecodeTrace,
    pub z: Var,
}

/// Records the energy on `tape` for `x` (`[n, d]`) with noise `eps`
/// (`[n_mc·n, κ]`, sample-major). Each draw gets its own encoder pass so
/// that the graph needs no row broadcasting; the KL part is averaged over
/// draws.
pub fn energy_graph(
    tape: &mut Tape,
    model: &VaeModel,
    bound: &Bound,
    x: &Tensor,
    eps: &Tensor,
    log_gamma: Var,
) -> Result<EnergyGraph> {
    let (n, d) = (x.rows(), x.cols());
    let k = model.latent_dim();
    if eps.cols() != k || n == 0 || eps.rows() % n != 0 {
        return Err(Error::Shape {
            op: "energy noise",
            left: eps.shape().to_vec(),
            right: vec![n, k],
        });
    }
    let n_mc = eps.rows() / n;
    let rep = if n_mc == 1 {
        x.clone()
    } else {
        let mut v = Vec::with_capacity(n_mc * x.len());
        for _ in 0..n_mc {
            v.extend_from_slice(x.values());
        }
        Tensor::from_parts(vec![n_mc * n, d], v)
    };
    let xv = tape.constant(rep);
    let enc = model.encode_on(tape, bound, xv)?;
    let half = tape.scale(enc.logvar, 0.5)?;
    let sigma = tape.exp(half)?;
    let ev = tape.constant(eps.clone());
    let noise = tape.mul(sigma, ev)?;
    let z = tape.add(enc.mu, noise)?;
    let dec = model.decode_on(tape, bound, z)?;
    let resid = tape.sub(xv, dec.out)?;
    let sq = tape.square(resid)?;
    let sq_sum = tape.sum(sq)?;
    let sq_mean = tape.scale(sq_sum, 1.0 / n_mc as f64)?;

    let neg_lg = tape.neg(log_gamma)?;
    let inv_g = tape.exp(neg_lg)?;
    let data = tape.mul(sq_mean, inv_g)?;
    let logdet = tape.scale(log_gamma, (n * d) as f64)?;

    let mu2 = tape.square(enc.mu)?;
    let var = tape.exp(enc.logvar)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, enc.logvar)?;
    let kl_sum = tape.sum(b)?;
    let kl = tape.scale(kl_sum, 1.0 / n_mc as f64)?;
    let minus_k = tape.constant(Tensor::scalar(-((n * k) as f64)));

    let t1 = tape.add(data, logdet)?;
    let t2 = tape.add(t1, kl)?;
    let total = tape.add(t2, minus_k)?;
    Ok(EnergyGraph {
        total,
        encode: enc,
        decode: dec,
        z,
    })
}

/// Records `Σ‖x − μ_x(μ_z(x))‖² / (nd)` on `tape`.
pub fn ae_graph(tape: &mut Tape, model: &VaeModel, bound: &Bound, x: &Tensor) -> Result<Var> {
    let nd = x.len() as f64;
    let xv = tape.constant(x.clone());
    let enc = model.encode_on(tape, bound, xv)?;
    let dec = model.decode_on(tape, bound, enc.mu)?;
    let resid = tape.sub(xv, dec.out)?;
    let sq = tape.square(resid)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / nd)
}

/// Moments of the standard normal tail beyond `A`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailMoments {
    /// `P(ε > A)`
    pub prob: f64,
    /// `E[ε·1{ε > A}]`
    pub m1: f64,
    /// `E[ε²·1{ε > A}]`
    pub m2: f64,
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn std_normal_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Upper tail `1 − Φ(x)` via `erfc`, accurate far into either tail.
pub fn std_normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

pub fn std_normal_cdf(x: f64) -> f64 {
    std_normal_sf(-x)
}

/// `x·φ(x)` with the infinite limits set to 0.
fn x_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        x * std_normal_pdf(x)
    }
}

pub fn gaussian_tail(a: f64) -> TailMoments {
    let prob = std_normal_sf(a);
    TailMoments {
        prob,
        m1: std_normal_pdf(a),
        m2: prob + x_pdf(a),
    }
}

/// `P(lo < ε ≤ hi)`, evaluated on whichever side avoids cancellation.
fn interval_prob(lo: f64, hi: f64) -> f64 {
    if lo >= 0.0 {
        std_normal_sf(lo) - std_normal_sf(hi)
    } else if hi <= 0.0 {
        std_normal_sf(-hi) - std_normal_sf(-lo)
    } else {
        1.0 - std_normal_sf(hi) - std_normal_sf(-lo)
    }
}

/// Zeroth, first and second moments of `ε` restricted to `(lo, hi]`.
pub fn interval_moments(lo: f64, hi: f64) -> [f64; 3] {
    if hi <= lo {
        return [0.0; 3];
    }
    let p = interval_prob(lo, hi);
    let m1 = std_normal_pdf(lo) - std_normal_pdf(hi);
    let m2 = p + x_pdf(lo) - x_pdf(hi);
    [p, m1, m2]
}

/// `E[p(ε)·1{a < loc + scale·ε ≤ b}]` for `p(ε) = p[0] + p[1]·ε + p[2]·ε²`.
/// Either bound may be infinite.
pub fn interval_quadratic_expectation(a: f64, b: f64, p: [f64; 3], loc: f64, scale: f64) -> Result<f64> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Parameter(format!("scale must be > 0, got {scale}")));
    }
    if a.is_nan() || b.is_nan() || !loc.is_finite() {
        return Err(Error::Parameter("interval bounds must not be NaN".into()));
    }
    if b <= a {
        return Ok(0.0);
    }
    let m = interval_moments((a - loc) / scale, (b - loc) / scale);
    Ok(p[0] * m[0] + p[1] * m[1] + p[2] * m[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{prop1_dataset, synth_lowrank};
    use crate::nets::{Decoder, ModelSpec};
    use crate::rng::seeded;

    fn lg(mu: f64, sigma: f64) -> LatentGaussian {
        LatentGaussian::new(
            Tensor::matrix(1, 1, vec![mu]).unwrap(),
            Tensor::matrix(1, 1, vec![sigma]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_diag_gaussian(&lg(0.0, 1.0)), vec![0.0]);
        assert_eq!(kl_diag_gaussian(&lg(1.0, 1.0)), vec![0.5]);
        let e = std::f64::consts::E;
        let v = kl_diag_gaussian(&lg(0.0, e.sqrt()))[0];
        assert!((v - (e - 2.0) / 2.0).abs() < 1e-15);
        assert!((v - 0.359141).abs() < 1e-6);
    }

    #[test]
    fn tail_at_zero() {
        let t = gaussian_tail(0.0);
        assert_eq!(t.prob, 0.5);
        assert!((t.m1 - 0.398_942_280_4).abs() < 1e-10);
        assert_eq!(t.m2, 0.5);
        assert!(gaussian_tail(10.0).prob <= (-50.0f64).exp());
    }

    #[test]
    fn interval_examples() {
        let inf = f64::INFINITY;
        let e = |a, b, p| interval_quadratic_expectation(a, b, p, 0.0, 1.0).unwrap();
        assert!((e(-inf, inf, [0.0, 0.0, 1.0]) - 1.0).abs() < 1e-15);
        assert!(e(-inf, inf, [0.0, 1.0, 0.0]).abs() < 1e-15);
        assert!((e(0.0, inf, [1.0, 0.0, 0.0]) - 0.5).abs() < 1e-15);
        assert!(interval_quadratic_expectation(0.0, 1.0, [1.0, 0.0, 0.0], 0.0, 0.0).is_err());
        // location/scale: x = 2 + 3ε, P(x ≤ 2) = 1/2
        let half = interval_quadratic_expectation(-inf, 2.0, [1.0, 0.0, 0.0], 2.0, 3.0).unwrap();
        assert!((half - 0.5).abs() < 1e-15);
    }

    #[test]
    fn warm_start_schedule() {
        let m = GammaMode::warm_start(1e-3, 1.0, 100, 0.3);
        m.validate().unwrap();
        assert_eq!(m.gamma_at(0), Some(1e-3));
        assert_eq!(m.gamma_at(30), Some(1.0));
        assert_eq!(m.gamma_at(31), None);
        let mid = m.gamma_at(15).unwrap();
        assert!((mid.ln() - 0.5 * (1e-3f64).ln()).abs() < 1e-12);
        let bad = GammaMode::WarmStart {
            schedule: vec![(5, 1.0), (5, 2.0)],
        };
        assert!(bad.validate().is_err());
        assert!(GammaMode::Fixed { value: 0.0 }.validate().is_err());
    }

    fn collapsed_affine(batch: &DataBatch) -> VaeModel {
        let m = VaeModel::new(ModelSpec::affine(batch.d(), 2), 1).unwrap();
        m.collapsed(batch.mean(), batch.gamma_bar()).unwrap()
    }

    #[test]
    fn collapsed_energy_on_two_point_set_is_four() {
        let b = prop1_dataset();
        let m = collapsed_affine(&b);
        let lb = vae_energy(&m, &b, None, 5, &mut seeded(0)).unwrap();
        assert!((lb.total_energy - 4.0).abs() <= 1e-9);
        assert!(lb.kl_per_dim.iter().all(|k| *k == 0.0));
    }

    #[test]
    fn collapsed_energy_is_nd_one_plus_log_gamma_bar() {
        let b = synth_lowrank(30, 4, &[3.0, 0.5], 2).unwrap();
        let m = collapsed_affine(&b);
        let lb = vae_energy(&m, &b, None, 3, &mut seeded(1)).unwrap();
        let nd = 120.0;
        assert!((lb.total_energy - nd * (1.0 + b.gamma_bar().ln())).abs() <= 1e-9);
        assert!((lb.recon - b.gamma_bar()).abs() <= 1e-12);
        assert_eq!(optimal_gamma(&m, &b, 3, &mut seeded(1)).unwrap(), lb.recon);
    }

    #[test]
    fn optimal_gamma_is_mean_residual() {
        // two scalar points, constant decoder 0: residuals 0.2 and 0.3 ⇒ γ* = 0.25
        let b = DataBatch::from_rows(&[vec![0.2f64.sqrt()], vec![0.3f64.sqrt()]]).unwrap();
        let mut m = VaeModel::new(
            ModelSpec {
                decoder: crate::nets::DecoderSpec::Constant,
                ..ModelSpec::affine(1, 1)
            },
            0,
        )
        .unwrap();
        if let Decoder::Constant { b } = &mut m.decoder {
            b.values_mut()[0] = 0.0;
        }
        let g = optimal_gamma(&m, &b, 4, &mut seeded(3)).unwrap();
        assert!((g - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ae_loss_matches_zero_noise_recon() {
        let b = synth_lowrank(20, 3, &[1.0, 0.3], 4).unwrap();
        let m = VaeModel::new(ModelSpec::mlp(3, 2, 1, 5), 9).unwrap();
        let det = vae_energy_deterministic(&m, &b, None).unwrap();
        assert!((det.recon - ae_loss(&m, &b).unwrap()).abs() < 1e-14);
        let c = collapsed_affine(&b);
        assert!((ae_loss(&c, &b).unwrap() - b.gamma_bar()).abs() < 1e-14);
    }

    #[test]
    fn gamma_must_be_positive() {
        let b = prop1_dataset();
        let m = collapsed_affine(&b);
        assert!(matches!(
            vae_energy(&m, &b, Some(0.0), 1, &mut seeded(0)),
            Err(Error::Parameter(_))
        ));
        assert!(vae_energy(&m, &b, None, 0, &mut seeded(0)).is_err());
    }

    #[test]
    fn graph_energy_matches_evaluator() {
        let b = synth_lowrank(6, 3, &[1.0, 0.4, 0.1], 5).unwrap();
        let m = VaeModel::new(ModelSpec::mlp(3, 2, 2, 4), 3).unwrap();
        let lb = vae_energy_deterministic(&m, &b, None).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, true);
        let lgv = tape.param(Tensor::scalar(m.log_gamma));
        let g = energy_graph(&mut tape, &m, &bound, b.x(), &Tensor::zeros(&[6, 2]), lgv).unwrap();
        let got = tape.value(g.total).item();
        assert!((got - lb.total_energy).abs() <= 1e-10 * lb.total_energy.abs().max(1.0));
    }
}
