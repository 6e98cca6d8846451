//! Consistency checks of the affine closed form.

use rand::Rng;
use serde_json::json;

use super::report::{Check, PropositionReport};
use crate::datasets::{exact_spectrum_batch, DataBatch};
use crate::error::{Error, Result};
use crate::linear_oracle::{embed_ppca, ppca_closed_form, predict_collapsed_count, spectral_profile, PpcaSolution};
use crate::nets::{Decoder, VaeModel};
use crate::objective::{kl_term, GammaMode};
use crate::rng::seeded;

/// Spectrum used by the oracle checks: four signal directions over a
/// small isotropic floor.
pub const ORACLE_EIGENVALUES: [f64; 8] = [4.0, 1.0, 0.25, 0.0625, 0.01, 0.01, 0.01, 0.01];
pub const ORACLE_KAPPA: usize = 4;
pub const ORACLE_GAMMAS: [f64; 4] = [0.03, 0.5, 2.0, 8.0];

/// Exact energy of an affine model, using
/// `E‖x − W(μ + σ⊙ε) − b‖² = ‖x − Wμ − b‖² + Σⱼ σⱼ²‖Wⱼ‖²`.
pub fn affine_energy_exact(model: &VaeModel, batch: &DataBatch) -> Result<f64> {
    let Decoder::Affine(lin) = &model.decoder else {
        return Err(Error::Unsupported("exact energy needs an affine decoder".into()));
    };
    let lg = model.encode(batch.x())?;
    let xh = model.decode(lg.mu())?;
    let (n, d, k) = (batch.n(), batch.d(), model.latent_dim());
    let col_sq: Vec<f64> = (0..k).map(|j| lin.w.column(j).iter().map(|v| v * v).sum()).collect();
    let g = model.gamma();
    let mut total = 0.0;
    for i in 0..n {
        let mut sq: f64 = xh.row(i).iter().zip(batch.x().row(i)).map(|(a, b)| (a - b).powi(2)).sum();
        let mut kl = 0.0;
        for j in 0..k {
            let s = lg.sigma().get(i, j);
            sq += s * s * col_sq[j];
            kl += 2.0 * kl_term(lg.mu().get(i, j), s);
        }
        total += sq / g + d as f64 * g.ln() + kl;
    }
    Ok(total)
}

fn perturbed(model: &VaeModel, rel: f64, rng: &mut crate::rng::LabRng) -> VaeModel {
    let mut m = model.clone();
    if let Decoder::Affine(l) = &mut m.decoder {
        for t in [&mut l.w, &mut l.b] {
            let scale = t.max_abs().max(1e-3);
            t.values_mut().iter_mut().for_each(|v| *v += rel * scale * rng.random_range(-1.0..=1.0));
        }
    }
    m.log_gamma += (1.0 + rel * rng.random_range(-1.0..=1.0)).ln();
    m
}

fn orthogonality(sol: &PpcaSolution) -> f64 {
    let k = sol.w_star.cols();
    let mut worst = 0.0f64;
    for a in 0..k {
        for b in 0..a {
            let ca = sol.w_star.column(a);
            let cb = sol.w_star.column(b);
            worst = worst.max(ca.iter().zip(&cb).map(|(x, y)| x * y).sum::<f64>().abs());
        }
    }
    worst
}

pub fn linear_oracle_suite(seed: u64) -> Result<PropositionReport> {
    let d = ORACLE_EIGENVALUES.len();
    let batch = exact_spectrum_batch(200, d, &ORACLE_EIGENVALUES, seed)?;
    let prof = spectral_profile(&batch);
    let mut checks = Vec::new();
    for (i, &l) in ORACLE_EIGENVALUES.iter().enumerate() {
        checks.push(Check::near(format!("sample eigenvalue {i}"), prof.eigenvalues[i], l, 1e-9));
    }
    let counts: Vec<usize> = ORACLE_GAMMAS
        .iter()
        .map(|&g| predict_collapsed_count(&prof, ORACLE_KAPPA, g))
        .collect::<Result<_>>()?;
    for ((g, c), want) in ORACLE_GAMMAS.iter().zip(&counts).zip([0usize, 2, 3, 4]) {
        checks.push(Check::near(format!("predicted collapsed count at gamma={g}"), *c as f64, want as f64, 0.0));
    }

    let learned = ppca_closed_form(&prof, ORACLE_KAPPA, &GammaMode::Learned)?;
    checks.push(Check::near("learned gamma is the trailing mean", learned.gamma_star, 0.01, 1e-9));
    checks.push(Check::at_most("decoder columns orthogonal", orthogonality(&learned), 1e-9));

    let full = ppca_closed_form(&prof, d, &GammaMode::Learned)?;
    let w2: f64 = full.w_star.values().iter().map(|v| v * v).sum();
    let total_var: f64 = prof.eigenvalues.iter().sum();
    checks.push(Check::near(
        "kappa = d: column energy plus d gamma equals total variance",
        w2 + d as f64 * full.gamma_star,
        total_var,
        1e-9,
    ));

    let model = embed_ppca(&learned)?;
    let e0 = affine_energy_exact(&model, &batch)?;
    let mut rng = seeded(seed ^ 0x5eed);
    let mut worst = f64::INFINITY;
    for _ in 0..200 {
        let e = affine_energy_exact(&perturbed(&model, 0.01, &mut rng), &batch)?;
        worst = worst.min(e - e0);
    }
    checks.push(Check::at_least("min energy increase over 200 perturbations", worst, 0.0));

    for (&g, want) in ORACLE_GAMMAS.iter().zip([0usize, 2, 3, 4]) {
        let sol = ppca_closed_form(&prof, ORACLE_KAPPA, &GammaMode::Fixed { value: g })?;
        let m = embed_ppca(&sol)?;
        let lg = m.encode(batch.x())?;
        let kl = crate::objective::kl_diag_gaussian(&lg);
        let zero = kl.iter().filter(|v| **v < 1e-12).count();
        checks.push(Check::near(format!("embedded solution zero-KL dims at gamma={g}"), zero as f64, want as f64, 0.0));
    }

    Ok(PropositionReport::new(
        "linear-oracle",
        checks,
        Some(json!({
            "eigenvalues": prof.eigenvalues,
            "gammas": ORACLE_GAMMAS,
            "predicted_collapsed": counts,
            "learned_gamma": learned.gamma_star,
            "energy_at_optimum": e0,
        })),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::vae_energy;

    #[test]
    fn exact_energy_matches_monte_carlo() {
        let batch = exact_spectrum_batch(30, 8, &ORACLE_EIGENVALUES, 1).unwrap();
        let m = VaeModel::new(crate::nets::ModelSpec::affine(8, 3), 4).unwrap();
        let e = affine_energy_exact(&m, &batch).unwrap();
        let lb = vae_energy(&m, &batch, None, 4000, &mut seeded(2)).unwrap();
        let se = lb.recon_stderr * (batch.n() * batch.d()) as f64 / m.gamma();
        assert!((e - lb.total_energy).abs() <= 4.0 * se, "{e} vs {}", lb.total_energy);
    }

    #[test]
    fn suite_passes() {
        let r = linear_oracle_suite(3).unwrap();
        assert!(r.pass, "{:?}", r.failed().collect::<Vec<_>>());
    }
}
