//! Empirical Lipschitz constant of the gradient of the data term
//! `fᵢ(μ, σ) = E‖x⁽ⁱ⁾ − μ_x(μ + σ ⊙ ε)‖²` (no `1/γ`).

use rand::Rng;

use crate::datasets::DataBatch;
use crate::diff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::linalg::sym_eigen;
use crate::nets::VaeModel;
use crate::rng::{normal_vec, LabRng};

/// Probe box: `μ ∈ [−MU_BOX, MU_BOX]^κ`.
pub const MU_BOX: f64 = 2.0;
/// Probe box: `σ ∈ [SIGMA_MIN, SIGMA_MAX]^κ`.
pub const SIGMA_MIN: f64 = 0.05;
pub const SIGMA_MAX: f64 = 2.0;
/// Common noise draws shared by every probe.
pub const N_EPS: usize = 256;

/// Centres the columns of `e` (`[n, k]`) and maps its sample covariance to
/// exactly `I`.
fn whiten(e: &mut [f64], n: usize, k: usize) {
    for j in 0..k {
        let m = (0..n).map(|r| e[r * k + j]).sum::<f64>() / n as f64;
        (0..n).for_each(|r| e[r * k + j] -= m);
    }
    let mut cov = vec![0.0; k * k];
    for r in 0..n {
        for a in 0..k {
            for b in 0..k {
                cov[a * k + b] += e[r * k + a] * e[r * k + b] / n as f64;
            }
        }
    }
    let eig = sym_eigen(&cov, k);
    // C^{-1/2} = V diag(λ^{-1/2}) Vᵀ
    let mut inv_sqrt = vec![0.0; k * k];
    for (l, &lam) in eig.values.iter().enumerate() {
        let v = eig.vector(l);
        let s = 1.0 / lam.sqrt();
        for a in 0..k {
            for b in 0..k {
                inv_sqrt[a * k + b] += s * v[a] * v[b];
            }
        }
    }
    let mut row = vec![0.0; k];
    for r in 0..n {
        for (b, o) in row.iter_mut().enumerate() {
            *o = (0..k).map(|a| e[r * k + a] * inv_sqrt[a * k + b]).sum();
        }
        e[r * k..(r + 1) * k].copy_from_slice(&row);
    }
}

/// `∇(μ, σ) fᵢ` as one `2κ` vector.
fn data_gradient(model: &VaeModel, x_row: &[f64], eps: &Tensor, mu: &[f64], sigma: &[f64]) -> Result<Vec<f64>> {
    let (m, k) = (eps.rows(), eps.cols());
    let d = x_row.len();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let mu_v = tape.param(Tensor::matrix(1, k, mu.to_vec())?);
    let sg_v = tape.param(Tensor::matrix(1, k, sigma.to_vec())?);
    let ones = tape.constant(Tensor::filled(&[m, 1], 1.0));
    let mu_b = tape.matmul(ones, mu_v)?;
    let sg_b = tape.matmul(ones, sg_v)?;
    let ev = tape.constant(eps.clone());
    let noise = tape.mul(sg_b, ev)?;
    let z = tape.add(mu_b, noise)?;
    let out = model.decode_on(&mut tape, &bound, z)?.out;
    let mut xs = Vec::with_capacity(m * d);
    (0..m).for_each(|_| xs.extend_from_slice(x_row));
    let xv = tape.constant(Tensor::new(vec![m, d], xs)?);
    let r = tape.sub(xv, out)?;
    let sq = tape.square(r)?;
    let s = tape.sum(sq)?;
    let f = tape.scale(s, 1.0 / m as f64)?;
    let g = tape.backward(f)?;
    let mut v = g.wrt(&tape, mu_v).into_values();
    v.extend(g.wrt(&tape, sg_v).into_values());
    Ok(v)
}

/// Largest `‖∇f(p₁) − ∇f(p₂)‖ / ‖p₁ − p₂‖` over probe pairs at the same
/// datum. Probe `k` sits at datum `k mod n` with a uniform point in the
/// probe box, so the estimate is a lower bound on `L` and never decreases
/// as `n_probe` grows for a fixed seed.
pub fn estimate_lipschitz(model: &VaeModel, batch: &DataBatch, n_probe: usize, rng: &mut LabRng) -> Result<f64> {
    if n_probe < 2 {
        return Err(Error::Parameter(format!("n_probe must be >= 2, got {n_probe}")));
    }
    if batch.n() == 0 || batch.d() != model.data_dim() {
        return Err(Error::Shape {
            op: "lipschitz batch",
            left: vec![batch.n(), batch.d()],
            right: vec![batch.n(), model.data_dim()],
        });
    }
    let k = model.latent_dim();
    let m = N_EPS.max(k + 2);
    let mut e = normal_vec(rng, m * k);
    whiten(&mut e, m, k);
    let eps = Tensor::new(vec![m, k], e)?;

    let n = batch.n();
    let mut groups: Vec<Vec<(Vec<f64>, Vec<f64>)>> = vec![Vec::new(); n];
    for p in 0..n_probe {
        let mu: Vec<f64> = (0..k).map(|_| rng.random_range(-MU_BOX..=MU_BOX)).collect();
        let sg: Vec<f64> = (0..k).map(|_| rng.random_range(SIGMA_MIN..=SIGMA_MAX)).collect();
        let i = p % n;
        let g = data_gradient(model, batch.x().row(i), &eps, &mu, &sg)?;
        let mut point = mu;
        point.extend(sg);
        groups[i].push((point, g));
    }
    let mut best = 0.0f64;
    for group in &groups {
        for a in 0..group.len() {
            for b in 0..a {
                let (pa, ga) = &group[a];
                let (pb, gb) = &group[b];
                let dp: f64 = pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum();
                if dp == 0.0 {
                    continue;
                }
                let dg: f64 = ga.iter().zip(gb).map(|(x, y)| (x - y) * (x - y)).sum();
                best = best.max((dg / dp).sqrt());
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth_lowrank;
    use crate::linalg::matmul;
    use crate::nets::{DecoderSpec, ModelSpec};
    use crate::rng::seeded;

    #[test]
    fn whitening_is_exact() {
        let mut rng = seeded(2);
        let (n, k) = (50, 3);
        let mut e = normal_vec(&mut rng, n * k);
        whiten(&mut e, n, k);
        for a in 0..k {
            let m: f64 = (0..n).map(|r| e[r * k + a]).sum::<f64>() / n as f64;
            assert!(m.abs() < 1e-12);
            for b in 0..k {
                let c: f64 = (0..n).map(|r| e[r * k + a] * e[r * k + b]).sum::<f64>() / n as f64;
                assert!((c - if a == b { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
    }

    /// `2·λmax(WᵀW)` for the affine decoder `W` (`[d, κ]`).
    fn affine_l(model: &VaeModel) -> f64 {
        let w = crate::linear_oracle::decoder_weights(model).unwrap();
        let (d, k) = (w.rows(), w.cols());
        let wt = crate::linalg::transpose(w.values(), d, k);
        let g = matmul(&wt, w.values(), k, d, k);
        2.0 * sym_eigen(&g, k).values[0]
    }

    #[test]
    fn affine_estimate_within_factor_two_of_analytic() {
        let batch = synth_lowrank(3, 5, &[2.0, 1.0, 0.5], 1).unwrap();
        let model = VaeModel::new(ModelSpec::affine(5, 3), 9).unwrap();
        let l = affine_l(&model);
        let est = estimate_lipschitz(&model, &batch, 600, &mut seeded(3)).unwrap();
        assert!(est <= l * (1.0 + 1e-9), "{est} > {l}");
        assert!(est >= l / 2.0, "{est} < {l}/2");
    }

    #[test]
    fn constant_decoder_is_zero() {
        let batch = synth_lowrank(2, 3, &[1.0], 1).unwrap();
        let mut spec = ModelSpec::affine(3, 2);
        spec.decoder = DecoderSpec::Constant;
        let model = VaeModel::new(spec, 1).unwrap();
        assert_eq!(estimate_lipschitz(&model, &batch, 20, &mut seeded(1)).unwrap(), 0.0);
    }

    #[test]
    fn monotone_in_probe_count() {
        let batch = synth_lowrank(2, 4, &[1.0, 0.3], 5).unwrap();
        let model = VaeModel::new(ModelSpec::mlp(4, 2, 1, 6), 2).unwrap();
        let mut prev = 0.0;
        for n in [4, 16, 64] {
            let est = estimate_lipschitz(&model, &batch, n, &mut seeded(11)).unwrap();
            assert!(est >= prev);
            prev = est;
        }
        assert!(estimate_lipschitz(&model, &batch, 1, &mut seeded(1)).is_err());
    }
}
