//! Closed-form optimum of the affine-decoder VAE (probabilistic PCA) and the
//! fixed-`γ` collapse count it implies.
//!
//! Spectra are eigenvalues of the centred, `1/n`-normalised second-moment
//! matrix; the trainer's energy uses the same normalisation, so oracle and
//! trained models are directly comparable.

use serde::{Deserialize, Serialize};

use crate::datasets::DataBatch;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::linalg::{matmul, orthonormal_columns, sym_eigen, transpose};
use crate::nets::{Decoder, ModelSpec, VaeModel};
use crate::objective::GammaMode;

/// Relative tolerance below which an eigenvalue is reported as exactly zero.
pub const RANK_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralProfile {
    /// Descending, non-negative.
    pub eigenvalues: Vec<f64>,
    /// `d × d` row-major; column `j` pairs with `eigenvalues[j]`.
    pub eigenvectors: Vec<f64>,
    pub mean: Vec<f64>,
    pub rank: usize,
}

impl SpectralProfile {
    pub fn d(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Profile of a known spectrum in the standard basis, centred at zero.
    pub fn from_eigenvalues(eigenvalues: &[f64]) -> Result<Self> {
        if eigenvalues.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Parameter("eigenvalues must be finite and >= 0".into()));
        }
        let d = eigenvalues.len();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));
        let mut vectors = vec![0.0; d * d];
        for (j, &src) in order.iter().enumerate() {
            vectors[src * d + j] = 1.0;
        }
        let values: Vec<f64> = order.iter().map(|&i| eigenvalues[i]).collect();
        let rank = count_rank(&values);
        Ok(SpectralProfile {
            eigenvalues: values,
            eigenvectors: vectors,
            mean: vec![0.0; d],
            rank,
        })
    }

    fn vector(&self, j: usize) -> Vec<f64> {
        let d = self.d();
        (0..d).map(|r| self.eigenvectors[r * d + j]).collect()
    }
}

fn count_rank(values: &[f64]) -> usize {
    values.iter().filter(|l| **l > 0.0).count()
}

pub fn spectral_profile(batch: &DataBatch) -> SpectralProfile {
    let d = batch.d();
    let eig = sym_eigen(&batch.centered_second_moment(), d);
    let top = eig.values.first().copied().unwrap_or(0.0).abs().max(1.0);
    let values: Vec<f64> = eig
        .values
        .iter()
        .map(|l| if *l <= RANK_TOL * top { 0.0 } else { *l })
        .collect();
    let rank = count_rank(&values);
    SpectralProfile {
        eigenvalues: values,
        eigenvectors: eig.vectors,
        mean: batch.mean().to_vec(),
        rank,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpcaSolution {
    /// `d × κ`, orthogonal columns, `‖W_j‖² = (λ_j − γ)₊`.
    pub w_star: Tensor,
    pub b_star: Vec<f64>,
    pub gamma_star: f64,
    pub collapsed_dims: usize,
}

/// Global optimum of the affine VAE. Learned `γ` is the mean of the `d − κ`
/// trailing eigenvalues; fixed `γ` is used as given. Latent `j` collapses
/// when `λ_j ≤ γ`.
pub fn ppca_closed_form(profile: &SpectralProfile, kappa: usize, gamma_mode: &GammaMode) -> Result<PpcaSolution> {
    let d = profile.d();
    if kappa == 0 || kappa > d {
        return Err(Error::Parameter(format!(
            "kappa must be in 1..={d}, got {kappa}"
        )));
    }
    let gamma = match gamma_mode {
        GammaMode::Learned => {
            let tail = &profile.eigenvalues[kappa..];
            if tail.is_empty() {
                0.0
            } else {
                tail.iter().sum::<f64>() / tail.len() as f64
            }
        }
        GammaMode::Fixed { value } => {
            gamma_mode.validate()?;
            *value
        }
        GammaMode::WarmStart { .. } => {
            return Err(Error::Unsupported(
                "the closed form needs a learned or fixed gamma".into(),
            ))
        }
    };
    let mut w = Tensor::zeros(&[d, kappa]);
    let mut collapsed = 0;
    for j in 0..kappa {
        let excess = profile.eigenvalues[j] - gamma;
        if excess <= 0.0 {
            collapsed += 1;
            continue;
        }
        let s = excess.sqrt();
        for (r, u) in profile.vector(j).iter().enumerate() {
            w.set(r, j, s * u);
        }
    }
    Ok(PpcaSolution {
        w_star: w,
        b_star: profile.mean.clone(),
        gamma_star: gamma,
        collapsed_dims: collapsed,
    })
}

/// Number of latents with `λ_j ≤ γ` among the top `κ` (latents beyond `d`
/// always collapse).
pub fn predict_collapsed_count(profile: &SpectralProfile, kappa: usize, gamma: f64) -> Result<usize> {
    if !(gamma >= 0.0) {
        return Err(Error::Parameter(format!("gamma must be >= 0, got {gamma}")));
    }
    let within = kappa.min(profile.d());
    let below = profile.eigenvalues[..within]
        .iter()
        .filter(|l| **l <= gamma)
        .count();
    Ok(below + (kappa - within))
}

/// Largest principal angle between the spans of the non-zero columns of two
/// `d × k` matrices. When the spans differ in dimension, the smaller one is
/// measured against the larger.
pub fn subspace_angle(w_a: &Tensor, w_b: &Tensor) -> Result<f64> {
    if w_a.shape().len() != 2 || w_b.shape().len() != 2 || w_a.rows() != w_b.rows() {
        return Err(Error::Shape {
            op: "subspace angle",
            left: w_a.shape().to_vec(),
            right: w_b.shape().to_vec(),
        });
    }
    let d = w_a.rows();
    let basis = |w: &Tensor| {
        let scale = w.max_abs().max(f64::MIN_POSITIVE);
        orthonormal_columns(w.values(), d, w.cols(), 1e-10 * scale.max(1e-300))
    };
    if w_a.max_abs() == 0.0 || w_b.max_abs() == 0.0 {
        return Err(Error::UndefinedAngle("an operand has no non-zero column".into()));
    }
    let (qa, ra) = basis(w_a);
    let (qb, rb) = basis(w_b);
    let (small, rs, large, rl) = if ra <= rb {
        (qa, ra, qb, rb)
    } else {
        (qb, rb, qa, ra)
    };
    // residual R = (I − Q_l Q_lᵀ) Q_s
    let proj = matmul(&transpose(&large, d, rl), &small, rl, d, rs);
    let back = matmul(&large, &proj, d, rl, rs);
    let resid: Vec<f64> = small.iter().zip(&back).map(|(s, b)| s - b).collect();
    let gram = matmul(&transpose(&resid, d, rs), &resid, rs, d, rs);
    let top = sym_eigen(&gram, rs).values[0].max(0.0);
    Ok(top.sqrt().min(1.0).asin())
}

/// Affine VAE sitting exactly at `sol`: decoder `(W*, b*)`, `γ*`, and the
/// exact Gaussian posterior as encoder,
/// `μ_j = W_jᵀ(x − b)/m_j`, `σ_j² = γ/m_j` with `m_j = ‖W_j‖² + γ`.
pub fn embed_ppca(sol: &PpcaSolution) -> Result<VaeModel> {
    let (d, k) = (sol.w_star.rows(), sol.w_star.cols());
    let g = sol.gamma_star;
    if !(g > 0.0) {
        return Err(Error::Parameter(format!(
            "embedding needs gamma > 0, got {g}"
        )));
    }
    let mut model = VaeModel::new(ModelSpec::affine(d, k), 0)?;
    let mut mu_w = Tensor::zeros(&[k, d]);
    let mut mu_b = vec![0.0; k];
    let mut lv_b = vec![0.0; k];
    for j in 0..k {
        let col = sol.w_star.column(j);
        let m = col.iter().map(|v| v * v).sum::<f64>() + g;
        for (r, c) in col.iter().enumerate() {
            mu_w.set(j, r, c / m);
        }
        mu_b[j] = -col.iter().zip(&sol.b_star).map(|(c, b)| c * b).sum::<f64>() / m;
        lv_b[j] = (g / m).ln();
    }
    model.encoder.head_mu.w = mu_w;
    model.encoder.head_mu.b = Tensor::vector(mu_b)?;
    model.encoder.head_logvar.w = Tensor::zeros(&[k, d]);
    model.encoder.head_logvar.b = Tensor::vector(lv_b)?;
    model.decoder = Decoder::Affine(crate::nets::Linear {
        w: sol.w_star.clone(),
        b: Tensor::vector(sol.b_star.clone())?,
    });
    model.set_gamma(g)?;
    Ok(model)
}

/// Decoder weight matrix `W_x` (`d × κ`) of an affine or soft-threshold model.
pub fn decoder_weights(model: &VaeModel) -> Option<&Tensor> {
    match &model.decoder {
        Decoder::Affine(l) => Some(&l.w),
        Decoder::SoftThreshold { w, .. } => Some(w),
        _ => None,
    }
}
