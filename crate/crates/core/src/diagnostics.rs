//! Collapse measurements: per-dimension KL, `σ_z` histograms, active and
//! collapsed unit counts, the implicit `γ*`, and the collapse taxonomy label.

use serde::{Deserialize, Serialize};

use crate::datasets::DataBatch;
use crate::error::{Error, Result};
use crate::nets::VaeModel;
use crate::objective::{ae_loss, kl_diag_gaussian, optimal_gamma};
use crate::rng::LabRng;

/// Every threshold the diagnostics use, in one place.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseThresholds {
    /// Dimension `j` is collapsed when its mean KL is below this (nats).
    pub collapsed_kl: f64,
    /// Dimension `j` is active when the variance of `μ_{z,j}` exceeds this.
    pub active_mu_variance: f64,
    /// `σ` values in `[lo, hi]` count as near 1.
    pub near_one: (f64, f64),
    /// Reconstruction is poor above this multiple of the AE baseline.
    pub poor_recon_ratio: f64,
    /// Without a baseline, reconstruction is poor at or above this fraction
    /// of `γ̄` (the error of predicting `x̄` everywhere).
    pub poor_recon_gamma_bar_fraction: f64,
}

impl Default for CollapseThresholds {
    fn default() -> Self {
        CollapseThresholds {
            collapsed_kl: 1e-3,
            active_mu_variance: 1e-2,
            near_one: (0.95, 1.05),
            poor_recon_ratio: 1.5,
            poor_recon_gamma_bar_fraction: 0.95,
        }
    }
}

/// Taxonomy tag. Outlier-driven and autoregressive collapse cannot occur
/// with a `γI` decoder covariance and are not represented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollapseLabel {
    /// (i): superfluous dimensions at the prior, good reconstructions.
    HealthySelective,
    /// (ii): fixed `γ` large enough that the KL term dominates.
    FixedGammaCollapse,
    /// (v): learned `γ`, collapsed anyway.
    LocalMinCollapse,
    Ambiguous,
}

impl CollapseLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            CollapseLabel::HealthySelective => "healthy_selective",
            CollapseLabel::FixedGammaCollapse => "fixed_gamma_collapse",
            CollapseLabel::LocalMinCollapse => "local_min_collapse",
            CollapseLabel::Ambiguous => "ambiguous",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub kl_per_dim: Vec<f64>,
    pub sigma_mean_per_dim: Vec<f64>,
    pub mu_variance_per_dim: Vec<f64>,
    pub active_units: usize,
    pub collapsed_units: usize,
    /// `(1/nd) Σ ‖x − μ_x(μ_z(x))‖²`.
    pub recon_mse: f64,
    /// `γ*`, the Monte-Carlo mean squared residual under `q(z|x)`.
    pub implicit_gamma: f64,
    pub sigma_near_one_fraction: f64,
    pub gamma: f64,
    pub gamma_bar: f64,
    pub gamma_fixed: bool,
    pub label: CollapseLabel,
}

impl CollapseReport {
    pub fn latent_dim(&self) -> usize {
        self.kl_per_dim.len()
    }

    pub fn ambiguous_units(&self) -> usize {
        self.latent_dim() - self.active_units - self.collapsed_units
    }
}

/// Inputs to [`classify_category`] beyond the report itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyContext {
    pub gamma_fixed: bool,
    /// AE reconstruction error for the same architecture, when known.
    pub recon_baseline: Option<f64>,
}

pub fn classify_category(report: &CollapseReport, ctx: &ClassifyContext, th: &CollapseThresholds) -> CollapseLabel {
    let poor = match ctx.recon_baseline {
        Some(b) => report.recon_mse > th.poor_recon_ratio * b,
        None => report.recon_mse >= th.poor_recon_gamma_bar_fraction * report.gamma_bar,
    };
    let k = report.latent_dim();
    if poor && 2 * report.collapsed_units >= k {
        return if ctx.gamma_fixed {
            CollapseLabel::FixedGammaCollapse
        } else {
            CollapseLabel::LocalMinCollapse
        };
    }
    if !poor && report.collapsed_units > 0 {
        return CollapseLabel::HealthySelective;
    }
    CollapseLabel::Ambiguous
}

pub fn collapse_report(model: &VaeModel, batch: &DataBatch, n_mc: usize, rng: &mut LabRng) -> Result<CollapseReport> {
    collapse_report_with(model, batch, n_mc, rng, &CollapseThresholds::default())
}

/// Labels with `gamma_fixed = !model.gamma_trainable` and no AE baseline.
pub fn collapse_report_with(
    model: &VaeModel,
    batch: &DataBatch,
    n_mc: usize,
    rng: &mut LabRng,
    th: &CollapseThresholds,
) -> Result<CollapseReport> {
    if batch.n() == 0 {
        return Err(Error::Parameter("evaluation batch is empty".into()));
    }
    let lg = model.encode(batch.x())?;
    let (n, k) = (lg.n(), lg.kappa());
    let kl = kl_diag_gaussian(&lg);
    let mut sigma_mean = vec![0.0; k];
    let mut mu_mean = vec![0.0; k];
    let mut near = 0usize;
    for i in 0..n {
        for j in 0..k {
            let s = lg.sigma().get(i, j);
            sigma_mean[j] += s / n as f64;
            mu_mean[j] += lg.mu().get(i, j) / n as f64;
            if s >= th.near_one.0 && s <= th.near_one.1 {
                near += 1;
            }
        }
    }
    let mut mu_var = vec![0.0; k];
    for i in 0..n {
        for j in 0..k {
            mu_var[j] += (lg.mu().get(i, j) - mu_mean[j]).powi(2) / n as f64;
        }
    }
    let collapsed = kl.iter().filter(|v| **v < th.collapsed_kl).count();
    let active = mu_var
        .iter()
        .zip(&kl)
        .filter(|(v, kl)| **v > th.active_mu_variance && **kl >= th.collapsed_kl)
        .count();
    let mut report = CollapseReport {
        kl_per_dim: kl,
        sigma_mean_per_dim: sigma_mean,
        mu_variance_per_dim: mu_var,
        active_units: active,
        collapsed_units: collapsed,
        recon_mse: ae_loss(model, batch)?,
        implicit_gamma: optimal_gamma(model, batch, n_mc, rng)?,
        sigma_near_one_fraction: near as f64 / (n * k) as f64,
        gamma: model.gamma(),
        gamma_bar: batch.gamma_bar(),
        gamma_fixed: !model.gamma_trainable,
        label: CollapseLabel::Ambiguous,
    };
    report.label = classify_category(
        &report,
        &ClassifyContext {
            gamma_fixed: report.gamma_fixed,
            recon_baseline: None,
        },
        th,
    );
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaHistogram {
    /// `(bin_left, bin_right, count)`
    pub bins: Vec<(f64, f64, usize)>,
}

impl SigmaHistogram {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.2).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,count\n");
        for (l, r, c) in &self.bins {
            s.push_str(&format!("{l:.16e},{r:.16e},{c}\n"));
        }
        s
    }
}

/// Equal-width bins over `[0, max(1.2, max σ)]` of every `(datum, dim)` `σ_z`.
pub fn sigma_histogram(model: &VaeModel, batch: &DataBatch, n_bins: usize) -> Result<SigmaHistogram> {
    if n_bins < 2 {
        return Err(Error::Parameter(format!("n_bins must be >= 2, got {n_bins}")));
    }
    let lg = model.encode(batch.x())?;
    let sig = lg.sigma().values();
    let top = sig.iter().copied().fold(1.2, f64::max);
    let width = top / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for &s in sig {
        let b = ((s / width) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    Ok(SigmaHistogram {
        bins: counts
            .into_iter()
            .enumerate()
            .map(|(i, c)| (i as f64 * width, (i + 1) as f64 * width, c))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{exact_spectrum_batch, synth_lowrank};
    use crate::linear_oracle::{embed_ppca, ppca_closed_form, spectral_profile};
    use crate::nets::ModelSpec;
    use crate::objective::GammaMode;
    use crate::rng::seeded;

    #[test]
    fn collapsed_configuration_is_fully_collapsed() {
        let batch = synth_lowrank(20, 5, &[1.0, 0.5], 2).unwrap();
        for (depth, fixed) in [(0usize, true), (2, false)] {
            let spec = if depth == 0 { ModelSpec::affine(5, 3) } else { ModelSpec::mlp(5, 3, depth, 8) };
            let mut m = VaeModel::new(spec, 1).unwrap().collapsed(batch.mean(), batch.gamma_bar()).unwrap();
            m.gamma_trainable = !fixed;
            let r = collapse_report(&m, &batch, 16, &mut seeded(0)).unwrap();
            assert_eq!(r.collapsed_units, 3);
            assert_eq!(r.sigma_near_one_fraction, 1.0);
            assert!((r.implicit_gamma - batch.gamma_bar()).abs() < 1e-12);
            let want = if fixed { CollapseLabel::FixedGammaCollapse } else { CollapseLabel::LocalMinCollapse };
            assert_eq!(r.label, want);
            let h = sigma_histogram(&m, &batch, 12).unwrap();
            let bin = h.bins.iter().find(|b| b.0 <= 1.0 && 1.0 < b.1).unwrap();
            assert_eq!(bin.2, 60);
        }
    }

    #[test]
    fn oracle_fixed_gamma_half_collapses_two() {
        let batch = exact_spectrum_batch(200, 4, &[4.0, 1.0, 0.25, 0.0625], 3).unwrap();
        let sol = ppca_closed_form(&spectral_profile(&batch), 4, &GammaMode::Fixed { value: 0.5 }).unwrap();
        let m = embed_ppca(&sol).unwrap();
        let r = collapse_report(&m, &batch, 8, &mut seeded(1)).unwrap();
        assert_eq!(r.collapsed_units, 2);
        assert_eq!(r.active_units, 2);
    }

    #[test]
    fn histogram_conserves_mass_and_floor() {
        let batch = synth_lowrank(7, 4, &[1.0], 1).unwrap();
        let mut m = VaeModel::new(ModelSpec::affine(4, 3), 3).unwrap();
        let h = sigma_histogram(&m, &batch, 5).unwrap();
        assert_eq!(h.total(), 21);
        assert!(h.to_csv().starts_with("bin_left,bin_right,count\n"));
        // σ pinned at the clamp floor
        m.encoder.head_logvar.w.values_mut().iter_mut().for_each(|v| *v = 0.0);
        m.encoder.head_logvar.b.values_mut().iter_mut().for_each(|v| *v = -60.0);
        let h = sigma_histogram(&m, &batch, 5).unwrap();
        assert_eq!(h.bins[0].2, 21);
        assert!(sigma_histogram(&m, &batch, 1).is_err());
    }

    #[test]
    fn classification_rules() {
        let base = CollapseReport {
            kl_per_dim: vec![0.0, 0.0, 2.0, 2.0],
            sigma_mean_per_dim: vec![1.0; 4],
            mu_variance_per_dim: vec![0.0, 0.0, 1.0, 1.0],
            active_units: 2,
            collapsed_units: 2,
            recon_mse: 0.1,
            implicit_gamma: 0.1,
            sigma_near_one_fraction: 0.5,
            gamma: 0.1,
            gamma_bar: 1.0,
            gamma_fixed: false,
            label: CollapseLabel::Ambiguous,
        };
        let th = CollapseThresholds::default();
        let learned = ClassifyContext { gamma_fixed: false, recon_baseline: Some(0.09) };
        assert_eq!(classify_category(&base, &learned, &th), CollapseLabel::HealthySelective);
        let poor = CollapseReport { recon_mse: 0.99, ..base.clone() };
        assert_eq!(classify_category(&poor, &learned, &th), CollapseLabel::LocalMinCollapse);
        let fixed = ClassifyContext { gamma_fixed: true, ..learned.clone() };
        assert_eq!(classify_category(&poor, &fixed, &th), CollapseLabel::FixedGammaCollapse);
        let none = CollapseReport { collapsed_units: 0, kl_per_dim: vec![2.0; 4], ..base.clone() };
        assert_eq!(classify_category(&none, &learned, &th), CollapseLabel::Ambiguous);
        // pure function
        assert_eq!(classify_category(&poor, &fixed, &th), classify_category(&poor, &fixed, &th));
    }

    #[test]
    fn implicit_gamma_is_optimal_gamma() {
        let batch = synth_lowrank(10, 4, &[1.0, 0.2], 4).unwrap();
        let m = VaeModel::new(ModelSpec::mlp(4, 2, 1, 5), 1).unwrap();
        let r = collapse_report(&m, &batch, 7, &mut seeded(9)).unwrap();
        let g = optimal_gamma(&m, &batch, 7, &mut seeded(9)).unwrap();
        assert_eq!(r.implicit_gamma.to_bits(), g.to_bits());
    }
}
