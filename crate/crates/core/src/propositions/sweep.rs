//! Fixed-`γ` sweeps: one fresh VAE per grid value, counting collapsed
//! dimensions as `γ` grows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::DataBatch;
use crate::diagnostics::CollapseReport;
use crate::error::{Error, Result};
use crate::nets::{ModelSpec, VaeModel};
use crate::objective::GammaMode;
use crate::rng::derive_seed;
use crate::trainer::{train, FailureRecord, TrainConfig, TrainMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub gamma: f64,
    pub report: Option<CollapseReport>,
    pub failed: Option<FailureRecord>,
    /// `max |μ_x(μ_z(x)) − x̄|` over the batch.
    pub decoder_mean_deviation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
}

impl SweepReport {
    pub fn collapsed_counts(&self) -> Vec<Option<usize>> {
        self.entries
            .iter()
            .map(|e| e.report.as_ref().map(|r| r.collapsed_units))
            .collect()
    }

    /// Smallest grid `γ` with every dimension collapsed and the decoder within
    /// `tol` of `x̄`.
    pub fn full_collapse_gamma(&self, tol: f64) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| match (&e.report, e.decoder_mean_deviation) {
                (Some(r), Some(dev)) => r.collapsed_units == r.latent_dim() && dev <= tol,
                _ => false,
            })
            .map(|e| e.gamma)
    }

    /// Whether counts never drop by more than `slack` between adjacent
    /// successful entries.
    pub fn is_monotone(&self, slack: usize) -> bool {
        let c: Vec<usize> = self.collapsed_counts().into_iter().flatten().collect();
        c.windows(2).all(|w| w[1] + slack >= w[0])
    }
}

/// Trains a VAE with `γ` fixed at each grid value. Every run starts from the
/// same initialisation (`cfg.seed`); training noise is seeded per grid index.
pub fn collapse_gamma_sweep(spec: &ModelSpec, batch: &DataBatch, gamma_grid: &[f64], cfg: &TrainConfig) -> Result<SweepReport> {
    if gamma_grid.is_empty() {
        return Err(Error::Parameter("gamma grid is empty".into()));
    }
    if gamma_grid.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
        return Err(Error::Parameter("gamma grid values must be > 0".into()));
    }
    if gamma_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Parameter("gamma grid must be strictly ascending".into()));
    }
    let init = VaeModel::new(spec.clone(), cfg.seed)?;
    let entries = gamma_grid
        .par_iter()
        .enumerate()
        .map(|(i, &gamma)| -> Result<SweepEntry> {
            let mut model = init.clone();
            let run_cfg = TrainConfig {
                mode: TrainMode::Vae,
                gamma_mode: GammaMode::Fixed { value: gamma },
                seed: derive_seed(cfg.seed, i as u64),
                ..cfg.clone()
            };
            let log = train(&mut model, batch, &run_cfg)?;
            let dev = if log.failed.is_none() {
                let xh = model.reconstruct(batch.x())?;
                let mean = batch.mean();
                let d = batch.d();
                Some(
                    xh.values()
                        .iter()
                        .enumerate()
                        .map(|(k, v)| (v - mean[k % d]).abs())
                        .fold(0.0, f64::max),
                )
            } else {
                None
            };
            Ok(SweepEntry {
                gamma,
                report: log.report,
                failed: log.failed,
                decoder_mean_deviation: dev,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::exact_spectrum_batch;
    use crate::linear_oracle::{predict_collapsed_count, spectral_profile};

    #[test]
    fn affine_sweep_matches_oracle_counts() {
        let batch = exact_spectrum_batch(64, 4, &[4.0, 1.0, 0.25, 0.0625], 2).unwrap();
        let grid = [0.03, 0.5, 2.0, 8.0];
        let cfg = TrainConfig {
            iterations: 4000,
            lr0: 1e-2,
            lr_halving_period: 1000,
            eval_every: 1000,
            seed: 3,
            ..Default::default()
        };
        let r = collapse_gamma_sweep(&ModelSpec::affine(4, 4), &batch, &grid, &cfg).unwrap();
        let prof = spectral_profile(&batch);
        for (e, g) in r.entries.iter().zip(grid) {
            let want = predict_collapsed_count(&prof, 4, g).unwrap();
            assert_eq!(e.report.as_ref().unwrap().collapsed_units, want, "gamma {g}");
        }
        assert!(r.is_monotone(0));
        assert_eq!(r.full_collapse_gamma(0.05), Some(8.0));
        assert!(collapse_gamma_sweep(&ModelSpec::affine(4, 4), &batch, &[2.0, 1.0], &cfg).is_err());
    }
}
