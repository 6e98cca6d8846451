//! The zero-gradient stationary point: once encoder head rows `j` and the
//! decoder's first-layer column `j` are all zero, the energy gradient in
//! those weights vanishes (exactly for the encoder, in expectation for the
//! decoder).

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::report::{Check, PropositionReport};
use crate::datasets::{synth_lowrank, DataBatch};
use crate::diff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::nets::{Decoder, ModelSpec, VaeModel};
use crate::objective::energy_graph;
use crate::rng::{derive_seed, normal_vec, seeded, LabRng};

/// Per-sample encoder gradients above this are not "exactly zero".
pub const ENCODER_ZERO_TOL: f64 = 1e-12;
/// Decoder mean gradient must lie within this many standard errors of 0.
pub const DECODER_Z_BOUND: f64 = 4.0;
const CHUNK_ROWS: usize = 8192;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroedDimReport {
    pub dim: usize,
    /// Largest per-sample gradient norm over both head rows `dim`.
    pub encoder_max_sample_norm: f64,
    /// Gradient of the energy in decoder first-layer column `dim`, per output unit.
    pub decoder_mean: Vec<f64>,
    pub decoder_stderr: Vec<f64>,
    /// `max |mean| / stderr` (0 where both vanish).
    pub decoder_max_z: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryReport {
    pub dims: Vec<ZeroedDimReport>,
    /// Smallest full-batch gradient norm among the remaining head rows
    /// (`None` when every dimension is zeroed).
    pub active_min_norm: Option<f64>,
    pub n_mc: usize,
    pub pass: bool,
}

/// Product of any latent scales applied before the first decoder layer.
fn latent_scale(dec: &Decoder, j: usize) -> f64 {
    match dec {
        Decoder::Scaled { base, scale } => {
            let s = if scale.len() == 1 { scale.values()[0] } else { scale.values()[j] };
            s * latent_scale(base, j)
        }
        _ => 1.0,
    }
}

/// Evaluates the gradients at `model`, whose latent dimensions `dims` have
/// already been zeroed with [`VaeModel::zero_latent_dim`].
pub fn stationary_point_check(
    model: &VaeModel,
    dims: &[usize],
    batch: &DataBatch,
    n_mc: usize,
    rng: &mut LabRng,
) -> Result<StationaryReport> {
    let k = model.latent_dim();
    if n_mc < 2 {
        return Err(Error::Parameter("n_mc must be >= 2".into()));
    }
    if dims.is_empty() || dims.iter().any(|&j| j >= k) {
        return Err(Error::Parameter(format!("zeroed dims {dims:?} invalid for kappa = {k}")));
    }
    if matches!(model.decoder, Decoder::Constant { .. }) {
        return Err(Error::Unsupported("constant decoder has no first layer in z".into()));
    }
    let n = batch.n();
    let chunk = (CHUNK_ROWS / n.max(1)).max(1);
    let t = 2 * model.encoder.trunk.len();

    let mut enc_max = vec![0.0f64; dims.len()];
    // per-draw decoder column gradients: draws × outputs, per zeroed dim
    let mut dec_draws: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n_mc); dims.len()];
    let mut head_grad: Option<Vec<Tensor>> = None;

    let mut done = 0;
    while done < n_mc {
        let m = chunk.min(n_mc - done);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let lg = tape.constant(Tensor::scalar(model.log_gamma));
        let eps = Tensor::new(vec![m * n, k], normal_vec(rng, m * n * k))?;
        let g = energy_graph(&mut tape, model, &bound, batch.x(), &eps, lg)?;
        let grads = tape.backward(g.total)?;
        let a_mu = grads.wrt(&tape, g.encode.mu);
        let a_lv = grads.wrt(&tape, g.encode.logvar);
        let h = tape.value(g.encode.hidden);
        let first = g.decode.first_linear.ok_or_else(|| {
            Error::Unsupported("decoder exposes no first linear layer".into())
        })?;
        let a_first = grads.wrt(&tape, first);
        let z = tape.value(g.z);
        let outs = a_first.cols();

        for (di, &j) in dims.iter().enumerate() {
            for r in 0..m * n {
                let hn: f64 = h.row(r).iter().map(|v| v * v).sum::<f64>() + 1.0;
                let a = a_mu.get(r, j).powi(2) + a_lv.get(r, j).powi(2);
                enc_max[di] = enc_max[di].max((a * hn).sqrt());
            }
            let s = latent_scale(&model.decoder, j);
            for draw in 0..m {
                let mut gcol = vec![0.0; outs];
                for r in draw * n..(draw + 1) * n {
                    let zj = z.get(r, j) * s;
                    for (o, gc) in gcol.iter_mut().enumerate() {
                        *gc += a_first.get(r, o) * zj;
                    }
                }
                // the graph averages over the m draws of this chunk
                gcol.iter_mut().for_each(|v| *v *= m as f64);
                dec_draws[di].push(gcol);
            }
        }

        let hg: Vec<Tensor> = (0..4).map(|q| grads.wrt(&tape, bound.encoder_vars()[t + q])).collect();
        let w = m as f64 / n_mc as f64;
        match head_grad.as_mut() {
            None => {
                head_grad = Some(
                    hg.into_iter()
                        .map(|g| Tensor::from_parts(g.shape().to_vec(), g.values().iter().map(|v| v * w).collect()))
                        .collect(),
                )
            }
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(hg) {
                    a.values_mut().iter_mut().zip(g.values()).for_each(|(x, y)| *x += w * y);
                }
            }
        }
        done += m;
    }

    let mut out = Vec::new();
    for (di, &j) in dims.iter().enumerate() {
        let draws = &dec_draws[di];
        let outs = draws[0].len();
        let nf = draws.len() as f64;
        let mut mean = vec![0.0; outs];
        let mut se = vec![0.0; outs];
        for o in 0..outs {
            let m = draws.iter().map(|g| g[o]).sum::<f64>() / nf;
            let var = draws.iter().map(|g| (g[o] - m).powi(2)).sum::<f64>() / (nf - 1.0);
            mean[o] = m;
            se[o] = (var / nf).sqrt();
        }
        let max_z = mean
            .iter()
            .zip(&se)
            .map(|(m, s)| if *m == 0.0 { 0.0 } else { m.abs() / s })
            .fold(0.0, f64::max);
        let pass = enc_max[di] <= ENCODER_ZERO_TOL && max_z <= DECODER_Z_BOUND;
        out.push(ZeroedDimReport {
            dim: j,
            encoder_max_sample_norm: enc_max[di],
            decoder_mean: mean,
            decoder_stderr: se,
            decoder_max_z: max_z,
            pass,
        });
    }

    let hg = head_grad.expect("at least one chunk");
    let row_norm = |l: usize| -> f64 {
        let mut s = 0.0;
        for q in [0, 2] {
            let cols = hg[q].cols();
            s += hg[q].values()[l * cols..(l + 1) * cols].iter().map(|v| v * v).sum::<f64>();
            s += hg[q + 1].values()[l].powi(2);
        }
        s.sqrt()
    };
    let active_min_norm = (0..k)
        .filter(|l| !dims.contains(l))
        .map(row_norm)
        .reduce(f64::min);
    let pass = out.iter().all(|d| d.pass) && active_min_norm.is_none_or(|v| v > 0.0);
    Ok(StationaryReport {
        dims: out,
        active_min_norm,
        n_mc,
        pass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryConfig {
    pub depths: Vec<usize>,
    /// Fixed dimensions to zero; `None` picks one at random per configuration.
    pub zero_dims: Option<Vec<usize>>,
    pub n_configs: usize,
    pub n_mc: usize,
    pub seed: u64,
    pub n: usize,
    pub data_dim: usize,
    pub latent_dim: usize,
    pub width: usize,
}

impl Default for StationaryConfig {
    fn default() -> Self {
        StationaryConfig {
            depths: vec![2, 4, 6],
            zero_dims: None,
            n_configs: 10,
            n_mc: 100_000,
            seed: 0,
            n: 4,
            data_dim: 6,
            latent_dim: 4,
            width: 8,
        }
    }
}

/// Random `(depth, seed)` configurations, each checked at a freshly
/// initialised ReLU model with the chosen dimensions zeroed.
pub fn stationary_suite(cfg: &StationaryConfig) -> Result<PropositionReport> {
    if cfg.depths.is_empty() || cfg.n_configs == 0 {
        return Err(Error::Parameter("need at least one depth and one configuration".into()));
    }
    let mut rng = seeded(cfg.seed);
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    for c in 0..cfg.n_configs {
        let depth = cfg.depths[rng.random_range(0..cfg.depths.len())];
        let seed = derive_seed(cfg.seed, c as u64);
        let dims = match &cfg.zero_dims {
            Some(d) => d.clone(),
            None => vec![rng.random_range(0..cfg.latent_dim)],
        };
        let eigs: Vec<f64> = (0..cfg.latent_dim.min(cfg.data_dim)).map(|i| 2f64.powi(-(i as i32))).collect();
        let batch = synth_lowrank(cfg.n, cfg.data_dim, &eigs, seed)?;
        let mut model = VaeModel::new(ModelSpec::mlp(cfg.data_dim, cfg.latent_dim, depth, cfg.width), seed)?;
        for &j in &dims {
            model = model.zero_latent_dim(j)?;
        }
        let rep = stationary_point_check(&model, &dims, &batch, cfg.n_mc, &mut seeded(derive_seed(seed, 1)))?;
        let tag = format!("depth={depth} seed={seed}");
        for d in &rep.dims {
            checks.push(Check::at_most(
                format!("{tag} dim {}: encoder per-sample gradient norm", d.dim),
                d.encoder_max_sample_norm,
                ENCODER_ZERO_TOL,
            ));
            checks.push(Check::at_most(
                format!("{tag} dim {}: decoder column mean gradient (std errors)", d.dim),
                d.decoder_max_z,
                DECODER_Z_BOUND,
            ));
        }
        if let Some(v) = rep.active_min_norm {
            checks.push(Check::above(format!("{tag}: active head rows gradient norm"), v, 0.0));
        }
        rows.push(json!({"depth": depth, "seed": seed, "dims": dims, "report": rep}));
    }
    Ok(PropositionReport::new("stationary", checks, Some(json!({"configs": rows}))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeroed_dim_is_stationary() {
        let batch = synth_lowrank(4, 5, &[1.0, 0.5], 3).unwrap();
        let model = VaeModel::new(ModelSpec::mlp(5, 3, 2, 6), 4).unwrap();
        let z = model.zero_latent_dim(1).unwrap();
        let rep = stationary_point_check(&z, &[1], &batch, 4000, &mut seeded(2)).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert_eq!(rep.dims[0].encoder_max_sample_norm, 0.0);
        assert!(rep.active_min_norm.unwrap() > 0.0);
    }

    #[test]
    fn unzeroed_dim_has_gradient() {
        let batch = synth_lowrank(4, 5, &[1.0, 0.5], 3).unwrap();
        let model = VaeModel::new(ModelSpec::mlp(5, 3, 1, 6), 4).unwrap();
        let rep = stationary_point_check(&model, &[0], &batch, 200, &mut seeded(2)).unwrap();
        assert!(rep.dims[0].encoder_max_sample_norm > 1e-6);
        assert!(!rep.pass);
    }

    #[test]
    fn decoder_mean_matches_full_batch_gradient() {
        // the per-draw decomposition must sum to the tape gradient of the column
        let batch = synth_lowrank(3, 4, &[1.0], 1).unwrap();
        let model = VaeModel::new(ModelSpec::affine(4, 2), 5).unwrap().zero_latent_dim(0).unwrap();
        let n_mc = 50;
        let rep = stationary_point_check(&model, &[0], &batch, n_mc, &mut seeded(6)).unwrap();

        let mut rng = seeded(6);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let lg = tape.constant(Tensor::scalar(model.log_gamma));
        let eps = Tensor::new(vec![n_mc * 3, 2], normal_vec(&mut rng, n_mc * 3 * 2)).unwrap();
        let g = energy_graph(&mut tape, &model, &bound, batch.x(), &eps, lg).unwrap();
        let grads = tape.backward(g.total).unwrap();
        let w = grads.wrt(&tape, bound.decoder_vars()[0]);
        for o in 0..4 {
            let want = w.get(o, 0);
            assert!((rep.dims[0].decoder_mean[o] - want).abs() < 1e-10 * want.abs().max(1.0));
        }
    }

    #[test]
    fn suite_small() {
        let cfg = StationaryConfig {
            n_configs: 3,
            n_mc: 2000,
            ..Default::default()
        };
        let r = stationary_suite(&cfg).unwrap();
        assert!(r.pass, "{:?}", r.failed().collect::<Vec<_>>());
    }
}
