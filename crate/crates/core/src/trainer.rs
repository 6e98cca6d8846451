//! Adam training of VAE and AE models with learning-rate halving and `γ`
//! scheduling.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::DataBatch;
use crate::diagnostics::{collapse_report, CollapseReport};
use crate::diff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::nets::{ModelSpec, VaeModel};
use crate::objective::{ae_graph, ae_loss, energy_graph, optimal_gamma_with_stderr, vae_energy, GammaMode};
use crate::rng::{derive_seed, normal_vec, seeded, LabRng, RngState};

/// First and second moment estimates for a list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lens: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            eps,
            t: 0,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape {
            op: "adam",
            left: vec![params.len()],
            right: vec![grads.len(), state.m.len()],
        });
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[k].len() != g.len() {
            return Err(Error::Shape {
                op: "adam",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, (w, &gi)) in p.values_mut().iter_mut().zip(g.values()).enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Vae,
    Ae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_halving_period: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub gamma_mode: GammaMode,
    pub seed: u64,
    pub eval_every: usize,
    pub mc_samples_train: usize,
    /// Draws per datum for the logged evaluations and the final report.
    pub mc_samples_eval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Vae,
            iterations: 20_000,
            batch_size: 64,
            lr0: 2e-4,
            lr_halving_period: 8_000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-7,
            gamma_mode: GammaMode::Learned,
            seed: 0,
            eval_every: 500,
            mc_samples_train: 1,
            mc_samples_eval: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("iterations", self.iterations),
            ("batch_size", self.batch_size),
            ("lr_halving_period", self.lr_halving_period),
            ("eval_every", self.eval_every),
            ("mc_samples_train", self.mc_samples_train),
            ("mc_samples_eval", self.mc_samples_eval),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be >= 1")));
            }
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::Parameter(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Parameter(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Parameter("adam_eps must be > 0".into()));
        }
        self.gamma_mode.validate()
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        self.lr0 * 0.5f64.powi((iter / self.lr_halving_period) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub total_energy: f64,
    pub recon: f64,
    pub kl_total: f64,
    pub gamma: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub iteration: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
    pub failed: Option<FailureRecord>,
    /// Final diagnostics (VAE runs that did not fail).
    pub report: Option<CollapseReport>,
    /// Evaluation stream state just before `report` was computed, so the
    /// report can be reproduced from a checkpoint.
    pub report_rng: Option<RngState>,
    pub wall_time_secs: f64,
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,total_energy,recon,kl_total,gamma,lr\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.iteration, r.total_energy, r.recon, r.kl_total, r.gamma, r.lr
            ));
        }
        s
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }
}

fn eval_row(model: &VaeModel, batch: &DataBatch, cfg: &TrainConfig, iter: usize, rng: &mut LabRng) -> Result<LogRow> {
    let lr = cfg.lr_at(iter);
    Ok(match cfg.mode {
        TrainMode::Vae => {
            let lb = vae_energy(model, batch, None, cfg.mc_samples_eval, rng)?;
            LogRow {
                iteration: iter,
                total_energy: lb.total_energy,
                recon: lb.recon,
                kl_total: lb.kl_total,
                gamma: lb.gamma,
                lr,
            }
        }
        TrainMode::Ae => {
            let l = ae_loss(model, batch)?;
            LogRow {
                iteration: iter,
                total_energy: l,
                recon: l,
                kl_total: 0.0,
                gamma: model.gamma(),
                lr,
            }
        }
    })
}

/// Epoch-shuffled mini-batches, or the full batch when it fits.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: LabRng,
}

impl Batcher {
    fn next(&mut self, n: usize) -> Option<Vec<usize>> {
        if n <= self.size {
            return None;
        }
        if self.pos + self.size > self.order.len() {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let idx = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        Some(idx)
    }
}

/// One gradient step; returns the (mini-batch) loss.
fn step(
    model: &mut VaeModel,
    x: &Tensor,
    cfg: &TrainConfig,
    learn_gamma: bool,
    adam: &mut AdamState,
    adam_gamma: &mut AdamState,
    lr: f64,
    rng: &mut LabRng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let n = x.rows();
    let (loss, lg_var) = match cfg.mode {
        TrainMode::Vae => {
            let lg_t = Tensor::scalar(model.log_gamma);
            let lg = if learn_gamma { tape.param(lg_t) } else { tape.constant(lg_t) };
            let k = model.latent_dim();
            let m = cfg.mc_samples_train;
            let eps = Tensor::new(vec![m * n, k], normal_vec(rng, m * n * k))?;
            let g = energy_graph(&mut tape, model, &bound, x, &eps, lg)?;
            // per-datum scale keeps step sizes independent of the batch size
            (tape.scale(g.total, 1.0 / n as f64)?, Some(lg))
        }
        TrainMode::Ae => (ae_graph(&mut tape, model, &bound, x)?, None),
    };
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = tape.backward(loss)?;
    let gs: Vec<Tensor> = bound.vars.iter().map(|v| grads.wrt(&tape, *v)).collect();
    if gs.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    {
        let mut ps = model.params_mut();
        adam_step(&mut ps, &gs, adam, lr)?;
    }
    if let (true, Some(lg)) = (learn_gamma, lg_var) {
        let g = grads.wrt(&tape, lg);
        let mut t = Tensor::scalar(model.log_gamma);
        adam_step(&mut [&mut t], &[g], adam_gamma, lr)?;
        model.log_gamma = t.item();
    }
    model.project();
    Ok(value)
}

/// Trains `model` in place on `batch`.
///
/// A non-finite loss or gradient ends the run; the log then carries the
/// offending iteration and the rows recorded so far.
pub fn train(model: &mut VaeModel, batch: &DataBatch, cfg: &TrainConfig) -> Result<RunLog> {
    cfg.validate()?;
    if batch.d() != model.data_dim() {
        return Err(Error::Shape {
            op: "train data",
            left: vec![batch.n(), batch.d()],
            right: vec![batch.n(), model.data_dim()],
        });
    }
    let start = Instant::now();
    let mut noise_rng = seeded(derive_seed(cfg.seed, 1));
    let mut eval_rng = seeded(derive_seed(cfg.seed, 2));
    let mut batcher = Batcher {
        order: Vec::new(),
        pos: 0,
        size: cfg.batch_size,
        rng: seeded(derive_seed(cfg.seed, 3)),
    };
    let lens: Vec<usize> = model.named_params().iter().map(|(_, t)| t.len()).collect();
    let mut adam = AdamState::new(&lens, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut adam_gamma = AdamState::new(&[1], cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    model.gamma_trainable = !cfg.gamma_mode.is_fixed();

    let mut rows = Vec::new();
    let mut failed = None;
    for iter in 0..=cfg.iterations {
        let scheduled = cfg.gamma_mode.gamma_at(iter);
        if let Some(g) = scheduled {
            model.set_gamma(g)?;
        }
        if iter % cfg.eval_every == 0 || iter == cfg.iterations {
            match eval_row(model, batch, cfg, iter, &mut eval_rng) {
                Ok(r) => rows.push(r),
                Err(e) => {
                    failed = Some(FailureRecord { iteration: iter, reason: e.to_string() });
                    break;
                }
            }
        }
        if iter == cfg.iterations {
            break;
        }
        let x = match batcher.next(batch.n()) {
            None => batch.x().clone(),
            Some(idx) => batch.select(&idx).x().clone(),
        };
        let learn = cfg.mode == TrainMode::Vae && scheduled.is_none();
        if let Err(e) = step(model, &x, cfg, learn, &mut adam, &mut adam_gamma, cfg.lr_at(iter), &mut noise_rng) {
            failed = Some(FailureRecord { iteration: iter, reason: e.to_string() });
            break;
        }
    }
    let (report, report_rng) = if failed.is_none() && cfg.mode == TrainMode::Vae {
        let state = RngState::capture(&eval_rng);
        (Some(collapse_report(model, batch, cfg.mc_samples_eval, &mut eval_rng)?), Some(state))
    } else {
        (None, None)
    };
    Ok(RunLog {
        rows,
        failed,
        report,
        report_rng,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// One AE/VAE pair at a given depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedResult {
    pub depth: usize,
    pub seed: u64,
    /// Deterministic AE reconstruction error per entry.
    pub ae_recon: Option<f64>,
    /// Monte-Carlo VAE reconstruction error per entry under `q(z|x)`.
    pub vae_recon: Option<f64>,
    pub vae_recon_stderr: Option<f64>,
    /// `γ*` from an independent set of draws.
    pub optimal_gamma: Option<f64>,
    pub optimal_gamma_stderr: Option<f64>,
    pub final_gamma: Option<f64>,
    pub report: Option<CollapseReport>,
    pub ae_log: RunLog,
    pub vae_log: RunLog,
}

/// Architecture at `depth`: affine for 0, otherwise `depth` ReLU layers of
/// `width` on both sides.
pub fn depth_spec(data_dim: usize, latent_dim: usize, depth: usize, width: usize) -> ModelSpec {
    if depth == 0 {
        ModelSpec::affine(data_dim, latent_dim)
    } else {
        ModelSpec::mlp(data_dim, latent_dim, depth, width)
    }
}

/// Trains an AE and a VAE of identical architecture and initialisation at
/// every depth. Runs are independent and execute in parallel.
pub fn paired_depth_run(
    depths: &[usize],
    width: usize,
    latent_dim: usize,
    batch: &DataBatch,
    cfg: &TrainConfig,
) -> Result<Vec<PairedResult>> {
    if depths.is_empty() {
        return Err(Error::Parameter("depths must be non-empty".into()));
    }
    cfg.validate()?;
    depths
        .par_iter()
        .enumerate()
        .map(|(i, &depth)| {
            let seed = derive_seed(cfg.seed, i as u64);
            let spec = depth_spec(batch.d(), latent_dim, depth, width);
            let init = VaeModel::new(spec, seed)?;

            let mut ae = init.clone();
            let ae_cfg = TrainConfig { mode: TrainMode::Ae, seed, ..cfg.clone() };
            let ae_log = train(&mut ae, batch, &ae_cfg)?;
            let ae_recon = ae_log.failed.is_none().then(|| ae_loss(&ae, batch)).transpose()?;

            let mut vae = init;
            let vae_cfg = TrainConfig { mode: TrainMode::Vae, seed, ..cfg.clone() };
            let vae_log = train(&mut vae, batch, &vae_cfg)?;
            let (mut vr, mut vs, mut og, mut os, mut fg) = (None, None, None, None, None);
            if vae_log.failed.is_none() {
                let lb = vae_energy(&vae, batch, None, cfg.mc_samples_eval, &mut seeded(derive_seed(seed, 10)))?;
                let (g, gs) =
                    optimal_gamma_with_stderr(&vae, batch, cfg.mc_samples_eval, &mut seeded(derive_seed(seed, 11)))?;
                vr = Some(lb.recon);
                vs = Some(lb.recon_stderr);
                og = Some(g);
                os = Some(gs);
                fg = Some(vae.gamma());
            }
            Ok(PairedResult {
                depth,
                seed,
                ae_recon,
                vae_recon: vr,
                vae_recon_stderr: vs,
                optimal_gamma: og,
                optimal_gamma_stderr: os,
                final_gamma: fg,
                report: vae_log.report.clone(),
                ae_log,
                vae_log,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{exact_spectrum_batch, synth_lowrank};
    use crate::linear_oracle::{decoder_weights, ppca_closed_form, spectral_profile, subspace_angle};

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let mut s = AdamState::new(&[2], 0.9, 0.999, 1e-7);
        adam_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut s, 0.1).unwrap();
        assert_eq!(p.values(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr() {
        let mut p = Tensor::vector(vec![0.0]).unwrap();
        let mut s = AdamState::new(&[1], 0.9, 0.999, 1e-12);
        let g = Tensor::vector(vec![3.7]).unwrap();
        let mut prev = 0.0;
        for _ in 0..200 {
            adam_step(&mut [&mut p], &[g.clone()], &mut s, 0.01).unwrap();
            let cur = p.values()[0];
            assert!(((prev - cur) - 0.01).abs() < 1e-9);
            prev = cur;
        }
    }

    #[test]
    fn lr_halves() {
        let cfg = TrainConfig { lr0: 1.0, lr_halving_period: 10, ..Default::default() };
        assert_eq!(cfg.lr_at(9), 1.0);
        assert_eq!(cfg.lr_at(10), 0.5);
        assert_eq!(cfg.lr_at(25), 0.25);
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            iterations: 60,
            batch_size: 8,
            lr0: 1e-2,
            eval_every: 20,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let batch = synth_lowrank(20, 4, &[1.0, 0.3], 1).unwrap();
        let spec = ModelSpec::mlp(4, 2, 2, 6);
        let mut a = VaeModel::new(spec.clone(), 3).unwrap();
        let mut b = VaeModel::new(spec, 3).unwrap();
        let la = train(&mut a, &batch, &small_cfg()).unwrap();
        let lb = train(&mut b, &batch, &small_cfg()).unwrap();
        assert_eq!(la.rows, lb.rows);
        assert_eq!(a, b);
        assert_eq!(la.rows.len(), 4);
        assert!(la.to_csv().starts_with("iteration,total_energy,recon,kl_total,gamma,lr\n"));
    }

    #[test]
    fn warm_start_endpoints() {
        let batch = synth_lowrank(10, 3, &[1.0], 1).unwrap();
        let mut m = VaeModel::new(ModelSpec::affine(3, 1), 1).unwrap();
        let cfg = TrainConfig {
            iterations: 20,
            eval_every: 1,
            gamma_mode: GammaMode::WarmStart { schedule: vec![(0, 1e-3), (20, 0.5)] },
            ..small_cfg()
        };
        let log = train(&mut m, &batch, &cfg).unwrap();
        assert!((log.rows[0].gamma - 1e-3).abs() < 1e-15);
        assert!((log.rows[20].gamma - 0.5).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_recorded() {
        let batch = synth_lowrank(10, 3, &[1.0], 1).unwrap();
        let mut m = VaeModel::new(ModelSpec::mlp(3, 2, 1, 4), 1).unwrap();
        let cfg = TrainConfig { lr0: 1e300, iterations: 50, eval_every: 1, ..small_cfg() };
        let log = train(&mut m, &batch, &cfg).unwrap();
        let f = log.failed.expect("run should fail");
        assert!(f.iteration <= 50);
        assert!(log.report.is_none());
        assert!(log.rows.iter().all(|r| r.total_energy.is_finite()));
    }

    #[test]
    fn affine_ae_interpolates_points() {
        // κ ≥ n − 1: an affine AE can fit 8 points exactly
        let batch = synth_lowrank(8, 10, &[1.0; 7], 2).unwrap();
        let mut m = VaeModel::new(ModelSpec::affine(10, 7), 1).unwrap();
        let cfg = TrainConfig {
            mode: TrainMode::Ae,
            iterations: 4000,
            lr0: 1e-2,
            lr_halving_period: 1500,
            eval_every: 1000,
            ..small_cfg()
        };
        let log = train(&mut m, &batch, &cfg).unwrap();
        assert!(log.last().unwrap().recon <= 1e-4, "{:?}", log.last());
    }

    #[test]
    fn affine_learned_gamma_recovers_oracle() {
        let eigs = [4.0, 1.0, 0.25, 0.0625, 0.01, 0.01, 0.01, 0.01];
        let batch = exact_spectrum_batch(64, 8, &eigs, 1).unwrap();
        let mut m = VaeModel::new(ModelSpec::affine(8, 4), 2).unwrap();
        let cfg = TrainConfig {
            iterations: 6000,
            batch_size: 64,
            lr0: 1e-2,
            lr_halving_period: 2000,
            eval_every: 1000,
            mc_samples_eval: 64,
            ..small_cfg()
        };
        let log = train(&mut m, &batch, &cfg).unwrap();
        let r = log.report.unwrap();
        let oracle = ppca_closed_form(&spectral_profile(&batch), 4, &GammaMode::Learned).unwrap();
        let angle = subspace_angle(decoder_weights(&m).unwrap(), &oracle.w_star).unwrap();
        assert!(angle <= 0.05, "angle {angle}");
        assert_eq!(r.collapsed_units, oracle.collapsed_dims);
    }
}
