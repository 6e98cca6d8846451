//! Encoder and decoder networks for the Gaussian VAE.
//!
//! Parameters live in plain [`Tensor`]s. A forward pass binds them onto a
//! fresh [`Tape`] (as trainable leaves or constants) and returns handles to
//! the intermediate nodes the objective and the diagnostics need.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{normal_vec, seeded, LabRng, RngState};

pub const CHECKPOINT_VERSION: &str = "collapse-lab-ckpt-1";

/// Numerics guard applied to the log-variance head before exponentiation.
pub const LOGVAR_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    SoftThreshold { alpha: f64 },
    Identity,
}

impl Activation {
    fn validate(&self) -> Result<()> {
        match *self {
            Activation::SoftThreshold { alpha } if !(alpha >= 0.0) || !alpha.is_finite() => Err(
                Error::Parameter(format!("activation alpha must be finite and >= 0, got {alpha}")),
            ),
            _ => Ok(()),
        }
    }

    fn apply(&self, tape: &mut Tape, v: Var) -> Result<Var> {
        match *self {
            Activation::Relu => tape.relu(v),
            Activation::SoftThreshold { alpha } => tape.soft_threshold(v, alpha),
            Activation::Identity => Ok(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::Parameter("all layer widths must be >= 1".into()));
        }
        self.activation.validate()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_widths);
        w.push(self.output_dim);
        w
    }

    /// `Σ (w_i·w_{i+1} + w_{i+1})` over consecutive widths.
    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

/// Affine map `x·wᵀ + b` with `w` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[output, input]),
            b: Tensor::zeros(&[output]),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(input: usize, output: usize, rng: &mut LabRng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let values = (0..input * output)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Linear {
            w: Tensor::from_parts(vec![output, input], values),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

pub fn build_mlp(spec: &MlpSpec, init_seed: u64) -> Result<Mlp> {
    let mut rng = seeded(init_seed);
    build_mlp_with(spec, &mut rng)
}

fn build_mlp_with(spec: &MlpSpec, rng: &mut LabRng) -> Result<Mlp> {
    spec.validate()?;
    let layers = spec
        .widths()
        .windows(2)
        .map(|p| Linear::glorot(p[0], p[1], rng))
        .collect();
    Ok(Mlp {
        spec: spec.clone(),
        layers,
    })
}

impl Mlp {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Hidden layers use the activation; the output layer is linear.
    fn forward_on(&self, tape: &mut Tape, vars: &[Var], x: Var, what: &str) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            h = tape
                .linear(h, vars[2 * i], vars[2 * i + 1])
                .map_err(|e| at_layer(e, what, i))?;
            if i < last {
                h = self.spec.activation.apply(tape, h).map_err(|e| at_layer(e, what, i))?;
            }
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .layers
            .iter()
            .flat_map(|l| [l.w.clone(), l.b.clone()])
            .map(|t| tape.constant(t))
            .collect();
        let xv = tape.constant(x.clone());
        let out = self.forward_on(&mut tape, &vars, xv, "mlp")?;
        Ok(tape.value(out).clone())
    }
}

fn at_layer(e: Error, what: &str, layer: usize) -> Error {
    match e {
        Error::NonFinite(op) => Error::NonFinite(format!("{what} layer {layer} ({op})")),
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecoderSpec {
    Mlp { hidden: Vec<usize> },
    Affine,
    SoftThreshold { alpha: f64 },
    /// `μ_x(w ⊙ z)` over a base decoder; `per_dim` selects a κ-vector `w`.
    Scaled { base: Box<DecoderSpec>, per_dim: bool },
    /// Output ignores `z` entirely.
    Constant,
}

/// Architecture of a [`VaeModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub decoder: DecoderSpec,
}

impl ModelSpec {
    /// Fully-connected encoder and decoder with `depth` hidden layers each.
    pub fn mlp(data_dim: usize, latent_dim: usize, depth: usize, width: usize) -> Self {
        ModelSpec {
            data_dim,
            latent_dim,
            encoder_hidden: vec![width; depth],
            activation: Activation::Relu,
            decoder: DecoderSpec::Mlp {
                hidden: vec![width; depth],
            },
        }
    }

    /// Affine encoder mean/log-variance and affine decoder.
    pub fn affine(data_dim: usize, latent_dim: usize) -> Self {
        ModelSpec {
            data_dim,
            latent_dim,
            encoder_hidden: vec![],
            activation: Activation::Identity,
            decoder: DecoderSpec::Affine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.latent_dim == 0 || self.encoder_hidden.contains(&0) {
            return Err(Error::Parameter("all layer widths must be >= 1".into()));
        }
        self.activation.validate()?;
        fn check(d: &DecoderSpec) -> Result<()> {
            match d {
                DecoderSpec::Mlp { hidden } if hidden.contains(&0) => {
                    Err(Error::Parameter("decoder widths must be >= 1".into()))
                }
                DecoderSpec::SoftThreshold { alpha } if !(*alpha >= 0.0) || !alpha.is_finite() => {
                    Err(Error::Parameter(format!("decoder alpha must be >= 0, got {alpha}")))
                }
                DecoderSpec::Scaled { base, .. } => check(base),
                _ => Ok(()),
            }
        }
        check(&self.decoder)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEncoder {
    pub trunk: Vec<Linear>,
    pub activation: Activation,
    pub head_mu: Linear,
    pub head_logvar: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decoder {
    Mlp(Mlp),
    Affine(Linear),
    SoftThreshold { w: Tensor, b: Tensor, alpha: f64 },
    /// `scale` is `[1, 1]` (shared) or `[1, κ]` (per dimension).
    Scaled { base: Box<Decoder>, scale: Tensor },
    Constant { b: Tensor },
}

impl Decoder {
    fn build(spec: &DecoderSpec, act: Activation, k: usize, d: usize, rng: &mut LabRng) -> Result<Self> {
        Ok(match spec {
            DecoderSpec::Mlp { hidden } => Decoder::Mlp(build_mlp_with(
                &MlpSpec {
                    input_dim: k,
                    hidden_widths: hidden.clone(),
                    output_dim: d,
                    activation: act,
                },
                rng,
            )?),
            DecoderSpec::Affine => Decoder::Affine(Linear::glorot(k, d, rng)),
            DecoderSpec::SoftThreshold { alpha } => {
                let l = Linear::glorot(k, d, rng);
                Decoder::SoftThreshold {
                    w: l.w,
                    b: l.b,
                    alpha: *alpha,
                }
            }
            DecoderSpec::Scaled { base, per_dim } => Decoder::Scaled {
                base: Box::new(Decoder::build(base, act, k, d, rng)?),
                scale: Tensor::filled(&[1, if *per_dim { k } else { 1 }], 1.0),
            },
            DecoderSpec::Constant => Decoder::Constant {
                b: Tensor::zeros(&[d]),
            },
        })
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        match self {
            Decoder::Mlp(m) => {
                for (i, l) in m.layers.iter().enumerate() {
                    out.push((format!("{prefix}.layers.{i}.weight"), &l.w));
                    out.push((format!("{prefix}.layers.{i}.bias"), &l.b));
                }
            }
            Decoder::Affine(l) => {
                out.push((format!("{prefix}.weight"), &l.w));
                out.push((format!("{prefix}.bias"), &l.b));
            }
            Decoder::SoftThreshold { w, b, .. } => {
                out.push((format!("{prefix}.weight"), w));
                out.push((format!("{prefix}.bias"), b));
            }
            Decoder::Scaled { base, scale } => {
                base.tensors(&format!("{prefix}.base"), out);
                out.push((format!("{prefix}.scale"), scale));
            }
            Decoder::Constant { b } => out.push((format!("{prefix}.bias"), b)),
        }
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        match self {
            Decoder::Mlp(m) => {
                for l in m.layers.iter_mut() {
                    out.push(&mut l.w);
                    out.push(&mut l.b);
                }
            }
            Decoder::Affine(l) => {
                out.push(&mut l.w);
                out.push(&mut l.b);
            }
            Decoder::SoftThreshold { w, b, .. } => {
                out.push(w);
                out.push(b);
            }
            Decoder::Scaled { base, scale } => {
                base.tensors_mut(out);
                out.push(scale);
            }
            Decoder::Constant { b } => out.push(b),
        }
    }

    fn forward_on(&self, tape: &mut Tape, vars: &[Var], z: Var) -> Result<DecodeTrace> {
        match self {
            Decoder::Mlp(m) => {
                let first = tape
                    .linear(z, vars[0], vars[1])
                    .map_err(|e| at_layer(e, "decoder", 0))?;
                let mut h = first;
                let last = m.layers.len() - 1;
                for i in 0..m.layers.len() {
                    if i > 0 {
                        h = tape
                            .linear(h, vars[2 * i], vars[2 * i + 1])
                            .map_err(|e| at_layer(e, "decoder", i))?;
                    }
                    if i < last {
                        h = m.spec.activation.apply(tape, h).map_err(|e| at_layer(e, "decoder", i))?;
                    }
                }
                Ok(DecodeTrace {
                    out: h,
                    first_linear: Some(first),
                })
            }
            Decoder::Affine(_) => {
                let out = tape
                    .linear(z, vars[0], vars[1])
                    .map_err(|e| at_layer(e, "decoder", 0))?;
                Ok(DecodeTrace {
                    out,
                    first_linear: Some(out),
                })
            }
            Decoder::SoftThreshold { alpha, .. } => {
                let zero_b = tape.constant(Tensor::zeros(&[tape.shape(vars[1])[0]]));
                let pre = tape
                    .linear(z, vars[0], zero_b)
                    .map_err(|e| at_layer(e, "decoder", 0))?;
                let th = tape.soft_threshold(pre, *alpha)?;
                let n = tape.shape(z)[0];
                let d = tape.shape(vars[1])[0];
                let bb = broadcast_row(tape, vars[1], n, d)?;
                let out = tape.add(th, bb).map_err(|e| at_layer(e, "decoder", 0))?;
                Ok(DecodeTrace {
                    out,
                    first_linear: Some(pre),
                })
            }
            Decoder::Scaled { base, .. } => {
                let (base_vars, scale) = vars.split_at(vars.len() - 1);
                let (n, k) = (tape.shape(z)[0], tape.shape(z)[1]);
                let ones_n = tape.constant(Tensor::filled(&[n, 1], 1.0));
                let mut s = tape.matmul(ones_n, scale[0])?;
                if tape.shape(s)[1] != k {
                    let ones_k = tape.constant(Tensor::filled(&[1, k], 1.0));
                    s = tape.matmul(s, ones_k)?;
                }
                let zs = tape.mul(z, s)?;
                base.forward_on(tape, base_vars, zs)
            }
            Decoder::Constant { .. } => {
                let n = tape.shape(z)[0];
                let d = tape.shape(vars[0])[0];
                let out = broadcast_row(tape, vars[0], n, d)?;
                Ok(DecodeTrace {
                    out,
                    first_linear: None,
                })
            }
        }
    }

    /// Zeroes the input column `j` of the first layer that sees `z`.
    fn zero_input_column(&mut self, j: usize) -> Result<()> {
        let zero_col = |w: &mut Tensor| {
            for r in 0..w.rows() {
                w.set(r, j, 0.0);
            }
        };
        match self {
            Decoder::Mlp(m) => zero_col(&mut m.layers[0].w),
            Decoder::Affine(l) => zero_col(&mut l.w),
            Decoder::SoftThreshold { w, .. } => zero_col(w),
            Decoder::Scaled { base, .. } => base.zero_input_column(j)?,
            Decoder::Constant { .. } => {
                return Err(Error::Unsupported(
                    "constant decoder has no first linear layer in z".into(),
                ))
            }
        }
        Ok(())
    }

    /// Sets every parameter to zero except the output bias, which becomes `mean`.
    fn make_constant(&mut self, mean: &[f64]) {
        let mut ts = Vec::new();
        self.tensors_mut(&mut ts);
        for t in ts {
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out_bias = match self {
            Decoder::Mlp(m) => &mut m.layers.last_mut().expect("non-empty").b,
            Decoder::Affine(l) => &mut l.b,
            Decoder::SoftThreshold { b, .. } | Decoder::Constant { b } => b,
            Decoder::Scaled { base, scale } => {
                scale.values_mut().iter_mut().for_each(|v| *v = 1.0);
                base.make_constant(mean);
                return;
            }
        };
        out_bias.values_mut().copy_from_slice(mean);
    }
}

/// `[d]` row vector repeated over `n` rows.
fn broadcast_row(tape: &mut Tape, v: Var, n: usize, d: usize) -> Result<Var> {
    // a linear layer with zero weights on a column of ones: 1·0ᵀ + b
    let ones = tape.constant(Tensor::filled(&[n, 1], 1.0));
    let zero_w = tape.constant(Tensor::zeros(&[d, 1]));
    tape.linear(ones, zero_w, v)
}

/// Per-datum encoder output: `μ_z` and `σ_z`, both `[n, κ]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    mu: Tensor,
    sigma: Tensor,
}

impl LatentGaussian {
    /// `σ = 0` is admitted as the deterministic limit; encoders always
    /// produce strictly positive values.
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        if mu.shape() != sigma.shape() || mu.shape().len() != 2 {
            return Err(Error::Shape {
                op: "latent gaussian",
                left: mu.shape().to_vec(),
                right: sigma.shape().to_vec(),
            });
        }
        if sigma.values().iter().any(|s| *s < 0.0) {
            return Err(Error::Parameter("sigma must be >= 0".into()));
        }
        Ok(LatentGaussian { mu, sigma })
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn sigma(&self) -> &Tensor {
        &self.sigma
    }

    pub fn n(&self) -> usize {
        self.mu.rows()
    }

    pub fn kappa(&self) -> usize {
        self.mu.cols()
    }
}

/// `z = μ + σ ⊙ ε` for `n_samples` draws, stacked sample-major: rows
/// `s·n .. (s+1)·n` hold draw `s` for every datum.
pub fn sample_reparameterized(
    lg: &LatentGaussian,
    n_samples: usize,
    rng: &mut LabRng,
) -> Result<Tensor> {
    if n_samples == 0 {
        return Err(Error::Parameter("n_samples must be >= 1".into()));
    }
    let (n, k) = (lg.n(), lg.kappa());
    let mut out = Vec::with_capacity(n_samples * n * k);
    for _ in 0..n_samples {
        let eps = normal_vec(rng, n * k);
        out.extend(
            lg.mu
                .values()
                .iter()
                .zip(lg.sigma.values())
                .zip(&eps)
                .map(|((m, s), e)| m + s * e),
        );
    }
    Ok(Tensor::from_parts(vec![n_samples * n, k], out))
}

/// Tape handles produced by an encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncodeTrace {
    /// Input to the heads (the last trunk activation, or `x` itself).
    pub hidden: Var,
    pub mu: Var,
    /// Clamped log-variance.
    pub logvar: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DecodeTrace {
    pub out: Var,
    /// Output of the first affine map applied to `z`, when there is one.
    pub first_linear: Option<Var>,
}

/// Parameter handles on a tape, in [`VaeModel::named_params`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
    n_encoder: usize,
}

impl Bound {
    pub fn encoder_vars(&self) -> &[Var] {
        &self.vars[..self.n_encoder]
    }

    pub fn decoder_vars(&self) -> &[Var] {
        &self.vars[self.n_encoder..]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    pub spec: ModelSpec,
    pub encoder: GaussianEncoder,
    pub decoder: Decoder,
    pub log_gamma: f64,
    pub gamma_trainable: bool,
}

impl VaeModel {
    /// Glorot-initialised model with `γ = 1`.
    pub fn new(spec: ModelSpec, init_seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(init_seed);
        let mut trunk = Vec::new();
        let mut width = spec.data_dim;
        for &h in &spec.encoder_hidden {
            trunk.push(Linear::glorot(width, h, &mut rng));
            width = h;
        }
        let head_mu = Linear::glorot(width, spec.latent_dim, &mut rng);
        let head_logvar = Linear::glorot(width, spec.latent_dim, &mut rng);
        let decoder = Decoder::build(
            &spec.decoder,
            spec.activation,
            spec.latent_dim,
            spec.data_dim,
            &mut rng,
        )?;
        Ok(VaeModel {
            encoder: GaussianEncoder {
                trunk,
                activation: spec.activation,
                head_mu,
                head_logvar,
            },
            decoder,
            spec,
            log_gamma: 0.0,
            gamma_trainable: true,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.log_gamma.exp()
    }

    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::Parameter(format!("gamma must be > 0, got {gamma}")));
        }
        self.log_gamma = gamma.ln();
        Ok(())
    }

    pub fn data_dim(&self) -> usize {
        self.spec.data_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    /// Every parameter tensor with a stable dotted name.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.trunk.iter().enumerate() {
            out.push((format!("encoder.trunk.{i}.weight"), &l.w));
            out.push((format!("encoder.trunk.{i}.bias"), &l.b));
        }
        out.push(("encoder.head_mu.weight".into(), &self.encoder.head_mu.w));
        out.push(("encoder.head_mu.bias".into(), &self.encoder.head_mu.b));
        out.push(("encoder.head_logvar.weight".into(), &self.encoder.head_logvar.w));
        out.push(("encoder.head_logvar.bias".into(), &self.encoder.head_logvar.b));
        self.decoder.tensors("decoder", &mut out);
        out
    }

    /// Mutable parameter tensors in [`named_params`](Self::named_params) order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.encoder.trunk.iter_mut() {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.encoder.head_mu.w);
        out.push(&mut self.encoder.head_mu.b);
        out.push(&mut self.encoder.head_logvar.w);
        out.push(&mut self.encoder.head_logvar.b);
        self.decoder.tensors_mut(&mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    fn n_encoder_tensors(&self) -> usize {
        2 * self.encoder.trunk.len() + 4
    }

    /// Places every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .named_params()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            vars,
            n_encoder: self.n_encoder_tensors(),
        }
    }

    /// Wraps handles already on a tape, one per [`named_params`](Self::named_params) entry.
    pub fn bound_from(&self, vars: Vec<Var>) -> Result<Bound> {
        let want = self.named_params().len();
        if vars.len() != want {
            return Err(Error::Parameter(format!("expected {want} parameter handles, got {}", vars.len())));
        }
        Ok(Bound {
            vars,
            n_encoder: self.n_encoder_tensors(),
        })
    }

    pub fn encode_on(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<EncodeTrace> {
        let ev = bound.encoder_vars();
        let mut h = x;
        for i in 0..self.encoder.trunk.len() {
            h = tape
                .linear(h, ev[2 * i], ev[2 * i + 1])
                .map_err(|e| at_layer(e, "encoder", i))?;
            h = self
                .encoder
                .activation
                .apply(tape, h)
                .map_err(|e| at_layer(e, "encoder", i))?;
        }
        let t = 2 * self.encoder.trunk.len();
        let head = self.encoder.trunk.len();
        let mu = tape
            .linear(h, ev[t], ev[t + 1])
            .map_err(|e| at_layer(e, "encoder", head))?;
        let raw = tape
            .linear(h, ev[t + 2], ev[t + 3])
            .map_err(|e| at_layer(e, "encoder", head))?;
        let logvar = tape.clamp(raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)?;
        Ok(EncodeTrace {
            hidden: h,
            mu,
            logvar,
        })
    }

    pub fn decode_on(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<DecodeTrace> {
        self.decoder.forward_on(tape, bound.decoder_vars(), z)
    }

    fn check_cols(&self, x: &Tensor, want: usize, op: &'static str) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != want {
            return Err(Error::Shape {
                op,
                left: x.shape().to_vec(),
                right: vec![x.shape().first().copied().unwrap_or(0), want],
            });
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor) -> Result<LatentGaussian> {
        self.check_cols(x, self.data_dim(), "encode")?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let tr = self.encode_on(&mut tape, &bound, xv)?;
        let mu = tape.value(tr.mu).clone();
        let lv = tape.value(tr.logvar);
        let sigma = Tensor::from_parts(
            lv.shape().to_vec(),
            lv.values().iter().map(|v| (0.5 * v).exp()).collect(),
        );
        LatentGaussian::new(mu, sigma)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.check_cols(z, self.latent_dim(), "decode")?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let tr = self.decode_on(&mut tape, &bound, zv)?;
        Ok(tape.value(tr.out).clone())
    }

    /// Deterministic reconstruction `μ_x(μ_z(x))`.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let lg = self.encode(x)?;
        self.decode(lg.mu())
    }

    /// Copy with latent `j` cut out: both encoder head rows (and biases) and
    /// the decoder's first-layer column `j` are zero.
    pub fn zero_latent_dim(&self, j: usize) -> Result<VaeModel> {
        if j >= self.latent_dim() {
            return Err(Error::Parameter(format!(
                "latent index {j} out of range for kappa = {}",
                self.latent_dim()
            )));
        }
        let mut m = self.clone();
        m.decoder.zero_input_column(j)?;
        for head in [&mut m.encoder.head_mu, &mut m.encoder.head_logvar] {
            let cols = head.w.cols();
            head.w.values_mut()[j * cols..(j + 1) * cols]
                .iter_mut()
                .for_each(|v| *v = 0.0);
            head.b.values_mut()[j] = 0.0;
        }
        Ok(m)
    }

    /// The fully collapsed configuration: `μ_z = 0`, `σ_z = 1`, `μ_x ≡ mean`,
    /// `γ = gamma`.
    pub fn collapsed(&self, mean: &[f64], gamma: f64) -> Result<VaeModel> {
        if mean.len() != self.data_dim() {
            return Err(Error::Parameter(format!(
                "mean has {} entries, expected {}",
                mean.len(),
                self.data_dim()
            )));
        }
        let mut m = self.clone();
        for head in [&mut m.encoder.head_mu, &mut m.encoder.head_logvar] {
            head.w.values_mut().iter_mut().for_each(|v| *v = 0.0);
            head.b.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        m.decoder.make_constant(mean);
        m.set_gamma(gamma)?;
        Ok(m)
    }

    /// Keeps any latent scale inside `[0, 1]`.
    pub fn project(&mut self) {
        fn walk(d: &mut Decoder) {
            if let Decoder::Scaled { base, scale } = d {
                scale
                    .values_mut()
                    .iter_mut()
                    .for_each(|v| *v = v.clamp(0.0, 1.0));
                walk(base);
            }
        }
        walk(&mut self.decoder);
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: String,
    spec: ModelSpec,
    params: BTreeMap<String, Tensor>,
    log_gamma: f64,
    gamma_trainable: bool,
    rng_state: Option<RngState>,
}

pub fn save_checkpoint(path: &Path, model: &VaeModel, rng_state: Option<RngState>) -> Result<()> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION.to_string(),
        spec: model.spec.clone(),
        params: model
            .named_params()
            .into_iter()
            .map(|(k, t)| (k, t.clone()))
            .collect(),
        log_gamma: model.log_gamma,
        gamma_trainable: model.gamma_trainable,
        rng_state,
    };
    fs::write(path, serde_json::to_string_pretty(&ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(VaeModel, Option<RngState>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut ck: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unknown version {:?}", ck.version)));
    }
    if !ck.log_gamma.is_finite() {
        return Err(Error::Checkpoint("log_gamma is not finite".into()));
    }
    let mut model = VaeModel::new(ck.spec.clone(), 0)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if names.len() != ck.params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter arrays, found {}",
            names.len(),
            ck.params.len()
        )));
    }
    for (name, slot) in names.iter().zip(model.params_mut()) {
        let t = ck
            .params
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    model.log_gamma = ck.log_gamma;
    model.gamma_trainable = ck.gamma_trainable;
    Ok((model, ck.rng_state))
}
