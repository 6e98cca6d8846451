//! JSON run configuration. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use collapse_lab::datasets::{exact_spectrum_batch, load_idx, prop1_dataset, synth_lowrank};
use collapse_lab::nets::{Activation, DecoderSpec};
use collapse_lab::trainer::depth_spec;
use collapse_lab::{DataBatch, GammaMode, ModelSpec, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub model: ModelSection,
    #[serde(default = "learned")]
    pub gamma: GammaMode,
    #[serde(default)]
    pub train: TrainSection,
    pub data: DataSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn learned() -> GammaMode {
    GammaMode::Learned
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelType {
    MlpVae,
    AffineVae,
    SoftthreshVae,
    Ae,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    Relu,
    Identity,
    SoftThreshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(rename = "type")]
    pub kind: ModelType,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: ActivationName,
    #[serde(default)]
    pub alpha: Option<f64>,
}

fn default_depth() -> usize {
    2
}
fn default_width() -> usize {
    64
}
fn default_latent() -> usize {
    16
}
fn default_activation() -> ActivationName {
    ActivationName::Relu
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_halving_period: usize,
    pub seed: u64,
    pub mc_samples_train: usize,
    pub mc_samples_eval: usize,
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            iterations: t.iterations,
            batch_size: t.batch_size,
            lr0: t.lr0,
            lr_halving_period: t.lr_halving_period,
            seed: t.seed,
            mc_samples_train: t.mc_samples_train,
            mc_samples_eval: t.mc_samples_eval,
            eval_every: t.eval_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    Prop1 {},
    SynthLowrank {
        n: usize,
        d: usize,
        eigenvalues: Vec<f64>,
        #[serde(default)]
        seed: u64,
    },
    ExactSpectrum {
        n: usize,
        d: usize,
        eigenvalues: Vec<f64>,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        images: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default = "yes")]
        normalize: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub depths: Vec<usize>,
    pub gammas: Vec<f64>,
    pub histogram_bins: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            depths: vec![1, 2, 4, 6, 8, 10],
            gammas: vec![0.03, 0.5, 2.0, 8.0],
            histogram_bins: 24,
        }
    }
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let cfg: RunConfigFile = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(cfg)
    }

    /// Applies `COLLAPSE_LAB_SEED`, when set.
    pub fn apply_seed_override(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.train.seed = s;
        }
    }

    fn activation(&self) -> Result<Activation, String> {
        Ok(match self.model.activation {
            ActivationName::Relu => Activation::Relu,
            ActivationName::Identity => Activation::Identity,
            ActivationName::SoftThreshold => Activation::SoftThreshold {
                alpha: self.model.alpha.ok_or("soft_threshold activation needs model.alpha")?,
            },
        })
    }

    /// Architecture at `depth` (the configured depth unless overridden).
    pub fn model_spec_at(&self, d: usize, depth: usize) -> Result<ModelSpec, String> {
        let k = self.model.latent_dim;
        let mut spec = match self.model.kind {
            ModelType::MlpVae | ModelType::Ae => depth_spec(d, k, depth, self.model.width),
            ModelType::AffineVae => ModelSpec::affine(d, k),
            ModelType::SoftthreshVae => {
                let alpha = self.model.alpha.ok_or("softthresh_vae needs model.alpha")?;
                let mut s = ModelSpec::affine(d, k);
                s.decoder = DecoderSpec::SoftThreshold { alpha };
                s
            }
        };
        if matches!(self.model.kind, ModelType::MlpVae | ModelType::Ae) && depth > 0 {
            spec.activation = self.activation()?;
        }
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }

    pub fn model_spec(&self, d: usize) -> Result<ModelSpec, String> {
        self.model_spec_at(d, self.model.depth)
    }

    pub fn train_config(&self) -> Result<TrainConfig, String> {
        let t = &self.train;
        let cfg = TrainConfig {
            mode: if self.model.kind == ModelType::Ae { TrainMode::Ae } else { TrainMode::Vae },
            iterations: t.iterations,
            batch_size: t.batch_size,
            lr0: t.lr0,
            lr_halving_period: t.lr_halving_period,
            gamma_mode: self.gamma.clone(),
            seed: t.seed,
            eval_every: t.eval_every,
            mc_samples_train: t.mc_samples_train,
            mc_samples_eval: t.mc_samples_eval,
            ..TrainConfig::default()
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn load_data(&self) -> Result<DataBatch, String> {
        let r = match &self.data {
            DataSection::Prop1 {} => Ok(prop1_dataset()),
            DataSection::SynthLowrank { n, d, eigenvalues, seed } => synth_lowrank(*n, *d, eigenvalues, *seed),
            DataSection::ExactSpectrum { n, d, eigenvalues, seed } => exact_spectrum_batch(*n, *d, eigenvalues, *seed),
            DataSection::Idx { images, labels, limit, normalize } => {
                load_idx(images, labels.as_deref(), *limit, *normalize)
            }
        };
        let b = r.map_err(|e| format!("data: {e}"))?;
        if b.n() == 0 {
            return Err("data: the batch is empty".into());
        }
        Ok(b)
    }

    /// Everything that can be checked without loading files or training.
    pub fn validate(&self) -> Result<(), String> {
        self.train_config()?;
        if self.model.latent_dim == 0 || self.model.width == 0 {
            return Err("model.latent_dim and model.width must be >= 1".into());
        }
        if let DataSection::SynthLowrank { n, d, eigenvalues, .. } | DataSection::ExactSpectrum { n, d, eigenvalues, .. } =
            &self.data
        {
            if *n == 0 || *d == 0 || eigenvalues.len() > *d {
                return Err("data: need n, d >= 1 and at most d eigenvalues".into());
            }
            self.model_spec(*d)?;
        }
        if self.sweep.depths.is_empty() || self.sweep.gammas.is_empty() || self.sweep.histogram_bins < 2 {
            return Err("sweep: depths and gammas must be non-empty, histogram_bins >= 2".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {"type": "affine_vae", "latent_dim": 4},
        "data": {"type": "exact_spectrum", "n": 50, "d": 8, "eigenvalues": [4, 1, 0.25, 0.0625]}
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c: RunConfigFile = serde_json::from_str(MINIMAL).unwrap();
        assert_eq!(c.gamma, GammaMode::Learned);
        assert_eq!(c.train.batch_size, 64);
        c.validate().unwrap();
        assert_eq!(c.model_spec(8).unwrap(), ModelSpec::affine(8, 4));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [
            r#"{"model": {"type": "ae", "dpeth": 2}, "data": {"type": "prop1"}}"#,
            r#"{"model": {"type": "ae"}, "data": {"type": "prop1", "n": 3}}"#,
            r#"{"model": {"type": "ae"}, "data": {"type": "prop1"}, "extra": 1}"#,
            r#"{"model": {"type": "ae"}, "data": {"type": "prop1"}, "gamma": {"mode": "fixed", "value": 1, "x": 2}}"#,
            r#"{"model": {"type": "ae"}, "data": {"type": "prop1"}, "train": {"lr": 0.1}}"#,
        ] {
            assert!(serde_json::from_str::<RunConfigFile>(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut c: RunConfigFile = serde_json::from_str(MINIMAL).unwrap();
        c.train.lr0 = -1.0;
        assert!(c.validate().is_err());
        let mut c: RunConfigFile = serde_json::from_str(MINIMAL).unwrap();
        c.gamma = GammaMode::Fixed { value: 0.0 };
        assert!(c.validate().is_err());
        let mut c: RunConfigFile = serde_json::from_str(MINIMAL).unwrap();
        c.model.kind = ModelType::SoftthreshVae;
        assert!(c.validate().is_err());
    }
}
