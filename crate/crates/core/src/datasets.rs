//! Data sources: the two-point counterexample set, seeded synthetic Gaussian
//! data with a prescribed spectrum, and IDX image files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::linalg::{matmul, orthonormal_columns, sym_eigen};
use crate::rng::{normal_vec, seeded, LabRng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A data matrix with its cached mean and mean-predictor variance.
#[derive(Clone, Debug, PartialEq)]
pub struct DataBatch {
    x: Tensor,
    mean: Vec<f64>,
    gamma_bar: f64,
    labels: Option<Vec<u8>>,
}

impl DataBatch {
    /// Wraps an `n × d` matrix, computing `x̄` and `γ̄ = (1/nd)Σ‖x − x̄‖²`.
    pub fn new(x: Tensor) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(Error::Shape {
                op: "data batch",
                left: x.shape().to_vec(),
                right: vec![],
            });
        }
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        if n > 0 {
            for i in 0..n {
                mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
        }
        let mut ss = 0.0;
        for i in 0..n {
            for (v, m) in x.row(i).iter().zip(&mean) {
                ss += (v - m) * (v - m);
            }
        }
        let gamma_bar = if n * d > 0 { ss / (n * d) as f64 } else { 0.0 };
        Ok(DataBatch {
            x,
            mean,
            gamma_bar,
            labels: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        DataBatch::new(Tensor::from_rows(rows)?)
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn gamma_bar(&self) -> f64 {
        self.gamma_bar
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    /// Rows `idx` gathered into a new batch.
    pub fn select(&self, idx: &[usize]) -> DataBatch {
        let d = self.d();
        let mut v = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            v.extend_from_slice(self.x.row(i));
        }
        DataBatch::new(Tensor::from_parts(vec![idx.len(), d], v)).expect("rows of a valid batch")
    }

    /// Row-major `n × d` centred second-moment matrix `(1/n)Σ(x−x̄)(x−x̄)ᵀ`.
    pub fn centered_second_moment(&self) -> Vec<f64> {
        let (n, d) = (self.n(), self.d());
        let mut c = vec![0.0; d * d];
        if n == 0 {
            return c;
        }
        let mut centred = vec![0.0; d];
        for i in 0..n {
            for (k, (v, m)) in self.x.row(i).iter().zip(&self.mean).enumerate() {
                centred[k] = v - m;
            }
            for a in 0..d {
                for b in a..d {
                    c[a * d + b] += centred[a] * centred[b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = c[a * d + b] / n as f64;
                c[a * d + b] = v;
                c[b * d + a] = v;
            }
        }
        c
    }
}

/// `{(1,1), (−1,−1)}`: the two-point set on which the soft-threshold decoder
/// has a collapsed local minimum.
pub fn prop1_dataset() -> DataBatch {
    DataBatch::from_rows(&[vec![1.0, 1.0], vec![-1.0, -1.0]]).expect("static data")
}

fn check_spectrum(d: usize, eigenvalues: &[f64]) -> Result<()> {
    if eigenvalues.len() > d {
        return Err(Error::Parameter(format!(
            "{} eigenvalues requested for dimension {d}",
            eigenvalues.len()
        )));
    }
    if eigenvalues.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::Parameter("eigenvalues must be finite and >= 0".into()));
    }
    Ok(())
}

fn random_orthonormal(rng: &mut LabRng, d: usize, k: usize) -> Vec<f64> {
    loop {
        let g = normal_vec(rng, d * d);
        let (q, rank) = orthonormal_columns(&g, d, d, 1e-10);
        if rank == d {
            // keep the first k columns
            let mut out = vec![0.0; d * k];
            for r in 0..d {
                out[r * k..(r + 1) * k].copy_from_slice(&q[r * d..r * d + k]);
            }
            return out;
        }
    }
}

fn centre_columns(z: &mut [f64], n: usize, k: usize) {
    for c in 0..k {
        let m = (0..n).map(|r| z[r * k + c]).sum::<f64>() / n as f64;
        for r in 0..n {
            z[r * k + c] -= m;
        }
    }
}

fn colour(z: &[f64], n: usize, eigenvalues: &[f64], basis: &[f64], d: usize) -> Vec<f64> {
    let k = eigenvalues.len();
    let mut scaled = z.to_vec();
    for r in 0..n {
        for c in 0..k {
            scaled[r * k + c] *= eigenvalues[c].sqrt();
        }
    }
    // X = Z·diag(√λ)·Qᵀ
    let qt = crate::linalg::transpose(basis, d, k);
    matmul(&scaled, &qt, n, k, d)
}

/// Gaussian data `X = Z·diag(√λ)·Qᵀ` with re-centred standard-normal `Z` and a
/// seeded orthonormal `Q`. The empirical spectrum approaches `eigenvalues` as
/// `n` grows.
pub fn synth_lowrank(n: usize, d: usize, eigenvalues: &[f64], seed: u64) -> Result<DataBatch> {
    check_spectrum(d, eigenvalues)?;
    let k = eigenvalues.len();
    let mut rng = seeded(seed);
    let basis = random_orthonormal(&mut rng, d, k);
    let mut z = normal_vec(&mut rng, n * k);
    if n > 0 {
        centre_columns(&mut z, n, k);
    }
    let x = colour(&z, n, eigenvalues, &basis, d);
    DataBatch::new(Tensor::new(vec![n, d], x)?)
}

const EXACT_SPECTRUM_RETRIES: usize = 10;

/// Like [`synth_lowrank`] but whitens the sample first, so the centred
/// second-moment matrix has exactly the requested eigenvalues (padded with
/// zeros up to `d`).
pub fn exact_spectrum_batch(
    n: usize,
    d: usize,
    eigenvalues: &[f64],
    seed: u64,
) -> Result<DataBatch> {
    check_spectrum(d, eigenvalues)?;
    let k = eigenvalues.len();
    if n <= k {
        return Err(Error::Parameter(format!(
            "exact spectrum needs n > {k} samples, got {n}"
        )));
    }
    let mut rng = seeded(seed);
    let basis = random_orthonormal(&mut rng, d, k);
    for _ in 0..EXACT_SPECTRUM_RETRIES {
        let mut z = normal_vec(&mut rng, n * k);
        centre_columns(&mut z, n, k);
        let zt = crate::linalg::transpose(&z, n, k);
        let mut cov = matmul(&zt, &z, k, n, k);
        cov.iter_mut().for_each(|c| *c /= n as f64);
        let eig = sym_eigen(&cov, k);
        if eig.values.last().copied().unwrap_or(1.0) < 1e-8 {
            continue;
        }
        // W = V·diag(c^{-1/2})·Vᵀ
        let mut whiten = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                whiten[a * k + b] = (0..k)
                    .map(|j| eig.vectors[a * k + j] * eig.vectors[b * k + j] / eig.values[j].sqrt())
                    .sum();
            }
        }
        let white = matmul(&z, &whiten, n, k, k);
        let x = colour(&white, n, eigenvalues, &basis, d);
        return DataBatch::new(Tensor::new(vec![n, d], x)?);
    }
    Err(Error::Parameter(
        "sampled latent matrix stayed rank deficient".into(),
    ))
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: bytes.len() as u64,
            detail: format!("truncated header, needed 4 bytes at offset {offset}"),
        })
}

/// Parsed IDX image file.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8], limit: Option<usize>) -> Result<IdxImages> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let take = limit.map_or(count, |l| l.min(count));
    let need = 16 + take * rows * cols;
    if bytes.len() < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: format!("truncated pixel data, expected {need} bytes"),
        });
    }
    Ok(IdxImages {
        count: take,
        rows,
        cols,
        pixels: bytes[16..need].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], limit: Option<usize>) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let take = limit.map_or(count, |l| l.min(count));
    if bytes.len() < 8 + take {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: format!("truncated label data, expected {} bytes", 8 + take),
        });
    }
    Ok(bytes[8..8 + take].to_vec())
}

/// Loads an IDX image file (optionally with labels) as flattened rows.
/// `normalize` divides pixel bytes by 255.
pub fn load_idx(
    images_path: &Path,
    labels_path: Option<&Path>,
    limit: Option<usize>,
    normalize: bool,
) -> Result<DataBatch> {
    let img = parse_idx_images(&fs::read(images_path)?, limit)?;
    let scale = if normalize { 255.0 } else { 1.0 };
    let d = img.rows * img.cols;
    let values = img.pixels.iter().map(|&p| p as f64 / scale).collect();
    let mut batch = DataBatch::new(Tensor::new(vec![img.count, d], values)?)?;
    if let Some(lp) = labels_path {
        let labels = parse_idx_labels(&fs::read(lp)?, limit)?;
        if labels.len() != img.count {
            return Err(Error::Format {
                offset: 4,
                detail: format!("{} labels for {} images", labels.len(), img.count),
            });
        }
        batch.labels = Some(labels);
    }
    Ok(batch)
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let per = rows * cols;
    let count = if per == 0 { 0 } else { pixels.len() / per };
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&pixels[..count * per]);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes a byte-quantised batch as an IDX image file. Values must be exact
/// multiples of 1/255 when `normalized`, or integers in 0..=255 otherwise.
pub fn write_idx(
    path: &Path,
    batch: &DataBatch,
    rows: usize,
    cols: usize,
    normalized: bool,
) -> Result<()> {
    if rows * cols != batch.d() {
        return Err(Error::Parameter(format!(
            "{rows}×{cols} images do not match d = {}",
            batch.d()
        )));
    }
    let scale = if normalized { 255.0 } else { 1.0 };
    let mut pixels = Vec::with_capacity(batch.x().len());
    for &v in batch.x().values() {
        let p = (v * scale).round();
        let back = if normalized { p / 255.0 } else { p };
        if !(0.0..=255.0).contains(&p) || back != v {
            return Err(Error::Parameter(format!("value {v} is not byte-quantised")));
        }
        pixels.push(p as u8);
    }
    fs::write(path, encode_idx_images(rows, cols, &pixels))?;
    if let Some(labels) = batch.labels() {
        let _ = labels; // labels go to a separate file; see write_idx_labels
    }
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    fs::write(path, encode_idx_labels(labels))?;
    Ok(())
}

/// JSON cache for a synthetic batch, sharing the checkpoint container layout.
#[derive(Serialize, Deserialize)]
struct BatchCache {
    version: String,
    #[serde(rename = "X")]
    x: Tensor,
}

pub fn save_batch_json(path: &Path, batch: &DataBatch) -> Result<()> {
    let cache = BatchCache {
        version: crate::nets::CHECKPOINT_VERSION.to_string(),
        x: batch.x().clone(),
    };
    fs::write(path, serde_json::to_string(&cache)?)?;
    Ok(())
}

pub fn load_batch_json(path: &Path) -> Result<DataBatch> {
    let cache: BatchCache = serde_json::from_str(&fs::read_to_string(path)?)?;
    if cache.version != crate::nets::CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unknown version {}", cache.version)));
    }
    DataBatch::new(cache.x)
}
