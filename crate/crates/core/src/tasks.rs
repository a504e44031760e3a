//! Task distributions and data ingestion.
//!
//! The meta-quadratic family samples 2-D convex problems
//! `min theta^T Q theta - b^T theta` with `Q = C C^T` built from a lower
//! triangular `C`, so the contour flatness is controlled by the requested
//! diagonal means. Image domains come either from IDX files (with optional
//! rotation and block-mean downsampling) or from a synthetic rotated-blob
//! generator that mimics the domain-shift structure without downloads.

use crate::models::{BaseModel, Batch, Targets};
use crate::numerics::{cholesky_solve, matvec, Matrix, RngStream, Vector};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("bad arguments: {0}")]
    BadArguments(String),
    #[error("failed to sample a positive-definite Q after {tries} tries")]
    SamplingExhausted { tries: usize },
    #[error("images must be square for rotation, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("need at least 2 domains for leave-one-out splits, got {0}")]
    TooFewDomains(usize),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
}

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("bad magic byte {found:#04x} at offset {offset}")]
    BadMagic { offset: usize, found: u8 },
    #[error("unsupported element type {found:#04x} at offset {offset} (only 0x08 unsigned byte)")]
    UnsupportedType { offset: usize, found: u8 },
    #[error("wrong dimension count {found} at offset {offset}, expected {expected}")]
    WrongDimCount {
        offset: usize,
        found: u8,
        expected: u8,
    },
    #[error("truncated file: need {needed} bytes at offset {offset}, have {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("trailing bytes: payload ends at offset {expected_end} but file has {actual_len}")]
    TrailingBytes {
        expected_end: usize,
        actual_len: usize,
    },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Meta-quadratic family
// ---------------------------------------------------------------------------

/// One sampled 2-D quadratic problem with its analytic minimizer.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct QuadraticTask {
    pub q: Matrix,
    pub c_factor: Matrix,
    pub b: Vector,
    pub theta_star: Vector,
}

const EIGENVALUE_FLOOR: f64 = 1e-8;
/// Relative jitter on the diagonal entries of C; off-diagonals are N(0, 0.1^2).
const C_DIAG_REL_STDDEV: f64 = 0.1;
const C_OFFDIAG_STDDEV: f64 = 0.1;

impl QuadraticTask {
    /// Deterministic construction from a lower-triangular factor; the
    /// injection path used by tests.
    pub fn from_c(c: Matrix, b: Vector) -> Result<Self, TaskError> {
        if c.rows() != 2 || c.cols() != 2 || b.len() != 2 {
            return Err(TaskError::BadArguments(format!(
                "expected 2x2 C and 2-vector b, got {}x{} and {}",
                c.rows(),
                c.cols(),
                b.len()
            )));
        }
        if c.get(0, 1) != 0.0 {
            return Err(TaskError::BadArguments(
                "C must be lower triangular".into(),
            ));
        }
        let q = c.matmul(&c.transpose());
        let (eig_min, _) = symmetric_2x2_eigenvalues(&q);
        if eig_min <= EIGENVALUE_FLOOR {
            return Err(TaskError::BadArguments(format!(
                "Q from C is not positive definite enough (min eigenvalue {eig_min})"
            )));
        }
        let two_q = Matrix::from_rows(&[
            &[2.0 * q.get(0, 0), 2.0 * q.get(0, 1)],
            &[2.0 * q.get(1, 0), 2.0 * q.get(1, 1)],
        ]);
        let theta_star = cholesky_solve(&two_q, &b)?;
        Ok(Self {
            q,
            c_factor: c,
            b,
            theta_star,
        })
    }

    pub fn to_model(&self) -> BaseModel {
        BaseModel::quadratic(self.q.clone(), self.b.clone()).expect("valid quadratic")
    }

    pub fn min_eigenvalue(&self) -> f64 {
        symmetric_2x2_eigenvalues(&self.q).0
    }

    /// Loss at the analytic minimizer.
    pub fn l_star(&self) -> f64 {
        let qts = matvec(&self.q, &self.theta_star).expect("dims");
        self.theta_star.dot(&qts) - self.b.dot(&self.theta_star)
    }
}

fn symmetric_2x2_eigenvalues(m: &Matrix) -> (f64, f64) {
    let (a, b, d) = (m.get(0, 0), m.get(0, 1), m.get(1, 1));
    let tr = a + d;
    let disc = ((a - d) * (a - d) + 4.0 * b * b).sqrt();
    ((tr - disc) / 2.0, (tr + disc) / 2.0)
}

/// Samples a task from the flat-contour quadratic family. The diagonal
/// entries of C are Gaussian around `sqrt(mean_q00)` / `sqrt(mean_q11)` so
/// the diagonals of `Q = C C^T` center near the requested means; `b` is
/// Gaussian around `[1, 1]` with identity covariance.
pub fn sample_quadratic(
    rng: &mut RngStream,
    mean_q00: f64,
    mean_q11: f64,
) -> Result<QuadraticTask, TaskError> {
    if !(mean_q00 > 0.0) || !(mean_q11 > 0.0) {
        return Err(TaskError::BadArguments(format!(
            "diagonal means must be positive, got {mean_q00}/{mean_q11}"
        )));
    }
    let s00 = mean_q00.sqrt();
    let s11 = mean_q11.sqrt();
    for _ in 0..100 {
        let c = Matrix::from_rows(&[
            &[s00 + C_DIAG_REL_STDDEV * s00 * rng.normal(), 0.0],
            &[
                C_OFFDIAG_STDDEV * rng.normal(),
                s11 + C_DIAG_REL_STDDEV * s11 * rng.normal(),
            ],
        ]);
        let b = Vector::from_vec(vec![1.0 + rng.normal(), 1.0 + rng.normal()]);
        let q = c.matmul(&c.transpose());
        let (eig_min, _) = symmetric_2x2_eigenvalues(&q);
        if eig_min <= EIGENVALUE_FLOOR {
            continue;
        }
        return QuadraticTask::from_c(c, b);
    }
    Err(TaskError::SamplingExhausted { tries: 100 })
}

/// The classic non-convex 2-D testbed with minimum at (1, 1).
pub fn rosenbrock_task() -> BaseModel {
    BaseModel::rosenbrock()
}

// ---------------------------------------------------------------------------
// Image domains
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    IdxFile,
    Synthetic,
}

/// A labeled image domain. Pixels live in [0, 1]; `image_rows`/`image_cols`
/// record the 2-D layout of each flattened row.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub images: Matrix,
    pub labels: Vec<usize>,
    pub domain: String,
    pub provenance: Provenance,
    pub image_rows: usize,
    pub image_cols: usize,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn to_batch(&self) -> Batch {
        Batch::new(self.images.clone(), Targets::Labels(self.labels.clone()))
            .expect("dataset invariants")
    }

    /// Deterministic stratification-friendly split: every k-th example goes
    /// to validation, where k is chosen from the requested fraction.
    pub fn split_train_val(&self, val_fraction: f64) -> (Batch, Batch) {
        let k = (1.0 / val_fraction.clamp(0.01, 0.5)).round() as usize;
        let k = k.max(2);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for i in 0..self.len() {
            if i % k == k - 1 {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        let full = self.to_batch();
        (full.subset(&train), full.subset(&val))
    }
}

// IDX binary layout: two zero magic bytes, element-type byte (0x08 =
// unsigned byte), dimension-count byte, big-endian u32 sizes, raw payload.
fn parse_idx(bytes: &[u8], expected_ndims: u8) -> Result<(Vec<usize>, &[u8]), IdxError> {
    let need = |offset: usize, needed: usize| -> Result<(), IdxError> {
        if bytes.len() < offset + needed {
            Err(IdxError::Truncated {
                offset,
                needed,
                available: bytes.len().saturating_sub(offset),
            })
        } else {
            Ok(())
        }
    };
    need(0, 4)?;
    for offset in 0..2 {
        if bytes[offset] != 0 {
            return Err(IdxError::BadMagic {
                offset,
                found: bytes[offset],
            });
        }
    }
    if bytes[2] != 0x08 {
        return Err(IdxError::UnsupportedType {
            offset: 2,
            found: bytes[2],
        });
    }
    if bytes[3] != expected_ndims {
        return Err(IdxError::WrongDimCount {
            offset: 3,
            found: bytes[3],
            expected: expected_ndims,
        });
    }
    let ndims = expected_ndims as usize;
    need(4, 4 * ndims)?;
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        let off = 4 + 4 * d;
        let v = u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        dims.push(v as usize);
    }
    let header_len = 4 + 4 * ndims;
    let payload_len: usize = dims.iter().product();
    need(header_len, payload_len)?;
    let expected_end = header_len + payload_len;
    if bytes.len() != expected_end {
        return Err(IdxError::TrailingBytes {
            expected_end,
            actual_len: bytes.len(),
        });
    }
    Ok((dims, &bytes[header_len..]))
}

/// Parses an images/labels IDX pair into a domain. Pixels are scaled to
/// [0, 1]; the domain tag defaults to the image file stem.
pub fn load_idx<P: AsRef<Path>>(path_images: P, path_labels: P) -> Result<DomainDataset, TaskError> {
    let tag = path_images
        .as_ref()
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    load_idx_with_tag(path_images, path_labels, &tag)
}

pub fn load_idx_with_tag<P: AsRef<Path>>(
    path_images: P,
    path_labels: P,
    tag: &str,
) -> Result<DomainDataset, TaskError> {
    let read = |p: &Path| -> Result<Vec<u8>, IdxError> {
        std::fs::read(p).map_err(|source| IdxError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    let image_bytes = read(path_images.as_ref())?;
    let label_bytes = read(path_labels.as_ref())?;
    let (image_dims, pixels) = parse_idx(&image_bytes, 3)?;
    let (label_dims, labels_raw) = parse_idx(&label_bytes, 1)?;
    if image_dims[0] != label_dims[0] {
        return Err(IdxError::CountMismatch {
            images: image_dims[0],
            labels: label_dims[0],
        }
        .into());
    }
    let (n, rows, cols) = (image_dims[0], image_dims[1], image_dims[2]);
    let data: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Ok(DomainDataset {
        images: Matrix::new(data, n, rows * cols)?,
        labels: labels_raw.iter().map(|&l| l as usize).collect(),
        domain: tag.to_string(),
        provenance: Provenance::IdxFile,
        image_rows: rows,
        image_cols: cols,
    })
}

/// Writes a domain back out as an IDX pair; the inverse of [`load_idx`]
/// for byte values (pixels are rescaled by 255 and rounded).
pub fn save_idx<P: AsRef<Path>>(
    dataset: &DomainDataset,
    path_images: P,
    path_labels: P,
) -> Result<(), TaskError> {
    let n = dataset.len();
    let mut image_bytes = vec![0u8, 0, 0x08, 3];
    for dim in [n, dataset.image_rows, dataset.image_cols] {
        image_bytes.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    for &p in dataset.images.as_slice() {
        image_bytes.push((p * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    let mut label_bytes = vec![0u8, 0, 0x08, 1];
    label_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &dataset.labels {
        label_bytes.push(l as u8);
    }
    let write = |p: &Path, bytes: &[u8]| -> Result<(), IdxError> {
        std::fs::write(p, bytes).map_err(|source| IdxError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    write(path_images.as_ref(), &image_bytes)?;
    write(path_labels.as_ref(), &label_bytes)?;
    Ok(())
}

/// Rotates every image about its center by `degrees` (bilinear sampling,
/// out-of-frame pixels zero). Labels are unchanged.
pub fn rotate_dataset(dataset: &DomainDataset, degrees: f64) -> Result<DomainDataset, TaskError> {
    let w = dataset.image_rows;
    if dataset.image_cols != w {
        return Err(TaskError::NotSquare {
            rows: dataset.image_rows,
            cols: dataset.image_cols,
        });
    }
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let center = (w as f64 - 1.0) / 2.0;
    let mut out = Matrix::zeros(dataset.len(), w * w);
    for ex in 0..dataset.len() {
        let src = dataset.images.row(ex);
        for r_o in 0..w {
            for c_o in 0..w {
                let dx = c_o as f64 - center;
                let dy = r_o as f64 - center;
                let src_c = center + cos * dx + sin * dy;
                let src_r = center - sin * dx + cos * dy;
                out.set(ex, r_o * w + c_o, bilinear(src, w, src_r, src_c));
            }
        }
    }
    Ok(DomainDataset {
        images: out,
        labels: dataset.labels.clone(),
        domain: format!("{}-rot{}", dataset.domain, degrees),
        provenance: dataset.provenance,
        image_rows: w,
        image_cols: w,
    })
}

fn bilinear(pixels: &[f64], w: usize, r: f64, c: f64) -> f64 {
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let sample = |ri: f64, ci: f64| -> f64 {
        if ri < 0.0 || ci < 0.0 || ri >= w as f64 || ci >= w as f64 {
            0.0
        } else {
            pixels[ri as usize * w + ci as usize]
        }
    };
    sample(r0, c0) * (1.0 - fr) * (1.0 - fc)
        + sample(r0, c0 + 1.0) * (1.0 - fr) * fc
        + sample(r0 + 1.0, c0) * fr * (1.0 - fc)
        + sample(r0 + 1.0, c0 + 1.0) * fr * fc
}

/// Block-mean downsampling to `to_w` x `to_w`, with fractional edge
/// coverage so non-integer ratios (28 -> 8) average correctly.
pub fn downsample_block_mean(dataset: &DomainDataset, to_w: usize) -> Result<DomainDataset, TaskError> {
    let w = dataset.image_rows;
    if dataset.image_cols != w {
        return Err(TaskError::NotSquare {
            rows: dataset.image_rows,
            cols: dataset.image_cols,
        });
    }
    if to_w == 0 || to_w > w {
        return Err(TaskError::BadArguments(format!(
            "target width {to_w} must be in 1..={w}"
        )));
    }
    let scale = w as f64 / to_w as f64;
    let overlap = |lo: f64, hi: f64, idx: usize| -> f64 {
        (hi.min(idx as f64 + 1.0) - lo.max(idx as f64)).max(0.0)
    };
    let mut out = Matrix::zeros(dataset.len(), to_w * to_w);
    for ex in 0..dataset.len() {
        let src = dataset.images.row(ex);
        for i in 0..to_w {
            let (r_lo, r_hi) = (i as f64 * scale, (i + 1) as f64 * scale);
            for j in 0..to_w {
                let (c_lo, c_hi) = (j as f64 * scale, (j + 1) as f64 * scale);
                let mut acc = 0.0;
                for r in r_lo.floor() as usize..(r_hi.ceil() as usize).min(w) {
                    let wr = overlap(r_lo, r_hi, r);
                    if wr == 0.0 {
                        continue;
                    }
                    for c in c_lo.floor() as usize..(c_hi.ceil() as usize).min(w) {
                        let wc = overlap(c_lo, c_hi, c);
                        acc += wr * wc * src[r * w + c];
                    }
                }
                out.set(ex, i * to_w + j, acc / (scale * scale));
            }
        }
    }
    Ok(DomainDataset {
        images: out,
        labels: dataset.labels.clone(),
        domain: dataset.domain.clone(),
        provenance: dataset.provenance,
        image_rows: to_w,
        image_cols: to_w,
    })
}

/// Synthetic stand-in for rotated digit domains: well-separated Gaussian
/// class blobs shared across domains, with a fixed random rotation per
/// domain as the shift, then min-max normalized into [0, 1].
pub fn synthetic_domains(
    rng: &mut RngStream,
    n_domains: usize,
    n_classes: usize,
    dim: usize,
    samples_per_class: usize,
) -> Result<Vec<DomainDataset>, TaskError> {
    if n_domains == 0 || n_classes == 0 || dim == 0 || samples_per_class == 0 {
        return Err(TaskError::BadArguments(
            "all synthetic-domain arguments must be positive".into(),
        ));
    }
    if n_classes > dim {
        return Err(TaskError::BadArguments(format!(
            "need n_classes <= dim for orthogonal class means, got {n_classes} > {dim}"
        )));
    }
    // Orthonormal mean directions scaled so pairwise class-mean distance is
    // 7.2 sigma (unit within-class stddev): comfortably separable.
    let mut base_rng = rng.substream(0);
    let mean_dirs = random_orthonormal_columns(&mut base_rng, dim, n_classes);
    let mean_scale = 7.2 / std::f64::consts::SQRT_2;

    let total = n_classes * samples_per_class;
    let mut base = Matrix::zeros(total, dim);
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for s in 0..samples_per_class {
        let _ = s;
        for class in 0..n_classes {
            for d in 0..dim {
                let mean = mean_scale * mean_dirs.get(d, class);
                base.set(row, d, mean + base_rng.normal());
            }
            labels.push(class);
            row += 1;
        }
    }

    let mut domains = Vec::with_capacity(n_domains);
    for dom in 0..n_domains {
        let mut dom_rng = rng.substream(1 + dom as u64);
        let rotation = random_orthonormal_columns(&mut dom_rng, dim, dim);
        let rotated = base.matmul(&rotation);
        // Affine map into [0, 1] per domain.
        let lo = rotated.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = rotated
            .as_slice()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        let data: Vec<f64> = rotated.as_slice().iter().map(|&v| (v - lo) / span).collect();
        let (image_rows, image_cols) = square_layout(dim);
        domains.push(DomainDataset {
            images: Matrix::new(data, total, dim)?,
            labels: labels.clone(),
            domain: format!("synthetic-{dom}"),
            provenance: Provenance::Synthetic,
            image_rows,
            image_cols,
        });
    }
    Ok(domains)
}

fn square_layout(dim: usize) -> (usize, usize) {
    let w = (dim as f64).sqrt().round() as usize;
    if w * w == dim {
        (w, w)
    } else {
        (1, dim)
    }
}

/// Orthonormal columns via modified Gram-Schmidt on a Gaussian matrix.
fn random_orthonormal_columns(rng: &mut RngStream, dim: usize, n_cols: usize) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n_cols);
    while cols.len() < n_cols {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for existing in &cols {
            let proj: f64 = v.iter().zip(existing).map(|(a, b)| a * b).sum();
            for (vi, ei) in v.iter_mut().zip(existing) {
                *vi -= proj * ei;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // numerically dependent draw, try again
        }
        for vi in &mut v {
            *vi /= norm;
        }
        cols.push(v);
    }
    let mut m = Matrix::zeros(dim, n_cols);
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            m.set(i, j, v);
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Leave-one-domain-out protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MetaSplit {
    pub train_domains: Vec<String>,
    pub test_domain: String,
}

/// One split per domain, holding each out in turn.
pub fn leave_one_out_splits(domains: &[DomainDataset]) -> Result<Vec<MetaSplit>, TaskError> {
    if domains.len() < 2 {
        return Err(TaskError::TooFewDomains(domains.len()));
    }
    Ok((0..domains.len())
        .map(|held| MetaSplit {
            train_domains: domains
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != held)
                .map(|(_, d)| d.domain.clone())
                .collect(),
            test_domain: domains[held].domain.clone(),
        })
        .collect())
}

/// Loads a dataset manifest: one domain per line,
/// `tag images_path labels_path [rotate_degrees] [downsample_to]`,
/// `#`-comments allowed. Relative paths resolve against `data_root`.
pub fn load_manifest<P: AsRef<Path>>(
    manifest_path: P,
    data_root: Option<&Path>,
) -> Result<Vec<DomainDataset>, TaskError> {
    let text = std::fs::read_to_string(manifest_path.as_ref()).map_err(|source| IdxError::Io {
        path: manifest_path.as_ref().display().to_string(),
        source,
    })?;
    let resolve = |raw: &str| -> std::path::PathBuf {
        let p = Path::new(raw);
        match (p.is_relative(), data_root) {
            (true, Some(root)) => root.join(p),
            _ => p.to_path_buf(),
        }
    };
    let mut domains = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(TaskError::BadArguments(format!(
                "manifest line {}: expected `tag images labels [rotate] [downsample]`",
                lineno + 1
            )));
        }
        let mut ds = load_idx_with_tag(resolve(fields[1]), resolve(fields[2]), fields[0])?;
        if let Some(deg) = fields.get(3) {
            let degrees: f64 = deg.parse().map_err(|_| {
                TaskError::BadArguments(format!("manifest line {}: bad angle {deg}", lineno + 1))
            })?;
            ds = rotate_dataset(&ds, degrees)?;
            ds.domain = fields[0].to_string();
        }
        if let Some(target) = fields.get(4) {
            let to_w: usize = target.parse().map_err(|_| {
                TaskError::BadArguments(format!("manifest line {}: bad width {target}", lineno + 1))
            })?;
            ds = downsample_block_mean(&ds, to_w)?;
        }
        domains.push(ds);
    }
    Ok(domains)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bregman::DiagonalMahalanobisSet;
    use crate::numerics::norm2;
    use crate::optim::{run_training, OptimizerSpec, StoppingCriteria, TaskData};

    #[test]
    fn forced_c_injection() {
        let c = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 2.0_f64.sqrt()]]);
        let b = Vector::from_slice(&[2.0, 4.0]);
        let task = QuadraticTask::from_c(c, b).unwrap();
        assert!((task.q.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((task.q.get(1, 1) - 2.0).abs() < 1e-15);
        assert!((task.theta_star[0] - 1.0).abs() < 1e-10);
        assert!((task.theta_star[1] - 1.0).abs() < 1e-10);
        // 2 Q theta* = b holds.
        let two_q_ts = matvec(&task.q, &task.theta_star).unwrap().scale(2.0);
        assert!(norm2(&two_q_ts.sub(&task.b)) <= 1e-10);
    }

    #[test]
    fn sampled_q_diagonal_mean_in_range() {
        let mut rng = RngStream::new(510, 0);
        let mut sum_q00 = 0.0;
        for _ in 0..1000 {
            let t = sample_quadratic(&mut rng, 0.3, 14.0).unwrap();
            sum_q00 += t.q.get(0, 0);
        }
        let mean = sum_q00 / 1000.0;
        assert!((0.15..=0.6).contains(&mean), "mean Q00 = {mean}");
    }

    #[test]
    fn sampled_q_is_positive_definite() {
        let mut rng = RngStream::new(511, 0);
        for _ in 0..20 {
            let t = sample_quadratic(&mut rng, 0.3, 14.0).unwrap();
            assert!(t.min_eigenvalue() > 0.0);
            for _ in 0..100 {
                let x = rng.normal_vector(2);
                if norm2(&x) < 1e-6 {
                    continue;
                }
                let qx = matvec(&t.q, &x).unwrap();
                assert!(x.dot(&qx) > 0.0);
            }
        }
    }

    #[test]
    fn quadratic_tasks_trainable_with_metamd() {
        let mut rng = RngStream::new(512, 0);
        let set = DiagonalMahalanobisSet::ones(1, 2);
        for _ in 0..3 {
            let task = sample_quadratic(&mut rng, 0.3, 14.0).unwrap();
            let model = task.to_model();
            let spec = OptimizerSpec::metamd(set.clone(), 0.02).unwrap();
            let stop = StoppingCriteria::grad_eps(1e-3, 200_000).unwrap();
            for _ in 0..10 {
                let init = rng.normal_vector(2);
                let traj = run_training(
                    &model,
                    &TaskData::Full(&Batch::empty()),
                    &spec,
                    &stop,
                    &init,
                    None,
                )
                .unwrap();
                assert_eq!(traj.stop_reason, crate::optim::StopReason::GradEps);
                assert!(norm2(&traj.final_theta().sub(&task.theta_star)) < 0.1);
            }
        }
    }

    #[test]
    fn rosenbrock_values() {
        let model = rosenbrock_task();
        let min = Vector::from_slice(&[1.0, 1.0]);
        assert_eq!(model.loss(&min, &Batch::empty()).unwrap(), 0.0);
        assert_eq!(model.grad(&min, &Batch::empty()).unwrap().as_slice(), &[0.0, 0.0]);
        assert_eq!(
            model.loss(&Vector::zeros(2), &Batch::empty()).unwrap(),
            1.0
        );
    }

    fn hand_crafted_idx_pair(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        // Header 00 00 08 03, dims (1, 2, 2), payload 00 7F FF 40.
        let images: Vec<u8> = vec![
            0, 0, 0x08, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0x00, 0x7f, 0xff, 0x40,
        ];
        let labels: Vec<u8> = vec![0, 0, 0x08, 1, 0, 0, 0, 1, 7];
        let ip = dir.join("img.idx");
        let lp = dir.join("lbl.idx");
        std::fs::write(&ip, images).unwrap();
        std::fs::write(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_hand_decoded_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = hand_crafted_idx_pair(dir.path());
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.image_rows, 2);
        assert_eq!(ds.labels, vec![7]);
        let px = ds.images.row(0);
        assert_eq!(px[0], 0.0);
        assert!((px[1] - 127.0 / 255.0).abs() < 1e-15);
        assert_eq!(px[2], 1.0);
        assert!((px[3] - 64.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn idx_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = hand_crafted_idx_pair(dir.path());
        let ds = load_idx(&ip, &lp).unwrap();
        let ip2 = dir.path().join("img2.idx");
        let lp2 = dir.path().join("lbl2.idx");
        save_idx(&ds, &ip2, &lp2).unwrap();
        assert_eq!(std::fs::read(&ip).unwrap(), std::fs::read(&ip2).unwrap());
        assert_eq!(std::fs::read(&lp).unwrap(), std::fs::read(&lp2).unwrap());
    }

    #[test]
    fn idx_truncated_header_names_offset() {
        let err = parse_idx(&[0, 0, 0x08], 3).unwrap_err();
        match err {
            IdxError::Truncated { offset, .. } => assert_eq!(offset, 0),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn idx_rejects_all_header_mutations() {
        let images: Vec<u8> = vec![
            0, 0, 0x08, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0x00, 0x7f, 0xff, 0x40,
        ];
        assert!(parse_idx(&images, 3).is_ok());
        for offset in 0..8 {
            for mutation in [images[offset] ^ 0xff, images[offset].wrapping_add(1), 0x55] {
                if mutation == images[offset] {
                    continue;
                }
                let mut corrupted = images.clone();
                corrupted[offset] = mutation;
                assert!(
                    parse_idx(&corrupted, 3).is_err(),
                    "offset {offset} mutation {mutation:#04x} accepted"
                );
            }
        }
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, _) = hand_crafted_idx_pair(dir.path());
        let labels: Vec<u8> = vec![0, 0, 0x08, 1, 0, 0, 0, 2, 7, 3];
        let lp = dir.path().join("two_labels.idx");
        std::fs::write(&lp, labels).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(TaskError::Idx(IdxError::CountMismatch { images: 1, labels: 2 }))
        ));
    }

    fn single_bright_pixel(w: usize, r: usize, c: usize) -> DomainDataset {
        let mut images = Matrix::zeros(1, w * w);
        images.set(0, r * w + c, 1.0);
        DomainDataset {
            images,
            labels: vec![0],
            domain: "pixel".into(),
            provenance: Provenance::Synthetic,
            image_rows: w,
            image_cols: w,
        }
    }

    #[test]
    fn rotate_zero_degrees_is_identity() {
        let ds = single_bright_pixel(5, 1, 3);
        let rot = rotate_dataset(&ds, 0.0).unwrap();
        for i in 0..25 {
            assert!((rot.images.get(0, i) - ds.images.get(0, i)).abs() < 1e-12);
        }
    }

    #[test]
    fn rotate_full_circle_close_to_identity() {
        let mut rng = RngStream::new(513, 0);
        let mut images = Matrix::zeros(2, 49);
        for ex in 0..2 {
            for i in 0..49 {
                images.set(ex, i, rng.uniform());
            }
        }
        let ds = DomainDataset {
            images,
            labels: vec![0, 1],
            domain: "noise".into(),
            provenance: Provenance::Synthetic,
            image_rows: 7,
            image_cols: 7,
        };
        let rot = rotate_dataset(&ds, 360.0).unwrap();
        let mut max_dev = 0.0_f64;
        for ex in 0..2 {
            for i in 0..49 {
                max_dev = max_dev.max((rot.images.get(ex, i) - ds.images.get(ex, i)).abs());
            }
        }
        assert!(max_dev <= 0.02, "max deviation {max_dev}");
    }

    #[test]
    fn rotate_quarter_turn_moves_pixel() {
        // Bright pixel one row above center moves to one column right of
        // center under a 90-degree turn (content rotates clockwise on the
        // row-down raster).
        let ds = single_bright_pixel(5, 1, 2);
        let rot = rotate_dataset(&ds, 90.0).unwrap();
        assert!(rot.images.get(0, 2 * 5 + 3) > 0.99);
        let total: f64 = rot.images.row(0).iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rotate_preserves_count_and_labels() {
        let mut rng = RngStream::new(514, 0);
        let domains = synthetic_domains(&mut rng, 1, 3, 16, 5).unwrap();
        let rot = rotate_dataset(&domains[0], 33.0).unwrap();
        assert_eq!(rot.len(), domains[0].len());
        assert_eq!(rot.labels, domains[0].labels);
    }

    #[test]
    fn rotate_rejects_non_square() {
        let ds = DomainDataset {
            images: Matrix::zeros(1, 6),
            labels: vec![0],
            domain: "r".into(),
            provenance: Provenance::Synthetic,
            image_rows: 2,
            image_cols: 3,
        };
        assert!(matches!(
            rotate_dataset(&ds, 15.0),
            Err(TaskError::NotSquare { rows: 2, cols: 3 })
        ));
    }

    #[test]
    fn downsample_block_mean_averages() {
        // 4x4 constant image downsampled to 2x2 stays constant.
        let images = Matrix::new(vec![0.5; 16], 1, 16).unwrap();
        let ds = DomainDataset {
            images,
            labels: vec![0],
            domain: "flat".into(),
            provenance: Provenance::Synthetic,
            image_rows: 4,
            image_cols: 4,
        };
        let small = downsample_block_mean(&ds, 2).unwrap();
        for i in 0..4 {
            assert!((small.images.get(0, i) - 0.5).abs() < 1e-12);
        }
        // Fractional ratio keeps total mass: 3x3 ones -> 2x2 ones.
        let ds3 = DomainDataset {
            images: Matrix::new(vec![1.0; 9], 1, 9).unwrap(),
            labels: vec![0],
            domain: "ones".into(),
            provenance: Provenance::Synthetic,
            image_rows: 3,
            image_cols: 3,
        };
        let small3 = downsample_block_mean(&ds3, 2).unwrap();
        for i in 0..4 {
            assert!((small3.images.get(0, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_domains_are_deterministic_and_balanced() {
        let mut r1 = RngStream::new(600, 0);
        let mut r2 = RngStream::new(600, 0);
        let d1 = synthetic_domains(&mut r1, 2, 3, 8, 4).unwrap();
        let d2 = synthetic_domains(&mut r2, 2, 3, 8, 4).unwrap();
        assert_eq!(d1.len(), 2);
        for (a, b) in d1.iter().zip(&d2) {
            assert_eq!(a.images.as_slice(), b.images.as_slice());
            assert_eq!(a.labels, b.labels);
        }
        // Exactly samples_per_class per label.
        let mut counts = [0usize; 3];
        for &l in &d1[0].labels {
            counts[l] += 1;
        }
        assert_eq!(counts, [4, 4, 4]);
        // Pixels normalized.
        for &p in d1[0].images.as_slice() {
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn synthetic_domain_linearly_separable() {
        let mut rng = RngStream::new(601, 0);
        let domains = synthetic_domains(&mut rng, 1, 3, 16, 30).unwrap();
        let model = BaseModel::linear(16, 3).unwrap();
        let batch = domains[0].to_batch();
        let spec = OptimizerSpec::sgd(0.5).unwrap();
        let stop = StoppingCriteria::max_iters_only(300);
        let mut init_rng = RngStream::new(602, 0);
        let init = model.init_params(&mut init_rng);
        let traj = run_training(&model, &TaskData::Full(&batch), &spec, &stop, &init, None)
            .unwrap();
        let acc = model.accuracy(traj.final_theta(), &batch).unwrap();
        assert!(acc >= 0.9, "train accuracy {acc}");
    }

    #[test]
    fn leave_one_out_split_shapes() {
        let mut rng = RngStream::new(603, 0);
        let domains = synthetic_domains(&mut rng, 6, 2, 4, 2).unwrap();
        let splits = leave_one_out_splits(&domains).unwrap();
        assert_eq!(splits.len(), 6);
        let mut held: Vec<&str> = Vec::new();
        for s in &splits {
            assert_eq!(s.train_domains.len(), 5);
            assert!(!s.train_domains.contains(&s.test_domain));
            held.push(&s.test_domain);
        }
        held.sort_unstable();
        held.dedup();
        assert_eq!(held.len(), 6);

        let two = synthetic_domains(&mut rng, 2, 2, 4, 2).unwrap();
        let splits = leave_one_out_splits(&two).unwrap();
        assert_eq!(splits.len(), 2);
        assert_eq!(splits[0].train_domains.len(), 1);

        assert!(leave_one_out_splits(&two[..1]).is_err());
    }

    #[test]
    fn split_train_val_partitions() {
        let mut rng = RngStream::new(604, 0);
        let domains = synthetic_domains(&mut rng, 1, 2, 4, 10).unwrap();
        let (train, val) = domains[0].split_train_val(0.1);
        assert_eq!(train.len() + val.len(), 20);
        assert_eq!(val.len(), 2);
    }

    #[test]
    fn manifest_loading() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = hand_crafted_idx_pair(dir.path());
        let manifest = dir.path().join("manifest.txt");
        std::fs::write(
            &manifest,
            format!(
                "# comment line\nplain {} {}\nturned {} {} 90\n",
                ip.display(),
                lp.display(),
                ip.display(),
                lp.display()
            ),
        )
        .unwrap();
        let domains = load_manifest(&manifest, None).unwrap();
        assert_eq!(domains.len(), 2);
        assert_eq!(domains[0].domain, "plain");
        assert_eq!(domains[1].domain, "turned");
        assert_eq!(domains[1].image_rows, 2);
    }
}
