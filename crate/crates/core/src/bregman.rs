//! The learnable divergence family.
//!
//! `phi(theta) = 1/2 max_j theta^T M_j^2 theta` over N diagonal matrices
//! `M_j = diag(m_j)`, with the raw entries squared in use so the effective
//! diagonals are nonnegative by construction. The induced Bregman divergence
//! `B_phi(a||b) = phi(a) - phi(b) - <grad phi(b), a - b>` drives the mirror
//! step, which has the closed form `theta - eta * M_{j*}^{-2} g` with `j*`
//! the matrix active at `theta`.
//!
//! Scaling convention: `phi` carries the 1/2 factor and the mirror-loop
//! objective is `eta <g, theta> + B_phi(theta || theta_t)`, so the closed
//! form above is the exact minimizer; alternative placements of the 1/2 are
//! recovered by rescaling `eta`.

use crate::numerics::{norm2, Vector};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

/// Binary snapshot magic + current version.
const SNAPSHOT_MAGIC: &[u8; 4] = b"MMDS";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BregmanError {
    #[error("dimension mismatch: {context} ({left} vs {right})")]
    DimensionMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },
    #[error("divergence invalid: raw diagonal entry m[{matrix}][{coord}] is zero")]
    Degenerate { matrix: usize, coord: usize },
    #[error("need at least one diagonal matrix")]
    EmptySet,
    #[error("step size must be positive, got {0}")]
    BadStepSize(f64),
    #[error("snapshot format error: {0}")]
    SnapshotFormat(String),
    #[error("snapshot io: {0}")]
    SnapshotIo(#[from] std::io::Error),
}

/// Mirror-descent step size.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MirrorStepConfig {
    eta: f64,
}

impl MirrorStepConfig {
    pub fn new(eta: f64) -> Result<Self, BregmanError> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(BregmanError::BadStepSize(eta));
        }
        Ok(Self { eta })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }
}

/// The learnable parameters: N raw diagonal vectors of length kappa,
/// squared where they enter the math.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalMahalanobisSet {
    raw: Vec<Vector>,
    kappa: usize,
}

impl DiagonalMahalanobisSet {
    pub fn new(raw: Vec<Vector>) -> Result<Self, BregmanError> {
        let Some(first) = raw.first() else {
            return Err(BregmanError::EmptySet);
        };
        let kappa = first.len();
        for m in &raw {
            if m.len() != kappa {
                return Err(BregmanError::DimensionMismatch {
                    context: "raw diagonal lengths",
                    left: m.len(),
                    right: kappa,
                });
            }
        }
        Ok(Self { raw, kappa })
    }

    /// All raw entries one: the induced optimizer is plain gradient descent.
    pub fn ones(n: usize, kappa: usize) -> Self {
        Self {
            raw: (0..n).map(|_| Vector::ones(kappa)).collect(),
            kappa,
        }
    }

    pub fn n_matrices(&self) -> usize {
        self.raw.len()
    }

    pub fn kappa(&self) -> usize {
        self.kappa
    }

    pub fn raw(&self, j: usize) -> &Vector {
        &self.raw[j]
    }

    pub fn raw_mut(&mut self, j: usize) -> &mut Vector {
        &mut self.raw[j]
    }

    /// Effective diagonal entry `m[j][i]^2`.
    pub fn effective(&self, j: usize, i: usize) -> f64 {
        let m = self.raw[j][i];
        m * m
    }

    /// True when some raw entry is exactly zero (lambda = 0, mirror step
    /// undefined).
    pub fn is_degenerate(&self) -> bool {
        self.find_zero().is_some()
    }

    fn find_zero(&self) -> Option<(usize, usize)> {
        for (j, m) in self.raw.iter().enumerate() {
            for i in 0..self.kappa {
                if m[i] == 0.0 {
                    return Some((j, i));
                }
            }
        }
        None
    }

    /// Value of the j-th quadratic piece (without the 1/2 factor).
    fn piece(&self, j: usize, theta: &Vector) -> f64 {
        let m = &self.raw[j];
        theta
            .iter()
            .zip(m.iter())
            .map(|(&t, &mi)| mi * mi * t * t)
            .sum()
    }

    /// Index of the active matrix at `theta`; ties break to the lowest index.
    pub fn active_index(&self, theta: &Vector) -> usize {
        debug_assert_eq!(theta.len(), self.kappa);
        let mut best = 0usize;
        let mut best_val = self.piece(0, theta);
        for j in 1..self.raw.len() {
            let v = self.piece(j, theta);
            if v > best_val {
                best = j;
                best_val = v;
            }
        }
        best
    }

    /// `phi(theta) = 1/2 max_j theta^T M_j^2 theta`.
    pub fn phi(&self, theta: &Vector) -> f64 {
        0.5 * self.piece(self.active_index(theta), theta)
    }

    /// Gradient of `phi` (the active piece's gradient; a subgradient
    /// selection at ties): `M_{j*}^2 theta`.
    pub fn grad_phi(&self, theta: &Vector) -> Vector {
        let j = self.active_index(theta);
        let m = &self.raw[j];
        Vector::from_vec(
            theta
                .iter()
                .zip(m.iter())
                .map(|(&t, &mi)| mi * mi * t)
                .collect(),
        )
    }

    /// `B_phi(a || b) = phi(a) - phi(b) - <grad phi(b), a - b>`, always >= 0.
    pub fn bregman_div(&self, a: &Vector, b: &Vector) -> f64 {
        debug_assert_eq!(a.len(), self.kappa);
        debug_assert_eq!(b.len(), self.kappa);
        if self.raw.len() == 1 {
            // Single matrix: the definition collapses to the quadratic form
            // 1/2 sum m_i^2 (a_i - b_i)^2; computing it directly avoids
            // cancellation.
            let m = &self.raw[0];
            return 0.5
                * (0..self.kappa)
                    .map(|i| {
                        let d = a[i] - b[i];
                        m[i] * m[i] * d * d
                    })
                    .sum::<f64>();
        }
        let gb = self.grad_phi(b);
        let mut inner = 0.0;
        for i in 0..self.kappa {
            inner += gb[i] * (a[i] - b[i]);
        }
        self.phi(a) - self.phi(b) - inner
    }

    /// Strong-convexity constant: the smallest effective diagonal entry.
    pub fn lambda(&self) -> f64 {
        let mut min = f64::INFINITY;
        for m in &self.raw {
            for i in 0..self.kappa {
                let e = m[i] * m[i];
                if e < min {
                    min = e;
                }
            }
        }
        min
    }

    /// Row-major-first `(j, i)` of the entry attaining `lambda`.
    pub fn lambda_argmin(&self) -> (usize, usize) {
        let mut arg = (0, 0);
        let mut min = f64::INFINITY;
        for (j, m) in self.raw.iter().enumerate() {
            for i in 0..self.kappa {
                let e = m[i] * m[i];
                if e < min {
                    min = e;
                    arg = (j, i);
                }
            }
        }
        arg
    }

    /// One mirror-descent step: `theta - eta * M_{j*}^{-2} g` with the
    /// active index evaluated at `theta`.
    pub fn mirror_step(
        &self,
        cfg: &MirrorStepConfig,
        theta: &Vector,
        g: &Vector,
    ) -> Result<(Vector, usize), BregmanError> {
        if theta.len() != self.kappa || g.len() != self.kappa {
            return Err(BregmanError::DimensionMismatch {
                context: "mirror_step theta/g vs kappa",
                left: theta.len().max(g.len()),
                right: self.kappa,
            });
        }
        if let Some((matrix, coord)) = self.find_zero() {
            return Err(BregmanError::Degenerate { matrix, coord });
        }
        let j = self.active_index(theta);
        let m = &self.raw[j];
        let next = Vector::from_vec(
            (0..self.kappa)
                .map(|i| theta[i] - cfg.eta * g[i] / (m[i] * m[i]))
                .collect(),
        );
        Ok((next, j))
    }

    /// Clamps every raw entry away from zero: `|m| >= floor`, sign kept.
    pub fn clamp_floor(&mut self, floor: f64) {
        for m in &mut self.raw {
            for i in 0..m.len() {
                if m[i].abs() < floor {
                    m[i] = floor * m[i].signum();
                }
            }
        }
    }

    /// Frobenius norm of `M_j` over the effective diagonal, i.e.
    /// `sqrt(sum_i m_{j,i}^4)`.
    pub fn frobenius_effective(&self, j: usize) -> f64 {
        self.raw[j]
            .iter()
            .map(|&m| {
                let e = m * m;
                e * e
            })
            .sum::<f64>()
            .sqrt()
    }

    /// l2 norm of the raw diagonal vector `m_j`.
    pub fn norm_raw(&self, j: usize) -> f64 {
        norm2(&self.raw[j])
    }

    // -- snapshots ----------------------------------------------------------

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), BregmanError> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&(self.raw.len() as u32).to_le_bytes())?;
        w.write_all(&(self.kappa as u32).to_le_bytes())?;
        for m in &self.raw {
            for &v in m.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, BregmanError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(BregmanError::SnapshotFormat(format!(
                "bad magic {magic:?}, expected {SNAPSHOT_MAGIC:?}"
            )));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != SNAPSHOT_VERSION {
            return Err(BregmanError::SnapshotFormat(format!(
                "unsupported snapshot version {version}"
            )));
        }
        r.read_exact(&mut u32buf)?;
        let n = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let kappa = u32::from_le_bytes(u32buf) as usize;
        if n == 0 || kappa == 0 {
            return Err(BregmanError::SnapshotFormat(format!(
                "empty snapshot (n={n}, kappa={kappa})"
            )));
        }
        let mut raw = Vec::with_capacity(n);
        let mut f64buf = [0u8; 8];
        for _ in 0..n {
            let mut m = Vec::with_capacity(kappa);
            for _ in 0..kappa {
                r.read_exact(&mut f64buf)?;
                m.push(f64::from_le_bytes(f64buf));
            }
            raw.push(Vector::from_vec(m));
        }
        DiagonalMahalanobisSet::new(raw)
    }

    pub fn to_json(&self) -> String {
        let snap = SnapshotJson {
            version: SNAPSHOT_VERSION,
            n: self.raw.len(),
            kappa: self.kappa,
            raw_diagonals: self.raw.iter().map(|m| m.as_slice().to_vec()).collect(),
        };
        serde_json::to_string_pretty(&snap).expect("snapshot serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, BregmanError> {
        let snap: SnapshotJson = serde_json::from_str(s)
            .map_err(|e| BregmanError::SnapshotFormat(e.to_string()))?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(BregmanError::SnapshotFormat(format!(
                "unsupported snapshot version {}",
                snap.version
            )));
        }
        if snap.raw_diagonals.len() != snap.n
            || snap.raw_diagonals.iter().any(|m| m.len() != snap.kappa)
        {
            return Err(BregmanError::SnapshotFormat(
                "diagonal shapes disagree with header".into(),
            ));
        }
        DiagonalMahalanobisSet::new(snap.raw_diagonals.into_iter().map(Vector::from_vec).collect())
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotJson {
    version: u32,
    n: usize,
    kappa: usize,
    raw_diagonals: Vec<Vec<f64>>,
}
