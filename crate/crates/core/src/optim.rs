//! Inner-loop training engine.
//!
//! One `step` dispatch covers the MetaMD mirror step and the baseline
//! optimizers (SGD, SGD-momentum, Adam, RMSprop); `run_training` drives a
//! model to one of the stopping criteria while recording the trajectory.
//! Weight decay is decoupled for every optimizer: `theta <- theta (1 - eta wd)`
//! before the update.

use crate::bregman::{BregmanError, DiagonalMahalanobisSet, MirrorStepConfig};
use crate::models::{BaseModel, Batch, ModelError};
use crate::numerics::{norm2, RngStream, Vector};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("dimension mismatch: {context} ({left} vs {right})")]
    DimensionMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },
    #[error("invalid optimizer spec: {0}")]
    BadSpec(String),
    #[error("invalid stopping criteria: {0}")]
    BadCriteria(String),
    #[error("mini-batch training needs an rng stream")]
    NeedRng,
    #[error(
        "training diverged at iterate {at_iterate} (non-finite loss or gradient)"
    )]
    Diverged {
        at_iterate: usize,
        trajectory: Box<Trajectory>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bregman(#[from] BregmanError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which update rule to run.
#[derive(Debug, Clone)]
pub enum OptimizerKind {
    MetaMd(DiagonalMahalanobisSet),
    Sgd,
    SgdMomentum { mu: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
    RmsProp { alpha: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::MetaMd(_) => "metamd",
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SgdMomentum { .. } => "sgd_momentum",
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::RmsProp { .. } => "rmsprop",
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl OptimizerSpec {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self, OptimError> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(OptimError::BadSpec(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        let unit = |v: f64, name: &str| {
            if !(0.0..1.0).contains(&v) {
                Err(OptimError::BadSpec(format!("{name} must be in [0, 1), got {v}")))
            } else {
                Ok(())
            }
        };
        match &kind {
            OptimizerKind::SgdMomentum { mu } => unit(*mu, "momentum")?,
            OptimizerKind::Adam { beta1, beta2, eps } => {
                unit(*beta1, "beta1")?;
                unit(*beta2, "beta2")?;
                if !(*eps > 0.0) {
                    return Err(OptimError::BadSpec(format!("eps must be positive, got {eps}")));
                }
            }
            OptimizerKind::RmsProp { alpha, eps } => {
                unit(*alpha, "alpha")?;
                if !(*eps > 0.0) {
                    return Err(OptimError::BadSpec(format!("eps must be positive, got {eps}")));
                }
            }
            _ => {}
        }
        Ok(Self {
            kind,
            learning_rate,
            weight_decay: 0.0,
        })
    }

    pub fn sgd(lr: f64) -> Result<Self, OptimError> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    /// Classical heavy-ball momentum, mu = 0.9 by convention ("SGD+M09").
    pub fn sgd_momentum(lr: f64, mu: f64) -> Result<Self, OptimError> {
        Self::new(OptimizerKind::SgdMomentum { mu }, lr)
    }

    pub fn adam(lr: f64) -> Result<Self, OptimError> {
        Self::new(
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
        )
    }

    pub fn rmsprop(lr: f64) -> Result<Self, OptimError> {
        Self::new(
            OptimizerKind::RmsProp {
                alpha: 0.99,
                eps: 1e-8,
            },
            lr,
        )
    }

    pub fn metamd(set: DiagonalMahalanobisSet, lr: f64) -> Result<Self, OptimError> {
        Self::new(OptimizerKind::MetaMd(set), lr)
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Result<Self, OptimError> {
        if !(wd >= 0.0) || !wd.is_finite() {
            return Err(OptimError::BadSpec(format!(
                "weight decay must be nonnegative, got {wd}"
            )));
        }
        self.weight_decay = wd;
        Ok(self)
    }

    pub fn init_state(&self, kappa: usize) -> OptimizerState {
        match &self.kind {
            OptimizerKind::SgdMomentum { .. } => OptimizerState::Momentum {
                v: Vector::zeros(kappa),
            },
            OptimizerKind::Adam { .. } => OptimizerState::Adam {
                m: Vector::zeros(kappa),
                v: Vector::zeros(kappa),
                t: 0,
            },
            OptimizerKind::RmsProp { .. } => OptimizerState::RmsProp {
                s: Vector::zeros(kappa),
            },
            _ => OptimizerState::Stateless,
        }
    }
}

/// Per-optimizer running state (momentum buffers etc).
#[derive(Debug, Clone)]
pub enum OptimizerState {
    Stateless,
    Momentum { v: Vector },
    Adam { m: Vector, v: Vector, t: u64 },
    RmsProp { s: Vector },
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub theta: Vector,
    /// Active Mahalanobis matrix index, MetaMD only.
    pub active_index: Option<usize>,
}

/// One optimizer update.
pub fn step(
    spec: &OptimizerSpec,
    state: &mut OptimizerState,
    theta: &Vector,
    g: &Vector,
) -> Result<StepResult, OptimError> {
    if theta.len() != g.len() {
        return Err(OptimError::DimensionMismatch {
            context: "step theta vs gradient",
            left: theta.len(),
            right: g.len(),
        });
    }
    let lr = spec.learning_rate;
    // Decoupled weight decay, applied before the update for every kind.
    let theta = if spec.weight_decay > 0.0 {
        theta.scale(1.0 - lr * spec.weight_decay)
    } else {
        theta.clone()
    };
    match (&spec.kind, state) {
        (OptimizerKind::Sgd, OptimizerState::Stateless) => Ok(StepResult {
            theta: theta.sub(&g.scale(lr)),
            active_index: None,
        }),
        (OptimizerKind::SgdMomentum { mu }, OptimizerState::Momentum { v }) => {
            *v = v.scale(*mu).add(g);
            Ok(StepResult {
                theta: theta.sub(&v.scale(lr)),
                active_index: None,
            })
        }
        (OptimizerKind::Adam { beta1, beta2, eps }, OptimizerState::Adam { m, v, t }) => {
            *t += 1;
            *m = m.scale(*beta1).add(&g.scale(1.0 - beta1));
            *v = v.scale(*beta2).add(&g.hadamard(g).scale(1.0 - beta2));
            let bc1 = 1.0 - beta1.powi(*t as i32);
            let bc2 = 1.0 - beta2.powi(*t as i32);
            let mut next = theta.clone();
            for i in 0..next.len() {
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                next[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            Ok(StepResult {
                theta: next,
                active_index: None,
            })
        }
        (OptimizerKind::RmsProp { alpha, eps }, OptimizerState::RmsProp { s }) => {
            *s = s.scale(*alpha).add(&g.hadamard(g).scale(1.0 - alpha));
            let mut next = theta.clone();
            for i in 0..next.len() {
                next[i] -= lr * g[i] / (s[i].sqrt() + eps);
            }
            Ok(StepResult {
                theta: next,
                active_index: None,
            })
        }
        (OptimizerKind::MetaMd(set), OptimizerState::Stateless) => {
            let cfg = MirrorStepConfig::new(lr)?;
            let (next, j) = set.mirror_step(&cfg, &theta, g)?;
            Ok(StepResult {
                theta: next,
                active_index: Some(j),
            })
        }
        _ => Err(OptimError::BadSpec(
            "optimizer state does not match spec kind".into(),
        )),
    }
}

/// Loss-plateau rule: stop when the range of the last `window` losses is
/// at most `tol`.
#[derive(Debug, Clone, Copy)]
pub struct PlateauRule {
    pub window: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct StoppingCriteria {
    pub grad_norm_eps: Option<f64>,
    pub plateau: Option<PlateauRule>,
    pub max_iters: usize,
}

impl StoppingCriteria {
    /// The standard experiment rule: `||g||_2 <= eps`, with a step cap.
    pub fn grad_eps(eps: f64, max_iters: usize) -> Result<Self, OptimError> {
        if !(eps > 0.0) {
            return Err(OptimError::BadCriteria(format!(
                "grad-norm eps must be positive, got {eps}"
            )));
        }
        Ok(Self {
            grad_norm_eps: Some(eps),
            plateau: None,
            max_iters,
        })
    }

    pub fn max_iters_only(max_iters: usize) -> Self {
        Self {
            grad_norm_eps: None,
            plateau: None,
            max_iters,
        }
    }

    pub fn with_plateau(mut self, window: usize, tol: f64) -> Result<Self, OptimError> {
        if window < 2 {
            return Err(OptimError::BadCriteria(format!(
                "plateau window must be >= 2, got {window}"
            )));
        }
        self.plateau = Some(PlateauRule { window, tol });
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradEps,
    Plateau,
    MaxIters,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StopReason::GradEps => "grad_eps",
            StopReason::Plateau => "plateau",
            StopReason::MaxIters => "max_iters",
        };
        f.write_str(s)
    }
}

/// A parameter snapshot at a given iterate index.
#[derive(Debug, Clone)]
pub struct ThetaSnapshot {
    pub iterate: usize,
    pub theta: Vector,
}

/// Record of one training run. Losses, gradient norms, and (for MetaMD)
/// active-matrix indices are dense over the visited iterates
/// `theta_1 .. theta_{T+1}`; parameter snapshots may be thinned.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub snapshots: Vec<ThetaSnapshot>,
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub active_indices: Vec<usize>,
    pub stop_reason: StopReason,
    /// Number of optimizer steps taken.
    pub iterations: usize,
    pub thin_stride: usize,
}

impl Trajectory {
    pub fn final_theta(&self) -> &Vector {
        &self.snapshots.last().expect("trajectory has iterates").theta
    }

    pub fn initial_theta(&self) -> &Vector {
        &self.snapshots.first().expect("trajectory has iterates").theta
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("trajectory has losses")
    }

    pub fn final_grad_norm(&self) -> f64 {
        *self.grad_norms.last().expect("trajectory has gradients")
    }

    /// Number of visited iterates (`iterations + 1` unless diverged early).
    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    /// CSV export: `iteration,loss,grad_norm,active_index`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), OptimError> {
        writeln!(w, "iteration,loss,grad_norm,active_index")?;
        for i in 0..self.losses.len() {
            let active = self
                .active_indices
                .get(i)
                .map(|j| j.to_string())
                .unwrap_or_default();
            writeln!(w, "{},{},{},{}", i, self.losses[i], self.grad_norms[i], active)?;
        }
        Ok(())
    }

    /// Binary dump of the parameter snapshots for trajectory plotting:
    /// magic, version, kappa, count, then `(iterate u32, kappa f64)` records.
    pub fn write_thetas_binary<W: Write>(&self, mut w: W) -> Result<(), OptimError> {
        let kappa = self.final_theta().len();
        w.write_all(b"MMDT")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(kappa as u32).to_le_bytes())?;
        w.write_all(&(self.snapshots.len() as u32).to_le_bytes())?;
        for snap in &self.snapshots {
            w.write_all(&(snap.iterate as u32).to_le_bytes())?;
            for &v in snap.theta.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

/// Training data as the inner loop sees it: deterministic full batches
/// (canonical for meta-training) or per-step mini-batches drawn from a
/// task-owned stream.
#[derive(Debug, Clone, Copy)]
pub enum TaskData<'a> {
    Full(&'a Batch),
    Mini { data: &'a Batch, batch_size: usize },
}

impl<'a> TaskData<'a> {
    pub fn full_batch(&self) -> &'a Batch {
        match self {
            TaskData::Full(b) => b,
            TaskData::Mini { data, .. } => data,
        }
    }
}

/// Runs the optimizer until a stopping criterion fires. Records every
/// visited iterate's loss and gradient norm; `stop_reason` says which
/// criterion ended the run.
pub fn run_training(
    model: &BaseModel,
    data: &TaskData,
    spec: &OptimizerSpec,
    stop: &StoppingCriteria,
    theta_init: &Vector,
    rng: Option<&mut RngStream>,
) -> Result<Trajectory, OptimError> {
    run_training_thinned(model, data, spec, stop, theta_init, rng, 1)
}

pub fn run_training_thinned(
    model: &BaseModel,
    data: &TaskData,
    spec: &OptimizerSpec,
    stop: &StoppingCriteria,
    theta_init: &Vector,
    mut rng: Option<&mut RngStream>,
    thin_stride: usize,
) -> Result<Trajectory, OptimError> {
    if theta_init.len() != model.param_count() {
        return Err(OptimError::DimensionMismatch {
            context: "theta_init vs model",
            left: theta_init.len(),
            right: model.param_count(),
        });
    }
    let stride = thin_stride.max(1);
    let metamd_set = match &spec.kind {
        OptimizerKind::MetaMd(set) => Some(set),
        _ => None,
    };
    let mut state = spec.init_state(model.param_count());
    let mut theta = theta_init.clone();
    let mut mini_indices: Vec<usize> = Vec::new();

    let mut snapshots = vec![ThetaSnapshot {
        iterate: 0,
        theta: theta.clone(),
    }];
    let mut losses = Vec::new();
    let mut grad_norms = Vec::new();
    let mut active_indices = Vec::new();
    let mut iterations = 0usize;

    let stop_reason = loop {
        let owned_batch;
        let batch: &Batch = match data {
            TaskData::Full(b) => b,
            TaskData::Mini { data, batch_size } => {
                let rng = rng.as_deref_mut().ok_or(OptimError::NeedRng)?;
                if mini_indices.len() != data.len() {
                    mini_indices = (0..data.len()).collect();
                }
                // Partial Fisher-Yates: the first batch_size slots become a
                // uniform sample without replacement.
                let k = (*batch_size).min(data.len());
                for i in 0..k {
                    let j = i + rng.uniform_usize(data.len() - i);
                    mini_indices.swap(i, j);
                }
                owned_batch = data.subset(&mini_indices[..k]);
                &owned_batch
            }
        };

        let (loss, g) = model.loss_grad(&theta, batch)?;
        let gn = norm2(&g);
        losses.push(loss);
        grad_norms.push(gn);
        if let Some(set) = metamd_set {
            active_indices.push(set.active_index(&theta));
        }

        if !loss.is_finite() || !g.is_finite() {
            ensure_final_snapshot(&mut snapshots, iterations, &theta);
            return Err(OptimError::Diverged {
                at_iterate: iterations,
                trajectory: Box::new(Trajectory {
                    snapshots,
                    losses,
                    grad_norms,
                    active_indices,
                    stop_reason: StopReason::MaxIters,
                    iterations,
                    thin_stride: stride,
                }),
            });
        }

        if let Some(eps) = stop.grad_norm_eps {
            if gn <= eps {
                break StopReason::GradEps;
            }
        }
        if let Some(p) = stop.plateau {
            if losses.len() >= p.window {
                let window = &losses[losses.len() - p.window..];
                let max = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let min = window.iter().cloned().fold(f64::INFINITY, f64::min);
                if max - min <= p.tol {
                    break StopReason::Plateau;
                }
            }
        }
        if iterations >= stop.max_iters {
            break StopReason::MaxIters;
        }

        let result = step(spec, &mut state, &theta, &g)?;
        theta = result.theta;
        iterations += 1;
        if iterations % stride == 0 {
            snapshots.push(ThetaSnapshot {
                iterate: iterations,
                theta: theta.clone(),
            });
        }
    };

    ensure_final_snapshot(&mut snapshots, iterations, &theta);
    Ok(Trajectory {
        snapshots,
        losses,
        grad_norms,
        active_indices,
        stop_reason,
        iterations,
        thin_stride: stride,
    })
}

fn ensure_final_snapshot(snapshots: &mut Vec<ThetaSnapshot>, iterations: usize, theta: &Vector) {
    if snapshots.last().map(|s| s.iterate) != Some(iterations) {
        snapshots.push(ThetaSnapshot {
            iterate: iterations,
            theta: theta.clone(),
        });
    }
}
