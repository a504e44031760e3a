//! Differentiable base learners over a flattened parameter vector.
//!
//! Four architectures share one interface: scalar loss, exact analytic
//! gradient, exact Hessian-vector product, and a dense Hessian assembled
//! column-by-column from HVPs. Quadratics and Rosenbrock ignore the batch;
//! the linear classifier and MLP consume feature rows with integer labels
//! (mean softmax cross-entropy) or regression targets (mean squared error).

mod autodiff;

pub use autodiff::{Dual, Scalar};

use crate::numerics::{Matrix, RngStream, Vector};
use thiserror::Error;

/// Hard ceiling for dense Hessian assembly unless a caller raises it.
pub const DEFAULT_HESSIAN_CAP: usize = 512;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {context} ({left} vs {right})")]
    DimensionMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },
    #[error("label {label} out of range for {classes} classes (example {example})")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        example: usize,
    },
    #[error("parameter count {kappa} exceeds dense-Hessian cap {cap}")]
    HessianCapExceeded { kappa: usize, cap: usize },
    #[error("batch targets incompatible with model: {0}")]
    BadTargets(&'static str),
    #[error("invalid architecture: {0}")]
    BadArchitecture(String),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

/// Hidden-layer nonlinearity. `Tanh` is twice differentiable and is the
/// default for meta-training; `Relu` is offered for baseline-only runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone)]
pub enum Architecture {
    /// `l(theta) = theta^T Q theta - b^T theta` with symmetric `Q`.
    Quadratic { q: Matrix, b: Vector },
    /// `l(x, y) = (1 - x)^2 + 100 (y - x^2)^2`.
    Rosenbrock,
    /// Softmax linear classifier, parameters `[W (classes x in_dim), bias]`.
    Linear { in_dim: usize, classes: usize },
    /// Fully connected net; `layers` includes input and output widths.
    Mlp {
        layers: Vec<usize>,
        activation: Activation,
    },
}

/// Regression or classification targets for a batch.
#[derive(Debug, Clone)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Vector),
}

/// A set of training examples. Row `i` of `inputs` is example `i`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Targets) -> Result<Self, ModelError> {
        let n = match &targets {
            Targets::Labels(l) => l.len(),
            Targets::Values(v) => v.len(),
        };
        if inputs.rows() != n {
            return Err(ModelError::DimensionMismatch {
                context: "batch rows vs targets",
                left: inputs.rows(),
                right: n,
            });
        }
        Ok(Self { inputs, targets })
    }

    /// Placeholder for models that ignore data (quadratic, Rosenbrock).
    pub fn empty() -> Self {
        Self {
            inputs: Matrix::zeros(0, 0),
            targets: Targets::Labels(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    /// Row subset, used for mini-batched baseline training.
    pub fn subset(&self, indices: &[usize]) -> Batch {
        let cols = self.inputs.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        let inputs = Matrix::new(data, indices.len(), cols).expect("subset shape");
        let targets = match &self.targets {
            Targets::Labels(l) => Targets::Labels(indices.iter().map(|&i| l[i]).collect()),
            Targets::Values(v) => {
                Targets::Values(Vector::from_vec(indices.iter().map(|&i| v[i]).collect()))
            }
        };
        Batch { inputs, targets }
    }
}

/// A base learner: architecture descriptor plus its flattened parameter count.
#[derive(Debug, Clone)]
pub struct BaseModel {
    arch: Architecture,
    param_count: usize,
}

fn net_param_count(layers: &[usize]) -> usize {
    layers
        .windows(2)
        .map(|w| w[1] * (w[0] + 1))
        .sum()
}

impl BaseModel {
    pub fn quadratic(q: Matrix, b: Vector) -> Result<Self, ModelError> {
        q.check_symmetric()?;
        if q.rows() != b.len() {
            return Err(ModelError::DimensionMismatch {
                context: "quadratic Q vs b",
                left: q.rows(),
                right: b.len(),
            });
        }
        let param_count = b.len();
        Ok(Self {
            arch: Architecture::Quadratic { q, b },
            param_count,
        })
    }

    pub fn rosenbrock() -> Self {
        Self {
            arch: Architecture::Rosenbrock,
            param_count: 2,
        }
    }

    pub fn linear(in_dim: usize, classes: usize) -> Result<Self, ModelError> {
        if in_dim == 0 || classes < 2 {
            return Err(ModelError::BadArchitecture(format!(
                "linear model needs in_dim >= 1 and classes >= 2, got {in_dim}/{classes}"
            )));
        }
        Ok(Self {
            arch: Architecture::Linear { in_dim, classes },
            param_count: classes * (in_dim + 1),
        })
    }

    pub fn mlp(layers: Vec<usize>, activation: Activation) -> Result<Self, ModelError> {
        if layers.len() < 2 || layers.iter().any(|&d| d == 0) {
            return Err(ModelError::BadArchitecture(format!(
                "mlp needs >= 2 nonzero layer sizes, got {layers:?}"
            )));
        }
        let param_count = net_param_count(&layers);
        Ok(Self {
            arch: Architecture::Mlp { layers, activation },
            param_count,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    fn check_theta(&self, theta: &Vector) -> Result<(), ModelError> {
        if theta.len() != self.param_count {
            return Err(ModelError::DimensionMismatch {
                context: "theta vs param_count",
                left: theta.len(),
                right: self.param_count,
            });
        }
        Ok(())
    }

    /// Training loss at `theta`. Cross-entropy (or MSE) for data models,
    /// the raw objective for quadratic/Rosenbrock (batch ignored).
    pub fn loss(&self, theta: &Vector, batch: &Batch) -> Result<f64, ModelError> {
        self.check_theta(theta)?;
        let theta_s: Vec<f64> = theta.as_slice().to_vec();
        Ok(eval_generic::<f64>(&self.arch, &theta_s, batch, false)?.0)
    }

    /// Exact analytic gradient, length `param_count`.
    pub fn grad(&self, theta: &Vector, batch: &Batch) -> Result<Vector, ModelError> {
        self.check_theta(theta)?;
        let theta_s: Vec<f64> = theta.as_slice().to_vec();
        let (_, g) = eval_generic::<f64>(&self.arch, &theta_s, batch, true)?;
        Ok(Vector::from_vec(g))
    }

    /// Loss and gradient in one pass.
    pub fn loss_grad(&self, theta: &Vector, batch: &Batch) -> Result<(f64, Vector), ModelError> {
        self.check_theta(theta)?;
        let theta_s: Vec<f64> = theta.as_slice().to_vec();
        let (l, g) = eval_generic::<f64>(&self.arch, &theta_s, batch, true)?;
        Ok((l, Vector::from_vec(g)))
    }

    /// Hessian-vector product `H v` at `theta`, exact via dual numbers.
    pub fn hvp(&self, theta: &Vector, batch: &Batch, v: &Vector) -> Result<Vector, ModelError> {
        self.check_theta(theta)?;
        if v.len() != self.param_count {
            return Err(ModelError::DimensionMismatch {
                context: "hvp direction",
                left: v.len(),
                right: self.param_count,
            });
        }
        let theta_d: Vec<Dual> = theta
            .iter()
            .zip(v.iter())
            .map(|(&t, &d)| Dual::new(t, d))
            .collect();
        let (_, g) = eval_generic::<Dual>(&self.arch, &theta_d, batch, true)?;
        Ok(Vector::from_vec(g.into_iter().map(|d| d.du).collect()))
    }

    /// Dense symmetric Hessian, column `j = hvp(e_j)`, under the default cap.
    pub fn hessian_dense(&self, theta: &Vector, batch: &Batch) -> Result<Matrix, ModelError> {
        self.hessian_dense_with_cap(theta, batch, DEFAULT_HESSIAN_CAP)
    }

    pub fn hessian_dense_with_cap(
        &self,
        theta: &Vector,
        batch: &Batch,
        cap: usize,
    ) -> Result<Matrix, ModelError> {
        self.check_theta(theta)?;
        let kappa = self.param_count;
        if kappa > cap {
            return Err(ModelError::HessianCapExceeded { kappa, cap });
        }
        let mut h = Matrix::zeros(kappa, kappa);
        let mut e = Vector::zeros(kappa);
        for j in 0..kappa {
            e[j] = 1.0;
            let col = self.hvp(theta, batch, &e)?;
            h.set_col(j, &col);
            e[j] = 0.0;
        }
        Ok(h)
    }

    /// Standard random initialization: `N(0, 1/fan_in)` weights and zero
    /// biases for data models, standard normal for quadratic/Rosenbrock.
    pub fn init_params(&self, rng: &mut RngStream) -> Vector {
        match &self.arch {
            Architecture::Quadratic { .. } | Architecture::Rosenbrock => {
                rng.normal_vector(self.param_count)
            }
            Architecture::Linear { in_dim, classes } => {
                net_init(&[*in_dim, *classes], rng)
            }
            Architecture::Mlp { layers, .. } => net_init(layers, rng),
        }
    }

    /// Classification accuracy of `theta` on a labeled batch.
    pub fn accuracy(&self, theta: &Vector, batch: &Batch) -> Result<f64, ModelError> {
        self.check_theta(theta)?;
        let Targets::Labels(labels) = &batch.targets else {
            return Err(ModelError::BadTargets("accuracy needs labels"));
        };
        let sizes = match &self.arch {
            Architecture::Linear { in_dim, classes } => vec![*in_dim, *classes],
            Architecture::Mlp { layers, .. } => layers.clone(),
            _ => return Err(ModelError::BadTargets("accuracy needs a classifier")),
        };
        let act = match &self.arch {
            Architecture::Mlp { activation, .. } => *activation,
            _ => Activation::Tanh,
        };
        let theta_s: Vec<f64> = theta.as_slice().to_vec();
        let mut hits = 0usize;
        for ex in 0..batch.len() {
            let logits = net_forward_logits::<f64>(&sizes, act, &theta_s, batch.inputs.row(ex));
            let mut best = 0usize;
            for c in 1..logits.len() {
                if logits[c] > logits[best] {
                    best = c;
                }
            }
            if best == labels[ex] {
                hits += 1;
            }
        }
        Ok(hits as f64 / batch.len().max(1) as f64)
    }
}

fn net_init(layers: &[usize], rng: &mut RngStream) -> Vector {
    let mut theta = Vec::with_capacity(net_param_count(layers));
    for w in layers.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let scale = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..fan_out * fan_in {
            theta.push(rng.normal() * scale);
        }
        for _ in 0..fan_out {
            theta.push(0.0);
        }
    }
    Vector::from_vec(theta)
}

// ---------------------------------------------------------------------------
// Generic loss/gradient kernels. One implementation per architecture,
// instantiated at f64 (plain values) and Dual (exact HVP direction).
// ---------------------------------------------------------------------------

fn eval_generic<S: Scalar>(
    arch: &Architecture,
    theta: &[S],
    batch: &Batch,
    want_grad: bool,
) -> Result<(f64, Vec<S>), ModelError> {
    match arch {
        Architecture::Quadratic { q, b } => Ok(quadratic_eval(q, b, theta, want_grad)),
        Architecture::Rosenbrock => Ok(rosenbrock_eval(theta, want_grad)),
        Architecture::Linear { in_dim, classes } => net_eval(
            &[*in_dim, *classes],
            Activation::Tanh,
            theta,
            batch,
            want_grad,
        ),
        Architecture::Mlp { layers, activation } => {
            net_eval(layers, *activation, theta, batch, want_grad)
        }
    }
}

fn quadratic_eval<S: Scalar>(q: &Matrix, b: &Vector, theta: &[S], want_grad: bool) -> (f64, Vec<S>) {
    let n = theta.len();
    // qt = Q theta
    let mut qt = vec![S::zero(); n];
    for i in 0..n {
        let mut acc = S::zero();
        for j in 0..n {
            acc = acc + theta[j].mul_f64(q.get(i, j));
        }
        qt[i] = acc;
    }
    let mut loss = S::zero();
    for i in 0..n {
        loss = loss + theta[i] * qt[i] - theta[i].mul_f64(b[i]);
    }
    let grad = if want_grad {
        // Q symmetric: grad = 2 Q theta - b.
        (0..n)
            .map(|i| qt[i].mul_f64(2.0) - S::from_f64(b[i]))
            .collect()
    } else {
        Vec::new()
    };
    (loss.value(), grad)
}

fn rosenbrock_eval<S: Scalar>(theta: &[S], want_grad: bool) -> (f64, Vec<S>) {
    let (x, y) = (theta[0], theta[1]);
    let one = S::one();
    let gap = y - x * x;
    let loss = (one - x) * (one - x) + (gap * gap).mul_f64(100.0);
    let grad = if want_grad {
        vec![
            (one - x).mul_f64(-2.0) - (x * gap).mul_f64(400.0),
            gap.mul_f64(200.0),
        ]
    } else {
        Vec::new()
    };
    (loss.value(), grad)
}

fn layer_offsets(sizes: &[usize]) -> Vec<(usize, usize)> {
    // (weight offset, bias offset) per layer transition.
    let mut offs = Vec::with_capacity(sizes.len() - 1);
    let mut pos = 0;
    for w in sizes.windows(2) {
        let w_off = pos;
        pos += w[1] * w[0];
        let b_off = pos;
        pos += w[1];
        offs.push((w_off, b_off));
    }
    offs
}

fn net_forward_logits<S: Scalar>(sizes: &[usize], act: Activation, theta: &[S], input: &[f64]) -> Vec<S> {
    let offs = layer_offsets(sizes);
    let mut a: Vec<S> = input.iter().map(|&v| S::from_f64(v)).collect();
    for (l, w) in sizes.windows(2).enumerate() {
        let (d_in, d_out) = (w[0], w[1]);
        let (w_off, b_off) = offs[l];
        let mut z = Vec::with_capacity(d_out);
        for o in 0..d_out {
            let mut acc = theta[b_off + o];
            let row = &theta[w_off + o * d_in..w_off + (o + 1) * d_in];
            for (wv, av) in row.iter().zip(&a) {
                acc = acc + *wv * *av;
            }
            z.push(acc);
        }
        let last = l + 1 == sizes.len() - 1;
        a = if last {
            z
        } else {
            z.into_iter().map(|v| apply_act(act, v)).collect()
        };
    }
    a
}

fn apply_act<S: Scalar>(act: Activation, z: S) -> S {
    match act {
        Activation::Tanh => z.tanh(),
        // relu'(0) taken as 0.
        Activation::Relu => {
            if z.value() > 0.0 {
                z
            } else {
                S::zero()
            }
        }
    }
}

fn act_prime_from_output<S: Scalar>(act: Activation, a: S) -> S {
    match act {
        Activation::Tanh => S::one() - a * a,
        Activation::Relu => {
            if a.value() > 0.0 {
                S::one()
            } else {
                S::zero()
            }
        }
    }
}

/// Forward + backward over the whole batch: mean cross-entropy for labels,
/// mean squared error (halved) for regression values.
fn net_eval<S: Scalar>(
    sizes: &[usize],
    act: Activation,
    theta: &[S],
    batch: &Batch,
    want_grad: bool,
) -> Result<(f64, Vec<S>), ModelError> {
    let n_layers = sizes.len() - 1;
    let in_dim = sizes[0];
    let out_dim = sizes[n_layers];
    if batch.inputs.cols() != in_dim {
        return Err(ModelError::DimensionMismatch {
            context: "batch features vs model input",
            left: batch.inputs.cols(),
            right: in_dim,
        });
    }
    if let Targets::Labels(labels) = &batch.targets {
        for (example, &label) in labels.iter().enumerate() {
            if label >= out_dim {
                return Err(ModelError::LabelOutOfRange {
                    label,
                    classes: out_dim,
                    example,
                });
            }
        }
    }
    if let Targets::Values(_) = &batch.targets {
        if out_dim != 1 {
            return Err(ModelError::BadTargets(
                "regression targets need a single-output model",
            ));
        }
    }
    let n_ex = batch.len();
    if n_ex == 0 {
        return Err(ModelError::BadTargets("empty batch for a data model"));
    }
    let offs = layer_offsets(sizes);
    let inv_n = 1.0 / n_ex as f64;

    let mut loss = S::zero();
    let mut grad = if want_grad {
        vec![S::zero(); theta.len()]
    } else {
        Vec::new()
    };

    // Per-example activations, kept for the backward pass.
    let mut acts: Vec<Vec<S>> = Vec::with_capacity(n_layers + 1);
    for ex in 0..n_ex {
        acts.clear();
        acts.push(
            batch
                .inputs
                .row(ex)
                .iter()
                .map(|&v| S::from_f64(v))
                .collect(),
        );
        for (l, w) in sizes.windows(2).enumerate() {
            let (d_in, d_out) = (w[0], w[1]);
            let (w_off, b_off) = offs[l];
            let prev = &acts[l];
            let mut z = Vec::with_capacity(d_out);
            for o in 0..d_out {
                let mut acc = theta[b_off + o];
                let row = &theta[w_off + o * d_in..w_off + (o + 1) * d_in];
                for (wv, av) in row.iter().zip(prev) {
                    acc = acc + *wv * *av;
                }
                z.push(acc);
            }
            let last = l + 1 == n_layers;
            if last {
                acts.push(z);
            } else {
                acts.push(z.into_iter().map(|v| apply_act(act, v)).collect());
            }
        }

        let logits = &acts[n_layers];
        // delta = d(loss)/d(logits) for this example, already scaled by 1/n.
        let mut delta: Vec<S>;
        match &batch.targets {
            Targets::Labels(labels) => {
                let y = labels[ex];
                // Stable softmax: shift by the max logit.
                let mut m = logits[0];
                for &l in &logits[1..] {
                    if l.value() > m.value() {
                        m = l;
                    }
                }
                let exps: Vec<S> = logits.iter().map(|&l| (l - m).exp()).collect();
                let mut denom = S::zero();
                for &e in &exps {
                    denom = denom + e;
                }
                loss = loss - (logits[y] - m - denom.ln()).mul_f64(inv_n);
                delta = exps.iter().map(|&e| (e / denom).mul_f64(inv_n)).collect();
                delta[y] = delta[y] - S::from_f64(inv_n);
            }
            Targets::Values(t) => {
                let r = logits[0] - S::from_f64(t[ex]);
                loss = loss + (r * r).mul_f64(0.5 * inv_n);
                delta = vec![r.mul_f64(inv_n)];
            }
        }

        if !want_grad {
            continue;
        }
        // Backward pass.
        for l in (0..n_layers).rev() {
            let (d_in, d_out) = (sizes[l], sizes[l + 1]);
            let (w_off, b_off) = offs[l];
            let prev = &acts[l];
            for o in 0..d_out {
                let d = delta[o];
                grad[b_off + o] = grad[b_off + o] + d;
                let grow = &mut grad[w_off + o * d_in..w_off + (o + 1) * d_in];
                for (g, av) in grow.iter_mut().zip(prev) {
                    *g = *g + d * *av;
                }
            }
            if l > 0 {
                let mut next = vec![S::zero(); d_in];
                for (i, nx) in next.iter_mut().enumerate() {
                    let mut acc = S::zero();
                    for o in 0..d_out {
                        acc = acc + theta[w_off + o * d_in + i] * delta[o];
                    }
                    *nx = acc * act_prime_from_output(act, prev[i]);
                }
                delta = next;
            }
        }
    }
    Ok((loss.value(), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm2;

    /// Central finite differences of the loss; the independent oracle for grad.
    fn fd_grad(model: &BaseModel, theta: &Vector, batch: &Batch, eps: f64) -> Vector {
        let mut g = Vector::zeros(theta.len());
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            tp[i] += eps;
            let mut tm = theta.clone();
            tm[i] -= eps;
            g[i] = (model.loss(&tp, batch).unwrap() - model.loss(&tm, batch).unwrap()) / (2.0 * eps);
        }
        g
    }

    fn fd_hvp(model: &BaseModel, theta: &Vector, batch: &Batch, v: &Vector, eps: f64) -> Vector {
        let tp = theta.add(&v.scale(eps));
        let tm = theta.sub(&v.scale(eps));
        model
            .grad(&tp, batch)
            .unwrap()
            .sub(&model.grad(&tm, batch).unwrap())
            .scale(1.0 / (2.0 * eps))
    }

    fn rel_err(a: &Vector, b: &Vector) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..a.len() {
            let scale = a[i].abs().max(b[i].abs()).max(1e-8);
            worst = worst.max((a[i] - b[i]).abs() / scale);
        }
        worst
    }

    fn small_classifier_batch(rng: &mut RngStream, n: usize, dim: usize, classes: usize) -> Batch {
        let inputs = Matrix::new((0..n * dim).map(|_| rng.normal() * 0.7).collect(), n, dim).unwrap();
        let labels = (0..n).map(|i| i % classes).collect();
        Batch::new(inputs, Targets::Labels(labels)).unwrap()
    }

    #[test]
    fn quadratic_loss_and_grad_at_known_points() {
        let q = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let b = Vector::from_slice(&[2.0, 4.0]);
        let model = BaseModel::quadratic(q, b).unwrap();
        let theta = Vector::from_slice(&[1.0, 1.0]);
        assert_eq!(model.loss(&theta, &Batch::empty()).unwrap(), -3.0);
        let g = model.grad(&theta, &Batch::empty()).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn rosenbrock_known_values() {
        let model = BaseModel::rosenbrock();
        let min = Vector::from_slice(&[1.0, 1.0]);
        assert_eq!(model.loss(&min, &Batch::empty()).unwrap(), 0.0);
        assert_eq!(
            model.grad(&min, &Batch::empty()).unwrap().as_slice(),
            &[0.0, 0.0]
        );
        let origin = Vector::from_slice(&[0.0, 0.0]);
        assert_eq!(model.loss(&origin, &Batch::empty()).unwrap(), 1.0);
        // Hand differentiation of (1-x)^2 + 100(y-x^2)^2 at the origin.
        assert_eq!(
            model.grad(&origin, &Batch::empty()).unwrap().as_slice(),
            &[-2.0, 0.0]
        );
    }

    #[test]
    fn linear_uniform_logits_loss_is_log_classes() {
        let model = BaseModel::linear(3, 4).unwrap();
        let mut rng = RngStream::new(5, 0);
        let batch = small_classifier_batch(&mut rng, 8, 3, 4);
        let theta = Vector::zeros(model.param_count());
        let loss = model.loss(&theta, &batch).unwrap();
        assert!((loss - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn grad_matches_finite_differences_all_families() {
        let mut rng = RngStream::new(77, 0);
        let q = Matrix::from_rows(&[&[1.5, 0.2], &[0.2, 3.0]]);
        let b = Vector::from_slice(&[1.0, -0.5]);
        let families: Vec<(BaseModel, Batch)> = vec![
            (BaseModel::quadratic(q, b).unwrap(), Batch::empty()),
            (BaseModel::rosenbrock(), Batch::empty()),
            (
                BaseModel::linear(4, 3).unwrap(),
                small_classifier_batch(&mut rng, 12, 4, 3),
            ),
            (
                BaseModel::mlp(vec![3, 4, 2], Activation::Tanh).unwrap(),
                small_classifier_batch(&mut rng, 10, 3, 2),
            ),
        ];
        for (model, batch) in &families {
            for _ in 0..20 {
                let theta = rng.normal_vector(model.param_count()).scale(0.8);
                let g = model.grad(&theta, batch).unwrap();
                let fd = fd_grad(model, &theta, batch, 1e-5);
                assert!(
                    rel_err(&g, &fd) <= 1e-5,
                    "grad/fd mismatch {:?} err {}",
                    model.arch(),
                    rel_err(&g, &fd)
                );
            }
        }
    }

    #[test]
    fn mse_grad_matches_finite_differences() {
        let mut rng = RngStream::new(78, 0);
        let model = BaseModel::mlp(vec![3, 4, 1], Activation::Tanh).unwrap();
        let inputs = Matrix::new((0..15).map(|_| rng.normal()).collect(), 5, 3).unwrap();
        let targets = Targets::Values(rng.normal_vector(5));
        let batch = Batch::new(inputs, targets).unwrap();
        let theta = rng.normal_vector(model.param_count());
        let g = model.grad(&theta, &batch).unwrap();
        let fd = fd_grad(&model, &theta, &batch, 1e-5);
        assert!(rel_err(&g, &fd) <= 1e-5);
    }

    #[test]
    fn hvp_quadratic_is_2qv() {
        let q = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let b = Vector::from_slice(&[0.0, 0.0]);
        let model = BaseModel::quadratic(q, b).unwrap();
        let theta = Vector::from_slice(&[0.3, -0.7]);
        let v = Vector::from_slice(&[1.0, 1.0]);
        let hv = model.hvp(&theta, &Batch::empty(), &v).unwrap();
        assert_eq!(hv.as_slice(), &[2.0, 4.0]);
        let zero = Vector::zeros(2);
        assert_eq!(
            model.hvp(&theta, &Batch::empty(), &zero).unwrap().as_slice(),
            &[0.0, 0.0]
        );
    }

    #[test]
    fn hvp_matches_finite_difference_of_grad() {
        let mut rng = RngStream::new(99, 0);
        let model = BaseModel::mlp(vec![3, 5, 2], Activation::Tanh).unwrap();
        let batch = small_classifier_batch(&mut rng, 9, 3, 2);
        for _ in 0..5 {
            let theta = rng.normal_vector(model.param_count()).scale(0.6);
            let v = rng.normal_vector(model.param_count());
            let hv = model.hvp(&theta, &batch, &v).unwrap();
            let fd = fd_hvp(&model, &theta, &batch, &v, 1e-4);
            assert!(rel_err(&hv, &fd) <= 1e-4, "err {}", rel_err(&hv, &fd));
        }
    }

    #[test]
    fn hvp_is_linear_in_direction() {
        let mut rng = RngStream::new(123, 0);
        let model = BaseModel::mlp(vec![2, 4, 3], Activation::Tanh).unwrap();
        let batch = small_classifier_batch(&mut rng, 6, 2, 3);
        let theta = rng.normal_vector(model.param_count());
        let u = rng.normal_vector(model.param_count());
        let v = rng.normal_vector(model.param_count());
        let (alpha, beta) = (0.37, -1.21);
        let lhs = model
            .hvp(&theta, &batch, &u.scale(alpha).add(&v.scale(beta)))
            .unwrap();
        let rhs = model
            .hvp(&theta, &batch, &u)
            .unwrap()
            .scale(alpha)
            .add(&model.hvp(&theta, &batch, &v).unwrap().scale(beta));
        assert!(rel_err(&lhs, &rhs) <= 1e-10);
    }

    #[test]
    fn dense_hessian_symmetric_and_matches_hvp_columns() {
        let mut rng = RngStream::new(31, 0);
        // 20-parameter MLP: 2 -> 3 -> 2 gives 3*3 + 2*4 = 17... use 2->4->... no:
        // sizes [2,3,2]: 3*(2+1) + 2*(3+1) = 9 + 8 = 17; [3,3,2]: 12 + 8 = 20.
        let model = BaseModel::mlp(vec![3, 3, 2], Activation::Tanh).unwrap();
        assert_eq!(model.param_count(), 20);
        let batch = small_classifier_batch(&mut rng, 8, 3, 2);
        let theta = rng.normal_vector(20);
        let h = model.hessian_dense(&theta, &batch).unwrap();
        let mut max_asym = 0.0_f64;
        for i in 0..20 {
            for j in 0..20 {
                max_asym = max_asym.max((h.get(i, j) - h.get(j, i)).abs());
            }
        }
        assert!(max_asym <= 1e-9, "asymmetry {max_asym}");
        // Column j is hvp(e_j) bit-identically, by construction.
        let mut e = Vector::zeros(20);
        e[7] = 1.0;
        let col = model.hvp(&theta, &batch, &e).unwrap();
        for i in 0..20 {
            assert_eq!(h.get(i, 7), col[i]);
        }
    }

    #[test]
    fn hessian_cap_enforced() {
        let model = BaseModel::linear(40, 20).unwrap(); // kappa = 820
        let theta = Vector::zeros(model.param_count());
        let mut rng = RngStream::new(1, 0);
        let batch = small_classifier_batch(&mut rng, 4, 40, 20);
        match model.hessian_dense(&theta, &batch) {
            Err(ModelError::HessianCapExceeded { kappa, cap }) => {
                assert_eq!(kappa, 820);
                assert_eq!(cap, DEFAULT_HESSIAN_CAP);
            }
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn quadratic_minimizer_is_convex_witness() {
        let q = Matrix::from_rows(&[&[1.0, 0.3], &[0.3, 2.0]]);
        let b = Vector::from_slice(&[2.0, 4.0]);
        let model = BaseModel::quadratic(q.clone(), b.clone()).unwrap();
        // theta* solves 2 Q theta = b.
        let two_q = Matrix::from_rows(&[&[2.0, 0.6], &[0.6, 4.0]]);
        let theta_star = crate::numerics::cholesky_solve(&two_q, &b).unwrap();
        let l_star = model.loss(&theta_star, &Batch::empty()).unwrap();
        let mut rng = RngStream::new(404, 0);
        for _ in 0..100 {
            let delta = rng.normal_vector(2).scale(0.5);
            let l = model.loss(&theta_star.add(&delta), &Batch::empty()).unwrap();
            assert!(l >= l_star - 1e-12);
        }
        assert!(norm2(&model.grad(&theta_star, &Batch::empty()).unwrap()) < 1e-10);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let model = BaseModel::linear(2, 2).unwrap();
        let inputs = Matrix::new(vec![0.1, 0.2], 1, 2).unwrap();
        let batch = Batch::new(inputs, Targets::Labels(vec![5])).unwrap();
        let theta = Vector::zeros(model.param_count());
        assert!(matches!(
            model.loss(&theta, &batch),
            Err(ModelError::LabelOutOfRange { .. })
        ));
    }
}
