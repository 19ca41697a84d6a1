//! Data-indexed loss terms with exact derivatives and expectation estimators.
//!
//! Every loss exposes `value / grad / hessian` at a point, and the module
//! computes `E_q[ℓ]`, `E_q[∇ℓ]`, `E_q[∇²ℓ]` under a Gaussian `q` with one of
//! four estimators:
//!
//! - `Delta1`: first-order delta method, `E_q[ℓ] ≈ ℓ(m)`.
//! - `Delta2`: adds the curvature trace `½ Tr(Σ ∇²ℓ(m))` to the value.
//! - `Quadrature`: exact 1-D integration over the induced output distribution
//!   `f ~ N(wᵀm + b, wᵀΣw)` for losses of a scalar linear output. Defaults to
//!   Gauss–Hermite nodes; a positive `width` switches to a trapezoid rule on
//!   `±width·σ` for reference-style integration.
//! - `MonteCarlo`: antithetic sampling of θ, deterministic given the seed.
//!
//! The quadratic regularizer `½δ‖θ‖²` has closed-form Gaussian expectations,
//! which quadrature and Monte Carlo modes return exactly; the delta modes
//! return the point evaluations they are defined as.
//!
//! Expectations under a Bernoulli posterior enumerate θ ∈ {0, 1}.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::CoreError;
use crate::expfam::{ExpFamDist, Family};
use crate::linalg;
use crate::Result;

/// A plain in-memory dataset: rows of inputs plus a scalar label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(CoreError::DimMismatch("inputs vs labels length".into()));
        }
        if let Some(first) = inputs.first() {
            let d = first.len();
            if inputs.iter().any(|x| x.len() != d) {
                return Err(CoreError::DimMismatch("ragged input rows".into()));
            }
        }
        if inputs.iter().flatten().any(|v| !v.is_finite())
            || labels.iter().any(|v| !v.is_finite())
        {
            return Err(CoreError::InvalidConfig("non-finite dataset entry".into()));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    /// Read `x_1..x_d,y` rows from a CSV file with a header. Values are taken
    /// verbatim; no normalization is applied.
    pub fn from_csv_path(path: &std::path::Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| CoreError::InvalidConfig(format!("csv open {path:?}: {e}")))?;
        let headers = reader
            .headers()
            .map_err(|e| CoreError::InvalidConfig(format!("csv header: {e}")))?
            .clone();
        let ncols = headers.len();
        if ncols < 2 || headers.iter().last() != Some("y") {
            return Err(CoreError::InvalidConfig(
                "expected header x_1..x_d,y with final column y".into(),
            ));
        }
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for record in reader.records() {
            let record =
                record.map_err(|e| CoreError::InvalidConfig(format!("csv row: {e}")))?;
            let mut row: Vec<f64> = Vec::with_capacity(ncols);
            for field in record.iter() {
                row.push(field.trim().parse::<f64>().map_err(|e| {
                    CoreError::InvalidConfig(format!("csv value {field:?}: {e}"))
                })?);
            }
            if row.len() != ncols {
                return Err(CoreError::InvalidConfig("csv row width".into()));
            }
            labels.push(row.pop().expect("non-empty row"));
            inputs.push(row);
        }
        Self::new(inputs, labels)
    }

    /// One logistic loss per row.
    pub fn logistic_losses(&self) -> Vec<LossTerm> {
        self.inputs
            .iter()
            .zip(&self.labels)
            .map(|(x, &y)| LossTerm::logistic_linear(x.clone(), y))
            .collect()
    }

    /// One squared loss per row.
    pub fn squared_losses(&self) -> Vec<LossTerm> {
        self.inputs
            .iter()
            .zip(&self.labels)
            .map(|(x, &y)| LossTerm::squared_linear(x.clone(), y))
            .collect()
    }
}

/// Convex generator `A(f)` of a Bregman loss `ℓ = -y f + A(f)`. The implied
/// prediction is `ŷ = A'(f)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BregmanGenerator {
    /// A(f) = ½f² (squared loss up to the constant ½y²).
    Square,
    /// A(f) = log(1 + eᶠ) (binary cross-entropy).
    Logistic,
    /// A(f) = eᶠ (Poisson-style).
    Exp,
}

impl BregmanGenerator {
    pub fn a(&self, f: f64) -> f64 {
        match self {
            Self::Square => 0.5 * f * f,
            Self::Logistic => softplus(f),
            Self::Exp => f.exp(),
        }
    }

    pub fn a1(&self, f: f64) -> f64 {
        match self {
            Self::Square => f,
            Self::Logistic => sigmoid(f),
            Self::Exp => f.exp(),
        }
    }

    pub fn a2(&self, f: f64) -> f64 {
        match self {
            Self::Square => 1.0,
            Self::Logistic => {
                let s = sigmoid(f);
                s * (1.0 - s)
            }
            Self::Exp => f.exp(),
        }
    }
}

pub fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(f: f64) -> f64 {
    if f > 30.0 {
        f
    } else {
        (1.0 + f.exp()).ln()
    }
}

/// A differentiable scalar-output model registered by the caller.
pub trait PredictorFn: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, theta: &[f64]) -> f64;
    fn grad(&self, theta: &[f64]) -> DVector<f64>;
    /// `None` when the second derivative is not available.
    fn hessian(&self, theta: &[f64]) -> Option<DMatrix<f64>>;
}

/// Scalar-output predictor: affine in θ, or a registered nonlinear map.
#[derive(Clone)]
pub enum Predictor {
    /// f(θ) = wᵀθ + b.
    Linear { weights: Vec<f64>, offset: f64 },
    Registered(Arc<dyn PredictorFn>),
}

impl fmt::Debug for Predictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Linear { weights, offset } => f
                .debug_struct("Linear")
                .field("weights", weights)
                .field("offset", offset)
                .finish(),
            Self::Registered(p) => write!(f, "Registered(dim={})", p.dim()),
        }
    }
}

impl Predictor {
    pub fn linear(weights: Vec<f64>) -> Self {
        Self::Linear { weights, offset: 0.0 }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Linear { weights, .. } => weights.len(),
            Self::Registered(p) => p.dim(),
        }
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        match self {
            Self::Linear { weights, offset } => {
                weights.iter().zip(theta).map(|(w, t)| w * t).sum::<f64>() + offset
            }
            Self::Registered(p) => p.value(theta),
        }
    }

    pub fn grad(&self, theta: &[f64]) -> DVector<f64> {
        match self {
            Self::Linear { weights, .. } => DVector::from_column_slice(weights),
            Self::Registered(p) => p.grad(theta),
        }
    }

    pub fn hessian(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        match self {
            Self::Linear { weights, .. } => {
                let d = weights.len();
                Some(DMatrix::zeros(d, d))
            }
            Self::Registered(p) => p.hessian(theta),
        }
    }
}

/// One data-indexed loss term.
#[derive(Clone, Debug)]
pub enum LossTerm {
    /// ½(y - xᵀθ - b)².
    SquaredLinear { x: Vec<f64>, offset: f64, y: f64 },
    /// -y f + log(1 + eᶠ) with f = xᵀθ + b.
    LogisticLinear { x: Vec<f64>, offset: f64, y: f64 },
    /// -y f + A(f) over a linear or registered predictor.
    Bregman { generator: BregmanGenerator, y: f64, predictor: Predictor },
    /// ½δ‖θ‖².
    QuadraticReg { delta: f64 },
    /// c · ℓ.
    Scaled { factor: f64, inner: Box<LossTerm> },
}

impl LossTerm {
    pub fn squared_linear(x: Vec<f64>, y: f64) -> Self {
        Self::SquaredLinear { x, offset: 0.0, y }
    }

    pub fn logistic_linear(x: Vec<f64>, y: f64) -> Self {
        Self::LogisticLinear { x, offset: 0.0, y }
    }

    /// Logistic loss of a threshold classifier: f = x - θ for scalar θ.
    pub fn logistic_threshold(x: f64, y: f64) -> Self {
        Self::LogisticLinear { x: vec![-1.0], offset: x, y }
    }

    pub fn quadratic_reg(delta: f64) -> Self {
        Self::QuadraticReg { delta }
    }

    pub fn scaled(factor: f64, inner: LossTerm) -> Self {
        Self::Scaled { factor, inner: Box::new(inner) }
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        match self {
            Self::SquaredLinear { x, offset, y } => {
                let f = dot(x, theta) + offset;
                0.5 * (y - f) * (y - f)
            }
            Self::LogisticLinear { x, offset, y } => {
                let f = dot(x, theta) + offset;
                -y * f + softplus(f)
            }
            Self::Bregman { generator, y, predictor } => {
                let f = predictor.value(theta);
                -y * f + generator.a(f)
            }
            Self::QuadraticReg { delta } => {
                0.5 * delta * theta.iter().map(|t| t * t).sum::<f64>()
            }
            Self::Scaled { factor, inner } => factor * inner.value(theta),
        }
    }

    pub fn grad(&self, theta: &[f64]) -> DVector<f64> {
        match self {
            Self::SquaredLinear { x, offset, y } => {
                let f = dot(x, theta) + offset;
                DVector::from_column_slice(x) * (f - y)
            }
            Self::LogisticLinear { x, offset, y } => {
                let f = dot(x, theta) + offset;
                DVector::from_column_slice(x) * (sigmoid(f) - y)
            }
            Self::Bregman { generator, y, predictor } => {
                let f = predictor.value(theta);
                predictor.grad(theta) * (generator.a1(f) - y)
            }
            Self::QuadraticReg { delta } => DVector::from_column_slice(theta) * *delta,
            Self::Scaled { factor, inner } => inner.grad(theta) * *factor,
        }
    }

    pub fn hessian(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        match self {
            Self::SquaredLinear { x, .. } => {
                let xv = DVector::from_column_slice(x);
                Ok(&xv * xv.transpose())
            }
            Self::LogisticLinear { x, offset, .. } => {
                let f = dot(x, theta) + offset;
                let s = sigmoid(f);
                let xv = DVector::from_column_slice(x);
                Ok(&xv * xv.transpose() * (s * (1.0 - s)))
            }
            Self::Bregman { generator, y, predictor } => {
                let f = predictor.value(theta);
                let g = predictor.grad(theta);
                let h = predictor
                    .hessian(theta)
                    .ok_or(CoreError::MissingSecondDerivative)?;
                Ok(&g * g.transpose() * generator.a2(f) + h * (generator.a1(f) - y))
            }
            Self::QuadraticReg { delta } => {
                let d = theta.len();
                Ok(DMatrix::identity(d, d) * *delta)
            }
            Self::Scaled { factor, inner } => Ok(inner.hessian(theta)? * *factor),
        }
    }

    /// Scalar-output reduction `(weights, offset, generator, y, scale)` when
    /// the loss is a (possibly scaled) Bregman loss of an affine predictor.
    pub fn reduce_1d(&self) -> Option<Reduced1d> {
        match self {
            Self::SquaredLinear { x, offset, y } => Some(Reduced1d {
                weights: x.clone(),
                offset: *offset,
                generator: Generator1d::SquaredResidual,
                y: *y,
                scale: 1.0,
            }),
            Self::LogisticLinear { x, offset, y } => Some(Reduced1d {
                weights: x.clone(),
                offset: *offset,
                generator: Generator1d::Bregman(BregmanGenerator::Logistic),
                y: *y,
                scale: 1.0,
            }),
            Self::Bregman { generator, y, predictor } => match predictor {
                Predictor::Linear { weights, offset } => Some(Reduced1d {
                    weights: weights.clone(),
                    offset: *offset,
                    generator: Generator1d::Bregman(*generator),
                    y: *y,
                    scale: 1.0,
                }),
                Predictor::Registered(_) => None,
            },
            Self::QuadraticReg { .. } => None,
            Self::Scaled { factor, inner } => {
                inner.reduce_1d().map(|mut r| {
                    r.scale *= factor;
                    r
                })
            }
        }
    }

    /// Parameter dimension, `None` when the loss applies to any dimension.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Self::SquaredLinear { x, .. } | Self::LogisticLinear { x, .. } => Some(x.len()),
            Self::Bregman { predictor, .. } => Some(predictor.dim()),
            Self::QuadraticReg { .. } => None,
            Self::Scaled { inner, .. } => inner.dim(),
        }
    }
}

/// Scalar loss of the induced output f = wᵀθ + b.
#[derive(Clone, Debug)]
pub struct Reduced1d {
    pub weights: Vec<f64>,
    pub offset: f64,
    pub generator: Generator1d,
    pub y: f64,
    pub scale: f64,
}

#[derive(Clone, Copy, Debug)]
pub enum Generator1d {
    /// L(y, f) = ½(y - f)².
    SquaredResidual,
    /// L(y, f) = -y f + A(f).
    Bregman(BregmanGenerator),
}

impl Reduced1d {
    pub fn loss_of_f(&self, f: f64) -> f64 {
        let raw = match self.generator {
            Generator1d::SquaredResidual => 0.5 * (self.y - f) * (self.y - f),
            Generator1d::Bregman(g) => -self.y * f + g.a(f),
        };
        self.scale * raw
    }

    /// dL/df.
    pub fn dloss_of_f(&self, f: f64) -> f64 {
        let raw = match self.generator {
            Generator1d::SquaredResidual => f - self.y,
            Generator1d::Bregman(g) => g.a1(f) - self.y,
        };
        self.scale * raw
    }

    /// d²L/df².
    pub fn d2loss_of_f(&self, f: f64) -> f64 {
        let raw = match self.generator {
            Generator1d::SquaredResidual => 1.0,
            Generator1d::Bregman(g) => g.a2(f),
        };
        self.scale * raw
    }
}

/// Expectation estimator for `E_q[·]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Estimator {
    Delta1,
    Delta2,
    /// Gauss–Hermite with `points` nodes when `width == 0`; trapezoid over
    /// `±width·σ` otherwise. Only valid for scalar-output-reducible losses.
    Quadrature { points: usize, width: f64 },
    /// Antithetic Monte Carlo, deterministic given `seed`.
    MonteCarlo { n: usize, seed: u64 },
}

impl Estimator {
    /// 64-point Gauss–Hermite, the default integration rule.
    pub fn quadrature_default() -> Self {
        Self::Quadrature { points: 64, width: 0.0 }
    }

    /// 10⁴ antithetic samples.
    pub fn monte_carlo_default(seed: u64) -> Self {
        Self::MonteCarlo { n: 10_000, seed }
    }

    /// Derive a per-loss estimator so parallel maps stay deterministic: the
    /// Monte Carlo seed is xored with the loss index, other modes unchanged.
    pub fn for_loss_index(&self, index: usize) -> Self {
        match self {
            Self::MonteCarlo { n, seed } => {
                Self::MonteCarlo { n: *n, seed: seed ^ (index as u64).wrapping_mul(0x9E3779B97F4A7C15) }
            }
            other => *other,
        }
    }
}

/// Gaussian moments (mean, covariance) extracted from a posterior.
#[derive(Clone, Debug)]
pub struct GaussMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussMoments {
    pub fn of(q: &ExpFamDist) -> Result<Self> {
        if !q.kind().is_gaussian() {
            return Err(CoreError::FamilyRestriction(
                "Gaussian moments requested for a non-Gaussian posterior".into(),
            ));
        }
        Ok(Self { mean: q.mean(), cov: q.covariance()? })
    }

    /// Induced scalar distribution of f = wᵀθ + b.
    pub fn project(&self, weights: &[f64], offset: f64) -> (f64, f64) {
        let w = DVector::from_column_slice(weights);
        let mu = w.dot(&self.mean) + offset;
        let var = (w.transpose() * &self.cov * &w)[(0, 0)].max(0.0);
        (mu, var)
    }
}

// ---------------------------------------------------------------------------
// 1-D integration rules
// ---------------------------------------------------------------------------

static GH_CACHE: OnceLock<Mutex<HashMap<usize, Arc<(Vec<f64>, Vec<f64>)>>>> = OnceLock::new();

/// Gauss–Hermite nodes and weights (physicists' convention, ∫e^{-x²}p(x)dx =
/// Σ wᵢ p(xᵢ)) via Golub–Welsch on the Jacobi matrix.
pub fn gauss_hermite(n: usize) -> Arc<(Vec<f64>, Vec<f64>)> {
    let cache = GH_CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("gh cache lock");
    guard
        .entry(n)
        .or_insert_with(|| {
            let mut jacobi = DMatrix::zeros(n, n);
            for k in 1..n {
                let b = (k as f64 / 2.0).sqrt();
                jacobi[(k - 1, k)] = b;
                jacobi[(k, k - 1)] = b;
            }
            let eig = jacobi.symmetric_eigen();
            let mut pairs: Vec<(f64, f64)> = (0..n)
                .map(|i| {
                    let node = eig.eigenvalues[i];
                    let v0 = eig.eigenvectors[(0, i)];
                    (node, PI.sqrt() * v0 * v0)
                })
                .collect();
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite nodes"));
            let (nodes, weights) = pairs.into_iter().unzip();
            Arc::new((nodes, weights))
        })
        .clone()
}

/// ∫ g(f) N(f | mu, var) df with the estimator's 1-D rule.
fn integrate_1d(g: impl Fn(f64) -> f64, mu: f64, var: f64, points: usize, width: f64) -> f64 {
    let sd = var.max(0.0).sqrt();
    if sd == 0.0 {
        return g(mu);
    }
    if width <= 0.0 {
        let gh = gauss_hermite(points.max(2));
        let (nodes, weights) = (&gh.0, &gh.1);
        let mut acc = 0.0;
        for (x, w) in nodes.iter().zip(weights) {
            acc += w * g(mu + std::f64::consts::SQRT_2 * sd * x);
        }
        acc / PI.sqrt()
    } else {
        let n = points.max(3);
        let lo = mu - width * sd;
        let hi = mu + width * sd;
        let h = (hi - lo) / (n - 1) as f64;
        let dens = |f: f64| (-(f - mu) * (f - mu) / (2.0 * var)).exp() / (sd * (2.0 * PI).sqrt());
        let mut acc = 0.5 * (g(lo) * dens(lo) + g(hi) * dens(hi));
        for i in 1..n - 1 {
            let f = lo + h * i as f64;
            acc += g(f) * dens(f);
        }
        acc * h
    }
}

// ---------------------------------------------------------------------------
// Expectations
// ---------------------------------------------------------------------------

/// E_q[ℓ].
pub fn expected_loss(q: &ExpFamDist, loss: &LossTerm, est: &Estimator) -> Result<f64> {
    if let LossTerm::Scaled { factor, inner } = loss {
        return Ok(factor * expected_loss(q, inner, est)?);
    }
    if q.kind().family == Family::Bernoulli {
        let p = q.p1()?;
        return Ok((1.0 - p) * loss.value(&[0.0]) + p * loss.value(&[1.0]));
    }
    check_dim(q, loss)?;
    let moments = GaussMoments::of(q)?;
    let m = moments.mean.as_slice().to_vec();
    match est {
        Estimator::Delta1 => Ok(loss.value(&m)),
        Estimator::Delta2 => {
            let h = loss.hessian(&m)?;
            Ok(loss.value(&m) + 0.5 * (&moments.cov * h).trace())
        }
        Estimator::Quadrature { points, width } => match loss {
            LossTerm::QuadraticReg { delta } => {
                Ok(0.5 * delta * (moments.mean.norm_squared() + moments.cov.trace()))
            }
            _ => {
                let red = reduce_or_err(loss)?;
                let (mu, var) = moments.project(&red.weights, red.offset);
                Ok(integrate_1d(|f| red.loss_of_f(f), mu, var, *points, *width))
            }
        },
        Estimator::MonteCarlo { n, seed } => match loss {
            LossTerm::QuadraticReg { delta } => {
                Ok(0.5 * delta * (moments.mean.norm_squared() + moments.cov.trace()))
            }
            _ => Ok(mc_scalar(q, *n, *seed, |theta| loss.value(theta))?),
        },
    }
}

/// E_q[∇ℓ] (equals ∇_m E_q[ℓ] for Gaussian q by Bonnet's theorem).
pub fn expected_grad(q: &ExpFamDist, loss: &LossTerm, est: &Estimator) -> Result<DVector<f64>> {
    if let LossTerm::Scaled { factor, inner } = loss {
        return Ok(expected_grad(q, inner, est)? * *factor);
    }
    check_dim(q, loss)?;
    let moments = GaussMoments::of(q)?;
    let m = moments.mean.as_slice().to_vec();
    match est {
        Estimator::Delta1 | Estimator::Delta2 => Ok(loss.grad(&m)),
        Estimator::Quadrature { points, width } => match loss {
            LossTerm::QuadraticReg { delta } => Ok(&moments.mean * *delta),
            _ => {
                let red = reduce_or_err(loss)?;
                let (mu, var) = moments.project(&red.weights, red.offset);
                let alpha = integrate_1d(|f| red.dloss_of_f(f), mu, var, *points, *width);
                Ok(DVector::from_column_slice(&red.weights) * alpha)
            }
        },
        Estimator::MonteCarlo { n, seed } => match loss {
            LossTerm::QuadraticReg { delta } => Ok(&moments.mean * *delta),
            _ => mc_vector(q, *n, *seed, |theta| loss.grad(theta)),
        },
    }
}

/// E_q[∇²ℓ], symmetrized.
pub fn expected_hessian(q: &ExpFamDist, loss: &LossTerm, est: &Estimator) -> Result<DMatrix<f64>> {
    if let LossTerm::Scaled { factor, inner } = loss {
        return Ok(expected_hessian(q, inner, est)? * *factor);
    }
    check_dim(q, loss)?;
    let moments = GaussMoments::of(q)?;
    let m = moments.mean.as_slice().to_vec();
    let raw = match est {
        Estimator::Delta1 | Estimator::Delta2 => loss.hessian(&m)?,
        Estimator::Quadrature { points, width } => match loss {
            LossTerm::QuadraticReg { delta } => {
                DMatrix::identity(q.kind().dim, q.kind().dim) * *delta
            }
            _ => {
                let red = reduce_or_err(loss)?;
                let (mu, var) = moments.project(&red.weights, red.offset);
                let beta = integrate_1d(|f| red.d2loss_of_f(f), mu, var, *points, *width);
                let w = DVector::from_column_slice(&red.weights);
                &w * w.transpose() * beta
            }
        },
        Estimator::MonteCarlo { n, seed } => match loss {
            LossTerm::QuadraticReg { delta } => {
                DMatrix::identity(q.kind().dim, q.kind().dim) * *delta
            }
            _ => mc_matrix(q, *n, *seed, |theta| loss.hessian(theta))?,
        },
    };
    Ok(linalg::symmetrize(&raw))
}

/// Expected residual and curvature of the induced scalar output:
/// `ᾱ = E[dL/df]`, `β̄ = E[d²L/df²]` over `f ~ N(wᵀm + b, wᵀΣw)`.
///
/// For the logistic generator these are the sigmoid residual in (-1, 1) and
/// the sigmoid slope in (0, ¼).
pub fn residual_curvature(q: &ExpFamDist, loss: &LossTerm) -> Result<(f64, f64)> {
    residual_curvature_with(q, loss, &Estimator::quadrature_default())
}

/// Same as [`residual_curvature`] with an explicit quadrature estimator.
pub fn residual_curvature_with(
    q: &ExpFamDist,
    loss: &LossTerm,
    est: &Estimator,
) -> Result<(f64, f64)> {
    let red = loss.reduce_1d().ok_or(CoreError::NonReducible)?;
    let moments = GaussMoments::of(q)?;
    let (mu, var) = moments.project(&red.weights, red.offset);
    let (points, width) = match est {
        Estimator::Quadrature { points, width } => (*points, *width),
        _ => (64, 0.0),
    };
    let alpha = integrate_1d(|f| red.dloss_of_f(f), mu, var, points, width);
    let beta = integrate_1d(|f| red.d2loss_of_f(f), mu, var, points, width);
    Ok((alpha, beta))
}

/// Split `E_q[∇²ℓ]` of a Bregman loss into its Gauss-Newton part
/// `∇f(m) β ∇f(m)ᵀ` and the residual-weighted predictor curvature
/// `r ∇²f(m)`, with `β = E_q[A''(f)]` and `r = E_q[ŷ - y]`.
pub fn bregman_expected_hessian_decomposition(
    q: &ExpFamDist,
    loss: &LossTerm,
    est: &Estimator,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (generator, y, predictor) = bregman_parts(loss)?;
    let moments = GaussMoments::of(q)?;
    let m = moments.mean.as_slice().to_vec();
    let grad_f = predictor.grad(&m);
    let hess_f = predictor.hessian(&m).ok_or(CoreError::MissingSecondDerivative)?;
    let (beta, resid) = match est {
        Estimator::Delta1 | Estimator::Delta2 => {
            let f = predictor.value(&m);
            (generator.a2(f), generator.a1(f) - y)
        }
        Estimator::Quadrature { points, width } => match &predictor {
            Predictor::Linear { weights, offset } => {
                let (mu, var) = moments.project(weights, *offset);
                let beta = integrate_1d(|f| generator.a2(f), mu, var, *points, *width);
                let resid = integrate_1d(|f| generator.a1(f) - y, mu, var, *points, *width);
                (beta, resid)
            }
            Predictor::Registered(_) => {
                return Err(CoreError::UnsupportedEstimator(
                    "quadrature needs a linear predictor".into(),
                ))
            }
        },
        Estimator::MonteCarlo { n, seed } => {
            let beta = mc_scalar(q, *n, *seed, |theta| generator.a2(predictor.value(theta)))?;
            let resid =
                mc_scalar(q, *n, *seed, |theta| generator.a1(predictor.value(theta)) - y)?;
            (beta, resid)
        }
    };
    let ggn = &grad_f * grad_f.transpose() * beta;
    let residual_part = hess_f * resid;
    Ok((ggn, residual_part))
}

fn bregman_parts(loss: &LossTerm) -> Result<(BregmanGenerator, f64, Predictor)> {
    match loss {
        LossTerm::Bregman { generator, y, predictor } => {
            Ok((*generator, *y, predictor.clone()))
        }
        LossTerm::LogisticLinear { x, offset, y } => Ok((
            BregmanGenerator::Logistic,
            *y,
            Predictor::Linear { weights: x.clone(), offset: *offset },
        )),
        _ => Err(CoreError::NonReducible),
    }
}

fn reduce_or_err(loss: &LossTerm) -> Result<Reduced1d> {
    loss.reduce_1d().ok_or_else(|| {
        CoreError::UnsupportedEstimator(
            "quadrature needs a loss of a scalar linear output".into(),
        )
    })
}

fn check_dim(q: &ExpFamDist, loss: &LossTerm) -> Result<()> {
    if let Some(d) = loss.dim() {
        if d != q.kind().dim {
            return Err(CoreError::DimMismatch(format!(
                "loss dim {d} vs posterior dim {}",
                q.kind().dim
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Monte Carlo with antithetic pairs
// ---------------------------------------------------------------------------

fn antithetic_standard(dim: usize, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let pairs = n.div_ceil(2);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * pairs);
    for _ in 0..pairs {
        let z = DVector::from_iterator(dim, (0..dim).map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        }));
        out.push(z.clone());
        out.push(-z);
    }
    out
}

fn mc_points(q: &ExpFamDist, n: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    let moments = GaussMoments::of(q)?;
    let d = q.kind().dim;
    let l = linalg::spd_cholesky_l(&moments.cov)?;
    Ok(antithetic_standard(d, n, seed)
        .into_iter()
        .map(|z| &moments.mean + &l * z)
        .collect())
}

fn mc_scalar(q: &ExpFamDist, n: usize, seed: u64, f: impl Fn(&[f64]) -> f64) -> Result<f64> {
    let pts = mc_points(q, n, seed)?;
    let total: f64 = pts.iter().map(|p| f(p.as_slice())).sum();
    Ok(total / pts.len() as f64)
}

fn mc_vector(
    q: &ExpFamDist,
    n: usize,
    seed: u64,
    f: impl Fn(&[f64]) -> DVector<f64>,
) -> Result<DVector<f64>> {
    let pts = mc_points(q, n, seed)?;
    let mut acc = DVector::zeros(q.kind().dim);
    for p in &pts {
        acc += f(p.as_slice());
    }
    Ok(acc / pts.len() as f64)
}

fn mc_matrix(
    q: &ExpFamDist,
    n: usize,
    seed: u64,
    f: impl Fn(&[f64]) -> Result<DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    let pts = mc_points(q, n, seed)?;
    let d = q.kind().dim;
    let mut acc = DMatrix::zeros(d, d);
    for p in &pts {
        acc += f(p.as_slice())?;
    }
    Ok(acc / pts.len() as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sum of per-loss vectors computed independently (parallel when the
/// collection is large) and reduced in index order, so results do not depend
/// on scheduling.
pub fn map_losses<T, F>(losses: &[LossTerm], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &LossTerm) -> Result<T> + Sync,
{
    use rayon::prelude::*;
    if losses.len() >= 32 {
        losses.par_iter().enumerate().map(|(i, l)| f(i, l)).collect()
    } else {
        losses.iter().enumerate().map(|(i, l)| f(i, l)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::FamilyKind;

    // E[-f + softplus(f)] for f ~ N(0,1), y = 1, frozen from a 40-digit
    // independent quadrature.
    const LOGISTIC_EXPECTED_LOSS_STD: f64 = 0.80605918334743978;
    // E[sigma'(f)] for f ~ N(0,1), same source.
    const BETA_BAR_STD: f64 = 0.20662096414190704;

    fn full_standard(d: usize) -> ExpFamDist {
        ExpFamDist::standard(FamilyKind::gauss_full(d)).unwrap()
    }

    #[test]
    fn squared_loss_expectation_closed_form() {
        // x = (1,0), y = 0, q = N(0, I): E[l] = 0.5 (x' m)^2 + 0.5 x'Σx = 0.5
        let q = full_standard(2);
        let loss = LossTerm::squared_linear(vec![1.0, 0.0], 0.0);
        let v = expected_loss(&q, &loss, &Estimator::quadrature_default()).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        // delta1 is the point evaluation
        let v1 = expected_loss(&q, &loss, &Estimator::Delta1).unwrap();
        assert_eq!(v1, loss.value(&[0.0, 0.0]));
        // delta2 adds exactly the trace term for quadratic losses
        let v2 = expected_loss(&q, &loss, &Estimator::Delta2).unwrap();
        assert!((v2 - v).abs() < 1e-12);
    }

    #[test]
    fn logistic_quadrature_matches_reference_integral() {
        // 1-D threshold logistic at x = 0, y = 1, q = N(0, 1): f ~ N(0, 1).
        let q = full_standard(1);
        let loss = LossTerm::logistic_threshold(0.0, 1.0);
        let v = expected_loss(&q, &loss, &Estimator::quadrature_default()).unwrap();
        assert!((v - LOGISTIC_EXPECTED_LOSS_STD).abs() < 1e-6);

        // independent in-test oracle: fine trapezoid over +-12 sigma
        let n = 1_000_001;
        let (lo, hi) = (-12.0, 12.0);
        let h = (hi - lo) / (n - 1) as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let f = lo + h * i as f64;
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            let dens = (-0.5 * f * f).exp() / (2.0 * PI).sqrt();
            acc += w * (-f + softplus(f)) * dens;
        }
        let oracle = acc * h;
        assert!((v - oracle).abs() < 1e-6);
    }

    #[test]
    fn expected_grad_of_squared_loss_ignores_covariance() {
        let q = ExpFamDist::gauss_full(
            &DVector::from_vec(vec![0.4, -1.2]),
            &DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
        )
        .unwrap();
        let loss = LossTerm::squared_linear(vec![1.0, 2.0], 0.7);
        let g = expected_grad(&q, &loss, &Estimator::quadrature_default()).unwrap();
        let f = 0.4 + 2.0 * (-1.2);
        let expect = DVector::from_vec(vec![1.0, 2.0]) * (f - 0.7);
        assert!((g - expect).amax() < 1e-12);
    }

    #[test]
    fn expected_grad_mc_matches_finite_differences_of_expected_loss() {
        let q = ExpFamDist::gauss_full(
            &DVector::from_vec(vec![0.2, -0.5]),
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        let loss = LossTerm::logistic_linear(vec![1.0, -1.0], 1.0);
        let est = Estimator::MonteCarlo { n: 100_000, seed: 3 };
        let g = expected_grad(&q, &loss, &est).unwrap();

        // FD oracle on the quadrature value (exact in m for this loss family)
        let qd = Estimator::quadrature_default();
        let eps = 1e-5;
        let mut fd = DVector::zeros(2);
        for i in 0..2 {
            let mut mp = q.mean();
            let mut mm = q.mean();
            mp[i] += eps;
            mm[i] -= eps;
            let qp = ExpFamDist::gauss_full(&mp, &DMatrix::identity(2, 2)).unwrap();
            let qm = ExpFamDist::gauss_full(&mm, &DMatrix::identity(2, 2)).unwrap();
            fd[i] = (expected_loss(&qp, &loss, &qd).unwrap()
                - expected_loss(&qm, &loss, &qd).unwrap())
                / (2.0 * eps);
        }
        assert!((g - fd).amax() < 1e-2);
    }

    #[test]
    fn logistic_expected_hessian_is_scaled_outer_product() {
        let q = full_standard(2);
        let loss = LossTerm::logistic_linear(vec![1.0, -2.0], 1.0);
        let h = expected_hessian(&q, &loss, &Estimator::quadrature_default()).unwrap();
        let (_, beta) = residual_curvature(&q, &loss).unwrap();
        assert!(beta > 0.0 && beta < 0.25);
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let expect = &x * x.transpose() * beta;
        assert!((h - expect).amax() < 1e-12);
    }

    #[test]
    fn residual_curvature_on_standard_instance() {
        // x = 1, y = 1, m = 0, sigma^2 = 1: alpha = E[sigma] - 1 = -1/2 exactly,
        // beta frozen from the reference integral.
        let q = full_standard(1);
        let loss = LossTerm::logistic_linear(vec![1.0], 1.0);
        let (alpha, beta) = residual_curvature(&q, &loss).unwrap();
        assert!((alpha + 0.5).abs() < 1e-8);
        assert!((beta - BETA_BAR_STD).abs() < 1e-8);
    }

    #[test]
    fn residual_saturates_for_separated_data() {
        // y = 1 and x'm large positive: alpha -> 0 from below.
        let q = ExpFamDist::gauss_full(
            &DVector::from_vec(vec![12.0]),
            &DMatrix::identity(1, 1),
        )
        .unwrap();
        let loss = LossTerm::logistic_linear(vec![1.0], 1.0);
        let (alpha, _) = residual_curvature(&q, &loss).unwrap();
        assert!(alpha < 0.0 && alpha > -1e-3);
    }

    #[test]
    fn residuals_stay_in_open_intervals_on_random_instances() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..30 {
            let m = DVector::from_vec(vec![rng.random_range(-3.0..3.0)]);
            let q = ExpFamDist::gauss_full(&m, &DMatrix::identity(1, 1)).unwrap();
            let y = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            let x = rng.random_range(-2.0..2.0);
            let loss = LossTerm::logistic_linear(vec![x], y);
            let (alpha, beta) = residual_curvature(&q, &loss).unwrap();
            assert!(alpha > -1.0 && alpha < 1.0);
            assert!(beta > 0.0 && beta < 0.25);
        }
    }

    #[test]
    fn quadrature_on_registered_predictor_is_unsupported() {
        #[derive(Debug)]
        struct Quad;
        impl PredictorFn for Quad {
            fn dim(&self) -> usize {
                2
            }
            fn value(&self, t: &[f64]) -> f64 {
                t[0] * t[0] + 0.5 * t[1] * t[1]
            }
            fn grad(&self, t: &[f64]) -> DVector<f64> {
                DVector::from_vec(vec![2.0 * t[0], t[1]])
            }
            fn hessian(&self, _t: &[f64]) -> Option<DMatrix<f64>> {
                Some(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]))
            }
        }
        let q = full_standard(2);
        let loss = LossTerm::Bregman {
            generator: BregmanGenerator::Square,
            y: 0.0,
            predictor: Predictor::Registered(Arc::new(Quad)),
        };
        let out = expected_loss(&q, &loss, &Estimator::quadrature_default());
        assert!(matches!(out, Err(CoreError::UnsupportedEstimator(_))));
    }

    #[test]
    fn bregman_decomposition_linear_predictor_has_zero_residual_part() {
        let q = full_standard(2);
        let loss = LossTerm::logistic_linear(vec![0.5, 1.0], 1.0);
        let (ggn, resid) =
            bregman_expected_hessian_decomposition(&q, &loss, &Estimator::quadrature_default())
                .unwrap();
        assert!(resid.amax() == 0.0);
        let h = expected_hessian(&q, &loss, &Estimator::quadrature_default()).unwrap();
        assert!((ggn - h).amax() < 1e-12);
    }

    #[test]
    fn bregman_decomposition_quadratic_predictor_matches_mc_hessian() {
        // f(theta) = theta' B theta with B = diag(1, 1/2)
        #[derive(Debug)]
        struct QuadForm;
        impl PredictorFn for QuadForm {
            fn dim(&self) -> usize {
                2
            }
            fn value(&self, t: &[f64]) -> f64 {
                t[0] * t[0] + 0.5 * t[1] * t[1]
            }
            fn grad(&self, t: &[f64]) -> DVector<f64> {
                DVector::from_vec(vec![2.0 * t[0], t[1]])
            }
            fn hessian(&self, _t: &[f64]) -> Option<DMatrix<f64>> {
                Some(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]))
            }
        }
        // the decomposition uses the delta method on the predictor, so keep
        // the posterior tight for the stated tolerance
        let q = ExpFamDist::gauss_full(
            &DVector::from_vec(vec![0.3, -0.1]),
            &(DMatrix::identity(2, 2) * 400.0),
        )
        .unwrap();
        let loss = LossTerm::Bregman {
            generator: BregmanGenerator::Square,
            y: 0.2,
            predictor: Predictor::Registered(Arc::new(QuadForm)),
        };
        let est = Estimator::MonteCarlo { n: 200_000, seed: 9 };
        let (ggn, resid) = bregman_expected_hessian_decomposition(&q, &loss, &est).unwrap();
        let direct = expected_hessian(&q, &loss, &est).unwrap();
        assert!(((ggn + resid) - direct).amax() < 5e-2);
    }

    #[test]
    fn all_estimators_agree_on_linear_gaussian_losses() {
        let q = ExpFamDist::gauss_full(
            &DVector::from_vec(vec![0.7, 0.1]),
            &DMatrix::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 2.0]),
        )
        .unwrap();
        let loss = LossTerm::squared_linear(vec![1.0, -1.0], 0.3);
        let quad = expected_loss(&q, &loss, &Estimator::quadrature_default()).unwrap();
        let mc = expected_loss(&q, &loss, &Estimator::MonteCarlo { n: 400_000, seed: 2 }).unwrap();
        let d2 = expected_loss(&q, &loss, &Estimator::Delta2).unwrap();
        assert!((quad - d2).abs() < 1e-12, "quadrature vs delta2 exact");
        assert!((quad - mc).abs() < 5e-3, "mc within sampling error");
        // gradients agree exactly (linear in theta)
        let g_quad = expected_grad(&q, &loss, &Estimator::quadrature_default()).unwrap();
        let g_delta = expected_grad(&q, &loss, &Estimator::Delta1).unwrap();
        assert!((g_quad - g_delta).amax() < 1e-12);
    }

    #[test]
    fn bonnet_identity_via_finite_differences() {
        // expected_grad equals central differences of expected_loss in m
        let prec = DMatrix::from_row_slice(2, 2, &[1.3, -0.2, -0.2, 0.8]);
        let q = ExpFamDist::gauss_full(&DVector::from_vec(vec![0.25, -0.4]), &prec).unwrap();
        let qd = Estimator::quadrature_default();
        for loss in [
            LossTerm::logistic_linear(vec![1.0, 0.5], 0.0),
            LossTerm::squared_linear(vec![-0.3, 1.1], 0.2),
            LossTerm::quadratic_reg(0.7),
        ] {
            let g = expected_grad(&q, &loss, &qd).unwrap();
            let eps = 1e-5;
            for i in 0..2 {
                let mut mp = q.mean();
                let mut mm = q.mean();
                mp[i] += eps;
                mm[i] -= eps;
                let qp = ExpFamDist::gauss_full(&mp, &prec).unwrap();
                let qm = ExpFamDist::gauss_full(&mm, &prec).unwrap();
                let fd = (expected_loss(&qp, &loss, &qd).unwrap()
                    - expected_loss(&qm, &loss, &qd).unwrap())
                    / (2.0 * eps);
                assert!((g[i] - fd).abs() < 1e-4, "loss {loss:?} coord {i}");
            }
        }
    }

    #[test]
    fn dataset_csv_round_trip() {
        let dir = std::env::temp_dir().join("postcorr_losses_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.csv");
        std::fs::write(&path, "x_1,x_2,y\n1.0,2.0,0\n-0.5,0.25,1\n").unwrap();
        let ds = Dataset::from_csv_path(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.inputs[1], vec![-0.5, 0.25]);
        assert_eq!(ds.labels, vec![0.0, 1.0]);
    }

    #[test]
    fn grad_and_hessian_consistent_with_value() {
        // finite-difference consistency of the raw derivatives
        let losses = [
            LossTerm::squared_linear(vec![0.5, -1.0], 0.3),
            LossTerm::logistic_linear(vec![1.0, 2.0], 1.0),
            LossTerm::scaled(2.5, LossTerm::quadratic_reg(0.4)),
        ];
        let theta = [0.3, -0.7];
        let eps = 1e-5;
        for loss in &losses {
            let g = loss.grad(&theta);
            let h = loss.hessian(&theta).unwrap();
            for i in 0..2 {
                let mut tp = theta;
                let mut tm = theta;
                tp[i] += eps;
                tm[i] -= eps;
                let fd = (loss.value(&tp) - loss.value(&tm)) / (2.0 * eps);
                assert!((g[i] - fd).abs() / (1.0 + fd.abs()) < 1e-5);
                let gp = loss.grad(&tp);
                let gm = loss.grad(&tm);
                for j in 0..2 {
                    let fd2 = (gp[j] - gm[j]) / (2.0 * eps);
                    assert!((h[(j, i)] - fd2).abs() / (1.0 + fd2.abs()) < 1e-5);
                }
            }
        }
    }

    #[test]
    fn gauss_hermite_integrates_polynomials_exactly() {
        let gh = gauss_hermite(8);
        // integral of x^4 e^{-x^2} = 3 sqrt(pi) / 4
        let v: f64 = gh.0.iter().zip(&gh.1).map(|(x, w)| w * x.powi(4)).sum();
        assert!((v - 0.75 * PI.sqrt()).abs() < 1e-12);
    }
}
