//! Minimal exponential-family distributions in dual coordinates.
//!
//! A member is `q(θ) = h(θ) exp(⟨T(θ), λ⟩ - A(λ))`. Four families are
//! supported:
//!
//! | family      | T(θ)        | λ                | μ = E[T(θ)]          |
//! |-------------|-------------|------------------|----------------------|
//! | `GaussIso`  | θ           | m                | m                    |
//! | `GaussDiag` | (θ, θ²)     | (s·m, -s/2)      | (m, 1/s + m²)        |
//! | `GaussFull` | (θ, θθᵀ)    | (S m, -S/2)      | (m, S⁻¹ + m mᵀ)      |
//! | `Bernoulli` | θ           | logit(p₁)        | p₁                   |
//!
//! `GaussIso` fixes the covariance to the identity; its base measure
//! `h(θ) = (2π)^{-d/2} exp(-½‖θ‖²)` is *not* constant, which matters for
//! regularizer sites (see [`crate::sites`]). The other Gaussian families use
//! the Lebesgue base measure and the Bernoulli the counting measure.
//!
//! Natural and expectation parameters are connected by a bijective Legendre
//! transform; both directions are closed form here. All types are immutable
//! values; sampling takes an explicit seed and there is no global state.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::CoreError;
use crate::linalg;
use crate::Result;

/// Family tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Gaussian with covariance fixed to the identity.
    GaussIso,
    /// Gaussian with learned diagonal precision.
    GaussDiag,
    /// Gaussian with learned full precision matrix.
    GaussFull,
    /// Single binary variable with success probability p₁.
    Bernoulli,
}

/// Family plus dimension. Bernoulli is always one-dimensional.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyKind {
    pub family: Family,
    pub dim: usize,
}

impl FamilyKind {
    pub fn new(family: Family, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(CoreError::DimMismatch("dimension must be positive".into()));
        }
        if family == Family::Bernoulli && dim != 1 {
            return Err(CoreError::DimMismatch("bernoulli is one-dimensional".into()));
        }
        Ok(Self { family, dim })
    }

    pub fn gauss_iso(dim: usize) -> Self {
        Self { family: Family::GaussIso, dim }
    }

    pub fn gauss_diag(dim: usize) -> Self {
        Self { family: Family::GaussDiag, dim }
    }

    pub fn gauss_full(dim: usize) -> Self {
        Self { family: Family::GaussFull, dim }
    }

    pub fn bernoulli() -> Self {
        Self { family: Family::Bernoulli, dim: 1 }
    }

    /// Length of the flat coordinate vector for λ and μ.
    pub fn coord_len(&self) -> usize {
        match self.family {
            Family::GaussIso => self.dim,
            Family::GaussDiag => 2 * self.dim,
            Family::GaussFull => self.dim + self.dim * self.dim,
            Family::Bernoulli => 1,
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self.family, Family::GaussIso | Family::GaussDiag | Family::GaussFull)
    }
}

/// Flat natural-parameter vector with structured views.
///
/// Layout: mean block first (`dim` entries), then the second-moment block
/// (diag: `dim` entries; full: row-major `dim × dim`, kept symmetric).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaturalParams {
    pub kind: FamilyKind,
    pub coords: Vec<f64>,
}

/// Flat expectation-parameter vector, same layout as [`NaturalParams`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectationParams {
    pub kind: FamilyKind,
    pub coords: Vec<f64>,
}

macro_rules! impl_param_views {
    ($t:ty) => {
        impl $t {
            pub fn zeros(kind: FamilyKind) -> Self {
                Self { kind, coords: vec![0.0; kind.coord_len()] }
            }

            pub fn new(kind: FamilyKind, coords: Vec<f64>) -> Result<Self> {
                if coords.len() != kind.coord_len() {
                    return Err(CoreError::DimMismatch(format!(
                        "expected {} coordinates, got {}",
                        kind.coord_len(),
                        coords.len()
                    )));
                }
                Ok(Self { kind, coords })
            }

            /// First (mean-statistic) block.
            pub fn mean_part(&self) -> &[f64] {
                &self.coords[..self.kind.dim]
            }

            /// Second-moment block as a matrix (diag families expand to a
            /// diagonal matrix; iso/bernoulli have none).
            pub fn second_moment_matrix(&self) -> Option<DMatrix<f64>> {
                let d = self.kind.dim;
                match self.kind.family {
                    Family::GaussIso | Family::Bernoulli => None,
                    Family::GaussDiag => {
                        Some(DMatrix::from_diagonal(&DVector::from_column_slice(
                            &self.coords[d..],
                        )))
                    }
                    Family::GaussFull => {
                        Some(DMatrix::from_row_slice(d, d, &self.coords[d..]))
                    }
                }
            }

            /// Elementwise linear combination `self + w * other`.
            pub fn axpy(&self, w: f64, other: &Self) -> Result<Self> {
                if self.kind != other.kind {
                    return Err(CoreError::KindMismatch(format!(
                        "{:?} vs {:?}",
                        self.kind, other.kind
                    )));
                }
                let coords = self
                    .coords
                    .iter()
                    .zip(&other.coords)
                    .map(|(a, b)| a + w * b)
                    .collect();
                Ok(Self { kind: self.kind, coords })
            }
        }
    };
}

impl_param_views!(NaturalParams);
impl_param_views!(ExpectationParams);

/// An exponential-family member with both coordinate systems cached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpFamDist {
    kind: FamilyKind,
    natural: NaturalParams,
    expectation: ExpectationParams,
    log_partition: f64,
}

impl ExpFamDist {
    /// Build from natural parameters, validating the parameter cone.
    pub fn from_natural(natural: NaturalParams) -> Result<Self> {
        let expectation = to_expectation(&natural)?;
        let log_partition = log_partition(&natural)?;
        Ok(Self { kind: natural.kind, natural, expectation, log_partition })
    }

    /// Build from expectation parameters via the inverse Legendre map.
    pub fn from_expectation(expectation: ExpectationParams) -> Result<Self> {
        let natural = to_natural(&expectation)?;
        Self::from_natural(natural)
    }

    /// N(m, I) in the iso family.
    pub fn gauss_iso(mean: &[f64]) -> Result<Self> {
        let kind = FamilyKind::gauss_iso(mean.len());
        Self::from_natural(NaturalParams::new(kind, mean.to_vec())?)
    }

    /// N(m, diag(1/s)) with precision vector s.
    pub fn gauss_diag(mean: &[f64], precision: &[f64]) -> Result<Self> {
        if mean.len() != precision.len() {
            return Err(CoreError::DimMismatch("mean/precision length".into()));
        }
        let kind = FamilyKind::gauss_diag(mean.len());
        let mut coords = Vec::with_capacity(kind.coord_len());
        coords.extend(mean.iter().zip(precision).map(|(m, s)| s * m));
        coords.extend(precision.iter().map(|s| -0.5 * s));
        Self::from_natural(NaturalParams::new(kind, coords)?)
    }

    /// N(m, S⁻¹) with full precision matrix S.
    pub fn gauss_full(mean: &DVector<f64>, precision: &DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if precision.nrows() != d || precision.ncols() != d {
            return Err(CoreError::DimMismatch("mean/precision shape".into()));
        }
        let kind = FamilyKind::gauss_full(d);
        let sym = linalg::symmetrize(precision);
        let mut coords = Vec::with_capacity(kind.coord_len());
        coords.extend((&sym * mean).iter());
        coords.extend((-0.5 * &sym).iter_rows_row_major());
        Self::from_natural(NaturalParams::new(kind, coords)?)
    }

    /// Bernoulli with success probability p₁, clamped to [1e-9, 1-1e-9]
    /// before the logit so the natural parameter stays finite.
    pub fn bernoulli(p1: f64) -> Result<Self> {
        if !p1.is_finite() {
            return Err(CoreError::InvalidNatural("bernoulli p1 not finite".into()));
        }
        let p = p1.clamp(1e-9, 1.0 - 1e-9);
        let logit = (p / (1.0 - p)).ln();
        Self::from_natural(NaturalParams::new(FamilyKind::bernoulli(), vec![logit])?)
    }

    /// Standard-normal member of the given Gaussian family (or p₁ = ½).
    pub fn standard(kind: FamilyKind) -> Result<Self> {
        match kind.family {
            Family::GaussIso => Self::gauss_iso(&vec![0.0; kind.dim]),
            Family::GaussDiag => Self::gauss_diag(&vec![0.0; kind.dim], &vec![1.0; kind.dim]),
            Family::GaussFull => Self::gauss_full(
                &DVector::zeros(kind.dim),
                &DMatrix::identity(kind.dim, kind.dim),
            ),
            Family::Bernoulli => Self::bernoulli(0.5),
        }
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn natural(&self) -> &NaturalParams {
        &self.natural
    }

    pub fn expectation(&self) -> &ExpectationParams {
        &self.expectation
    }

    /// Log-partition A(λ) with respect to the family base measure.
    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    /// Mean vector (for Bernoulli: p₁ as a 1-vector).
    pub fn mean(&self) -> DVector<f64> {
        DVector::from_column_slice(self.expectation.mean_part())
    }

    /// Covariance matrix (Gaussian families only).
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        let d = self.kind.dim;
        match self.kind.family {
            Family::GaussIso => Ok(DMatrix::identity(d, d)),
            Family::GaussDiag => {
                let s = self.precision_diag()?;
                Ok(DMatrix::from_diagonal(&DVector::from_iterator(
                    d,
                    s.iter().map(|si| 1.0 / si),
                )))
            }
            Family::GaussFull => linalg::spd_inverse(&self.precision_matrix()?),
            Family::Bernoulli => Err(CoreError::FamilyRestriction(
                "covariance is for Gaussian families".into(),
            )),
        }
    }

    /// Diagonal precision vector (diag family).
    pub fn precision_diag(&self) -> Result<Vec<f64>> {
        match self.kind.family {
            Family::GaussDiag => Ok(self.natural.coords[self.kind.dim..]
                .iter()
                .map(|l2| -2.0 * l2)
                .collect()),
            Family::GaussIso => Ok(vec![1.0; self.kind.dim]),
            _ => Err(CoreError::FamilyRestriction("diagonal precision".into())),
        }
    }

    /// Full precision matrix (any Gaussian family).
    pub fn precision_matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.kind.dim;
        match self.kind.family {
            Family::GaussIso => Ok(DMatrix::identity(d, d)),
            Family::GaussDiag => Ok(DMatrix::from_diagonal(&DVector::from_vec(
                self.precision_diag()?,
            ))),
            Family::GaussFull => {
                let l2 = self.natural.second_moment_matrix().expect("full block");
                Ok(linalg::symmetrize(&(-2.0 * l2)))
            }
            Family::Bernoulli => Err(CoreError::FamilyRestriction(
                "precision is for Gaussian families".into(),
            )),
        }
    }

    /// Bernoulli success probability.
    pub fn p1(&self) -> Result<f64> {
        match self.kind.family {
            Family::Bernoulli => Ok(self.expectation.coords[0]),
            _ => Err(CoreError::FamilyRestriction("p1 is for bernoulli".into())),
        }
    }

    /// Differential (or discrete) entropy.
    pub fn entropy(&self) -> f64 {
        let d = self.kind.dim as f64;
        match self.kind.family {
            Family::GaussIso => 0.5 * d * (1.0 + (2.0 * PI).ln()),
            Family::GaussDiag => {
                let s = self.precision_diag().expect("diag");
                0.5 * s.iter().map(|si| 1.0 + (2.0 * PI).ln() - si.ln()).sum::<f64>()
            }
            Family::GaussFull => {
                let prec = self.precision_matrix().expect("full");
                let log_det = linalg::spd_log_det(&prec).expect("spd");
                0.5 * d * (1.0 + (2.0 * PI).ln()) - 0.5 * log_det
            }
            Family::Bernoulli => {
                let p = self.expectation.coords[0];
                -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
            }
        }
    }

    /// Log density at θ (log mass for Bernoulli).
    pub fn log_pdf(&self, theta: &[f64]) -> Result<f64> {
        let d = self.kind.dim;
        if theta.len() != d {
            return Err(CoreError::DimMismatch("log_pdf point".into()));
        }
        match self.kind.family {
            Family::GaussIso => {
                let m = self.expectation.mean_part();
                let sq: f64 = theta.iter().zip(m).map(|(t, mi)| (t - mi).powi(2)).sum();
                Ok(-0.5 * sq - 0.5 * d as f64 * (2.0 * PI).ln())
            }
            Family::GaussDiag => {
                let m = self.expectation.mean_part();
                let s = self.precision_diag()?;
                let mut acc = 0.0;
                for i in 0..d {
                    acc += -0.5 * s[i] * (theta[i] - m[i]).powi(2) + 0.5 * s[i].ln()
                        - 0.5 * (2.0 * PI).ln();
                }
                Ok(acc)
            }
            Family::GaussFull => {
                let m = self.mean();
                let prec = self.precision_matrix()?;
                let diff = DVector::from_column_slice(theta) - m;
                let quad = (diff.transpose() * &prec * &diff)[(0, 0)];
                let log_det = linalg::spd_log_det(&prec)?;
                Ok(-0.5 * quad + 0.5 * log_det - 0.5 * d as f64 * (2.0 * PI).ln())
            }
            Family::Bernoulli => {
                let p = self.expectation.coords[0];
                let t = theta[0];
                if t == 1.0 {
                    Ok(p.ln())
                } else if t == 0.0 {
                    Ok((1.0 - p).ln())
                } else {
                    Err(CoreError::DimMismatch("bernoulli point must be 0 or 1".into()))
                }
            }
        }
    }

    /// Draw `n` samples deterministically from the given seed.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
        if n == 0 {
            return Err(CoreError::InvalidConfig("sample count must be >= 1".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let d = self.kind.dim;
        match self.kind.family {
            Family::GaussIso => {
                let m = self.mean();
                Ok((0..n)
                    .map(|_| {
                        &m + DVector::from_iterator(
                            d,
                            (0..d).map(|_| StandardNormal.sample(&mut rng)),
                        )
                    })
                    .collect())
            }
            Family::GaussDiag => {
                let m = self.mean();
                let sd: Vec<f64> =
                    self.precision_diag()?.iter().map(|s| (1.0 / s).sqrt()).collect();
                Ok((0..n)
                    .map(|_| {
                        &m + DVector::from_iterator(
                            d,
                            sd.iter().map(|sdi| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                sdi * z
                            }),
                        )
                    })
                    .collect())
            }
            Family::GaussFull => {
                let m = self.mean();
                let cov = self.covariance()?;
                let l = linalg::spd_cholesky_l(&cov)?;
                Ok((0..n)
                    .map(|_| {
                        let z = DVector::from_iterator(
                            d,
                            (0..d).map(|_| StandardNormal.sample(&mut rng)),
                        );
                        &m + &l * z
                    })
                    .collect())
            }
            Family::Bernoulli => {
                let p = self.expectation.coords[0];
                Ok((0..n)
                    .map(|_| {
                        let u: f64 = rand::Rng::random(&mut rng);
                        DVector::from_vec(vec![if u < p { 1.0 } else { 0.0 }])
                    })
                    .collect())
            }
        }
    }
}

/// Forward Legendre map λ → μ. Validates that λ lies in the parameter cone.
pub fn to_expectation(natural: &NaturalParams) -> Result<ExpectationParams> {
    let kind = natural.kind;
    let d = kind.dim;
    match kind.family {
        Family::GaussIso => Ok(ExpectationParams::new(kind, natural.coords.clone())?),
        Family::GaussDiag => {
            let mut coords = vec![0.0; 2 * d];
            for i in 0..d {
                let s = -2.0 * natural.coords[d + i];
                if !(s.is_finite() && s > 0.0) {
                    return Err(CoreError::InvalidNatural(format!(
                        "diag precision entry {i} = {s:.3e} not positive"
                    )));
                }
                let m = natural.coords[i] / s;
                coords[i] = m;
                coords[d + i] = 1.0 / s + m * m;
            }
            Ok(ExpectationParams::new(kind, coords)?)
        }
        Family::GaussFull => {
            let l2 = natural.second_moment_matrix().expect("full block");
            let prec = linalg::symmetrize(&(-2.0 * l2));
            linalg::spd_check(&prec)
                .map_err(|_| CoreError::InvalidNatural("implied precision not SPD".into()))?;
            let eta1 = DVector::from_column_slice(natural.mean_part());
            let m = linalg::spd_solve(&prec, &eta1)?;
            let cov = linalg::spd_inverse(&prec)?;
            let second = &cov + &m * m.transpose();
            let mut coords = Vec::with_capacity(kind.coord_len());
            coords.extend(m.iter());
            coords.extend(second.iter_rows_row_major());
            Ok(ExpectationParams::new(kind, coords)?)
        }
        Family::Bernoulli => {
            let l = natural.coords[0];
            if !l.is_finite() {
                return Err(CoreError::InvalidNatural("bernoulli logit not finite".into()));
            }
            let p = 1.0 / (1.0 + (-l).exp());
            Ok(ExpectationParams::new(kind, vec![p])?)
        }
    }
}

/// Inverse Legendre map μ → λ.
pub fn to_natural(expectation: &ExpectationParams) -> Result<NaturalParams> {
    let kind = expectation.kind;
    let d = kind.dim;
    match kind.family {
        Family::GaussIso => Ok(NaturalParams::new(kind, expectation.coords.clone())?),
        Family::GaussDiag => {
            let mut coords = vec![0.0; 2 * d];
            for i in 0..d {
                let m = expectation.coords[i];
                let var = expectation.coords[d + i] - m * m;
                if !(var.is_finite() && var > 0.0) {
                    return Err(CoreError::InvalidExpectation(format!(
                        "implied variance entry {i} = {var:.3e} not positive"
                    )));
                }
                coords[i] = m / var;
                coords[d + i] = -0.5 / var;
            }
            Ok(NaturalParams::new(kind, coords)?)
        }
        Family::GaussFull => {
            let m = DVector::from_column_slice(expectation.mean_part());
            let second = expectation.second_moment_matrix().expect("full block");
            let cov = linalg::symmetrize(&(second - &m * m.transpose()));
            linalg::spd_check(&cov)
                .map_err(|_| CoreError::InvalidExpectation("implied covariance not SPD".into()))?;
            let prec = linalg::spd_inverse(&cov)?;
            let mut coords = Vec::with_capacity(kind.coord_len());
            coords.extend((&prec * &m).iter());
            coords.extend((-0.5 * &prec).iter_rows_row_major());
            Ok(NaturalParams::new(kind, coords)?)
        }
        Family::Bernoulli => {
            let p = expectation.coords[0];
            if !(p.is_finite() && p > 0.0 && p < 1.0) {
                return Err(CoreError::InvalidExpectation(format!(
                    "bernoulli p1 = {p:.3e} outside (0,1)"
                )));
            }
            Ok(NaturalParams::new(kind, vec![(p / (1.0 - p)).ln()])?)
        }
    }
}

/// Log-partition A(λ) with respect to the family base measure.
pub fn log_partition(natural: &NaturalParams) -> Result<f64> {
    let kind = natural.kind;
    let d = kind.dim as f64;
    match kind.family {
        Family::GaussIso => {
            Ok(0.5 * natural.coords.iter().map(|x| x * x).sum::<f64>())
        }
        Family::GaussDiag => {
            let dim = kind.dim;
            let mut acc = 0.5 * d * (2.0 * PI).ln();
            for i in 0..dim {
                let s = -2.0 * natural.coords[dim + i];
                if !(s > 0.0) {
                    return Err(CoreError::InvalidNatural("diag precision".into()));
                }
                let m = natural.coords[i] / s;
                acc += 0.5 * s * m * m - 0.5 * s.ln();
            }
            Ok(acc)
        }
        Family::GaussFull => {
            let l2 = natural.second_moment_matrix().expect("full block");
            let prec = linalg::symmetrize(&(-2.0 * l2));
            let eta1 = DVector::from_column_slice(natural.mean_part());
            let m = linalg::spd_solve(&prec, &eta1)?;
            let log_det = linalg::spd_log_det(&prec)?;
            Ok(0.5 * m.dot(&eta1) - 0.5 * log_det + 0.5 * d * (2.0 * PI).ln())
        }
        Family::Bernoulli => Ok((1.0 + natural.coords[0].exp()).ln()),
    }
}

/// KL(q‖p) for two members of the same family and dimension.
///
/// Uses the Bregman form `⟨μ_q, λ_q - λ_p⟩ - A(λ_q) + A(λ_p)`, which is exact
/// for any minimal family (base measures cancel).
pub fn kl(q: &ExpFamDist, p: &ExpFamDist) -> Result<f64> {
    if q.kind() != p.kind() {
        return Err(CoreError::KindMismatch(format!("{:?} vs {:?}", q.kind(), p.kind())));
    }
    let mut inner = 0.0;
    for (mu, (lq, lp)) in q
        .expectation
        .coords
        .iter()
        .zip(q.natural.coords.iter().zip(p.natural.coords.iter()))
    {
        inner += mu * (lq - lp);
    }
    Ok(inner - q.log_partition + p.log_partition)
}

/// A multiplicative factor contributing natural parameters to a product.
///
/// Distributions contribute `+λ`; sites contribute `-λ̂` because the factor is
/// `exp(-site)`.
pub trait NaturalFactor {
    fn natural_contribution(&self) -> NaturalParams;
}

impl NaturalFactor for ExpFamDist {
    fn natural_contribution(&self) -> NaturalParams {
        self.natural.clone()
    }
}

impl NaturalFactor for NaturalParams {
    fn natural_contribution(&self) -> NaturalParams {
        self.clone()
    }
}

/// Combine a base density with weighted factors: `λ = λ_base + Σ wᵢ λᵢ`.
///
/// `base = None` is the flat (improper) prior with zero natural parameters;
/// it is only legal here, never as a standalone distribution. Fails with
/// [`CoreError::IndefiniteResult`] when the combined precision leaves the
/// cone, which signals an invalid division (e.g. arithmetic with extreme
/// weights).
pub fn factor_combine(
    base: Option<&ExpFamDist>,
    terms: &[(&dyn NaturalFactor, f64)],
) -> Result<ExpFamDist> {
    let kind = match (base, terms.first()) {
        (Some(b), _) => b.kind(),
        (None, Some((f, _))) => f.natural_contribution().kind,
        (None, None) => {
            return Err(CoreError::InvalidConfig("factor_combine needs at least one term".into()))
        }
    };
    let mut acc = match base {
        Some(b) => b.natural().clone(),
        None => NaturalParams::zeros(kind),
    };
    for (factor, weight) in terms {
        let contrib = factor.natural_contribution();
        acc = acc.axpy(*weight, &contrib)?;
    }
    ExpFamDist::from_natural(acc).map_err(|e| match e {
        CoreError::InvalidNatural(msg) => CoreError::IndefiniteResult(msg),
        other => other,
    })
}

/// Natural-parameter arithmetic without validation; used where a combination
/// is an intermediate quantity (e.g. a flat result of q / q).
pub fn combine_naturals(
    kind: FamilyKind,
    base: Option<&NaturalParams>,
    terms: &[(&NaturalParams, f64)],
) -> Result<NaturalParams> {
    let mut acc = match base {
        Some(b) => b.clone(),
        None => NaturalParams::zeros(kind),
    };
    for (params, weight) in terms {
        acc = acc.axpy(*weight, params)?;
    }
    Ok(acc)
}

/// Helper: iterate a matrix in row-major order (nalgebra stores column-major).
trait IterRowsRowMajor {
    fn iter_rows_row_major(&self) -> Vec<f64>;
}

impl IterRowsRowMajor for DMatrix<f64> {
    fn iter_rows_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.nrows() * self.ncols());
        for i in 0..self.nrows() {
            for j in 0..self.ncols() {
                out.push(self[(i, j)]);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // sigma(k) for k = -3..3, frozen from a 40-digit independent evaluation.
    const SIGMOID_GRID: [(i32, f64); 7] = [
        (-3, 0.047425873177566780879),
        (-2, 0.11920292202211755594),
        (-1, 0.26894142136999512075),
        (0, 0.5),
        (1, 0.73105857863000487925),
        (2, 0.88079707797788244406),
        (3, 0.95257412682243321912),
    ];

    #[test]
    fn iso_zero_mean_maps_to_zero_expectation() {
        let kind = FamilyKind::gauss_iso(2);
        let nat = NaturalParams::new(kind, vec![0.0, 0.0]).unwrap();
        let mu = to_expectation(&nat).unwrap();
        assert_eq!(mu.coords, vec![0.0, 0.0]);
    }

    #[test]
    fn full_dim1_expectation_matches_closed_form() {
        // natural (S m, -S/2) with m = 2, S = 4: mu = (m, 1/S + m^2) = (2, 4.25)
        let kind = FamilyKind::gauss_full(1);
        let nat = NaturalParams::new(kind, vec![8.0, -2.0]).unwrap();
        let mu = to_expectation(&nat).unwrap();
        assert!((mu.coords[0] - 2.0).abs() < 1e-12);
        assert!((mu.coords[1] - 4.25).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_logit_grid_round_trip() {
        for (k, p) in SIGMOID_GRID {
            let nat = NaturalParams::new(FamilyKind::bernoulli(), vec![k as f64]).unwrap();
            let mu = to_expectation(&nat).unwrap();
            assert!((mu.coords[0] - p).abs() < 1e-15, "sigma({k})");
            let back = to_natural(&mu).unwrap();
            assert!((back.coords[0] - k as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn invalid_natural_rejected() {
        let kind = FamilyKind::gauss_full(2);
        // second-moment block +I/2 implies precision -I: not SPD.
        let mut coords = vec![0.0; kind.coord_len()];
        coords[2] = 0.5;
        coords[5] = 0.5;
        let nat = NaturalParams::new(kind, coords).unwrap();
        assert!(matches!(to_expectation(&nat), Err(CoreError::InvalidNatural(_))));
    }

    #[test]
    fn kl_is_zero_for_identical_and_closed_form_for_iso() {
        let q = ExpFamDist::gauss_iso(&[1.0, 0.0]).unwrap();
        let p = ExpFamDist::gauss_iso(&[0.0, 0.0]).unwrap();
        assert!(kl(&q, &q).unwrap().abs() < 1e-15);
        assert!((kl(&q, &p).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_kind_mismatch() {
        let q = ExpFamDist::gauss_iso(&[0.0]).unwrap();
        let p = ExpFamDist::bernoulli(0.5).unwrap();
        assert!(matches!(kl(&q, &p), Err(CoreError::KindMismatch(_))));
    }

    #[test]
    fn iso_entropy_constant_in_mean() {
        let a = ExpFamDist::gauss_iso(&[0.0, 0.0]).unwrap();
        let b = ExpFamDist::gauss_iso(&[5.0, 5.0]).unwrap();
        assert_eq!(a.entropy(), b.entropy());
    }

    #[test]
    fn std_normal_log_pdf_at_zero() {
        let q = ExpFamDist::gauss_full(
            &DVector::zeros(1),
            &DMatrix::identity(1, 1),
        )
        .unwrap();
        let expect = -0.5 * (2.0 * PI).ln();
        assert!((q.log_pdf(&[0.0]).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn sampling_is_deterministic_and_law_of_large_numbers_holds() {
        let q = ExpFamDist::gauss_diag(&[1.0, -2.0], &[4.0, 0.25]).unwrap();
        let n = 100_000;
        let a = q.sample(n, 7).unwrap();
        let b = q.sample(n, 7).unwrap();
        assert_eq!(a[17], b[17]);
        let mut mean = DVector::zeros(2);
        for s in &a {
            mean += s;
        }
        mean /= n as f64;
        // 4 sigma / sqrt(n) per coordinate
        for (i, sd) in [0.5_f64, 2.0].iter().enumerate() {
            let tol = 4.0 * sd / (n as f64).sqrt();
            let target = if i == 0 { 1.0 } else { -2.0 };
            assert!((mean[i] - target).abs() < tol, "coordinate {i}");
        }
    }

    #[test]
    fn factor_combine_cancels_to_flat_and_multiplies_gaussians() {
        let q = ExpFamDist::gauss_diag(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        // q * q^{-1} on a flat base has zero natural parameters; the result is
        // not a valid distribution, so check via raw natural arithmetic.
        let flat = combine_naturals(
            q.kind(),
            None,
            &[(q.natural(), 1.0), (q.natural(), -1.0)],
        )
        .unwrap();
        assert!(flat.coords.iter().all(|c| c.abs() < 1e-15));

        // N(0,1) * N(2,1) = N(1, 1/2)
        let a = ExpFamDist::gauss_diag(&[0.0], &[1.0]).unwrap();
        let b = ExpFamDist::gauss_diag(&[2.0], &[1.0]).unwrap();
        let prod = factor_combine(Some(&a), &[(&b, 1.0)]).unwrap();
        assert!((prod.mean()[0] - 1.0).abs() < 1e-12);
        assert!((prod.precision_diag().unwrap()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn factor_combine_flags_indefinite_division() {
        let wide = ExpFamDist::gauss_diag(&[0.0], &[0.5]).unwrap();
        let narrow = ExpFamDist::gauss_diag(&[0.0], &[2.0]).unwrap();
        // wide / narrow has precision 0.5 - 2.0 < 0
        let out = factor_combine(Some(&wide), &[(&narrow, -1.0)]);
        assert!(matches!(out, Err(CoreError::IndefiniteResult(_))));
    }

    #[test]
    fn gaussian_triple_product_matches_pointwise_log_density() {
        // (m1,H1)(m2,H2)/(m3,H3): combined H = H1+H2-H3, H m = sum(±Hi mi),
        // verified by evaluating log densities at 5 points.
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..5 {
            let rand_spd = |rng: &mut ChaCha12Rng| {
                let a = DMatrix::from_fn(2, 2, |_, _| {
                    let z: f64 = StandardNormal.sample(rng);
                    z
                });
                &a * a.transpose() + DMatrix::identity(2, 2)
            };
            let h1 = rand_spd(&mut rng);
            let h2 = rand_spd(&mut rng);
            // keep H3 small so the division stays SPD
            let h3 = 0.2 * rand_spd(&mut rng);
            let m: Vec<DVector<f64>> = (0..3)
                .map(|_| {
                    DVector::from_fn(2, |_, _| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z
                    })
                })
                .collect();
            let q1 = ExpFamDist::gauss_full(&m[0], &h1).unwrap();
            let q2 = ExpFamDist::gauss_full(&m[1], &h2).unwrap();
            let q3 = ExpFamDist::gauss_full(&m[2], &h3).unwrap();
            let combined =
                factor_combine(Some(&q1), &[(&q2, 1.0), (&q3, -1.0)]).unwrap();

            let h_expect = &h1 + &h2 - &h3;
            let rhs = &h1 * &m[0] + &h2 * &m[1] - &h3 * &m[2];
            let m_expect = linalg::spd_solve(&h_expect, &rhs).unwrap();
            assert!((combined.mean() - &m_expect).amax() < 1e-10);

            // density-ratio check at 5 points: log q1 + log q2 - log q3 equals
            // log combined up to a constant.
            let mut offsets = Vec::new();
            for k in 0..5 {
                let theta = [0.3 * k as f64 - 0.7, 0.1 * k as f64];
                let lhs = q1.log_pdf(&theta).unwrap() + q2.log_pdf(&theta).unwrap()
                    - q3.log_pdf(&theta).unwrap();
                offsets.push(lhs - combined.log_pdf(&theta).unwrap());
            }
            let first = offsets[0];
            assert!(offsets.iter().all(|o| (o - first).abs() < 1e-9));
        }
    }

    #[test]
    fn kl_full_matches_grid_quadrature() {
        // 2-D full-Gaussian KL against a dense-grid integration oracle.
        let mq = DVector::from_vec(vec![0.3, -0.2]);
        let sq = DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.9]);
        let mp = DVector::from_vec(vec![-0.1, 0.25]);
        let sp = DMatrix::from_row_slice(2, 2, &[0.8, -0.2, -0.2, 1.2]);
        let q = ExpFamDist::gauss_full(&mq, &sq).unwrap();
        let p = ExpFamDist::gauss_full(&mp, &sp).unwrap();

        let n = 241;
        let span = 7.0;
        let hx = 2.0 * span / (n - 1) as f64;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let theta = [mq[0] - span + hx * i as f64, mq[1] - span + hx * j as f64];
                let lq = q.log_pdf(&theta).unwrap();
                let lp = p.log_pdf(&theta).unwrap();
                let wi = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                let wj = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                let w = wi * wj;
                acc += w * lq.exp() * (lq - lp);
            }
        }
        let oracle = acc * hx * hx;
        assert!((kl(&q, &p).unwrap() - oracle).abs() < 1e-3);
    }
}
