//! Site functions: conjugate surrogates of losses defined by natural
//! gradients at an anchor posterior.
//!
//! For a loss ℓ and posterior q_t, the site is `ℓ̂(θ) = ⟨T(θ), λ̂⟩` with
//! payload `λ̂ = ∇̃ E_{q_t}[ℓ]` (the natural gradient, i.e. the gradient in
//! expectation coordinates). The payloads per family:
//!
//! - iso:  λ̂ = E[∇ℓ]
//! - diag: λ̂ = (E[∇ℓ] - h̄·m_t, h̄/2) with h̄ = diag E[∇²ℓ]
//! - full: λ̂ = (E[∇ℓ] - H̄ m_t,  H̄/2) with H̄ = E[∇²ℓ]
//! - bernoulli: λ̂ = ∇_{p₁} E[ℓ] = ℓ(1) - ℓ(0)
//!
//! Written at the anchor, the Gaussian sites are the familiar quadratic forms
//! `θᵀE[∇ℓ] + ½(θ-m_t)ᵀ H̄ (θ-m_t)`; sites evaluate that form so the anchor
//! stays meaningful after the posterior moves.
//!
//! Regularizer sites under the iso family carry the non-constant base measure
//! of N(m, I): the payload gains `∇̃E[log h] = -m_t` and the evaluation gains
//! `-log h(θ) = ½‖θ‖²` (constants dropped). For diag/full/bernoulli the base
//! measure is constant and the flag is a no-op.
//!
//! Site constants are pinned so that `E_{q_t}[ℓ̂] = E_{q_t}[ℓ]` under the
//! estimator used to build the site. Every downstream use is a difference or
//! an argmin, and this pinning makes the conjugate corrections vanish
//! identically instead of up to an arbitrary constant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::expfam::{ExpFamDist, Family, FamilyKind, NaturalFactor, NaturalParams};
use crate::linalg;
use crate::losses::{self, Estimator, GaussMoments, LossTerm};
use crate::Result;

/// A conjugate site `ℓ̂(θ)` anchored at some posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub kind: FamilyKind,
    /// Natural-gradient payload λ̂.
    pub payload: NaturalParams,
    /// Anchor mean m_t (empty for Bernoulli).
    pub anchor_mean: Vec<f64>,
    /// Regularizer site with the iso base-measure adjustment.
    pub base_measure_adjusted: bool,
    /// Additive constant pinning E_{q_t}[ℓ̂] = E_{q_t}[ℓ].
    pub offset: f64,
}

impl NaturalFactor for Site {
    /// A site enters products as exp(-ℓ̂), hence contributes -λ̂.
    fn natural_contribution(&self) -> NaturalParams {
        NaturalParams {
            kind: self.payload.kind,
            coords: self.payload.coords.iter().map(|c| -c).collect(),
        }
    }
}

/// Location/precision form of a scalar-output site: the Gaussian
/// pseudo-observation `N(f | ỹ, 1/β̄)` with `ỹ = m̃ - ᾱ/β̄`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SitePseudoObservation {
    pub location: f64,
    pub precision: f64,
}

impl SitePseudoObservation {
    /// Build from the expected residual ᾱ, curvature β̄ and projected anchor
    /// mean m̃ = wᵀm_t + b. Requires β̄ > 0 for the Gaussian-factor reading.
    pub fn new(alpha: f64, beta: f64, anchor_projection: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "pseudo-observation needs positive curvature, got {beta:.3e}"
            )));
        }
        Ok(Self { location: anchor_projection - alpha / beta, precision: beta })
    }
}

/// Site of a data loss at `q_t` under the given estimator.
pub fn compute_site(q_t: &ExpFamDist, loss: &LossTerm, est: &Estimator) -> Result<Site> {
    build_site(q_t, loss, est, false)
}

/// Site of a regularizer: identical to [`compute_site`] except iso-family
/// sites absorb the non-constant base measure.
pub fn compute_regularizer_site(
    q_t: &ExpFamDist,
    loss: &LossTerm,
    est: &Estimator,
) -> Result<Site> {
    build_site(q_t, loss, est, true)
}

fn build_site(
    q_t: &ExpFamDist,
    loss: &LossTerm,
    est: &Estimator,
    regularizer: bool,
) -> Result<Site> {
    let kind = q_t.kind();
    let d = kind.dim;
    let payload = match kind.family {
        Family::GaussIso => {
            let mut g = losses::expected_grad(q_t, loss, est)?;
            if regularizer {
                // ∇̃E[log h] = -m_t for the iso base measure
                g -= q_t.mean();
            }
            NaturalParams::new(kind, g.as_slice().to_vec())?
        }
        Family::GaussDiag => {
            let g = losses::expected_grad(q_t, loss, est)?;
            let h = losses::expected_hessian(q_t, loss, est)?;
            let m = q_t.mean();
            let mut coords = Vec::with_capacity(kind.coord_len());
            for i in 0..d {
                coords.push(g[i] - h[(i, i)] * m[i]);
            }
            for i in 0..d {
                coords.push(0.5 * h[(i, i)]);
            }
            NaturalParams::new(kind, coords)?
        }
        Family::GaussFull => {
            let g = losses::expected_grad(q_t, loss, est)?;
            let h = losses::expected_hessian(q_t, loss, est)?;
            let m = q_t.mean();
            let first = &g - &h * &m;
            let mut coords = Vec::with_capacity(kind.coord_len());
            coords.extend(first.iter());
            for i in 0..d {
                for j in 0..d {
                    coords.push(0.5 * h[(i, j)]);
                }
            }
            NaturalParams::new(kind, coords)?
        }
        Family::Bernoulli => {
            // enumeration over θ ∈ {0, 1}
            let dv = loss.value(&[1.0]) - loss.value(&[0.0]);
            NaturalParams::new(kind, vec![dv])?
        }
    };
    let anchor_mean = if kind.family == Family::Bernoulli {
        Vec::new()
    } else {
        q_t.mean().as_slice().to_vec()
    };
    let mut site = Site {
        kind,
        payload,
        anchor_mean,
        base_measure_adjusted: regularizer && kind.family == Family::GaussIso,
        offset: 0.0,
    };
    // Pin the constant: E_{q_t}[site] = E_{q_t}[loss].
    let expected_raw = expected_site_value(&site, q_t)?;
    let expected_loss = losses::expected_loss(q_t, loss, est)?;
    site.offset = expected_loss - expected_raw;
    Ok(site)
}

/// Evaluate the site at a parameter value.
pub fn site_value(site: &Site, theta: &[f64]) -> f64 {
    let d = site.kind.dim;
    let mut v = site.offset;
    match site.kind.family {
        Family::GaussIso => {
            v += dot(&site.payload.coords, theta);
            if site.base_measure_adjusted {
                v += 0.5 * theta.iter().map(|t| t * t).sum::<f64>();
            }
        }
        Family::GaussDiag => {
            let (g, h) = diag_anchor_form(site);
            for i in 0..d {
                let dm = theta[i] - site.anchor_mean[i];
                v += theta[i] * g[i] + 0.5 * h[i] * dm * dm;
            }
        }
        Family::GaussFull => {
            let (g, h) = full_anchor_form(site);
            let m = DVector::from_column_slice(&site.anchor_mean);
            let th = DVector::from_column_slice(theta);
            let diff = &th - &m;
            v += th.dot(&g) + 0.5 * (diff.transpose() * &h * &diff)[(0, 0)];
        }
        Family::Bernoulli => {
            v += theta[0] * site.payload.coords[0];
        }
    }
    v
}

/// Closed-form `E_q[ℓ̂]` for a (possibly moved) Gaussian posterior, or the
/// Bernoulli enumeration.
pub fn expected_site_value(site: &Site, q: &ExpFamDist) -> Result<f64> {
    if q.kind() != site.kind {
        return Err(CoreError::KindMismatch("site vs posterior".into()));
    }
    let d = site.kind.dim;
    let mut v = site.offset;
    match site.kind.family {
        Family::GaussIso => {
            let m = q.mean();
            v += dot(&site.payload.coords, m.as_slice());
            if site.base_measure_adjusted {
                v += 0.5 * (m.norm_squared() + d as f64);
            }
        }
        Family::GaussDiag => {
            let (g, h) = diag_anchor_form(site);
            let m = q.mean();
            let s = q.precision_diag()?;
            for i in 0..d {
                let dm = m[i] - site.anchor_mean[i];
                v += m[i] * g[i] + 0.5 * h[i] * (dm * dm + 1.0 / s[i]);
            }
        }
        Family::GaussFull => {
            let (g, h) = full_anchor_form(site);
            let moments = GaussMoments::of(q)?;
            let diff = &moments.mean - DVector::from_column_slice(&site.anchor_mean);
            v += moments.mean.dot(&g)
                + 0.5 * (diff.transpose() * &h * &diff)[(0, 0)]
                + 0.5 * (&h * &moments.cov).trace();
        }
        Family::Bernoulli => {
            v += q.p1()? * site.payload.coords[0];
        }
    }
    Ok(v)
}

/// Anchor-form pieces (E[∇ℓ], diag E[∇²ℓ]) recovered from a diag payload.
fn diag_anchor_form(site: &Site) -> (Vec<f64>, Vec<f64>) {
    let d = site.kind.dim;
    let h: Vec<f64> = site.payload.coords[d..].iter().map(|c| 2.0 * c).collect();
    let g: Vec<f64> = (0..d)
        .map(|i| site.payload.coords[i] + h[i] * site.anchor_mean[i])
        .collect();
    (g, h)
}

/// Anchor-form pieces (E[∇ℓ], E[∇²ℓ]) recovered from a full payload.
fn full_anchor_form(site: &Site) -> (DVector<f64>, DMatrix<f64>) {
    let d = site.kind.dim;
    let h = DMatrix::from_row_slice(d, d, &site.payload.coords[d..]) * 2.0;
    let m = DVector::from_column_slice(&site.anchor_mean);
    let g = DVector::from_column_slice(&site.payload.coords[..d]) + &h * m;
    (g, h)
}

/// Anchored expected gradient E_{q_t}[∇ℓ] stored in a Gaussian site.
pub fn anchored_grad(site: &Site) -> Result<DVector<f64>> {
    match site.kind.family {
        Family::GaussIso => {
            let mut g = DVector::from_column_slice(&site.payload.coords);
            if site.base_measure_adjusted {
                g += DVector::from_column_slice(&site.anchor_mean);
            }
            Ok(g)
        }
        Family::GaussDiag => {
            let (g, _) = diag_anchor_form(site);
            Ok(DVector::from_vec(g))
        }
        Family::GaussFull => Ok(full_anchor_form(site).0),
        Family::Bernoulli => Err(CoreError::FamilyRestriction(
            "anchored gradient is for Gaussian sites".into(),
        )),
    }
}

/// ‖λ_t + Σᵢ λ̂ᵢ‖∞ — the stationarity (dual) residual. Near zero exactly when
/// `q_t` solves the variational problem whose sites are supplied (the
/// regularizer site included).
pub fn dual_residual(q_t: &ExpFamDist, sites: &[Site]) -> f64 {
    let mut acc = q_t.natural().coords.clone();
    for site in sites {
        for (a, c) in acc.iter_mut().zip(&site.payload.coords) {
            *a += c;
        }
    }
    linalg::inf_norm(&acc)
}

/// Correction term `E_q[ℓ - ℓ̂]` for one loss and its (anchored) site.
pub fn correction(q: &ExpFamDist, loss: &LossTerm, site: &Site, est: &Estimator) -> Result<f64> {
    Ok(losses::expected_loss(q, loss, est)? - expected_site_value(site, q)?)
}

/// Gradient of the correction in the mean: `E_q[∇ℓ] - E_{q_t}[∇ℓ]`. Zero at
/// `q = q_t`; in delta mode this is the plain gradient mismatch
/// `∇ℓ(m) - ∇ℓ(m_t)`.
pub fn correction_grad(
    q: &ExpFamDist,
    loss: &LossTerm,
    site: &Site,
    est: &Estimator,
) -> Result<DVector<f64>> {
    if !q.kind().is_gaussian() {
        return Err(CoreError::FamilyRestriction(
            "correction gradient is for Gaussian families".into(),
        ));
    }
    Ok(losses::expected_grad(q, loss, est)? - anchored_grad(site)?)
}

/// Residuals of the representer identities for logistic losses of affine
/// outputs at a full-Gaussian stationary point with prior precision δ:
///
/// `‖m_t + Σᵢ ᾱᵢ wᵢ‖∞` and `‖S_t - (δI + Σᵢ wᵢ β̄ᵢ wᵢᵀ)‖∞`.
///
/// Errors with [`CoreError::NotConverged`] when `q_t` is not a stationary
/// point of the implied problem (dual residual above 1e-3).
pub fn representer_identities(
    q_t: &ExpFamDist,
    losses_in: &[LossTerm],
    delta: f64,
) -> Result<(f64, f64)> {
    if q_t.kind().family != Family::GaussFull {
        return Err(CoreError::FamilyRestriction(
            "representer identities use the full Gaussian family".into(),
        ));
    }
    let d = q_t.kind().dim;
    let est = Estimator::quadrature_default();

    // stationarity gate
    let reg = LossTerm::quadratic_reg(delta);
    let mut sites = vec![compute_regularizer_site(q_t, &reg, &est)?];
    for loss in losses_in {
        sites.push(compute_site(q_t, loss, &est)?);
    }
    let residual = dual_residual(q_t, &sites);
    if residual > 1e-3 {
        return Err(CoreError::NotConverged(residual));
    }

    let mut mean_acc = q_t.mean();
    let mut prec_acc = DMatrix::identity(d, d) * delta;
    for loss in losses_in {
        let red = loss.reduce_1d().ok_or(CoreError::NonReducible)?;
        let (alpha, beta) = losses::residual_curvature(q_t, loss)?;
        let w = DVector::from_column_slice(&red.weights);
        mean_acc += &w * alpha;
        prec_acc += &w * w.transpose() * beta;
    }
    let mean_residual = linalg::inf_norm(mean_acc.as_slice());
    let gap = q_t.precision_matrix()? - prec_acc;
    let precision_residual = gap.amax();
    Ok((mean_residual, precision_residual))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
