//! The heterogeneous curvature product space.
//!
//! A product manifold is one free factor (plain `R^d0`) times M restricted
//! factors. A restricted factor of curvature `c != 0` is the set
//! `{ z = [z_t, z_s] : sgn(c) z_t^2 + z_s' z_s = 1/c }` — the upper
//! hyperboloid sheet for `c < 0`, the sphere of radius `1/sqrt(c)` for
//! `c > 0`. The curvature sign is fixed per factor; only the magnitude is
//! learnable, reparameterized through softplus so it can never reach 0.
//!
//! Everything here is plain `f64` geometry: closed-form distances,
//! exponential/logarithmic maps anchored at the north pole
//! `(|c|^-1/2, 0, ..., 0)`, and the exact projection used as the optimizer's
//! retraction. The differentiable re-implementations used by the encoder
//! live in [`crate::encoder`]; both are pinned against each other in tests.

use thiserror::Error;

use crate::diff::{softplus, softplus_inverse};

/// Tolerance for accepting a point as lying on its factor.
pub const ON_MANIFOLD_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ManifoldError {
    #[error("point violates the factor norm constraint by {violation:.3e} (tolerance {tol:.1e})")]
    OffManifold { violation: f64, tol: f64 },
    #[error("expected a vector of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("logarithmic map is singular at the antipode of the pole")]
    AntipodalLog,
    #[error("cannot project a near-zero ambient vector onto a spherical factor")]
    UnrecoverableZero,
    #[error("product point has {got} restricted blocks, manifold has {expected}")]
    BlockCountMismatch { expected: usize, got: usize },
}

/// Fixed curvature sign of a restricted factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureSign {
    Negative,
    Positive,
}

impl CurvatureSign {
    pub fn as_f64(self) -> f64 {
        match self {
            CurvatureSign::Negative => -1.0,
            CurvatureSign::Positive => 1.0,
        }
    }

    pub fn from_int(v: i64) -> Option<Self> {
        match v {
            -1 => Some(CurvatureSign::Negative),
            1 => Some(CurvatureSign::Positive),
            _ => None,
        }
    }
}

/// Constant-curvature factor with learnable curvature magnitude.
#[derive(Debug, Clone)]
pub struct RestrictedFactor {
    sign: CurvatureSign,
    /// Unconstrained parameter; the magnitude is `softplus(param)`.
    magnitude_param: f64,
    /// Spatial dimension d; ambient vectors have d + 1 entries.
    dim: usize,
}

impl RestrictedFactor {
    pub fn new(sign: CurvatureSign, dim: usize, initial_magnitude: f64) -> Self {
        assert!(dim >= 1, "restricted factor needs at least one spatial dimension");
        assert!(initial_magnitude > 0.0, "curvature magnitude must be positive");
        Self { sign, magnitude_param: softplus_inverse(initial_magnitude), dim }
    }

    pub fn sign(&self) -> CurvatureSign {
        self.sign
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ambient_dim(&self) -> usize {
        self.dim + 1
    }

    pub fn magnitude_param(&self) -> f64 {
        self.magnitude_param
    }

    pub fn set_magnitude_param(&mut self, param: f64) {
        self.magnitude_param = param;
    }

    /// `|c| = softplus(param) > 0`.
    pub fn magnitude(&self) -> f64 {
        softplus(self.magnitude_param)
    }

    /// Effective curvature `c = sign * softplus(param)`; never 0.
    pub fn curvature(&self) -> f64 {
        self.sign.as_f64() * self.magnitude()
    }

    /// Signed metric inner product `sgn(c) x_t y_t + x_s . y_s`.
    pub fn inner(&self, x: &[f64], y: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.ambient_dim());
        debug_assert_eq!(y.len(), self.ambient_dim());
        let spatial: f64 = x[1..].iter().zip(&y[1..]).map(|(a, b)| a * b).sum();
        self.sign.as_f64() * x[0] * y[0] + spatial
    }

    /// `(|c|^-1/2, 0, ..., 0)`.
    pub fn pole(&self) -> Vec<f64> {
        let mut z = vec![0.0; self.ambient_dim()];
        z[0] = 1.0 / self.magnitude().sqrt();
        z
    }

    /// `|<z, z>_c - 1/c|`.
    pub fn constraint_violation(&self, z: &[f64]) -> f64 {
        (self.inner(z, z) - 1.0 / self.curvature()).abs()
    }

    fn check_point(&self, z: &[f64]) -> Result<(), ManifoldError> {
        if z.len() != self.ambient_dim() {
            return Err(ManifoldError::DimensionMismatch { expected: self.ambient_dim(), got: z.len() });
        }
        let violation = self.constraint_violation(z);
        if violation > ON_MANIFOLD_TOL {
            return Err(ManifoldError::OffManifold { violation, tol: ON_MANIFOLD_TOL });
        }
        Ok(())
    }

    /// Closed-form geodesic distance between two on-factor points.
    pub fn distance(&self, x: &[f64], y: &[f64]) -> Result<f64, ManifoldError> {
        self.check_point(x)?;
        self.check_point(y)?;
        let mag = self.magnitude();
        let inner = self.inner(x, y);
        let d = match self.sign {
            CurvatureSign::Negative => (-mag * inner).max(1.0).acosh() / mag.sqrt(),
            CurvatureSign::Positive => (mag * inner).clamp(-1.0, 1.0).acos() / mag.sqrt(),
        };
        Ok(d)
    }

    /// Exponential map at the pole of a tangent vector given by its spatial
    /// part (the t-component of a pole tangent is always 0).
    pub fn exp_at_pole(&self, v_spatial: &[f64]) -> Result<Vec<f64>, ManifoldError> {
        if v_spatial.len() != self.dim {
            return Err(ManifoldError::DimensionMismatch { expected: self.dim, got: v_spatial.len() });
        }
        let mag = self.magnitude();
        let sqrt_mag = mag.sqrt();
        let r = v_spatial.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = sqrt_mag * r;
        let mut z = vec![0.0; self.ambient_dim()];
        let (zt, scale) = match self.sign {
            CurvatureSign::Negative => (s.cosh() / sqrt_mag, if r > 0.0 { s.sinh() / s } else { 1.0 }),
            CurvatureSign::Positive => (s.cos() / sqrt_mag, if r > 0.0 { s.sin() / s } else { 1.0 }),
        };
        z[0] = zt;
        for (out, &v) in z[1..].iter_mut().zip(v_spatial) {
            *out = scale * v;
        }
        Ok(z)
    }

    /// Inverse of [`Self::exp_at_pole`]; returns the spatial part of the
    /// tangent vector. For spherical factors the pole's antipode has no
    /// well-defined direction and is rejected.
    pub fn log_at_pole(&self, z: &[f64]) -> Result<Vec<f64>, ManifoldError> {
        self.check_point(z)?;
        let d = self.distance(&self.pole(), z)?;
        let spatial_norm = z[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if spatial_norm < 1e-12 {
            return if matches!(self.sign, CurvatureSign::Positive) && z[0] < 0.0 {
                Err(ManifoldError::AntipodalLog)
            } else {
                Ok(vec![0.0; self.dim])
            };
        }
        Ok(z[1..].iter().map(|&v| v / spatial_norm * d).collect())
    }

    /// Restores the norm constraint exactly: hyperbolic factors re-solve the
    /// t-component (forcing the upper sheet), spherical factors rescale the
    /// whole vector. This is the retraction applied after optimizer steps.
    pub fn project(&self, ambient: &[f64]) -> Result<Vec<f64>, ManifoldError> {
        if ambient.len() != self.ambient_dim() {
            return Err(ManifoldError::DimensionMismatch { expected: self.ambient_dim(), got: ambient.len() });
        }
        let mag = self.magnitude();
        match self.sign {
            CurvatureSign::Negative => {
                let spatial_sq: f64 = ambient[1..].iter().map(|v| v * v).sum();
                let mut z = ambient.to_vec();
                z[0] = (1.0 / mag + spatial_sq).sqrt();
                Ok(z)
            }
            CurvatureSign::Positive => {
                let norm: f64 = ambient.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-12 {
                    return Err(ManifoldError::UnrecoverableZero);
                }
                let target = 1.0 / mag.sqrt();
                Ok(ambient.iter().map(|&v| v / norm * target).collect())
            }
        }
    }
}

/// The `R^d0` factor. No norm restriction; its metric is Euclidean.
#[derive(Debug, Clone)]
pub struct FreeFactor {
    dim: usize,
}

impl FreeFactor {
    /// `dim` must exceed 1 so the product space can host heterogeneous
    /// curvature.
    pub fn new(dim: usize) -> Self {
        assert!(dim > 1, "free factor dimension must exceed 1");
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn distance(&self, x: &[f64], y: &[f64]) -> Result<f64, ManifoldError> {
        if x.len() != self.dim {
            return Err(ManifoldError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        if y.len() != self.dim {
            return Err(ManifoldError::DimensionMismatch { expected: self.dim, got: y.len() });
        }
        Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }
}

/// One free factor plus M restricted factors.
#[derive(Debug, Clone)]
pub struct ProductManifold {
    pub free: FreeFactor,
    pub restricted: Vec<RestrictedFactor>,
}

impl ProductManifold {
    pub fn new(free: FreeFactor, restricted: Vec<RestrictedFactor>) -> Self {
        Self { free, restricted }
    }

    pub fn num_restricted(&self) -> usize {
        self.restricted.len()
    }

    /// `(sign, spatial dim)` list identifying the space, plus the free dim.
    pub fn signature(&self) -> (usize, Vec<(i64, usize)>) {
        (
            self.free.dim(),
            self.restricted
                .iter()
                .map(|f| (f.sign().as_f64() as i64, f.dim()))
                .collect(),
        )
    }

    pub fn curvatures(&self) -> Vec<f64> {
        self.restricted.iter().map(RestrictedFactor::curvature).collect()
    }

    /// Product geodesic distance: the square root of the sum of squared
    /// per-factor distances.
    pub fn distance(&self, x: &ProductPoint, y: &ProductPoint) -> Result<f64, ManifoldError> {
        self.check_point(x)?;
        self.check_point(y)?;
        let mut total = self.free.distance(&x.free, &y.free)?.powi(2);
        for (f, (xb, yb)) in self.restricted.iter().zip(x.restricted.iter().zip(&y.restricted)) {
            total += f.distance(xb, yb)?.powi(2);
        }
        Ok(total.sqrt())
    }

    pub fn check_point(&self, p: &ProductPoint) -> Result<(), ManifoldError> {
        if p.restricted.len() != self.restricted.len() {
            return Err(ManifoldError::BlockCountMismatch {
                expected: self.restricted.len(),
                got: p.restricted.len(),
            });
        }
        if p.free.len() != self.free.dim() {
            return Err(ManifoldError::DimensionMismatch { expected: self.free.dim(), got: p.free.len() });
        }
        for (f, b) in self.restricted.iter().zip(&p.restricted) {
            f.check_point(b)?;
        }
        Ok(())
    }

    /// The point with every block at its factor's pole / origin.
    pub fn origin(&self) -> ProductPoint {
        ProductPoint {
            free: vec![0.0; self.free.dim()],
            restricted: self.restricted.iter().map(RestrictedFactor::pole).collect(),
        }
    }
}

/// Per-factor coordinate blocks of one point in the product space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductPoint {
    pub free: Vec<f64>,
    pub restricted: Vec<Vec<f64>>,
}
