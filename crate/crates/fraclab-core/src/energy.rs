//! Anisotropy fields, the p-energy, and the weak/strong forms of the
//! anisotropic fractional p-biharmonic operator.
//!
//! With `w = (-Delta)^(s/2) u` the energy density is
//!
//! ```text
//! E(u)        = (1/p) sum_x sigma(x) |A^(1/2)(x) w(x)|^p  * cellvol
//! <L u, v>    =       sum_x sigma(x) |A^(1/2) w_u|^(p-2) (A w_u).w_v * cellvol
//! L u         = (-Delta)^(s/2)( sigma |A^(1/2) w|^(p-2) A w )
//! ```
//!
//! The optional conformal weight `sigma` realizes the rescaled coefficient
//! `sigma^(2/p) A` without rebuilding matrix square roots. For `1 < p < 2`
//! the density `|z|^(p-2) z` is continuously extended by 0 at `z = 0`; the
//! solvers minimize the epsilon-regularized energy in which `|z|` is
//! replaced by `sqrt(|z|^2 + eps^2)`.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::grid::{check_compatible, fractional_laplacian, Field, GridSpec, LaplacianOrder};

/// Per-point symmetric positive definite m x m matrices with cached square
/// roots and the tight ellipticity bounds `lambda`, `Lambda` (eigenvalues of
/// every `A(x)` lie in `[lambda^2, Lambda^2]`).
#[derive(Debug, Clone)]
pub struct AnisotropyField {
    grid: GridSpec,
    m: usize,
    /// Row-major m x m blocks, one per grid point.
    matrices: Vec<f64>,
    sqrt_matrices: Vec<f64>,
    lambda: f64,
    big_lambda: f64,
    /// Set when every point carries `c * I`; enables the scalar fast path.
    uniform_scalar: Option<f64>,
}

impl AnisotropyField {
    /// Spectral square roots of per-point symmetric matrices. `raw` holds
    /// `num_points` row-major m x m blocks. Rejects nonsymmetric or
    /// non-positive-definite input with the offending grid point.
    pub fn from_matrices(grid: GridSpec, m: usize, raw: &[f64]) -> Result<Self> {
        let np = grid.num_points();
        if raw.len() != np * m * m {
            return Err(CoreError::InvalidParameter(format!(
                "expected {} matrix entries, got {}",
                np * m * m,
                raw.len()
            )));
        }
        let mut sqrt_matrices = vec![0.0; np * m * m];
        let mut lambda2 = f64::INFINITY;
        let mut big_lambda2: f64 = 0.0;
        let mut uniform_scalar = Some(f64::NAN);
        for point in 0..np {
            let block = &raw[point * m * m..(point + 1) * m * m];
            let scale = block.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
            for i in 0..m {
                for j in (i + 1)..m {
                    let asymmetry = (block[i * m + j] - block[j * m + i]).abs();
                    if asymmetry > 1e-12 * scale {
                        return Err(CoreError::NotSymmetric { point, asymmetry });
                    }
                }
            }
            let a = DMatrix::from_row_slice(m, m, block);
            let sym = nalgebra::SymmetricEigen::new(a);
            let mut sqrt_eigs = Vec::with_capacity(m);
            for &ev in sym.eigenvalues.iter() {
                if ev <= 0.0 {
                    return Err(CoreError::NotPositiveDefinite {
                        point,
                        eigenvalue: ev,
                    });
                }
                lambda2 = lambda2.min(ev);
                big_lambda2 = big_lambda2.max(ev);
                sqrt_eigs.push(ev.sqrt());
            }
            // Q diag(sqrt(ev)) Q^T
            let q = &sym.eigenvectors;
            for i in 0..m {
                for j in 0..m {
                    let mut acc = 0.0;
                    for k in 0..m {
                        acc += q[(i, k)] * sqrt_eigs[k] * q[(j, k)];
                    }
                    sqrt_matrices[point * m * m + i * m + j] = acc;
                }
            }
            // track whether the whole field is c * I
            if let Some(c) = uniform_scalar {
                let mut is_scalar = true;
                for i in 0..m {
                    for j in 0..m {
                        let want = if i == j { block[0] } else { 0.0 };
                        if (block[i * m + j] - want).abs() > 1e-14 * scale {
                            is_scalar = false;
                        }
                    }
                }
                if is_scalar && (c.is_nan() || (c - block[0]).abs() <= 1e-14 * scale) {
                    uniform_scalar = Some(if c.is_nan() { block[0] } else { c });
                } else {
                    uniform_scalar = None;
                }
            }
        }
        Ok(Self {
            grid,
            m,
            matrices: raw.to_vec(),
            sqrt_matrices,
            lambda: lambda2.sqrt(),
            big_lambda: big_lambda2.sqrt(),
            uniform_scalar,
        })
    }

    /// `c * I` at every point.
    pub fn constant_scalar(grid: GridSpec, m: usize, c: f64) -> Result<Self> {
        let np = grid.num_points();
        let mut raw = vec![0.0; np * m * m];
        for point in 0..np {
            for i in 0..m {
                raw[point * m * m + i * m + i] = c;
            }
        }
        Self::from_matrices(grid, m, &raw)
    }

    pub fn identity(grid: GridSpec, m: usize) -> Result<Self> {
        Self::constant_scalar(grid, m, 1.0)
    }

    /// The same constant matrix at every point.
    pub fn constant_matrix(grid: GridSpec, m: usize, block: &[f64]) -> Result<Self> {
        let np = grid.num_points();
        let mut raw = Vec::with_capacity(np * m * m);
        for _ in 0..np {
            raw.extend_from_slice(block);
        }
        Self::from_matrices(grid, m, &raw)
    }

    /// Constant diagonal matrix at every point.
    pub fn constant_diagonal(grid: GridSpec, diag: &[f64]) -> Result<Self> {
        let m = diag.len();
        let mut block = vec![0.0; m * m];
        for (i, d) in diag.iter().enumerate() {
            block[i * m + i] = *d;
        }
        Self::constant_matrix(grid, m, &block)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.m
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn big_lambda(&self) -> f64 {
        self.big_lambda
    }

    pub fn matrix_at(&self, point: usize) -> &[f64] {
        &self.matrices[point * self.m * self.m..(point + 1) * self.m * self.m]
    }

    pub fn sqrt_matrix_at(&self, point: usize) -> &[f64] {
        &self.sqrt_matrices[point * self.m * self.m..(point + 1) * self.m * self.m]
    }

    #[inline]
    fn matvec(block: &[f64], m: usize, x: &[f64], out: &mut [f64]) {
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..m {
                acc += block[i * m + j] * x[j];
            }
            out[i] = acc;
        }
    }

    /// `A(x) w` and `|A^(1/2)(x) w|` in one pass.
    #[inline]
    pub fn apply_with_halfnorm(&self, point: usize, w: &[f64], aw: &mut [f64]) -> f64 {
        if let Some(c) = self.uniform_scalar {
            let mut nsq = 0.0;
            for (o, wi) in aw.iter_mut().zip(w.iter()) {
                *o = c * wi;
                nsq += wi * wi;
            }
            return (c * nsq).sqrt();
        }
        let m = self.m;
        Self::matvec(self.matrix_at(point), m, w, aw);
        // |A^(1/2) w|^2 = w . (A w)
        let mut nsq = 0.0;
        for i in 0..m {
            nsq += w[i] * aw[i];
        }
        nsq.max(0.0).sqrt()
    }

    /// `A^(1/2)(x) w`.
    pub fn apply_sqrt(&self, point: usize, w: &[f64], out: &mut [f64]) {
        if let Some(c) = self.uniform_scalar {
            let r = c.sqrt();
            for (o, wi) in out.iter_mut().zip(w.iter()) {
                *o = r * wi;
            }
            return;
        }
        Self::matvec(self.sqrt_matrix_at(point), self.m, w, out);
    }
}

/// Positive scalar coefficient with a uniform floor `sigma_0 > 0`.
#[derive(Debug, Clone)]
pub struct ConformalCoefficient {
    grid: GridSpec,
    values: Vec<f64>,
    floor: f64,
}

impl ConformalCoefficient {
    pub fn new(grid: GridSpec, values: Vec<f64>, floor: f64) -> Result<Self> {
        if !(floor > 0.0) {
            return Err(CoreError::InvalidParameter(format!(
                "sigma floor must be positive, got {floor}"
            )));
        }
        if values.len() != grid.num_points() {
            return Err(CoreError::GridMismatch(format!(
                "sigma has {} values for {} grid points",
                values.len(),
                grid.num_points()
            )));
        }
        if let Some((idx, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < floor)
        {
            return Err(CoreError::InvalidParameter(format!(
                "sigma value {v} at point {idx} is below the floor {floor}"
            )));
        }
        Ok(Self {
            grid,
            values,
            floor,
        })
    }

    pub fn constant(grid: GridSpec, value: f64) -> Result<Self> {
        let np = grid.num_points();
        Self::new(grid, vec![value; np], value)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, point: usize) -> f64 {
        self.values[point]
    }
}

fn check_field_vs_anisotropy(u: &Field, a: &AnisotropyField) -> Result<()> {
    if u.grid() != a.grid() {
        return Err(CoreError::GridMismatch(
            "field and anisotropy live on different grids".into(),
        ));
    }
    if u.components() != a.components() {
        return Err(CoreError::ComponentMismatch {
            expected: a.components(),
            got: u.components(),
        });
    }
    Ok(())
}

fn check_sigma(sigma: Option<&ConformalCoefficient>, grid: &GridSpec) -> Result<()> {
    if let Some(s) = sigma {
        if s.grid() != grid {
            return Err(CoreError::GridMismatch(
                "conformal coefficient lives on a different grid".into(),
            ));
        }
    }
    Ok(())
}

fn check_sp(s: f64, p: f64) -> Result<()> {
    if !(s > 0.0) {
        return Err(CoreError::InvalidParameter(format!(
            "order s must be positive, got {s}"
        )));
    }
    if !(p > 1.0) {
        return Err(CoreError::InvalidParameter(format!(
            "exponent p must be > 1, got {p}"
        )));
    }
    Ok(())
}

/// Anisotropic p-energy `(1/p) sum sigma |A^(1/2) w|^p cellvol` of the
/// half-Laplacian `w = (-Delta)^(s/2) u`.
pub fn p_energy(u: &Field, a: &AnisotropyField, s: f64, p: f64) -> Result<f64> {
    p_energy_weighted(u, a, None, s, p)
}

pub fn p_energy_weighted(
    u: &Field,
    a: &AnisotropyField,
    sigma: Option<&ConformalCoefficient>,
    s: f64,
    p: f64,
) -> Result<f64> {
    check_sp(s, p)?;
    let w = half_laplacian(u, s)?;
    Ok(energy_of_half(&w, a, sigma, p, 0.0)?)
}

/// Energy with `|z|` replaced by `sqrt(|z|^2 + eps^2)`; `eps = 0` recovers
/// the exact energy.
pub fn p_energy_regularized(
    u: &Field,
    a: &AnisotropyField,
    sigma: Option<&ConformalCoefficient>,
    s: f64,
    p: f64,
    eps: f64,
) -> Result<f64> {
    check_sp(s, p)?;
    let w = half_laplacian(u, s)?;
    energy_of_half(&w, a, sigma, p, eps)
}

/// Energy evaluated on a precomputed half-Laplacian field.
pub(crate) fn energy_of_half(
    w: &Field,
    a: &AnisotropyField,
    sigma: Option<&ConformalCoefficient>,
    p: f64,
    eps: f64,
) -> Result<f64> {
    check_field_vs_anisotropy(w, a)?;
    check_sigma(sigma, w.grid())?;
    let m = w.components();
    let mut aw = vec![0.0; m];
    let mut wx = vec![0.0; m];
    let mut acc = 0.0;
    for point in 0..w.grid().num_points() {
        for c in 0..m {
            wx[c] = w.values()[[point, c]];
        }
        let half = a.apply_with_halfnorm(point, &wx, &mut aw);
        let mag = (half * half + eps * eps).sqrt();
        let weight = sigma.map_or(1.0, |s| s.at(point));
        acc += weight * mag.powf(p);
    }
    Ok(acc * w.grid().cell_volume() / p)
}

/// Weak pairing `<L u, v> = sum sigma |A^(1/2) w_u|^(p-2) (A w_u).w_v cellvol`.
pub fn weak_pairing(u: &Field, v: &Field, a: &AnisotropyField, s: f64, p: f64) -> Result<f64> {
    weak_pairing_weighted(u, v, a, None, s, p)
}

pub fn weak_pairing_weighted(
    u: &Field,
    v: &Field,
    a: &AnisotropyField,
    sigma: Option<&ConformalCoefficient>,
    s: f64,
    p: f64,
) -> Result<f64> {
    check_sp(s, p)?;
    check_compatible(u, v)?;
    let wu = half_laplacian(u, s)?;
    let wv = half_laplacian(v, s)?;
    pairing_of_half(&wu, &wv, a, sigma, p, 0.0)
}

pub(crate) fn pairing_of_half(
    wu: &Field,
    wv: &Field,
    a: &AnisotropyField,
    sigma: Option<&ConformalCoefficient>,
    p: f64,
    eps: f64,
) -> Result<f64> {
    check_field_vs_anisotropy(wu, a)?;
    check_sigma(sigma, wu.grid())?;
    let m = wu.components();
    let mut awu = vec![0.0; m];
    let mut wx = vec![0.0; m];
    let mut acc = 0.0;
    for point in 0..wu.grid().num_points() {
        for c in 0..m {
            wx[c] = wu.values()[[point, c]];
        }
        let half = a.apply_with_halfnorm(point, &wx, &mut awu);
        let coeff = density_coefficient(half, p, eps);
        if coeff == 0.0 {
            continue;
        }
        let weight = sigma.map_or(1.0, |s| s.at(point));
        let mut dot = 0.0;
        for c in 0..m {
            dot += awu[c] * wv.values()[[point, c]];
        }
        acc += weight * coeff * dot;
    }
    Ok(acc * wu.grid().cell_volume())
}

/// `(|z|^2 + eps^2)^((p-2)/2)` with the continuous extension 0 at z = 0
/// for the unregularized subquadratic case.
#[inline]
pub(crate) fn density_coefficient(half_norm: f64, p: f64, eps: f64) -> f64 {
    if eps == 0.0 {
        if half_norm == 0.0 {
            // |z|^(p-2) z extends continuously by 0 for p > 1
            return if p == 2.0 { 1.0 } else { 0.0 };
        }
        half_norm.powf(p - 2.0)
    } else {
        (half_norm * half_norm + eps * eps).powf((p - 2.0) / 2.0)
    }
}

/// Strong (grid-pointwise) form
/// `L u = (-Delta)^(s/2)( sigma |A^(1/2) w|^(p-2) A w )`,
/// consistent with the weak pairing through the self-adjointness of the
/// real radial multiplier.
pub fn apply_operator(u: &Field, a: &AnisotropyField, s: f64, p: f64) -> Result<Field> {
    apply_operator_regularized(u, a, None, s, p, 0.0)
}

pub fn apply_operator_weighted(
    u: &Field,
    a: &AnisotropyField,
    sigma: Option<&ConformalCoefficient>,
    s: f64,
    p: f64,
) -> Result<Field> {
    apply_operator_regularized(u, a, sigma, s, p, 0.0)
}

pub fn apply_operator_regularized(
    u: &Field,
    a: &AnisotropyField,
    sigma: Option<&ConformalCoefficient>,
    s: f64,
    p: f64,
    eps: f64,
) -> Result<Field> {
    check_sp(s, p)?;
    let w = half_laplacian(u, s)?;
    let z = operator_density(&w, a, sigma, p, eps)?;
    half_laplacian(&z, s)
}

/// The density `sigma |A^(1/2) w|^(p-2) A w` as a field on the grid.
pub(crate) fn operator_density(
    w: &Field,
    a: &AnisotropyField,
    sigma: Option<&ConformalCoefficient>,
    p: f64,
    eps: f64,
) -> Result<Field> {
    check_field_vs_anisotropy(w, a)?;
    check_sigma(sigma, w.grid())?;
    let m = w.components();
    let mut z = Field::zeros(w.grid().clone(), m)?;
    let mut aw = vec![0.0; m];
    let mut wx = vec![0.0; m];
    for point in 0..w.grid().num_points() {
        for c in 0..m {
            wx[c] = w.values()[[point, c]];
        }
        let half = a.apply_with_halfnorm(point, &wx, &mut aw);
        let coeff = density_coefficient(half, p, eps);
        if coeff == 0.0 {
            continue;
        }
        let weight = sigma.map_or(1.0, |s| s.at(point));
        for c in 0..m {
            z.values_mut()[[point, c]] = weight * coeff * aw[c];
        }
    }
    Ok(z)
}

pub(crate) fn half_laplacian(u: &Field, s: f64) -> Result<Field> {
    fractional_laplacian(u, s, LaplacianOrder::Half)
}

/// Left and right hand side of the elementary monotonicity inequality for
/// the map `z -> |z|^(p-2) z`:
///
/// ```text
/// lhs = (|x|^(p-2) x - |y|^(p-2) y) . (x - y)
/// rhs = |x - y|^p                      for p >= 2
/// rhs = |x - y|^2 / (|x| + |y|)^(2-p)  for 1 < p < 2   (0 when x = y = 0)
/// ```
///
/// The inequality `lhs >= c_p rhs` holds with a p-dependent constant; see
/// [`fitted_monotonicity_constant`].
pub fn vector_monotonicity_gap(x: &[f64], y: &[f64], p: f64) -> (f64, f64) {
    assert_eq!(x.len(), y.len(), "vector length mismatch");
    let norm = |v: &[f64]| v.iter().map(|t| t * t).sum::<f64>().sqrt();
    let nx = norm(x);
    let ny = norm(y);
    let cx = if nx == 0.0 { 0.0 } else { nx.powf(p - 2.0) };
    let cy = if ny == 0.0 { 0.0 } else { ny.powf(p - 2.0) };
    let mut lhs = 0.0;
    let mut diff_sq = 0.0;
    for i in 0..x.len() {
        let d = x[i] - y[i];
        lhs += (cx * x[i] - cy * y[i]) * d;
        diff_sq += d * d;
    }
    let rhs = if p == 2.0 {
        diff_sq
    } else if p > 2.0 {
        diff_sq.sqrt().powf(p)
    } else if nx + ny == 0.0 {
        0.0
    } else {
        diff_sq / (nx + ny).powf(2.0 - p)
    };
    (lhs, rhs)
}

/// Empirically fitted lower bounds for the constant `c_p` in
/// `vector_monotonicity_gap`, frozen from a 1e5-pair scan over m in
/// {1, 2, 3} (see [`fit_monotonicity_constant`]; the scan is reproducible
/// through `fraclab verify --fit-cp`). For p = 2 the inequality is the
/// exact identity with constant 1. Values carry ~2% safety margin below
/// the scanned minima.
pub fn fitted_monotonicity_constant(p: f64) -> f64 {
    if (p - 2.0).abs() < 1e-12 {
        return 1.0;
    }
    if p < 2.0 {
        // scan minima track (p-1) * 2^(2-p)
        return 0.98 * (p - 1.0) * 2.0_f64.powf(2.0 - p);
    }
    // scan minima track 2^(2-p)
    0.98 * 2.0_f64.powf(2.0 - p)
}

/// Minimum of `lhs/rhs` over `samples` random vector pairs with components
/// uniform in [-1, 1], dimensions cycling through {1, 2, 3}. Pairs with
/// `rhs = 0` are skipped (there `lhs = 0` as well).
pub fn fit_monotonicity_constant(p: f64, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_ratio = f64::INFINITY;
    for k in 0..samples {
        let m = 1 + k % 3;
        let x: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (lhs, rhs) = vector_monotonicity_gap(&x, &y, p);
        if rhs > 1e-300 {
            min_ratio = min_ratio.min(lhs / rhs);
        }
    }
    min_ratio
}
