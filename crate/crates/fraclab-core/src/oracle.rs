//! Dense reference computations used to cross-check the spectral/iterative
//! paths: direct trigonometric assembly of multiplier matrices, LU and
//! Schur-complement solves, symmetric eigendecompositions, and adaptive
//! quadrature. Everything here deliberately avoids the FFT pipeline so the
//! two routes stay independent.

use nalgebra::{DMatrix, DVector};

use crate::energy::ConformalCoefficient;
use crate::error::{CoreError, Result};
use crate::grid::{Field, GridSpec, MultiplierOp};
use crate::solver::DomainMask;

/// Dense matrix of a radial multiplier on the grid, assembled by direct
/// trigonometric summation. The matrix is circulant: entry (j, k) depends
/// only on the offset j - k, so one row of cosine sums fills everything.
pub fn dense_multiplier_matrix(grid: &GridSpec, op: MultiplierOp) -> DMatrix<f64> {
    let np = grid.num_points();
    let n = grid.points_per_axis();
    // kernel over offsets: kappa(d) = (1/N^n) sum_f symbol(|xi_f|) cos(xi_f . x_d)
    let mut kappa = vec![0.0; np];
    for d in 0..np {
        let xd = grid.coords(d);
        let mut acc = 0.0;
        for f in 0..np {
            let sym = op.symbol(grid.frequency_magnitude(f));
            if sym == 0.0 {
                continue;
            }
            let phase = match grid.dim() {
                1 => grid.frequency(f) * xd[0],
                2 => grid.frequency(f / n) * xd[0] + grid.frequency(f % n) * xd[1],
                _ => unreachable!(),
            };
            acc += sym * phase.cos();
        }
        kappa[d] = acc / np as f64;
    }
    let offset = |j: usize, k: usize| -> usize {
        match grid.dim() {
            1 => (j + np - k) % np,
            2 => {
                let (j0, j1) = (j / n, j % n);
                let (k0, k1) = (k / n, k % n);
                ((j0 + n - k0) % n) * n + ((j1 + n - k1) % n)
            }
            _ => unreachable!(),
        }
    };
    DMatrix::from_fn(np, np, |j, k| kappa[offset(j, k)])
}

/// Scalar quadratic-form matrix `L = S diag(sigma h) S` of the weighted
/// p = 2 energy, with `S` the half-order multiplier matrix of order `s`.
/// Only the scalar case (m = 1, `A = a_scalar * I`) is assembled densely.
pub fn dense_quadratic_form(
    grid: &GridSpec,
    s: f64,
    sigma: Option<&ConformalCoefficient>,
    a_scalar: f64,
) -> DMatrix<f64> {
    let ssym = dense_multiplier_matrix(grid, MultiplierOp::FractionalLaplacian { exponent: s });
    let np = grid.num_points();
    let h = grid.cell_volume();
    let mut d = DMatrix::zeros(np, np);
    for i in 0..np {
        let w = sigma.map_or(1.0, |sg| sg.at(i)) * a_scalar * h;
        d[(i, i)] = w;
    }
    &ssym * d * &ssym
}

/// Direct dense solve of the scalar p = 2 interior-source problem:
/// `(S sigma S u)|_int = F|_int`, `u = 0` outside. Returns the full-grid
/// solution field.
pub fn dense_interior_source_solve(
    source: &Field,
    mask: &DomainMask,
    s: f64,
    sigma: Option<&ConformalCoefficient>,
    a_scalar: f64,
) -> Result<Field> {
    expect_scalar(source)?;
    let grid = mask.grid();
    let l = dense_quadratic_form(grid, s, sigma, a_scalar);
    let h = grid.cell_volume();
    let int = mask.interior_indices();
    let k = int.len();
    let mut lii = DMatrix::zeros(k, k);
    for (i, &gi) in int.iter().enumerate() {
        for (j, &gj) in int.iter().enumerate() {
            lii[(i, j)] = l[(gi, gj)];
        }
    }
    let mut rhs = DVector::zeros(k);
    for (i, &gi) in int.iter().enumerate() {
        rhs[i] = source.values()[[gi, 0]] * h;
    }
    let sol = lii
        .lu()
        .solve(&rhs)
        .ok_or_else(|| CoreError::InvalidParameter("dense interior system is singular".into()))?;
    let mut u = Field::zeros(grid.clone(), 1)?;
    for (i, &gi) in int.iter().enumerate() {
        u.values_mut()[[gi, 0]] = sol[i];
    }
    Ok(u)
}

/// Direct dense solve of the scalar p = 2 exterior-value problem:
/// interior values `u_I = -L_II^{-1} L_IE u0_E`, exterior values copied from
/// the datum.
pub fn dense_exterior_value_solve(
    datum: &Field,
    mask: &DomainMask,
    s: f64,
    sigma: Option<&ConformalCoefficient>,
    a_scalar: f64,
) -> Result<Field> {
    expect_scalar(datum)?;
    let grid = mask.grid();
    let l = dense_quadratic_form(grid, s, sigma, a_scalar);
    let int = mask.interior_indices();
    let ext = mask.exterior_indices();
    let k = int.len();
    let mut lii = DMatrix::zeros(k, k);
    for (i, &gi) in int.iter().enumerate() {
        for (j, &gj) in int.iter().enumerate() {
            lii[(i, j)] = l[(gi, gj)];
        }
    }
    let mut rhs = DVector::zeros(k);
    for (i, &gi) in int.iter().enumerate() {
        let mut acc = 0.0;
        for &ge in &ext {
            acc += l[(gi, ge)] * datum.values()[[ge, 0]];
        }
        rhs[i] = -acc;
    }
    let sol = lii
        .lu()
        .solve(&rhs)
        .ok_or_else(|| CoreError::InvalidParameter("dense interior system is singular".into()))?;
    let mut u = Field::zeros(grid.clone(), 1)?;
    for &ge in &ext {
        u.values_mut()[[ge, 0]] = datum.values()[[ge, 0]];
    }
    for (i, &gi) in int.iter().enumerate() {
        u.values_mut()[[gi, 0]] = sol[i];
    }
    Ok(u)
}

/// Schur complement of the weighted quadratic form over the exterior DOFs:
/// `M = L_EE - L_EI L_II^{-1} L_IE`. This is the dense reference for the
/// linear DN matrix.
pub fn dense_dn_schur_complement(
    mask: &DomainMask,
    s: f64,
    sigma: Option<&ConformalCoefficient>,
    a_scalar: f64,
) -> Result<DMatrix<f64>> {
    let grid = mask.grid();
    let l = dense_quadratic_form(grid, s, sigma, a_scalar);
    let int = mask.interior_indices();
    let ext = mask.exterior_indices();
    let (ni, ne) = (int.len(), ext.len());
    let pick = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| l[(rows[i], cols[j])])
    };
    let lii = pick(int, int);
    let lie = pick(int, &ext);
    let lei = pick(&ext, int);
    let lee = pick(&ext, &ext);
    let lu = lii.lu();
    let mut x = DMatrix::zeros(ni, ne);
    for j in 0..ne {
        let col = lie.column(j).into_owned();
        let sol = lu.solve(&col).ok_or_else(|| {
            CoreError::InvalidParameter("dense interior system is singular".into())
        })?;
        x.set_column(j, &sol);
    }
    Ok(lee - lei * x)
}

/// Smallest eigenvalues/vectors of the interior restriction of the
/// full-order multiplier matrix `K = (-Delta)^s`; the reference for the
/// p = 2 constrained eigenproblem. Returns `(eigenvalues, eigenvectors)`
/// sorted ascending; eigenvectors are the interior DOF columns.
pub fn dense_interior_eigenpairs(
    mask: &DomainMask,
    s: f64,
    count: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let grid = mask.grid();
    let k_full = dense_multiplier_matrix(
        grid,
        MultiplierOp::FractionalLaplacian { exponent: 2.0 * s },
    );
    let int = mask.interior_indices();
    let k = int.len();
    let kii = DMatrix::from_fn(k, k, |i, j| k_full[(int[i], int[j])]);
    // symmetrize against roundoff before the eigensolver
    let kii = (&kii + kii.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(kii);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let take = count.min(k);
    let values = order[..take]
        .iter()
        .map(|&i| eig.eigenvalues[i])
        .collect();
    let vectors = order[..take]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().cloned().collect())
        .collect();
    Ok((values, vectors))
}

/// Embed interior DOF coefficients as a scalar grid field.
pub fn interior_vector_to_field(mask: &DomainMask, coeffs: &[f64]) -> Result<Field> {
    if coeffs.len() != mask.interior_count() {
        return Err(CoreError::InvalidParameter(format!(
            "expected {} interior coefficients, got {}",
            mask.interior_count(),
            coeffs.len()
        )));
    }
    let mut u = Field::zeros(mask.grid().clone(), 1)?;
    for (i, &gi) in mask.interior_indices().iter().enumerate() {
        u.values_mut()[[gi, 0]] = coeffs[i];
    }
    Ok(u)
}

/// Adaptive Simpson quadrature on [a, b] to the requested absolute
/// tolerance.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth - 1)
            + recurse(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1)
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, 48)
}

/// Adaptive Simpson over geometrically growing panels `[0, scale]`,
/// `[scale 2^k, scale 2^(k+1)]`, resolving integrands that concentrate on
/// the scale of `scale` before decaying over a long tail.
pub fn adaptive_simpson_paneled(
    f: &dyn Fn(f64) -> f64,
    scale: f64,
    upper: f64,
    tol: f64,
) -> f64 {
    let mut acc = adaptive_simpson(f, 0.0, scale.min(upper), tol);
    let mut lo = scale;
    while lo < upper {
        let hi = (2.0 * lo).min(upper);
        acc += adaptive_simpson(f, lo, hi, tol);
        lo = hi;
    }
    acc
}

fn expect_scalar(u: &Field) -> Result<()> {
    if u.components() != 1 {
        return Err(CoreError::ComponentMismatch {
            expected: 1,
            got: u.components(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn dense_multiplier_matches_fft_on_cosine() {
        let grid = GridSpec::new(1, 16, 2.0 * std::f64::consts::PI).unwrap();
        let k = dense_multiplier_matrix(
            &grid,
            MultiplierOp::FractionalLaplacian { exponent: 1.0 },
        );
        let u = Field::from_fn_scalar(grid.clone(), |x| (2.0 * x[0]).cos()).unwrap();
        let uv = DVector::from_iterator(16, u.values().column(0).iter().cloned());
        let ku = &k * uv;
        // |xi|^1 acting on cos(2x) multiplies by 2
        for idx in 0..16 {
            assert_relative_eq!(ku[idx], 2.0 * u.values()[[idx, 0]], epsilon = 1e-10);
        }
    }

    #[test]
    fn simpson_integrates_smooth_functions() {
        let val = adaptive_simpson(&|x: f64| x.sin(), 0.0, std::f64::consts::PI, 1e-12);
        assert_relative_eq!(val, 2.0, epsilon = 1e-10);
        let val = adaptive_simpson(&|x: f64| 1.0 / (1.0 + x * x), -50.0, 50.0, 1e-12);
        assert_relative_eq!(val, 2.0 * 50.0_f64.atan(), epsilon = 1e-9);
    }
}
