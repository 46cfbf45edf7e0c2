//! Discrete exterior Dirichlet-to-Neumann map.
//!
//! A trace datum is the class of a field modulo interior-supported fields;
//! the canonical representative extends the exterior values by zero. The DN
//! pairing is
//!
//! ```text
//! <Lambda f, g> = sum sigma |A^(1/2) w_f|^(p-2) (A w_f) . w_g * cellvol
//! ```
//!
//! with `w_f = (-Delta)^(s/2) u_f` and `u_f` the exterior-value solution for
//! the datum `f`. Solutions are cached per datum. In the linear case p = 2
//! the whole map assembles into a dense symmetric matrix over exterior DOFs,
//! which equals the Schur complement of the weighted quadratic form.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;

use crate::energy::{
    half_laplacian, operator_density, weak_pairing_weighted, AnisotropyField,
    ConformalCoefficient,
};
use crate::error::{CoreError, Result};
use crate::grid::Field;
use crate::solver::{solve_exterior_value_weighted, DomainMask, SolveReport, SolverOptions};

/// Canonical representative of a trace-space element: exterior values of a
/// field, extended by zero into the interior.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceDatum {
    field: Field,
}

impl TraceDatum {
    /// Zero-extension of the exterior restriction of `f`.
    pub fn new(mask: &DomainMask, f: &Field) -> Result<Self> {
        if f.grid() != mask.grid() {
            return Err(CoreError::GridMismatch(
                "datum and mask live on different grids".into(),
            ));
        }
        Ok(Self {
            field: mask.restrict_exterior(f),
        })
    }

    /// The canonical representative (interior entries exactly zero).
    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn scale(&self, t: f64) -> TraceDatum {
        TraceDatum {
            field: self.field.scale(t),
        }
    }

    fn cache_key(&self) -> u64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        for v in self.field.values().iter() {
            v.to_bits().hash(&mut hasher);
        }
        hasher.finish()
    }
}

/// Problem data for DN evaluations plus a cache of solved forward problems
/// keyed by datum hash.
pub struct DnContext {
    mask: DomainMask,
    a: AnisotropyField,
    sigma: Option<ConformalCoefficient>,
    s: f64,
    p: f64,
    opts: SolverOptions,
    cache: Mutex<HashMap<u64, Arc<SolveReport>>>,
}

impl DnContext {
    pub fn new(
        mask: DomainMask,
        a: AnisotropyField,
        sigma: Option<ConformalCoefficient>,
        s: f64,
        p: f64,
        opts: SolverOptions,
    ) -> Result<Self> {
        if a.grid() != mask.grid() {
            return Err(CoreError::GridMismatch(
                "anisotropy and mask live on different grids".into(),
            ));
        }
        if let Some(sg) = &sigma {
            if sg.grid() != mask.grid() {
                return Err(CoreError::GridMismatch(
                    "conformal coefficient lives on a different grid".into(),
                ));
            }
        }
        Ok(Self {
            mask,
            a,
            sigma,
            s,
            p,
            opts,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn mask(&self) -> &DomainMask {
        &self.mask
    }

    pub fn order(&self) -> f64 {
        self.s
    }

    pub fn exponent(&self) -> f64 {
        self.p
    }

    pub fn anisotropy(&self) -> &AnisotropyField {
        &self.a
    }

    pub fn sigma(&self) -> Option<&ConformalCoefficient> {
        self.sigma.as_ref()
    }

    pub fn datum(&self, f: &Field) -> Result<TraceDatum> {
        TraceDatum::new(&self.mask, f)
    }

    /// Exterior-value solution for the datum, cached.
    pub fn solve(&self, f: &TraceDatum) -> Result<Arc<SolveReport>> {
        let key = f.cache_key();
        if let Some(hit) = self.cache.lock().expect("cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let report = solve_exterior_value_weighted(
            f.field(),
            &self.mask,
            &self.a,
            self.sigma.as_ref(),
            self.s,
            self.p,
            &self.opts,
        )?;
        let arc = Arc::new(report);
        self.cache
            .lock()
            .expect("cache poisoned")
            .insert(key, arc.clone());
        Ok(arc)
    }

    pub fn cached_solves(&self) -> usize {
        self.cache.lock().expect("cache poisoned").len()
    }
}

/// `<Lambda f, g>` evaluated with the canonical representative of `g`.
pub fn dn_pair(ctx: &DnContext, f: &TraceDatum, g: &TraceDatum) -> Result<f64> {
    dn_pair_with_representative(ctx, f, g.field())
}

/// `<Lambda f, g>` with an arbitrary representative of the test class; the
/// value is representative-independent up to the solver residual.
pub fn dn_pair_with_representative(
    ctx: &DnContext,
    f: &TraceDatum,
    g_representative: &Field,
) -> Result<f64> {
    let report = ctx.solve(f)?;
    weak_pairing_weighted(
        &report.solution,
        g_representative,
        &ctx.a,
        ctx.sigma.as_ref(),
        ctx.s,
        ctx.p,
    )
}

/// `|<Lambda f, g + phi> - <Lambda f, g>|` for an interior-supported
/// perturbation `phi`; bounded by the solver residual times the test norm.
pub fn quotient_independence_check(
    ctx: &DnContext,
    f: &TraceDatum,
    g: &TraceDatum,
    phi: &Field,
) -> Result<f64> {
    let phi_interior = ctx.mask.restrict_interior(phi);
    let perturbed = g.field().add(&phi_interior)?;
    let a = dn_pair_with_representative(ctx, f, &perturbed)?;
    let b = dn_pair(ctx, f, g)?;
    Ok((a - b).abs())
}

/// Dense DN matrix over exterior DOFs for the linear case `p = 2`:
/// `M[i][j] = <Lambda e_i, e_j>` for exterior unit data. Each column comes
/// from one forward solve; the pairing against all test data reuses the
/// operator density, so assembly costs one extra multiplier application per
/// solve.
pub fn dn_matrix_linear(ctx: &DnContext) -> Result<DMatrix<f64>> {
    if ctx.p != 2.0 {
        return Err(CoreError::InvalidParameter(format!(
            "dn_matrix_linear requires p = 2, got p = {}",
            ctx.p
        )));
    }
    let m = ctx.a.components();
    let ext = ctx.mask.exterior_indices();
    let n_dof = ext.len() * m;
    let h = ctx.mask.grid().cell_volume();
    let mut matrix = DMatrix::zeros(n_dof, n_dof);
    for (i, &gi) in ext.iter().enumerate() {
        for c in 0..m {
            let mut e = Field::zeros(ctx.mask.grid().clone(), m)?;
            e.values_mut()[[gi, c]] = 1.0;
            let datum = TraceDatum::new(&ctx.mask, &e)?;
            let report = ctx.solve(&datum)?;
            // t = S(sigma A S u); pairing against e_j is t at the DOF times h
            let w = half_laplacian(&report.solution, ctx.s)?;
            let density = operator_density(&w, &ctx.a, ctx.sigma.as_ref(), 2.0, 0.0)?;
            let t = half_laplacian(&density, ctx.s)?;
            let row = i * m + c;
            for (j, &gj) in ext.iter().enumerate() {
                for cj in 0..m {
                    matrix[(row, j * m + cj)] = t.values()[[gj, cj]] * h;
                }
            }
        }
    }
    Ok(matrix)
}
