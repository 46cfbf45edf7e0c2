//! Verification suite: every shipped claim with its tolerance, runnable as
//! one pass/fail table. The criterion list is fixed; each entry pins its
//! thresholds in code and reports the measured values.

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::dnmap::{dn_matrix_linear, dn_pair, quotient_independence_check, DnContext, TraceDatum};
use crate::energy::{
    p_energy_regularized, weak_pairing, AnisotropyField, ConformalCoefficient,
};
use crate::error::Result;
use crate::extension::{extend, kernel_lq_norm, normal_trace, PoissonKernelSpec};
use crate::grid::{
    bessel_potential, fractional_laplacian, lp_norm, Field, GridSpec, LaplacianOrder,
};
use crate::inverse::{
    lower_bound_beta_scan, monotonicity_bounds, reconstruct_sigma, single_measurement_experiment,
    ScanConfig, SimulatedOracle,
};
use crate::oracle;
use crate::poincare::{poincare_eigenpair, PoincareOptions};
use crate::solver::{solve_exterior_value, solve_interior_source, DomainMask, SolverOptions};

/// Outcome of one criterion.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CriterionOutcome {
    pub id: usize,
    pub label: String,
    pub passed: bool,
    pub measured: String,
    pub runtime_s: f64,
    pub runtime_limit_s: Option<f64>,
}

impl CriterionOutcome {
    pub fn table_line(&self) -> String {
        format!(
            "[{}] {:2}. {:<28} {:>8.2}s{}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.label,
            self.runtime_s,
            match self.runtime_limit_s {
                Some(l) => format!(" (< {l:.0}s)"),
                None => String::new(),
            },
            self.measured
        )
    }
}

struct Check {
    passed: bool,
    notes: Vec<String>,
}

impl Check {
    fn new() -> Self {
        Self {
            passed: true,
            notes: Vec::new(),
        }
    }

    fn require(&mut self, ok: bool, note: String) {
        if !ok {
            self.passed = false;
        }
        self.notes.push(format!(
            "{}{}",
            if ok { "" } else { "VIOLATED: " },
            note
        ));
    }
}

fn finish(
    id: usize,
    label: &str,
    limit: Option<f64>,
    start: Instant,
    result: Result<Check>,
) -> CriterionOutcome {
    let runtime_s = start.elapsed().as_secs_f64();
    match result {
        Ok(check) => {
            let within = limit.map_or(true, |l| runtime_s < l);
            CriterionOutcome {
                id,
                label: label.into(),
                passed: check.passed && within,
                measured: if within {
                    check.notes.join("; ")
                } else {
                    format!("runtime limit exceeded; {}", check.notes.join("; "))
                },
                runtime_s,
                runtime_limit_s: limit,
            }
        }
        Err(e) => CriterionOutcome {
            id,
            label: label.into(),
            passed: false,
            measured: format!("error: {e}"),
            runtime_s,
            runtime_limit_s: limit,
        },
    }
}

/// Run every criterion in order.
pub fn run_all() -> Vec<CriterionOutcome> {
    (1..=11).map(run_criterion).collect()
}

pub fn run_criterion(id: usize) -> CriterionOutcome {
    match id {
        1 => criterion_1(),
        2 => criterion_2(),
        3 => criterion_3(),
        4 => criterion_4(),
        5 => criterion_5(),
        6 => criterion_6(),
        7 => criterion_7(),
        8 => criterion_8(),
        9 => criterion_9(),
        10 => criterion_10(),
        11 => criterion_11(),
        other => CriterionOutcome {
            id: other,
            label: "unknown criterion".into(),
            passed: false,
            measured: "criterion ids run from 1 to 11".into(),
            runtime_s: 0.0,
            runtime_limit_s: None,
        },
    }
}

/// 1. Closed-form kernel norms match adaptive quadrature to 1e-6 over an
/// (n, s, q, y) sample grid; exact pi anchors hit to 1e-8.
fn criterion_1() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let mut check = Check::new();
        let mut worst: f64 = 0.0;
        for n in [1usize, 2, 3] {
            for s in [0.3, 0.5, 0.7] {
                for q in [1.0, 2.0, 3.0] {
                    for y in [0.5, 1.0, 2.0] {
                        let spec = PoissonKernelSpec::new(n, s)?;
                        let closed = kernel_lq_norm(y, q, &spec)?;
                        let nf = n as f64;
                        let integrand = move |r: f64| {
                            let p = y.powf(2.0 * s)
                                / (r * r + y * y).powf((nf + 2.0 * s) / 2.0);
                            r.powf(nf - 1.0) * p.powf(q)
                        };
                        let r_max = 500.0 * y.max(1.0);
                        let bulk =
                            oracle::adaptive_simpson_paneled(&integrand, y, r_max, 1e-13);
                        let decay = (nf + 2.0 * s) * q - nf;
                        let tail = y.powf(2.0 * s * q) * r_max.powf(-decay) / decay;
                        let quad = (spec.omega_n() * (bulk + tail)).powf(1.0 / q);
                        worst = worst.max((closed - quad).abs() / quad);
                    }
                }
            }
        }
        check.require(worst <= 1e-6, format!("worst quadrature mismatch {worst:.2e} (<= 1e-6)"));
        let spec = PoissonKernelSpec::new(1, 0.5)?;
        let a1 = (kernel_lq_norm(1.0, 1.0, &spec)? - std::f64::consts::PI).abs();
        let a2 = (kernel_lq_norm(1.0, 2.0, &spec)? - (std::f64::consts::PI / 2.0).sqrt()).abs();
        check.require(a1 <= 1e-8, format!("|.|_1 anchor defect {a1:.2e} (<= 1e-8)"));
        check.require(a2 <= 1e-8, format!("|.|_2 anchor defect {a2:.2e} (<= 1e-8)"));
        Ok(check)
    })();
    finish(1, "kernel norm identity", Some(10.0), start, result)
}

fn trace_inputs(grid: &GridSpec) -> Vec<(&'static str, Field)> {
    let center = std::f64::consts::PI;
    vec![
        (
            "cos3",
            Field::from_fn_scalar(grid.clone(), |x| (3.0 * x[0]).cos()).unwrap(),
        ),
        (
            "cos5",
            Field::from_fn_scalar(grid.clone(), |x| (5.0 * x[0]).cos()).unwrap(),
        ),
        (
            "gauss",
            Field::from_fn_scalar(grid.clone(), |x| {
                let d = x[0] - center;
                (-d * d / (2.0 * 0.35 * 0.35)).exp()
            })
            .unwrap(),
        ),
    ]
}

/// 2. Calibrated weighted normal trace matches the spectral fractional
/// Laplacian to 2% for band-limited inputs; the calibration constant is
/// input-independent to 1%.
fn criterion_2() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let mut check = Check::new();
        let grid = GridSpec::new(1, 512, 2.0 * std::f64::consts::PI)?;
        let heights: Vec<f64> = (0..8).map(|j| 0.8 * 0.7_f64.powi(j)).collect();
        for s in [0.3, 0.5, 0.7] {
            let spec = PoissonKernelSpec::new(1, s)?;
            let mut calibrations = Vec::new();
            let mut worst_err: f64 = 0.0;
            for (name, u) in trace_inputs(&grid) {
                let slices = extend(&u, &heights, &spec)?;
                let (trace, c) = normal_trace(&slices, &spec)?;
                let target = fractional_laplacian(&u, s, LaplacianOrder::Full)?;
                let err = lp_norm(&trace.scale(c).sub(&target)?, 2.0)?
                    / lp_norm(&target, 2.0)?;
                worst_err = worst_err.max(err);
                calibrations.push(c);
                let _ = name;
            }
            let cmin = calibrations.iter().cloned().fold(f64::INFINITY, f64::min);
            let cmax = calibrations.iter().cloned().fold(0.0_f64, f64::max);
            let spread = (cmax - cmin) / cmin;
            check.require(
                worst_err <= 2e-2,
                format!("s={s}: worst trace error {worst_err:.2e} (<= 2e-2)"),
            );
            check.require(
                spread <= 1e-2,
                format!("s={s}: calibration spread {spread:.2e} (<= 1e-2)"),
            );
        }
        Ok(check)
    })();
    finish(2, "normal-trace recovery", Some(60.0), start, result)
}

/// 3. Extension slices contract every L^p norm, p in {2, 3}.
fn criterion_3() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let mut check = Check::new();
        let grid = GridSpec::new(1, 512, 2.0 * std::f64::consts::PI)?;
        let heights = [0.5, 0.25, 0.125, 0.0625, 0.2, 0.1, 0.05];
        let mut worst: f64 = 0.0;
        for s in [0.3, 0.6, 0.9] {
            let spec = PoissonKernelSpec::new(1, s)?;
            for (_, u) in trace_inputs(&grid) {
                let slices = extend(&u, &heights, &spec)?;
                for p in [2.0, 3.0] {
                    let un = lp_norm(&u, p)?;
                    for slice in &slices.slices {
                        worst = worst.max(lp_norm(slice, p)? / un - 1.0);
                    }
                }
            }
        }
        check.require(
            worst <= 1e-3,
            format!("worst contraction excess {worst:.2e} (<= 1e-3)"),
        );
        Ok(check)
    })();
    finish(3, "extension contraction", None, start, result)
}

/// 4. Both forward solvers match dense linear solves on a 32^2 grid at
/// p = 2, A = I, to relative 1e-8.
fn criterion_4() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let mut check = Check::new();
        let grid = GridSpec::new(2, 32, 2.0 * std::f64::consts::PI)?;
        let mask = DomainMask::from_index_rect(grid.clone(), &[8, 8], &[24, 24])?;
        let a = AnisotropyField::identity(grid.clone(), 1)?;
        let s = 0.5;
        let opts = SolverOptions::with_tol(1e-11);

        let source = Field::from_fn_scalar(grid.clone(), |x| {
            (x[0] - 2.0).sin() * (2.0 * x[1]).cos()
        })?;
        let solver_u = solve_interior_source(&source, &mask, &a, s, 2.0, &opts)?.solution;
        let dense_u = oracle::dense_interior_source_solve(&source, &mask, s, None, 1.0)?;
        let err_src = lp_norm(&solver_u.sub(&dense_u)?, 2.0)? / lp_norm(&dense_u, 2.0)?;
        check.require(
            err_src <= 1e-8,
            format!("interior-source vs dense LU: {err_src:.2e} (<= 1e-8)"),
        );

        let datum = Field::from_fn_scalar(grid.clone(), |x| {
            (x[0]).cos() + 0.5 * (x[1] - 1.0).sin()
        })?;
        let solver_v = solve_exterior_value(&datum, &mask, &a, s, 2.0, &opts)?.solution;
        let dense_v = oracle::dense_exterior_value_solve(&datum, &mask, s, None, 1.0)?;
        let err_ext = lp_norm(&solver_v.sub(&dense_v)?, 2.0)? / lp_norm(&dense_v, 2.0)?;
        check.require(
            err_ext <= 1e-8,
            format!("exterior-value vs dense Schur: {err_ext:.2e} (<= 1e-8)"),
        );
        Ok(check)
    })();
    finish(4, "linear-case oracle equivalence", Some(30.0), start, result)
}

/// 5. Thm-style stability bound on 50 random draws and exact source
/// homogeneity.
fn criterion_5() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let mut check = Check::new();
        let grid = GridSpec::new(1, 64, 2.0 * std::f64::consts::PI)?;
        let mask = DomainMask::from_index_rect(grid.clone(), &[16], &[48])?;
        let opts = SolverOptions::with_tol(1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5AB1E);
        let mut violations = 0usize;
        let mut worst_ratio: f64 = 0.0;
        for k in 0..50 {
            let p = [1.5, 2.0, 3.0][k % 3];
            let s = rng.gen_range(0.3..1.2);
            let d1: f64 = rng.gen_range(0.5..2.0);
            let d2: f64 = rng.gen_range(0.5..2.0);
            let a = AnisotropyField::constant_diagonal(grid.clone(), &[d1, d2])?;
            let mut u0 = Field::zeros(grid.clone(), 2)?;
            for idx in 0..grid.num_points() {
                if !mask.is_interior(idx) {
                    u0.values_mut()[[idx, 0]] = rng.gen_range(-1.0..1.0);
                    u0.values_mut()[[idx, 1]] = rng.gen_range(-1.0..1.0);
                }
            }
            let report = solve_exterior_value(&u0, &mask, &a, s, p, &opts)?;
            let wu = fractional_laplacian(&report.solution, s, LaplacianOrder::Half)?;
            let w0 = fractional_laplacian(&mask.restrict_exterior(&u0), s, LaplacianOrder::Half)?;
            let bound = (a.big_lambda() / a.lambda()).powf(p) * lp_norm(&w0, p)?;
            let ratio = lp_norm(&wu, p)? / bound;
            worst_ratio = worst_ratio.max(ratio);
            if ratio > 1.0 + 1e-10 {
                violations += 1;
            }
        }
        check.require(
            violations == 0,
            format!("stability bound violations {violations}/50 (worst ratio {worst_ratio:.3})"),
        );

        let f = Field::from_fn_scalar(grid.clone(), |x| (x[0]).sin() + 0.3)?;
        let a1 = AnisotropyField::identity(grid, 1)?;
        let mut worst_hom: f64 = 0.0;
        for p in [1.5, 2.0, 3.0] {
            let u1 = solve_interior_source(&f, &mask, &a1, 0.5, p, &opts)?.solution;
            let u2 = solve_interior_source(&f.scale(2.0), &mask, &a1, 0.5, p, &opts)?.solution;
            let expected = u1.scale(2.0_f64.powf(1.0 / (p - 1.0)));
            let rel = lp_norm(&u2.sub(&expected)?, 2.0)? / lp_norm(&expected, 2.0)?;
            worst_hom = worst_hom.max(rel);
        }
        check.require(
            worst_hom <= 1e-8,
            format!("worst homogeneity defect {worst_hom:.2e} (<= 1e-8)"),
        );
        Ok(check)
    })();
    finish(5, "stability estimates", None, start, result)
}

/// 6. First eigenpair: dense-eigensolver match at p = 2, Euler-Lagrange
/// residuals, realized sharpness, domain monotonicity.
fn criterion_6() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let mut check = Check::new();
        let grid = GridSpec::new(1, 64, 2.0 * std::f64::consts::PI)?;
        let mask = DomainMask::from_index_rect(grid.clone(), &[16], &[48])?;
        let s = 0.5;
        let opts = PoincareOptions::with_tol(1e-9);

        let p2 = poincare_eigenpair(&mask, s, 2.0, &opts)?;
        let (eigs, _) = oracle::dense_interior_eigenpairs(&mask, s, 1)?;
        let rel = (p2.lambda1 - eigs[0]).abs() / eigs[0];
        check.require(
            rel <= 1e-6,
            format!("p=2 lambda_1 vs dense eigensolver: {rel:.2e} (<= 1e-6)"),
        );

        let mut worst_el: f64 = 0.0;
        let mut worst_sharp: f64 = 0.0;
        let mut worst_real: f64 = 0.0;
        for p in [1.5, 2.0, 3.0] {
            let r = poincare_eigenpair(&mask, s, p, &opts)?;
            worst_el = worst_el.max(r.euler_lagrange_residual);
            // sharpness: the minimizer attains ||u||_p = C* ||w||_p
            let w = fractional_laplacian(&r.minimizer, s, LaplacianOrder::Half)?;
            let attained = lp_norm(&r.minimizer, p)? / (r.c_star * lp_norm(&w, p)?);
            worst_sharp = worst_sharp.max((attained - 1.0).abs());
            // realized inequality on 100 random interior fields
            let mut rng = ChaCha8Rng::seed_from_u64(0x90C4 + p.to_bits() as u64 % 1000);
            for _ in 0..100 {
                let mut u = Field::zeros(grid.clone(), 1)?;
                for &idx in mask.interior_indices() {
                    u.values_mut()[[idx, 0]] = rng.gen_range(-1.0..1.0);
                }
                let w = fractional_laplacian(&u, s, LaplacianOrder::Half)?;
                let lhs = lp_norm(&u, p)?;
                let rhs = r.c_star * lp_norm(&w, p)? * (1.0 + 1e-8);
                worst_real = worst_real.max(lhs / rhs);
            }
        }
        check.require(
            worst_el <= 1e-6,
            format!("worst EL residual {worst_el:.2e} (<= 1e-6)"),
        );
        check.require(
            worst_sharp <= 1e-6,
            format!("sharpness defect {worst_sharp:.2e} (<= 1e-6)"),
        );
        check.require(
            worst_real <= 1.0,
            format!("realized Poincare max ratio {worst_real:.6} (<= 1)"),
        );

        let small = DomainMask::from_index_rect(grid.clone(), &[24], &[40])?;
        let lsmall = poincare_eigenpair(&small, s, 2.0, &opts)?;
        check.require(
            p2.lambda1 <= lsmall.lambda1 * (1.0 + 1e-9),
            format!(
                "domain monotonicity: lambda(large) {:.6} <= lambda(small) {:.6}",
                p2.lambda1, lsmall.lambda1
            ),
        );
        Ok(check)
    })();
    finish(6, "Poincare eigenpair", None, start, result)
}

/// 7. Finite-difference vs analytic energy gradient on 100 random
/// directions.
fn criterion_7() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let mut check = Check::new();
        let grid = GridSpec::new(1, 32, 2.0 * std::f64::consts::PI)?;
        let a = AnisotropyField::constant_diagonal(grid.clone(), &[1.0, 1.8])?;
        let s = 0.6;
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(0x6AAD);
        let mut worst: f64 = 0.0;
        for k in 0..100 {
            let p = [2.0, 3.0, 1.5][k % 3];
            let eps = if p < 2.0 { 1e-4 } else { 0.0 };
            let mut draw = || {
                let values = ndarray::Array2::from_shape_fn((grid.num_points(), 2), |_| {
                    rng.gen_range(-1.0..1.0)
                });
                Field::from_values(grid.clone(), values).unwrap()
            };
            let u = draw();
            let d = draw();
            let ep = p_energy_regularized(&u.add(&d.scale(h))?, &a, None, s, p, eps)?;
            let em = p_energy_regularized(&u.sub(&d.scale(h))?, &a, None, s, p, eps)?;
            let fd = (ep - em) / (2.0 * h);
            let an = if eps == 0.0 {
                weak_pairing(&u, &d, &a, s, p)?
            } else {
                // directional derivative of the regularized energy
                regularized_pairing(&u, &d, &a, s, p, eps)?
            };
            worst = worst.max((fd - an).abs() / an.abs().max(1e-300));
        }
        check.require(
            worst <= 1e-6,
            format!("worst gradient mismatch {worst:.2e} over 100 directions (<= 1e-6)"),
        );
        Ok(check)
    })();
    finish(7, "gradient checks", None, start, result)
}

fn regularized_pairing(
    u: &Field,
    v: &Field,
    a: &AnisotropyField,
    s: f64,
    p: f64,
    eps: f64,
) -> Result<f64> {
    // <dE_eps(u), v> computed through the regularized operator density
    let lu = crate::energy::apply_operator_regularized(u, a, None, s, p, eps)?;
    lu.inner(v)
}

/// 8. DN map properties: homogeneity exponent, quotient independence,
/// linear matrix symmetry and Schur-oracle match.
fn criterion_8() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let mut check = Check::new();
        let grid = GridSpec::new(2, 16, 2.0 * std::f64::consts::PI)?;
        let mask = DomainMask::from_index_rect(grid.clone(), &[4, 4], &[12, 12])?;
        let a = AnisotropyField::identity(grid.clone(), 1)?;

        // homogeneity slope across doublings
        let mut worst_slope: f64 = 0.0;
        for p in [1.5, 2.0, 3.0] {
            let ctx = DnContext::new(
                mask.clone(),
                a.clone(),
                None,
                0.5,
                p,
                SolverOptions::with_tol(1e-10),
            )?;
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut f = Field::zeros(grid.clone(), 1)?;
            for idx in 0..grid.num_points() {
                if !mask.is_interior(idx) {
                    f.values_mut()[[idx, 0]] = rng.gen_range(-1.0..1.0);
                }
            }
            let datum = ctx.datum(&f)?;
            let mut prev = dn_pair(&ctx, &datum, &datum)?;
            for k in 1..=3 {
                let val = dn_pair(&ctx, &datum.scale(2.0_f64.powi(k)), &datum)?;
                let slope = (val / prev).log2();
                worst_slope = worst_slope.max((slope - (p - 1.0)).abs());
                prev = val;
            }
        }
        check.require(
            worst_slope <= 1e-6,
            format!("worst homogeneity-slope defect {worst_slope:.2e} (<= 1e-6)"),
        );

        // quotient independence at documented slack
        let ctx2 = DnContext::new(
            mask.clone(),
            a.clone(),
            None,
            0.5,
            2.0,
            SolverOptions::with_tol(1e-11),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut f = Field::zeros(grid.clone(), 1)?;
        let mut g = Field::zeros(grid.clone(), 1)?;
        let mut phi = Field::zeros(grid.clone(), 1)?;
        for idx in 0..grid.num_points() {
            if !mask.is_interior(idx) {
                f.values_mut()[[idx, 0]] = rng.gen_range(-1.0..1.0);
                g.values_mut()[[idx, 0]] = rng.gen_range(-1.0..1.0);
            } else {
                phi.values_mut()[[idx, 0]] = rng.gen_range(-1.0..1.0);
            }
        }
        let fd = ctx2.datum(&f)?;
        let gd = ctx2.datum(&g)?;
        let dev = quotient_independence_check(&ctx2, &fd, &gd, &phi)?;
        let phinorm = lp_norm(&phi, 2.0)?;
        check.require(
            dev <= 1e-8 * phinorm.max(1.0),
            format!("quotient-independence deviation {dev:.2e} (<= 1e-8 x ||phi||)"),
        );

        // linear DN matrix: symmetry and Schur-complement oracle
        let sigma = ConformalCoefficient::new(
            grid.clone(),
            (0..grid.num_points())
                .map(|i| 1.0 + 0.4 * ((i as f64) * 0.13).sin().powi(2))
                .collect(),
            1.0,
        )?;
        let ctx3 = DnContext::new(
            mask.clone(),
            a,
            Some(sigma.clone()),
            0.5,
            2.0,
            SolverOptions::with_tol(1e-12),
        )?;
        let m = dn_matrix_linear(&ctx3)?;
        let asym = (&m - m.transpose()).abs().max();
        check.require(asym <= 1e-9, format!("matrix asymmetry {asym:.2e} (<= 1e-9)"));
        let schur = oracle::dense_dn_schur_complement(&mask, 0.5, Some(&sigma), 1.0)?;
        let scale = schur.abs().max();
        let diff = (&m - &schur).abs().max() / scale;
        check.require(
            diff <= 1e-8,
            format!("matrix vs Schur oracle {diff:.2e} relative (<= 1e-8)"),
        );
        Ok(check)
    })();
    finish(8, "DN map properties", None, start, result)
}

/// 9. Monotonicity sandwich on 100 random monotone instances plus the
/// constant-coefficient ratio anchor.
fn criterion_9() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let mut check = Check::new();
        let grid = GridSpec::new(1, 32, 2.0 * std::f64::consts::PI)?;
        let mask = DomainMask::from_index_rect(grid.clone(), &[8], &[24])?;
        let a = AnisotropyField::identity(grid.clone(), 1)?;
        let opts = SolverOptions::with_tol(1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5A2D);
        let mut violations = 0usize;
        let mut worst_defect: f64 = 0.0;
        for k in 0..100 {
            let p = [1.5, 2.0, 3.0][k % 3];
            let s = rng.gen_range(0.3..1.0);
            let base: f64 = rng.gen_range(0.5..1.5);
            let extra: f64 = rng.gen_range(0.05..1.0);
            let from = rng.gen_range(4..16);
            let to = rng.gen_range(from + 2..28);
            let sigma2 = ConformalCoefficient::constant(grid.clone(), base)?;
            let sigma1 = ConformalCoefficient::new(
                grid.clone(),
                (0..grid.num_points())
                    .map(|i| if i >= from && i < to { base + extra } else { base })
                    .collect(),
                base,
            )?;
            let mut f = Field::zeros(grid.clone(), 1)?;
            for idx in 0..grid.num_points() {
                if !mask.is_interior(idx) {
                    f.values_mut()[[idx, 0]] = rng.gen_range(-1.0..1.0);
                }
            }
            let u0 = TraceDatum::new(&mask, &f)?;
            let b = monotonicity_bounds(&u0, &sigma1, &sigma2, &a, &mask, s, p, &opts)?;
            let low_defect = b.lower - b.gap - b.slack;
            let high_defect = b.gap - b.upper - b.slack;
            worst_defect = worst_defect.max(low_defect.max(high_defect));
            if low_defect > 0.0 || high_defect > 0.0 {
                violations += 1;
            }
        }
        check.require(
            violations == 0,
            format!("sandwich violations {violations}/100 (worst defect {worst_defect:.2e})"),
        );

        // constant-coefficient anchor at p = 2: lower/upper = sigma2/sigma1
        let sigma1 = ConformalCoefficient::constant(grid.clone(), 2.0)?;
        let sigma2 = ConformalCoefficient::constant(grid.clone(), 1.0)?;
        let mut f = Field::zeros(grid.clone(), 1)?;
        for idx in 0..grid.num_points() {
            if !mask.is_interior(idx) {
                f.values_mut()[[idx, 0]] = ((idx as f64) * 0.7).sin();
            }
        }
        let u0 = TraceDatum::new(&mask, &f)?;
        let b = monotonicity_bounds(&u0, &sigma1, &sigma2, &a, &mask, 0.5, 2.0, &opts)?;
        let anchor_defect = (b.lower / b.upper - 0.5).abs();
        check.require(
            anchor_defect <= 1e-6,
            format!("constant-ratio anchor defect {anchor_defect:.2e} (<= 1e-6)"),
        );
        Ok(check)
    })();
    finish(9, "monotonicity sandwich", None, start, result)
}

/// 10. Inverse experiments: single-measurement detection and the
/// one-inclusion reconstruction on a 32^2 grid with 8 probes.
fn criterion_10() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let mut check = Check::new();
        let n = 32usize;
        let grid = GridSpec::new(2, n, 2.0 * std::f64::consts::PI)?;
        let mask = DomainMask::from_index_rect(grid.clone(), &[8, 8], &[24, 24])?;
        let a = AnisotropyField::identity(grid.clone(), 1)?;
        let opts = SolverOptions::with_tol(1e-9);
        let ring = |idx: usize| {
            let (i, j) = (idx / n, idx % n);
            !(6..26).contains(&i) || !(6..26).contains(&j)
        };
        let window: Vec<bool> = (0..n * n).map(ring).collect();
        let region = vec![true; n * n];
        let probes = window_probes(&grid, &mask, &window, 8, 1000);

        // single-measurement experiment
        let sigma_bg = ConformalCoefficient::constant(grid.clone(), 1.0)?;
        let sigma_inc = ConformalCoefficient::new(
            grid.clone(),
            (0..n * n)
                .map(|idx| {
                    let (i, j) = (idx / n, idx % n);
                    if (12..16).contains(&i) && (12..16).contains(&j) {
                        2.0
                    } else {
                        1.0
                    }
                })
                .collect(),
            1.0,
        )?;
        let same = single_measurement_experiment(
            &probes[0], &sigma_bg, &sigma_bg, &a, &mask, &region, &window, 0.5, 2.0, &opts,
        )?;
        check.require(
            same.verdict && same.bounds.gap.abs() <= same.bounds.slack,
            format!(
                "equal coefficients: gap {:.2e} within slack {:.2e}",
                same.bounds.gap, same.bounds.slack
            ),
        );
        let flagged = single_measurement_experiment(
            &probes[0], &sigma_inc, &sigma_bg, &a, &mask, &region, &window, 0.5, 2.0, &opts,
        )?;
        check.require(
            flagged.verdict && flagged.bounds.gap > flagged.bounds.slack,
            format!(
                "inclusion: gap {:.3e} exceeds threshold {:.3e} (slack {:.1e})",
                flagged.bounds.gap,
                flagged.blocks.iter().map(|b| b.threshold).sum::<f64>(),
                flagged.bounds.slack
            ),
        );

        // two disjoint exterior windows (left and right halves of the ring)
        // jointly cover the whole grid
        let window_l: Vec<bool> = (0..n * n).map(|idx| ring(idx) && idx % n < 16).collect();
        let window_r: Vec<bool> = (0..n * n).map(|idx| ring(idx) && idx % n >= 16).collect();
        let probe_l = window_probes(&grid, &mask, &window_l, 1, 4000);
        let probe_r = window_probes(&grid, &mask, &window_r, 1, 5000);
        let rep_l = single_measurement_experiment(
            &probe_l[0], &sigma_bg, &sigma_bg, &a, &mask, &region, &window_l, 0.5, 2.0, &opts,
        )?;
        let rep_r = single_measurement_experiment(
            &probe_r[0], &sigma_bg, &sigma_bg, &a, &mask, &region, &window_r, 0.5, 2.0, &opts,
        )?;
        let mut covered = vec![false; n * n];
        for &c in rep_l
            .conclusive_cells
            .iter()
            .chain(rep_r.conclusive_cells.iter())
        {
            covered[c] = true;
        }
        let uncovered = covered.iter().filter(|c| !**c).count();
        check.require(
            uncovered == 0,
            format!("two-window coverage: {uncovered} cells left uncovered"),
        );

        // reconstruction to 5% per block
        let oracle_sim = SimulatedOracle::new(
            mask.clone(),
            a.clone(),
            sigma_inc,
            0.5,
            2.0,
            opts.clone(),
            0.0,
            7,
        )?;
        let blocks: Vec<Vec<usize>> = (0..16)
            .map(|b| {
                let (bi, bj) = (b / 4, b % 4);
                let mut cells = Vec::new();
                for i in 8 + 4 * bi..12 + 4 * bi {
                    for j in 8 + 4 * bj..12 + 4 * bj {
                        cells.push(i * n + j);
                    }
                }
                cells
            })
            .collect();
        let cfg = ScanConfig {
            blocks,
            levels: vec![1.0, 1.05, 1.2, 1.45, 1.7, 1.9, 2.0, 2.2],
            sigma_floor: 1.0,
            sigma_cap: 2.5,
            background: 1.0,
            max_sweeps: 4,
            budget: 100_000,
            slack_factor: 10.0,
        };
        let est = reconstruct_sigma(&oracle_sim, &probes, &a, &mask, 0.5, 2.0, &cfg, &opts)?;
        let mut worst_err: f64 = 0.0;
        for b in &est.blocks {
            let truth = if b.block == 5 { 2.0 } else { 1.0 };
            worst_err = worst_err.max((b.estimate - truth).abs() / truth);
        }
        check.require(
            est.inconclusive.is_empty() && worst_err <= 0.05,
            format!(
                "reconstruction worst per-block error {:.2}% (<= 5%), {} solves",
                100.0 * worst_err,
                est.solves_used
            ),
        );
        Ok(check)
    })();
    finish(10, "inverse experiments", Some(600.0), start, result)
}

fn window_probes(
    grid: &GridSpec,
    mask: &DomainMask,
    window: &[bool],
    count: usize,
    seed_base: u64,
) -> Vec<TraceDatum> {
    (0..count as u64)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed_base + k);
            let mut f = Field::zeros(grid.clone(), 1).unwrap();
            for idx in 0..grid.num_points() {
                if window[idx] {
                    f.values_mut()[[idx, 0]] = rng.gen_range(-1.0..1.0);
                }
            }
            let smooth = bessel_potential(&f, -4.0);
            let mut g = Field::zeros(grid.clone(), 1).unwrap();
            for idx in 0..grid.num_points() {
                if window[idx] {
                    g.values_mut()[[idx, 0]] = smooth.values()[[idx, 0]];
                }
            }
            let norm = lp_norm(&g, 2.0).unwrap();
            TraceDatum::new(mask, &g.scale(1.0 / norm)).unwrap()
        })
        .collect()
}

/// 11. The general-beta lower bound is maximized at beta = p - 1 within the
/// scan resolution.
fn criterion_11() -> CriterionOutcome {
    let start = Instant::now();
    let result = (|| {
        let mut check = Check::new();
        let grid = GridSpec::new(1, 32, 2.0 * std::f64::consts::PI)?;
        let mask = DomainMask::from_index_rect(grid.clone(), &[8], &[24])?;
        let a = AnisotropyField::identity(grid.clone(), 1)?;
        let opts = SolverOptions::with_tol(1e-10);
        for p in [1.5, 2.0, 3.0] {
            // near-unit contrast keeps the pointwise optimum of the general
            // bound at the conjugate exponent
            let sigma1 = ConformalCoefficient::new(
                grid.clone(),
                (0..grid.num_points())
                    .map(|i| if (10..20).contains(&i) { 1.01 } else { 1.0 })
                    .collect(),
                1.0,
            )?;
            let sigma2 = ConformalCoefficient::constant(grid.clone(), 1.0)?;
            let mut f = Field::zeros(grid.clone(), 1)?;
            for idx in 0..grid.num_points() {
                if !mask.is_interior(idx) {
                    f.values_mut()[[idx, 0]] = ((idx as f64) * 0.9).cos();
                }
            }
            let u0 = TraceDatum::new(&mask, &f)?;
            let betas: Vec<f64> = (-4..=4).map(|k| (p - 1.0) + 0.05 * k as f64).collect();
            let scan =
                lower_bound_beta_scan(&u0, &sigma1, &sigma2, &a, &mask, 0.5, p, &betas, &opts)?;
            let best = scan
                .iter()
                .cloned()
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .expect("nonempty scan");
            check.require(
                (best.0 - (p - 1.0)).abs() < 1e-12,
                format!("p={p}: maximum at beta {:.3} (expect {:.3})", best.0, p - 1.0),
            );
        }
        Ok(check)
    })();
    finish(11, "beta optimality", None, start, result)
}
