//! Configuration-driven command line tying the laboratory together:
//! forward solves, the Poincare eigenpair, DN maps, the harmonic extension
//! with its weighted normal trace, monotonicity-scan inversion, and the
//! verification suite.
//!
//! Every run writes a manifest echoing the resolved configuration (plus
//! artifact version, seed and thread count) next to the result files, so
//! identical configs and seeds reproduce bit-identical manifests. Exit
//! codes: 0 success, 1 numerical failure, 2 configuration error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use config::ExperimentConfig;
use fraclab_core::dnmap::{dn_matrix_linear, dn_pair, DnContext, TraceDatum};
use fraclab_core::extension::{extend, normal_trace, PoissonKernelSpec};
use fraclab_core::grid::{fractional_laplacian, lp_norm, Field, LaplacianOrder};
use fraclab_core::inverse::{reconstruct_sigma, ScanConfig, SimulatedOracle};
use fraclab_core::io;
use fraclab_core::poincare::{poincare_eigenpair, PoincareOptions};
use fraclab_core::solver::{solve_exterior_value_weighted, solve_interior_source_weighted};
use fraclab_core::CoreError;

#[derive(Parser)]
#[command(name = "fraclab", version, about = "numerical laboratory for nonlocal p-type operators")]
struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (one directory per run).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Fixed thread count for reproducible parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed override for randomized components.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Solver tolerance override.
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the interior-source or exterior-value problem.
    Forward,
    /// Compute the optimal Poincare constant and first eigenpair.
    Poincare,
    /// Evaluate the DN pairing and, for p = 2, the dense DN matrix.
    Dn,
    /// Extend a field to the upper half space; optionally estimate the
    /// weighted normal trace.
    Extend,
    /// Reconstruct a conformal coefficient by monotonicity scanning.
    Invert,
    /// Run the verification suite and print a pass/fail table.
    Verify {
        /// Re-fit the elementary monotonicity constants and print them.
        #[arg(long)]
        fit_cp: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_err()
        {
            eprintln!("warning: thread pool already initialized");
        }
    }
    match run(&cli) {
        Ok(code) => code,
        Err(err) => {
            // numerical failures -> 1, everything else (config, io) -> 2
            let numerical = err
                .downcast_ref::<CoreError>()
                .map(|e| matches!(e, CoreError::NoConvergence { .. } | CoreError::BudgetExhausted { .. }))
                .unwrap_or(false);
            eprintln!("error: {err:#}");
            if numerical {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    if let Command::Verify { fit_cp } = &cli.command {
        if *fit_cp {
            for p in [1.5, 2.0, 3.0, 4.0] {
                let fitted = fraclab_core::energy::fit_monotonicity_constant(p, 100_000, 1234);
                let shipped = fraclab_core::energy::fitted_monotonicity_constant(p);
                println!("c_p fit p={p}: scanned minimum {fitted:.6}, shipped constant {shipped:.6}");
            }
        }
    }
    let config_path = cli
        .config
        .as_ref()
        .context("--config is required")?;
    let config = ExperimentConfig::load(config_path)?;
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("cannot create output directory {}", cli.out.display()))?;
    write_manifest(cli, &config)?;
    match &cli.command {
        Command::Forward => cmd_forward(cli, &config),
        Command::Poincare => cmd_poincare(cli, &config),
        Command::Dn => cmd_dn(cli, &config),
        Command::Extend => cmd_extend(cli, &config),
        Command::Invert => cmd_invert(cli, &config),
        Command::Verify { .. } => cmd_verify(cli, &config),
    }
}

fn write_manifest(cli: &Cli, config: &ExperimentConfig) -> Result<()> {
    let manifest = json!({
        "artifact": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "overrides": {
            "seed": cli.seed,
            "tol": cli.tol,
            "threads": cli.threads,
        },
    });
    let path = cli.out.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn write_result(out: &Path, value: &serde_json::Value) -> Result<()> {
    let path = out.join("result.json");
    std::fs::write(&path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn cmd_forward(cli: &Cli, config: &ExperimentConfig) -> Result<ExitCode> {
    let section = config
        .forward
        .as_ref()
        .context("config needs a [forward] section")?;
    let mask = config.mask()?;
    let a = config.anisotropy()?;
    let sigma = config.sigma()?;
    let opts = config.solver_options(cli.tol);
    let s = config.problem.s;
    let p = config.problem.p;
    let data = config.build_data(&section.data, a.components(), Some(&mask))?;

    let report = match section.problem.as_str() {
        "interior-source" => {
            solve_interior_source_weighted(&data, &mask, &a, sigma.as_ref(), s, p, &opts)?
        }
        "exterior-value" => {
            solve_exterior_value_weighted(&data, &mask, &a, sigma.as_ref(), s, p, &opts)?
        }
        other => bail!("unknown forward problem '{other}' (use interior-source or exterior-value)"),
    };

    io::write_field(&cli.out.join("solution.bin"), &report.solution)?;
    write_result(
        &cli.out,
        &json!({
            "problem": section.problem,
            "final_energy": report.final_energy,
            "gradient_norm": report.gradient_norm,
            "weak_residual": report.weak_residual,
            "iterations": report.iterations,
            "epsilon_used": report.epsilon_used,
            "converged": report.converged,
            "wall_time_s": report.wall_time_s,
            "solution_file": "solution.bin",
            "tol": opts.tol,
            "eps_schedule": opts.eps_schedule,
        }),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_poincare(cli: &Cli, config: &ExperimentConfig) -> Result<ExitCode> {
    let section = config.poincare.clone().unwrap_or_default();
    let mask = config.mask()?;
    let mut opts = PoincareOptions::with_tol(section.tol);
    opts.restarts = section.restarts;
    opts.seeds = section.seeds.clone();
    if let Some(seed) = cli.seed {
        opts.seeds = (0..opts.restarts as u64).map(|k| seed + k).collect();
    }
    let result = poincare_eigenpair(&mask, config.problem.s, config.problem.p, &opts)?;
    io::write_field(&cli.out.join("minimizer.bin"), &result.minimizer)?;
    write_result(
        &cli.out,
        &json!({
            "lambda1": result.lambda1,
            "c_star": result.c_star,
            "euler_lagrange_residual": result.euler_lagrange_residual,
            "restarts": result.restart_values,
            "iterations": result.iterations,
            "minimizer_file": "minimizer.bin",
        }),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_dn(cli: &Cli, config: &ExperimentConfig) -> Result<ExitCode> {
    let section = config.dn.as_ref().context("config needs a [dn] section")?;
    let mask = config.mask()?;
    let a = config.anisotropy()?;
    let sigma = config.sigma()?;
    let opts = config.solver_options(cli.tol);
    let ctx = DnContext::new(
        mask.clone(),
        a,
        sigma,
        config.problem.s,
        config.problem.p,
        opts.clone(),
    )?;

    let mut result = json!({
        "s": config.problem.s,
        "p": config.problem.p,
        "tol": opts.tol,
        "eps_schedule": opts.eps_schedule,
    });
    if let Some(spec) = &section.datum {
        let field = config.build_data(spec, ctx.anisotropy().components(), Some(&mask))?;
        let datum = TraceDatum::new(&mask, &field)?;
        let value = dn_pair(&ctx, &datum, &datum)?;
        let residual = ctx.solve(&datum)?.weak_residual;
        result["pairing"] = json!({ "value": value, "solver_residual": residual });
    }
    if section.matrix {
        let matrix = dn_matrix_linear(&ctx)?;
        io::write_matrix_csv(&cli.out.join("dn_matrix.csv"), &matrix)?;
        let asym = (&matrix - matrix.transpose()).abs().max();
        result["matrix"] = json!({
            "file": "dn_matrix.csv",
            "dofs": matrix.nrows(),
            "asymmetry": asym,
        });
    }
    write_result(&cli.out, &result)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_extend(cli: &Cli, config: &ExperimentConfig) -> Result<ExitCode> {
    let section = config
        .extend
        .as_ref()
        .context("config needs an [extend] section")?;
    let spec = PoissonKernelSpec::new(config.grid.n, config.problem.s)?;
    let input = config.build_data(&section.input, 1, None)?;
    let heights: Vec<f64> = (0..section.levels)
        .map(|j| section.y0 * section.ratio.powi(j as i32))
        .collect();
    let slices = extend(&input, &heights, &spec)?;
    io::write_slices(&cli.out.join("slices.bin"), &slices)?;
    let mut result = json!({
        "heights": heights,
        "support_warning": slices.support_warning,
        "tail_mass": slices.tail_mass,
        "slices_file": "slices.bin",
    });
    if section.trace {
        let (trace, calibration) = normal_trace(&slices, &spec)?;
        let target = fractional_laplacian(&input, config.problem.s, LaplacianOrder::Full)?;
        let err = lp_norm(&trace.scale(calibration).sub(&target)?, 2.0)? / lp_norm(&target, 2.0)?;
        io::write_field(&cli.out.join("trace.bin"), &trace)?;
        result["trace"] = json!({
            "file": "trace.bin",
            "calibration": calibration,
            "relative_l2_error_vs_spectral": err,
        });
    }
    write_result(&cli.out, &result)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_invert(cli: &Cli, config: &ExperimentConfig) -> Result<ExitCode> {
    let section = config
        .invert
        .as_ref()
        .context("config needs an [invert] section")?;
    let grid = config.grid()?;
    let mask = config.mask()?;
    let a = config.anisotropy()?;
    let opts = config.solver_options(cli.tol);
    let s = config.problem.s;
    let p = config.problem.p;
    let n = grid.points_per_axis();

    // ground truth for the simulated oracle
    let mut truth = vec![section.sigma_true.background; grid.num_points()];
    for inclusion in &section.sigma_true.inclusions {
        for idx in rect_cells(&inclusion.rect, grid.dim(), n)? {
            truth[idx] = inclusion.value;
        }
    }
    let sigma_true = fraclab_core::energy::ConformalCoefficient::new(
        grid.clone(),
        truth,
        section.floor.min(section.sigma_true.background),
    )?;
    let oracle = SimulatedOracle::new(
        mask.clone(),
        a.clone(),
        sigma_true,
        s,
        p,
        opts.clone(),
        section.noise,
        section.noise_seed,
    )?;

    // probes: smoothed seeded noise supported in the window
    let mut window = vec![false; grid.num_points()];
    for rect in &section.window {
        for idx in rect_cells(rect, grid.dim(), n)? {
            window[idx] = true;
        }
    }
    if window
        .iter()
        .enumerate()
        .any(|(idx, w)| *w && mask.is_interior(idx))
    {
        bail!("[invert] window must lie in the exterior");
    }
    let probe_seed = cli.seed.unwrap_or(section.probe_seed);
    let probes = make_probes(&grid, &mask, &window, section.probes, probe_seed)?;

    // blocks tiling the interior
    let blocks = tile_interior(&mask, section.block)?;
    let cfg = ScanConfig {
        blocks,
        levels: section.levels.clone(),
        sigma_floor: section.floor,
        sigma_cap: section.cap,
        background: section.background,
        max_sweeps: section.sweeps,
        budget: section.budget,
        slack_factor: 10.0,
    };
    let estimate = reconstruct_sigma(&oracle, &probes, &a, &mask, s, p, &cfg, &opts)?;

    io::write_field(&cli.out.join("sigma_estimate.bin"), &estimate.field)?;
    let mut ledger = String::from("block,level,family,lower,gap,upper,slack,verdict\n");
    for d in &estimate.decisions {
        ledger.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            d.block, d.level, d.family, d.lower, d.gap, d.upper, d.slack, d.verdict
        ));
    }
    std::fs::write(cli.out.join("decisions.csv"), ledger)?;
    write_result(
        &cli.out,
        &json!({
            "blocks": estimate.blocks,
            "inconclusive": estimate.inconclusive,
            "solves_used": estimate.solves_used,
            "probe_seed": probe_seed,
            "noise": section.noise,
            "noise_seed": section.noise_seed,
            "estimate_file": "sigma_estimate.bin",
            "decision_ledger": "decisions.csv",
        }),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn rect_cells(rect: &config::RectSpec, dim: usize, n: usize) -> Result<Vec<usize>> {
    if rect.lo.len() != dim || rect.hi.len() != dim {
        bail!("rectangle dimension mismatch");
    }
    if rect.lo.iter().zip(&rect.hi).any(|(l, h)| l >= h) || rect.hi.iter().any(|h| *h > n) {
        bail!("invalid rectangle {:?}..{:?}", rect.lo, rect.hi);
    }
    let mut cells = Vec::new();
    match dim {
        1 => cells.extend(rect.lo[0]..rect.hi[0]),
        2 => {
            for i in rect.lo[0]..rect.hi[0] {
                for j in rect.lo[1]..rect.hi[1] {
                    cells.push(i * n + j);
                }
            }
        }
        _ => bail!("unsupported dimension {dim}"),
    }
    Ok(cells)
}

fn make_probes(
    grid: &fraclab_core::GridSpec,
    mask: &fraclab_core::solver::DomainMask,
    window: &[bool],
    count: usize,
    seed: u64,
) -> Result<Vec<TraceDatum>> {
    use rand::{Rng, SeedableRng};
    let mut probes = Vec::with_capacity(count);
    for k in 0..count as u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + k);
        let mut f = Field::zeros(grid.clone(), 1)?;
        for idx in 0..grid.num_points() {
            if window[idx] {
                f.values_mut()[[idx, 0]] = rng.gen_range(-1.0..1.0);
            }
        }
        let smooth = fraclab_core::grid::bessel_potential(&f, -4.0);
        let mut g = Field::zeros(grid.clone(), 1)?;
        for idx in 0..grid.num_points() {
            if window[idx] {
                g.values_mut()[[idx, 0]] = smooth.values()[[idx, 0]];
            }
        }
        let norm = lp_norm(&g, 2.0)?;
        if norm == 0.0 {
            bail!("probe {k} vanished; enlarge the window");
        }
        probes.push(TraceDatum::new(mask, &g.scale(1.0 / norm))?);
    }
    Ok(probes)
}

fn tile_interior(
    mask: &fraclab_core::solver::DomainMask,
    block: usize,
) -> Result<Vec<Vec<usize>>> {
    if block == 0 {
        bail!("[invert] block size must be positive");
    }
    let grid = mask.grid();
    let n = grid.points_per_axis();
    let mut assigned = std::collections::BTreeMap::<(usize, usize), Vec<usize>>::new();
    for &idx in mask.interior_indices() {
        let key = match grid.dim() {
            1 => (idx / block, 0),
            2 => ((idx / n) / block, (idx % n) / block),
            _ => bail!("unsupported dimension"),
        };
        assigned.entry(key).or_default().push(idx);
    }
    Ok(assigned.into_values().collect())
}

fn cmd_verify(cli: &Cli, config: &ExperimentConfig) -> Result<ExitCode> {
    let section = config.verify.clone().unwrap_or_default();
    let ids: Vec<usize> = if section.criteria.is_empty() {
        (1..=11).collect()
    } else {
        section.criteria.clone()
    };
    let mut outcomes = Vec::new();
    let mut all_passed = true;
    for id in ids {
        let outcome = fraclab_core::acceptance::run_criterion(id);
        println!("{}", outcome.table_line());
        all_passed &= outcome.passed;
        outcomes.push(outcome);
    }
    write_result(
        &cli.out,
        &serde_json::to_value(&outcomes).context("serialize verify outcomes")?,
    )?;
    if all_passed {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}
