//! Experiment configuration: a TOML file with nested sections, parsed
//! totally up front so malformed input fails with a line/field diagnostic
//! before any computation starts.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use fraclab_core::energy::{AnisotropyField, ConformalCoefficient};
use fraclab_core::grid::{bessel_potential, lp_norm, Field, GridSpec};
use fraclab_core::io;
use fraclab_core::solver::{DomainMask, SolverOptions};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridSection,
    pub mask: Option<MaskSection>,
    pub problem: ProblemSection,
    #[serde(default)]
    pub anisotropy: AnisotropySection,
    pub sigma: Option<SigmaSection>,
    #[serde(default)]
    pub solver: SolverSection,
    pub forward: Option<ForwardSection>,
    pub poincare: Option<PoincareSection>,
    pub dn: Option<DnSection>,
    pub extend: Option<ExtendSection>,
    pub invert: Option<InvertSection>,
    pub verify: Option<VerifySection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n: usize,
    pub points: usize,
    pub period: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSection {
    /// Interior = union of half-open index boxes.
    #[serde(default)]
    pub rects: Vec<RectSpec>,
    /// Alternatively a field file; interior where the value exceeds 1/2.
    pub bitmap: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectSpec {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub s: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnisotropySection {
    pub kind: String,
    pub components: usize,
    pub value: f64,
    pub diagonal: Vec<f64>,
    pub file: Option<PathBuf>,
}

impl Default for AnisotropySection {
    fn default() -> Self {
        Self {
            kind: "identity".into(),
            components: 1,
            value: 1.0,
            diagonal: vec![],
            file: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaSection {
    pub kind: String,
    #[serde(default = "one")]
    pub value: f64,
    #[serde(default = "one")]
    pub floor: f64,
    pub file: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub tol: f64,
    /// 0 keeps the default budget of 10 N^n iterations.
    pub max_iterations: usize,
    pub eps_schedule: Vec<f64>,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iterations: 0,
            eps_schedule: vec![1e-2, 1e-4, 1e-6],
        }
    }
}

/// Synthesized or file-backed field data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub kind: String,
    #[serde(default)]
    pub wave: Vec<i64>,
    #[serde(default)]
    pub center: Vec<f64>,
    #[serde(default = "one")]
    pub width: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default)]
    pub component: usize,
    #[serde(default)]
    pub seed: u64,
    /// Smoothing order for random data (negative Bessel order).
    #[serde(default = "default_smooth")]
    pub smooth: f64,
    pub file: Option<PathBuf>,
}

fn default_smooth() -> f64 {
    4.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardSection {
    /// "interior-source" or "exterior-value".
    pub problem: String,
    pub data: DataSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoincareSection {
    pub restarts: usize,
    pub seeds: Vec<u64>,
    pub tol: f64,
}

impl Default for PoincareSection {
    fn default() -> Self {
        Self {
            restarts: 5,
            seeds: vec![],
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnSection {
    /// Assemble the dense exterior DN matrix (p = 2 only).
    #[serde(default)]
    pub matrix: bool,
    /// Optional datum to pair with itself.
    pub datum: Option<DataSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtendSection {
    pub input: DataSpec,
    #[serde(default = "default_y0")]
    pub y0: f64,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Also estimate the weighted normal trace and its calibration.
    #[serde(default)]
    pub trace: bool,
}

fn default_y0() -> f64 {
    0.5
}

fn default_ratio() -> f64 {
    0.5
}

fn default_levels() -> usize {
    6
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertSection {
    /// Exterior window carrying the probes.
    pub window: Vec<RectSpec>,
    pub probes: usize,
    #[serde(default = "default_probe_seed")]
    pub probe_seed: u64,
    /// Ground truth for the simulated measurement oracle.
    pub sigma_true: SigmaTrueSpec,
    pub levels: Vec<f64>,
    pub floor: f64,
    pub cap: f64,
    #[serde(default = "one")]
    pub background: f64,
    /// Square block size tiling the interior.
    pub block: usize,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_sweeps")]
    pub sweeps: usize,
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_noise_seed")]
    pub noise_seed: u64,
}

fn default_probe_seed() -> u64 {
    1000
}

fn default_budget() -> usize {
    1_000_000
}

fn default_sweeps() -> usize {
    4
}

fn default_noise_seed() -> u64 {
    7
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaTrueSpec {
    pub background: f64,
    #[serde(default)]
    pub inclusions: Vec<InclusionSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InclusionSpec {
    pub rect: RectSpec,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// Criterion ids to run; empty = all.
    pub criteria: Vec<usize>,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { criteria: vec![] }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let config: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        Ok(config)
    }

    pub fn grid(&self) -> Result<GridSpec> {
        Ok(GridSpec::new(
            self.grid.n,
            self.grid.points,
            self.grid.period,
        )?)
    }

    pub fn mask(&self) -> Result<DomainMask> {
        let grid = self.grid()?;
        let section = self
            .mask
            .as_ref()
            .context("config needs a [mask] section for this command")?;
        if let Some(bitmap) = &section.bitmap {
            let field = io::read_field(bitmap)?;
            if field.grid() != &grid {
                bail!("mask bitmap grid does not match [grid]");
            }
            let interior = (0..grid.num_points())
                .map(|idx| field.values()[[idx, 0]] > 0.5)
                .collect();
            return Ok(DomainMask::new(grid, interior)?);
        }
        if section.rects.is_empty() {
            bail!("[mask] needs rects or a bitmap");
        }
        let rects: Vec<(Vec<usize>, Vec<usize>)> = section
            .rects
            .iter()
            .map(|r| (r.lo.clone(), r.hi.clone()))
            .collect();
        Ok(DomainMask::from_index_rects(grid, &rects)?)
    }

    pub fn anisotropy(&self) -> Result<AnisotropyField> {
        let grid = self.grid()?;
        let a = &self.anisotropy;
        Ok(match a.kind.as_str() {
            "identity" => AnisotropyField::identity(grid, a.components)?,
            "scalar" => AnisotropyField::constant_scalar(grid, a.components, a.value)?,
            "diagonal" => AnisotropyField::constant_diagonal(grid, &a.diagonal)?,
            "file" => {
                let path = a
                    .file
                    .as_ref()
                    .context("[anisotropy] kind = \"file\" needs file")?;
                let field = io::read_field(path)?;
                if field.grid() != &grid {
                    bail!("anisotropy file grid does not match [grid]");
                }
                let m = a.components;
                if field.components() != m * m {
                    bail!(
                        "anisotropy file carries {} components, expected m*m = {}",
                        field.components(),
                        m * m
                    );
                }
                let raw: Vec<f64> = field.values().iter().cloned().collect();
                AnisotropyField::from_matrices(grid, m, &raw)?
            }
            other => bail!("unknown anisotropy kind '{other}'"),
        })
    }

    pub fn sigma(&self) -> Result<Option<ConformalCoefficient>> {
        let Some(section) = &self.sigma else {
            return Ok(None);
        };
        let grid = self.grid()?;
        Ok(Some(match section.kind.as_str() {
            "constant" => ConformalCoefficient::constant(grid, section.value)?,
            "file" => {
                let path = section
                    .file
                    .as_ref()
                    .context("[sigma] kind = \"file\" needs file")?;
                let field = io::read_field(path)?;
                if field.grid() != &grid {
                    bail!("sigma file grid does not match [grid]");
                }
                let values = field.values().column(0).to_vec();
                ConformalCoefficient::new(grid, values, section.floor)?
            }
            other => bail!("unknown sigma kind '{other}'"),
        }))
    }

    pub fn solver_options(&self, tol_override: Option<f64>) -> SolverOptions {
        let mut opts = SolverOptions::with_tol(tol_override.unwrap_or(self.solver.tol));
        if self.solver.max_iterations > 0 {
            opts.max_iterations = Some(self.solver.max_iterations);
        }
        opts.eps_schedule = self.solver.eps_schedule.clone();
        opts
    }

    /// Materialize a data spec on the grid with `m` components.
    pub fn build_data(&self, spec: &DataSpec, m: usize, mask: Option<&DomainMask>) -> Result<Field> {
        let grid = self.grid()?;
        let field = match spec.kind.as_str() {
            "zeros" => Field::zeros(grid, m)?,
            "cosine" => {
                if spec.wave.len() != grid.dim() {
                    bail!("cosine wave vector must have {} entries", grid.dim());
                }
                let wave = spec.wave.clone();
                let amplitude = spec.amplitude;
                let base = Field::from_fn_scalar(grid.clone(), move |x| {
                    let phase: f64 = x
                        .iter()
                        .zip(&wave)
                        .map(|(xi, k)| *k as f64 * xi)
                        .sum();
                    amplitude * phase.cos()
                })?;
                embed_component(base, m, spec.component)?
            }
            "gaussian" => {
                if spec.center.len() != grid.dim() {
                    bail!("gaussian center must have {} entries", grid.dim());
                }
                let center = spec.center.clone();
                let width = spec.width;
                let amplitude = spec.amplitude;
                let base = Field::from_fn_scalar(grid.clone(), move |x| {
                    let d2: f64 = x
                        .iter()
                        .zip(&center)
                        .map(|(xi, c)| (xi - c) * (xi - c))
                        .sum();
                    amplitude * (-d2 / (2.0 * width * width)).exp()
                })?;
                embed_component(base, m, spec.component)?
            }
            "random-exterior" => {
                let mask = mask.context("random-exterior data needs a mask")?;
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
                let mut f = Field::zeros(grid.clone(), m)?;
                for idx in 0..grid.num_points() {
                    if !mask.is_interior(idx) {
                        for c in 0..m {
                            f.values_mut()[[idx, c]] = rng.gen_range(-1.0..1.0);
                        }
                    }
                }
                let smooth = bessel_potential(&f, -spec.smooth);
                let mut g = mask.restrict_exterior(&smooth);
                let norm = lp_norm(&g, 2.0)?;
                if norm > 0.0 {
                    g = g.scale(spec.amplitude / norm);
                }
                g
            }
            "file" => {
                let path = spec.file.as_ref().context("data kind \"file\" needs file")?;
                let field = io::read_field(path)?;
                if field.grid() != &grid {
                    bail!("data file grid does not match [grid]");
                }
                field
            }
            other => bail!("unknown data kind '{other}'"),
        };
        if field.components() != m {
            bail!(
                "data has {} components, the problem needs {}",
                field.components(),
                m
            );
        }
        Ok(field)
    }
}

fn embed_component(base: Field, m: usize, component: usize) -> Result<Field> {
    if component >= m {
        bail!("component {component} out of range for m = {m}");
    }
    if m == 1 {
        return Ok(base);
    }
    let grid = base.grid().clone();
    let mut out = Field::zeros(grid, m)?;
    for idx in 0..out.grid().num_points() {
        out.values_mut()[[idx, component]] = base.values()[[idx, 0]];
    }
    Ok(out)
}
