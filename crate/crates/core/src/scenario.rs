//! Scenario configuration, embedded presets and run orchestration.
//!
//! Configs are TOML. A file names its `kind`; the matching preset is loaded
//! first and the file's keys are merged over it, so `kind = "corner3d"` alone
//! is a complete config.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{RMatrixPath, RMode, TrajectoryPath};
use crate::costs::{
    cost_curvature_mismatch, cost_max_displacement, cost_width_freq, project_trajectory, CornerLimits, ParamLayout,
    ShuttleProblem, SqueezeLimits, TaperedTrap,
};
use crate::error::{Error, Result};
use crate::gaussian::{fidelity, ground_state, phonon_number, propagate, GaussianState, StateTrajectory};
use crate::invariant::{build_protocol, BoundarySpec, Protocol, ProtocolSample};
use crate::matops::SymMatrix;
use crate::optimize::{minimize, CostReport, MinimizeOptions, MinimizeStatus, TraceRow};

/// Built-in presets as `(name, toml)`.
pub const PRESETS: &[(&str, &str)] = &[
    ("corner3d", include_str!("../presets/corner3d.toml")),
    ("squeeze1d", include_str!("../presets/squeeze1d.toml")),
    ("tapered2d", include_str!("../presets/tapered2d.toml")),
    ("custom", include_str!("../presets/custom.toml")),
];

/// Smallest accepted grid (intervals).
pub const MIN_GRID: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Corner3d,
    Squeeze1d,
    Tapered2d,
    Custom,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Corner3d => "corner3d",
            ScenarioKind::Squeeze1d => "squeeze1d",
            ScenarioKind::Tapered2d => "tapered2d",
            ScenarioKind::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    /// Functions per trajectory component.
    pub trajectory_functions: usize,
    /// Functions per independent degree of freedom of `R`.
    pub r_functions: usize,
    #[serde(default)]
    pub r_mode: RMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    /// Grid intervals used inside the optimization loop.
    pub grid: usize,
    /// corner3d: optimize the `p`-mean of the displacement instead of its maximum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_exponent: Option<f64>,
    /// corner3d: smallest admissible eigenvalue of `R`, as a fraction of the
    /// smallest boundary eigenvalue.
    #[serde(default = "default_floor")]
    pub r_floor_fraction: f64,
    /// corner3d: slack demanded of the curvature ordering during the search, in
    /// units of the cap.
    #[serde(default = "default_margin")]
    pub ordering_margin: f64,
}

fn default_floor() -> f64 {
    0.3
}

fn default_margin() -> f64 {
    0.002
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub enabled: bool,
    #[serde(default = "default_evals")]
    pub max_evals: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_step")]
    pub initial_step: f64,
    /// Multiplies the baseline objective to give the initial penalty weight.
    #[serde(default = "default_weight")]
    pub penalty_weight: f64,
    /// Smaller function counts optimized first, each warm-starting the next.
    #[serde(default)]
    pub continuation: Vec<usize>,
    /// Corner only: search paths symmetric under swapping the first two axes
    /// together with time reversal.
    #[serde(default)]
    pub mirror_symmetry: bool,
}

fn default_evals() -> usize {
    20_000
}
fn default_restarts() -> usize {
    8
}
fn default_step() -> f64 {
    0.05
}
fn default_weight() -> f64 {
    1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Protocol grid intervals for export and propagation.
    pub grid: usize,
    /// RK4 steps; defaults to `grid`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub min_fidelity: f64,
    /// Largest allowed `omega_max * dt`; the grid is doubled until it holds.
    /// RK4 does not conserve purity, and the drift only falls below 1e-8 near 0.05.
    #[serde(default = "default_phase_step")]
    pub max_phase_step: f64,
}

fn default_phase_step() -> f64 {
    0.05
}

impl VerifyConfig {
    pub fn steps(&self) -> usize {
        self.steps.unwrap_or(self.grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CornerConfig {
    pub omega_t: f64,
    pub omega_r: f64,
    pub duration: f64,
    pub r: f64,
    pub h: f64,
    pub h_prime: f64,
    /// Cap on the smaller transverse curvature, in units of `omega_r²`.
    pub cap_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SqueezeConfig {
    pub omega0: f64,
    pub duration: f64,
    pub alpha: f64,
    pub outer_factor: f64,
    pub central_factor: f64,
    /// Slow-down factor for the replay of the optimized frequency profile.
    pub replay_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaperedConfig {
    pub omega_x: f64,
    pub omega_y: f64,
    pub y_c: f64,
    pub y_i: f64,
    pub y_f: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomBoundary {
    pub duration: f64,
    pub c0: Vec<f64>,
    pub ct: Vec<f64>,
    pub m0: Vec<Vec<f64>>,
    pub mt: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub midpoint: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub mass: f64,
    pub basis: BasisConfig,
    pub cost: CostConfig,
    pub optimizer: OptimizerConfig,
    pub verify: VerifyConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corner: Option<CornerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub squeeze: Option<SqueezeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tapered: Option<TaperedConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<CustomBoundary>,
}

fn invalid(field: &str, message: impl Into<String>) -> Error {
    Error::validation(field, message)
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive and finite, got {v}")))
    }
}

fn finite(field: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, "must be finite"))
    }
}

/// Recursively overlays `over` onto `base`.
pub fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn preset_table(name: &str) -> Result<toml::Table> {
    let text = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            invalid("kind", format!("unknown kind `{name}` (expected one of {})", names.join(", ")))
        })?;
    text.parse::<toml::Table>().map_err(|e| Error::Parse(e.to_string()))
}

/// Resolves `kind`, merges the preset underneath and validates.
pub fn config_from_table(table: toml::Table) -> Result<ScenarioConfig> {
    let kind = match table.get("kind") {
        None => return Err(invalid("kind", "required")),
        Some(toml::Value::String(s)) => s.clone(),
        Some(_) => return Err(invalid("kind", "must be a string")),
    };
    let mut merged = preset_table(&kind)?;
    merge_tables(&mut merged, table);
    let cfg: ScenarioConfig = serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| {
        let path = e.path().to_string();
        Error::Validation {
            field: if path == "." { String::new() } else { path },
            message: e.into_inner().to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let table = text.parse::<toml::Table>().map_err(|e| Error::Parse(e.to_string()))?;
    config_from_table(table)
}

/// Reads, merges and validates a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

impl ScenarioConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut t = toml::Table::new();
        t.insert("kind".into(), toml::Value::String(name.into()));
        config_from_table(t)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        positive("mass", self.mass)?;
        if self.cost.grid < MIN_GRID {
            return Err(invalid("cost.grid", format!("must be at least {MIN_GRID}")));
        }
        if self.verify.grid < MIN_GRID {
            return Err(invalid("verify.grid", format!("must be at least {MIN_GRID}")));
        }
        positive("verify.max_phase_step", self.verify.max_phase_step)?;
        if self.verify.steps() < self.verify.grid {
            return Err(invalid("verify.steps", "must not be smaller than verify.grid"));
        }
        if !(self.verify.min_fidelity > 0.0 && self.verify.min_fidelity <= 1.0) {
            return Err(invalid("verify.min_fidelity", "must lie in (0, 1]"));
        }
        if let Some(p) = self.cost.soft_exponent {
            if !(p.is_finite() && p >= 1.0) {
                return Err(invalid("cost.soft_exponent", "must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.cost.r_floor_fraction) {
            return Err(invalid("cost.r_floor_fraction", "must lie in [0, 1)"));
        }
        positive("optimizer.initial_step", self.optimizer.initial_step)?;
        positive("optimizer.penalty_weight", self.optimizer.penalty_weight)?;
        if self.optimizer.enabled && self.optimizer.max_evals == 0 {
            return Err(invalid("optimizer.max_evals", "must be positive"));
        }
        for &c in &self.optimizer.continuation {
            if c == 0 || c >= self.basis.r_functions.max(self.basis.trajectory_functions) {
                return Err(invalid(
                    "optimizer.continuation",
                    "stages must be positive and smaller than the final function count",
                ));
            }
        }
        if self.optimizer.mirror_symmetry && self.kind != ScenarioKind::Corner3d {
            return Err(invalid("optimizer.mirror_symmetry", "only defined for corner3d"));
        }
        let sections = [
            ("corner", self.corner.is_some(), ScenarioKind::Corner3d),
            ("squeeze", self.squeeze.is_some(), ScenarioKind::Squeeze1d),
            ("tapered", self.tapered.is_some(), ScenarioKind::Tapered2d),
            ("boundary", self.boundary.is_some(), ScenarioKind::Custom),
        ];
        for (name, present, owner) in sections {
            if present != (owner == self.kind) {
                let msg = if present {
                    format!("section not used by kind `{}`", self.kind.name())
                } else {
                    format!("section required by kind `{}`", self.kind.name())
                };
                return Err(invalid(name, msg));
            }
        }
        match self.kind {
            ScenarioKind::Corner3d => {
                let c = self.corner.as_ref().unwrap();
                positive("corner.omega_t", c.omega_t)?;
                positive("corner.omega_r", c.omega_r)?;
                positive("corner.duration", c.duration)?;
                positive("corner.r", c.r)?;
                finite("corner.h", c.h)?;
                finite("corner.h_prime", c.h_prime)?;
                positive("corner.cap_factor", c.cap_factor)?;
                if self.basis.r_mode == RMode::TriangularFactor {
                    return Err(invalid(
                        "basis.r_mode",
                        "triangular_factor paths start from R = 0 and cannot meet the corner boundary data",
                    ));
                }
            }
            ScenarioKind::Squeeze1d => {
                let s = self.squeeze.as_ref().unwrap();
                positive("squeeze.omega0", s.omega0)?;
                positive("squeeze.duration", s.duration)?;
                positive("squeeze.outer_factor", s.outer_factor)?;
                positive("squeeze.central_factor", s.central_factor)?;
                positive("squeeze.replay_factor", s.replay_factor)?;
                if !(0.0..=1.0).contains(&s.alpha) {
                    return Err(invalid("squeeze.alpha", "must lie in [0, 1]"));
                }
                if self.basis.trajectory_functions != 0 {
                    return Err(invalid("basis.trajectory_functions", "the squeeze trajectory is fixed; use 0"));
                }
            }
            ScenarioKind::Tapered2d => {
                let t = self.tapered.as_ref().unwrap();
                for (f, v) in [
                    ("tapered.omega_x", t.omega_x),
                    ("tapered.omega_y", t.omega_y),
                    ("tapered.y_c", t.y_c),
                    ("tapered.y_i", t.y_i),
                    ("tapered.y_f", t.y_f),
                    ("tapered.duration", t.duration),
                ] {
                    positive(f, v)?;
                }
            }
            ScenarioKind::Custom => {
                if self.optimizer.enabled {
                    return Err(invalid("optimizer.enabled", "custom scenarios synthesize the unoptimized protocol only"));
                }
                let b = self.boundary.as_ref().unwrap();
                positive("boundary.duration", b.duration)?;
                self.boundary_spec()?;
            }
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        match self.kind {
            ScenarioKind::Corner3d => self.corner.as_ref().map_or(0.0, |c| c.duration),
            ScenarioKind::Squeeze1d => self.squeeze.as_ref().map_or(0.0, |s| s.duration),
            ScenarioKind::Tapered2d => self.tapered.as_ref().map_or(0.0, |t| t.duration),
            ScenarioKind::Custom => self.boundary.as_ref().map_or(0.0, |b| b.duration),
        }
    }

    /// Boundary data of the full physical problem, as used for verification.
    pub fn boundary_spec(&self) -> Result<BoundarySpec> {
        match self.kind {
            ScenarioKind::Corner3d => {
                let c = self.corner.as_ref().ok_or_else(|| invalid("corner", "missing"))?;
                let (t2, r2) = (c.omega_t * c.omega_t, c.omega_r * c.omega_r);
                BoundarySpec::new(
                    DVector::from_vec(vec![0.0, c.r, c.h]),
                    DVector::from_vec(vec![c.r, 0.0, c.h]),
                    diag(&[t2, r2, r2]),
                    diag(&[r2, t2, r2]),
                )?
                .with_midpoint(DVector::from_vec(vec![c.r, c.r, c.h_prime]))
            }
            ScenarioKind::Squeeze1d => {
                let s = self.squeeze.as_ref().ok_or_else(|| invalid("squeeze", "missing"))?;
                let w2 = s.omega0 * s.omega0;
                BoundarySpec::new(DVector::zeros(1), DVector::zeros(1), diag(&[w2]), diag(&[w2]))
            }
            ScenarioKind::Tapered2d => {
                let t = self.tapered.as_ref().ok_or_else(|| invalid("tapered", "missing"))?;
                let trap = tapered_trap(t);
                let wy2 = t.omega_y * t.omega_y;
                BoundarySpec::new(
                    DVector::from_vec(vec![0.0, t.y_i]),
                    DVector::from_vec(vec![0.0, t.y_f]),
                    diag(&[trap.curvature(t.y_i), wy2]),
                    diag(&[trap.curvature(t.y_f), wy2]),
                )
            }
            ScenarioKind::Custom => {
                let b = self.boundary.as_ref().ok_or_else(|| invalid("boundary", "missing"))?;
                let d = b.c0.len();
                let m0 = matrix_from_rows("boundary.m0", &b.m0, d)?;
                let mt = matrix_from_rows("boundary.mt", &b.mt, d)?;
                if b.ct.len() != d {
                    return Err(invalid("boundary.ct", format!("expected {d} entries")));
                }
                let spec = BoundarySpec::new(DVector::from_vec(b.c0.clone()), DVector::from_vec(b.ct.clone()), m0, mt)
                    .map_err(|e| invalid("boundary", e.to_string()))?;
                match &b.midpoint {
                    Some(m) if m.len() != d => Err(invalid("boundary.midpoint", format!("expected {d} entries"))),
                    Some(m) => spec.with_midpoint(DVector::from_vec(m.clone())),
                    None => Ok(spec),
                }
            }
        }
    }

    /// Values in use that the underlying physics does not pin down.
    pub fn assumptions(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        if let Some(c) = &self.corner {
            out.insert("corner.r".into(), c.r);
            out.insert("corner.h".into(), c.h);
            out.insert("corner.h_prime".into(), c.h_prime);
            out.insert("corner.cap_factor".into(), c.cap_factor);
        }
        if let Some(s) = &self.squeeze {
            out.insert("squeeze.alpha".into(), s.alpha);
        }
        out
    }
}

fn diag(v: &[f64]) -> SymMatrix {
    DMatrix::from_diagonal(&DVector::from_row_slice(v))
}

fn matrix_from_rows(field: &str, rows: &[Vec<f64>], d: usize) -> Result<SymMatrix> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(invalid(field, format!("expected a {d}x{d} matrix")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn tapered_trap(t: &TaperedConfig) -> TaperedTrap {
    TaperedTrap {
        omega_x: t.omega_x,
        omega_y: t.omega_y,
        y_c: t.y_c,
    }
}

/// Optimization problem for `kind` with the given function counts.
pub fn scenario_problem(cfg: &ScenarioConfig, traj_functions: usize, r_functions: usize, grid: usize) -> Result<ShuttleProblem> {
    let duration = cfg.duration();
    let (spec, traj, rpath) = match cfg.kind {
        ScenarioKind::Corner3d | ScenarioKind::Custom => {
            let spec = cfg.boundary_spec()?;
            let traj = match &spec.midpoint {
                Some(mid) => TrajectoryPath::transport_via(&spec.c0, &spec.ct, mid, traj_functions)?,
                None => TrajectoryPath::transport(&spec.c0, &spec.ct, traj_functions)?,
            };
            let rpath = RMatrixPath::new(&spec.m0, &spec.mt, cfg.basis.r_mode, r_functions)?;
            (spec, traj, rpath)
        }
        ScenarioKind::Squeeze1d => {
            let spec = cfg.boundary_spec()?;
            let traj = TrajectoryPath::transport(&spec.c0, &spec.ct, 0)?;
            let rpath = RMatrixPath::new(&spec.m0, &spec.mt, cfg.basis.r_mode, r_functions)?;
            (spec, traj, rpath)
        }
        ScenarioKind::Tapered2d => {
            // axial trajectory y(t) paired with the 1D transverse invariant
            let t = cfg.tapered.as_ref().unwrap();
            let trap = tapered_trap(t);
            let m0 = diag(&[trap.curvature(t.y_i)]);
            let mt = diag(&[trap.curvature(t.y_f)]);
            let spec = BoundarySpec::new(DVector::from_vec(vec![t.y_i]), DVector::from_vec(vec![t.y_f]), m0, mt)?;
            let traj = TrajectoryPath::transport(&spec.c0, &spec.ct, traj_functions)?;
            let rpath = RMatrixPath::new(&spec.m0, &spec.mt, cfg.basis.r_mode, r_functions)?;
            (spec, traj, rpath)
        }
    };
    Ok(ShuttleProblem {
        spec,
        traj,
        rpath,
        duration,
        mass: cfg.mass,
        grid: grid + 1,
    })
}

fn corner_limits(cfg: &ScenarioConfig, spec: &BoundarySpec, soft: bool) -> CornerLimits {
    let c = cfg.corner.as_ref().unwrap();
    let r_min = [&spec.m0, &spec.mt]
        .iter()
        .flat_map(|m| m.diagonal().iter().map(|v| v.powf(-0.25)).collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min);
    CornerLimits {
        cap: c.cap_factor * c.omega_r * c.omega_r,
        first_axis: 0,
        second_axis: 1,
        soft_exponent: if soft { cfg.cost.soft_exponent } else { None },
        r_floor: if soft { cfg.cost.r_floor_fraction * r_min } else { 0.0 },
        ordering_margin: if soft { cfg.cost.ordering_margin } else { 0.0 },
    }
}

fn squeeze_limits(cfg: &ScenarioConfig, soft: bool) -> SqueezeLimits {
    let s = cfg.squeeze.as_ref().unwrap();
    SqueezeLimits {
        omega0: s.omega0,
        alpha: s.alpha,
        outer_factor: s.outer_factor,
        central_factor: s.central_factor,
        soft_exponent: if soft { cfg.cost.soft_exponent } else { None },
    }
}

/// Scenario cost of a full parameter vector (trajectory then matrix path).
///
/// `soft` selects the search-time variant: surrogate objective, positivity
/// floor and ordering slack where configured. Otherwise only the scenario's
/// own constraints apply.
pub fn scenario_cost(cfg: &ScenarioConfig, problem: &ShuttleProblem, x: &[f64], soft: bool) -> Result<CostReport> {
    match cfg.kind {
        ScenarioKind::Corner3d => cost_max_displacement(x, problem, &corner_limits(cfg, &problem.spec, soft)),
        ScenarioKind::Squeeze1d => cost_width_freq(x, problem, &squeeze_limits(cfg, soft)),
        ScenarioKind::Tapered2d => cost_curvature_mismatch(x, problem, &tapered_trap(cfg.tapered.as_ref().unwrap())),
        ScenarioKind::Custom => {
            let (traj, rpath) = problem.decode(x)?;
            let rep = crate::invariant::check_boundary(&traj, &rpath, &problem.spec, problem.duration, crate::invariant::BOUNDARY_TOL);
            Ok(CostReport::new(0.0, rep.penalty()))
        }
    }
}

fn report_or_failure(r: Result<CostReport>) -> CostReport {
    r.unwrap_or_else(|e| CostReport::failure(&e.to_string()))
}

/// Search-space layout: for the tapered trap only the matrix path is searched,
/// the trajectory being fitted by least squares.
fn search_layout(cfg: &ScenarioConfig, problem: &ShuttleProblem) -> ParamLayout {
    let mut l = problem.layout();
    if cfg.kind == ScenarioKind::Tapered2d {
        l.traj_functions = 0;
    }
    l
}

/// Full parameter vector from a search vector.
fn expand(cfg: &ScenarioConfig, problem: &ShuttleProblem, s: &[f64]) -> Result<Vec<f64>> {
    if cfg.kind != ScenarioKind::Tapered2d {
        return Ok(s.to_vec());
    }
    let trap = tapered_trap(cfg.tapered.as_ref().unwrap());
    let mut a = project_trajectory(s, problem, &trap)?;
    a.extend_from_slice(s);
    Ok(a)
}

/// Map between the optimizer's search vector and a layout vector.
struct SearchSpace {
    classes: Option<(Vec<usize>, usize)>,
}

impl SearchSpace {
    fn new(cfg: &ScenarioConfig, layout: &ParamLayout) -> Self {
        if cfg.optimizer.mirror_symmetry {
            SearchSpace {
                classes: Some(layout.mirror_classes(0, 1)),
            }
        } else {
            SearchSpace { classes: None }
        }
    }

    fn to_layout(&self, s: &[f64]) -> Vec<f64> {
        match &self.classes {
            Some((classes, _)) => classes.iter().map(|&c| s[c]).collect(),
            None => s.to_vec(),
        }
    }

    fn from_layout(&self, x: &[f64]) -> Vec<f64> {
        match &self.classes {
            Some((classes, count)) => {
                let mut s = vec![0.0; *count];
                for (i, &c) in classes.iter().enumerate().rev() {
                    s[c] = x[i];
                }
                s
            }
            None => x.to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizationRun {
    pub x: Vec<f64>,
    pub report: CostReport,
    pub evals: usize,
    pub status: MinimizeStatus,
    pub trace: Vec<TraceRow>,
    pub stages: Vec<usize>,
}

/// Pulls `x` back toward `anchor` until it satisfies the hard constraints on
/// the verification grid. Returns the better of the repaired point and the
/// anchor.
fn repair(cfg: &ScenarioConfig, fine: &ShuttleProblem, anchor: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let hard = |v: &[f64]| report_or_failure(expand(cfg, fine, v).and_then(|f| scenario_cost(cfg, fine, &f, false)));
    let anchor_cost = hard(anchor);
    let mut best = x.to_vec();
    let mut cost = hard(x);
    if !cost.feasible {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..30 {
            let mid = 0.5 * (lo + hi);
            let v: Vec<f64> = anchor.iter().zip(x).map(|(a, b)| a + mid * (b - a)).collect();
            if hard(&v).feasible {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        best = anchor.iter().zip(x).map(|(a, b)| a + lo * (b - a)).collect();
        cost = hard(&best);
    }
    let better = cost.feasible && (!anchor_cost.feasible || cost.objective <= anchor_cost.objective);
    Ok(if better || !anchor_cost.feasible { best } else { anchor.to_vec() })
}

/// Runs the configured optimizer, warm-starting through the continuation stages.
pub fn optimize_scenario(cfg: &ScenarioConfig) -> Result<OptimizationRun> {
    let (na, nb) = (cfg.basis.trajectory_functions, cfg.basis.r_functions);
    let mut stages: Vec<usize> = cfg.optimizer.continuation.clone();
    stages.push(na.max(nb));
    let per_stage = cfg.optimizer.max_evals / stages.len();
    let mut prev: Option<(ParamLayout, Vec<f64>)> = None;
    let mut trace = Vec::new();
    let mut evals = 0;
    let mut weight_scale = None;
    let mut last = None;
    for (k, &n) in stages.iter().enumerate() {
        let final_stage = k + 1 == stages.len();
        let (fa, fb) = if final_stage { (na, nb) } else { (n.min(na), n.min(nb)) };
        let problem = scenario_problem(cfg, fa, fb, cfg.cost.grid)?;
        let layout = search_layout(cfg, &problem);
        let space = SearchSpace::new(cfg, &layout);
        let anchor = match &prev {
            Some((pl, x)) => pl.embed(x, &layout)?,
            None => vec![0.0; layout.len()],
        };
        let s0 = space.from_layout(&anchor);
        let cost = |s: &[f64]| {
            report_or_failure(expand(cfg, &problem, &space.to_layout(s)).and_then(|x| scenario_cost(cfg, &problem, &x, true)))
        };
        let scale = *weight_scale.get_or_insert_with(|| {
            let r = cost(&s0);
            if r.objective.is_finite() && r.objective > 0.0 {
                r.objective
            } else {
                1.0
            }
        });
        let opts = MinimizeOptions {
            max_evals: if final_stage { cfg.optimizer.max_evals - evals } else { per_stage },
            restarts: cfg.optimizer.restarts,
            seed: cfg.optimizer.seed.wrapping_add(k as u64),
            penalty_weight: cfg.optimizer.penalty_weight * scale,
            initial_step: cfg.optimizer.initial_step,
            ..MinimizeOptions::default()
        };
        let out = minimize(&cost, &s0, &opts);
        trace.extend(out.trace.into_iter().map(|mut row| {
            row.eval_index += evals;
            row
        }));
        evals += out.evals;
        let mut x = space.to_layout(&out.x);
        let fine = scenario_problem(cfg, fa, fb, cfg.verify.grid)?;
        x = repair(cfg, &fine, &anchor, &x)?;
        last = Some((problem, x.clone(), out.report, out.status));
        prev = Some((layout, x));
    }
    let (problem, x, report, status) = last.expect("at least one stage");
    Ok(OptimizationRun {
        x: expand(cfg, &problem, &x)?,
        report,
        evals,
        status,
        trace,
        stages,
    })
}

/// Fidelity and excitation of a propagated protocol.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub fidelity: f64,
    pub nbar: f64,
    pub nbar_per_mode: Vec<f64>,
    pub purity_drift: f64,
    pub uncertainty_margin: f64,
    pub steps: usize,
    pub min_fidelity: f64,
    pub passed: bool,
}

impl VerifyReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}

#[derive(Debug, Clone)]
pub struct Verification {
    pub report: VerifyReport,
    pub states: StateTrajectory,
    pub target: GaussianState,
}

/// Propagates the ground state of `spec`'s initial trap through `protocol` and
/// compares with the ground state of its final trap.
pub fn run_verify(protocol: &Protocol, spec: &BoundarySpec, steps: usize, min_fidelity: f64) -> Result<Verification> {
    if protocol.dim() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            found: protocol.dim(),
        });
    }
    let mass = protocol.mass;
    let start = ground_state(&spec.m0, &spec.c0, mass)?;
    let target = ground_state(&spec.mt, &spec.ct, mass)?;
    let states = propagate(&start, protocol, steps)?;
    let fid = fidelity(states.last(), &target)?;
    let ph = phonon_number(states.last(), &spec.mt, &spec.ct, mass)?;
    let report = VerifyReport {
        fidelity: fid,
        nbar: ph.total,
        nbar_per_mode: ph.per_mode,
        purity_drift: states.max_purity_drift(),
        uncertainty_margin: states.min_uncertainty_margin(),
        steps,
        min_fidelity,
        passed: fid >= min_fidelity,
    };
    Ok(Verification { report, states, target })
}

/// Same control values replayed over a time axis stretched by `factor`.
pub fn stretch_protocol(protocol: &Protocol, factor: f64) -> Result<Protocol> {
    let samples = protocol
        .samples
        .iter()
        .map(|s| ProtocolSample {
            t: s.t * factor,
            ..s.clone()
        })
        .collect();
    Protocol::new(samples, protocol.mass)
}

/// Shape checks on a squeeze protocol and its slowed-down replay.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SqueezeShape {
    /// Time at which `ω²` is smallest.
    pub t_min_omega_sq: f64,
    pub grid_spacing: f64,
    pub sigma_start: f64,
    pub sigma_max: f64,
    /// Time of the largest width in the slowed-down replay, in units of its duration.
    pub replay_peak_fraction: f64,
}

impl SqueezeShape {
    pub fn min_at_center(&self, duration: f64) -> bool {
        (self.t_min_omega_sq - duration / 2.0).abs() <= self.grid_spacing * (1.0 + 1e-9)
    }

    pub fn width_never_grows(&self) -> bool {
        // RK4 roundoff on the covariance sits near 1e-7 relative.
        self.sigma_max <= self.sigma_start * (1.0 + 1e-6)
    }

    pub fn replay_peak_central(&self) -> bool {
        self.replay_peak_fraction > 0.25 && self.replay_peak_fraction < 0.75
    }
}

pub fn squeeze_shape(protocol: &Protocol, states: &StateTrajectory, spec: &BoundarySpec, replay_factor: f64, steps: usize) -> Result<SqueezeShape> {
    let (t_min, _) = protocol
        .samples
        .iter()
        .map(|s| (s.t, s.m[(0, 0)]))
        .fold((0.0, f64::INFINITY), |acc, (t, w)| if w < acc.1 { (t, w) } else { acc });
    let sigma_start = states.states[0].sigma_x(0);
    let sigma_max = states.states.iter().map(|s| s.sigma_x(0)).fold(0.0, f64::max);
    let slow = stretch_protocol(protocol, replay_factor)?;
    let start = ground_state(&spec.m0, &spec.c0, protocol.mass)?;
    let replay = propagate(&start, &slow, steps)?;
    let duration = slow.samples[slow.len() - 1].t - slow.start_time();
    let (t_peak, _) = replay
        .times
        .iter()
        .zip(&replay.states)
        .map(|(t, s)| (*t, s.sigma_x(0)))
        .fold((0.0, 0.0), |acc, (t, v)| if v > acc.1 { (t, v) } else { acc });
    Ok(SqueezeShape {
        t_min_omega_sq: t_min,
        grid_spacing: protocol.samples[1].t - protocol.samples[0].t,
        sigma_start,
        sigma_max,
        replay_peak_fraction: (t_peak - slow.start_time()) / duration,
    })
}

/// Provenance record written next to the outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub kind: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub status: String,
    pub evaluations: usize,
    pub outputs: BTreeMap<String, String>,
    pub headline: BTreeMap<String, f64>,
    pub assumptions: BTreeMap<String, Assumption>,
    pub config: ScenarioConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct Assumption {
    pub value: f64,
    pub non_paper_default: bool,
}

impl RunManifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Success,
    /// The incumbent violates a constraint or fails verification.
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub params: Vec<f64>,
    pub protocol: Protocol,
    pub verification: Verification,
    pub baseline: CostReport,
    pub incumbent: CostReport,
    pub optimization: Option<OptimizationRun>,
    pub squeeze: Option<SqueezeShape>,
    pub status: RunStatus,
    pub manifest: RunManifest,
}

/// Builds the baseline, optionally optimizes, exports on the verification grid
/// and verifies by propagation.
pub fn run_synth(cfg: &ScenarioConfig) -> Result<SynthOutcome> {
    let started = unix_now();
    let grid = cfg.verify.grid;
    let fine = scenario_problem(cfg, cfg.basis.trajectory_functions, cfg.basis.r_functions, grid)?;
    let zeros = fine.zeros();
    let baseline = scenario_cost(cfg, &fine, &zeros, false)?;
    let optimization = if cfg.optimizer.enabled {
        Some(optimize_scenario(cfg)?)
    } else {
        None
    };
    let params = optimization.as_ref().map_or(zeros, |o| o.x.clone());
    let incumbent = scenario_cost(cfg, &fine, &params, false)?;
    let spec = cfg.boundary_spec()?;
    let (traj, rpath) = fine.decode(&params)?;
    let sample = |intervals: usize| match cfg.kind {
        ScenarioKind::Tapered2d => {
            let trap = tapered_trap(cfg.tapered.as_ref().unwrap());
            trap.physical_protocol(&traj, fine.duration, intervals + 1, cfg.mass)
        }
        _ => build_protocol(&traj, &rpath, &fine.spec, fine.duration, intervals + 1, cfg.mass),
    };
    let mut protocol = sample(grid)?;
    // stiff protocols need finer sampling than configured
    let needed = fine.duration * protocol.max_frequency() / cfg.verify.max_phase_step;
    let mut refine = 1;
    while ((grid * refine) as f64) < needed {
        refine *= 2;
    }
    if refine > 1 {
        protocol = sample(grid * refine)?;
    }
    let steps = cfg.verify.steps() * refine;
    let verification = run_verify(&protocol, &spec, steps, cfg.verify.min_fidelity)?;
    let squeeze = match &cfg.squeeze {
        Some(s) => Some(squeeze_shape(
            &protocol,
            &verification.states,
            &spec,
            s.replay_factor,
            steps,
        )?),
        None => None,
    };
    let status = if incumbent.feasible && verification.report.passed {
        RunStatus::Success
    } else {
        RunStatus::Infeasible
    };

    let mut headline = BTreeMap::new();
    headline.insert("baseline_objective".into(), baseline.objective);
    headline.insert("objective".into(), incumbent.objective);
    headline.insert("penalty".into(), incumbent.penalty);
    for (k, v) in &incumbent.diagnostics {
        headline.insert(k.clone(), *v);
    }
    let v = &verification.report;
    headline.insert("fidelity".into(), v.fidelity);
    headline.insert("nbar".into(), v.nbar);
    headline.insert("purity_drift".into(), v.purity_drift);
    headline.insert("uncertainty_margin".into(), v.uncertainty_margin);
    if let Some(c) = &cfg.corner {
        headline.insert("max_displacement_over_r".into(), incumbent.objective / c.r);
        headline.insert("baseline_displacement_over_r".into(), baseline.objective / c.r);
    }
    if let Some(sq) = &squeeze {
        headline.insert("t_min_omega_sq".into(), sq.t_min_omega_sq);
        headline.insert("sigma_start".into(), sq.sigma_start);
        headline.insert("sigma_max".into(), sq.sigma_max);
        headline.insert("replay_peak_fraction".into(), sq.replay_peak_fraction);
    }
    let manifest = RunManifest {
        tool: "shuttle".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        kind: cfg.kind.name().into(),
        seed: cfg.optimizer.seed,
        started_unix: started,
        finished_unix: unix_now(),
        status: match status {
            RunStatus::Success => "success".into(),
            RunStatus::Infeasible => "infeasible".into(),
        },
        evaluations: optimization.as_ref().map_or(0, |o| o.evals),
        outputs: BTreeMap::new(),
        headline,
        assumptions: cfg
            .assumptions()
            .into_iter()
            .map(|(k, value)| {
                (
                    k,
                    Assumption {
                        value,
                        non_paper_default: true,
                    },
                )
            })
            .collect(),
        config: cfg.clone(),
    };
    Ok(SynthOutcome {
        params,
        protocol,
        verification,
        baseline,
        incumbent,
        optimization,
        squeeze,
        status,
        manifest,
    })
}

/// Values for a sweep: `a:b` (unit step), `a:b:step`, or a comma list.
pub fn parse_range(spec: &str) -> Result<Vec<toml::Value>> {
    let bad = || invalid("--param", format!("cannot parse range `{spec}`"));
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() > 3 {
            return Err(bad());
        }
        let ints: Option<Vec<i64>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
        if let Some(v) = ints {
            let step = *v.get(2).unwrap_or(&1);
            if step <= 0 || v[1] < v[0] {
                return Err(bad());
            }
            return Ok((v[0]..=v[1]).step_by(step as usize).map(toml::Value::Integer).collect());
        }
        let f: Vec<f64> = parts.iter().map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
        let step = *f.get(2).unwrap_or(&1.0);
        if !(step > 0.0) || f[1] < f[0] {
            return Err(bad());
        }
        let count = ((f[1] - f[0]) / step + 1e-9).floor() as usize;
        return Ok((0..=count).map(|k| toml::Value::Float(f[0] + k as f64 * step)).collect());
    }
    let vals = spec
        .split(',')
        .map(|s| {
            let s = s.trim();
            if let Ok(i) = s.parse::<i64>() {
                toml::Value::Integer(i)
            } else if let Ok(f) = s.parse::<f64>() {
                toml::Value::Float(f)
            } else if let Ok(b) = s.parse::<bool>() {
                toml::Value::Boolean(b)
            } else {
                toml::Value::String(s.to_string())
            }
        })
        .collect::<Vec<_>>();
    if vals.is_empty() {
        return Err(bad());
    }
    Ok(vals)
}

/// Sets a dotted `path` in a config table. `basis.functions` sets both
/// function counts at once.
pub fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    if path == "basis.functions" {
        set_path(table, "basis.trajectory_functions", value.clone())?;
        return set_path(table, "basis.r_functions", value);
    }
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(invalid(path, "empty path segment"));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| invalid(path, format!("`{k}` is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: String,
    pub outcome: SynthOutcome,
}

/// One synthesis per value of `path`, all other settings from `cfg`.
pub fn sweep(cfg: &ScenarioConfig, path: &str, values: &[toml::Value]) -> Result<Vec<SweepRow>> {
    values
        .iter()
        .map(|v| {
            let mut t = cfg.to_table();
            set_path(&mut t, path, v.clone())?;
            // stages that no longer fit under a smaller count are dropped
            let c = config_from_table(t.clone()).or_else(|e| {
                if let Some(opt) = t.get_mut("optimizer").and_then(|o| o.as_table_mut()) {
                    opt.insert("continuation".into(), toml::Value::Array(Vec::new()));
                }
                config_from_table(t).map_err(|_| e)
            })?;
            Ok(SweepRow {
                value: v.to_string(),
                outcome: run_synth(&c)?,
            })
        })
        .collect()
}

/// Sweep summary: `value, objective, penalty, feasible, fidelity, nbar`.
pub fn sweep_csv(path: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{path},objective,penalty,feasible,fidelity,nbar\n");
    for r in rows {
        let o = &r.outcome;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.value.trim_matches('"'),
            crate::invariant::fmt_f64(o.incumbent.objective),
            crate::invariant::fmt_f64(o.incumbent.penalty),
            o.incumbent.feasible,
            crate::invariant::fmt_f64(o.verification.report.fidelity),
            crate::invariant::fmt_f64(o.verification.report.nbar),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_preset_matches_the_scenario() {
        let c = ScenarioConfig::preset("corner3d").unwrap();
        let k = c.corner.as_ref().unwrap();
        assert_eq!(k.omega_r / k.omega_t, 5.0);
        assert_eq!(k.omega_t * k.duration, 10.0);
        assert_eq!(c.boundary_spec().unwrap().dim(), 3);
    }

    #[test]
    fn every_preset_validates() {
        for (name, _) in PRESETS {
            if *name == "custom" {
                assert!(matches!(
                    ScenarioConfig::preset(name),
                    Err(Error::Validation { ref field, .. }) if field == "boundary"
                ));
            } else {
                ScenarioConfig::preset(name).unwrap();
            }
        }
    }

    #[test]
    fn empty_file_needs_a_kind() {
        match parse_config("") {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "kind"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn override_changes_only_that_field() {
        let base = ScenarioConfig::preset("corner3d").unwrap();
        let mut c = parse_config("kind = \"corner3d\"\n[optimizer]\nseed = 7\n").unwrap();
        assert_eq!(c.optimizer.seed, 7);
        c.optimizer.seed = base.optimizer.seed;
        assert_eq!(c, base);
    }

    #[test]
    fn unknown_keys_report_their_path() {
        match parse_config("kind = \"corner3d\"\n[corner]\nomega_q = 1.0\n") {
            Err(Error::Validation { field, message }) => {
                assert_eq!(field, "corner.omega_q");
                assert!(message.contains("omega_q"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        match parse_config("kind = \"corner3d\"\n[optimizer]\nseed = \"x\"\n") {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "optimizer.seed"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_values_are_rejected() {
        for (text, field) in [
            ("kind = \"corner3d\"\n[corner]\nomega_r = -1.0\n", "corner.omega_r"),
            ("kind = \"corner3d\"\n[cost]\ngrid = 10\n", "cost.grid"),
            ("kind = \"squeeze1d\"\n[squeeze]\nalpha = 2.0\n", "squeeze.alpha"),
            ("kind = \"squeeze1d\"\n[corner]\nr = 1.0\n", "corner"),
            ("kind = \"warp\"\n", "kind"),
        ] {
            match parse_config(text) {
                Err(Error::Validation { field: f, .. }) => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(parse_config("kind = "), Err(Error::Parse(_))));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = ScenarioConfig::preset("tapered2d").unwrap();
        assert_eq!(parse_config(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn ranges_parse() {
        let v = parse_range("3:9:3").unwrap();
        assert_eq!(v, vec![toml::Value::Integer(3), toml::Value::Integer(6), toml::Value::Integer(9)]);
        assert_eq!(parse_range("0.5:1.0:0.25").unwrap().len(), 3);
        assert_eq!(parse_range("full,diagonal").unwrap()[0], toml::Value::String("full".into()));
        assert!(parse_range("5:1").is_err());
    }

    #[test]
    fn custom_static_protocol_verifies() {
        let text = r#"
kind = "custom"
[boundary]
duration = 2.0
c0 = [0.5, -0.5]
ct = [0.5, -0.5]
m0 = [[1.0, 0.0], [0.0, 4.0]]
mt = [[1.0, 0.0], [0.0, 4.0]]
[verify]
grid = 128
min_fidelity = 0.999
"#;
        let cfg = parse_config(text).unwrap();
        let out = run_synth(&cfg).unwrap();
        assert_eq!(out.status, RunStatus::Success);
        assert!((out.verification.report.fidelity - 1.0).abs() < 1e-12);
        assert!(out.verification.report.nbar.abs() < 1e-12);
        assert!(out.manifest.to_toml().contains("kind = \"custom\""));
    }

    #[test]
    fn stretched_protocol_keeps_controls() {
        let cfg = ScenarioConfig::preset("squeeze1d").unwrap();
        let p = scenario_problem(&cfg, 0, 2, 64).unwrap();
        let (traj, rpath) = p.decode(&[-0.01, 0.0]).unwrap();
        let proto = build_protocol(&traj, &rpath, &p.spec, p.duration, 65, 1.0).unwrap();
        let slow = stretch_protocol(&proto, 10.0).unwrap();
        assert_eq!(slow.samples[64].t, 10.0 * proto.samples[64].t);
        assert_eq!(slow.samples[7].m, proto.samples[7].m);
    }
}
