//! TOML run configuration and the manifest written next to every output.
//!
//! ```toml
//! [model]
//! delta = -6.0
//! omega_lower = 4.0
//! omega_upper = 6.0
//! chi = -18.0
//!
//! [run]
//! solver = "cumulant_td"
//! t_end = 300.0
//! ```
//!
//! Every section except `[model]` is optional and falls back to defaults.
//! Unknown keys are rejected so that typos never silently change a run.

use serde::{Deserialize, Serialize};

use crate::clustermf::PlaquetteDims;
use crate::cumulant::{Convolution, TdStorage};
use crate::engine::{Axis, GridSpec, IntegratorConfig};
use crate::error::{Error, Result};
use crate::model::{Boundary, InitialState, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Exact,
    Meanfield,
    CumulantTd,
    CumulantFinite,
    Cluster,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Exact => "exact",
            SolverKind::Meanfield => "meanfield",
            SolverKind::CumulantTd => "cumulant_td",
            SolverKind::CumulantFinite => "cumulant_finite",
            SolverKind::Cluster => "cluster",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub solver: SolverKind,
    pub t_end: f64,
    /// Length of the trailing window used for δ², spectra and averages.
    pub window: f64,
    /// `all_down`, `all_zero`, `random_product` or `random_seeded`.
    pub initial_state: String,
    /// Overrides the global `--seed` for the initial state when set.
    pub seed: Option<u64>,
    /// Nearest-neighbour negativity channel (cumulant solvers only).
    pub negativity: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            solver: SolverKind::CumulantTd,
            t_end: 300.0,
            window: 100.0,
            initial_state: "all_down".into(),
            seed: None,
            negativity: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatticeSection {
    /// Finite lattice size for the exact and finite cumulant solvers.
    pub nx: usize,
    pub ny: usize,
    pub boundary: Boundary,
    /// Cutoff of the thermodynamic-limit sums, in lattice constants.
    pub r_cut: f64,
    pub storage: TdStorage,
    pub convolution: Convolution,
}

impl Default for LatticeSection {
    fn default() -> Self {
        Self {
            nx: 2,
            ny: 1,
            boundary: Boundary::Open,
            r_cut: 40.0,
            storage: TdStorage::Symmetric,
            convolution: Convolution::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    pub cx: usize,
    pub cy: usize,
    /// Unlocks 3×3 plaquettes (several GB of memory).
    pub allow_large: bool,
    /// Cutoff of the external mean-field sum; defaults to `lattice.r_cut`.
    pub r_cut: Option<f64>,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self { cx: 2, cy: 2, allow_large: false, r_cut: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisRange {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanSection {
    pub delta: AxisRange,
    pub omega: AxisRange,
    /// Random seeds for the fixed-point search on top of the two pure states.
    pub mf_seeds: usize,
    /// Random-start mean-field runs per cell (0 disables them).
    pub mf_starts: usize,
    /// Overlay the cumulant δ² on the mean-field classification.
    pub cumulant: bool,
    /// Cutoff for the overlay; defaults to `lattice.r_cut`.
    pub r_cut: Option<f64>,
    pub t_end: f64,
    pub window: f64,
}

impl Default for ScanSection {
    fn default() -> Self {
        Self {
            delta: AxisRange { min: -40.0, max: 40.0, n: 21 },
            omega: AxisRange { min: 0.0, max: 20.0, n: 21 },
            mf_seeds: 8,
            mf_starts: 3,
            cumulant: true,
            r_cut: None,
            t_end: 300.0,
            window: 100.0,
        }
    }
}

impl ScanSection {
    pub fn grid(&self) -> Result<GridSpec> {
        for (name, a) in [("delta", &self.delta), ("omega", &self.omega)] {
            if a.n == 0 || !(a.min.is_finite() && a.max.is_finite()) || a.max < a.min {
                return Err(Error::Config(format!("scan.{name}: need finite min <= max and n >= 1")));
            }
        }
        Ok(GridSpec {
            x: Axis::linspace("delta", self.delta.min, self.delta.max, self.delta.n),
            y: Axis::linspace("omega", self.omega.min, self.omega.max, self.omega.n),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingSection {
    /// Side lengths `L` of the `L × L` lattices.
    pub sizes: Vec<usize>,
    pub t_end: f64,
    /// Averaging window for `F²_∞`; the preceding window of equal length
    /// serves as the convergence check.
    pub window: f64,
    /// Relative change between the two windows below which `F²_∞` counts
    /// as converged.
    pub convergence_tol: f64,
}

impl Default for ScalingSection {
    fn default() -> Self {
        Self { sizes: vec![3, 4, 5, 6, 8, 10], t_end: 300.0, window: 50.0, convergence_tol: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FalsifySection {
    pub mf_starts: usize,
    /// Time at which all cumulants are dropped.
    pub drop_time: f64,
    pub t_end: f64,
    pub window: f64,
}

impl Default for FalsifySection {
    fn default() -> Self {
        Self { mf_starts: 5, drop_time: 50.0, t_end: 400.0, window: 100.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumSection {
    /// CSV written by `trace`; relative paths resolve against the config.
    pub input: String,
    pub channel: String,
    pub t_start: Option<f64>,
    pub t_stop: Option<f64>,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        Self { input: "trace.csv".into(), channel: "n_up".into(), t_start: None, t_stop: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelParams,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub lattice: LatticeSection,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub scan: ScanSection,
    #[serde(default)]
    pub scaling: ScalingSection,
    #[serde(default)]
    pub falsify: FalsifySection,
    #[serde(default)]
    pub spectrum: SpectrumSection,
}

impl Config {
    pub fn new(model: ModelParams) -> Self {
        Self {
            model,
            integrator: IntegratorConfig::default(),
            run: RunSection::default(),
            lattice: LatticeSection::default(),
            cluster: ClusterSection::default(),
            scan: ScanSection::default(),
            scaling: ScalingSection::default(),
            falsify: FalsifySection::default(),
            spectrum: SpectrumSection::default(),
        }
    }

    /// Parse and validate. Errors carry the TOML line and key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        self.integrator.validate().map_err(|e| Error::Config(format!("integrator: {e}")))?;
        let r = &self.run;
        if !(r.t_end > 0.0 && r.window > 0.0 && r.window <= r.t_end) {
            return bad(format!("run: need 0 < window <= t_end, got window {} t_end {}", r.window, r.t_end));
        }
        InitialState::parse(&r.initial_state, 0).map_err(|e| Error::Config(format!("run.initial_state: {e}")))?;
        let l = &self.lattice;
        if l.nx == 0 || l.ny == 0 {
            return bad("lattice: nx and ny must be >= 1".into());
        }
        if !(l.r_cut >= 1.0) {
            return bad(format!("lattice.r_cut must be >= 1, got {}", l.r_cut));
        }
        PlaquetteDims::new(self.cluster.cx, self.cluster.cy).map_err(|e| Error::Config(format!("cluster: {e}")))?;
        self.scan.grid()?;
        let s = &self.scaling;
        if s.sizes.iter().any(|&n| n < 2) || !(s.window > 0.0 && 2.0 * s.window <= s.t_end) {
            return bad("scaling: sizes must be >= 2 and 2·window <= t_end".into());
        }
        let f = &self.falsify;
        if !(f.drop_time >= 0.0 && f.drop_time + f.window <= f.t_end && f.window > 0.0) {
            return bad("falsify: need 0 <= drop_time and drop_time + window <= t_end".into());
        }
        Ok(())
    }

    /// Initial state honouring the run seed override.
    pub fn initial_state(&self, global_seed: u64) -> Result<InitialState> {
        InitialState::parse(&self.run.initial_state, self.run.seed.unwrap_or(global_seed))
    }

    pub fn cluster_r_cut(&self) -> f64 {
        self.cluster.r_cut.unwrap_or(self.lattice.r_cut)
    }

    pub fn scan_r_cut(&self) -> f64 {
        self.scan.r_cut.unwrap_or(self.lattice.r_cut)
    }

    pub fn storage(&self) -> (TdStorage, Convolution) {
        (self.lattice.storage, self.lattice.convolution)
    }
}

/// Everything needed to rerun a command bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub workers: usize,
    pub config: Config,
}

impl Manifest {
    pub fn new(command: &str, config: &Config, seed: u64, workers: usize) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            workers,
            config: config.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[model]\ndelta = -6.0\nomega_lower = 4.0\nomega_upper = 6.0\nchi = -18.0\n";

    #[test]
    fn minimal_config_takes_defaults() {
        let c = Config::from_toml(MINIMAL).unwrap();
        assert_eq!(c.model.kappa, 3);
        assert_eq!(c.run.solver, SolverKind::CumulantTd);
        assert_eq!(c.lattice.r_cut, 40.0);
        assert_eq!(c.scan.grid().unwrap().len(), 441);
    }

    #[test]
    fn roundtrip_through_toml() {
        let mut c = Config::from_toml(MINIMAL).unwrap();
        c.run.solver = SolverKind::Cluster;
        c.run.seed = Some(7);
        c.lattice.storage = TdStorage::HalfPlane;
        let back = Config::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_reported_with_location() {
        let text = format!("{MINIMAL}\n[run]\nsolvr = \"exact\"\n");
        let msg = Config::from_toml(&text).unwrap_err().to_string();
        assert!(msg.contains("solvr") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        for extra in [
            "[run]\nt_end = -1.0\n",
            "[lattice]\nr_cut = 0.5\n",
            "[cluster]\ncx = 2\ncy = 3\n",
            "[run]\ninitial_state = \"upside_down\"\n",
            "[integrator]\nrel_tol = 0.0\n",
        ] {
            let err = Config::from_toml(&format!("{MINIMAL}{extra}")).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{extra}: {err}");
        }
        assert!(Config::from_toml("[model]\ndelta = 1.0\n").is_err());
    }
}
