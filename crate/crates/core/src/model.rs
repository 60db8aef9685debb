//! Domain types: time grid, Volterra kernels, the discrete Lévy measure and
//! validated scenarios.
//!
//! Scenario files are JSON documents that mirror [`ScenarioSpec`] field for
//! field (see [`RawScenario`]). [`validate_scenario`] turns the raw document
//! into an immutable, fully checked [`ScenarioSpec`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for matching a time against a grid node.
const NODE_TOL: f64 = 1e-9;

/// Uniform partition `0 = t_0 < ... < t_n = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::validation(format!("grid.horizon must be positive, got {horizon}")));
        }
        if n_steps < 2 {
            return Err(Error::validation(format!("grid.n_steps must be at least 2, got {n_steps}")));
        }
        Ok(TimeGrid { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            self.horizon * i as f64 / self.n_steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.node(i)).collect()
    }

    /// Index of the node equal to `t`, if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = t / self.dt();
        let i = x.round();
        if i < 0.0 || i > self.n_steps as f64 || (x - i).abs() > NODE_TOL * (1.0 + x.abs()) {
            None
        } else {
            Some(i as usize)
        }
    }

    /// Largest node index `i` with `t_i <= t` (clamped to the grid).
    pub fn floor_index(&self, t: f64) -> usize {
        if t <= 0.0 {
            return 0;
        }
        let x = t / self.dt();
        let i = (x + NODE_TOL * (1.0 + x)).floor();
        (i as usize).min(self.n_steps)
    }

    /// Same horizon, `factor` times fewer steps.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.n_steps.is_multiple_of(factor) {
            return Err(Error::validation(format!(
                "cannot coarsen {} steps by a factor of {factor}",
                self.n_steps
            )));
        }
        TimeGrid::new(self.horizon, self.n_steps / factor)
    }
}

/// `build_time_grid(T, n)`.
pub fn build_time_grid(horizon: f64, n_steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, n_steps)
}

/// Kernel `K(t, s)` on the triangle `0 <= s <= t <= T`.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    Constant(f64),
    /// `a * exp(-rate * (t - s))`
    ExpDecay { amplitude: f64, rate: f64 },
    /// Packed lower triangle on the grid nodes: row `i` holds `K(t_i, t_0..=t_i)`.
    Table { n: usize, values: Vec<f64> },
}

impl Kernel {
    fn table_index(i: usize, j: usize) -> usize {
        i * (i + 1) / 2 + j
    }

    /// `K(t_i, t_j)` for grid indices with `j <= i`.
    pub fn at(&self, grid: &TimeGrid, i: usize, j: usize) -> f64 {
        debug_assert!(j <= i);
        match self {
            Kernel::Constant(v) => *v,
            Kernel::ExpDecay { amplitude, rate } => amplitude * (-rate * (grid.node(i) - grid.node(j))).exp(),
            Kernel::Table { values, .. } => values[Self::table_index(i, j)],
        }
    }

    /// `eval_kernel`: `K(t, s)` with triangle and grid checks.
    pub fn eval(&self, grid: &TimeGrid, t: f64, s: f64) -> Result<f64> {
        let horizon = grid.horizon();
        let slack = NODE_TOL * horizon;
        if s < -slack || s > t + slack || t > horizon + slack {
            return Err(Error::OutsideTriangle { t, s, horizon });
        }
        match self {
            Kernel::Constant(v) => Ok(*v),
            Kernel::ExpDecay { amplitude, rate } => Ok(amplitude * (-rate * (t - s).max(0.0)).exp()),
            Kernel::Table { .. } => {
                let i = grid.index_of(t).ok_or(Error::OffGrid(t))?;
                let j = grid.index_of(s).ok_or(Error::OffGrid(s))?;
                Ok(self.at(grid, i, j))
            }
        }
    }

    /// Analytic `∂K/∂t(t, s)` where the kind admits one.
    pub fn d_dt(&self, t: f64, s: f64) -> Option<f64> {
        match self {
            Kernel::Constant(_) => Some(0.0),
            Kernel::ExpDecay { amplitude, rate } => Some(-rate * amplitude * (-rate * (t - s)).exp()),
            Kernel::Table { .. } => None,
        }
    }

    /// `∂K/∂t` at grid nodes `(t_i, t_j)`, `j <= i`. Tables use central
    /// differences in the first index, one-sided on the diagonal and at `T`.
    pub fn d_dt_at(&self, grid: &TimeGrid, i: usize, j: usize) -> f64 {
        match self {
            Kernel::Table { .. } => {
                let n = grid.n_steps();
                let h = grid.dt();
                if i > j && i < n {
                    (self.at(grid, i + 1, j) - self.at(grid, i - 1, j)) / (2.0 * h)
                } else if i < n {
                    (self.at(grid, i + 1, j) - self.at(grid, i, j)) / h
                } else if i > j {
                    (self.at(grid, i, j) - self.at(grid, i - 1, j)) / h
                } else {
                    0.0
                }
            }
            _ => self.d_dt(grid.node(i), grid.node(j)).unwrap_or(0.0),
        }
    }

    /// The value if the kernel is the same constant on the whole triangle.
    pub fn constant_value(&self) -> Option<f64> {
        match self {
            Kernel::Constant(v) => Some(*v),
            Kernel::ExpDecay { amplitude, rate } if *rate == 0.0 => Some(*amplitude),
            Kernel::ExpDecay { .. } => None,
            Kernel::Table { values, .. } => {
                let first = *values.first()?;
                values.iter().all(|v| *v == first).then_some(first)
            }
        }
    }

    /// Whether `K(t, s)` does not depend on `t`.
    pub fn is_first_arg_invariant(&self, grid: &TimeGrid) -> bool {
        match self {
            Kernel::Constant(_) => true,
            Kernel::ExpDecay { rate, .. } => *rate == 0.0,
            Kernel::Table { .. } => {
                let n = grid.n_steps();
                (0..=n).all(|j| (j..=n).all(|i| self.at(grid, i, j) == self.at(grid, j, j)))
            }
        }
    }

    fn check(&self, grid: &TimeGrid, name: &str) -> Result<()> {
        match self {
            Kernel::Constant(v) if !v.is_finite() => Err(Error::validation(format!("{name}: non-finite value"))),
            Kernel::ExpDecay { amplitude, rate } => {
                if !amplitude.is_finite() || !rate.is_finite() || *rate < 0.0 {
                    Err(Error::validation(format!("{name}: exp_decay needs finite amplitude and rate >= 0")))
                } else {
                    Ok(())
                }
            }
            Kernel::Table { n, values } => {
                if *n != grid.n_nodes() {
                    return Err(Error::validation(format!(
                        "{name}: table has n = {n} but the grid has {} nodes",
                        grid.n_nodes()
                    )));
                }
                if values.len() != n * (n + 1) / 2 {
                    return Err(Error::validation(format!(
                        "{name}: lower-triangular table with n = {n} needs {} values, got {}",
                        n * (n + 1) / 2,
                        values.len()
                    )));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::validation(format!("{name}: non-finite table entry")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Dense lower-triangular cache of `K(t_i, t_j)`, packed row-major.
    pub fn tabulate(&self, grid: &TimeGrid) -> KernelTable {
        let n = grid.n_steps();
        let mut values = Vec::with_capacity((n + 1) * (n + 2) / 2);
        for i in 0..=n {
            for j in 0..=i {
                values.push(self.at(grid, i, j));
            }
        }
        KernelTable { values }
    }
}

/// Packed lower triangle of kernel values on the grid.
#[derive(Debug, Clone)]
pub struct KernelTable {
    values: Vec<f64>,
}

impl KernelTable {
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let start = i * (i + 1) / 2;
        &self.values[start..start + i + 1]
    }
}

/// One atom `w * δ_e` of the Lévy measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpAtom {
    pub size: f64,
    pub weight: f64,
}

/// Finite discrete Lévy measure `ν = Σ w_m δ_{e_m}`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LevyMeasure {
    atoms: Vec<JumpAtom>,
}

impl LevyMeasure {
    pub fn new(atoms: Vec<JumpAtom>) -> Result<Self> {
        for (m, a) in atoms.iter().enumerate() {
            if a.size == 0.0 || !a.size.is_finite() {
                return Err(Error::validation(format!("levy.atoms[{m}]: jump size must be finite and non-zero")));
            }
            if !(a.weight > 0.0) || !a.weight.is_finite() {
                return Err(Error::validation(format!("levy.atoms[{m}]: weight must be finite and positive")));
            }
        }
        Ok(LevyMeasure { atoms })
    }

    pub fn empty() -> Self {
        LevyMeasure { atoms: Vec::new() }
    }

    pub fn single(size: f64, weight: f64) -> Result<Self> {
        LevyMeasure::new(vec![JumpAtom { size, weight }])
    }

    pub fn atoms(&self) -> &[JumpAtom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    /// `∫ f(e) ν(de) = Σ w_m f(e_m)`.
    pub fn integral(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.atoms.iter().map(|a| a.weight * f(a.size)).sum()
    }
}

/// `levy_integral(m, f)`.
pub fn levy_integral(measure: &LevyMeasure, f: impl Fn(f64) -> f64) -> f64 {
    measure.integral(f)
}

/// The information available to the controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FiltrationMode {
    Full,
    Trivial,
    Delay { delay: f64 },
}

impl FiltrationMode {
    /// Collapses `Delay { 0 }` onto `Full`.
    pub fn normalized(self) -> Self {
        match self {
            FiltrationMode::Delay { delay: 0.0 } => FiltrationMode::Full,
            other => other,
        }
    }

    /// Node whose state generates the conditioning sigma-algebra at node `i`,
    /// or `None` for the trivial filtration.
    pub fn conditioning_node(&self, grid: &TimeGrid, i: usize) -> Option<usize> {
        match self.normalized() {
            FiltrationMode::Trivial => None,
            FiltrationMode::Full => Some(i),
            FiltrationMode::Delay { delay } => Some(grid.floor_index(grid.node(i) - delay)),
        }
    }
}

/// Sign convention for the discount rate `γ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GammaConvention {
    /// Driver `ln(cX) - γy`, `λ(t) = exp(-∫γ)`.
    #[default]
    Discounting,
    /// Driver `ln(cX) + γy`, `λ(t) = exp(+∫γ)`.
    PaperOde,
}

impl GammaConvention {
    /// Sign multiplying `γ` in the utility driver and in the exponent of `λ`.
    pub fn sign(self) -> f64 {
        match self {
            GammaConvention::Discounting => -1.0,
            GammaConvention::PaperOde => 1.0,
        }
    }
}

/// Initial value `ξ`: a constant, or a deterministic table on the nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum Initial {
    Constant(f64),
    Table(Vec<f64>),
}

impl Initial {
    pub fn at(&self, i: usize) -> f64 {
        match self {
            Initial::Constant(v) => *v,
            Initial::Table(v) => v[i],
        }
    }

    pub fn constant(&self) -> Option<f64> {
        match self {
            Initial::Constant(v) => Some(*v),
            Initial::Table(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default = "default_blocks")]
    pub n_blocks: usize,
}

fn default_blocks() -> usize {
    8
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            n_paths: 10_000,
            seed: 42,
            n_blocks: 8,
        }
    }
}

/// Regressor built from the forward state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateVariable {
    X,
    LogX,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionConfig {
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_state")]
    pub state: Vec<StateVariable>,
}

fn default_degree() -> usize {
    2
}

fn default_state() -> Vec<StateVariable> {
    vec![StateVariable::LogX]
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            degree: default_degree(),
            state: default_state(),
        }
    }
}

/// A validated model instance. Construct through [`validate_scenario`] or
/// [`ScenarioSpec::validated`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub grid: TimeGrid,
    pub xi: Initial,
    pub alpha: Kernel,
    pub beta: Kernel,
    /// One `(t, s)` kernel per Lévy atom: `π(t, s, e_m)`.
    pub pi: Vec<Kernel>,
    pub levy: LevyMeasure,
    /// `γ(t_i)` on all nodes.
    pub gamma: Vec<f64>,
    pub filtration: FiltrationMode,
    pub convention: GammaConvention,
    pub mc: McConfig,
    pub regression: RegressionConfig,
}

impl ScenarioSpec {
    /// The reference scenario: `T = 1`, `n = 100`, `ξ = 1`, `γ = 0`,
    /// `α = 0.05`, `β = 0.2`, no jumps, trivial filtration, 10⁵ paths, seed 42.
    pub fn reference() -> Self {
        let grid = TimeGrid::new(1.0, 100).expect("static grid");
        ScenarioSpec {
            grid,
            xi: Initial::Constant(1.0),
            alpha: Kernel::Constant(0.05),
            beta: Kernel::Constant(0.2),
            pi: Vec::new(),
            levy: LevyMeasure::empty(),
            gamma: vec![0.0; grid.n_nodes()],
            filtration: FiltrationMode::Trivial,
            convention: GammaConvention::Discounting,
            mc: McConfig {
                n_paths: 100_000,
                seed: 42,
                n_blocks: 8,
            },
            regression: RegressionConfig::default(),
        }
    }

    /// Adds a jump atom with `π(t, s, e) = e`.
    pub fn with_atom(mut self, size: f64, weight: f64) -> Result<Self> {
        let mut atoms = self.levy.atoms().to_vec();
        atoms.push(JumpAtom { size, weight });
        self.levy = LevyMeasure::new(atoms)?;
        self.pi.push(Kernel::Constant(size));
        self.validated()
    }

    pub fn with_constant_gamma(mut self, gamma: f64) -> Self {
        self.gamma = vec![gamma; self.grid.n_nodes()];
        self
    }

    /// Re-grids the scenario; kernel tables and γ tables must be re-supplied
    /// by the caller when they exist.
    pub fn with_grid(mut self, grid: TimeGrid) -> Result<Self> {
        let g0 = self.gamma.first().copied().unwrap_or(0.0);
        if self.gamma.iter().any(|g| *g != g0) {
            return Err(Error::validation("cannot re-grid a time-varying gamma table"));
        }
        self.grid = grid;
        self.gamma = vec![g0; grid.n_nodes()];
        self.validated()
    }

    pub fn n_atoms(&self) -> usize {
        self.levy.len()
    }

    /// Checks every invariant and returns the normalized spec.
    pub fn validated(mut self) -> Result<Self> {
        let grid = self.grid;
        match &self.xi {
            Initial::Constant(v) => {
                if !(*v > 0.0) || !v.is_finite() {
                    return Err(Error::validation(format!("xi must be positive, got {v}")));
                }
            }
            Initial::Table(v) => {
                if v.len() != grid.n_nodes() {
                    return Err(Error::validation(format!(
                        "xi table needs {} node values, got {}",
                        grid.n_nodes(),
                        v.len()
                    )));
                }
                if v.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                    return Err(Error::validation("xi table entries must be positive"));
                }
            }
        }
        self.alpha.check(&grid, "alpha_kernel")?;
        self.beta.check(&grid, "beta_kernel")?;
        if self.pi.len() != self.levy.len() {
            return Err(Error::validation(format!(
                "pi_kernel needs one kernel per Lévy atom ({}), got {}",
                self.levy.len(),
                self.pi.len()
            )));
        }
        let n = grid.n_steps();
        for (m, k) in self.pi.iter().enumerate() {
            k.check(&grid, &format!("pi_kernel[{m}]"))?;
            for i in 0..=n {
                for j in 0..=i {
                    let v = k.at(&grid, i, j);
                    if v <= -1.0 {
                        return Err(Error::Positivity(format!(
                            "1 + pi(t_{i}, t_{j}, e_{m}) = {} <= 0",
                            1.0 + v
                        )));
                    }
                }
            }
        }
        if self.gamma.len() != grid.n_nodes() {
            return Err(Error::validation(format!(
                "gamma table needs {} node values, got {}",
                grid.n_nodes(),
                self.gamma.len()
            )));
        }
        if self.gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::validation("gamma must be finite"));
        }
        if let FiltrationMode::Delay { delay } = self.filtration {
            if !(delay >= 0.0) || !delay.is_finite() {
                return Err(Error::validation("filtration.delay must be >= 0"));
            }
        }
        self.filtration = self.filtration.normalized();
        if self.mc.n_paths == 0 {
            return Err(Error::validation("mc.n_paths must be >= 1"));
        }
        if self.mc.n_blocks == 0 || !self.mc.n_paths.is_multiple_of(self.mc.n_blocks) {
            return Err(Error::validation(format!(
                "mc.n_blocks = {} must divide mc.n_paths = {}",
                self.mc.n_blocks, self.mc.n_paths
            )));
        }
        if self.regression.state.is_empty() {
            return Err(Error::validation("regression.state must name at least one variable"));
        }
        if self.regression.degree > 6 {
            return Err(Error::validation("regression.degree above 6 is not supported"));
        }
        Ok(self)
    }

    /// Back to the file representation (defaults made explicit).
    pub fn to_raw(&self) -> RawScenario {
        let kernel = |k: &Kernel| match k {
            Kernel::Constant(v) => RawKernel {
                kind: Some("constant".into()),
                value: Some(*v),
                ..Default::default()
            },
            Kernel::ExpDecay { amplitude, rate } => RawKernel {
                kind: Some("exp_decay".into()),
                amplitude: Some(*amplitude),
                rate: Some(*rate),
                ..Default::default()
            },
            Kernel::Table { n, values } => RawKernel {
                kind: Some("table".into()),
                n: Some(*n),
                table: Some(values.clone()),
                ..Default::default()
            },
        };
        RawScenario {
            grid: RawGrid {
                horizon: self.grid.horizon(),
                n_steps: self.grid.n_steps(),
            },
            xi: match &self.xi {
                Initial::Constant(v) => NumberOrTable::Number(*v),
                Initial::Table(v) => NumberOrTable::Table(v.clone()),
            },
            alpha_kernel: kernel(&self.alpha),
            beta_kernel: kernel(&self.beta),
            pi_kernel: Some(self.pi.iter().map(kernel).collect()),
            levy: RawLevy {
                atoms: self.levy.atoms().iter().map(|a| [a.size, a.weight]).collect(),
            },
            gamma: NumberOrTable::Table(self.gamma.clone()),
            filtration: self.filtration,
            gamma_sign_convention: self.convention,
            mc: self.mc,
            regression: self.regression.clone(),
        }
    }
}

/// Scenario file layout (lowercase snake_case, mirroring [`ScenarioSpec`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawScenario {
    pub grid: RawGrid,
    pub xi: NumberOrTable,
    pub alpha_kernel: RawKernel,
    pub beta_kernel: RawKernel,
    /// Defaults to `π(t, s, e_m) = e_m` for every atom.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi_kernel: Option<Vec<RawKernel>>,
    #[serde(default)]
    pub levy: RawLevy,
    #[serde(default = "zero_gamma")]
    pub gamma: NumberOrTable,
    #[serde(default = "trivial_filtration")]
    pub filtration: FiltrationMode,
    #[serde(default)]
    pub gamma_sign_convention: GammaConvention,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub regression: RegressionConfig,
}

fn zero_gamma() -> NumberOrTable {
    NumberOrTable::Number(0.0)
}

fn trivial_filtration() -> FiltrationMode {
    FiltrationMode::Trivial
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawGrid {
    pub horizon: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NumberOrTable {
    Number(f64),
    Table(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawLevy {
    /// `[size, weight]` pairs.
    #[serde(default)]
    pub atoms: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawKernel {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<f64>>,
}

impl RawKernel {
    pub fn constant(v: f64) -> Self {
        RawKernel {
            kind: Some("constant".into()),
            value: Some(v),
            ..Default::default()
        }
    }

    fn resolve(&self, name: &str) -> Result<Kernel> {
        if self.value.is_some() && self.table.is_some() {
            return Err(Error::validation(format!(
                "{name}: ambiguous kernel, both \"value\" and \"table\" are set"
            )));
        }
        let kind = match &self.kind {
            Some(k) => k.as_str(),
            None if self.table.is_some() => "table",
            None if self.amplitude.is_some() => "exp_decay",
            None if self.value.is_some() => "constant",
            None => return Err(Error::validation(format!("{name}: missing field \"kind\""))),
        };
        let need = |v: Option<f64>, field: &str| {
            v.ok_or_else(|| Error::validation(format!("{name}: {kind} kernel needs \"{field}\"")))
        };
        match kind {
            "constant" => Ok(Kernel::Constant(need(self.value, "value")?)),
            "exp_decay" => Ok(Kernel::ExpDecay {
                amplitude: need(self.amplitude, "amplitude")?,
                rate: need(self.rate, "rate")?,
            }),
            "table" => {
                let values = self
                    .table
                    .clone()
                    .ok_or_else(|| Error::validation(format!("{name}: table kernel needs \"table\"")))?;
                let n = self
                    .n
                    .ok_or_else(|| Error::validation(format!("{name}: table kernel needs explicit \"n\"")))?;
                Ok(Kernel::Table { n, values })
            }
            other => Err(Error::validation(format!("{name}: unknown kernel kind \"{other}\""))),
        }
    }
}

/// `validate_scenario(raw)`: resolves kernels, fills defaults and checks
/// every invariant of [`ScenarioSpec`].
pub fn validate_scenario(raw: &RawScenario) -> Result<ScenarioSpec> {
    let grid = TimeGrid::new(raw.grid.horizon, raw.grid.n_steps)?;
    let xi = match &raw.xi {
        NumberOrTable::Number(v) => Initial::Constant(*v),
        NumberOrTable::Table(v) => Initial::Table(v.clone()),
    };
    let atoms: Vec<JumpAtom> = raw
        .levy
        .atoms
        .iter()
        .map(|[size, weight]| JumpAtom {
            size: *size,
            weight: *weight,
        })
        .collect();
    let levy = LevyMeasure::new(atoms)?;
    let pi = match &raw.pi_kernel {
        Some(ks) => ks
            .iter()
            .enumerate()
            .map(|(m, k)| k.resolve(&format!("pi_kernel[{m}]")))
            .collect::<Result<Vec<_>>>()?,
        None => levy.atoms().iter().map(|a| Kernel::Constant(a.size)).collect(),
    };
    let gamma = match &raw.gamma {
        NumberOrTable::Number(g) => vec![*g; grid.n_nodes()],
        NumberOrTable::Table(v) => v.clone(),
    };
    ScenarioSpec {
        grid,
        xi,
        alpha: raw.alpha_kernel.resolve("alpha_kernel")?,
        beta: raw.beta_kernel.resolve("beta_kernel")?,
        pi,
        levy,
        gamma,
        filtration: raw.filtration,
        convention: raw.gamma_sign_convention,
        mc: raw.mc,
        regression: raw.regression.clone(),
    }
    .validated()
}
