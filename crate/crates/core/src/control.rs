//! Consumption controls, adjoint processes, Hamiltonians and performance
//! estimators for the log-utility cash-flow model.
//!
//! With `ψ(y) = y` and no running or terminal utility, the adjoints reduce to
//! deterministic quantities:
//!
//! ```text
//! λ(t) = exp(s ∫₀ᵗ γ),   P(t) = ∫ₜᵀ λ,   p(t) = P(t) / X(t),   c*(t) = λ(t) / P(t)
//! ```
//!
//! where `s = −1` under the discounting convention and `+1` under the ODE
//! convention.

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::recursive_utility_with_rates;
use crate::condexp::{projector_for, ForwardState};
use crate::error::{Error, Result};
use crate::fsvie::{first_variation_with_rates, simulate_with_rates, ForwardPaths, PositivityGuard};
use crate::model::{FiltrationMode, GammaConvention, Kernel, ScenarioSpec, TimeGrid};
use crate::paths::NoiseBundle;
use crate::stats::Estimate;

/// Default central-difference step of [`gateaux_derivative`].
pub const GATEAUX_STEP: f64 = 1e-3;

/// A deterministic consumption rate, evaluated on nodes `t_0 .. t_{n-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlFn {
    Constant { value: f64 },
    DeterministicTable { values: Vec<f64> },
    /// `θ · c*`
    ThetaScaledCstar { theta: f64 },
    /// `c* + θ`
    CstarPlusShift { theta: f64 },
    /// `base + height · 1_[start, start + width)`
    Bump {
        base: Box<ControlFn>,
        start: f64,
        width: f64,
        height: f64,
    },
}

impl ControlFn {
    pub fn constant(value: f64) -> Self {
        ControlFn::Constant { value }
    }

    pub fn cstar() -> Self {
        ControlFn::ThetaScaledCstar { theta: 1.0 }
    }

    pub fn table(values: Vec<f64>) -> Self {
        ControlFn::DeterministicTable { values }
    }

    pub fn bumped(self, start: f64, width: f64, height: f64) -> Self {
        ControlFn::Bump {
            base: Box::new(self),
            start,
            width,
            height,
        }
    }

    /// Values `c(t_0), ..., c(t_{n-1})`, checked finite and non-negative.
    /// Enough for the forward equation.
    pub fn schedule(&self, scenario: &ScenarioSpec) -> Result<Vec<f64>> {
        let r = self.raw_rates(scenario)?;
        if let Some(i) = r.iter().position(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(Error::Domain(format!("control value c(t_{i}) = {} is negative", r[i])));
        }
        Ok(r)
    }

    /// Values `c(t_0), ..., c(t_{n-1})`, checked strictly positive.
    pub fn rates(&self, scenario: &ScenarioSpec) -> Result<Vec<f64>> {
        let r = self.raw_rates(scenario)?;
        if let Some(i) = r.iter().position(|c| !(*c > 0.0) || !c.is_finite()) {
            return Err(Error::Domain(format!("control value c(t_{i}) = {} is not positive", r[i])));
        }
        Ok(r)
    }

    fn raw_rates(&self, scenario: &ScenarioSpec) -> Result<Vec<f64>> {
        let grid = &scenario.grid;
        let n = grid.n_steps();
        Ok(match self {
            ControlFn::Constant { value } => vec![*value; n],
            ControlFn::DeterministicTable { values } => {
                if values.len() != n {
                    return Err(Error::Dimension {
                        expected: n,
                        got: values.len(),
                    });
                }
                values.clone()
            }
            ControlFn::ThetaScaledCstar { theta } => cstar_values(scenario).into_iter().map(|c| theta * c).collect(),
            ControlFn::CstarPlusShift { theta } => cstar_values(scenario).into_iter().map(|c| c + theta).collect(),
            ControlFn::Bump {
                base,
                start,
                width,
                height,
            } => {
                check_bump(grid, *start, *width)?;
                let mut r = base.raw_rates(scenario)?;
                for (i, v) in r.iter_mut().enumerate() {
                    if in_bump(grid.node(i), *start, *width) {
                        *v += height;
                    }
                }
                r
            }
        })
    }

    /// Continuous-time rate `c(s)` and its integral `∫₀ˢ c` for the analytic
    /// oracle. Tables are read as piecewise constant from the left node.
    pub fn continuous(&self, scenario: &ScenarioSpec) -> Result<ContinuousControl> {
        let adj = ContinuousAdjoint::new(&scenario.gamma, &scenario.grid, scenario.convention);
        let table = match self {
            ControlFn::DeterministicTable { .. } => Some(self.rates(scenario)?),
            _ => None,
        };
        Ok(ContinuousControl {
            control: self.clone(),
            adjoint: adj,
            grid: scenario.grid,
            table,
        })
    }

    /// Short label for reports.
    pub fn label(&self) -> String {
        match self {
            ControlFn::Constant { value } => format!("const:{value}"),
            ControlFn::DeterministicTable { .. } => "table".into(),
            ControlFn::ThetaScaledCstar { theta } if *theta == 1.0 => "cstar".into(),
            ControlFn::ThetaScaledCstar { theta } => format!("theta:{theta}"),
            ControlFn::CstarPlusShift { theta } => format!("shift:{theta}"),
            ControlFn::Bump { base, start, width, height } => {
                format!("{}+{height}*1[{start},{})", base.label(), start + width)
            }
        }
    }
}

fn in_bump(t: f64, start: f64, width: f64) -> bool {
    const EPS: f64 = 1e-12;
    t >= start - EPS && t < start + width - EPS
}

fn check_bump(grid: &TimeGrid, start: f64, width: f64) -> Result<()> {
    if !(start >= 0.0 && width > 0.0 && start + width <= grid.horizon() + 1e-12) {
        return Err(Error::validation(format!(
            "bump [{start}, {}) is not inside [0, {})",
            start + width,
            grid.horizon()
        )));
    }
    Ok(())
}

/// Continuous evaluator behind [`ControlFn::continuous`].
#[derive(Debug, Clone)]
pub struct ContinuousControl {
    control: ControlFn,
    adjoint: ContinuousAdjoint,
    grid: TimeGrid,
    table: Option<Vec<f64>>,
}

impl ContinuousControl {
    pub fn rate(&self, s: f64) -> f64 {
        self.rate_of(&self.control, s)
    }

    pub fn cumulative(&self, s: f64) -> f64 {
        self.cumulative_of(&self.control, s)
    }

    fn rate_of(&self, c: &ControlFn, s: f64) -> f64 {
        match c {
            ControlFn::Constant { value } => *value,
            ControlFn::DeterministicTable { .. } => {
                let k = self.grid.floor_index(s).min(self.grid.n_steps() - 1);
                self.table.as_ref().expect("table resolved")[k]
            }
            ControlFn::ThetaScaledCstar { theta } => theta * self.adjoint.lambda(s) / self.adjoint.big_p(s),
            ControlFn::CstarPlusShift { theta } => self.adjoint.lambda(s) / self.adjoint.big_p(s) + theta,
            ControlFn::Bump {
                base,
                start,
                width,
                height,
            } => {
                self.rate_of(base, s)
                    + if s >= *start && s < start + width { *height } else { 0.0 }
            }
        }
    }

    fn cumulative_of(&self, c: &ControlFn, s: f64) -> f64 {
        // ∫₀ˢ c* = ln P(0) − ln P(s) since (ln P)' = −λ / P
        let cstar = || (self.adjoint.big_p(0.0) / self.adjoint.big_p(s)).ln();
        match c {
            ControlFn::Constant { value } => value * s,
            ControlFn::DeterministicTable { .. } => {
                let t = self.table.as_ref().expect("table resolved");
                let dt = self.grid.dt();
                let k = self.grid.floor_index(s).min(self.grid.n_steps() - 1);
                t[..k].iter().sum::<f64>() * dt + t[k] * (s - self.grid.node(k))
            }
            ControlFn::ThetaScaledCstar { theta } => theta * cstar(),
            ControlFn::CstarPlusShift { theta } => cstar() + theta * s,
            ControlFn::Bump {
                base,
                start,
                width,
                height,
            } => self.cumulative_of(base, s) + height * (s.min(start + width) - start).max(0.0),
        }
    }
}

/// `λ` and `P` in continuous time for `γ` piecewise constant on grid cells.
#[derive(Debug, Clone)]
pub struct ContinuousAdjoint {
    grid: TimeGrid,
    rates: Vec<f64>,
    /// `λ(t_i)`
    lambda_nodes: Vec<f64>,
    /// `∫_{t_i}^T λ`
    tail: Vec<f64>,
}

impl ContinuousAdjoint {
    pub fn new(gamma: &[f64], grid: &TimeGrid, convention: GammaConvention) -> Self {
        let n = grid.n_steps();
        let dt = grid.dt();
        let rates: Vec<f64> = (0..n).map(|j| convention.sign() * gamma[j]).collect();
        let mut lambda_nodes = vec![1.0; n + 1];
        for j in 0..n {
            lambda_nodes[j + 1] = lambda_nodes[j] * (rates[j] * dt).exp();
        }
        let mut tail = vec![0.0; n + 1];
        for j in (0..n).rev() {
            tail[j] = tail[j + 1] + lambda_nodes[j] * exp_integral(rates[j], dt);
        }
        ContinuousAdjoint {
            grid: *grid,
            rates,
            lambda_nodes,
            tail,
        }
    }

    fn cell(&self, s: f64) -> usize {
        self.grid.floor_index(s).min(self.grid.n_steps() - 1)
    }

    pub fn lambda(&self, s: f64) -> f64 {
        let k = self.cell(s);
        self.lambda_nodes[k] * (self.rates[k] * (s - self.grid.node(k))).exp()
    }

    pub fn big_p(&self, s: f64) -> f64 {
        let k = self.cell(s);
        let r = self.rates[k];
        let h = self.grid.node(k + 1) - s;
        self.tail[k + 1] + self.lambda(s) * exp_integral(r, h)
    }
}

/// `∫₀ʰ e^{r u} du`
fn exp_integral(r: f64, h: f64) -> f64 {
    if (r * h).abs() < 1e-8 {
        h * (1.0 + 0.5 * r * h)
    } else {
        (r * h).exp_m1() / r
    }
}

/// `λ(t_i) = exp(s Σ_{j<i} γ(t_j) Δt)` on all nodes.
pub fn lambda_adjoint(gamma: &[f64], grid: &TimeGrid, convention: GammaConvention) -> Vec<f64> {
    let dt = grid.dt();
    let s = convention.sign();
    let mut out = Vec::with_capacity(grid.n_nodes());
    let mut acc = 0.0;
    for i in 0..grid.n_nodes() {
        out.push((s * acc).exp());
        if i < grid.n_steps() {
            acc += gamma[i] * dt;
        }
    }
    out
}

/// `P(t_i) = Σ_{j>=i, j<n} λ(t_j) Δt`; `P(T) = 0`.
pub fn adjoint_product(gamma: &[f64], grid: &TimeGrid, convention: GammaConvention) -> Vec<f64> {
    let lambda = lambda_adjoint(gamma, grid, convention);
    let n = grid.n_steps();
    // sum first, scale once: keeps P(t_i) = T − t_i exact when λ ≡ 1
    let mut tail = 0.0;
    let mut p = vec![0.0; n + 1];
    for i in (0..n).rev() {
        tail += lambda[i];
        p[i] = tail * grid.horizon() / n as f64;
    }
    p
}

/// `c*(t_i) = λ(t_i) / P(t_i)` for `i < n`, as a table.
pub fn optimal_consumption(gamma: &[f64], grid: &TimeGrid, convention: GammaConvention) -> ControlFn {
    let lambda = lambda_adjoint(gamma, grid, convention);
    let p = adjoint_product(gamma, grid, convention);
    ControlFn::table((0..grid.n_steps()).map(|i| lambda[i] / p[i]).collect())
}

fn cstar_values(s: &ScenarioSpec) -> Vec<f64> {
    match optimal_consumption(&s.gamma, &s.grid, s.convention) {
        ControlFn::DeterministicTable { values } => values,
        _ => unreachable!(),
    }
}

/// Deterministic adjoint quantities of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState {
    pub grid: TimeGrid,
    pub lambda: Vec<f64>,
    /// `P(t_i) = p(t_i) X(t_i)`
    pub big_p: Vec<f64>,
    pub c_star: Vec<f64>,
}

impl AdjointState {
    pub fn new(scenario: &ScenarioSpec) -> Self {
        let lambda = lambda_adjoint(&scenario.gamma, &scenario.grid, scenario.convention);
        let big_p = adjoint_product(&scenario.gamma, &scenario.grid, scenario.convention);
        let c_star = cstar_values(scenario);
        AdjointState {
            grid: scenario.grid,
            lambda,
            big_p,
            c_star,
        }
    }

    /// `p(t_i)` on one path.
    pub fn p(&self, paths: &ForwardPaths, path: usize, i: usize) -> f64 {
        self.big_p[i] / paths.x(path, i)
    }

    /// `max_{i<n} |c*(t_i) P(t_i) − λ(t_i)|`.
    pub fn first_order_residual(&self) -> f64 {
        self.c_star
            .iter()
            .enumerate()
            .map(|(i, c)| (c * self.big_p[i] - self.lambda[i]).abs())
            .fold(0.0, f64::max)
    }

    /// Rows `t, lambda, P, c_star` (`c_star` is NaN at `T`).
    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.grid.n_nodes())
            .map(|i| {
                vec![
                    self.grid.node(i),
                    self.lambda[i],
                    self.big_p[i],
                    self.c_star.get(i).copied().unwrap_or(f64::NAN),
                ]
            })
            .collect()
    }
}

/// Utility functions available for `f`, `φ` and `ψ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Utility {
    #[default]
    Zero,
    Identity,
    Log,
    /// `x^γ / γ`
    Power { gamma: f64 },
}

impl Utility {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Utility::Zero => 0.0,
            Utility::Identity => x,
            Utility::Log => x.ln(),
            Utility::Power { gamma } => x.powf(gamma) / gamma,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Utility::Zero => 0.0,
            Utility::Identity => 1.0,
            Utility::Log => 1.0 / x,
            Utility::Power { gamma } => x.powf(gamma - 1.0),
        }
    }
}

/// `J(c) = E[∫₀ᵀ f(c X) ds + φ(X(T))] + ψ(Y(0))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceSpec {
    pub f: Utility,
    pub phi: Utility,
    pub psi: Utility,
}

impl Default for PerformanceSpec {
    fn default() -> Self {
        PerformanceSpec {
            f: Utility::Zero,
            phi: Utility::Zero,
            psi: Utility::Identity,
        }
    }
}

/// Per-path contributions whose mean is `J` to first order. The `ψ` term is
/// linearised around the estimated `Y(0)` so that the sample standard error
/// includes it.
fn performance_samples(
    scenario: &ScenarioSpec,
    rates: &[f64],
    spec: PerformanceSpec,
    noise: &NoiseBundle,
) -> Result<(f64, Vec<f64>)> {
    let x = simulate_with_rates(scenario, noise, rates, PositivityGuard::default())?;
    let u = recursive_utility_with_rates(scenario, rates, &x, noise)?;
    let y0 = u.y0.value;
    let n = scenario.grid.n_steps();
    let dt = scenario.grid.dt();
    let slope = spec.psi.derivative(y0);
    let samples: Vec<f64> = (0..noise.n_paths())
        .into_par_iter()
        .map(|p| {
            let running: f64 = match spec.f {
                Utility::Zero => 0.0,
                f => (0..n).map(|i| f.eval(rates[i] * x.x(p, i))).sum::<f64>() * dt,
            };
            let terminal = match spec.phi {
                Utility::Zero => 0.0,
                phi => phi.eval(x.x(p, n)),
            };
            running + terminal + slope * (u.samples[p] - y0)
        })
        .collect();
    Ok((spec.psi.eval(y0), samples))
}

/// Monte Carlo estimate of `J(c)`.
pub fn performance(
    scenario: &ScenarioSpec,
    control: &ControlFn,
    spec: PerformanceSpec,
    noise: &NoiseBundle,
) -> Result<Estimate> {
    let rates = control.rates(scenario)?;
    let (psi, samples) = performance_samples(scenario, &rates, spec, noise)?;
    let est = Estimate::from_samples(&samples);
    Ok(Estimate {
        value: psi + est.value,
        se: est.se,
    })
}

/// Closed-form `J(c)` for kernels constant in both arguments, constant `ξ`
/// and the default performance specification:
///
/// ```text
/// J = ∫₀ᵀ λ(s) [ln c(s) + ln ξ + κ s − ∫₀ˢ c] ds,
/// κ = α − β²/2 + Σ_m w_m (ln(1 + π_m) − π_m)
/// ```
///
/// integrated by the midpoint rule on `10 n` cells.
pub fn log_utility_oracle(scenario: &ScenarioSpec, control: &ControlFn) -> Result<f64> {
    let constant = |k: &Kernel, name: &str| {
        k.constant_value()
            .ok_or_else(|| Error::Unsupported(format!("log-utility oracle needs a constant {name} kernel")))
    };
    let alpha = constant(&scenario.alpha, "alpha")?;
    let beta = constant(&scenario.beta, "beta")?;
    let mut kappa = alpha - 0.5 * beta * beta;
    for (m, atom) in scenario.levy.atoms().iter().enumerate() {
        let pi = constant(&scenario.pi[m], "pi")?;
        kappa += atom.weight * ((1.0 + pi).ln() - pi);
    }
    let xi = scenario
        .xi
        .constant()
        .ok_or_else(|| Error::Unsupported("log-utility oracle needs a constant initial value".into()))?;
    let c = control.continuous(scenario)?;
    control.rates(scenario)?;
    let adj = ContinuousAdjoint::new(&scenario.gamma, &scenario.grid, scenario.convention);
    let cells = 10 * scenario.grid.n_steps();
    let h = scenario.grid.horizon() / cells as f64;
    let mut total = 0.0;
    for j in 0..cells {
        let s = (j as f64 + 0.5) * h;
        total += adj.lambda(s) * (c.rate(s).ln() + xi.ln() + kappa * s - c.cumulative(s));
    }
    Ok(total * h)
}

/// A perturbation `μ = height · 1_[start, start + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpSpec {
    pub start: f64,
    pub width: f64,
    pub height: f64,
}

/// `(J(c + θμ) − J(c − θμ)) / 2θ` with common random numbers.
pub fn gateaux_derivative(
    scenario: &ScenarioSpec,
    base: &ControlFn,
    bump: BumpSpec,
    noise: &NoiseBundle,
    theta: f64,
) -> Result<Estimate> {
    let up = base
        .clone()
        .bumped(bump.start, bump.width, theta * bump.height)
        .rates(scenario)?;
    let down = base
        .clone()
        .bumped(bump.start, bump.width, -theta * bump.height)
        .rates(scenario)?;
    let spec = PerformanceSpec::default();
    let (a, sa) = performance_samples(scenario, &up, spec, noise)?;
    let (b, sb) = performance_samples(scenario, &down, spec, noise)?;
    let diff: Vec<f64> = sa.iter().zip(&sb).map(|(x, y)| (x - y) / (2.0 * theta)).collect();
    let est = Estimate::from_samples(&diff);
    Ok(Estimate {
        value: est.value + (a - b) / (2.0 * theta),
        se: est.se,
    })
}

/// Pointwise arguments of the Hamiltonian.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianPoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub c: f64,
    pub p: f64,
    pub q: f64,
    /// one per Lévy atom
    pub r: Vec<f64>,
    pub lambda: f64,
}

fn gamma_at(scenario: &ScenarioSpec, t: f64) -> f64 {
    scenario.gamma[scenario.grid.floor_index(t).min(scenario.grid.n_steps())]
}

/// `H₀ = (α(t,t) − c) p x + β(t,t) q x + Σ_m π_m(t,t) x r_m w_m + (ln c + ln x + s γ y) λ`.
pub fn hamiltonian_h0(scenario: &ScenarioSpec, h: &HamiltonianPoint) -> Result<f64> {
    if !(h.c > 0.0 && h.x > 0.0) {
        return Err(Error::Domain(format!("H0 needs c > 0 and x > 0 (c = {}, x = {})", h.c, h.x)));
    }
    if h.r.len() != scenario.n_atoms() {
        return Err(Error::Dimension {
            expected: scenario.n_atoms(),
            got: h.r.len(),
        });
    }
    let g = &scenario.grid;
    let alpha = scenario.alpha.eval(g, h.t, h.t)?;
    let beta = scenario.beta.eval(g, h.t, h.t)?;
    let mut jumps = 0.0;
    for (m, atom) in scenario.levy.atoms().iter().enumerate() {
        jumps += scenario.pi[m].eval(g, h.t, h.t)? * h.x * h.r[m] * atom.weight;
    }
    let utility = h.c.ln() + h.x.ln() + scenario.convention.sign() * gamma_at(scenario, h.t) * h.y;
    Ok((alpha - h.c) * h.p * h.x + beta * h.q * h.x + jumps + utility * h.lambda)
}

/// `∂H₀/∂c = −p x + λ / c`.
pub fn h0_dc(h: &HamiltonianPoint) -> f64 {
    -h.p * h.x + h.lambda / h.c
}

/// Per-path adjoint `p(s)` and the projections `E[D_t p(s) | F_t]`,
/// `E[D_{t,e_m} p(s) | F_t]` for a fixed `t = t_k`, on nodes `s >= t_k`.
#[derive(Debug, Clone)]
pub struct MalliavinAdjoint {
    grid: TimeGrid,
    k: usize,
    n_paths: usize,
    /// `[p * (n + 1) + i]`
    p: Vec<f64>,
    d_brownian: Vec<f64>,
    d_jump: Vec<Vec<f64>>,
}

impl MalliavinAdjoint {
    /// `p` given on nodes and identical on every path; derivatives vanish.
    pub fn deterministic(grid: &TimeGrid, k: usize, p: &[f64], n_atoms: usize) -> Result<Self> {
        if p.len() != grid.n_nodes() {
            return Err(Error::Dimension {
                expected: grid.n_nodes(),
                got: p.len(),
            });
        }
        Ok(MalliavinAdjoint {
            grid: *grid,
            k,
            n_paths: 1,
            p: p.to_vec(),
            d_brownian: vec![0.0; p.len()],
            d_jump: vec![vec![0.0; p.len()]; n_atoms],
        })
    }

    /// Builds `p = P/X` and the projected derivatives
    /// `E[−P(s) X(s)⁻² D_t X(s) | F_t]` and `E[P/(X + D_{t,e}X) − P/X | F_t]`
    /// by regression on the state at `t_k`.
    pub fn from_paths(
        scenario: &ScenarioSpec,
        noise: &NoiseBundle,
        rates: &[f64],
        paths: &ForwardPaths,
        adjoint: &AdjointState,
        k: usize,
    ) -> Result<Self> {
        let grid = scenario.grid;
        let n = grid.n_steps();
        let w = grid.n_nodes();
        let n_paths = paths.n_paths();
        let fv = first_variation_with_rates(scenario, noise, rates, paths, k)?;
        let states = ForwardState {
            paths,
            variables: scenario.regression.state.clone(),
        };
        let proj = projector_for(FiltrationMode::Full, &grid, k, &states, scenario.regression.degree)?;
        let mut p = vec![0.0; n_paths * w];
        let mut d_brownian = vec![0.0; n_paths * w];
        let mut d_jump = vec![vec![0.0; n_paths * w]; scenario.n_atoms()];
        for i in k..=n {
            let big_p = adjoint.big_p[i];
            for q in 0..n_paths {
                p[q * w + i] = big_p / paths.x(q, i);
            }
            let target: Vec<f64> = (0..n_paths)
                .map(|q| -big_p * fv.brownian(q, i) / paths.x(q, i).powi(2))
                .collect();
            for (q, v) in proj.project(&target)?.into_iter().enumerate() {
                d_brownian[q * w + i] = v;
            }
            for (m, dj) in d_jump.iter_mut().enumerate() {
                let target: Vec<f64> = (0..n_paths)
                    .map(|q| {
                        let x = paths.x(q, i);
                        big_p / (x + fv.jump(m, q, i)) - big_p / x
                    })
                    .collect();
                for (q, v) in proj.project(&target)?.into_iter().enumerate() {
                    dj[q * w + i] = v;
                }
            }
        }
        Ok(MalliavinAdjoint {
            grid,
            k,
            n_paths,
            p,
            d_brownian,
            d_jump,
        })
    }

    pub fn node(&self) -> usize {
        self.k
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn p(&self, path: usize, i: usize) -> f64 {
        self.p[path * self.grid.n_nodes() + i]
    }

    pub fn d_brownian(&self, path: usize, i: usize) -> f64 {
        self.d_brownian[path * self.grid.n_nodes() + i]
    }

    pub fn d_jump(&self, m: usize, path: usize, i: usize) -> f64 {
        self.d_jump[m][path * self.grid.n_nodes() + i]
    }
}

/// Memory part of the Hamiltonian at `t = t_k`:
///
/// ```text
/// H₁ = x ∫ₜᵀ [∂₁α(s,t) p(s) + ∂₁β(s,t) E[D_t p(s)|F_t] + Σ_m ∂₁π_m(s,t) E[D_{t,e_m} p(s)|F_t] w_m] ds
/// ```
///
/// with trapezoidal quadrature in `s`; averaged over paths.
pub fn hamiltonian_h1(scenario: &ScenarioSpec, x: f64, adj: &MalliavinAdjoint) -> Result<Estimate> {
    let grid = &scenario.grid;
    if adj.grid != *grid {
        return Err(Error::GridMismatch("adjoint and scenario grids differ".into()));
    }
    let k = adj.k;
    let n = grid.n_steps();
    let dt = grid.dt();
    let da: Vec<f64> = (k..=n).map(|i| scenario.alpha.d_dt_at(grid, i, k)).collect();
    let db: Vec<f64> = (k..=n).map(|i| scenario.beta.d_dt_at(grid, i, k)).collect();
    let dp: Vec<Vec<f64>> = scenario
        .pi
        .iter()
        .map(|pi| (k..=n).map(|i| pi.d_dt_at(grid, i, k)).collect())
        .collect();
    if da.iter().chain(&db).chain(dp.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::Domain("kernel time derivative is not finite".into()));
    }
    let weights: Vec<f64> = scenario.levy.atoms().iter().map(|a| a.weight).collect();
    let samples: Vec<f64> = (0..adj.n_paths)
        .map(|q| {
            let mut total = 0.0;
            for (o, i) in (k..=n).enumerate() {
                let mut v = da[o] * adj.p(q, i) + db[o] * adj.d_brownian(q, i);
                for m in 0..weights.len() {
                    v += dp[m][o] * adj.d_jump(m, q, i) * weights[m];
                }
                let w = if i == k || i == n { 0.5 } else { 1.0 };
                total += w * v;
            }
            x * total * dt
        })
        .collect();
    Ok(Estimate::from_samples(&samples))
}

/// Minimum Hessian eigenvalue of `H = H₀ + H₁` over `(x, y, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcavityReport {
    pub per_sample: Vec<f64>,
    pub min_eigenvalue: f64,
}

/// Central-difference Hessian probe. `h1_slope` is `H₁ / x` (H₁ is linear in
/// `x` for this model).
pub fn concavity_probe(scenario: &ScenarioSpec, h1_slope: f64, samples: &[HamiltonianPoint]) -> Result<ConcavityReport> {
    let mut per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        let base = [s.x, s.y, s.c];
        let steps: Vec<f64> = base.iter().map(|v| 1e-4 * v.abs().max(1.0)).collect();
        let h = |v: [f64; 3]| -> Result<f64> {
            let pt = HamiltonianPoint {
                x: v[0],
                y: v[1],
                c: v[2],
                ..s.clone()
            };
            Ok(hamiltonian_h0(scenario, &pt)? + h1_slope * v[0])
        };
        let at = |da: usize, sa: f64, db: usize, sb: f64| -> Result<f64> {
            let mut v = base;
            v[da] += sa * steps[da];
            v[db] += sb * steps[db];
            h(v)
        };
        let mut hess = Matrix3::zeros();
        let f0 = h(base)?;
        for a in 0..3 {
            let plus = at(a, 1.0, a, 0.0)?;
            let minus = at(a, -1.0, a, 0.0)?;
            hess[(a, a)] = (plus - 2.0 * f0 + minus) / (steps[a] * steps[a]);
            for b in a + 1..3 {
                let v = (at(a, 1.0, b, 1.0)? - at(a, 1.0, b, -1.0)? - at(a, -1.0, b, 1.0)? + at(a, -1.0, b, -1.0)?)
                    / (4.0 * steps[a] * steps[b]);
                hess[(a, b)] = v;
                hess[(b, a)] = v;
            }
        }
        let eig = SymmetricEigen::new(hess).eigenvalues;
        per_sample.push(eig.iter().copied().fold(f64::INFINITY, f64::min));
    }
    let min_eigenvalue = per_sample.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ConcavityReport {
        per_sample,
        min_eigenvalue,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LevyMeasure;
    use proptest::prelude::*;

    fn s0() -> ScenarioSpec {
        ScenarioSpec::reference()
    }

    fn grid(t: f64, n: usize) -> TimeGrid {
        TimeGrid::new(t, n).unwrap()
    }

    #[test]
    fn lambda_examples() {
        let g = grid(1.0, 100);
        let zero = vec![0.0; 101];
        let one = vec![1.0; 101];
        assert!(lambda_adjoint(&zero, &g, GammaConvention::Discounting).iter().all(|v| *v == 1.0));
        let d = lambda_adjoint(&one, &g, GammaConvention::Discounting);
        assert!((d[100] - (-1f64).exp()).abs() < 1e-12);
        let u = lambda_adjoint(&one, &g, GammaConvention::PaperOde);
        assert!((u[100] - 1f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn adjoint_product_examples() {
        let g = grid(1.0, 100);
        let p = adjoint_product(&vec![0.0; 101], &g, GammaConvention::Discounting);
        for (i, v) in p.iter().enumerate() {
            assert!((v - (1.0 - g.node(i))).abs() < 1e-12);
        }
        assert_eq!(p[100], 0.0);
        let p1 = adjoint_product(&vec![1.0; 101], &g, GammaConvention::Discounting);
        // left-point sum of e^{−s}
        assert!((p1[0] - (1.0 - (-1f64).exp())).abs() < 0.01 * 0.64);
        assert!(p1.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn cstar_examples() {
        let c = cstar_values(&s0());
        for (i, v) in c.iter().enumerate() {
            assert!((v - 1.0 / (1.0 - i as f64 / 100.0)).abs() < 1e-9);
        }
        assert!((c[0] - 1.0).abs() < 1e-12 && (c[50] - 2.0).abs() < 1e-9);
        let two = s0().with_grid(grid(2.0, 100)).unwrap();
        assert!((cstar_values(&two)[0] - 0.5).abs() < 1e-12);
        let disc = s0().with_constant_gamma(1.0);
        let c0 = cstar_values(&disc)[0];
        assert!((c0 - 1.0 / (1.0 - (-1f64).exp())).abs() < 0.01 * 1.582);
    }

    #[test]
    fn continuous_adjoint_matches_closed_forms() {
        let s = s0().with_constant_gamma(1.0);
        let a = ContinuousAdjoint::new(&s.gamma, &s.grid, s.convention);
        for t in [0.0, 0.123, 0.5, 0.999] {
            assert!((a.lambda(t) - (-t).exp()).abs() < 1e-12);
            assert!((a.big_p(t) - ((-t).exp() - (-1f64).exp())).abs() < 1e-12);
        }
        let c = ControlFn::cstar().continuous(&s).unwrap();
        let h = 1e-6;
        let num = (c.cumulative(0.4 + h) - c.cumulative(0.4 - h)) / (2.0 * h);
        assert!((num - c.rate(0.4)).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn first_order_condition_under_both_conventions(
            gamma in proptest::collection::vec(-2.0f64..2.0, 51),
            horizon in 0.2f64..3.0,
            growth in any::<bool>(),
        ) {
            let g = grid(horizon, 50);
            let conv = if growth { GammaConvention::PaperOde } else { GammaConvention::Discounting };
            let lambda = lambda_adjoint(&gamma, &g, conv);
            let p = adjoint_product(&gamma, &g, conv);
            let ControlFn::DeterministicTable { values } = optimal_consumption(&gamma, &g, conv) else { unreachable!() };
            prop_assert_eq!(lambda[0], 1.0);
            prop_assert_eq!(p[50], 0.0);
            for i in 0..50 {
                prop_assert!((values[i] * p[i] - lambda[i]).abs() <= 1e-12 * lambda[i].max(1.0));
            }
        }

        #[test]
        fn cstar_ignores_dynamics(alpha in -1.0f64..1.0, beta in 0.0f64..1.0, xi in 0.1f64..10.0, e in -0.5f64..0.5) {
            let base = s0().with_constant_gamma(0.3);
            let mut other = base.clone().with_atom(e, 1.0).unwrap();
            other.alpha = Kernel::Constant(alpha);
            other.beta = Kernel::Constant(beta);
            other.xi = crate::model::Initial::Constant(xi);
            prop_assert_eq!(cstar_values(&base), cstar_values(&other));
        }
    }

    #[test]
    fn adjoint_state_invariants() {
        let a = AdjointState::new(&s0().with_constant_gamma(0.7));
        assert_eq!(a.lambda[0], 1.0);
        assert_eq!(a.big_p[100], 0.0);
        assert!(a.first_order_residual() <= 1e-12);
        assert!(a.rows()[100][3].is_nan());
    }

    #[test]
    fn control_rates_and_validation() {
        let s = s0();
        assert_eq!(ControlFn::constant(2.0).rates(&s).unwrap(), vec![2.0; 100]);
        let bumped = ControlFn::constant(1.0).bumped(0.4, 0.1, 1.0).rates(&s).unwrap();
        assert_eq!(bumped.iter().filter(|v| **v == 2.0).count(), 10);
        assert_eq!(bumped[40], 2.0);
        assert_eq!(bumped[50], 1.0);
        assert!(ControlFn::constant(1.0).bumped(0.4, 0.1, -2.0).rates(&s).is_err());
        assert!(ControlFn::constant(1.0).bumped(0.95, 0.1, 1.0).rates(&s).is_err());
        assert!(ControlFn::table(vec![1.0; 3]).rates(&s).is_err());
        assert!(ControlFn::constant(0.0).rates(&s).is_err());
        let shift = ControlFn::CstarPlusShift { theta: 0.5 }.rates(&s).unwrap();
        assert!((shift[50] - 2.5).abs() < 1e-9);
    }

    #[test]
    fn oracle_examples() {
        let s = s0();
        let j1 = log_utility_oracle(&s, &ControlFn::constant(1.0)).unwrap();
        assert!((j1 + 0.485).abs() < 1e-12, "{j1}");
        let js = log_utility_oracle(&s, &ControlFn::cstar()).unwrap();
        assert!((js - 0.015).abs() < 1e-12, "{js}");
        let jumpy = s.clone().with_atom(-0.1, 0.5).unwrap();
        let jj = log_utility_oracle(&jumpy, &ControlFn::constant(1.0)).unwrap();
        let expected = -0.485 + 0.5 * (0.9f64.ln() + 0.1) * 0.5;
        assert!((jj - expected).abs() < 1e-12, "{jj} vs {expected}");
        assert!((jj + 0.486340).abs() < 1e-6);
        for theta in [0.7, 0.85, 1.15, 1.3] {
            let j = log_utility_oracle(&s, &ControlFn::ThetaScaledCstar { theta }).unwrap();
            let exact = theta.ln() + 1.0 - theta + 0.015;
            // midpoint rule on the log singularity at T: error ≈ ½ ln 2 · |θ − 1| h
            assert!((j - exact).abs() < 0.5 * 2f64.ln() * (theta - 1.0f64).abs() * 1e-3 + 1e-9, "{theta}: {j} vs {exact}");
            assert!(j < js);
        }
        let mut decay = s.clone();
        decay.alpha = Kernel::ExpDecay {
            amplitude: 0.05,
            rate: 1.0,
        };
        assert!(matches!(log_utility_oracle(&decay, &ControlFn::constant(1.0)), Err(Error::Unsupported(_))));
    }

    #[test]
    fn oracle_with_discounting_matches_direct_integral() {
        let s = s0().with_constant_gamma(0.5);
        let j = log_utility_oracle(&s, &ControlFn::constant(1.0)).unwrap();
        // ∫₀¹ e^{−s/2} (−0.97 s) ds
        let exact = -0.97 * (4.0 - 6.0 * (-0.5f64).exp());
        assert!((j - exact).abs() < 1e-6, "{j} vs {exact}");
    }

    #[test]
    fn performance_against_oracle() {
        let s = s0();
        let noise = NoiseBundle::generate(&s.grid, &s.levy, 20_000, 3, 4).unwrap();
        let spec = PerformanceSpec::default();
        let j = performance(&s, &ControlFn::cstar(), spec, &noise).unwrap();
        assert!(j.within(0.015, 3.0), "{j:?}");
        let jt = performance(&s, &ControlFn::ThetaScaledCstar { theta: 1.1 }, spec, &noise).unwrap();
        let exact = 1.1f64.ln() + 1.0 - 1.1 + 0.015;
        assert!(jt.within(exact, 3.0), "{jt:?} vs {exact}");
        assert!(j.se < 0.01);
    }

    #[test]
    fn performance_catalog() {
        let mut s = s0();
        s.beta = Kernel::Constant(0.0);
        let noise = NoiseBundle::generate(&s.grid, &LevyMeasure::empty(), 8, 1, 4).unwrap();
        // X deterministic: (1 − 0.95Δt)^i, φ = id gives X(T)
        let spec = PerformanceSpec {
            f: Utility::Zero,
            phi: Utility::Identity,
            psi: Utility::Zero,
        };
        let j = performance(&s, &ControlFn::constant(1.0), spec, &noise).unwrap();
        assert!((j.value - 0.9905f64.powi(100)).abs() < 1e-12);
        assert!(j.se < 1e-12);
        let spec = PerformanceSpec {
            f: Utility::Log,
            phi: Utility::Zero,
            psi: Utility::Zero,
        };
        let j = performance(&s, &ControlFn::constant(1.0), spec, &noise).unwrap();
        let expected: f64 = (0..100).map(|i| i as f64 * 0.9905f64.ln() * 0.01).sum();
        assert!((j.value - expected).abs() < 1e-12);
        assert_eq!(Utility::Power { gamma: 0.5 }.eval(4.0), 4.0);
    }

    #[test]
    fn zero_bump_gives_exact_zero() {
        let s = s0();
        let noise = NoiseBundle::generate(&s.grid, &s.levy, 400, 3, 4).unwrap();
        let bump = BumpSpec {
            start: 0.4,
            width: 0.1,
            height: 0.0,
        };
        let d = gateaux_derivative(&s, &ControlFn::constant(1.0), bump, &noise, GATEAUX_STEP).unwrap();
        assert_eq!(d.value, 0.0);
        assert_eq!(d.se, 0.0);
    }

    #[test]
    fn gateaux_sign_and_size() {
        let s = s0();
        let noise = NoiseBundle::generate(&s.grid, &s.levy, 2_000, 3, 4).unwrap();
        let bump = BumpSpec {
            start: 0.4,
            width: 0.1,
            height: 1.0,
        };
        let d = gateaux_derivative(&s, &ControlFn::constant(1.0), bump, &noise, GATEAUX_STEP).unwrap();
        assert!((d.value - 0.045).abs() < 1e-3, "{d:?}");
        let at_star = gateaux_derivative(&s, &ControlFn::cstar(), bump, &noise, GATEAUX_STEP).unwrap();
        assert!(at_star.value.abs() < 1e-3, "{at_star:?}");
    }

    fn point(x: f64, c: f64, p: f64, lambda: f64) -> HamiltonianPoint {
        HamiltonianPoint {
            t: 0.3,
            x,
            y: 0.0,
            c,
            p,
            q: 0.0,
            r: vec![],
            lambda,
        }
    }

    #[test]
    fn h0_examples() {
        let s = s0();
        assert!((hamiltonian_h0(&s, &point(1.0, 1.0, 0.5, 1.0)).unwrap() + 0.475).abs() < 1e-12);
        let mut z = point(2.3, 0.7, 0.0, 0.0);
        z.y = 4.0;
        assert_eq!(hamiltonian_h0(&s, &z).unwrap(), 0.0);
        let pt = point(1.0, 2.0, 0.5, 1.0);
        assert_eq!(h0_dc(&pt), 0.0);
        let h = 1e-5;
        let num = (hamiltonian_h0(&s, &point(1.0, 2.0 + h, 0.5, 1.0)).unwrap()
            - hamiltonian_h0(&s, &point(1.0, 2.0 - h, 0.5, 1.0)).unwrap())
            / (2.0 * h);
        assert!(num.abs() < 1e-8);
        assert!(hamiltonian_h0(&s, &point(0.0, 1.0, 0.5, 1.0)).is_err());
        assert!(hamiltonian_h0(&s, &point(1.0, -1.0, 0.5, 1.0)).is_err());
    }

    #[test]
    fn h1_examples() {
        let mut s = s0();
        s.alpha = Kernel::ExpDecay {
            amplitude: 0.05,
            rate: 1.0,
        };
        s.beta = Kernel::Constant(0.0);
        let s = s.with_grid(grid(1.0, 1000)).unwrap();
        let p: Vec<f64> = s.grid.nodes().iter().map(|t| 1.0 - t).collect();
        let adj = MalliavinAdjoint::deterministic(&s.grid, 0, &p, 0).unwrap();
        let h1 = hamiltonian_h1(&s, 1.0, &adj).unwrap();
        let exact = -0.05 * (-1f64).exp();
        assert!((h1.value - exact).abs() < 1e-6, "{h1:?} vs {exact}");
        assert_eq!(hamiltonian_h1(&s, 0.0, &adj).unwrap().value, 0.0);

        let flat = s0().with_atom(-0.1, 1.0).unwrap();
        let noise = NoiseBundle::generate(&flat.grid, &flat.levy, 200, 2, 4).unwrap();
        let rates = ControlFn::constant(1.0).rates(&flat).unwrap();
        let x = simulate_with_rates(&flat, &noise, &rates, PositivityGuard::default()).unwrap();
        let st = AdjointState::new(&flat);
        let adj = MalliavinAdjoint::from_paths(&flat, &noise, &rates, &x, &st, 20).unwrap();
        assert_eq!(hamiltonian_h1(&flat, 1.3, &adj).unwrap().value, 0.0);
    }

    #[test]
    fn projected_adjoint_derivatives_match_shortcuts() {
        let s = s0().with_atom(-0.1, 1.0).unwrap();
        let noise = NoiseBundle::generate(&s.grid, &s.levy, 4_000, 2, 4).unwrap();
        let rates = ControlFn::constant(1.0).rates(&s).unwrap();
        let x = simulate_with_rates(&s, &noise, &rates, PositivityGuard::default()).unwrap();
        let st = AdjointState::new(&s);
        let k = 30;
        let adj = MalliavinAdjoint::from_paths(&s, &noise, &rates, &x, &st, k).unwrap();
        for i in [k, 60, 99] {
            let mean = |f: &dyn Fn(usize) -> f64| (0..4_000).map(f).sum::<f64>() / 4_000.0;
            let db = mean(&|q| adj.d_brownian(q, i));
            let dj = mean(&|q| adj.d_jump(0, q, i));
            let pbar = mean(&|q| adj.p(q, i));
            assert!((db + 0.2 * pbar).abs() < 1e-10 * pbar.abs().max(1.0), "{db} vs {}", -0.2 * pbar);
            let shortcut = -pbar * (-0.1) / 0.9;
            assert!((dj - shortcut).abs() < 1e-10 * pbar.abs().max(1.0), "{dj} vs {shortcut}");
        }
    }

    #[test]
    fn concavity_examples() {
        let s = s0();
        let r = concavity_probe(&s, 0.0, &[point(1.0, 1.0, 0.0, 1.0)]).unwrap();
        assert!((r.min_eigenvalue + 1.0).abs() < 1e-4, "{r:?}");
        let r = concavity_probe(&s, 0.0, &[point(1.3, 0.8, 0.0, 0.0)]).unwrap();
        assert!(r.min_eigenvalue.abs() < 1e-6, "{r:?}");
        let r = concavity_probe(&s, 0.7, &[point(1.0, 3.0, 0.2, 1.0), point(2.0, 1.0, 0.1, 0.5)]).unwrap();
        assert_eq!(r.per_sample.len(), 2);
        assert!(r.min_eigenvalue < 0.0);
    }
}
