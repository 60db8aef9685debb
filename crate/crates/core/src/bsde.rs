//! Backward SDEs with jumps by regression-based explicit backward Euler:
//!
//! ```text
//! Z_i   = E_i[(Y_{i+1} − Ȳ_{i+1}) ΔB_i] / Δt
//! K_i,m = E_i[(Y_{i+1} − Ȳ_{i+1}) ΔÑ_i,m] / (w_m Δt)
//! Y_i   = E_i[Y_{i+1} + g(t_i, Y_{i+1}, Z_i, K_i) Δt]
//! ```
//!
//! `E_i` is the least-squares projection of [`crate::condexp`] and `Ȳ_{i+1}`
//! the sample mean.

use rayon::prelude::*;

use crate::condexp::{annotate, projector_for, BrownianState, Projector, StateProvider};
use crate::control::ControlFn;
use crate::error::{Error, Result};
use crate::fsvie::ForwardPaths;
use crate::model::{FiltrationMode, ScenarioSpec, TimeGrid};
use crate::paths::NoiseBundle;
use crate::stats::{mean_var, Estimate};

/// Arguments passed to a driver at node `i` on path `path`.
#[derive(Debug, Clone, Copy)]
pub struct DriverInput<'a> {
    pub i: usize,
    pub t: f64,
    pub path: usize,
    pub y: f64,
    pub z: f64,
    pub k: &'a [f64],
}

pub trait Driver: Sync {
    fn eval(&self, input: &DriverInput<'_>) -> f64;
}

impl<F> Driver for F
where
    F: Fn(&DriverInput<'_>) -> f64 + Sync,
{
    fn eval(&self, input: &DriverInput<'_>) -> f64 {
        self(input)
    }
}

pub fn zero_driver(_: &DriverInput<'_>) -> f64 {
    0.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsdeOptions {
    pub mode: FiltrationMode,
    pub degree: usize,
    /// Whether to estimate `Z` and `K`. Drivers that ignore them can skip
    /// the extra regressions.
    pub martingale_terms: bool,
}

impl Default for BsdeOptions {
    fn default() -> Self {
        BsdeOptions {
            mode: FiltrationMode::Full,
            degree: 2,
            martingale_terms: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BsdeSolution {
    grid: TimeGrid,
    n_paths: usize,
    n_atoms: usize,
    /// `[i * n_paths + p]`, nodes `0..=n`
    y: Vec<f64>,
    /// `[i * n_paths + p]`, nodes `0..n`; empty when not estimated
    z: Vec<f64>,
    /// `[(i * n_paths + p) * n_atoms + m]`
    k: Vec<f64>,
    /// pathwise `Y_n + Σ_{j>=i} g_j Δt` at `i = 0`
    accumulated: Vec<f64>,
    /// R² of the `Y` regression per step
    pub r_squared: Vec<f64>,
}

impl BsdeSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn y(&self, p: usize, i: usize) -> f64 {
        self.y[i * self.n_paths + p]
    }

    pub fn y_column(&self, i: usize) -> &[f64] {
        &self.y[i * self.n_paths..(i + 1) * self.n_paths]
    }

    pub fn has_martingale_terms(&self) -> bool {
        !self.z.is_empty()
    }

    pub fn z(&self, p: usize, i: usize) -> f64 {
        self.z.get(i * self.n_paths + p).copied().unwrap_or(0.0)
    }

    pub fn z_column(&self, i: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.z(p, i)).collect()
    }

    pub fn k(&self, p: usize, i: usize, m: usize) -> f64 {
        self.k.get((i * self.n_paths + p) * self.n_atoms + m).copied().unwrap_or(0.0)
    }

    /// `Y(0)` with a standard error from the pathwise accumulated driver.
    pub fn y0(&self) -> Estimate {
        Estimate::from_samples(&self.accumulated)
    }

    pub fn y0_samples(&self) -> &[f64] {
        &self.accumulated
    }

    /// Rows `t, mean_y, se_y, mean_z, mean_k0, ...`.
    pub fn summary_rows(&self) -> Vec<Vec<f64>> {
        (0..self.grid.n_nodes())
            .map(|i| {
                let (m, v) = mean_var(self.y_column(i));
                let mut row = vec![self.grid.node(i), m, (v / self.n_paths as f64).sqrt()];
                let last = i == self.grid.n_steps();
                let zbar = if last {
                    f64::NAN
                } else {
                    (0..self.n_paths).map(|p| self.z(p, i)).sum::<f64>() / self.n_paths as f64
                };
                row.push(zbar);
                for m in 0..self.n_atoms {
                    row.push(if last {
                        f64::NAN
                    } else {
                        (0..self.n_paths).map(|p| self.k(p, i, m)).sum::<f64>() / self.n_paths as f64
                    });
                }
                row
            })
            .collect()
    }

    pub fn summary_header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["t", "mean_y", "se_y", "mean_z"].iter().map(|s| s.to_string()).collect();
        h.extend((0..self.n_atoms).map(|m| format!("mean_k{m}")));
        h
    }
}

/// Solves the BSDE on `[t_0, T]` with regressors from `states`.
pub fn solve_bsde(
    terminal: &[f64],
    driver: &dyn Driver,
    noise: &NoiseBundle,
    states: &dyn StateProvider,
    opts: BsdeOptions,
) -> Result<BsdeSolution> {
    let grid = *noise.grid();
    let projectors = (0..grid.n_steps())
        .map(|i| projector_for(opts.mode, &grid, i, states, opts.degree))
        .collect::<Result<Vec<_>>>()?;
    solve_bsde_with(terminal, driver, noise, &projectors, 0, opts.martingale_terms)
}

/// Backward Euler on `[t_start, T]` with precomputed per-node projectors
/// (`projectors[i]` for `i` in `0..n`).
pub fn solve_bsde_with(
    terminal: &[f64],
    driver: &dyn Driver,
    noise: &NoiseBundle,
    projectors: &[Projector],
    start: usize,
    martingale_terms: bool,
) -> Result<BsdeSolution> {
    let grid = *noise.grid();
    let n = grid.n_steps();
    let n_paths = noise.n_paths();
    let n_atoms = noise.n_atoms();
    let dt = grid.dt();
    if terminal.len() != n_paths {
        return Err(Error::Dimension {
            expected: n_paths,
            got: terminal.len(),
        });
    }
    if terminal.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite terminal value"));
    }
    if projectors.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: projectors.len(),
        });
    }

    let mut y = vec![0.0; (n + 1) * n_paths];
    let mut z = if martingale_terms { vec![0.0; n * n_paths] } else { vec![] };
    let mut k = if martingale_terms { vec![0.0; n * n_paths * n_atoms] } else { vec![] };
    let mut r_squared = vec![f64::NAN; n];
    y[n * n_paths..].copy_from_slice(terminal);
    let mut acc = terminal.to_vec();
    let weights: Vec<f64> = noise.levy().atoms().iter().map(|a| a.weight).collect();

    for i in (start..n).rev() {
        let proj = &projectors[i];
        let (head, tail) = y.split_at_mut((i + 1) * n_paths);
        let next = &tail[..n_paths];
        let t = grid.node(i);

        let mut zi = vec![0.0; n_paths];
        let mut ki = vec![0.0; n_paths * n_atoms];
        if martingale_terms {
            // the sample mean of Y_{i+1} times an increment has zero expectation
            let ybar = next.iter().sum::<f64>() / n_paths as f64;
            let tz: Vec<f64> = (0..n_paths).map(|p| (next[p] - ybar) * noise.increment(p, i) / dt).collect();
            zi = proj.project(&tz).map_err(|e| annotate(e, i))?;
            for m in 0..n_atoms {
                let tk: Vec<f64> = (0..n_paths)
                    .map(|p| (next[p] - ybar) * noise.compensated_count(p, i, m) / (weights[m] * dt))
                    .collect();
                let fit = proj.project(&tk).map_err(|e| annotate(e, i))?;
                for p in 0..n_paths {
                    ki[p * n_atoms + m] = fit[p];
                }
            }
            z[i * n_paths..(i + 1) * n_paths].copy_from_slice(&zi);
            k[i * n_paths * n_atoms..(i + 1) * n_paths * n_atoms].copy_from_slice(&ki);
        }

        let g: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                driver.eval(&DriverInput {
                    i,
                    t,
                    path: p,
                    y: next[p],
                    z: zi[p],
                    k: &ki[p * n_atoms..(p + 1) * n_atoms],
                }) * dt
            })
            .collect();
        if let Some(p) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("driver is not finite on path {p} at step {i}")));
        }
        let target: Vec<f64> = next.iter().zip(&g).map(|(a, b)| a + b).collect();
        let coefs = proj.coefs(&target).map_err(|e| annotate(e, i))?;
        r_squared[i] = proj.diagnostics(&target, &coefs).r_squared;
        let cur = &mut head[i * n_paths..];
        cur.par_iter_mut().enumerate().for_each(|(p, v)| *v = proj.fitted_at(&coefs, p));
        acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }

    Ok(BsdeSolution {
        grid,
        n_paths,
        n_atoms,
        y,
        z,
        k,
        accumulated: acc,
        r_squared,
    })
}

/// Regression mode and state used by the scenario-level solvers.
pub(crate) fn scenario_mode(scenario: &ScenarioSpec) -> FiltrationMode {
    match scenario.filtration {
        FiltrationMode::Trivial => FiltrationMode::Trivial,
        _ => FiltrationMode::Full,
    }
}

/// `Y(0)` of the recursive-utility BSDE with pathwise samples.
#[derive(Debug, Clone)]
pub struct UtilityEstimate {
    pub y0: Estimate,
    pub samples: Vec<f64>,
}

/// Recursive utility: driver `ln(c(t) X(t)) + s·γ(t) y` with `s = −1`
/// (discounting) or `+1` (growth convention `PaperOde`), terminal value 0.
pub fn recursive_utility(
    scenario: &ScenarioSpec,
    control: &ControlFn,
    paths: &ForwardPaths,
    noise: &NoiseBundle,
) -> Result<UtilityEstimate> {
    let rates = control.rates(scenario)?;
    recursive_utility_with_rates(scenario, &rates, paths, noise)
}

pub fn recursive_utility_with_rates(
    scenario: &ScenarioSpec,
    rates: &[f64],
    paths: &ForwardPaths,
    noise: &NoiseBundle,
) -> Result<UtilityEstimate> {
    let n = scenario.grid.n_steps();
    if let Some(i) = rates.iter().position(|c| !(*c > 0.0)) {
        return Err(Error::Domain(format!("consumption c(t_{i}) = {} is not positive", rates[i])));
    }
    for p in 0..paths.n_paths() {
        if let Some(i) = (0..n).find(|&i| !(paths.x(p, i) > 0.0)) {
            return Err(Error::Domain(format!("X = {} on path {p} at step {i}", paths.x(p, i))));
        }
    }
    let sign = scenario.convention.sign();
    let gamma = &scenario.gamma;
    let driver = |d: &DriverInput<'_>| (rates[d.i] * paths.x(d.path, d.i)).ln() + sign * gamma[d.i] * d.y;
    let mode = scenario_mode(scenario);
    let states = crate::condexp::ForwardState {
        paths,
        variables: scenario.regression.state.clone(),
    };
    let sol = solve_bsde(
        &vec![0.0; noise.n_paths()],
        &driver,
        noise,
        &states,
        BsdeOptions {
            mode,
            degree: scenario.regression.degree,
            martingale_terms: false,
        },
    )?;
    Ok(UtilityEstimate {
        y0: sol.y0(),
        samples: sol.accumulated,
    })
}

/// Brownian/compensated-level regressors for BSDEs without a forward state.
pub fn noise_states(noise: &NoiseBundle) -> BrownianState<'_> {
    BrownianState { noise }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fsvie::simulate_fsvie;
    use crate::model::{Kernel, LevyMeasure};

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn squared_brownian_terminal() {
        let g = grid(50);
        let noise = NoiseBundle::generate(&g, &LevyMeasure::empty(), 20_000, 3, 4).unwrap();
        let terminal: Vec<f64> = (0..noise.n_paths()).map(|p| noise.brownian_level(p, 50).powi(2)).collect();
        let sol = solve_bsde(&terminal, &zero_driver, &noise, &noise_states(&noise), BsdeOptions::default()).unwrap();
        let y0 = sol.y0();
        assert!(y0.within(1.0, 3.0), "{y0:?}");
        // at node 0 the state is constant, so Y_0 is the plain mean
        assert!((sol.y(0, 0) - y0.value).abs() < 1e-10);
        // Y_i ≈ B(t_i)² + 1 − t_i, Z_i ≈ 2 B(t_i)
        let i = 25;
        for p in 0..20 {
            let b = noise.brownian_level(p, i);
            assert!((sol.y(p, i) - (b * b + 0.5)).abs() < 0.05, "{} vs {}", sol.y(p, i), b * b + 0.5);
            assert!((sol.z(p, i) - 2.0 * b).abs() < 0.4, "{} vs {}", sol.z(p, i), 2.0 * b);
        }
    }

    #[test]
    fn linear_driver_matches_exponential() {
        let g = grid(100);
        let noise = NoiseBundle::generate(&g, &LevyMeasure::empty(), 64, 1, 4).unwrap();
        let driver = |d: &DriverInput<'_>| d.y;
        let sol = solve_bsde(&[1.0; 64], &driver, &noise, &noise_states(&noise), BsdeOptions::default()).unwrap();
        let y0 = sol.y(0, 0);
        assert!((y0 - 1.01f64.powi(100)).abs() < 1e-10);
        assert!(((y0 - 1f64.exp()) / 1f64.exp()).abs() < 0.02);
    }

    #[test]
    fn null_solution() {
        let g = grid(10);
        let levy = LevyMeasure::single(0.1, 1.0).unwrap();
        let noise = NoiseBundle::generate(&g, &levy, 40, 1, 4).unwrap();
        let sol = solve_bsde(&[0.0; 40], &zero_driver, &noise, &noise_states(&noise), BsdeOptions::default()).unwrap();
        for i in 0..10 {
            for p in 0..40 {
                assert_eq!(sol.y(p, i), 0.0);
                assert_eq!(sol.z(p, i), 0.0);
                assert_eq!(sol.k(p, i, 0), 0.0);
            }
        }
    }

    #[test]
    fn wiener_integral_gives_flat_z() {
        let g = grid(20);
        let noise = NoiseBundle::generate(&g, &LevyMeasure::empty(), 20_000, 8, 4).unwrap();
        let f = |t: f64| 1.0 + t;
        let terminal: Vec<f64> = (0..noise.n_paths())
            .map(|p| (0..20).map(|i| f(g.node(i)) * noise.increment(p, i)).sum())
            .collect();
        // the running integral is the Markov state of this functional
        struct Running(Vec<Vec<f64>>);
        impl StateProvider for Running {
            fn n_paths(&self) -> usize {
                self.0[0].len()
            }
            fn states_at(&self, node: usize) -> Result<crate::condexp::StateMatrix> {
                Ok(crate::condexp::StateMatrix::from_column(&self.0[node]))
            }
        }
        let mut levels = vec![vec![0.0; noise.n_paths()]];
        for i in 0..20 {
            let prev = &levels[i];
            let next = (0..noise.n_paths()).map(|p| prev[p] + f(g.node(i)) * noise.increment(p, i)).collect();
            levels.push(next);
        }
        let sol = solve_bsde(&terminal, &zero_driver, &noise, &Running(levels), BsdeOptions::default()).unwrap();
        for i in [0, 7, 19] {
            let col = sol.z_column(i);
            let est = Estimate::from_samples(&col);
            let se_target = (mean_var(
                &(0..noise.n_paths())
                    .map(|p| terminal[p] * noise.increment(p, i) / g.dt())
                    .collect::<Vec<_>>(),
            )
            .1 / noise.n_paths() as f64)
                .sqrt();
            // Z is flat up to regression noise in the two non-constant terms
            let (_, var) = mean_var(&col);
            assert!(var.sqrt() < 4.0 * 2f64.sqrt() * se_target, "sd {} vs {se_target}", var.sqrt());
            assert!((est.value - f(g.node(i))).abs() < 3.0 * se_target, "{est:?} at {i}");
        }
    }

    #[test]
    fn jump_martingale_representation() {
        let g = grid(20);
        let levy = LevyMeasure::single(0.3, 2.0).unwrap();
        let noise = NoiseBundle::generate(&g, &levy, 20_000, 5, 4).unwrap();
        let terminal: Vec<f64> = (0..noise.n_paths()).map(|p| noise.compensated_level(p, 20, 0)).collect();
        let sol = solve_bsde(&terminal, &zero_driver, &noise, &noise_states(&noise), BsdeOptions::default()).unwrap();
        let kbar: f64 = (0..noise.n_paths()).map(|p| sol.k(p, 10, 0)).sum::<f64>() / noise.n_paths() as f64;
        assert!((kbar - 1.0).abs() < 0.05, "{kbar}");
    }

    #[test]
    fn comparison_is_monotone() {
        let g = grid(20);
        let noise = NoiseBundle::generate(&g, &LevyMeasure::empty(), 4_000, 2, 4).unwrap();
        let driver = |d: &DriverInput<'_>| 0.5 * d.y.sin();
        let lo: Vec<f64> = (0..noise.n_paths()).map(|p| noise.brownian_level(p, 20)).collect();
        let hi: Vec<f64> = lo.iter().map(|v| v + 0.1).collect();
        let s = noise_states(&noise);
        let a = solve_bsde(&lo, &driver, &noise, &s, BsdeOptions::default()).unwrap().y0();
        let b = solve_bsde(&hi, &driver, &noise, &s, BsdeOptions::default()).unwrap().y0();
        assert!(b.value >= a.value - 3.0 * a.se.max(b.se));
    }

    #[test]
    fn terminal_length_is_checked() {
        let g = grid(5);
        let noise = NoiseBundle::generate(&g, &LevyMeasure::empty(), 8, 1, 4).unwrap();
        assert!(matches!(
            solve_bsde(&[0.0; 3], &zero_driver, &noise, &noise_states(&noise), BsdeOptions::default()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn utility_of_constant_unit_wealth_is_zero() {
        let mut s = ScenarioSpec::reference().with_constant_gamma(5.0);
        s.alpha = Kernel::Constant(0.0);
        s.beta = Kernel::Constant(0.0);
        let noise = NoiseBundle::generate(&s.grid, &s.levy, 16, 1, 4).unwrap();
        // X ≡ 1 paths, utility evaluated for c ≡ 1
        let x = crate::fsvie::simulate_with_rates(&s, &noise, &vec![0.0; 100], Default::default()).unwrap();
        let u = recursive_utility_with_rates(&s, &vec![1.0; 100], &x, &noise).unwrap();
        assert_eq!(u.y0.value, 0.0);
    }

    #[test]
    fn utility_matches_closed_forms() {
        let s = ScenarioSpec::reference();
        let noise = NoiseBundle::generate(&s.grid, &s.levy, 20_000, 17, 4).unwrap();
        let c1 = ControlFn::constant(1.0);
        let x = simulate_fsvie(&s, &noise, &c1).unwrap();
        let u = recursive_utility(&s, &c1, &x, &noise).unwrap();
        // Euler-consistent value: Σ_i Δt E ln X_i with ln X_i = Σ_j ln(1 − 0.0095 + 0.2ΔB)
        assert!((u.y0.value + 0.485).abs() < 0.01, "{:?}", u.y0);
        let star = ControlFn::cstar();
        let xs = simulate_fsvie(&s, &noise, &star).unwrap();
        let us = recursive_utility(&s, &star, &xs, &noise).unwrap();
        assert!(us.y0.within(0.015, 3.0), "{:?}", us.y0);
        assert!(recursive_utility_with_rates(&s, &vec![0.0; 100], &x, &noise).is_err());
    }

    #[test]
    fn summary_has_header_width() {
        let g = grid(4);
        let levy = LevyMeasure::single(0.1, 1.0).unwrap();
        let noise = NoiseBundle::generate(&g, &levy, 40, 1, 4).unwrap();
        let sol = solve_bsde(&[1.0; 40], &zero_driver, &noise, &noise_states(&noise), BsdeOptions::default()).unwrap();
        let rows = sol.summary_rows();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.len() == sol.summary_header().len()));
        assert_eq!(rows[0][1], 1.0);
    }
}
