//! Forward stochastic Volterra integral equation
//!
//! ```text
//! X(t) = ξ(t) + ∫₀ᵗ (α(t,s) − c(s)) X(s) ds + ∫₀ᵗ β(t,s) X(s) dB(s)
//!             + ∫₀ᵗ ∫ π(t,s,e) X(s) Ñ(ds,de)
//! ```
//!
//! simulated by left-point Euler with full re-summation over the kernel
//! triangle: every `X(t_i)` is recomputed from all earlier nodes, which costs
//! `O(n²)` per path but needs no time derivatives of the kernels.

use rayon::prelude::*;

use crate::control::ControlFn;
use crate::error::{Error, Result};
use crate::model::{KernelTable, ScenarioSpec, TimeGrid};
use crate::paths::NoiseBundle;
use crate::stats::{mean_var, quantile_sorted};

/// Abort threshold for the positivity guard.
pub const POSITIVITY_FLOOR: f64 = 1e-12;

/// Simulated `X(t_i)` per path.
#[derive(Debug, Clone)]
pub struct ForwardPaths {
    grid: TimeGrid,
    n_paths: usize,
    /// `[p * (n + 1) + i]`
    values: Vec<f64>,
    positive_state: bool,
}

impl ForwardPaths {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn positive_state(&self) -> bool {
        self.positive_state
    }

    #[inline]
    pub fn x(&self, p: usize, i: usize) -> f64 {
        self.values[p * self.grid.n_nodes() + i]
    }

    pub fn path(&self, p: usize) -> &[f64] {
        let w = self.grid.n_nodes();
        &self.values[p * w..(p + 1) * w]
    }

    /// Cross-section `X(t_i)` over all paths.
    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.x(p, i)).collect()
    }

    /// Per-node summary `{t, mean, se, q05, q50, q95}`.
    pub fn summary(&self) -> Vec<CurvePoint> {
        (0..self.grid.n_nodes())
            .map(|i| {
                let mut col = self.column(i);
                let (m, v) = mean_var(&col);
                col.sort_by(|a, b| a.total_cmp(b));
                CurvePoint {
                    t: self.grid.node(i),
                    mean: m,
                    se: (v / self.n_paths as f64).sqrt(),
                    q05: quantile_sorted(&col, 0.05),
                    q50: quantile_sorted(&col, 0.50),
                    q95: quantile_sorted(&col, 0.95),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub t: f64,
    pub mean: f64,
    pub se: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

/// Positivity policy for [`simulate_with_rates`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PositivityGuard {
    /// Abort when `X(t_i) <= floor` at a node where consumption is applied
    /// (`t_0 .. t_{n-1}`).
    Abort { floor: f64 },
    Off,
}

impl Default for PositivityGuard {
    fn default() -> Self {
        PositivityGuard::Abort {
            floor: POSITIVITY_FLOOR,
        }
    }
}

pub(crate) struct KernelCache {
    pub alpha: KernelTable,
    pub beta: KernelTable,
    pub pi: Vec<KernelTable>,
}

impl KernelCache {
    pub fn new(s: &ScenarioSpec) -> Self {
        KernelCache {
            alpha: s.alpha.tabulate(&s.grid),
            beta: s.beta.tabulate(&s.grid),
            pi: s.pi.iter().map(|k| k.tabulate(&s.grid)).collect(),
        }
    }
}

fn check_inputs(scenario: &ScenarioSpec, noise: &NoiseBundle, rates: &[f64]) -> Result<()> {
    if noise.grid() != &scenario.grid {
        return Err(Error::GridMismatch("noise bundle and scenario use different grids".into()));
    }
    if noise.levy() != &scenario.levy {
        return Err(Error::GridMismatch("noise bundle and scenario use different Lévy measures".into()));
    }
    let n = scenario.grid.n_steps();
    if rates.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: rates.len(),
        });
    }
    Ok(())
}

/// `simulate_fsvie(scenario, noise, c)`.
pub fn simulate_fsvie(scenario: &ScenarioSpec, noise: &NoiseBundle, control: &ControlFn) -> Result<ForwardPaths> {
    let rates = control.schedule(scenario)?;
    simulate_with_rates(scenario, noise, &rates, PositivityGuard::default())
}

/// Simulation with an explicit consumption table `c(t_0..t_{n-1})`.
pub fn simulate_with_rates(
    scenario: &ScenarioSpec,
    noise: &NoiseBundle,
    rates: &[f64],
    guard: PositivityGuard,
) -> Result<ForwardPaths> {
    check_inputs(scenario, noise, rates)?;
    let grid = scenario.grid;
    let n = grid.n_steps();
    let dt = grid.dt();
    let n_atoms = scenario.n_atoms();
    let cache = KernelCache::new(scenario);
    let xi: Vec<f64> = (0..=n).map(|i| scenario.xi.at(i)).collect();

    let mut values = vec![0.0; noise.n_paths() * (n + 1)];
    values
        .par_chunks_mut(n + 1)
        .enumerate()
        .try_for_each(|(p, x)| -> Result<()> {
            let db = noise.path_increments(p);
            let dn: Vec<f64> = (0..n)
                .flat_map(|j| (0..n_atoms).map(move |m| (j, m)))
                .map(|(j, m)| noise.compensated_count(p, j, m))
                .collect();
            x[0] = xi[0];
            for i in 1..=n {
                let a = cache.alpha.row(i);
                let b = cache.beta.row(i);
                let mut acc = xi[i];
                for j in 0..i {
                    let mut incr = (a[j] - rates[j]) * dt + b[j] * db[j];
                    for (m, pi) in cache.pi.iter().enumerate() {
                        incr += pi.row(i)[j] * dn[j * n_atoms + m];
                    }
                    acc += x[j] * incr;
                }
                x[i] = acc;
            }
            if let PositivityGuard::Abort { floor } = guard {
                if let Some(i) = (0..n).find(|&i| !(x[i] > floor)) {
                    return Err(Error::PositivityBreach {
                        path: p,
                        step: i,
                        value: x[i],
                    });
                }
            }
            Ok(())
        })?;

    Ok(ForwardPaths {
        grid,
        n_paths: noise.n_paths(),
        values,
        positive_state: matches!(guard, PositivityGuard::Abort { .. }),
    })
}

/// `forward_mean_oracle(scenario, c)`: trapezoidal solution of
/// `m(t) = ξ(t) + ∫₀ᵗ (α(t,s) − c(s)) m(s) ds`. The control is held at
/// `c(t_{n-1})` on the last interval since `c(T)` is never evaluated.
pub fn forward_mean_oracle(scenario: &ScenarioSpec, control: &ControlFn) -> Result<Vec<f64>> {
    let rates = control.schedule(scenario)?;
    Ok(forward_mean_with_rates(scenario, &rates))
}

pub fn forward_mean_with_rates(scenario: &ScenarioSpec, rates: &[f64]) -> Vec<f64> {
    let grid = scenario.grid;
    let n = grid.n_steps();
    let dt = grid.dt();
    let c = |j: usize| rates[j.min(n - 1)];
    let mut m = vec![0.0; n + 1];
    m[0] = scenario.xi.at(0);
    for i in 1..=n {
        let a = |j: usize| scenario.alpha.at(&grid, i, j) - c(j);
        let mut acc = 0.5 * a(0) * m[0];
        for j in 1..i {
            acc += a(j) * m[j];
        }
        m[i] = (scenario.xi.at(i) + dt * acc) / (1.0 - 0.5 * dt * a(i));
    }
    m
}

/// Linearised responses `D_{t_k} X(t_i)` (Brownian direction) and
/// `D_{t_k, e_m} X(t_i)` (one per atom). Both vanish for `i < k`.
#[derive(Debug, Clone)]
pub struct FirstVariation {
    grid: TimeGrid,
    n_paths: usize,
    k: usize,
    brownian: Vec<f64>,
    jump: Vec<Vec<f64>>,
}

impl FirstVariation {
    pub fn node(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn brownian(&self, p: usize, i: usize) -> f64 {
        self.brownian[p * self.grid.n_nodes() + i]
    }

    #[inline]
    pub fn jump(&self, m: usize, p: usize, i: usize) -> f64 {
        self.jump[m][p * self.grid.n_nodes() + i]
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }
}

/// `first_variation(scenario, noise, c, paths, t_k)`:
///
/// ```text
/// V(t_i)   = β(t_i,t_k) X(t_k)     + Σ_{k<=j<i} V(t_j) [(α−c)Δt + β ΔB_j + Σ_m π_m ΔÑ_{j,m}]
/// V^m(t_i) = π_m(t_i,t_k) X(t_k)   + (same linear propagation)
/// ```
pub fn first_variation(
    scenario: &ScenarioSpec,
    noise: &NoiseBundle,
    control: &ControlFn,
    paths: &ForwardPaths,
    k: usize,
) -> Result<FirstVariation> {
    let rates = control.schedule(scenario)?;
    first_variation_with_rates(scenario, noise, &rates, paths, k)
}

pub fn first_variation_with_rates(
    scenario: &ScenarioSpec,
    noise: &NoiseBundle,
    rates: &[f64],
    paths: &ForwardPaths,
    k: usize,
) -> Result<FirstVariation> {
    check_inputs(scenario, noise, rates)?;
    let grid = scenario.grid;
    let n = grid.n_steps();
    if k >= n {
        return Err(Error::Domain(format!(
            "first variation at t_{k} has no forward interval (n = {n})"
        )));
    }
    if paths.n_paths() != noise.n_paths() || paths.grid() != &grid {
        return Err(Error::GridMismatch("forward paths do not match the noise bundle".into()));
    }
    let dt = grid.dt();
    let n_atoms = scenario.n_atoms();
    let cache = KernelCache::new(scenario);
    let width = n + 1;

    // direction d = 0 is Brownian, d = 1 + m is atom m
    let propagate = |seed_kernel: &KernelTable, out: &mut [f64], p: usize| {
        let db = noise.path_increments(p);
        let xk = paths.x(p, k);
        for i in k..=n {
            let mut acc = seed_kernel.row(i)[k] * xk;
            for j in k..i {
                let mut incr = (cache.alpha.row(i)[j] - rates[j]) * dt + cache.beta.row(i)[j] * db[j];
                for (m, pi) in cache.pi.iter().enumerate() {
                    incr += pi.row(i)[j] * noise.compensated_count(p, j, m);
                }
                acc += out[j] * incr;
            }
            out[i] = acc;
        }
    };

    let mut brownian = vec![0.0; noise.n_paths() * width];
    brownian
        .par_chunks_mut(width)
        .enumerate()
        .for_each(|(p, out)| propagate(&cache.beta, out, p));
    let jump = (0..n_atoms)
        .map(|m| {
            let mut v = vec![0.0; noise.n_paths() * width];
            v.par_chunks_mut(width)
                .enumerate()
                .for_each(|(p, out)| propagate(&cache.pi[m], out, p));
            v
        })
        .collect();

    Ok(FirstVariation {
        grid,
        n_paths: noise.n_paths(),
        k,
        brownian,
        jump,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Initial, Kernel};
    use crate::stats::Estimate;

    fn scenario(n: usize) -> ScenarioSpec {
        ScenarioSpec::reference()
            .with_grid(TimeGrid::new(1.0, n).unwrap())
            .unwrap()
    }

    fn noise(s: &ScenarioSpec, n_paths: usize, seed: u64) -> NoiseBundle {
        NoiseBundle::generate(&s.grid, &s.levy, n_paths, seed, 4).unwrap()
    }

    /// Incremental jump-diffusion Euler, independent of the Volterra sums.
    fn euler_jump_diffusion(s: &ScenarioSpec, b: &NoiseBundle, rates: &[f64], p: usize) -> Vec<f64> {
        let n = s.grid.n_steps();
        let (alpha, beta) = (s.alpha.constant_value().unwrap(), s.beta.constant_value().unwrap());
        let mut x = vec![s.xi.at(0); n + 1];
        for i in 0..n {
            let jumps: f64 = (0..s.n_atoms())
                .map(|m| s.pi[m].constant_value().unwrap() * b.compensated_count(p, i, m))
                .sum();
            x[i + 1] = x[i] * (1.0 + (alpha - rates[i]) * s.grid.dt() + beta * b.increment(p, i) + jumps);
        }
        x
    }

    #[test]
    fn deterministic_resolvent_without_noise() {
        let mut s = scenario(100);
        s.beta = Kernel::Constant(0.0);
        let b = noise(&s, 4, 1);
        let x = simulate_fsvie(&s, &b, &ControlFn::constant(0.0)).unwrap();
        let exact = 0.05f64.exp();
        // Euler: (1 + 0.05Δt)^n, error O(Δt)
        assert!((x.x(0, 100) - 1.0005f64.powi(100)).abs() < 1e-12);
        assert!((x.x(2, 100) - exact).abs() < 0.05 * 0.05 * exact * 0.01);
    }

    #[test]
    fn zero_kernels_leave_state_constant() {
        let mut s = scenario(20);
        s.alpha = Kernel::Constant(0.0);
        s.beta = Kernel::Constant(0.0);
        let b = noise(&s, 8, 3);
        let x = simulate_fsvie(&s, &b, &ControlFn::constant(0.0)).unwrap();
        for p in 0..8 {
            assert!(x.path(p).iter().all(|v| *v == 1.0));
        }
    }

    #[test]
    fn collapses_to_jump_diffusion_euler() {
        let s = ScenarioSpec::reference()
            .with_grid(TimeGrid::new(1.0, 60).unwrap())
            .unwrap()
            .with_atom(-0.1, 2.0)
            .unwrap()
            .with_atom(0.15, 0.5)
            .unwrap();
        let b = noise(&s, 16, 11);
        let rates: Vec<f64> = (0..60).map(|i| 0.5 + 0.01 * i as f64).collect();
        let x = simulate_with_rates(&s, &b, &rates, PositivityGuard::default()).unwrap();
        for p in 0..16 {
            let reference = euler_jump_diffusion(&s, &b, &rates, p);
            for (i, r) in reference.iter().enumerate() {
                assert!((x.x(p, i) - r).abs() <= 1e-12, "p {p} i {i}: {} vs {r}", x.x(p, i));
            }
        }
    }

    #[test]
    fn linear_in_initial_value() {
        let s = ScenarioSpec::reference()
            .with_grid(TimeGrid::new(1.0, 30).unwrap())
            .unwrap()
            .with_atom(-0.2, 1.0)
            .unwrap();
        let mut s2 = s.clone();
        s2.xi = Initial::Constant(2.0);
        let mut s3 = s.clone();
        s3.alpha = Kernel::ExpDecay {
            amplitude: 0.3,
            rate: 2.0,
        };
        let mut s4 = s3.clone();
        s4.xi = Initial::Constant(2.0);
        let b = noise(&s, 32, 5);
        let c = ControlFn::constant(0.7);
        for (a, bb) in [(&s, &s2), (&s3, &s4)] {
            let x1 = simulate_fsvie(a, &b, &c).unwrap();
            let x2 = simulate_fsvie(bb, &b, &c).unwrap();
            for p in 0..32 {
                for i in 0..=30 {
                    assert_eq!(2.0 * x1.x(p, i), x2.x(p, i));
                }
            }
        }
    }

    #[test]
    fn monte_carlo_mean_matches_exponential() {
        let s = scenario(100);
        let b = noise(&s, 40_000, 21);
        let x = simulate_fsvie(&s, &b, &ControlFn::constant(1.0)).unwrap();
        let est = Estimate::from_samples(&x.column(100));
        // Euler mean is (1 − 0.95Δt)^n exactly; the MC mean must sit on it
        let euler_mean = (1.0f64 - 0.0095).powi(100);
        assert!(est.within(euler_mean, 3.0), "{est:?} vs {euler_mean}");
        assert!((euler_mean - (-0.95f64).exp()).abs() < 0.002);
    }

    #[test]
    fn mean_oracle_examples() {
        let s = scenario(100);
        let m = forward_mean_oracle(&s, &ControlFn::constant(1.0)).unwrap();
        assert!((m[100] - (-0.95f64).exp()).abs() < 1e-4 * 0.95 * 0.95);

        let mut flat = scenario(50);
        flat.alpha = Kernel::Constant(0.0);
        let m = forward_mean_oracle(&flat, &ControlFn::constant(0.0)).unwrap();
        assert!(m.iter().all(|v| *v == 1.0));

        let mut ed = scenario(100);
        ed.alpha = Kernel::ExpDecay {
            amplitude: 0.05,
            rate: 1.0,
        };
        let mut fine = ScenarioSpec::reference()
            .with_grid(TimeGrid::new(1.0, 10_000).unwrap())
            .unwrap();
        fine.alpha = ed.alpha.clone();
        let coarse = forward_mean_oracle(&ed, &ControlFn::constant(0.0)).unwrap()[100];
        let reference = forward_mean_with_rates(&fine, &vec![0.0; 10_000])[10_000];
        assert!(((coarse - reference) / reference).abs() < 1e-4);
    }

    #[test]
    fn positivity_breach_is_reported() {
        let s = scenario(10);
        let b = noise(&s, 4, 2);
        // c Δt = 2 on the first step drives X(t_1) negative
        let mut rates = vec![0.1; 10];
        rates[0] = 20.0;
        let err = simulate_with_rates(&s, &b, &rates, PositivityGuard::default()).unwrap_err();
        assert!(matches!(err, Error::PositivityBreach { step: 1, .. }), "{err}");
        assert!(simulate_with_rates(&s, &b, &rates, PositivityGuard::Off).is_ok());
    }

    #[test]
    fn first_variation_ratios_and_adaptedness() {
        let s = ScenarioSpec::reference()
            .with_grid(TimeGrid::new(1.0, 40).unwrap())
            .unwrap()
            .with_atom(-0.1, 1.0)
            .unwrap();
        let b = noise(&s, 16, 8);
        let c = ControlFn::constant(1.0);
        let x = simulate_fsvie(&s, &b, &c).unwrap();
        let k = 13;
        let v = first_variation(&s, &b, &c, &x, k).unwrap();
        for p in 0..16 {
            for i in 0..k {
                assert_eq!(v.brownian(p, i), 0.0);
                assert_eq!(v.jump(0, p, i), 0.0);
            }
            for i in k..=40 {
                assert!((v.brownian(p, i) / x.x(p, i) - 0.2).abs() < 1e-10);
                assert!((v.jump(0, p, i) / x.x(p, i) + 0.1).abs() < 1e-10);
            }
        }
        assert!(first_variation(&s, &b, &c, &x, 40).is_err());
    }

    #[test]
    fn summary_rows_cover_every_node() {
        let s = scenario(10);
        let b = noise(&s, 100, 4);
        let x = simulate_fsvie(&s, &b, &ControlFn::constant(1.0)).unwrap();
        let rows = x.summary();
        assert_eq!(rows.len(), 11);
        assert_eq!(rows[0].mean, 1.0);
        assert_eq!(rows[0].se, 0.0);
        assert!(rows[10].q05 <= rows[10].q50 && rows[10].q50 <= rows[10].q95);
    }
}
