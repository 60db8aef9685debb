//! Backward stochastic Volterra integral equations
//!
//! ```text
//! Y(t) = ζ(t) + ∫ₜᵀ g(t, s, Y(s), Z(t,s), K(t,s,·)) ds − ∫ₜᵀ Z(t,s) dB(s) − ∫ₜᵀ∫ K(t,s,e) Ñ(ds,de)
//! ```
//!
//! solved by Picard iteration: freeze `(y, z, k)`, solve one BSDE per grid
//! node `t_i` on `[t_i, T]` with terminal value `ζ(t_i)`, keep the diagonal
//! `Y(t_i) = Ȳ(t_i, t_i)`, repeat. All passes share one noise bundle and one
//! set of per-node regression designs, so the map is deterministic.
//!
//! Every process is stored as regression coefficients over the shared
//! designs: `Y` per node, `Z` and `K` per cell of the triangle `j >= i`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::condexp::{annotate, projector_for, Coefs, Projector, StateProvider};
use crate::error::{Error, Result};
use crate::model::{FiltrationMode, TimeGrid};
use crate::paths::NoiseBundle;

pub const DEFAULT_BETA_W: f64 = 20.0;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 50;

/// Arguments of the Volterra driver at `(t_i, s_j)` on one path.
#[derive(Debug, Clone, Copy)]
pub struct VolterraInput<'a> {
    pub i: usize,
    pub j: usize,
    pub t: f64,
    pub s: f64,
    pub path: usize,
    pub y: f64,
    pub z: f64,
    pub k: &'a [f64],
}

pub trait VolterraDriver: Sync {
    fn eval(&self, input: &VolterraInput<'_>) -> f64;

    /// `false` lets the solver skip evaluating frozen `Z`, `K`.
    fn uses_martingale_terms(&self) -> bool {
        true
    }
}

impl<F> VolterraDriver for F
where
    F: Fn(&VolterraInput<'_>) -> f64 + Sync,
{
    fn eval(&self, input: &VolterraInput<'_>) -> f64 {
        self(input)
    }
}

/// `ζ(t_i)` per path for `i = 0..=n`, `[i * n_paths + p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalFamily {
    n_nodes: usize,
    n_paths: usize,
    values: Vec<f64>,
}

impl TerminalFamily {
    pub fn from_fn(grid: &TimeGrid, n_paths: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> Self {
        let n_nodes = grid.n_nodes();
        let mut values = vec![0.0; n_nodes * n_paths];
        values.par_chunks_mut(n_paths).enumerate().for_each(|(i, row)| {
            for (p, v) in row.iter_mut().enumerate() {
                *v = f(i, p);
            }
        });
        TerminalFamily {
            n_nodes,
            n_paths,
            values,
        }
    }

    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_paths..(i + 1) * self.n_paths]
    }
}

/// Shared regression designs, one per node `t_0 .. t_{n-1}`.
#[derive(Debug, Clone)]
pub struct Designs {
    grid: TimeGrid,
    n_paths: usize,
    n_atoms: usize,
    weights: Vec<f64>,
    projectors: Arc<Vec<Projector>>,
}

impl Designs {
    pub fn new(noise: &NoiseBundle, states: &dyn StateProvider, mode: FiltrationMode, degree: usize) -> Result<Self> {
        let grid = *noise.grid();
        let projectors = (0..grid.n_steps())
            .into_par_iter()
            .map(|i| projector_for(mode, &grid, i, states, degree))
            .collect::<Result<Vec<_>>>()?;
        Ok(Designs {
            grid,
            n_paths: noise.n_paths(),
            n_atoms: noise.n_atoms(),
            weights: noise.levy().atoms().iter().map(|a| a.weight).collect(),
            projectors: Arc::new(projectors),
        })
    }

    /// Mean-only designs without noise (deterministic problems, norms).
    pub fn trivial(grid: &TimeGrid, n_paths: usize, weights: &[f64]) -> Self {
        Designs {
            grid: *grid,
            n_paths,
            n_atoms: weights.len(),
            weights: weights.to_vec(),
            projectors: Arc::new((0..grid.n_steps()).map(|_| Projector::trivial(n_paths)).collect()),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn projector(&self, i: usize) -> &Projector {
        &self.projectors[i]
    }

    fn same(&self, other: &Designs) -> bool {
        Arc::ptr_eq(&self.projectors, &other.projectors)
    }
}

fn tri_offsets(n: usize) -> Vec<usize> {
    let mut off = Vec::with_capacity(n + 1);
    let mut acc = 0;
    for i in 0..n {
        off.push(acc);
        acc += n - i;
    }
    off.push(acc);
    off
}

/// A candidate `(Y, Z, K)` on the grid.
#[derive(Debug, Clone)]
pub struct Triple {
    designs: Designs,
    /// `Y(t_i)` for `i < n`
    y: Vec<Coefs>,
    /// `Y(T)` per path
    y_terminal: Vec<f64>,
    /// triangle cells `j >= i`, `j < n`
    z: Vec<Coefs>,
    /// `[cell * n_atoms + m]`
    k: Vec<Coefs>,
    offsets: Vec<usize>,
}

impl Triple {
    /// `Y ≡ value`, `Z ≡ 0`, `K ≡ 0`.
    pub fn constant(designs: &Designs, value: f64) -> Self {
        let n = designs.grid.n_steps();
        let offsets = tri_offsets(n);
        let cells = offsets[n];
        let coef = |i: usize, v: f64| Coefs::constant(v, designs.projectors[i].n_terms());
        let z: Vec<Coefs> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).map(|(_, j)| coef(j, 0.0)).collect();
        let k: Vec<Coefs> = (0..n)
            .flat_map(|i| (i..n).map(move |j| (i, j)))
            .flat_map(|(_, j)| (0..designs.n_atoms).map(move |_| j))
            .map(|j| coef(j, 0.0))
            .collect();
        debug_assert_eq!(z.len(), cells);
        Triple {
            y: (0..n).map(|i| coef(i, value)).collect(),
            y_terminal: vec![value; designs.n_paths],
            z,
            k,
            offsets,
            designs: designs.clone(),
        }
    }

    pub fn zero(designs: &Designs) -> Self {
        Triple::constant(designs, 0.0)
    }

    pub fn designs(&self) -> &Designs {
        &self.designs
    }

    #[inline]
    fn cell(&self, i: usize, j: usize) -> usize {
        debug_assert!(j >= i);
        self.offsets[i] + (j - i)
    }

    /// `Y(t_i)` on path `p`.
    pub fn y(&self, p: usize, i: usize) -> f64 {
        let n = self.designs.grid.n_steps();
        if i == n {
            self.y_terminal[p]
        } else {
            self.designs.projectors[i].fitted_at(&self.y[i], p)
        }
    }

    /// `Z(t_i, s_j)` on path `p`; `None` outside the triangle `i <= j < n`.
    pub fn z(&self, p: usize, i: usize, j: usize) -> Option<f64> {
        if j < i || j >= self.designs.grid.n_steps() {
            return None;
        }
        Some(self.designs.projectors[j].fitted_at(&self.z[self.cell(i, j)], p))
    }

    pub fn k(&self, p: usize, i: usize, j: usize, m: usize) -> Option<f64> {
        if j < i || j >= self.designs.grid.n_steps() || m >= self.designs.n_atoms {
            return None;
        }
        let c = self.cell(i, j) * self.designs.n_atoms + m;
        Some(self.designs.projectors[j].fitted_at(&self.k[c], p))
    }

    /// Sample mean of `Z(t_i, s_j)`.
    pub fn z_mean(&self, i: usize, j: usize) -> f64 {
        self.z[self.cell(i, j)].intercept
    }

    pub fn y_mean(&self, i: usize) -> f64 {
        if i == self.designs.grid.n_steps() {
            self.y_terminal.iter().sum::<f64>() / self.y_terminal.len() as f64
        } else {
            self.y[i].intercept
        }
    }

    fn check_compatible(&self, other: &Triple) -> Result<()> {
        if self.designs.grid != other.designs.grid || !self.designs.same(&other.designs) {
            return Err(Error::GridMismatch("triples built on different designs".into()));
        }
        Ok(())
    }

    /// `self − other`, coefficient-wise.
    pub fn difference(&self, other: &Triple) -> Result<Triple> {
        self.check_compatible(other)?;
        let sub = |a: &Coefs, b: &Coefs| Coefs {
            intercept: a.intercept - b.intercept,
            slopes: a.slopes.iter().zip(&b.slopes).map(|(x, y)| x - y).collect(),
        };
        Ok(Triple {
            designs: self.designs.clone(),
            y: self.y.iter().zip(&other.y).map(|(a, b)| sub(a, b)).collect(),
            y_terminal: self.y_terminal.iter().zip(&other.y_terminal).map(|(a, b)| a - b).collect(),
            z: self.z.iter().zip(&other.z).map(|(a, b)| sub(a, b)).collect(),
            k: self.k.iter().zip(&other.k).map(|(a, b)| sub(a, b)).collect(),
            offsets: self.offsets.clone(),
        })
    }
}

/// `E ∫₀ᵀ [e^{βt}|Y(t)|² + ∫ₜᵀ e^{βs}(|Z(t,s)|² + ∫|K(t,s,e)|² ν(de)) ds] dt`,
/// trapezoidal in `t`, left-point in `s`; second moments from the designs.
pub fn weighted_norm(triple: &Triple, beta_w: f64) -> f64 {
    let d = &triple.designs;
    let grid = d.grid;
    let n = grid.n_steps();
    let dt = grid.dt();
    let rows: Vec<f64> = (0..=n)
        .into_par_iter()
        .map(|i| {
            let t = grid.node(i);
            let y2 = if i == n {
                triple.y_terminal.iter().map(|v| v * v).sum::<f64>() / d.n_paths as f64
            } else {
                d.projectors[i].second_moment(&triple.y[i])
            };
            let mut inner = 0.0;
            for j in i..n {
                let proj = &d.projectors[j];
                let c = triple.cell(i, j);
                let mut v = proj.second_moment(&triple.z[c]);
                for m in 0..d.n_atoms {
                    v += d.weights[m] * proj.second_moment(&triple.k[c * d.n_atoms + m]);
                }
                inner += (beta_w * grid.node(j)).exp() * v * dt;
            }
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            w * ((beta_w * t).exp() * y2 + inner)
        })
        .collect();
    rows.iter().sum::<f64>() * dt
}

/// One node of the family: BSDE on `[t_i, T]` with frozen arguments.
struct NodeSolve {
    y: Coefs,
    z: Vec<Coefs>,
    k: Vec<Coefs>,
    /// standard error of the sample mean of each `Z` regression target
    z_se: Vec<f64>,
}

fn solve_node(
    i: usize,
    zeta: &TerminalFamily,
    driver: &dyn VolterraDriver,
    frozen: &Triple,
    noise: &NoiseBundle,
) -> Result<NodeSolve> {
    let d = &frozen.designs;
    let grid = d.grid;
    let n = grid.n_steps();
    let dt = grid.dt();
    let n_paths = d.n_paths;
    let n_atoms = d.n_atoms;
    let uses_zk = driver.uses_martingale_terms();
    let mut next = zeta.at(i).to_vec();
    let mut zs = vec![Coefs::constant(0.0, 0); n - i];
    let mut ks = vec![Coefs::constant(0.0, 0); (n - i) * n_atoms];
    let mut z_se = vec![0.0; n - i];
    let mut y_coefs = Coefs::constant(0.0, 0);
    let t = grid.node(i);
    for j in (i..n).rev() {
        let proj = &d.projectors[j];
        // centring by the sample mean removes the constant part, whose
        // product with the increments has zero expectation
        let ybar = next.iter().sum::<f64>() / n_paths as f64;
        let tz: Vec<f64> = (0..n_paths).map(|p| (next[p] - ybar) * noise.increment(p, j) / dt).collect();
        let cz = proj.coefs(&tz).map_err(|e| annotate(e, j))?;
        let (_, var) = crate::stats::mean_var(&tz);
        z_se[j - i] = (var / n_paths as f64).sqrt();
        for m in 0..n_atoms {
            let tk: Vec<f64> = (0..n_paths)
                .map(|p| (next[p] - ybar) * noise.compensated_count(p, j, m) / (d.weights[m] * dt))
                .collect();
            ks[(j - i) * n_atoms + m] = proj.coefs(&tk).map_err(|e| annotate(e, j))?;
        }
        zs[j - i] = cz;

        let s = grid.node(j);
        let target: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let mut kbuf = [0.0; 8];
                let mut kvec;
                let k: &[f64] = if !uses_zk {
                    &[]
                } else if n_atoms <= kbuf.len() {
                    for (m, slot) in kbuf.iter_mut().enumerate().take(n_atoms) {
                        *slot = frozen.k(p, i, j, m).unwrap_or(0.0);
                    }
                    &kbuf[..n_atoms]
                } else {
                    kvec = Vec::with_capacity(n_atoms);
                    kvec.extend((0..n_atoms).map(|m| frozen.k(p, i, j, m).unwrap_or(0.0)));
                    &kvec[..]
                };
                let g = driver.eval(&VolterraInput {
                    i,
                    j,
                    t,
                    s,
                    path: p,
                    y: frozen.y(p, j),
                    z: if uses_zk { frozen.z(p, i, j).unwrap_or(0.0) } else { 0.0 },
                    k,
                });
                next[p] + g * dt
            })
            .collect();
        if let Some(p) = target.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("driver is not finite at node {i}, step {j}, path {p}")));
        }
        let cy = proj.coefs(&target).map_err(|e| annotate(e, j))?;
        for (p, v) in next.iter_mut().enumerate() {
            *v = proj.fitted_at(&cy, p);
        }
        if j == i {
            y_coefs = cy;
        }
    }
    Ok(NodeSolve {
        y: y_coefs,
        z: zs,
        k: ks,
        z_se,
    })
}

/// Result of one application of the Picard map, with the per-cell standard
/// errors of the `Z` estimates.
pub struct FamilyStep {
    pub triple: Triple,
    pub z_se: Vec<f64>,
}

/// Solves the family of BSDEs for all nodes with `(y, z, k)` frozen at
/// `frozen`, and restricts to the diagonal.
pub fn solve_family_step(
    zeta: &TerminalFamily,
    driver: &dyn VolterraDriver,
    frozen: &Triple,
    noise: &NoiseBundle,
) -> Result<FamilyStep> {
    let d = &frozen.designs;
    let n = d.grid.n_steps();
    if zeta.n_nodes != d.grid.n_nodes() || zeta.n_paths != d.n_paths || noise.n_paths() != d.n_paths {
        return Err(Error::GridMismatch("terminal family, noise and designs disagree".into()));
    }
    let nodes = (0..n)
        .into_par_iter()
        .map(|i| solve_node(i, zeta, driver, frozen, noise).map_err(|e| annotate_node(e, i)))
        .collect::<Result<Vec<_>>>()?;
    let mut y = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(frozen.offsets[n]);
    let mut k = Vec::with_capacity(frozen.offsets[n] * d.n_atoms);
    let mut z_se = Vec::with_capacity(frozen.offsets[n]);
    for node in nodes {
        y.push(node.y);
        z.extend(node.z);
        k.extend(node.k);
        z_se.extend(node.z_se);
    }
    Ok(FamilyStep {
        triple: Triple {
            designs: d.clone(),
            y,
            y_terminal: zeta.at(n).to_vec(),
            z,
            k,
            offsets: frozen.offsets.clone(),
        },
        z_se,
    })
}

fn annotate_node(e: Error, i: usize) -> Error {
    match e {
        Error::Domain(msg) => Error::Domain(format!("family member t_{i}: {msg}")),
        other => other,
    }
}

/// `Y(t_i)` of a single family member with the given frozen arguments.
pub fn resolve_node(
    i: usize,
    zeta: &TerminalFamily,
    driver: &dyn VolterraDriver,
    frozen: &Triple,
    noise: &NoiseBundle,
) -> Result<Vec<f64>> {
    let n = frozen.designs.grid.n_steps();
    if i == n {
        return Ok(zeta.at(n).to_vec());
    }
    let node = solve_node(i, zeta, driver, frozen, noise)?;
    let proj = &frozen.designs.projectors[i];
    Ok((0..frozen.designs.n_paths).map(|p| proj.fitted_at(&node.y, p)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    pub beta_w: f64,
    /// stop when the distance falls to `tol` times the first distance
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions {
            beta_w: DEFAULT_BETA_W,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

pub struct BsvieSolution {
    pub triple: Triple,
    /// weighted-norm distance between successive iterates, one per pass
    pub log: Vec<f64>,
    /// standard errors of the mean of each `Z` cell, last pass
    z_se: Vec<f64>,
}

impl BsvieSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.triple.designs.grid
    }

    pub fn passes(&self) -> usize {
        self.log.len()
    }

    pub fn z_se(&self, i: usize, j: usize) -> f64 {
        self.z_se[self.triple.cell(i, j)]
    }

    /// Rows `pass, weighted_distance`.
    pub fn log_rows(&self) -> Vec<Vec<f64>> {
        self.log.iter().enumerate().map(|(k, d)| vec![(k + 1) as f64, *d]).collect()
    }

    /// Rows `t, mean_y`.
    pub fn diagonal_rows(&self) -> Vec<Vec<f64>> {
        let g = self.grid();
        (0..g.n_nodes()).map(|i| vec![g.node(i), self.triple.y_mean(i)]).collect()
    }
}

/// Picard iteration from the zero triple.
pub fn solve_bsvie(
    zeta: &TerminalFamily,
    driver: &dyn VolterraDriver,
    noise: &NoiseBundle,
    designs: &Designs,
    opts: PicardOptions,
) -> Result<BsvieSolution> {
    solve_bsvie_from(zeta, driver, noise, Triple::zero(designs), opts)
}

/// Picard iteration from a supplied initial triple.
pub fn solve_bsvie_from(
    zeta: &TerminalFamily,
    driver: &dyn VolterraDriver,
    noise: &NoiseBundle,
    initial: Triple,
    opts: PicardOptions,
) -> Result<BsvieSolution> {
    if opts.max_iter == 0 {
        return Err(Error::validation("max_iter must be >= 1"));
    }
    let mut current = initial;
    let mut log = Vec::new();
    let mut first = None;
    for _ in 0..opts.max_iter {
        let step = solve_family_step(zeta, driver, &current, noise)?;
        let dist = weighted_norm(&step.triple.difference(&current)?, opts.beta_w);
        log.push(dist);
        current = step.triple;
        let d1 = *first.get_or_insert(dist);
        if dist <= opts.tol * d1 || dist == 0.0 {
            return Ok(BsvieSolution {
                triple: current,
                log,
                z_se: step.z_se,
            });
        }
    }
    Err(Error::NonConvergence { log })
}

/// `E ∫∫ (∂Z/∂t)² ds dt` by first-index differences on the overlapping
/// triangle `i + 1 <= j < n`.
pub fn z_time_derivative_norm(sol: &BsvieSolution) -> Result<f64> {
    let t = &sol.triple;
    let grid = t.designs.grid;
    let n = grid.n_steps();
    if n < 2 {
        return Err(Error::Domain("need at least two nodes in the first index".into()));
    }
    let dt = grid.dt();
    let mut total = 0.0;
    for i in 0..n - 1 {
        for j in i + 1..n {
            let a = &t.z[t.cell(i + 1, j)];
            let b = &t.z[t.cell(i, j)];
            let diff = Coefs {
                intercept: (a.intercept - b.intercept) / dt,
                slopes: a.slopes.iter().zip(&b.slopes).map(|(x, y)| (x - y) / dt).collect(),
            };
            total += t.designs.projectors[j].second_moment(&diff) * dt * dt;
        }
    }
    Ok(total)
}
