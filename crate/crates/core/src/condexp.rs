//! Least-squares conditional expectations.
//!
//! `E[Y | state]` is approximated by an intercept plus monomials of the state
//! up to a fixed total degree. Design columns are centred and scaled to unit
//! sample variance, so the intercept is the sample mean of the target and the
//! fitted values always average to it.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{FiltrationMode, StateVariable, TimeGrid};
use crate::fsvie::ForwardPaths;
use crate::paths::NoiseBundle;

/// Condition number above which the ridge fallback is applied.
pub const RIDGE_TRIGGER: f64 = 1e10;
/// Ridge penalty relative to `trace(G) / k`.
pub const RIDGE_PENALTY: f64 = 1e-8;

/// Per-path state vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMatrix {
    n_paths: usize,
    dim: usize,
    data: Vec<f64>,
}

impl StateMatrix {
    pub fn new(n_paths: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_paths * dim {
            return Err(Error::Dimension {
                expected: n_paths * dim,
                got: data.len(),
            });
        }
        Ok(StateMatrix { n_paths, dim, data })
    }

    pub fn from_column(values: &[f64]) -> Self {
        StateMatrix {
            n_paths: values.len(),
            dim: 1,
            data: values.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::Dimension { expected: dim, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(StateMatrix {
            n_paths: rows.len(),
            dim,
            data,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }
}

/// Monomials of total degree `1..=degree` in `dim` variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Basis {
    dim: usize,
    degree: usize,
    exponents: Vec<Vec<u32>>,
}

impl Basis {
    pub fn new(dim: usize, degree: usize) -> Self {
        let mut exponents = Vec::new();
        for total in 1..=degree as u32 {
            let mut e = vec![0u32; dim];
            push_compositions(&mut exponents, &mut e, 0, total);
        }
        Basis { dim, degree, exponents }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    pub fn eval_into(&self, state: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e.iter().zip(state).map(|(&k, &x)| x.powi(k as i32)).product();
        }
    }

    /// Human-readable term names such as `x0^2*x1`.
    pub fn describe(&self) -> Vec<String> {
        self.exponents
            .iter()
            .map(|e| {
                e.iter()
                    .enumerate()
                    .filter(|(_, k)| **k > 0)
                    .map(|(v, k)| if *k == 1 { format!("x{v}") } else { format!("x{v}^{k}") })
                    .collect::<Vec<_>>()
                    .join("*")
            })
            .collect()
    }
}

fn push_compositions(out: &mut Vec<Vec<u32>>, e: &mut Vec<u32>, pos: usize, left: u32) {
    if pos + 1 == e.len() {
        e[pos] = left;
        out.push(e.clone());
        e[pos] = 0;
        return;
    }
    if e.is_empty() {
        return;
    }
    for k in (0..=left).rev() {
        e[pos] = k;
        push_compositions(out, e, pos + 1, left - k);
    }
    e[pos] = 0;
}

/// Fitted coefficients in standardized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefs {
    pub intercept: f64,
    pub slopes: Vec<f64>,
}

impl Coefs {
    pub fn constant(v: f64, k: usize) -> Self {
        Coefs {
            intercept: v,
            slopes: vec![0.0; k],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    pub r_squared: f64,
    pub residual_variance: f64,
    pub condition: f64,
    pub ridge: bool,
}

/// A least-squares design on one cross-section of states, reusable for any
/// number of targets.
#[derive(Debug, Clone)]
pub struct Projector {
    basis: Basis,
    n_paths: usize,
    centers: Vec<f64>,
    scales: Vec<f64>,
    /// standardized design, column-major `[col * n_paths + p]`
    design: Vec<f64>,
    gram: DMatrix<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
    condition: f64,
    ridge: bool,
}

impl Projector {
    pub fn fit(states: &StateMatrix, degree: usize) -> Result<Self> {
        let basis = Basis::new(states.dim(), degree);
        let n_paths = states.n_paths();
        let k = basis.len();
        if n_paths < k + 1 {
            return Err(Error::Regression {
                step: None,
                condition: f64::INFINITY,
                reason: format!("{n_paths} samples for {} basis functions", k + 1),
            });
        }
        if states.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Regression {
                step: None,
                condition: f64::NAN,
                reason: "non-finite state".into(),
            });
        }

        let mut design = vec![0.0; k * n_paths];
        let mut buf = vec![0.0; k];
        for p in 0..n_paths {
            basis.eval_into(states.row(p), &mut buf);
            for (c, v) in buf.iter().enumerate() {
                design[c * n_paths + p] = *v;
            }
        }
        let mut centers = vec![0.0; k];
        let mut scales = vec![0.0; k];
        for c in 0..k {
            let col = &mut design[c * n_paths..(c + 1) * n_paths];
            let mu = col.iter().sum::<f64>() / n_paths as f64;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n_paths as f64;
            let sd = var.sqrt();
            // numerically constant columns carry no information
            let sd = if sd > 1e-12 * mu.abs().max(1e-300) && sd > 0.0 { sd } else { 0.0 };
            for v in col.iter_mut() {
                *v = if sd > 0.0 { (*v - mu) / sd } else { 0.0 };
            }
            centers[c] = mu;
            scales[c] = sd;
        }
        if design.iter().any(|v| !v.is_finite()) {
            return Err(Error::Regression {
                step: None,
                condition: f64::INFINITY,
                reason: "basis overflow".into(),
            });
        }

        let mut gram = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in a..k {
                let ca = &design[a * n_paths..(a + 1) * n_paths];
                let cb = &design[b * n_paths..(b + 1) * n_paths];
                let g = ca.iter().zip(cb).map(|(x, y)| x * y).sum::<f64>() / n_paths as f64;
                gram[(a, b)] = g;
                gram[(b, a)] = g;
            }
        }

        let (chol, condition, ridge) = if k == 0 || gram.trace() == 0.0 {
            (None, 1.0, false)
        } else {
            let condition = condition_number(&gram);
            let ridge = !(condition <= RIDGE_TRIGGER);
            let mut g = gram.clone();
            if ridge {
                let lambda = RIDGE_PENALTY * gram.trace() / k as f64;
                for d in 0..k {
                    g[(d, d)] += lambda;
                }
            }
            let chol = Cholesky::new(g).ok_or_else(|| Error::Regression {
                step: None,
                condition,
                reason: "normal equations not positive definite after ridge".into(),
            })?;
            (Some(chol), condition, ridge)
        };

        Ok(Projector {
            basis,
            n_paths,
            centers,
            scales,
            design,
            gram,
            chol,
            condition,
            ridge,
        })
    }

    /// Mean-only projector (trivial sigma-algebra).
    pub fn trivial(n_paths: usize) -> Self {
        Projector {
            basis: Basis::new(0, 0),
            n_paths,
            centers: vec![],
            scales: vec![],
            design: vec![],
            gram: DMatrix::zeros(0, 0),
            chol: None,
            condition: 1.0,
            ridge: false,
        }
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_terms(&self) -> usize {
        self.basis.len()
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn used_ridge(&self) -> bool {
        self.ridge
    }

    /// Sample second-moment matrix of the standardized design.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn coefs(&self, targets: &[f64]) -> Result<Coefs> {
        if targets.len() != self.n_paths {
            return Err(Error::Dimension {
                expected: self.n_paths,
                got: targets.len(),
            });
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::Regression {
                step: None,
                condition: self.condition,
                reason: "non-finite target".into(),
            });
        }
        let n = self.n_paths as f64;
        let intercept = targets.iter().sum::<f64>() / n;
        let k = self.basis.len();
        let slopes = match &self.chol {
            None => vec![0.0; k],
            Some(ch) => {
                let rhs = DVector::from_iterator(
                    k,
                    (0..k).map(|c| {
                        let col = &self.design[c * self.n_paths..(c + 1) * self.n_paths];
                        col.iter().zip(targets).map(|(x, y)| x * (y - intercept)).sum::<f64>() / n
                    }),
                );
                ch.solve(&rhs).iter().copied().collect()
            }
        };
        Ok(Coefs { intercept, slopes })
    }

    /// Fitted value on path `p` of the fitting sample.
    #[inline]
    pub fn fitted_at(&self, c: &Coefs, p: usize) -> f64 {
        let mut v = c.intercept;
        for (j, b) in c.slopes.iter().enumerate() {
            v += b * self.design[j * self.n_paths + p];
        }
        v
    }

    pub fn fitted(&self, c: &Coefs) -> Vec<f64> {
        (0..self.n_paths).into_par_iter().map(|p| self.fitted_at(c, p)).collect()
    }

    pub fn project(&self, targets: &[f64]) -> Result<Vec<f64>> {
        let c = self.coefs(targets)?;
        Ok(self.fitted(&c))
    }

    /// Sample mean of the squared fitted values, `E[fit²]`, from the Gram
    /// matrix alone.
    pub fn second_moment(&self, c: &Coefs) -> f64 {
        let b = DVector::from_column_slice(&c.slopes);
        c.intercept * c.intercept + (b.transpose() * &self.gram * &b)[(0, 0)]
    }

    /// Evaluates coefficients at an out-of-sample state.
    pub fn eval(&self, c: &Coefs, state: &[f64]) -> Result<f64> {
        if state.len() != self.basis.dim() {
            return Err(Error::Dimension {
                expected: self.basis.dim(),
                got: state.len(),
            });
        }
        let mut buf = vec![0.0; self.basis.len()];
        self.basis.eval_into(state, &mut buf);
        let mut v = c.intercept;
        for j in 0..buf.len() {
            if self.scales[j] > 0.0 {
                v += c.slopes[j] * (buf[j] - self.centers[j]) / self.scales[j];
            }
        }
        Ok(v)
    }

    pub fn diagnostics(&self, targets: &[f64], c: &Coefs) -> Diagnostics {
        let n = self.n_paths as f64;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for (p, y) in targets.iter().enumerate() {
            let r = y - self.fitted_at(c, p);
            ss_res += r * r;
            ss_tot += (y - c.intercept) * (y - c.intercept);
        }
        Diagnostics {
            r_squared: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 },
            residual_variance: ss_res / n,
            condition: self.condition,
            ridge: self.ridge,
        }
    }
}

fn condition_number(g: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(g.clone()).eigenvalues;
    let max = eig.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let min = eig.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// A fitted regression function `state ↦ E[target | state]`.
#[derive(Debug, Clone)]
pub struct ProjectionFn {
    basis: Basis,
    centers: Vec<f64>,
    scales: Vec<f64>,
    coefs: Coefs,
    pub diagnostics: Diagnostics,
}

impl ProjectionFn {
    pub fn zero(dim: usize, degree: usize) -> Self {
        let basis = Basis::new(dim, degree);
        let k = basis.len();
        ProjectionFn {
            centers: vec![0.0; k],
            scales: vec![1.0; k],
            coefs: Coefs::constant(0.0, k),
            basis,
            diagnostics: Diagnostics {
                r_squared: 1.0,
                residual_variance: 0.0,
                condition: 1.0,
                ridge: false,
            },
        }
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    /// Coefficients on `[1, monomials...]` in the original state units.
    pub fn raw_coefficients(&self) -> Vec<f64> {
        let mut out = vec![self.coefs.intercept];
        for j in 0..self.basis.len() {
            if self.scales[j] > 0.0 {
                let b = self.coefs.slopes[j] / self.scales[j];
                out[0] -= b * self.centers[j];
                out.push(b);
            } else {
                out.push(0.0);
            }
        }
        out
    }

    pub fn eval(&self, state: &[f64]) -> Result<f64> {
        if state.len() != self.basis.dim() {
            return Err(Error::Dimension {
                expected: self.basis.dim(),
                got: state.len(),
            });
        }
        let mut buf = vec![0.0; self.basis.len()];
        self.basis.eval_into(state, &mut buf);
        let mut v = self.coefs.intercept;
        for j in 0..buf.len() {
            if self.scales[j] > 0.0 {
                v += self.coefs.slopes[j] * (buf[j] - self.centers[j]) / self.scales[j];
            }
        }
        Ok(v)
    }
}

pub fn fit_projection(states: &StateMatrix, targets: &[f64], degree: usize) -> Result<ProjectionFn> {
    let proj = Projector::fit(states, degree)?;
    let coefs = proj.coefs(targets)?;
    let diagnostics = proj.diagnostics(targets, &coefs);
    Ok(ProjectionFn {
        basis: proj.basis.clone(),
        centers: proj.centers.clone(),
        scales: proj.scales.clone(),
        coefs,
        diagnostics,
    })
}

pub fn project(f: &ProjectionFn, state: &[f64]) -> Result<f64> {
    f.eval(state)
}

/// Source of regressors at each grid node.
pub trait StateProvider: Sync {
    fn n_paths(&self) -> usize;
    fn states_at(&self, node: usize) -> Result<StateMatrix>;
}

/// Regressors built from simulated `X(t_i)`.
pub struct ForwardState<'a> {
    pub paths: &'a ForwardPaths,
    pub variables: Vec<StateVariable>,
}

impl StateProvider for ForwardState<'_> {
    fn n_paths(&self) -> usize {
        self.paths.n_paths()
    }

    fn states_at(&self, node: usize) -> Result<StateMatrix> {
        let dim = self.variables.len();
        let mut data = Vec::with_capacity(self.paths.n_paths() * dim);
        for p in 0..self.paths.n_paths() {
            let x = self.paths.x(p, node);
            for v in &self.variables {
                data.push(match v {
                    StateVariable::X => x,
                    StateVariable::LogX => {
                        if x <= 0.0 {
                            return Err(Error::Domain(format!("ln X with X = {x} on path {p}")));
                        }
                        x.ln()
                    }
                });
            }
        }
        StateMatrix::new(self.paths.n_paths(), dim, data)
    }
}

/// Regressors `(B(t_i), Ñ_1(t_i), ..., Ñ_M(t_i))` read off the noise.
pub struct BrownianState<'a> {
    pub noise: &'a NoiseBundle,
}

impl StateProvider for BrownianState<'_> {
    fn n_paths(&self) -> usize {
        self.noise.n_paths()
    }

    fn states_at(&self, node: usize) -> Result<StateMatrix> {
        let m = self.noise.n_atoms();
        let dim = 1 + m;
        let n_paths = self.noise.n_paths();
        let mut data = vec![0.0; n_paths * dim];
        data.par_chunks_mut(dim).enumerate().for_each(|(p, row)| {
            row[0] = self.noise.brownian_level(p, node);
            for a in 0..m {
                row[1 + a] = self.noise.compensated_level(p, node, a);
            }
        });
        StateMatrix::new(n_paths, dim, data)
    }
}

/// Builds the projector realising `E[· | G_{t_i}]` for the given mode.
pub fn projector_for(
    mode: FiltrationMode,
    grid: &TimeGrid,
    i: usize,
    states: &dyn StateProvider,
    degree: usize,
) -> Result<Projector> {
    match mode.conditioning_node(grid, i) {
        None => Ok(Projector::trivial(states.n_paths())),
        Some(node) => Projector::fit(&states.states_at(node)?, degree).map_err(|e| annotate(e, i)),
    }
}

pub(crate) fn annotate(e: Error, i: usize) -> Error {
    match e {
        Error::Regression { condition, reason, .. } => Error::Regression {
            step: Some(i),
            condition,
            reason,
        },
        other => other,
    }
}

/// `conditional_mean(mode, t_i, targets, states)`.
pub fn conditional_mean(
    mode: FiltrationMode,
    grid: &TimeGrid,
    i: usize,
    targets: &[f64],
    states: &dyn StateProvider,
    degree: usize,
) -> Result<Vec<f64>> {
    projector_for(mode, grid, i, states, degree)?
        .project(targets)
        .map_err(|e| annotate(e, i))
}
