//! A small Hida-Malliavin calculus and Monte Carlo checks of the duality
//! formulas
//!
//! ```text
//! E[F ∫ Ψ dB]    = E[∫ E[D_t F | F_t] Ψ(t) dt]
//! E[F ∫∫ Φ dÑ]   = E[∫∫ E[D_{t,e} F | F_t] Φ(t,e) ν(de) dt]
//! ```
//!
//! Functionals are polynomials (total degree at most 4) in primitives
//! `∫ f dB` and `∫∫ h dÑ` with deterministic integrands, optionally stopped at
//! a grid node. Stopped primitives only see increments strictly before the
//! stopping node, which is how adapted processes are represented.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::condexp::{Projector, StateMatrix};
use crate::error::{Error, Result};
use crate::model::{LevyMeasure, TimeGrid};
use crate::paths::NoiseBundle;
use crate::stats::{mean_var, Estimate};

pub const MAX_DEGREE: u32 = 4;
/// Regression degree used for `E[· | F_t]`.
pub const PROJECTION_DEGREE: usize = 2;

/// `∫₀^{t_stop} f dB` or `∫₀^{t_stop} ∫ h dÑ` on the grid (left-point integrands).
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Wiener { f: Vec<f64>, stop: usize },
    /// `h[j][m]`
    Jump { h: Vec<Vec<f64>>, stop: usize },
}

impl Primitive {
    fn stop(&self) -> usize {
        match self {
            Primitive::Wiener { stop, .. } | Primitive::Jump { stop, .. } => *stop,
        }
    }

    fn stopped_at(&self, node: usize) -> Primitive {
        let mut p = self.clone();
        match &mut p {
            Primitive::Wiener { stop, .. } | Primitive::Jump { stop, .. } => *stop = (*stop).min(node),
        }
        p
    }

    /// Contribution of step `j` on path `p`.
    #[inline]
    fn increment(&self, noise: &NoiseBundle, p: usize, j: usize) -> f64 {
        if j >= self.stop() {
            return 0.0;
        }
        match self {
            Primitive::Wiener { f, .. } => f[j] * noise.increment(p, j),
            Primitive::Jump { h, .. } => h[j]
                .iter()
                .enumerate()
                .map(|(m, hm)| hm * noise.compensated_count(p, j, m))
                .sum(),
        }
    }

    fn value(&self, noise: &NoiseBundle, p: usize) -> f64 {
        (0..self.stop()).map(|j| self.increment(noise, p, j)).sum()
    }
}

type Poly = BTreeMap<Vec<u32>, f64>;

/// A polynomial in primitives.
#[derive(Debug, Clone, PartialEq)]
pub struct Functional {
    prims: Vec<Primitive>,
    poly: Poly,
}

fn degree(e: &[u32]) -> u32 {
    e.iter().sum()
}

fn clean(mut poly: Poly) -> Poly {
    poly.retain(|_, c| *c != 0.0);
    poly
}

impl Functional {
    pub fn constant(c: f64) -> Self {
        let mut poly = Poly::new();
        poly.insert(vec![], c);
        Functional {
            prims: vec![],
            poly: clean(poly),
        }
    }

    pub fn primitive(p: Primitive) -> Self {
        let mut poly = Poly::new();
        poly.insert(vec![1], 1.0);
        Functional { prims: vec![p], poly }
    }

    /// `∫₀ᵀ f(t) dB(t)` with `f` tabulated on the left nodes.
    pub fn wiener(f: Vec<f64>) -> Self {
        let stop = f.len();
        Functional::primitive(Primitive::Wiener { f, stop })
    }

    /// `B(T)`.
    pub fn brownian(grid: &TimeGrid) -> Self {
        Functional::wiener(vec![1.0; grid.n_steps()])
    }

    /// `∫₀ᵀ ∫ h dÑ` with `h[j][m]`.
    pub fn jump(h: Vec<Vec<f64>>) -> Self {
        let stop = h.len();
        Functional::primitive(Primitive::Jump { h, stop })
    }

    /// `Ñ(T)` summed over all atoms (`h ≡ 1`).
    pub fn compensated_total(grid: &TimeGrid, levy: &LevyMeasure) -> Self {
        Functional::jump(vec![vec![1.0; levy.len()]; grid.n_steps()])
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.prims
    }

    pub fn degree(&self) -> u32 {
        self.poly.keys().map(|e| degree(e)).max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.poly.is_empty()
    }

    /// Constant value if the functional is deterministic.
    pub fn as_constant(&self) -> Option<f64> {
        match self.poly.len() {
            0 => Some(0.0),
            1 => self.poly.get(&self.key_for(&[])).copied(),
            _ => None,
        }
    }

    /// Coefficient of `Π prims[i]^e[i]`.
    pub fn coefficient(&self, exponents: &[u32]) -> f64 {
        self.poly.get(&self.key_for(exponents)).copied().unwrap_or(0.0)
    }

    fn key_for(&self, e: &[u32]) -> Vec<u32> {
        let mut k = vec![0; self.prims.len()];
        k[..e.len()].copy_from_slice(e);
        k
    }

    /// Rewrites both operands over a common primitive table.
    fn align(&self, other: &Functional) -> (Vec<Primitive>, Poly, Poly) {
        let mut prims = self.prims.clone();
        let mut map = Vec::with_capacity(other.prims.len());
        for p in &other.prims {
            match prims.iter().position(|q| q == p) {
                Some(i) => map.push(i),
                None => {
                    prims.push(p.clone());
                    map.push(prims.len() - 1);
                }
            }
        }
        let width = prims.len();
        let lift_self = self
            .poly
            .iter()
            .map(|(e, c)| {
                let mut k = e.clone();
                k.resize(width, 0);
                (k, *c)
            })
            .collect();
        let lift_other = other
            .poly
            .iter()
            .map(|(e, c)| {
                let mut k = vec![0; width];
                for (i, x) in e.iter().enumerate() {
                    k[map[i]] += x;
                }
                (k, *c)
            })
            .collect();
        (prims, lift_self, lift_other)
    }

    fn normalised(prims: Vec<Primitive>, poly: Poly) -> Self {
        let width = prims.len();
        let poly = clean(
            poly.into_iter()
                .map(|(mut e, c)| {
                    e.resize(width, 0);
                    (e, c)
                })
                .collect(),
        );
        Functional { prims, poly }
    }

    pub fn add(&self, other: &Functional) -> Functional {
        let (prims, mut a, b) = self.align(other);
        for (e, c) in b {
            *a.entry(e).or_insert(0.0) += c;
        }
        Functional::normalised(prims, a)
    }

    pub fn scale(&self, s: f64) -> Functional {
        Functional::normalised(self.prims.clone(), self.poly.iter().map(|(e, c)| (e.clone(), c * s)).collect())
    }

    pub fn sub(&self, other: &Functional) -> Functional {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Functional) -> Result<Functional> {
        let (prims, a, b) = self.align(other);
        let mut out = Poly::new();
        for (ea, ca) in &a {
            for (eb, cb) in &b {
                let e: Vec<u32> = ea.iter().zip(eb).map(|(x, y)| x + y).collect();
                *out.entry(e).or_insert(0.0) += ca * cb;
            }
        }
        let f = Functional::normalised(prims, out);
        if f.degree() > MAX_DEGREE {
            return Err(Error::Unsupported(format!(
                "functional of degree {} exceeds the supported degree {MAX_DEGREE}",
                f.degree()
            )));
        }
        Ok(f)
    }

    pub fn pow(&self, k: u32) -> Result<Functional> {
        let mut out = Functional::constant(1.0);
        for _ in 0..k {
            out = out.mul(self)?;
        }
        Ok(out)
    }

    /// The same functional with every primitive stopped at `node`.
    pub fn stopped_at(&self, node: usize) -> Functional {
        let prims = self.prims.iter().map(|p| p.stopped_at(node)).collect();
        Functional {
            prims,
            poly: self.poly.clone(),
        }
    }

    fn eval_poly(&self, x: &[f64]) -> f64 {
        self.poly
            .iter()
            .map(|(e, c)| c * e.iter().zip(x).map(|(&k, v)| v.powi(k as i32)).product::<f64>())
            .sum()
    }

    /// Value on one path.
    pub fn eval(&self, noise: &NoiseBundle, p: usize) -> f64 {
        let x: Vec<f64> = self.prims.iter().map(|q| q.value(noise, p)).collect();
        self.eval_poly(&x)
    }

    pub fn eval_all(&self, noise: &NoiseBundle) -> Vec<f64> {
        (0..noise.n_paths()).into_par_iter().map(|p| self.eval(noise, p)).collect()
    }

    /// `∂P/∂x_i`.
    fn partial(&self, i: usize) -> Poly {
        let mut out = Poly::new();
        for (e, c) in &self.poly {
            if e[i] > 0 {
                let mut k = e.clone();
                k[i] -= 1;
                *out.entry(k).or_insert(0.0) += c * e[i] as f64;
            }
        }
        out
    }

    /// `P(x + shift) − P(x)` expanded.
    fn shifted_difference(&self, shift: &[f64]) -> Poly {
        let mut out = Poly::new();
        for (e, c) in &self.poly {
            // Π (x_i + h_i)^{e_i} by binomial expansion, one variable at a time
            let mut terms: Vec<(Vec<u32>, f64)> = vec![(vec![0; e.len()], *c)];
            for (i, &k) in e.iter().enumerate() {
                let mut next = Vec::with_capacity(terms.len() * (k as usize + 1));
                for (te, tc) in &terms {
                    for r in 0..=k {
                        let coef = binomial(k, r) as f64 * shift[i].powi((k - r) as i32);
                        if coef != 0.0 {
                            let mut ne = te.clone();
                            ne[i] = r;
                            next.push((ne, tc * coef));
                        }
                    }
                }
                terms = next;
            }
            for (te, tc) in terms {
                *out.entry(te).or_insert(0.0) += tc;
            }
            *out.entry(e.clone()).or_insert(0.0) -= c;
        }
        out
    }
}

fn ratio(d: f64, se: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else {
        d / se
    }
}

fn binomial(n: u32, k: u32) -> u64 {
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}

/// `D_{t_k} F` by the chain rule; `D_{t_k} ∫ f dB = f(t_k)` when `k` is
/// before the stopping node, else 0. Jump primitives have no Brownian
/// derivative.
pub fn hida_derivative_brownian(f: &Functional, k: usize) -> Functional {
    let mut out = Poly::new();
    for (i, prim) in f.prims.iter().enumerate() {
        let d = match prim {
            Primitive::Wiener { f: fv, stop } if k < *stop => fv[k],
            _ => 0.0,
        };
        if d != 0.0 {
            for (e, c) in f.partial(i) {
                *out.entry(e).or_insert(0.0) += c * d;
            }
        }
    }
    Functional::normalised(f.prims.clone(), out)
}

/// `D_{t_k, e_m} F = F(prims + Δ) − F(prims)` where `Δ` adds `h(t_k, e_m)` to
/// each jump primitive (before its stopping node) and nothing to Wiener ones.
pub fn hida_derivative_jump(f: &Functional, k: usize, m: usize) -> Functional {
    let shift: Vec<f64> = f
        .prims
        .iter()
        .map(|p| match p {
            Primitive::Jump { h, stop } if k < *stop => h[k].get(m).copied().unwrap_or(0.0),
            _ => 0.0,
        })
        .collect();
    Functional::normalised(f.prims.clone(), f.shifted_difference(&shift))
}

/// An adapted process `Ψ(t_j) = G` with every primitive of `G` stopped at `t_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    template: Functional,
}

impl AdaptedProcess {
    pub fn stopped(template: Functional) -> Self {
        AdaptedProcess { template }
    }

    pub fn constant(c: f64) -> Self {
        AdaptedProcess {
            template: Functional::constant(c),
        }
    }

    pub fn at(&self, j: usize) -> Functional {
        self.template.stopped_at(j)
    }
}

/// Both sides of a duality identity with standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualityEstimate {
    pub lhs: f64,
    pub rhs: f64,
    pub se_lhs: f64,
    pub se_rhs: f64,
    /// standard error of the pathwise difference `lhs_p − rhs_p`
    pub se_diff: f64,
}

impl DualityEstimate {
    fn from_samples(l: &[f64], r: &[f64]) -> Self {
        let a = Estimate::from_samples(l);
        let b = Estimate::from_samples(r);
        let d: Vec<f64> = l.iter().zip(r).map(|(x, y)| x - y).collect();
        DualityEstimate {
            lhs: a.value,
            rhs: b.value,
            se_lhs: a.se,
            se_rhs: b.se,
            se_diff: Estimate::from_samples(&d).se,
        }
    }

    /// `|lhs − rhs| / sqrt(se_lhs² + se_rhs²)`.
    pub fn z(&self) -> f64 {
        ratio((self.lhs - self.rhs).abs(), self.se_lhs.hypot(self.se_rhs))
    }

    /// `|lhs − rhs|` in units of the pathwise-difference standard error,
    /// which accounts for the common noise of both sides.
    pub fn z_paired(&self) -> f64 {
        ratio((self.lhs - self.rhs).abs(), self.se_diff)
    }

    /// Both sides within `n_se` standard errors of `reference`, with a
    /// rounding allowance for sides that are deterministic.
    pub fn both_within(&self, reference: f64, n_se: f64) -> bool {
        let slack = 1e-9 * reference.abs().max(1.0);
        (self.lhs - reference).abs() <= n_se * self.se_lhs + slack
            && (self.rhs - reference).abs() <= n_se * self.se_rhs + slack
    }
}

/// Running primitive values and regression state `(B(t_j), Ñ_m(t_j))`.
struct Sweep<'a> {
    noise: &'a NoiseBundle,
    level: Vec<f64>,
}

impl<'a> Sweep<'a> {
    fn new(noise: &'a NoiseBundle) -> Self {
        Sweep {
            noise,
            level: vec![0.0; noise.n_paths() * (1 + noise.n_atoms())],
        }
    }

    fn projector(&self) -> Result<Projector> {
        let dim = 1 + self.noise.n_atoms();
        Projector::fit(&StateMatrix::new(self.noise.n_paths(), dim, self.level.clone())?, PROJECTION_DEGREE)
    }

    fn advance(&mut self, j: usize) {
        let dim = 1 + self.noise.n_atoms();
        let noise = self.noise;
        self.level.par_chunks_mut(dim).enumerate().for_each(|(p, row)| {
            row[0] += noise.increment(p, j);
            for m in 0..dim - 1 {
                row[1 + m] += noise.compensated_count(p, j, m);
            }
        });
    }
}

fn running_values(g: &Functional, noise: &NoiseBundle) -> Vec<f64> {
    vec![0.0; noise.n_paths() * g.prims.len()]
}

fn advance_values(g: &Functional, noise: &NoiseBundle, values: &mut [f64], j: usize) {
    let w = g.prims.len();
    if w == 0 {
        return;
    }
    values.par_chunks_mut(w).enumerate().for_each(|(p, row)| {
        for (i, prim) in g.prims.iter().enumerate() {
            row[i] += prim.increment(noise, p, j);
        }
    });
}

fn prim_values(f: &Functional, noise: &NoiseBundle) -> Vec<Vec<f64>> {
    (0..noise.n_paths())
        .into_par_iter()
        .map(|p| f.prims.iter().map(|q| q.value(noise, p)).collect())
        .collect()
}

/// Monte Carlo check of `E[F ∫ Ψ dB] = E[∫ E[D_t F | F_t] Ψ dt]`.
pub fn verify_duality_brownian(f: &Functional, psi: &AdaptedProcess, noise: &NoiseBundle) -> Result<DualityEstimate> {
    let n = noise.grid().n_steps();
    let dt = noise.grid().dt();
    let n_paths = noise.n_paths();
    let fx = prim_values(f, noise);
    let fvals: Vec<f64> = fx.par_iter().map(|x| f.eval_poly(x)).collect();
    let w = psi.template.prims.len();
    let mut psi_vals = running_values(&psi.template, noise);
    let mut sweep = Sweep::new(noise);
    let mut stoch = vec![0.0; n_paths];
    let mut rhs = vec![0.0; n_paths];
    for j in 0..n {
        let psi_j: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|p| psi.template.eval_poly(&psi_vals[p * w..(p + 1) * w]))
            .collect();
        let d = hida_derivative_brownian(f, j);
        if !d.is_zero() {
            let dvals: Vec<f64> = fx.par_iter().map(|x| d.eval_poly(x)).collect();
            let proj = sweep.projector()?.project(&dvals)?;
            for p in 0..n_paths {
                rhs[p] += proj[p] * psi_j[p] * dt;
            }
        }
        for p in 0..n_paths {
            stoch[p] += psi_j[p] * noise.increment(p, j);
        }
        advance_values(&psi.template, noise, &mut psi_vals, j);
        sweep.advance(j);
    }
    let lhs: Vec<f64> = fvals.iter().zip(&stoch).map(|(a, b)| a * b).collect();
    Ok(DualityEstimate::from_samples(&lhs, &rhs))
}

/// An adapted integrand `Φ(t_j, e_m) = weight[m] · Ψ(t_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedJumpProcess {
    pub process: AdaptedProcess,
    pub atom_factor: Vec<f64>,
}

impl AdaptedJumpProcess {
    pub fn constant(c: f64, n_atoms: usize) -> Self {
        AdaptedJumpProcess {
            process: AdaptedProcess::constant(c),
            atom_factor: vec![1.0; n_atoms],
        }
    }
}

/// Monte Carlo check of `E[F ∫∫ Φ dÑ] = E[∫∫ E[D_{t,e} F | F_t] Φ ν(de) dt]`.
pub fn verify_duality_jump(f: &Functional, phi: &AdaptedJumpProcess, noise: &NoiseBundle) -> Result<DualityEstimate> {
    let n = noise.grid().n_steps();
    let dt = noise.grid().dt();
    let n_paths = noise.n_paths();
    let n_atoms = noise.n_atoms();
    if phi.atom_factor.len() != n_atoms {
        return Err(Error::Dimension {
            expected: n_atoms,
            got: phi.atom_factor.len(),
        });
    }
    let weights: Vec<f64> = noise.levy().atoms().iter().map(|a| a.weight).collect();
    let fx = prim_values(f, noise);
    let fvals: Vec<f64> = fx.par_iter().map(|x| f.eval_poly(x)).collect();
    let template = &phi.process.template;
    let w = template.prims.len();
    let mut psi_vals = running_values(template, noise);
    let mut sweep = Sweep::new(noise);
    let mut stoch = vec![0.0; n_paths];
    let mut rhs = vec![0.0; n_paths];
    for j in 0..n {
        let psi_j: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|p| template.eval_poly(&psi_vals[p * w..(p + 1) * w]))
            .collect();
        let proj = sweep.projector()?;
        for m in 0..n_atoms {
            let d = hida_derivative_jump(f, j, m);
            if !d.is_zero() {
                let dvals: Vec<f64> = fx.par_iter().map(|x| d.eval_poly(x)).collect();
                let fit = proj.project(&dvals)?;
                let scale = phi.atom_factor[m] * weights[m] * dt;
                for p in 0..n_paths {
                    rhs[p] += fit[p] * psi_j[p] * scale;
                }
            }
            for p in 0..n_paths {
                stoch[p] += phi.atom_factor[m] * psi_j[p] * noise.compensated_count(p, j, m);
            }
        }
        advance_values(template, noise, &mut psi_vals, j);
        sweep.advance(j);
    }
    let lhs: Vec<f64> = fvals.iter().zip(&stoch).map(|(a, b)| a * b).collect();
    Ok(DualityEstimate::from_samples(&lhs, &rhs))
}

/// `E[F] + Σ_i E[D_{t_i} F | F_{t_i}] ΔB_i` per path (Brownian functionals).
pub fn clark_ocone_reconstruction(f: &Functional, noise: &NoiseBundle) -> Result<Vec<f64>> {
    let n = noise.grid().n_steps();
    let fx = prim_values(f, noise);
    let fvals: Vec<f64> = fx.par_iter().map(|x| f.eval_poly(x)).collect();
    let (m, _) = mean_var(&fvals);
    let mut out = vec![m; noise.n_paths()];
    let mut sweep = Sweep::new(noise);
    for j in 0..n {
        let d = hida_derivative_brownian(f, j);
        if !d.is_zero() {
            let dvals: Vec<f64> = fx.par_iter().map(|x| d.eval_poly(x)).collect();
            let fit = sweep.projector()?.project(&dvals)?;
            for (p, o) in out.iter_mut().enumerate() {
                *o += fit[p] * noise.increment(p, j);
            }
        }
        sweep.advance(j);
    }
    Ok(out)
}

/// One line of the duality report.
#[derive(Debug, Clone, Serialize)]
pub struct DualityRow {
    pub name: String,
    pub reference: f64,
    #[serde(flatten)]
    pub estimate: DualityEstimate,
}

impl DualityRow {
    pub fn z(&self) -> f64 {
        self.estimate.z()
    }

    pub fn pass(&self, n_se: f64) -> bool {
        self.estimate.both_within(self.reference, n_se) && self.z() <= n_se
    }
}

/// Brownian grid steps for the built-in cases; the Itô-sum bias of the
/// `B(1)²` case is `Δt`.
pub const BROWNIAN_CASE_STEPS: usize = 400;
pub const JUMP_CASE_STEPS: usize = 100;

/// The built-in identity cases on `T = 1`: `F = B(1)²` with `Ψ = B`,
/// `F = B(1)` with `Ψ = 1`, a constant `F`, and on a single atom of
/// intensity 2: `F = Ñ(1)²` and `F = Ñ(1)` with `Φ = 1`.
pub fn builtin_duality_cases(n_paths: usize, seed: u64, n_blocks: usize) -> Result<Vec<DualityRow>> {
    let mut rows = Vec::new();
    {
        let grid = TimeGrid::new(1.0, BROWNIAN_CASE_STEPS)?;
        let noise = NoiseBundle::generate(&grid, &LevyMeasure::empty(), n_paths, seed, n_blocks)?;
        let b = Functional::brownian(&grid);
        let cases = [
            ("brownian: F = B(1)^2, psi = B", b.pow(2)?, AdaptedProcess::stopped(b.clone()), 1.0),
            ("brownian: F = B(1), psi = 1", b.clone(), AdaptedProcess::constant(1.0), 1.0),
            ("brownian: F = 5, psi = B", Functional::constant(5.0), AdaptedProcess::stopped(b.clone()), 0.0),
        ];
        for (name, f, psi, reference) in cases {
            rows.push(DualityRow {
                name: name.into(),
                reference,
                estimate: verify_duality_brownian(&f, &psi, &noise)?,
            });
        }
    }
    {
        let grid = TimeGrid::new(1.0, JUMP_CASE_STEPS)?;
        let levy = LevyMeasure::single(1.0, 2.0)?;
        let noise = NoiseBundle::generate(&grid, &levy, n_paths, seed, n_blocks)?;
        let g = Functional::compensated_total(&grid, &levy);
        let phi = AdaptedJumpProcess::constant(1.0, 1);
        let cases = [
            ("jump: F = N~(1)^2, phi = 1", g.pow(2)?, 2.0),
            ("jump: F = N~(1), phi = 1", g.clone(), 2.0),
            ("jump: F = 5, phi = 1", Functional::constant(5.0), 0.0),
        ];
        for (name, f, reference) in cases {
            rows.push(DualityRow {
                name: name.into(),
                reference,
                estimate: verify_duality_jump(&f, &phi, &noise)?,
            });
        }
    }
    Ok(rows)
}
