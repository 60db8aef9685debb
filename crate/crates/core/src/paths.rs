//! Seeded Brownian increments and per-step jump counts on a fixed grid.
//!
//! Every block of paths draws from its own ChaCha stream (`seed`, stream =
//! block index), so a bundle depends only on `(seed, n_paths, grid, levy,
//! n_blocks)` and never on how many worker threads generated it.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{LevyMeasure, TimeGrid};

/// Brownian increments `ΔB_{p,i}` and jump counts `c_{p,i,m}` for jumps in
/// `(t_i, t_{i+1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    grid: TimeGrid,
    levy: LevyMeasure,
    n_paths: usize,
    seed: u64,
    n_blocks: usize,
    /// `[p * n + i]`
    increments: Vec<f64>,
    /// `[(p * n + i) * n_atoms + m]`
    counts: Vec<u32>,
}

impl NoiseBundle {
    pub fn generate(grid: &TimeGrid, levy: &LevyMeasure, n_paths: usize, seed: u64, n_blocks: usize) -> Result<Self> {
        if n_paths == 0 {
            return Err(Error::validation("n_paths must be >= 1"));
        }
        if n_blocks == 0 || !n_paths.is_multiple_of(n_blocks) {
            return Err(Error::validation(format!(
                "n_blocks = {n_blocks} does not divide n_paths = {n_paths}"
            )));
        }
        let n = grid.n_steps();
        let n_atoms = levy.len();
        let per_block = n_paths / n_blocks;
        let normal = Normal::new(0.0, grid.dt().sqrt()).expect("positive variance");
        let poissons: Vec<Option<Poisson<f64>>> = levy
            .atoms()
            .iter()
            .map(|a| Poisson::new(a.weight * grid.dt()).ok())
            .collect();

        let blocks: Vec<(Vec<f64>, Vec<u32>)> = (0..n_blocks)
            .into_par_iter()
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(b as u64);
                let mut inc = Vec::with_capacity(per_block * n);
                let mut cnt = Vec::with_capacity(per_block * n * n_atoms);
                for _ in 0..per_block {
                    for _ in 0..n {
                        inc.push(normal.sample(&mut rng));
                        for p in &poissons {
                            cnt.push(p.as_ref().map_or(0, |d| d.sample(&mut rng) as u32));
                        }
                    }
                }
                (inc, cnt)
            })
            .collect();

        let mut increments = Vec::with_capacity(n_paths * n);
        let mut counts = Vec::with_capacity(n_paths * n * n_atoms);
        for (inc, cnt) in blocks {
            increments.extend(inc);
            counts.extend(cnt);
        }
        Ok(NoiseBundle {
            grid: *grid,
            levy: levy.clone(),
            n_paths,
            seed,
            n_blocks,
            increments,
            counts,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn levy(&self) -> &LevyMeasure {
        &self.levy
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_atoms(&self) -> usize {
        self.levy.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    #[inline]
    pub fn increment(&self, p: usize, i: usize) -> f64 {
        self.increments[p * self.grid.n_steps() + i]
    }

    /// All increments of path `p`.
    #[inline]
    pub fn path_increments(&self, p: usize) -> &[f64] {
        let n = self.grid.n_steps();
        &self.increments[p * n..(p + 1) * n]
    }

    #[inline]
    pub fn count(&self, p: usize, i: usize, m: usize) -> u32 {
        self.counts[(p * self.grid.n_steps() + i) * self.n_atoms() + m]
    }

    /// `c_{p,i,m} - w_m Δt`.
    #[inline]
    pub fn compensated_count(&self, p: usize, i: usize, m: usize) -> f64 {
        self.count(p, i, m) as f64 - self.levy.atoms()[m].weight * self.grid.dt()
    }

    /// `∫∫ f dÑ` over `(t_i, t_{i+1}]` on path `p`.
    pub fn compensated_jump_sum(&self, p: usize, i: usize, f: impl Fn(f64) -> f64) -> f64 {
        self.levy
            .atoms()
            .iter()
            .enumerate()
            .map(|(m, a)| self.compensated_count(p, i, m) * f(a.size))
            .sum()
    }

    /// `B(t_i)` on path `p`.
    pub fn brownian_level(&self, p: usize, i: usize) -> f64 {
        self.path_increments(p)[..i].iter().sum()
    }

    /// `Ñ_m(t_i)`: compensated count of atom `m` accumulated before node `i`.
    pub fn compensated_level(&self, p: usize, i: usize, m: usize) -> f64 {
        (0..i).map(|j| self.compensated_count(p, j, m)).sum()
    }

    /// Aggregates `factor` consecutive steps, giving the same paths on a
    /// coarser grid (common random numbers across resolutions).
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsened(factor)?;
        let n = self.grid.n_steps();
        let nc = grid.n_steps();
        let na = self.n_atoms();
        let mut increments = Vec::with_capacity(self.n_paths * nc);
        let mut counts = Vec::with_capacity(self.n_paths * nc * na);
        for p in 0..self.n_paths {
            let row = &self.increments[p * n..(p + 1) * n];
            for chunk in row.chunks(factor) {
                increments.push(chunk.iter().sum());
            }
            for ic in 0..nc {
                for m in 0..na {
                    counts.push((0..factor).map(|k| self.count(p, ic * factor + k, m)).sum());
                }
            }
        }
        Ok(NoiseBundle {
            grid,
            levy: self.levy.clone(),
            n_paths: self.n_paths,
            seed: self.seed,
            n_blocks: self.n_blocks,
            increments,
            counts,
        })
    }

    /// Little-endian dump: header `{n, n_paths, seed, n_blocks, n_atoms}` as
    /// `u64`, then increments (`f64`, path-major), then jump counts (`u32`).
    pub fn dump<W: Write>(&self, mut w: W) -> Result<()> {
        for h in [
            self.grid.n_steps() as u64,
            self.n_paths as u64,
            self.seed,
            self.n_blocks as u64,
            self.n_atoms() as u64,
        ] {
            w.write_all(&h.to_le_bytes())?;
        }
        for x in &self.increments {
            w.write_all(&x.to_le_bytes())?;
        }
        for c in &self.counts {
            w.write_all(&c.to_le_bytes())?;
        }
        Ok(())
    }

    /// Inverse of [`NoiseBundle::dump`]; grid and Lévy measure are supplied
    /// by the caller and checked against the header.
    pub fn restore<R: Read>(mut r: R, grid: &TimeGrid, levy: &LevyMeasure) -> Result<Self> {
        let mut u64buf = [0u8; 8];
        let mut header = [0u64; 5];
        for h in header.iter_mut() {
            r.read_exact(&mut u64buf)?;
            *h = u64::from_le_bytes(u64buf);
        }
        let [n, n_paths, seed, n_blocks, n_atoms] = header;
        if n as usize != grid.n_steps() {
            return Err(Error::GridMismatch(format!("dump has {n} steps, grid has {}", grid.n_steps())));
        }
        if n_atoms as usize != levy.len() {
            return Err(Error::GridMismatch(format!("dump has {n_atoms} atoms, measure has {}", levy.len())));
        }
        let len = (n * n_paths) as usize;
        let mut increments = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut u64buf)?;
            increments.push(f64::from_le_bytes(u64buf));
        }
        let mut u32buf = [0u8; 4];
        let mut counts = Vec::with_capacity(len * n_atoms as usize);
        for _ in 0..len * n_atoms as usize {
            r.read_exact(&mut u32buf)?;
            counts.push(u32::from_le_bytes(u32buf));
        }
        Ok(NoiseBundle {
            grid: *grid,
            levy: levy.clone(),
            n_paths: n_paths as usize,
            seed,
            n_blocks: n_blocks as usize,
            increments,
            counts,
        })
    }
}

/// `generate_noise(grid, levy, n_paths, seed, n_blocks)`.
pub fn generate_noise(grid: &TimeGrid, levy: &LevyMeasure, n_paths: usize, seed: u64, n_blocks: usize) -> Result<NoiseBundle> {
    NoiseBundle::generate(grid, levy, n_paths, seed, n_blocks)
}

/// `compensated_jump_sum(bundle, p, i, f)`.
pub fn compensated_jump_sum(bundle: &NoiseBundle, p: usize, i: usize, f: impl Fn(f64) -> f64) -> f64 {
    bundle.compensated_jump_sum(p, i, f)
}
