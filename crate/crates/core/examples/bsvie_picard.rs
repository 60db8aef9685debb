//! Picard iteration for a backward Volterra equation with driver sin(y).
//! The weighted distance between iterates shrinks geometrically.

use fbsvie::bsde::noise_states;
use fbsvie::bsvie::{solve_bsvie, Designs, PicardOptions, TerminalFamily, VolterraInput};
use fbsvie::model::{FiltrationMode, LevyMeasure, TimeGrid};
use fbsvie::paths::NoiseBundle;

fn main() -> fbsvie::Result<()> {
    let grid = TimeGrid::new(1.0, 50)?;
    let n_paths = 1_000;
    let noise = NoiseBundle::generate(&grid, &LevyMeasure::empty(), n_paths, 17, 4)?;
    let designs = Designs::new(&noise, &noise_states(&noise), FiltrationMode::Full, 2)?;
    let n = grid.n_steps();
    let zeta = TerminalFamily::from_fn(&grid, n_paths, |i, p| 1.0 + grid.node(i) * noise.brownian_level(p, n));
    let opts = PicardOptions {
        tol: 1e-10,
        ..Default::default()
    };
    let sol = solve_bsvie(&zeta, &|v: &VolterraInput<'_>| v.y.sin(), &noise, &designs, opts)?;

    for w in sol.log_rows() {
        println!("pass {:2}: distance {:.3e}", w[0], w[1]);
    }
    for row in sol.diagonal_rows().iter().step_by(10) {
        println!("E Y(t) at t = {:.1}: {:.5}", row[0], row[1]);
    }
    Ok(())
}
