//! Least-squares conditional expectation: E[B(1)^2 | B(1/2)] = B(1/2)^2 + 1/2.

use fbsvie::condexp::{conditional_mean, BrownianState};
use fbsvie::model::{FiltrationMode, LevyMeasure, TimeGrid};
use fbsvie::paths::NoiseBundle;

fn main() -> fbsvie::Result<()> {
    let grid = TimeGrid::new(1.0, 20)?;
    let noise = NoiseBundle::generate(&grid, &LevyMeasure::empty(), 50_000, 3, 8)?;
    let states = BrownianState { noise: &noise };
    let target: Vec<f64> = (0..noise.n_paths()).map(|p| noise.brownian_level(p, 20).powi(2)).collect();

    // the full filtration conditions on the state at t_10 = 0.5
    let fitted = conditional_mean(FiltrationMode::Full, &grid, 10, &target, &states, 2)?;
    let rmse = ((0..noise.n_paths())
        .map(|p| (fitted[p] - noise.brownian_level(p, 10).powi(2) - 0.5).powi(2))
        .sum::<f64>()
        / noise.n_paths() as f64)
        .sqrt();
    println!("rms distance to the exact conditional mean: {rmse:.2e}");

    for (p, f) in fitted.iter().take(5).enumerate() {
        let b = noise.brownian_level(p, 10);
        println!("B(0.5) = {b:+.4}  fitted {f:.4}  exact {:.4}", b * b + 0.5);
    }
    Ok(())
}
