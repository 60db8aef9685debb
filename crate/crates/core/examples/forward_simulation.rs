//! Simulates the controlled wealth equation with jumps and compares the
//! sample mean with its deterministic oracle.
//!
//! cargo run --release --example forward_simulation

use fbsvie::control::ControlFn;
use fbsvie::fsvie::{forward_mean_oracle, simulate_fsvie};
use fbsvie::model::ScenarioSpec;
use fbsvie::paths::NoiseBundle;

fn main() -> fbsvie::Result<()> {
    let s = ScenarioSpec::reference().with_atom(-0.1, 0.5)?;
    let noise = NoiseBundle::generate(&s.grid, &s.levy, 20_000, 11, 8)?;
    let control = ControlFn::constant(0.5);
    let paths = simulate_fsvie(&s, &noise, &control)?;
    let oracle = forward_mean_oracle(&s, &control)?;

    println!("{:>5} {:>10} {:>10} {:>10} {:>10}", "t", "mean", "se", "q05", "oracle");
    for (i, pt) in paths.summary().iter().enumerate().step_by(10) {
        println!("{:5.2} {:10.6} {:10.6} {:10.6} {:10.6}", pt.t, pt.mean, pt.se, pt.q05, oracle[i]);
    }
    println!("all states positive: {}", paths.positive_state());
    Ok(())
}
