//! Recursive log utility of consumption along simulated wealth, against the
//! closed form available for constant coefficients.

use fbsvie::bsde::recursive_utility;
use fbsvie::control::{log_utility_oracle, ControlFn};
use fbsvie::fsvie::simulate_fsvie;
use fbsvie::model::ScenarioSpec;
use fbsvie::paths::NoiseBundle;

fn main() -> fbsvie::Result<()> {
    let s = ScenarioSpec::reference();
    let noise = NoiseBundle::generate(&s.grid, &s.levy, 20_000, 5, 8)?;
    for control in [ControlFn::cstar(), ControlFn::constant(1.0), ControlFn::constant(0.5)] {
        let x = simulate_fsvie(&s, &noise, &control)?;
        let u = recursive_utility(&s, &control, &x, &noise)?;
        let exact = log_utility_oracle(&s, &control)?;
        println!(
            "{:>10}: Y(0) = {:+.5} ± {:.5}   closed form {:+.5}",
            control.label(),
            u.y0.value,
            u.y0.se,
            exact
        );
    }
    Ok(())
}
