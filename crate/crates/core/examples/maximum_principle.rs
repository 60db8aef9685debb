//! Directional derivatives of the performance functional. They vanish at c*
//! and not at a constant control.

use fbsvie::control::{gateaux_derivative, BumpSpec, ControlFn};
use fbsvie::model::ScenarioSpec;
use fbsvie::paths::NoiseBundle;

fn main() -> fbsvie::Result<()> {
    let s = ScenarioSpec::reference();
    let noise = NoiseBundle::generate(&s.grid, &s.levy, 10_000, 21, 8)?;
    for base in [ControlFn::cstar(), ControlFn::constant(1.0)] {
        println!("{}", base.label());
        for k in [1, 4, 7] {
            let bump = BumpSpec {
                start: 0.1 * k as f64,
                width: 0.1,
                height: 1.0,
            };
            let d = gateaux_derivative(&s, &base, bump, &noise, 1e-3)?;
            println!("  bump at {:.1}: dJ = {:+.3e} ± {:.1e}", bump.start, d.value, d.se);
        }
    }
    Ok(())
}
