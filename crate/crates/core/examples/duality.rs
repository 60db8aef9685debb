//! Malliavin derivatives of polynomial functionals and Monte Carlo checks of
//! the Brownian and jump duality formulas.

use fbsvie::malliavin::{builtin_duality_cases, hida_derivative_brownian, Functional};
use fbsvie::model::TimeGrid;

fn main() -> fbsvie::Result<()> {
    let grid = TimeGrid::new(1.0, 10)?;
    let b = Functional::brownian(&grid);
    let f = b.pow(3)?;
    // D_t B(1)^3 = 3 B(1)^2 for every t
    let d = hida_derivative_brownian(&f, 4);
    println!("degree of F = {}, degree of D F = {}", f.degree(), d.degree());

    for row in builtin_duality_cases(40_000, 2024, 8)? {
        println!(
            "{:<45} lhs {:+.4} rhs {:+.4} exact {:+.4} z {:.2}",
            row.name,
            row.estimate.lhs,
            row.estimate.rhs,
            row.reference,
            row.z()
        );
    }
    Ok(())
}
