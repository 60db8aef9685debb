//! The optimal consumption rate c* = λ / P under both discount conventions.

use fbsvie::control::AdjointState;
use fbsvie::model::{GammaConvention, ScenarioSpec};

fn main() {
    for conv in [GammaConvention::Discounting, GammaConvention::PaperOde] {
        let mut s = ScenarioSpec::reference().with_constant_gamma(0.5);
        s.convention = conv;
        let adj = AdjointState::new(&s);
        println!("{conv:?}: first-order residual {:.1e}", adj.first_order_residual());
        for row in adj.rows().iter().step_by(20) {
            println!("  t {:.2}  lambda {:.5}  P {:.5}  c* {:.5}", row[0], row[1], row[2], row[3]);
        }
    }
}
