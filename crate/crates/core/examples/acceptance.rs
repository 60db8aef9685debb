//! Runs the fast acceptance criteria and prints one line per criterion.
//! Pass criterion ids as arguments to choose others, e.g. `-- 5 6`.

use fbsvie::acceptance::{run_criterion, AcceptanceConfig};

fn main() {
    let ids: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let ids = if ids.is_empty() { vec![1, 9] } else { ids };
    let cfg = AcceptanceConfig::standard();
    for id in ids {
        println!("{}", run_criterion(id, &cfg).line());
    }
}
