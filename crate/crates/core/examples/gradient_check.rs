//! Finite-difference checks of every differentiable op and composed module.
//!
//! cargo run --release --example gradient_check -- [name-filter]

use catnet::gradcheck::{run_all, CheckOptions};

fn main() -> catnet::Result<()> {
    let filter = std::env::args().nth(1);
    let outcomes = run_all(&CheckOptions::default(), filter.as_deref())?;
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} checks, {failed} failed", outcomes.len());
    Ok(())
}
