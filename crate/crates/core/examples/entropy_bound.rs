//! Checks the subset-entropy bound on scalar likelihood pairs and on a
//! random sweep of pairs.
//!
//! cargo run --release --example entropy_bound -- [samples]

use magms::theory::{sweep_bound, verify_entropy_bound, ScalarLikelihoodPair};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!(
        "{:>6} {:>6} {:>9} {:>9} {:>9} {:>9}  holds",
        "p_M", "p_S", "H_S", "H_M", "KL", "H_M+KL"
    );
    for (p_m, p_s) in [
        (0.9, 0.6),
        (1.0, 0.5),
        (0.6, 0.3),
        (0.99, 0.98),
        (0.2, 0.01),
    ] {
        let c = verify_entropy_bound(ScalarLikelihoodPair::new(p_m, p_s)?);
        println!(
            "{:>6.2} {:>6.2} {:>9.6} {:>9.6} {:>9.6} {:>9.6}  {}",
            c.p_m, c.p_s, c.h_s, c.h_m, c.d_kl, c.bound, c.holds
        );
    }
    let n: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(100_000);
    println!(
        "fraction of {n} random pairs holding: {:.6}",
        sweep_bound(n, 0)?
    );

    if let Err(e) = ScalarLikelihoodPair::new(0.3, 0.6) {
        println!("rejected out-of-domain pair: {e}");
    }
    Ok(())
}
