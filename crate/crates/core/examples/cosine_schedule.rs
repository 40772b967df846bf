//! The cosine guidance schedule for a few exponents.
//!
//! cargo run --example cosine_schedule

use guided_decode::guidance::cosine_gamma;

fn main() -> guided_decode::Result<()> {
    let gamma = 3.0;
    let total = 64;
    let ks = [0.5, 1.0, 1.4, 2.0, 4.0];
    print!("{:>4}", "t");
    for k in ks {
        print!("  k={k:<4}");
    }
    println!();
    for t in (0..=total).step_by(8) {
        print!("{t:>4}");
        for k in ks {
            print!("  {:>6.3}", cosine_gamma(t, total, gamma, k)?);
        }
        println!();
    }
    println!("gamma_T = gamma - 1 = {}", gamma - 1.0);
    Ok(())
}
