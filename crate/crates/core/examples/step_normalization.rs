//! Confidences to weights, with and without step normalization.
//!
//! cargo run --example step_normalization

use guided_decode::guidance::{confidence_weights, step_normalize, DEFAULT_EPSILON};

fn main() -> guided_decode::Result<()> {
    let confidences = [0.2, 0.5, 0.8, 0.95, 0.99];
    let raw = confidence_weights(&confidences)?;
    println!("p_max      {confidences:?}");
    println!("w = 1-p    {:?}  budget {:.4}", raw.weights(), raw.budget());
    let norm = step_normalize(&raw, DEFAULT_EPSILON)?;
    let shown: Vec<String> = norm.weights().iter().map(|w| format!("{w:.4}")).collect();
    println!("normalized [{}]  budget {:.8}", shown.join(", "), norm.budget());

    // The raw budget grows with the number of confident tokens; the normalized one does not.
    for n in [1, 8, 64] {
        let w = confidence_weights(&vec![0.9; n])?;
        let b = step_normalize(&w, DEFAULT_EPSILON)?.budget();
        println!(
            "{n:>3} tokens at p_max 0.9: raw budget {:>6.2}, normalized {b:.8}",
            w.budget()
        );
    }
    let ones = step_normalize(&confidence_weights(&[0.0; 4])?, DEFAULT_EPSILON)?;
    println!(
        "all-zero confidences: weights {:?}, budget {}",
        ones.weights(),
        ones.budget()
    );
    Ok(())
}
