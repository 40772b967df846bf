//! The grid grammar: sample grids, print one, score a batch.
//!
//! cargo run --example grammar_scoring

use guided_decode::grammar::{self, GRID_COLS};
use guided_decode::SplitMix64;

fn main() -> guided_decode::Result<()> {
    let mut rng = SplitMix64::new(3);
    let grid = grammar::sample_grid(2, &mut rng);
    for row in grid.chunks(GRID_COLS) {
        let cells: Vec<String> = row.iter().map(|t| format!("{t:>2}")).collect();
        println!("{}", cells.join(" "));
    }
    println!("{:?}", grammar::score_grid(&grid, 2)?);

    let batch: Vec<(Vec<u32>, usize)> = (0..400)
        .map(|i| (grammar::sample_grid(i % 4, &mut rng), i % 4))
        .collect();
    let view = || batch.iter().map(|(g, c)| (g.as_slice(), *c));
    println!(
        "400 grammar grids: accuracy {}, validity {}",
        grammar::class_accuracy(view())?,
        grammar::validity_rate(view())?
    );

    let uniform: Vec<u32> = (0..64).map(|i| i % 16).collect();
    println!("uniform grid vs class 0: {:?}", grammar::score_grid(&uniform, 0)?);
    Ok(())
}
