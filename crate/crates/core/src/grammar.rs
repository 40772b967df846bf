//! Synthetic class-conditional grid grammar and rule-based scoring.
//!
//! Each of 4 classes owns a band of 4 consecutive image tokens. A well-formed
//! grid of class `c` draws each of its 64 cells from band `c` with probability
//! 0.9 and uniformly from the other 12 tokens otherwise.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::sampler::SplitMix64;

pub const N_CLASSES: usize = 4;
pub const VOCAB: usize = 16;
pub const BAND_WIDTH: usize = 4;
pub const GRID_ROWS: usize = 8;
pub const GRID_COLS: usize = 8;
pub const GRID_CELLS: usize = GRID_ROWS * GRID_COLS;
pub const IN_BAND_PROB: f64 = 0.9;
pub const VALIDITY_THRESHOLD: f64 = 0.6;

/// Band of token `t`, i.e. the class whose tokens include it.
pub fn band_of(token: u32) -> usize {
    token as usize / BAND_WIDTH
}

/// Probability of `token` in one cell of a grid of class `class_id`.
pub fn cell_prob(class_id: usize, token: u32) -> f64 {
    if band_of(token) == class_id {
        IN_BAND_PROB / BAND_WIDTH as f64
    } else {
        (1.0 - IN_BAND_PROB) / (VOCAB - BAND_WIDTH) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridScore {
    pub predicted_class: usize,
    pub band_fraction: f64,
    pub valid: bool,
}

pub fn score_grid(tokens: &[u32], condition: usize) -> Result<GridScore> {
    if condition >= N_CLASSES {
        return Err(Error::input(format!("condition {condition} out of range")));
    }
    if tokens.len() != GRID_CELLS {
        return Err(Error::input(format!(
            "grid has {} tokens, expected {GRID_CELLS}",
            tokens.len()
        )));
    }
    let mut counts = [0usize; N_CLASSES];
    for &t in tokens {
        if t as usize >= VOCAB {
            return Err(Error::input(format!("token {t} outside the image vocabulary")));
        }
        counts[band_of(t)] += 1;
    }
    let mut predicted_class = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[predicted_class] {
            predicted_class = c;
        }
    }
    let band_fraction = counts[condition] as f64 / GRID_CELLS as f64;
    Ok(GridScore {
        predicted_class,
        band_fraction,
        valid: band_fraction >= VALIDITY_THRESHOLD,
    })
}

/// Fraction of grids whose majority band matches their condition.
pub fn class_accuracy<'a, I>(batch: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [u32], usize)>,
{
    let (mut hits, mut n) = (0usize, 0usize);
    for (tokens, condition) in batch {
        if score_grid(tokens, condition)?.predicted_class == condition {
            hits += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::input("class_accuracy of an empty batch"));
    }
    Ok(hits as f64 / n as f64)
}

/// Fraction of grids that are valid for their condition.
pub fn validity_rate<'a, I>(batch: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [u32], usize)>,
{
    let (mut hits, mut n) = (0usize, 0usize);
    for (tokens, condition) in batch {
        if score_grid(tokens, condition)?.valid {
            hits += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::input("validity_rate of an empty batch"));
    }
    Ok(hits as f64 / n as f64)
}

/// Draws one grid of class `class_id` from the grammar.
pub fn sample_grid(class_id: usize, rng: &mut SplitMix64) -> Vec<u32> {
    (0..GRID_CELLS)
        .map(|_| {
            let in_band = rng.next_f64() < IN_BAND_PROB;
            if in_band {
                (class_id * BAND_WIDTH) as u32 + (rng.next_u64() % BAND_WIDTH as u64) as u32
            } else {
                let j = (rng.next_u64() % (VOCAB - BAND_WIDTH) as u64) as usize;
                let t = if j >= class_id * BAND_WIDTH { j + BAND_WIDTH } else { j };
                t as u32
            }
        })
        .collect()
}

/// One labelled grid, as stored in dataset and grid files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledGrid {
    pub class_id: usize,
    pub tokens: Vec<u32>,
}

/// `class,t0,t1,...` one grid per line.
pub fn format_grids(grids: &[LabeledGrid]) -> String {
    let mut out = String::new();
    for g in grids {
        let _ = write!(out, "{}", g.class_id);
        for t in &g.tokens {
            let _ = write!(out, ",{t}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_grids(text: &str) -> Result<Vec<LabeledGrid>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let fields = line
                .trim()
                .split(',')
                .map(|f| f.trim().parse::<u32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format(format!("line {}: {e}", i + 1)))?;
            let (class, tokens) = fields
                .split_first()
                .ok_or_else(|| Error::format(format!("line {}: empty", i + 1)))?;
            if tokens.len() != GRID_CELLS {
                return Err(Error::format(format!(
                    "line {}: {} tokens, expected {GRID_CELLS}",
                    i + 1,
                    tokens.len()
                )));
            }
            Ok(LabeledGrid {
                class_id: *class as usize,
                tokens: tokens.to_vec(),
            })
        })
        .collect()
}
