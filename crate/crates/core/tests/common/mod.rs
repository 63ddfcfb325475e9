//! Random tables for property tests.
#![allow(dead_code)]

pub mod oracle;

use hypertab::table::{HeaderNode, Table};
use rand::seq::SliceRandom;
use rand::Rng;

const WORDS: [&str; 12] = [
    "Bob", "Ann", "Canada", "US", "red", "blue", "7", "42", "3.5", "New York", "a, b", "\"q\"",
];

fn text<R: Rng>(rng: &mut R, distinct: Option<usize>) -> String {
    match distinct {
        Some(i) => format!("v{i}"),
        None if rng.gen_bool(0.1) => String::new(),
        None => WORDS.choose(rng).unwrap().to_string(),
    }
}

/// Flat `rows x cols` table. With `distinct`, every cell text is unique;
/// otherwise texts repeat and some cells are empty.
pub fn flat<R: Rng>(rng: &mut R, rows: usize, cols: usize, distinct: bool) -> Table {
    let header: Vec<String> = (0..cols).map(|c| format!("h{c}")).collect();
    let body: Vec<Vec<String>> = (0..rows)
        .map(|r| (0..cols).map(|c| text(rng, distinct.then_some(r * cols + c))).collect())
        .collect();
    Table::flat(&header, &body, None).unwrap()
}

fn tree<R: Rng>(rng: &mut R, prefix: &str, leaves: usize, depth: usize) -> Vec<HeaderNode> {
    // Split `leaves` into consecutive groups; groups of 2+ may become branches.
    let mut out = Vec::new();
    let mut left = leaves;
    let mut i = 0;
    while left > 0 {
        let take = rng.gen_range(1..=left.min(3));
        let name = format!("{prefix}{i}");
        if take > 1 && depth > 0 && rng.gen_bool(0.7) {
            out.push(HeaderNode::branch(name.clone(), tree(rng, &format!("{name}."), take, depth - 1)));
        } else {
            for j in 0..take {
                out.push(HeaderNode::leaf(format!("{name}_{j}")));
            }
        }
        left -= take;
        i += 1;
    }
    out
}

/// Table with a random column-header tree and, half the time, a row-header tree.
pub fn hierarchical<R: Rng>(rng: &mut R, rows: usize, cols: usize, distinct: bool) -> Table {
    let columns = tree(rng, "c", cols, 2);
    let row_headers = if rng.gen_bool(0.5) { tree(rng, "r", rows, 2) } else { Vec::new() };
    let body: Vec<Vec<String>> = (0..rows)
        .map(|r| (0..cols).map(|c| text(rng, distinct.then_some(r * cols + c))).collect())
        .collect();
    Table::hierarchical(&columns, &row_headers, &body, None).unwrap()
}

/// Flat or hierarchical table of random size up to `max x max`.
pub fn any_table<R: Rng>(rng: &mut R, max: usize) -> Table {
    let (rows, cols) = (rng.gen_range(1..=max), rng.gen_range(1..=max));
    let distinct = rng.gen_bool(0.5);
    if rng.gen_bool(0.5) {
        flat(rng, rows, cols, distinct)
    } else {
        hierarchical(rng, rows, cols, distinct)
    }
}
