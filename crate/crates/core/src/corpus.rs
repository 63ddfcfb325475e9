//! Table corpora: directory loading and a seeded synthetic generator.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::table::{parse_table, write_table, HeaderNode, Table, TableFormat};
use crate::text::fnv1a;
use crate::{Error, Result};

const EXTENSIONS: [&str; 6] = ["csv", "tsv", "txt", "tree", "htab", "tbl"];

/// Every table file in `dir`, keyed by file stem, in name order.
pub fn load_corpus(dir: &Path) -> Result<Vec<(String, Table)>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXTENSIONS.contains(&e))
        })
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let ext = p.extension().and_then(|e| e.to_str()).unwrap_or_default();
        let src = std::fs::read_to_string(&p).map_err(Error::io(&p))?;
        let t = parse_table(&src, TableFormat::from_extension(ext))
            .map_err(|e| Error::Dataset(format!("{}: {e}", p.display())))?;
        let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        out.push((id, t));
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("no table files in {}", dir.display())));
    }
    Ok(out)
}

/// Flat tables as `.csv`, hierarchical ones as `.tree`.
pub fn write_corpus(dir: &Path, tables: &[(String, Table)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for (id, t) in tables {
        let (format, ext) = if t.is_hierarchical() {
            (TableFormat::NestedHeader, "tree")
        } else {
            (TableFormat::DelimitedGrid, "csv")
        };
        let path = dir.join(format!("{id}.{ext}"));
        std::fs::write(&path, write_table(t, format)).map_err(Error::io(&path))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub tables: usize,
    pub min_rows: usize,
    pub max_rows: usize,
    pub min_cols: usize,
    pub max_cols: usize,
    /// Size of each column's value pool.
    pub values_per_column: usize,
    /// Probability that two adjacent columns share a branch header.
    pub hierarchical_fraction: f64,
    /// Use these column names, in order, for every table instead of drawing
    /// a random schema.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_columns: Option<Vec<String>>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            tables: 500,
            min_rows: 3,
            max_rows: 8,
            min_cols: 3,
            max_cols: 6,
            values_per_column: 24,
            hierarchical_fraction: 0.0,
            fixed_columns: None,
        }
    }
}

const COLUMNS: [&str; 24] = [
    "name", "city", "country", "color", "animal", "fruit", "team", "club", "code", "year", "score", "rank", "genre",
    "river", "planet", "metal", "tree", "sport", "instrument", "language", "dish", "brand", "model", "award",
];
const NUMERIC: [&str; 3] = ["year", "score", "rank"];
const GROUPS: [&str; 4] = ["details", "stats", "origin", "info"];

fn pseudo_word<R: Rng>(rng: &mut R) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for i in 0..syllables {
        let c = C[rng.gen_range(0..C.len())] as char;
        w.push(if i == 0 { c.to_ascii_uppercase() } else { c });
        w.push(V[rng.gen_range(0..V.len())] as char);
    }
    w
}

/// Distinct values a column may take; fixed per column name.
pub fn value_pool(column: &str, size: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(column.as_bytes()));
    let mut pool: Vec<String> = Vec::with_capacity(size);
    let numeric = NUMERIC.contains(&column);
    let mut attempts = 0;
    while pool.len() < size && attempts < size * 100 {
        attempts += 1;
        let v = match column {
            "year" => rng.gen_range(1900..2030).to_string(),
            _ if numeric => rng.gen_range(1..1000).to_string(),
            _ => pseudo_word(&mut rng),
        };
        if !pool.contains(&v) {
            pool.push(v);
        }
    }
    pool
}

pub fn generate_table<R: Rng>(config: &CorpusConfig, rng: &mut R) -> Result<Table> {
    let n_rows = rng.gen_range(config.min_rows..=config.max_rows);
    let names: Vec<&str> = match &config.fixed_columns {
        Some(cols) => cols.iter().map(String::as_str).collect(),
        None => {
            let n_cols = rng.gen_range(config.min_cols..=config.max_cols.min(COLUMNS.len()));
            COLUMNS.choose_multiple(rng, n_cols).copied().collect()
        }
    };
    let n_cols = names.len();
    let pools: Vec<Vec<String>> = names.iter().map(|n| value_pool(n, config.values_per_column)).collect();
    let rows: Vec<Vec<String>> = (0..n_rows)
        .map(|_| pools.iter().map(|p| p.choose(rng).cloned().unwrap_or_default()).collect())
        .collect();
    if n_cols >= 2 && rng.gen_bool(config.hierarchical_fraction.clamp(0.0, 1.0)) {
        let start = rng.gen_range(0..n_cols - 1);
        let mut roots = Vec::new();
        let mut c = 0;
        while c < n_cols {
            if c == start {
                let group = GROUPS[rng.gen_range(0..GROUPS.len())];
                roots.push(HeaderNode::branch(
                    group,
                    vec![HeaderNode::leaf(names[c]), HeaderNode::leaf(names[c + 1])],
                ));
                c += 2;
            } else {
                roots.push(HeaderNode::leaf(names[c]));
                c += 1;
            }
        }
        return Ok(Table::hierarchical(&roots, &[], &rows, None)?);
    }
    Ok(Table::flat(&names, &rows, None)?)
}

/// Tables `t0000`, `t0001`, ...
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Vec<(String, Table)>> {
    if config.min_rows == 0 || config.min_cols == 0 || config.min_rows > config.max_rows || config.min_cols > config.max_cols {
        return Err(Error::Config("corpus: need 1 <= min <= max for rows and columns".into()));
    }
    if config.values_per_column == 0 {
        return Err(Error::Config("corpus: values_per_column must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..config.tables)
        .map(|i| Ok((format!("t{i:04}"), generate_table(config, &mut rng)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_are_distinct_and_stable() {
        let a = value_pool("city", 20);
        assert_eq!(a.len(), 20);
        assert_eq!(a, value_pool("city", 20));
        let mut d = a.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 20);
    }

    #[test]
    fn corpus_respects_shape_bounds() {
        let cfg = CorpusConfig {
            tables: 30,
            hierarchical_fraction: 0.5,
            ..CorpusConfig::default()
        };
        let c = generate_corpus(&cfg, 3).unwrap();
        assert_eq!(c.len(), 30);
        assert!(c.iter().any(|(_, t)| t.is_hierarchical()));
        for (_, t) in &c {
            assert!((3..=8).contains(&t.n_rows()) && (3..=6).contains(&t.n_cols()));
            t.validate().unwrap();
        }
        assert_eq!(c, generate_corpus(&cfg, 3).unwrap());
    }

    #[test]
    fn write_then_load() {
        let cfg = CorpusConfig {
            tables: 6,
            hierarchical_fraction: 0.5,
            ..CorpusConfig::default()
        };
        let c = generate_corpus(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &c).unwrap();
        assert_eq!(load_corpus(dir.path()).unwrap(), c);
    }
}
