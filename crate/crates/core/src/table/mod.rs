//! Flat and hierarchical tables.
//!
//! A [`Table`] owns every cell. Header cells form ordered trees (one for the
//! columns, optionally one for the rows); the leaves of the column tree, read
//! depth-first, name the body columns in order. Body cells are always leaves.

mod parse;
mod permute;
mod serialize;

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use parse::{detect_delimiter, parse_table, TableFormat};
pub use permute::{permute_table, permute_table_random, random_permutation, Permutation};
pub use serialize::{serialize_table, to_delimited, to_nested_document, write_table, PATH_SEP};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TableError {
    #[error("empty input")]
    EmptyInput,
    #[error("row {row} has {found} cells, expected {expected}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("duplicate header path {0:?}")]
    DuplicateHeaderPath(String),
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("invalid table: {0}")]
    Invalid(String),
    #[error("permutation sizes {rows}x{cols} do not match table {n_rows}x{n_cols}")]
    PermutationSize {
        rows: usize,
        cols: usize,
        n_rows: usize,
        n_cols: usize,
    },
    #[error("permutation is not a bijection")]
    NotBijection,
    #[error("permutation splits header group {0:?}; only siblings may be reordered")]
    BrokenHierarchy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Leaf,
    Branch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub id: CellId,
    pub text: String,
    pub kind: CellKind,
    pub children: Vec<CellId>,
}

/// Header tree used to construct hierarchical tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeaderNode {
    pub text: String,
    pub children: Vec<HeaderNode>,
}

impl HeaderNode {
    pub fn leaf(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            children: Vec::new(),
        }
    }

    pub fn branch(text: impl Into<String>, children: Vec<HeaderNode>) -> Self {
        Self {
            text: text.into(),
            children,
        }
    }

    fn leaf_count(&self) -> usize {
        if self.children.is_empty() {
            1
        } else {
            self.children.iter().map(HeaderNode::leaf_count).sum()
        }
    }
}

/// A header cell together with the body slice (columns or rows) it covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeaderSpan {
    pub cell: CellId,
    pub span: Range<usize>,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    cells: Vec<Cell>,
    column_header_roots: Vec<CellId>,
    row_header_roots: Vec<CellId>,
    body: Vec<Vec<CellId>>,
    title: Option<String>,
}

impl Table {
    /// Flat table: one header row, body rows of equal width.
    pub fn flat<H: AsRef<str>, S: AsRef<str>>(header: &[H], rows: &[Vec<S>], title: Option<String>) -> Result<Self, TableError> {
        let columns: Vec<HeaderNode> = header.iter().map(|h| HeaderNode::leaf(h.as_ref())).collect();
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| r.iter().map(|c| c.as_ref().to_string()).collect())
            .collect();
        Self::hierarchical(&columns, &[], &body, title)
    }

    /// General constructor. `row_headers` may be empty.
    pub fn hierarchical(
        columns: &[HeaderNode],
        row_headers: &[HeaderNode],
        body: &[Vec<String>],
        title: Option<String>,
    ) -> Result<Self, TableError> {
        if columns.is_empty() || body.is_empty() {
            return Err(TableError::EmptyInput);
        }
        let n_cols: usize = columns.iter().map(HeaderNode::leaf_count).sum();
        for (i, r) in body.iter().enumerate() {
            if r.len() != n_cols {
                return Err(TableError::RaggedRow {
                    row: i,
                    expected: n_cols,
                    found: r.len(),
                });
            }
        }
        if !row_headers.is_empty() {
            let n: usize = row_headers.iter().map(HeaderNode::leaf_count).sum();
            if n != body.len() {
                return Err(TableError::Invalid(format!(
                    "row header tree has {n} leaves but body has {} rows",
                    body.len()
                )));
            }
        }
        let mut cells = Vec::new();
        fn add(cells: &mut Vec<Cell>, node: &HeaderNode) -> CellId {
            let id = CellId(cells.len() as u32);
            cells.push(Cell {
                id,
                text: node.text.clone(),
                kind: CellKind::Leaf,
                children: Vec::new(),
            });
            let children: Vec<CellId> = node.children.iter().map(|c| add(cells, c)).collect();
            if !children.is_empty() {
                let cell = &mut cells[id.0 as usize];
                cell.kind = CellKind::Branch;
                cell.children = children;
            }
            id
        }
        let column_header_roots = columns.iter().map(|n| add(&mut cells, n)).collect();
        let row_header_roots = row_headers.iter().map(|n| add(&mut cells, n)).collect();
        let body = body
            .iter()
            .map(|row| {
                row.iter()
                    .map(|text| {
                        let id = CellId(cells.len() as u32);
                        cells.push(Cell {
                            id,
                            text: text.clone(),
                            kind: CellKind::Leaf,
                            children: Vec::new(),
                        });
                        id
                    })
                    .collect()
            })
            .collect();
        let t = Table {
            cells,
            column_header_roots,
            row_header_roots,
            body,
            title,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, id: CellId) -> &Cell {
        &self.cells[id.0 as usize]
    }

    pub fn title(&self) -> Option<&str> {
        self.title.as_deref()
    }

    pub fn column_header_roots(&self) -> &[CellId] {
        &self.column_header_roots
    }

    pub fn row_header_roots(&self) -> &[CellId] {
        &self.row_header_roots
    }

    pub fn body(&self) -> &[Vec<CellId>] {
        &self.body
    }

    pub fn n_rows(&self) -> usize {
        self.body.len()
    }

    pub fn n_cols(&self) -> usize {
        self.body.first().map(Vec::len).unwrap_or(0)
    }

    pub fn text(&self, row: usize, col: usize) -> &str {
        &self.cell(self.body[row][col]).text
    }

    pub fn row_texts(&self, row: usize) -> Vec<&str> {
        self.body[row].iter().map(|&id| self.cell(id).text.as_str()).collect()
    }

    pub fn column_texts(&self, col: usize) -> Vec<&str> {
        self.body.iter().map(|r| self.cell(r[col]).text.as_str()).collect()
    }

    /// True if any header cell is a branch or the table has row headers.
    pub fn is_hierarchical(&self) -> bool {
        !self.row_header_roots.is_empty()
            || self
                .column_header_roots
                .iter()
                .any(|&r| self.cell(r).kind == CellKind::Branch)
    }

    fn leaves_under(&self, roots: &[CellId]) -> Vec<CellId> {
        let mut out = Vec::new();
        let mut stack: Vec<CellId> = roots.iter().rev().copied().collect();
        while let Some(id) = stack.pop() {
            let c = self.cell(id);
            if c.children.is_empty() {
                out.push(id);
            } else {
                stack.extend(c.children.iter().rev());
            }
        }
        out
    }

    /// Column-header leaves in column order.
    pub fn column_leaves(&self) -> Vec<CellId> {
        self.leaves_under(&self.column_header_roots)
    }

    /// Row-header leaves in row order (empty for tables without row headers).
    pub fn row_leaves(&self) -> Vec<CellId> {
        self.leaves_under(&self.row_header_roots)
    }

    fn spans(&self, roots: &[CellId]) -> Vec<HeaderSpan> {
        fn walk(t: &Table, id: CellId, depth: usize, next: &mut usize, out: &mut Vec<HeaderSpan>) {
            let start = *next;
            let idx = out.len();
            out.push(HeaderSpan {
                cell: id,
                span: start..start,
                depth,
            });
            let c = t.cell(id);
            if c.children.is_empty() {
                *next += 1;
            } else {
                for &ch in &c.children {
                    walk(t, ch, depth + 1, next, out);
                }
            }
            out[idx].span = start..*next;
        }
        let mut out = Vec::new();
        let mut next = 0;
        for &r in roots {
            walk(self, r, 0, &mut next, &mut out);
        }
        out
    }

    /// Every column-header cell (preorder) with the column range it covers.
    pub fn column_header_spans(&self) -> Vec<HeaderSpan> {
        self.spans(&self.column_header_roots)
    }

    /// Every row-header cell (preorder) with the row range it covers.
    pub fn row_header_spans(&self) -> Vec<HeaderSpan> {
        self.spans(&self.row_header_roots)
    }

    fn paths(&self, roots: &[CellId]) -> Vec<String> {
        fn walk(t: &Table, id: CellId, prefix: &mut Vec<String>, out: &mut Vec<String>) {
            let c = t.cell(id);
            prefix.push(c.text.clone());
            if c.children.is_empty() {
                out.push(prefix.join(PATH_SEP));
            } else {
                for &ch in &c.children {
                    walk(t, ch, prefix, out);
                }
            }
            prefix.pop();
        }
        let mut out = Vec::new();
        for &r in roots {
            walk(self, r, &mut Vec::new(), &mut out);
        }
        out
    }

    /// Full header path of every column (`"2020 > Q1"`), in column order.
    pub fn column_paths(&self) -> Vec<String> {
        self.paths(&self.column_header_roots)
    }

    /// Full header path of every row, or empty when there are no row headers.
    pub fn row_paths(&self) -> Vec<String> {
        self.paths(&self.row_header_roots)
    }

    /// Column index whose header path equals `name`.
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_paths().iter().position(|p| p == name)
    }

    pub fn validate(&self) -> Result<(), TableError> {
        let n = self.cells.len();
        for (i, c) in self.cells.iter().enumerate() {
            if c.id.0 as usize != i {
                return Err(TableError::Invalid(format!("cell at slot {i} has id {}", c.id.0)));
            }
            if (c.kind == CellKind::Leaf) != c.children.is_empty() {
                return Err(TableError::Invalid(format!("cell {i} kind disagrees with its children")));
            }
            if c.children.iter().any(|ch| ch.0 as usize >= n) {
                return Err(TableError::Invalid(format!("cell {i} has a dangling child")));
            }
        }
        if self.body.is_empty() || self.n_cols() == 0 {
            return Err(TableError::Invalid("table needs at least one row and one column".into()));
        }
        let mut seen = HashSet::new();
        let mut mark = |id: CellId| -> Result<(), TableError> {
            if id.0 as usize >= n || !seen.insert(id) {
                return Err(TableError::Invalid(format!("cell {} referenced twice or missing", id.0)));
            }
            Ok(())
        };
        for spans in [self.column_header_spans(), self.row_header_spans()] {
            for s in spans {
                mark(s.cell)?;
            }
        }
        let width = self.n_cols();
        for (r, row) in self.body.iter().enumerate() {
            if row.len() != width {
                return Err(TableError::RaggedRow {
                    row: r,
                    expected: width,
                    found: row.len(),
                });
            }
            for &id in row {
                mark(id)?;
                if self.cell(id).kind != CellKind::Leaf {
                    return Err(TableError::Invalid(format!("body cell {} is not a leaf", id.0)));
                }
            }
        }
        if seen.len() != n {
            return Err(TableError::Invalid("unreachable cells".into()));
        }
        if self.column_leaves().len() != width {
            return Err(TableError::Invalid(format!(
                "{} column-header leaves for {width} body columns",
                self.column_leaves().len()
            )));
        }
        if !self.row_header_roots.is_empty() && self.row_leaves().len() != self.n_rows() {
            return Err(TableError::Invalid(format!(
                "{} row-header leaves for {} body rows",
                self.row_leaves().len(),
                self.n_rows()
            )));
        }
        for paths in [self.column_paths(), self.row_paths()] {
            let mut uniq = HashSet::new();
            for p in paths {
                if !uniq.insert(p.clone()) {
                    return Err(TableError::DuplicateHeaderPath(p));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn from_parts(
        cells: Vec<Cell>,
        column_header_roots: Vec<CellId>,
        row_header_roots: Vec<CellId>,
        body: Vec<Vec<CellId>>,
        title: Option<String>,
    ) -> Self {
        Self {
            cells,
            column_header_roots,
            row_header_roots,
            body,
            title,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn demo() -> Table {
        Table::flat(
            &["name", "country"],
            &[vec!["Bob", "Canada"], vec!["Ann", "US"]],
            None,
        )
        .unwrap()
    }

    #[test]
    fn flat_shape() {
        let t = demo();
        assert_eq!((t.n_rows(), t.n_cols()), (2, 2));
        assert_eq!(t.column_leaves().len(), 2);
        assert_eq!(t.cells().len(), 6);
        assert!(!t.is_hierarchical());
        assert_eq!(t.text(1, 1), "US");
        assert_eq!(t.column_index("country"), Some(1));
    }

    #[test]
    fn leaf_iff_no_children() {
        let cols = vec![HeaderNode::branch("2020", vec![HeaderNode::leaf("Q1"), HeaderNode::leaf("Q2")])];
        let t = Table::hierarchical(&cols, &[], &[vec!["1".into(), "2".into()]], None).unwrap();
        for c in t.cells() {
            assert_eq!(c.kind == CellKind::Leaf, c.children.is_empty());
        }
        let spans = t.column_header_spans();
        assert_eq!(spans[0].span, 0..2);
        assert_eq!(spans[1].span, 0..1);
        assert_eq!(spans[2].span, 1..2);
        assert_eq!(t.column_paths(), vec!["2020 > Q1", "2020 > Q2"]);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let err = Table::flat(&["a", "a"], &[vec!["1", "2"]], None).unwrap_err();
        assert_eq!(err, TableError::DuplicateHeaderPath("a".into()));
        let cols = vec![
            HeaderNode::branch("x", vec![HeaderNode::leaf("a")]),
            HeaderNode::branch("y", vec![HeaderNode::leaf("a")]),
        ];
        assert!(Table::hierarchical(&cols, &[], &[vec!["1".into(), "2".into()]], None).is_ok());
    }

    #[test]
    fn ragged_and_empty_rejected() {
        assert!(matches!(
            Table::flat(&["a", "b"], &[vec!["1"]], None),
            Err(TableError::RaggedRow { row: 0, .. })
        ));
        let none: Vec<Vec<&str>> = vec![];
        assert_eq!(Table::flat(&["a"], &none, None).unwrap_err(), TableError::EmptyInput);
    }
}
