//! Table → hypergraph conversion.
//!
//! Body cells become nodes. Every column-header leaf, every body row and every
//! branch header cell becomes a hyperedge over the body cells it governs.
//! Nodes are ordered by cell id and edges by a permutation-stable key, so the
//! same table under any allowed row/column permutation yields identically
//! ordered node and edge lists.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::table::{CellId, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeKind {
    Column,
    Row,
    HeaderBranch,
}

impl EdgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Column => "column",
            EdgeKind::Row => "row",
            EdgeKind::HeaderBranch => "header-branch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub node_id: usize,
    pub cell_id: CellId,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperedge {
    pub edge_id: usize,
    pub kind: EdgeKind,
    pub label_text: String,
    /// Header cell behind this edge; `None` for unlabeled flat-table rows.
    pub cell_id: Option<CellId>,
    /// Sorted, duplicate-free node ids.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypergraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Hyperedge>,
}

/// Both directions of node/edge membership, sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Incidence {
    pub node_edges: Vec<Vec<usize>>,
    pub edge_nodes: Vec<Vec<usize>>,
}

/// Digest of a hypergraph up to relabelling of nodes and edges.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanonicalForm(pub String);

impl std::fmt::Display for CanonicalForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn build_hypergraph(t: &Table) -> Hypergraph {
    let mut body_cells: Vec<CellId> = t.body().iter().flatten().copied().collect();
    body_cells.sort();
    let node_of: BTreeMap<CellId, usize> = body_cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let nodes = body_cells
        .iter()
        .enumerate()
        .map(|(i, &c)| Node {
            node_id: i,
            cell_id: c,
            text: t.cell(c).text.clone(),
        })
        .collect();

    let members_of = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| -> Vec<usize> {
        let mut m: Vec<usize> = rows
            .flat_map(|r| cols.clone().map(move |c| (r, c)))
            .map(|(r, c)| node_of[&t.body()[r][c]])
            .collect();
        m.sort_unstable();
        m
    };
    let all_rows = 0..t.n_rows();
    let all_cols = 0..t.n_cols();

    // (sort key, edge); the key only depends on cell ids.
    let mut edges: Vec<((EdgeKind, CellId), Hyperedge)> = Vec::new();
    for s in t.column_header_spans() {
        let cell = t.cell(s.cell);
        let kind = if cell.children.is_empty() {
            EdgeKind::Column
        } else {
            EdgeKind::HeaderBranch
        };
        edges.push((
            (kind, s.cell),
            Hyperedge {
                edge_id: 0,
                kind,
                label_text: cell.text.clone(),
                cell_id: Some(s.cell),
                members: members_of(all_rows.clone(), s.span.clone()),
            },
        ));
    }
    if t.row_header_roots().is_empty() {
        for r in 0..t.n_rows() {
            let members = members_of(r..r + 1, all_cols.clone());
            let key = node_cell(&body_cells, members[0]);
            edges.push((
                (EdgeKind::Row, key),
                Hyperedge {
                    edge_id: 0,
                    kind: EdgeKind::Row,
                    label_text: String::new(),
                    cell_id: None,
                    members,
                },
            ));
        }
    } else {
        for s in t.row_header_spans() {
            let cell = t.cell(s.cell);
            let kind = if cell.children.is_empty() {
                EdgeKind::Row
            } else {
                EdgeKind::HeaderBranch
            };
            edges.push((
                (kind, s.cell),
                Hyperedge {
                    edge_id: 0,
                    kind,
                    label_text: cell.text.clone(),
                    cell_id: Some(s.cell),
                    members: members_of(s.span.clone(), all_cols.clone()),
                },
            ));
        }
    }
    edges.sort_by_key(|(k, _)| *k);
    let edges = edges
        .into_iter()
        .enumerate()
        .map(|(i, (_, mut e))| {
            e.edge_id = i;
            e
        })
        .collect();
    Hypergraph { nodes, edges }
}

fn node_cell(body_cells: &[CellId], node: usize) -> CellId {
    body_cells[node]
}

pub fn incidence(g: &Hypergraph) -> Incidence {
    let mut node_edges = vec![Vec::new(); g.nodes.len()];
    for e in &g.edges {
        for &v in &e.members {
            node_edges[v].push(e.edge_id);
        }
    }
    for l in &mut node_edges {
        l.sort_unstable();
    }
    Incidence {
        node_edges,
        edge_nodes: g.edges.iter().map(|e| e.members.clone()).collect(),
    }
}

fn edge_signature(g: &Hypergraph, e: &Hyperedge) -> String {
    let mut texts: Vec<&str> = e.members.iter().map(|&v| g.nodes[v].text.as_str()).collect();
    texts.sort_unstable();
    serde_json::to_string(&(e.kind.as_str(), &e.label_text, texts)).expect("string tuple serializes")
}

/// Hash of the sorted edge signatures `(kind, label, sorted member texts)` and
/// the sorted node signatures `(text, sorted incident edge signatures)`.
pub fn canonical_form(g: &Hypergraph) -> CanonicalForm {
    let edge_sigs: Vec<String> = g.edges.iter().map(|e| edge_signature(g, e)).collect();
    let inc = incidence(g);
    let mut node_sigs: Vec<String> = g
        .nodes
        .iter()
        .map(|n| {
            let mut incident: Vec<&str> = inc.node_edges[n.node_id].iter().map(|&e| edge_sigs[e].as_str()).collect();
            incident.sort_unstable();
            serde_json::to_string(&(&n.text, incident)).expect("string tuple serializes")
        })
        .collect();
    let mut sorted_edges = edge_sigs.clone();
    sorted_edges.sort_unstable();
    node_sigs.sort_unstable();
    let mut h = Sha256::new();
    for s in sorted_edges.iter().chain(std::iter::once(&"|".to_string())).chain(&node_sigs) {
        h.update(s.as_bytes());
        h.update([0u8]);
    }
    CanonicalForm(hex::encode(h.finalize()))
}

/// Line-oriented text dump: nodes, then edges with sorted member texts.
pub fn dump(g: &Hypergraph) -> String {
    let mut out = String::new();
    for n in &g.nodes {
        let _ = writeln!(out, "node {} cell={} {:?}", n.node_id, n.cell_id.0, n.text);
    }
    for e in &g.edges {
        let mut texts: Vec<&str> = e.members.iter().map(|&v| g.nodes[v].text.as_str()).collect();
        texts.sort_unstable();
        let _ = writeln!(out, "edge {} {} {:?} {:?}", e.edge_id, e.kind.as_str(), e.label_text, texts);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{parse_table, TableFormat};

    fn demo() -> Table {
        Table::flat(&["name", "country"], &[vec!["Bob", "Canada"], vec!["Ann", "US"]], None).unwrap()
    }

    #[test]
    fn flat_two_by_two() {
        let g = build_hypergraph(&demo());
        assert_eq!(g.nodes.len(), 4);
        assert_eq!(g.edges.len(), 4);
        let cols: Vec<&str> = g
            .edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Column)
            .map(|e| e.label_text.as_str())
            .collect();
        assert_eq!(cols, vec!["name", "country"]);
        assert!(g.edges.iter().filter(|e| e.kind == EdgeKind::Row).all(|e| e.label_text.is_empty()));
        assert!(g.edges.iter().all(|e| e.members.len() == 2));
        let inc = incidence(&g);
        assert!(inc.node_edges.iter().all(|l| l.len() == 2));
    }

    #[test]
    fn singleton() {
        let t = Table::flat(&["x"], &[vec!["7"]], None).unwrap();
        let g = build_hypergraph(&t);
        assert_eq!(g.nodes.len(), 1);
        assert_eq!(g.edges.len(), 2);
        let inc = incidence(&g);
        assert_eq!(inc.node_edges[0], vec![0, 1]);
        assert!(inc.edge_nodes.iter().all(|m| m == &vec![0]));
    }

    #[test]
    fn depth_two_header() {
        let src = "@columns\n2020\n  Q1\n  Q2\n---\n1,2\n3,4\n5,6\n";
        let g = build_hypergraph(&parse_table(src, TableFormat::NestedHeader).unwrap());
        let by_label = |l: &str| g.edges.iter().find(|e| e.label_text == l).unwrap();
        assert_eq!(by_label("Q1").members.len(), 3);
        assert_eq!(by_label("Q2").members.len(), 3);
        let y = by_label("2020");
        assert_eq!(y.kind, EdgeKind::HeaderBranch);
        assert_eq!(y.members.len(), 6);
        let mut union = by_label("Q1").members.clone();
        union.extend(&by_label("Q2").members);
        union.sort();
        assert_eq!(union, y.members);
    }

    #[test]
    fn relabelled_nodes_same_digest() {
        let g = build_hypergraph(&demo());
        let mut h = g.clone();
        // Reverse node ids and remap members.
        let n = h.nodes.len();
        for node in &mut h.nodes {
            node.node_id = n - 1 - node.node_id;
        }
        h.nodes.reverse();
        for e in &mut h.edges {
            e.members = e.members.iter().map(|&v| n - 1 - v).collect();
            e.members.sort();
        }
        h.edges.reverse();
        for (i, e) in h.edges.iter_mut().enumerate() {
            e.edge_id = i;
        }
        assert_eq!(canonical_form(&g), canonical_form(&h));
    }

    #[test]
    fn one_changed_cell_changes_digest() {
        let a = demo();
        let b = Table::flat(&["name", "country"], &[vec!["Bob", "Canada"], vec!["Ann", "UK"]], None).unwrap();
        assert_ne!(canonical_form(&build_hypergraph(&a)), canonical_form(&build_hypergraph(&b)));
    }

    #[test]
    fn dump_lists_nodes_then_edges() {
        let d = dump(&build_hypergraph(&demo()));
        let lines: Vec<&str> = d.lines().collect();
        assert_eq!(lines.len(), 8);
        assert!(lines[0].starts_with("node 0"));
        assert!(lines[4].starts_with("edge 0 column \"name\""));
    }
}
