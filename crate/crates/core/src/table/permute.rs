use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Cell, CellId, Table, TableError};

/// Row and column reordering. Position `i` of the result holds old row
/// `row_perm[i]` (likewise for columns).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    pub row_perm: Vec<usize>,
    pub col_perm: Vec<usize>,
}

fn is_bijection(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&i| i < p.len() && !std::mem::replace(&mut seen[i], true))
}

fn invert(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (new, &old) in p.iter().enumerate() {
        inv[old] = new;
    }
    inv
}

impl Permutation {
    pub fn new(row_perm: Vec<usize>, col_perm: Vec<usize>) -> Result<Self, TableError> {
        if !is_bijection(&row_perm) || !is_bijection(&col_perm) {
            return Err(TableError::NotBijection);
        }
        Ok(Self { row_perm, col_perm })
    }

    pub fn identity(n_rows: usize, n_cols: usize) -> Self {
        Self {
            row_perm: (0..n_rows).collect(),
            col_perm: (0..n_cols).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.row_perm.iter().enumerate().all(|(i, &p)| i == p) && self.col_perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn inverse(&self) -> Self {
        Self {
            row_perm: invert(&self.row_perm),
            col_perm: invert(&self.col_perm),
        }
    }

    /// New position of old row `r`.
    pub fn new_row_of(&self, r: usize) -> usize {
        self.row_perm.iter().position(|&x| x == r).expect("bijection")
    }

    /// New position of old column `c`.
    pub fn new_col_of(&self, c: usize) -> usize {
        self.col_perm.iter().position(|&x| x == c).expect("bijection")
    }
}

/// Reorder the children of every header cell (and the roots) so that the
/// depth-first leaf order matches `perm`. Fails if `perm` would split a group.
fn reorder_tree(t: &Table, cells: &mut [Cell], roots: &[CellId], leaves: &[CellId], perm: &[usize]) -> Result<Vec<CellId>, TableError> {
    if roots.is_empty() {
        return Ok(Vec::new());
    }
    let new_pos = invert(perm);
    let mut key = vec![usize::MAX; cells.len()];
    for (old, leaf) in leaves.iter().enumerate() {
        key[leaf.0 as usize] = new_pos[old];
    }
    fn fill(t: &Table, id: CellId, key: &mut [usize]) -> usize {
        let c = t.cell(id);
        if !c.children.is_empty() {
            let k = c.children.iter().map(|&ch| fill(t, ch, key)).min().expect("branch has children");
            key[id.0 as usize] = k;
        }
        key[id.0 as usize]
    }
    for &r in roots {
        fill(t, r, &mut key);
    }
    for c in cells.iter_mut() {
        c.children.sort_by_key(|ch| key[ch.0 as usize]);
    }
    let mut new_roots = roots.to_vec();
    new_roots.sort_by_key(|r| key[r.0 as usize]);

    // Depth-first leaf order of the reordered tree must be exactly `perm`.
    let mut order = Vec::with_capacity(leaves.len());
    let mut stack: Vec<CellId> = new_roots.iter().rev().copied().collect();
    while let Some(id) = stack.pop() {
        let c = &cells[id.0 as usize];
        if c.children.is_empty() {
            order.push(id);
        } else {
            stack.extend(c.children.iter().rev());
        }
    }
    for (new, &old) in perm.iter().enumerate() {
        if order[new] != leaves[old] {
            let label = t.cell(leaves[old]).text.clone();
            return Err(TableError::BrokenHierarchy(label));
        }
    }
    Ok(new_roots)
}

/// Apply `p` to the body and reorder header trees consistently. Cell ids are
/// preserved. For hierarchical headers only sibling reorderings are allowed.
pub fn permute_table(t: &Table, p: &Permutation) -> Result<Table, TableError> {
    if p.row_perm.len() != t.n_rows() || p.col_perm.len() != t.n_cols() {
        return Err(TableError::PermutationSize {
            rows: p.row_perm.len(),
            cols: p.col_perm.len(),
            n_rows: t.n_rows(),
            n_cols: t.n_cols(),
        });
    }
    if !is_bijection(&p.row_perm) || !is_bijection(&p.col_perm) {
        return Err(TableError::NotBijection);
    }
    let mut cells = t.cells().to_vec();
    let col_roots = reorder_tree(t, &mut cells, t.column_header_roots(), &t.column_leaves(), &p.col_perm)?;
    let row_roots = reorder_tree(t, &mut cells, t.row_header_roots(), &t.row_leaves(), &p.row_perm)?;
    let body = p
        .row_perm
        .iter()
        .map(|&r| p.col_perm.iter().map(|&c| t.body()[r][c]).collect())
        .collect();
    Ok(Table::from_parts(cells, col_roots, row_roots, body, t.title().map(str::to_string)))
}

fn random_tree_order<R: Rng>(t: &Table, roots: &[CellId], n: usize, rng: &mut R) -> Vec<usize> {
    if roots.is_empty() {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        return p;
    }
    let leaves = t.leaves_under(roots);
    let index_of = |id: CellId| leaves.iter().position(|&l| l == id).expect("leaf");
    fn walk<R: Rng>(t: &Table, ids: &[CellId], rng: &mut R, out: &mut Vec<CellId>) {
        let mut order = ids.to_vec();
        order.shuffle(rng);
        for id in order {
            let c = t.cell(id);
            if c.children.is_empty() {
                out.push(id);
            } else {
                walk(t, &c.children, rng, out);
            }
        }
    }
    let mut out = Vec::with_capacity(n);
    walk(t, roots, rng, &mut out);
    out.into_iter().map(index_of).collect()
}

/// Draw uniformly from the permutations allowed for `t`: all of them along a
/// flat axis, sibling shuffles at every level along a header tree.
pub fn random_permutation<R: Rng>(t: &Table, rng: &mut R) -> Permutation {
    let row_perm = random_tree_order(t, t.row_header_roots(), t.n_rows(), rng);
    let col_perm = random_tree_order(t, t.column_header_roots(), t.n_cols(), rng);
    Permutation { row_perm, col_perm }
}

pub fn permute_table_random<R: Rng>(t: &Table, rng: &mut R) -> (Table, Permutation) {
    let p = random_permutation(t, rng);
    let out = permute_table(t, &p).expect("sampled permutations are allowed");
    (out, p)
}
