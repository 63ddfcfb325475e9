use serde::{Deserialize, Serialize};

use super::{HeaderNode, Table, TableError, PATH_SEP};

/// Source formats accepted by [`parse_table`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableFormat {
    /// CSV or TSV, first record is the header row.
    DelimitedGrid,
    /// Indented header tree(s), `---`, then the body grid. See `docs/table-format.md`.
    NestedHeader,
    /// The line markup produced by [`super::serialize_table`].
    Markup,
}

impl TableFormat {
    /// Guess from a file extension: `.tree`/`.htab` nested, `.tbl` markup, else delimited.
    pub fn from_extension(ext: &str) -> Self {
        match ext {
            "tree" | "htab" => TableFormat::NestedHeader,
            "tbl" => TableFormat::Markup,
            _ => TableFormat::DelimitedGrid,
        }
    }
}

pub fn parse_table(source: &str, format: TableFormat) -> Result<Table, TableError> {
    if source.trim().is_empty() {
        return Err(TableError::EmptyInput);
    }
    match format {
        TableFormat::DelimitedGrid => parse_delimited(source),
        TableFormat::NestedHeader => parse_nested(source),
        TableFormat::Markup => parse_markup(source),
    }
}

/// Tab if the first non-blank line contains one, otherwise comma.
pub fn detect_delimiter(source: &str) -> u8 {
    match source.lines().find(|l| !l.trim().is_empty()) {
        Some(l) if l.contains('\t') => b'\t',
        _ => b',',
    }
}

fn read_grid(source: &str, first_line: usize) -> Result<Vec<Vec<String>>, TableError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .delimiter(detect_delimiter(source))
        .from_reader(source.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| TableError::Syntax {
            line: first_line + e.position().map(|p| p.line() as usize).unwrap_or(1) - 1,
            message: e.to_string(),
        })?;
        rows.push(rec.iter().map(str::to_string).collect::<Vec<_>>());
    }
    Ok(rows)
}

fn check_rectangular(rows: &[Vec<String>], width: usize) -> Result<(), TableError> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(TableError::RaggedRow {
                row: i,
                expected: width,
                found: r.len(),
            });
        }
    }
    Ok(())
}

fn parse_delimited(source: &str) -> Result<Table, TableError> {
    let mut rows = read_grid(source, 1)?;
    if rows.is_empty() {
        return Err(TableError::EmptyInput);
    }
    let header = rows.remove(0);
    if rows.is_empty() {
        return Err(TableError::Invalid("header row without body rows".into()));
    }
    check_rectangular(&rows, header.len())?;
    Table::flat(&header, &rows, None)
}

fn parse_tree(lines: &[(usize, &str)]) -> Result<Vec<HeaderNode>, TableError> {
    // (depth, node) stack; finished children are folded into their parent on pop.
    let mut roots: Vec<HeaderNode> = Vec::new();
    let mut stack: Vec<HeaderNode> = Vec::new();
    fn pop_into(stack: &mut Vec<HeaderNode>, roots: &mut Vec<HeaderNode>) {
        let node = stack.pop().expect("non-empty stack");
        match stack.last_mut() {
            Some(parent) => parent.children.push(node),
            None => roots.push(node),
        }
    }
    for &(line_no, raw) in lines {
        if raw.contains('\t') {
            return Err(TableError::Syntax {
                line: line_no,
                message: "tabs are not allowed in header indentation".into(),
            });
        }
        let indent = raw.len() - raw.trim_start_matches(' ').len();
        if indent % 2 != 0 {
            return Err(TableError::Syntax {
                line: line_no,
                message: format!("indentation of {indent} spaces is not a multiple of 2"),
            });
        }
        let depth = indent / 2;
        if depth > stack.len() {
            return Err(TableError::Syntax {
                line: line_no,
                message: format!("header jumps to depth {depth} under depth {}", stack.len().saturating_sub(1)),
            });
        }
        while stack.len() > depth {
            pop_into(&mut stack, &mut roots);
        }
        stack.push(HeaderNode::leaf(raw.trim()));
    }
    while !stack.is_empty() {
        pop_into(&mut stack, &mut roots);
    }
    Ok(roots)
}

#[derive(PartialEq)]
enum Section {
    Preamble,
    Columns,
    Rows,
}

fn parse_nested(source: &str) -> Result<Table, TableError> {
    let mut title = None;
    let mut section = Section::Preamble;
    let mut col_lines = Vec::new();
    let mut row_lines = Vec::new();
    let mut body_start = None;
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed == "---" {
            body_start = Some(idx + 1);
            break;
        }
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix("@title") {
            title = Some(rest.trim().to_string());
        } else if trimmed == "@columns" {
            section = Section::Columns;
        } else if trimmed == "@rows" {
            section = Section::Rows;
        } else {
            match section {
                Section::Columns => col_lines.push((line_no, line.trim_end())),
                Section::Rows => row_lines.push((line_no, line.trim_end())),
                Section::Preamble => {
                    return Err(TableError::Syntax {
                        line: line_no,
                        message: "expected @title, @columns or @rows".into(),
                    })
                }
            }
        }
    }
    let body_start = body_start.ok_or(TableError::Syntax {
        line: source.lines().count(),
        message: "missing `---` separator before the body".into(),
    })?;
    if col_lines.is_empty() {
        return Err(TableError::Syntax {
            line: 1,
            message: "no column headers".into(),
        });
    }
    let columns = parse_tree(&col_lines)?;
    let rows_tree = parse_tree(&row_lines)?;
    let body_src: String = source.lines().skip(body_start).collect::<Vec<_>>().join("\n");
    let body = read_grid(&body_src, body_start + 1)?;
    if body.is_empty() {
        return Err(TableError::Invalid("nested document has no body rows".into()));
    }
    let width: usize = columns.iter().map(HeaderNode::leaf_count).sum();
    check_rectangular(&body, width)?;
    Table::hierarchical(&columns, &rows_tree, &body, title)
}

/// Rebuild header trees from full paths, merging adjacent equal prefixes.
fn tree_from_paths(paths: &[Vec<String>]) -> Result<Vec<HeaderNode>, TableError> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < paths.len() {
        let head = &paths[i][0];
        let mut j = i + 1;
        while j < paths.len() && &paths[j][0] == head && paths[i].len() > 1 && paths[j].len() > 1 {
            j += 1;
        }
        if paths[i].len() == 1 {
            out.push(HeaderNode::leaf(head.clone()));
        } else {
            let rest: Vec<Vec<String>> = paths[i..j].iter().map(|p| p[1..].to_vec()).collect();
            out.push(HeaderNode::branch(head.clone(), tree_from_paths(&rest)?));
        }
        i = j;
    }
    Ok(out)
}

fn split_path(p: &str) -> Vec<String> {
    p.split(PATH_SEP).map(str::to_string).collect()
}

fn parse_markup(source: &str) -> Result<Table, TableError> {
    let mut title = None;
    let mut columns = None;
    let mut row_paths = Vec::new();
    let mut body = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("title : ") {
            title = Some(rest.to_string());
        } else if let Some(rest) = line.strip_prefix("col : ") {
            let paths: Vec<Vec<String>> = rest.split(" | ").map(split_path).collect();
            columns = Some(tree_from_paths(&paths)?);
        } else if let Some(rest) = line.strip_prefix("row ") {
            let (head, cells) = rest.split_once(" : ").ok_or(TableError::Syntax {
                line: line_no,
                message: "row line without ` : `".into(),
            })?;
            let (index, path) = match head.split_once(" [") {
                Some((i, p)) => (i, Some(p.strip_suffix(']').unwrap_or(p))),
                None => (head, None),
            };
            let index: usize = index.parse().map_err(|_| TableError::Syntax {
                line: line_no,
                message: format!("bad row index {index:?}"),
            })?;
            if index != body.len() {
                return Err(TableError::Syntax {
                    line: line_no,
                    message: format!("row index {index} out of sequence"),
                });
            }
            if let Some(p) = path {
                row_paths.push(split_path(p));
            }
            body.push(cells.split(" | ").map(str::to_string).collect::<Vec<_>>());
        } else {
            return Err(TableError::Syntax {
                line: line_no,
                message: "expected `title :`, `col :` or `row i :`".into(),
            });
        }
    }
    let columns = columns.ok_or(TableError::Syntax {
        line: 1,
        message: "missing `col :` line".into(),
    })?;
    if body.is_empty() {
        return Err(TableError::Invalid("markup has no rows".into()));
    }
    if !row_paths.is_empty() && row_paths.len() != body.len() {
        return Err(TableError::Invalid("row header paths on only some rows".into()));
    }
    let rows_tree = tree_from_paths(&row_paths)?;
    let width: usize = columns.iter().map(HeaderNode::leaf_count).sum();
    check_rectangular(&body, width)?;
    Table::hierarchical(&columns, &rows_tree, &body, title)
}
