use super::{Table, TableFormat};

/// Separator between levels of a header path.
pub const PATH_SEP: &str = " > ";

/// Render a table as the line markup fed to the decoder.
///
/// ```text
/// title : {title}            (only when present)
/// col : {path} | {path} ...
/// row {i} : {cell} | {cell} ...
/// ```
///
/// Tables with row headers render `row {i} [{row path}] : ...`. Row numbers are
/// positions in the current row order. No trailing newline.
pub fn serialize_table(t: &Table) -> String {
    let mut lines = Vec::with_capacity(t.n_rows() + 2);
    if let Some(title) = t.title() {
        lines.push(format!("title : {title}"));
    }
    lines.push(format!("col : {}", t.column_paths().join(" | ")));
    let row_paths = t.row_paths();
    for i in 0..t.n_rows() {
        let cells = t.row_texts(i).join(" | ");
        match row_paths.get(i) {
            Some(p) => lines.push(format!("row {i} [{p}] : {cells}")),
            None => lines.push(format!("row {i} : {cells}")),
        }
    }
    lines.join("\n")
}

fn csv_line(fields: &[&str], delim: u8) -> String {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delim)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(fields).expect("in-memory csv write");
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf8 csv")
}

/// Body rows as CSV lines (no header).
fn body_csv(t: &Table) -> String {
    (0..t.n_rows()).map(|i| csv_line(&t.row_texts(i), b',')).collect()
}

/// Comma-separated grid with the header row first. Hierarchical headers are
/// flattened to their full paths, so this is lossless only for flat tables.
pub fn to_delimited(t: &Table) -> String {
    let paths = t.column_paths();
    let header: Vec<&str> = paths.iter().map(String::as_str).collect();
    let mut out = csv_line(&header, b',');
    out.push_str(&body_csv(t));
    out
}

/// The indented nested-header document format (lossless for all tables).
pub fn to_nested_document(t: &Table) -> String {
    let mut out = String::new();
    if let Some(title) = t.title() {
        out.push_str(&format!("@title {title}\n"));
    }
    let tree = |label: &str, spans: Vec<super::HeaderSpan>, out: &mut String| {
        if spans.is_empty() {
            return;
        }
        out.push_str(label);
        out.push('\n');
        for s in spans {
            out.push_str(&"  ".repeat(s.depth));
            out.push_str(&t.cell(s.cell).text);
            out.push('\n');
        }
    };
    tree("@columns", t.column_header_spans(), &mut out);
    tree("@rows", t.row_header_spans(), &mut out);
    out.push_str("---\n");
    out.push_str(&body_csv(t));
    out
}

/// Serialize in the given input format.
pub fn write_table(t: &Table, format: TableFormat) -> String {
    match format {
        TableFormat::DelimitedGrid => to_delimited(t),
        TableFormat::NestedHeader => to_nested_document(t),
        TableFormat::Markup => serialize_table(t),
    }
}
