//! Second implementation of the StructQA task semantics, driven by the
//! question text and the CSV form of the table.

use std::collections::HashMap;

use hypertab::structqa::{Answer, Sample, Task};
use hypertab::table::{to_delimited, Table};

/// Header and body cells recovered from the CSV text alone.
pub fn grid(t: &Table) -> (Vec<String>, Vec<Vec<String>>) {
    let text = to_delimited(t);
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut rows: Vec<Vec<String>> = reader
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect();
    let header = rows.remove(0);
    (header, rows)
}

/// Fill-in values for the template's placeholders, read back from the text.
pub fn match_template(template: &str, question: &str) -> Option<HashMap<String, String>> {
    let mut out = HashMap::new();
    let mut rest_t = template;
    let mut rest_q = question;
    loop {
        let Some(open) = rest_t.find('{') else {
            return (rest_t == rest_q).then_some(out);
        };
        rest_q = rest_q.strip_prefix(&rest_t[..open])?;
        let close = rest_t.find('}')?;
        let slot = &rest_t[open + 1..close];
        rest_t = &rest_t[close + 1..];
        let end = match rest_t.find('{') {
            Some(next) => rest_q.find(&rest_t[..next])?,
            None => rest_q.len().checked_sub(rest_t.len())?,
        };
        out.insert(slot.to_string(), rest_q[..end].to_string());
        rest_q = &rest_q[end..];
    }
}

pub fn oracle(t: &Table, s: &Sample) -> Answer {
    let (header, body) = grid(t);
    let slots = match_template(s.task.templates()[s.template_id], &s.question).expect("question matches template");
    let row = || slots["row number"].parse::<usize>().unwrap();
    let col = || header.iter().position(|h| *h == slots["column name"]).unwrap();
    let value = || slots["cell value"].clone();
    match s.task {
        Task::CellLocation => Answer::Scalar(body[row()][col()].clone()),
        Task::ColumnLookup => {
            let r = row();
            Answer::Items(
                header
                    .iter()
                    .enumerate()
                    .filter(|(c, _)| body[r][*c] == value())
                    .map(|(_, h)| h.clone())
                    .collect(),
            )
        }
        Task::RowLookup => {
            let c = col();
            Answer::Items((0..body.len()).filter(|&r| body[r][c] == value()).map(|r| r.to_string()).collect())
        }
        Task::ColumnComprehension => {
            let c = col();
            let mut items: Vec<String> = Vec::new();
            for r in &body {
                if !items.contains(&r[c]) {
                    items.push(r[c].clone());
                }
            }
            Answer::Items(items)
        }
        Task::RowComprehension => Answer::Items(body[row()].clone()),
    }
}
