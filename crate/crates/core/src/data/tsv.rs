use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Example, SEP};
use crate::error::{Error, Result};

/// A column addressed by zero-based position or by header name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Column {
    Index(usize),
    Name(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsvSchema {
    /// One column for single sentences, two for sentence pairs.
    pub text_columns: Vec<Column>,
    pub label_column: Column,
    pub has_header: bool,
}

impl TsvSchema {
    pub fn single(text: Column, label: Column, has_header: bool) -> Self {
        Self {
            text_columns: vec![text],
            label_column: label,
            has_header,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowDiagnostic {
    /// One-based line number in the file.
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TsvLoad {
    pub dataset: Dataset,
    pub diagnostics: Vec<RowDiagnostic>,
}

fn resolve(col: &Column, header: Option<&[&str]>) -> Result<usize> {
    match (col, header) {
        (Column::Index(i), _) => Ok(*i),
        (Column::Name(name), Some(h)) => h
            .iter()
            .position(|c| c.trim() == name)
            .ok_or_else(|| Error::Data(format!("column `{name}` not found in header {h:?}"))),
        (Column::Name(name), None) => Err(Error::Data(format!("column `{name}` named but the file has no header"))),
    }
}

/// Reads a tab-separated file. Pair schemas join the two texts with an
/// explicit `[SEP]` token. Labels map to class ids through `label_names`
/// when given; otherwise through the sorted set of labels in the file.
/// Malformed rows are skipped and reported.
pub fn load_tsv(path: &Path, schema: &TsvSchema, label_names: Option<&[String]>) -> Result<TsvLoad> {
    if schema.text_columns.is_empty() || schema.text_columns.len() > 2 {
        return Err(Error::Data("schema needs one or two text columns".into()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let content =
        String::from_utf8(bytes).map_err(|e| Error::Data(format!("{}: not valid UTF-8 ({e})", path.display())))?;
    let mut lines = content.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let header: Option<Vec<&str>> = if schema.has_header {
        match lines.next() {
            Some((_, h)) => Some(h.split('\t').collect()),
            None => return Err(Error::Data(format!("{}: empty file", path.display()))),
        }
    } else {
        None
    };
    let text_idx = schema
        .text_columns
        .iter()
        .map(|c| resolve(c, header.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    let label_idx = resolve(&schema.label_column, header.as_deref())?;
    if let Some(h) = &header {
        if let Some(&bad) = text_idx.iter().chain([&label_idx]).find(|&&i| i >= h.len()) {
            return Err(Error::Data(format!("column {bad} missing from header of {} fields", h.len())));
        }
    }
    let needed = text_idx.iter().copied().chain([label_idx]).max().unwrap_or(0) + 1;

    let mut rows = Vec::new();
    let mut diagnostics = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        let line_no = i + 1;
        if fields.len() < needed {
            diagnostics.push(RowDiagnostic {
                line: line_no,
                message: format!("expected at least {needed} fields, found {}", fields.len()),
            });
            continue;
        }
        let label = fields[label_idx].trim();
        if label.is_empty() {
            diagnostics.push(RowDiagnostic {
                line: line_no,
                message: "empty label".into(),
            });
            continue;
        }
        let text = text_idx
            .iter()
            .map(|&c| fields[c].trim())
            .collect::<Vec<_>>()
            .join(&format!(" {SEP} "));
        rows.push((line_no, text, label.to_string()));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }

    let names: Vec<String> = match label_names {
        Some(names) => names.to_vec(),
        None => rows.iter().map(|r| r.2.clone()).collect::<BTreeSet<_>>().into_iter().collect(),
    };
    let mut examples = Vec::with_capacity(rows.len());
    for (line, text, label) in rows {
        match names.iter().position(|n| *n == label) {
            Some(id) => examples.push(Example { text, label: id }),
            None => diagnostics.push(RowDiagnostic {
                line,
                message: format!("label `{label}` not in label dictionary"),
            }),
        }
    }
    diagnostics.sort_by_key(|d| d.line);
    Ok(TsvLoad {
        dataset: Dataset {
            examples,
            label_names: names,
        },
        diagnostics,
    })
}

/// Writes `sentence<TAB>label` rows under a header, labels as their names.
pub fn write_tsv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("sentence\tlabel\n");
    for ex in &dataset.examples {
        if ex.text.contains('\t') || ex.text.contains('\n') {
            return Err(Error::Data(format!("text contains a tab or newline: {:?}", ex.text)));
        }
        let name = dataset
            .label_names
            .get(ex.label)
            .ok_or(Error::LabelOutOfRange {
                label: ex.label,
                num_classes: dataset.label_names.len(),
            })?;
        out.push_str(&ex.text);
        out.push('\t');
        out.push_str(name);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(content: &[u8]) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content).unwrap();
        f
    }

    #[test]
    fn reads_rows_with_header() {
        let f = write(b"sentence\tlabel\ngood film\t1\nbad film\t0\nok\t1\n");
        let schema = TsvSchema::single(Column::Name("sentence".into()), Column::Name("label".into()), true);
        let load = load_tsv(f.path(), &schema, None).unwrap();
        assert_eq!(load.dataset.len(), 3);
        assert!(load.diagnostics.is_empty());
        assert_eq!(load.dataset.label_names, vec!["0", "1"]);
        assert_eq!(load.dataset.examples[0].label, 1);
    }

    #[test]
    fn sentence_pairs_joined_with_separator() {
        let f = write(b"a\tb\tl\nthe cat\ta dog\tyes\n");
        let schema = TsvSchema {
            text_columns: vec![Column::Index(0), Column::Index(1)],
            label_column: Column::Index(2),
            has_header: true,
        };
        let load = load_tsv(f.path(), &schema, None).unwrap();
        assert_eq!(load.dataset.examples[0].text, "the cat [SEP] a dog");
    }

    #[test]
    fn malformed_row_is_reported_with_line() {
        let f = write(b"s\tl\nfine\t1\nbroken-row\nalso fine\t0\n");
        let schema = TsvSchema::single(Column::Index(0), Column::Index(1), true);
        let load = load_tsv(f.path(), &schema, None).unwrap();
        assert_eq!(load.dataset.len(), 2);
        assert_eq!(load.diagnostics.len(), 1);
        assert_eq!(load.diagnostics[0].line, 3);
    }

    #[test]
    fn error_paths() {
        let schema = TsvSchema::single(Column::Name("text".into()), Column::Name("label".into()), true);
        let empty = write(b"");
        assert!(matches!(load_tsv(empty.path(), &schema, None), Err(Error::Data(_))));
        let missing = write(b"sentence\tlabel\nx\t1\n");
        assert!(load_tsv(missing.path(), &schema, None).is_err());
        let latin1 = write(b"text\tlabel\ncaf\xe9\t1\n");
        let err = load_tsv(latin1.path(), &schema, None).unwrap_err();
        assert!(err.to_string().contains("UTF-8"));
    }

    #[test]
    fn write_then_load() {
        let ds = Dataset {
            examples: vec![
                Example {
                    text: "a b".into(),
                    label: 0,
                },
                Example {
                    text: "c".into(),
                    label: 1,
                },
            ],
            label_names: vec!["0".into(), "1".into()],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.tsv");
        write_tsv(&ds, &p).unwrap();
        let schema = TsvSchema::single(Column::Name("sentence".into()), Column::Name("label".into()), true);
        assert_eq!(load_tsv(&p, &schema, Some(&ds.label_names)).unwrap().dataset, ds);
    }
}
