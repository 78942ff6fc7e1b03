use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::write_file;

/// A named result table plus the metadata needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub name: String,
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Fixed four-decimal formatting used in every table.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.4}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl ReportTable {
    pub fn new(name: impl Into<String>, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            meta: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Contract(format!(
                "row has {} fields, table {} has {} columns",
                row.len(),
                self.name,
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    fn meta_value(&self, key: &str) -> &str {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map_or("", |(_, v)| v.as_str())
    }

    /// CSV with the metadata repeated as leading columns.
    pub fn to_csv(&self) -> String {
        let keys: Vec<&str> = self.meta.iter().map(|(k, _)| k.as_str()).collect();
        let header: Vec<String> = keys
            .iter()
            .map(|k| k.to_string())
            .chain(self.columns.iter().cloned())
            .collect();
        let mut s = header
            .iter()
            .map(|h| csv_field(h))
            .collect::<Vec<_>>()
            .join(",");
        s.push('\n');
        for row in &self.rows {
            let fields: Vec<String> = keys
                .iter()
                .map(|k| csv_field(self.meta_value(k)))
                .chain(row.iter().map(|f| csv_field(f)))
                .collect();
            s.push_str(&fields.join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("## {}\n\n", self.name);
        for (k, v) in &self.meta {
            writeln!(s, "- {k}: `{v}`").expect("write to string");
        }
        if !self.meta.is_empty() {
            s.push('\n');
        }
        let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
        s.push_str(&line(&self.columns));
        s.push_str(&line(&vec!["---".to_string(); self.columns.len()]));
        for row in &self.rows {
            s.push_str(&line(row));
        }
        s
    }

    /// Reads back a table written by [`ReportTable::to_markdown`].
    pub fn parse_markdown(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let name = loop {
            match lines.next() {
                Some((_, l)) if l.starts_with("## ") => break l[3..].to_string(),
                Some((_, l)) if l.trim().is_empty() => continue,
                Some((i, _)) => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: "expected a table title".into(),
                    })
                }
                None => return Err(Error::Format("empty report".into())),
            }
        };
        let mut meta = Vec::new();
        let mut table = Vec::new();
        for (i, l) in lines {
            if let Some(rest) = l.strip_prefix("- ") {
                let (k, v) = rest.split_once(": ").ok_or_else(|| Error::Parse {
                    line: i + 1,
                    msg: "metadata line without ': '".into(),
                })?;
                meta.push((k.to_string(), v.trim_matches('`').to_string()));
            } else if l.starts_with('|') {
                let cells: Vec<String> = l
                    .trim()
                    .trim_matches('|')
                    .split('|')
                    .map(|c| c.trim().to_string())
                    .collect();
                table.push(cells);
            }
        }
        if table.len() < 2 {
            return Err(Error::Format(format!("table {name} has no header")));
        }
        let columns = table.remove(0);
        table.remove(0);
        if let Some(bad) = table.iter().position(|r| r.len() != columns.len()) {
            return Err(Error::Format(format!(
                "row {bad} of {name} has the wrong width"
            )));
        }
        Ok(Self {
            name,
            meta,
            columns,
            rows: table,
        })
    }

    /// File stem: table name plus the config fingerprint when present.
    pub fn file_stem(&self) -> String {
        match self.meta_value("fingerprint") {
            "" => self.name.clone(),
            fp => format!("{}-{fp}", self.name),
        }
    }
}

/// Writes `<stem>.csv` and `<stem>.md` for every table into `dir`, and a
/// combined `report.md`. Returns the paths written.
pub fn emit_report(tables: &[ReportTable], dir: &Path) -> Result<Vec<PathBuf>> {
    if tables.is_empty() {
        return Err(Error::Contract(
            "emit_report needs at least one table".into(),
        ));
    }
    let mut written = Vec::new();
    let mut combined = String::from("# Results\n");
    for t in tables {
        let stem = t.file_stem();
        let csv = dir.join(format!("{stem}.csv"));
        write_file(&csv, t.to_csv().as_bytes())?;
        let md = dir.join(format!("{stem}.md"));
        let text = t.to_markdown();
        write_file(&md, text.as_bytes())?;
        combined.push('\n');
        combined.push_str(&text);
        written.push(csv);
        written.push(md);
    }
    let all = dir.join("report.md");
    write_file(&all, combined.as_bytes())?;
    written.push(all);
    Ok(written)
}
