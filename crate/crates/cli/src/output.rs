//! Report files under the output directory.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

/// Creates `out_dir` and returns it.
pub fn prepare(out_dir: &Path) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    Ok(out_dir.to_path_buf())
}

pub fn write_text(out_dir: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    let path = out_dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(out_dir: &Path, name: &str, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(out_dir, name, &text)
}

pub fn write_jsonl<T: Serialize>(out_dir: &Path, name: &str, records: &[T]) -> anyhow::Result<()> {
    toggl_core::manifest::write_jsonl(&out_dir.join(name), records)?;
    Ok(())
}

/// Tab-separated table whose columns are space-padded to a common width.
#[derive(Debug, Default)]
pub struct Table {
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: ToString>(header: &[S]) -> Self {
        Self {
            rows: vec![header.iter().map(S::to_string).collect()],
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let cols = self.rows.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> = (0..cols)
            .map(|c| self.rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &self.rows {
            let last = row.len().saturating_sub(1);
            for (c, cell) in row.iter().enumerate() {
                if c == last {
                    out.push_str(cell);
                } else {
                    out.push_str(&format!("{cell:<w$}\t", w = widths[c]));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// A rate as a percentage with one decimal.
pub fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_are_padded() {
        let mut t = Table::new(&["id", "wer"]);
        t.push(vec!["utt_long".into(), "12.5".into()]);
        assert_eq!(t.render(), "id      \twer\nutt_long\t12.5\n");
    }
}
