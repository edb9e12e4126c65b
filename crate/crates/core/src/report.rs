//! Per-token provenance and the line/position heatmap.

use std::io::{self, Write};

use crate::engine::StepTrace;
use crate::token::{is_skip_position_meta, TokenSequence};

/// Where one generated token sits and how it was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenRecord {
    /// Newlines generated before this token.
    pub line: usize,
    /// Tokens between the last newline (prompt included) and this token.
    pub column: usize,
    /// The token was the first non-whitespace slot of its line.
    pub skip_position: bool,
    /// Came from an accepted draft rather than the model's bonus token.
    pub retrieved: bool,
    pub whitespace: bool,
}

/// Expands step traces into one record per generated token.
pub fn token_records(
    prompt: &TokenSequence,
    output: &TokenSequence,
    traces: &[StepTrace],
) -> Vec<TokenRecord> {
    let mut meta = prompt.meta().to_vec();
    let mut column = meta
        .iter()
        .rev()
        .take_while(|m| !m.contains_newline)
        .count();
    let mut line = 0;
    let mut out = Vec::with_capacity(output.len());
    let mut idx = 0;
    for t in traces {
        let drafted = t.accepted_len.min(t.emitted);
        for j in 0..t.emitted {
            let m = output.meta()[idx];
            out.push(TokenRecord {
                line,
                column,
                skip_position: is_skip_position_meta(&meta),
                retrieved: j < drafted,
                whitespace: m.is_whitespace,
            });
            meta.push(m);
            if m.contains_newline {
                line += 1;
                column = 0;
            } else {
                column += 1;
            }
            idx += 1;
        }
    }
    debug_assert_eq!(idx, output.len());
    out
}

/// Retrieved-token rates split by skip position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SkipSplit {
    pub skip_retrieved: usize,
    pub skip_total: usize,
    pub other_retrieved: usize,
    pub other_total: usize,
}

impl SkipSplit {
    pub fn add(&mut self, records: &[TokenRecord]) {
        for r in records {
            if r.skip_position {
                self.skip_total += 1;
                self.skip_retrieved += usize::from(r.retrieved);
            } else {
                self.other_total += 1;
                self.other_retrieved += usize::from(r.retrieved);
            }
        }
    }

    pub fn skip_rate(&self) -> Option<f64> {
        (self.skip_total > 0).then(|| self.skip_retrieved as f64 / self.skip_total as f64)
    }

    pub fn other_rate(&self) -> Option<f64> {
        (self.other_total > 0).then(|| self.other_retrieved as f64 / self.other_total as f64)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Cell {
    tokens: usize,
    retrieved: usize,
    whitespace: usize,
}

/// Retrieval-success and whitespace rates by (line, token position).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Heatmap {
    max_lines: usize,
    max_token_index: usize,
    cells: Vec<Cell>,
}

pub const HEATMAP_HEADER: &str =
    "line_index,token_index,retrieval_success_rate,whitespace_rate,tokens";

impl Heatmap {
    pub fn new(max_lines: usize, max_token_index: usize) -> Self {
        Heatmap {
            max_lines,
            max_token_index,
            cells: vec![Cell::default(); max_lines * max_token_index],
        }
    }

    pub fn add(&mut self, records: &[TokenRecord]) {
        for r in records {
            if r.line >= self.max_lines || r.column >= self.max_token_index {
                continue;
            }
            let c = &mut self.cells[r.line * self.max_token_index + r.column];
            c.tokens += 1;
            c.retrieved += usize::from(r.retrieved);
            c.whitespace += usize::from(r.whitespace);
        }
    }

    /// `(retrieval_success_rate, whitespace_rate)`; `None` for empty cells.
    pub fn rates(&self, line: usize, token_index: usize) -> Option<(f64, f64)> {
        let c = self.cells[line * self.max_token_index + token_index];
        (c.tokens > 0).then(|| {
            (
                c.retrieved as f64 / c.tokens as f64,
                c.whitespace as f64 / c.tokens as f64,
            )
        })
    }

    /// Lines that hold at least one token.
    pub fn used_lines(&self) -> usize {
        (0..self.max_lines)
            .rev()
            .find(|&l| {
                (0..self.max_token_index)
                    .any(|t| self.cells[l * self.max_token_index + t].tokens > 0)
            })
            .map_or(0, |l| l + 1)
    }

    /// Writes `max_token_index` rows for every used line. Empty cells leave
    /// both rate fields blank.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "{HEATMAP_HEADER}")?;
        for line in 0..self.used_lines() {
            for t in 0..self.max_token_index {
                let c = self.cells[line * self.max_token_index + t];
                match self.rates(line, t) {
                    Some((r, ws)) => writeln!(w, "{line},{t},{r:.6},{ws:.6},{}", c.tokens)?,
                    None => writeln!(w, "{line},{t},,,0")?,
                }
            }
        }
        Ok(())
    }
}
