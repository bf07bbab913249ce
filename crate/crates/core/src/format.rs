//! Textual dump formats.
//!
//! `TENSOR v1 <rows> <cols>` followed by one row per line, values as
//! shortest round-trip decimals, space separated.
//!
//! `RAGGED v1 <modality> <N> <D>` followed by one TENSOR block per sample.
//!
//! `PARAMS v1 <count>` / `REPS v1 <count>` are containers of named blocks:
//! each entry is a name on its own line followed by a TENSOR (or, for REPS,
//! a TENSOR or RAGGED) block.

use std::fmt::Write as _;

use crate::error::{LabError, Result};
use crate::numeric::{Matrix, Modality, RaggedBatch};

pub fn write_tensor(out: &mut String, m: &Matrix) {
    writeln!(out, "TENSOR v1 {} {}", m.rows(), m.cols()).unwrap();
    for i in 0..m.rows() {
        let row = m
            .row(i)
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&row);
        out.push('\n');
    }
}

pub fn tensor_to_string(m: &Matrix) -> String {
    let mut s = String::new();
    write_tensor(&mut s, m);
    s
}

pub fn write_ragged(out: &mut String, b: &RaggedBatch) {
    writeln!(
        out,
        "RAGGED v1 {} {} {}",
        b.modality().as_str(),
        b.len(),
        b.dim()
    )
    .unwrap();
    for s in b.samples() {
        write_tensor(out, s);
    }
}

pub fn ragged_to_string(b: &RaggedBatch) -> String {
    let mut s = String::new();
    write_ragged(&mut s, b);
    s
}

/// Line cursor over a textual dump.
pub struct Reader<'a> {
    lines: std::iter::Peekable<std::str::Lines<'a>>,
    line_no: usize,
}

impl<'a> Reader<'a> {
    pub fn new(text: &'a str) -> Self {
        Reader { lines: text.lines().peekable(), line_no: 0 }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        loop {
            let line = self
                .lines
                .next()
                .ok_or_else(|| LabError::Parse("unexpected end of input".into()))?;
            self.line_no += 1;
            if !line.trim().is_empty() {
                return Ok(line.trim());
            }
        }
    }

    pub fn peek_word(&mut self) -> Option<&str> {
        while let Some(line) = self.lines.peek() {
            if line.trim().is_empty() {
                self.lines.next();
                self.line_no += 1;
                continue;
            }
            return line.trim().split_whitespace().next();
        }
        None
    }

    pub fn at_end(&mut self) -> bool {
        self.peek_word().is_none()
    }

    fn parse_err(&self, msg: impl Into<String>) -> LabError {
        LabError::Parse(format!("line {}: {}", self.line_no, msg.into()))
    }

    pub fn read_tensor(&mut self) -> Result<Matrix> {
        let header = self.next_line()?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "TENSOR" || parts[1] != "v1" {
            return Err(self.parse_err(format!("expected 'TENSOR v1 <rows> <cols>', got '{header}'")));
        }
        let rows: usize = parts[2]
            .parse()
            .map_err(|_| self.parse_err("bad row count"))?;
        let cols: usize = parts[3]
            .parse()
            .map_err(|_| self.parse_err("bad col count"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = self.next_line()?;
            let mut n = 0;
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| self.parse_err(format!("bad value '{tok}'")))?;
                data.push(v);
                n += 1;
            }
            if n != cols {
                return Err(self.parse_err(format!("expected {cols} values, got {n}")));
            }
        }
        Matrix::new(rows, cols, data)
    }

    pub fn read_ragged(&mut self) -> Result<RaggedBatch> {
        let header = self.next_line()?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "RAGGED" || parts[1] != "v1" {
            return Err(self.parse_err(format!(
                "expected 'RAGGED v1 <modality> <N> <D>', got '{header}'"
            )));
        }
        let modality = Modality::parse(parts[2])?;
        let n: usize = parts[3]
            .parse()
            .map_err(|_| self.parse_err("bad sample count"))?;
        let d: usize = parts[4]
            .parse()
            .map_err(|_| self.parse_err("bad dimension"))?;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let t = self.read_tensor()?;
            if t.cols() != d {
                return Err(self.parse_err(format!(
                    "sample dim {} does not match header {}",
                    t.cols(),
                    d
                )));
            }
            samples.push(t);
        }
        RaggedBatch::new(modality, samples)
    }

    /// Read a bare name line (single token).
    pub fn read_name(&mut self) -> Result<String> {
        let line = self.next_line()?;
        if line.split_whitespace().count() != 1 {
            return Err(self.parse_err(format!("expected a name, got '{line}'")));
        }
        Ok(line.to_string())
    }
}

/// A named entry in a REPS container.
#[derive(Debug, Clone)]
pub enum Block {
    Tensor(Matrix),
    Ragged(RaggedBatch),
}

pub fn write_named_tensors(entries: &[(String, Matrix)]) -> String {
    let mut out = String::new();
    writeln!(out, "PARAMS v1 {}", entries.len()).unwrap();
    for (name, m) in entries {
        out.push_str(name);
        out.push('\n');
        write_tensor(&mut out, m);
    }
    out
}

pub fn read_named_tensors(text: &str) -> Result<Vec<(String, Matrix)>> {
    let mut r = Reader::new(text);
    let header = r.next_line()?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "PARAMS" || parts[1] != "v1" {
        return Err(LabError::Parse(format!(
            "expected 'PARAMS v1 <count>', got '{header}'"
        )));
    }
    let count: usize = parts[2]
        .parse()
        .map_err(|_| LabError::Parse("bad block count".into()))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.read_name()?;
        let m = r.read_tensor()?;
        entries.push((name, m));
    }
    Ok(entries)
}

pub fn write_named_blocks(entries: &[(String, Block)]) -> String {
    let mut out = String::new();
    writeln!(out, "REPS v1 {}", entries.len()).unwrap();
    for (name, block) in entries {
        out.push_str(name);
        out.push('\n');
        match block {
            Block::Tensor(m) => write_tensor(&mut out, m),
            Block::Ragged(b) => write_ragged(&mut out, b),
        }
    }
    out
}

pub fn read_named_blocks(text: &str) -> Result<Vec<(String, Block)>> {
    let mut r = Reader::new(text);
    let header = r.next_line()?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "REPS" || parts[1] != "v1" {
        return Err(LabError::Parse(format!(
            "expected 'REPS v1 <count>', got '{header}'"
        )));
    }
    let count: usize = parts[2]
        .parse()
        .map_err(|_| LabError::Parse("bad block count".into()))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.read_name()?;
        let block = match r.peek_word() {
            Some("TENSOR") => Block::Tensor(r.read_tensor()?),
            Some("RAGGED") => Block::Ragged(r.read_ragged()?),
            other => {
                return Err(LabError::Parse(format!(
                    "expected TENSOR or RAGGED block, got {other:?}"
                )))
            }
        };
        entries.push((name, block));
    }
    Ok(entries)
}
