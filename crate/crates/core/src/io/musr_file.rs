//! Text histogram files.
//!
//! ```text
//! DETECTOR 0
//! dt 0.0001953125
//! t0_bin 0
//! n0_slot 4
//! nbkg_slot 20
//! map 0 1 2 3 0
//! func 0.0
//! range 0.0 9.0
//! counts 1012 998 1003
//!   987 1020
//! ```
//!
//! `func` and `range` are optional. `counts` may continue on following
//! lines. `#` starts a comment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::IoError;
use crate::musr::{FitRange, MusrDataset};
use crate::theory::TheoryBinding;

pub fn write_musr_data<W: std::io::Write>(mut w: W, datasets: &[MusrDataset]) -> std::io::Result<()> {
    let mut s = String::new();
    for ds in datasets {
        let _ = writeln!(s, "DETECTOR {}", ds.detector);
        let _ = writeln!(s, "dt {:?}", ds.dt);
        let _ = writeln!(s, "t0_bin {}", ds.t0_bin);
        let _ = writeln!(s, "n0_slot {}", ds.n0_slot);
        let _ = writeln!(s, "nbkg_slot {}", ds.nbkg_slot);
        s.push_str("map");
        for m in &ds.binding.map {
            let _ = write!(s, " {m}");
        }
        s.push('\n');
        if !ds.binding.function_values.is_empty() {
            s.push_str("func");
            for f in &ds.binding.function_values {
                let _ = write!(s, " {f:?}");
            }
            s.push('\n');
        }
        if let Some(r) = ds.range {
            let _ = writeln!(s, "range {:?} {:?}", r.start, r.end);
        }
        s.push_str("counts\n");
        for row in ds.counts.chunks(16) {
            let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
    }
    w.write_all(s.as_bytes())
}

#[derive(Default)]
struct Block {
    detector: usize,
    line: usize,
    dt: Option<f64>,
    t0_bin: Option<i64>,
    n0_slot: Option<usize>,
    nbkg_slot: Option<usize>,
    map: Option<Vec<usize>>,
    func: Vec<f64>,
    range: Option<FitRange>,
    counts: Option<Vec<u64>>,
}

impl Block {
    fn finish(self, origin: &str) -> Result<MusrDataset, IoError> {
        let missing = |key: &str| IoError::Parse {
            origin: origin.to_owned(),
            line: self.line,
            msg: format!("detector {} has no `{key}` line", self.detector),
        };
        Ok(MusrDataset {
            detector: self.detector,
            dt: self.dt.ok_or_else(|| missing("dt"))?,
            t0_bin: self.t0_bin.ok_or_else(|| missing("t0_bin"))?,
            n0_slot: self.n0_slot.ok_or_else(|| missing("n0_slot"))?,
            nbkg_slot: self.nbkg_slot.ok_or_else(|| missing("nbkg_slot"))?,
            binding: TheoryBinding::new(self.map.clone().ok_or_else(|| missing("map"))?, self.func.clone()),
            range: self.range,
            counts: self.counts.clone().ok_or_else(|| missing("counts"))?,
        })
    }
}

/// Parses a histogram file; `origin` names it in error messages.
pub fn parse_musr_data(text: &str, origin: &str) -> Result<Vec<MusrDataset>, IoError> {
    let mut out = Vec::new();
    let mut block: Option<Block> = None;
    let mut in_counts = false;
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let err = |msg: String| IoError::Parse { origin: origin.to_owned(), line: line_no, msg };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let head = tokens.next().expect("non-empty line");
        let numeric = head.parse::<i64>().is_ok();
        if numeric && in_counts {
            let b = block.as_mut().expect("counts belong to a block");
            push_counts(b, line.split_whitespace(), &err)?;
            continue;
        }
        in_counts = false;
        if head == "DETECTOR" {
            if let Some(b) = block.take() {
                out.push(b.finish(origin)?);
            }
            let j = one(tokens, "DETECTOR", &err)?;
            block = Some(Block { detector: j, line: line_no, ..Default::default() });
            continue;
        }
        let Some(b) = block.as_mut() else {
            return Err(err(format!("`{head}` before the first DETECTOR line")));
        };
        match head {
            "dt" => b.dt = Some(one(tokens, head, &err)?),
            "t0_bin" => b.t0_bin = Some(one(tokens, head, &err)?),
            "n0_slot" => b.n0_slot = Some(one(tokens, head, &err)?),
            "nbkg_slot" => b.nbkg_slot = Some(one(tokens, head, &err)?),
            "map" => b.map = Some(many(tokens, head, &err)?),
            "func" => b.func = many(tokens, head, &err)?,
            "range" => {
                let v: Vec<f64> = many(tokens, head, &err)?;
                if v.len() != 2 {
                    return Err(err(format!("`range` needs start and end, got {} values", v.len())));
                }
                b.range = Some(FitRange { start: v[0], end: v[1] });
            }
            "counts" => {
                b.counts = Some(Vec::new());
                push_counts(b, tokens, &err)?;
                in_counts = true;
            }
            other => return Err(err(format!("unknown key `{other}`"))),
        }
    }
    if let Some(b) = block.take() {
        out.push(b.finish(origin)?);
    }
    if out.is_empty() {
        return Err(IoError::Parse { origin: origin.to_owned(), line: 0, msg: "no DETECTOR blocks".into() });
    }
    Ok(out)
}

fn push_counts<'a>(
    b: &mut Block,
    tokens: impl Iterator<Item = &'a str>,
    err: &dyn Fn(String) -> IoError,
) -> Result<(), IoError> {
    let counts = b.counts.get_or_insert_with(Vec::new);
    for t in tokens {
        let bin = counts.len();
        let v: i64 =
            t.parse().map_err(|_| err(format!("detector {}, bin {bin}: `{t}` is not an integer count", b.detector)))?;
        if v < 0 {
            return Err(err(format!("detector {}, bin {bin}: negative count {v}", b.detector)));
        }
        counts.push(v as u64);
    }
    Ok(())
}

fn one<'a, T: std::str::FromStr>(
    mut tokens: impl Iterator<Item = &'a str>,
    key: &str,
    err: &dyn Fn(String) -> IoError,
) -> Result<T, IoError> {
    let t = tokens.next().ok_or_else(|| err(format!("`{key}` needs a value")))?;
    if tokens.next().is_some() {
        return Err(err(format!("`{key}` takes one value")));
    }
    t.parse().map_err(|_| err(format!("`{key}`: cannot parse `{t}`")))
}

fn many<'a, T: std::str::FromStr>(
    tokens: impl Iterator<Item = &'a str>,
    key: &str,
    err: &dyn Fn(String) -> IoError,
) -> Result<Vec<T>, IoError> {
    tokens.map(|t| t.parse().map_err(|_| err(format!("`{key}`: cannot parse `{t}`")))).collect()
}

pub fn load_musr_data(path: &Path) -> Result<Vec<MusrDataset>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    parse_musr_data(&text, &path.display().to_string())
}

pub fn store_musr_data(path: &Path, datasets: &[MusrDataset]) -> Result<(), IoError> {
    let mut buf = Vec::new();
    write_musr_data(&mut buf, datasets).map_err(|e| IoError::io(path, e))?;
    fs::write(path, buf).map_err(|e| IoError::io(path, e))
}
