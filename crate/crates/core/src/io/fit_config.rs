//! Sectioned fit input.
//!
//! ```text
//! THEORY
//! p[m[0]] * se(t, p[m[1]])
//! PARAMETERS
//! # name value step [lo hi] [fixed]
//! A0 0.25 0.01 0 1
//! lambda 0.5 0.01
//! N0 1000 0 fixed
//! DATASETS
//! data.musr
//! RANGE
//! 0.0 9.5
//! ```
//!
//! Dataset paths are relative to the config file. `RANGE` is optional and
//! applies to histograms that carry no range of their own.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::musr_file::load_musr_data;
use super::IoError;
use crate::musr::{FitProblem, FitRange, Parameter, ParameterSet, PhysicsConstants};
use crate::theory::TheoryExpr;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub theory: String,
    pub parameters: Vec<Parameter>,
    pub datasets: Vec<PathBuf>,
    pub range: Option<FitRange>,
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Theory,
    Parameters,
    Datasets,
    Range,
}

pub fn parse_fit_config(text: &str, origin: &str) -> Result<FitConfig, IoError> {
    let mut section = Section::None;
    let mut theory_lines = Vec::new();
    let mut parameters = Vec::new();
    let mut datasets = Vec::new();
    let mut range = None;
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let err = |msg: String| IoError::Parse { origin: origin.to_owned(), line: line_no, msg };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "THEORY" => section = Section::Theory,
            "PARAMETERS" => section = Section::Parameters,
            "DATASETS" => section = Section::Datasets,
            "RANGE" => section = Section::Range,
            _ => match section {
                Section::None => return Err(err(format!("`{line}` outside any section"))),
                Section::Theory => theory_lines.push(line.to_owned()),
                Section::Parameters => parameters.push(parse_parameter(line, &err)?),
                Section::Datasets => datasets.push(PathBuf::from(line)),
                Section::Range => {
                    let v: Vec<f64> = line
                        .split_whitespace()
                        .map(|t| t.parse().map_err(|_| err(format!("range: cannot parse `{t}`"))))
                        .collect::<Result<_, _>>()?;
                    if v.len() != 2 || range.is_some() {
                        return Err(err("RANGE takes a single `start end` line".into()));
                    }
                    range = Some(FitRange { start: v[0], end: v[1] });
                }
            },
        }
    }
    let fail = |msg: &str| IoError::Parse { origin: origin.to_owned(), line: 0, msg: msg.to_owned() };
    if theory_lines.is_empty() {
        return Err(fail("missing THEORY section"));
    }
    if datasets.is_empty() {
        return Err(fail("no DATASETS listed"));
    }
    Ok(FitConfig { theory: theory_lines.join(" "), parameters, datasets, range })
}

fn parse_parameter(line: &str, err: &dyn Fn(String) -> IoError) -> Result<Parameter, IoError> {
    let mut tokens: Vec<&str> = line.split_whitespace().collect();
    let fixed = tokens.last() == Some(&"fixed");
    if fixed {
        tokens.pop();
    }
    let num = |t: &str| t.parse::<f64>().map_err(|_| err(format!("parameter `{}`: cannot parse `{t}`", tokens[0])));
    let (value, step, bounds) = match tokens.len() {
        3 => (num(tokens[1])?, num(tokens[2])?, None),
        5 => (num(tokens[1])?, num(tokens[2])?, Some((num(tokens[3])?, num(tokens[4])?))),
        _ => return Err(err(format!("expected `name value step [lo hi] [fixed]`, got `{line}`"))),
    };
    Ok(Parameter { name: tokens[0].to_owned(), value, step, bounds, fixed })
}

pub fn write_fit_config<W: std::io::Write>(mut w: W, cfg: &FitConfig) -> std::io::Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "THEORY\n{}\nPARAMETERS", cfg.theory);
    for p in &cfg.parameters {
        let _ = write!(s, "{} {:?} {:?}", p.name, p.value, p.step);
        if let Some((lo, hi)) = p.bounds {
            let _ = write!(s, " {lo:?} {hi:?}");
        }
        s.push_str(if p.fixed { " fixed\n" } else { "\n" });
    }
    s.push_str("DATASETS\n");
    for d in &cfg.datasets {
        let _ = writeln!(s, "{}", d.display());
    }
    if let Some(r) = cfg.range {
        let _ = writeln!(s, "RANGE\n{:?} {:?}", r.start, r.end);
    }
    w.write_all(s.as_bytes())
}

/// Reads a fit config and every histogram file it lists.
pub fn load_fit_problem(path: &Path) -> Result<FitProblem, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let origin = path.display().to_string();
    let cfg = parse_fit_config(&text, &origin)?;
    let theory = TheoryExpr::parse(&cfg.theory).map_err(|e| IoError::Invalid(format!("{origin}: THEORY: {e}")))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut datasets = Vec::new();
    for rel in &cfg.datasets {
        for mut ds in load_musr_data(&base.join(rel))? {
            if ds.range.is_none() {
                ds.range = cfg.range;
            }
            datasets.push(ds);
        }
    }
    let parameters = ParameterSet::new(cfg.parameters).map_err(|e| IoError::Invalid(format!("{origin}: {e}")))?;
    Ok(FitProblem { theory, datasets, parameters, constants: PhysicsConstants::default() })
}
