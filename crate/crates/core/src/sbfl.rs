//! Ochiai spectrum-based baseline over test-coverage matrices.
//!
//! Coverage file:
//!
//! ```text
//! tests=3 lines=4
//! 1100|pass
//! 0110|fail
//! 0111|fail
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::LineScores;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Pass,
    Fail,
}

/// Which test covers which line, plus each test's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageMatrix {
    pub doc_id: String,
    /// `covered[t][l]`: test `t` executes line `l + 1`.
    pub covered: Vec<Vec<bool>>,
    pub outcomes: Vec<Outcome>,
}

impl CoverageMatrix {
    pub fn new(doc_id: impl Into<String>, covered: Vec<Vec<bool>>, outcomes: Vec<Outcome>) -> Result<Self> {
        let m = Self { doc_id: doc_id.into(), covered, outcomes };
        m.validate()?;
        Ok(m)
    }

    pub fn test_count(&self) -> usize {
        self.outcomes.len()
    }

    pub fn line_count(&self) -> usize {
        self.covered.first().map_or(0, Vec::len)
    }

    pub fn failing_count(&self) -> usize {
        self.outcomes.iter().filter(|&&o| o == Outcome::Fail).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.covered.len() != self.outcomes.len() {
            return Err(Error::Shape(format!(
                "{} coverage rows for {} test outcomes",
                self.covered.len(),
                self.outcomes.len()
            )));
        }
        let m = self.line_count();
        if let Some(t) = self.covered.iter().position(|r| r.len() != m) {
            return Err(Error::Shape(format!(
                "coverage row {} has {} lines, expected {m}",
                t + 1,
                self.covered[t].len()
            )));
        }
        Ok(())
    }

    pub fn parse(doc_id: impl Into<String>, text: &str) -> Result<Self> {
        let bad = |n: usize, msg: String| Error::Format(format!("coverage line {n}: {msg}"));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Format("empty coverage file".into()))?;
        let (tests, width) =
            parse_header(header).ok_or_else(|| bad(1, format!("expected `tests=T lines=M`, found {header:?}")))?;

        let mut covered = Vec::with_capacity(tests);
        let mut outcomes = Vec::with_capacity(tests);
        for (i, line) in lines {
            let n = i + 1;
            let (bits, outcome) =
                line.trim_end().split_once('|').ok_or_else(|| bad(n, "missing `|pass` or `|fail`".into()))?;
            let outcome = match outcome {
                "pass" => Outcome::Pass,
                "fail" => Outcome::Fail,
                other => return Err(bad(n, format!("unknown outcome {other:?}"))),
            };
            let row = bits
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    other => Err(bad(n, format!("unexpected character {other:?}"))),
                })
                .collect::<Result<Vec<bool>>>()?;
            if row.len() != width {
                return Err(bad(n, format!("{} columns, header says {width}", row.len())));
            }
            covered.push(row);
            outcomes.push(outcome);
        }
        if covered.len() != tests {
            return Err(Error::Format(format!("{} test rows, header says {tests}", covered.len())));
        }
        Ok(Self { doc_id: doc_id.into(), covered, outcomes })
    }

    /// Reads a coverage file; the document id is the file stem.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Reference(format!("coverage file {} not found", path.display())),
            _ => e.into(),
        })?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::parse(id, &text)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("tests={} lines={}\n", self.test_count(), self.line_count());
        for (row, outcome) in self.covered.iter().zip(&self.outcomes) {
            out.extend(row.iter().map(|&c| if c { '1' } else { '0' }));
            out.push_str(match outcome {
                Outcome::Pass => "|pass\n",
                Outcome::Fail => "|fail\n",
            });
        }
        out
    }
}

fn parse_header(header: &str) -> Option<(usize, usize)> {
    let mut parts = header.split_whitespace();
    let tests = parts.next()?.strip_prefix("tests=")?.parse().ok()?;
    let lines = parts.next()?.strip_prefix("lines=")?.parse().ok()?;
    parts.next().is_none().then_some((tests, lines))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OchiaiResult {
    pub scores: LineScores,
    /// Set when no test fails; every score is then 0.
    pub no_failing_tests: bool,
}

/// `ochiai(lf, lp, nf) = lf / sqrt((lf + lp) * (lf + nf))`, where `nf`
/// counts failing tests that do not cover the line; 0 when the denominator
/// vanishes.
pub fn ochiai_score(lf: usize, lp: usize, nf: usize) -> f64 {
    let denom = ((lf + lp) * (lf + nf)) as f64;
    if denom == 0.0 {
        0.0
    } else {
        lf as f64 / denom.sqrt()
    }
}

pub fn ochiai(cov: &CoverageMatrix) -> Result<OchiaiResult> {
    cov.validate()?;
    let total_failed = cov.failing_count();
    let m = cov.line_count();
    let mut lf = vec![0usize; m];
    let mut lp = vec![0usize; m];
    for (row, outcome) in cov.covered.iter().zip(&cov.outcomes) {
        let counts = if *outcome == Outcome::Fail { &mut lf } else { &mut lp };
        for (c, _) in counts.iter_mut().zip(row).filter(|(_, &hit)| hit) {
            *c += 1;
        }
    }
    let scores = (0..m).map(|l| ochiai_score(lf[l], lp[l], total_failed - lf[l])).collect();
    if total_failed == 0 {
        log::warn!("{:?}: no failing tests, Ochiai scores are all zero", cov.doc_id);
    }
    Ok(OchiaiResult { scores: LineScores::new(cov.doc_id.clone(), scores)?, no_failing_tests: total_failed == 0 })
}
