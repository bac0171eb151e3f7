//! Synthetic Java-like corpus with a planted fault signature.
//!
//! Every faulty line mentions the identifiers `zqxMark` / `qzvFlag`, which
//! never appear in clean code, so labels are recoverable from line content
//! alone. The fix replaces each faulty line with a clean statement and is
//! emitted as a unified diff, so the corpus exercises the full ingest path.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_manifest, DatasetManifest, SourceDocument};
use crate::error::{Error, Result};

pub const SIGNATURE_TOKENS: [&str; 2] = ["zqxMark", "qzvFlag"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub docs: usize,
    pub min_lines: usize,
    pub max_lines: usize,
    pub min_faults: usize,
    pub max_faults: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { docs: 10, min_lines: 30, max_lines: 60, min_faults: 1, max_faults: 4, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.docs == 0 || self.min_lines < 12 || self.min_lines > self.max_lines {
            return Err(Error::Config("need docs >= 1 and 12 <= min_lines <= max_lines".into()));
        }
        if self.min_faults == 0 || self.min_faults > self.max_faults || self.max_faults > self.min_lines / 3 {
            return Err(Error::Config("need 1 <= min_faults <= max_faults <= min_lines / 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDoc {
    pub id: String,
    pub lines: Vec<String>,
    pub fixed_lines: Vec<String>,
    pub faulty: BTreeSet<usize>,
}

impl SyntheticDoc {
    pub fn file_name(&self) -> String {
        format!("{}.java", self.id)
    }

    pub fn text(&self) -> String {
        join_lines(&self.lines)
    }

    pub fn diff(&self) -> String {
        replacement_diff(&self.file_name(), &self.lines, &self.fixed_lines, &self.faulty, 3)
    }

    pub fn source(&self) -> SourceDocument {
        SourceDocument::from_text(self.id.clone(), self.file_name(), &self.text())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub docs: Vec<SyntheticDoc>,
}

const NAMES: [&str; 12] =
    ["count", "index", "total", "offset", "limit", "value", "width", "depth", "cursor", "size", "score", "weight"];
const WORDS: [&str; 8] = ["update", "check", "cache", "retry", "buffer", "parse", "guard", "merge"];

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

fn clean_statement<R: Rng>(rng: &mut R) -> String {
    let a = pick(rng, &NAMES);
    let b = pick(rng, &NAMES);
    let n = rng.random_range(1..100);
    match rng.random_range(0..6) {
        0 => format!("        int {a}{n} = {b} + {n};"),
        1 => format!("        {a} = {a} * {n};"),
        2 => format!("        result.add({a});"),
        3 => format!("        log.debug(\"{}\");", pick(rng, &WORDS)),
        4 => format!("        if ({a} > {n}) {b} = {n};"),
        _ => format!("        // {} {a}", pick(rng, &WORDS)),
    }
}

fn faulty_statement<R: Rng>(rng: &mut R) -> String {
    let a = pick(rng, &NAMES);
    let n = rng.random_range(1..100);
    let [m, f] = SIGNATURE_TOKENS;
    match rng.random_range(0..3) {
        0 => format!("        {m} = {f} + {n};"),
        1 => format!("        {a} += {m}[{n}];"),
        _ => format!("        {f}.reset({m}, {a});"),
    }
}

fn generate_doc<R: Rng>(id: String, cfg: &SynthConfig, rng: &mut R) -> SyntheticDoc {
    let target = rng.random_range(cfg.min_lines..=cfg.max_lines);
    let mut lines = vec![format!("public class {} {{", id.replace('-', "_")), String::new()];
    let mut body = Vec::new();
    let mut method = 0;
    while lines.len() + 1 < target {
        let room = target - 1 - lines.len();
        if room < 4 {
            lines.push(String::new());
            continue;
        }
        lines.push(format!("    public int step{method}(int {}) {{", pick(rng, &NAMES)));
        let len = rng.random_range(2..=8).min(room - 2);
        for _ in 0..len {
            body.push(lines.len());
            lines.push(clean_statement(rng));
        }
        lines.push("    }".into());
        method += 1;
    }
    lines.push("}".into());

    let faults = rng.random_range(cfg.min_faults..=cfg.max_faults).min(body.len());
    let mut chosen: Vec<usize> = sample_indices(rng, body.len(), faults).into_iter().map(|i| body[i]).collect();
    chosen.sort_unstable();
    let fixed_lines = lines.clone();
    let mut buggy = lines;
    for &i in &chosen {
        buggy[i] = faulty_statement(rng);
    }
    SyntheticDoc { id, lines: buggy, fixed_lines, faulty: chosen.into_iter().map(|i| i + 1).collect() }
}

impl SynthCorpus {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let docs = (0..cfg.docs).map(|i| generate_doc(format!("Synth{i:03}"), cfg, &mut rng)).collect();
        Ok(Self { docs })
    }

    /// Same sources, but each document's labels move to as many lines drawn
    /// uniformly from the whole document, independent of the signature.
    pub fn with_random_labels(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let docs = self
            .docs
            .iter()
            .map(|d| {
                let k = d.faulty.len().min(d.lines.len());
                let mut picked = sample_indices(&mut rng, d.lines.len(), k).into_vec();
                picked.sort_unstable();
                let mut fixed = d.lines.clone();
                for &i in &picked {
                    let mut replacement = clean_statement(&mut rng);
                    while replacement == d.lines[i] {
                        replacement = clean_statement(&mut rng);
                    }
                    fixed[i] = replacement;
                }
                SyntheticDoc {
                    id: d.id.clone(),
                    lines: d.lines.clone(),
                    fixed_lines: fixed,
                    faulty: picked.into_iter().map(|i| i + 1).collect(),
                }
            })
            .collect();
        Self { docs }
    }

    pub fn sources(&self) -> Vec<SourceDocument> {
        self.docs.iter().map(SyntheticDoc::source).collect()
    }

    pub fn diffs(&self) -> HashMap<String, String> {
        self.docs.iter().map(|d| (d.id.clone(), d.diff())).collect()
    }

    /// Labels derived by parsing the generated diffs.
    pub fn manifest(&self) -> Result<DatasetManifest> {
        build_manifest(&self.sources(), &self.diffs())
    }

    /// `dir/src/<id>.java` and `dir/diffs/<id>.diff`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("src"))?;
        fs::create_dir_all(dir.join("diffs"))?;
        for d in &self.docs {
            fs::write(dir.join("src").join(d.file_name()), d.text())?;
            fs::write(dir.join("diffs").join(format!("{}.diff", d.id)), d.diff())?;
        }
        Ok(())
    }
}

fn join_lines(lines: &[String]) -> String {
    let mut s = lines.join("\n");
    s.push('\n');
    s
}

/// Unified diff for an edit that replaces the 1-based `changed` lines of
/// `old` one-for-one with the same positions of `new`.
pub fn replacement_diff(
    name: &str,
    old: &[String],
    new: &[String],
    changed: &BTreeSet<usize>,
    context: usize,
) -> String {
    assert_eq!(old.len(), new.len(), "replacement diffs keep the line count");
    let mut out = format!("--- a/{name}\n+++ b/{name}\n");
    let m = old.len();
    let mut hunks: Vec<(usize, usize)> = Vec::new();
    for &c in changed {
        let lo = c.saturating_sub(context).max(1);
        let hi = (c + context).min(m);
        match hunks.last_mut() {
            Some((_, end)) if lo <= *end + 1 => *end = hi,
            _ => hunks.push((lo, hi)),
        }
    }
    for (lo, hi) in hunks {
        let len = hi - lo + 1;
        let _ = writeln!(out, "@@ -{lo},{len} +{lo},{len} @@");
        let mut line = lo;
        while line <= hi {
            if !changed.contains(&line) {
                let _ = writeln!(out, " {}", old[line - 1]);
                line += 1;
                continue;
            }
            let run_end = (line..=hi).take_while(|l| changed.contains(l)).last().unwrap_or(line);
            for l in line..=run_end {
                let _ = writeln!(out, "-{}", old[l - 1]);
            }
            for l in line..=run_end {
                let _ = writeln!(out, "+{}", new[l - 1]);
            }
            line = run_end + 1;
        }
    }
    out
}
