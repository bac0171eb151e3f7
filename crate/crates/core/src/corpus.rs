//! Line labels from bug-fixing diffs, and the dataset manifest.
//!
//! Labels are 1-based pre-fix line numbers. Everything downstream indexes
//! lines from zero; conversion happens in [`LineLabels::indicator`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// A buggy source file split into logical lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceDocument {
    pub id: String,
    pub path: String,
    pub lines: Vec<String>,
}

impl SourceDocument {
    /// Every logical line becomes one entry, including a final line that
    /// lacks a trailing newline. `\r\n` endings are normalized.
    pub fn from_text(id: impl Into<String>, path: impl Into<String>, text: &str) -> Self {
        Self { id: id.into(), path: path.into(), lines: text.lines().map(str::to_owned).collect() }
    }

    pub fn load(id: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Ok(Self::from_text(id, path.to_string_lossy(), &text))
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }
}

/// Ground-truth faulty lines of one document (1-based).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LineLabels {
    pub doc_id: String,
    pub faulty_lines: BTreeSet<usize>,
}

impl LineLabels {
    pub fn new(doc_id: impl Into<String>, faulty_lines: impl IntoIterator<Item = usize>) -> Self {
        Self { doc_id: doc_id.into(), faulty_lines: faulty_lines.into_iter().collect() }
    }

    pub fn is_empty(&self) -> bool {
        self.faulty_lines.is_empty()
    }

    pub fn validate(&self, line_count: usize) -> Result<()> {
        match self.faulty_lines.iter().find(|&&l| l == 0 || l > line_count) {
            Some(bad) => {
                Err(Error::Reference(format!("document {:?}: faulty line {bad} outside 1..={line_count}", self.doc_id)))
            }
            None => Ok(()),
        }
    }

    /// 0/1 vector of length `line_count`, 0-based.
    pub fn indicator(&self, line_count: usize) -> Vec<bool> {
        let mut out = vec![false; line_count];
        for &l in &self.faulty_lines {
            if (1..=line_count).contains(&l) {
                out[l - 1] = true;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Unified diff parsing
// ---------------------------------------------------------------------------

/// Pre-fix locations touched by a diff.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DiffLines {
    /// Old-file lines that were deleted or modified.
    pub removed: BTreeSet<usize>,
    /// For each change group that only inserts, the old-file line it follows
    /// (0 when inserting before the first line).
    pub insertion_anchors: BTreeSet<usize>,
}

impl DiffLines {
    /// The labeled line set: removed lines plus insertion anchors clamped
    /// into `[1, line_count]`.
    pub fn pre_fix_lines(&self, line_count: usize) -> BTreeSet<usize> {
        let mut out = self.removed.clone();
        if line_count > 0 {
            out.extend(self.insertion_anchors.iter().map(|&a| a.clamp(1, line_count)));
        }
        out
    }
}

#[derive(Debug)]
struct HunkHeader {
    old_start: usize,
    old_len: usize,
    new_len: usize,
}

fn parse_range(s: &str) -> Option<(usize, usize)> {
    match s.split_once(',') {
        Some((start, len)) => Some((start.parse().ok()?, len.parse().ok()?)),
        None => Some((s.parse().ok()?, 1)),
    }
}

fn parse_hunk_header(line: &str) -> Option<HunkHeader> {
    let rest = line.strip_prefix("@@ ")?;
    let end = rest.find(" @@")?;
    let mut parts = rest[..end].split_whitespace();
    let (old_start, old_len) = parse_range(parts.next()?.strip_prefix('-')?)?;
    let (_, new_len) = parse_range(parts.next()?.strip_prefix('+')?)?;
    if parts.next().is_some() {
        return None;
    }
    Some(HunkHeader { old_start, old_len, new_len })
}

/// Extract pre-fix changed lines from a unified diff of a single file.
///
/// Deleted and modified lines are reported by their old-file number. A run
/// of `+` lines with no `-` in the same change group is reported by its
/// anchor, the last old-file line before the insertion. For a pure-insertion
/// hunk `@@ -7,0 +8,3 @@` that anchor is 7.
pub fn parse_unified_diff(diff_text: &str) -> Result<DiffLines> {
    let mut out = DiffLines::default();
    let mut lines = diff_text.lines().peekable();

    while let Some(line) = lines.next() {
        if !line.starts_with("@@") {
            // file headers, `diff --git`, `index`, etc.
            continue;
        }
        let header = parse_hunk_header(line)
            .ok_or_else(|| Error::DiffParse { hunk: line.to_owned(), reason: "malformed hunk header".into() })?;
        let bad = |reason: String| Error::DiffParse { hunk: line.to_owned(), reason };

        let mut old_left = header.old_len;
        let mut new_left = header.new_len;
        // Last consumed old-file line. With an empty old range the start
        // already names the line the insertion follows.
        let mut old_cursor = if header.old_len == 0 { header.old_start } else { header.old_start.saturating_sub(1) };
        // Change group state: did it delete, and where did it start.
        let mut group_removed = false;
        let mut group_inserted = false;
        let mut group_anchor = old_cursor;

        let close_group = |out: &mut DiffLines, removed: &mut bool, inserted: &mut bool, anchor: usize| {
            if *inserted && !*removed {
                out.insertion_anchors.insert(anchor);
            }
            *removed = false;
            *inserted = false;
        };

        while old_left > 0 || new_left > 0 {
            let Some(body) = lines.next() else {
                return Err(bad(format!("hunk ended early: {old_left} old and {new_left} new lines missing")));
            };
            match body.as_bytes().first() {
                Some(b'-') => {
                    if old_left == 0 {
                        return Err(bad("more removed lines than the header declares".into()));
                    }
                    if !group_removed && !group_inserted {
                        group_anchor = old_cursor;
                    }
                    old_cursor += 1;
                    old_left -= 1;
                    group_removed = true;
                    out.removed.insert(old_cursor);
                }
                Some(b'+') => {
                    if new_left == 0 {
                        return Err(bad("more added lines than the header declares".into()));
                    }
                    if !group_removed && !group_inserted {
                        group_anchor = old_cursor;
                    }
                    new_left -= 1;
                    group_inserted = true;
                }
                Some(b'\\') => {}
                // Context. Some tools strip the single space from blank
                // context lines, so an empty line counts as context too.
                Some(b' ') | None => {
                    if old_left == 0 || new_left == 0 {
                        return Err(bad("context line exceeds the declared hunk size".into()));
                    }
                    close_group(&mut out, &mut group_removed, &mut group_inserted, group_anchor);
                    old_cursor += 1;
                    old_left -= 1;
                    new_left -= 1;
                }
                Some(_) => {
                    return Err(bad(format!("unexpected line inside hunk: {body:?}")));
                }
            }
        }
        close_group(&mut out, &mut group_removed, &mut group_inserted, group_anchor);
        // A trailing "\ No newline at end of file" belongs to this hunk.
        while lines.peek().is_some_and(|l| l.starts_with('\\')) {
            lines.next();
        }
        if let Some(next) = lines.peek() {
            let stray = matches!(next.as_bytes().first(), Some(b'-' | b'+' | b' '))
                && !next.starts_with("--- ")
                && !next.starts_with("+++ ");
            if stray {
                return Err(bad(format!("body line beyond the declared hunk size: {next:?}")));
            }
        }
    }
    Ok(out)
}

/// Convenience: parse and clamp against a document of `line_count` lines.
pub fn changed_pre_fix_lines(diff_text: &str, line_count: usize) -> Result<BTreeSet<usize>> {
    Ok(parse_unified_diff(diff_text)?.pre_fix_lines(line_count))
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub faulty_lines: Vec<usize>,
    pub fold: Option<usize>,
    /// Fields from a different schema version, carried through unchanged.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl ManifestRecord {
    pub fn labels(&self) -> LineLabels {
        LineLabels::new(self.id.clone(), self.faulty_lines.iter().copied())
    }

    /// Records without faulty lines stay in the manifest but are skipped
    /// when building training windows.
    pub fn is_unlabeled(&self) -> bool {
        self.faulty_lines.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    schema_version: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub records: Vec<ManifestRecord>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self { schema_version: MANIFEST_SCHEMA_VERSION, records: Vec::new() }
    }
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| r.is_unlabeled())
    }

    pub fn fold_count(&self) -> Option<usize> {
        self.records.iter().filter_map(|r| r.fold).max().map(|f| f + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Format(format!("duplicate record id {:?}", r.id)));
            }
            if r.faulty_lines.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Format(format!("record {:?}: faulty_lines must be strictly increasing", r.id)));
            }
            if r.faulty_lines.first() == Some(&0) {
                return Err(Error::Format(format!("record {:?}: line numbers are 1-based", r.id)));
            }
        }
        let tagged = self.records.iter().filter(|r| r.fold.is_some()).count();
        if tagged != 0 && tagged != self.records.len() {
            return Err(Error::Format(format!(
                "fold tags must cover every record or none ({tagged} of {} tagged)",
                self.records.len()
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &ManifestHeader { schema_version: self.schema_version })?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Unknown record fields are an error when the schema version matches
    /// ours and are preserved otherwise.
    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines().enumerate();
        let header: ManifestHeader = loop {
            let Some((_, line)) = lines.next() else {
                return Err(Error::Format("manifest is missing its header line".into()));
            };
            let line = line?;
            if !line.trim().is_empty() {
                break serde_json::from_str(&line).map_err(|e| Error::Format(format!("manifest header: {e}")))?;
            }
        };
        let strict = header.schema_version == MANIFEST_SCHEMA_VERSION;
        let mut records = Vec::new();
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord =
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("manifest line {}: {e}", idx + 1)))?;
            if strict {
                if let Some(k) = rec.extra.keys().next() {
                    return Err(Error::Format(format!("manifest line {}: unknown field {k:?}", idx + 1)));
                }
            }
            records.push(rec);
        }
        let m = Self { schema_version: header.schema_version, records };
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Reference(format!("manifest {} not found", path.display()))
            } else {
                e.into()
            }
        })?;
        Self::read_from(f)
    }
}

/// One record per document. Diffs must reference known documents and may
/// only touch lines that exist; documents without a diff (or with a diff
/// that changes nothing) are kept and reported as unlabeled.
pub fn build_manifest(docs: &[SourceDocument], diffs: &HashMap<String, String>) -> Result<DatasetManifest> {
    let by_id: HashMap<&str, &SourceDocument> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
    if by_id.len() != docs.len() {
        return Err(Error::Format("duplicate document ids".into()));
    }
    let mut unknown: Vec<&String> = diffs.keys().filter(|k| !by_id.contains_key(k.as_str())).collect();
    unknown.sort();
    if let Some(id) = unknown.first() {
        return Err(Error::Reference(format!("diff for unknown document {id:?}")));
    }

    let mut records = Vec::with_capacity(docs.len());
    for doc in docs {
        let faulty = match diffs.get(&doc.id) {
            Some(text) => {
                let parsed = parse_unified_diff(text)?;
                let lines = parsed.pre_fix_lines(doc.line_count());
                let labels = LineLabels::new(doc.id.clone(), lines);
                labels.validate(doc.line_count())?;
                labels.faulty_lines
            }
            None => BTreeSet::new(),
        };
        if faulty.is_empty() {
            log::warn!("document {:?} has no faulty lines; kept but flagged", doc.id);
        }
        records.push(ManifestRecord {
            id: doc.id.clone(),
            path: doc.path.clone(),
            faulty_lines: faulty.into_iter().collect(),
            fold: None,
            extra: BTreeMap::new(),
        });
    }
    Ok(DatasetManifest { schema_version: MANIFEST_SCHEMA_VERSION, records })
}

/// Seeded shuffle, then deal records round-robin into `k` folds so fold
/// sizes differ by at most one.
pub fn assign_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<DatasetManifest> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if k > manifest.len() {
        return Err(Error::Config(format!("k = {k} exceeds the {} records in the manifest", manifest.len())));
    }
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = manifest.clone();
    for (pos, &idx) in order.iter().enumerate() {
        out.records[idx].fold = Some(pos % k);
    }
    Ok(out)
}

/// Regular files directly under `dir`, sorted by name, as `(stem, path)`.
fn dir_entries(dir: &Path) -> Result<Vec<(String, std::path::PathBuf)>> {
    let rd = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Reference(format!("directory {} not found", dir.display())),
        _ => e.into(),
    })?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_owned(), path));
        }
    }
    out.sort();
    Ok(out)
}

/// Every file under `dir` becomes a document whose id is the file stem.
pub fn load_source_dir(dir: impl AsRef<Path>) -> Result<Vec<SourceDocument>> {
    let entries = dir_entries(dir.as_ref())?;
    let mut seen = HashSet::new();
    entries
        .into_iter()
        .map(|(id, path)| {
            if !seen.insert(id.clone()) {
                return Err(Error::Format(format!("two source files share the id {id:?}")));
            }
            SourceDocument::load(id, path)
        })
        .collect()
}

/// `<id>.diff` or `<id>.patch` files under `dir`, keyed by id.
pub fn load_diff_dir(dir: impl AsRef<Path>) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for (id, path) in dir_entries(dir.as_ref())? {
        let ext = path.extension().and_then(|e| e.to_str());
        if matches!(ext, Some("diff" | "patch")) && out.insert(id.clone(), fs::read_to_string(&path)?).is_some() {
            return Err(Error::Format(format!("two diffs for document {id:?}")));
        }
    }
    Ok(out)
}
