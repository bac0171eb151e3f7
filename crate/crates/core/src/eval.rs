//! Rankings and metrics over per-line suspiciousness scores: tile
//! aggregation, worst-rank Top-N, pooled ROC/AUC and the Wilcoxon
//! signed-rank test.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::corpus::LineLabels;
use crate::error::{Error, Result};

pub const DEFAULT_TOP_N: [usize; 3] = [1, 3, 5];

/// Suspiciousness per line, index 0 = line 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineScores {
    pub doc_id: String,
    pub scores: Vec<f64>,
}

impl LineScores {
    pub fn new(doc_id: impl Into<String>, scores: Vec<f64>) -> Result<Self> {
        let s = Self { doc_id: doc_id.into(), scores };
        s.validate()?;
        Ok(s)
    }

    pub fn line_count(&self) -> usize {
        self.scores.len()
    }

    pub fn validate(&self) -> Result<()> {
        match self.scores.iter().position(|s| !s.is_finite() || !(0.0..=1.0).contains(s)) {
            Some(i) => Err(Error::Numeric(format!(
                "score of line {} in {:?} is outside [0, 1]: {}",
                i + 1,
                self.doc_id,
                self.scores[i]
            ))),
            None => Ok(()),
        }
    }
}

/// Scores from one inference tile, starting at 1-based `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct TileScores {
    pub start: usize,
    pub scores: Vec<f64>,
}

/// Merge overlapping tiles by taking the per-line maximum.
pub fn aggregate_tiles(doc_id: &str, line_count: usize, tiles: &[TileScores]) -> Result<LineScores> {
    let mut out: Vec<Option<f64>> = vec![None; line_count];
    for t in tiles {
        if t.start == 0 || t.start + t.scores.len() - 1 > line_count {
            return Err(Error::Reference(format!(
                "tile at line {} of length {} overruns {doc_id:?} ({line_count} lines)",
                t.start,
                t.scores.len()
            )));
        }
        for (slot, &s) in out[t.start - 1..].iter_mut().zip(&t.scores) {
            *slot = Some(slot.map_or(s, |cur: f64| cur.max(s)));
        }
    }
    let scores = out
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.ok_or_else(|| Error::Reference(format!("line {} of {doc_id:?} is not covered by any tile", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    LineScores::new(doc_id, scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedLine {
    /// 1-based line number.
    pub line: usize,
    pub score: f64,
    pub rank: usize,
}

/// Descending by score. Tied lines all get the worst (largest) rank of
/// their group and are listed by line number.
pub fn rank_lines(s: &LineScores) -> Vec<RankedLine> {
    let mut order: Vec<usize> = (0..s.scores.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]).then(a.cmp(&b)));
    let mut out = Vec::with_capacity(order.len());
    let mut i = 0;
    while i < order.len() {
        let score = s.scores[order[i]];
        let mut j = i;
        while j < order.len() && s.scores[order[j]] == score {
            j += 1;
        }
        for &idx in &order[i..j] {
            out.push(RankedLine { line: idx + 1, score, rank: j });
        }
        i = j;
    }
    out
}

/// Best (smallest) rank among the faulty lines.
pub fn first_faulty_rank(ranked: &[RankedLine], labels: &LineLabels) -> Option<usize> {
    ranked.iter().filter(|r| labels.faulty_lines.contains(&r.line)).map(|r| r.rank).min()
}

pub fn top_n(ranked: &[RankedLine], labels: &LineLabels, n: usize) -> bool {
    first_faulty_rank(ranked, labels).is_some_and(|r| r <= n)
}

/// Number of labeled documents with a faulty line in the top `n`, per `n`.
pub fn top_n_counts(docs: &[(LineScores, LineLabels)], ns: &[usize]) -> BTreeMap<usize, usize> {
    let firsts: Vec<Option<usize>> =
        docs.iter().filter(|(_, l)| !l.is_empty()).map(|(s, l)| first_faulty_rank(&rank_lines(s), l)).collect();
    ns.iter().map(|&n| (n, firsts.iter().filter(|r| r.is_some_and(|r| r <= n)).count())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `>= threshold` are predicted faulty. The first point uses +inf,
    /// written as the string `"inf"` in JSON.
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub tp: u64,
    pub fp: u64,
}

mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            Repr::Text("inf".into()).serialize(s)
        } else {
            Repr::Num(*v).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad threshold {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub positives: u64,
    pub negatives: u64,
}

/// ROC over pooled lines, one point per distinct score.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ROC needs both classes ({positives} positive, {negatives} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0, tp: 0, fp: 0 }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
            tp,
            fp,
        });
    }
    Ok(RocCurve { points, positives, negatives })
}

/// Trapezoidal area, accumulated on integer counts so it matches the
/// pairwise estimator (ties counted as one half) exactly.
pub fn auc(curve: &RocCurve) -> f64 {
    let twice_area: u128 =
        curve.points.windows(2).map(|w| u128::from(w[1].fp - w[0].fp) * u128::from(w[1].tp + w[0].tp)).sum();
    let denom = 2 * u128::from(curve.positives) * u128::from(curve.negatives);
    twice_area as f64 / denom as f64
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank
// ---------------------------------------------------------------------------

pub const WILCOXON_EXACT_MAX: usize = 20;
pub const WILCOXON_MIN_N: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Nonzero differences used.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Midranks of `values` (1-based), ties sharing the average rank.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        order[i..j].iter().for_each(|&k| ranks[k] = avg);
        i = j;
    }
    ranks
}

/// Two-sided signed-rank test on `a - b`. Zero differences are dropped.
/// Up to 20 remaining pairs the null distribution is enumerated exactly
/// (over doubled midranks, so ties are handled); above that a normal
/// approximation with tie-corrected variance is used.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonResult> {
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n < WILCOXON_MIN_N {
        return Err(Error::InsufficientData(format!("{n} nonzero differences; at least {WILCOXON_MIN_N} required")));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let (p_value, exact) = if n <= WILCOXON_EXACT_MAX {
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let max_sum: usize = doubled.iter().sum();
        let mut counts = vec![0u64; max_sum + 1];
        counts[0] = 1;
        let mut reach = 0;
        for &r in &doubled {
            for s in (0..=reach).rev() {
                if counts[s] != 0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let observed = (w_plus * 2.0).round() as usize;
        let all = (1u64 << n) as f64;
        let lower: u64 = counts[..=observed].iter().sum();
        let upper: u64 = counts[observed..].iter().sum();
        let p = 2.0 * (lower.min(upper) as f64 / all);
        (p.min(1.0), true)
    } else {
        let nf = n as f64;
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j < sorted.len() && sorted[j] == sorted[i] {
                j += 1;
            }
            let t = (j - i) as f64;
            tie_term += t * t * t - t;
            i = j;
        }
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = (w_plus - mean) / var.sqrt();
        ((erfc(z.abs() / std::f64::consts::SQRT_2)).min(1.0), false)
    };
    Ok(WilcoxonResult { n, w_plus, w_minus, p_value, exact })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocRank {
    pub doc_id: String,
    pub line_count: usize,
    pub first_faulty_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top_n_counts: BTreeMap<usize, usize>,
    pub total_bugs: usize,
    pub auc: Option<f64>,
    pub roc_points: Vec<RocPoint>,
    pub per_doc: Vec<DocRank>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub significance: Option<WilcoxonResult>,
}

impl EvalReport {
    pub fn top_n(&self, n: usize) -> usize {
        self.top_n_counts.get(&n).copied().unwrap_or(0)
    }

    pub fn top_n_fraction(&self, n: usize) -> f64 {
        if self.total_bugs == 0 {
            0.0
        } else {
            self.top_n(n) as f64 / self.total_bugs as f64
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Pool every labeled document's lines for ROC/AUC and count Top-N hits.
/// Documents without faulty lines are left out. The AUC is `None` when the
/// pooled lines hold a single class.
pub fn evaluate(docs: &[(LineScores, LineLabels)], ns: &[usize]) -> Result<EvalReport> {
    let mut pooled_scores = Vec::new();
    let mut pooled_labels = Vec::new();
    let mut per_doc = Vec::new();
    for (scores, labels) in docs.iter().filter(|(_, l)| !l.is_empty()) {
        if scores.doc_id != labels.doc_id {
            return Err(Error::Reference(format!(
                "scores for {:?} paired with labels for {:?}",
                scores.doc_id, labels.doc_id
            )));
        }
        labels.validate(scores.line_count())?;
        pooled_scores.extend_from_slice(&scores.scores);
        pooled_labels.extend(labels.indicator(scores.line_count()));
        per_doc.push(DocRank {
            doc_id: scores.doc_id.clone(),
            line_count: scores.line_count(),
            first_faulty_rank: first_faulty_rank(&rank_lines(scores), labels),
        });
    }
    let (roc_points, auc_value) = match roc(&pooled_scores, &pooled_labels) {
        Ok(curve) => {
            let a = auc(&curve);
            (curve.points, Some(a))
        }
        Err(Error::UndefinedMetric(_)) => (Vec::new(), None),
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        top_n_counts: top_n_counts(docs, ns),
        total_bugs: per_doc.len(),
        auc: auc_value,
        roc_points,
        per_doc,
        significance: None,
    })
}

/// Pair two techniques' first-faulty ranks per document and test whether
/// they differ. Documents where either technique ranks no faulty line are
/// skipped.
pub fn compare_ranks(ours: &EvalReport, theirs: &EvalReport) -> Result<WilcoxonResult> {
    let other: HashMap<&str, Option<usize>> =
        theirs.per_doc.iter().map(|d| (d.doc_id.as_str(), d.first_faulty_rank)).collect();
    let pairs: Vec<(f64, f64)> = ours
        .per_doc
        .iter()
        .filter_map(|d| {
            let a = d.first_faulty_rank?;
            let b = (*other.get(d.doc_id.as_str())?)?;
            Some((a as f64, b as f64))
        })
        .collect();
    wilcoxon_signed_rank(&pairs)
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreRecord {
    doc_id: String,
    line: usize,
    score: f64,
}

/// One `{"doc_id", "line", "score"}` object per line.
pub fn write_scores<W: Write>(docs: &[LineScores], mut w: W) -> Result<()> {
    for d in docs {
        for (i, &score) in d.scores.iter().enumerate() {
            let rec = ScoreRecord { doc_id: d.doc_id.clone(), line: i + 1, score };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn write_scores_file(docs: &[LineScores], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_scores(docs, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Documents come back in order of first appearance. Each document's lines
/// must be exactly `1..=M`, in any order.
pub fn read_scores<R: std::io::Read>(r: R) -> Result<Vec<LineScores>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_doc: HashMap<String, BTreeMap<usize, f64>> = HashMap::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("scores line {}: {e}", i + 1)))?;
        let entry = by_doc.entry(rec.doc_id.clone()).or_insert_with(|| {
            order.push(rec.doc_id.clone());
            BTreeMap::new()
        });
        if entry.insert(rec.line, rec.score).is_some() {
            return Err(Error::Format(format!("duplicate score for {:?} line {}", rec.doc_id, rec.line)));
        }
    }
    order
        .into_iter()
        .map(|id| {
            let lines = by_doc.remove(&id).expect("recorded");
            if lines.keys().enumerate().any(|(i, &l)| l != i + 1) {
                return Err(Error::Format(format!("scores for {id:?} do not cover lines 1..=M")));
            }
            LineScores::new(id, lines.into_values().collect()).map_err(|e| Error::Format(e.to_string()))
        })
        .collect()
}

pub fn read_scores_file(path: impl AsRef<Path>) -> Result<Vec<LineScores>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Reference(format!("scores file {} not found", path.display())),
        _ => e.into(),
    })?;
    read_scores(f)
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    out
}

/// Minimal static SVG of the ROC curve with the chance diagonal.
pub fn roc_svg(points: &[RocPoint], auc: Option<f64>) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    let xy = |fpr: f64, tpr: f64| (PAD + fpr * SIZE, PAD + (1.0 - tpr) * SIZE);
    let mut path = String::new();
    for p in points {
        let (x, y) = xy(p.fpr, p.tpr);
        let _ = write!(path, "{x:.2},{y:.2} ");
    }
    let total = SIZE + 2.0 * PAD;
    let label = auc.map(|a| format!("AUC = {a:.4}")).unwrap_or_else(|| "AUC undefined".into());
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total}\" height=\"{total}\" viewBox=\"0 0 {total} {total}\">\n\
         <rect x=\"{PAD}\" y=\"{PAD}\" width=\"{SIZE}\" height=\"{SIZE}\" fill=\"none\" stroke=\"#444\"/>\n\
         <line x1=\"{PAD}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{PAD}\" stroke=\"#aaa\" stroke-dasharray=\"4 4\"/>\n\
         <polyline points=\"{}\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\"/>\n\
         <text x=\"{tx}\" y=\"{ty}\" font-family=\"sans-serif\" font-size=\"14\">{label}</text>\n\
         <text x=\"{cx}\" y=\"{by}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">false positive rate</text>\n\
         <text x=\"12\" y=\"{cx}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 12 {cx})\">true positive rate</text>\n\
         </svg>\n",
        path.trim_end(),
        y0 = PAD + SIZE,
        x1 = PAD + SIZE,
        tx = PAD + SIZE * 0.55,
        ty = PAD + SIZE * 0.9,
        cx = PAD + SIZE / 2.0,
        by = total - 8.0,
    )
}
