//! Fixed-capacity line windows: random-offset training segments that cover
//! every faulty line, deterministic tiles for inference, and padded samples.

use std::collections::BTreeSet;

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LineLabels;
use crate::error::{Error, Result};
use crate::states::StateMatrix;

pub const DEFAULT_CAPACITY: usize = 128;

/// A contiguous run of lines, 1-based and inclusive of `start`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSpec {
    pub doc_id: String,
    pub start: usize,
    pub length: usize,
}

impl WindowSpec {
    /// Last line covered (1-based, inclusive).
    pub fn end(&self) -> usize {
        self.start + self.length - 1
    }

    pub fn contains(&self, line: usize) -> bool {
        (self.start..=self.end()).contains(&line)
    }
}

/// A padded training/inference unit of exactly `capacity` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub states: Array2<f32>,
    pub labels: Vec<f64>,
    pub mask: Vec<bool>,
    pub spec: WindowSpec,
}

impl WindowSample {
    pub fn capacity(&self) -> usize {
        self.mask.len()
    }

    /// Number of real (unpadded) rows; they always form a prefix.
    pub fn len(&self) -> usize {
        self.spec.length
    }

    pub fn is_empty(&self) -> bool {
        self.spec.length == 0
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    /// Same sample with `extra` additional padding rows.
    pub fn with_extra_padding(&self, extra: usize) -> Self {
        let cap = self.capacity() + extra;
        let mut states = Array2::zeros((cap, self.dim()));
        states.slice_mut(s![..self.capacity(), ..]).assign(&self.states);
        let mut labels = self.labels.clone();
        labels.resize(cap, 0.0);
        let mut mask = self.mask.clone();
        mask.resize(cap, false);
        Self { states, labels, mask, spec: self.spec.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub capacity: usize,
    /// Draw fresh training offsets every epoch instead of once per run.
    pub resample_each_epoch: bool,
    /// Overlap between consecutive inference tiles.
    pub inference_overlap: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { capacity: DEFAULT_CAPACITY, resample_each_epoch: false, inference_overlap: 0 }
    }
}

impl WindowConfig {
    pub fn with_capacity(capacity: usize) -> Self {
        Self { capacity, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::Config("window capacity must be positive".into()));
        }
        if self.inference_overlap >= self.capacity {
            return Err(Error::Config(format!(
                "inference overlap {} must be below the capacity {}",
                self.inference_overlap, self.capacity
            )));
        }
        Ok(())
    }
}

/// Training segments for one document.
///
/// Short documents (`M <= W`) get a single whole-file window. Otherwise we
/// repeatedly take the first faulty line `f` not yet covered, draw a start
/// uniformly from `[max(1, f-W+1), min(f, M-W+1)]`, and mark every faulty
/// line inside the new window as covered.
pub fn segment<R: Rng + ?Sized>(
    doc_id: &str,
    line_count: usize,
    faulty: &BTreeSet<usize>,
    capacity: usize,
    rng: &mut R,
) -> Result<Vec<WindowSpec>> {
    if faulty.is_empty() {
        return Err(Error::Config(format!("document {doc_id:?} has no faulty lines to window")));
    }
    if capacity == 0 {
        return Err(Error::Config("window capacity must be positive".into()));
    }
    if let Some(&bad) = faulty.iter().find(|&&l| l == 0 || l > line_count) {
        return Err(Error::Reference(format!("document {doc_id:?}: faulty line {bad} outside 1..={line_count}")));
    }
    if line_count <= capacity {
        return Ok(vec![WindowSpec { doc_id: doc_id.to_owned(), start: 1, length: line_count }]);
    }

    let mut out = Vec::new();
    let mut covered_through = 0;
    for &f in faulty {
        if f <= covered_through {
            continue;
        }
        let lo = f.saturating_sub(capacity - 1).max(1);
        let hi = f.min(line_count - capacity + 1);
        let start = rng.random_range(lo..=hi);
        let length = capacity.min(line_count - start + 1);
        let spec = WindowSpec { doc_id: doc_id.to_owned(), start, length };
        covered_through = spec.end();
        out.push(spec);
    }
    Ok(out)
}

/// Deterministic tiles for scoring a whole document.
///
/// Tiles advance by `W - overlap`. Without overlap they partition the file
/// and the last tile is cut at the end of the document. With overlap the
/// last tile is shifted back to end exactly at line `M`, keeping it full
/// length.
pub fn tile_for_inference(doc_id: &str, line_count: usize, capacity: usize, overlap: usize) -> Result<Vec<WindowSpec>> {
    if capacity == 0 || overlap >= capacity {
        return Err(Error::Config(format!("need 0 <= overlap < capacity, got overlap {overlap}, capacity {capacity}")));
    }
    let stride = capacity - overlap;
    let mut out = Vec::new();
    if line_count == 0 {
        return Ok(out);
    }
    let mut start = 1;
    loop {
        let mut s = start;
        if s + capacity - 1 > line_count && overlap > 0 {
            s = (line_count + 1).saturating_sub(capacity).max(1);
        }
        let length = capacity.min(line_count - s + 1);
        out.push(WindowSpec { doc_id: doc_id.to_owned(), start: s, length });
        if s + length > line_count {
            break;
        }
        start += stride;
    }
    Ok(out)
}

/// Copy a window's rows out of `sm` into a padded, masked sample.
pub fn materialize(spec: &WindowSpec, sm: &StateMatrix, labels: &LineLabels, capacity: usize) -> Result<WindowSample> {
    if spec.doc_id != sm.doc_id || labels.doc_id != sm.doc_id {
        return Err(Error::Reference(format!(
            "window for {:?} and labels for {:?} do not match states of {:?}",
            spec.doc_id, labels.doc_id, sm.doc_id
        )));
    }
    if spec.start == 0 || spec.length == 0 || spec.length > capacity || spec.end() > sm.line_count() {
        return Err(Error::Reference(format!(
            "window [{}, +{}) outside document {:?} of {} lines (capacity {capacity})",
            spec.start,
            spec.length,
            spec.doc_id,
            sm.line_count()
        )));
    }
    let first = spec.start - 1;
    let mut states = Array2::zeros((capacity, sm.dim()));
    states.slice_mut(s![..spec.length, ..]).assign(&sm.rows.slice(s![first..first + spec.length, ..]));
    let mut window_labels = vec![0.0; capacity];
    for &l in labels.faulty_lines.range(spec.start..=spec.end()) {
        window_labels[l - spec.start] = 1.0;
    }
    let mask = (0..capacity).map(|i| i < spec.length).collect();
    Ok(WindowSample { states, labels: window_labels, mask, spec: spec.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(xs: &[usize]) -> BTreeSet<usize> {
        xs.iter().copied().collect()
    }

    #[test]
    fn whole_file_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = segment("d", 100, &set(&[10]), 128, &mut rng).unwrap();
        assert_eq!(w, vec![WindowSpec { doc_id: "d".into(), start: 1, length: 100 }]);
    }

    #[test]
    fn two_distant_faults_need_two_windows() {
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = segment("d", 300, &set(&[10, 200]), 128, &mut rng).unwrap();
            assert!(w.len() >= 2);
            for f in [10, 200] {
                assert!(w.iter().any(|s| s.contains(f)));
            }
            assert!(w.iter().all(|s| s.length <= 128 && s.end() <= 300));
        }
    }

    #[test]
    fn offsets_vary_within_legal_range() {
        let starts: BTreeSet<usize> = (0..1000)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                segment("d", 300, &set(&[10]), 128, &mut rng).unwrap()[0].start
            })
            .collect();
        assert!(starts.len() > 1);
        assert!(starts.iter().all(|&s| (1..=10).contains(&s)));
    }

    #[test]
    fn empty_faulty_set_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(segment("d", 10, &BTreeSet::new(), 8, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn tiles() {
        let starts = |m, w, o| -> Vec<(usize, usize)> {
            tile_for_inference("d", m, w, o).unwrap().into_iter().map(|t| (t.start, t.length)).collect()
        };
        assert_eq!(starts(128, 128, 0), vec![(1, 128)]);
        assert_eq!(starts(300, 128, 0), vec![(1, 128), (129, 128), (257, 44)]);
        assert_eq!(starts(300, 128, 64), vec![(1, 128), (65, 128), (129, 128), (173, 128)]);
        assert_eq!(starts(5, 128, 64), vec![(1, 5)]);
        assert!(starts(0, 8, 0).is_empty());
        assert!(tile_for_inference("d", 10, 8, 8).is_err());
    }

    fn states(m: usize, d: usize) -> StateMatrix {
        let rows = Array2::from_shape_fn((m, d), |(i, j)| (i * d + j) as f32);
        StateMatrix::new("d", rows, "t", 0).unwrap()
    }

    #[test]
    fn materialize_pads_and_masks() {
        let sm = states(100, 4);
        let spec = WindowSpec { doc_id: "d".into(), start: 1, length: 100 };
        let s = materialize(&spec, &sm, &LineLabels::new("d", [10]), 128).unwrap();
        assert_eq!(s.mask.iter().filter(|&&m| m).count(), 100);
        assert!(s.mask[..100].iter().all(|&m| m) && s.mask[100..].iter().all(|&m| !m));
        assert!(s.states.slice(s![100.., ..]).iter().all(|&v| v == 0.0));
        assert_eq!(s.states.row(99), sm.rows.row(99));
    }

    #[test]
    fn materialize_reindexes_labels() {
        let sm = states(40, 4);
        let spec = WindowSpec { doc_id: "d".into(), start: 5, length: 8 };
        let s = materialize(&spec, &sm, &LineLabels::new("d", [10]), 8).unwrap();
        assert_eq!(s.labels[5], 1.0);
        assert_eq!(s.labels.iter().sum::<f64>(), 1.0);
        assert_eq!(s.states.row(0), sm.rows.row(4));

        let outside = materialize(&spec, &sm, &LineLabels::new("d", [30]), 8).unwrap();
        assert!(outside.labels.iter().all(|&l| l == 0.0));

        let oob = WindowSpec { doc_id: "d".into(), start: 38, length: 8 };
        assert!(matches!(materialize(&oob, &sm, &LineLabels::new("d", [1]), 8), Err(Error::Reference(_))));
    }
}
