use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{AdapterModel, LayerParams};
use super::PositionalEncoding;
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::windowing::WindowSample;

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// No dropout; outputs are a deterministic function of the inputs.
    Eval,
    /// Dropout active, masks drawn from a stream seeded by `dropout_seed`
    /// and the sample's index in the batch.
    Train { dropout_seed: u64 },
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub ln1: LnCache,
    pub a: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Softmax output per head, before dropout.
    pub probs: Vec<Array2<f64>>,
    /// Scaled dropout masks on the attention weights, per head.
    pub attn_keep: Option<Vec<Array2<f64>>>,
    pub ctx: Array2<f64>,
    pub ln2: LnCache,
    pub b: Array2<f64>,
    pub u: Array2<f64>,
    pub g: Array2<f64>,
    pub ff_keep: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct SampleCache {
    pub len: usize,
    pub layers: Vec<LayerCache>,
    pub hidden: Array2<f64>,
    pub logits: Array1<f64>,
}

/// Per-sample probabilities plus everything backward needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// One vector of length `capacity` per sample. Padded entries are 0 and
    /// carry no meaning.
    pub probs: Vec<Vec<f64>>,
    pub(crate) samples: Vec<SampleCache>,
    pub(crate) model_identity: (u64, u64),
    pub(crate) batch_key: Vec<(String, usize, usize, usize)>,
}

impl ForwardTrace {
    /// Pre-sigmoid outputs for the valid rows of sample `i`.
    pub fn logits(&self, i: usize) -> &Array1<f64> {
        &self.samples[i].logits
    }
}

pub(crate) fn batch_key(batch: &[WindowSample]) -> Vec<(String, usize, usize, usize)> {
    batch.iter().map(|s| (s.spec.doc_id.clone(), s.spec.start, s.len(), s.capacity())).collect()
}

/// Number of valid rows: the mask must be a run of ones then zeros.
pub(crate) fn valid_len(sample: &WindowSample) -> Result<usize> {
    let len = sample.mask.iter().take_while(|&&m| m).count();
    if sample.mask[len..].iter().any(|&m| m) {
        return Err(Error::Shape(format!(
            "window {:?}@{}: mask is not prefix-contiguous",
            sample.spec.doc_id, sample.spec.start
        )));
    }
    if sample.labels.len() != sample.mask.len() || sample.states.nrows() != sample.mask.len() {
        return Err(Error::Shape("states, labels and mask disagree on capacity".into()));
    }
    Ok(len)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let k = *r;
        row.mapv_inplace(|v| v * k);
    }
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, rstd })
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < p { 0.0 } else { keep })
}

pub(crate) fn sinusoid(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(pos, j)| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * i / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn check_finite(m: &Array2<f64>, what: impl FnOnce() -> String) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activation in {}", what())))
    }
}

fn layer_forward(
    p: &LayerParams,
    h: &Array2<f64>,
    n_heads: usize,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> (Array2<f64>, LayerCache) {
    let len = h.nrows();
    let d = h.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (p_drop, mut rng) = match dropout {
        Some((p, rng)) if p > 0.0 => (p, Some(rng)),
        _ => (0.0, None),
    };

    let (a, ln1) = layer_norm(h, &p.ln1_gain, &p.ln1_bias);
    let q = a.dot(&p.w_q) + &p.b_q;
    let k = a.dot(&p.w_k);
    let v = a.dot(&p.w_v) + &p.b_v;

    let mut ctx = Array2::zeros((len, d));
    let mut probs = Vec::with_capacity(n_heads);
    let mut attn_keep = rng.is_some().then(|| Vec::with_capacity(n_heads));
    for head in 0..n_heads {
        let cols = s![.., head * dh..(head + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores);
        let weights = match (&mut rng, &mut attn_keep) {
            (Some(r), Some(keeps)) => {
                let keep = dropout_mask(r, len, len, p_drop);
                let w = &scores * &keep;
                keeps.push(keep);
                w
            }
            _ => scores.clone(),
        };
        ctx.slice_mut(cols).assign(&weights.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let h1 = h + &(ctx.dot(&p.w_o) + &p.b_o);

    let (b, ln2) = layer_norm(&h1, &p.ln2_gain, &p.ln2_bias);
    let u = b.dot(&p.w_ff1) + &p.b_ff1;
    let g = u.mapv(gelu);
    let mut f = g.dot(&p.w_ff2) + &p.b_ff2;
    let ff_keep = rng.map(|r| {
        let keep = dropout_mask(r, len, d, p_drop);
        f *= &keep;
        keep
    });
    let out = h1 + f;

    (out, LayerCache { ln1, a, q, k, v, probs, attn_keep, ctx, ln2, b, u, g, ff_keep })
}

fn sample_forward(
    model: &AdapterModel,
    sample: &WindowSample,
    index: usize,
    mode: Mode,
) -> Result<(Vec<f64>, SampleCache)> {
    let cfg = model.config();
    let prm = model.params();
    if sample.dim() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "sample {:?}@{} has state dimension {}, model expects {}",
            sample.spec.doc_id,
            sample.spec.start,
            sample.dim(),
            cfg.input_dim
        )));
    }
    let len = valid_len(sample)?;
    let x: Array2<f64> = sample.states.slice(s![..len, ..]).mapv(f64::from);
    let mut h = x.dot(&prm.w_d);
    check_finite(&h, || "the input projection".into())?;

    if cfg.n_layers > 0 {
        match cfg.positional_encoding {
            PositionalEncoding::Sinusoidal => h += &sinusoid(len, cfg.model_dim),
            PositionalEncoding::Learned => {
                let table = prm.positions.as_ref().expect("learned table present");
                if len > table.nrows() {
                    return Err(Error::Shape(format!(
                        "window of {len} rows exceeds the {} learned positions",
                        table.nrows()
                    )));
                }
                h += &table.slice(s![..len, ..]);
            }
            PositionalEncoding::None => {}
        }
    }

    let mut rng = match mode {
        Mode::Train { dropout_seed } if cfg.dropout > 0.0 => {
            let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
            r.set_stream(index as u64);
            Some(r)
        }
        _ => None,
    };

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (i, lp) in prm.layers.iter().enumerate() {
        let (next, cache) = layer_forward(lp, &h, cfg.n_heads, rng.as_mut().map(|r| (cfg.dropout, r)));
        check_finite(&next, || format!("encoder layer {i}"))?;
        h = next;
        layers.push(cache);
    }

    let logits = h.dot(&prm.w_b) + prm.b_b[0];
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite activation in the output head".into()));
    }
    let mut probs = vec![0.0; sample.capacity()];
    for (p, &z) in probs.iter_mut().zip(logits.iter()) {
        *p = sigmoid(z);
    }
    Ok((probs, SampleCache { len, layers, hidden: h, logits }))
}

/// Run the adapter over a batch. Samples are independent, so they are
/// processed in parallel under [`Exec::Parallel`].
pub fn forward(model: &AdapterModel, batch: &[WindowSample], mode: Mode, exec: Exec) -> Result<ForwardTrace> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let indexed: Vec<(usize, &WindowSample)> = batch.iter().enumerate().collect();
    let outs = par::try_map(exec, &indexed, |&(i, s)| sample_forward(model, s, i, mode))?;
    let (probs, samples) = outs.into_iter().unzip();
    Ok(ForwardTrace { probs, samples, model_identity: model.identity(), batch_key: batch_key(batch) })
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn valid_count(trace: &ForwardTrace) -> usize {
    trace.samples.iter().map(|s| s.len).sum()
}

/// Binary cross-entropy, averaged over every unpadded position in the
/// batch, computed from logits for stability.
pub fn loss(trace: &ForwardTrace, batch: &[WindowSample]) -> Result<f64> {
    if trace.batch_key != batch_key(batch) {
        return Err(Error::Usage("trace was produced for a different batch".into()));
    }
    let n = valid_count(trace);
    if n == 0 {
        return Err(Error::Shape("degenerate batch: every position is padding".into()));
    }
    let mut total = 0.0;
    for (cache, sample) in trace.samples.iter().zip(batch) {
        for (&z, &t) in cache.logits.iter().zip(&sample.labels) {
            total += softplus(z) - t * z;
        }
    }
    Ok(total / n as f64)
}

pub(crate) fn sum_rows(m: &Array2<f64>) -> Array1<f64> {
    m.sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::windowing::WindowSpec;

    fn sample(rows: usize, cap: usize, d: usize, seed: u64) -> WindowSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut states = Array2::zeros((cap, d));
        for r in 0..rows {
            for c in 0..d {
                states[[r, c]] = rng.random::<f32>() - 0.5;
            }
        }
        let mut labels = vec![0.0; cap];
        labels[0] = 1.0;
        WindowSample {
            states,
            labels,
            mask: (0..cap).map(|i| i < rows).collect(),
            spec: WindowSpec { doc_id: "s".into(), start: 1, length: rows },
        }
    }

    fn model(layers: usize) -> AdapterModel {
        let mut cfg = AdapterConfig::small(16, 8, layers, 2);
        cfg.dropout = 0.0;
        AdapterModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn output_shape_and_range() {
        let m = model(2);
        let batch = vec![sample(5, 8, 16, 0)];
        let t = forward(&m, &batch, Mode::Eval, Exec::Sequential).unwrap();
        assert_eq!(t.probs[0].len(), 8);
        assert!(t.probs[0][..5].iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn half_probability_gives_ln2() {
        let mut m = model(0);
        m.params_mut().w_b.fill(0.0);
        let batch = vec![sample(5, 8, 16, 0), sample(3, 8, 16, 1)];
        let t = forward(&m, &batch, Mode::Eval, Exec::Sequential).unwrap();
        assert!((loss(&t, &batch).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let m = model(1);
        let batch = vec![sample(3, 4, 12, 0)];
        assert!(matches!(forward(&m, &batch, Mode::Eval, Exec::Sequential), Err(Error::Shape(_))));
        assert!(matches!(forward(&m, &[], Mode::Eval, Exec::Sequential), Err(Error::Shape(_))));
    }

    #[test]
    fn all_padding_is_degenerate() {
        let m = model(1);
        let mut s = sample(1, 4, 16, 0);
        s.mask = vec![false; 4];
        let batch = vec![s];
        let t = forward(&m, &batch, Mode::Eval, Exec::Sequential).unwrap();
        assert!(matches!(loss(&t, &batch), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let mut m = model(2);
        m.params_mut().layers[1].b_ff2[0] = f64::INFINITY;
        let batch = vec![sample(3, 4, 16, 0)];
        match forward(&m, &batch, Mode::Eval, Exec::Sequential) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("layer 1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dropout_only_in_training() {
        let mut cfg = AdapterConfig::small(16, 8, 2, 2);
        cfg.dropout = 0.3;
        let m = AdapterModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let batch = vec![sample(6, 8, 16, 0)];
        let e1 = forward(&m, &batch, Mode::Eval, Exec::Sequential).unwrap();
        let e2 = forward(&m, &batch, Mode::Eval, Exec::Sequential).unwrap();
        assert_eq!(e1.probs, e2.probs);
        let t1 = forward(&m, &batch, Mode::Train { dropout_seed: 9 }, Exec::Sequential).unwrap();
        let t2 = forward(&m, &batch, Mode::Train { dropout_seed: 9 }, Exec::Sequential).unwrap();
        assert_eq!(t1.probs, t2.probs);
        assert_ne!(t1.probs, e1.probs);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &u in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }
}
