use ndarray::{s, Array1, Array2, Axis};

use super::forward::{
    batch_key, gelu_grad, sigmoid, sum_rows, valid_count, ForwardTrace, LayerCache, LnCache, SampleCache,
};
use super::params::{AdapterModel, AdapterParams, LayerParams};
use super::PositionalEncoding;
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::windowing::WindowSample;

/// Same layout as the parameters.
pub type Gradients = AdapterParams;

/// Samples are split into at most this many fixed chunks; each chunk
/// accumulates its own gradient and the chunks are summed in order. The
/// split depends only on the batch size, never on the thread count.
const GRAD_CHUNKS: usize = 8;

fn ln_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
    g_gain: &mut Array1<f64>,
    g_bias: &mut Array1<f64>,
) -> Array2<f64> {
    *g_gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *g_bias += &sum_rows(dy);
    let dxhat = dy * gain;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, dxh), xh), &rstd) in
        dx.rows_mut().into_iter().zip(dxhat.rows()).zip(cache.xhat.rows()).zip(cache.rstd.iter())
    {
        let m1 = dxh.sum() / d;
        let m2 = dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        for ((o, &g), &x) in out.iter_mut().zip(dxh.iter()).zip(xh.iter()) {
            *o = rstd * (g - m1 - x * m2);
        }
    }
    dx
}

fn layer_backward(
    p: &LayerParams,
    c: &LayerCache,
    h_in_grad: Array2<f64>,
    n_heads: usize,
    g: &mut LayerParams,
) -> Array2<f64> {
    let d = p.w_q.nrows();
    let dh_size = d / n_heads;
    let scale = 1.0 / (dh_size as f64).sqrt();

    // out = h1 + dropout(ff(ln2(h1)))
    let mut dh1 = h_in_grad.clone();
    let mut df = h_in_grad;
    if let Some(keep) = &c.ff_keep {
        df *= keep;
    }
    g.w_ff2 += &c.g.t().dot(&df);
    g.b_ff2 += &sum_rows(&df);
    let mut du = df.dot(&p.w_ff2.t());
    du.zip_mut_with(&c.u, |dv, &u| *dv *= gelu_grad(u));
    g.w_ff1 += &c.b.t().dot(&du);
    g.b_ff1 += &sum_rows(&du);
    let db = du.dot(&p.w_ff1.t());
    dh1 += &ln_backward(&db, &c.ln2, &p.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);

    // h1 = h + attn(ln1(h)) W_o + b_o
    let mut dh = dh1.clone();
    g.w_o += &c.ctx.t().dot(&dh1);
    g.b_o += &sum_rows(&dh1);
    let dctx = dh1.dot(&p.w_o.t());

    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for head in 0..n_heads {
        let cols = s![.., head * dh_size..(head + 1) * dh_size];
        let probs = &c.probs[head];
        let keep = c.attn_keep.as_ref().map(|k| &k[head]);
        let weights = match keep {
            Some(k) => probs * k,
            None => probs.clone(),
        };
        let dctx_h = dctx.slice(cols);
        let mut dp = dctx_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&weights.t().dot(&dctx_h));
        if let Some(k) = keep {
            dp *= k;
        }
        // softmax backward, row by row
        let row_dot = (&dp * probs).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = (probs * &(dp - &row_dot)) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    g.w_q += &c.a.t().dot(&dq);
    g.b_q += &sum_rows(&dq);
    g.w_k += &c.a.t().dot(&dk);
    g.w_v += &c.a.t().dot(&dv);
    g.b_v += &sum_rows(&dv);
    let da = dq.dot(&p.w_q.t()) + dk.dot(&p.w_k.t()) + dv.dot(&p.w_v.t());
    dh += &ln_backward(&da, &c.ln1, &p.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
    dh
}

fn sample_backward(
    model: &AdapterModel,
    cache: &SampleCache,
    sample: &WindowSample,
    n_valid: f64,
    grads: &mut Gradients,
) {
    let cfg = model.config();
    let prm = model.params();
    let len = cache.len;
    if len == 0 {
        return;
    }
    let dz: Array1<f64> = cache.logits.iter().zip(&sample.labels).map(|(&z, &t)| (sigmoid(z) - t) / n_valid).collect();

    grads.w_b += &cache.hidden.t().dot(&dz);
    grads.b_b[0] += dz.sum();
    let mut dh = dz.insert_axis(Axis(1)) * &prm.w_b;

    for ((lp, lc), lg) in prm.layers.iter().zip(&cache.layers).zip(grads.layers.iter_mut()).rev() {
        dh = layer_backward(lp, lc, dh, cfg.n_heads, lg);
    }
    if cfg.n_layers > 0 && cfg.positional_encoding == PositionalEncoding::Learned {
        let table = grads.positions.as_mut().expect("learned table present");
        let mut rows = table.slice_mut(s![..len, ..]);
        rows += &dh;
    }
    // No gradient is formed for the frozen states themselves.
    let x: Array2<f64> = sample.states.slice(s![..len, ..]).mapv(f64::from);
    grads.w_d += &x.t().dot(&dh);
}

/// Gradient of [`super::loss`] with respect to every adapter parameter.
///
/// The trace must come from [`super::forward`] on this exact model state and
/// batch; anything else is a usage error.
pub fn backward(model: &AdapterModel, trace: &ForwardTrace, batch: &[WindowSample], exec: Exec) -> Result<Gradients> {
    if trace.model_identity != model.identity() {
        return Err(Error::Usage("stale trace: model changed since forward".into()));
    }
    if trace.batch_key != batch_key(batch) {
        return Err(Error::Usage("trace was produced for a different batch".into()));
    }
    let n = valid_count(trace);
    if n == 0 {
        return Err(Error::Shape("degenerate batch: every position is padding".into()));
    }
    let chunk = batch.len().div_ceil(GRAD_CHUNKS);
    let starts: Vec<usize> = (0..batch.len()).step_by(chunk).collect();
    let partials = par::map(exec, &starts, |&lo| {
        let mut g = AdapterParams::zeros(model.config());
        let hi = (lo + chunk).min(batch.len());
        for (t, s) in trace.samples[lo..hi].iter().zip(&batch[lo..hi]) {
            sample_backward(model, t, s, n as f64, &mut g);
        }
        g
    });
    let mut iter = partials.into_iter();
    let mut total = iter.next().expect("non-empty batch");
    for g in iter {
        total.add_assign(&g);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{forward, AdapterConfig, Mode};
    use crate::windowing::WindowSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(rows: usize, cap: usize, d: usize, seed: u64, label_at: Option<usize>) -> WindowSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut states = Array2::zeros((cap, d));
        for r in 0..rows {
            for c in 0..d {
                states[[r, c]] = rng.random::<f32>() - 0.5;
            }
        }
        let mut labels = vec![0.0; cap];
        if let Some(i) = label_at {
            labels[i] = 1.0;
        }
        WindowSample {
            states,
            labels,
            mask: (0..cap).map(|i| i < rows).collect(),
            spec: WindowSpec { doc_id: format!("s{seed}"), start: 1, length: rows },
        }
    }

    #[test]
    fn stale_trace_rejected() {
        let mut cfg = AdapterConfig::small(16, 8, 1, 2);
        cfg.dropout = 0.0;
        let mut m = AdapterModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let batch = vec![sample(4, 4, 16, 0, Some(1))];
        let t = forward(&m, &batch, Mode::Eval, Exec::Sequential).unwrap();
        assert!(backward(&m, &t, &batch, Exec::Sequential).is_ok());
        m.params_mut().b_b[0] += 0.1;
        assert!(matches!(backward(&m, &t, &batch, Exec::Sequential), Err(Error::Usage(_))));
        let other = vec![sample(3, 4, 16, 1, None)];
        let t = forward(&m, &batch, Mode::Eval, Exec::Sequential).unwrap();
        assert!(matches!(backward(&m, &t, &other, Exec::Sequential), Err(Error::Usage(_))));
        let copy = m.clone();
        assert!(matches!(backward(&copy, &t, &batch, Exec::Sequential), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_labels_push_output_bias_down() {
        let mut m = AdapterModel::init(AdapterConfig::linear_probe(16, 8), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m.params_mut().w_b.fill(0.0);
        let batch = vec![sample(4, 4, 16, 0, None)];
        let t = forward(&m, &batch, Mode::Eval, Exec::Sequential).unwrap();
        assert!(t.probs[0].iter().all(|&p| p == 0.5));
        let g = backward(&m, &t, &batch, Exec::Sequential).unwrap();
        // dL/db = mean(B - T) = 0.5
        assert!((g.b_b[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sequential_and_parallel_gradients_identical() {
        let mut cfg = AdapterConfig::small(16, 8, 2, 2);
        cfg.dropout = 0.1;
        let m = AdapterModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let batch: Vec<_> = (0..11).map(|i| sample(2 + i % 4, 6, 16, i as u64, Some(0))).collect();
        let mode = Mode::Train { dropout_seed: 4 };
        let ts = forward(&m, &batch, mode, Exec::Sequential).unwrap();
        let tp = forward(&m, &batch, mode, Exec::Parallel).unwrap();
        assert_eq!(ts.probs, tp.probs);
        let gs = backward(&m, &ts, &batch, Exec::Sequential).unwrap();
        let gp = backward(&m, &tp, &batch, Exec::Parallel).unwrap();
        assert_eq!(gs, gp);
    }
}
