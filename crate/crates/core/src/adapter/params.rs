use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{AdapterConfig, PositionalEncoding};
use crate::error::{Error, Result};

/// One pre-norm encoder layer. The key projection has no bias: it adds the
/// same amount to every score in a softmax row and cancels out.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub w_q: Array2<f64>,
    pub b_q: Array1<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub b_v: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array1<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array1<f64>,
}

const LAYER_TENSORS: [&str; 15] = [
    "ln1_gain", "ln1_bias", "w_q", "b_q", "w_k", "w_v", "b_v", "w_o", "b_o", "ln2_gain", "ln2_bias", "w_ff1", "b_ff1",
    "w_ff2", "b_ff2",
];

impl LayerParams {
    fn zeros(d: usize, ff: usize) -> Self {
        Self {
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            w_q: Array2::zeros((d, d)),
            b_q: Array1::zeros(d),
            w_k: Array2::zeros((d, d)),
            w_v: Array2::zeros((d, d)),
            b_v: Array1::zeros(d),
            w_o: Array2::zeros((d, d)),
            b_o: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
            w_ff1: Array2::zeros((d, ff)),
            b_ff1: Array1::zeros(ff),
            w_ff2: Array2::zeros((ff, d)),
            b_ff2: Array1::zeros(d),
        }
    }

    fn views(&self) -> [(&[usize], &[f64]); 15] {
        macro_rules! v {
            ($($f:ident),*) => { [$( (self.$f.shape(), self.$f.as_slice().expect("standard layout")) ),*] };
        }
        v!(ln1_gain, ln1_bias, w_q, b_q, w_k, w_v, b_v, w_o, b_o, ln2_gain, ln2_bias, w_ff1, b_ff1, w_ff2, b_ff2)
    }

    fn views_mut(&mut self) -> [&mut [f64]; 15] {
        macro_rules! v {
            ($($f:ident),*) => { [$( self.$f.as_slice_mut().expect("standard layout") ),*] };
        }
        v!(ln1_gain, ln1_bias, w_q, b_q, w_k, w_v, b_v, w_o, b_o, ln2_gain, ln2_bias, w_ff1, b_ff1, w_ff2, b_ff2)
    }
}

/// Every learnable tensor of the adapter. Also used as the gradient type.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    /// `D x d` reduction of the frozen states.
    pub w_d: Array2<f64>,
    /// Learned position table, present only for learned encodings.
    pub positions: Option<Array2<f64>>,
    pub layers: Vec<LayerParams>,
    /// `d`-vector output projection.
    pub w_b: Array1<f64>,
    /// Output bias (one element).
    pub b_b: Array1<f64>,
}

impl AdapterParams {
    pub fn zeros(cfg: &AdapterConfig) -> Self {
        let d = cfg.model_dim;
        Self {
            w_d: Array2::zeros((cfg.input_dim, d)),
            positions: (cfg.positional_encoding == PositionalEncoding::Learned && cfg.n_layers > 0)
                .then(|| Array2::zeros((cfg.max_positions, d))),
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(d, cfg.ff_dim())).collect(),
            w_b: Array1::zeros(d),
            b_b: Array1::zeros(1),
        }
    }

    /// `(name, shape, values)` for every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        out.push(("w_d".into(), self.w_d.shape().to_vec(), self.w_d.as_slice().unwrap()));
        if let Some(p) = &self.positions {
            out.push(("positions".into(), p.shape().to_vec(), p.as_slice().unwrap()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, (shape, vals)) in LAYER_TENSORS.iter().zip(layer.views()) {
                out.push((format!("layers.{i}.{name}"), shape.to_vec(), vals));
            }
        }
        out.push(("w_b".into(), self.w_b.shape().to_vec(), self.w_b.as_slice().unwrap()));
        out.push(("b_b".into(), self.b_b.shape().to_vec(), self.b_b.as_slice().unwrap()));
        out
    }

    /// Mutable slices in the same order as [`AdapterParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.w_d.as_slice_mut().unwrap()];
        if let Some(p) = &mut self.positions {
            out.push(p.as_slice_mut().unwrap());
        }
        for layer in &mut self.layers {
            out.extend(layer.views_mut());
        }
        out.push(self.w_b.as_slice_mut().unwrap());
        out.push(self.b_b.as_slice_mut().unwrap());
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &AdapterParams) {
        let theirs = other.tensors();
        for (mine, (_, _, src)) in self.tensors_mut().into_iter().zip(theirs) {
            mine.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
    }

    /// All values flattened in tensor order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, _, v)| v.iter().copied()).collect()
    }
}

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

/// Adapter configuration plus parameters.
///
/// Each instance carries an identity and a generation counter that advance
/// whenever parameters are handed out mutably, so a [`super::ForwardTrace`]
/// taken before an update cannot be fed to [`super::backward`] afterwards.
#[derive(Debug)]
pub struct AdapterModel {
    config: AdapterConfig,
    params: AdapterParams,
    id: u64,
    generation: u64,
}

impl Clone for AdapterModel {
    fn clone(&self) -> Self {
        Self { config: self.config.clone(), params: self.params.clone(), id: fresh_id(), generation: 0 }
    }
}

impl PartialEq for AdapterModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

impl AdapterModel {
    /// Scaled Gaussian initialization (std `1/sqrt(fan_in)`), unit layer-norm
    /// gains, zero biases. Parameters are rounded to the `f32` grid.
    pub fn init<R: Rng + ?Sized>(config: AdapterConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let ff = config.ff_dim();
        let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

        let w_d = normal_matrix(rng, config.input_dim, d, inv(config.input_dim));
        let positions = (config.positional_encoding == PositionalEncoding::Learned && config.n_layers > 0)
            .then(|| normal_matrix(rng, config.max_positions, d, 0.02));
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Array1::ones(d),
                ln1_bias: Array1::zeros(d),
                w_q: normal_matrix(rng, d, d, inv(d)),
                b_q: Array1::zeros(d),
                w_k: normal_matrix(rng, d, d, inv(d)),
                w_v: normal_matrix(rng, d, d, inv(d)),
                b_v: Array1::zeros(d),
                w_o: normal_matrix(rng, d, d, inv(d)),
                b_o: Array1::zeros(d),
                ln2_gain: Array1::ones(d),
                ln2_bias: Array1::zeros(d),
                w_ff1: normal_matrix(rng, d, ff, inv(d)),
                b_ff1: Array1::zeros(ff),
                w_ff2: normal_matrix(rng, ff, d, inv(ff)),
                b_ff2: Array1::zeros(d),
            })
            .collect();
        let w_b = normal_matrix(rng, 1, d, inv(d)).into_shape_with_order(d).unwrap();

        let mut model =
            Self::from_params(config, AdapterParams { w_d, positions, layers, w_b, b_b: Array1::zeros(1) })?;
        model.round_to_f32();
        Ok(model)
    }

    pub fn from_params(config: AdapterConfig, params: AdapterParams) -> Result<Self> {
        config.validate()?;
        let expected = AdapterParams::zeros(&config);
        let want: Vec<_> = expected.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        let got: Vec<_> = params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if want != got {
            return Err(Error::Shape("parameter shapes do not match the configuration".into()));
        }
        if !params.all_finite() {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(Self { config, params, id: fresh_id(), generation: 0 })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn params(&self) -> &AdapterParams {
        &self.params
    }

    /// Mutable access; invalidates outstanding forward traces.
    pub fn params_mut(&mut self) -> &mut AdapterParams {
        self.generation += 1;
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn identity(&self) -> (u64, u64) {
        (self.id, self.generation)
    }

    /// Snap every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in self.params_mut().tensors_mut() {
            t.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_deterministic() {
        let cfg = AdapterConfig::small(16, 8, 2, 2);
        let a = AdapterModel::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = AdapterModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let bits = |m: &AdapterModel| m.params().flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.params().flatten().iter().all(|v| f64::from(*v as f32) == *v));
    }

    #[test]
    fn layer_norm_and_bias_init() {
        let m = AdapterModel::init(AdapterConfig::small(16, 8, 1, 2), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let l = &m.params().layers[0];
        assert!(l.ln1_gain.iter().all(|&g| g == 1.0) && l.ln2_gain.iter().all(|&g| g == 1.0));
        assert!(l.b_q.iter().chain(&l.b_ff1).all(|&b| b == 0.0));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = AdapterConfig::small(16, 510, 2, 8);
        assert!(matches!(AdapterModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Config(_))));
    }

    #[test]
    fn tensor_listing_matches_count() {
        let cfg = AdapterConfig::small(16, 8, 2, 2);
        let p = AdapterParams::zeros(&cfg);
        // w_d + 2 * 15 layer tensors + w_b + b_b
        assert_eq!(p.tensors().len(), 33);
        let d = 8;
        let per_layer = 4 * d + 4 * d * d + 3 * d + 2 * d * 32 + 32 + d;
        assert_eq!(p.len(), 16 * 8 + 2 * per_layer + 8 + 1);
    }
}
