//! Parameter containers for dense networks.

use ndarray::{Array1, Array2};
use rand::Rng;

use super::mlp::MlpSpec;
use crate::error::{shape_err, Result};

/// Learned gain and offset applied after normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Array1<f64>,
    pub offset: Array1<f64>,
}

/// One affine layer, optionally followed by a layer norm.
///
/// `weight` is `(out, in)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub norm: Option<NormParams>,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// All trainable tensors of one network, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<DenseLayer>,
}

impl ParamSet {
    /// Kaiming-uniform fan-in weights, zero biases, unit norm gains.
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        let dims = spec.layer_dims();
        let n_layers = dims.len();
        let layers = dims
            .into_iter()
            .enumerate()
            .map(|(i, (fan_in, fan_out))| {
                let bound = (6.0 / fan_in as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
                let norm = (spec.use_layer_norm && i + 1 < n_layers).then(|| NormParams {
                    gain: Array1::ones(fan_out),
                    offset: Array1::zeros(fan_out),
                });
                DenseLayer {
                    weight,
                    bias: Array1::zeros(fan_out),
                    norm,
                }
            })
            .collect();
        ParamSet { layers }
    }

    /// All-zero parameters (norm gains included) with the layout of `spec`.
    pub fn zeros(spec: &MlpSpec) -> Self {
        let dims = spec.layer_dims();
        let n_layers = dims.len();
        let layers = dims
            .into_iter()
            .enumerate()
            .map(|(i, (fan_in, fan_out))| DenseLayer {
                weight: Array2::zeros((fan_out, fan_in)),
                bias: Array1::zeros(fan_out),
                norm: (spec.use_layer_norm && i + 1 < n_layers).then(|| NormParams {
                    gain: Array1::zeros(fan_out),
                    offset: Array1::zeros(fan_out),
                }),
            })
            .collect();
        ParamSet { layers }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    /// Tensor names and shapes in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), vec![layer.out_dim(), layer.in_dim()]));
            out.push((format!("layer{i}.bias"), vec![layer.out_dim()]));
            if layer.norm.is_some() {
                out.push((format!("layer{i}.norm_gain"), vec![layer.out_dim()]));
                out.push((format!("layer{i}.norm_offset"), vec![layer.out_dim()]));
            }
        }
        out
    }

    /// Flat views of every tensor, in the same order as [`ParamSet::layout`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(self.layers.len() * 4);
        for layer in &self.layers {
            out.push(layer.weight.as_slice().expect("standard layout"));
            out.push(layer.bias.as_slice().expect("standard layout"));
            if let Some(norm) = &layer.norm {
                out.push(norm.gain.as_slice().expect("standard layout"));
                out.push(norm.offset.as_slice().expect("standard layout"));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(self.layers.len() * 4);
        for layer in &mut self.layers {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
            if let Some(norm) = &mut layer.norm {
                out.push(norm.gain.as_slice_mut().expect("standard layout"));
                out.push(norm.offset.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.layout() == other.layout()
    }

    pub fn check_same_layout(&self, other: &ParamSet, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(shape_err(format!("{what}: parameter layouts differ")))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Elementwise map producing a new set with the same layout.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.iter_mut().for_each(|x| *x = f(*x));
        }
        out
    }

    /// `self += alpha * other`. Layouts must match.
    pub fn scaled_add(&mut self, alpha: f64, other: &ParamSet) -> Result<()> {
        self.check_same_layout(other, "scaled_add")?;
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += alpha * s);
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        self.check_same_layout(other, "max_abs_diff")?;
        Ok(self
            .tensors()
            .into_iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }

    /// Parameters flattened in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Overwrite all parameters from a flat vector in canonical order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(shape_err(format!(
                "flat vector has {} entries, parameter set has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Bitwise fingerprint (FNV-1a over the raw f64 bits).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for x in t {
                for byte in x.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}
