//! Dense multi-layer perceptrons with exact reverse-mode gradients.
//!
//! Every hidden layer computes `affine -> SiLU -> (LayerNorm)`; the last layer
//! is affine only. Batches are row-major `(batch, features)` matrices.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::params::ParamSet;
use crate::error::{shape_err, Error, Result};

/// Variance floor inside layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub use_layer_norm: bool,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: &[usize], output_dim: usize, use_layer_norm: bool) -> Result<Self> {
        let spec = MlpSpec {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            hidden_activation: Activation::Silu,
            use_layer_norm,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::InvalidArgument("mlp needs at least one hidden layer".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("mlp dimensions must be positive".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let dims = self.layer_dims();
        if params.layers.len() != dims.len() {
            return Err(shape_err(format!(
                "expected {} layers, parameters have {}",
                dims.len(),
                params.layers.len()
            )));
        }
        let last = dims.len() - 1;
        for (i, ((fan_in, fan_out), layer)) in dims.iter().zip(&params.layers).enumerate() {
            if layer.weight.dim() != (*fan_out, *fan_in) || layer.bias.len() != *fan_out {
                return Err(shape_err(format!("layer {i} does not match ({fan_in} -> {fan_out})")));
            }
            let wants_norm = self.use_layer_norm && i < last;
            match &layer.norm {
                Some(n) if wants_norm && n.gain.len() == *fan_out && n.offset.len() == *fan_out => {}
                None if !wants_norm => {}
                _ => return Err(shape_err(format!("layer {i} norm parameters do not match spec"))),
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Row-wise normalization to zero mean and unit variance.
///
/// Returns the normalized rows and each row's inverse standard deviation.
pub fn layer_norm_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let width = x.ncols() as f64;
    let mut normed = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in normed.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / width;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * s);
        *inv = s;
    }
    (normed, inv_std)
}

fn affine(x: &ArrayView2<f64>, weight: &Array2<f64>, bias: &Array1<f64>) -> Array2<f64> {
    let mut z = x.dot(&weight.t());
    z += bias;
    z
}

/// Intermediate values recorded by a forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    layers: Vec<LayerTrace>,
    output: Array2<f64>,
}

#[derive(Debug, Clone)]
struct LayerTrace {
    input: Array2<f64>,
    pre_activation: Array2<f64>,
    normalized: Option<(Array2<f64>, Array1<f64>)>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

fn check_input(spec: &MlpSpec, input: &ArrayView2<f64>) -> Result<()> {
    if input.ncols() != spec.input_dim {
        return Err(shape_err(format!(
            "input has {} features, network expects {}",
            input.ncols(),
            spec.input_dim
        )));
    }
    Ok(())
}

/// Evaluate the network on a batch, keeping what backward needs.
pub fn forward_trace(spec: &MlpSpec, params: &ParamSet, input: ArrayView2<f64>) -> Result<Trace> {
    spec.check_params(params)?;
    check_input(spec, &input)?;
    let last = params.layers.len() - 1;
    let mut traces = Vec::with_capacity(params.layers.len());
    let mut x = input.to_owned();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = affine(&x.view(), &layer.weight, &layer.bias);
        if i == last {
            traces.push(LayerTrace {
                input: x,
                pre_activation: Array2::zeros((0, 0)),
                normalized: None,
            });
            x = z;
            break;
        }
        let h = z.mapv(silu);
        let (next, normalized) = match &layer.norm {
            Some(norm) => {
                let (xhat, inv_std) = layer_norm_rows(&h);
                let out = &xhat * &norm.gain + &norm.offset;
                (out, Some((xhat, inv_std)))
            }
            None => (h, None),
        };
        traces.push(LayerTrace {
            input: x,
            pre_activation: z,
            normalized,
        });
        x = next;
    }
    Ok(Trace {
        layers: traces,
        output: x,
    })
}

/// Evaluate the network on a batch without recording a trace.
pub fn forward_batch(spec: &MlpSpec, params: &ParamSet, input: ArrayView2<f64>) -> Result<Array2<f64>> {
    spec.check_params(params)?;
    check_input(spec, &input)?;
    let last = params.layers.len() - 1;
    let mut x = input.to_owned();
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = affine(&x.view(), &layer.weight, &layer.bias);
        if i < last {
            z.mapv_inplace(silu);
            if let Some(norm) = &layer.norm {
                let (xhat, _) = layer_norm_rows(&z);
                z = &xhat * &norm.gain + &norm.offset;
            }
        }
        x = z;
    }
    Ok(x)
}

/// Single-vector convenience wrapper over [`forward_batch`].
pub fn mlp_forward(spec: &MlpSpec, params: &ParamSet, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != spec.input_dim {
        return Err(shape_err(format!(
            "input has {} features, network expects {}",
            input.len(),
            spec.input_dim
        )));
    }
    let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| shape_err(e.to_string()))?;
    Ok(forward_batch(spec, params, x)?.into_raw_vec_and_offset().0)
}

/// Backpropagate `grad_output` (d loss / d output, same shape as the output)
/// through a recorded forward pass, accumulating parameter gradients into
/// `grads`.
pub fn backward(params: &ParamSet, trace: &Trace, grad_output: ArrayView2<f64>, grads: &mut ParamSet) -> Result<()> {
    params.check_same_layout(grads, "backward")?;
    if grad_output.dim() != trace.output.dim() {
        return Err(shape_err(format!(
            "output gradient {:?} does not match output {:?}",
            grad_output.dim(),
            trace.output.dim()
        )));
    }
    let last = params.layers.len() - 1;
    let mut upstream = grad_output.to_owned();
    for i in (0..params.layers.len()).rev() {
        let layer = &params.layers[i];
        let lt = &trace.layers[i];
        let g = &mut grads.layers[i];

        let dz = if i == last {
            upstream
        } else {
            let dh = match (&layer.norm, &lt.normalized) {
                (Some(norm), Some((xhat, inv_std))) => {
                    let gn = g.norm.as_mut().expect("layouts checked");
                    gn.gain += &(&upstream * xhat).sum_axis(Axis(0));
                    gn.offset += &upstream.sum_axis(Axis(0));
                    let dxhat = &upstream * &norm.gain;
                    let width = dxhat.ncols() as f64;
                    let mut dh = Array2::zeros(dxhat.raw_dim());
                    for (((mut out, dx), xh), s) in dh
                        .rows_mut()
                        .into_iter()
                        .zip(dxhat.rows())
                        .zip(xhat.rows())
                        .zip(inv_std.iter())
                    {
                        let mean_dx = dx.sum() / width;
                        let mean_dx_xh = dx.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / width;
                        Zip::from(&mut out)
                            .and(&dx)
                            .and(&xh)
                            .for_each(|o, &d, &x| *o = s * (d - mean_dx - x * mean_dx_xh));
                    }
                    dh
                }
                _ => upstream,
            };
            let mut dz = dh;
            Zip::from(&mut dz)
                .and(&lt.pre_activation)
                .for_each(|d, &z| *d *= silu_grad(z));
            dz
        };

        g.weight += &dz.t().dot(&lt.input);
        g.bias += &dz.sum_axis(Axis(0));
        upstream = if i > 0 {
            dz.dot(&layer.weight)
        } else {
            Array2::zeros((0, 0))
        };
    }
    Ok(())
}
