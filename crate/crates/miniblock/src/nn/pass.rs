//! Forward and reverse passes.
//!
//! Convolution is realized by unfolding input patches into a matrix product;
//! the same unfolding serves the forward pass, the batch backward pass and
//! per-sample Jacobian extraction. Per-sample work runs as an ordered map
//! over samples with a fixed-order reduction, so results do not depend on
//! the worker count.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::parallel::ordered_map_range;

use super::types::{LayerParams, LayerSpec, NetworkSpec, Params, Tape};

/// Patch matrix for one sample of a conv layer: rows are spatial locations,
/// columns are (input channel, kernel offset) pairs; zero padding of width
/// `radius` keeps input and output grids equal.
fn unfold(input: &[f64], layer: &LayerSpec) -> Matrix {
    let (j_ch, radius, h, w) = match layer {
        LayerSpec::Conv2d {
            in_channels,
            radius,
            height,
            width,
            ..
        } => (*in_channels, *radius as isize, *height as isize, *width as isize),
        _ => panic!("unfold on dense layer"),
    };
    let side = 2 * radius + 1;
    let area = (side * side) as usize;
    let spatial = (h * w) as usize;
    let mut patches = Matrix::zeros(spatial, j_ch * area);
    for y in 0..h {
        for x in 0..w {
            let t = (y * w + x) as usize;
            let row = patches.row_mut(t);
            for j in 0..j_ch {
                let chan = &input[j * spatial..(j + 1) * spatial];
                for dy in -radius..=radius {
                    let yy = y + dy;
                    if yy < 0 || yy >= h {
                        continue;
                    }
                    for dx in -radius..=radius {
                        let xx = x + dx;
                        if xx < 0 || xx >= w {
                            continue;
                        }
                        let d = ((dy + radius) * side + (dx + radius)) as usize;
                        row[j * area + d] = chan[(yy * w + xx) as usize];
                    }
                }
            }
        }
    }
    patches
}

/// Adjoint of [`unfold`]: scatter patch-space gradients back onto the input
/// grid.
fn fold(patch_grad: &Matrix, layer: &LayerSpec) -> Vec<f64> {
    let (j_ch, radius, h, w) = match layer {
        LayerSpec::Conv2d {
            in_channels,
            radius,
            height,
            width,
            ..
        } => (*in_channels, *radius as isize, *height as isize, *width as isize),
        _ => panic!("fold on dense layer"),
    };
    let side = 2 * radius + 1;
    let area = (side * side) as usize;
    let spatial = (h * w) as usize;
    let mut out = vec![0.0; j_ch * spatial];
    for y in 0..h {
        for x in 0..w {
            let t = (y * w + x) as usize;
            let row = patch_grad.row(t);
            for j in 0..j_ch {
                for dy in -radius..=radius {
                    let yy = y + dy;
                    if yy < 0 || yy >= h {
                        continue;
                    }
                    for dx in -radius..=radius {
                        let xx = x + dx;
                        if xx < 0 || xx >= w {
                            continue;
                        }
                        let d = ((dy + radius) * side + (dx + radius)) as usize;
                        out[j * spatial + (yy * w + xx) as usize] += row[j * area + d];
                    }
                }
            }
        }
    }
    out
}

/// Conv weights as a `(J·|Δ|) × I` matrix for the patch-space product.
fn conv_weight_matrix(params: &LayerParams, layer: &LayerSpec) -> Matrix {
    let (j_ch, i_ch) = match layer {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            ..
        } => (*in_channels, *out_channels),
        _ => panic!("conv_weight_matrix on dense layer"),
    };
    let area = layer.kernel_area();
    let mut w = Matrix::zeros(j_ch * area, i_ch);
    for j in 0..j_ch {
        for i in 0..i_ch {
            let base = (j * i_ch + i) * area;
            for d in 0..area {
                w.set(j * area + d, i, params.weights[base + d]);
            }
        }
    }
    w
}

/// Map a patch-space weight gradient back to the canonical (j, i, δ) layout.
fn canonical_conv_weights(patch_grad: &Matrix, layer: &LayerSpec) -> Vec<f64> {
    let (j_ch, i_ch) = match layer {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            ..
        } => (*in_channels, *out_channels),
        _ => unreachable!(),
    };
    let area = layer.kernel_area();
    let mut out = vec![0.0; j_ch * i_ch * area];
    for j in 0..j_ch {
        for i in 0..i_ch {
            let base = (j * i_ch + i) * area;
            for d in 0..area {
                out[base + d] = patch_grad.get(j * area + d, i);
            }
        }
    }
    out
}

fn check_params(params: &Params, spec: &NetworkSpec) -> Result<()> {
    if params.layers.len() != spec.layers.len() {
        return Err(Error::ShapeMismatch {
            context: "params/layer count".into(),
            expected: (spec.layers.len(), 0),
            got: (params.layers.len(), 0),
        });
    }
    for (l, (p, s)) in params.layers.iter().zip(spec.layers.iter()).enumerate() {
        if p.weights.len() != s.weight_len() || p.bias.len() != s.bias_len() {
            return Err(Error::ShapeMismatch {
                context: format!("params of layer {l}"),
                expected: (s.weight_len(), s.bias_len()),
                got: (p.weights.len(), p.bias.len()),
            });
        }
    }
    Ok(())
}

/// Run the network on a batch, producing outputs and the tape needed by the
/// reverse passes.
pub fn forward(params: &Params, spec: &NetworkSpec, x: &Matrix) -> Result<(Matrix, Tape)> {
    check_params(params, spec)?;
    if x.cols() != spec.input_dim() {
        return Err(Error::ShapeMismatch {
            context: "forward input".into(),
            expected: (x.rows(), spec.input_dim()),
            got: (x.rows(), x.cols()),
        });
    }
    let n = x.rows();
    let mut inputs = Vec::with_capacity(spec.layers.len());
    let mut pre_activations = Vec::with_capacity(spec.layers.len());
    let mut current = x.clone();
    for (layer, p) in spec.layers.iter().zip(params.layers.iter()) {
        let pre = match layer {
            LayerSpec::Dense { .. } => {
                let w = p.dense_weight_matrix(layer);
                let mut pre = current.mul(&w);
                if layer.has_bias() {
                    for r in 0..n {
                        let row = pre.row_mut(r);
                        for (v, &b) in row.iter_mut().zip(p.bias.iter()) {
                            *v += b;
                        }
                    }
                }
                pre
            }
            LayerSpec::Conv2d { out_channels, .. } => {
                let w_mat = conv_weight_matrix(p, layer);
                let spatial = layer.in_flat() / conv_in_channels(layer);
                let i_ch = *out_channels;
                let rows = ordered_map_range(n, |s| {
                    let patches = unfold(current.row(s), layer);
                    let o = patches.mul(&w_mat); // spatial × I
                    let mut row = vec![0.0; i_ch * spatial];
                    for i in 0..i_ch {
                        let b = if layer.has_bias() { p.bias[i] } else { 0.0 };
                        for t in 0..spatial {
                            row[i * spatial + t] = o.get(t, i) + b;
                        }
                    }
                    row
                });
                let mut pre = Matrix::zeros(n, i_ch * spatial);
                for (r, row) in rows.into_iter().enumerate() {
                    pre.row_mut(r).copy_from_slice(&row);
                }
                pre
            }
        };
        let act = layer.activation();
        let mut out = pre.clone();
        for v in out.data_mut() {
            *v = act.apply(*v);
        }
        inputs.push(std::mem::replace(&mut current, out));
        pre_activations.push(pre);
    }
    Ok((
        current,
        Tape {
            inputs,
            pre_activations,
        },
    ))
}

fn conv_in_channels(layer: &LayerSpec) -> usize {
    match layer {
        LayerSpec::Conv2d { in_channels, .. } => *in_channels,
        _ => unreachable!(),
    }
}

fn check_tape(tape: &Tape, spec: &NetworkSpec, output_grad: &Matrix) -> Result<()> {
    if tape.inputs.len() != spec.layers.len() || tape.pre_activations.len() != spec.layers.len() {
        return Err(Error::ShapeMismatch {
            context: "tape layer count".into(),
            expected: (spec.layers.len(), 0),
            got: (tape.inputs.len(), tape.pre_activations.len()),
        });
    }
    let n = tape.batch_size();
    for (l, layer) in spec.layers.iter().enumerate() {
        let i = &tape.inputs[l];
        let h = &tape.pre_activations[l];
        if i.rows() != n || i.cols() != layer.in_flat() || h.rows() != n || h.cols() != layer.out_flat()
        {
            return Err(Error::ShapeMismatch {
                context: format!("stale tape at layer {l}"),
                expected: (n, layer.in_flat()),
                got: (i.rows(), i.cols()),
            });
        }
    }
    if output_grad.rows() != n || output_grad.cols() != spec.output_dim() {
        return Err(Error::ShapeMismatch {
            context: "output gradient".into(),
            expected: (n, spec.output_dim()),
            got: (output_grad.rows(), output_grad.cols()),
        });
    }
    Ok(())
}

/// Reverse pass returning parameter gradients and the per-layer
/// pre-activation gradients (the deltas the curvature factors are built
/// from).
pub fn backward_with_deltas(
    params: &Params,
    spec: &NetworkSpec,
    tape: &Tape,
    output_grad: &Matrix,
) -> Result<(Params, Vec<Matrix>)> {
    check_params(params, spec)?;
    check_tape(tape, spec, output_grad)?;
    let n = tape.batch_size();
    let layer_count = spec.layers.len();
    let mut grads: Vec<LayerParams> = spec.layers.iter().map(LayerParams::zeros).collect();
    let mut deltas: Vec<Matrix> = vec![Matrix::zeros(0, 0); layer_count];
    let mut delta = output_grad.clone();
    for l in (0..layer_count).rev() {
        let layer = &spec.layers[l];
        let p = &params.layers[l];
        let act = layer.activation();
        // gradient w.r.t. pre-activations
        let mut dh = delta;
        {
            let pre = &tape.pre_activations[l];
            let dh_data = dh.data_mut();
            for (v, &h) in dh_data.iter_mut().zip(pre.data().iter()) {
                *v *= act.derivative(h);
            }
        }
        let input = &tape.inputs[l];
        match layer {
            LayerSpec::Dense { .. } => {
                let gw = input.tmul(&dh); // in × out
                grads[l].weights.copy_from_slice(gw.data());
                if layer.has_bias() {
                    for r in 0..n {
                        let row = dh.row(r);
                        for (b, &v) in grads[l].bias.iter_mut().zip(row.iter()) {
                            *b += v;
                        }
                    }
                }
                if l > 0 {
                    let w = p.dense_weight_matrix(layer);
                    delta = dh.mul_t(&w);
                } else {
                    delta = Matrix::zeros(0, 0);
                }
            }
            LayerSpec::Conv2d { out_channels, .. } => {
                let w_mat = conv_weight_matrix(p, layer);
                let i_ch = *out_channels;
                let spatial = layer.out_flat() / i_ch;
                let need_input_grad = l > 0;
                let per_sample = ordered_map_range(n, |s| {
                    let patches = unfold(input.row(s), layer);
                    // de-interleave the channel-major delta row into spatial × I
                    let mut d = Matrix::zeros(spatial, i_ch);
                    let drow = dh.row(s);
                    for i in 0..i_ch {
                        for t in 0..spatial {
                            d.set(t, i, drow[i * spatial + t]);
                        }
                    }
                    let gw = patches.tmul(&d); // (J·|Δ|) × I
                    let mut gb = vec![0.0; i_ch];
                    for i in 0..i_ch {
                        for t in 0..spatial {
                            gb[i] += d.get(t, i);
                        }
                    }
                    let din = if need_input_grad {
                        Some(fold(&d.mul_t(&w_mat), layer))
                    } else {
                        None
                    };
                    (gw, gb, din)
                });
                let area = layer.kernel_area();
                let j_ch = conv_in_channels(layer);
                let mut gw_total = Matrix::zeros(j_ch * area, i_ch);
                let mut din_mat = if need_input_grad {
                    Matrix::zeros(n, layer.in_flat())
                } else {
                    Matrix::zeros(0, 0)
                };
                for (s, (gw, gb, din)) in per_sample.into_iter().enumerate() {
                    gw_total.add_scaled(1.0, &gw);
                    if layer.has_bias() {
                        for (b, &v) in grads[l].bias.iter_mut().zip(gb.iter()) {
                            *b += v;
                        }
                    }
                    if let Some(din) = din {
                        din_mat.row_mut(s).copy_from_slice(&din);
                    }
                }
                grads[l].weights = canonical_conv_weights(&gw_total, layer);
                delta = din_mat;
            }
        }
        deltas[l] = dh;
    }
    Ok((Params { layers: grads }, deltas))
}

/// Parameter gradients for the scalar objective whose prediction gradient is
/// `output_grad`; with the mean-loss gradient this is the batch-mean
/// gradient.
pub fn backward(
    params: &Params,
    spec: &NetworkSpec,
    tape: &Tape,
    output_grad: &Matrix,
) -> Result<Params> {
    backward_with_deltas(params, spec, tape, output_grad).map(|(g, _)| g)
}

/// Per-sample flattened gradients, one layer at a time.
///
/// Row `i` of the returned matrix for layer `l` is the gradient of sample
/// `i`'s objective (whose prediction gradient is row `i` of
/// `per_sample_output_grads`) with respect to layer `l`'s parameters, in the
/// canonical flat ordering.
pub fn per_sample_gradients(
    params: &Params,
    spec: &NetworkSpec,
    tape: &Tape,
    per_sample_output_grads: &Matrix,
) -> Result<Vec<Matrix>> {
    check_params(params, spec)?;
    check_tape(tape, spec, per_sample_output_grads)?;
    let n = tape.batch_size();
    let layer_count = spec.layers.len();
    let mut rows_per_layer: Vec<Matrix> = spec
        .layers
        .iter()
        .map(|l| Matrix::zeros(n, l.param_len()))
        .collect();
    let mut delta = per_sample_output_grads.clone();
    for l in (0..layer_count).rev() {
        let layer = &spec.layers[l];
        let p = &params.layers[l];
        let act = layer.activation();
        let mut dh = delta;
        {
            let pre = &tape.pre_activations[l];
            for (v, &h) in dh.data_mut().iter_mut().zip(pre.data().iter()) {
                *v *= act.derivative(h);
            }
        }
        let input = &tape.inputs[l];
        match layer {
            LayerSpec::Dense { in_dim, out_dim, .. } => {
                let (i_dim, o_dim) = (*in_dim, *out_dim);
                let rows = ordered_map_range(n, |s| {
                    let a = input.row(s);
                    let d = dh.row(s);
                    let mut row = vec![0.0; layer.param_len()];
                    for i in 0..i_dim {
                        let ai = a[i];
                        let dst = &mut row[i * o_dim..(i + 1) * o_dim];
                        for (o, &dv) in dst.iter_mut().zip(d.iter()) {
                            *o = ai * dv;
                        }
                    }
                    if layer.has_bias() {
                        row[i_dim * o_dim..].copy_from_slice(d);
                    }
                    row
                });
                for (s, row) in rows.into_iter().enumerate() {
                    rows_per_layer[l].row_mut(s).copy_from_slice(&row);
                }
                if l > 0 {
                    let w = p.dense_weight_matrix(layer);
                    delta = dh.mul_t(&w);
                } else {
                    delta = Matrix::zeros(0, 0);
                }
            }
            LayerSpec::Conv2d { out_channels, .. } => {
                let w_mat = conv_weight_matrix(p, layer);
                let i_ch = *out_channels;
                let spatial = layer.out_flat() / i_ch;
                let need_input_grad = l > 0;
                let area = layer.kernel_area();
                let j_ch = conv_in_channels(layer);
                let results = ordered_map_range(n, |s| {
                    let patches = unfold(input.row(s), layer);
                    let mut d = Matrix::zeros(spatial, i_ch);
                    let drow = dh.row(s);
                    for i in 0..i_ch {
                        for t in 0..spatial {
                            d.set(t, i, drow[i * spatial + t]);
                        }
                    }
                    let gw = patches.tmul(&d);
                    let mut row = vec![0.0; layer.param_len()];
                    row[..j_ch * i_ch * area].copy_from_slice(&canonical_conv_weights(&gw, layer));
                    if layer.has_bias() {
                        for i in 0..i_ch {
                            let mut acc = 0.0;
                            for t in 0..spatial {
                                acc += d.get(t, i);
                            }
                            row[j_ch * i_ch * area + i] = acc;
                        }
                    }
                    let din = if need_input_grad {
                        Some(fold(&d.mul_t(&w_mat), layer))
                    } else {
                        None
                    };
                    (row, din)
                });
                let mut din_mat = if need_input_grad {
                    Matrix::zeros(n, layer.in_flat())
                } else {
                    Matrix::zeros(0, 0)
                };
                for (s, (row, din)) in results.into_iter().enumerate() {
                    rows_per_layer[l].row_mut(s).copy_from_slice(&row);
                    if let Some(din) = din {
                        din_mat.row_mut(s).copy_from_slice(&din);
                    }
                }
                delta = din_mat;
            }
        }
    }
    Ok(rows_per_layer)
}

/// Concatenate per-layer per-sample gradients to full-network Jacobian rows.
pub fn concat_layer_jacobians(per_layer: &[Matrix]) -> Matrix {
    let n = per_layer.first().map_or(0, |m| m.rows());
    let p: usize = per_layer.iter().map(|m| m.cols()).sum();
    let mut out = Matrix::zeros(n, p);
    for r in 0..n {
        let dst = out.row_mut(r);
        let mut offset = 0;
        for m in per_layer {
            dst[offset..offset + m.cols()].copy_from_slice(m.row(r));
            offset += m.cols();
        }
    }
    out
}
