//! Batched forward and backward passes.
//!
//! Activations are batch-major: sample `b` of a layer with `k` outputs sits
//! at `[b·k, (b+1)·k)`, and image activations are channel-major inside a
//! sample. A ReLU follows every layer except the last and except layers
//! directly feeding a norm layer (the ReLU then comes after the norm).

use crate::error::{Error, Result};
use crate::model::{LayerInfo, LayerKind, Network};

/// Logits plus everything backprop needs.
#[derive(Clone, Debug)]
pub struct Forward {
    pub batch: usize,
    pub classes: usize,
    /// `batch × classes`.
    pub logits: Vec<f64>,
    /// Per layer: its input activation (post-ReLU of the previous layer).
    inputs: Vec<Vec<f64>>,
    /// Per layer: its pre-activation output.
    outputs: Vec<Vec<f64>>,
}

/// Whether a ReLU is applied to layer `l`'s output.
pub fn relu_after(net: &Network, l: usize) -> bool {
    let layers = net.layer_info();
    match layers.get(l + 1) {
        None => false,
        Some(next) => next.kind() != LayerKind::Norm,
    }
}

pub fn forward(net: &Network, x: &[f64]) -> Result<Forward> {
    forward_with(net, net.params(), x)
}

/// Forward pass using `params` in place of the network's own values.
pub fn forward_with(net: &Network, params: &[f64], x: &[f64]) -> Result<Forward> {
    let width = net.input().len();
    if params.len() != net.num_params() {
        return Err(Error::Shape(format!(
            "{} parameters given for a network of {}",
            params.len(),
            net.num_params()
        )));
    }
    if width == 0 || !x.len().is_multiple_of(width) || x.is_empty() {
        return Err(Error::Shape(format!(
            "batch of {} values does not match input width {width}",
            x.len()
        )));
    }
    let batch = x.len() / width;
    let mut inputs = Vec::with_capacity(net.layer_info().len());
    let mut outputs = Vec::with_capacity(net.layer_info().len());
    let mut act = x.to_vec();
    for (l, layer) in net.layer_info().iter().enumerate() {
        let z = layer_forward(layer, params, &act, batch);
        inputs.push(act);
        act = if relu_after(net, l) {
            z.iter().map(|v| v.max(0.0)).collect()
        } else {
            z.clone()
        };
        outputs.push(z);
    }
    Ok(Forward {
        batch,
        classes: net.output().len(),
        logits: act,
        inputs,
        outputs,
    })
}

fn layer_forward(layer: &LayerInfo, params: &[f64], a: &[f64], batch: usize) -> Vec<f64> {
    let w = &params[layer.weight_ids()];
    let bias = layer.has_bias().then(|| &params[layer.bias_ids()]);
    let (ins, outs) = (layer.input(), layer.output());
    let (n_in, n_out) = (ins.len(), outs.len());
    let mut z = vec![0.0; batch * n_out];
    for b in 0..batch {
        let a = &a[b * n_in..(b + 1) * n_in];
        let z = &mut z[b * n_out..(b + 1) * n_out];
        match layer.kind() {
            LayerKind::Dense => {
                for (o, zo) in z.iter_mut().enumerate() {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    let dot: f64 = row.iter().zip(a).map(|(w, a)| w * a).sum();
                    *zo = dot + bias.map_or(0.0, |b| b[o]);
                }
            }
            LayerKind::Conv2d => {
                let s = layer.shape();
                let (c_in, kh, kw) = (s[1], s[2], s[3]);
                let (h_in, w_in) = (ins.height, ins.width);
                let (h_out, w_out) = (outs.height, outs.width);
                for o in 0..s[0] {
                    let b0 = bias.map_or(0.0, |b| b[o]);
                    for y in 0..h_out {
                        for x in 0..w_out {
                            let mut acc = b0;
                            for c in 0..c_in {
                                for ky in 0..kh {
                                    let wrow = &w[((o * c_in + c) * kh + ky) * kw..][..kw];
                                    let arow = &a[(c * h_in + y + ky) * w_in + x..][..kw];
                                    acc += wrow.iter().zip(arow).map(|(w, a)| w * a).sum::<f64>();
                                }
                            }
                            z[(o * h_out + y) * w_out + x] = acc;
                        }
                    }
                }
            }
            LayerKind::Norm => {
                let m = ins.map_size();
                for c in 0..ins.channels {
                    let shift = bias.map_or(0.0, |b| b[c]);
                    for p in 0..m {
                        z[c * m + p] = w[c] * a[c * m + p] + shift;
                    }
                }
            }
        }
    }
    z
}

/// Accumulates `∂L/∂params` into `grad` given `∂L/∂logits`, walking the
/// cached activations backwards.
pub fn backward(
    net: &Network,
    params: &[f64],
    fwd: &Forward,
    dlogits: &[f64],
    grad: &mut [f64],
) -> Result<()> {
    if dlogits.len() != fwd.logits.len() || grad.len() != params.len() {
        return Err(Error::Shape(
            "gradient buffers do not match the forward pass".into(),
        ));
    }
    let layers = net.layer_info();
    let mut dz = dlogits.to_vec();
    for l in (0..layers.len()).rev() {
        let da = layer_backward(
            &layers[l],
            params,
            &fwd.inputs[l],
            &dz,
            fwd.batch,
            grad,
            l > 0,
        );
        if l == 0 {
            break;
        }
        dz = da;
        if relu_after(net, l - 1) {
            for (d, &z) in dz.iter_mut().zip(&fwd.outputs[l - 1]) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
        }
    }
    Ok(())
}

fn layer_backward(
    layer: &LayerInfo,
    params: &[f64],
    a: &[f64],
    dz: &[f64],
    batch: usize,
    grad: &mut [f64],
    want_input_grad: bool,
) -> Vec<f64> {
    let w = &params[layer.weight_ids()];
    let (wr, br) = (layer.weight_ids(), layer.bias_ids());
    let (ins, outs) = (layer.input(), layer.output());
    let (n_in, n_out) = (ins.len(), outs.len());
    let mut da = if want_input_grad {
        vec![0.0; batch * n_in]
    } else {
        Vec::new()
    };
    for b in 0..batch {
        let a = &a[b * n_in..(b + 1) * n_in];
        let dz = &dz[b * n_out..(b + 1) * n_out];
        match layer.kind() {
            LayerKind::Dense => {
                for (o, &g) in dz.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let gw = &mut grad[wr.start + o * n_in..wr.start + (o + 1) * n_in];
                    gw.iter_mut().zip(a).for_each(|(gw, a)| *gw += g * a);
                    if layer.has_bias() {
                        grad[br.start + o] += g;
                    }
                    if want_input_grad {
                        let row = &w[o * n_in..(o + 1) * n_in];
                        let da = &mut da[b * n_in..(b + 1) * n_in];
                        da.iter_mut().zip(row).for_each(|(d, w)| *d += g * w);
                    }
                }
            }
            LayerKind::Conv2d => {
                let s = layer.shape();
                let (c_in, kh, kw) = (s[1], s[2], s[3]);
                let (h_in, w_in) = (ins.height, ins.width);
                let (h_out, w_out) = (outs.height, outs.width);
                for o in 0..s[0] {
                    for y in 0..h_out {
                        for x in 0..w_out {
                            let g = dz[(o * h_out + y) * w_out + x];
                            if g == 0.0 {
                                continue;
                            }
                            if layer.has_bias() {
                                grad[br.start + o] += g;
                            }
                            for c in 0..c_in {
                                for ky in 0..kh {
                                    let wi = ((o * c_in + c) * kh + ky) * kw;
                                    let ai = (c * h_in + y + ky) * w_in + x;
                                    for kx in 0..kw {
                                        grad[wr.start + wi + kx] += g * a[ai + kx];
                                        if want_input_grad {
                                            da[b * n_in + ai + kx] += g * w[wi + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            LayerKind::Norm => {
                let m = ins.map_size();
                for c in 0..ins.channels {
                    for p in 0..m {
                        let g = dz[c * m + p];
                        grad[wr.start + c] += g * a[c * m + p];
                        if layer.has_bias() {
                            grad[br.start + c] += g;
                        }
                        if want_input_grad {
                            da[b * n_in + c * m + p] += g * w[c];
                        }
                    }
                }
            }
        }
    }
    da
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn check_labels(logits: &[f64], labels: &[usize], classes: usize) -> Result<()> {
    if classes == 0 || logits.len() != labels.len() * classes {
        return Err(Error::Shape(format!(
            "{} logits for {} labels over {classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy in nats.
pub fn loss_ce(logits: &[f64], labels: &[usize], classes: usize) -> Result<f64> {
    check_labels(logits, labels, classes)?;
    let total: f64 = logits
        .chunks(classes)
        .zip(labels)
        .map(|(row, &y)| -log_softmax_row(row)[y])
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn loss_ce_grad(logits: &[f64], labels: &[usize], classes: usize) -> Result<(f64, Vec<f64>)> {
    check_labels(logits, labels, classes)?;
    let n = labels.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &y) in logits.chunks(classes).zip(labels) {
        let ls = log_softmax_row(row);
        total -= ls[y];
        for (k, l) in ls.iter().enumerate() {
            let target = if k == y { 1.0 } else { 0.0 };
            grad.push((l.exp() - target) / n);
        }
    }
    Ok((total / n, grad))
}

/// Cross-entropy of `net` under `params` and its full parameter gradient.
pub fn ce_loss_and_grad(
    net: &Network,
    params: &[f64],
    x: &[f64],
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let fwd = forward_with(net, params, x)?;
    let (loss, dlogits) = loss_ce_grad(&fwd.logits, labels, fwd.classes)?;
    let mut grad = vec![0.0; params.len()];
    backward(net, params, &fwd, &dlogits, &mut grad)?;
    Ok((loss, grad))
}

/// Arg-max predictions (lowest index wins ties).
pub fn predict(net: &Network, x: &[f64]) -> Result<Vec<usize>> {
    let fwd = forward(net, x)?;
    Ok(fwd
        .logits
        .chunks(fwd.classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| {
                    if v > best.1 {
                        (k, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect())
}
