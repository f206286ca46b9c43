use super::{Backbone, Conv2d, ForwardTrace, LayerSpec, Tensor};
use crate::error::{Error, Result};

/// Vector-Jacobian product of the backbone with respect to its input image.
///
/// `output_grad` is the cotangent at the final feature map of `trace`.
pub fn backward_input(
    backbone: &Backbone,
    trace: &ForwardTrace,
    output_grad: &Tensor,
) -> Result<Tensor> {
    if trace.depth() != backbone.depth() {
        return Err(Error::internal(format!(
            "trace has {} layers, backbone has {}",
            trace.depth(),
            backbone.depth()
        )));
    }
    if output_grad.shape() != trace.output().shape() {
        return Err(Error::argument(format!(
            "output gradient shape {:?} differs from feature shape {:?}",
            output_grad.shape(),
            trace.output().shape()
        )));
    }
    let mut grad = output_grad.clone();
    for (i, layer) in backbone.layers().iter().enumerate().rev() {
        let input = trace.layer_input(i);
        grad = match layer {
            LayerSpec::Conv2d(conv) => conv_backward(input, conv, &grad)?,
            LayerSpec::Relu => input.zip_map(&grad, |x, g| if x > 0.0 { g } else { 0.0 })?,
            LayerSpec::MaxPool2d(_) => {
                let argmax = trace
                    .pool_argmax(i)
                    .ok_or_else(|| Error::internal(format!("layer {i}: missing pool argmax")))?;
                route_to_argmax(input, argmax, &grad)?
            }
        };
    }
    Ok(grad)
}

pub(crate) fn conv_backward(input: &Tensor, conv: &Conv2d, grad_out: &Tensor) -> Result<Tensor> {
    let (cin, h, w) = input.dims3()?;
    let (cout, oh, ow) = grad_out.dims3()?;
    if cout != conv.out_channels() || cin != conv.in_channels() {
        return Err(Error::internal("conv backward channel mismatch"));
    }
    let (kh, kw) = conv.kernel();
    let (s, p) = (conv.stride() as isize, conv.padding() as isize);
    let g = grad_out.data();
    let mut acc = vec![0f64; cin * h * w];
    for o in 0..cout {
        let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
        for i in 0..cin {
            let aplane = &mut acc[i * h * w..(i + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = conv.w(o, i, ki, kj);
                    if wv == 0.0 {
                        continue;
                    }
                    let wv = wv as f64;
                    for r in 0..oh {
                        let ir = r as isize * s + ki as isize - p;
                        if ir < 0 || ir >= h as isize {
                            continue;
                        }
                        for c in 0..ow {
                            let ic = c as isize * s + kj as isize - p;
                            if ic >= 0 && ic < w as isize {
                                aplane[ir as usize * w + ic as usize] +=
                                    wv * gplane[r * ow + c] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cin, h, w], acc.into_iter().map(|v| v as f32).collect())
}

/// Sends every output value back to the input element that won its window.
pub(crate) fn route_to_argmax(input: &Tensor, argmax: &[usize], values: &Tensor) -> Result<Tensor> {
    if argmax.len() != values.len() {
        return Err(Error::internal("pool argmax does not match output size"));
    }
    let mut acc = vec![0f64; input.len()];
    for (&idx, &v) in argmax.iter().zip(values.data()) {
        let slot = acc
            .get_mut(idx)
            .ok_or_else(|| Error::internal("pool argmax outside input"))?;
        *slot += v as f64;
    }
    Tensor::new(
        input.shape().to_vec(),
        acc.into_iter().map(|v| v as f32).collect(),
    )
}
