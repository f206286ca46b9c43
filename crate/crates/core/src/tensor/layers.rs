use super::Tensor;
use crate::error::{Error, Result};

/// 2-D convolution (cross-correlation) with zero padding.
///
/// Weights are `[out, in, kh, kw]`, bias is `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let [out, _, kh, kw] = weight.shape()[..] else {
            return Err(Error::config(format!(
                "conv weight must be [out, in, kh, kw], got {:?}",
                weight.shape()
            )));
        };
        if bias.shape() != [out] {
            return Err(Error::config(format!(
                "conv bias must be [{out}], got {:?}",
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv stride must be >= 1"));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::config("conv kernel must be non-empty"));
        }
        if !weight.all_finite() || !bias.all_finite() {
            return Err(Error::config("conv parameters must be finite"));
        }
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Bias-free convolution.
    pub fn without_bias(weight: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let out = weight.shape().first().copied().unwrap_or(0);
        Self::new(weight, Tensor::zeros(&[out]), stride, padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < kh || pw < kw {
            return Err(Error::config(format!(
                "conv kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    #[inline]
    pub(crate) fn w(&self, o: usize, i: usize, ki: usize, kj: usize) -> f32 {
        let [_, cin, kh, kw] = self.weight.shape()[..] else {
            unreachable!()
        };
        self.weight.data()[((o * cin + i) * kh + ki) * kw + kj]
    }
}

/// Max pooling over square windows without padding, floor semantics for
/// trailing rows/columns that do not fill a whole window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub window: usize,
    pub stride: usize,
}

impl MaxPool2d {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(Error::config("maxpool window and stride must be >= 1"));
        }
        Ok(MaxPool2d { window, stride })
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.window > h || self.window > w {
            return Err(Error::config(format!(
                "maxpool window {} larger than input {h}x{w}",
                self.window
            )));
        }
        Ok((
            (h - self.window) / self.stride + 1,
            (w - self.window) / self.stride + 1,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d(Conv2d),
    Relu,
    MaxPool2d(MaxPool2d),
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d(_) => "maxpool2d",
        }
    }

    /// `(kernel, stride, padding)` along one spatial axis; identity for ReLU.
    pub(crate) fn geometry(&self) -> (usize, usize, usize) {
        match self {
            LayerSpec::Conv2d(c) => (c.kernel().0, c.stride, c.padding),
            LayerSpec::Relu => (1, 1, 0),
            LayerSpec::MaxPool2d(p) => (p.window, p.stride, 0),
        }
    }

    pub(crate) fn geometry_w(&self) -> (usize, usize, usize) {
        match self {
            LayerSpec::Conv2d(c) => (c.kernel().1, c.stride, c.padding),
            other => other.geometry(),
        }
    }
}

pub fn conv2d_forward(input: &Tensor, conv: &Conv2d) -> Result<Tensor> {
    let (cin, h, w) = input.dims3()?;
    if cin != conv.in_channels() {
        return Err(Error::config(format!(
            "conv expects {} input channels, got {cin}",
            conv.in_channels()
        )));
    }
    let (oh, ow) = conv.output_dims(h, w)?;
    let (kh, kw) = conv.kernel();
    let cout = conv.out_channels();
    let (s, p) = (conv.stride as isize, conv.padding as isize);
    let x = input.data();
    let mut out = Vec::with_capacity(cout * oh * ow);
    let mut acc = vec![0f64; oh * ow];
    for o in 0..cout {
        acc.fill(conv.bias.data()[o] as f64);
        for i in 0..cin {
            let plane = &x[i * h * w..(i + 1) * h * w];
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
                        let row = &plane[ir as usize * w..(ir as usize + 1) * w];
                        let acc_row = &mut acc[r * ow..(r + 1) * ow];
                        for (c, a) in acc_row.iter_mut().enumerate() {
                            let ic = c as isize * s + kj as isize - p;
                            if ic >= 0 && ic < w as isize {
                                *a += wv * row[ic as usize] as f64;
                            }
                        }
                    }
                }
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    Tensor::new(vec![cout, oh, ow], out)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Pooled values plus, for every output element, the flat index (into the
/// input tensor) of the element that won the window.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolOutput {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Ties resolve to the first element in row-major window order.
pub fn maxpool_forward(input: &Tensor, pool: MaxPool2d) -> Result<PoolOutput> {
    let (c, h, w) = input.dims3()?;
    let (oh, ow) = pool.output_dims(h, w)?;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for r in 0..oh {
            for col in 0..ow {
                let mut best = base + r * pool.stride * w + col * pool.stride;
                for i in 0..pool.window {
                    for j in 0..pool.window {
                        let idx = base + (r * pool.stride + i) * w + col * pool.stride + j;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(PoolOutput {
        output: Tensor::new(vec![c, oh, ow], out)?,
        argmax,
    })
}

/// Per-layer record of a forward pass, enough for exact backward and
/// relevance passes.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Vec<Tensor>,
    outputs: Vec<Tensor>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.outputs.len()
    }

    pub fn input(&self) -> &Tensor {
        &self.inputs[0]
    }

    pub fn output(&self) -> &Tensor {
        self.outputs.last().unwrap_or(&self.inputs[0])
    }

    pub fn layer_input(&self, layer: usize) -> &Tensor {
        &self.inputs[layer]
    }

    pub fn layer_output(&self, layer: usize) -> &Tensor {
        &self.outputs[layer]
    }

    pub fn pool_argmax(&self, layer: usize) -> Option<&[usize]> {
        self.argmax.get(layer).and_then(|a| a.as_deref())
    }
}

/// A plain sequential stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    layers: Vec<LayerSpec>,
}

impl Backbone {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if !layers.iter().any(|l| matches!(l, LayerSpec::Conv2d(_))) {
            return Err(Error::config("backbone needs at least one conv2d layer"));
        }
        let mut channels: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            if let LayerSpec::Conv2d(conv) = layer {
                if let Some(c) = channels {
                    if c != conv.in_channels() {
                        return Err(Error::config(format!(
                            "layer {i}: conv expects {} input channels but previous layer produces {c}",
                            conv.in_channels()
                        )));
                    }
                }
                channels = Some(conv.out_channels());
            }
        }
        Ok(Backbone { layers })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn in_channels(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                LayerSpec::Conv2d(c) => Some(c.in_channels()),
                _ => None,
            })
            .expect("validated in Backbone::new")
    }

    pub fn out_channels(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerSpec::Conv2d(c) => Some(c.out_channels()),
                _ => None,
            })
            .expect("validated in Backbone::new")
    }

    /// Spatial size of the final feature map for an `h x w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .try_fold((h, w), |(h, w), (i, layer)| {
                match layer {
                    LayerSpec::Conv2d(c) => c.output_dims(h, w),
                    LayerSpec::Relu => Ok((h, w)),
                    LayerSpec::MaxPool2d(p) => p.output_dims(h, w),
                }
                .map_err(|e| with_layer(i, e))
            })
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = apply(layer, &x).map_err(|e| with_layer(i, e))?.0;
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: &Tensor) -> Result<ForwardTrace> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut argmax = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, am) = apply(layer, &x).map_err(|e| with_layer(i, e))?;
            inputs.push(x);
            outputs.push(y.clone());
            argmax.push(am);
            x = y;
        }
        Ok(ForwardTrace {
            inputs,
            outputs,
            argmax,
        })
    }
}

fn apply(layer: &LayerSpec, x: &Tensor) -> Result<(Tensor, Option<Vec<usize>>)> {
    match layer {
        LayerSpec::Conv2d(c) => Ok((conv2d_forward(x, c)?, None)),
        LayerSpec::Relu => Ok((relu_forward(x), None)),
        LayerSpec::MaxPool2d(p) => {
            let pooled = maxpool_forward(x, *p)?;
            Ok((pooled.output, Some(pooled.argmax)))
        }
    }
}

fn with_layer(index: usize, err: Error) -> Error {
    match err {
        Error::Config(m) => Error::Config(format!("layer {index}: {m}")),
        Error::Argument(m) => Error::Config(format!("layer {index}: {m}")),
        other => other,
    }
}
