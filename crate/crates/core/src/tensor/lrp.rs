use std::fmt;
use std::str::FromStr;

use super::{conv_backward, conv2d_forward, route_to_argmax, Backbone, Conv2d, ForwardTrace, LayerSpec, Tensor};
use crate::error::{Error, Result};

/// Relevance redistribution rule for a convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LrpRule {
    /// `z_ij = a_i w_ij`, bias included in the denominator.
    Epsilon,
    /// `z_ij = a_i⁺ w_ij⁺`, bias ignored.
    ZPlus,
    /// Box rule for bounded inputs: `z_ij = a_i w_ij − l w_ij⁺ − h w_ij⁻`.
    ZBox,
}

impl LrpRule {
    pub fn name(self) -> &'static str {
        match self {
            LrpRule::Epsilon => "epsilon",
            LrpRule::ZPlus => "zplus",
            LrpRule::ZBox => "zB",
        }
    }
}

impl fmt::Display for LrpRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LrpRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(LrpRule::Epsilon),
            "zplus" => Ok(LrpRule::ZPlus),
            "zB" | "zb" => Ok(LrpRule::ZBox),
            other => Err(Error::config(format!("unknown relevance rule '{other}'"))),
        }
    }
}

/// Rule assignment for a relevance pass.
///
/// The first convolution (the one reading the image) uses `input_rule`,
/// every later convolution uses `hidden_rule`. ReLU layers pass relevance
/// through unchanged and max pooling hands it to the winning element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleConfig {
    pub input_rule: LrpRule,
    pub hidden_rule: LrpRule,
    pub stabilizer: f64,
    /// Pixel bounds `(low, high)` for the box rule; the image's own
    /// minimum and maximum when absent.
    pub bounds: Option<(f32, f32)>,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            input_rule: LrpRule::ZBox,
            hidden_rule: LrpRule::ZPlus,
            stabilizer: 1e-9,
            bounds: None,
        }
    }
}

impl RuleConfig {
    pub fn from_names(input_rule: &str, hidden_rule: &str) -> Result<Self> {
        Ok(RuleConfig {
            input_rule: input_rule.parse()?,
            hidden_rule: hidden_rule.parse()?,
            ..RuleConfig::default()
        })
    }

    /// Same rule everywhere.
    pub fn uniform(rule: LrpRule) -> Self {
        RuleConfig {
            input_rule: rule,
            hidden_rule: rule,
            ..RuleConfig::default()
        }
    }
}

/// Propagates relevance from the final feature map back to input pixels.
pub fn lrp_backward(
    backbone: &Backbone,
    trace: &ForwardTrace,
    relevance: &Tensor,
    rules: &RuleConfig,
) -> Result<Tensor> {
    if trace.depth() != backbone.depth() {
        return Err(Error::internal(format!(
            "trace has {} layers, backbone has {}",
            trace.depth(),
            backbone.depth()
        )));
    }
    if relevance.shape() != trace.output().shape() {
        return Err(Error::argument(format!(
            "relevance shape {:?} differs from feature shape {:?}",
            relevance.shape(),
            trace.output().shape()
        )));
    }
    if rules.stabilizer.is_nan() || rules.stabilizer <= 0.0 {
        return Err(Error::config("relevance stabilizer must be positive"));
    }
    let first_conv = backbone
        .layers()
        .iter()
        .position(|l| matches!(l, LayerSpec::Conv2d(_)))
        .ok_or_else(|| Error::internal("backbone without conv layer"))?;
    let bounds = rules
        .bounds
        .unwrap_or_else(|| (trace.input().min(), trace.input().max()));

    let mut r = relevance.clone();
    for (i, layer) in backbone.layers().iter().enumerate().rev() {
        let input = trace.layer_input(i);
        r = match layer {
            LayerSpec::Conv2d(conv) => {
                let rule = if i == first_conv {
                    rules.input_rule
                } else {
                    rules.hidden_rule
                };
                conv_relevance(input, conv, &r, rule, rules.stabilizer, bounds)?
            }
            LayerSpec::Relu => r,
            LayerSpec::MaxPool2d(_) => {
                let argmax = trace
                    .pool_argmax(i)
                    .ok_or_else(|| Error::internal(format!("layer {i}: missing pool argmax")))?;
                route_to_argmax(input, argmax, &r)?
            }
        };
    }
    Ok(r)
}

fn with_weights(conv: &Conv2d, f: impl Fn(f32) -> f32, keep_bias: bool) -> Result<Conv2d> {
    let bias = if keep_bias {
        conv.bias().clone()
    } else {
        Tensor::zeros(conv.bias().shape())
    };
    Conv2d::new(conv.weight().map(f), bias, conv.stride(), conv.padding())
}

/// `R_j / (z_j + stab·sign(z_j))` elementwise.
fn stabilized_ratio(relevance: &Tensor, z: &Tensor, stab: f64) -> Result<Tensor> {
    relevance.zip_map(z, |r, z| {
        let z = z as f64;
        let denom = if z >= 0.0 { z + stab } else { z - stab };
        (r as f64 / denom) as f32
    })
}

fn conv_relevance(
    input: &Tensor,
    conv: &Conv2d,
    relevance: &Tensor,
    rule: LrpRule,
    stab: f64,
    (low, high): (f32, f32),
) -> Result<Tensor> {
    match rule {
        LrpRule::Epsilon => {
            let z = conv2d_forward(input, conv)?;
            let s = stabilized_ratio(relevance, &z, stab)?;
            let c = conv_backward(input, conv, &s)?;
            input.zip_map(&c, |a, c| (a as f64 * c as f64) as f32)
        }
        LrpRule::ZPlus => {
            let plus = with_weights(conv, |w| w.max(0.0), false)?;
            let a = input.map(|v| v.max(0.0));
            let z = conv2d_forward(&a, &plus)?;
            let s = stabilized_ratio(relevance, &z, stab)?;
            let c = conv_backward(&a, &plus, &s)?;
            a.zip_map(&c, |a, c| (a as f64 * c as f64) as f32)
        }
        LrpRule::ZBox => {
            let plain = with_weights(conv, |w| w, false)?;
            let plus = with_weights(conv, |w| w.max(0.0), false)?;
            let minus = with_weights(conv, |w| w.min(0.0), false)?;
            let lows = Tensor::full(input.shape(), low);
            let highs = Tensor::full(input.shape(), high);
            let z_a = conv2d_forward(input, &plain)?;
            let z_l = conv2d_forward(&lows, &plus)?;
            let z_h = conv2d_forward(&highs, &minus)?;
            let mut z = Vec::with_capacity(z_a.len());
            for ((&a, &l), &h) in z_a.data().iter().zip(z_l.data()).zip(z_h.data()) {
                z.push((a as f64 - l as f64 - h as f64) as f32);
            }
            let z = Tensor::new(z_a.shape().to_vec(), z)?;
            let s = stabilized_ratio(relevance, &z, stab)?;
            let c = conv_backward(input, &plain, &s)?;
            let c_plus = conv_backward(input, &plus, &s)?;
            let c_minus = conv_backward(input, &minus, &s)?;
            let mut out = Vec::with_capacity(input.len());
            for (((&a, &c), &cp), &cm) in input
                .data()
                .iter()
                .zip(c.data())
                .zip(c_plus.data())
                .zip(c_minus.data())
            {
                out.push(
                    (a as f64 * c as f64 - low as f64 * cp as f64 - high as f64 * cm as f64)
                        as f32,
                );
            }
            Tensor::new(input.shape().to_vec(), out)
        }
    }
}
