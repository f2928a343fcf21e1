//! Architecture mini-language and network construction.
//!
//! ```text
//! conv:20x5x5 pool:2 conv:50x5x5 pool:2 fc:500 out:10
//! conv:20x5x5 pool:2 conv:50x5x5 pool:2 (fc:75)*n out:10
//! ```
//!
//! Tokens are separated by whitespace. `conv:FxHxW` is a valid-padding,
//! stride-1 convolution with `F` filters of size `H×W`; `pool:K` is a `K×K`
//! max pool; `fc:N` a hidden dense layer; `out:C` the ungated classifier,
//! which must come last. A parenthesised group followed by `*N` (or `*name`
//! bound through [`ArchSpec::parse_with`]) is repeated.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::nn::{Conv2dLayer, DenseLayer, GateParams, Layer, MaxPoolLayer, Network, Shape3};
use crate::{Error, Result, SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { filters: usize, kh: usize, kw: usize },
    Pool { window: usize },
    Fc { units: usize },
    Out { classes: usize },
}

/// Parsed and fully expanded architecture description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, &[])
    }

    /// Parses with named repetition counts, e.g. `("n", 3)` for `(fc:75)*n`.
    pub fn parse_with(text: &str, vars: &[(&str, usize)]) -> Result<Self> {
        let tokens = tokenize(text)?;
        let mut pos = 0;
        let layers = parse_seq(&tokens, &mut pos, vars, 0)?;
        if pos != tokens.len() {
            return Err(Error::ArchSpec(format!("unexpected `{}`", tokens[pos])));
        }
        let spec = Self { layers };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let outs = self.layers.iter().filter(|l| matches!(l, LayerSpec::Out { .. })).count();
        if outs != 1 || !matches!(self.layers.last(), Some(LayerSpec::Out { .. })) {
            return Err(Error::ArchSpec("exactly one `out:C` layer is required and it must be last".into()));
        }
        let zero = self.layers.iter().any(|l| match *l {
            LayerSpec::Conv { filters, kh, kw } => filters == 0 || kh == 0 || kw == 0,
            LayerSpec::Pool { window } => window < 2,
            LayerSpec::Fc { units } => units == 0,
            LayerSpec::Out { classes } => classes == 0,
        });
        if zero {
            return Err(Error::ArchSpec("layer sizes must be positive and pool windows at least 2".into()));
        }
        Ok(())
    }

    /// Widths of the parametric layers (filters or neurons), output included.
    pub fn phi(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match *l {
                LayerSpec::Conv { filters, .. } => Some(filters),
                LayerSpec::Fc { units } => Some(units),
                LayerSpec::Out { classes } => Some(classes),
                LayerSpec::Pool { .. } => None,
            })
            .collect()
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Out { classes }) => *classes,
            _ => unreachable!("validated"),
        }
    }

    /// Builds a freshly initialised network for `input`-shaped samples.
    pub fn build(&self, input: Shape3, init: &InitConfig, rng: &mut SeededRng) -> Result<Network> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut shape = input;
        let mut gated = 0usize;
        for (i, spec) in self.layers.iter().enumerate() {
            let next_is_fc = matches!(self.layers.get(i + 1), Some(LayerSpec::Fc { .. } | LayerSpec::Out { .. }));
            let layer = match *spec {
                LayerSpec::Conv { filters, kh, kw } => {
                    let fan_in = shape[0] * kh * kw;
                    let kernels = init.scheme.sample(rng, vec![filters, shape[0], kh, kw], fan_in)?;
                    let gate = init.gate(gated, filters, false);
                    gated += 1;
                    Layer::Conv(Conv2dLayer::new(kernels, vec![0.0; filters], Some(gate))?)
                }
                LayerSpec::Pool { window } => Layer::Pool(MaxPoolLayer { window }),
                LayerSpec::Fc { units } => {
                    let fan_in: usize = shape.iter().product();
                    let weights = init.scheme.sample(rng, vec![units, fan_in], fan_in)?;
                    let gate = init.gate(gated, units, next_is_fc);
                    gated += 1;
                    Layer::Dense(DenseLayer::new(weights, Some(vec![0.0; units]), Some(gate))?)
                }
                LayerSpec::Out { classes } => {
                    let fan_in: usize = shape.iter().product();
                    let weights = init.scheme.sample(rng, vec![classes, fan_in], fan_in)?;
                    Layer::Dense(DenseLayer::new(weights, Some(vec![0.0; classes]), None)?)
                }
            };
            shape = layer.output_shape(shape)?;
            layers.push(layer);
        }
        let mut net = Network::new(input, layers)?;
        net.round_to_storage();
        Ok(net)
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            match *l {
                LayerSpec::Conv { filters, kh, kw } => write!(f, "conv:{filters}x{kh}x{kw}")?,
                LayerSpec::Pool { window } => write!(f, "pool:{window}")?,
                LayerSpec::Fc { units } => write!(f, "fc:{units}")?,
                LayerSpec::Out { classes } => write!(f, "out:{classes}")?,
            }
        }
        Ok(())
    }
}

fn tokenize(text: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        match ch {
            '(' | ')' | '*' => {
                if !cur.is_empty() {
                    tokens.push(core::mem::take(&mut cur));
                }
                tokens.push(ch.to_string());
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    tokens.push(core::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    if tokens.is_empty() {
        return Err(Error::ArchSpec("empty architecture".into()));
    }
    Ok(tokens)
}

fn parse_seq(tokens: &[String], pos: &mut usize, vars: &[(&str, usize)], depth: usize) -> Result<Vec<LayerSpec>> {
    let mut out = Vec::new();
    while *pos < tokens.len() {
        let tok = tokens[*pos].as_str();
        match tok {
            ")" => {
                if depth == 0 {
                    return Err(Error::ArchSpec("unbalanced `)`".into()));
                }
                return Ok(out);
            }
            "(" => {
                *pos += 1;
                let inner = parse_seq(tokens, pos, vars, depth + 1)?;
                if tokens.get(*pos).map(String::as_str) != Some(")") {
                    return Err(Error::ArchSpec("missing `)`".into()));
                }
                *pos += 1;
                if tokens.get(*pos).map(String::as_str) != Some("*") {
                    return Err(Error::ArchSpec("group must be followed by `*count`".into()));
                }
                *pos += 1;
                let count_tok = tokens.get(*pos).ok_or_else(|| Error::ArchSpec("missing repeat count".into()))?;
                let count = match count_tok.parse::<usize>() {
                    Ok(n) => n,
                    Err(_) => vars
                        .iter()
                        .find(|(name, _)| *name == count_tok)
                        .map(|&(_, v)| v)
                        .ok_or_else(|| Error::ArchSpec(format!("unbound repeat count `{count_tok}`")))?,
                };
                *pos += 1;
                for _ in 0..count {
                    out.extend_from_slice(&inner);
                }
            }
            "*" => return Err(Error::ArchSpec("`*` must follow a parenthesised group".into())),
            _ => {
                out.push(parse_layer(tok)?);
                *pos += 1;
            }
        }
    }
    if depth > 0 {
        return Err(Error::ArchSpec("missing `)`".into()));
    }
    Ok(out)
}

fn parse_layer(tok: &str) -> Result<LayerSpec> {
    let (kind, arg) = tok.split_once(':').ok_or_else(|| Error::ArchSpec(format!("bad layer `{tok}`")))?;
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::ArchSpec(format!("bad number `{s}` in `{tok}`")));
    Ok(match kind {
        "conv" => {
            let parts: Vec<&str> = arg.split('x').collect();
            if parts.len() != 3 {
                return Err(Error::ArchSpec(format!("conv expects FxHxW, got `{tok}`")));
            }
            LayerSpec::Conv { filters: num(parts[0])?, kh: num(parts[1])?, kw: num(parts[2])? }
        }
        "pool" => LayerSpec::Pool { window: num(arg)? },
        "fc" => LayerSpec::Fc { units: num(arg)? },
        "out" => LayerSpec::Out { classes: num(arg)? },
        _ => return Err(Error::ArchSpec(format!("unknown layer kind `{kind}`"))),
    })
}

/// Weight initialisation scheme. Biases start at zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    #[default]
    HeUniform,
    /// `U(-b, b)` with `b = sqrt(3 / fan_in)`.
    LecunUniform,
}

impl WeightInit {
    pub fn bound(self, fan_in: usize) -> f64 {
        let num = match self {
            WeightInit::HeUniform => 6.0,
            WeightInit::LecunUniform => 3.0,
        };
        libm::sqrt(num / fan_in as f64)
    }

    fn sample(self, rng: &mut SeededRng, shape: Vec<usize>, fan_in: usize) -> Result<Tensor> {
        let b = self.bound(fan_in);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform_in(-b, b)).collect())
    }
}

/// Which gated layers (by position among gated layers) a setting applies to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSelect {
    All(bool),
    Only(Vec<usize>),
}

impl LayerSelect {
    pub fn contains(&self, gated_index: usize) -> bool {
        match self {
            LayerSelect::All(b) => *b,
            LayerSelect::Only(v) => v.contains(&gated_index),
        }
    }
}

impl Default for LayerSelect {
    fn default() -> Self {
        LayerSelect::All(true)
    }
}

/// Initial values and trainability of weights and gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub scheme: WeightInit,
    /// Initial width gate value for layers whose width is learnt.
    pub gate_w0: f64,
    /// Initial depth gate value for layers whose depth is learnt.
    pub gate_d0: f64,
    pub learn_width: LayerSelect,
    /// Depth is only ever learnt on collapsible (dense → dense) layers.
    pub learn_depth: LayerSelect,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            scheme: WeightInit::HeUniform,
            gate_w0: 1.0,
            gate_d0: 0.5,
            learn_width: LayerSelect::All(true),
            learn_depth: LayerSelect::All(true),
        }
    }
}

impl InitConfig {
    /// Plain network: every gate frozen as a ReLU.
    pub fn plain() -> Self {
        Self { learn_width: LayerSelect::All(false), learn_depth: LayerSelect::All(false), ..Self::default() }
    }

    fn gate(&self, gated_index: usize, width: usize, collapsible: bool) -> GateParams {
        let learn_w = self.learn_width.contains(gated_index);
        let learn_d = collapsible && self.learn_depth.contains(gated_index);
        GateParams {
            w: vec![if learn_w { self.gate_w0 } else { 1.0 }; width],
            d: if learn_d { self.gate_d0 } else { 0.0 },
            learn_w,
            learn_d,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LENET: &str = "conv:20x5x5 pool:2 conv:50x5x5 pool:2 fc:500 out:10";

    #[test]
    fn parses_lenet() {
        let spec = ArchSpec::parse(LENET).unwrap();
        assert_eq!(spec.phi(), vec![20, 50, 500, 10]);
        assert_eq!(spec.to_string(), LENET);
    }

    #[test]
    fn repetition_with_variable() {
        let t = "conv:20x5x5 pool:2 conv:50x5x5 pool:2 (fc:75)*n out:10";
        let spec = ArchSpec::parse_with(t, &[("n", 3)]).unwrap();
        assert_eq!(spec.phi(), vec![20, 50, 75, 75, 75, 10]);
        assert!(ArchSpec::parse(t).is_err());
        let nested = ArchSpec::parse("((fc:4 fc:3)*2)*2 out:2").unwrap();
        assert_eq!(nested.phi(), vec![4, 3, 4, 3, 4, 3, 4, 3, 2]);
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "",
            "fc:10",
            "out:10 fc:3",
            "fc:x out:2",
            "conv:3x3 out:2",
            "(fc:3 out:2",
            "fc:3) out:2",
            "fc:3 * 2 out:2",
            "pool:1 out:2",
            "bogus:3 out:2",
            "out:2 out:2",
        ] {
            assert!(ArchSpec::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn builds_lenet_with_gates() {
        let spec = ArchSpec::parse(LENET).unwrap();
        let mut rng = SeededRng::new(1);
        let net = spec.build([1, 28, 28], &InitConfig::default(), &mut rng).unwrap();
        assert_eq!(net.layers().len(), 6);
        let gates: Vec<_> = net.gates().map(|(i, g)| (i, g.width(), g.learn_d, g.d)).collect();
        // conv layers are followed by pooling, so only fc:500 may learn depth
        assert_eq!(gates, vec![(0, 20, false, 0.0), (2, 50, false, 0.0), (4, 500, true, 0.5)]);
        assert!(net.is_collapsible(4) && !net.is_collapsible(0) && !net.is_collapsible(5));
        let b = WeightInit::HeUniform.bound(25);
        if let Layer::Conv(c) = &net.layers()[0] {
            assert!(c.kernels.data().iter().all(|v| v.abs() <= b));
        }
    }

    #[test]
    fn plain_init_freezes_gates() {
        let spec = ArchSpec::parse("fc:8 fc:8 out:2").unwrap();
        let net = spec.build([1, 1, 4], &InitConfig::plain(), &mut SeededRng::new(0)).unwrap();
        for (_, g) in net.gates() {
            assert!(!g.learn_w && !g.learn_d && g.d == 0.0 && g.w.iter().all(|&w| w == 1.0));
        }
    }

    #[test]
    fn input_too_small_for_kernel() {
        let spec = ArchSpec::parse("conv:2x5x5 out:2").unwrap();
        assert!(spec.build([1, 4, 4], &InitConfig::default(), &mut SeededRng::new(0)).is_err());
    }
}
