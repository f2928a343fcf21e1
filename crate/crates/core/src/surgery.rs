//! Turning a trained gated network into a smaller plain one.
//!
//! Width pruning deletes units whose binarized width gate is 0 together with
//! the matching inputs of the next parametric layer. Depth collapse merges a
//! dense layer whose binarized depth gate is 1 (so it is linear) into the
//! following dense layer. Both preserve the network function. SVD compression
//! is the low-rank baseline for comparison.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::nn::{BinaryGates, Conv2dLayer, DenseLayer, GateParams, Layer, Network};
use crate::svd::svd_truncate;
use crate::{Error, Result, SeededRng, Tensor};

/// Which transformations to apply. Collapse indices refer to layer positions
/// in the network handed to [`apply_plan`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurgeryPlan {
    pub prune: bool,
    pub collapse_layers: Vec<usize>,
}

/// Per gated layer: soft width `h = Σ w` and the binarized depth gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerGateSummary {
    pub layer: usize,
    pub h: f64,
    pub linear: bool,
}

/// Before/after summary of a surgery run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchReport {
    pub phi_before: Vec<usize>,
    pub phi_after: Vec<usize>,
    pub params_before: usize,
    pub params_after: usize,
    pub collapsed_layers: Vec<usize>,
    pub acc_before: Option<f64>,
    pub acc_after: Option<f64>,
    #[serde(default)]
    pub gates: Vec<LayerGateSummary>,
}

impl ArchReport {
    pub fn new(before: &Network, after: &Network, collapsed_layers: Vec<usize>) -> Result<Self> {
        let gates = before
            .gates()
            .map(|(layer, g)| Ok(LayerGateSummary { layer, h: g.w.iter().sum(), linear: g.binarized()?.d }))
            .collect::<Result<_>>()?;
        Ok(Self {
            phi_before: architecture_of(before),
            phi_after: architecture_of(after),
            params_before: param_count(before),
            params_after: param_count(after),
            collapsed_layers,
            acc_before: None,
            acc_after: None,
            gates,
        })
    }
}

/// Output width of every parametric layer (filters or neurons), output included.
pub fn architecture_of(net: &Network) -> Vec<usize> {
    net.layers().iter().filter_map(Layer::width).collect()
}

/// Weights plus biases over all layers.
pub fn param_count(net: &Network) -> usize {
    layers_param_count(net.layers())
}

pub fn layers_param_count(layers: &[Layer]) -> usize {
    layers.iter().map(Layer::param_count).sum()
}

/// Layers that [`collapse_depth`] would accept.
pub fn eligible_collapse_layers(net: &Network) -> Vec<usize> {
    net.gates().filter(|&(i, g)| net.is_collapsible(i) && g.binarized().is_ok_and(|b| b.d)).map(|(i, _)| i).collect()
}

/// Removes every unit whose width gate binarizes to 0, along with its inputs
/// to the next parametric layer. Surviving units keep their gate values, so
/// the pruned network computes exactly what the gated one does.
pub fn prune_widths(net: &Network) -> Result<Network> {
    let layers = net.layers();
    let shapes = net.output_shapes();
    let mut keep: Vec<Option<Vec<bool>>> = vec![None; layers.len()];
    for (i, g) in net.gates() {
        let BinaryGates { w, .. } = g.binarized()?;
        if !w.iter().any(|&k| k) {
            return Err(Error::LayerAnnihilated { layer: i });
        }
        if w.iter().any(|&k| !k) {
            keep[i] = Some(w);
        }
    }

    let mut out = Vec::with_capacity(layers.len());
    // mask of the most recent parametric layer's units, if any were dropped
    let mut incoming: Option<&Vec<bool>> = None;
    for (i, layer) in layers.iter().enumerate() {
        let rows = keep[i].as_ref();
        let new = match layer {
            Layer::Pool(p) => Layer::Pool(*p),
            Layer::Dense(l) => {
                let in_shape = if i == 0 { net.input_shape() } else { shapes[i - 1] };
                let spatial = in_shape[1] * in_shape[2];
                let cols: Option<Vec<bool>> =
                    incoming.map(|m| m.iter().flat_map(|&k| core::iter::repeat_n(k, spatial)).collect());
                let w = select(&l.weights, rows, cols.as_deref())?;
                let bias = l.bias.as_ref().map(|b| pick(b, rows));
                let gate = l.gate.as_ref().map(|g| prune_gate(g, rows));
                Layer::Dense(DenseLayer::new(w, bias, gate)?)
            }
            Layer::Conv(l) => {
                let [f, c, kh, kw] = [l.filters(), l.in_channels(), l.kernel_size().0, l.kernel_size().1];
                let m = Tensor::new(vec![f, c * kh * kw], l.kernels.data().to_vec())?;
                let cols: Option<Vec<bool>> =
                    incoming.map(|m| m.iter().flat_map(|&k| core::iter::repeat_n(k, kh * kw)).collect());
                let k = select(&m, rows, cols.as_deref())?;
                let (nf, nc) = (k.rows(), k.cols() / (kh * kw));
                let kernels = k.reshape(vec![nf, nc, kh, kw])?;
                let gate = l.gate.as_ref().map(|g| prune_gate(g, rows));
                let mut conv = Conv2dLayer::new(kernels, pick(&l.bias, rows), gate)?;
                conv.stride = l.stride;
                Layer::Conv(conv)
            }
        };
        if layer.is_parametric() {
            incoming = rows;
        }
        out.push(new);
    }
    Network::new(net.input_shape(), out)
}

fn pick(v: &[f64], mask: Option<&Vec<bool>>) -> Vec<f64> {
    match mask {
        Some(m) => v.iter().zip(m).filter(|(_, &k)| k).map(|(x, _)| *x).collect(),
        None => v.to_vec(),
    }
}

fn prune_gate(g: &GateParams, mask: Option<&Vec<bool>>) -> GateParams {
    GateParams { w: pick(&g.w, mask), ..g.clone() }
}

/// Sub-matrix of the kept rows and columns.
fn select(m: &Tensor, rows: Option<&Vec<bool>>, cols: Option<&[bool]>) -> Result<Tensor> {
    let (r, c) = (m.rows(), m.cols());
    if let Some(cm) = cols {
        if cm.len() != c {
            return Err(Error::Dimension { op: "prune columns", left: m.shape().to_vec(), right: vec![cm.len()] });
        }
    }
    let kr: Vec<usize> = (0..r).filter(|&i| rows.is_none_or(|m| m[i])).collect();
    let kc: Vec<usize> = (0..c).filter(|&j| cols.is_none_or(|m| m[j])).collect();
    let mut data = Vec::with_capacity(kr.len() * kc.len());
    for &i in &kr {
        let row = m.row(i);
        data.extend(kc.iter().map(|&j| row[j]));
    }
    Tensor::new(vec![kr.len(), kc.len()], data)
}

/// Merges each planned linear dense layer into its dense successor:
/// `W' = W_{i+1}·diag(w'_i)·W_i`, `b' = W_{i+1}·diag(w'_i)·b_i + b_{i+1}`.
/// The merged layer keeps the successor's gate.
pub fn collapse_depth(net: &Network, plan: &SurgeryPlan) -> Result<Network> {
    let mut targets = plan.collapse_layers.clone();
    targets.sort_unstable();
    targets.dedup();
    for &i in &targets {
        if !net.is_collapsible(i) {
            return Err(Error::Plan(format!("layer {i} is not a gated dense layer followed by a dense layer")));
        }
        let g = net.layers()[i].gate().expect("collapsible layers are gated").binarized()?;
        if !g.d {
            return Err(Error::Plan(format!("layer {i} is not linear (d' = 0)")));
        }
    }
    let mut layers: Vec<Layer> = net.layers().to_vec();
    // descending, so earlier indices stay valid as layers disappear
    for &i in targets.iter().rev() {
        let (Layer::Dense(a), Layer::Dense(b)) = (&layers[i], &layers[i + 1]) else {
            return Err(Error::Plan(format!("layer {i} cannot be merged")));
        };
        let w_gate = a.gate.as_ref().expect("checked").binarized()?.w;
        let (h, o) = (a.out_features(), b.out_features());
        let mut scaled = b.weights.clone();
        for r in 0..o {
            for (j, &on) in w_gate.iter().enumerate() {
                if !on {
                    scaled.data_mut()[r * h + j] = 0.0;
                }
            }
        }
        let weights = scaled.matmul(&a.weights)?;
        let bias = match (&a.bias, &b.bias) {
            (None, None) => None,
            (ab, bb) => {
                let mut out = bb.clone().unwrap_or_else(|| vec![0.0; o]);
                if let Some(ab) = ab {
                    for (r, o) in out.iter_mut().enumerate() {
                        *o += scaled.row(r).iter().zip(ab).map(|(w, b)| w * b).sum::<f64>();
                    }
                }
                Some(out)
            }
        };
        let merged = DenseLayer::new(weights, bias, b.gate.clone())?;
        layers.splice(i..i + 2, [Layer::Dense(merged)]);
    }
    Network::new(net.input_shape(), layers)
}

/// Prune (if requested), then collapse. Pruning never changes layer
/// positions, so the collapse indices refer to the input network.
pub fn apply_plan(net: &Network, plan: &SurgeryPlan) -> Result<Network> {
    let pruned = if plan.prune { prune_widths(net)? } else { net.clone() };
    if plan.collapse_layers.is_empty() {
        Ok(pruned)
    } else {
        collapse_depth(&pruned, plan)
    }
}

/// Replaces dense layer `index` (`W: out×in`) by two dense layers: first
/// `B = diag(s_k)·V_kᵀ` (`k×in`, no bias, no gate), then `U_k` (`out×k`)
/// carrying the original bias and gate.
pub fn compress_svd(net: &Network, index: usize, rank: usize) -> Result<Network> {
    let Some(Layer::Dense(l)) = net.layers().get(index) else {
        return Err(Error::Plan(format!("layer {index} is not a dense layer")));
    };
    let (out, inp) = (l.out_features(), l.in_features());
    if rank == 0 || rank > out.min(inp) {
        return Err(Error::Rank { rank, max: out.min(inp) });
    }
    let svd = svd_truncate(&l.weights, rank)?;
    let mut b = vec![0.0; rank * inp];
    for r in 0..rank {
        for c in 0..inp {
            b[r * inp + c] = svd.s[r] * svd.v.at(c, r);
        }
    }
    let first = DenseLayer::new(Tensor::new(vec![rank, inp], b)?, None, None)?;
    let second = DenseLayer::new(svd.u.clone(), l.bias.clone(), l.gate.clone())?;
    let mut layers = net.layers().to_vec();
    layers.splice(index..index + 1, [Layer::Dense(first), Layer::Dense(second)]);
    Network::new(net.input_shape(), layers)
}

/// Result of [`equivalence_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equivalence {
    pub max_deviation: f64,
    pub passed: bool,
}

/// Feeds `probes` seeded uniform `[0, 1)` inputs through both networks and
/// reports the largest absolute logit difference.
pub fn equivalence_check(a: &Network, b: &Network, probes: usize, seed: u64, tol: f64) -> Result<Equivalence> {
    if a.input_shape() != b.input_shape() || a.classes() != b.classes() {
        return Err(Error::Dimension {
            op: "equivalence check",
            left: [a.input_shape().as_slice(), &[a.classes()]].concat(),
            right: [b.input_shape().as_slice(), &[b.classes()]].concat(),
        });
    }
    const CHUNK: usize = 250;
    let mut rng = SeededRng::new(seed);
    let [c, h, w] = a.input_shape();
    let mut max_deviation: f64 = 0.0;
    let mut done = 0;
    while done < probes {
        let n = CHUNK.min(probes - done);
        let x = Tensor::new(vec![n, c, h, w], rng.uniform_vec(n * c * h * w))?;
        let d = a.logits(&x)?.max_abs_diff(&b.logits(&x)?)?;
        max_deviation = if d.is_nan() { f64::NAN } else { max_deviation.max(d) };
        done += n;
    }
    Ok(Equivalence { max_deviation, passed: max_deviation <= tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchSpec, InitConfig};

    #[test]
    fn lenet_param_count() {
        let spec = ArchSpec::parse("conv:20x5x5 pool:2 conv:50x5x5 pool:2 fc:500 out:10").unwrap();
        let net = spec.build([1, 28, 28], &InitConfig::default(), &mut SeededRng::new(0)).unwrap();
        // 20·25+20, 50·20·25+50, 500·800+500, 10·500+10
        assert_eq!(param_count(&net), 520 + 25_050 + 400_500 + 5_010);
        assert_eq!(param_count(&net), 431_080);
        assert_eq!(architecture_of(&net), vec![20, 50, 500, 10]);
    }

    #[test]
    fn small_counts() {
        let l = DenseLayer::new(Tensor::zeros(&[3, 2]), Some(vec![0.0; 3]), None).unwrap();
        assert_eq!(layers_param_count(&[Layer::Dense(l)]), 9);
        assert_eq!(layers_param_count(&[]), 0);
    }

    #[test]
    fn annihilated_layer_is_an_error() {
        let spec = ArchSpec::parse("fc:3 out:2").unwrap();
        let mut net = spec.build([1, 1, 4], &InitConfig::default(), &mut SeededRng::new(0)).unwrap();
        net.layers_mut()[0].gate_mut().unwrap().w = vec![0.1, 0.2, 0.4];
        assert_eq!(prune_widths(&net).unwrap_err(), Error::LayerAnnihilated { layer: 0 });
    }

    #[test]
    fn plan_rejects_nonlinear_and_conv() {
        let spec = ArchSpec::parse("conv:2x3x3 fc:3 fc:3 out:2").unwrap();
        let mut net = spec.build([1, 5, 5], &InitConfig::default(), &mut SeededRng::new(0)).unwrap();
        net.layers_mut()[1].gate_mut().unwrap().d = 0.2;
        net.layers_mut()[2].gate_mut().unwrap().d = 0.2;
        let plan = |v: Vec<usize>| SurgeryPlan { prune: false, collapse_layers: v };
        assert!(matches!(collapse_depth(&net, &plan(vec![1])), Err(Error::Plan(_))));
        assert!(matches!(collapse_depth(&net, &plan(vec![0])), Err(Error::Plan(_))));
        assert!(matches!(collapse_depth(&net, &plan(vec![3])), Err(Error::Plan(_))));
        net.layers_mut()[1].gate_mut().unwrap().d = 0.9;
        assert_eq!(eligible_collapse_layers(&net), vec![1]);
        assert_eq!(collapse_depth(&net, &plan(vec![1])).unwrap().layers().len(), 3);
    }

    #[test]
    fn svd_rank_bounds() {
        let spec = ArchSpec::parse("fc:6 out:3").unwrap();
        let net = spec.build([1, 1, 4], &InitConfig::default(), &mut SeededRng::new(0)).unwrap();
        assert_eq!(compress_svd(&net, 0, 5).unwrap_err(), Error::Rank { rank: 5, max: 4 });
        assert!(compress_svd(&net, 0, 0).is_err());
        let c = compress_svd(&net, 0, 4).unwrap();
        assert_eq!(architecture_of(&c), vec![4, 6, 3]);
        assert!(equivalence_check(&net, &c, 200, 1, 1e-9).unwrap().passed);
    }

    #[test]
    fn self_equivalence_is_exact() {
        let spec = ArchSpec::parse("fc:6 out:3").unwrap();
        let net = spec.build([1, 1, 4], &InitConfig::default(), &mut SeededRng::new(0)).unwrap();
        assert_eq!(equivalence_check(&net, &net, 100, 3, 0.0).unwrap().max_deviation, 0.0);
        let other = ArchSpec::parse("fc:6 out:2")
            .unwrap()
            .build([1, 1, 4], &InitConfig::default(), &mut SeededRng::new(0))
            .unwrap();
        assert!(equivalence_check(&net, &other, 10, 3, 0.0).is_err());
    }
}
