//! Small trainable networks assembled from a fixed layer vocabulary.
//!
//! Layers chain on `Tensor4` activations. Residual blocks use an identity
//! shortcut, so the body must preserve the activation shape. The forward
//! pass can record each layer's input, which is all the state backward
//! needs.

use crate::error::{Error, Result};
use crate::ops::backward::acu_backward;
use crate::ops::forward::acu_forward;
use crate::ops::layer::AcuLayer;
use crate::ops::naive::ConvLayer;
use crate::tensor::Tensor4;

/// Fully-connected layer over the flattened `(c, h, w)` activation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `(out_features, in_features, 1, 1)`.
    pub weights: Tensor4,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weights: Tensor4, bias: Vec<f64>) -> Result<DenseLayer> {
        let (out, _, h, w) = weights.dims();
        if h != 1 || w != 1 {
            return Err(Error::InvalidArgument(
                "dense weights must have shape (out, in, 1, 1)".into(),
            ));
        }
        if bias.len() != out {
            return Err(Error::InvalidArgument(format!(
                "dense bias length {} does not match out_features {}",
                bias.len(),
                out
            )));
        }
        Ok(DenseLayer { weights, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weights.c()
    }

    pub fn out_features(&self) -> usize {
        self.weights.n()
    }

    fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let (n, c, h, w) = x.dims();
        let in_f = c * h * w;
        if in_f != self.in_features() {
            return Err(Error::InvalidArgument(format!(
                "dense layer expects {} inputs, activation has {in_f}",
                self.in_features()
            )));
        }
        let out_f = self.out_features();
        let mut out = Tensor4::zeros(n, out_f, 1, 1);
        for b in 0..n {
            let xs = &x.as_slice()[b * in_f..(b + 1) * in_f];
            for o in 0..out_f {
                let ws = &self.weights.as_slice()[o * in_f..(o + 1) * in_f];
                let mut acc = self.bias[o];
                for (xv, wv) in xs.iter().zip(ws) {
                    acc += xv * wv;
                }
                out.set(b, o, 0, 0, acc);
            }
        }
        Ok(out)
    }

    fn backward(&self, x: &Tensor4, d_out: &Tensor4) -> (Tensor4, Vec<f64>, Tensor4) {
        let (n, c, h, w) = x.dims();
        let in_f = c * h * w;
        let out_f = self.out_features();
        let mut d_weights = Tensor4::zeros(out_f, in_f, 1, 1);
        let mut d_bias = vec![0.0; out_f];
        let mut d_input = Tensor4::zeros(n, c, h, w);
        for b in 0..n {
            let xs = &x.as_slice()[b * in_f..(b + 1) * in_f];
            for o in 0..out_f {
                let u = d_out.get(b, o, 0, 0);
                d_bias[o] += u;
                if u == 0.0 {
                    continue;
                }
                let ws = &self.weights.as_slice()[o * in_f..(o + 1) * in_f];
                let dw = &mut d_weights.as_mut_slice()[o * in_f..(o + 1) * in_f];
                let dx = &mut d_input.as_mut_slice()[b * in_f..(b + 1) * in_f];
                for i in 0..in_f {
                    dw[i] += u * xs[i];
                    dx[i] += u * ws[i];
                }
            }
        }
        (d_weights, d_bias, d_input)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Acu(AcuLayer),
    Relu,
    GlobalAvgPool,
    Dense(DenseLayer),
    /// Identity-shortcut residual block; the body must preserve shape.
    Residual(Vec<NamedLayer>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedLayer {
    pub name: String,
    pub layer: Layer,
}

impl NamedLayer {
    pub fn new(name: impl Into<String>, layer: Layer) -> NamedLayer {
        NamedLayer {
            name: name.into(),
            layer,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetwork {
    pub layers: Vec<NamedLayer>,
}

/// Recorded inputs of one forward pass, mirroring the layer list.
pub struct Cache {
    items: Vec<CacheItem>,
}

enum CacheItem {
    Plain(Tensor4),
    Residual { input: Tensor4, body: Cache },
}

/// Gradients mirroring the layer list.
#[derive(Debug, Clone)]
pub enum LayerGrads {
    None,
    Conv {
        d_weights: Tensor4,
        d_bias: Vec<f64>,
    },
    Acu {
        d_weights: Tensor4,
        d_bias: Vec<f64>,
        d_positions: Vec<Vec<(f64, f64)>>,
    },
    Dense {
        d_weights: Tensor4,
        d_bias: Vec<f64>,
    },
    Residual(Vec<LayerGrads>),
}

#[derive(Debug, Clone)]
pub struct NetGrads {
    pub items: Vec<LayerGrads>,
}

impl ToyNetwork {
    pub fn new(layers: Vec<NamedLayer>) -> ToyNetwork {
        ToyNetwork { layers }
    }

    /// Inference forward pass.
    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        forward_seq(&self.layers, x, None)
    }

    /// Forward pass that records every layer input for backward.
    pub fn forward_cached(&self, x: &Tensor4) -> Result<(Tensor4, Cache)> {
        let mut cache = Cache { items: Vec::new() };
        let y = forward_seq(&self.layers, x, Some(&mut cache))?;
        Ok((y, cache))
    }

    /// Backpropagates `d_out` through the recorded pass. Returns parameter
    /// gradients and the gradient with respect to the network input.
    pub fn backward(&self, cache: &Cache, d_out: &Tensor4) -> Result<(NetGrads, Tensor4)> {
        let (items, d_in) = backward_seq(&self.layers, cache, d_out)?;
        Ok((NetGrads { items }, d_in))
    }

    /// Walks the layer shapes without running data through them.
    pub fn probe_dims(
        &self,
        input: (usize, usize, usize, usize),
    ) -> Result<(usize, usize, usize, usize)> {
        probe_seq(&self.layers, input)
    }

    /// Total stored trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.param_entries().iter().map(|e| e.count).sum()
    }

    /// Flat registry of every trainable parameter block.
    pub fn param_entries(&self) -> Vec<ParamEntry> {
        let mut out = Vec::new();
        collect_entries(&self.layers, "", &mut out);
        out
    }

    /// Visits every position-based layer with its path name.
    pub fn visit_acu(&self, f: &mut impl FnMut(&str, &AcuLayer)) {
        visit_acu_seq(&self.layers, "", f);
    }

    pub fn visit_acu_mut(&mut self, f: &mut impl FnMut(&str, &mut AcuLayer)) {
        visit_acu_seq_mut(&mut self.layers, "", f);
    }
}

fn forward_seq(
    layers: &[NamedLayer],
    x: &Tensor4,
    mut cache: Option<&mut Cache>,
) -> Result<Tensor4> {
    let mut cur = x.clone();
    for nl in layers {
        let next = match &nl.layer {
            Layer::Conv(conv) => conv.forward(&cur)?,
            Layer::Acu(acu) => acu_forward(&cur, acu)?,
            Layer::Relu => cur.map(|v| if v > 0.0 { v } else { 0.0 }),
            Layer::GlobalAvgPool => global_avg_pool(&cur),
            Layer::Dense(d) => d.forward(&cur)?,
            Layer::Residual(body) => {
                let (out, item) = match cache.as_deref_mut() {
                    Some(_) => {
                        let mut body_cache = Cache { items: Vec::new() };
                        let out = forward_seq(body, &cur, Some(&mut body_cache))?;
                        (
                            out,
                            Some(CacheItem::Residual {
                                input: cur.clone(),
                                body: body_cache,
                            }),
                        )
                    }
                    None => (forward_seq(body, &cur, None)?, None),
                };
                if !out.same_shape(&cur) {
                    return Err(Error::InvalidArgument(format!(
                        "residual block `{}` changes shape {:?} -> {:?}",
                        nl.name,
                        cur.dims(),
                        out.dims()
                    )));
                }
                if let (Some(c), Some(item)) = (cache.as_deref_mut(), item) {
                    c.items.push(item);
                }
                cur = out.add(&cur)?;
                continue;
            }
        };
        if let Some(c) = cache.as_deref_mut() {
            c.items.push(CacheItem::Plain(cur.clone()));
        }
        cur = next;
    }
    Ok(cur)
}

fn backward_seq(
    layers: &[NamedLayer],
    cache: &Cache,
    d_out: &Tensor4,
) -> Result<(Vec<LayerGrads>, Tensor4)> {
    if cache.items.len() != layers.len() {
        return Err(Error::InvalidArgument(
            "forward cache does not match the network".into(),
        ));
    }
    let mut grads = vec![LayerGrads::None; layers.len()];
    let mut d = d_out.clone();
    for (idx, nl) in layers.iter().enumerate().rev() {
        let item = &cache.items[idx];
        let input = match item {
            CacheItem::Plain(t) => t,
            CacheItem::Residual { input, .. } => input,
        };
        let (g, d_in) = match (&nl.layer, item) {
            (Layer::Conv(conv), _) => {
                let (dw, db, dx) = conv.backward(input, &d)?;
                (
                    LayerGrads::Conv {
                        d_weights: dw,
                        d_bias: db,
                    },
                    dx,
                )
            }
            (Layer::Acu(acu), _) => {
                let g = acu_backward(input, acu, &d)?;
                (
                    LayerGrads::Acu {
                        d_weights: g.d_weights,
                        d_bias: g.d_bias,
                        d_positions: g.d_positions,
                    },
                    g.d_input,
                )
            }
            (Layer::Relu, _) => {
                let dx = input.zip_map(&d, |x, u| if x > 0.0 { u } else { 0.0 })?;
                (LayerGrads::None, dx)
            }
            (Layer::GlobalAvgPool, _) => {
                let dx = global_avg_pool_backward(input, &d)?;
                (LayerGrads::None, dx)
            }
            (Layer::Dense(dense), _) => {
                let (dw, db, dx) = dense.backward(input, &d);
                (
                    LayerGrads::Dense {
                        d_weights: dw,
                        d_bias: db,
                    },
                    dx,
                )
            }
            (Layer::Residual(body), CacheItem::Residual { body: body_cache, .. }) => {
                let (inner, d_body_in) = backward_seq(body, body_cache, &d)?;
                // identity shortcut adds the upstream gradient
                (LayerGrads::Residual(inner), d_body_in.add(&d)?)
            }
            (Layer::Residual(_), _) => {
                return Err(Error::InvalidArgument(
                    "cache shape does not match residual block".into(),
                ))
            }
        };
        grads[idx] = g;
        d = d_in;
    }
    Ok((grads, d))
}

fn probe_seq(
    layers: &[NamedLayer],
    mut dims: (usize, usize, usize, usize),
) -> Result<(usize, usize, usize, usize)> {
    for nl in layers {
        dims = match &nl.layer {
            Layer::Conv(conv) => {
                if dims.1 != conv.geometry.in_channels {
                    return Err(Error::InvalidArgument(format!(
                        "layer `{}` expects {} channels, got {}",
                        nl.name, conv.geometry.in_channels, dims.1
                    )));
                }
                let (kh, kw) = conv.kernel_hw();
                let (oh, ow) = conv.geometry.conv_output_hw(dims.2, dims.3, kh, kw)?;
                (dims.0, conv.geometry.out_channels, oh, ow)
            }
            Layer::Acu(acu) => {
                if dims.1 != acu.geometry.in_channels {
                    return Err(Error::InvalidArgument(format!(
                        "layer `{}` expects {} channels, got {}",
                        nl.name, acu.geometry.in_channels, dims.1
                    )));
                }
                let (oh, ow) = acu.geometry.anchor_output_hw(dims.2, dims.3);
                (dims.0, acu.geometry.out_channels, oh, ow)
            }
            Layer::Relu => dims,
            Layer::GlobalAvgPool => (dims.0, dims.1, 1, 1),
            Layer::Dense(d) => {
                if d.in_features() != dims.1 * dims.2 * dims.3 {
                    return Err(Error::InvalidArgument(format!(
                        "layer `{}` expects {} inputs, activation has {}",
                        nl.name,
                        d.in_features(),
                        dims.1 * dims.2 * dims.3
                    )));
                }
                (dims.0, d.out_features(), 1, 1)
            }
            Layer::Residual(body) => {
                let out = probe_seq(body, dims)?;
                if out != dims {
                    return Err(Error::InvalidArgument(format!(
                        "residual block `{}` changes shape {:?} -> {:?}",
                        nl.name, dims, out
                    )));
                }
                dims
            }
        };
    }
    Ok(dims)
}

fn global_avg_pool(x: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = x.dims();
    let mut out = Tensor4::zeros(n, c, 1, 1);
    let inv = 1.0 / (h * w) as f64;
    for b in 0..n {
        for ch in 0..c {
            let base = x.idx(b, ch, 0, 0);
            let sum: f64 = x.as_slice()[base..base + h * w].iter().sum();
            out.set(b, ch, 0, 0, sum * inv);
        }
    }
    out
}

fn global_avg_pool_backward(input: &Tensor4, d_out: &Tensor4) -> Result<Tensor4> {
    let (n, c, h, w) = input.dims();
    if d_out.dims() != (n, c, 1, 1) {
        return Err(Error::InvalidArgument(
            "pool gradient shape mismatch".into(),
        ));
    }
    let inv = 1.0 / (h * w) as f64;
    let mut dx = Tensor4::zeros(n, c, h, w);
    for b in 0..n {
        for ch in 0..c {
            let u = d_out.get(b, ch, 0, 0) * inv;
            let base = dx.idx(b, ch, 0, 0);
            for v in &mut dx.as_mut_slice()[base..base + h * w] {
                *v = u;
            }
        }
    }
    Ok(dx)
}

/// One named parameter block of the registry.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub path: String,
    pub kind: ParamKind,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weights,
    Bias,
    Positions,
}

pub(crate) fn join_path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

fn collect_entries(layers: &[NamedLayer], prefix: &str, out: &mut Vec<ParamEntry>) {
    for nl in layers {
        let path = join_path(prefix, &nl.name);
        match &nl.layer {
            Layer::Conv(c) => {
                out.push(ParamEntry {
                    path: format!("{path}.weights"),
                    kind: ParamKind::Weights,
                    count: c.weights.numel(),
                });
                out.push(ParamEntry {
                    path: format!("{path}.bias"),
                    kind: ParamKind::Bias,
                    count: c.bias.len(),
                });
            }
            Layer::Acu(a) => {
                out.push(ParamEntry {
                    path: format!("{path}.weights"),
                    kind: ParamKind::Weights,
                    count: a.weights.numel(),
                });
                out.push(ParamEntry {
                    path: format!("{path}.bias"),
                    kind: ParamKind::Bias,
                    count: a.bias.len(),
                });
                out.push(ParamEntry {
                    path: format!("{path}.positions"),
                    kind: ParamKind::Positions,
                    count: a.positions.free_parameter_count(),
                });
            }
            Layer::Dense(d) => {
                out.push(ParamEntry {
                    path: format!("{path}.weights"),
                    kind: ParamKind::Weights,
                    count: d.weights.numel(),
                });
                out.push(ParamEntry {
                    path: format!("{path}.bias"),
                    kind: ParamKind::Bias,
                    count: d.bias.len(),
                });
            }
            Layer::Residual(body) => collect_entries(body, &path, out),
            Layer::Relu | Layer::GlobalAvgPool => {}
        }
    }
}

fn visit_acu_seq(layers: &[NamedLayer], prefix: &str, f: &mut impl FnMut(&str, &AcuLayer)) {
    for nl in layers {
        let path = join_path(prefix, &nl.name);
        match &nl.layer {
            Layer::Acu(a) => f(&path, a),
            Layer::Residual(body) => visit_acu_seq(body, &path, f),
            _ => {}
        }
    }
}

fn visit_acu_seq_mut(
    layers: &mut [NamedLayer],
    prefix: &str,
    f: &mut impl FnMut(&str, &mut AcuLayer),
) {
    for nl in layers {
        let path = join_path(prefix, &nl.name);
        match &mut nl.layer {
            Layer::Acu(a) => f(&path, a),
            Layer::Residual(body) => visit_acu_seq_mut(body, &path, f),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::geometry::ConvGeometry;
    use crate::ops::layer::GroupMode;
    use crate::ops::positions::PositionSet;
    use crate::tensor::he_init;

    fn tiny_net(seed: u64) -> ToyNetwork {
        let conv = ConvLayer::new(
            ConvGeometry::new(1, 2, 1, (1, 1), (1, 1)).unwrap(),
            he_init((2, 1, 3, 3), 9, seed).unwrap(),
            vec![0.0; 2],
        )
        .unwrap();
        let acu = AcuLayer::new(
            ConvGeometry::simple(2, 2, 2).unwrap(),
            he_init((2, 1, 1, 2), 2, seed + 1).unwrap(),
            vec![0.0; 2],
            PositionSet::new(
                2,
                2,
                vec![(0.0, 0.0), (0.6, -0.4), (0.0, 0.0), (-0.3, 0.7)],
            )
            .unwrap(),
            GroupMode::Multi,
        )
        .unwrap();
        let dense = DenseLayer::new(
            he_init((3, 2, 1, 1), 2, seed + 2).unwrap(),
            vec![0.0; 3],
        )
        .unwrap();
        ToyNetwork::new(vec![
            NamedLayer::new("conv0", Layer::Conv(conv)),
            NamedLayer::new("block0", Layer::Residual(vec![
                NamedLayer::new("acu0", Layer::Acu(acu)),
                NamedLayer::new("relu0", Layer::Relu),
            ])),
            NamedLayer::new("pool", Layer::GlobalAvgPool),
            NamedLayer::new("fc", Layer::Dense(dense)),
        ])
    }

    #[test]
    fn probe_matches_forward_shapes() {
        let net = tiny_net(100);
        let x = he_init((2, 1, 6, 6), 2, 103).unwrap();
        let probed = net.probe_dims(x.dims()).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.dims(), probed);
        assert_eq!(probed, (2, 3, 1, 1));
    }

    #[test]
    fn registry_enumerates_stored_scalars() {
        let net = tiny_net(101);
        let entries = net.param_entries();
        let paths: Vec<_> = entries.iter().map(|e| e.path.as_str()).collect();
        assert!(paths.contains(&"conv0.weights"));
        assert!(paths.contains(&"block0/acu0.positions"));
        // conv 2*1*3*3 + 2, acu 2*1*1*2 + 2 + 2*1*2, dense 3*2 + 3
        assert_eq!(net.trainable_scalars(), 18 + 2 + 4 + 2 + 4 + 6 + 3);
    }

    #[test]
    fn whole_network_gradient_matches_finite_differences() {
        let net = tiny_net(102);
        let x = he_init((1, 1, 6, 6), 2, 104).unwrap();
        let d_out = he_init((1, 3, 1, 1), 2, 105).unwrap();
        let (_, cache) = net.forward_cached(&x).unwrap();
        let (grads, d_in) = net.backward(&cache, &d_out).unwrap();

        let loss = |n: &ToyNetwork, xx: &Tensor4| -> f64 {
            n.forward(xx)
                .unwrap()
                .as_slice()
                .iter()
                .zip(d_out.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-6;
        let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-8);

        // input gradient, all elements
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            assert!(
                rel(d_in.as_slice()[i], fd) <= 1e-4,
                "input {i}: {} vs {fd}",
                d_in.as_slice()[i]
            );
        }

        // spot-check the conv weight gradient
        if let LayerGrads::Conv { d_weights, .. } = &grads.items[0] {
            let idx = 5;
            let mut np = net.clone();
            let mut nm = net.clone();
            if let Layer::Conv(c) = &mut np.layers[0].layer {
                c.weights.as_mut_slice()[idx] += h;
            }
            if let Layer::Conv(c) = &mut nm.layers[0].layer {
                c.weights.as_mut_slice()[idx] -= h;
            }
            let fd = (loss(&np, &x) - loss(&nm, &x)) / (2.0 * h);
            assert!(rel(d_weights.as_slice()[idx], fd) <= 1e-4);
        } else {
            panic!("expected conv grads at index 0");
        }

        // spot-check a position gradient inside the residual block
        if let LayerGrads::Residual(inner) = &grads.items[1] {
            if let LayerGrads::Acu { d_positions, .. } = &inner[0] {
                let analytic = d_positions[0][0].0;
                let mut np = net.clone();
                let mut nm = net.clone();
                let adjust = |n: &mut ToyNetwork, delta: f64| {
                    n.visit_acu_mut(&mut |_, a| {
                        let (al, be) = a.positions.get(0, 1);
                        a.positions.set(0, 1, al + delta, be).unwrap();
                    });
                };
                adjust(&mut np, h);
                adjust(&mut nm, -h);
                let fd = (loss(&np, &x) - loss(&nm, &x)) / (2.0 * h);
                assert!(rel(analytic, fd) <= 1e-4, "{analytic} vs {fd}");
            } else {
                panic!("expected acu grads inside block");
            }
        } else {
            panic!("expected residual grads at index 1");
        }
    }

    #[test]
    fn residual_requires_shape_preservation() {
        let conv = ConvLayer::new(
            ConvGeometry::simple(1, 2, 1).unwrap(),
            he_init((2, 1, 1, 1), 1, 7).unwrap(),
            vec![0.0; 2],
        )
        .unwrap();
        let net = ToyNetwork::new(vec![NamedLayer::new(
            "bad",
            Layer::Residual(vec![NamedLayer::new("widen", Layer::Conv(conv))]),
        )]);
        assert!(net.probe_dims((1, 1, 4, 4)).is_err());
        let x = Tensor4::zeros(1, 1, 4, 4);
        assert!(net.forward(&x).is_err());
    }
}
