//! Gradient descent with Nesterov momentum and the separate position rule.
//!
//! Weights and bias take the usual decayed Nesterov step:
//!
//! ```text
//! g' = g + weight_decay * p
//! v  = momentum * v + g'
//! p  = p - lr * (g' + momentum * v)
//! ```
//!
//! Positions never see weight decay, use their own fixed learning rate, are
//! frozen during warm-up, and by default take plain steps on the
//! (optionally L2-normalized) position gradient. Normalizing makes the
//! position learning rate an absolute per-step displacement in pixels.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::layer::AcuLayer;
use crate::train::config::{lr_at, PositionGradNorm, TrainConfig};
use crate::train::network::{join_path, Layer, LayerGrads, NamedLayer, NetGrads, ToyNetwork};

/// Per-parameter velocity buffers, keyed by parameter path.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    velocity: HashMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new() -> OptimizerState {
        OptimizerState::default()
    }

    fn buffer(&mut self, key: &str, len: usize) -> &mut Vec<f64> {
        self.velocity
            .entry(key.to_string())
            .or_insert_with(|| vec![0.0; len])
    }
}

/// Applies one optimizer step in place.
pub fn sgd_step(
    net: &mut ToyNetwork,
    grads: &NetGrads,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<()> {
    if iter >= cfg.total_iters {
        return Err(Error::InvalidArgument(format!(
            "iteration {iter} is outside the configured run of {}",
            cfg.total_iters
        )));
    }
    check_finite(&net.layers, &grads.items, "")?;
    let lr = lr_at(cfg, iter);
    step_seq(&mut net.layers, &grads.items, state, cfg, iter, lr, "")
}

fn check_finite(layers: &[NamedLayer], grads: &[LayerGrads], prefix: &str) -> Result<()> {
    for (nl, g) in layers.iter().zip(grads) {
        let path = join_path(prefix, &nl.name);
        match g {
            LayerGrads::None => {}
            LayerGrads::Conv { d_weights, d_bias } | LayerGrads::Dense { d_weights, d_bias } => {
                ensure_finite(&format!("{path}.weights"), d_weights.as_slice())?;
                ensure_finite(&format!("{path}.bias"), d_bias)?;
            }
            LayerGrads::Acu {
                d_weights,
                d_bias,
                d_positions,
            } => {
                ensure_finite(&format!("{path}.weights"), d_weights.as_slice())?;
                ensure_finite(&format!("{path}.bias"), d_bias)?;
                for set in d_positions {
                    for &(a, b) in set {
                        if !a.is_finite() || !b.is_finite() {
                            return Err(Error::NonFiniteGradient(format!("{path}.positions")));
                        }
                    }
                }
            }
            LayerGrads::Residual(inner) => {
                if let Layer::Residual(body) = &nl.layer {
                    check_finite(body, inner, &path)?;
                }
            }
        }
    }
    Ok(())
}

fn ensure_finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn step_seq(
    layers: &mut [NamedLayer],
    grads: &[LayerGrads],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    iter: usize,
    lr: f64,
    prefix: &str,
) -> Result<()> {
    if layers.len() != grads.len() {
        return Err(Error::InvalidArgument(
            "gradient list does not match the network".into(),
        ));
    }
    for (nl, g) in layers.iter_mut().zip(grads) {
        let path = join_path(prefix, &nl.name);
        match (&mut nl.layer, g) {
            (Layer::Conv(c), LayerGrads::Conv { d_weights, d_bias }) => {
                decayed_step(
                    state.buffer(&format!("{path}.weights"), d_weights.numel()),
                    c.weights.as_mut_slice(),
                    d_weights.as_slice(),
                    cfg,
                    lr,
                );
                decayed_step(
                    state.buffer(&format!("{path}.bias"), d_bias.len()),
                    &mut c.bias,
                    d_bias,
                    cfg,
                    lr,
                );
            }
            (Layer::Dense(d), LayerGrads::Dense { d_weights, d_bias }) => {
                decayed_step(
                    state.buffer(&format!("{path}.weights"), d_weights.numel()),
                    d.weights.as_mut_slice(),
                    d_weights.as_slice(),
                    cfg,
                    lr,
                );
                decayed_step(
                    state.buffer(&format!("{path}.bias"), d_bias.len()),
                    &mut d.bias,
                    d_bias,
                    cfg,
                    lr,
                );
            }
            (
                Layer::Acu(a),
                LayerGrads::Acu {
                    d_weights,
                    d_bias,
                    d_positions,
                },
            ) => {
                decayed_step(
                    state.buffer(&format!("{path}.weights"), d_weights.numel()),
                    a.weights.as_mut_slice(),
                    d_weights.as_slice(),
                    cfg,
                    lr,
                );
                decayed_step(
                    state.buffer(&format!("{path}.bias"), d_bias.len()),
                    &mut a.bias,
                    d_bias,
                    cfg,
                    lr,
                );
                if iter >= cfg.warmup_iters {
                    position_step(a, d_positions, state, cfg, &path);
                }
            }
            (Layer::Residual(body), LayerGrads::Residual(inner)) => {
                step_seq(body, inner, state, cfg, iter, lr, &path)?;
            }
            (Layer::Relu, LayerGrads::None) | (Layer::GlobalAvgPool, LayerGrads::None) => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "gradient kind does not match layer `{path}`"
                )))
            }
        }
    }
    Ok(())
}

fn decayed_step(velocity: &mut [f64], params: &mut [f64], grads: &[f64], cfg: &TrainConfig, lr: f64) {
    let mu = cfg.momentum;
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity) {
        let g = g + cfg.weight_decay * *p;
        *v = mu * *v + g;
        *p -= lr * (g + mu * *v);
    }
}

fn position_step(
    layer: &mut AcuLayer,
    d_positions: &[Vec<(f64, f64)>],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    path: &str,
) {
    // flatten to (alpha, beta) pairs in set-major order
    let mut flat: Vec<f64> = d_positions
        .iter()
        .flat_map(|set| set.iter().flat_map(|&(a, b)| [a, b]))
        .collect();
    if flat.is_empty() {
        return;
    }
    match cfg.position_grad_norm {
        PositionGradNorm::L2Layer => {
            let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in &mut flat {
                    *v /= norm;
                }
            }
        }
        PositionGradNorm::L2Synapse => {
            for pair in flat.chunks_mut(2) {
                let norm = (pair[0] * pair[0] + pair[1] * pair[1]).sqrt();
                if norm > 0.0 {
                    pair[0] /= norm;
                    pair[1] /= norm;
                }
            }
        }
        PositionGradNorm::None => {}
    }
    let step: Vec<f64> = if cfg.position_momentum {
        let velocity = state.buffer(&format!("{path}.positions"), flat.len());
        flat.iter()
            .zip(velocity.iter_mut())
            .map(|(&g, v)| {
                *v = cfg.momentum * *v + g;
                g + cfg.momentum * *v
            })
            .collect()
    } else {
        flat
    };
    let first_free = layer.positions.first_free();
    let free = layer.positions.free_per_group();
    for set in 0..layer.position_sets() {
        for j in 0..free {
            let at = (set * free + j) * 2;
            layer.positions.nudge(
                set,
                first_free + j,
                -cfg.position_lr * step[at],
                -cfg.position_lr * step[at + 1],
            );
        }
    }
    if let Some(bound) = cfg.position_clamp {
        layer.positions.clamp(bound);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::geometry::ConvGeometry;
    use crate::ops::layer::GroupMode;
    use crate::ops::positions::PositionSet;
    use crate::tensor::Tensor4;
    use crate::train::network::DenseLayer;

    fn scalar_net(w: f64) -> ToyNetwork {
        let dense = DenseLayer::new(Tensor4::filled(1, 1, 1, 1, w), vec![0.0]).unwrap();
        ToyNetwork::new(vec![NamedLayer::new("w", Layer::Dense(dense))])
    }

    fn scalar_weight(net: &ToyNetwork) -> f64 {
        if let Layer::Dense(d) = &net.layers[0].layer {
            d.weights.get(0, 0, 0, 0)
        } else {
            unreachable!()
        }
    }

    fn dense_grads(dw: f64, db: f64) -> NetGrads {
        NetGrads {
            items: vec![LayerGrads::Dense {
                d_weights: Tensor4::filled(1, 1, 1, 1, dw),
                d_bias: vec![db],
            }],
        }
    }

    #[test]
    fn zero_gradients_and_zero_decay_are_a_fixed_point() {
        let mut net = scalar_net(0.7);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            total_iters: 10,
            ..TrainConfig::default()
        };
        let mut state = OptimizerState::new();
        sgd_step(&mut net, &dense_grads(0.0, 0.0), &mut state, &cfg, 0).unwrap();
        assert_eq!(scalar_weight(&net), 0.7);
    }

    #[test]
    fn quadratic_loss_contracts_by_point_eight() {
        // L = w^2, lr = 0.1, no momentum, no decay: w <- w - 0.1 * 2w = 0.8 w.
        let mut net = scalar_net(1.0);
        let cfg = TrainConfig {
            base_lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            total_iters: 10,
            ..TrainConfig::default()
        };
        let mut state = OptimizerState::new();
        let mut w = 1.0;
        for iter in 0..3 {
            let g = dense_grads(2.0 * w, 0.0);
            sgd_step(&mut net, &g, &mut state, &cfg, iter).unwrap();
            w = scalar_weight(&net);
        }
        assert!((w - 0.8f64.powi(3)).abs() < 1e-15);
    }

    fn acu_net() -> ToyNetwork {
        let layer = AcuLayer::new(
            ConvGeometry::simple(1, 1, 1).unwrap(),
            Tensor4::filled(1, 1, 1, 2, 1.0),
            vec![0.0],
            PositionSet::new(1, 2, vec![(0.0, 0.0), (0.5, 0.5)]).unwrap(),
            GroupMode::Multi,
        )
        .unwrap();
        ToyNetwork::new(vec![NamedLayer::new("acu", Layer::Acu(layer))])
    }

    fn acu_positions(net: &ToyNetwork) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        net.visit_acu(&mut |_, a| {
            for (_, _, al, be) in a.positions.iter() {
                out.push((al, be));
            }
        });
        out
    }

    fn acu_grads(dw: f64, dpos: (f64, f64)) -> NetGrads {
        NetGrads {
            items: vec![LayerGrads::Acu {
                d_weights: Tensor4::filled(1, 1, 1, 2, dw),
                d_bias: vec![0.0],
                d_positions: vec![vec![dpos]],
            }],
        }
    }

    #[test]
    fn warmup_freezes_positions_but_not_weights() {
        let mut net = acu_net();
        let before = acu_positions(&net);
        let cfg = TrainConfig {
            warmup_iters: 10,
            weight_decay: 0.0,
            total_iters: 20,
            ..TrainConfig::default()
        };
        let mut state = OptimizerState::new();
        sgd_step(&mut net, &acu_grads(1.0, (3.0, -1.0)), &mut state, &cfg, 5).unwrap();
        assert_eq!(acu_positions(&net), before);
        let mut w = 0.0;
        net.visit_acu(&mut |_, a| w = a.weights.get(0, 0, 0, 0));
        assert!(w < 1.0);

        // past warm-up the same gradient moves the free synapse
        sgd_step(&mut net, &acu_grads(0.0, (3.0, -1.0)), &mut state, &cfg, 10).unwrap();
        let after = acu_positions(&net);
        assert_eq!(after[0], (0.0, 0.0));
        assert_ne!(after[1], before[1]);
    }

    #[test]
    fn normalized_position_step_has_fixed_length() {
        let mut net = acu_net();
        let cfg = TrainConfig {
            position_lr: 0.01,
            weight_decay: 0.0,
            total_iters: 10,
            ..TrainConfig::default()
        };
        let mut state = OptimizerState::new();
        sgd_step(&mut net, &acu_grads(0.0, (30.0, 40.0)), &mut state, &cfg, 0).unwrap();
        let after = acu_positions(&net);
        let (da, db) = (after[1].0 - 0.5, after[1].1 - 0.5);
        let len = (da * da + db * db).sqrt();
        assert!((len - 0.01).abs() < 1e-12, "step length {len}");
        // direction follows the negative gradient
        assert!(da < 0.0 && db < 0.0);
    }

    #[test]
    fn decay_shrinks_weights_but_never_positions() {
        let mut net = acu_net();
        let cfg = TrainConfig {
            base_lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.5,
            total_iters: 100,
            ..TrainConfig::default()
        };
        let mut state = OptimizerState::new();
        let before = acu_positions(&net);
        let mut w_prev = 1.0;
        for iter in 0..5 {
            sgd_step(&mut net, &acu_grads(0.0, (0.0, 0.0)), &mut state, &cfg, iter).unwrap();
            let mut w = 0.0;
            net.visit_acu(&mut |_, a| w = a.weights.get(0, 0, 0, 0));
            assert!((w - w_prev * 0.95).abs() < 1e-12, "geometric shrink broken");
            w_prev = w;
        }
        assert_eq!(acu_positions(&net), before);
    }

    #[test]
    fn non_finite_gradients_abort_with_the_parameter_name() {
        let mut net = acu_net();
        let cfg = TrainConfig {
            total_iters: 10,
            ..TrainConfig::default()
        };
        let mut state = OptimizerState::new();
        let err = sgd_step(
            &mut net,
            &acu_grads(f64::NAN, (0.0, 0.0)),
            &mut state,
            &cfg,
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("acu.weights"), "{err}");
    }

    #[test]
    fn position_clamp_bounds_offsets() {
        let mut net = acu_net();
        let cfg = TrainConfig {
            position_lr: 10.0,
            position_grad_norm: PositionGradNorm::None,
            position_clamp: Some(2.0),
            weight_decay: 0.0,
            total_iters: 10,
            ..TrainConfig::default()
        };
        let mut state = OptimizerState::new();
        sgd_step(&mut net, &acu_grads(0.0, (-5.0, 5.0)), &mut state, &cfg, 0).unwrap();
        let after = acu_positions(&net);
        assert_eq!(after[1], (2.0, -2.0));
    }
}
