//! JSON network manifests and parameter snapshots.
//!
//! A manifest lists layers in order with their geometry and initializers;
//! tensors referenced by file live in the crate's binary format, with paths
//! resolved relative to the manifest. `save_snapshot` writes a directory
//! holding a manifest whose initializers all point at freshly written
//! tensor files, so `load ∘ save` reproduces every parameter bit-exactly.
//!
//! All He initialization draws from streams derived from one master seed
//! and the parameter path, so a manifest plus a seed pins every value.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::geometry::ConvGeometry;
use crate::ops::layer::{AcuLayer, GroupMode};
use crate::ops::naive::ConvLayer;
use crate::ops::positions::{make_grid_positions, PositionSet};
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::{derive_seed, he_init, Tensor4};
use crate::train::network::{DenseLayer, Layer, NamedLayer, ToyNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkManifest {
    pub input: InputShape,
    pub layers: Vec<LayerManifest>,
}

fn default_groups() -> usize {
    1
}

fn default_stride() -> [usize; 2] {
    [1, 1]
}

fn default_padding() -> [usize; 2] {
    [0, 0]
}

fn default_pin_origin() -> bool {
    true
}

fn default_group_mode() -> GroupMode {
    GroupMode::Multi
}

fn default_dilation() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LayerManifest {
    Acu {
        name: String,
        in_channels: usize,
        out_channels: usize,
        #[serde(default = "default_groups")]
        groups: usize,
        synapses: usize,
        #[serde(default = "default_stride")]
        stride: [usize; 2],
        #[serde(default = "default_padding")]
        padding: [usize; 2],
        #[serde(default = "default_group_mode")]
        group_mode: GroupMode,
        #[serde(default = "default_pin_origin")]
        pin_origin: bool,
        weights: InitSpec,
        #[serde(default)]
        bias: Option<InitSpec>,
        positions: PositionInit,
    },
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        #[serde(default = "default_groups")]
        groups: usize,
        #[serde(default = "default_stride")]
        stride: [usize; 2],
        #[serde(default = "default_padding")]
        padding: [usize; 2],
        weights: InitSpec,
        #[serde(default)]
        bias: Option<InitSpec>,
    },
    Relu {
        #[serde(default)]
        name: Option<String>,
    },
    GlobalAvgPool {
        #[serde(default)]
        name: Option<String>,
    },
    Dense {
        name: String,
        in_features: usize,
        out_features: usize,
        weights: InitSpec,
        #[serde(default)]
        bias: Option<InitSpec>,
    },
    Residual {
        name: String,
        body: Vec<LayerManifest>,
    },
}

/// Weight/bias initializer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "init", rename_all = "kebab-case")]
pub enum InitSpec {
    /// Normal draw at `sqrt(2 / fan_in)`, stream keyed by the parameter path.
    He,
    File { path: String },
    Const { value: f64 },
    Zeros,
}

/// Position initializer. File tensors have shape `(1, sets, synapses, 2)`
/// with `(alpha, beta)` in the last axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "init", rename_all = "kebab-case")]
pub enum PositionInit {
    Grid {
        kh: usize,
        kw: usize,
        #[serde(default = "default_dilation")]
        dilation: usize,
    },
    Zeros,
    File { path: String },
}

pub struct LoadedNetwork {
    pub net: ToyNetwork,
    pub input: InputShape,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<NetworkManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Builds the network a manifest describes. `seed` drives every He draw.
pub fn load_manifest(path: impl AsRef<Path>, seed: u64) -> Result<LoadedNetwork> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    build_network(&manifest, base, seed)
}

/// Builds from an in-memory manifest with `base` as the tensor-file root.
pub fn build_network(
    manifest: &NetworkManifest,
    base: &Path,
    seed: u64,
) -> Result<LoadedNetwork> {
    let mut net = ToyNetwork::new(build_layers(&manifest.layers, base, seed, "")?);
    check_unique_paths(&net)?;
    let dims = (
        1,
        manifest.input.channels,
        manifest.input.height,
        manifest.input.width,
    );
    net.probe_dims(dims)?;
    Ok(LoadedNetwork {
        net,
        input: manifest.input,
    })
}

fn check_unique_paths(net: &ToyNetwork) -> Result<()> {
    let mut paths: Vec<String> = net.param_entries().into_iter().map(|e| e.path).collect();
    paths.sort();
    for pair in paths.windows(2) {
        if pair[0] == pair[1] {
            return Err(Error::Manifest(format!(
                "duplicate parameter path `{}`; layer names must be unique",
                pair[0]
            )));
        }
    }
    Ok(())
}

fn build_layers(
    manifests: &[LayerManifest],
    base: &Path,
    seed: u64,
    prefix: &str,
) -> Result<Vec<NamedLayer>> {
    let mut out = Vec::with_capacity(manifests.len());
    for (idx, lm) in manifests.iter().enumerate() {
        out.push(build_layer(lm, idx, base, seed, prefix)?);
    }
    Ok(out)
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

fn build_layer(
    lm: &LayerManifest,
    idx: usize,
    base: &Path,
    seed: u64,
    prefix: &str,
) -> Result<NamedLayer> {
    match lm {
        LayerManifest::Acu {
            name,
            in_channels,
            out_channels,
            groups,
            synapses,
            stride,
            padding,
            group_mode,
            pin_origin,
            weights,
            bias,
            positions,
        } => {
            let path = join(prefix, name);
            let geometry = ConvGeometry::new(
                *in_channels,
                *out_channels,
                *groups,
                (stride[0], stride[1]),
                (padding[0], padding[1]),
            )
            .map_err(|e| Error::Manifest(format!("layer `{path}`: {e}")))?;
            let k = *synapses;
            let fan_in = geometry.group_in() * k;
            let w = materialize(
                weights,
                (*out_channels, geometry.group_in(), 1, k),
                fan_in,
                base,
                seed,
                &format!("{path}.weights"),
            )?;
            let b = materialize_bias(bias.as_ref(), *out_channels, base, seed, &path)?;
            let sets = match group_mode {
                GroupMode::Multi => *groups,
                GroupMode::Shared => 1,
            };
            let pos = materialize_positions(positions, sets, k, *pin_origin, base, &path)?;
            let layer = AcuLayer::new(geometry, w, b, pos, *group_mode)
                .map_err(|e| Error::Manifest(format!("layer `{path}`: {e}")))?;
            Ok(NamedLayer::new(name.clone(), Layer::Acu(layer)))
        }
        LayerManifest::Conv {
            name,
            in_channels,
            out_channels,
            kernel,
            groups,
            stride,
            padding,
            weights,
            bias,
        } => {
            let path = join(prefix, name);
            let geometry = ConvGeometry::new(
                *in_channels,
                *out_channels,
                *groups,
                (stride[0], stride[1]),
                (padding[0], padding[1]),
            )
            .map_err(|e| Error::Manifest(format!("layer `{path}`: {e}")))?;
            let fan_in = geometry.group_in() * kernel[0] * kernel[1];
            let w = materialize(
                weights,
                (*out_channels, geometry.group_in(), kernel[0], kernel[1]),
                fan_in,
                base,
                seed,
                &format!("{path}.weights"),
            )?;
            let b = materialize_bias(bias.as_ref(), *out_channels, base, seed, &path)?;
            let layer = ConvLayer::new(geometry, w, b)
                .map_err(|e| Error::Manifest(format!("layer `{path}`: {e}")))?;
            Ok(NamedLayer::new(name.clone(), Layer::Conv(layer)))
        }
        LayerManifest::Relu { name } => Ok(NamedLayer::new(
            name.clone().unwrap_or_else(|| format!("relu{idx}")),
            Layer::Relu,
        )),
        LayerManifest::GlobalAvgPool { name } => Ok(NamedLayer::new(
            name.clone().unwrap_or_else(|| format!("pool{idx}")),
            Layer::GlobalAvgPool,
        )),
        LayerManifest::Dense {
            name,
            in_features,
            out_features,
            weights,
            bias,
        } => {
            let path = join(prefix, name);
            let w = materialize(
                weights,
                (*out_features, *in_features, 1, 1),
                *in_features,
                base,
                seed,
                &format!("{path}.weights"),
            )?;
            let b = materialize_bias(bias.as_ref(), *out_features, base, seed, &path)?;
            let layer = DenseLayer::new(w, b)
                .map_err(|e| Error::Manifest(format!("layer `{path}`: {e}")))?;
            Ok(NamedLayer::new(name.clone(), Layer::Dense(layer)))
        }
        LayerManifest::Residual { name, body } => {
            let path = join(prefix, name);
            let inner = build_layers(body, base, seed, &path)?;
            Ok(NamedLayer::new(name.clone(), Layer::Residual(inner)))
        }
    }
}

fn materialize(
    spec: &InitSpec,
    dims: (usize, usize, usize, usize),
    fan_in: usize,
    base: &Path,
    seed: u64,
    path_label: &str,
) -> Result<Tensor4> {
    let t = match spec {
        InitSpec::He => he_init(dims, fan_in, derive_seed(seed, path_label))?,
        InitSpec::Zeros => Tensor4::zeros(dims.0, dims.1, dims.2, dims.3),
        InitSpec::Const { value } => Tensor4::filled(dims.0, dims.1, dims.2, dims.3, *value),
        InitSpec::File { path } => {
            let full = base.join(path);
            let t = read_tensor(&full).map_err(|e| {
                Error::Manifest(format!("parameter `{path_label}`: cannot load {path}: {e}"))
            })?;
            if t.dims() != dims {
                return Err(Error::Manifest(format!(
                    "parameter `{path_label}`: expected dims {dims:?}, found {:?} in {path}",
                    t.dims()
                )));
            }
            t
        }
    };
    Ok(t)
}

fn materialize_bias(
    spec: Option<&InitSpec>,
    len: usize,
    base: &Path,
    seed: u64,
    layer_path: &str,
) -> Result<Vec<f64>> {
    let label = format!("{layer_path}.bias");
    match spec {
        None => Ok(vec![0.0; len]),
        Some(s) => Ok(materialize(s, (1, 1, 1, len), len.max(1), base, seed, &label)?
            .as_slice()
            .to_vec()),
    }
}

fn materialize_positions(
    spec: &PositionInit,
    sets: usize,
    synapses: usize,
    pin_origin: bool,
    base: &Path,
    layer_path: &str,
) -> Result<PositionSet> {
    let built = match spec {
        PositionInit::Grid { kh, kw, dilation } => {
            if kh * kw != synapses {
                return Err(Error::Manifest(format!(
                    "layer `{layer_path}`: grid {kh}x{kw} has {} points but the layer declares {synapses} synapses",
                    kh * kw
                )));
            }
            let grid = make_grid_positions(*kh, *kw, *dilation, sets)
                .map_err(|e| Error::Manifest(format!("layer `{layer_path}`: {e}")))?;
            if pin_origin {
                grid
            } else {
                unpin(&grid)?
            }
        }
        PositionInit::Zeros => PositionSet::zeros(sets, synapses, pin_origin),
        PositionInit::File { path } => {
            let full = base.join(path);
            let t = read_tensor(&full).map_err(|e| {
                Error::Manifest(format!(
                    "layer `{layer_path}`: cannot load positions {path}: {e}"
                ))
            })?;
            if t.dims() != (1, sets, synapses, 2) {
                return Err(Error::Manifest(format!(
                    "layer `{layer_path}`: expected position dims {:?}, found {:?} in {path}",
                    (1, sets, synapses, 2),
                    t.dims()
                )));
            }
            let offsets: Vec<(f64, f64)> = (0..sets)
                .flat_map(|s| (0..synapses).map(move |k| (s, k)))
                .map(|(s, k)| (t.get(0, s, k, 0), t.get(0, s, k, 1)))
                .collect();
            let result = if pin_origin {
                PositionSet::new(sets, synapses, offsets)
            } else {
                PositionSet::new_unpinned(sets, synapses, offsets)
            };
            result.map_err(|e| Error::Manifest(format!("layer `{layer_path}`: {e}")))?
        }
    };
    Ok(built)
}

fn unpin(set: &PositionSet) -> Result<PositionSet> {
    let mut offsets = Vec::with_capacity(set.groups() * set.synapses());
    for g in 0..set.groups() {
        offsets.extend_from_slice(set.group_offsets(g));
    }
    PositionSet::new_unpinned(set.groups(), set.synapses(), offsets)
}

fn positions_to_tensor(set: &PositionSet) -> Tensor4 {
    let mut t = Tensor4::zeros(1, set.groups(), set.synapses(), 2);
    for (g, k, a, b) in set.iter() {
        t.set(0, g, k, 0, a);
        t.set(0, g, k, 1, b);
    }
    t
}

fn bias_to_tensor(bias: &[f64]) -> Tensor4 {
    Tensor4::from_vec(1, 1, 1, bias.len(), bias.to_vec()).expect("bias tensor")
}

fn file_name(path: &str, param: &str) -> String {
    format!("{}.{param}.tnsr", path.replace('/', "__"))
}

/// Writes `dir/manifest.json` plus one tensor file per parameter, such that
/// loading the directory back reproduces the network bit-exactly.
pub fn save_snapshot(net: &ToyNetwork, input: InputShape, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let params = dir.join("params");
    fs::create_dir_all(&params).map_err(|e| Error::io(&params, e))?;
    let layers = snapshot_layers(&net.layers, dir, "")?;
    let manifest = NetworkManifest { input, layers };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads a snapshot directory written by [`save_snapshot`].
pub fn load_snapshot(dir: impl AsRef<Path>) -> Result<LoadedNetwork> {
    // a snapshot references every tensor by file, so the seed is inert
    load_manifest(dir.as_ref().join("manifest.json"), 0)
}

fn snapshot_layers(
    layers: &[NamedLayer],
    dir: &Path,
    prefix: &str,
) -> Result<Vec<LayerManifest>> {
    let mut out = Vec::with_capacity(layers.len());
    for nl in layers {
        let path = join(prefix, &nl.name);
        let manifest = match &nl.layer {
            Layer::Acu(a) => {
                let wfile = file_name(&path, "weights");
                let bfile = file_name(&path, "bias");
                let pfile = file_name(&path, "positions");
                write_tensor(dir.join("params").join(&wfile), &a.weights)?;
                write_tensor(dir.join("params").join(&bfile), &bias_to_tensor(&a.bias))?;
                write_tensor(
                    dir.join("params").join(&pfile),
                    &positions_to_tensor(&a.positions),
                )?;
                LayerManifest::Acu {
                    name: nl.name.clone(),
                    in_channels: a.geometry.in_channels,
                    out_channels: a.geometry.out_channels,
                    groups: a.geometry.groups,
                    synapses: a.synapses(),
                    stride: [a.geometry.stride.0, a.geometry.stride.1],
                    padding: [a.geometry.padding.0, a.geometry.padding.1],
                    group_mode: a.group_mode,
                    pin_origin: a.positions.pin_origin(),
                    weights: InitSpec::File {
                        path: format!("params/{wfile}"),
                    },
                    bias: Some(InitSpec::File {
                        path: format!("params/{bfile}"),
                    }),
                    positions: PositionInit::File {
                        path: format!("params/{pfile}"),
                    },
                }
            }
            Layer::Conv(c) => {
                let wfile = file_name(&path, "weights");
                let bfile = file_name(&path, "bias");
                write_tensor(dir.join("params").join(&wfile), &c.weights)?;
                write_tensor(dir.join("params").join(&bfile), &bias_to_tensor(&c.bias))?;
                let (kh, kw) = c.kernel_hw();
                LayerManifest::Conv {
                    name: nl.name.clone(),
                    in_channels: c.geometry.in_channels,
                    out_channels: c.geometry.out_channels,
                    kernel: [kh, kw],
                    groups: c.geometry.groups,
                    stride: [c.geometry.stride.0, c.geometry.stride.1],
                    padding: [c.geometry.padding.0, c.geometry.padding.1],
                    weights: InitSpec::File {
                        path: format!("params/{wfile}"),
                    },
                    bias: Some(InitSpec::File {
                        path: format!("params/{bfile}"),
                    }),
                }
            }
            Layer::Dense(d) => {
                let wfile = file_name(&path, "weights");
                let bfile = file_name(&path, "bias");
                write_tensor(dir.join("params").join(&wfile), &d.weights)?;
                write_tensor(dir.join("params").join(&bfile), &bias_to_tensor(&d.bias))?;
                LayerManifest::Dense {
                    name: nl.name.clone(),
                    in_features: d.in_features(),
                    out_features: d.out_features(),
                    weights: InitSpec::File {
                        path: format!("params/{wfile}"),
                    },
                    bias: Some(InitSpec::File {
                        path: format!("params/{bfile}"),
                    }),
                }
            }
            Layer::Relu => LayerManifest::Relu {
                name: Some(nl.name.clone()),
            },
            Layer::GlobalAvgPool => LayerManifest::GlobalAvgPool {
                name: Some(nl.name.clone()),
            },
            Layer::Residual(body) => LayerManifest::Residual {
                name: nl.name.clone(),
                body: snapshot_layers(body, dir, &path)?,
            },
        };
        out.push(manifest);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::he_init;

    fn write_json(dir: &Path, name: &str, json: &str) -> PathBuf {
        let path = dir.join(name);
        fs::write(&path, json).unwrap();
        path
    }

    #[test]
    fn grid_initializer_builds_dilated_positions() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_json(
            dir.path(),
            "net.json",
            r#"{
                "input": {"channels": 1, "height": 8, "width": 8},
                "layers": [
                    {"type": "acu", "name": "a0", "in_channels": 1, "out_channels": 1,
                     "synapses": 9, "weights": {"init": "he"},
                     "positions": {"init": "grid", "kh": 3, "kw": 3, "dilation": 2}}
                ]
            }"#,
        );
        let loaded = load_manifest(&path, 0).unwrap();
        let mut found = false;
        loaded.net.visit_acu(&mut |_, a| {
            found = (0..9).any(|k| a.positions.get(0, k) == (-2.0, -2.0));
        });
        assert!(found, "dilated grid must contain (-2, -2)");
    }

    #[test]
    fn missing_tensor_file_names_the_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_json(
            dir.path(),
            "net.json",
            r#"{
                "input": {"channels": 1, "height": 8, "width": 8},
                "layers": [
                    {"type": "conv", "name": "c0", "in_channels": 1, "out_channels": 1,
                     "kernel": [3, 3], "padding": [1, 1],
                     "weights": {"init": "file", "path": "absent.tnsr"}}
                ]
            }"#,
        );
        let err = load_manifest(&path, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("c0.weights") && msg.contains("absent.tnsr"), "{msg}");
    }

    #[test]
    fn shape_mismatch_names_expected_and_found() {
        let dir = tempfile::tempdir().unwrap();
        let bad = he_init((1, 1, 2, 2), 2, 3).unwrap();
        write_tensor(dir.path().join("w.tnsr"), &bad).unwrap();
        let path = write_json(
            dir.path(),
            "net.json",
            r#"{
                "input": {"channels": 1, "height": 8, "width": 8},
                "layers": [
                    {"type": "conv", "name": "c0", "in_channels": 1, "out_channels": 1,
                     "kernel": [3, 3], "padding": [1, 1],
                     "weights": {"init": "file", "path": "w.tnsr"}}
                ]
            }"#,
        );
        let err = load_manifest(&path, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1, 1, 3, 3)") && msg.contains("(1, 1, 2, 2)"), "{msg}");
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_json(
            dir.path(),
            "net.json",
            r#"{
                "input": {"channels": 2, "height": 6, "width": 6},
                "layers": [
                    {"type": "conv", "name": "c0", "in_channels": 2, "out_channels": 4,
                     "kernel": [3, 3], "padding": [1, 1], "weights": {"init": "he"}},
                    {"type": "relu"},
                    {"type": "residual", "name": "b0", "body": [
                        {"type": "acu", "name": "a0", "in_channels": 4, "out_channels": 4,
                         "groups": 2, "synapses": 3, "weights": {"init": "he"},
                         "positions": {"init": "zeros"}}
                    ]},
                    {"type": "global-avg-pool"},
                    {"type": "dense", "name": "fc", "in_features": 4, "out_features": 3,
                     "weights": {"init": "he"}}
                ]
            }"#,
        );
        let loaded = load_manifest(&path, 42).unwrap();
        let snap_dir = dir.path().join("snap");
        save_snapshot(&loaded.net, loaded.input, &snap_dir).unwrap();
        let back = load_snapshot(&snap_dir).unwrap();
        assert_eq!(back.net, loaded.net);
        assert_eq!(back.input, loaded.input);

        // forward outputs identical on a probe batch
        let x = he_init((2, 2, 6, 6), 2, 1).unwrap();
        let a = loaded.net.forward(&x).unwrap();
        let b = back.net.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn he_initialization_depends_on_the_seed() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_json(
            dir.path(),
            "net.json",
            r#"{
                "input": {"channels": 1, "height": 4, "width": 4},
                "layers": [
                    {"type": "dense", "name": "fc", "in_features": 16, "out_features": 2,
                     "weights": {"init": "he"}}
                ]
            }"#,
        );
        let a = load_manifest(&path, 1).unwrap();
        let b = load_manifest(&path, 1).unwrap();
        let c = load_manifest(&path, 2).unwrap();
        assert_eq!(a.net, b.net);
        assert_ne!(a.net, c.net);
    }

    #[test]
    fn duplicate_layer_names_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_json(
            dir.path(),
            "net.json",
            r#"{
                "input": {"channels": 1, "height": 4, "width": 4},
                "layers": [
                    {"type": "dense", "name": "fc", "in_features": 16, "out_features": 16,
                     "weights": {"init": "he"}},
                    {"type": "dense", "name": "fc", "in_features": 16, "out_features": 2,
                     "weights": {"init": "he"}}
                ]
            }"#,
        );
        assert!(load_manifest(&path, 0).is_err());
    }
}
