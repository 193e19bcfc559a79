//! Network assembly: the layer recipe, parameter initialization, forward
//! passes over the autograd tape, and the parameter file format.
//!
//! The default recipe: five 128-channel 3×3 convolutions (strides 2,2,2,1,1,
//! padding 1) over a 32×32 input, one 2×2 average pool, flatten to 512,
//! dense 256 and 128, and a single linear output. Gaussian noise is injected
//! ahead of each convolution and dropout follows every hidden layer.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::autograd::{
    avg_pool2d, conv2d, conv2d_output_dims, dense, dropout, flatten, gaussian_noise, relu, Mode,
    Tape, Tensor, TensorId,
};
use crate::error::{CoreError, Result};
use crate::raster::hex_string;
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub noise_sigma: f64,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayerConfig {
    pub width: usize,
    pub dropout_rate: f64,
}

/// Layer recipe. The final output is always a single linear unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_size: usize,
    pub conv_layers: Vec<ConvLayerConfig>,
    /// Average-pool window after the conv stack; 1 disables pooling.
    pub pool: usize,
    pub dense_layers: Vec<DenseLayerConfig>,
}

/// Intermediate shapes implied by an [`ArchConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTrace {
    /// Spatial size after each conv layer.
    pub conv_spatial: Vec<usize>,
    pub pre_pool_channels: usize,
    pub pre_pool_spatial: usize,
    pub post_pool_spatial: usize,
    pub flatten_len: usize,
    pub dense_widths: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let conv = |stride| ConvLayerConfig {
            out_channels: 128,
            kernel: 3,
            stride,
            padding: 1,
            noise_sigma: 0.05,
            dropout_rate: 0.2,
        };
        ArchConfig {
            input_size: 32,
            conv_layers: vec![conv(2), conv(2), conv(2), conv(1), conv(1)],
            pool: 2,
            dense_layers: vec![
                DenseLayerConfig {
                    width: 256,
                    dropout_rate: 0.2,
                },
                DenseLayerConfig {
                    width: 128,
                    dropout_rate: 0.2,
                },
            ],
        }
    }
}

impl ArchConfig {
    /// A small recipe for synthetic desk-scale runs: three 32-channel
    /// convolutions, pool 2, dense 64 and 32.
    pub fn small() -> Self {
        let conv = |noise, drop| ConvLayerConfig {
            out_channels: 32,
            kernel: 3,
            stride: 2,
            padding: 1,
            noise_sigma: noise,
            dropout_rate: drop,
        };
        ArchConfig {
            input_size: 32,
            conv_layers: vec![conv(0.05, 0.1), conv(0.05, 0.1), conv(0.05, 0.1)],
            pool: 2,
            dense_layers: vec![
                DenseLayerConfig {
                    width: 64,
                    dropout_rate: 0.1,
                },
                DenseLayerConfig {
                    width: 32,
                    dropout_rate: 0.1,
                },
            ],
        }
    }

    /// Validates the layer stack and returns the implied shapes
    /// (floor convention for strided convolutions).
    pub fn shape_trace(&self) -> Result<ShapeTrace> {
        if self.input_size == 0 {
            return Err(CoreError::InvalidArgument("input_size must be >= 1".into()));
        }
        if self.pool == 0 {
            return Err(CoreError::InvalidArgument("pool must be >= 1".into()));
        }
        let mut spatial = self.input_size;
        let mut channels = 1usize;
        let mut conv_spatial = Vec::new();
        for (i, layer) in self.conv_layers.iter().enumerate() {
            if layer.out_channels == 0 || layer.kernel == 0 {
                return Err(CoreError::InvalidArgument(format!(
                    "conv layer {i}: channels and kernel must be >= 1"
                )));
            }
            if !(0.0..1.0).contains(&layer.dropout_rate) || layer.noise_sigma < 0.0 {
                return Err(CoreError::InvalidArgument(format!(
                    "conv layer {i}: bad dropout/noise settings"
                )));
            }
            spatial = conv2d_output_dims(spatial, layer.kernel, layer.stride, layer.padding)?;
            channels = layer.out_channels;
            conv_spatial.push(spatial);
        }
        let pre_pool_spatial = spatial;
        let post_pool_spatial = if self.conv_layers.is_empty() || self.pool == 1 {
            spatial
        } else {
            if spatial % self.pool != 0 {
                return Err(CoreError::ShapeMismatch(format!(
                    "pool {} does not divide spatial size {spatial}",
                    self.pool
                )));
            }
            spatial / self.pool
        };
        let flatten_len = channels * post_pool_spatial * post_pool_spatial;
        for (i, d) in self.dense_layers.iter().enumerate() {
            if d.width == 0 {
                return Err(CoreError::InvalidArgument(format!(
                    "dense layer {i}: width must be >= 1"
                )));
            }
            if !(0.0..1.0).contains(&d.dropout_rate) {
                return Err(CoreError::InvalidArgument(format!(
                    "dense layer {i}: bad dropout rate"
                )));
            }
        }
        Ok(ShapeTrace {
            conv_spatial,
            pre_pool_channels: channels,
            pre_pool_spatial,
            post_pool_spatial,
            flatten_len,
            dense_widths: self.dense_layers.iter().map(|d| d.width).collect(),
        })
    }

    /// SHA-256 of the canonical JSON encoding; stored in the parameter file
    /// so weights cannot be loaded into a different recipe.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(self).unwrap().as_bytes());
        hex_string(&h.finalize())
    }

    /// Parses the flat key/value config format:
    ///
    /// ```text
    /// input_size = 32
    /// conv = 128 3 2 1 0.05 0.2   # out kernel stride pad noise dropout
    /// pool = 2
    /// dense = 256 0.2             # width dropout
    /// ```
    ///
    /// `conv` and `dense` repeat, in order. Lines starting with `#` are
    /// comments.
    pub fn from_config_text(text: &str) -> Result<ArchConfig> {
        let mut cfg = ArchConfig {
            input_size: 32,
            conv_layers: Vec::new(),
            pool: 1,
            dense_layers: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let (key, value) = line.split_once('=').ok_or(CoreError::Parse {
                line: lineno,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            let nums: Vec<f64> = value
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|_| CoreError::Parse {
                        line: lineno,
                        message: format!("non-numeric token '{t}'"),
                    })
                })
                .collect::<Result<_>>()?;
            let want = |n: usize| -> Result<()> {
                if nums.len() == n {
                    Ok(())
                } else {
                    Err(CoreError::Parse {
                        line: lineno,
                        message: format!("key '{}' expects {n} values", key.trim()),
                    })
                }
            };
            match key.trim() {
                "input_size" => {
                    want(1)?;
                    cfg.input_size = nums[0] as usize;
                }
                "pool" => {
                    want(1)?;
                    cfg.pool = nums[0] as usize;
                }
                "conv" => {
                    want(6)?;
                    cfg.conv_layers.push(ConvLayerConfig {
                        out_channels: nums[0] as usize,
                        kernel: nums[1] as usize,
                        stride: nums[2] as usize,
                        padding: nums[3] as usize,
                        noise_sigma: nums[4],
                        dropout_rate: nums[5],
                    });
                }
                "dense" => {
                    want(2)?;
                    cfg.dense_layers.push(DenseLayerConfig {
                        width: nums[0] as usize,
                        dropout_rate: nums[1],
                    });
                }
                other => {
                    return Err(CoreError::Parse {
                        line: lineno,
                        message: format!("unknown key '{other}'"),
                    });
                }
            }
        }
        cfg.shape_trace()?;
        Ok(cfg)
    }
}

/// A trainable tensor with a stable name.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// All trainable tensors, ordered by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub tensors: Vec<NamedTensor>,
}

impl ModelParameters {
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }
}

/// He-uniform initialized parameters (bound √(6/fan_in)), zero biases;
/// deterministic per seed.
pub fn build_network(arch: &ArchConfig, seed: u64) -> Result<ModelParameters> {
    let trace = arch.shape_trace()?;
    let mut rng = substream(seed, Stream::ParamInit, &[]);
    let mut tensors = Vec::new();

    let mut he_uniform = |shape: Vec<usize>, fan_in: usize| {
        let bound = (6.0 / fan_in as f64).sqrt();
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape, data)
    };

    let mut in_channels = 1usize;
    for (i, layer) in arch.conv_layers.iter().enumerate() {
        let fan_in = in_channels * layer.kernel * layer.kernel;
        tensors.push(NamedTensor {
            name: format!("conv{i}.weight"),
            tensor: he_uniform(
                vec![layer.out_channels, in_channels, layer.kernel, layer.kernel],
                fan_in,
            ),
        });
        tensors.push(NamedTensor {
            name: format!("conv{i}.bias"),
            tensor: Tensor::zeros(vec![layer.out_channels]),
        });
        in_channels = layer.out_channels;
    }

    let mut width = trace.flatten_len;
    for (i, layer) in arch.dense_layers.iter().enumerate() {
        tensors.push(NamedTensor {
            name: format!("dense{i}.weight"),
            tensor: he_uniform(vec![width, layer.width], width),
        });
        tensors.push(NamedTensor {
            name: format!("dense{i}.bias"),
            tensor: Tensor::zeros(vec![layer.width]),
        });
        width = layer.width;
    }
    tensors.push(NamedTensor {
        name: "output.weight".into(),
        tensor: he_uniform(vec![width, 1], width),
    });
    tensors.push(NamedTensor {
        name: "output.bias".into(),
        tensor: Tensor::zeros(vec![1]),
    });

    Ok(ModelParameters { tensors })
}

/// A forward pass recorded on a tape: prediction node plus the parameter
/// leaves, in the same order as [`ModelParameters::tensors`].
pub struct ForwardPass {
    pub tape: Tape,
    pub predictions: TensorId,
    pub param_ids: Vec<TensorId>,
}

/// Runs a batch (N×1×k×k) through the network. In train mode the stochastic
/// regularizers draw from `rng`; eval mode is a pure function of
/// (parameters, input).
pub fn forward(
    params: &ModelParameters,
    arch: &ArchConfig,
    batch: &Tensor,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardPass> {
    let k = arch.input_size;
    let n = match batch.shape() {
        [n, 1, h, w] if *h == k && *w == k => *n,
        s => {
            return Err(CoreError::ShapeMismatch(format!(
                "batch shape {s:?} does not match input size {k}"
            )));
        }
    };

    let mut tape = Tape::new();
    let param_ids: Vec<TensorId> = params
        .tensors
        .iter()
        .map(|t| tape.leaf(t.tensor.clone(), true))
        .collect();
    let mut x = tape.leaf(batch.clone(), false);

    let mut pi = 0usize;
    for layer in &arch.conv_layers {
        x = gaussian_noise(&mut tape, x, layer.noise_sigma, mode, rng);
        x = conv2d(
            &mut tape,
            x,
            param_ids[pi],
            param_ids[pi + 1],
            layer.stride,
            layer.padding,
        )?;
        pi += 2;
        x = relu(&mut tape, x);
        x = dropout(&mut tape, x, layer.dropout_rate, mode, rng)?;
    }
    if !arch.conv_layers.is_empty() && arch.pool > 1 {
        x = avg_pool2d(&mut tape, x, arch.pool)?;
    }
    x = flatten(&mut tape, x)?;
    for layer in &arch.dense_layers {
        x = dense(&mut tape, x, param_ids[pi], param_ids[pi + 1])?;
        pi += 2;
        x = relu(&mut tape, x);
        x = dropout(&mut tape, x, layer.dropout_rate, mode, rng)?;
    }
    x = dense(&mut tape, x, param_ids[pi], param_ids[pi + 1])?;

    debug_assert_eq!(tape.value(x).shape(), [n, 1]);
    Ok(ForwardPass {
        tape,
        predictions: x,
        param_ids,
    })
}

/// Eval-mode predictions, one per sample.
pub fn predict(params: &ModelParameters, arch: &ArchConfig, batch: &Tensor) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in eval mode
    let pass = forward(params, arch, batch, Mode::Eval, &mut rng)?;
    Ok(pass.tape.value(pass.predictions).data().to_vec())
}

const PARAM_MAGIC: &[u8; 8] = b"TTXPARAM";

#[derive(Debug, Serialize, Deserialize)]
struct ParamHeader {
    format_version: u32,
    arch_fingerprint: String,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Writes parameters: magic, a JSON manifest header, then raw little-endian
/// f64 data ordered by layer. Round trips bit-exactly.
pub fn save_parameters(
    params: &ModelParameters,
    arch: &ArchConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let header = ParamHeader {
        format_version: crate::FORMAT_VERSION,
        arch_fingerprint: arch.fingerprint(),
        tensors: params
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.tensor.shape().to_vec()))
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).unwrap();
    let mut out = Vec::new();
    out.extend_from_slice(PARAM_MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for t in &params.tensors {
        for v in t.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| CoreError::io(path, e))
}

/// Loads parameters, refusing files whose fingerprint does not match `arch`.
pub fn load_parameters(path: impl AsRef<Path>, arch: &ArchConfig) -> Result<ModelParameters> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    if bytes.len() < 12 || &bytes[0..8] != PARAM_MAGIC {
        return Err(CoreError::format(path, "not a parameter file (bad magic)"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(CoreError::format(path, "truncated header"));
    }
    let header: ParamHeader = serde_json::from_slice(&bytes[12..12 + hlen])
        .map_err(|e| CoreError::format(path, format!("bad header: {e}")))?;
    if header.format_version != crate::FORMAT_VERSION {
        return Err(CoreError::format(
            path,
            format!("format version {} unsupported", header.format_version),
        ));
    }
    if header.arch_fingerprint != arch.fingerprint() {
        return Err(CoreError::format(
            path,
            "parameter file was written for a different architecture",
        ));
    }
    let mut offset = 12 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (name, shape) in header.tensors {
        let len: usize = shape.iter().product();
        let end = offset + len * 8;
        if bytes.len() < end {
            return Err(CoreError::format(path, "truncated tensor data"));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        offset = end;
        tensors.push(NamedTensor {
            name,
            tensor: Tensor::new(shape, data),
        });
    }
    if offset != bytes.len() {
        return Err(CoreError::format(path, "trailing bytes after tensor data"));
    }
    Ok(ModelParameters { tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape_trace_matches_recipe() {
        let trace = ArchConfig::default().shape_trace().unwrap();
        assert_eq!(trace.conv_spatial, vec![16, 8, 4, 4, 4]);
        assert_eq!(trace.pre_pool_channels, 128);
        assert_eq!(trace.pre_pool_spatial, 4);
        assert_eq!(trace.post_pool_spatial, 2);
        assert_eq!(trace.flatten_len, 512);
        assert_eq!(trace.dense_widths, vec![256, 128]);
    }

    #[test]
    fn default_parameter_count() {
        let params = build_network(&ArchConfig::default(), 1).unwrap();
        assert_eq!(params.parameter_count(), 755_969);
    }

    #[test]
    fn init_deterministic_per_seed() {
        let arch = ArchConfig::small();
        let a = build_network(&arch, 5).unwrap();
        let b = build_network(&arch, 5).unwrap();
        let c = build_network(&arch, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn no_conv_affine_map_count() {
        let arch = ArchConfig {
            input_size: 8,
            conv_layers: vec![],
            pool: 1,
            dense_layers: vec![],
        };
        let params = build_network(&arch, 0).unwrap();
        assert_eq!(params.parameter_count(), 8 * 8 + 1);
    }

    #[test]
    fn single_conv_count() {
        let arch = ArchConfig {
            input_size: 3,
            conv_layers: vec![ConvLayerConfig {
                out_channels: 1,
                kernel: 3,
                stride: 1,
                padding: 0,
                noise_sigma: 0.0,
                dropout_rate: 0.0,
            }],
            pool: 1,
            dense_layers: vec![],
        };
        let params = build_network(&arch, 0).unwrap();
        // 3x3 conv + bias (10) feeding a 1-wide output layer (1 + 1)
        assert_eq!(params.parameter_count(), 12);
    }

    #[test]
    fn zero_params_predict_zero() {
        let arch = ArchConfig::small();
        let mut params = build_network(&arch, 1).unwrap();
        for t in &mut params.tensors {
            for v in t.tensor.data_mut() {
                *v = 0.0;
            }
        }
        let batch = Tensor::new(vec![2, 1, 32, 32], vec![0.5; 2 * 32 * 32]);
        let preds = predict(&params, &arch, &batch).unwrap();
        assert_eq!(preds, vec![0.0, 0.0]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let arch = ArchConfig::small();
        let params = build_network(&arch, 1).unwrap();
        let data: Vec<f64> = (0..32 * 32).map(|i| (i as f64) / 1024.0).collect();
        let batch = Tensor::new(vec![1, 1, 32, 32], data);
        let a = predict(&params, &arch, &batch).unwrap();
        let b = predict(&params, &arch, &batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_sample_matches_batch() {
        let arch = ArchConfig::small();
        let params = build_network(&arch, 2).unwrap();
        let mk = |seed: u64| -> Vec<f64> {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let s0 = mk(10);
        let s1 = mk(11);
        let mut both = s0.clone();
        both.extend_from_slice(&s1);
        let batch = Tensor::new(vec![2, 1, 32, 32], both);
        let preds = predict(&params, &arch, &batch).unwrap();
        let p0 = predict(&params, &arch, &Tensor::new(vec![1, 1, 32, 32], s0)).unwrap();
        let p1 = predict(&params, &arch, &Tensor::new(vec![1, 1, 32, 32], s1)).unwrap();
        // per-sample accumulation order is batch-independent
        assert_eq!(preds[0], p0[0]);
        assert_eq!(preds[1], p1[0]);
    }

    #[test]
    fn save_load_round_trip() {
        let arch = ArchConfig::small();
        let params = build_network(&arch, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        save_parameters(&params, &arch, &path).unwrap();
        let loaded = load_parameters(&path, &arch).unwrap();
        assert_eq!(loaded, params);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let arch = ArchConfig::small();
        let params = build_network(&arch, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        save_parameters(&params, &arch, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(load_parameters(&path, &arch).is_err());
    }

    #[test]
    fn mismatched_config_rejected() {
        let arch = ArchConfig::small();
        let params = build_network(&arch, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        save_parameters(&params, &arch, &path).unwrap();
        assert!(load_parameters(&path, &ArchConfig::default()).is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let text = "\
# demo recipe
input_size = 32
conv = 32 3 2 1 0.05 0.1
conv = 32 3 2 1 0.05 0.1
conv = 32 3 2 1 0.05 0.1
pool = 2
dense = 64 0.1
dense = 32 0.1
";
        let cfg = ArchConfig::from_config_text(text).unwrap();
        assert_eq!(cfg, ArchConfig::small());
        assert!(ArchConfig::from_config_text("bogus = 1").is_err());
    }
}
