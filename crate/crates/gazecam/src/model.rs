//! The classifier: six conv→batchnorm→relu→dropout blocks, a flatten, and a
//! single dense layer. The single-dense-head topology is load-bearing: the
//! gradient of a logit w.r.t. the penultimate activation stack equals the
//! corresponding dense weight, so class activation maps can be built from
//! the weights directly (see `cam`).

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerCtx, LayerSpec, Mode, BATCHNORM_EPS, BATCHNORM_MOMENTUM};
use crate::loss::softmax;
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const NUM_BLOCKS: usize = 6;

const CHECKPOINT_MAGIC: &[u8; 4] = b"GZCM";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlockSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Hyperparameters of the whole network. The block plan defaults to 3x3
/// kernels with channels [32, 64, 64, 128, 128, 128] and stride 2 on blocks
/// 1, 2, 4 and 6, so a 224 input reaches a 14x14 penultimate map and a 64
/// input reaches 4x4.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_side: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub blocks: [ConvBlockSpec; NUM_BLOCKS],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(224, 12)
    }
}

impl ModelConfig {
    pub fn preset(input_side: usize, num_classes: usize) -> Self {
        let block = |channels, stride| ConvBlockSpec {
            channels,
            kernel: 3,
            stride,
            padding: 1,
        };
        Self {
            input_side,
            num_classes,
            dropout: 0.2,
            blocks: [
                block(32, 2),
                block(64, 2),
                block(64, 1),
                block(128, 2),
                block(128, 1),
                block(128, 2),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side < 1 {
            return Err(Error::Config("input side must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout probability must lie in [0,1), got {}",
                self.dropout
            )));
        }
        self.spatial_plan()?;
        Ok(())
    }

    /// Spatial side after each conv block; errors if any block would shrink
    /// the map below 1x1.
    pub fn spatial_plan(&self) -> Result<Vec<usize>> {
        let mut side = self.input_side;
        let mut plan = Vec::with_capacity(NUM_BLOCKS);
        for (i, b) in self.blocks.iter().enumerate() {
            if b.kernel < 1 || b.stride < 1 || b.channels < 1 {
                return Err(Error::Config(format!(
                    "conv block {}: kernel, stride and channels must be >= 1",
                    i + 1
                )));
            }
            if side + 2 * b.padding < b.kernel {
                return Err(Error::Config(format!(
                    "conv block {}: spatial size collapsed ({}x{} input cannot support kernel {})",
                    i + 1,
                    side,
                    side,
                    b.kernel
                )));
            }
            side = (side + 2 * b.padding - b.kernel) / b.stride + 1;
            plan.push(side);
        }
        Ok(plan)
    }

    /// Side length n of the penultimate activation maps.
    pub fn penultimate_side(&self) -> Result<usize> {
        Ok(*self.spatial_plan()?.last().unwrap())
    }

    /// Number of feature maps K entering the dense layer.
    pub fn penultimate_channels(&self) -> usize {
        self.blocks[NUM_BLOCKS - 1].channels
    }
}

/// Result of pushing one image through the network in eval mode.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Vec<f64>,
    /// Penultimate activation stack, shape [K, n, n] (the dense input).
    pub activations: Tensor,
    pub predicted: usize,
    /// Softmax over the logits; sums to 1.
    pub confidence: Vec<f64>,
}

/// Result of a batched forward pass, retaining everything the backward pass
/// needs.
#[derive(Debug)]
pub struct BatchTrace {
    /// Logits, shape [batch, classes].
    pub logits: Tensor,
    /// Penultimate activation stack, shape [batch, K, n, n].
    pub penultimate: Tensor,
    ctxs: Vec<LayerCtx>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
}

impl Model {
    /// Builds and initializes the network deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = config.penultimate_side()?;
        let k = config.penultimate_channels();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(NUM_BLOCKS * 4 + 2);
        let mut in_ch = 1;
        for b in &config.blocks {
            layers.push(Layer::new(
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch: b.channels,
                    kernel: b.kernel,
                    stride: b.stride,
                    padding: b.padding,
                },
                &mut rng,
            )?);
            layers.push(Layer::new(
                LayerSpec::BatchNorm {
                    channels: b.channels,
                },
                &mut rng,
            )?);
            layers.push(Layer::new(LayerSpec::Relu, &mut rng)?);
            layers.push(Layer::new(LayerSpec::Dropout { p: config.dropout }, &mut rng)?);
            in_ch = b.channels;
        }
        layers.push(Layer::new(LayerSpec::Flatten, &mut rng)?);
        layers.push(Layer::new(
            LayerSpec::Dense {
                in_features: k * n * n,
                out_features: config.num_classes,
            },
            &mut rng,
        )?);
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn penultimate_side(&self) -> usize {
        self.config.penultimate_side().expect("validated at build")
    }

    pub fn penultimate_channels(&self) -> usize {
        self.config.penultimate_channels()
    }

    /// Checks a batch shape [batch, 1, side, side].
    fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = images.shape();
        let side = self.config.input_side;
        if s.len() != 4 || s[1] != 1 || s[2] != side || s[3] != side {
            return Err(Error::Dimension(format!(
                "expected images of shape [batch, 1, {side}, {side}], got {s:?}"
            )));
        }
        Ok(())
    }

    /// Batched forward pass. `seed` drives train-mode dropout; eval mode
    /// ignores it.
    pub fn forward_batch(&self, images: &Tensor, mode: Mode, seed: u64) -> Result<BatchTrace> {
        self.check_images(images)?;
        let mut ctxs = Vec::with_capacity(self.layers.len());
        let mut current = images.clone();
        let mut penultimate = None;
        for (idx, layer) in self.layers.iter().enumerate() {
            if matches!(layer.spec(), LayerSpec::Flatten) {
                penultimate = Some(current.clone());
            }
            let (out, ctx) = layer.forward(&current, mode, derive_seed(seed, &[idx as u64]))?;
            ctxs.push(ctx);
            current = out;
        }
        Ok(BatchTrace {
            logits: current,
            penultimate: penultimate.expect("model always has a flatten layer"),
            ctxs,
        })
    }

    /// Single-image eval-mode forward pass returning the inspection trace.
    pub fn forward(&self, image: &Tensor) -> Result<ForwardTrace> {
        let side = self.config.input_side;
        let image = match image.shape() {
            [h, w] if *h == side && *w == side => {
                image.clone().reshape(vec![1, 1, side, side])?
            }
            [1, h, w] if *h == side && *w == side => {
                image.clone().reshape(vec![1, 1, side, side])?
            }
            other => {
                return Err(Error::Dimension(format!(
                    "expected a single {side}x{side} image, got shape {other:?}"
                )))
            }
        };
        let trace = self.forward_batch(&image, Mode::Eval, 0)?;
        let logits = trace.logits.data().to_vec();
        let confidence = softmax(&logits);
        let predicted = argmax(&logits);
        let k = self.penultimate_channels();
        let n = self.penultimate_side();
        let activations = trace.penultimate.reshape(vec![k, n, n])?;
        Ok(ForwardTrace {
            logits,
            activations,
            predicted,
            confidence,
        })
    }

    /// Backpropagates `logits_grad` through the whole stack, accumulating
    /// parameter gradients. `penultimate_grad`, when given, is added to the
    /// gradient flowing into the last conv block (shape [batch, K, n, n]);
    /// this is how the fixation-map loss injects its contribution. Returns
    /// the gradient w.r.t. the input images.
    pub fn backward_batch(
        &mut self,
        trace: &BatchTrace,
        logits_grad: &Tensor,
        penultimate_grad: Option<&Tensor>,
    ) -> Result<Tensor> {
        if trace.ctxs.len() != self.layers.len() {
            return Err(Error::Usage(
                "forward trace does not match this model's layer stack".into(),
            ));
        }
        let flatten_idx = self.layers.len() - 2;
        let mut upstream = logits_grad.clone();
        for (idx, (layer, ctx)) in self.layers.iter_mut().zip(&trace.ctxs).enumerate().rev() {
            upstream = layer.backward(ctx, &upstream)?;
            if idx == flatten_idx {
                if let Some(extra) = penultimate_grad {
                    extra.check_same_shape(&upstream, "penultimate gradient")?;
                    for (u, &e) in upstream.data_mut().iter_mut().zip(extra.data()) {
                        *u += e;
                    }
                }
            }
        }
        Ok(upstream)
    }

    /// Folds the batch statistics of a train-mode forward into the
    /// batchnorm running estimates.
    pub fn apply_running_stats(&mut self, trace: &BatchTrace) -> Result<()> {
        for (layer, ctx) in self.layers.iter_mut().zip(&trace.ctxs) {
            layer.update_running_stats(ctx)?;
        }
        Ok(())
    }

    /// Row `class` of the dense weight matrix viewed as K maps of n x n.
    /// By linearity of the dense layer these values are exactly the
    /// gradients of that class logit w.r.t. the penultimate activations.
    pub fn dense_weight_maps(&self, class: usize) -> Result<Tensor> {
        if class >= self.config.num_classes {
            return Err(Error::Index(format!(
                "class {class} out of range for {} classes",
                self.config.num_classes
            )));
        }
        let w = self.dense_weight();
        let k = self.penultimate_channels();
        let n = self.penultimate_side();
        let row = k * n * n;
        let data = w.data()[class * row..(class + 1) * row].to_vec();
        Tensor::new(vec![k, n, n], data)
    }

    pub fn dense_weight(&self) -> &Tensor {
        self.layers
            .last()
            .and_then(|l| l.dense_weight())
            .expect("model always ends in a dense layer")
    }

    pub fn dense_layer(&self) -> &Layer {
        self.layers.last().expect("model always ends in a dense layer")
    }

    /// Trainable parameters in a fixed traversal order with stable names.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        let mut block = 0;
        for layer in &mut self.layers {
            let prefix = match layer.spec() {
                LayerSpec::Conv2d { .. } => {
                    block += 1;
                    format!("block{block}.conv")
                }
                LayerSpec::BatchNorm { .. } => format!("block{block}.bn"),
                LayerSpec::Dense { .. } => "dense".to_string(),
                _ => continue,
            };
            for (name, t) in layer.named_params_mut() {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out
    }

    /// All tensors in the checkpoint: trainable parameters plus batchnorm
    /// running statistics.
    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        let mut block = 0;
        for layer in &mut self.layers {
            let prefix = match layer.spec() {
                LayerSpec::Conv2d { .. } => {
                    block += 1;
                    format!("block{block}.conv")
                }
                LayerSpec::BatchNorm { .. } => format!("block{block}.bn"),
                LayerSpec::Dense { .. } => "dense".to_string(),
                _ => continue,
            };
            for (name, t) in layer.named_all_mut() {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        let mut block = 0;
        for layer in &self.layers {
            let prefix = match layer.spec() {
                LayerSpec::Conv2d { .. } => {
                    block += 1;
                    format!("block{block}.conv")
                }
                LayerSpec::BatchNorm { .. } => format!("block{block}.bn"),
                LayerSpec::Dense { .. } => "dense".to_string(),
                _ => continue,
            };
            for (name, t) in layer.named_params() {
                out.push((format!("{prefix}.{name}"), t));
            }
            for (name, t) in layer.named_state() {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }

    /// Serializes config and all tensors; `load` restores them bitwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        write_u32(&mut w, CHECKPOINT_VERSION).map_err(io)?;
        write_u32(&mut w, self.config.input_side as u32).map_err(io)?;
        write_u32(&mut w, self.config.num_classes as u32).map_err(io)?;
        write_f64(&mut w, self.config.dropout).map_err(io)?;
        for b in &self.config.blocks {
            write_u32(&mut w, b.channels as u32).map_err(io)?;
            write_u32(&mut w, b.kernel as u32).map_err(io)?;
            write_u32(&mut w, b.stride as u32).map_err(io)?;
            write_u32(&mut w, b.padding as u32).map_err(io)?;
        }
        write_f64(&mut w, BATCHNORM_EPS).map_err(io)?;
        write_f64(&mut w, BATCHNORM_MOMENTUM).map_err(io)?;
        let tensors = self.named_tensors();
        write_u32(&mut w, tensors.len() as u32).map_err(io)?;
        for (name, t) in tensors {
            write_u32(&mut w, name.len() as u32).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            write_u32(&mut w, t.ndim() as u32).map_err(io)?;
            for &d in t.shape() {
                write_u32(&mut w, d as u32).map_err(io)?;
            }
            for &v in t.data() {
                write_f64(&mut w, v).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Data(format!(
                "{} is not a model checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = read_u32(&mut r).map_err(io)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let input_side = read_u32(&mut r).map_err(io)? as usize;
        let num_classes = read_u32(&mut r).map_err(io)? as usize;
        let dropout = read_f64(&mut r).map_err(io)?;
        let mut blocks = [ConvBlockSpec {
            channels: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        }; NUM_BLOCKS];
        for b in &mut blocks {
            b.channels = read_u32(&mut r).map_err(io)? as usize;
            b.kernel = read_u32(&mut r).map_err(io)? as usize;
            b.stride = read_u32(&mut r).map_err(io)? as usize;
            b.padding = read_u32(&mut r).map_err(io)? as usize;
        }
        let eps = read_f64(&mut r).map_err(io)?;
        let momentum = read_f64(&mut r).map_err(io)?;
        if eps != BATCHNORM_EPS || momentum != BATCHNORM_MOMENTUM {
            return Err(Error::Data(
                "checkpoint was written with different batchnorm constants".into(),
            ));
        }
        let config = ModelConfig {
            input_side,
            num_classes,
            dropout,
            blocks,
        };
        let mut model = Model::new(config, 0)?;
        let count = read_u32(&mut r).map_err(io)? as usize;
        let mut tensors = model.named_tensors_mut();
        if count != tensors.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {count} tensors, model needs {}",
                tensors.len()
            )));
        }
        for (expect_name, tensor) in tensors.iter_mut() {
            let name_len = read_u32(&mut r).map_err(io)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Data("checkpoint tensor name is not UTF-8".into()))?;
            if &name != expect_name {
                return Err(Error::Data(format!(
                    "checkpoint tensor order mismatch: found '{name}', expected '{expect_name}'"
                )));
            }
            let ndim = read_u32(&mut r).map_err(io)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r).map_err(io)? as usize);
            }
            if shape != tensor.shape() {
                return Err(Error::Data(format!(
                    "checkpoint tensor '{name}' has shape {shape:?}, expected {:?}",
                    tensor.shape()
                )));
            }
            for v in tensor.data_mut() {
                *v = read_f64(&mut r).map_err(io)?;
            }
        }
        Ok(model)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}
