//! U-shaped denoising encoder-decoder with per-scale attention gates.
//!
//! The encoder produces one feature map per scale. The reconstruction task
//! consumes them ungated through the decoder's skip connections; the
//! representation task multiplies each map by a learned sigmoid gate, then
//! pools, projects and concatenates them before a two-layer projector and
//! hypersphere normalization.

use candle_core::{DType, Device, Tensor};
use candle_nn::{batch_norm, linear, ops, BatchNorm, BatchNormConfig, Linear, Module, ModuleT, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::l2_normalize_rows;

pub mod checkpoint;
mod conv;
mod resample;

use conv::{leaky_relu, Conv2d};
pub use conv::conv2d_same;
use resample::{max_pool2x, upsample2x};

const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Five encoder widths followed by the width of the last decoder stage.
    pub stage_widths: Vec<usize>,
    pub input_channels: usize,
    pub image_size: (usize, usize),
    /// Output width of each per-scale projection; the concatenation feeds the projector.
    pub scale_projection: usize,
    pub projector_hidden: usize,
    pub embed_dim: usize,
    pub mtan_enabled: bool,
    /// Batch-normalizes the projector's hidden layer. Running statistics are
    /// used outside training.
    pub projector_norm: bool,
    /// Initial bias of the gate's last layer; sigmoid(4) is close to 1.
    pub gate_bias_init: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl BackboneConfig {
    /// 256 x 256 inputs, widths [16, 32, 64, 128, 256, 32], 480-d embeddings.
    pub fn reference() -> Self {
        Self {
            stage_widths: vec![16, 32, 64, 128, 256, 32],
            input_channels: 3,
            image_size: (256, 256),
            scale_projection: 96,
            projector_hidden: 480,
            embed_dim: 480,
            mtan_enabled: true,
            projector_norm: true,
            gate_bias_init: 4.0,
        }
    }

    /// Quarter-width network for 64 x 64 synthetic images; same embedding size.
    pub fn synthetic() -> Self {
        Self {
            stage_widths: vec![4, 8, 16, 32, 64, 8],
            image_size: (64, 64),
            ..Self::reference()
        }
    }

    pub fn num_scales(&self) -> usize {
        self.stage_widths.len().saturating_sub(1)
    }

    pub fn encoder_widths(&self) -> &[usize] {
        &self.stage_widths[..self.num_scales()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.len() != 6 {
            return Err(Error::Config(format!(
                "stage_widths needs 5 encoder widths plus a final decoder width, got {:?}",
                self.stage_widths
            )));
        }
        if self.stage_widths.iter().any(|&w| w == 0) || self.input_channels == 0 {
            return Err(Error::Config("widths and channels must be positive".into()));
        }
        let factor = 1usize << (self.num_scales() - 1);
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!(
                "image size {h}x{w} must be divisible by {factor}"
            )));
        }
        if self.scale_projection == 0 || self.projector_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("projection widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Reconstruction,
    Representation,
}

/// Encoder outputs, one `[B, C_k, H_k, W_k]` map per scale.
#[derive(Clone, Debug)]
pub struct MultiScaleFeatures {
    pub per_scale: Vec<Tensor>,
    pub task: Task,
}

impl MultiScaleFeatures {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.per_scale.iter().map(|t| t.dims().to_vec()).collect()
    }
}

fn leaky(xs: &Tensor) -> candle_core::Result<Tensor> {
    leaky_relu(xs, LEAKY_SLOPE)
}

fn conv3x3(c_in: usize, c_out: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    Conv2d::new(c_in, c_out, 3, vb)
}

fn conv1x1(c_in: usize, c_out: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    Conv2d::new(c_in, c_out, 1, vb)
}

/// conv3x3 -> LeakyReLU, twice.
#[derive(Debug)]
struct TwoConv {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl TwoConv {
    fn new(c_in: usize, c_out: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            conv1: conv3x3(c_in, c_out, vb.pp("conv1"))?,
            conv2: conv3x3(c_out, c_out, vb.pp("conv2"))?,
        })
    }

    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let xs = leaky(&self.conv1.forward(xs)?)?;
        leaky(&self.conv2.forward(&xs)?)
    }
}

/// Nearest 2x upsampling, a 1x1 channel mix, concatenation with the skip and a TwoConv.
#[derive(Debug)]
struct UpCat {
    mix: Conv2d,
    block: TwoConv,
}

impl UpCat {
    fn new(c_in: usize, c_skip: usize, c_out: usize, halves: bool, vb: VarBuilder) -> candle_core::Result<Self> {
        let c_up = if halves { c_in / 2 } else { c_in };
        Ok(Self {
            mix: conv1x1(c_in, c_up, vb.pp("mix"))?,
            block: TwoConv::new(c_up + c_skip, c_out, vb.pp("block"))?,
        })
    }

    fn forward(&self, xs: &Tensor, skip: &Tensor) -> candle_core::Result<Tensor> {
        let up = self.mix.forward(&upsample2x(xs)?)?;
        self.block.forward(&Tensor::cat(&[&up, skip], 1)?)
    }
}

/// Per-scale gate: 1x1 conv, ReLU, 1x1 conv, sigmoid.
#[derive(Debug)]
struct AttentionGate {
    squeeze: Conv2d,
    excite: Conv2d,
}

impl AttentionGate {
    fn new(channels: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            squeeze: conv1x1(channels, channels, vb.pp("squeeze"))?,
            excite: conv1x1(channels, channels, vb.pp("excite"))?,
        })
    }

    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.squeeze.forward(xs)?.relu()?;
        ops::sigmoid(&self.excite.forward(&h)?)
    }
}

pub struct TrajectoryNet {
    config: BackboneConfig,
    varmap: VarMap,
    device: Device,
    encoder: Vec<TwoConv>,
    decoder: Vec<UpCat>,
    head: Conv2d,
    gates: Vec<AttentionGate>,
    scale_heads: Vec<Linear>,
    projector: (Linear, Option<BatchNorm>, Linear),
}

impl std::fmt::Debug for TrajectoryNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrajectoryNet").field("config", &self.config).finish_non_exhaustive()
    }
}

impl TrajectoryNet {
    /// Builds the network with parameters drawn from a generator seeded by `seed`.
    pub fn new(config: BackboneConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, device);
        let widths = config.stage_widths.clone();
        let enc = config.encoder_widths().to_vec();

        let mut encoder = Vec::with_capacity(enc.len());
        let mut c_in = config.input_channels;
        for (k, &w) in enc.iter().enumerate() {
            encoder.push(TwoConv::new(c_in, w, vb.pp(format!("encoder.{k}")))?);
            c_in = w;
        }

        // Deepest first: each stage upsamples and merges the next-shallower skip.
        let mut decoder = Vec::with_capacity(enc.len() - 1);
        let mut c_cur = enc[enc.len() - 1];
        for k in (0..enc.len() - 1).rev() {
            let (out, halves) = if k == 0 { (widths[5], false) } else { (enc[k], true) };
            decoder.push(UpCat::new(c_cur, enc[k], out, halves, vb.pp(format!("decoder.{k}")))?);
            c_cur = out;
        }
        let head = conv1x1(c_cur, config.input_channels, vb.pp("decoder.head"))?;

        let mut gates = Vec::with_capacity(enc.len());
        let mut scale_heads = Vec::with_capacity(enc.len());
        for (k, &w) in enc.iter().enumerate() {
            gates.push(AttentionGate::new(w, vb.pp(format!("mtan.{k}")))?);
            scale_heads.push(linear(w, config.scale_projection, vb.pp(format!("scale_head.{k}")))?);
        }
        let concat = config.scale_projection * enc.len();
        let norm = if config.projector_norm {
            let cfg = BatchNormConfig {
                eps: 1e-5,
                remove_mean: true,
                affine: true,
                momentum: 0.1,
            };
            Some(batch_norm(config.projector_hidden, cfg, vb.pp("projector.norm"))?)
        } else {
            None
        };
        let projector = (
            linear(concat, config.projector_hidden, vb.pp("projector.0"))?,
            norm,
            linear(config.projector_hidden, config.embed_dim, vb.pp("projector.1"))?,
        );

        let net = Self {
            config,
            varmap,
            device: device.clone(),
            encoder,
            decoder,
            head,
            gates,
            scale_heads,
            projector,
        };
        net.initialize(seed)?;
        Ok(net)
    }

    /// Fan-in scaled uniform init for every parameter, visited in name order.
    fn initialize(&self, seed: u64) -> Result<()> {
        let data = self.varmap.data().lock().expect("varmap lock poisoned");
        let mut names: Vec<&String> = data.keys().collect();
        names.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for name in names {
            let var = &data[name];
            let shape = var.shape().clone();
            let n = shape.elem_count();
            let values: Vec<f32> = if let Some(stat) = name.strip_prefix("projector.norm.") {
                let one = matches!(stat, "weight" | "running_var");
                vec![if one { 1.0 } else { 0.0 }; n]
            } else if let Some(prefix) = name.strip_suffix(".bias") {
                if prefix.starts_with("mtan.") && prefix.ends_with(".excite") {
                    vec![self.config.gate_bias_init as f32; n]
                } else {
                    let weight = &data[&format!("{prefix}.weight")];
                    let fan_in = weight.shape().elem_count() / weight.dims()[0];
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
                }
            } else {
                let fan_in = n / shape.dims()[0];
                // He-uniform: variance 2 / fan_in
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
            };
            var.set(&Tensor::from_vec(values, shape, &self.device)?)?;
        }
        Ok(())
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    /// Parameters sorted by hierarchical name.
    pub fn named_parameters(&self) -> Vec<(String, candle_core::Var)> {
        let data = self.varmap.data().lock().expect("varmap lock poisoned");
        let mut out: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images
            .dims4()
            .map_err(|_| Error::Shape(format!("expected [B, C, H, W], got {:?}", images.dims())))?;
        if c != self.config.input_channels || (h, w) != self.config.image_size {
            return Err(Error::Shape(format!(
                "input {c}x{h}x{w} does not match configured {}x{}x{}",
                self.config.input_channels, self.config.image_size.0, self.config.image_size.1
            )));
        }
        Ok(())
    }

    /// Runs the shared encoder; the returned maps are ungated.
    pub fn shared_features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(images)?;
        let mut maps = Vec::with_capacity(self.encoder.len());
        let mut xs = images.clone();
        for (k, block) in self.encoder.iter().enumerate() {
            if k > 0 {
                xs = max_pool2x(&xs)?;
            }
            xs = block.forward(&xs)?;
            maps.push(xs.clone());
        }
        Ok(maps)
    }

    pub fn attention_mask(&self, scale_index: usize, shared: &Tensor) -> Result<Tensor> {
        let gate = self
            .gates
            .get(scale_index)
            .ok_or_else(|| Error::Shape(format!("no attention gate for scale {scale_index}")))?;
        Ok(gate.forward(shared)?)
    }

    /// Applies the representation-task gates to shared maps.
    pub fn gate(&self, shared: &[Tensor]) -> Result<Vec<Tensor>> {
        if !self.config.mtan_enabled {
            return Ok(shared.to_vec());
        }
        shared
            .iter()
            .enumerate()
            .map(|(k, fm)| Ok((self.attention_mask(k, fm)? * fm)?))
            .collect()
    }

    pub fn encode(&self, images: &Tensor, task: Task) -> Result<MultiScaleFeatures> {
        let shared = self.shared_features(images)?;
        let per_scale = match task {
            Task::Reconstruction => shared,
            Task::Representation => self.gate(&shared)?,
        };
        Ok(MultiScaleFeatures { per_scale, task })
    }

    /// Global average pooling and per-scale projection, one `[B, P]` tensor per scale.
    pub fn pool(&self, features: &MultiScaleFeatures) -> Result<Vec<Tensor>> {
        if features.per_scale.len() != self.scale_heads.len() {
            return Err(Error::Shape(format!(
                "expected {} scales, got {}",
                self.scale_heads.len(),
                features.per_scale.len()
            )));
        }
        features
            .per_scale
            .iter()
            .zip(&self.scale_heads)
            .map(|(fm, head)| Ok(head.forward(&fm.mean((2, 3))?)?))
            .collect()
    }

    /// Unit-norm embeddings `[B, embed_dim]`, using running normalization statistics.
    pub fn project(&self, features: &MultiScaleFeatures) -> Result<Tensor> {
        self.project_t(features, false)
    }

    /// As [`project`](Self::project); with `train` the hidden layer is
    /// normalized by batch statistics, which also updates the running ones.
    pub fn project_t(&self, features: &MultiScaleFeatures, train: bool) -> Result<Tensor> {
        let pooled = self.pool(features)?;
        let concat = Tensor::cat(&pooled, 1)?;
        let mut hidden = self.projector.0.forward(&concat)?;
        if let Some(norm) = &self.projector.1 {
            if train && hidden.dim(0)? < 2 {
                return Err(Error::Shape("batch normalization needs at least 2 images per batch".into()));
            }
            hidden = norm.forward_t(&hidden, train)?;
        }
        let z = self.projector.2.forward(&hidden.relu()?)?;
        l2_normalize_rows(&z)
    }

    /// Reconstruction in `[0, 1]` with the input's shape.
    pub fn decode(&self, features: &MultiScaleFeatures) -> Result<Tensor> {
        let maps = &features.per_scale;
        if maps.len() != self.encoder.len() {
            return Err(Error::Shape(format!("expected {} scales, got {}", self.encoder.len(), maps.len())));
        }
        let mut xs = maps[maps.len() - 1].clone();
        for (stage, up) in self.decoder.iter().enumerate() {
            let skip = &maps[maps.len() - 2 - stage];
            xs = up.forward(&xs, skip)?;
        }
        Ok(ops::sigmoid(&self.head.forward(&xs)?)?)
    }

    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.project(&self.encode(images, Task::Representation)?)
    }

    /// One pass for the training objective: reconstruction from the first view
    /// plus embeddings of both views. The first view's shared maps are computed once.
    pub fn forward_views(&self, view1: &Tensor, view2: &Tensor) -> Result<ViewOutputs> {
        let shared1 = self.shared_features(view1)?;
        let reconstruction = self.decode(&MultiScaleFeatures {
            per_scale: shared1.clone(),
            task: Task::Reconstruction,
        })?;
        let z1 = self.project_t(
            &MultiScaleFeatures {
                per_scale: self.gate(&shared1)?,
                task: Task::Representation,
            },
            true,
        )?;
        let z2 = self.project_t(&self.encode(view2, Task::Representation)?, true)?;
        Ok(ViewOutputs { reconstruction, z1, z2 })
    }

    /// Overwrites the gate biases; mainly for probing identity-gate behaviour.
    pub fn set_gate_bias(&self, value: f64) -> Result<()> {
        for (name, var) in self.named_parameters() {
            if name.starts_with("mtan.") && name.ends_with(".excite.bias") {
                var.set(&Tensor::full(value as f32, var.shape(), &self.device)?)?;
            }
        }
        Ok(())
    }
}

pub struct ViewOutputs {
    pub reconstruction: Tensor,
    pub z1: Tensor,
    pub z2: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            stage_widths: vec![2, 4, 4, 8, 8, 4],
            image_size: (16, 16),
            scale_projection: 4,
            projector_hidden: 8,
            embed_dim: 6,
            ..BackboneConfig::reference()
        }
    }

    fn images(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..n * 3 * 16 * 16).map(|_| rng.random::<f32>()).collect();
        Tensor::from_vec(v, (n, 3, 16, 16), &Device::Cpu).unwrap()
    }

    #[test]
    fn rejects_indivisible_sizes() {
        let cfg = BackboneConfig {
            image_size: (20, 16),
            ..tiny()
        };
        assert!(matches!(TrajectoryNet::new(cfg, 0, &Device::Cpu), Err(Error::Shape(_))));
    }

    #[test]
    fn embeddings_are_unit_norm_and_distinct() {
        let net = TrajectoryNet::new(tiny(), 1, &Device::Cpu).unwrap();
        let z = net.embed(&images(2, 5)).unwrap();
        assert_eq!(z.dims(), &[2, 6]);
        let rows = z.to_vec2::<f32>().unwrap();
        for r in &rows {
            let n: f32 = r.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert_ne!(rows[0], rows[1]);
    }

    #[test]
    fn decoder_preserves_shape_and_is_finite_on_zero_features() {
        let net = TrajectoryNet::new(tiny(), 2, &Device::Cpu).unwrap();
        let x = images(1, 0);
        let feats = net.encode(&x, Task::Reconstruction).unwrap();
        assert_eq!(net.decode(&feats).unwrap().dims(), x.dims());
        let zeros = MultiScaleFeatures {
            per_scale: feats.per_scale.iter().map(|t| t.zeros_like().unwrap()).collect(),
            task: Task::Reconstruction,
        };
        let out = net.decode(&zeros).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gates_lie_strictly_inside_unit_interval() {
        let net = TrajectoryNet::new(tiny(), 3, &Device::Cpu).unwrap();
        let shared = net.shared_features(&images(1, 1)).unwrap();
        for (k, fm) in shared.iter().enumerate() {
            let g = net.attention_mask(k, fm).unwrap();
            assert_eq!(g.dims(), fm.dims());
            let v = g.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
            let mean = v.iter().sum::<f32>() / v.len() as f32;
            assert!(mean > 0.9, "near-identity start, mean gate {mean}");
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = TrajectoryNet::new(tiny(), 9, &Device::Cpu).unwrap();
        let b = TrajectoryNet::new(tiny(), 9, &Device::Cpu).unwrap();
        let x = images(2, 3);
        let za = a.embed(&x).unwrap().to_vec2::<f32>().unwrap();
        let zb = b.embed(&x).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(za, zb);
    }

    #[test]
    fn training_pass_updates_running_statistics_only() {
        let net = TrajectoryNet::new(tiny(), 4, &Device::Cpu).unwrap();
        let x = images(4, 6);
        let before = net.embed(&x).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(before, net.embed(&x).unwrap().to_vec2::<f32>().unwrap());
        net.forward_views(&x, &x).unwrap();
        let after = net.embed(&x).unwrap().to_vec2::<f32>().unwrap();
        assert_ne!(before, after);
        let stats: Vec<String> = net
            .named_parameters()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with("projector.norm."))
            .collect();
        assert_eq!(stats.len(), 4);
    }

    #[test]
    fn single_image_training_batch_is_rejected() {
        let net = TrajectoryNet::new(tiny(), 4, &Device::Cpu).unwrap();
        let x = images(1, 6);
        assert!(matches!(net.forward_views(&x, &x), Err(Error::Shape(_))));
        let plain = TrajectoryNet::new(BackboneConfig { projector_norm: false, ..tiny() }, 4, &Device::Cpu).unwrap();
        assert!(plain.forward_views(&x, &x).is_ok());
    }
}
