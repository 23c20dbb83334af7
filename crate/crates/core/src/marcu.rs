//! Multi-scale attentional residual convolution units and the backbone
//! that stacks them.
//!
//! A block runs 1×1, 3×3 and 5×5 convolutions in parallel with 1/4, 1/2
//! and 1/4 of the output channels, concatenates them, applies ReLU, gates
//! the channels with an ECA-style attention (global pool, 1-D convolution
//! across channels, sigmoid), adds the shortcut and applies ReLU again.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::window_out;
use crate::layers::{Bound, Conv1dLayer, Conv2dLayer, ParamStore};

/// Channels above this use a width-5 attention kernel, at or below width 3.
pub const DEFAULT_ATTENTION_THRESHOLD: usize = 128;

/// Width of the 1-D attention convolution for a block with `channels` outputs.
pub fn attention_kernel_rule(channels: usize) -> usize {
    attention_kernel_rule_with(channels, DEFAULT_ATTENTION_THRESHOLD)
}

pub fn attention_kernel_rule_with(channels: usize, threshold: usize) -> usize {
    if channels <= threshold {
        3
    } else {
        5
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarcuBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub attention_kernel: usize,
}

impl MarcuBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || !self.out_channels.is_multiple_of(4) {
            return Err(Error::invalid(format!(
                "block output channels {} must be a positive multiple of 4",
                self.out_channels
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::invalid("block input channels must be positive"));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::invalid(format!("block stride {} must be 1 or 2", self.stride)));
        }
        if !matches!(self.attention_kernel, 3 | 5) {
            return Err(Error::invalid(format!(
                "attention kernel {} must be 3 or 5",
                self.attention_kernel
            )));
        }
        Ok(())
    }

    /// Output widths of the 1×1, 3×3 and 5×5 branches.
    pub fn branch_widths(&self) -> (usize, usize, usize) {
        let q = self.out_channels / 4;
        (q, 2 * q, q)
    }

    pub fn needs_projection(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::invalid(format!("unknown preset `{other}` (expected paper or desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub stem_kernel: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub stage_blocks: [usize; 4],
    pub stage_channels: [usize; 4],
    pub attention_threshold: usize,
    pub input_resolution: usize,
}

impl NetworkConfig {
    /// Full-size network: 224 input, [6, 8, 12, 6] blocks.
    pub fn paper() -> Self {
        NetworkConfig {
            in_channels: 3,
            stem_kernel: 7,
            stem_channels: 64,
            stem_stride: 2,
            pool_kernel: 3,
            pool_stride: 2,
            stage_blocks: [6, 8, 12, 6],
            stage_channels: [64, 128, 256, 512],
            attention_threshold: DEFAULT_ATTENTION_THRESHOLD,
            input_resolution: 224,
        }
    }

    /// Reduced network for gradient checks and minute-scale training.
    pub fn desk() -> Self {
        NetworkConfig {
            in_channels: 3,
            stem_kernel: 3,
            stem_channels: 16,
            stem_stride: 1,
            pool_kernel: 2,
            pool_stride: 2,
            stage_blocks: [1, 1, 1, 1],
            stage_channels: [16, 32, 64, 128],
            attention_threshold: DEFAULT_ATTENTION_THRESHOLD,
            input_resolution: 64,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn stem_padding(&self) -> usize {
        self.stem_kernel / 2
    }

    pub fn pool_padding(&self) -> usize {
        (self.pool_kernel - 1) / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.stage_channels[3]
    }

    /// Block configurations in execution order.
    pub fn block_configs(&self) -> Vec<MarcuBlockConfig> {
        let mut out = Vec::new();
        let mut c_in = self.stem_channels;
        for (stage, (&blocks, &c_out)) in self.stage_blocks.iter().zip(&self.stage_channels).enumerate() {
            for b in 0..blocks {
                out.push(MarcuBlockConfig {
                    in_channels: c_in,
                    out_channels: c_out,
                    stride: if stage > 0 && b == 0 { 2 } else { 1 },
                    attention_kernel: attention_kernel_rule_with(c_out, self.attention_threshold),
                });
                c_in = c_out;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_kernel.is_multiple_of(2) || self.stem_channels == 0 || self.stem_stride == 0 {
            return Err(Error::invalid("stem needs an odd kernel, positive channels and stride"));
        }
        if self.pool_kernel == 0 || self.pool_stride == 0 {
            return Err(Error::invalid("pool kernel and stride must be positive"));
        }
        if self.in_channels == 0 {
            return Err(Error::invalid("input channels must be positive"));
        }
        if self.stage_blocks.contains(&0) {
            return Err(Error::invalid("every stage needs at least one block"));
        }
        for cfg in self.block_configs() {
            cfg.validate()?;
        }
        self.shape_trace(self.input_resolution).map(|_| ())
    }

    /// Spatial sizes after the stem, the pool and each stage, computed
    /// from the window formula alone.
    pub fn shape_trace(&self, resolution: usize) -> Result<ShapeTrace> {
        let too_small = || Error::invalid(format!("input resolution {resolution} too small for this network"));
        let stem = window_out(resolution, self.stem_kernel, self.stem_stride, self.stem_padding()).ok_or_else(too_small)?;
        let pool = window_out(stem, self.pool_kernel, self.pool_stride, self.pool_padding()).ok_or_else(too_small)?;
        let mut size = pool;
        let mut stages = Vec::with_capacity(4);
        for cfg in self.block_configs() {
            // The 5×5 branch with padding 2 sets the constraint.
            size = window_out(size, 5, cfg.stride, 2).ok_or_else(too_small)?;
            if cfg.stride == 2 || stages.is_empty() {
                stages.push(size);
            } else {
                *stages.last_mut().expect("non-empty") = size;
            }
        }
        Ok(ShapeTrace { stem, pool, stages })
    }

    /// Layer-count bookkeeping. Table-style numbering counts the stem, the
    /// pool and one layer per block; the weighted depth counts convolutions
    /// on the longest path, with and without the attention convolutions.
    pub fn depth_report(&self) -> DepthReport {
        let blocks: usize = self.stage_blocks.iter().sum();
        DepthReport {
            numbered_layers: 2 + blocks,
            conv_depth_without_attention: 1 + blocks,
            conv_depth_with_attention: 1 + 2 * blocks,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DepthReport {
    pub numbered_layers: usize,
    pub conv_depth_without_attention: usize,
    pub conv_depth_with_attention: usize,
}

/// Spatial extent after the stem, after the pool, and at the end of each stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ShapeTrace {
    pub stem: usize,
    pub pool: usize,
    pub stages: Vec<usize>,
}

impl ShapeTrace {
    /// `[stem, pool, stage1, .., stage4]`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut v = vec![self.stem, self.pool];
        v.extend(&self.stages);
        v
    }

    /// Distinct sizes at resolution changes.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut v = self.sizes();
        v.dedup();
        v
    }
}

#[derive(Clone, Debug)]
pub struct MarcuBlock {
    pub cfg: MarcuBlockConfig,
    pub branch1: Conv2dLayer,
    pub branch3: Conv2dLayer,
    pub branch5: Conv2dLayer,
    pub attention: Conv1dLayer,
    pub shortcut: Option<Conv2dLayer>,
}

impl MarcuBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: MarcuBlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (w1, w3, w5) = cfg.branch_widths();
        let c = cfg.in_channels;
        let branch1 = Conv2dLayer::new(store, &format!("{name}.branch1"), c, w1, 1, cfg.stride, rng)?;
        let branch3 = Conv2dLayer::new(store, &format!("{name}.branch3"), c, w3, 3, cfg.stride, rng)?;
        let branch5 = Conv2dLayer::new(store, &format!("{name}.branch5"), c, w5, 5, cfg.stride, rng)?;
        let attention = Conv1dLayer::new(store, &format!("{name}.attention"), cfg.attention_kernel, rng)?;
        let shortcut = if cfg.needs_projection() {
            Some(Conv2dLayer::new(
                store,
                &format!("{name}.shortcut"),
                c,
                cfg.out_channels,
                1,
                cfg.stride,
                rng,
            )?)
        } else {
            None
        };
        Ok(MarcuBlock {
            cfg,
            branch1,
            branch3,
            branch5,
            attention,
            shortcut,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        marcu_block(g, p, self, x)
    }
}

/// Parallel 1×1/3×3/5×5 branches, channel-concatenated, then ReLU.
pub fn multi_scale_conv(g: &mut Graph, p: &Bound, block: &MarcuBlock, x: Var) -> Result<Var> {
    let a = block.branch1.forward(g, p, x)?;
    let b = block.branch3.forward(g, p, x)?;
    let c = block.branch5.forward(g, p, x)?;
    let cat = g.concat(&[a, b, c])?;
    Ok(g.relu(cat))
}

/// Channel gating: global pool → 1-D conv across channels → sigmoid → scale.
pub fn eca_attention(g: &mut Graph, x: Var, kernel: Var) -> Result<Var> {
    let k = g.value(kernel).numel();
    let pooled = g.global_avg_pool(x)?;
    let mixed = g.conv1d(pooled, kernel, (k.max(1) - 1) / 2)?;
    let weights = g.sigmoid(mixed);
    g.mul_channel(x, weights)
}

pub fn marcu_block(g: &mut Graph, p: &Bound, block: &MarcuBlock, x: Var) -> Result<Var> {
    let features = multi_scale_conv(g, p, block, x)?;
    let attended = eca_attention(g, features, p.var(block.attention.kernel))?;
    let skip = match &block.shortcut {
        Some(proj) => proj.forward(g, p, x)?,
        None => x,
    };
    let sum = g.add(attended, skip)?;
    Ok(g.relu(sum))
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: NetworkConfig,
    pub stem: Conv2dLayer,
    pub blocks: Vec<MarcuBlock>,
}

/// Feature vectors plus the spatial size observed after each stage.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub features: Var,
    pub trace: ShapeTrace,
}

impl Backbone {
    pub fn forward(&self, g: &mut Graph, p: &Bound, input: Var) -> Result<BackboneOutput> {
        let cfg = &self.cfg;
        let spatial = |g: &Graph, v: Var| g.value(v).shape()[2];
        let stem = self.stem.forward(g, p, input)?;
        let stem = g.relu(stem);
        let stem_size = spatial(g, stem);
        let mut x = g.maxpool2d(stem, cfg.pool_kernel, cfg.pool_stride, cfg.pool_padding())?;
        let pool_size = spatial(g, x);
        let mut stages = Vec::with_capacity(4);
        for block in &self.blocks {
            x = block.forward(g, p, x)?;
            if block.cfg.stride == 2 || stages.is_empty() {
                stages.push(spatial(g, x));
            } else {
                *stages.last_mut().expect("non-empty") = spatial(g, x);
            }
        }
        let features = g.global_avg_pool(x)?;
        Ok(BackboneOutput {
            features,
            trace: ShapeTrace {
                stem: stem_size,
                pool: pool_size,
                stages,
            },
        })
    }
}

/// Registers every backbone parameter in `store` under `backbone.*`.
pub fn build_backbone<R: Rng + ?Sized>(cfg: &NetworkConfig, store: &mut ParamStore, rng: &mut R) -> Result<Backbone> {
    cfg.validate()?;
    let stem = Conv2dLayer::new(
        store,
        "backbone.stem",
        cfg.in_channels,
        cfg.stem_channels,
        cfg.stem_kernel,
        cfg.stem_stride,
        rng,
    )?;
    let mut blocks = Vec::new();
    let mut per_stage = [0usize; 4];
    let mut stage = 0;
    for (i, bc) in cfg.block_configs().into_iter().enumerate() {
        while i >= cfg.stage_blocks[..=stage].iter().sum::<usize>() {
            stage += 1;
        }
        let name = format!("backbone.stage{}.block{}", stage + 1, per_stage[stage]);
        per_stage[stage] += 1;
        blocks.push(MarcuBlock::new(store, &name, bc, rng)?);
    }
    Ok(Backbone {
        cfg: cfg.clone(),
        stem,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_rule_matches_stage_plan() {
        assert_eq!(attention_kernel_rule(64), 3);
        assert_eq!(attention_kernel_rule(128), 3);
        assert_eq!(attention_kernel_rule(256), 5);
        assert_eq!(attention_kernel_rule(512), 5);
    }

    #[test]
    fn branch_widths() {
        let cfg = |c| MarcuBlockConfig {
            in_channels: c,
            out_channels: c,
            stride: 1,
            attention_kernel: 3,
        };
        assert_eq!(cfg(64).branch_widths(), (16, 32, 16));
        assert_eq!(cfg(512).branch_widths(), (128, 256, 128));
        assert!(cfg(66).validate().is_err());
    }

    #[test]
    fn paper_trace_and_depth() {
        let cfg = NetworkConfig::paper();
        let trace = cfg.shape_trace(224).unwrap();
        assert_eq!(trace.sizes(), vec![112, 56, 56, 28, 14, 7]);
        assert_eq!(trace.boundaries(), vec![112, 56, 28, 14, 7]);
        let depth = cfg.depth_report();
        assert_eq!(depth.numbered_layers, 34);
        assert_eq!(depth.conv_depth_with_attention, 65);
        assert_eq!(depth.conv_depth_without_attention, 33);
    }

    #[test]
    fn desk_trace() {
        let cfg = NetworkConfig::desk();
        let trace = cfg.shape_trace(64).unwrap();
        assert_eq!(trace.sizes(), vec![64, 32, 32, 16, 8, 4]);
        assert_eq!(cfg.feature_dim(), 128);
    }

    #[test]
    fn desk_forward_matches_analytic_trace() {
        let cfg = NetworkConfig::desk();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = build_backbone(&cfg, &mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::uniform([1, 3, 64, 64], 1.0, &mut rng));
        let out = bb.forward(&mut g, &p, x).unwrap();
        assert_eq!(out.trace, cfg.shape_trace(64).unwrap());
        assert_eq!(g.value(out.features).shape(), &[1, 128]);
    }

    #[test]
    fn stride_two_block_halves() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = MarcuBlockConfig {
            in_channels: 4,
            out_channels: 8,
            stride: 2,
            attention_kernel: 3,
        };
        let block = MarcuBlock::new(&mut store, "b", cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::uniform([1, 4, 56, 56], 1.0, &mut rng));
        let y = block.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 8, 28, 28]);
    }

    #[test]
    fn param_count_is_reproducible() {
        let count = || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            build_backbone(&NetworkConfig::desk(), &mut store, &mut rng).unwrap();
            (store.count(), store.len())
        };
        assert_eq!(count(), count());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = NetworkConfig::desk();
        cfg.stage_channels[1] = 30;
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::desk();
        cfg.input_resolution = 1;
        assert!(cfg.validate().is_err());
    }
}
