//! Full network: inner plexiform → outer plexiform → LGN → striate cortex →
//! abstract head, with named tap points on every block boundary.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CvsError, Result};
use crate::head::{AbstractHead, HeadConfig};
use crate::lgn::{pathway_channels, Lgn, LgnConfig, PathwayBundle};
use crate::params::ParamStore;
use crate::retina::{ChannelPartition, InnerPlexiform, OuterPlexiform, RetinaConfig};
use crate::striate::{StriateConfig, StriateCortex, StriateOutputs, STRIATE_OUTPUT_NAMES};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Shape, Tensor4D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_resolution: usize,
    pub seed: u64,
    /// Learned additive biases on convolutions in the retina, LGN and striate blocks.
    pub bias: bool,
    pub retina: RetinaConfig,
    pub lgn: LgnConfig,
    pub striate: StriateConfig,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::imagenet()
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

impl ModelConfig {
    /// 224×224 input, 1000 classes, stride 2 in every block (224 → 14 tokens).
    pub fn imagenet() -> Self {
        ModelConfig {
            input_resolution: 224,
            seed: 0,
            bias: true,
            retina: RetinaConfig::default(),
            lgn: LgnConfig::default(),
            striate: StriateConfig::default(),
            head: HeadConfig::default(),
        }
    }

    /// 32×32 input, 10 classes, strides 1/2/1/2 (32 → 8 tokens).
    pub fn cifar() -> Self {
        let mut cfg = Self::imagenet();
        cfg.input_resolution = 32;
        cfg.retina.inner_stride = 1;
        cfg.retina.outer_stride = 2;
        cfg.lgn.stride = 1;
        cfg.striate.stride = 2;
        cfg.head.classes = 10;
        cfg
    }

    /// Small network for tests and gradient checks.
    pub fn tiny(input_resolution: usize, classes: usize) -> Self {
        let mut cfg = Self::cifar();
        cfg.input_resolution = input_resolution;
        cfg.retina.units_per_cell_type = 1;
        cfg.striate.blob_branch_channels = 2;
        cfg.striate.blob_stem_channels = 2;
        cfg.head.classes = classes;
        cfg.head.token_expansion = 1;
        cfg.head.channel_expansion = 1;
        cfg
    }

    /// Spatial side after each block: inner, outer, LGN, striate.
    pub fn block_resolutions(&self) -> [usize; 4] {
        let inner = ceil_div(self.input_resolution, self.retina.inner_stride.max(1));
        let outer = ceil_div(inner, self.retina.outer_stride.max(1));
        let lgn = ceil_div(outer, self.lgn.stride.max(1));
        let striate = ceil_div(lgn, self.striate.stride.max(1));
        [inner, outer, lgn, striate]
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_resolution == 0 {
            return Err(CvsError::config("model", "input_resolution must be positive"));
        }
        self.retina.validate()?;
        self.lgn.validate()?;
        self.striate.validate()?;
        self.head.validate()?;
        let tokens = self.block_resolutions()[3];
        if tokens < 2 {
            return Err(CvsError::config(
                "model",
                format!("strides reduce {} px to a {tokens}x{tokens} token grid (needs >= 2x2)", self.input_resolution),
            ));
        }
        Ok(())
    }

    /// Key-sorted JSON.
    pub fn to_canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&value)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Ordered tap names exposed by [`Model::forward`].
pub fn tap_names() -> Vec<String> {
    let mut names: Vec<String> = ["inner_out", "outer_out", "lgn.m", "lgn.p", "lgn.k"].iter().map(|s| s.to_string()).collect();
    names.extend(STRIATE_OUTPUT_NAMES.iter().map(|n| format!("striate.{n}")));
    names
}

#[derive(Clone, Debug)]
pub struct Taps {
    vars: BTreeMap<String, Var>,
}

impl Taps {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| CvsError::UnknownTap {
            name: name.to_string(),
            valid: tap_names().join(", "),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }
}

pub struct ForwardPass {
    pub logits: Var,
    pub taps: Taps,
    pub bundle: PathwayBundle,
    pub striate: StriateOutputs,
}

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub inner: InnerPlexiform,
    pub outer: OuterPlexiform,
    pub lgn: Lgn,
    pub striate: StriateCortex,
    pub head: AbstractHead,
}

impl<T: Element> Model<T> {
    /// Seed-deterministic construction.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let bias = config.bias;
        let inner = InnerPlexiform::new(&config.retina, bias, &mut params, &mut rng)?;
        let outer = OuterPlexiform::new(&config.retina, bias, &mut params, &mut rng)?;
        let outer_partition = outer.partition();
        let lgn = Lgn::new(&config.lgn, &outer_partition, bias, &mut params, &mut rng)?;
        let lgn_channels = pathway_channels(&config.lgn, &outer_partition)?;
        let striate = StriateCortex::new(&config.striate, lgn_channels, bias, &mut params, &mut rng)?;
        let tokens = config.block_resolutions()[3];
        let head = AbstractHead::new(&config.head, &striate.output_channels(), (tokens, tokens), &mut params, &mut rng)?;
        Ok(Model { config, params, inner, outer, lgn, striate, head })
    }

    /// Same architecture with parameters converted to another element type.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            inner: self.inner.clone(),
            outer: self.outer.clone(),
            lgn: self.lgn.clone(),
            striate: self.striate.clone(),
            head: self.head.clone(),
        }
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        let r = self.config.input_resolution;
        Shape::new(batch, 3, r, r)
    }

    /// Channel partitions of the inner and outer block outputs.
    pub fn partitions(&self) -> BTreeMap<String, ChannelPartition> {
        BTreeMap::from([
            ("inner_out".to_string(), self.inner.partition()),
            ("outer_out".to_string(), self.outer.partition()),
        ])
    }

    pub fn forward(&self, tape: &mut Tape<T>, images: Var) -> Result<ForwardPass> {
        let s = tape.shape(images);
        let want = self.input_shape(s.n);
        if s != want {
            return Err(CvsError::shape("model.forward", format!("images {s}, expected {want}")));
        }
        let store = &self.params;
        let inner = self.inner.forward(tape, store, images)?;
        let outer = self.outer.forward(tape, store, inner.color, inner.grey)?;
        let bundle = self.lgn.forward(tape, store, outer.combined, &outer.partition)?;
        let striate = self.striate.forward(tape, store, &bundle)?;
        let logits = self.head.forward(tape, store, &striate)?;

        let mut vars = BTreeMap::new();
        vars.insert("inner_out".to_string(), inner.combined);
        vars.insert("outer_out".to_string(), outer.combined);
        vars.insert("lgn.m".to_string(), bundle.m);
        vars.insert("lgn.p".to_string(), bundle.p);
        vars.insert("lgn.k".to_string(), bundle.k);
        for (name, v) in striate.named() {
            vars.insert(format!("striate.{name}"), v);
        }
        Ok(ForwardPass { logits, taps: Taps { vars }, bundle, striate })
    }

    /// Forward without gradient bookkeeping; returns logits.
    pub fn predict(&self, images: &Tensor4D<T>) -> Result<Tensor4D<T>> {
        let mut tape = Tape::new();
        let x = tape.input(images.clone());
        let out = self.forward(&mut tape, x)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn cost_report(&self) -> Result<CostReport> {
        let mut tape = Tape::new();
        let x = tape.input(Tensor4D::zeros(self.input_shape(1)));
        self.forward(&mut tape, x)?;
        Ok(CostReport::from_tape(&self.params, &tape, 1))
    }
}

/// Parameter and FLOP totals; FLOPs are `2 × multiply-accumulates` of the
/// convolutions and linear maps for one input item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    pub per_block_params: BTreeMap<String, u64>,
}

impl CostReport {
    /// From a store and a tape holding one forward pass over `batch` items.
    pub fn from_tape<T: Element>(params: &ParamStore<T>, tape: &Tape<T>, batch: usize) -> Self {
        let macs = tape.macs() / batch.max(1) as u64;
        let mut per_block_params = BTreeMap::new();
        for (_, p) in params.iter() {
            let block = p.name.split('.').next().unwrap_or("").to_string();
            *per_block_params.entry(block).or_insert(0) += p.value.len() as u64;
        }
        CostReport { params: params.numel() as u64, macs, flops: 2 * macs, per_block_params }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("params: {} ({:.3} M)\n", self.params, self.params as f64 / 1e6));
        out.push_str(&format!("flops:  {} ({:.3} G)\n", self.flops, self.flops as f64 / 1e9));
        for (block, n) in &self.per_block_params {
            out.push_str(&format!("  {block:<8} {n}\n"));
        }
        out
    }
}
