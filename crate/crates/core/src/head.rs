//! Abstract cognitive layer: per-group mixer blocks, channel halving,
//! a global mixer over the concatenated groups, then classification.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{CvsError, Result};
use crate::layers::{Conv2d, LayerNorm, Linear, TokenLinear};
use crate::params::ParamStore;
use crate::striate::{StriateOutputs, STRIATE_OUTPUT_NAMES};
use crate::tape::{Tape, Var};
use crate::tensor::Element;

pub const HEAD_SCOPE: &str = "head";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    fn apply<T: Element>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerBlockSpec {
    pub token_hw: (usize, usize),
    pub channel_count: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    pub activation: Activation,
}

impl MixerBlockSpec {
    pub fn token_count(&self) -> usize {
        self.token_hw.0 * self.token_hw.1
    }
}

/// Pre-norm token mixing then channel mixing, each with a residual; the
/// input shape is preserved.
#[derive(Clone, Debug)]
pub struct MixerBlock {
    pub spec: MixerBlockSpec,
    pub norm_tokens: LayerNorm,
    pub token_fc1: TokenLinear,
    pub token_fc2: TokenLinear,
    pub norm_channels: LayerNorm,
    pub channel_fc1: Conv2d,
    pub channel_fc2: Conv2d,
}

impl MixerBlock {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: MixerBlockSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let c = spec.channel_count;
        let t = spec.token_count();
        if c == 0 || t == 0 || spec.token_hidden == 0 || spec.channel_hidden == 0 {
            return Err(CvsError::config("mixer", format!("degenerate mixer {spec:?}")));
        }
        Ok(MixerBlock {
            spec,
            norm_tokens: LayerNorm::new(store, &format!("{name}.norm_tokens"), c),
            token_fc1: TokenLinear::new(store, &format!("{name}.token_fc1"), t, (spec.token_hidden, 1), rng),
            token_fc2: TokenLinear::new(store, &format!("{name}.token_fc2"), spec.token_hidden, spec.token_hw, rng),
            norm_channels: LayerNorm::new(store, &format!("{name}.norm_channels"), c),
            channel_fc1: Conv2d::new(
                store,
                &format!("{name}.channel_fc1"),
                ConvSpec::same(c, spec.channel_hidden, 1, 1).with_bias(true),
                rng,
            )?,
            channel_fc2: Conv2d::new(
                store,
                &format!("{name}.channel_fc2"),
                ConvSpec::same(spec.channel_hidden, c, 1, 1).with_bias(true),
                rng,
            )?,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.c != self.spec.channel_count || (s.h, s.w) != self.spec.token_hw {
            return Err(CvsError::shape(
                "group_mix",
                format!("input {s} but mixer expects {} channels on {:?} tokens", self.spec.channel_count, self.spec.token_hw),
            ));
        }
        let act = self.spec.activation;
        let y = self.norm_tokens.forward(tape, store, x)?;
        let y = self.token_fc1.forward(tape, store, y)?;
        let y = act.apply(tape, y);
        let y = self.token_fc2.forward(tape, store, y)?;
        let x = tape.add(x, y)?;
        let z = self.norm_channels.forward(tape, store, x)?;
        let z = self.channel_fc1.forward(tape, store, z)?;
        let z = act.apply(tape, z);
        let z = self.channel_fc2.forward(tape, store, z)?;
        tape.add(x, z)
    }
}

/// Halved width for a group of `c` channels.
pub fn halved(c: usize) -> usize {
    (c / 2).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub groups: usize,
    pub classes: usize,
    pub token_expansion: usize,
    pub channel_expansion: usize,
    pub activation: Activation,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { groups: 6, classes: 1000, token_expansion: 2, channel_expansion: 2, activation: Activation::Gelu }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups != STRIATE_OUTPUT_NAMES.len() {
            return Err(CvsError::config(
                "head",
                format!("groups must equal the {} striate outputs, got {}", STRIATE_OUTPUT_NAMES.len(), self.groups),
            ));
        }
        if self.classes == 0 || self.token_expansion == 0 || self.channel_expansion == 0 {
            return Err(CvsError::config("head", "classes and expansions must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AbstractHead {
    pub group_mixers: Vec<MixerBlock>,
    pub halvers: Vec<Conv2d>,
    pub global_mixer: MixerBlock,
    pub final_norm: LayerNorm,
    pub classifier: Linear,
}

impl AbstractHead {
    /// `group_channels` in striate output order, all on a `token_hw` grid.
    pub fn new<T: Element, R: Rng + ?Sized>(
        cfg: &HeadConfig,
        group_channels: &[usize],
        token_hw: (usize, usize),
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if group_channels.len() != cfg.groups {
            return Err(CvsError::config("head", format!("{} groups supplied", group_channels.len())));
        }
        let tokens = token_hw.0 * token_hw.1;
        let mixer_spec = |c: usize| MixerBlockSpec {
            token_hw,
            channel_count: c,
            token_hidden: cfg.token_expansion * tokens,
            channel_hidden: cfg.channel_expansion * c,
            activation: cfg.activation,
        };
        let mut group_mixers = Vec::new();
        let mut halvers = Vec::new();
        for (name, &c) in STRIATE_OUTPUT_NAMES.iter().zip(group_channels) {
            group_mixers.push(MixerBlock::new(store, &format!("head.mix.{name}"), mixer_spec(c), rng)?);
            halvers.push(Conv2d::new(store, &format!("head.halve.{name}"), ConvSpec::same(c, halved(c), 1, 1), rng)?);
        }
        let total: usize = group_channels.iter().map(|&c| halved(c)).sum();
        let global_mixer = MixerBlock::new(store, "head.mix.global", mixer_spec(total), rng)?;
        let final_norm = LayerNorm::new(store, "head.norm", total);
        let classifier = Linear::new(store, "head.classifier", total, cfg.classes, rng);
        Ok(AbstractHead { group_mixers, halvers, global_mixer, final_norm, classifier })
    }

    /// Per-group `c → c/2` pointwise maps, concatenated.
    pub fn halve_and_concat<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, groups: &[Var]) -> Result<Var> {
        if groups.len() != self.halvers.len() {
            return Err(CvsError::shape("halve_and_concat", format!("{} groups, expected {}", groups.len(), self.halvers.len())));
        }
        let s0 = tape.shape(groups[0]);
        let mut halves = Vec::with_capacity(groups.len());
        for (halver, &g) in self.halvers.iter().zip(groups) {
            let s = tape.shape(g);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(CvsError::shape("halve_and_concat", format!("group {s} misaligned with {s0}")));
            }
            halves.push(halver.forward(tape, store, g)?);
        }
        tape.concat_channels(&halves)
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, s: &StriateOutputs) -> Result<Var> {
        tape.scoped(HEAD_SCOPE, |tape| {
            let mixed = self
                .group_mixers
                .iter()
                .zip(s.as_array())
                .map(|(m, g)| m.forward(tape, store, g))
                .collect::<Result<Vec<_>>>()?;
            let total = self.halve_and_concat(tape, store, &mixed)?;
            let total = self.global_mixer.forward(tape, store, total)?;
            let total = self.final_norm.forward(tape, store, total)?;
            let pooled = tape.global_avg_pool(total);
            self.classifier.forward(tape, store, pooled)
        })
    }
}
