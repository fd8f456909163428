//! Lateral geniculate nucleus: three parallel, never-mixed pathways.
//!
//! * M: large kernel over the M-type partition, `2m`× channels.
//! * P: channel shuffle then a group-2 small-kernel conv over the P-type
//!   partition, `2p`× channels.
//! * K: the NMP partition split in half; a depthwise conv on the colour
//!   sensitive half and an ungrouped conv on the other, `2k`× channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{CvsError, Result};
use crate::layers::Conv2d;
use crate::params::ParamStore;
use crate::retina::ChannelPartition;
use crate::tape::{Tape, Var};
use crate::tensor::Element;

pub const LGN_SCOPE: &str = "lgn";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LgnConfig {
    pub m_expand: usize,
    pub p_expand: usize,
    pub k_expand: usize,
    pub m_kernel: (usize, usize),
    pub p_kernel: (usize, usize),
    pub k_kernel: (usize, usize),
    pub stride: usize,
}

impl Default for LgnConfig {
    fn default() -> Self {
        LgnConfig { m_expand: 1, p_expand: 2, k_expand: 1, m_kernel: (7, 7), p_kernel: (3, 3), k_kernel: (3, 3), stride: 2 }
    }
}

impl LgnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_expand == 0 || self.p_expand == 0 || self.k_expand == 0 {
            return Err(CvsError::config("lgn", "expansion multipliers must be >= 1"));
        }
        if self.stride == 0 {
            return Err(CvsError::config("lgn", "stride must be positive"));
        }
        for k in [self.m_kernel, self.p_kernel, self.k_kernel] {
            if k.0 % 2 == 0 || k.1 % 2 == 0 {
                return Err(CvsError::config("lgn", format!("kernel {k:?} must be odd")));
            }
        }
        Ok(())
    }
}

/// Channel counts of the three LGN outputs for the given input partition.
pub fn pathway_channels(cfg: &LgnConfig, partition: &ChannelPartition) -> Result<(usize, usize, usize)> {
    let (m_in, p_in, nmp_in) = partition_sizes(partition)?;
    Ok((2 * cfg.m_expand * m_in, 2 * cfg.p_expand * p_in, 2 * cfg.k_expand * nmp_in))
}

fn partition_sizes(partition: &ChannelPartition) -> Result<(usize, usize, usize)> {
    let get = |name| {
        partition
            .range(name)
            .map(|r| r.len())
            .ok_or_else(|| CvsError::shape("lgn", format!("input partition has no `{name}` group")))
    };
    Ok((get("M")?, get("P")?, get("NMP")?))
}

#[derive(Clone, Copy, Debug)]
pub struct PathwayBundle {
    pub m: Var,
    pub p: Var,
    pub k: Var,
}

#[derive(Clone, Debug)]
pub struct Lgn {
    pub m: Conv2d,
    pub p: Conv2d,
    pub k_sensitive: Conv2d,
    pub k_insensitive: Conv2d,
    partition: ChannelPartition,
}

impl Lgn {
    pub fn new<T: Element, R: Rng + ?Sized>(
        cfg: &LgnConfig,
        partition: &ChannelPartition,
        bias: bool,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (m_in, p_in, nmp_in) = partition_sizes(partition)?;
        if p_in % 2 != 0 {
            return Err(CvsError::config("lgn", format!("P partition of {p_in} channels cannot feed a group-2 conv")));
        }
        if nmp_in % 2 != 0 {
            return Err(CvsError::config("lgn", format!("NMP partition of {nmp_in} channels cannot be split evenly")));
        }
        let spec = |cin: usize, cout: usize, k: (usize, usize)| {
            ConvSpec::same(cin, cout, 1, cfg.stride).with_kernel(k.0, k.1).with_bias(bias)
        };
        let half = nmp_in / 2;
        Ok(Lgn {
            m: Conv2d::new(store, "lgn.m", spec(m_in, 2 * cfg.m_expand * m_in, cfg.m_kernel), rng)?,
            p: Conv2d::new(store, "lgn.p", spec(p_in, 2 * cfg.p_expand * p_in, cfg.p_kernel).with_groups(2), rng)?,
            k_sensitive: Conv2d::new(
                store,
                "lgn.k_sensitive",
                spec(half, 2 * cfg.k_expand * half, cfg.k_kernel).with_groups(half),
                rng,
            )?,
            k_insensitive: Conv2d::new(store, "lgn.k_insensitive", spec(half, 2 * cfg.k_expand * half, cfg.k_kernel), rng)?,
            partition: partition.clone(),
        })
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        outer: Var,
        partition: &ChannelPartition,
    ) -> Result<PathwayBundle> {
        if partition != &self.partition {
            return Err(CvsError::shape("lgn", "input partition differs from the one the block was built for"));
        }
        if tape.shape(outer).c != partition.total() {
            return Err(CvsError::shape(
                "lgn",
                format!("input has {} channels, partition covers {}", tape.shape(outer).c, partition.total()),
            ));
        }
        let range = |name: &str| partition.range(name).expect("validated at construction");
        tape.scoped(LGN_SCOPE, |tape| {
            let (mr, pr, kr) = (range("M"), range("P"), range("NMP"));
            let m_in = tape.narrow_channels(outer, mr.start, mr.len())?;
            let p_in = tape.narrow_channels(outer, pr.start, pr.len())?;
            let half = kr.len() / 2;
            let k_sens_in = tape.narrow_channels(outer, kr.start, half)?;
            let k_insens_in = tape.narrow_channels(outer, kr.start + half, half)?;

            let m = self.m.forward(tape, store, m_in)?;
            let m = tape.relu(m);

            let shuffled = tape.channel_shuffle(p_in, 2)?;
            let p = self.p.forward(tape, store, shuffled)?;
            let p = tape.relu(p);

            let ks = self.k_sensitive.forward(tape, store, k_sens_in)?;
            let ki = self.k_insensitive.forward(tape, store, k_insens_in)?;
            let k = tape.concat_channels(&[ks, ki])?;
            let k = tape.relu(k);
            Ok(PathwayBundle { m, p, k })
        })
    }
}

/// Channel shares of the three pathways against the biological 5/90/5 split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathwayRatioReport {
    pub m_channels: usize,
    pub p_channels: usize,
    pub k_channels: usize,
    pub m_share: f64,
    pub p_share: f64,
    pub k_share: f64,
    /// Largest absolute share difference from (0.05, 0.90, 0.05).
    pub max_deviation: f64,
    /// Informational; the ratio is never enforced.
    pub deviates_from_biology: bool,
}

pub const BIOLOGICAL_SHARES: (f64, f64, f64) = (0.05, 0.90, 0.05);

pub fn pathway_ratio_report(cfg: &LgnConfig, partition: &ChannelPartition) -> Result<PathwayRatioReport> {
    cfg.validate()?;
    let (m, p, k) = pathway_channels(cfg, partition)?;
    let total = (m + p + k) as f64;
    let (ms, ps, ks) = (m as f64 / total, p as f64 / total, k as f64 / total);
    let (bm, bp, bk) = BIOLOGICAL_SHARES;
    let max_deviation = [(ms - bm).abs(), (ps - bp).abs(), (ks - bk).abs()].into_iter().fold(0.0, f64::max);
    Ok(PathwayRatioReport {
        m_channels: m,
        p_channels: p,
        k_channels: k,
        m_share: ms,
        p_share: ps,
        k_share: ks,
        max_deviation,
        deviates_from_biology: max_deviation > 0.05,
    })
}
