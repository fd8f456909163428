//! Inner and outer plexiform blocks.
//!
//! The inner block splits the image into colour-sensitive planes (R, G, B,
//! each processed by depthwise convolutions so the planes never mix) and a
//! colour-insensitive grey plane (R+G+B). Every plane feeds light-giving and
//! light-extracting center–surround populations.
//!
//! The outer block builds colour-opponent populations (R/G for P-type cells,
//! B/Y for NMP cells) from the inner colour channels and large-field
//! center–surround M-type cells from the grey channels.
//!
//! Neither block contains a normalization layer; the center/surround ratio
//! of each unit is carried through unchanged.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{CvsError, Result};
use crate::layers::Conv2d;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Element;

pub const INNER_SCOPE: &str = "inner_plexiform";
pub const OUTER_SCOPE: &str = "outer_plexiform";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetinaConfig {
    pub units_per_cell_type: usize,
    pub small_kernel: (usize, usize),
    pub large_kernel: (usize, usize),
    /// Surround of the M-type units; their center uses `large_kernel`.
    pub m_surround_kernel: (usize, usize),
    pub inner_stride: usize,
    pub outer_stride: usize,
    /// Gain of "positive" cells.
    pub positive_gain: f64,
    /// Gain of "negative" cells.
    pub negative_gain: f64,
    /// Bypass the rectifiers (analytic tests only).
    pub test_linear: bool,
}

impl Default for RetinaConfig {
    fn default() -> Self {
        RetinaConfig {
            units_per_cell_type: 4,
            small_kernel: (3, 3),
            large_kernel: (7, 7),
            m_surround_kernel: (11, 11),
            inner_stride: 2,
            outer_stride: 2,
            positive_gain: 1.0,
            negative_gain: -0.3,
            test_linear: false,
        }
    }
}

impl RetinaConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |d: String| Err(CvsError::config("retina", d));
        if self.units_per_cell_type == 0 {
            return err("units_per_cell_type must be positive".into());
        }
        if self.inner_stride == 0 || self.outer_stride == 0 {
            return err("strides must be positive".into());
        }
        for (name, k) in [
            ("small_kernel", self.small_kernel),
            ("large_kernel", self.large_kernel),
            ("m_surround_kernel", self.m_surround_kernel),
        ] {
            if k.0 % 2 == 0 || k.1 % 2 == 0 {
                return err(format!("{name} {k:?} must be odd so branches stay aligned"));
            }
        }
        if !strictly_larger(self.large_kernel, self.small_kernel) {
            return err("large_kernel must exceed small_kernel in both dimensions".into());
        }
        if !strictly_larger(self.m_surround_kernel, self.large_kernel) {
            return err("m_surround_kernel must exceed large_kernel in both dimensions".into());
        }
        if !(self.positive_gain > 0.0 && self.negative_gain < 0.0) {
            return err("positive_gain must be > 0 and negative_gain < 0".into());
        }
        Ok(())
    }

    pub fn inner_channels(&self) -> usize {
        3 * 2 * self.units_per_cell_type + 2 * self.units_per_cell_type
    }

    pub fn outer_channels(&self) -> usize {
        10 * self.units_per_cell_type
    }
}

fn strictly_larger(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 > b.0 && a.1 > b.1
}

/// Named contiguous channel ranges of a block output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPartition {
    pub groups: Vec<PartitionGroup>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionGroup {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl ChannelPartition {
    pub fn from_sizes(sizes: &[(&str, usize)]) -> Self {
        let mut start = 0;
        let groups = sizes
            .iter()
            .map(|&(name, len)| {
                let g = PartitionGroup { name: name.to_string(), start, len };
                start += len;
                g
            })
            .collect();
        ChannelPartition { groups }
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.groups.iter().find(|g| g.name == name).map(|g| g.start..g.start + g.len)
    }

    pub fn total(&self) -> usize {
        self.groups.iter().map(|g| g.len).sum()
    }
}

/// Per-pixel `R + G + B`.
pub fn to_grey<T: Element>(tape: &mut Tape<T>, rgb: Var) -> Result<Var> {
    require_rgb(tape, rgb, "to_grey")?;
    tape.channel_sum(rgb, &[0, 1, 2])
}

/// Per-pixel `R + G`.
pub fn to_yellow<T: Element>(tape: &mut Tape<T>, rgb: Var) -> Result<Var> {
    require_rgb(tape, rgb, "to_yellow")?;
    tape.channel_sum(rgb, &[0, 1])
}

fn require_rgb<T: Element>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<()> {
    let c = tape.shape(x).c;
    if c != 3 {
        return Err(CvsError::shape(op, format!("expected 3 channels, got {c}")));
    }
    Ok(())
}

/// Small-kernel center plus large-kernel surround with opposite-signed gains.
#[derive(Clone, Debug)]
pub struct CenterSurroundUnit {
    pub center: Conv2d,
    pub surround: Conv2d,
    pub center_gain: f64,
    pub surround_gain: f64,
    pub test_linear: bool,
}

impl CenterSurroundUnit {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        center: ConvSpec,
        surround: ConvSpec,
        gains: (f64, f64),
        test_linear: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (center_gain, surround_gain) = gains;
        if !(center_gain * surround_gain < 0.0) {
            return Err(CvsError::config("center_surround", format!("gains {gains:?} must have opposite signs")));
        }
        if !strictly_larger(surround.kernel, center.kernel) {
            return Err(CvsError::config(
                "center_surround",
                format!("surround kernel {:?} must exceed center {:?}", surround.kernel, center.kernel),
            ));
        }
        if (center.in_channels, center.out_channels, center.stride, center.groups)
            != (surround.in_channels, surround.out_channels, surround.stride, surround.groups)
        {
            return Err(CvsError::config("center_surround", "center and surround channel layouts differ"));
        }
        let center = Conv2d::new(store, &format!("{name}.center"), center, rng)?;
        let surround = Conv2d::new(store, &format!("{name}.surround"), surround, rng)?;
        Ok(CenterSurroundUnit { center, surround, center_gain, surround_gain, test_linear })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.forward_split(tape, store, x, x)
    }

    /// Center reads `center_in`, surround reads `surround_in`.
    pub fn forward_split<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        center_in: Var,
        surround_in: Var,
    ) -> Result<Var> {
        let c = self.center.forward(tape, store, center_in)?;
        let s = self.surround.forward(tape, store, surround_in)?;
        if tape.shape(c) != tape.shape(s) {
            return Err(CvsError::shape(
                "center_surround",
                format!("center {} and surround {} misaligned", tape.shape(c), tape.shape(s)),
            ));
        }
        let (c, s) = if self.test_linear {
            (tape.scale(c, self.center_gain), tape.scale(s, self.surround_gain))
        } else {
            (tape.scaled_relu(c, self.center_gain)?, tape.scaled_relu(s, self.surround_gain)?)
        };
        tape.add(c, s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorPlane {
    R,
    G,
    B,
    /// R + G
    Y,
}

/// Colour-opponent unit: center on `plus`, surround on `minus`.
#[derive(Clone, Debug)]
pub struct OpponentUnit {
    pub plus: ColorPlane,
    pub minus: ColorPlane,
    pub unit: CenterSurroundUnit,
}

impl OpponentUnit {
    pub fn new(plus: ColorPlane, minus: ColorPlane, unit: CenterSurroundUnit) -> Result<Self> {
        if plus == minus {
            return Err(CvsError::config("opponent", format!("plus and minus planes are both {plus:?}")));
        }
        Ok(OpponentUnit { plus, minus, unit })
    }

    /// Applies the unit to the selected planes of a 3-channel image.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, rgb: Var) -> Result<Var> {
        require_rgb(tape, rgb, "opponent")?;
        let plus = select_plane(tape, rgb, self.plus)?;
        let minus = select_plane(tape, rgb, self.minus)?;
        self.forward_planes(tape, store, plus, minus)
    }

    pub fn forward_planes<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        plus: Var,
        minus: Var,
    ) -> Result<Var> {
        self.unit.forward_split(tape, store, plus, minus)
    }
}

fn select_plane<T: Element>(tape: &mut Tape<T>, rgb: Var, plane: ColorPlane) -> Result<Var> {
    match plane {
        ColorPlane::R => tape.select_channels(rgb, &[0]),
        ColorPlane::G => tape.select_channels(rgb, &[1]),
        ColorPlane::B => tape.select_channels(rgb, &[2]),
        ColorPlane::Y => to_yellow(tape, rgb),
    }
}

fn unit_specs(
    in_channels: usize,
    out_channels: usize,
    groups: usize,
    center: (usize, usize),
    surround: (usize, usize),
    stride: usize,
    bias: bool,
) -> (ConvSpec, ConvSpec) {
    let base = ConvSpec::same(in_channels, out_channels, 1, stride).with_groups(groups).with_bias(bias);
    (base.with_kernel(center.0, center.1), base.with_kernel(surround.0, surround.1))
}

pub struct InnerOutput {
    /// `[giving: R×u, G×u, B×u | extracting: R×u, G×u, B×u]`
    pub color: Var,
    /// `[giving ×u | extracting ×u]`
    pub grey: Var,
    pub combined: Var,
}

#[derive(Clone, Debug)]
pub struct InnerPlexiform {
    pub units: usize,
    pub color_giving: CenterSurroundUnit,
    pub color_extracting: CenterSurroundUnit,
    pub grey_giving: CenterSurroundUnit,
    pub grey_extracting: CenterSurroundUnit,
}

impl InnerPlexiform {
    pub fn new<T: Element, R: Rng + ?Sized>(
        cfg: &RetinaConfig,
        bias: bool,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let u = cfg.units_per_cell_type;
        let giving = (cfg.positive_gain, cfg.negative_gain);
        let extracting = (cfg.negative_gain, cfg.positive_gain);
        let (cc, cs) = unit_specs(3, 3 * u, 3, cfg.small_kernel, cfg.large_kernel, cfg.inner_stride, bias);
        let (gc, gs) = unit_specs(1, u, 1, cfg.small_kernel, cfg.large_kernel, cfg.inner_stride, bias);
        let lin = cfg.test_linear;
        Ok(InnerPlexiform {
            units: u,
            color_giving: CenterSurroundUnit::new(store, "inner.color_giving", cc, cs, giving, lin, rng)?,
            color_extracting: CenterSurroundUnit::new(store, "inner.color_extracting", cc, cs, extracting, lin, rng)?,
            grey_giving: CenterSurroundUnit::new(store, "inner.grey_giving", gc, gs, giving, lin, rng)?,
            grey_extracting: CenterSurroundUnit::new(store, "inner.grey_extracting", gc, gs, extracting, lin, rng)?,
        })
    }

    pub fn partition(&self) -> ChannelPartition {
        let u = self.units;
        ChannelPartition::from_sizes(&[
            ("color.giving", 3 * u),
            ("color.extracting", 3 * u),
            ("grey.giving", u),
            ("grey.extracting", u),
        ])
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, rgb: Var) -> Result<InnerOutput> {
        require_rgb(tape, rgb, "inner_plexiform")?;
        tape.scoped(INNER_SCOPE, |tape| {
            let grey_in = to_grey(tape, rgb)?;
            let cg = self.color_giving.forward(tape, store, rgb)?;
            let ce = self.color_extracting.forward(tape, store, rgb)?;
            let gg = self.grey_giving.forward(tape, store, grey_in)?;
            let ge = self.grey_extracting.forward(tape, store, grey_in)?;
            let color = tape.concat_channels(&[cg, ce])?;
            let grey = tape.concat_channels(&[gg, ge])?;
            let combined = tape.concat_channels(&[color, grey])?;
            Ok(InnerOutput { color, grey, combined })
        })
    }
}

/// Inner colour channels derived from one input plane, ordered
/// `(source polarity, unit)`.
pub fn color_channels(units: usize, plane: usize) -> Vec<usize> {
    (0..2).flat_map(|src| (0..units).map(move |k| src * 3 * units + plane * units + k)).collect()
}

pub struct OuterOutput {
    pub combined: Var,
    pub partition: ChannelPartition,
}

#[derive(Clone, Debug)]
pub struct OuterPlexiform {
    pub units: usize,
    /// R+G−
    pub rg: OpponentUnit,
    /// G+R−
    pub gr: OpponentUnit,
    /// B+Y−
    pub by: OpponentUnit,
    /// Y+B−
    pub yb: OpponentUnit,
    pub m_giving: CenterSurroundUnit,
    pub m_extracting: CenterSurroundUnit,
}

impl OuterPlexiform {
    pub fn new<T: Element, R: Rng + ?Sized>(
        cfg: &RetinaConfig,
        bias: bool,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let u = cfg.units_per_cell_type;
        // one opponent unit per (inner polarity, unit index)
        let width = 2 * u;
        let (c, s) = unit_specs(width, width, width, cfg.small_kernel, cfg.large_kernel, cfg.outer_stride, bias);
        let gains = (cfg.positive_gain, cfg.negative_gain);
        let lin = cfg.test_linear;
        let mut opponent = |name: &str, plus, minus| -> Result<OpponentUnit> {
            let unit = CenterSurroundUnit::new(store, name, c, s, gains, lin, rng)?;
            OpponentUnit::new(plus, minus, unit)
        };
        use ColorPlane::*;
        let rg = opponent("outer.p_rg", R, G)?;
        let gr = opponent("outer.p_gr", G, R)?;
        let by = opponent("outer.nmp_by", B, Y)?;
        let yb = opponent("outer.nmp_yb", Y, B)?;
        let (mc, ms) = unit_specs(width, u, 1, cfg.large_kernel, cfg.m_surround_kernel, cfg.outer_stride, bias);
        let extracting = (cfg.negative_gain, cfg.positive_gain);
        let m_giving = CenterSurroundUnit::new(store, "outer.m_giving", mc, ms, gains, lin, rng)?;
        let m_extracting = CenterSurroundUnit::new(store, "outer.m_extracting", mc, ms, extracting, lin, rng)?;
        Ok(OuterPlexiform { units: u, rg, gr, by, yb, m_giving, m_extracting })
    }

    pub fn partition(&self) -> ChannelPartition {
        let u = self.units;
        ChannelPartition::from_sizes(&[("P", 4 * u), ("NMP", 4 * u), ("M", 2 * u)])
    }

    /// `color` and `grey` are the two partitions of the inner block output.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        color: Var,
        grey: Var,
    ) -> Result<OuterOutput> {
        let u = self.units;
        let (cs, gs) = (tape.shape(color), tape.shape(grey));
        if cs.c != 6 * u || gs.c != 2 * u || (cs.n, cs.h, cs.w) != (gs.n, gs.h, gs.w) {
            return Err(CvsError::shape(
                "outer_plexiform",
                format!("colour partition {cs} / grey partition {gs} for {u} units"),
            ));
        }
        tape.scoped(OUTER_SCOPE, |tape| {
            let r = tape.select_channels(color, &color_channels(u, 0))?;
            let g = tape.select_channels(color, &color_channels(u, 1))?;
            let b = tape.select_channels(color, &color_channels(u, 2))?;
            let y = tape.add(r, g)?;
            let rg = self.rg.forward_planes(tape, store, r, g)?;
            let gr = self.gr.forward_planes(tape, store, g, r)?;
            let by = self.by.forward_planes(tape, store, b, y)?;
            let yb = self.yb.forward_planes(tape, store, y, b)?;
            let mg = self.m_giving.forward(tape, store, grey)?;
            let me = self.m_extracting.forward(tape, store, grey)?;
            let combined = tape.concat_channels(&[rg, gr, by, yb, mg, me])?;
            Ok(OuterOutput { combined, partition: self.partition() })
        })
    }
}
