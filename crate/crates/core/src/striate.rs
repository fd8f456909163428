//! Striate cortex: orientation-selective 1×n / n×1 convolutions and
//! direction-selective difference maps over three paths (M, P-IB, Blob)
//! that together produce six named outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{CvsError, Result};
use crate::layers::Conv2d;
use crate::lgn::PathwayBundle;
use crate::params::ParamStore;
use crate::tape::{cyclic_difference, Tape, Var};
use crate::tensor::{Element, Tensor4D};

pub const STRIATE_SCOPE: &str = "striate";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Right,
    Left,
    Up,
    Down,
    UpRight,
    UpLeft,
    DownRight,
    DownLeft,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::Right,
        Direction::Left,
        Direction::Up,
        Direction::Down,
        Direction::UpRight,
        Direction::UpLeft,
        Direction::DownRight,
        Direction::DownLeft,
    ];

    pub const AXIS_ALIGNED: [Direction; 4] = [Direction::Right, Direction::Left, Direction::Up, Direction::Down];

    /// Unit `(row, col)` step.
    pub fn unit_offset(self) -> (isize, isize) {
        match self {
            Direction::Right => (0, 1),
            Direction::Left => (0, -1),
            Direction::Up => (-1, 0),
            Direction::Down => (1, 0),
            Direction::UpRight => (-1, 1),
            Direction::UpLeft => (-1, -1),
            Direction::DownRight => (1, 1),
            Direction::DownLeft => (1, -1),
        }
    }

    pub fn reverse(self) -> Direction {
        match self {
            Direction::Right => Direction::Left,
            Direction::Left => Direction::Right,
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
            Direction::UpRight => Direction::DownLeft,
            Direction::UpLeft => Direction::DownRight,
            Direction::DownRight => Direction::UpLeft,
            Direction::DownLeft => Direction::UpRight,
        }
    }
}

fn shift_offsets(h: usize, w: usize, dir: Direction, k: usize) -> Result<(isize, isize)> {
    let (ui, uj) = dir.unit_offset();
    if k == 0 {
        return Err(CvsError::arg("difference_map", "shift k must be positive"));
    }
    if uj != 0 && k >= w {
        return Err(CvsError::arg("difference_map", format!("shift {k} must be below width {w} for {dir:?}")));
    }
    if ui != 0 && k >= h {
        return Err(CvsError::arg("difference_map", format!("shift {k} must be below height {h} for {dir:?}")));
    }
    Ok((ui * k as isize, uj * k as isize))
}

/// `out[i][j] = a[(i+di) mod H][(j+dj) mod W] − a[i][j]` with `(di, dj)` the
/// direction's offset scaled by `k`.
pub fn difference_map<T: Element>(tape: &mut Tape<T>, a: Var, dir: Direction, k: usize) -> Result<Var> {
    let s = tape.shape(a);
    let (di, dj) = shift_offsets(s.h, s.w, dir, k)?;
    Ok(tape.difference_map(a, di, dj))
}

/// Eager form of [`difference_map`].
pub fn difference_map_tensor<T: Element>(a: &Tensor4D<T>, dir: Direction, k: usize) -> Result<Tensor4D<T>> {
    let s = a.shape();
    let (di, dj) = shift_offsets(s.h, s.w, dir, k)?;
    Ok(cyclic_difference(a, di, dj))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    /// `1×n`
    Horizontal,
    /// `n×1`
    Vertical,
}

pub fn orientation_spec(channels_in: usize, channels_out: usize, axis: Axis, n: usize, bias: bool) -> Result<ConvSpec> {
    if n % 2 == 0 {
        return Err(CvsError::arg("orientation_conv", format!("kernel length {n} must be odd")));
    }
    let base = ConvSpec::same(channels_in, channels_out, 1, 1).with_bias(bias);
    Ok(match axis {
        Axis::Horizontal => base.with_kernel(1, n),
        Axis::Vertical => base.with_kernel(n, 1),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StriateConfig {
    pub orient_n: usize,
    pub m_kernel: (usize, usize),
    pub pib_kernel: (usize, usize),
    pub shift: usize,
    pub stride: usize,
    /// Defaults to the M input width.
    pub m_stem_channels: Option<usize>,
    /// Defaults to half the P input width.
    pub pib_stem_channels: Option<usize>,
    pub blob_branch_channels: usize,
    pub blob_stem_channels: usize,
}

impl Default for StriateConfig {
    fn default() -> Self {
        StriateConfig {
            orient_n: 5,
            m_kernel: (7, 7),
            pib_kernel: (3, 3),
            shift: 1,
            stride: 2,
            m_stem_channels: None,
            pib_stem_channels: None,
            blob_branch_channels: 16,
            blob_stem_channels: 32,
        }
    }
}

impl StriateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.orient_n % 2 == 0 {
            return Err(CvsError::config("striate", format!("orient_n {} must be odd", self.orient_n)));
        }
        if self.shift == 0 || self.stride == 0 {
            return Err(CvsError::config("striate", "shift and stride must be positive"));
        }
        if self.blob_branch_channels == 0 || self.blob_stem_channels == 0 {
            return Err(CvsError::config("striate", "blob widths must be positive"));
        }
        if self.m_stem_channels == Some(0) || self.pib_stem_channels == Some(0) {
            return Err(CvsError::config("striate", "stem widths must be positive"));
        }
        Ok(())
    }

    pub fn m_stem(&self, m_in: usize) -> usize {
        self.m_stem_channels.unwrap_or(m_in)
    }

    pub fn pib_stem(&self, p_in: usize) -> usize {
        self.pib_stem_channels.unwrap_or((p_in / 2).max(1))
    }
}

/// Stable names of the six striate outputs.
pub const STRIATE_OUTPUT_NAMES: [&str; 6] =
    ["m_orient", "m_direction", "pib_orient", "pib_direction", "blob_direction", "blob_conv"];

#[derive(Clone, Copy, Debug)]
pub struct StriateOutputs {
    pub m_orient: Var,
    pub m_direction: Var,
    pub pib_orient: Var,
    pub pib_direction: Var,
    pub blob_direction: Var,
    pub blob_conv: Var,
}

impl StriateOutputs {
    /// In [`STRIATE_OUTPUT_NAMES`] order.
    pub fn as_array(&self) -> [Var; 6] {
        [self.m_orient, self.m_direction, self.pib_orient, self.pib_direction, self.blob_direction, self.blob_conv]
    }

    pub fn named(&self) -> [(&'static str, Var); 6] {
        let vars = self.as_array();
        std::array::from_fn(|i| (STRIATE_OUTPUT_NAMES[i], vars[i]))
    }
}

/// Stem, orientation pair and direction branch shared by the M and P-IB paths.
#[derive(Clone, Debug)]
pub struct OrientDirectionPath {
    pub stem: Conv2d,
    pub orient_h: Conv2d,
    pub orient_v: Conv2d,
    pub mix: Conv2d,
    pub directions: Vec<Direction>,
    pub shift: usize,
}

impl OrientDirectionPath {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        stem_c: usize,
        kernel: (usize, usize),
        directions: &[Direction],
        cfg: &StriateConfig,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let stem_spec = ConvSpec::same(c_in, stem_c, 1, cfg.stride).with_kernel(kernel.0, kernel.1).with_bias(bias);
        let n = cfg.orient_n;
        Ok(OrientDirectionPath {
            stem: Conv2d::new(store, &format!("{name}.stem"), stem_spec, rng)?,
            orient_h: Conv2d::new(store, &format!("{name}.orient_h"), orientation_spec(stem_c, stem_c, Axis::Horizontal, n, bias)?, rng)?,
            orient_v: Conv2d::new(store, &format!("{name}.orient_v"), orientation_spec(stem_c, stem_c, Axis::Vertical, n, bias)?, rng)?,
            mix: Conv2d::new(
                store,
                &format!("{name}.mix"),
                ConvSpec::same(directions.len() * stem_c, stem_c, 1, 1).with_bias(bias),
                rng,
            )?,
            directions: directions.to_vec(),
            shift: cfg.shift,
        })
    }

    pub fn stem<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = self.stem.forward(tape, store, x)?;
        Ok(tape.relu(s))
    }

    /// Difference maps of `stem` for every direction, stacked on channels.
    pub fn direction_stack<T: Element>(&self, tape: &mut Tape<T>, stem: Var) -> Result<Var> {
        let maps = self
            .directions
            .iter()
            .map(|&d| difference_map(tape, stem, d, self.shift))
            .collect::<Result<Vec<_>>>()?;
        tape.concat_channels(&maps)
    }

    /// Returns `(orient, direction)`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let stem = self.stem(tape, store, x)?;
        let h = self.orient_h.forward(tape, store, stem)?;
        let v = self.orient_v.forward(tape, store, stem)?;
        let orient = tape.concat_channels(&[h, v])?;
        let orient = tape.relu(orient);
        let stack = self.direction_stack(tape, stem)?;
        let direction = self.mix.forward(tape, store, stack)?;
        Ok((orient, direction))
    }
}

#[derive(Clone, Debug)]
pub struct BlobPath {
    pub from_m: Conv2d,
    pub from_p: Conv2d,
    pub from_k: Conv2d,
    pub stem: Conv2d,
    pub mix: Conv2d,
    pub conv: Conv2d,
    pub shift: usize,
}

impl BlobPath {
    pub fn stem<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, bundle: &PathwayBundle) -> Result<Var> {
        let (sm, sp, sk) = (tape.shape(bundle.m), tape.shape(bundle.p), tape.shape(bundle.k));
        if (sm.n, sm.h, sm.w) != (sp.n, sp.h, sp.w) || (sm.n, sm.h, sm.w) != (sk.n, sk.h, sk.w) {
            return Err(CvsError::shape("blob_path", format!("pathways misaligned: m {sm}, p {sp}, k {sk}")));
        }
        let m = self.from_m.forward(tape, store, bundle.m)?;
        let p = self.from_p.forward(tape, store, bundle.p)?;
        let k = self.from_k.forward(tape, store, bundle.k)?;
        let cat = tape.concat_channels(&[m, p, k])?;
        let stem = self.stem.forward(tape, store, cat)?;
        Ok(tape.relu(stem))
    }

    /// Returns `(blob_direction, blob_conv)`.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        bundle: &PathwayBundle,
    ) -> Result<(Var, Var)> {
        let stem = self.stem(tape, store, bundle)?;
        let maps = Direction::AXIS_ALIGNED
            .iter()
            .map(|&d| difference_map(tape, stem, d, self.shift))
            .collect::<Result<Vec<_>>>()?;
        let stack = tape.concat_channels(&maps)?;
        let direction = self.mix.forward(tape, store, stack)?;
        let conv = self.conv.forward(tape, store, stem)?;
        Ok((direction, tape.relu(conv)))
    }
}

#[derive(Clone, Debug)]
pub struct StriateCortex {
    pub m_path: OrientDirectionPath,
    pub pib_path: OrientDirectionPath,
    pub blob: BlobPath,
}

impl StriateCortex {
    /// `inputs` are the `(m, p, k)` LGN channel counts.
    pub fn new<T: Element, R: Rng + ?Sized>(
        cfg: &StriateConfig,
        inputs: (usize, usize, usize),
        bias: bool,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (m_in, p_in, k_in) = inputs;
        let m_path = OrientDirectionPath::new(
            store,
            "striate.m",
            m_in,
            cfg.m_stem(m_in),
            cfg.m_kernel,
            &Direction::ALL,
            cfg,
            bias,
            rng,
        )?;
        let pib_path = OrientDirectionPath::new(
            store,
            "striate.pib",
            p_in,
            cfg.pib_stem(p_in),
            cfg.pib_kernel,
            &Direction::AXIS_ALIGNED,
            cfg,
            bias,
            rng,
        )?;
        let bc = cfg.blob_branch_channels;
        let sc = cfg.blob_stem_channels;
        let pw = |cin: usize| ConvSpec::same(cin, bc, 1, 1).with_bias(bias);
        let blob = BlobPath {
            from_m: Conv2d::new(store, "striate.blob.from_m", pw(m_in), rng)?,
            from_p: Conv2d::new(store, "striate.blob.from_p", pw(p_in), rng)?,
            from_k: Conv2d::new(store, "striate.blob.from_k", pw(k_in), rng)?,
            stem: Conv2d::new(
                store,
                "striate.blob.stem",
                ConvSpec::same(3 * bc, sc, 1, cfg.stride).with_kernel(cfg.pib_kernel.0, cfg.pib_kernel.1).with_bias(bias),
                rng,
            )?,
            mix: Conv2d::new(store, "striate.blob.mix", ConvSpec::same(4 * sc, sc, 1, 1).with_bias(bias), rng)?,
            conv: Conv2d::new(
                store,
                "striate.blob.conv",
                ConvSpec::same(sc, sc, 1, 1).with_kernel(cfg.pib_kernel.0, cfg.pib_kernel.1).with_bias(bias),
                rng,
            )?,
            shift: cfg.shift,
        };
        Ok(StriateCortex { m_path, pib_path, blob })
    }

    /// Output channel counts in [`STRIATE_OUTPUT_NAMES`] order.
    pub fn output_channels(&self) -> [usize; 6] {
        let m = self.m_path.stem.spec.out_channels;
        let p = self.pib_path.stem.spec.out_channels;
        let b = self.blob.stem.spec.out_channels;
        [2 * m, m, 2 * p, p, b, b]
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        bundle: &PathwayBundle,
    ) -> Result<StriateOutputs> {
        tape.scoped(STRIATE_SCOPE, |tape| {
            let (m_orient, m_direction) = self.m_path.forward(tape, store, bundle.m)?;
            let (pib_orient, pib_direction) = self.pib_path.forward(tape, store, bundle.p)?;
            let (blob_direction, blob_conv) = self.blob.forward(tape, store, bundle)?;
            Ok(StriateOutputs { m_orient, m_direction, pib_orient, pib_direction, blob_direction, blob_conv })
        })
    }
}
