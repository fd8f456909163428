//! Stimulus sweeps over brightness and hue, tap-point change metrics,
//! pathway ordering and rendered panels.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{CvsError, Result};
use crate::layers::Conv2d;
use crate::model::{tap_names, Model};
use crate::params::ParamStore;
use crate::pixmap::{channel_grid_pixmap, feature_map_pixmap, panel_grid, Pixmap};
use crate::tape::Tape;
use crate::tensor::{Element, Tensor4D};

/// Pixelwise multiply then clamp to `[0, 1]`.
pub fn adjust_brightness<T: Element>(img: &Tensor4D<T>, factor: f64) -> Result<Tensor4D<T>> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(CvsError::arg("adjust_brightness", format!("factor {factor} must be positive")));
    }
    let f = T::from_f64_lossy(factor);
    Ok(img.map(|v| (v * f).max(T::zero()).min(T::one())))
}

/// RGB in `[0,1]` to (hue degrees, saturation, value).
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Adds `degrees` to every pixel's hue, keeping saturation and value.
pub fn rotate_hue<T: Element>(img: &Tensor4D<T>, degrees: f64) -> Result<Tensor4D<T>> {
    let s = img.shape();
    if s.c != 3 {
        return Err(CvsError::shape("rotate_hue", format!("expected RGB, got {s}")));
    }
    let mut out = img.clone();
    for n in 0..s.n {
        for i in 0..s.plane() {
            let px = |c: usize| img.plane(n, c)[i].as_f64();
            let (h, sat, v) = rgb_to_hsv(px(0), px(1), px(2));
            let (r, g, b) = hsv_to_rgb(h + degrees, sat, v);
            for (c, val) in [r, g, b].into_iter().enumerate() {
                out.plane_mut(n, c)[i] = T::from_f64_lossy(val);
            }
        }
    }
    Ok(out)
}

/// `‖var − ref‖₂ / (‖ref‖₂ + 1e-8)` over the whole tensor.
pub fn feature_change<T: Element>(reference: &Tensor4D<T>, variant: &Tensor4D<T>) -> Result<f64> {
    if reference.shape() != variant.shape() {
        return Err(CvsError::shape("feature_change", format!("{} vs {}", reference.shape(), variant.shape())));
    }
    let diff: f64 = reference
        .data()
        .iter()
        .zip(variant.data())
        .map(|(a, b)| {
            let d = b.as_f64() - a.as_f64();
            d * d
        })
        .sum();
    Ok(diff.sqrt() / (reference.l2_norm() + 1e-8))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Brightness,
    Hue,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Brightness => "brightness",
            SweepKind::Hue => "hue",
        }
    }

    fn identity(self) -> f64 {
        match self {
            SweepKind::Brightness => 1.0,
            SweepKind::Hue => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StimulusSweep {
    pub kind: SweepKind,
    pub values: Vec<f64>,
}

impl StimulusSweep {
    pub fn brightness_default() -> Self {
        StimulusSweep { kind: SweepKind::Brightness, values: vec![1.0, 0.8, 0.6, 0.4] }
    }

    pub fn hue_default() -> Self {
        StimulusSweep { kind: SweepKind::Hue, values: vec![0.0, 60.0, 120.0, 180.0, 240.0, 300.0] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(CvsError::arg("sweep", "no variants"));
        }
        for &v in &self.values {
            let ok = match self.kind {
                SweepKind::Brightness => v > 0.0 && v <= 1.0,
                SweepKind::Hue => (0.0..360.0).contains(&v),
            };
            if !ok {
                return Err(CvsError::arg("sweep", format!("{} value {v} out of range", self.kind.name())));
            }
        }
        Ok(())
    }

    pub fn apply<T: Element>(&self, img: &Tensor4D<T>, value: f64) -> Result<Tensor4D<T>> {
        match self.kind {
            SweepKind::Brightness => adjust_brightness(img, value),
            SweepKind::Hue => rotate_hue(img, value),
        }
    }

    pub fn label(&self, value: f64) -> String {
        match self.kind {
            SweepKind::Brightness => format!("b{value:.2}"),
            SweepKind::Hue => format!("h{value:03.0}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantChange {
    pub variant: String,
    pub value: f64,
    pub change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathwaySummary {
    /// Mean change over the non-identity variants, keyed M / P / K.
    pub mean_change: BTreeMap<String, f64>,
    /// Pathways from least to most changed.
    pub ordering: Vec<String>,
    pub expected_ordering: Vec<String>,
    pub matches_expected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeReport {
    pub sweep: StimulusSweep,
    pub taps: BTreeMap<String, Vec<VariantChange>>,
    pub pathways: Option<PathwaySummary>,
    /// Same metric on a plain two-layer conv block with as many output
    /// channels as the inner plexiform.
    pub baseline: Vec<VariantChange>,
    pub images: Vec<String>,
}

impl ChangeReport {
    /// Key-sorted, pretty JSON.
    pub fn to_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&value)? + "\n")
    }
}

fn mean_non_identity(rows: &[VariantChange], identity: f64) -> f64 {
    let vals: Vec<f64> = rows.iter().filter(|r| r.value != identity).map(|r| r.change).collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Least-changed first; ties keep M, P, K order.
pub fn pathway_summary(taps: &BTreeMap<String, Vec<VariantChange>>, identity: f64) -> Option<PathwaySummary> {
    let mut mean_change = BTreeMap::new();
    for (short, tap) in [("M", "lgn.m"), ("P", "lgn.p"), ("K", "lgn.k")] {
        mean_change.insert(short.to_string(), mean_non_identity(taps.get(tap)?, identity));
    }
    let mut ordering: Vec<String> = ["M", "P", "K"].iter().map(|s| s.to_string()).collect();
    ordering.sort_by(|a, b| mean_change[a].total_cmp(&mean_change[b]));
    let expected_ordering: Vec<String> = ["M", "P", "K"].iter().map(|s| s.to_string()).collect();
    let matches_expected = ordering == expected_ordering;
    Some(PathwaySummary { mean_change, ordering, expected_ordering, matches_expected })
}

/// Plain `conv3x3 → ReLU → conv3x3 → ReLU` stack, bias-free, with the inner
/// plexiform's stride and output width.
#[derive(Clone, Debug)]
pub struct BaselineBlock {
    pub params: ParamStore<f32>,
    pub first: Conv2d,
    pub second: Conv2d,
}

impl BaselineBlock {
    pub fn new(channels: usize, stride: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba5e_11ae);
        let mut params = ParamStore::new();
        let first = Conv2d::new(&mut params, "baseline.conv1", ConvSpec::same(3, channels, 3, stride), &mut rng)?;
        let second = Conv2d::new(&mut params, "baseline.conv2", ConvSpec::same(channels, channels, 3, 1), &mut rng)?;
        Ok(BaselineBlock { params, first, second })
    }

    pub fn forward(&self, img: &Tensor4D<f32>) -> Result<Tensor4D<f32>> {
        let mut tape = Tape::new();
        let x = tape.input(img.clone());
        let y = self.first.forward(&mut tape, &self.params, x)?;
        let y = tape.relu(y);
        let y = self.second.forward(&mut tape, &self.params, y)?;
        let y = tape.relu(y);
        Ok(tape.value(y).clone())
    }
}

/// Forward one image and return the requested taps.
pub fn capture_taps(model: &Model<f32>, img: &Tensor4D<f32>, taps: &[String]) -> Result<BTreeMap<String, Tensor4D<f32>>> {
    let mut tape = Tape::new();
    let x = tape.input(img.clone());
    let out = model.forward(&mut tape, x)?;
    let mut captured = BTreeMap::new();
    for t in taps {
        captured.insert(t.clone(), tape.value(out.taps.get(t)?).clone());
    }
    Ok(captured)
}

pub fn validate_taps(taps: &[String]) -> Result<()> {
    let valid = tap_names();
    for t in taps {
        if !valid.contains(t) {
            return Err(CvsError::UnknownTap { name: t.clone(), valid: valid.join(", ") });
        }
    }
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.replace('.', "_")
}

/// Runs every variant, measures change against the identity variant and,
/// with `out_dir`, writes per-tap maps, per-channel grids and a panel grid
/// (rows: variants; columns: stimulus then each tap).
pub fn run_sweep(
    model: &Model<f32>,
    base: &Tensor4D<f32>,
    sweep: &StimulusSweep,
    taps: &[String],
    out_dir: Option<&Path>,
) -> Result<ChangeReport> {
    sweep.validate()?;
    validate_taps(taps)?;
    if taps.is_empty() {
        return Err(CvsError::arg("run_sweep", "no taps requested"));
    }
    let want = model.input_shape(1);
    if base.shape() != want {
        return Err(CvsError::shape("run_sweep", format!("base image {}, expected {want}", base.shape())));
    }
    let identity = sweep.kind.identity();
    let reference_img = sweep.apply(base, identity)?;
    let reference = capture_taps(model, &reference_img, taps)?;
    let inner_stride = model.config.retina.inner_stride;
    let baseline_block = BaselineBlock::new(model.config.retina.inner_channels(), inner_stride, model.config.seed)?;
    let baseline_ref = baseline_block.forward(&reference_img)?;

    let mut tap_rows: BTreeMap<String, Vec<VariantChange>> = taps.iter().map(|t| (t.clone(), Vec::new())).collect();
    let mut baseline = Vec::new();
    let mut images = Vec::new();
    let mut panel_rows = Vec::new();
    let sweep_dir = out_dir.map(|d| d.join(sweep.kind.name()));
    for &value in &sweep.values {
        let label = sweep.label(value);
        let img = sweep.apply(base, value)?;
        let captured = capture_taps(model, &img, taps)?;
        let mut row = vec![Pixmap::from_rgb_tensor(&img, 0)?];
        for t in taps {
            let change = feature_change(&reference[t], &captured[t])?;
            tap_rows.get_mut(t).unwrap().push(VariantChange { variant: label.clone(), value, change });
            row.push(feature_map_pixmap(&captured[t])?);
            if let Some(dir) = &sweep_dir {
                let tap_dir = dir.join(sanitize(t));
                let map_path = tap_dir.join(format!("{label}.ppm"));
                feature_map_pixmap(&captured[t])?.write(&map_path)?;
                let grid_path = tap_dir.join(format!("{label}_channels.ppm"));
                channel_grid_pixmap(&captured[t], 8)?.write(&grid_path)?;
                images.push(relative(out_dir.unwrap(), &map_path));
                images.push(relative(out_dir.unwrap(), &grid_path));
            }
        }
        let b = baseline_block.forward(&img)?;
        baseline.push(VariantChange { variant: label.clone(), value, change: feature_change(&baseline_ref, &b)? });
        row.push(feature_map_pixmap(&b)?);
        if let Some(dir) = &sweep_dir {
            let stim_path = dir.join("stimulus").join(format!("{label}.ppm"));
            row[0].write(&stim_path)?;
            images.push(relative(out_dir.unwrap(), &stim_path));
        }
        panel_rows.push(row);
    }
    if let Some(dir) = &sweep_dir {
        let grid_path = dir.join("panel_grid.ppm");
        panel_grid(&panel_rows, 64).write(&grid_path)?;
        images.push(relative(out_dir.unwrap(), &grid_path));
    }
    images.sort();
    let pathways = pathway_summary(&tap_rows, identity);
    let report = ChangeReport { sweep: sweep.clone(), taps: tap_rows, pathways, baseline, images };
    if let Some(dir) = &sweep_dir {
        let path = dir.join("report.json");
        std::fs::write(&path, report.to_json()?).map_err(|e| CvsError::io(&path, e))?;
    }
    Ok(report)
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// A deterministic textured RGB test card (gradients plus coloured discs)
/// for sweeps run without a supplied image.
pub fn test_card(side: usize) -> Tensor4D<f32> {
    use crate::tensor::Shape;
    let mut img = Tensor4D::zeros(Shape::new(1, 3, side, side));
    let s = side as f32;
    let discs = [(0.3f32, 0.3f32, 0.18f32, [0.9f32, 0.15, 0.1]), (0.7, 0.35, 0.15, [0.1, 0.8, 0.2]), (0.5, 0.72, 0.2, [0.15, 0.25, 0.9])];
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = ((x as f32 + 0.5) / s, (y as f32 + 0.5) / s);
            let mut px = [0.25 + 0.5 * fx, 0.25 + 0.5 * fy, 0.6 - 0.4 * fx * fy];
            for (cx, cy, r, col) in discs {
                if (fx - cx).powi(2) + (fy - cy).powi(2) < r * r {
                    px = col;
                }
            }
            for (c, v) in px.into_iter().enumerate() {
                img.set(0, c, y, x, v);
            }
        }
    }
    img
}
