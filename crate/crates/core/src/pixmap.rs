//! Binary P6 pixmaps and feature-map rendering.

use std::path::Path;

use crate::error::{CvsError, Result};
use crate::tensor::{Element, Tensor4D};

/// An 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Pixmap {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Pixmap { width, height, rgb: vec![value; width * height * 3] }
    }

    pub fn from_grey(width: usize, height: usize, grey: &[u8]) -> Self {
        assert_eq!(grey.len(), width * height);
        Pixmap { width, height, rgb: grey.iter().flat_map(|&g| [g, g, g]).collect() }
    }

    /// An image tensor item with values in `[0, 1]` and 3 channels.
    pub fn from_rgb_tensor<T: Element>(t: &Tensor4D<T>, item: usize) -> Result<Self> {
        let s = t.shape();
        if s.c != 3 || item >= s.n {
            return Err(CvsError::shape("pixmap", format!("expected an RGB item of {s}")));
        }
        let mut rgb = Vec::with_capacity(s.plane() * 3);
        for i in 0..s.plane() {
            for c in 0..3 {
                let v = t.plane(item, c)[i].as_f64().clamp(0.0, 1.0);
                rgb.push((v * 255.0).round() as u8);
            }
        }
        Ok(Pixmap { width: s.w, height: s.h, rgb })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn put(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.rgb[i..i + 3].copy_from_slice(&px);
    }

    /// Nearest-neighbour resize.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let mut out = Pixmap::filled(width, height, 0);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                out.put(x, y, self.pixel(x * self.width / width, sy));
            }
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| CvsError::arg("read_p6", d.to_string());
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?.to_string());
        }
        if fields[0] != "P6" {
            return Err(bad("not a P6 file"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        pos += 1;
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(bad("truncated raster"));
        }
        Ok(Pixmap { width, height, rgb: bytes[pos..pos + need].to_vec() })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CvsError::io(dir, e))?;
        }
        std::fs::write(path, self.encode()).map_err(|e| CvsError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CvsError::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Min-max normalization to `0..=255`, rounding to nearest; a constant map
/// becomes 128 everywhere.
pub fn quantize(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Mean over channels of one batch item.
pub fn channel_mean<T: Element>(t: &Tensor4D<T>, item: usize) -> Vec<f64> {
    let s = t.shape();
    let mut acc = vec![0.0; s.plane()];
    for c in 0..s.c {
        for (a, v) in acc.iter_mut().zip(t.plane(item, c)) {
            *a += v.as_f64();
        }
    }
    acc.iter().map(|a| a / s.c as f64).collect()
}

fn single_item<T: Element>(t: &Tensor4D<T>) -> Result<()> {
    if t.shape().n != 1 {
        return Err(CvsError::shape("export_feature_map", format!("expected one batch element, got {}", t.shape())));
    }
    Ok(())
}

/// Channel-mean map rendered as greyscale.
pub fn feature_map_pixmap<T: Element>(t: &Tensor4D<T>) -> Result<Pixmap> {
    single_item(t)?;
    let s = t.shape();
    Ok(Pixmap::from_grey(s.w, s.h, &quantize(&channel_mean(t, 0))))
}

/// Every channel normalized on its own, tiled row-major with a one pixel
/// black gutter.
pub fn channel_grid_pixmap<T: Element>(t: &Tensor4D<T>, columns: usize) -> Result<Pixmap> {
    single_item(t)?;
    let s = t.shape();
    let cols = columns.clamp(1, s.c.max(1));
    let rows = s.c.div_ceil(cols);
    let (gw, gh) = (cols * (s.w + 1) - 1, rows * (s.h + 1) - 1);
    let mut out = Pixmap::filled(gw, gh, 0);
    for c in 0..s.c {
        let vals: Vec<f64> = t.plane(0, c).iter().map(|v| v.as_f64()).collect();
        let q = quantize(&vals);
        let (ox, oy) = ((c % cols) * (s.w + 1), (c / cols) * (s.h + 1));
        for y in 0..s.h {
            for x in 0..s.w {
                let g = q[y * s.w + x];
                out.put(ox + x, oy + y, [g, g, g]);
            }
        }
    }
    Ok(out)
}

pub fn export_feature_map<T: Element>(t: &Tensor4D<T>, path: &Path) -> Result<()> {
    feature_map_pixmap(t)?.write(path)
}

pub fn export_channel_grid<T: Element>(t: &Tensor4D<T>, path: &Path, columns: usize) -> Result<()> {
    channel_grid_pixmap(t, columns)?.write(path)
}

/// Tiles panels row by row, each resized to `tile × tile`, separated by a
/// two pixel white gutter.
pub fn panel_grid(rows: &[Vec<Pixmap>], tile: usize) -> Pixmap {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let gap = 2;
    let width = (cols * (tile + gap)).saturating_sub(gap);
    let height = (rows.len() * (tile + gap)).saturating_sub(gap);
    let mut out = Pixmap::filled(width, height, 255);
    for (r, row) in rows.iter().enumerate() {
        for (c, panel) in row.iter().enumerate() {
            let p = panel.resized(tile, tile);
            let (ox, oy) = (c * (tile + gap), r * (tile + gap));
            for y in 0..tile {
                for x in 0..tile {
                    out.put(ox + x, oy + y, p.pixel(x, y));
                }
            }
        }
    }
    out
}
