//! Loop-based reference implementations shared by the integration tests.
//!
//! Everything here is written directly from the definitions with plain
//! nested loops over `f64` values, independent of the library's im2col and
//! GEMM paths.
#![allow(dead_code)]

use cvsnet::params::ParamStore;
use cvsnet::striate::StriateConfig;
use cvsnet::tensor::{Shape, Tensor4D};
use cvsnet::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type T64 = Tensor4D<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: Shape, lo: f64, hi: f64, seed: u64) -> T64 {
    let mut r = rng(seed);
    let data: Vec<f64> = (0..shape.numel()).map(|_| r.gen_range(lo..hi)).collect();
    Tensor4D::from_vec(shape, data).unwrap()
}

pub fn random_f32(shape: Shape, seed: u64) -> Tensor4D<f32> {
    random(shape, 0.0, 1.0, seed).cast()
}

pub fn param(store: &ParamStore<f64>, name: &str) -> T64 {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.value(id).clone()
}

pub fn maybe_param(store: &ParamStore<f64>, name: &str) -> Option<T64> {
    store.find(name).map(|id| store.value(id).clone())
}

pub fn set_param<E: cvsnet::Element>(store: &mut ParamStore<E>, name: &str, value: Tensor4D<E>) {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.set_value(id, value).unwrap();
}

pub fn max_abs_diff(a: &T64, b: &T64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs(a: &T64) -> f64 {
    a.data().iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Direct convolution with zero padding `(kh/2, kw/2)`.
pub fn conv(x: &T64, w: &T64, b: Option<&T64>, stride: usize, groups: usize) -> T64 {
    let xs = x.shape();
    let ws = w.shape();
    let (kh, kw) = (ws.h, ws.w);
    let (ph, pw) = (kh / 2, kw / 2);
    let cin_g = xs.c / groups;
    let cout_g = ws.n / groups;
    assert_eq!(ws.c, cin_g, "weight in-channels");
    let oh = (xs.h + 2 * ph - kh) / stride + 1;
    let ow = (xs.w + 2 * pw - kw) / stride + 1;
    let mut out = Tensor4D::zeros(Shape::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for o in 0..ws.n {
            let g = o / cout_g;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - ph as isize;
                                let xx = (j * stride + v) as isize - pw as isize;
                                if y < 0 || xx < 0 || y >= xs.h as isize || xx >= xs.w as isize {
                                    continue;
                                }
                                acc += w.at(o, ci, u, v) * x.at(n, c, y as usize, xx as usize);
                            }
                        }
                    }
                    out.set(n, o, i, j, acc);
                }
            }
        }
    }
    out
}

/// Convolution using the stored `<name>.weight` and optional `<name>.bias`.
pub fn conv_named(store: &ParamStore<f64>, name: &str, x: &T64, stride: usize, groups: usize) -> T64 {
    let w = param(store, &format!("{name}.weight"));
    let b = maybe_param(store, &format!("{name}.bias"));
    conv(x, &w, b.as_ref(), stride, groups)
}

pub fn map(x: &T64, f: impl Fn(f64) -> f64) -> T64 {
    Tensor4D::from_vec(x.shape(), x.data().iter().map(|&v| f(v)).collect()).unwrap()
}

pub fn scaled_relu(x: &T64, gain: f64) -> T64 {
    map(x, |v| if v > 0.0 { gain * v } else { 0.0 })
}

pub fn relu(x: &T64) -> T64 {
    scaled_relu(x, 1.0)
}

pub fn gelu(x: &T64) -> T64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    map(x, |v| 0.5 * v * (1.0 + (k * (v + 0.044715 * v * v * v)).tanh()))
}

pub fn add(a: &T64, b: &T64) -> T64 {
    assert_eq!(a.shape(), b.shape());
    Tensor4D::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

pub fn channels(x: &T64, index: &[usize]) -> T64 {
    let s = x.shape();
    let mut out = Tensor4D::zeros(s.with_channels(index.len()));
    for n in 0..s.n {
        for (o, &c) in index.iter().enumerate() {
            for i in 0..s.h {
                for j in 0..s.w {
                    out.set(n, o, i, j, x.at(n, c, i, j));
                }
            }
        }
    }
    out
}

pub fn range(x: &T64, start: usize, len: usize) -> T64 {
    channels(x, &(start..start + len).collect::<Vec<_>>())
}

pub fn concat(parts: &[&T64]) -> T64 {
    let s0 = parts[0].shape();
    let total: usize = parts.iter().map(|p| p.shape().c).sum();
    let mut out = Tensor4D::zeros(s0.with_channels(total));
    for n in 0..s0.n {
        let mut base = 0;
        for p in parts {
            for c in 0..p.shape().c {
                for i in 0..s0.h {
                    for j in 0..s0.w {
                        out.set(n, base + c, i, j, p.at(n, c, i, j));
                    }
                }
            }
            base += p.shape().c;
        }
    }
    out
}

pub fn channel_total(x: &T64, index: &[usize]) -> T64 {
    let s = x.shape();
    let mut out = Tensor4D::zeros(s.with_channels(1));
    for n in 0..s.n {
        for i in 0..s.h {
            for j in 0..s.w {
                out.set(n, 0, i, j, index.iter().map(|&c| x.at(n, c, i, j)).sum());
            }
        }
    }
    out
}

/// Rotates one plane by a single step; `dy`/`dx` in {-1, 0, 1}.
/// `out[i][j] = a[(i + dy) mod h][(j + dx) mod w]`.
fn rotate_once(a: &[Vec<f64>], dy: isize, dx: isize) -> Vec<Vec<f64>> {
    let (h, w) = (a.len(), a[0].len());
    let mut out = vec![vec![0.0; w]; h];
    for i in 0..h {
        let si = match dy {
            1 => (i + 1) % h,
            -1 => (i + h - 1) % h,
            _ => i,
        };
        for j in 0..w {
            let sj = match dx {
                1 => (j + 1) % w,
                -1 => (j + w - 1) % w,
                _ => j,
            };
            out[i][j] = a[si][sj];
        }
    }
    out
}

/// Brute force: shift `k` times by one step, then subtract the original.
pub fn difference_oracle(a: &[Vec<f64>], dy: isize, dx: isize, k: usize) -> Vec<Vec<f64>> {
    let mut shifted = a.to_vec();
    for _ in 0..k {
        shifted = rotate_once(&shifted, dy, dx);
    }
    shifted.iter().zip(a).map(|(s, r)| s.iter().zip(r).map(|(p, q)| p - q).collect()).collect()
}

/// Applies [`difference_oracle`] to every plane.
pub fn difference_tensor(x: &T64, dy: isize, dx: isize, k: usize) -> T64 {
    let s = x.shape();
    let mut out = Tensor4D::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane: Vec<Vec<f64>> = (0..s.h).map(|i| (0..s.w).map(|j| x.at(n, c, i, j)).collect()).collect();
            let d = difference_oracle(&plane, dy, dx, k);
            for i in 0..s.h {
                for j in 0..s.w {
                    out.set(n, c, i, j, d[i][j]);
                }
            }
        }
    }
    out
}

/// Row/column step for each direction name, `(dy, dx)` with rows growing downward.
pub fn direction_step(name: &str) -> (isize, isize) {
    match name {
        "Right" => (0, 1),
        "Left" => (0, -1),
        "Up" => (-1, 0),
        "Down" => (1, 0),
        "UpRight" => (-1, 1),
        "UpLeft" => (-1, -1),
        "DownRight" => (1, 1),
        "DownLeft" => (1, -1),
        other => panic!("unknown direction {other}"),
    }
}

pub const ALL_DIRECTIONS: [&str; 8] = ["Right", "Left", "Up", "Down", "UpRight", "UpLeft", "DownRight", "DownLeft"];
pub const SIMPLE_DIRECTIONS: [&str; 4] = ["Right", "Left", "Up", "Down"];

/// Channel shuffle with `groups`: output `i` reads input `(i % g)·(c/g) + i / g`.
pub fn shuffle(x: &T64, groups: usize) -> T64 {
    let c = x.shape().c;
    let per = c / groups;
    let index: Vec<usize> = (0..c).map(|i| (i % groups) * per + i / groups).collect();
    channels(x, &index)
}

pub fn layer_norm(x: &T64, gamma: &T64, beta: &T64) -> T64 {
    let s = x.shape();
    let mut out = Tensor4D::zeros(s);
    for n in 0..s.n {
        for i in 0..s.h {
            for j in 0..s.w {
                let vals: Vec<f64> = (0..s.c).map(|c| x.at(n, c, i, j)).collect();
                let mean = vals.iter().sum::<f64>() / s.c as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.c as f64;
                let r = 1.0 / (var + 1e-5).sqrt();
                for c in 0..s.c {
                    out.set(n, c, i, j, gamma.data()[c] * (vals[c] - mean) * r + beta.data()[c]);
                }
            }
        }
    }
    out
}

/// Linear map across the `h·w` tokens of every `(n, c)` row.
pub fn token_linear(x: &T64, w: &T64, b: &T64, out_hw: (usize, usize)) -> T64 {
    let s = x.shape();
    let t_in = s.h * s.w;
    let t_out = out_hw.0 * out_hw.1;
    let mut out = Tensor4D::zeros(Shape::new(s.n, s.c, out_hw.0, out_hw.1));
    for n in 0..s.n {
        for c in 0..s.c {
            for to in 0..t_out {
                let mut acc = b.data()[to];
                for ti in 0..t_in {
                    acc += w.data()[to * t_in + ti] * x.at(n, c, ti / s.w, ti % s.w);
                }
                out.set(n, c, to / out_hw.1, to % out_hw.1, acc);
            }
        }
    }
    out
}

pub fn mixer(store: &ParamStore<f64>, name: &str, x: &T64, gelu_act: bool) -> T64 {
    let act = |t: &T64| if gelu_act { gelu(t) } else { relu(t) };
    let s = x.shape();
    let p = |suffix: &str| param(store, &format!("{name}.{suffix}"));
    let y = layer_norm(x, &p("norm_tokens.gamma"), &p("norm_tokens.beta"));
    let hidden = p("token_fc1.weight").shape().n;
    let y = token_linear(&y, &p("token_fc1.weight"), &p("token_fc1.bias"), (hidden, 1));
    let y = act(&y);
    let y = token_linear(&y, &p("token_fc2.weight"), &p("token_fc2.bias"), (s.h, s.w));
    let x = add(x, &y);
    let z = layer_norm(&x, &p("norm_channels.gamma"), &p("norm_channels.beta"));
    let z = conv_named(store, &format!("{name}.channel_fc1"), &z, 1, 1);
    let z = act(&z);
    let z = conv_named(store, &format!("{name}.channel_fc2"), &z, 1, 1);
    add(&x, &z)
}

pub fn avg_pool(x: &T64) -> T64 {
    let s = x.shape();
    let mut out = Tensor4D::zeros(Shape::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            let mut acc = 0.0;
            for i in 0..s.h {
                for j in 0..s.w {
                    acc += x.at(n, c, i, j);
                }
            }
            out.set(n, c, 0, 0, acc / (s.h * s.w) as f64);
        }
    }
    out
}

pub fn linear(x: &T64, w: &T64, b: &T64) -> T64 {
    let s = x.shape();
    let f = s.c * s.h * s.w;
    let o = w.shape().n;
    let mut out = Tensor4D::zeros(Shape::new(s.n, o, 1, 1));
    for n in 0..s.n {
        for k in 0..o {
            let acc: f64 = (0..f).map(|i| w.data()[k * f + i] * x.item(n)[i]).sum();
            out.set(n, k, 0, 0, acc + b.data()[k]);
        }
    }
    out
}

/// Light-giving/extracting style unit: rectified, gained center and surround summed.
pub fn center_surround(
    store: &ParamStore<f64>,
    name: &str,
    center_in: &T64,
    surround_in: &T64,
    gains: (f64, f64),
    stride: usize,
    groups: usize,
    linear_mode: bool,
) -> T64 {
    let c = conv_named(store, &format!("{name}.center"), center_in, stride, groups);
    let s = conv_named(store, &format!("{name}.surround"), surround_in, stride, groups);
    if linear_mode {
        add(&map(&c, |v| gains.0 * v), &map(&s, |v| gains.1 * v))
    } else {
        add(&scaled_relu(&c, gains.0), &scaled_relu(&s, gains.1))
    }
}

/// Inner-block channels that came from input plane `plane` (both polarities).
pub fn derived_from(units: usize, plane: usize) -> Vec<usize> {
    let mut v = Vec::new();
    for polarity in 0..2 {
        for k in 0..units {
            v.push(polarity * 3 * units + plane * units + k);
        }
    }
    v
}

pub struct OracleTaps {
    pub inner_color: T64,
    pub inner_grey: T64,
    pub outer: T64,
    pub m: T64,
    pub p: T64,
    pub k: T64,
    pub striate: Vec<T64>,
    pub logits: T64,
}

/// Full network forward assembled from the loop kernels above.
pub fn model_forward(model: &Model<f64>, x: &T64) -> OracleTaps {
    let cfg = &model.config;
    let st = &model.params;
    let u = cfg.retina.units_per_cell_type;
    let (pos, neg) = (cfg.retina.positive_gain, cfg.retina.negative_gain);
    let lin = cfg.retina.test_linear;
    let s1 = cfg.retina.inner_stride;

    let grey_in = channel_total(x, &[0, 1, 2]);
    let cg = center_surround(st, "inner.color_giving", x, x, (pos, neg), s1, 3, lin);
    let ce = center_surround(st, "inner.color_extracting", x, x, (neg, pos), s1, 3, lin);
    let gg = center_surround(st, "inner.grey_giving", &grey_in, &grey_in, (pos, neg), s1, 1, lin);
    let ge = center_surround(st, "inner.grey_extracting", &grey_in, &grey_in, (neg, pos), s1, 1, lin);
    let color = concat(&[&cg, &ce]);
    let grey = concat(&[&gg, &ge]);

    let s2 = cfg.retina.outer_stride;
    let w = 2 * u;
    let r = channels(&color, &derived_from(u, 0));
    let g = channels(&color, &derived_from(u, 1));
    let b = channels(&color, &derived_from(u, 2));
    let y = add(&r, &g);
    let rg = center_surround(st, "outer.p_rg", &r, &g, (pos, neg), s2, w, lin);
    let gr = center_surround(st, "outer.p_gr", &g, &r, (pos, neg), s2, w, lin);
    let by = center_surround(st, "outer.nmp_by", &b, &y, (pos, neg), s2, w, lin);
    let yb = center_surround(st, "outer.nmp_yb", &y, &b, (pos, neg), s2, w, lin);
    let mg = center_surround(st, "outer.m_giving", &grey, &grey, (pos, neg), s2, 1, lin);
    let me = center_surround(st, "outer.m_extracting", &grey, &grey, (neg, pos), s2, 1, lin);
    let outer = concat(&[&rg, &gr, &by, &yb, &mg, &me]);

    let s3 = cfg.lgn.stride;
    let p_in = range(&outer, 0, 4 * u);
    let nmp_in = range(&outer, 4 * u, 4 * u);
    let m_in = range(&outer, 8 * u, 2 * u);
    let m = relu(&conv_named(st, "lgn.m", &m_in, s3, 1));
    let p = relu(&conv_named(st, "lgn.p", &shuffle(&p_in, 2), s3, 2));
    let half = 2 * u;
    let ks = conv_named(st, "lgn.k_sensitive", &range(&nmp_in, 0, half), s3, half);
    let ki = conv_named(st, "lgn.k_insensitive", &range(&nmp_in, half, half), s3, 1);
    let k = relu(&concat(&[&ks, &ki]));

    let striate = striate_forward(st, &cfg.striate, &m, &p, &k);
    let gelu_act = matches!(cfg.head.activation, cvsnet::head::Activation::Gelu);
    let logits = head_forward(st, gelu_act, &striate);
    OracleTaps { inner_color: color, inner_grey: grey, outer, m, p, k, striate, logits }
}

pub fn directions_of(x: &T64, names: &[&str], k: usize) -> T64 {
    let maps: Vec<T64> = names
        .iter()
        .map(|d| {
            let (dy, dx) = direction_step(d);
            difference_tensor(x, dy, dx, k)
        })
        .collect();
    concat(&maps.iter().collect::<Vec<_>>())
}

fn orient_direction(store: &ParamStore<f64>, name: &str, x: &T64, stride: usize, names: &[&str], k: usize) -> (T64, T64) {
    let stem = relu(&conv_named(store, &format!("{name}.stem"), x, stride, 1));
    let h = conv_named(store, &format!("{name}.orient_h"), &stem, 1, 1);
    let v = conv_named(store, &format!("{name}.orient_v"), &stem, 1, 1);
    let orient = relu(&concat(&[&h, &v]));
    let direction = conv_named(store, &format!("{name}.mix"), &directions_of(&stem, names, k), 1, 1);
    (orient, direction)
}

/// Six striate outputs in their stable order.
pub fn striate_forward(st: &ParamStore<f64>, cfg: &StriateConfig, m: &T64, p: &T64, k: &T64) -> Vec<T64> {
    let (mo, md) = orient_direction(st, "striate.m", m, cfg.stride, &ALL_DIRECTIONS, cfg.shift);
    let (po, pd) = orient_direction(st, "striate.pib", p, cfg.stride, &SIMPLE_DIRECTIONS, cfg.shift);
    let fm = conv_named(st, "striate.blob.from_m", m, 1, 1);
    let fp = conv_named(st, "striate.blob.from_p", p, 1, 1);
    let fk = conv_named(st, "striate.blob.from_k", k, 1, 1);
    let stem = relu(&conv_named(st, "striate.blob.stem", &concat(&[&fm, &fp, &fk]), cfg.stride, 1));
    let bd = conv_named(st, "striate.blob.mix", &directions_of(&stem, &SIMPLE_DIRECTIONS, cfg.shift), 1, 1);
    let bc = relu(&conv_named(st, "striate.blob.conv", &stem, 1, 1));
    vec![mo, md, po, pd, bd, bc]
}

pub fn head_forward(st: &ParamStore<f64>, gelu_act: bool, groups: &[T64]) -> T64 {
    let names = ["m_orient", "m_direction", "pib_orient", "pib_direction", "blob_direction", "blob_conv"];
    let halves: Vec<T64> = names
        .iter()
        .zip(groups)
        .map(|(n, g)| {
            let mixed = mixer(st, &format!("head.mix.{n}"), g, gelu_act);
            conv_named(st, &format!("head.halve.{n}"), &mixed, 1, 1)
        })
        .collect();
    let total = concat(&halves.iter().collect::<Vec<_>>());
    let total = mixer(st, "head.mix.global", &total, gelu_act);
    let total = layer_norm(&total, &param(st, "head.norm.gamma"), &param(st, "head.norm.beta"));
    let pooled = avg_pool(&total);
    linear(&pooled, &param(st, "head.classifier.weight"), &param(st, "head.classifier.bias"))
}

/// Makes every parameter of a bias-enabled model zero-free random so that
/// biases also participate in oracle comparisons.
pub fn randomize_biases(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).filter(|n| n.ends_with(".bias")).collect();
    for name in names {
        let id = store.find(&name).unwrap();
        let shape = store.value(id).shape();
        let data = (0..shape.numel()).map(|_| r.gen_range(-0.1..0.1)).collect();
        store.set_value(id, Tensor4D::from_vec(shape, data).unwrap()).unwrap();
    }
}
