//! Central finite-difference checks of the reverse pass, in f64.
//!
//! Each check reduces an operation's output to a scalar with a fixed random
//! weighting, then compares analytic gradients against
//! `(f(x + h) − f(x − h)) / 2h` on sampled coordinates. The error of one
//! coordinate is `|a − n| / max(|a|, |n|, FLOOR)`.
//!
//! Rectifiers are non-differentiable at zero. A coordinate whose two-sided
//! difference at `h` and `h/2` disagree straddles such a kink; it is counted
//! as non-smooth and excluded, and at most 2% of coordinates may be excluded.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{CvsError, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::head::{Activation, MixerBlock, MixerBlockSpec};
use crate::lgn::{Lgn, LgnConfig, PathwayBundle};
use crate::retina::{CenterSurroundUnit, ColorPlane, InnerPlexiform, OpponentUnit, OuterPlexiform, RetinaConfig};
use crate::striate::{StriateConfig, StriateCortex};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor4D};

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-3;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
pub const MAX_NON_SMOOTH_FRACTION: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub non_smooth: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, errors: &[f64], non_smooth: usize, tolerance: f64) -> Self {
        let max_rel_error = errors.iter().copied().fold(0.0, f64::max);
        let total = errors.len() + non_smooth;
        let passed = !errors.is_empty()
            && max_rel_error < tolerance
            && (non_smooth as f64) <= MAX_NON_SMOOTH_FRACTION * total as f64;
        CheckResult { name: name.to_string(), checked: errors.len(), non_smooth, max_rel_error, tolerance, passed }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Scalar objective `Σ r ⊙ op(inputs)` for fixed weights `r`.
fn objective(build: &Build, inputs: &[Tensor4D<f64>], weights: &mut Option<Tensor4D<f64>>, rng: &mut ChaCha8Rng) -> Result<(f64, Tape<f64>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input_with_grad(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let shape = tape.shape(out);
    let r = weights.get_or_insert_with(|| Tensor4D::random_uniform(shape, -1.0, 1.0, rng)).clone();
    let rv = tape.input(r);
    let prod = tape.mul(out, rv)?;
    let loss = tape.sum(prod);
    let value = tape.value(loss).data()[0];
    Ok((value, tape, vars, loss))
}

fn two_sided(f: &mut dyn FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    Ok((f(h)? - f(-h)?) / (2.0 * h))
}

/// Numeric derivative, or `None` when the stencil crosses a kink.
fn numeric(f: &mut dyn FnMut(f64) -> Result<f64>) -> Result<Option<f64>> {
    let a = two_sided(f, STEP)?;
    let b = two_sided(f, STEP / 2.0)?;
    if rel_error(a, b) > OP_TOLERANCE / 10.0 {
        return Ok(None);
    }
    Ok(Some(b))
}

/// Checks gradients of `build` w.r.t. every input tensor on up to
/// `samples_per_input` coordinates each.
pub fn check_op(name: &str, inputs: Vec<Tensor4D<f64>>, build: &Build, samples_per_input: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = None;
    let (_, tape, vars, loss) = objective(build, &inputs, &mut weights, &mut rng)?;
    let mut scratch = ParamStore::new();
    let grads = tape.backward(loss, &mut scratch)?;
    let mut errors = Vec::new();
    let mut non_smooth = 0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor4D::zeros(input.shape()));
        let n = input.len();
        let picks = sample(&mut rng, n, samples_per_input.min(n)).into_vec();
        for i in picks {
            let mut f = |delta: f64| -> Result<f64> {
                let mut shifted = inputs.clone();
                shifted[k].data_mut()[i] += delta;
                Ok(objective(build, &shifted, &mut weights.clone(), &mut rng.clone())?.0)
            };
            match numeric(&mut f)? {
                Some(num) => errors.push(rel_error(analytic.data()[i], num)),
                None => non_smooth += 1,
            }
        }
    }
    Ok(CheckResult::new(name, &errors, non_smooth, OP_TOLERANCE))
}

fn rand_t(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor4D<f64> {
    Tensor4D::random_uniform(shape, -1.0, 1.0, rng)
}

/// Values bounded away from zero so that rectifier kinks stay outside the stencil.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor4D<f64> {
    let data: Vec<f64> = (0..shape.numel())
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor4D::from_vec(shape, data).unwrap()
}

/// Every differentiable primitive and block.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = |n, c, h, w| Shape::new(n, c, h, w);
    let mut results = Vec::new();
    let samples = 24;
    let mut run = |name: &str, inputs: Vec<Tensor4D<f64>>, build: Box<Build>, rng: &mut ChaCha8Rng| -> Result<()> {
        let r = check_op(name, inputs, build.as_ref(), samples, rng.gen())?;
        results.push(r);
        Ok(())
    };

    let spec = ConvSpec::same(4, 6, 3, 2).with_groups(2).with_bias(true);
    let inputs = vec![rand_t(&mut rng, s(2, 4, 5, 6)), rand_t(&mut rng, spec.weight_shape()), rand_t(&mut rng, spec.bias_shape())];
    run("conv2d.grouped_strided", inputs, Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec)), &mut rng)?;

    let spec = ConvSpec::same(3, 3, 1, 1).with_kernel(1, 5).with_groups(3);
    let inputs = vec![rand_t(&mut rng, s(1, 3, 4, 7)), rand_t(&mut rng, spec.weight_shape())];
    run("conv2d.depthwise_1xn", inputs, Box::new(move |t, v| t.conv2d(v[0], v[1], None, spec)), &mut rng)?;

    let spec = ConvSpec::same(5, 3, 1, 1).with_bias(true);
    let inputs = vec![rand_t(&mut rng, s(2, 5, 3, 3)), rand_t(&mut rng, spec.weight_shape()), rand_t(&mut rng, spec.bias_shape())];
    run("conv2d.pointwise", inputs, Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec)), &mut rng)?;

    run("relu", vec![rand_away_from_zero(&mut rng, s(2, 3, 3, 3))], Box::new(|t, v| Ok(t.relu(v[0]))), &mut rng)?;
    run(
        "scaled_relu.negative_gain",
        vec![rand_away_from_zero(&mut rng, s(1, 3, 4, 4))],
        Box::new(|t, v| t.scaled_relu(v[0], -0.3)),
        &mut rng,
    )?;
    run("gelu", vec![rand_t(&mut rng, s(2, 3, 3, 3))], Box::new(|t, v| Ok(t.gelu(v[0]))), &mut rng)?;

    let two = |rng: &mut ChaCha8Rng| vec![rand_t(rng, s(2, 3, 2, 3)), rand_t(rng, s(2, 3, 2, 3))];
    run("add", two(&mut rng), Box::new(|t, v| t.add(v[0], v[1])), &mut rng)?;
    run("sub", two(&mut rng), Box::new(|t, v| t.sub(v[0], v[1])), &mut rng)?;
    run("mul", two(&mut rng), Box::new(|t, v| t.mul(v[0], v[1])), &mut rng)?;
    run("scale", vec![rand_t(&mut rng, s(1, 2, 3, 3))], Box::new(|t, v| Ok(t.scale(v[0], -1.7))), &mut rng)?;

    run(
        "select_channels",
        vec![rand_t(&mut rng, s(2, 5, 2, 2))],
        Box::new(|t, v| t.select_channels(v[0], &[4, 0, 0, 2])),
        &mut rng,
    )?;
    run("channel_shuffle", vec![rand_t(&mut rng, s(2, 6, 2, 2))], Box::new(|t, v| t.channel_shuffle(v[0], 2)), &mut rng)?;
    run(
        "concat_channels",
        vec![rand_t(&mut rng, s(2, 2, 3, 3)), rand_t(&mut rng, s(2, 3, 3, 3))],
        Box::new(|t, v| t.concat_channels(&[v[0], v[1], v[0]])),
        &mut rng,
    )?;
    run("channel_sum", vec![rand_t(&mut rng, s(2, 4, 3, 3))], Box::new(|t, v| t.channel_sum(v[0], &[0, 2, 3])), &mut rng)?;
    run("difference_map", vec![rand_t(&mut rng, s(2, 2, 4, 5))], Box::new(|t, v| Ok(t.difference_map(v[0], -1, 2))), &mut rng)?;

    let inputs = vec![rand_t(&mut rng, s(2, 3, 2, 3)), rand_t(&mut rng, s(8, 6, 1, 1)), rand_t(&mut rng, s(1, 1, 8, 1))];
    run("token_linear", inputs, Box::new(|t, v| t.token_linear(v[0], v[1], Some(v[2]), 8, 1)), &mut rng)?;
    let inputs = vec![rand_t(&mut rng, s(3, 5, 1, 1)), rand_t(&mut rng, s(4, 5, 1, 1)), rand_t(&mut rng, s(1, 4, 1, 1))];
    run("linear", inputs, Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))), &mut rng)?;
    let inputs = vec![rand_t(&mut rng, s(2, 5, 2, 3)), rand_t(&mut rng, s(1, 5, 1, 1)), rand_t(&mut rng, s(1, 5, 1, 1))];
    run("layer_norm", inputs, Box::new(|t, v| t.layer_norm_channels(v[0], v[1], v[2], 1e-5)), &mut rng)?;
    run("global_avg_pool", vec![rand_t(&mut rng, s(2, 3, 3, 4))], Box::new(|t, v| Ok(t.global_avg_pool(v[0]))), &mut rng)?;
    run("sum", vec![rand_t(&mut rng, s(2, 3, 2, 2))], Box::new(|t, v| Ok(t.sum(v[0]))), &mut rng)?;
    run(
        "smoothed_cross_entropy",
        vec![rand_t(&mut rng, s(4, 5, 1, 1)).scale(3.0)],
        Box::new(|t, v| t.smoothed_cross_entropy(v[0], &[0, 3, 4, 3], 0.1)),
        &mut rng,
    )?;

    Ok(results)
}

type BlockBuild = dyn Fn(&mut Tape<f64>, &ParamStore<f64>, Var) -> Result<Var>;

fn block_objective(
    build: &BlockBuild,
    store: &ParamStore<f64>,
    input: &Tensor4D<f64>,
    weights: &Tensor4D<f64>,
) -> Result<(Tape<f64>, Var, Var)> {
    let mut tape = Tape::new();
    let x = tape.input_with_grad(input.clone());
    let out = build(&mut tape, store, x)?;
    if tape.shape(out) != weights.shape() {
        return Err(CvsError::shape("gradcheck", format!("block output {} vs weights {}", tape.shape(out), weights.shape())));
    }
    let r = tape.input(weights.clone());
    let prod = tape.mul(out, r)?;
    let loss = tape.sum(prod);
    Ok((tape, x, loss))
}

/// Checks a block's gradients with respect to its input and to sampled
/// entries of its parameters, running the block's own forward code.
pub fn check_block(
    name: &str,
    store: &ParamStore<f64>,
    input: Tensor4D<f64>,
    build: &BlockBuild,
    samples: usize,
    seed: u64,
) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe_shape = {
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let out = build(&mut tape, store, x)?;
        tape.shape(out)
    };
    let weights = Tensor4D::random_uniform(probe_shape, -1.0, 1.0, &mut rng);
    let mut grads_store = store.clone();
    grads_store.zero_grad();
    let (tape, x, loss) = block_objective(build, store, &input, &weights)?;
    let grads = tape.backward(loss, &mut grads_store)?;
    let dx = grads.get(x).cloned().unwrap_or_else(|| Tensor4D::zeros(input.shape()));
    let value = |s: &ParamStore<f64>, i: &Tensor4D<f64>| -> Result<f64> {
        let (tape, _, loss) = block_objective(build, s, i, &weights)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut errors = Vec::new();
    let mut non_smooth = 0;
    let mut record = |analytic: f64, num: Option<f64>| match num {
        Some(n) => errors.push(rel_error(analytic, n)),
        None => non_smooth += 1,
    };
    for i in sample(&mut rng, input.len(), samples.min(input.len())).into_vec() {
        let mut f = |d: f64| {
            let mut shifted = input.clone();
            shifted.data_mut()[i] += d;
            value(store, &shifted)
        };
        record(dx.data()[i], numeric(&mut f)?);
    }
    let coords: Vec<(usize, usize)> =
        store.iter().flat_map(|(id, p)| (0..p.value.len()).map(move |e| (id.index(), e))).collect();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for k in sample(&mut rng, coords.len(), samples.min(coords.len())).into_vec() {
        let (pi, e) = coords[k];
        let id = ids[pi];
        let analytic = grads_store.get(id).grad.as_ref().map_or(0.0, |g| g.data()[e]);
        let mut probe = store.clone();
        let base = store.value(id).clone();
        let mut f = |d: f64| {
            let mut v = base.clone();
            v.data_mut()[e] += d;
            probe.set_value(id, v)?;
            value(&probe, &input)
        };
        record(analytic, numeric(&mut f)?);
    }
    Ok(CheckResult::new(name, &errors, non_smooth, OP_TOLERANCE))
}

/// Retina, LGN, striate and mixer blocks with biases enabled.
pub fn block_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
    let samples = 24;
    let mut results = Vec::new();
    let mut cfg = RetinaConfig::default();
    cfg.units_per_cell_type = 1;
    cfg.inner_stride = 1;
    cfg.outer_stride = 2;
    let img = |rng: &mut ChaCha8Rng, c: usize, side: usize| Tensor4D::random_uniform(Shape::new(2, c, side, side), 0.0, 1.0, rng);

    let mut store = ParamStore::new();
    let unit = CenterSurroundUnit::new(
        &mut store,
        "cs",
        ConvSpec::same(1, 2, 3, 1).with_bias(true),
        ConvSpec::same(1, 2, 7, 1).with_bias(true),
        (1.0, -0.3),
        false,
        &mut rng,
    )?;
    let input = img(&mut rng, 1, 8);
    let u = unit.clone();
    results.push(check_block("block.center_surround", &store, input, &move |t, s, x| u.forward(t, s, x), samples, rng.gen())?);

    let mut store = ParamStore::new();
    let unit = CenterSurroundUnit::new(
        &mut store,
        "opp",
        ConvSpec::same(1, 2, 3, 1),
        ConvSpec::same(1, 2, 5, 1),
        (1.0, -0.3),
        false,
        &mut rng,
    )?;
    let opp = OpponentUnit::new(ColorPlane::Y, ColorPlane::B, unit)?;
    let input = img(&mut rng, 3, 8);
    results.push(check_block("block.opponent", &store, input, &move |t, s, x| opp.forward(t, s, x), samples, rng.gen())?);

    let mut store = ParamStore::new();
    let inner = InnerPlexiform::new(&cfg, true, &mut store, &mut rng)?;
    let input = img(&mut rng, 3, 8);
    let b = inner.clone();
    results.push(check_block(
        "block.inner_plexiform",
        &store,
        input,
        &move |t, s, x| Ok(b.forward(t, s, x)?.combined),
        samples,
        rng.gen(),
    )?);

    let mut store = ParamStore::new();
    let outer = OuterPlexiform::new(&cfg, true, &mut store, &mut rng)?;
    let input = img(&mut rng, 8, 8);
    let b = outer.clone();
    let outer_build = move |t: &mut Tape<f64>, s: &ParamStore<f64>, x: Var| -> Result<Var> {
        let color = t.narrow_channels(x, 0, 6)?;
        let grey = t.narrow_channels(x, 6, 2)?;
        Ok(b.forward(t, s, color, grey)?.combined)
    };
    results.push(check_block("block.outer_plexiform", &store, input, &outer_build, samples, rng.gen())?);

    let partition = outer.partition();
    let lgn_cfg = LgnConfig { stride: 1, ..LgnConfig::default() };
    let mut store = ParamStore::new();
    let lgn = Lgn::new(&lgn_cfg, &partition, true, &mut store, &mut rng)?;
    let input = Tensor4D::random_uniform(Shape::new(2, partition.total(), 6, 6), -1.0, 1.0, &mut rng);
    let (b, p) = (lgn.clone(), partition.clone());
    let lgn_build = move |t: &mut Tape<f64>, s: &ParamStore<f64>, x: Var| -> Result<Var> {
        let out = b.forward(t, s, x, &p)?;
        t.concat_channels(&[out.m, out.p, out.k])
    };
    results.push(check_block("block.lgn", &store, input, &lgn_build, samples, rng.gen())?);

    let (m, p, k) = (2, 4, 2);
    let striate_cfg = StriateConfig { stride: 1, blob_branch_channels: 2, blob_stem_channels: 2, ..StriateConfig::default() };
    let mut store = ParamStore::new();
    let striate = StriateCortex::new(&striate_cfg, (m, p, k), true, &mut store, &mut rng)?;
    let input = Tensor4D::random_uniform(Shape::new(2, m + p + k, 6, 6), -1.0, 1.0, &mut rng);
    let striate_build = move |t: &mut Tape<f64>, s: &ParamStore<f64>, x: Var| -> Result<Var> {
        let bundle = PathwayBundle { m: t.narrow_channels(x, 0, m)?, p: t.narrow_channels(x, m, p)?, k: t.narrow_channels(x, m + p, k)? };
        let out = striate.forward(t, s, &bundle)?;
        t.concat_channels(&out.as_array())
    };
    results.push(check_block("block.striate", &store, input, &striate_build, samples, rng.gen())?);

    for activation in [Activation::Gelu, Activation::Relu] {
        let spec = MixerBlockSpec { token_hw: (2, 3), channel_count: 4, token_hidden: 5, channel_hidden: 6, activation };
        let mut store = ParamStore::new();
        let mixer = MixerBlock::new(&mut store, "mix", spec, &mut rng)?;
        let input = Tensor4D::random_uniform(Shape::new(2, 4, 2, 3), -1.0, 1.0, &mut rng);
        let name = format!("block.mixer.{}", if activation == Activation::Gelu { "gelu" } else { "relu" });
        results.push(check_block(&name, &store, input, &move |t, s, x| mixer.forward(t, s, x), samples, rng.gen())?);
    }
    Ok(results)
}

/// Finite-difference check of the full model loss with respect to a random
/// sample of parameters drawn from every named block.
pub fn end_to_end(seed: u64, samples: usize) -> Result<CheckResult> {
    let mut cfg = ModelConfig::tiny(8, 3);
    cfg.seed = seed;
    let mut model: Model<f64> = Model::<f32>::build(cfg)?.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let images = Tensor4D::random_uniform(model.input_shape(2), 0.0, 1.0, &mut rng);
    let labels = [1usize, 2];
    let loss_of = |m: &Model<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.input(images.clone());
        let out = m.forward(&mut tape, x)?;
        let loss = tape.smoothed_cross_entropy(out.logits, &labels, 0.1)?;
        Ok(tape.value(loss).data()[0])
    };
    model.params.zero_grad();
    {
        let mut tape = Tape::new();
        let x = tape.input(images.clone());
        let out = model.forward(&mut tape, x)?;
        let loss = tape.smoothed_cross_entropy(out.logits, &labels, 0.1)?;
        tape.backward(loss, &mut model.params)?;
    }

    // Spread the sample across blocks: round-robin over parameter prefixes.
    let mut by_block: std::collections::BTreeMap<String, Vec<(usize, usize)>> = Default::default();
    for (id, p) in model.params.iter() {
        let block = p.name.split('.').next().unwrap_or("").to_string();
        for e in 0..p.value.len() {
            by_block.entry(block.clone()).or_default().push((id.index(), e));
        }
    }
    let blocks: Vec<Vec<(usize, usize)>> = by_block.into_values().collect();
    let mut picks = Vec::new();
    let mut k = 0;
    while picks.len() < samples {
        let pool = &blocks[k % blocks.len()];
        picks.push(pool[rng.gen_range(0..pool.len())]);
        k += 1;
    }

    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    let mut errors = Vec::new();
    let mut non_smooth = 0;
    for (pi, e) in picks {
        let id = ids[pi];
        let analytic = model
            .params
            .get(id)
            .grad
            .as_ref()
            .ok_or_else(|| CvsError::MissingGradient(model.params.get(id).name.clone()))?
            .data()[e];
        let base = model.params.value(id).clone();
        let mut probe = model.clone();
        let mut f = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v.data_mut()[e] += delta;
            probe.params.set_value(id, v)?;
            loss_of(&probe)
        };
        match numeric(&mut f)? {
            Some(num) => errors.push(rel_error(analytic, num)),
            None => non_smooth += 1,
        }
    }
    Ok(CheckResult::new("end_to_end.tiny_model", &errors, non_smooth, END_TO_END_TOLERANCE))
}

/// Ops, blocks and the end-to-end model.
pub fn full_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = op_suite(seed)?;
    results.extend(block_suite(seed)?);
    results.push(end_to_end(seed, 120)?);
    Ok(results)
}
