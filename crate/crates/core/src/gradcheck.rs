//! Finite-difference verification of every differentiable operation, the
//! losses and the network, in 64-bit precision.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::color::srgb_to_lab_pixel;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::grid::{GridSpec, NEIGHBORS};
use crate::losses::{joint_loss, semantic_loss, slic_loss, LossConfig, Reduction};
use crate::net::{NetworkSpec, SpixelNet};
use crate::ops::{BatchNormMode, BatchNormState, ConvGeometry};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Coordinates sampled per check.
    pub coordinates: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { seed: 0, coordinates: 20, step: 1e-5, tolerance: 1e-3 }
    }
}

impl GradCheckConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            writeln!(
                s,
                "{:<28} coords={:<3} max_rel_err={:.3e} {}",
                r.name,
                r.coordinates,
                r.max_rel_error,
                if r.passed { "ok" } else { "FAIL" }
            )
            .unwrap();
        }
        let verdict = if self.passed() { "all checks passed" } else { "some checks FAILED" };
        writeln!(s, "{} checks, {verdict} in {:.1}s", self.results.len(), self.seconds).unwrap();
        s
    }
}

/// `|a - n| / max(|a|, |n|)`, with magnitudes below `floor` treated as
/// `floor` so that vanishing gradients compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Compares reverse-mode gradients of the scalar built by `build` with
/// central differences at randomly chosen coordinates of `inputs`.
pub fn check_gradients(
    name: &str,
    inputs: &[Tensor<f64>],
    build: &Build<'_>,
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };
    compare(name, inputs, &analytic, &eval, cfg, rng)
}

/// Central differences of `eval` against precomputed `analytic` gradients.
pub fn compare(
    name: &str,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    eval: &dyn Fn(&[Tensor<f64>]) -> Result<f64>,
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    let scale = analytic.iter().map(|t| t.max_abs()).fold(0.0, f64::max);
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let n = cfg.coordinates.min(total);
    let picks = sample(rng, total, n).into_vec();
    let mut values = inputs.to_vec();
    let mut worst = 0.0f64;
    for flat in picks {
        let (mut t, mut i) = (0, flat);
        while i >= values[t].len() {
            i -= values[t].len();
            t += 1;
        }
        let orig = values[t].data()[i];
        values[t].data_mut()[i] = orig + cfg.step;
        let plus = eval(&values)?;
        values[t].data_mut()[i] = orig - cfg.step;
        let minus = eval(&values)?;
        values[t].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        // gradients many orders below the largest one are compared absolutely
        worst = worst.max(relative_error(analytic[t].data()[i], numeric, 1e-6 * scale.max(1e-12)));
    }
    Ok(CheckResult { name: name.to_string(), coordinates: n, max_rel_error: worst, passed: worst < cfg.tolerance })
}

/// Checks every network parameter against an unsupervised loss on a small
/// random batch, with batch statistics in the normalization layers.
fn check_network(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let net = SpixelNet::<f64>::new(NetworkSpec::default(), cfg.seed)?;
    let images = uniform(&[2, 16, 16, 3], 0.0, 1.0, rng);
    let input = net.prepare_input(&images)?;
    let grid = GridSpec::new(16, 16, 4)?;
    let lab = Tensor::from_fn(&[2, 16, 16, 3], |i| {
        let px = [images.at(&[i[0], i[1], i[2], 0]), images.at(&[i[0], i[1], i[2], 1]), images.at(&[i[0], i[1], i[2], 2])];
        srgb_to_lab_pixel(px)[i[3]]
    });
    let loss_cfg = LossConfig::new(10.0, 4)?.with_reduction(Reduction::Sum);
    let run = |net: &SpixelNet<f64>, g: &mut Graph<f64>| -> Result<(Var, Vec<Var>)> {
        let x = g.constant(input.clone());
        let pass = net.forward(g, x, &grid, BatchNormMode::Train)?;
        let f = g.constant(lab.clone());
        Ok((slic_loss(g, pass.q, f, &grid, &loss_cfg)?.total, pass.params))
    };
    let mut g = Graph::new();
    let (loss, params) = run(&net, &mut g)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = params.iter().map(|&v| grads.wrt(v)).collect();
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut local = net.clone();
        local.params_mut().clone_from_slice(values);
        let mut g = Graph::new();
        let (loss, _) = run(&local, &mut g)?;
        Ok(g.value(loss).data()[0])
    };
    compare("network_parameters", net.params(), &analytic, &eval, cfg, rng)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from `|x| < margin` so kinks stay out of reach of the
/// difference step.
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.random_range(margin..2.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// `sum(x * r)` for a fixed random `r`, turning any output into a scalar
/// with a non-trivial gradient.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform(g.value(x).shape(), -1.0, 1.0, &mut rng);
    let r = g.constant(r);
    let m = g.mul(x, r)?;
    Ok(g.sum_all(m))
}

/// Masked association `[N, H, W, 9]` from channel-first logits.
fn assoc_from_logits(g: &mut Graph<f64>, logits: Var, grid: &GridSpec) -> Result<Var> {
    let p = g.softmax_channels(logits)?;
    let p = g.mask_renormalize(p, *grid)?;
    g.channels_last(p)
}

pub fn run_suite(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = &mut rng;
    let mut results = Vec::new();
    let seed = cfg.seed;

    let geo = ConvGeometry::new(2, 1, 1);
    let inputs = [uniform(&[2, 3, 6, 6], -1.0, 1.0, r), uniform(&[4, 3, 3, 3], -1.0, 1.0, r), uniform(&[4], -1.0, 1.0, r)];
    results.push(check_gradients("conv2d", &inputs, &|g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), geo)?;
        project(g, y, seed)
    }, cfg, r)?);

    let dil = ConvGeometry::new(1, 2, 2);
    let inputs = [uniform(&[1, 2, 5, 5], -1.0, 1.0, r), uniform(&[3, 2, 3, 3], -1.0, 1.0, r)];
    results.push(check_gradients("conv2d_dilated", &inputs, &|g, v| {
        let y = g.conv2d(v[0], v[1], None, dil)?;
        project(g, y, seed)
    }, cfg, r)?);

    let inputs = [uniform(&[2, 3, 4, 4], -1.0, 1.0, r), uniform(&[3, 2, 4, 4], -1.0, 1.0, r), uniform(&[2], -1.0, 1.0, r)];
    results.push(check_gradients("conv_transpose2d", &inputs, &|g, v| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), geo)?;
        project(g, y, seed)
    }, cfg, r)?);

    let inputs = [away_from_zero(&[2, 3, 5, 5], 0.01, r)];
    results.push(check_gradients("leaky_relu", &inputs, &|g, v| {
        let y = g.leaky_relu(v[0], 0.1);
        project(g, y, seed)
    }, cfg, r)?);

    let inputs = [uniform(&[2, 9, 4, 4], -3.0, 3.0, r)];
    results.push(check_gradients("softmax_channels", &inputs, &|g, v| {
        let y = g.softmax_channels(v[0])?;
        project(g, y, seed)
    }, cfg, r)?);

    let inputs = [uniform(&[3, 4, 3, 3], -2.0, 2.0, r), uniform(&[4], 0.5, 1.5, r), uniform(&[4], -1.0, 1.0, r)];
    for (name, mode) in [("batch_norm_train", BatchNormMode::Train), ("batch_norm_eval", BatchNormMode::Eval)] {
        let mut state = BatchNormState::new(4);
        state.running_mean = uniform(&[4], -0.5, 0.5, r);
        state.running_var = uniform(&[4], 0.5, 2.0, r);
        results.push(check_gradients(name, &inputs, &|g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], &state, mode)?;
            project(g, y, seed)
        }, cfg, r)?);
    }

    let inputs = [uniform(&[2, 2, 3, 3], -1.0, 1.0, r), uniform(&[2, 3, 3, 3], -1.0, 1.0, r)];
    results.push(check_gradients("concat_channels", &inputs, &|g, v| {
        let y = g.concat_channels(v)?;
        project(g, y, seed)
    }, cfg, r)?);

    let grid = GridSpec::new(6, 6, 2)?;
    let inputs = [uniform(&[2, 9, 6, 6], -2.0, 2.0, r)];
    results.push(check_gradients("softmax_mask_renormalize", &inputs, &|g, v| {
        let q = assoc_from_logits(g, v[0], &grid)?;
        project(g, q, seed)
    }, cfg, r)?);

    let inputs = [uniform(&[2, 6, 6, NEIGHBORS], 0.05, 1.0, r), uniform(&[2, 6, 6, 3], -1.0, 1.0, r)];
    results.push(check_gradients("superpixel_centers", &inputs, &|g, v| {
        let c = g.centers(v[0], v[1], grid)?;
        project(g, c, seed)
    }, cfg, r)?);

    let inputs = [uniform(&[2, 6, 6, NEIGHBORS], 0.0, 1.0, r), uniform(&[2, 3, 3, 2], -1.0, 1.0, r)];
    results.push(check_gradients("pixel_reconstruction", &inputs, &|g, v| {
        let c = g.reconstruct(v[0], v[1], grid)?;
        project(g, c, seed)
    }, cfg, r)?);

    let inputs = [uniform(&[3, 4, 3], -1.0, 1.0, r), uniform(&[3, 4, 3], 0.2, 2.0, r)];
    results.push(check_gradients("elementwise", &inputs, &|g, v| {
        let a = g.mul(v[0], v[1])?;
        let b = g.ln(v[1]);
        let c = g.sub(a, b)?;
        let d = g.add(c, v[0])?;
        let e = g.scale(d, 0.7);
        let f = g.add_scalar(e, 0.3);
        let n = g.norm_last_axis(f)?;
        project(g, n, seed)
    }, cfg, r)?);

    let inputs = [away_from_zero(&[4, 5], 0.05, r).map(|v| if (v.abs() - 1.0).abs() < 0.05 { v * 1.2 } else { v })];
    results.push(check_gradients("smooth_l1", &inputs, &|g, v| {
        let y = g.smooth_l1(v[0]);
        project(g, y, seed)
    }, cfg, r)?);

    // losses with respect to raw association logits
    let grid = GridSpec::new(8, 8, 2)?;
    let sum_cfg = LossConfig::new(10.0, 2)?.with_reduction(Reduction::Sum);
    let lab = uniform(&[2, 8, 8, 3], 0.0, 100.0, r);
    let logits = [uniform(&[2, 9, 8, 8], -2.0, 2.0, r)];
    results.push(check_gradients("slic_loss", &logits, &|g, v| {
        let q = assoc_from_logits(g, v[0], &grid)?;
        let f = g.constant(lab.clone());
        Ok(slic_loss(g, q, f, &grid, &sum_cfg)?.total)
    }, cfg, r)?);

    let onehot = Tensor::from_fn(&[2, 8, 8, 3], |i| if (i[1] / 3 + i[2] / 5) % 3 == i[3] { 1.0 } else { 0.0 });
    let sem_cfg = LossConfig::new(0.003, 2)?.with_reduction(Reduction::Sum);
    results.push(check_gradients("semantic_loss", &logits, &|g, v| {
        let q = assoc_from_logits(g, v[0], &grid)?;
        let f = g.constant(onehot.clone());
        Ok(semantic_loss(g, q, f, &grid, &sem_cfg)?.total)
    }, cfg, r)?);

    let gt = uniform(&[2, 8, 8], 0.0, 4.0, r);
    let valid = Tensor::from_fn(&[2, 8, 8], |i| if (i[1] + i[2]) % 5 == 0 { 0.0 } else { 1.0 });
    let joint_cfg = LossConfig { cell_size: 2, ..LossConfig::default() };
    // predictions sit within 1 of the truth on some pixels and beyond it on others
    let mut joint_inputs = vec![logits[0].clone()];
    for _ in 0..3 {
        let offset = away_from_zero(&[2, 8, 8], 0.05, r).map(|v| if (v.abs() - 1.0).abs() < 0.05 { v * 1.2 } else { v });
        joint_inputs.push(gt.zip_map(&offset, |a, b| a + b)?);
    }
    results.push(check_gradients("joint_loss", &joint_inputs, &|g, v| {
        let q = assoc_from_logits(g, v[0], &grid)?;
        let f = g.constant(lab.clone());
        let d = g.constant(gt.clone());
        Ok(joint_loss(g, [v[1], v[2], v[3]], d, &valid, q, f, &grid, &joint_cfg)?.total)
    }, cfg, r)?);

    results.push(check_network(cfg, r)?);

    Ok(GradCheckReport { results, seconds: start.elapsed().as_secs_f64() })
}
