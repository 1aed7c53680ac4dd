//! Finite-difference checks for every differentiable operation and for the
//! composed attention and loss blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assign::{Assignment, AssignmentMap, RegressionTarget, Source};
use crate::attention::{self, AttentionConfig, BoundPsst, Projection, ProjectionKind};
use crate::autodiff::gradcheck::DEFAULT_TOLERANCE;
use crate::autodiff::{concat, grad_check_many, Array, AutodiffError, GradCheckReport, Graph, InterpMode, Result, Tensor};
use crate::losses::{multitask_loss, BranchOutputs, LossConfig};

/// Minimum random instances per case.
pub const MIN_INSTANCES: usize = 20;

type Rng8 = ChaCha8Rng;

fn uniform(rng: &mut Rng8, shape: &[usize], lo: f64, hi: f64) -> Array {
    Array::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values in `[-2, -0.1] U [0.1, 2]`, away from the ReLU kink.
fn off_zero(rng: &mut Rng8, shape: &[usize]) -> Array {
    Array::from_fn(shape, |_| {
        let v = rng.random_range(0.1..2.0);
        if rng.random_bool(0.5) { v } else { -v }
    })
}

/// Scalar read-out `sum(t * w)` with a fixed random `w`, so that no output
/// element has a structurally zero gradient.
fn readout<'g>(g: &'g Graph, t: &Tensor<'g>, w: &Array) -> Result<Tensor<'g>> {
    Ok(t.mul(&g.constant(w.clone()))?.sum())
}

struct Case<'a> {
    name: &'static str,
    make: Box<dyn Fn(&mut Rng8) -> Vec<Array> + 'a>,
    /// Output shape for the read-out weights, given the inputs.
    out_shape: Box<dyn Fn(&[Array]) -> Vec<usize> + 'a>,
    f: Box<dyn for<'g> Fn(&'g Graph, &[Tensor<'g>]) -> Result<Tensor<'g>> + 'a>,
}

fn case<'a>(
    name: &'static str,
    make: impl Fn(&mut Rng8) -> Vec<Array> + 'a,
    out_shape: impl Fn(&[Array]) -> Vec<usize> + 'a,
    f: impl for<'g> Fn(&'g Graph, &[Tensor<'g>]) -> Result<Tensor<'g>> + 'a,
) -> Case<'a> {
    Case {
        name,
        make: Box::new(make),
        out_shape: Box::new(out_shape),
        f: Box::new(f),
    }
}

fn same(xs: &[Array]) -> Vec<usize> {
    xs[0].shape().to_vec()
}

fn scalar(_: &[Array]) -> Vec<usize> {
    vec![1]
}

fn op_cases() -> Vec<Case<'static>> {
    let two = |shape: &'static [usize]| move |r: &mut Rng8| vec![uniform(r, shape, -2.0, 2.0), uniform(r, shape, -2.0, 2.0)];
    let one = |shape: &'static [usize]| move |r: &mut Rng8| vec![uniform(r, shape, -2.0, 2.0)];
    vec![
        case("add", two(&[3, 4]), same, |_, x| x[0].add(&x[1])),
        case("sub", two(&[3, 4]), same, |_, x| x[0].sub(&x[1])),
        case("mul", two(&[3, 4]), same, |_, x| x[0].mul(&x[1])),
        case("scale", one(&[5]), same, |_, x| Ok(x[0].scale(-1.7))),
        case("neg", one(&[5]), same, |_, x| Ok(x[0].neg())),
        case("add_scalar", one(&[5]), same, |_, x| Ok(x[0].add_scalar(0.3))),
        case("relu", |r| vec![off_zero(r, &[2, 5])], same, |_, x| Ok(x[0].relu())),
        case("exp", one(&[6]), same, |_, x| Ok(x[0].exp())),
        case("log", |r| vec![uniform(r, &[6], 0.2, 3.0)], same, |_, x| Ok(x[0].log())),
        case("sigmoid", one(&[6]), same, |_, x| Ok(x[0].sigmoid())),
        case(
            "add_channel_bias",
            |r| vec![uniform(r, &[3, 2, 2], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            same,
            |_, x| x[0].add_channel_bias(&x[1]),
        ),
        case(
            "mul_scalar",
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[1], -2.0, 2.0)],
            same,
            |_, x| x[0].mul_scalar(&x[1]),
        ),
        case(
            "matmul",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)],
            |_| vec![3, 2],
            |_, x| x[0].matmul(&x[1]),
        ),
        case("transpose", one(&[3, 4]), |_| vec![4, 3], |_, x| x[0].transpose()),
        case("reshape", one(&[2, 6]), |_| vec![3, 4], |_, x| x[0].reshape(&[3, 4])),
        case("narrow", one(&[3, 5]), |_| vec![3, 2], |_, x| x[0].narrow(1, 2, 2)),
        case(
            "concat",
            |r| vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[1, 3], -1.0, 1.0)],
            |_| vec![3, 3],
            |_, x| concat(&[x[0], x[1]], 0),
        ),
        case("softmax_rows", one(&[3, 4]), same, |_, x| x[0].softmax(1)),
        case("softmax_cols", one(&[3, 4]), same, |_, x| x[0].softmax(0)),
        case("sum", one(&[2, 3]), scalar, |_, x| Ok(x[0].sum().reshape(&[1])?)),
        case("mean", one(&[2, 3, 4]), |_| vec![3], |_, x| x[0].mean(&[0, 2])),
        case("mean_all", one(&[2, 3]), scalar, |_, x| x[0].mean_all()?.reshape(&[1])),
        case(
            "conv2d",
            |r| vec![uniform(r, &[2, 5, 5], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0)],
            |_| vec![3, 5, 5],
            |_, x| x[0].conv2d(&x[1], 1, 1),
        ),
        case(
            "conv2d_strided",
            |r| vec![uniform(r, &[2, 6, 6], -1.0, 1.0), uniform(r, &[2, 2, 3, 3], -1.0, 1.0)],
            |_| vec![2, 3, 3],
            |_, x| x[0].conv2d(&x[1], 2, 1),
        ),
        case(
            "conv2d_batched",
            |r| vec![uniform(r, &[2, 2, 4, 4], -1.0, 1.0), uniform(r, &[2, 2, 1, 1], -1.0, 1.0)],
            |_| vec![2, 2, 4, 4],
            |_, x| x[0].conv2d(&x[1], 1, 0),
        ),
        case("interpolate_nearest", one(&[2, 2, 3]), |_| vec![2, 4, 6], |_, x| x[0].interpolate(4, 6, InterpMode::Nearest)),
        case("interpolate_bilinear", one(&[2, 3, 2]), |_| vec![2, 7, 5], |_, x| x[0].interpolate(7, 5, InterpMode::Bilinear)),
        case(
            "clamped_exp",
            |r| vec![uniform(r, &[6], -3.0, 3.0)],
            same,
            |_, x| {
                crate::detector::clamped_exp(&x[0]).map_err(|e| match e {
                    crate::detector::DetectorError::Autodiff(e) => e,
                    other => block_error(other),
                })
            },
        ),
    ]
}

fn block_error(e: impl std::fmt::Display) -> AutodiffError {
    AutodiffError::Dimension {
        op: "gradsuite",
        detail: e.to_string(),
    }
}

fn attention_err(e: attention::AttentionError) -> crate::autodiff::AutodiffError {
    match e {
        attention::AttentionError::Autodiff(e) => e,
        other => block_error(other),
    }
}

fn cst_case(name: &'static str, scaled: bool, residual: bool) -> Case<'static> {
    let (c, heads) = (4, 2);
    case(
        name,
        move |r| {
            let mut v = vec![uniform(r, &[c, 3, 3], -1.0, 1.0)];
            for _ in 0..3 {
                v.push(uniform(r, &[c, c, 1, 1], -1.0, 1.0));
            }
            v
        },
        same,
        move |_, x| {
            let mut cfg = AttentionConfig::new(c, heads, ProjectionKind::OneByOneConv);
            cfg.scaled = scaled;
            cfg.residual = residual;
            let proj = Projection::Conv { q: x[1], k: x[2], v: x[3] };
            attention::cst_forward(&x[0], &cfg, &proj).map_err(attention_err)
        },
    )
}

fn psst_case(name: &'static str, concat_variant: bool) -> Case<'static> {
    let c = 2;
    let extents = [8usize, 4, 2, 1, 1];
    case(
        name,
        move |r| {
            let mut v: Vec<Array> = extents.iter().map(|&e| uniform(r, &[c, e, e], -1.0, 1.0)).collect();
            v.push(uniform(r, &[1, c, 1, 1], -1.0, 1.0));
            v.push(uniform(r, &[1], 0.5, 1.5));
            // moderate projections keep the slot softmax away from saturation
            for _ in 0..3 {
                v.push(uniform(r, &[5, 5, 1, 1], -0.5, 0.5));
            }
            if concat_variant {
                v.push(uniform(r, &[c, 2 * c, 1, 1], -1.0, 1.0));
            }
            v
        },
        |_| vec![1],
        move |g, x| {
            let mut cfg = AttentionConfig::new(5, 1, ProjectionKind::OneByOneConv);
            cfg.scaled = true;
            let params = BoundPsst {
                reduce_weight: x[5],
                reduce_bias: x[6],
                projection: Projection::Conv { q: x[7], k: x[8], v: x[9] },
                fuse: concat_variant.then(|| x[10]),
            };
            let out = attention::psst_forward(&x[..5], &cfg, &params).map_err(attention_err)?;
            // fold every level into one scalar with fixed position-dependent weights
            let mut total: Option<Tensor> = None;
            for (k, level) in out.iter().enumerate() {
                let w = Array::from_fn(&level.shape(), |i| ((i * 7 + k * 3) % 11) as f64 / 11.0 - 0.4);
                let t = readout(g, level, &w)?;
                total = Some(match total {
                    None => t,
                    Some(acc) => acc.add(&t)?,
                });
            }
            total.expect("five levels").reshape(&[1])
        },
    )
}

fn channel_reduce_case() -> Case<'static> {
    case(
        "channel_reduce",
        |r| vec![uniform(r, &[4, 3, 3], -1.0, 1.0), uniform(r, &[1, 4, 1, 1], -1.0, 1.0), uniform(r, &[1], -1.0, 1.0)],
        |_| vec![1, 3, 3],
        |_, x| attention::channel_reduce(&x[0], &x[1], &x[2]).map_err(attention_err),
    )
}

/// Loss over a random two-level map; labels are fixed per instance by a
/// seed carried in the last input.
fn multitask_case() -> Case<'static> {
    const K: usize = 3;
    const SIZES: [(usize, usize); 2] = [(3, 3), (2, 2)];
    fn map_for(seed: u64) -> AssignmentMap {
        let mut r = Rng8::seed_from_u64(seed);
        let mut units = Vec::new();
        for &(h, w) in &SIZES {
            for _ in 0..h * w {
                units.push(r.random_bool(0.4).then(|| Assignment {
                    class: r.random_range(1..=K as u32),
                    gt: 0,
                    target: RegressionTarget::new(
                        r.random_range(0.5..5.0),
                        r.random_range(0.5..5.0),
                        r.random_range(0.5..5.0),
                        r.random_range(0.5..5.0),
                    ),
                    source: Source::AnchorFree,
                }));
            }
        }
        if units.iter().all(Option::is_none) {
            units[0] = Some(Assignment {
                class: 1,
                gt: 0,
                target: RegressionTarget::new(1.0, 2.0, 3.0, 4.0),
                source: Source::AnchorFree,
            });
        }
        AssignmentMap { units, num_gts: 1 }
    }
    case(
        "multitask_loss",
        |r| {
            let mut v = Vec::new();
            for &(h, w) in &SIZES {
                v.push(uniform(r, &[K, h, w], -3.0, 2.0));
            }
            for &(h, w) in &SIZES {
                v.push(uniform(r, &[4, h, w], 0.5, 5.0));
            }
            v.push(Array::full(&[1], r.random_range(0..u32::MAX) as f64));
            v
        },
        |_| vec![1],
        |_, x| {
            let map = map_for(x[4].data()[0] as u64);
            let outputs = BranchOutputs {
                cls: vec![x[0], x[1]],
                reg: vec![x[2], x[3]],
            };
            let (loss, _) = multitask_loss(&outputs, &map, K, &LossConfig::default())
                .map_err(block_error)?;
            loss.reshape(&[1])
        },
    )
}

fn all_cases() -> Vec<Case<'static>> {
    let mut cases = op_cases();
    cases.push(cst_case("cst", false, false));
    cases.push(cst_case("cst_scaled_residual", true, true));
    cases.push(psst_case("psst", false));
    cases.push(psst_case("psst_concat", true));
    cases.push(channel_reduce_case());
    cases.push(multitask_case());
    cases
}

/// Names of every case, in suite order.
pub fn case_names() -> Vec<&'static str> {
    all_cases().iter().map(|c| c.name).collect()
}

/// Runs every case on `instances` random inputs and returns one report per
/// case holding the worst relative error seen.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<GradCheckReport>> {
    let mut rng = Rng8::seed_from_u64(seed);
    let mut reports = Vec::new();
    for c in all_cases() {
        let mut merged = GradCheckReport::new(c.name, 0.0, DEFAULT_TOLERANCE);
        for _ in 0..instances {
            let inputs = (c.make)(&mut rng);
            let w = uniform(&mut rng, &(c.out_shape)(&inputs), -1.0, 1.0);
            // the multitask seed input is not a differentiable quantity
            let n_diff = if c.name == "multitask_loss" { inputs.len() - 1 } else { inputs.len() };
            let (diff, fixed) = inputs.split_at(n_diff);
            let report = grad_check_many(
                c.name,
                |g, xs| {
                    let mut all: Vec<Tensor> = xs.to_vec();
                    all.extend(fixed.iter().map(|a| g.constant(a.clone())));
                    let out = (c.f)(g, &all)?;
                    readout(g, &out, &w)
                },
                diff,
                DEFAULT_TOLERANCE,
            )?;
            merged = merged.merge(&report);
        }
        reports.push(merged);
    }
    Ok(reports)
}
