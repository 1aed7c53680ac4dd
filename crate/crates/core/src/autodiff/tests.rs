use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn arr(shape: &[usize], data: &[f64]) -> Array {
    Array::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    Array::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn array_rejects_bad_shape() {
    assert!(Array::new(vec![2, 3], vec![0.0; 5]).is_err());
}

#[test]
fn matmul_identity_is_noop() {
    let g = Graph::new();
    let m = arr(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let out = g.constant(Array::identity(3)).matmul(&g.constant(m.clone())).unwrap();
    assert_eq!(out.value(), m);
}

#[test]
fn matmul_small_product() {
    let g = Graph::new();
    let a = g.constant(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(arr(&[2, 1], &[1.0, 1.0]));
    assert_eq!(a.matmul(&b).unwrap().value(), arr(&[2, 1], &[3.0, 7.0]));
}

#[test]
fn matmul_shape_mismatch() {
    let g = Graph::new();
    let a = g.constant(Array::zeros(&[2, 3]));
    let b = g.constant(Array::zeros(&[2, 3]));
    assert!(matches!(a.matmul(&b), Err(AutodiffError::Dimension { .. })));
}

#[test]
fn matmul_grad_check_4x5_5x3() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [random(&mut rng, &[4, 5]), random(&mut rng, &[5, 3])];
    let report = grad_check_many("matmul", |_, xs| Ok(xs[0].matmul(&xs[1])?.sum()), &inputs, 1e-4).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn softmax_uniform_and_stable() {
    let g = Graph::new();
    let y = g.constant(Array::from_vec(vec![0.0; 3])).softmax(0).unwrap().value();
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = 1e300;
    let y = g.constant(Array::from_vec(vec![big, 0.5 * big])).softmax(0).unwrap().value();
    assert_eq!(y.data(), &[1.0, 0.0]);
    let y = g.constant(Array::from_vec(vec![big, big])).softmax(0).unwrap().value();
    assert_eq!(y.data(), &[0.5, 0.5]);
}

#[test]
fn softmax_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[6]);
    let w = random(&mut rng, &[6]);
    let report = grad_check(
        "softmax",
        |g, x| x.softmax(0)?.mul(&g.constant(w.clone())).map(|t| t.sum()),
        &x,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn softmax_on_inner_axis_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Graph::new();
    let x = g.constant(random(&mut rng, &[3, 4, 5]));
    let y = x.softmax(1).unwrap().value();
    for a in 0..3 {
        for c in 0..5 {
            let s: f64 = (0..4).map(|b| y.at(&[a, b, c])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_pointwise_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[3, 4, 5]);
    let mut w = Array::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let g = Graph::new();
    let xt = g.param(&x);
    let y = xt.conv2d(&g.constant(w), 1, 0).unwrap();
    assert_eq!(y.value(), x);
    // identity on gradients too
    let r = random(&mut rng, &[3, 4, 5]);
    y.mul(&g.constant(r.clone())).unwrap().sum().backward().unwrap();
    assert_eq!(xt.grad().unwrap(), r);
}

#[test]
fn conv_ones_kernel_spreads_hot_pixel() {
    let mut x = Array::zeros(&[1, 5, 5]);
    x.data_mut()[2 * 5 + 2] = 1.0;
    let g = Graph::new();
    let y = g
        .constant(x)
        .conv2d(&g.constant(Array::full(&[1, 1, 3, 3], 1.0)), 1, 1)
        .unwrap()
        .value();
    assert_eq!(y.shape(), &[1, 5, 5]);
    for r in 0..5 {
        for c in 0..5 {
            let inside = (1..=3).contains(&r) && (1..=3).contains(&c);
            assert_eq!(y.at(&[0, r, c]), if inside { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn conv_output_extent_and_errors() {
    let g = Graph::new();
    let x = g.constant(Array::zeros(&[2, 9, 7]));
    let y = x.conv2d(&g.constant(Array::zeros(&[4, 2, 3, 3])), 2, 1).unwrap();
    assert_eq!(y.shape(), vec![4, 5, 4]);
    let err = x.conv2d(&g.constant(Array::zeros(&[1, 2, 12, 3])), 1, 1);
    assert!(matches!(err, Err(AutodiffError::Dimension { .. })));
    let err = x.conv2d(&g.constant(Array::zeros(&[1, 3, 3, 3])), 1, 1);
    assert!(err.is_err());
}

#[test]
fn conv_batched_matches_per_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[2, 3, 6, 6]);
    let w = random(&mut rng, &[4, 3, 3, 3]);
    let g = Graph::new();
    let batched = g.constant(x.clone()).conv2d(&g.constant(w.clone()), 2, 1).unwrap().value();
    for n in 0..2 {
        let xn = Array::new(vec![3, 6, 6], x.data()[n * 108..(n + 1) * 108].to_vec()).unwrap();
        let single = g.constant(xn).conv2d(&g.constant(w.clone()), 2, 1).unwrap().value();
        assert_eq!(&batched.data()[n * 36..(n + 1) * 36], single.data());
    }
}

#[test]
fn conv_grad_check_random() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inputs = [random(&mut rng, &[2, 5, 5]), random(&mut rng, &[3, 2, 3, 3])];
    let r = random(&mut rng, &[3, 3, 3]);
    let report = grad_check_many(
        "conv2d",
        |g, xs| Ok(xs[0].conv2d(&xs[1], 2, 1)?.mul(&g.constant(r.clone()))?.sum()),
        &inputs,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

fn bilinear_oracle(src: &Array, out_h: usize, out_w: usize) -> Array {
    let (h, w) = (src.shape()[1], src.shape()[2]);
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = (o as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5;
        let s = if s < 0.0 { 0.0 } else { s };
        let i0 = s as usize;
        if i0 + 1 >= n_in {
            (n_in - 1, n_in - 1, 0.0)
        } else {
            (i0, i0 + 1, s - i0 as f64)
        }
    };
    let mut out = Array::zeros(&[src.shape()[0], out_h, out_w]);
    for c in 0..src.shape()[0] {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let (y0, y1, ty) = coord(oy, h, out_h);
                let (x0, x1, tx) = coord(ox, w, out_w);
                let top = src.at(&[c, y0, x0]) + tx * (src.at(&[c, y0, x1]) - src.at(&[c, y0, x0]));
                let bottom = src.at(&[c, y1, x0]) + tx * (src.at(&[c, y1, x1]) - src.at(&[c, y1, x0]));
                let idx = out.offset(&[c, oy, ox]);
                out.data_mut()[idx] = top + ty * (bottom - top);
            }
        }
    }
    out
}

#[test]
fn interpolate_examples() {
    let g = Graph::new();
    let x = arr(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]);
    let same = g.constant(x.clone()).interpolate(2, 2, InterpMode::Bilinear).unwrap().value();
    assert_eq!(same, x);
    let up = g.constant(Array::full(&[2, 3, 3], 0.7)).interpolate(6, 6, InterpMode::Bilinear).unwrap().value();
    assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    let up = g.constant(x.clone()).interpolate(4, 4, InterpMode::Bilinear).unwrap().value();
    #[rustfmt::skip]
    let frozen = arr(&[1, 4, 4], &[
        0.0, 0.25, 0.75, 1.0,
        0.5, 0.75, 1.25, 1.5,
        1.5, 1.75, 2.25, 2.5,
        2.0, 2.25, 2.75, 3.0,
    ]);
    assert!(up.max_abs_diff(&frozen) < 1e-15);
    assert!(up.max_abs_diff(&bilinear_oracle(&x, 4, 4)) < 1e-15);
    assert!(g.constant(x).interpolate(0, 3, InterpMode::Nearest).is_err());
}

#[test]
fn interpolate_matches_oracle_on_odd_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let g = Graph::new();
    for &(h, w, oh, ow) in &[(3, 5, 7, 4), (5, 5, 2, 9), (1, 4, 3, 3)] {
        let x = random(&mut rng, &[2, h, w]);
        let y = g.constant(x.clone()).interpolate(oh, ow, InterpMode::Bilinear).unwrap().value();
        assert!(y.max_abs_diff(&bilinear_oracle(&x, oh, ow)) < 1e-14);
    }
}

#[test]
fn nearest_doubles_pixels() {
    let g = Graph::new();
    let y = g
        .constant(arr(&[1, 1, 2], &[1.0, 2.0]))
        .interpolate(2, 4, InterpMode::Nearest)
        .unwrap()
        .value();
    assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
}

#[test]
fn concat_and_mean_basics() {
    let g = Graph::new();
    let x = arr(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let t = g.constant(x.clone());
    assert_eq!(concat(&[t], 1).unwrap().value(), x);
    let c = concat(&[t, t], 1).unwrap().value();
    assert_eq!(c.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 4.0, 5.0, 6.0]);
    let k = g.constant(Array::full(&[2, 3, 4], 2.5));
    assert_eq!(k.mean_all().unwrap().item(), 2.5);
    let m = t.mean(&[1]).unwrap().value();
    assert_eq!(m.data(), &[2.0, 5.0]);
    assert!(concat(&[t, g.constant(Array::zeros(&[3, 3]))], 1).is_err());
}

#[test]
fn backward_requires_scalar() {
    let g = Graph::new();
    let x = g.param(&Array::zeros(&[2]));
    assert!(matches!(x.exp().backward(), Err(AutodiffError::NonScalarLoss(_))));
}

#[test]
fn backward_accumulates_until_cleared() {
    let g = Graph::new();
    let x = g.param(&arr(&[2], &[1.0, 2.0]));
    let loss = x.mul(&x).unwrap().sum();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[4.0, 8.0]);
    g.clear_grads();
    assert!(x.grad().is_none());
}

#[test]
fn backward_is_linear_in_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x0 = random(&mut rng, &[3, 4]);
    let w0 = random(&mut rng, &[4, 2]);
    let build = |g: &Graph, which: u8| {
        let x = g.param(&x0);
        let w = g.param(&w0);
        let l1 = x.matmul(&w).unwrap().relu().sum();
        let l2 = x.exp().sum();
        let loss = match which {
            0 => l1.add(&l2).unwrap(),
            1 => l1,
            _ => l2,
        };
        loss.backward().unwrap();
        (x.grad().unwrap(), w.grad().unwrap_or_else(|| Array::zeros(&[4, 2])))
    };
    let (gx, gw) = build(&Graph::new(), 0);
    let (gx1, gw1) = build(&Graph::new(), 1);
    let (gx2, gw2) = build(&Graph::new(), 2);
    for i in 0..gx.len() {
        assert!((gx.data()[i] - gx1.data()[i] - gx2.data()[i]).abs() < 1e-12);
    }
    for i in 0..gw.len() {
        assert!((gw.data()[i] - gw1.data()[i] - gw2.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn grad_check_trivial_functions() {
    let x = arr(&[2], &[1.0, 2.0]);
    let report = grad_check("sum", |_, x| Ok(x.sum()), &x, 1e-4).unwrap();
    assert!(report.passed);
    assert!(report.max_rel_error < 1e-9);
    let g = Graph::new();
    let xt = g.param(&x);
    xt.mul(&xt).unwrap().sum().backward().unwrap();
    assert_eq!(xt.grad().unwrap().data(), &[2.0, 4.0]);
    let report = grad_check("square", |_, x| Ok(x.mul(&x)?.sum()), &x, 1e-4).unwrap();
    assert!(report.passed);
}

#[test]
fn report_flags_failures() {
    let r = GradCheckReport::new("x", 2e-4, 1e-4);
    assert!(!r.passed);
    let r = GradCheckReport::new("x", f64::NAN, 1e-4);
    assert!(!r.passed);
}

#[test]
fn foreign_tensor_rejected() {
    let g1 = Graph::new();
    let g2 = Graph::new();
    let a = g1.constant(Array::zeros(&[2]));
    let b = g2.constant(Array::zeros(&[2]));
    assert!(matches!(a.add(&b), Err(AutodiffError::ForeignTensor)));
}
