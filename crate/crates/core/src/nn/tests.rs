use rand::Rng as _;

use super::*;
use crate::rng::stream;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, "test", 0);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Loss builder: receives the graph and one leaf per parameter.
type Build<'a> = &'a dyn Fn(&mut Graph, &[Var]) -> Var;

fn loss_value(params: &[Tensor], build: Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.input(p.clone())).collect();
    let l = build(&mut g, &vars);
    g.value(l).data()[0]
}

/// Max relative error between reverse-mode and central finite differences.
fn grad_check(params: &[Tensor], build: Build) -> f64 {
    let h = 1e-5;
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let l = build(&mut g, &vars);
    g.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        let analytic = g.grad(vars[pi]).unwrap().to_vec();
        for e in 0..p.len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[e] += h;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[e] -= h;
            let numeric = (loss_value(&plus, build) - loss_value(&minus, build)) / (2.0 * h);
            let a = analytic[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Projects an output onto fixed random weights so every gradient is O(1).
fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
    let w = random(g.shape(y), seed);
    let wv = g.input(w);
    let p = g.mul(y, wv).unwrap();
    g.sum(p)
}

#[test]
fn dense_identity_and_hand_values() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 2], &[1.0, 2.0]));
    let w = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.input(t(&[2], &[0.0, 0.0]));
    let y = g.dense(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);

    let x = g.input(t(&[1, 2], &[1.0, 1.0]));
    let w = g.input(t(&[1, 2], &[2.0, 3.0]));
    let b = g.input(t(&[1], &[1.0]));
    let y = g.dense(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1]);
    assert_eq!(g.value(y).data(), &[6.0]);
}

#[test]
fn dense_shape_errors_name_operand() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(vec![2, 3]));
    let w = g.input(Tensor::zeros(vec![4, 5]));
    let err = g.dense(x, w, None).unwrap_err().to_string();
    assert!(err.contains("input x"), "{err}");
    let w = g.input(Tensor::zeros(vec![4, 3]));
    let b = g.input(Tensor::zeros(vec![5]));
    let err = g.dense(x, w, Some(b)).unwrap_err().to_string();
    assert!(err.contains("bias b"), "{err}");
}

#[test]
fn dense_gradients_match_finite_differences() {
    let params = [random(&[2, 4], 7), random(&[3, 4], 8), random(&[3], 9)];
    let build = |g: &mut Graph, v: &[Var]| {
        let y = g.dense(v[0], v[1], Some(v[2])).unwrap();
        project(g, y, 10)
    };
    let err = grad_check(&params, &build);
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn conv_identity_kernel() {
    let x = random(&[1, 1, 3, 4], 1);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let k = g.input(t(&[1, 1, 1, 1], &[1.0]));
    let b = g.input(t(&[1], &[0.0]));
    let y = g.conv2d(xv, k, Some(b), ConvGeom::default()).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn grouped_conv_isolates_channels() {
    let x = random(&[2, 2, 3, 3], 2);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let k = g.input(t(&[2, 1, 1, 1], &[1.0, 2.0]));
    let b = g.input(t(&[2], &[0.0, 0.0]));
    let geom = ConvGeom {
        groups: 2,
        ..ConvGeom::default()
    };
    let y = g.conv2d(xv, k, Some(b), geom).unwrap();
    let out = g.value(y).data();
    for s in 0..2 {
        for i in 0..9 {
            assert_eq!(out[(s * 2) * 9 + i], x.data()[(s * 2) * 9 + i]);
            assert_eq!(out[(s * 2 + 1) * 9 + i], 2.0 * x.data()[(s * 2 + 1) * 9 + i]);
        }
    }
}

#[test]
fn groups_must_divide_channels() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(vec![1, 3, 4, 4]));
    let k = g.input(Tensor::zeros(vec![4, 1, 3, 3]));
    let geom = ConvGeom {
        groups: 2,
        ..ConvGeom::default()
    };
    assert!(matches!(g.conv2d(x, k, None, geom), Err(crate::Error::Config(_))));
    let bad = LayerSpec::Conv2d {
        c_in: 6,
        c_out: 4,
        kh: 3,
        kw: 3,
        geom: ConvGeom {
            groups: 4,
            ..ConvGeom::default()
        },
    };
    assert!(bad.validate().is_err());
}

/// Direct quadruple-loop cross-correlation with zero padding.
fn reference_conv(x: &Tensor, k: &Tensor, bias: &[f64], groups: usize, stride: usize, pad: usize) -> Tensor {
    let (b, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, cig, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * co * ho * wo];
    let cog = co / groups;
    for n in 0..b {
        for o in 0..co {
            let grp = o / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[o];
                    for c in 0..cig {
                        let cin = grp * cig + c;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((n * ci + cin) * h + iy as usize) * w + ix as usize];
                                let kv = k.data()[((o * cig + c) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((n * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, co, ho, wo], out).unwrap()
}

#[test]
fn conv_matches_reference_loops() {
    for &(groups, stride, pad) in &[(1, 1, 1), (1, 2, 1), (2, 1, 0), (4, 2, 2), (1, 1, 0)] {
        let x = random(&[2, 4, 5, 7], 3);
        let k = random(&[8, 4 / groups, 3, 3], 4);
        let bias = random(&[8], 5);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.input(x.clone()), g.input(k.clone()), g.input(bias.clone()));
        let y = g
            .conv2d(xv, kv, Some(bv), ConvGeom { groups, stride, pad })
            .unwrap();
        let r = reference_conv(&x, &k, bias.data(), groups, stride, pad);
        assert_eq!(g.value(y).shape(), r.shape());
        for (a, b) in g.value(y).data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-12, "g={groups} s={stride} p={pad}: {a} vs {b}");
        }
    }
}

#[test]
fn grouped_equals_block_diagonal_ungrouped() {
    let x = random(&[2, 4, 4, 6], 11);
    let kg = random(&[4, 2, 3, 3], 12);
    // Embed the grouped kernel into a full kernel with zero cross-group slices.
    let mut full = vec![0.0; 4 * 4 * 9];
    for o in 0..4 {
        let grp = o / 2;
        for c in 0..2 {
            for e in 0..9 {
                full[(o * 4 + grp * 2 + c) * 9 + e] = kg.data()[(o * 2 + c) * 9 + e];
            }
        }
    }
    let kf = t(&[4, 4, 3, 3], &full);
    let bias = random(&[4], 13);
    let mut g = Graph::new();
    let xv = g.input(x);
    let bv = g.input(bias);
    let kgv = g.input(kg);
    let kfv = g.input(kf);
    let pad1 = |groups| ConvGeom {
        groups,
        stride: 1,
        pad: 1,
    };
    let yg = g.conv2d(xv, kgv, Some(bv), pad1(2)).unwrap();
    let yf = g.conv2d(xv, kfv, Some(bv), pad1(1)).unwrap();
    for (a, b) in g.value(yg).data().iter().zip(g.value(yf).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    for &(groups, stride, pad) in &[(1, 1, 1), (2, 1, 1), (2, 2, 0)] {
        let params = [
            random(&[2, 4, 4, 5], 21),
            random(&[4, 4 / groups, 3, 3], 22),
            random(&[4], 23),
        ];
        let build = move |g: &mut Graph, v: &[Var]| {
            let y = g
                .conv2d(v[0], v[1], Some(v[2]), ConvGeom { groups, stride, pad })
                .unwrap();
            project(g, y, 24)
        };
        let err = grad_check(&params, &build);
        assert!(err < 1e-5, "g={groups} s={stride} p={pad}: rel err {err}");
    }
}

#[test]
fn tanh_mask_reshape_gather_gradients() {
    let params = [random(&[3, 4], 31), random(&[5, 2], 32)];
    let build = |g: &mut Graph, v: &[Var]| {
        let a = g.tanh(v[0]);
        let m = g
            .mask(a, vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0])
            .unwrap();
        let r = g.reshape(m, vec![3, 2, 2]).unwrap();
        let q = g.gather_rows(v[1], vec![4, 0, 0, 2, 1, 3], vec![3, 2, 2]).unwrap();
        let s = g.add(r, q).unwrap();
        let sq = g.sum_sq(s);
        let p = project(g, r, 33);
        g.add(sq, p).unwrap()
    };
    let err = grad_check(&params, &build);
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn stop_gradient_blocks_one_branch() {
    let x = t(&[3], &[0.5, -1.5, 2.0]);
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let s = g.stop_gradient(xv);
    assert_eq!(g.value(s), &x);
    let p = g.mul(s, xv).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap();
    assert_eq!(g.grad(xv).unwrap(), x.data());

    let mut g = Graph::new();
    let xv = g.param(x);
    let s = g.stop_gradient(xv);
    let l = g.sum(s);
    g.backward(l).unwrap();
    assert_eq!(g.grad(xv).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn straight_through_composite_routes_gradient() {
    let ze = random(&[2, 4], 3);
    let z = random(&[2, 4], 4);
    let target = random(&[2, 4], 5);

    // Composite z_e + sg(z - z_e) from primitive ops.
    let mut g = Graph::new();
    let zev = g.param(ze.clone());
    let zv = g.param(z.clone());
    let d = g.sub(zv, zev).unwrap();
    let sd = g.stop_gradient(d);
    let dec_in = g.add(zev, sd).unwrap();
    for (a, b) in g.value(dec_in).data().iter().zip(z.data()) {
        assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs().max(1.0));
    }
    let tv = g.input(target.clone());
    let l = g.mse(dec_in, tv).unwrap();
    g.backward(l).unwrap();
    let g_ze = g.grad(zev).unwrap().to_vec();
    let g_in = g.grad(dec_in).unwrap().to_vec();
    assert_eq!(g_ze, g_in);
    assert!(g.grad(zv).unwrap().iter().all(|&v| v == 0.0));

    // Manual chain rule: d/d(in) of Σ(in − target)²/batch.
    for ((gv, zi), ti) in g_ze.iter().zip(z.data()).zip(target.data()) {
        let manual = 2.0 * (zi - ti) / 2.0;
        assert!((gv - manual).abs() < 1e-12);
    }

    // Fused op: forward is bitwise z.
    let mut g = Graph::new();
    let zev = g.param(ze);
    let zv = g.param(z.clone());
    let dec_in = g.straight_through(zev, zv).unwrap();
    assert_eq!(g.value(dec_in), &z);
    let tv = g.input(target);
    let l = g.mse(dec_in, tv).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(zev).unwrap(), g.grad(dec_in).unwrap());
}

#[test]
fn sign_ste_forward_and_clipped_backward() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[-0.5, 0.0, 2.0]));
    let y = g.sign_ste(x);
    assert_eq!(g.value(y).data(), &[-1.0, 1.0, 1.0]);
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 0.0]);

    let mut g = Graph::new();
    let x = g.param(random(&[10], 40).clone());
    let y = g.sign_ste(x);
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn binary_dense_closed_forms() {
    // W all +2 → α = 2, W_b all +1.
    let mut g = Graph::new();
    let x = g.input(t(&[1, 2], &[1.0, 3.0]));
    let w = g.param(t(&[2, 2], &[2.0; 4]));
    let b = g.input(t(&[2], &[0.5, -0.5]));
    let y = g.binary_dense(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[8.5, 7.5]);

    // W ∈ {±c} is represented exactly.
    let wd = [0.3, -0.3, -0.3, 0.3];
    let mut g = Graph::new();
    let x = g.input(t(&[1, 2], &[1.0, 2.0]));
    let w = g.input(t(&[2, 2], &wd));
    let yb = g.binary_dense(x, w, None).unwrap();
    let yr = g.dense(x, w, None).unwrap();
    assert_eq!(g.value(yb), g.value(yr));
}

#[test]
fn binary_dense_input_and_bias_gradients() {
    // W's gradient is the straight-through surrogate; x and b are checked
    // against finite differences.
    let w = random(&[3, 4], 52);
    let params = [random(&[2, 4], 51), random(&[3], 53)];
    let build = |g: &mut Graph, v: &[Var]| {
        let wv = g.input(w.clone());
        let y = g.binary_dense(v[0], wv, Some(v[1])).unwrap();
        project(g, y, 54)
    };
    let err = grad_check(&params, &build);
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn binary_dense_weight_gradient_is_straight_through() {
    // dL/dW = α·(Gᵀx)·1{|w|≤1} + sign(w)/n · Σ (Gᵀx)·sign(W)
    let x = random(&[2, 3], 61);
    let mut w = random(&[2, 3], 62);
    w.data_mut()[4] = 1.5;
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let wv = g.param(w.clone());
    let y = g.binary_dense(xv, wv, None).unwrap();
    let l = project(&mut g, y, 63);
    let proj = random(&[2, 2], 63);
    g.backward(l).unwrap();
    let n = 6.0;
    let alpha = w.data().iter().map(|v| v.abs()).sum::<f64>() / n;
    let sgn = |v: f64| if v >= 0.0 { 1.0 } else { -1.0 };
    let mut outer = [0.0; 6];
    for o in 0..2 {
        for i in 0..3 {
            outer[o * 3 + i] = (0..2).map(|r| proj.data()[r * 2 + o] * x.data()[r * 3 + i]).sum();
        }
    }
    let dalpha: f64 = (0..6).map(|e| outer[e] * sgn(w.data()[e])).sum();
    let grad = g.grad(wv).unwrap();
    for e in 0..6 {
        let we = w.data()[e];
        let ste = if we.abs() <= 1.0 { alpha * outer[e] } else { 0.0 };
        let expected = ste + we.signum() * dalpha / n;
        assert!((grad[e] - expected).abs() < 1e-12, "{e}: {} vs {expected}", grad[e]);
    }
}

#[test]
fn backward_requires_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(vec![2]));
    assert!(g.backward(x).is_err());
}
