use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Straightforward seven-loop convolution used as an oracle.
fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: Conv3dSpec) -> (Vec<usize>, Vec<f64>) {
    let [c, t, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [co, _, kt, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3], w.shape()[4]];
    let o = |n: usize, k: usize, i: usize| (n + 2 * spec.pad[i] - k) / spec.stride[i] + 1;
    let (ot, oh, ow) = (o(t, kt, 0), o(h, kh, 1), o(wd, kw, 2));
    let mut out = vec![0.0; co * ot * oh * ow];
    for f in 0..co {
        for a in 0..ot {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b.data()[f];
                    for ci in 0..c {
                        for dt in 0..kt {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let it = (a * spec.stride[0] + dt) as isize - spec.pad[0] as isize;
                                    let iy = (y * spec.stride[1] + dy) as isize - spec.pad[1] as isize;
                                    let ix = (xx * spec.stride[2] + dx) as isize - spec.pad[2] as isize;
                                    if it < 0 || iy < 0 || ix < 0 || it >= t as isize || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((ci * t + it as usize) * h + iy as usize) * wd + ix as usize;
                                    let wi = (((f * c + ci) * kt + dt) * kh + dy) * kw + dx;
                                    s += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                    }
                    out[((f * ot + a) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    (vec![co, ot, oh, ow], out)
}

#[test]
fn conv3d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for spec in [
        Conv3dSpec { stride: [1, 1, 1], pad: [1, 1, 1] },
        Conv3dSpec { stride: [1, 2, 2], pad: [1, 1, 1] },
        Conv3dSpec { stride: [2, 2, 2], pad: [0, 1, 0] },
    ] {
        let x = rand_tensor(&mut rng, &[2, 5, 6, 7]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let (shape, want) = naive_conv3d(&x, &w, &b, spec);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x), g.input(w), g.input(b));
        let y = g.conv3d(xv, wv, bv, spec).unwrap();
        assert_eq!(g.value(y).shape(), shape.as_slice());
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

fn single_param(name: &str, t: Tensor<f64>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert(name, t).unwrap();
    s
}

/// Projects the output onto fixed random weights so every element of the
/// gradient is exercised.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let w = rand_tensor(&mut rng, &shape);
    let p = g.mul_const(y, w).unwrap();
    g.sum(p)
}

fn assert_grad_ok(store: &ParamStore<f64>, f: impl FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var, NnError>) {
    let r = check_gradients(store, 1e-3, 1, f).unwrap();
    assert!(r.checked > 0);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn gradcheck_matmul_transpose_add() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = single_param("a", rand_tensor(&mut rng, &[3, 4]));
    s.insert("b", rand_tensor(&mut rng, &[4, 5])).unwrap();
    s.insert("c", rand_tensor(&mut rng, &[5, 3])).unwrap();
    s.insert("r", rand_tensor(&mut rng, &[5])).unwrap();
    assert_grad_ok(&s, |p, g| {
        let (a, b, c, r) = (p.var(g, "a")?, p.var(g, "b")?, p.var(g, "c")?, p.var(g, "r")?);
        let ab = g.matmul(a, b)?;
        let ct = g.transpose(c)?;
        let sum = g.add(ab, ct)?;
        let y = g.add_row(sum, r)?;
        let y = g.scale(y, 0.7);
        Ok(project(g, y, 9))
    });
}

#[test]
fn gradcheck_softmax_standardize_crossentropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = single_param("x", rand_tensor(&mut rng, &[4, 6]));
    assert_grad_ok(&s, |p, g| {
        let x = p.var(g, "x")?;
        let a = g.softmax_rows(x);
        let b = g.standardize_rows(x, 1e-5);
        let y = g.add(a, b)?;
        let row = g.select_row(y, 2)?;
        let ce = g.cross_entropy(row, 4)?;
        let rest = project(g, y, 5);
        g.mean_of(&[ce, rest])
    });
}

#[test]
fn gradcheck_concat_pool_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut s = single_param("v", rand_tensor(&mut rng, &[3, 2, 2, 3]));
    s.insert("cls", rand_tensor(&mut rng, &[1, 3])).unwrap();
    s.insert("u", rand_tensor(&mut rng, &[3, 2])).unwrap();
    assert_grad_ok(&s, |p, g| {
        let v = p.var(g, "v")?;
        let pooled = g.mean_pool_hw(v)?; // [2, 3]
        let cls = p.var(g, "cls")?;
        let seq = g.concat_rows(&[cls, pooled])?; // [3, 3]
        let u = p.var(g, "u")?;
        let wide = g.concat_cols(&[seq, u])?; // [3, 5]
        let y = g.relu(wide);
        Ok(project(g, y, 11))
    });
}

#[test]
fn gradcheck_conv3d() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = single_param("x", rand_tensor(&mut rng, &[2, 4, 5, 5]));
    s.insert("w", rand_tensor(&mut rng, &[3, 2, 3, 3, 3])).unwrap();
    s.insert("b", rand_tensor(&mut rng, &[3])).unwrap();
    let spec = Conv3dSpec { stride: [2, 2, 1], pad: [1, 1, 1] };
    assert_grad_ok(&s, |p, g| {
        let (x, w, b) = (p.var(g, "x")?, p.var(g, "w")?, p.var(g, "b")?);
        let y = g.conv3d(x, w, b, spec)?;
        Ok(project(g, y, 13))
    });
}

#[test]
fn masked_entries_get_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(0, Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let mask = Tensor::new(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
    let y = g.mul_const(x, mask).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::<f32>::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(NnError::ShapeMismatch { .. })));
    let c = g.input(Tensor::zeros(&[4]));
    assert!(g.add(a, c).is_err());
    assert!(g.cross_entropy(a, 0).is_err());
    assert!(g.backward(a).is_err());
}

#[test]
fn graph_reuse_after_reset() {
    let mut g = Graph::<f64>::new();
    for k in 1..4 {
        g.reset();
        let x = g.param(0, Tensor::new(&[2], vec![k as f64, 1.0]).unwrap());
        let y = g.mul_const(x, Tensor::new(&[2], vec![2.0, 3.0]).unwrap()).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 3.0]);
    }
}

#[test]
fn adamw_first_step_matches_hand_computation() {
    let mut p = ParamStore::<f32>::new();
    p.insert("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.5,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &p);
    let g = Tensor::new(&[2], vec![0.3, -4.0]).unwrap();
    opt.step(&mut p, std::slice::from_ref(&g)).unwrap();
    // After one step m_hat = g and v_hat = g^2, so the Adam move is lr * g / (|g| + eps).
    for (i, (&w0, &gi)) in [1.0f64, -2.0].iter().zip(&[0.3f64, -4.0]).enumerate() {
        let want = w0 * (1.0 - 0.1 * 0.5) - 0.1 * gi / (gi.abs() + 1e-8);
        assert!((p.tensor(0).data()[i] as f64 - want).abs() < 1e-6);
    }
}

#[test]
fn adamw_zero_gradient_only_decays() {
    let mut p = ParamStore::<f32>::new();
    p.insert("w", Tensor::new(&[3], vec![1.0, -0.5, 2.0]).unwrap()).unwrap();
    let cfg = AdamWConfig {
        lr: 0.01,
        weight_decay: 0.2,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &p);
    let before = p.tensor(0).clone();
    opt.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
    for (a, b) in p.tensor(0).data().iter().zip(before.data()) {
        assert!((a - b * (1.0 - 0.01 * 0.2)).abs() < 1e-7);
    }
}

#[test]
fn step_schedule() {
    let cfg = AdamWConfig {
        lr: 1e-3,
        ..AdamWConfig::default()
    };
    assert_eq!(cfg.lr_at(0), 1e-3);
    assert_eq!(cfg.lr_at(79), 1e-3);
    assert!((cfg.lr_at(80) - 1e-4).abs() < 1e-15);
    assert!((cfg.lr_at(165) - 1e-5).abs() < 1e-16);
}

#[test]
fn adamw_minimises_a_quadratic() {
    let mut p = ParamStore::<f32>::new();
    p.insert("w", Tensor::new(&[2], vec![3.0, -3.0]).unwrap()).unwrap();
    let cfg = AdamWConfig {
        lr: 0.05,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &p);
    for _ in 0..500 {
        let mut g = Graph::<f32>::new();
        let w = p.var(&mut g, "w").unwrap();
        let t = g.input(Tensor::new(&[2], vec![-1.0, 1.0]).unwrap());
        let neg = g.scale(t, -1.0);
        let d = g.add(w, neg).unwrap();
        let sq = g.mul_const(d, g.value(d).clone()).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        let grads = g.param_grads(&p.shapes());
        opt.step(&mut p, &grads).unwrap();
    }
    assert!((p.tensor(0).data()[0] + 1.0).abs() < 0.05);
    assert!((p.tensor(0).data()[1] - 1.0).abs() < 0.05);
}

#[test]
fn checkpoint_rejects_garbage() {
    assert!(read_checkpoint(&b"RRCK2\0\0\0\0"[..]).is_err());
    let mut p = ParamStore::<f32>::new();
    p.insert("a", Tensor::zeros(&[2, 2])).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&p, &mut buf).unwrap();
    assert_eq!(&buf[..5], b"RRCK1");
    buf.pop();
    assert!(read_checkpoint(buf.as_slice()).is_err());
    buf.extend_from_slice(&[0, 0, 0, 0, 9]);
    assert!(read_checkpoint(buf.as_slice()).is_err());
}

proptest! {
    #[test]
    fn checkpoint_round_trip(
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..4), 1..5),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::<f32>::new();
        for (i, s) in shapes.iter().enumerate() {
            let t = Tensor::from_fn(s, |_| rng.random_range(-5.0f32..5.0));
            p.insert(&format!("layer{i}.w"), t).unwrap();
        }
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(&[3, 4], vals).unwrap());
        let y = g.softmax_rows(x);
        for r in 0..3 {
            let row = g.value(y).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn standardized_rows_have_zero_mean_unit_variance(vals in prop::collection::vec(-10.0f64..10.0, 16)) {
        let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 0.5);
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(&[1, 16], vals).unwrap());
        let y = g.standardize_rows(x, 1e-9);
        let row = g.value(y).row(0);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-6);
    }
}
