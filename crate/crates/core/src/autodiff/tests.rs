use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::Error;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct evaluation of out[q] = sum over s + r*t = q of F(s) K(t), t in [-n, n].
fn dilated_oracle(x: &Tensor, w: &Tensor, bias: &[f64], r: usize) -> Vec<f64> {
    let (t_len, cin) = (x.shape()[0], x.shape()[1]);
    let (k, cout) = (w.shape()[0], w.shape()[2]);
    let n = (k / 2) as isize;
    let mut out = vec![0.0; t_len * cout];
    for q in 0..t_len as isize {
        for co in 0..cout {
            let mut acc = bias[co];
            for s in 0..t_len as isize {
                for t in -n..=n {
                    if s + r as isize * t != q {
                        continue;
                    }
                    for ci in 0..cin {
                        let kj = (t + n) as usize;
                        acc += x.data()[s as usize * cin + ci] * w.data()[(kj * cin + ci) * cout + co];
                    }
                }
            }
            out[q as usize * cout + co] = acc;
        }
    }
    out
}

/// Standard (undilated) 1-D convolution written in the usual flipped form.
fn standard_conv_oracle(x: &Tensor, w: &Tensor) -> Vec<f64> {
    let (t_len, cin) = (x.shape()[0], x.shape()[1]);
    let (k, cout) = (w.shape()[0], w.shape()[2]);
    let n = (k / 2) as isize;
    let mut out = vec![0.0; t_len * cout];
    for q in 0..t_len as isize {
        for t in -n..=n {
            let s = q - t;
            if s < 0 || s >= t_len as isize {
                continue;
            }
            for ci in 0..cin {
                for co in 0..cout {
                    out[q as usize * cout + co] +=
                        x.data()[s as usize * cin + ci] * w.data()[(((t + n) as usize) * cin + ci) * cout + co];
                }
            }
        }
    }
    out
}

fn conv(store: &ParamStore, x: &Tensor, w: &Tensor, b: Option<&Tensor>, r: usize) -> crate::Result<Vec<f64>> {
    let mut g = Graph::new(store, false, 0);
    let xv = g.input(x.clone());
    let wv = g.input(w.clone());
    let bv = b.map(|b| g.input(b.clone()));
    let y = g.conv1d(xv, wv, bv, r)?;
    Ok(g.data(y).to_vec())
}

#[test]
fn sum_gradient_is_all_ones() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false, 0);
    let x = g.input_with_grad(rand_tensor(&[3, 4], 1));
    let loss = g.sum(x);
    let grads = g.backward(loss).unwrap();
    assert!(grads.wrt(x).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn sum_of_squares_gradient_is_twice_input() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false, 0);
    let t = rand_tensor(&[5], 2);
    let x = g.input_with_grad(t.clone());
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    for (gv, xv) in grads.wrt(x).unwrap().iter().zip(t.data()) {
        assert!((gv - 2.0 * xv).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false, 0);
    let x = g.input_with_grad(rand_tensor(&[3], 3));
    assert!(matches!(g.backward(x), Err(Error::Shape(_))));
}

#[test]
fn repeated_backward_accumulates_into_store() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(vec![2], vec![1.5, -2.0]).unwrap()).unwrap();
    for _ in 0..2 {
        let grads = {
            let mut g = Graph::new(&store, false, 0);
            let w = g.param(id);
            let sq = g.mul(w, w).unwrap();
            let loss = g.sum(sq);
            g.backward(loss).unwrap()
        };
        store.accumulate(&grads);
    }
    assert_eq!(store.get(id).grad, vec![6.0, -8.0]);
    store.zero_grad();
    assert_eq!(store.get(id).grad, vec![0.0, 0.0]);
}

#[test]
fn elementwise_definitions() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false, 0);
    let z = g.input(Tensor::scalar(0.0));
    let s = g.sigmoid(z);
    assert_eq!(g.data(s)[0], 0.5);

    let c = g.input(Tensor::full(&[2, 5], 3.7));
    let sm = g.softmax(c, 1).unwrap();
    assert!(g.data(sm).iter().all(|&p| (p - 0.2).abs() < 1e-15));

    let logits = g.input(Tensor::full(&[3, 7], -1.25));
    let ce = g.cross_entropy(logits, &[0, 3, 6]).unwrap();
    assert!((g.data(ce)[0] - 7f64.ln()).abs() < 1e-12);

    let r = g.input(rand_tensor(&[4, 6], 4));
    let sm = g.softmax(r, 0).unwrap();
    for col in 0..6 {
        let total: f64 = (0..4).map(|row| g.data(sm)[row * 6 + col]).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn shape_mismatches_are_errors() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false, 0);
    let a = g.input(rand_tensor(&[2, 3], 5));
    let b = g.input(rand_tensor(&[3, 2], 6));
    assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
    assert!(matches!(g.mul(a, b), Err(Error::Shape(_))));
    assert!(matches!(g.linear(a, a, None), Err(Error::Shape(_))));
    assert!(matches!(g.concat(&[a, b], 0), Err(Error::Shape(_))));
    assert!(matches!(g.split(a, 2, 1), Err(Error::Shape(_))));
    assert!(matches!(g.cross_entropy(a, &[0]), Err(Error::Shape(_))));
}

#[test]
fn split_then_concat_round_trips() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false, 0);
    let t = rand_tensor(&[2, 3, 8], 7);
    let x = g.input(t.clone());
    let parts = g.split(x, 4, 2).unwrap();
    assert_eq!(g.shape(parts[1]), &[2, 3, 2]);
    let y = g.concat(&parts, 2).unwrap();
    assert_eq!(g.value(y), &t);
}

#[test]
fn reductions_keep_axis() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false, 0);
    let x = g.input(Tensor::new(vec![2, 3], vec![1.0, 5.0, 3.0, -1.0, -4.0, 2.0]).unwrap());
    let m = g.mean_axis(x, 1).unwrap();
    let mx = g.max_axis(x, 1).unwrap();
    let s = g.sum_axis(x, 0).unwrap();
    assert_eq!(g.shape(m), &[2, 1]);
    assert_eq!(g.data(m), &[3.0, -1.0]);
    assert_eq!(g.data(mx), &[5.0, 2.0]);
    assert_eq!(g.data(s), &[0.0, 1.0, 5.0]);
}

#[test]
fn conv_identity_kernel() {
    let store = ParamStore::new();
    let x = rand_tensor(&[6, 3], 8);
    let mut w = Tensor::zeros(&[1, 3, 3]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    assert_eq!(conv(&store, &x, &w, None, 1).unwrap(), x.data());
}

#[test]
fn conv_matches_dilated_summation_oracle() {
    let store = ParamStore::new();
    let x = rand_tensor(&[8, 2], 9);
    let w = rand_tensor(&[3, 2, 3], 10);
    let b = rand_tensor(&[3], 11);
    let got = conv(&store, &x, &w, Some(&b), 2).unwrap();
    let want = dilated_oracle(&x, &w, b.data(), 2);
    for (a, e) in got.iter().zip(&want) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn conv_dilation_one_is_standard_convolution() {
    let store = ParamStore::new();
    let x = rand_tensor(&[9, 3], 12);
    let w = rand_tensor(&[5, 3, 2], 13);
    let got = conv(&store, &x, &w, None, 1).unwrap();
    let want = standard_conv_oracle(&x, &w);
    for (a, e) in got.iter().zip(&want) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn conv_rejects_even_kernel_and_zero_dilation() {
    let store = ParamStore::new();
    let x = rand_tensor(&[5, 2], 14);
    assert!(matches!(conv(&store, &x, &rand_tensor(&[2, 2, 2], 15), None, 1), Err(Error::Config(_))));
    assert!(matches!(conv(&store, &x, &rand_tensor(&[3, 2, 2], 16), None, 0), Err(Error::Config(_))));
}

#[test]
fn conv_batched_equals_per_item() {
    let store = ParamStore::new();
    let x = rand_tensor(&[2, 7, 3], 17);
    let w = rand_tensor(&[3, 3, 4], 18);
    let both = conv(&store, &x, &w, None, 3).unwrap();
    for b in 0..2 {
        let item = Tensor::new(vec![7, 3], x.data()[b * 21..(b + 1) * 21].to_vec()).unwrap();
        assert_eq!(&both[b * 28..(b + 1) * 28], conv(&store, &item, &w, None, 3).unwrap().as_slice());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_is_linear(seed in 0u64..1000, r in 1usize..5, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let store = ParamStore::new();
        let x = rand_tensor(&[10, 2], seed);
        let y = rand_tensor(&[10, 2], seed + 1);
        let w = rand_tensor(&[3, 2, 3], seed + 2);
        let mix = Tensor::new(
            vec![10, 2],
            x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect(),
        ).unwrap();
        let lhs = conv(&store, &mix, &w, None, r).unwrap();
        let cx = conv(&store, &x, &w, None, r).unwrap();
        let cy = conv(&store, &y, &w, None, r).unwrap();
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - (a * cx[i] + b * cy[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_receptive_field(seed in 0u64..1000, r in 1usize..5, k in prop::sample::select(vec![1usize, 3, 5]), t in 0usize..16) {
        let store = ParamStore::new();
        let x = rand_tensor(&[16, 2], seed);
        let w = rand_tensor(&[k, 2, 2], seed + 1);
        let base = conv(&store, &x, &w, None, r).unwrap();
        let mut bumped = x.clone();
        bumped.data_mut()[t * 2] += 1.0;
        let out = conv(&store, &bumped, &w, None, r).unwrap();
        let reach = r * (k - 1) / 2;
        for q in 0usize..16 {
            if q.abs_diff(t) > reach {
                prop_assert_eq!(&out[q * 2..q * 2 + 2], &base[q * 2..q * 2 + 2]);
            }
        }
    }
}

#[test]
fn batchnorm_train_normalizes() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, true, 0);
    let mut t = rand_tensor(&[2, 20, 3], 19);
    t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = *v * 4.0 + (i % 3) as f64);
    let x = g.input(t);
    let gamma = g.input(Tensor::full(&[3], 1.0));
    let beta = g.input(Tensor::zeros(&[3]));
    let (y, stats) = g.batchnorm_train(x, gamma, beta).unwrap();
    for c in 0..3 {
        let col: Vec<f64> = g.data(y).iter().skip(c).step_by(3).copied().collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / col.len() as f64;
        assert!(m.abs() < 1e-4 && (v - 1.0).abs() < 1e-4);
    }
    assert_eq!(stats.mean.len(), 3);
}

#[test]
fn batchnorm_train_keeps_standardized_input() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, true, 0);
    let data = vec![1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0];
    let x = g.input(Tensor::new(vec![4, 2], data.clone()).unwrap());
    let gamma = g.input(Tensor::full(&[2], 1.0));
    let beta = g.input(Tensor::zeros(&[2]));
    let (y, _) = g.batchnorm_train(x, gamma, beta).unwrap();
    for (a, b) in g.data(y).iter().zip(&data) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn batchnorm_eval_matches_affine_oracle() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false, 0);
    let t = rand_tensor(&[5, 2], 20);
    let x = g.input(t.clone());
    let gamma = g.input(Tensor::new(vec![2], vec![2.0, -0.5]).unwrap());
    let beta = g.input(Tensor::new(vec![2], vec![0.1, 0.3]).unwrap());
    let (mean, var) = ([0.2, -0.4], [1.5, 0.25]);
    let y = g.batchnorm_eval(x, gamma, beta, &mean, &var).unwrap();
    let gd = [2.0, -0.5];
    let bd = [0.1, 0.3];
    for (i, (&out, &inp)) in g.data(y).iter().zip(t.data()).enumerate() {
        let c = i % 2;
        let want = gd[c] * (inp - mean[c]) / (var[c] + BN_EPS).sqrt() + bd[c];
        assert!((out - want).abs() < 1e-14);
    }
}

#[test]
fn dropout_modes() {
    let store = ParamStore::new();
    let t = rand_tensor(&[50, 4], 21);
    let mut g = Graph::new(&store, false, 0);
    let x = g.input(t.clone());
    let y = g.dropout(x, 0.5).unwrap();
    assert_eq!(g.value(y), &t);

    let run = |seed| {
        let mut g = Graph::new(&store, true, seed);
        let x = g.input(t.clone());
        let y = g.dropout(x, 0.25).unwrap();
        g.data(y).to_vec()
    };
    let a = run(3);
    assert_eq!(a, run(3));
    assert_ne!(a, run(4));
    let mut dropped = 0;
    for (o, i) in a.iter().zip(t.data()) {
        if *o == 0.0 {
            dropped += 1;
        } else {
            assert!((o - i / 0.75).abs() < 1e-15);
        }
    }
    assert!(dropped > 20 && dropped < 80);
}

fn check(f: impl Fn(&mut Graph<'_>, Var) -> crate::Result<Var>, point: Tensor) -> f64 {
    grad_check(&ParamStore::new(), f, &point, 1e-3).unwrap()
}

/// Weighted sum so that every output coordinate carries a distinct gradient.
fn project(g: &mut Graph<'_>, y: Var, seed: u64) -> crate::Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.input(rand_tensor(&shape, seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn grad_check_quadratic() {
    let err = check(
        |g, x| {
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        },
        rand_tensor(&[6], 22),
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_elementwise_and_reductions() {
    let err = check(
        |g, x| {
            let a = g.sigmoid(x);
            let b = g.tanh(x);
            let c = g.mul(a, b)?;
            let d = g.scale(c, 1.7);
            let e = g.sub(d, x)?;
            let m = g.mean_axis(e, 1)?;
            let mx = g.max_axis(e, 2)?;
            let s = g.sum_axis(x, 0)?;
            let sm = g.softmax(e, 1)?;
            let sq = g.mul(x, x)?;
            let sf = g.sqrt_floor(sq, 1e-9);
            let l1 = project(g, m, 1)?;
            let l2 = project(g, mx, 2)?;
            let l3 = project(g, s, 3)?;
            let l4 = project(g, sm, 4)?;
            let l5 = project(g, sf, 5)?;
            let t = g.add(l1, l2)?;
            let t = g.add(t, l3)?;
            let t = g.add(t, l4)?;
            g.add(t, l5)
        },
        rand_tensor(&[2, 4, 3], 23),
    );
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_conv_relu() {
    let w = rand_tensor(&[3, 3, 2], 24);
    let b = rand_tensor(&[2], 25);
    for r in 1..=4 {
        let err = check(
            |g, x| {
                let wv = g.input(w.clone());
                let bv = g.input(b.clone());
                let y = g.conv1d(x, wv, Some(bv), r)?;
                let y = g.relu(y);
                project(g, y, 26)
            },
            rand_tensor(&[2, 9, 3], 27),
        );
        assert!(err < 1e-4, "r={r}: {err}");
    }
}

#[test]
fn grad_check_conv_kernel() {
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(&[5, 2, 3], 28)).unwrap();
    let b = store.add("b", rand_tensor(&[3], 29)).unwrap();
    let x = rand_tensor(&[11, 2], 30);
    let err = grad_check_params(
        &mut store,
        |g| {
            let xv = g.input(x.clone());
            let (wv, bv) = (g.param(w), g.param(b));
            let y = g.conv1d(xv, wv, Some(bv), 2)?;
            project(g, y, 31)
        },
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_batchnorm() {
    let mut store = ParamStore::new();
    let gamma = store.add("gamma", rand_tensor(&[3], 32)).unwrap();
    let beta = store.add("beta", rand_tensor(&[3], 33)).unwrap();
    let err = grad_check(
        &store,
        |g, x| {
            let (gv, bv) = (g.param(gamma), g.param(beta));
            let (y, _) = g.batchnorm_train(x, gv, bv)?;
            project(g, y, 34)
        },
        &rand_tensor(&[2, 5, 3], 35),
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
    let x = rand_tensor(&[2, 5, 3], 36);
    let err = grad_check_params(
        &mut store,
        |g| {
            let xv = g.input(x.clone());
            let (gv, bv) = (g.param(gamma), g.param(beta));
            let (y, _) = g.batchnorm_train(xv, gv, bv)?;
            project(g, y, 37)
        },
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_linear_concat_slice_broadcast() {
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(&[4, 3], 38)).unwrap();
    let b = store.add("b", rand_tensor(&[3], 39)).unwrap();
    let f = |g: &mut Graph<'_>, x: Var| -> crate::Result<Var> {
        let (wv, bv) = (g.param(w), g.param(b));
        let y = g.linear(x, wv, Some(bv))?;
        let gate = g.slice(y, 2, 1, 1)?;
        let gate = g.sigmoid(gate);
        let z = g.mul_broadcast(gate, x)?;
        let cat = g.concat(&[z, y], 2)?;
        let flat = g.reshape(cat, &[2 * 5 * 7])?;
        project(g, flat, 40)
    };
    let err = grad_check(&store, f, &rand_tensor(&[2, 5, 4], 41), 1e-3).unwrap();
    assert!(err < 1e-4, "{err}");
    let x = rand_tensor(&[2, 5, 4], 42);
    let err = grad_check_params(
        &mut store,
        |g| {
            let xv = g.input(x.clone());
            f(g, xv)
        },
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_lstm_both_directions() {
    let mut store = ParamStore::new();
    let wx = store.add("wx", rand_tensor(&[3, 8], 43)).unwrap();
    let wh = store.add("wh", rand_tensor(&[2, 8], 44)).unwrap();
    let b = store.add("b", rand_tensor(&[8], 45)).unwrap();
    for reverse in [false, true] {
        let f = |g: &mut Graph<'_>, x: Var| -> crate::Result<Var> {
            let (a, c, d) = (g.param(wx), g.param(wh), g.param(b));
            let y = g.lstm(x, a, c, d, reverse)?;
            project(g, y, 46)
        };
        let err = grad_check(&store, f, &rand_tensor(&[2, 5, 3], 47), 1e-3).unwrap();
        assert!(err < 1e-4, "{err}");
        let x = rand_tensor(&[2, 5, 3], 48);
        let err = grad_check_params(
            &mut store,
            |g| {
                let xv = g.input(x.clone());
                f(g, xv)
            },
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn grad_check_aam_cross_entropy() {
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(&[5, 4], 49)).unwrap();
    let labels = [1, 4, 0];
    let f = |g: &mut Graph<'_>, x: Var| -> crate::Result<Var> {
        let wv = g.param(w);
        let logits = g.aam_logits(x, wv, &labels, 0.2, 30.0)?;
        g.cross_entropy(logits, &labels)
    };
    let err = grad_check(&store, f, &rand_tensor(&[3, 4], 50), 1e-3).unwrap();
    assert!(err < 1e-4, "{err}");
    let x = rand_tensor(&[3, 4], 51);
    let err = grad_check_params(
        &mut store,
        |g| {
            let xv = g.input(x.clone());
            f(g, xv)
        },
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn aam_rejects_zero_vectors() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false, 0);
    let e = g.input(Tensor::zeros(&[1, 3]));
    let w = g.input(rand_tensor(&[2, 3], 52));
    assert!(matches!(g.aam_logits(e, w, &[0], 0.2, 30.0), Err(Error::DegenerateInput(_))));
}

#[test]
fn params_are_deduplicated_on_the_tape() {
    let mut store = ParamStore::new();
    let id = store.add("w", rand_tensor(&[2], 53)).unwrap();
    let mut g = Graph::new(&store, false, 0);
    assert_eq!(g.param(id), g.param(id));
    assert_eq!(g.len(), 1);
}

#[test]
fn kink_pattern_tracks_relu_and_max_branches() {
    let store = ParamStore::new();
    let pattern = |v: &[f64]| {
        let mut g = Graph::new(&store, false, 0);
        let x = g.input(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap());
        let r = g.relu(x);
        g.max_axis(r, 1).unwrap();
        g.kink_pattern()
    };
    assert_eq!(pattern(&[0.5, -1.0]), pattern(&[0.7, -2.0]));
    assert_ne!(pattern(&[0.5, -1.0]), pattern(&[0.5, 1.0]));
    assert_ne!(pattern(&[0.5, 0.2]), pattern(&[0.5, 0.9]));
}

#[test]
fn smooth_check_skips_probes_across_a_kink() {
    let store = ParamStore::new();
    let f = |g: &mut Graph<'_>, x: Var| -> crate::Result<Var> {
        let r = g.relu(x);
        Ok(g.sum(r))
    };
    // 1e-4 sits inside the probe interval, so its central difference is 0.5
    let x = Tensor::new(vec![3], vec![1e-4, 0.5, -0.5]).unwrap();
    assert!(grad_check(&store, f, &x, 1e-3).unwrap() > 0.4);
    let r = grad_check_smooth(&store, f, &x, 1e-3).unwrap();
    assert_eq!((r.checked, r.skipped), (2, 1));
    assert!(r.max_rel_err < 1e-12);
}
