use super::gradcheck::check;
use super::*;
use crate::rng;
use rand::Rng as _;

const EPS: f64 = 1e-4;
const REL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 0);
    let n = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Random weights so every output entry enters the scalar loss.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = random(tape.shape(out), seed ^ 0xabc);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn assert_grad<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let r = check(inputs, EPS, FLOOR, f).unwrap();
    assert!(r.passes(REL), "{r:?}");
}

#[test]
fn tensor_shape_must_match_data() {
    assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    assert_eq!(Tensor::zeros(&[2, 3]).numel(), 6);
}

#[test]
fn sum_gives_ones_and_sum_squares_gives_2x() {
    let x = random(&[2, 3], 1);
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let l = tape.sum(v);
    tape.backward(l).unwrap();
    assert!(tape.grad(v).unwrap().data().iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let l = tape.sum_squares(v);
    tape.backward(l).unwrap();
    let g = tape.grad(v).unwrap();
    for (g, x) in g.data().iter().zip(x.data()) {
        assert_eq!(*g, 2.0 * x);
    }
}

#[test]
fn backward_rejects_non_scalar_and_double_calls() {
    let mut tape = Tape::new();
    let v = tape.param(random(&[3], 2));
    assert!(matches!(tape.backward(v), Err(Error::NonScalarLoss(_))));
    let l = tape.sum(v);
    tape.backward(l).unwrap();
    assert!(matches!(tape.backward(l), Err(Error::BackwardTwice)));
    tape.reset();
    tape.backward(l).unwrap();
}

#[test]
fn replayed_passes_give_identical_gradients() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.param(random(&[1, 2, 5, 5], 3));
        let w = tape.param(random(&[3, 2, 3, 3], 4));
        let c = tape.conv2d(x, w, None, 1).unwrap();
        let s = tape.silu(c);
        let l = tape.sum_squares(s);
        tape.backward(l).unwrap();
        (tape.grad(x).unwrap(), tape.grad(w).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(random(&[4], 5));
    let p = tape.param(random(&[4], 6));
    let m = tape.mul(x, p).unwrap();
    let l = tape.sum(m);
    tape.backward(l).unwrap();
    assert!(tape.grad(x).is_none());
    assert_eq!(tape.grad(p).unwrap().data(), tape.value(x).data());
}

#[test]
fn silu_at_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(0.0));
    let s = tape.silu(x);
    assert_eq!(tape.value(s).item(), 0.0);
    let l = tape.sum(s);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 0.5);
}

#[test]
fn conv_delta_kernel_is_identity() {
    let x = random(&[1, 1, 6, 5], 7);
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k);
    let y = tape.conv2d(xv, kv, None, 1).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv_ones_kernel_on_constant_input() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::filled(&[1, 1, 5, 5], 7.0));
    let k = tape.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
    let y = tape.conv2d(x, k, None, 1).unwrap();
    let v = tape.value(y);
    for r in 1..4 {
        for c in 1..4 {
            assert_eq!(v.data()[r * 5 + c], 63.0);
        }
    }
    // corners see 4 taps
    assert_eq!(v.data()[0], 28.0);
}

#[test]
fn conv_against_direct_loops() {
    let (b, cin, h, w, cout, k, pad) = (2, 3, 5, 4, 2, 3, 1);
    let x = random(&[b, cin, h, w], 8);
    let wt = random(&[cout, cin, k, k], 9);
    let bias = random(&[cout], 10);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.constant(x.clone()),
        tape.constant(wt.clone()),
        tape.constant(bias.clone()),
    );
    let y = tape.conv2d(xv, wv, Some(bv), pad).unwrap();
    let got = tape.value(y).data();
    for bi in 0..b {
        for co in 0..cout {
            for r in 0..h {
                for c in 0..w {
                    let mut want = bias.data()[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (ir, ic) = (
                                    r as i64 + ky as i64 - pad as i64,
                                    c as i64 + kx as i64 - pad as i64,
                                );
                                if ir < 0 || ic < 0 || ir >= h as i64 || ic >= w as i64 {
                                    continue;
                                }
                                want += wt.data()[((co * cin + ci) * k + ky) * k + kx]
                                    * x.data()
                                        [((bi * cin + ci) * h + ir as usize) * w + ic as usize];
                            }
                        }
                    }
                    let g = got[((bi * cout + co) * h + r) * w + c];
                    assert!((g - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv_shape_errors_name_the_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let e = tape.conv2d(x, w, None, 1).unwrap_err().to_string();
    assert!(e.contains("channel"), "{e}");
    let w = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let e = tape.conv2d(x, w, None, 1).unwrap_err().to_string();
    assert!(e.contains("kernel"), "{e}");
}

#[test]
fn grad_conv2d() {
    let inputs = [
        random(&[1, 2, 5, 5], 11),
        random(&[3, 2, 3, 3], 12),
        random(&[3], 13),
    ];
    assert_grad(&inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1)?;
        project(t, y, 1)
    });
    // valid padding and a 5x5 kernel
    let inputs = [random(&[2, 1, 6, 7], 14), random(&[2, 1, 5, 5], 15)];
    assert_grad(&inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], None, 0)?;
        project(t, y, 2)
    });
}

#[test]
fn grad_elementwise() {
    let a = random(&[2, 3, 4], 20);
    let b = random(&[2, 3, 4], 21);
    type Bin = fn(&mut Tape, Var, Var) -> Result<Var>;
    let ops: [Bin; 3] = [Tape::add, Tape::sub, Tape::mul];
    for op in ops {
        assert_grad(&[a.clone(), b.clone()], |t, v| {
            let y = op(t, v[0], v[1])?;
            project(t, y, 3)
        });
    }
    type Un = fn(&mut Tape, Var) -> Var;
    let ops: [Un; 4] = [Tape::silu, Tape::tanh, Tape::softplus, |t, v| {
        t.scale(v, -2.5)
    }];
    for op in ops {
        assert_grad(std::slice::from_ref(&a), |t, v| {
            let y = op(t, v[0]);
            project(t, y, 4)
        });
    }
    assert_grad(std::slice::from_ref(&a), |t, v| {
        let y = t.add_const(v[0], 3.0);
        let y = t.recip(y);
        project(t, y, 5)
    });
    let s = random(&[1], 22);
    assert_grad(&[a.clone(), s.clone()], |t, v| {
        let y = t.mul_scalar(v[0], v[1])?;
        project(t, y, 6)
    });
    assert_grad(&[a.clone(), s], |t, v| {
        let y = t.add_scalar(v[0], v[1])?;
        project(t, y, 7)
    });
}

#[test]
fn grad_relu_away_from_zero() {
    let mut a = random(&[30], 23);
    a.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 1e-2 {
            *v = 0.5
        }
    });
    assert_grad(&[a], |t, v| {
        let y = t.relu(v[0]);
        project(t, y, 8)
    });
}

fn away_from_kinks(x: &mut Tensor, theta: &Tensor, seed: u64) {
    let mut r = rng::stream(seed, 1);
    for j in 0..x.numel() {
        let th = if theta.numel() == 1 {
            theta.data()[0]
        } else {
            theta.data()[j]
        };
        while (x.data()[j].abs() - th).abs() < 1e-3 {
            x.data_mut()[j] = r.random_range(-1.0..1.0);
        }
    }
}

#[test]
fn soft_threshold_values_and_grads() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![3], vec![5.0, 1.0, -5.0]).unwrap());
    let th = tape.constant(Tensor::scalar(2.0));
    let y = tape.soft_threshold(x, th).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 0.0, -3.0]);

    let theta = Tensor::from_vec(vec![1], vec![0.3]).unwrap();
    let mut x = random(&[2, 1, 4, 4], 24);
    away_from_kinks(&mut x, &theta, 1);
    assert_grad(&[x, theta], |t, v| {
        let y = t.soft_threshold(v[0], v[1])?;
        project(t, y, 9)
    });

    let theta = random(&[2, 1, 4, 4], 25);
    let theta = Tensor::from_vec(
        theta.shape().to_vec(),
        theta.data().iter().map(|v| v.abs() * 0.5).collect(),
    )
    .unwrap();
    let mut x = random(&[2, 1, 4, 4], 26);
    away_from_kinks(&mut x, &theta, 2);
    assert_grad(&[x, theta], |t, v| {
        let y = t.soft_threshold(v[0], v[1])?;
        project(t, y, 10)
    });
}

#[test]
fn soft_threshold_kink_subgradient_is_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![2], vec![2.0, -2.0]).unwrap());
    let th = tape.param(Tensor::scalar(2.0));
    let y = tape.soft_threshold(x, th).unwrap();
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0]);
    assert_eq!(tape.grad(th).unwrap().item(), 0.0);
}

#[test]
fn concat_shapes_and_grad_split() {
    let a = random(&[1, 2, 3, 3], 27);
    let b = random(&[1, 4, 3, 3], 28);
    let mut tape = Tape::new();
    let (va, vb) = (tape.param(a.clone()), tape.param(b.clone()));
    let c = tape.concat(&[va, vb]).unwrap();
    assert_eq!(tape.shape(c), &[1, 6, 3, 3]);
    assert_eq!(&tape.value(c).data()[..18], a.data());
    let w: Vec<f64> = (0..54).map(|i| i as f64).collect();
    let wv = tape.constant(Tensor::from_vec(vec![1, 6, 3, 3], w.clone()).unwrap());
    let m = tape.mul(c, wv).unwrap();
    let l = tape.sum(m);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(va).unwrap().data(), &w[..18]);
    assert_eq!(tape.grad(vb).unwrap().data(), &w[18..]);

    let inputs = [random(&[2, 1, 3, 3], 29), random(&[2, 2, 3, 3], 30)];
    assert_grad(&inputs, |t, v| {
        let y = t.concat(&[v[0], v[1]])?;
        project(t, y, 11)
    });
}

#[test]
fn channel_pools() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::filled(&[1, 3, 2, 2], 4.0));
    let m = tape.channel_mean(x).unwrap();
    let mx = tape.channel_max(x).unwrap();
    assert!(tape.value(m).data().iter().all(|&v| v == 4.0));
    assert!(tape.value(mx).data().iter().all(|&v| v == 4.0));

    let mut d = random(&[1, 3, 2, 2], 31);
    d.data_mut()[4..8].iter_mut().for_each(|v| *v += 10.0);
    let x = tape.constant(d.clone());
    let mx = tape.channel_max(x).unwrap();
    assert_eq!(tape.value(mx).data(), &d.data()[4..8]);

    let inputs = [random(&[2, 4, 3, 3], 32)];
    assert_grad(&inputs, |t, v| {
        let y = t.channel_mean(v[0])?;
        project(t, y, 12)
    });
    // random draws are untied almost surely
    assert_grad(&inputs, |t, v| {
        let y = t.channel_max(v[0])?;
        project(t, y, 13)
    });
    assert_grad(&inputs, |t, v| {
        let y = t.global_avg_pool(v[0])?;
        project(t, y, 14)
    });
}

#[test]
fn channel_max_ties_go_to_lowest_channel() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::filled(&[1, 3, 1, 1], 1.0));
    let m = tape.channel_max(x).unwrap();
    let l = tape.sum(m);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn grad_matmul_softmax_reshape() {
    let inputs = [random(&[3, 4], 33), random(&[4, 2], 34)];
    assert_grad(&inputs, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 15)
    });
    let inputs = [random(&[3, 5], 35)];
    assert_grad(&inputs, |t, v| {
        let y = t.softmax(v[0])?;
        project(t, y, 16)
    });
    assert_grad(&inputs, |t, v| {
        let y = t.reshape(v[0], &[5, 3])?;
        project(t, y, 17)
    });
}

#[test]
fn linear_matches_explicit_products_and_grads() {
    let m = random(&[3, 4], 40);
    let map = std::sync::Arc::new(DenseMap::new(3, 4, m.data().to_vec()).unwrap());
    let x = [1.0, -2.0, 0.5, 3.0];
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::from_vec(vec![1, 1, 2, 2], x.to_vec()).unwrap());
    let y = tape.linear(xv, &map, false, &[3]).unwrap();
    for (r, &got) in tape.value(y).data().iter().enumerate() {
        let want: f64 = (0..4).map(|c| m.data()[r * 4 + c] * x[c]).sum();
        assert!((got - want).abs() < 1e-15);
    }
    let yt = tape.linear(y, &map, true, &[4]).unwrap();
    assert_eq!(tape.shape(yt), &[4]);
    assert!(tape.linear(xv, &map, true, &[4]).is_err());
    assert!(tape.linear(xv, &map, false, &[4]).is_err());

    let inputs = [random(&[1, 1, 2, 2], 41)];
    assert_grad(&inputs, |t, v| {
        let y = t.linear(v[0], &map, false, &[3])?;
        project(t, y, 18)
    });
    let inputs = [random(&[3], 42)];
    assert_grad(&inputs, |t, v| {
        let y = t.linear(v[0], &map, true, &[2, 2])?;
        project(t, y, 19)
    });
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut tape = Tape::new();
    let x = tape
        .constant(Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 1000.0, 0.0, -1000.0]).unwrap());
    let s = tape.softmax(x).unwrap();
    for row in tape.value(s).data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}

#[test]
fn block_mean_and_upsample() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let u = tape.upsample(x, 3).unwrap();
    assert_eq!(tape.shape(u), &[1, 1, 6, 6]);
    assert_eq!(tape.value(u).data()[..6], [1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    let back = tape.block_mean(u, 3).unwrap();
    assert_eq!(tape.value(back), tape.value(x));
    assert!(tape.block_mean(u, 4).is_err());

    let inputs = [random(&[2, 1, 6, 9], 36)];
    assert_grad(&inputs, |t, v| {
        let y = t.block_mean(v[0], 3)?;
        project(t, y, 18)
    });
    let inputs = [random(&[1, 2, 2, 3], 37)];
    assert_grad(&inputs, |t, v| {
        let y = t.upsample(v[0], 3)?;
        project(t, y, 19)
    });
}

#[test]
fn shared_inputs_accumulate() {
    // x used three times: d/dx (x·x + 3x) = 2x + 3
    let x = random(&[5], 38);
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let sq = tape.mul(v, v).unwrap();
    let lin = tape.scale(v, 3.0);
    let s = tape.add(sq, lin).unwrap();
    let l = tape.sum(s);
    tape.backward(l).unwrap();
    for (g, x) in tape.grad(v).unwrap().data().iter().zip(x.data()) {
        assert!((g - (2.0 * x + 3.0)).abs() < 1e-15);
    }
}
