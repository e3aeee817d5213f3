use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct six-loop convolution.
fn naive_conv(x: &Tensor<f64>, wt: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, cin, h, w) = x.dims4().unwrap();
    let (cout, _, k, _) = wt.dims4().unwrap();
    let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
    let mut y = Tensor::zeros(&[n, cout, oh, ow]);
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.data()[((b * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * wt.data()[((co * cin + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    y.data_mut()[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

const CONV_CASES: [(usize, usize, usize, usize, usize, usize); 7] = [
    // (cin, cout, k, stride, pad, size)
    (3, 4, 7, 2, 3, 13),
    (2, 3, 3, 1, 1, 6),
    (2, 3, 3, 2, 1, 7),
    (3, 2, 1, 1, 0, 5),
    (3, 2, 1, 2, 0, 5),
    (1, 2, 3, 3, 0, 10),
    (2, 2, 5, 1, 4, 3),
];

#[test]
fn conv_forward_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (cin, cout, k, s, p, size) in CONV_CASES {
        let mut reg = Registry::<f64, _>::new(&mut rng);
        let conv = Conv2d::new(&mut reg, "w".into(), cin, cout, k, s, p, false);
        let params = reg.params;
        let x = random(&mut rng, &[2, cin, size, size + 1]);
        let y = conv.forward(&params, &x).unwrap();
        let want = naive_conv(&x, params.get(conv.weight), s, p);
        assert_eq!(y.shape(), want.shape());
        let err = y.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "case {:?}: {err}", (cin, cout, k, s, p));
    }
}

#[test]
fn conv_backward_is_the_adjoint() {
    // <dy, conv(x; W)> is bilinear, so dW and dx follow from perturbations
    // of a single direction: <dW, V> = <dy, conv(x; V)>, <dx, u> = <dy, conv(u; W)>.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (cin, cout, k, s, p, size) in CONV_CASES {
        let mut reg = Registry::<f64, _>::new(&mut rng);
        let conv = Conv2d::new(&mut reg, "w".into(), cin, cout, k, s, p, false);
        let params = reg.params;
        let x = random(&mut rng, &[2, cin, size, size + 1]);
        let dy = random(&mut rng, conv.forward(&params, &x).unwrap().shape());
        let mut grads = params.zeros_like();
        let dx = conv.backward(&params, &x, &dy, &mut grads, true).unwrap().unwrap();
        let v = random(&mut rng, &[cout, cin, k, k]);
        let u = random(&mut rng, x.shape());
        let lhs_w = dot(grads.get(conv.weight), &v);
        let rhs_w = dot(&dy, &naive_conv(&x, &v, s, p));
        let lhs_x = dot(&dx, &u);
        let rhs_x = dot(&dy, &naive_conv(&u, params.get(conv.weight), s, p));
        assert!((lhs_w - rhs_w).abs() < 1e-10 * (1.0 + rhs_w.abs()));
        assert!((lhs_x - rhs_x).abs() < 1e-10 * (1.0 + rhs_x.abs()));
    }
}

#[test]
fn batch_norm_normalizes_and_tracks_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut reg = Registry::<f64, _>::new(&mut rng);
    let bn = BatchNorm2d::new(&mut reg, "bn", 2, 1.0);
    let (params, mut stats) = (reg.params, reg.stats);
    let x = Tensor::from_fn(&[3, 2, 2, 2], |i| i as f64);
    let (y, cache) = bn.forward(&params, &mut stats, &x, Pass::Train).unwrap();
    assert!(cache.is_some());
    for ch in 0..2 {
        let vals: Vec<f64> = (0..3).flat_map(|b| y.item(b)[ch * 4..ch * 4 + 4].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / 12.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
        // Raw channel values are 8b + 4ch + j.
        let raw: Vec<f64> = (0..3).flat_map(|b| (0..4).map(move |j| (8 * b + 4 * ch + j) as f64)).collect();
        let rm = raw.iter().sum::<f64>() / 12.0;
        let rv = raw.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / 11.0;
        let got_m = stats.get(bn.running_mean).data()[ch];
        let got_v = stats.get(bn.running_var).data()[ch];
        assert!((got_m - 0.1 * rm).abs() < 1e-12);
        assert!((got_v - (0.9 + 0.1 * rv)).abs() < 1e-12);
    }
    let frozen = stats.clone();
    bn.forward(&params, &mut stats, &x, Pass::Probe).unwrap();
    assert_eq!(stats, frozen);
    let (ye, none) = bn.forward(&params, &mut stats, &x, Pass::Eval).unwrap();
    assert!(none.is_none());
    let m = stats.get(bn.running_mean).data()[1];
    let v = stats.get(bn.running_var).data()[1];
    let want = (x.data()[4] - m) / (v + 1e-5).sqrt();
    assert!((ye.data()[4] - want).abs() < 1e-12);
}

#[test]
fn batch_norm_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut reg = Registry::<f64, _>::new(&mut rng);
    let bn = BatchNorm2d::new(&mut reg, "bn", 3, 1.0);
    let (mut params, mut stats) = (reg.params, reg.stats);
    params.get_mut(bn.weight).data_mut().copy_from_slice(&[0.5, 1.5, -0.7]);
    params.get_mut(bn.bias).data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
    let x = random(&mut rng, &[2, 3, 2, 3]);
    let dy = random(&mut rng, x.shape());
    let (_, cache) = bn.forward(&params, &mut stats, &x, Pass::Probe).unwrap();
    let mut grads = params.zeros_like();
    let dx = bn.backward(&params, &cache.unwrap(), &dy, &mut grads).unwrap();
    let mut objective = |x: &Tensor<f64>| dot(&dy, &bn.forward(&params, &mut stats, x, Pass::Probe).unwrap().0);
    let h = 1e-6;
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += h;
        xm.data_mut()[i] -= h;
        let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
        assert!((fd - dx.data()[i]).abs() < 1e-6, "{i}: {fd} vs {}", dx.data()[i]);
    }
}

#[test]
fn max_pool_picks_window_maxima_and_routes_gradients() {
    let pool = MaxPool2d { kernel: 3, stride: 2, pad: 1 };
    let x = Tensor::from_fn(&[1, 1, 4, 4], |i| [9.0, 1.0, 2.0, 0.0, 5.0, 3.0, 4.0, 8.0, 7.0, 6.0, 1.0, 2.0, 0.0, 3.0, 4.0, 5.0][i]);
    let (y, cache) = pool.forward(&x, true).unwrap();
    // Windows cover rows/cols {-1,0,1} or {1,2,3}.
    assert_eq!(y.data(), &[9.0, 8.0, 7.0, 8.0]);
    let dx = pool.backward(&cache.unwrap(), &Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
    let mut want = vec![0.0; 16];
    want[0] = 1.0;
    want[7] = 2.0;
    want[8] = 1.0;
    assert_eq!(dx.data(), want.as_slice());
}

#[test]
fn linear_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut reg = Registry::<f64, _>::new(&mut rng);
    let lin = Linear::new(&mut reg, "fc", 4, 3);
    let params = reg.params;
    let x = random(&mut rng, &[2, 4]);
    let dy = random(&mut rng, &[2, 3]);
    let mut grads = params.zeros_like();
    let dx = lin.backward(&params, &x, &dy, &mut grads).unwrap();
    let h = 1e-6;
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += h;
        xm.data_mut()[i] -= h;
        let fd = (dot(&dy, &lin.forward(&params, &xp).unwrap()) - dot(&dy, &lin.forward(&params, &xm).unwrap())) / (2.0 * h);
        assert!((fd - dx.data()[i]).abs() < 1e-8);
    }
}
