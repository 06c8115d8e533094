//! Shared oracles and checks for the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spatseg::autodiff::{grad_check, Mode, Padding, RunningStats, Tape, Var};
use spatseg::image::{Image, LabelMap};
use spatseg::spatial_loss::{total_loss, Reduction, SpatialLossConfig};
use spatseg::tensor::Tensor;
use spatseg::unet::{self, init_params, ParamKind, UNetConfig};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_H: f64 = 1e-5;
pub const MARGIN: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero by `MARGIN`.
pub fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.random_range(0.05..1.5);
            if r.random::<bool>() { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Shuffled, evenly spaced values, so every pooling window has a clear winner.
pub fn distinct(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    data.shuffle(r);
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_image(h: usize, w: usize, r: &mut ChaCha8Rng) -> Image {
    Image::new(h, w, (0..h * w).map(|_| r.random::<f64>()).collect()).unwrap()
}

pub fn random_labels(h: usize, w: usize, k: u8, r: &mut ChaCha8Rng) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| r.random_range(0..k)).collect()).unwrap()
}

// ---- naive oracles --------------------------------------------------------

pub fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, same: bool) -> Vec<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (ph, pw) = if same { (kh / 2, kw / 2) } else { (0, 0) };
    let (oh, ow) = (h + 2 * ph - kh + 1, w + 2 * pw - kw + 1);
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = b.data()[o];
                for c in 0..ci {
                    for u in 0..kh {
                        for v in 0..kw {
                            let iy = y as isize + u as isize - ph as isize;
                            let ix = xx as isize + v as isize - pw as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                s += x.data()[(c * h + iy as usize) * w + ix as usize]
                                    * k.data()[((o * ci + c) * kh + u) * kw + v];
                            }
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = s;
            }
        }
    }
    out
}

pub fn naive_pool(x: &Tensor) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::new();
    for ch in 0..c {
        for y in (0..h).step_by(2) {
            for xx in (0..w).step_by(2) {
                let at = |dy: usize, dx: usize| x.data()[(ch * h + y + dy) * w + xx + dx];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    out
}

/// Scatter-accumulate transposed convolution.
pub fn naive_upconv(x: &Tensor, k: &Tensor, b: &Tensor) -> Vec<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = k.shape()[1];
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for i in 0..oh * ow {
            out[o * oh * ow + i] = b.data()[o];
        }
    }
    for c in 0..ci {
        for y in 0..h {
            for xx in 0..w {
                let v = x.data()[(c * h + y) * w + xx];
                for o in 0..co {
                    for a in 0..2 {
                        for bb in 0..2 {
                            out[(o * oh + 2 * y + a) * ow + 2 * xx + bb] += v * k.data()[((c * co + o) * 2 + a) * 2 + bb];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn naive_ce(p: &Tensor, t: &LabelMap) -> f64 {
    let n = t.height * t.width;
    let mut s = 0.0;
    for i in 0..n {
        s -= p.data()[t.data[i] as usize * n + i].max(1e-12).ln();
    }
    s / n as f64
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- gradient suite -------------------------------------------------------

/// `sum(y * weights)` with fixed random weights, so every output coordinate
/// carries a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> spatseg::Result<Var> {
    let mut r = rng(seed ^ 0xABCD);
    let wts = normal(tape.value(y).shape(), &mut r);
    let c = tape.constant(wts);
    let m = tape.mul(y, c)?;
    Ok(tape.sum(m))
}

/// Worst relative error of each op's gradient check over `seeds`.
pub fn op_grad_suite(seeds: std::ops::Range<u64>) -> Vec<(&'static str, f64)> {
    type Check = fn(u64) -> f64;
    let checks: Vec<(&'static str, Check)> = vec![
        ("conv2d.input", |s| {
            let mut r = rng(s);
            let (k, b) = (normal(&[2, 2, 3, 3], &mut r), normal(&[2], &mut r));
            let x = normal(&[2, 5, 4], &mut r);
            run(&x, s, move |t, v| {
                let (k, b) = (t.constant(k.clone()), t.constant(b.clone()));
                t.conv2d(v, k, b, Padding::Same)
            })
        }),
        ("conv2d.kernel", |s| {
            let mut r = rng(s);
            let (x, b) = (normal(&[2, 5, 5], &mut r), normal(&[3], &mut r));
            let k = normal(&[3, 2, 3, 3], &mut r);
            run(&k, s, move |t, v| {
                let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
                t.conv2d(x, v, b, Padding::None)
            })
        }),
        ("conv2d.bias", |s| {
            let mut r = rng(s);
            let (x, k) = (normal(&[1, 4, 4], &mut r), normal(&[2, 1, 3, 3], &mut r));
            let b = normal(&[2], &mut r);
            run(&b, s, move |t, v| {
                let (x, k) = (t.constant(x.clone()), t.constant(k.clone()));
                t.conv2d(x, k, v, Padding::Same)
            })
        }),
        ("maxpool2x2", |s| {
            let x = distinct(&[2, 4, 6], &mut rng(s));
            run(&x, s, |t, v| t.maxpool2x2(v))
        }),
        ("upconv2x2.input", |s| {
            let mut r = rng(s);
            let (k, b) = (normal(&[2, 3, 2, 2], &mut r), normal(&[3], &mut r));
            let x = normal(&[2, 3, 2], &mut r);
            run(&x, s, move |t, v| {
                let (k, b) = (t.constant(k.clone()), t.constant(b.clone()));
                t.upconv2x2(v, k, b)
            })
        }),
        ("upconv2x2.kernel", |s| {
            let mut r = rng(s);
            let (x, b) = (normal(&[2, 3, 3], &mut r), normal(&[1], &mut r));
            let k = normal(&[2, 1, 2, 2], &mut r);
            run(&k, s, move |t, v| {
                let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
                t.upconv2x2(x, v, b)
            })
        }),
        ("upconv2x2.bias", |s| {
            let mut r = rng(s);
            let (x, k) = (normal(&[1, 2, 2], &mut r), normal(&[1, 2, 2, 2], &mut r));
            let b = normal(&[2], &mut r);
            run(&b, s, move |t, v| {
                let (x, k) = (t.constant(x.clone()), t.constant(k.clone()));
                t.upconv2x2(x, k, v)
            })
        }),
        ("relu", |s| {
            let x = away_from_zero(&[2, 3, 3], &mut rng(s));
            run(&x, s, |t, v| Ok(t.relu(v)))
        }),
        ("softmax_channels", |s| {
            let x = normal(&[3, 3, 2], &mut rng(s));
            run(&x, s, |t, v| t.softmax_channels(v))
        }),
        ("concat_channels", |s| {
            let mut r = rng(s);
            let other = normal(&[2, 3, 3], &mut r);
            let x = normal(&[1, 3, 3], &mut r);
            run(&x, s, move |t, v| {
                let o = t.constant(other.clone());
                let a = t.concat_channels(v, o)?;
                t.concat_channels(o, a)
            })
        }),
        ("dropout", |s| {
            let x = normal(&[2, 4, 4], &mut rng(s));
            run(&x, s, |t, v| t.dropout(v, 0.25, Mode::Train))
        }),
        ("batchnorm.train.input", |s| {
            let mut r = rng(s);
            let (g, b) = (uniform(&[2], 0.5, 1.5, &mut r), normal(&[2], &mut r));
            let x = normal(&[2, 3, 3], &mut r);
            run(&x, s, move |t, v| {
                let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
                t.batchnorm(v, g, b, &mut RunningStats::new(2), Mode::Train)
            })
        }),
        ("batchnorm.train.gamma", |s| {
            let mut r = rng(s);
            let (x, b) = (normal(&[3, 2, 3], &mut r), normal(&[3], &mut r));
            let g = uniform(&[3], 0.5, 1.5, &mut r);
            run(&g, s, move |t, v| {
                let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
                t.batchnorm(x, v, b, &mut RunningStats::new(3), Mode::Train)
            })
        }),
        ("batchnorm.train.beta", |s| {
            let mut r = rng(s);
            let (x, g) = (normal(&[2, 3, 3], &mut r), uniform(&[2], 0.5, 1.5, &mut r));
            let b = normal(&[2], &mut r);
            run(&b, s, move |t, v| {
                let (x, g) = (t.constant(x.clone()), t.constant(g.clone()));
                t.batchnorm(x, g, v, &mut RunningStats::new(2), Mode::Train)
            })
        }),
        ("batchnorm.eval.input", |s| {
            let mut r = rng(s);
            let (g, b) = (uniform(&[2], 0.5, 1.5, &mut r), normal(&[2], &mut r));
            let stats = RunningStats { mean: normal(&[2], &mut r).into_data(), var: uniform(&[2], 0.5, 2.0, &mut r).into_data() };
            let x = normal(&[2, 3, 3], &mut r);
            run(&x, s, move |t, v| {
                let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
                t.batchnorm(v, g, b, &mut stats.clone(), Mode::Eval)
            })
        }),
        ("cross_entropy_mean", |s| {
            let mut r = rng(s);
            let labels = random_labels(3, 4, 3, &mut r);
            let p = uniform(&[3, 3, 4], 0.1, 0.9, &mut r);
            let lab = labels.clone();
            grad_check(&p, GRAD_H, s, move |t, v| t.cross_entropy_mean(v, &lab)).unwrap().max_rel_error
        }),
        ("elementwise", |s| {
            let mut r = rng(s);
            let other = normal(&[2, 3], &mut r);
            let x = normal(&[2, 3], &mut r);
            run(&x, s, move |t, v| {
                let o = t.constant(other.clone());
                let a = t.mul(v, v)?;
                let b = t.add(a, o)?;
                let c = t.scale(b, -0.7);
                let d = t.mul(c, v)?;
                t.add_scaled(d, v, 2.5)
            })
        }),
    ];
    checks
        .into_iter()
        .map(|(name, f)| (name, seeds.clone().map(f).fold(0.0, f64::max)))
        .collect()
}

fn run<F>(point: &Tensor, seed: u64, mut op: F) -> f64
where
    F: FnMut(&mut Tape, Var) -> spatseg::Result<Var>,
{
    grad_check(point, GRAD_H, seed, |t, v| {
        let y = op(t, v)?;
        weighted_sum(t, y, seed)
    })
    .unwrap()
    .max_rel_error
}

/// Smallest gap between the top two class probabilities over all pixels.
pub fn argmax_margin(probs: &Tensor) -> f64 {
    let (k, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let n = h * w;
    (0..n)
        .map(|i| {
            let mut v: Vec<f64> = (0..k).map(|c| probs.data()[c * n + i]).collect();
            v.sort_by(|a, b| b.total_cmp(a));
            v[0] - v[1]
        })
        .fold(f64::INFINITY, f64::min)
}

/// Grad check of the total loss with respect to the logits of a random
/// `h x w` instance; `None` when the draw has an argmax margin below `MARGIN`.
pub fn total_loss_check(seed: u64, h: usize, w: usize, config: &SpatialLossConfig) -> Option<f64> {
    let mut r = rng(seed);
    let image = random_image(h, w, &mut r);
    let target = random_labels(h, w, 2, &mut r);
    let logits = normal(&[2, h, w], &mut r);
    let mut t = Tape::new(0);
    let z = t.constant(logits.clone());
    let p = t.softmax_channels(z).unwrap();
    if argmax_margin(t.value(p)) < MARGIN {
        return None;
    }
    let rep = grad_check(&logits, GRAD_H, seed, |t, v| {
        let p = t.softmax_channels(v)?;
        Ok(total_loss(t, p, &target, &image, config)?.total)
    })
    .unwrap();
    Some(rep.max_rel_error)
}

/// Grad check of the total loss through a depth-2 network on an 8x8 input,
/// one parameter tensor at a time. Conv biases that feed a batchnorm are
/// skipped: their exact gradient is zero and the finite difference is pure
/// rounding noise. `None` when the base point's argmax margin is too small.
pub fn network_check(seed: u64) -> Option<Vec<(String, f64)>> {
    let cfg = UNetConfig { depth: 2, base_channels: 2, ..Default::default() };
    let mut params = init_params(&cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5EED);
    // pixels whose features all die under ReLU would otherwise tie at 0.5
    let head_bias = params.params.iter().position(|p| p.name == "head.bias").unwrap();
    params.params[head_bias].value = normal(&[2], &mut r);
    let image = random_image(8, 8, &mut r);
    let target = random_labels(8, 8, 2, &mut r);
    let loss_cfg = SpatialLossConfig { pairwise_reduction: Reduction::Mean, ..Default::default() };

    let mut t = Tape::new(seed);
    let bound = params.bind(&mut t, false);
    let x = t.constant(image.to_tensor());
    let out = unet::forward(&params, &bound, x, Mode::Train, &mut t).unwrap();
    if argmax_margin(t.value(out.probs)) < MARGIN {
        return None;
    }

    let mut results = Vec::new();
    for (idx, p) in params.params.iter().enumerate() {
        let feeds_bn = p.kind == ParamKind::Bias && !p.name.starts_with("head") && !p.name.contains(".up.");
        if !p.kind.trainable() || (cfg.use_batchnorm && feeds_bn) {
            continue;
        }
        let rep = grad_check(&p.value, GRAD_H, seed, |t, v| {
            let mut bound = params.bind(t, false);
            bound.vars[idx] = v;
            let x = t.constant(image.to_tensor());
            let out = unet::forward(&params, &bound, x, Mode::Train, t)?;
            Ok(total_loss(t, out.probs, &target, &image, &loss_cfg)?.total)
        })
        .unwrap();
        results.push((p.name.clone(), rep.max_rel_error));
    }
    Some(results)
}

// ---- property bodies (shared by proptest targets and the acceptance run) --

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use spatseg::spatial_loss::{brute_force_pairwise, neighbor_weights, pairwise_cost, pairwise_field, ConfidenceMap};

pub fn prop_conv(ci: usize, co: usize, h: usize, w: usize, k: usize, same: bool, seed: u64) -> Result<(), TestCaseError> {
    let mut r = rng(seed);
    let (x, kern, b) = (normal(&[ci, h, w], &mut r), normal(&[co, ci, k, k], &mut r), normal(&[co], &mut r));
    let mut t = Tape::new(0);
    let (xv, kv, bv) = (t.constant(x.clone()), t.constant(kern.clone()), t.constant(b.clone()));
    let pad = if same { Padding::Same } else { Padding::None };
    let y = t.conv2d(xv, kv, bv, pad).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let d = max_abs_diff(t.value(y).data(), &naive_conv(&x, &kern, &b, same));
    prop_assert!(d < 1e-12, "conv oracle diff {d:e}");
    Ok(())
}

pub fn prop_pool(c: usize, h2: usize, w2: usize, seed: u64) -> Result<(), TestCaseError> {
    let x = normal(&[c, 2 * h2, 2 * w2], &mut rng(seed));
    let mut t = Tape::new(0);
    let xv = t.constant(x.clone());
    let y = t.maxpool2x2(xv).unwrap();
    let want = naive_pool(&x);
    prop_assert_eq!(t.value(y).data(), want.as_slice());
    Ok(())
}

pub fn prop_upconv(ci: usize, co: usize, h: usize, w: usize, seed: u64) -> Result<(), TestCaseError> {
    let mut r = rng(seed);
    let (x, kern, b) = (normal(&[ci, h, w], &mut r), normal(&[ci, co, 2, 2], &mut r), normal(&[co], &mut r));
    let mut t = Tape::new(0);
    let (xv, kv, bv) = (t.constant(x.clone()), t.constant(kern.clone()), t.constant(b.clone()));
    let y = t.upconv2x2(xv, kv, bv).unwrap();
    let d = max_abs_diff(t.value(y).data(), &naive_upconv(&x, &kern, &b));
    prop_assert!(d < 1e-12, "upconv oracle diff {d:e}");
    Ok(())
}

pub fn prop_softmax(k: usize, h: usize, w: usize, scale: f64, seed: u64) -> Result<(), TestCaseError> {
    let mut z = normal(&[k, h, w], &mut rng(seed));
    z.data_mut().iter_mut().for_each(|v| *v *= scale);
    let mut t = Tape::new(0);
    let zv = t.constant(z);
    let p = t.softmax_channels(zv).unwrap();
    let p = t.value(p).data();
    let n = h * w;
    for i in 0..n {
        let s: f64 = (0..k).map(|c| p[c * n + i]).sum();
        prop_assert!((s - 1.0).abs() <= 1e-9, "pixel {i} sums to {s}");
        for c in 0..k {
            let v = p[c * n + i];
            prop_assert!(v > 0.0 && v < 1.0, "entry {v} outside (0,1)");
        }
    }
    Ok(())
}

/// `|psi| <= 1`, sign law, and agreement with the brute-force transcription.
pub fn prop_pairwise(h: usize, w: usize, k: u8, sigma: f64, seed: u64) -> Result<(), TestCaseError> {
    let mut r = rng(seed);
    let image = random_image(h, w, &mut r);
    let labels = random_labels(h, w, k, &mut r);
    let conf: Vec<f64> = (0..h * w).map(|_| r.random_range(0.0..=1.0)).collect();
    let cfg = SpatialLossConfig { sigma, ..Default::default() };
    let weights = neighbor_weights(&image, &labels, &cfg).unwrap();
    let psi = pairwise_cost(&weights, &ConfidenceMap { height: h, width: w, data: conf.clone() }).unwrap();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            prop_assert!(psi[i].abs() <= 1.0 + 1e-15, "psi {} out of bounds", psi[i]);
            let mut same = 0;
            let mut diff = 0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if (dy, dx) == (0, 0) || ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    if labels.get(ny as usize, nx as usize) == labels.data[i] { same += 1 } else { diff += 1 }
                }
            }
            if diff == 0 {
                prop_assert!(psi[i] <= 0.0);
            }
            if same == 0 {
                prop_assert!(psi[i] >= 0.0);
            }
        }
    }
    let fast: f64 = psi.iter().sum();
    let slow = brute_force_pairwise(&image, &labels, &conf, &cfg).unwrap();
    prop_assert!((fast - slow).abs() < 1e-12, "oracle {fast} vs {slow}");
    Ok(())
}

/// A parameter nudge that keeps every argmax leaves mu bit-identical.
pub fn prop_stop_gradient(seed: u64, delta: f64) -> Result<(), TestCaseError> {
    let cfg = UNetConfig { depth: 2, base_channels: 3, ..Default::default() };
    let params = init_params(&cfg, seed).unwrap();
    let mut r = rng(seed);
    let image = random_image(8, 8, &mut r);
    let loss_cfg = SpatialLossConfig::default();
    let field = |p: &spatseg::unet::ModelParams| {
        let (_, probs) = unet::predict(p, &image).unwrap();
        let t = Tensor::new(vec![probs.classes, probs.height, probs.width], probs.data.clone()).unwrap();
        pairwise_field(&t, &image, &loss_cfg).unwrap()
    };
    let (labels, base) = field(&params);
    let mut moved = params.clone();
    let idx = r.random_range(0..moved.params.len());
    let j = r.random_range(0..moved.params[idx].value.len());
    if !moved.params[idx].kind.trainable() {
        return Ok(());
    }
    moved.params[idx].value.data_mut()[j] += delta;
    let (labels2, after) = field(&moved);
    if labels != labels2 {
        return Ok(());
    }
    let bits = |f: &spatseg::spatial_loss::PairwiseField| f.weights.mu.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    prop_assert_eq!(bits(&base), bits(&after));
    Ok(())
}

pub fn conv_strategy() -> impl Strategy<Value = (usize, usize, usize, usize, usize, bool, u64)> {
    (1usize..=4, 1usize..=4, 3usize..=16, 3usize..=16, prop_oneof![Just(1usize), Just(3usize)], any::<bool>(), any::<u64>())
}

pub fn pool_strategy() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..=4, 1usize..=8, 1usize..=8, any::<u64>())
}

pub fn upconv_strategy() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    (1usize..=4, 1usize..=4, 1usize..=8, 1usize..=8, any::<u64>())
}

pub fn softmax_strategy() -> impl Strategy<Value = (usize, usize, usize, f64, u64)> {
    (2usize..=4, 1usize..=8, 1usize..=8, prop_oneof![Just(1.0), Just(3.0)], any::<u64>())
}

pub fn pairwise_strategy() -> impl Strategy<Value = (usize, usize, u8, f64, u64)> {
    (1usize..=8, 2usize..=8, 2u8..=3, 0.05f64..5.0, any::<u64>())
}

pub fn stop_gradient_strategy() -> impl Strategy<Value = (u64, f64)> {
    (any::<u64>(), prop_oneof![Just(1e-9), Just(1e-6), Just(-1e-7)])
}

// ---- signed-rank oracles ------------------------------------------------

use spatseg::wilcoxon::{wilcoxon_signed_rank, wilcoxon_with, WilcoxonMethod};

/// Average ranks of `|d|` by pairwise counting.
pub fn naive_ranks(d: &[f64]) -> Vec<f64> {
    d.iter()
        .map(|x| {
            let below = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let equal = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Two-sided p by listing every sign vector.
pub fn enumerated_p(d: &[f64]) -> f64 {
    let r = naive_ranks(d);
    let n = r.len();
    let total: f64 = r.iter().sum();
    let wp: f64 = r.iter().zip(d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let w = wp.min(total - wp);
    let mut hits = 0u64;
    for mask in 0u32..(1 << n) {
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| r[i]).sum();
        if s <= w + 1e-9 {
            hits += 1;
        }
    }
    (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0)
}

/// Every sign pattern of `magnitudes` against enumeration; returns the worst gap.
pub fn exact_vs_enumeration(magnitudes: &[f64]) -> f64 {
    let n = magnitudes.len();
    let mut worst = 0.0f64;
    for mask in 0u32..(1 << n) {
        let d: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { magnitudes[i] } else { -magnitudes[i] }).collect();
        let zeros = vec![0.0; n];
        let got = wilcoxon_with(&d, &zeros, Some(WilcoxonMethod::Exact)).unwrap().p_value;
        worst = worst.max((got - enumerated_p(&d)).abs());
    }
    worst
}

/// Differences for n = 10 whose negative ranks sum to `w`.
pub fn ten_pairs_with_w(w: u32) -> (Vec<f64>, Vec<f64>) {
    let mut neg = [false; 10];
    let mut left = w;
    for r in (1..=10u32).rev() {
        if r <= left {
            neg[r as usize - 1] = true;
            left -= r;
        }
    }
    assert_eq!(left, 0);
    let a: Vec<f64> = (1..=10).map(|r| if neg[r - 1] { -(r as f64) } else { r as f64 }).collect();
    (a, vec![0.0; 10])
}

/// Sample sets: (magnitudes) for n = 5..=12, distinct and tied.
pub fn wilcoxon_cases() -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for n in 5..=12usize {
        out.push((1..=n).map(|i| i as f64 * 0.125).collect());
        out.push((1..=n).map(|i| i.div_ceil(2) as f64 * 0.25).collect());
    }
    out
}

pub fn critical_values_n10() -> Vec<(u32, f64)> {
    [3u32, 4, 8, 9]
        .iter()
        .map(|&w| {
            let (a, b) = ten_pairs_with_w(w);
            (w, wilcoxon_signed_rank(&a, &b).unwrap().p_value)
        })
        .collect()
}

/// Largest |exact - normal| over random n = 20 samples.
pub fn exact_normal_gap_n20(trials: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..trials {
        let mut r = rng(seed);
        let shift = r.random_range(-0.5..0.5);
        let d: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0f64) + shift).collect();
        let z = vec![0.0; 20];
        let e = wilcoxon_with(&d, &z, Some(WilcoxonMethod::Exact)).unwrap().p_value;
        let a = wilcoxon_with(&d, &z, Some(WilcoxonMethod::NormalApproximation)).unwrap().p_value;
        worst = worst.max((e - a).abs());
    }
    worst
}

// ---- command-line helpers -------------------------------------------------

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn spatseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spatseg")).args(args).output().expect("spawn spatseg")
}

pub fn ok(args: &[&str]) -> Output {
    let out = spatseg(args);
    assert!(out.status.success(), "spatseg {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// 32x32 canvases with a few curves.
pub fn small_synth_config(dir: &Path) -> PathBuf {
    let path = dir.join("synth.json");
    std::fs::write(&path, r#"{"width": 32, "height": 32, "curves_per_image": {"min": 1, "max": 3}}"#).unwrap();
    path
}

/// Depth-2, base-2 model; `extra` is merged over the top level.
pub fn small_run_config(dir: &Path, name: &str, extra: serde_json::Value) -> PathBuf {
    let mut c = serde_json::json!({
        "model": {"depth": 2, "base_channels": 2},
        "epochs": 1,
        "log_wall_time": false,
        "optimizer": {"lr": 1e-3}
    });
    for (k, v) in extra.as_object().unwrap() {
        c[k] = v.clone();
    }
    let path = dir.join(name);
    std::fs::write(&path, c.to_string()).unwrap();
    path
}

/// Every file under `dir` (relative path -> bytes).
pub fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Generates and trains twice from the same config and seed; returns the
/// names of any outputs that differ.
pub fn rerun_differences(root: &Path) -> Vec<String> {
    let synth = small_synth_config(root);
    let run = small_run_config(root, "run.json", serde_json::json!({"epochs": 2, "seed": 11}));
    let mut trees = Vec::new();
    for k in 0..2 {
        let data = root.join(format!("data{k}"));
        let out = root.join(format!("out{k}"));
        ok(&["synthgen", "--out", p(&data), "--count", "6", "--seed", "5", "--config", p(&synth)]);
        ok(&["train", "--data", p(&data), "--out", p(&out), "--config", p(&run)]);
        let mut t = dir_bytes(&data);
        for (k, v) in dir_bytes(&out) {
            if k != "run_config.json" {
                t.insert(format!("train/{k}"), v);
            }
        }
        trees.push(t);
    }
    let mut diffs: Vec<String> = trees[0].iter().filter(|(k, v)| trees[1].get(*k) != Some(v)).map(|(k, _)| k.clone()).collect();
    diffs.extend(trees[1].keys().filter(|k| !trees[0].contains_key(*k)).cloned());
    diffs
}

// ---- pairwise oracle ------------------------------------------------------

use spatseg::spatial_loss::reduce;

const OFFSETS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Per-pixel psi by direct transcription of the neighbourhood sums.
pub fn naive_psi(image: &Image, labels: &LabelMap, conf: &[f64], sigma: f64) -> Vec<f64> {
    let (h, w) = (image.height as isize, image.width as isize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            let (mut num, mut den) = (0.0, 0.0);
            for (dy, dx) in OFFSETS {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h || nx >= w {
                    continue;
                }
                let j = (ny * w + nx) as usize;
                let d = image.data[i] - image.data[j];
                let g = (-d * d / (2.0 * sigma * sigma)).exp();
                let mu = if labels.data[i] == labels.data[j] { -g } else { g };
                num += mu * conf[i] * conf[j];
                den += g;
            }
            out.push(num / den);
        }
    }
    out
}

/// Largest |fast - oracle| over `instances` random problems up to 8x8, both
/// reductions, through the probability-tensor entry point as well.
pub fn pairwise_oracle_worst(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut r = rng(10_000 + seed);
        let (h, w) = (r.random_range(1..=8), r.random_range(2..=8));
        let k = r.random_range(2..=3usize);
        let sigma = r.random_range(0.1..2.0);
        let image = random_image(h, w, &mut r);
        let logits = normal(&[k, h, w], &mut r);
        let mut t = Tape::new(0);
        let lv = t.constant(logits);
        let pv = t.softmax_channels(lv).unwrap();
        let probs = t.value(pv).clone();
        let n = h * w;
        let labels = LabelMap::new(h, w, (0..n).map(|i| (0..k).max_by(|&a, &b| probs.data()[a * n + i].total_cmp(&probs.data()[b * n + i])).unwrap() as u8).collect()).unwrap();
        let conf: Vec<f64> = (0..n).map(|i| probs.data()[labels.data[i] as usize * n + i]).collect();
        let oracle = naive_psi(&image, &labels, &conf, sigma);
        for reduction in [Reduction::Sum, Reduction::Mean] {
            let cfg = SpatialLossConfig { sigma, pairwise_reduction: reduction, ..Default::default() };
            let (_, field) = pairwise_field(&probs, &image, &cfg).unwrap();
            worst = worst.max(max_abs_diff(&field.psi, &oracle));
            let want = match reduction {
                Reduction::Sum => oracle.iter().sum::<f64>(),
                Reduction::Mean => oracle.iter().sum::<f64>() / n as f64,
            };
            worst = worst.max((reduce(&field.psi, reduction) - want).abs());
            worst = worst.max((brute_force_pairwise(&image, &labels, &conf, &cfg).unwrap() - want).abs());
        }
    }
    worst
}

/// Uniform image with one class gives psi = -P^2 everywhere; a checkerboard
/// at P = 1 gives psi = 0 at interior pixels.
pub fn pairwise_closed_forms() -> Result<(), String> {
    let cfg = SpatialLossConfig::default();
    for (h, w, pv) in [(3, 3, 0.75), (5, 4, 0.5), (8, 8, 0.375)] {
        let image = Image::filled(h, w, 0.4);
        let labels = LabelMap::zeros(h, w);
        let weights = neighbor_weights(&image, &labels, &cfg).map_err(|e| e.to_string())?;
        let psi = pairwise_cost(&weights, &ConfidenceMap { height: h, width: w, data: vec![pv; h * w] }).map_err(|e| e.to_string())?;
        if let Some(v) = psi.iter().find(|v| **v != -(pv * pv)) {
            return Err(format!("uniform {h}x{w} P={pv}: psi {v} != {}", -(pv * pv)));
        }
    }
    for n in [3usize, 6, 8] {
        let image = Image::filled(n, n, 0.7);
        let labels = LabelMap::new(n, n, (0..n * n).map(|i| ((i / n + i % n) % 2) as u8).collect()).unwrap();
        let weights = neighbor_weights(&image, &labels, &cfg).map_err(|e| e.to_string())?;
        let psi = pairwise_cost(&weights, &ConfidenceMap { height: n, width: n, data: vec![1.0; n * n] }).map_err(|e| e.to_string())?;
        for y in 1..n - 1 {
            for x in 1..n - 1 {
                if psi[y * n + x] != 0.0 {
                    return Err(format!("checkerboard {n}x{n} at ({y},{x}): {}", psi[y * n + x]));
                }
            }
        }
    }
    Ok(())
}
