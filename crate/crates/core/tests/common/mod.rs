//! Brute-force oracles, a finite-difference checker and random instance
//! generators shared by the integration suites.
#![allow(dead_code)]

use parsestack::hierarchy::{LabelHierarchy, LabelMap, Level};
use parsestack::metrics::AtrMetrics;
use parsestack::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<u16> {
    (0..n).map(|_| rng.gen_range(0..classes) as u16).collect()
}

pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize) -> LabelMap {
    LabelMap::new(h, w, random_labels(rng, h * w, classes)).unwrap()
}

// ---- oracles ---------------------------------------------------------------

/// Direct seven-loop convolution with zero padding.
pub fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for bn in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let sy = (y * stride + i) as isize - pad as isize;
                                let sx = (xx * stride + j) as isize - pad as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                let xi = ((bn * ci + c) * h + sy as usize) * wd + sx as usize;
                                let wi = ((o * ci + c) * kh + i) * kw + j;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out[((bn * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}

/// Window maximum; the first maximal element in row-major window order wins.
pub fn maxpool_oracle(x: &Tensor<f64>, k: usize, stride: usize) -> (Tensor<f64>, Vec<usize>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::new();
    let mut arg = Vec::new();
    for plane in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for i in 0..k {
                    for j in 0..k {
                        let idx = plane * h * w + (y * stride + i) * w + xx * stride + j;
                        if x.data()[idx] > best {
                            best = x.data()[idx];
                            at = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(at);
            }
        }
    }
    (Tensor::new(vec![n, c, oh, ow], out).unwrap(), arg)
}

/// Align-corners bilinear resize written as a sum over every source pixel
/// with the tent kernel `max(0, 1 − |s − i|)` per axis.
pub fn upsample_oracle(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let src = |o: usize, out: usize, inp: usize| {
        if out == 1 {
            0.0
        } else {
            o as f64 * (inp - 1) as f64 / (out - 1) as f64
        }
    };
    let tent = |d: f64| (1.0 - d.abs()).max(0.0);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for y in 0..oh {
            let sy = src(y, oh, h);
            for xx in 0..ow {
                let sx = src(xx, ow, w);
                let mut acc = 0.0;
                for i in 0..h {
                    let wy = tent(sy - i as f64);
                    if wy == 0.0 {
                        continue;
                    }
                    for j in 0..w {
                        let wx = tent(sx - j as f64);
                        if wx != 0.0 {
                            acc += wy * wx * x.data()[plane * h * w + i * w + j];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

/// Mean of `−log softmax(x)_y` over all pixels, from the definition.
pub fn ce_oracle(x: &Tensor<f64>, labels: &[u16]) -> f64 {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut total = 0.0;
    for b in 0..n {
        for p in 0..h * w {
            let at = |k: usize| x.data()[(b * c + k) * h * w + p];
            let z: f64 = (0..c).map(|k| at(k).exp()).sum();
            let y = labels[b * h * w + p] as usize;
            total += -(at(y).exp() / z).ln();
        }
    }
    total / (n * h * w) as f64
}

/// Mean IoU over classes present in groundtruth or prediction, by scanning
/// pixels once per class.
pub fn miou_oracle(pred: &[u16], gt: &[u16], classes: usize) -> f64 {
    let mut sum = 0.0;
    let mut present = 0;
    for k in 0..classes as u16 {
        let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == k && g == k).count();
        let union = pred.iter().zip(gt).filter(|(&p, &g)| p == k || g == k).count();
        if union > 0 {
            sum += inter as f64 / union as f64;
            present += 1;
        }
    }
    sum / present as f64
}

pub fn atr_oracle(pred: &[u16], gt: &[u16], classes: usize) -> AtrMetrics {
    let n = pred.len() as f64;
    let accuracy = pred.iter().zip(gt).filter(|(p, g)| p == g).count() as f64 / n;
    let fg: Vec<(u16, u16)> = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| g != 0)
        .map(|(&p, &g)| (p, g))
        .collect();
    let fg_accuracy =
        (!fg.is_empty()).then(|| fg.iter().filter(|(p, g)| p == g).count() as f64 / fg.len() as f64);
    let (mut ps, mut rs, mut fs, mut m) = (0.0, 0.0, 0.0, 0);
    for k in 1..classes as u16 {
        let tp = pred.iter().zip(gt).filter(|(&p, &g)| p == k && g == k).count() as f64;
        let np = pred.iter().filter(|&&p| p == k).count() as f64;
        let ng = gt.iter().filter(|&&g| g == k).count() as f64;
        if np == 0.0 && ng == 0.0 {
            continue;
        }
        let p = if np > 0.0 { tp / np } else { 0.0 };
        let r = if ng > 0.0 { tp / ng } else { 0.0 };
        ps += p;
        rs += r;
        fs += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        m += 1;
    }
    let avg = |s: f64| (m > 0).then(|| s / m as f64);
    AtrMetrics {
        accuracy,
        fg_accuracy,
        avg_precision: avg(ps),
        avg_recall: avg(rs),
        avg_f1: avg(fs),
    }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- finite differences ----------------------------------------------------

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-7;
pub const FD_TOL: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Largest relative error between backprop and central differences of
/// `Σ coeffs · f(inputs)` with respect to every element of every input.
/// `f` records the op under test on the tape; non-scalar outputs are reduced
/// with fixed random coefficients.
pub fn gradient_error(
    inputs: &[Tensor<f64>],
    seed: u64,
    f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let eval = |vals: &[Tensor<f64>], coeffs: &mut Option<Vec<f64>>, grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| tape.leaf(&t.clone().with_grad()))
            .collect();
        let out = f(&mut tape, &vars);
        let n = tape.value(out).len();
        let c = coeffs.get_or_insert_with(|| {
            let mut r = rng(seed ^ 0x5eed);
            (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
        });
        let loss = tape.dot(out, c).unwrap();
        let value = tape.scalar(loss);
        let grads = if grad {
            tape.backward(loss).unwrap();
            vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };
    let mut coeffs = None;
    let (_, analytic) = eval(inputs, &mut coeffs, true);
    let mut worst = 0.0f64;
    let mut vals = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            vals[i].data_mut()[j] = orig + FD_STEP;
            let (plus, _) = eval(&vals, &mut coeffs, false);
            vals[i].data_mut()[j] = orig - FD_STEP;
            let (minus, _) = eval(&vals, &mut coeffs, false);
            vals[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

/// Smallest gap between distinct-position values within any pooling window.
pub fn min_window_gap(x: &Tensor<f64>, k: usize, stride: usize) -> f64 {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut gap = f64::INFINITY;
    for plane in 0..n * c {
        for y in 0..(h - k) / stride + 1 {
            for xx in 0..(w - k) / stride + 1 {
                let mut vals: Vec<f64> = (0..k * k)
                    .map(|t| x.data()[plane * h * w + (y * stride + t / k) * w + xx * stride + t % k])
                    .collect();
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                for p in vals.windows(2) {
                    gap = gap.min(p[1] - p[0]);
                }
            }
        }
    }
    gap
}

// ---- random hierarchies ----------------------------------------------------

/// A valid random taxonomy with 1–4 levels and up to 12 finest classes.
pub fn random_hierarchy(rng: &mut ChaCha8Rng) -> LabelHierarchy {
    let levels = rng.gen_range(1..=4);
    let mut counts = vec![rng.gen_range(2..=12usize)];
    for _ in 1..levels {
        let finer = *counts.last().unwrap();
        counts.push(rng.gen_range(1..=finer));
    }
    counts.reverse();
    let mut out = Vec::with_capacity(levels);
    for (k, &count) in counts.iter().enumerate() {
        let merge = (k + 1 < levels).then(|| {
            let finer = counts[k + 1];
            let mut map = vec![0u16; finer];
            // a random surjection fixing background
            let mut order: Vec<usize> = (1..finer).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            for (t, &src) in order.iter().enumerate() {
                map[src] = if t + 1 < count {
                    (t + 1) as u16
                } else {
                    rng.gen_range(0..count) as u16
                };
            }
            map
        });
        let class_names = (0..count)
            .map(|c| {
                if c == 0 {
                    "background".to_string()
                } else {
                    format!("l{k}c{c}")
                }
            })
            .collect();
        out.push(Level {
            name: format!("level{k}"),
            class_names,
            merge_from_finer: merge,
        });
    }
    LabelHierarchy::new(out).expect("generator builds valid hierarchies")
}

pub mod suites;
