//! Randomised property suites, each returning per-check statistics so both the
//! focused test files and the acceptance gate can report on them.

use parsestack::hierarchy::{expand_sample, LabelHierarchy, LabelMapSet};
use parsestack::metrics::{atr_metrics, confusion, consistency, miou};
use parsestack::net::{ArchMode, BlockSpec, EncoderConfig, NetConfig, ParserNet};
use parsestack::tensor::{maxpool2d_forward, PoolGeometry, Tape, Tensor, Var};
use parsestack::training::{hierarchical_loss, LevelTargets};
use rand::Rng;

use super::*;

#[derive(Debug, Clone)]
pub struct CheckStats {
    pub name: &'static str,
    pub instances: usize,
    /// Worst error seen (relative for gradients, absolute for oracles).
    pub worst: f64,
    pub failures: usize,
}

impl CheckStats {
    fn new(name: &'static str) -> Self {
        CheckStats {
            name,
            instances: 0,
            worst: 0.0,
            failures: 0,
        }
    }

    fn record(&mut self, err: f64, tol: f64) {
        self.instances += 1;
        self.worst = self.worst.max(if err.is_nan() { f64::INFINITY } else { err });
        if !(err < tol) && !(err == 0.0 && tol == 0.0) {
            self.failures += 1;
        }
    }

    fn record_bool(&mut self, ok: bool) {
        self.instances += 1;
        if !ok {
            self.failures += 1;
            self.worst = 1.0;
        }
    }
}

fn dims(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.gen_range(lo..=hi)
}

/// Input whose entries are at least `margin` away from zero.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let mut t = random_tensor(r, shape, 1.0);
    for v in t.data_mut() {
        while v.abs() < margin {
            *v = r.gen_range(-1.0..1.0);
        }
    }
    t
}

/// Input without near-ties inside any pooling window.
fn untied(r: &mut ChaCha8Rng, shape: &[usize], k: usize, s: usize) -> Tensor<f64> {
    loop {
        let t = random_tensor(r, shape, 1.0);
        if min_window_gap(&t, k, s) > 2e-3 {
            return t;
        }
    }
}

fn upsample_to(tape: &mut Tape<f64>, v: Var, h: usize, w: usize) -> Var {
    tape.upsample_bilinear(v, h, w).unwrap()
}

/// Finite-difference checks of every differentiable op (f64).
pub fn gradient_suite(per_op: usize) -> Vec<CheckStats> {
    let mut out = Vec::new();
    let mut run = |name: &'static str, make: &dyn Fn(u64) -> f64| {
        let mut st = CheckStats::new(name);
        for i in 0..per_op {
            st.record(make(1000 + i as u64), FD_TOL);
        }
        out.push(st);
    };

    run("conv2d", &|seed| {
        let mut r = rng(seed);
        let (n, ci, co) = (dims(&mut r, 1, 2), dims(&mut r, 1, 3), dims(&mut r, 1, 3));
        let (h, w) = (dims(&mut r, 3, 6), dims(&mut r, 3, 6));
        let k = dims(&mut r, 1, 3);
        let (stride, pad) = (dims(&mut r, 1, 2), dims(&mut r, 0, 1));
        let x = random_tensor(&mut r, &[n, ci, h, w], 1.0);
        let wt = random_tensor(&mut r, &[co, ci, k, k], 1.0);
        let b = random_tensor(&mut r, &[co], 1.0);
        gradient_error(&[x, wt, b], seed, &|t, v| t.conv2d(v[0], v[1], v[2], stride, pad).unwrap())
    });
    run("maxpool2d", &|seed| {
        let mut r = rng(seed);
        let (k, s) = if r.gen_bool(0.5) { (2, 2) } else { (3, 1) };
        let shape = [dims(&mut r, 1, 2), dims(&mut r, 1, 2), dims(&mut r, 4, 6), dims(&mut r, 4, 6)];
        let x = untied(&mut r, &shape, k, s);
        gradient_error(&[x], seed, &|t, v| t.maxpool2d(v[0], k, s).unwrap())
    });
    run("relu", &|seed| {
        let mut r = rng(seed);
        let x = away_from_zero(&mut r, &[2, 2, 3, 3], 1e-3);
        gradient_error(&[x], seed, &|t, v| t.relu(v[0]))
    });
    run("upsample_bilinear", &|seed| {
        let mut r = rng(seed);
        let (h, w) = (dims(&mut r, 1, 4), dims(&mut r, 1, 4));
        let (oh, ow) = (dims(&mut r, h, 7), dims(&mut r, w, 7));
        let n = dims(&mut r, 1, 2);
        let x = random_tensor(&mut r, &[n, 2, h, w], 1.0);
        gradient_error(&[x], seed, &|t, v| upsample_to(t, v[0], oh, ow))
    });
    run("concat_channels", &|seed| {
        let mut r = rng(seed);
        let (n, h, w) = (dims(&mut r, 1, 2), dims(&mut r, 1, 4), dims(&mut r, 1, 4));
        let parts: Vec<Tensor<f64>> = (0..dims(&mut r, 1, 3))
            .map(|_| {
                let c = dims(&mut r, 1, 3);
                random_tensor(&mut r, &[n, c, h, w], 1.0)
            })
            .collect();
        gradient_error(&parts, seed, &|t, v| t.concat_channels(v).unwrap())
    });
    run("softmax_channels", &|seed| {
        let mut r = rng(seed);
        let (n, c) = (dims(&mut r, 1, 2), dims(&mut r, 2, 5));
        let x = random_tensor(&mut r, &[n, c, 2, 3], 2.0);
        gradient_error(&[x], seed, &|t, v| t.softmax_channels(v[0]).unwrap())
    });
    run("softmax_cross_entropy", &|seed| {
        let mut r = rng(seed);
        let (n, c, h, w) = (dims(&mut r, 1, 2), dims(&mut r, 2, 6), dims(&mut r, 1, 4), dims(&mut r, 1, 4));
        let x = random_tensor(&mut r, &[n, c, h, w], 3.0);
        let labels = random_labels(&mut r, n * h * w, c);
        gradient_error(&[x], seed, &|t, v| t.softmax_cross_entropy(v[0], &labels, None).unwrap())
    });
    run("sum", &|seed| {
        let mut r = rng(seed);
        let w = dims(&mut r, 1, 4);
        let x = random_tensor(&mut r, &[1, 2, 3, w], 1.0);
        gradient_error(&[x], seed, &|t, v| t.sum(v[0]))
    });
    run("dot", &|seed| {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[2, 3, 2, 2], 1.0);
        let c: Vec<f64> = (0..24).map(|_| r.gen_range(-2.0..2.0)).collect();
        gradient_error(&[x], seed, &|t, v| t.dot(v[0], &c).unwrap())
    });
    run("mul", &|seed| {
        let mut r = rng(seed);
        let shape = [1, dims(&mut r, 1, 3), 3, 3];
        let a = random_tensor(&mut r, &shape, 1.0);
        let b = random_tensor(&mut r, &shape, 1.0);
        gradient_error(&[a, b], seed, &|t, v| t.mul(v[0], v[1]).unwrap())
    });
    run("add", &|seed| {
        let mut r = rng(seed);
        let shape = [2, dims(&mut r, 1, 3), 2, 3];
        let a = random_tensor(&mut r, &shape, 1.0);
        let b = random_tensor(&mut r, &shape, 1.0);
        gradient_error(&[a, b], seed, &|t, v| t.add(v[0], v[1]).unwrap())
    });
    run("scale", &|seed| {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[1, 2, 3, 3], 1.0);
        let f = r.gen_range(-3.0..3.0);
        gradient_error(&[x], seed, &|t, v| t.scale(v[0], f))
    });
    run("conv_relu_pool_ce", &|seed| {
        // resample until no pre-activation or pooled value sits near a kink
        let mut r = rng(seed);
        loop {
            let x = random_tensor(&mut r, &[2, 2, 6, 6], 1.0);
            let wt = random_tensor(&mut r, &[3, 2, 3, 3], 0.5);
            let b = random_tensor(&mut r, &[3], 0.2);
            let z = conv_oracle(&x, &wt, &b, 1, 1);
            if z.data().iter().any(|v| v.abs() < 1e-3) {
                continue;
            }
            let relu = Tensor::new(
                z.shape().to_vec(),
                z.data().iter().map(|v| v.max(0.0)).collect(),
            )
            .unwrap();
            if !positive_values_untied(&relu, 2, 2, 2e-3) {
                continue;
            }
            let labels = random_labels(&mut r, 2 * 3 * 3, 3);
            return gradient_error(&[x, wt, b], seed, &|t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
                let y = t.relu(y);
                let y = t.maxpool2d(y, 2, 2).unwrap();
                t.softmax_cross_entropy(y, &labels, None).unwrap()
            });
        }
    });
    run("hierarchical_loss", &|seed| {
        let mut r = rng(seed);
        let classes = [3usize, 4, 5];
        let sizes = [(2usize, 2usize), (3, 3), (6, 6)];
        let inputs: Vec<Tensor<f64>> = classes
            .iter()
            .zip(sizes)
            .map(|(&c, (h, w))| random_tensor(&mut r, &[1, c, h, w], 2.0))
            .collect();
        let labels: Vec<Vec<u16>> = classes.iter().map(|&c| random_labels(&mut r, 36, c)).collect();
        let weights: Vec<f64> = (0..3).map(|_| r.gen_range(0.1..2.0)).collect();
        gradient_error(&inputs, seed, &|t, v| {
            let targets: Vec<LevelTargets> = labels
                .iter()
                .zip(classes)
                .map(|(l, c)| LevelTargets {
                    classes: c,
                    height: 6,
                    width: 6,
                    labels: l,
                })
                .collect();
            hierarchical_loss(t, v, &targets, &weights).unwrap().total
        })
    });
    out
}

fn positive_values_untied(x: &Tensor<f64>, k: usize, s: usize, gap: f64) -> bool {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    for plane in 0..n * c {
        for y in 0..(h - k) / s + 1 {
            for xx in 0..(w - k) / s + 1 {
                let mut vals: Vec<f64> = (0..k * k)
                    .map(|t| x.data()[plane * h * w + (y * s + t / k) * w + xx * s + t % k])
                    .filter(|&v| v > 0.0)
                    .collect();
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if vals.windows(2).any(|p| p[1] - p[0] < gap) {
                    return false;
                }
            }
        }
    }
    true
}

pub const ORACLE_TOL: f64 = 1e-12;

/// Library kernels against the brute-force oracles (f64).
pub fn oracle_suite(per_check: usize) -> Vec<CheckStats> {
    let mut conv = CheckStats::new("conv2d");
    let mut pool = CheckStats::new("maxpool2d");
    let mut up = CheckStats::new("upsample_bilinear");
    let mut ce = CheckStats::new("cross_entropy");
    let mut mi = CheckStats::new("miou");
    let mut atr = CheckStats::new("atr_metrics");
    for i in 0..per_check {
        let mut r = rng(50_000 + i as u64);

        let (n, ci, co) = (dims(&mut r, 1, 3), dims(&mut r, 1, 4), dims(&mut r, 1, 4));
        let (h, w) = (dims(&mut r, 1, 8), dims(&mut r, 1, 8));
        let k = dims(&mut r, 1, 3.min(h.min(w) + 2));
        let pad = dims(&mut r, 0, 1.min(k - 1 + usize::from(k == 1)));
        let stride = dims(&mut r, 1, 2);
        if h + 2 * pad >= k && w + 2 * pad >= k {
            let x = random_tensor(&mut r, &[n, ci, h, w], 2.0);
            let wt = random_tensor(&mut r, &[co, ci, k, k], 2.0);
            let b = random_tensor(&mut r, &[co], 1.0);
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
            let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
            let want = conv_oracle(&x, &wt, &b, stride, pad);
            let err = if tape.shape(y) == want.shape() {
                max_abs_diff(tape.value(y), want.data())
            } else {
                f64::INFINITY
            };
            conv.record(err, ORACLE_TOL);
        } else {
            conv.record(0.0, ORACLE_TOL);
        }

        let (pk, ps) = [(2, 2), (3, 1), (2, 1), (3, 2)][i % 4];
        let shape = [dims(&mut r, 1, 2), dims(&mut r, 1, 3), dims(&mut r, 3, 7), dims(&mut r, 3, 7)];
        // coarse grid so exact ties occur and exercise first-occurrence
        let mut x = random_tensor(&mut r, &shape, 1.0);
        x.data_mut().iter_mut().for_each(|v| *v = (*v * 4.0).round() / 4.0);
        let g = PoolGeometry::new(&shape, pk, ps).unwrap();
        let (got, arg) = maxpool2d_forward(&g, x.data());
        let (want, want_arg) = maxpool_oracle(&x, pk, ps);
        let err = if arg == want_arg {
            max_abs_diff(&got, want.data())
        } else {
            f64::INFINITY
        };
        pool.record(err, ORACLE_TOL);

        let (uh, uw) = (dims(&mut r, 1, 5), dims(&mut r, 1, 5));
        let (oh, ow) = (dims(&mut r, uh, 11), dims(&mut r, uw, 11));
        let (un, uc) = (dims(&mut r, 1, 2), dims(&mut r, 1, 3));
        let x = random_tensor(&mut r, &[un, uc, uh, uw], 3.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.upsample_bilinear(xv, oh, ow).unwrap();
        up.record(max_abs_diff(tape.value(y), upsample_oracle(&x, oh, ow).data()), ORACLE_TOL);

        let (n, c, h, w) = (dims(&mut r, 1, 3), dims(&mut r, 2, 11), dims(&mut r, 1, 5), dims(&mut r, 1, 5));
        let x = random_tensor(&mut r, &[n, c, h, w], 4.0);
        let labels = random_labels(&mut r, n * h * w, c);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let l = tape.softmax_cross_entropy(xv, &labels, None).unwrap();
        ce.record((tape.scalar(l) - ce_oracle(&x, &labels)).abs(), ORACLE_TOL);

        let classes = dims(&mut r, 2, 11);
        let (h, w) = (dims(&mut r, 1, 12), dims(&mut r, 1, 12));
        let gt = random_map(&mut r, h, w, classes);
        // correlated predictions so IoUs are neither all 0 nor all 1
        let mut pred = gt.clone();
        for v in pred.data.iter_mut() {
            if r.gen_bool(0.4) {
                *v = r.gen_range(0..classes) as u16;
            }
        }
        let cm = confusion(&pred, &gt, classes).unwrap();
        mi.record(
            (miou(&cm).unwrap() - miou_oracle(&pred.data, &gt.data, classes)).abs(),
            ORACLE_TOL,
        );
        let got = atr_metrics(&cm, 0).unwrap();
        let want = atr_oracle(&pred.data, &gt.data, classes);
        let pairs = [
            (Some(got.accuracy), Some(want.accuracy)),
            (got.fg_accuracy, want.fg_accuracy),
            (got.avg_precision, want.avg_precision),
            (got.avg_recall, want.avg_recall),
            (got.avg_f1, want.avg_f1),
        ];
        let err = pairs
            .iter()
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => (a - b).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            })
            .fold(0.0, f64::max);
        atr.record(err, ORACLE_TOL);
    }
    vec![conv, pool, up, ce, mi, atr]
}

/// Randomised taxonomies: merge composition, expansion, consistency and
/// text round-trip.
pub fn hierarchy_suite(cases: usize) -> Vec<CheckStats> {
    let mut compose = CheckStats::new("composition");
    let mut expand = CheckStats::new("expand_consistency");
    let mut cons = CheckStats::new("consistency_is_one");
    let mut text = CheckStats::new("hier_round_trip");
    for i in 0..cases {
        let mut r = rng(90_000 + i as u64);
        let h = random_hierarchy(&mut r);
        let t = h.num_levels();

        let mut ok = true;
        for target in 0..t {
            let mut chained: Vec<u16> = (0..h.num_classes(h.finest()) as u16).collect();
            for k in (target..h.finest()).rev() {
                let step = h.levels()[k].merge_from_finer.as_ref().unwrap();
                chained = chained.iter().map(|&c| step[c as usize]).collect();
            }
            ok &= h.composed_map(target).unwrap() == chained;
        }
        let a = r.gen_range(0..t);
        let b = r.gen_range(0..=a);
        let c = r.gen_range(0..=b);
        let ab = h.map_between(a, b).unwrap();
        let bc = h.map_between(b, c).unwrap();
        let via: Vec<u16> = ab.iter().map(|&x| bc[x as usize]).collect();
        ok &= h.map_between(a, c).unwrap() == via;
        compose.record_bool(ok);

        let (fh, fw) = (dims(&mut r, 1, 9), dims(&mut r, 1, 9));
        let fine = random_map(&mut r, fh, fw, h.num_classes(h.finest()));
        let set: LabelMapSet = expand_sample(&fine, &h).unwrap();
        let mut ok = set.validate(&h).is_ok() && set.maps[h.finest()] == fine;
        for k in 0..t {
            let map = h.composed_map(k).unwrap();
            ok &= set.maps[k]
                .data
                .iter()
                .zip(&fine.data)
                .all(|(&c, &f)| c == map[f as usize]);
        }
        expand.record_bool(ok);

        cons.record_bool(consistency(&set, &h) == 1.0);

        let back = LabelHierarchy::from_text(&h.to_text());
        text.record_bool(matches!(&back, Ok(b) if *b == h && b.hash() == h.hash()));
    }
    vec![compose, expand, cons, text]
}

fn grad_probe(net: &ParserNet<f64>, r: &mut ChaCha8Rng, weights: &[f64]) -> Vec<(String, f64)> {
    let h = net.hierarchy().clone();
    let (n, hh, ww) = (2, 16, 16);
    let image = random_tensor(r, &[n, 3, hh, ww], 1.0);
    let labels: Vec<Vec<u16>> = (0..h.num_levels())
        .map(|k| random_labels(r, n * hh * ww, h.num_classes(k)))
        .collect();
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let x = tape.constant(image);
    let scores = net.forward(&mut tape, &bound, x).unwrap();
    let targets: Vec<LevelTargets> = labels
        .iter()
        .enumerate()
        .map(|(k, l)| LevelTargets {
            classes: h.num_classes(k),
            height: hh,
            width: ww,
            labels: l,
        })
        .collect();
    let loss = hierarchical_loss(&mut tape, &scores, &targets, weights).unwrap();
    tape.backward(loss.total).unwrap();
    net.params()
        .iter()
        .zip(bound.vars())
        .map(|(p, &v)| (p.name.clone(), tape.grad(v).unwrap().iter().map(|g| g * g).sum()))
        .collect()
}

/// Level that exclusively owns a parameter, if any.
fn owner_level(name: &str) -> Option<usize> {
    let digits = |s: &str| s.chars().take_while(char::is_ascii_digit).collect::<String>().parse().ok();
    if let Some(rest) = name.strip_prefix("net") {
        return digits(rest);
    }
    name.strip_prefix("head").and_then(digits)
}

/// Gradient reach with all weights on, and isolation of finer heads under
/// one-hot weights, over random stacked networks.
pub fn isolation_suite(trials: usize) -> Vec<CheckStats> {
    let mut reach = CheckStats::new("gradient_reach");
    let mut iso = CheckStats::new("onehot_isolation");
    let mut r = rng(0x150);
    let modes = [ArchMode::StackFc, ArchMode::StackFcSkip, ArchMode::StackFull];
    for trial in 0..trials {
        let h = if trial % 2 == 0 {
            LabelHierarchy::geoscene()
        } else {
            LabelHierarchy::helen()
        };
        let enc = EncoderConfig {
            in_channels: 3,
            blocks: vec![
                BlockSpec { channels: 4, convs: 1, downsample: true },
                BlockSpec { channels: 6, convs: 1, downsample: true },
                BlockSpec { channels: 8, convs: 1, downsample: false },
            ],
        };
        let cfg = NetConfig::for_hierarchy(&h, enc, 5, 2);
        let mode = modes[trial % modes.len()];
        let net = ParserNet::<f64>::new(mode, cfg, h.clone(), r.gen()).unwrap();
        let t = h.num_levels();
        for (_, norm) in grad_probe(&net, &mut r, &vec![1.0; t]) {
            reach.record_bool(norm > 0.0);
        }
        for on in 0..t {
            let weights: Vec<f64> = (0..t).map(|k| if k == on { 1.0 } else { 0.0 }).collect();
            for (name, norm) in grad_probe(&net, &mut r, &weights) {
                match owner_level(&name) {
                    Some(s) if s > on => iso.record_bool(norm == 0.0),
                    _ => {}
                }
            }
        }
    }
    vec![reach, iso]
}
