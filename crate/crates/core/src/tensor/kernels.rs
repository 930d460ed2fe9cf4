//! Forward and backward kernels on raw row-major buffers.
//!
//! The tape calls these; the test suites compare them against direct-loop
//! references.

use super::{dims4, kernel_threads, Element};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [batch, in_channels, height, width] = dims4("conv2d", input)?;
        let [out_channels, w_in, kernel_h, kernel_w] = dims4("conv2d", weight)?;
        if w_in != in_channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: weight.to_vec(),
            });
        }
        if bias != [out_channels] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: weight.to_vec(),
                right: bias.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if height + 2 * padding < kernel_h || width + 2 * padding < kernel_w {
            return Err(Error::ShapeMismatch {
                op: "conv2d (kernel larger than padded input)",
                left: input.to_vec(),
                right: weight.to_vec(),
            });
        }
        Ok(Conv2dGeometry {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel_h) / stride + 1,
            out_w: (width + 2 * padding - kernel_w) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_sample(&self) -> usize {
        self.out_channels * self.positions()
    }

    /// A 1×1 kernel with unit stride and no padding reads the input as-is.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Element>(g: &Conv2dGeometry, x: &[T], cols: &mut [T]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Element>(g: &Conv2dGeometry, cols: &[T], dx: &mut [T]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Splits `0..batch` into at most `kernel_threads()` contiguous chunks.
fn batch_chunks(batch: usize) -> Vec<std::ops::Range<usize>> {
    let threads = kernel_threads().min(batch).max(1);
    let per = batch.div_ceil(threads);
    (0..threads)
        .map(|t| t * per..((t + 1) * per).min(batch))
        .filter(|r| !r.is_empty())
        .collect()
}

fn conv_forward_samples<T: Element>(
    g: &Conv2dGeometry,
    input: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let (k, p) = (g.patch_len(), g.positions());
    let samples = out.len() / g.out_sample();
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for n in 0..samples {
        let x = &input[n * g.in_sample()..(n + 1) * g.in_sample()];
        let y = &mut out[n * g.out_sample()..(n + 1) * g.out_sample()];
        for (co, row) in y.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[co]);
        }
        let cols_ref: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut cols);
            &cols
        };
        T::gemm(
            g.out_channels,
            k,
            p,
            T::one(),
            weight,
            (k as isize, 1),
            cols_ref,
            (p as isize, 1),
            T::one(),
            y,
            (p as isize, 1),
        );
    }
}

/// Cross-correlation of `input` (N×Cin×H×W) with `weight` (Cout×Cin×kh×kw).
pub fn conv2d_forward<T: Element>(
    g: &Conv2dGeometry,
    input: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_sample()];
    let chunks = batch_chunks(g.batch);
    if chunks.len() <= 1 {
        conv_forward_samples(g, input, weight, bias, &mut out);
        return out;
    }
    std::thread::scope(|s| {
        let mut rest = out.as_mut_slice();
        for r in &chunks {
            let (head, tail) = rest.split_at_mut(r.len() * g.out_sample());
            rest = tail;
            let x = &input[r.start * g.in_sample()..r.end * g.in_sample()];
            s.spawn(move || conv_forward_samples(g, x, weight, bias, head));
        }
    });
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

fn conv_backward_samples<T: Element>(
    g: &Conv2dGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    mut dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
) {
    let (k, p) = (g.patch_len(), g.positions());
    let samples = grad_out.len() / g.out_sample();
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let mut dcols = if dx.is_some() && !g.is_pointwise() {
        vec![T::zero(); k * p]
    } else {
        Vec::new()
    };
    for n in 0..samples {
        let x = &input[n * g.in_sample()..(n + 1) * g.in_sample()];
        let dy = &grad_out[n * g.out_sample()..(n + 1) * g.out_sample()];
        for (co, row) in dy.chunks(p).enumerate() {
            db[co] = db[co] + row.iter().fold(T::zero(), |a, &b| a + b);
        }
        let cols_ref: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        T::gemm(
            g.out_channels,
            p,
            k,
            T::one(),
            dy,
            (p as isize, 1),
            cols_ref,
            (1, p as isize),
            T::one(),
            dw,
            (k as isize, 1),
        );
        if let Some(dx) = dx.as_deref_mut() {
            let dx_n = &mut dx[n * g.in_sample()..(n + 1) * g.in_sample()];
            if g.is_pointwise() {
                // dX = Wᵀ · dY directly
                T::gemm(
                    k,
                    g.out_channels,
                    p,
                    T::one(),
                    weight,
                    (1, k as isize),
                    dy,
                    (p as isize, 1),
                    T::one(),
                    dx_n,
                    (p as isize, 1),
                );
            } else {
                T::gemm(
                    k,
                    g.out_channels,
                    p,
                    T::one(),
                    weight,
                    (1, k as isize),
                    dy,
                    (p as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (p as isize, 1),
                );
                col2im_add(g, &dcols, dx_n);
            }
        }
    }
}

/// Gradients of a convolution with respect to input (optional), weight and bias.
pub fn conv2d_backward<T: Element>(
    g: &Conv2dGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let wlen = g.out_channels * g.patch_len();
    let mut dx = need_input.then(|| vec![T::zero(); g.batch * g.in_sample()]);
    let chunks = batch_chunks(g.batch);
    if chunks.len() <= 1 {
        let mut dw = vec![T::zero(); wlen];
        let mut db = vec![T::zero(); g.out_channels];
        conv_backward_samples(
            g,
            input,
            weight,
            grad_out,
            dx.as_deref_mut(),
            &mut dw,
            &mut db,
        );
        return ConvGrads {
            input: dx,
            weight: dw,
            bias: db,
        };
    }
    let mut partials: Vec<(Vec<T>, Vec<T>)> = chunks
        .iter()
        .map(|_| (vec![T::zero(); wlen], vec![T::zero(); g.out_channels]))
        .collect();
    std::thread::scope(|s| {
        let mut rest = dx.as_deref_mut();
        for (r, (dw, db)) in chunks.iter().zip(partials.iter_mut()) {
            let part = match rest.take() {
                Some(buf) => {
                    let (head, tail) = buf.split_at_mut(r.len() * g.in_sample());
                    rest = Some(tail);
                    Some(head)
                }
                None => None,
            };
            let x = &input[r.start * g.in_sample()..r.end * g.in_sample()];
            let dy = &grad_out[r.start * g.out_sample()..r.end * g.out_sample()];
            s.spawn(move || conv_backward_samples(g, x, weight, dy, part, dw, db));
        }
    });
    // reduce in chunk order
    let mut iter = partials.into_iter();
    let (mut dw, mut db) = iter.next().expect("at least one chunk");
    for (pw, pb) in iter {
        dw.iter_mut().zip(pw).for_each(|(a, b)| *a = *a + b);
        db.iter_mut().zip(pb).for_each(|(a, b)| *a = *a + b);
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(input: &[usize], window: usize, stride: usize) -> Result<Self> {
        let [batch, channels, height, width] = dims4("maxpool2d", input)?;
        if window == 0 || stride == 0 {
            return Err(Error::invalid(
                "maxpool2d",
                "window and stride must be positive",
            ));
        }
        if height < window || width < window {
            return Err(Error::invalid(
                "maxpool2d",
                format!("window {window} larger than spatial extent {height}x{width}"),
            ));
        }
        Ok(PoolGeometry {
            batch,
            channels,
            height,
            width,
            window,
            stride,
            out_h: (height - window) / stride + 1,
            out_w: (width - window) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.channels, self.out_h, self.out_w]
    }
}

/// Returns the pooled values and, per output, the flat input index of the
/// first maximum in row-major window order.
pub fn maxpool2d_forward<T: Element>(g: &PoolGeometry, input: &[T]) -> (Vec<T>, Vec<usize>) {
    let planes = g.batch * g.channels;
    let mut out = Vec::with_capacity(planes * g.out_h * g.out_w);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..planes {
        let base = plane * g.height * g.width;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best_i = base + oy * g.stride * g.width + ox * g.stride;
                let mut best = input[best_i];
                for ky in 0..g.window {
                    for kx in 0..g.window {
                        let i = base + (oy * g.stride + ky) * g.width + ox * g.stride + kx;
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2d_backward<T: Element>(
    input_len: usize,
    argmax: &[usize],
    grad_out: &[T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        dx[i] = dx[i] + g;
    }
    dx
}

/// Per target index: the two source indices and the weight of the second.
///
/// Align-corners convention: `src = dst · (in − 1)/(out − 1)`, with the ratio
/// taken as 0 when `out == 1`.
pub fn upsample_coefficients(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = if out_len > 1 {
        (in_len - 1) as f64 / (out_len - 1) as f64
    } else {
        0.0
    };
    (0..out_len)
        .map(|i| {
            let src = i as f64 * scale;
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear_forward<T: Element>(
    input: &[T],
    shape: [usize; 4],
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let [n, c, h, w] = shape;
    if (h, w) == (out_h, out_w) {
        return input.to_vec();
    }
    let ys = upsample_coefficients(h, out_h);
    let xs: Vec<(usize, usize, T)> = upsample_coefficients(w, out_w)
        .into_iter()
        .map(|(a, b, f)| (a, b, T::from_f64_lossy(f)))
        .collect();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in input.chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            let fy = T::from_f64_lossy(fy);
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for &(x0, x1, fx) in &xs {
                let top = r0[x0] * (T::one() - fx) + r0[x1] * fx;
                let bot = r1[x0] * (T::one() - fx) + r1[x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward<T: Element>(
    grad_out: &[T],
    shape: [usize; 4],
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let [n, c, h, w] = shape;
    if (h, w) == (out_h, out_w) {
        return grad_out.to_vec();
    }
    let ys = upsample_coefficients(h, out_h);
    let xs: Vec<(usize, usize, T)> = upsample_coefficients(w, out_w)
        .into_iter()
        .map(|(a, b, f)| (a, b, T::from_f64_lossy(f)))
        .collect();
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, go) in dx.chunks_mut(h * w).zip(grad_out.chunks(out_h * out_w)) {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = go[oy * out_w + ox];
                let top = g * (T::one() - fy);
                let bot = g * fy;
                plane[y0 * w + x0] = plane[y0 * w + x0] + top * (T::one() - fx);
                plane[y0 * w + x1] = plane[y0 * w + x1] + top * fx;
                plane[y1 * w + x0] = plane[y1 * w + x0] + bot * (T::one() - fx);
                plane[y1 * w + x1] = plane[y1 * w + x1] + bot * fx;
            }
        }
    }
    dx
}

/// Softmax over the channel axis of an N×C×H×W buffer.
pub fn softmax_channels<T: Element>(input: &[T], shape: [usize; 4]) -> Vec<T> {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let mut out = vec![T::zero(); input.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let max = (0..c)
                .map(|k| input[base + k * hw + p])
                .fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for k in 0..c {
                let e = (input[base + k * hw + p] - max).exp();
                out[base + k * hw + p] = e;
                sum = sum + e;
            }
            for k in 0..c {
                out[base + k * hw + p] = out[base + k * hw + p] / sum;
            }
        }
    }
    out
}

#[derive(Debug)]
pub struct CrossEntropy<T> {
    pub loss: T,
    pub probs: Vec<T>,
    pub count: usize,
}

/// Mean pixel-wise cross-entropy over non-ignored labels.
pub fn softmax_cross_entropy_forward<T: Element>(
    logits: &[T],
    shape: [usize; 4],
    labels: &[u16],
    ignore_index: Option<u16>,
) -> Result<CrossEntropy<T>> {
    let [n, c, h, w] = shape;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy labels",
            left: shape.to_vec(),
            right: vec![labels.len()],
        });
    }
    for (i, &l) in labels.iter().enumerate() {
        if Some(l) != ignore_index && l as usize >= c {
            return Err(Error::LabelOutOfRange {
                value: l,
                classes: c,
                position: vec![i / hw, (i % hw) / w, i % w],
            });
        }
    }
    let probs = softmax_channels(logits, shape);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if Some(l) == ignore_index {
            continue;
        }
        let (b, p) = (i / hw, i % hw);
        let base = b * c * hw;
        let max = (0..c)
            .map(|k| logits[base + k * hw + p])
            .fold(T::neg_infinity(), T::max);
        let lse = (0..c)
            .map(|k| (logits[base + k * hw + p] - max).exp())
            .fold(T::zero(), |a, e| a + e)
            .ln()
            + max;
        total += (lse - logits[base + l as usize * hw + p]).as_f64();
        count += 1;
    }
    let loss = if count == 0 {
        T::zero()
    } else {
        T::from_f64_lossy(total / count as f64)
    };
    Ok(CrossEntropy { loss, probs, count })
}
