//! Differentiable operations: exactly the set the network needs.
//!
//! Convolutions use the cross-correlation convention (no kernel flip) and are
//! evaluated per sample via im2col plus the deterministic matmul from the
//! parent module. Naive loop references used to check these live in the test
//! tree, not here.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{matmul, matmul_at, matmul_bt, Mode, Tape, Tensor, TensorId};
use crate::error::{CoreError, Result};

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        s => Err(CoreError::ShapeMismatch(format!(
            "{what}: expected 4-d tensor, got {s:?}"
        ))),
    }
}

/// Output spatial size for a convolution; errors unless
/// `(in + 2·padding − kernel)` is a non-negative multiple of `stride`.
pub fn conv2d_output_dims(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(CoreError::InvalidArgument("stride must be >= 1".into()));
    }
    let padded = input + 2 * padding;
    if kernel == 0 || padded < kernel {
        return Err(CoreError::ShapeMismatch(format!(
            "conv2d kernel {kernel} larger than padded input {padded} \
             (input {input}, padding {padding})"
        )));
    }
    // floor convention: trailing cells that don't fit a full window are dropped
    Ok((padded - kernel) / stride + 1)
}

/// Gathers one sample's receptive fields into a (c_in·kh·kw) × (ho·wo) matrix.
fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let p = ho * wo;
    let mut cols = vec![0.0; c_in * kh * kw * p];
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = &x[(c * h + ii as usize) * w..(c * h + ii as usize + 1) * w];
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[oi * wo + oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatters column gradients back onto the input image (adjoint of im2col).
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let p = ho * wo;
    let mut x = vec![0.0; c_in * h * w];
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * h + ii as usize) * w..(c * h + ii as usize + 1) * w];
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution (cross-correlation), bias added per output channel.
///
/// input N×C_in×H×W, weights C_out×C_in×kh×kw, bias C_out.
pub fn conv2d(
    tape: &mut Tape,
    x: TensorId,
    w: TensorId,
    b: TensorId,
    stride: usize,
    padding: usize,
) -> Result<TensorId> {
    let (n, c_in, h, wid) = dims4(tape.value(x), "conv2d input")?;
    let (c_out, wc_in, kh, kw) = dims4(tape.value(w), "conv2d weights")?;
    if wc_in != c_in {
        return Err(CoreError::ShapeMismatch(format!(
            "conv2d: input has {c_in} channels, weights expect {wc_in}"
        )));
    }
    if tape.value(b).shape() != [c_out] {
        return Err(CoreError::ShapeMismatch(format!(
            "conv2d: bias shape {:?}, expected [{c_out}]",
            tape.value(b).shape()
        )));
    }
    let ho = conv2d_output_dims(h, kh, stride, padding)?;
    let wo = conv2d_output_dims(wid, kw, stride, padding)?;
    let p = ho * wo;
    let k2 = c_in * kh * kw;

    let mut out = vec![0.0; n * c_out * p];
    {
        let xv = tape.value(x).data();
        let wv = tape.value(w).data();
        let bv = tape.value(b).data();
        let sample = c_in * h * wid;
        for s in 0..n {
            let cols = im2col(
                &xv[s * sample..(s + 1) * sample],
                c_in,
                h,
                wid,
                kh,
                kw,
                stride,
                padding,
                ho,
                wo,
            );
            let res = matmul(wv, c_out, k2, &cols, p);
            let dst = &mut out[s * c_out * p..(s + 1) * c_out * p];
            for co in 0..c_out {
                let bias = bv[co];
                for q in 0..p {
                    dst[co * p + q] = res[co * p + q] + bias;
                }
            }
        }
    }

    let out = Tensor::new(vec![n, c_out, ho, wo], out);
    Ok(tape.push(
        out,
        Box::new(move |gout, tape| {
            let xv = tape.value(x).data();
            let wv = tape.value(w).data();
            let sample = c_in * h * wid;
            let mut gx = vec![0.0; n * sample];
            let mut gw = vec![0.0; c_out * k2];
            let mut gb = vec![0.0; c_out];
            for s in 0..n {
                let gout_s = &gout[s * c_out * p..(s + 1) * c_out * p];
                // cols are recomputed rather than saved; trades flops for memory
                let cols = im2col(
                    &xv[s * sample..(s + 1) * sample],
                    c_in,
                    h,
                    wid,
                    kh,
                    kw,
                    stride,
                    padding,
                    ho,
                    wo,
                );
                let gw_s = matmul_bt(gout_s, c_out, p, &cols, k2);
                for (d, v) in gw.iter_mut().zip(gw_s.iter()) {
                    *d += v;
                }
                let gcols = matmul_at(wv, c_out, k2, gout_s, p);
                let gx_s = col2im(&gcols, c_in, h, wid, kh, kw, stride, padding, ho, wo);
                gx[s * sample..(s + 1) * sample].copy_from_slice(&gx_s);
                for co in 0..c_out {
                    let mut acc = 0.0;
                    for q in 0..p {
                        acc += gout_s[co * p + q];
                    }
                    gb[co] += acc;
                }
            }
            vec![(x, gx), (w, gw), (b, gb)]
        }),
    ))
}

/// Affine map: input N×F_in, weights F_in×F_out, bias F_out.
pub fn dense(tape: &mut Tape, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
    let (n, f_in) = match tape.value(x).shape() {
        [n, f] => (*n, *f),
        s => {
            return Err(CoreError::ShapeMismatch(format!(
                "dense input: expected 2-d tensor, got {s:?}"
            )))
        }
    };
    let (wf_in, f_out) = match tape.value(w).shape() {
        [a, b] => (*a, *b),
        s => {
            return Err(CoreError::ShapeMismatch(format!(
                "dense weights: expected 2-d tensor, got {s:?}"
            )))
        }
    };
    if wf_in != f_in {
        return Err(CoreError::ShapeMismatch(format!(
            "dense: input features {f_in}, weights expect {wf_in}"
        )));
    }
    if tape.value(b).shape() != [f_out] {
        return Err(CoreError::ShapeMismatch(format!(
            "dense: bias shape {:?}, expected [{f_out}]",
            tape.value(b).shape()
        )));
    }

    let mut out = matmul(tape.value(x).data(), n, f_in, tape.value(w).data(), f_out);
    let bv = tape.value(b).data();
    for row in out.chunks_exact_mut(f_out) {
        for (o, &bias) in row.iter_mut().zip(bv.iter()) {
            *o += bias;
        }
    }

    Ok(tape.push(
        Tensor::new(vec![n, f_out], out),
        Box::new(move |gout, tape| {
            let xv = tape.value(x).data();
            let wv = tape.value(w).data();
            let gx = matmul_bt(gout, n, f_out, wv, f_in);
            let gw = matmul_at(xv, n, f_in, gout, f_out);
            let mut gb = vec![0.0; f_out];
            for row in gout.chunks_exact(f_out) {
                for (d, &g) in gb.iter_mut().zip(row.iter()) {
                    *d += g;
                }
            }
            vec![(x, gx), (w, gw), (b, gb)]
        }),
    ))
}

/// Elementwise max(0, x); subgradient 0 at exactly 0.
pub fn relu(tape: &mut Tape, x: TensorId) -> TensorId {
    let t = tape.value(x);
    let out = Tensor::new(
        t.shape().to_vec(),
        t.data().iter().map(|&v| v.max(0.0)).collect(),
    );
    tape.push(
        out,
        Box::new(move |gout, tape| {
            let xv = tape.value(x).data();
            let gx = gout
                .iter()
                .zip(xv.iter())
                .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                .collect();
            vec![(x, gx)]
        }),
    )
}

/// Block-mean pooling with a square window; `p` must divide H and W.
pub fn avg_pool2d(tape: &mut Tape, x: TensorId, p: usize) -> Result<TensorId> {
    let (n, c, h, w) = dims4(tape.value(x), "avg_pool2d input")?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(CoreError::ShapeMismatch(format!(
            "avg_pool2d: pool {p} must divide spatial dims {h}x{w}"
        )));
    }
    let (ho, wo) = (h / p, w / p);
    let inv = 1.0 / (p * p) as f64;
    let xv = tape.value(x).data();
    let mut out = vec![0.0; n * c * ho * wo];
    for img in 0..n * c {
        let src = &xv[img * h * w..(img + 1) * h * w];
        let dst = &mut out[img * ho * wo..(img + 1) * ho * wo];
        for oi in 0..ho {
            for oj in 0..wo {
                let mut acc = 0.0;
                for di in 0..p {
                    for dj in 0..p {
                        acc += src[(oi * p + di) * w + oj * p + dj];
                    }
                }
                dst[oi * wo + oj] = acc * inv;
            }
        }
    }
    Ok(tape.push(
        Tensor::new(vec![n, c, ho, wo], out),
        Box::new(move |gout, _| {
            let mut gx = vec![0.0; n * c * h * w];
            for img in 0..n * c {
                let gsrc = &gout[img * ho * wo..(img + 1) * ho * wo];
                let gdst = &mut gx[img * h * w..(img + 1) * h * w];
                for oi in 0..ho {
                    for oj in 0..wo {
                        let g = gsrc[oi * wo + oj] * inv;
                        for di in 0..p {
                            for dj in 0..p {
                                gdst[(oi * p + di) * w + oj * p + dj] = g;
                            }
                        }
                    }
                }
            }
            vec![(x, gx)]
        }),
    ))
}

/// N×C×H×W → N×(C·H·W). Pure reshape; backward reshapes the gradient.
pub fn flatten(tape: &mut Tape, x: TensorId) -> Result<TensorId> {
    let (n, c, h, w) = dims4(tape.value(x), "flatten input")?;
    let out = tape.value(x).reshape(vec![n, c * h * w])?;
    Ok(tape.push(out, Box::new(move |gout, _| vec![(x, gout.to_vec())])))
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by 1/(1−rate); eval mode is the identity.
pub fn dropout(
    tape: &mut Tape,
    x: TensorId,
    rate: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<TensorId> {
    if !(0.0..1.0).contains(&rate) {
        return Err(CoreError::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let t = tape.value(x);
    let scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..t.len())
        .map(|_| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                scale
            }
        })
        .collect();
    let out = Tensor::new(
        t.shape().to_vec(),
        t.data().iter().zip(mask.iter()).map(|(&v, &m)| v * m).collect(),
    );
    Ok(tape.push(
        out,
        Box::new(move |gout, _| {
            let gx = gout.iter().zip(mask.iter()).map(|(&g, &m)| g * m).collect();
            vec![(x, gx)]
        }),
    ))
}

/// Additive i.i.d. Gaussian noise in train mode; identity in eval mode.
/// The gradient passes through unchanged.
pub fn gaussian_noise(
    tape: &mut Tape,
    x: TensorId,
    sigma: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> TensorId {
    if mode == Mode::Eval || sigma == 0.0 {
        return x;
    }
    let t = tape.value(x);
    let out = Tensor::new(
        t.shape().to_vec(),
        t.data()
            .iter()
            .map(|&v| v + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    );
    tape.push(out, Box::new(move |gout, _| vec![(x, gout.to_vec())]))
}

/// Mean squared error against a constant target.
pub fn mse_loss(tape: &mut Tape, pred: TensorId, target: &Tensor) -> Result<TensorId> {
    let p = tape.value(pred);
    if p.len() != target.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "mse_loss: {} predictions vs {} targets",
            p.len(),
            target.len()
        )));
    }
    if p.is_empty() {
        return Err(CoreError::InvalidArgument("mse_loss on empty input".into()));
    }
    let n = p.len() as f64;
    let loss = p
        .data()
        .iter()
        .zip(target.data().iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let target = target.clone();
    Ok(tape.push(
        Tensor::scalar(loss),
        Box::new(move |gout, tape| {
            let g = gout[0];
            let pv = tape.value(pred).data();
            let gx = pv
                .iter()
                .zip(target.data().iter())
                .map(|(&a, &b)| g * 2.0 * (a - b) / n)
                .collect();
            vec![(pred, gx)]
        }),
    ))
}

/// Elementwise sum of two same-shape tensors.
pub fn add(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "add: {:?} vs {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    let out = Tensor::new(
        tape.value(a).shape().to_vec(),
        tape.value(a)
            .data()
            .iter()
            .zip(tape.value(b).data().iter())
            .map(|(&x, &y)| x + y)
            .collect(),
    );
    Ok(tape.push(
        out,
        Box::new(move |gout, _| vec![(a, gout.to_vec()), (b, gout.to_vec())]),
    ))
}
