//! The three per-layer passes plus activation helpers.

use crate::error::Error;
use crate::tensor::Tensor4;
use crate::workload::LayerShape;
use crate::Result;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Valid output-position range for one filter offset: all `p` with
/// `0 <= p*stride + off < limit`, clipped to `[0, count)`.
#[inline]
fn valid_range(count: usize, stride: usize, off: i64, limit: usize) -> (usize, usize) {
    let lo = if off >= 0 { 0 } else { (-off as usize).div_ceil(stride) };
    let hi = if (limit as i64) <= off {
        0
    } else {
        (((limit as i64 - off) as usize).div_ceil(stride)).min(count)
    };
    (lo.min(hi), hi)
}

fn check_forward_shapes(l: &LayerShape, x: &Tensor4, w: &Tensor4) -> Result<(usize, usize)> {
    let (ix, iy) = l.input_hw();
    if x.shape() != [l.n, l.c, ix, iy] {
        return Err(Error::ShapeMismatch(format!(
            "iacts {:?}, layer expects {:?}",
            x.shape(),
            [l.n, l.c, ix, iy]
        )));
    }
    if w.shape() != [l.k, l.c, l.r, l.s] {
        return Err(Error::ShapeMismatch(format!(
            "weights {:?}, layer expects {:?}",
            w.shape(),
            [l.k, l.c, l.r, l.s]
        )));
    }
    Ok((ix, iy))
}

/// Fill independent `[d2][d3]` planes of an output tensor, one closure call
/// per plane. The parallel and sequential paths run the identical closure per
/// plane, so results match bit-for-bit.
macro_rules! fill_planes {
    ($data:expr, $plane_len:expr, $seq:expr, $fill:expr) => {{
        #[cfg(feature = "parallel")]
        {
            if $seq {
                $data.chunks_mut($plane_len).enumerate().for_each($fill);
            } else {
                $data.par_chunks_mut($plane_len).enumerate().for_each($fill);
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = $seq;
            $data.chunks_mut($plane_len).enumerate().for_each($fill);
        }
    }};
}

fn conv_forward_impl(l: &LayerShape, x: &Tensor4, w: &Tensor4, seq: bool) -> Result<Tensor4> {
    let (ix, iy) = check_forward_shapes(l, x, w)?;
    let mut y = Tensor4::zeros([l.n, l.k, l.p, l.q]);
    let plane = l.p * l.q;
    let xd = x.data();
    let wd = w.data();
    let (n_, c_, k_, r_, s_, p_, q_, st, pad) =
        (l.n, l.c, l.k, l.r, l.s, l.p, l.q, l.stride, l.pad as i64);
    let _ = n_;
    let fill = |i: usize, out: &mut [f32]| {
        let (n, k) = (i / k_, i % k_);
        for c in 0..c_ {
            let xbase = (n * c_ + c) * ix * iy;
            for r in 0..r_ {
                let roff = r as i64 - pad;
                let (plo, phi) = valid_range(p_, st, roff, ix);
                for s in 0..s_ {
                    let wv = wd[((k * c_ + c) * r_ + r) * s_ + s];
                    if wv == 0.0 {
                        continue;
                    }
                    let soff = s as i64 - pad;
                    let (qlo, qhi) = valid_range(q_, st, soff, iy);
                    for p in plo..phi {
                        let xi = (p * st) as i64 + roff;
                        let xrow = xbase + xi as usize * iy;
                        let orow = p * q_;
                        for q in qlo..qhi {
                            let yi = (q * st) as i64 + soff;
                            out[orow + q] += wv * xd[xrow + yi as usize];
                        }
                    }
                }
            }
        }
    };
    fill_planes!(y.data_mut(), plane, seq, fill);
    Ok(y)
}

/// Forward pass: `y[n,k,p,q] = sum over c,r,s of w[k,c,r,s] * x[n,c,..]`.
/// FC layers are the degenerate R=S=P=Q=1 case of the same nest.
pub fn conv_forward(l: &LayerShape, x: &Tensor4, w: &Tensor4) -> Result<Tensor4> {
    conv_forward_impl(l, x, w, false)
}

/// Reference sequential path (also what the non-`parallel` build runs).
pub fn conv_forward_seq(l: &LayerShape, x: &Tensor4, w: &Tensor4) -> Result<Tensor4> {
    conv_forward_impl(l, x, w, true)
}

fn conv_backward_impl(l: &LayerShape, dy: &Tensor4, w: &Tensor4, seq: bool) -> Result<Tensor4> {
    let (ix, iy) = l.input_hw();
    if dy.shape() != [l.n, l.k, l.p, l.q] {
        return Err(Error::ShapeMismatch(format!(
            "oact gradient {:?}, layer expects {:?}",
            dy.shape(),
            [l.n, l.k, l.p, l.q]
        )));
    }
    if w.shape() != [l.k, l.c, l.r, l.s] {
        return Err(Error::ShapeMismatch(format!("weights {:?}", w.shape())));
    }
    let mut dx = Tensor4::zeros([l.n, l.c, ix, iy]);
    let plane = ix * iy;
    let dyd = dy.data();
    let wd = w.data();
    let (c_, k_, r_, s_, p_, q_, st, pad) =
        (l.c, l.k, l.r, l.s, l.p, l.q, l.stride, l.pad as i64);
    // Full convolution with the 180-degree rotated filters, written as a
    // scatter from each oact-gradient position through the filter taps.
    let fill = |i: usize, out: &mut [f32]| {
        let (n, c) = (i / c_, i % c_);
        for k in 0..k_ {
            let dybase = (n * k_ + k) * p_ * q_;
            for r in 0..r_ {
                let roff = r as i64 - pad;
                let (plo, phi) = valid_range(p_, st, roff, ix);
                for s in 0..s_ {
                    let wv = wd[((k * c_ + c) * r_ + r) * s_ + s];
                    if wv == 0.0 {
                        continue;
                    }
                    let soff = s as i64 - pad;
                    let (qlo, qhi) = valid_range(q_, st, soff, iy);
                    for p in plo..phi {
                        let xi = ((p * st) as i64 + roff) as usize;
                        let dyrow = dybase + p * q_;
                        let orow = xi * iy;
                        for q in qlo..qhi {
                            let yi = ((q * st) as i64 + soff) as usize;
                            out[orow + yi] += wv * dyd[dyrow + q];
                        }
                    }
                }
            }
        }
    };
    fill_planes!(dx.data_mut(), plane, seq, fill);
    Ok(dx)
}

/// Backward pass: gradient w.r.t. the input activations. For fc layers this
/// is the transposed-matrix product.
pub fn conv_backward(l: &LayerShape, dy: &Tensor4, w: &Tensor4) -> Result<Tensor4> {
    conv_backward_impl(l, dy, w, false)
}

pub fn conv_backward_seq(l: &LayerShape, dy: &Tensor4, w: &Tensor4) -> Result<Tensor4> {
    conv_backward_impl(l, dy, w, true)
}

fn weight_update_grad_impl(
    l: &LayerShape,
    x: &Tensor4,
    dy: &Tensor4,
    seq: bool,
) -> Result<Tensor4> {
    let (ix, iy) = l.input_hw();
    if x.shape() != [l.n, l.c, ix, iy] {
        return Err(Error::ShapeMismatch(format!(
            "iacts {:?}, layer expects {:?}",
            x.shape(),
            [l.n, l.c, ix, iy]
        )));
    }
    if dy.shape() != [l.n, l.k, l.p, l.q] {
        return Err(Error::ShapeMismatch(format!(
            "oact gradient {:?}, layer expects {:?}",
            dy.shape(),
            [l.n, l.k, l.p, l.q]
        )));
    }
    let mut dw = Tensor4::zeros([l.k, l.c, l.r, l.s]);
    let plane = l.r * l.s;
    let xd = x.data();
    let dyd = dy.data();
    let (n_, c_, k_, r_, s_, p_, q_, st, pad) =
        (l.n, l.c, l.k, l.r, l.s, l.p, l.q, l.stride, l.pad as i64);
    // Correlate iacts with the oact gradient, summed over the minibatch.
    let fill = |i: usize, out: &mut [f32]| {
        let (k, c) = (i / c_, i % c_);
        for r in 0..r_ {
            let roff = r as i64 - pad;
            let (plo, phi) = valid_range(p_, st, roff, ix);
            for s in 0..s_ {
                let soff = s as i64 - pad;
                let (qlo, qhi) = valid_range(q_, st, soff, iy);
                let mut acc = 0.0f32;
                for n in 0..n_ {
                    let xbase = (n * c_ + c) * ix * iy;
                    let dybase = (n * k_ + k) * p_ * q_;
                    for p in plo..phi {
                        let xi = ((p * st) as i64 + roff) as usize;
                        let xrow = xbase + xi * iy;
                        let dyrow = dybase + p * q_;
                        for q in qlo..qhi {
                            let yi = ((q * st) as i64 + soff) as usize;
                            acc += xd[xrow + yi] * dyd[dyrow + q];
                        }
                    }
                }
                out[r * s_ + s] = acc;
            }
        }
    };
    fill_planes!(dw.data_mut(), plane, seq, fill);
    Ok(dw)
}

/// Weight-update pass: gradient w.r.t. the weights.
pub fn weight_update_grad(l: &LayerShape, x: &Tensor4, dy: &Tensor4) -> Result<Tensor4> {
    weight_update_grad_impl(l, x, dy, false)
}

pub fn weight_update_grad_seq(l: &LayerShape, x: &Tensor4, dy: &Tensor4) -> Result<Tensor4> {
    weight_update_grad_impl(l, x, dy, true)
}

pub fn relu_inplace(t: &mut Tensor4) {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Mask the gradient by the post-ReLU activations.
pub fn relu_backward_inplace(dy: &mut Tensor4, y_post: &Tensor4) {
    debug_assert_eq!(dy.shape(), y_post.shape());
    for (g, &y) in dy.data_mut().iter_mut().zip(y_post.data()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Non-overlapping average pool (MAC-free pass-through).
pub fn avgpool_forward(x: &Tensor4, window: usize) -> Tensor4 {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / window, w / window);
    let mut y = Tensor4::zeros([n, c, oh, ow]);
    let inv = 1.0 / (window * window) as f32;
    for ni in 0..n {
        for ci in 0..c {
            for ph in 0..oh {
                for pw in 0..ow {
                    let mut acc = 0.0;
                    for dr in 0..window {
                        for dc in 0..window {
                            acc += x.at(ni, ci, ph * window + dr, pw * window + dc);
                        }
                    }
                    *y.at_mut(ni, ci, ph, pw) = acc * inv;
                }
            }
        }
    }
    y
}

pub fn avgpool_backward(dy: &Tensor4, window: usize, in_h: usize, in_w: usize) -> Tensor4 {
    let [n, c, oh, ow] = dy.shape();
    let mut dx = Tensor4::zeros([n, c, in_h, in_w]);
    let inv = 1.0 / (window * window) as f32;
    for ni in 0..n {
        for ci in 0..c {
            for ph in 0..oh {
                for pw in 0..ow {
                    let g = dy.at(ni, ci, ph, pw) * inv;
                    for dr in 0..window {
                        for dc in 0..window {
                            *dx.at_mut(ni, ci, ph * window + dr, pw * window + dc) = g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// logits (`(softmax - onehot) / N`). Logits are `[N][K][1][1]`.
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[u8]) -> (f32, Tensor4) {
    let [n, k, _, _] = logits.shape();
    assert_eq!(labels.len(), n, "one label per sample");
    let mut grad = Tensor4::zeros(logits.shape());
    let mut loss = 0.0f32;
    let inv_n = 1.0 / n as f32;
    for ni in 0..n {
        let row = &logits.data()[ni * k..(ni + 1) * k];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f32;
        for &v in row {
            denom += (v - max).exp();
        }
        let label = labels[ni] as usize;
        loss -= (row[label] - max) - denom.ln();
        for ki in 0..k {
            let p = (row[ki] - max).exp() / denom;
            let target = if ki == label { 1.0 } else { 0.0 };
            *grad.at_mut(ni, ki, 0, 0) = (p - target) * inv_n;
        }
    }
    (loss * inv_n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShift64;
    use crate::workload::LayerShape;

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor4 {
        let mut rng = XorShift64::new(seed);
        let mut t = Tensor4::zeros(shape);
        for v in t.data_mut() {
            *v = rng.range_f32(-1.0, 1.0);
        }
        t
    }

    /// Naive seven-loop evaluator straight off the loop-nest definition;
    /// deliberately independent of the production pass structure.
    fn naive_forward(l: &LayerShape, x: &Tensor4, w: &Tensor4) -> Tensor4 {
        let (ix, iy) = l.input_hw();
        let mut y = Tensor4::zeros([l.n, l.k, l.p, l.q]);
        for n in 0..l.n {
            for r in 0..l.r {
                for s in 0..l.s {
                    for p in 0..l.p {
                        for q in 0..l.q {
                            for c in 0..l.c {
                                for k in 0..l.k {
                                    let xi = (p * l.stride + r) as i64 - l.pad as i64;
                                    let yi = (q * l.stride + s) as i64 - l.pad as i64;
                                    if xi < 0 || yi < 0 || xi >= ix as i64 || yi >= iy as i64 {
                                        continue;
                                    }
                                    *y.at_mut(n, k, p, q) += w.at(k, c, r, s)
                                        * x.at(n, c, xi as usize, yi as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let l = LayerShape::conv(2, 1, 1, 1, 1, 4, 4, 1, 0).unwrap();
        let x = random_tensor([2, 1, 4, 4], 1);
        let w = Tensor4::from_vec([1, 1, 1, 1], vec![1.0]);
        let y = conv_forward(&l, &x, &w).unwrap();
        assert_eq!(y, x);
        let dy = random_tensor([2, 1, 4, 4], 2);
        let dx = conv_backward(&l, &dy, &w).unwrap();
        assert_eq!(dx, dy);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let l = LayerShape::conv(1, 2, 3, 3, 3, 5, 5, 1, 1).unwrap();
        let x = random_tensor([1, 2, 5, 5], 3);
        let w = Tensor4::zeros([3, 2, 3, 3]);
        let y = conv_forward(&l, &x, &w).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_naive_loop_nest() {
        for (i, l) in [
            LayerShape::conv(2, 3, 4, 3, 3, 5, 5, 1, 1).unwrap(),
            LayerShape::conv(2, 2, 3, 3, 3, 3, 3, 2, 1).unwrap(),
            LayerShape::conv(1, 4, 2, 2, 2, 2, 2, 2, 0).unwrap(),
            LayerShape::conv(3, 1, 2, 1, 1, 4, 4, 1, 0).unwrap(),
            LayerShape::fc(2, 6, 3).unwrap(),
        ]
        .iter()
        .enumerate()
        {
            let (ix, iy) = l.input_hw();
            let x = random_tensor([l.n, l.c, ix, iy], 100 + i as u64);
            let w = random_tensor([l.k, l.c, l.r, l.s], 200 + i as u64);
            let got = conv_forward(l, &x, &w).unwrap();
            let want = naive_forward(l, &x, &w);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn parallel_and_sequential_paths_are_bit_identical() {
        let l = LayerShape::conv(3, 4, 5, 3, 3, 6, 6, 1, 1).unwrap();
        let (ix, iy) = l.input_hw();
        let x = random_tensor([l.n, l.c, ix, iy], 7);
        let w = random_tensor([l.k, l.c, l.r, l.s], 8);
        let y_par = conv_forward(&l, &x, &w).unwrap();
        let y_seq = conv_forward_seq(&l, &x, &w).unwrap();
        assert_eq!(y_par, y_seq);
        let dy = random_tensor([l.n, l.k, l.p, l.q], 9);
        assert_eq!(
            conv_backward(&l, &dy, &w).unwrap(),
            conv_backward_seq(&l, &dy, &w).unwrap()
        );
        assert_eq!(
            weight_update_grad(&l, &x, &dy).unwrap(),
            weight_update_grad_seq(&l, &x, &dy).unwrap()
        );
    }

    #[test]
    fn fc_backward_is_transposed_matrix_product() {
        let l = LayerShape::fc(2, 5, 3).unwrap();
        let w = random_tensor([3, 5, 1, 1], 11);
        let dy = random_tensor([2, 3, 1, 1], 12);
        let dx = conv_backward(&l, &dy, &w).unwrap();
        for n in 0..2 {
            for c in 0..5 {
                let mut want = 0.0f32;
                for k in 0..3 {
                    want += w.at(k, c, 0, 0) * dy.at(n, k, 0, 0);
                }
                assert!((dx.at(n, c, 0, 0) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_oact_gradient_gives_zero_weight_gradient() {
        let l = LayerShape::conv(2, 2, 2, 3, 3, 4, 4, 1, 1).unwrap();
        let x = random_tensor([2, 2, 4, 4], 13);
        let dy = Tensor4::zeros([2, 2, 4, 4]);
        let dw = weight_update_grad(&l, &x, &dy).unwrap();
        assert!(dw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_weight_gradient_is_outer_product() {
        // P=Q=1, R=S=1: dw[k][c] = sum over n of x[n][c] * dy[n][k].
        let l = LayerShape::conv(2, 3, 2, 1, 1, 1, 1, 1, 0).unwrap();
        let x = random_tensor([2, 3, 1, 1], 14);
        let dy = random_tensor([2, 2, 1, 1], 15);
        let dw = weight_update_grad(&l, &x, &dy).unwrap();
        for k in 0..2 {
            for c in 0..3 {
                let want =
                    x.at(0, c, 0, 0) * dy.at(0, k, 0, 0) + x.at(1, c, 0, 0) * dy.at(1, k, 0, 0);
                assert!((dw.at(k, c, 0, 0) - want).abs() < 1e-6);
            }
        }
    }

    /// Central-difference checks for all three passes through a scalarized
    /// loss `L = sum(y * m)` with a fixed random mixing tensor `m`.
    #[test]
    fn finite_difference_gradients() {
        let cases = [
            LayerShape::conv(2, 2, 3, 3, 3, 4, 4, 1, 1).unwrap(),
            LayerShape::conv(1, 3, 2, 2, 2, 2, 2, 2, 0).unwrap(),
            LayerShape::fc(2, 4, 3).unwrap(),
        ];
        for (i, l) in cases.iter().enumerate() {
            check_gradients(l, 300 + i as u64);
        }
    }

    fn check_gradients(l: &LayerShape, seed: u64) {
        let (ix, iy) = l.input_hw();
        let x = random_tensor([l.n, l.c, ix, iy], seed);
        let w = random_tensor([l.k, l.c, l.r, l.s], seed + 1);
        let m = random_tensor([l.n, l.k, l.p, l.q], seed + 2);
        let loss = |x: &Tensor4, w: &Tensor4| -> f64 {
            let y = conv_forward_seq(l, x, w).unwrap();
            y.data().iter().zip(m.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        // dL/dy = m.
        let dx = conv_backward(l, &m, &w).unwrap();
        let dw = weight_update_grad(l, &x, &m).unwrap();
        let eps = 1e-3f32;
        let rel_tol = 1e-3f64;
        let abs_floor = 1e-6f64;
        let mut probe = XorShift64::new(seed + 3);
        for _ in 0..12 {
            // Probe a random weight.
            let wi = probe.below(w.len());
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.data_mut()[wi] += eps;
            wm.data_mut()[wi] -= eps;
            let num = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * eps as f64);
            let got = dw.data()[wi] as f64;
            assert!(
                (num - got).abs() <= rel_tol * num.abs().max(got.abs()).max(abs_floor / rel_tol),
                "dw[{wi}]: fd {num} vs analytic {got}"
            );
            // Probe a random input.
            let xi = probe.below(x.len());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[xi] += eps;
            xm.data_mut()[xi] -= eps;
            let num = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * eps as f64);
            let got = dx.data()[xi] as f64;
            assert!(
                (num - got).abs() <= rel_tol * num.abs().max(got.abs()).max(abs_floor / rel_tol),
                "dx[{xi}]: fd {num} vs analytic {got}"
            );
        }
    }

    #[test]
    fn avgpool_roundtrip_shapes_and_values() {
        let x = random_tensor([1, 2, 4, 4], 21);
        let y = avgpool_forward(&x, 2);
        assert_eq!(y.shape(), [1, 2, 2, 2]);
        let mean = (x.at(0, 0, 0, 0) + x.at(0, 0, 0, 1) + x.at(0, 0, 1, 0) + x.at(0, 0, 1, 1))
            / 4.0;
        assert!((y.at(0, 0, 0, 0) - mean).abs() < 1e-6);
        let dy = random_tensor([1, 2, 2, 2], 22);
        let dx = avgpool_backward(&dy, 2, 4, 4);
        assert_eq!(dx.shape(), [1, 2, 4, 4]);
        assert!((dx.at(0, 0, 0, 0) - dy.at(0, 0, 0, 0) / 4.0).abs() < 1e-7);
    }

    #[test]
    fn softmax_loss_and_gradient() {
        let logits = Tensor4::from_vec([2, 3, 1, 1], vec![2.0, 0.5, -1.0, 0.0, 0.0, 0.0]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 2]);
        assert!(loss > 0.0);
        // Gradient rows sum to zero.
        for n in 0..2 {
            let sum: f32 = (0..3).map(|k| grad.at(n, k, 0, 0)).sum();
            assert!(sum.abs() < 1e-6);
        }
        // Uniform logits, correct class 2: gradient positive for wrong classes.
        assert!(grad.at(1, 0, 0, 0) > 0.0);
        assert!(grad.at(1, 2, 0, 0) < 0.0);
        // Finite-difference the loss w.r.t. a logit.
        let eps = 1e-3f32;
        let mut lp = logits.clone();
        *lp.at_mut(0, 1, 0, 0) += eps;
        let mut lm = logits.clone();
        *lm.at_mut(0, 1, 0, 0) -= eps;
        let (loss_p, _) = softmax_cross_entropy(&lp, &[0, 2]);
        let (loss_m, _) = softmax_cross_entropy(&lm, &[0, 2]);
        let num = (loss_p - loss_m) / (2.0 * eps);
        assert!((num - grad.at(0, 1, 0, 0)).abs() < 1e-3);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let l = LayerShape::conv(1, 2, 3, 3, 3, 5, 5, 1, 1).unwrap();
        let x = Tensor4::zeros([1, 2, 6, 6]);
        let w = Tensor4::zeros([3, 2, 3, 3]);
        assert!(conv_forward(&l, &x, &w).is_err());
        let x_ok = Tensor4::zeros([1, 2, 5, 5]);
        let w_bad = Tensor4::zeros([3, 2, 2, 3]);
        assert!(conv_forward(&l, &x_ok, &w_bad).is_err());
    }
}
