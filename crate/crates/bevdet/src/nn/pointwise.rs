//! Elementwise operations and the channel softmax, with explicit backward
//! companions. Binary ops require matching shapes except for a (1, C, 1, 1)
//! per-channel second operand.

use super::tensor::Tensor4;

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// `gx = gy * [x > 0]`, needs the forward *input*.
pub fn relu_backward(x: &Tensor4, gy: &Tensor4) -> Tensor4 {
    assert_eq!(x.shape(), gy.shape(), "relu backward shape mismatch");
    let mut gx = gy.clone();
    for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    gx
}

pub fn sigmoid(x: &Tensor4) -> Tensor4 {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// `gx = gy * y * (1 - y)`, needs the forward *output*.
pub fn sigmoid_backward(y: &Tensor4, gy: &Tensor4) -> Tensor4 {
    assert_eq!(y.shape(), gy.shape(), "sigmoid backward shape mismatch");
    let mut gx = gy.clone();
    for (g, &v) in gx.data_mut().iter_mut().zip(y.data()) {
        *g *= v * (1.0 - v);
    }
    gx
}

fn broadcast_compatible(a: [usize; 4], b: [usize; 4]) -> bool {
    b == [1, a[1], 1, 1]
}

/// Elementwise `a + b`; `b` may be per-channel (1, C, 1, 1).
pub fn add(a: &Tensor4, b: &Tensor4) -> Tensor4 {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        out.add_assign(b);
        return out;
    }
    assert!(
        broadcast_compatible(a.shape(), b.shape()),
        "add shape mismatch: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let mut out = a.clone();
    for n in 0..a.batch() {
        for c in 0..a.channels() {
            let bv = b.at(0, c, 0, 0);
            for v in out.plane_mut(n, c) {
                *v += bv;
            }
        }
    }
    out
}

/// Elementwise `a * b`; `b` may be per-channel (1, C, 1, 1).
pub fn mul(a: &Tensor4, b: &Tensor4) -> Tensor4 {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
            *o *= bv;
        }
        return out;
    }
    assert!(
        broadcast_compatible(a.shape(), b.shape()),
        "mul shape mismatch: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let mut out = a.clone();
    for n in 0..a.batch() {
        for c in 0..a.channels() {
            let bv = b.at(0, c, 0, 0);
            for v in out.plane_mut(n, c) {
                *v *= bv;
            }
        }
    }
    out
}

/// Softmax over the channel axis, independently at every (batch, row, col).
pub fn softmax_channels(x: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = (x.batch(), x.channels(), x.rows(), x.cols());
    let mut out = Tensor4::zeros(x.shape());
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let mut maxv = f64::NEG_INFINITY;
                for ch in 0..c {
                    maxv = maxv.max(x.at(b, ch, y, xx));
                }
                let mut denom = 0.0f64;
                for ch in 0..c {
                    denom += (x.at(b, ch, y, xx) - maxv).exp();
                }
                for ch in 0..c {
                    out.set(b, ch, y, xx, (x.at(b, ch, y, xx) - maxv).exp() / denom);
                }
            }
        }
    }
    out
}

/// `gx_c = y_c * (gy_c - sum_k gy_k * y_k)`, needs the forward *output*.
pub fn softmax_channels_backward(y: &Tensor4, gy: &Tensor4) -> Tensor4 {
    assert_eq!(y.shape(), gy.shape(), "softmax backward shape mismatch");
    let (n, c, h, w) = (y.batch(), y.channels(), y.rows(), y.cols());
    let mut gx = Tensor4::zeros(y.shape());
    for b in 0..n {
        for yy in 0..h {
            for xx in 0..w {
                let mut dot = 0.0f64;
                for ch in 0..c {
                    dot += gy.at(b, ch, yy, xx) * y.at(b, ch, yy, xx);
                }
                for ch in 0..c {
                    let v = y.at(b, ch, yy, xx) * (gy.at(b, ch, yy, xx) - dot);
                    gx.set(b, ch, yy, xx, v);
                }
            }
        }
    }
    gx
}
