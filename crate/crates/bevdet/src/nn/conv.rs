use rand::Rng;

use super::tensor::{Param, Tensor4};
use super::Mode;

/// 2D cross-correlation with stride, zero padding and dilation.
///
/// Weights are (out_channels, in_channels, k, k), Kaiming-uniform fan-in
/// initialized. `forward` in train mode caches the input for `backward`.
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor4>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel >= 1 && stride >= 1 && dilation >= 1);
        let fan_in = (in_channels * kernel * kernel) as f64;
        let w_bound = (6.0 / fan_in).sqrt();
        let b_bound = 1.0 / fan_in.sqrt();
        let wlen = out_channels * in_channels * kernel * kernel;
        let weight = Param::new(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            (0..wlen).map(|_| rng.gen_range(-w_bound..w_bound)).collect(),
        );
        let bias = Param::new(
            format!("{name}.bias"),
            vec![out_channels],
            (0..out_channels).map(|_| rng.gen_range(-b_bound..b_bound)).collect(),
        );
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            dilation,
            weight,
            bias,
            cache: None,
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let oh = (h + 2 * self.padding).checked_sub(span).map(|v| v / self.stride + 1);
        let ow = (w + 2 * self.padding).checked_sub(span).map(|v| v / self.stride + 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => (oh, ow),
            _ => panic!(
                "conv2d {}: input {}x{} too small for k={} d={} p={}",
                self.weight.name, h, w, self.kernel, self.dilation, self.padding
            ),
        }
    }

    fn weight_at(&self, co: usize, ci: usize, ky: usize, kx: usize) -> f64 {
        let k = self.kernel;
        self.weight.data[((co * self.in_channels + ci) * k + ky) * k + kx]
    }

    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> Tensor4 {
        assert_eq!(
            x.channels(),
            self.in_channels,
            "conv2d {}: input shape {:?} does not match expected channels {}",
            self.weight.name,
            x.shape(),
            self.in_channels
        );
        let (n, _, h, w) = (x.batch(), x.channels(), x.rows(), x.cols());
        let (oh, ow) = self.output_dims(h, w);
        let mut out = Tensor4::zeros([n, self.out_channels, oh, ow]);

        let (s, p, d, k) = (self.stride, self.padding, self.dilation, self.kernel);
        for b in 0..n {
            for co in 0..self.out_channels {
                let bias = self.bias.data[co];
                for v in out.plane_mut(b, co) {
                    *v = bias;
                }
                for ci in 0..self.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = self.weight_at(co, ci, ky, kx);
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * s + ky * d) as isize - p as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let in_row = x.row(b, ci, iy as usize);
                                if s == 1 {
                                    // ix = ox - p + kx*d must land in [0, w)
                                    let off = kx as isize * d as isize - p as isize;
                                    let x0 = (-off).max(0) as usize;
                                    let x1 = (w as isize - off).min(ow as isize);
                                    if x1 <= x0 as isize {
                                        continue;
                                    }
                                    let x1 = x1 as usize;
                                    let src = &in_row[(x0 as isize + off) as usize..];
                                    let dst = &mut out.row_mut(b, co, oy)[x0..x1];
                                    for (o, i) in dst.iter_mut().zip(src) {
                                        *o += wv * i;
                                    }
                                } else {
                                    let row_start = out.idx(b, co, oy, 0);
                                    for ox in 0..ow {
                                        let ix = (ox * s + kx * d) as isize - p as isize;
                                        if ix >= 0 && ix < w as isize {
                                            out.data_mut()[row_start + ox] += wv * in_row[ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        self.cache = match mode {
            Mode::Train => Some(x.clone()),
            Mode::Eval => None,
        };
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, gy: &Tensor4) -> Tensor4 {
        let x = self.cache.as_ref().expect("conv2d backward without cached forward");
        let (n, h, w) = (x.batch(), x.rows(), x.cols());
        let (oh, ow) = (gy.rows(), gy.cols());
        assert_eq!(gy.channels(), self.out_channels, "conv2d backward channel mismatch");
        let (s, p, d, k) = (self.stride, self.padding, self.dilation, self.kernel);

        let mut gx = Tensor4::zeros(x.shape());
        for b in 0..n {
            for co in 0..self.out_channels {
                let mut gb = 0.0;
                for &g in gy.plane(b, co) {
                    gb += g;
                }
                self.bias.grad[co] += gb;
                for ci in 0..self.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let widx = ((co * self.in_channels + ci) * k + ky) * k + kx;
                            let wv = self.weight.data[widx];
                            let mut gw = 0.0;
                            for oy in 0..oh {
                                let iy = (oy * s + ky * d) as isize - p as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let gy_row = gy.row(b, co, oy);
                                if s == 1 {
                                    let off = kx as isize * d as isize - p as isize;
                                    let x0 = (-off).max(0) as usize;
                                    let x1 = (w as isize - off).min(ow as isize);
                                    if x1 <= x0 as isize {
                                        continue;
                                    }
                                    let x1 = x1 as usize;
                                    let in_start = (x0 as isize + off) as usize;
                                    let in_row = x.row(b, ci, iy as usize);
                                    let src = &in_row[in_start..in_start + (x1 - x0)];
                                    for (g, i) in gy_row[x0..x1].iter().zip(src) {
                                        gw += g * i;
                                    }
                                    let gx_row = gx.row_mut(b, ci, iy as usize);
                                    let dst = &mut gx_row[in_start..in_start + (x1 - x0)];
                                    for (gi, g) in dst.iter_mut().zip(&gy_row[x0..x1]) {
                                        *gi += wv * g;
                                    }
                                } else {
                                    for ox in 0..ow {
                                        let ix = (ox * s + kx * d) as isize - p as isize;
                                        if ix >= 0 && ix < w as isize {
                                            let g = gy_row[ox];
                                            gw += g * x.at(b, ci, iy as usize, ix as usize);
                                            let gidx = gx.idx(b, ci, iy as usize, ix as usize);
                                            gx.data_mut()[gidx] += wv * g;
                                        }
                                    }
                                }
                            }
                            self.weight.grad[widx] += gw;
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Transposed convolution that exactly doubles spatial dimensions.
///
/// Stride is fixed at 2; the kernel must be 2 (padding 0) or 4 (padding 1)
/// so that out = 2 * in holds exactly. Weights are (in_channels,
/// out_channels, k, k).
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor4>,
}

impl ConvTranspose2d {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            kernel == 2 || kernel == 4,
            "conv_transpose2d requires kernel 2 (pad 0) or 4 (pad 1) for exact doubling, got {kernel}"
        );
        let fan_in = (in_channels * kernel * kernel) as f64;
        let w_bound = (6.0 / fan_in).sqrt();
        let b_bound = 1.0 / fan_in.sqrt();
        let wlen = in_channels * out_channels * kernel * kernel;
        let weight = Param::new(
            format!("{name}.weight"),
            vec![in_channels, out_channels, kernel, kernel],
            (0..wlen).map(|_| rng.gen_range(-w_bound..w_bound)).collect(),
        );
        let bias = Param::new(
            format!("{name}.bias"),
            vec![out_channels],
            (0..out_channels).map(|_| rng.gen_range(-b_bound..b_bound)).collect(),
        );
        ConvTranspose2d {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias,
            cache: None,
        }
    }

    fn padding(&self) -> usize {
        // k = 2p + 2 keeps out = 2 * in.
        (self.kernel - 2) / 2
    }

    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> Tensor4 {
        assert_eq!(
            x.channels(),
            self.in_channels,
            "conv_transpose2d {}: input shape {:?} does not match expected channels {}",
            self.weight.name,
            x.shape(),
            self.in_channels
        );
        let (n, h, w) = (x.batch(), x.rows(), x.cols());
        let (oh, ow) = (2 * h, 2 * w);
        let (k, p) = (self.kernel, self.padding());
        let mut out = Tensor4::zeros([n, self.out_channels, oh, ow]);

        for b in 0..n {
            for co in 0..self.out_channels {
                let bias = self.bias.data[co];
                for v in out.plane_mut(b, co) {
                    *v = bias;
                }
                for ci in 0..self.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = self.weight.data[((ci * self.out_channels + co) * k + ky) * k + kx];
                            for y in 0..h {
                                let oy = (2 * y + ky) as isize - p as isize;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                let in_row = x.row(b, ci, y);
                                let out_start = out.idx(b, co, oy as usize, 0);
                                for xx in 0..w {
                                    let ox = (2 * xx + kx) as isize - p as isize;
                                    if ox >= 0 && ox < ow as isize {
                                        out.data_mut()[out_start + ox as usize] += wv * in_row[xx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        self.cache = match mode {
            Mode::Train => Some(x.clone()),
            Mode::Eval => None,
        };
        out
    }

    pub fn backward(&mut self, gy: &Tensor4) -> Tensor4 {
        let x = self.cache.as_ref().expect("conv_transpose2d backward without cached forward");
        let (n, h, w) = (x.batch(), x.rows(), x.cols());
        let (oh, ow) = (gy.rows(), gy.cols());
        assert_eq!((oh, ow), (2 * h, 2 * w), "conv_transpose2d backward shape mismatch");
        let (k, p) = (self.kernel, self.padding());

        let mut gx = Tensor4::zeros(x.shape());
        for b in 0..n {
            for co in 0..self.out_channels {
                let mut gb = 0.0;
                for &g in gy.plane(b, co) {
                    gb += g;
                }
                self.bias.grad[co] += gb;
                for ci in 0..self.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let widx = ((ci * self.out_channels + co) * k + ky) * k + kx;
                            let wv = self.weight.data[widx];
                            let mut gw = 0.0;
                            for y in 0..h {
                                let oy = (2 * y + ky) as isize - p as isize;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                let gy_row = gy.row(b, co, oy as usize);
                                let in_row_start = x.idx(b, ci, y, 0);
                                let gx_row_start = gx.idx(b, ci, y, 0);
                                for xx in 0..w {
                                    let ox = (2 * xx + kx) as isize - p as isize;
                                    if ox >= 0 && ox < ow as isize {
                                        let g = gy_row[ox as usize];
                                        gw += g * x.data()[in_row_start + xx];
                                        gx.data_mut()[gx_row_start + xx] += wv * g;
                                    }
                                }
                            }
                            self.weight.grad[widx] += gw;
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn set_weights(conv: &mut Conv2d, w: &[f64]) {
        conv.weight.data.copy_from_slice(w);
        for b in &mut conv.bias.data {
            *b = 0.0;
        }
    }

    #[test]
    fn all_ones_3x3_sums_window() {
        let mut conv = Conv2d::new("c", 1, 1, 3, 1, 0, 1, &mut rng(0));
        set_weights(&mut conv, &[1.0; 9]);
        let x = Tensor4::full([1, 1, 3, 3], 1.0);
        let y = conv.forward(&x, Mode::Eval);
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.at(0, 0, 0, 0), 9.0);
    }

    #[test]
    fn identity_1x1_kernel_preserves_input() {
        let mut conv = Conv2d::new("c", 1, 1, 1, 1, 0, 1, &mut rng(0));
        set_weights(&mut conv, &[1.0]);
        let x = Tensor4::from_vec([1, 1, 2, 3], vec![1.0, -2.0, 3.0, 4.0, 0.5, -0.25]);
        let y = conv.forward(&x, Mode::Eval);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dilation_one_matches_plain_conv_bitwise() {
        let mut a = Conv2d::new("a", 2, 3, 3, 1, 1, 1, &mut rng(7));
        let mut b = Conv2d::new("b", 2, 3, 3, 1, 1, 1, &mut rng(99));
        b.weight.data.copy_from_slice(&a.weight.data);
        b.bias.data.copy_from_slice(&a.bias.data);
        b.dilation = 1;
        let x = Tensor4::from_vec([1, 2, 6, 5], (0..60).map(|i| (i as f64).sin()).collect());
        let ya = a.forward(&x, Mode::Eval);
        let yb = b.forward(&x, Mode::Eval);
        assert_eq!(ya.data(), yb.data());
    }

    #[test]
    fn strided_conv_shapes_and_values() {
        // 4x4 input of row indices, 2x2 ones kernel, stride 2: block sums.
        let mut conv = Conv2d::new("c", 1, 1, 2, 2, 0, 1, &mut rng(0));
        set_weights(&mut conv, &[1.0; 4]);
        let x = Tensor4::from_vec(
            [1, 1, 4, 4],
            (0..16).map(|i| (i / 4) as f64).collect(),
        );
        let y = conv.forward(&x, Mode::Eval);
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[2.0, 2.0, 10.0, 10.0]);
    }

    #[test]
    fn transpose_fills_disjoint_blocks() {
        let mut up = ConvTranspose2d::new("u", 1, 1, 2, &mut rng(0));
        up.weight.data.copy_from_slice(&[1.0; 4]);
        up.bias.data[0] = 0.0;
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = up.forward(&x, Mode::Eval);
        assert_eq!(y.shape(), [1, 1, 4, 4]);
        let expect = [
            1.0, 1.0, 2.0, 2.0, //
            1.0, 1.0, 2.0, 2.0, //
            3.0, 3.0, 4.0, 4.0, //
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn transpose_zero_input_gives_bias_only() {
        let mut up = ConvTranspose2d::new("u", 2, 3, 4, &mut rng(3));
        let x = Tensor4::zeros([1, 2, 3, 5]);
        let y = up.forward(&x, Mode::Eval);
        assert_eq!(y.shape(), [1, 3, 6, 10]);
        for c in 0..3 {
            for &v in y.plane(0, c) {
                assert_eq!(v, up.bias.data[c]);
            }
        }
    }

    #[test]
    #[should_panic(expected = "does not match expected channels")]
    fn channel_mismatch_is_contract_violation() {
        let mut conv = Conv2d::new("c", 2, 1, 3, 1, 1, 1, &mut rng(0));
        let x = Tensor4::zeros([1, 3, 8, 8]);
        let _ = conv.forward(&x, Mode::Eval);
    }

    #[test]
    #[should_panic(expected = "kernel 2 (pad 0) or 4 (pad 1)")]
    fn transpose_rejects_non_doubling_config() {
        let _ = ConvTranspose2d::new("u", 1, 1, 3, &mut rng(0));
    }
}
