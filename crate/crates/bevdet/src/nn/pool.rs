use super::tensor::Tensor4;
use super::Mode;

/// Average pooling with count-exclude-pad semantics: the divisor of each
/// window is the number of in-bounds cells, so padded borders are not
/// diluted toward zero.
pub struct AvgPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache_shape: Option<[usize; 4]>,
}

impl AvgPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1);
        assert!(padding < kernel, "padding must be smaller than the kernel");
        AvgPool2d {
            kernel,
            stride,
            padding,
            cache_shape: None,
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        assert!(
            h + 2 * self.padding >= self.kernel && w + 2 * self.padding >= self.kernel,
            "avg_pool2d: kernel {} larger than padded input {}x{}",
            self.kernel,
            h + 2 * self.padding,
            w + 2 * self.padding
        );
        (oh, ow)
    }

    /// Window bounds and divisor for output cell (oy, ox).
    #[inline]
    fn window(&self, oy: usize, ox: usize, h: usize, w: usize) -> (usize, usize, usize, usize, f64) {
        let y0 = (oy * self.stride) as isize - self.padding as isize;
        let x0 = (ox * self.stride) as isize - self.padding as isize;
        let y1 = (y0 + self.kernel as isize).min(h as isize) as usize;
        let x1 = (x0 + self.kernel as isize).min(w as isize) as usize;
        let y0 = y0.max(0) as usize;
        let x0 = x0.max(0) as usize;
        let count = ((y1 - y0) * (x1 - x0)) as f64;
        (y0, y1, x0, x1, count)
    }

    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> Tensor4 {
        let (n, c, h, w) = (x.batch(), x.channels(), x.rows(), x.cols());
        let (oh, ow) = self.output_dims(h, w);
        let mut out = Tensor4::zeros([n, c, oh, ow]);
        for b in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (y0, y1, x0, x1, count) = self.window(oy, ox, h, w);
                        let mut acc = 0.0f64;
                        for y in y0..y1 {
                            for &v in &x.row(b, ch, y)[x0..x1] {
                                acc += v;
                            }
                        }
                        out.set(b, ch, oy, ox, acc / count);
                    }
                }
            }
        }
        self.cache_shape = match mode {
            Mode::Train => Some(x.shape()),
            Mode::Eval => None,
        };
        out
    }

    pub fn backward(&mut self, gy: &Tensor4) -> Tensor4 {
        let shape = self.cache_shape.expect("avg_pool2d backward without cached forward");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (gy.rows(), gy.cols());
        let mut gx = Tensor4::zeros(shape);
        for b in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (y0, y1, x0, x1, count) = self.window(oy, ox, h, w);
                        let g = gy.at(b, ch, oy, ox) / count;
                        for y in y0..y1 {
                            for v in &mut gx.row_mut(b, ch, y)[x0..x1] {
                                *v += g;
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn clear_cache(&mut self) {
        self.cache_shape = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_stays_constant() {
        let mut pool = AvgPool2d::new(7, 1, 3);
        let x = Tensor4::full([1, 2, 9, 9], 3.25);
        let y = pool.forward(&x, Mode::Eval);
        assert_eq!(y.shape(), x.shape());
        for &v in y.data() {
            assert!((v - 3.25).abs() < 1e-12, "count-exclude-pad must keep constants");
        }
    }

    #[test]
    fn two_by_two_window_means() {
        let mut pool = AvgPool2d::new(2, 2, 0);
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = pool.forward(&x, Mode::Eval);
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.at(0, 0, 0, 0), 2.5);
    }

    #[test]
    fn backward_distributes_uniformly() {
        let mut pool = AvgPool2d::new(2, 2, 0);
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let _ = pool.forward(&x, Mode::Train);
        let gy = Tensor4::full([1, 1, 1, 1], 1.0);
        let gx = pool.backward(&gy);
        for &v in gx.data() {
            assert_eq!(v, 0.25);
        }
    }
}
