use super::tensor::{Param, Tensor4};
use super::Mode;

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

struct BnCache {
    xhat: Tensor4,
    inv_std: Vec<f64>,
}

/// Per-channel batch normalization over (batch, rows, cols).
///
/// Train mode normalizes by batch statistics and updates the running
/// estimates with momentum 0.1; eval mode normalizes by the running
/// estimates. Statistics are biased (divide by the element count).
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    name: String,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![1.0; channels]),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            name: name.to_string(),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> Tensor4 {
        assert_eq!(x.channels(), self.channels, "batch_norm {}: channel mismatch", self.name);
        let (n, h, w) = (x.batch(), x.rows(), x.cols());
        let m = n * h * w;
        let mut out = Tensor4::zeros(x.shape());

        match mode {
            Mode::Train => {
                assert!(
                    m >= 2,
                    "batch_norm {}: train mode needs at least 2 elements per channel, got {m}",
                    self.name
                );
                let mut xhat = Tensor4::zeros(x.shape());
                let mut inv_std = vec![0.0; self.channels];
                for c in 0..self.channels {
                    let mut mean = 0.0f64;
                    for b in 0..n {
                        for &v in x.plane(b, c) {
                            mean += v;
                        }
                    }
                    mean /= m as f64;
                    let mut var = 0.0f64;
                    for b in 0..n {
                        for &v in x.plane(b, c) {
                            let d = v - mean;
                            var += d * d;
                        }
                    }
                    var /= m as f64;

                    let istd = 1.0 / (var + EPS).sqrt();
                    inv_std[c] = istd;
                    let (g, bta) = (self.gamma.data[c], self.beta.data[c]);
                    for b in 0..n {
                        let xp = x.plane(b, c);
                        let hp = xhat.plane_mut(b, c);
                        for (i, &v) in xp.iter().enumerate() {
                            hp[i] = (v - mean) * istd;
                        }
                        let op = out.plane_mut(b, c);
                        let hp = xhat.plane(b, c);
                        for (o, &xh) in op.iter_mut().zip(hp) {
                            *o = g * xh + bta;
                        }
                    }
                    self.running_mean[c] = (1.0 - MOMENTUM) * self.running_mean[c] + MOMENTUM * mean;
                    self.running_var[c] = (1.0 - MOMENTUM) * self.running_var[c] + MOMENTUM * var;
                }
                self.cache = Some(BnCache { xhat, inv_std });
            }
            Mode::Eval => {
                for c in 0..self.channels {
                    let istd = 1.0 / (self.running_var[c] + EPS).sqrt();
                    let mean = self.running_mean[c];
                    let (g, bta) = (self.gamma.data[c], self.beta.data[c]);
                    for b in 0..n {
                        let xp = x.plane(b, c);
                        let op = out.plane_mut(b, c);
                        for (o, &v) in op.iter_mut().zip(xp) {
                            *o = g * (v - mean) * istd + bta;
                        }
                    }
                }
                self.cache = None;
            }
        }
        out
    }

    /// Backward through the train-mode forward, including the batch
    /// statistics.
    pub fn backward(&mut self, gy: &Tensor4) -> Tensor4 {
        let cache = self.cache.as_ref().expect("batch_norm backward without cached train forward");
        let (n, h, w) = (gy.batch(), gy.rows(), gy.cols());
        let m = (n * h * w) as f64;
        let mut gx = Tensor4::zeros(gy.shape());

        for c in 0..self.channels {
            let istd = cache.inv_std[c];
            let g = self.gamma.data[c];
            let mut sum_gy = 0.0f64;
            let mut sum_gy_xhat = 0.0f64;
            for b in 0..n {
                for (&gv, &xh) in gy.plane(b, c).iter().zip(cache.xhat.plane(b, c)) {
                    sum_gy += gv;
                    sum_gy_xhat += gv * xh;
                }
            }
            self.beta.grad[c] += sum_gy;
            self.gamma.grad[c] += sum_gy_xhat;

            // dx = (gamma * istd / m) * (m*gy - sum(gy) - xhat * sum(gy*xhat))
            let k = g * istd / m;
            for b in 0..n {
                let gyp = gy.plane(b, c);
                let xhp = cache.xhat.plane(b, c);
                let gxp = gx.plane_mut(b, c);
                for i in 0..gyp.len() {
                    gxp[i] = k * (m * gyp[i] - sum_gy - xhp[i] * sum_gy_xhat);
                }
            }
        }
        gx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    /// Running statistics as named buffers for checkpointing.
    pub fn stat_buffers(&mut self) -> [(String, &mut Vec<f64>); 2] {
        [
            (format!("{}.running_mean", self.name), &mut self.running_mean),
            (format!("{}.running_var", self.name), &mut self.running_var),
        ]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_output_is_standardized_before_affine() {
        let mut bn = BatchNorm2d::new("bn", 3);
        let x = Tensor4::from_vec(
            [2, 3, 2, 2],
            (0..24).map(|i| (i as f64 * 0.7).cos() * 3.0 + 1.0).collect(),
        );
        let y = bn.forward(&x, Mode::Train);
        for c in 0..3 {
            let mut vals = Vec::new();
            for b in 0..2 {
                vals.extend_from_slice(y.plane(b, c));
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5, "channel mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "channel var {v}");
        }
    }

    #[test]
    fn eval_with_unit_running_stats_is_identity() {
        let mut bn = BatchNorm2d::new("bn", 2);
        let x = Tensor4::from_vec([1, 2, 2, 2], vec![0.5, -1.0, 2.0, 3.0, -0.5, 0.0, 1.0, 4.0]);
        let y = bn.forward(&x, Mode::Eval);
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-4, "eps shifts values only in the 5th decimal");
        }
    }

    #[test]
    #[should_panic(expected = "at least 2 elements")]
    fn train_rejects_single_element_batches() {
        let mut bn = BatchNorm2d::new("bn", 1);
        let x = Tensor4::zeros([1, 1, 1, 1]);
        let _ = bn.forward(&x, Mode::Train);
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut bn = BatchNorm2d::new("bn", 1);
        let x = Tensor4::full([1, 1, 2, 2], 10.0);
        let _ = bn.forward(&x, Mode::Train);
        assert!((bn.running_mean[0] - 1.0).abs() < 1e-12); // 0.9*0 + 0.1*10
        assert!((bn.running_var[0] - 0.9).abs() < 1e-12); // 0.9*1 + 0.1*0
    }
}
