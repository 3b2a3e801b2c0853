//! The detection network: a hybrid deep-layer-aggregation backbone over
//! BEV rasters with three dense prediction heads.
//!
//! The encoder is a column of dual-output down blocks; widths double per
//! level from `base_channels`. Aggregation is the full iterative lattice:
//! node (l, k) fuses its same-resolution left neighbor (l, k-1) with the
//! upsampled deeper node (l+1, k-1), so low-level detail is refreshed at
//! every step on the way back to full resolution. Class, box and rotation
//! heads are 1x1 convolutions on the final full-resolution node.

mod blocks;

pub use blocks::{CamBlock, DownBlock, Fusion, UpBlock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, CheckpointEntry, Conv2d, Mode, Param, Tensor4};
use crate::targets::ROTATION_BINS;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub base_channels: usize,
    pub levels: usize,
    /// How many of the first levels carry a CAM gate.
    pub cam_levels: usize,
    /// Per-level conv dilation.
    pub dilations: Vec<usize>,
    pub fusion: Fusion,
    /// Keypoint classes including background.
    pub num_classes: usize,
}

impl ModelConfig {
    /// Full-scale configuration: 512x256 input, 32 base channels.
    pub fn full() -> Self {
        ModelConfig {
            input_channels: 3,
            rows: 512,
            cols: 256,
            base_channels: 32,
            levels: 5,
            cam_levels: 3,
            dilations: vec![1, 1, 2, 2, 2],
            fusion: Fusion::Sum,
            num_classes: 2,
        }
    }

    /// Desk-scale configuration: 64x32 input, 4 base channels.
    pub fn desk() -> Self {
        ModelConfig {
            rows: 64,
            cols: 32,
            base_channels: 4,
            ..ModelConfig::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.levels;
        if self.rows % div != 0 || self.cols % div != 0 {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by 2^levels = {div}",
                self.rows, self.cols
            )));
        }
        if self.dilations.len() != self.levels {
            return Err(Error::Config(format!(
                "need {} dilation entries, got {}",
                self.levels,
                self.dilations.len()
            )));
        }
        if self.levels == 0 || self.base_channels == 0 {
            return Err(Error::Config("levels and base_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least background + one class".into()));
        }
        if self.cam_levels > self.levels {
            return Err(Error::Config("cam_levels exceeds levels".into()));
        }
        Ok(())
    }

    /// Channel width at resolution level `l` (level 0 = full resolution).
    /// Level `levels` is the pooled bottom of the lattice.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Width of the deepest down block, `base * 2^(levels-1)`.
    pub fn bottom_width(&self) -> usize {
        self.width(self.levels - 1)
    }
}

/// The three dense head outputs, all at input resolution.
#[derive(Debug, Clone)]
pub struct Heads {
    /// (N, num_classes, rows, cols) raw logits.
    pub class_logits: Tensor4,
    /// (N, 3, rows, cols) log-dimension regression.
    pub box_pred: Tensor4,
    /// (N, 21, rows, cols) raw logits.
    pub rot_logits: Tensor4,
}

pub struct BevDetNet {
    pub cfg: ModelConfig,
    downs: Vec<DownBlock>,
    /// ups[l][k-1] computes lattice node (l, k).
    ups: Vec<Vec<UpBlock>>,
    head_class: Conv2d,
    head_box: Conv2d,
    head_rot: Conv2d,
}

impl BevDetNet {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = cfg.levels;

        let mut downs = Vec::with_capacity(levels);
        for l in 0..levels {
            let in_ch = if l == 0 { cfg.input_channels } else { cfg.width(l) };
            downs.push(DownBlock::new(
                &format!("db{l}"),
                in_ch,
                cfg.width(l),
                cfg.dilations[l],
                l < cfg.cam_levels,
                &mut rng,
            ));
        }

        let mut ups = Vec::with_capacity(levels);
        for l in 0..levels {
            let mut row = Vec::with_capacity(levels - l);
            for k in 1..=(levels - l) {
                row.push(UpBlock::new(
                    &format!("ub{l}_{k}"),
                    cfg.width(l + 1),
                    cfg.width(l),
                    cfg.fusion,
                    &mut rng,
                ));
            }
            ups.push(row);
        }

        let w0 = cfg.width(0);
        let head_class = Conv2d::new("head.class", w0, cfg.num_classes, 1, 1, 0, 1, &mut rng);
        let head_box = Conv2d::new("head.box", w0, 3, 1, 1, 0, 1, &mut rng);
        let head_rot = Conv2d::new("head.rot", w0, ROTATION_BINS, 1, 1, 0, 1, &mut rng);

        Ok(BevDetNet {
            cfg: cfg.clone(),
            downs,
            ups,
            head_class,
            head_box,
            head_rot,
        })
    }

    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> Heads {
        assert_eq!(
            (x.channels(), x.rows(), x.cols()),
            (self.cfg.input_channels, self.cfg.rows, self.cfg.cols),
            "input shape {:?} does not match model config",
            x.shape()
        );
        let levels = self.cfg.levels;

        // lattice[l][k]; lattice[levels] holds only the pooled bottom.
        let mut lattice: Vec<Vec<Tensor4>> = (0..=levels).map(|_| Vec::new()).collect();
        let mut cur = x.clone();
        for l in 0..levels {
            let (same, half) = self.downs[l].forward(&cur, mode);
            lattice[l].push(same);
            cur = half;
        }
        lattice[levels].push(cur);

        for k in 1..=levels {
            for l in 0..=(levels - k) {
                let node = self.ups[l][k - 1].forward(&lattice[l + 1][k - 1], &lattice[l][k - 1], mode);
                lattice[l].push(node);
            }
        }

        let final_features = &lattice[0][levels];
        Heads {
            class_logits: self.head_class.forward(final_features, mode),
            box_pred: self.head_box.forward(final_features, mode),
            rot_logits: self.head_rot.forward(final_features, mode),
        }
    }

    /// Backpropagates head gradients through the lattice and the encoder,
    /// accumulating parameter gradients. Returns the input gradient.
    pub fn backward(&mut self, g_class: &Tensor4, g_box: &Tensor4, g_rot: &Tensor4) -> Tensor4 {
        let levels = self.cfg.levels;
        let mut g_final = self.head_class.backward(g_class);
        g_final.add_assign(&self.head_box.backward(g_box));
        g_final.add_assign(&self.head_rot.backward(g_rot));

        // Gradient lattice, same layout as the forward one.
        let mut grads: Vec<Vec<Option<Tensor4>>> = (0..=levels)
            .map(|l| vec![None; levels.saturating_sub(l) + 1])
            .collect();
        grads[0][levels] = Some(g_final);

        let mut accumulate = |slot: &mut Option<Tensor4>, g: Tensor4| match slot {
            Some(existing) => existing.add_assign(&g),
            None => *slot = Some(g),
        };

        for k in (1..=levels).rev() {
            for l in 0..=(levels - k) {
                let gy = grads[l][k].take().expect("lattice gradient missing");
                let (g_low, g_skip) = self.ups[l][k - 1].backward(&gy);
                accumulate(&mut grads[l + 1][k - 1], g_low);
                accumulate(&mut grads[l][k - 1], g_skip);
            }
        }

        // Encoder column, deepest first. The half output of level l feeds
        // level l+1 (or the lattice bottom for the last level).
        let mut g_half = grads[levels][0].take().expect("bottom gradient missing");
        for l in (0..levels).rev() {
            let g_same = grads[l][0].take().expect("encoder gradient missing");
            g_half = self.downs[l].backward(&g_same, &g_half);
        }
        g_half
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for d in &mut self.downs {
            d.visit_params(f);
        }
        for row in &mut self.ups {
            for u in row {
                u.visit_params(f);
            }
        }
        self.head_class.visit_params(f);
        self.head_box.visit_params(f);
        self.head_rot.visit_params(f);
    }

    fn visit_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d)) {
        for d in &mut self.downs {
            d.visit_norms(f);
        }
        for row in &mut self.ups {
            for u in row {
                u.visit_norms(f);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    /// Exact learnable parameter count.
    pub fn param_count(&mut self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |p| count += p.len());
        count
    }

    /// Human-readable layer dump: name, shape and parameter count per
    /// entry, plus batch-norm running buffers.
    pub fn describe(&mut self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let cfg = &self.cfg;
        let _ = writeln!(
            out,
            "input ({}, {}, {}), base {}, levels {}, fusion {:?}",
            cfg.input_channels, cfg.rows, cfg.cols, cfg.base_channels, cfg.levels, cfg.fusion
        );
        let mut total = 0usize;
        self.visit_params(&mut |p| {
            total += p.len();
            let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "{:<24} [{}] {}", p.name, dims.join("x"), p.len());
        });
        let _ = writeln!(out, "learnable parameters: {total}");
        out
    }

    /// All named tensors (parameters + running statistics) for saving.
    pub fn checkpoint_entries(&mut self) -> Vec<CheckpointEntry> {
        let mut entries = Vec::new();
        self.visit_params(&mut |p| {
            entries.push(CheckpointEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.data.clone(),
            })
        });
        self.visit_norms(&mut |bn| {
            for (name, buf) in bn.stat_buffers() {
                entries.push(CheckpointEntry {
                    name,
                    shape: vec![buf.len()],
                    data: buf.clone(),
                });
            }
        });
        entries
    }

    /// Restores parameters and running statistics by name.
    pub fn load_entries(&mut self, entries: &[CheckpointEntry]) -> Result<()> {
        use std::collections::HashMap;
        let by_name: HashMap<&str, &CheckpointEntry> =
            entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut missing = Vec::new();
        self.visit_params(&mut |p| match by_name.get(p.name.as_str()) {
            Some(e) if e.data.len() == p.data.len() => p.data.copy_from_slice(&e.data),
            Some(e) => missing.push(format!("{}: shape mismatch {:?} vs {:?}", p.name, e.shape, p.shape)),
            None => missing.push(format!("{}: absent from checkpoint", p.name)),
        });
        self.visit_norms(&mut |bn| {
            for (name, buf) in bn.stat_buffers() {
                match by_name.get(name.as_str()) {
                    Some(e) if e.data.len() == buf.len() => buf.copy_from_slice(&e.data),
                    Some(_) => missing.push(format!("{name}: shape mismatch")),
                    None => missing.push(format!("{name}: absent from checkpoint")),
                }
            }
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(missing.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(cfg: &ModelConfig, n: usize, seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [n, cfg.input_channels, cfg.rows, cfg.cols];
        let len = shape.iter().product();
        Tensor4::from_vec(shape, (0..len).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    /// Tiny config that exercises the whole lattice cheaply.
    fn tiny() -> ModelConfig {
        ModelConfig {
            input_channels: 3,
            rows: 16,
            cols: 8,
            base_channels: 2,
            levels: 3,
            cam_levels: 2,
            dilations: vec![1, 1, 2],
            fusion: Fusion::Sum,
            num_classes: 2,
        }
    }

    #[test]
    fn desk_forward_shapes() {
        let cfg = ModelConfig::desk();
        let mut model = BevDetNet::new(&cfg, 0).unwrap();
        let heads = model.forward(&random_input(&cfg, 1, 1), Mode::Eval);
        assert_eq!(heads.class_logits.shape(), [1, 2, 64, 32]);
        assert_eq!(heads.box_pred.shape(), [1, 3, 64, 32]);
        assert_eq!(heads.rot_logits.shape(), [1, 21, 64, 32]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny();
        let mut model = BevDetNet::new(&cfg, 3).unwrap();
        let x = random_input(&cfg, 2, 4);
        let a = model.forward(&x, Mode::Eval);
        let b = model.forward(&x, Mode::Eval);
        assert_eq!(a.class_logits.data(), b.class_logits.data());
        assert_eq!(a.box_pred.data(), b.box_pred.data());
        assert_eq!(a.rot_logits.data(), b.rot_logits.data());
    }

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut cfg = ModelConfig::desk();
        cfg.rows = 60; // not divisible by 32
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk();
        cfg.dilations = vec![1, 1];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bottom_width_matches_schedule() {
        let cfg = ModelConfig::full();
        assert_eq!(cfg.bottom_width(), 512);
        assert_eq!(ModelConfig::desk().bottom_width(), 64);
    }

    #[test]
    fn single_conv_param_count_sanity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new("c", 3, 4, 3, 1, 1, 1, &mut rng);
        assert_eq!(conv.param_count(), 3 * 4 * 9 + 4);
    }

    #[test]
    fn param_count_invariant_under_reinit() {
        let cfg = tiny();
        let a = BevDetNet::new(&cfg, 1).unwrap().param_count();
        let b = BevDetNet::new(&cfg, 999).unwrap().param_count();
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_reach_first_conv() {
        // A spatially constant output gradient dies at the last batch norm
        // (sum(xhat) = 0), so drive the backward pass with the quadratic
        // loss 0.5 * sum(y^2), whose gradient is the output itself.
        let cfg = tiny();
        let mut model = BevDetNet::new(&cfg, 7).unwrap();
        let x = random_input(&cfg, 2, 8);
        let heads = model.forward(&x, Mode::Train);
        model.zero_grads();
        let _ = model.backward(&heads.class_logits, &heads.box_pred, &heads.rot_logits);
        let mut first_conv_grad_norm = 0.0f64;
        let mut seen = false;
        model.visit_params(&mut |p| {
            if p.name == "db0.conv1.weight" {
                first_conv_grad_norm = p.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                seen = true;
            }
        });
        assert!(seen);
        assert!(first_conv_grad_norm > 1e-12, "dead graph: no gradient at the first conv");
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        // Whole-network check on a minimal lattice. The loss is
        // 0.5 * sum(y^2) over all three heads: its output gradient is y
        // itself, which varies per pixel and therefore survives the final
        // batch norm (a constant gradient would die there exactly).
        let cfg = ModelConfig {
            rows: 8,
            cols: 8,
            base_channels: 2,
            levels: 2,
            cam_levels: 1,
            dilations: vec![1, 2],
            ..tiny()
        };
        let mut model = BevDetNet::new(&cfg, 11).unwrap();
        let x = random_input(&cfg, 1, 12);

        model.zero_grads();
        let heads = model.forward(&x, Mode::Train);
        let gx = model.backward(&heads.class_logits, &heads.box_pred, &heads.rot_logits);

        let mut analytic = Vec::new();
        model.visit_params(&mut |p| analytic.push(p.grad.clone()));

        let sq = |t: &Tensor4| 0.5 * t.data().iter().map(|v| v * v).sum::<f64>();
        let mut loss = |m: &mut BevDetNet, x: &Tensor4| {
            let h = m.forward(x, Mode::Train);
            sq(&h.class_logits) + sq(&h.box_pred) + sq(&h.rot_logits)
        };

        use crate::nn::gradcheck::{two_scale_diff, FilteredCheck};
        let h = 1e-3;
        let mut check = FilteredCheck::new();

        // Input gradient, subsampled.
        let mut xp = x.clone();
        for i in (0..xp.len()).step_by(17) {
            let v = xp.data()[i];
            let numeric = two_scale_diff(
                |p| {
                    xp.data_mut()[i] = p;
                    let f = loss(&mut model, &xp);
                    xp.data_mut()[i] = v;
                    f
                },
                v,
                h,
            );
            check.record(gx.data()[i], numeric);
        }

        // Parameter gradients, subsampled across every tensor.
        let mut lens = Vec::new();
        model.visit_params(&mut |p| lens.push(p.len()));
        for (pi, plen) in lens.iter().enumerate() {
            for ei in (0..*plen).step_by((*plen / 4).max(1)) {
                let set = |m: &mut BevDetNet, value: f64| {
                    let mut i = 0;
                    m.visit_params(&mut |p| {
                        if i == pi {
                            p.data[ei] = value;
                        }
                        i += 1;
                    });
                };
                let mut orig = 0.0;
                {
                    let mut i = 0;
                    model.visit_params(&mut |p| {
                        if i == pi {
                            orig = p.data[ei];
                        }
                        i += 1;
                    });
                }
                let numeric = two_scale_diff(
                    |p| {
                        set(&mut model, p);
                        let f = loss(&mut model, &x);
                        set(&mut model, orig);
                        f
                    },
                    orig,
                    h,
                );
                check.record(analytic[pi][ei], numeric);
            }
        }
        assert!(
            check.max_rel_err < 1e-3,
            "end-to-end grad err {} ({} checked, {} skipped)",
            check.max_rel_err,
            check.checked,
            check.skipped
        );
        assert!(check.skip_fraction() < 0.05, "too many kink skips");
    }

    #[test]
    fn checkpoint_round_trip_restores_outputs() {
        let cfg = tiny();
        let mut model = BevDetNet::new(&cfg, 5).unwrap();
        let x = random_input(&cfg, 1, 6);
        // Touch running stats so they are non-trivial.
        let _ = model.forward(&x, Mode::Train);
        let expect = model.forward(&x, Mode::Eval);

        let entries = model.checkpoint_entries();
        let mut restored = BevDetNet::new(&cfg, 777).unwrap();
        restored.load_entries(&entries).unwrap();
        let got = restored.forward(&x, Mode::Eval);
        for (a, b) in expect.class_logits.data().iter().zip(got.class_logits.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn load_rejects_wrong_architecture() {
        let mut model = BevDetNet::new(&tiny(), 5).unwrap();
        let entries = model.checkpoint_entries();
        let mut other = BevDetNet::new(&ModelConfig::desk(), 5).unwrap();
        assert!(other.load_entries(&entries).is_err());
    }

    #[test]
    fn describe_lists_every_head() {
        let mut model = BevDetNet::new(&tiny(), 5).unwrap();
        let text = model.describe();
        for needle in ["head.class.weight", "head.box.weight", "head.rot.weight", "learnable parameters"] {
            assert!(text.contains(needle), "describe output missing {needle}");
        }
    }
}
