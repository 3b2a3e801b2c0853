//! Building blocks of the backbone: context aggregation gating (CAM),
//! dual-output downsampling blocks (DB) and fusing upsampling blocks (UB).

use rand::Rng;

use crate::nn::{
    add, mul, relu, relu_backward, sigmoid, sigmoid_backward, AvgPool2d, BatchNorm2d, Conv2d,
    ConvTranspose2d, Mode, Param, Tensor4,
};

/// Multiplies features by a sigmoid gate computed from large-kernel average
/// pooled context, damping the noise from unoccupied BEV pixels:
/// `out = x * sigmoid(conv1x1(relu(conv1x1(avg_pool_7x7(x)))))`.
pub struct CamBlock {
    pool: AvgPool2d,
    squeeze: Conv2d,
    excite: Conv2d,
    cache: Option<CamCache>,
}

struct CamCache {
    input: Tensor4,
    squeezed: Tensor4,
    gate: Tensor4,
}

impl CamBlock {
    pub fn new(name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let mid = (channels / 4).max(1);
        CamBlock {
            pool: AvgPool2d::new(7, 1, 3),
            squeeze: Conv2d::new(&format!("{name}.squeeze"), channels, mid, 1, 1, 0, 1, rng),
            excite: Conv2d::new(&format!("{name}.excite"), mid, channels, 1, 1, 0, 1, rng),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> Tensor4 {
        let pooled = self.pool.forward(x, mode);
        let squeezed = self.squeeze.forward(&pooled, mode);
        let activated = relu(&squeezed);
        let excited = self.excite.forward(&activated, mode);
        let gate = sigmoid(&excited);
        let out = mul(x, &gate);
        self.cache = match mode {
            Mode::Train => Some(CamCache {
                input: x.clone(),
                squeezed,
                gate,
            }),
            Mode::Eval => None,
        };
        out
    }

    pub fn backward(&mut self, gy: &Tensor4) -> Tensor4 {
        let cache = self.cache.as_ref().expect("cam backward without cached forward");
        // Gate path: d(x*g)/dg = x.
        let g_gate = mul(gy, &cache.input);
        let g_excited = sigmoid_backward(&cache.gate, &g_gate);
        let g_activated = self.excite.backward(&g_excited);
        let g_squeezed = relu_backward(&cache.squeezed, &g_activated);
        let g_pooled = self.squeeze.backward(&g_squeezed);
        let g_via_pool = self.pool.backward(&g_pooled);
        // Direct path: d(x*g)/dx = g.
        let mut gx = mul(gy, &cache.gate);
        gx.add_assign(&g_via_pool);
        gx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.squeeze.visit_params(f);
        self.excite.visit_params(f);
    }

    pub fn visit_norms(&mut self, _f: &mut dyn FnMut(&mut BatchNorm2d)) {}

    pub fn param_count(&self) -> usize {
        self.squeeze.param_count() + self.excite.param_count()
    }
}

/// Residual feature-extraction block producing a same-resolution output and
/// a pooled, channel-doubled half-resolution output.
pub struct DownBlock {
    pub cam: Option<CamBlock>,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    skip_proj: Option<Conv2d>,
    pool: AvgPool2d,
    down_proj: Conv2d,
    cache: Option<DownCache>,
}

struct DownCache {
    bn1_out: Tensor4,
    pre_relu: Tensor4,
}

impl DownBlock {
    pub fn new(
        name: &str,
        in_channels: usize,
        width: usize,
        dilation: usize,
        with_cam: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let cam = with_cam.then(|| CamBlock::new(&format!("{name}.cam"), in_channels, rng));
        let conv1 = Conv2d::new(&format!("{name}.conv1"), in_channels, width, 3, 1, dilation, dilation, rng);
        let bn1 = BatchNorm2d::new(&format!("{name}.bn1"), width);
        let conv2 = Conv2d::new(&format!("{name}.conv2"), width, width, 3, 1, dilation, dilation, rng);
        let bn2 = BatchNorm2d::new(&format!("{name}.bn2"), width);
        let skip_proj = (in_channels != width)
            .then(|| Conv2d::new(&format!("{name}.skip"), in_channels, width, 1, 1, 0, 1, rng));
        let pool = AvgPool2d::new(2, 2, 0);
        let down_proj = Conv2d::new(&format!("{name}.down"), width, 2 * width, 1, 1, 0, 1, rng);
        DownBlock {
            cam,
            conv1,
            bn1,
            conv2,
            bn2,
            skip_proj,
            pool,
            down_proj,
            cache: None,
        }
    }

    /// Returns (same-resolution, half-resolution) features.
    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> (Tensor4, Tensor4) {
        assert!(
            x.rows() % 2 == 0 && x.cols() % 2 == 0,
            "down block needs even spatial dims, got {:?}",
            x.shape()
        );
        let gated = match &mut self.cam {
            Some(cam) => cam.forward(x, mode),
            None => x.clone(),
        };
        let bn1_out = self.bn1.forward(&self.conv1.forward(&gated, mode), mode);
        let h = relu(&bn1_out);
        let h = self.bn2.forward(&self.conv2.forward(&h, mode), mode);
        let skip = match &mut self.skip_proj {
            Some(p) => p.forward(&gated, mode),
            None => gated,
        };
        let pre_relu = add(&h, &skip);
        let same = relu(&pre_relu);
        let half = self.down_proj.forward(&self.pool.forward(&same, mode), mode);
        if mode == Mode::Train {
            self.cache = Some(DownCache { bn1_out, pre_relu });
        }
        (same, half)
    }

    /// Backward from gradients at both outputs to the input gradient.
    pub fn backward(&mut self, g_same: &Tensor4, g_half: &Tensor4) -> Tensor4 {
        let cache = self.cache.as_ref().expect("down block backward without cached forward");
        let g_pooled = self.down_proj.backward(g_half);
        let mut g_same_total = self.pool.backward(&g_pooled);
        g_same_total.add_assign(g_same);

        let g_pre = relu_backward(&cache.pre_relu, &g_same_total);
        // Residual branch.
        let g_h1 = self.conv2.backward(&self.bn2.backward(&g_pre));
        let g_bn1 = relu_backward(&cache.bn1_out, &g_h1);
        let mut g_gated = self.conv1.backward(&self.bn1.backward(&g_bn1));
        // Skip branch.
        match &mut self.skip_proj {
            Some(p) => g_gated.add_assign(&p.backward(&g_pre)),
            None => g_gated.add_assign(&g_pre),
        }
        match &mut self.cam {
            Some(cam) => cam.backward(&g_gated),
            None => g_gated,
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(cam) = &mut self.cam {
            cam.visit_params(f);
        }
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some(p) = &mut self.skip_proj {
            p.visit_params(f);
        }
        self.down_proj.visit_params(f);
    }

    pub fn visit_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d)) {
        f(&mut self.bn1);
        f(&mut self.bn2);
    }

    pub fn param_count(&self) -> usize {
        self.cam.as_ref().map_or(0, |c| c.param_count())
            + self.conv1.param_count()
            + self.bn1.param_count()
            + self.conv2.param_count()
            + self.bn2.param_count()
            + self.skip_proj.as_ref().map_or(0, |p| p.param_count())
            + self.down_proj.param_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    Sum,
    Concat,
}

/// Upsamples deeper features by 2x via transposed convolution, fuses them
/// with the same-resolution skip, then applies conv-relu-bn.
pub struct UpBlock {
    fusion: Fusion,
    up: ConvTranspose2d,
    fuse_conv: Conv2d,
    bn: BatchNorm2d,
    cache: Option<Tensor4>,
    skip_channels: usize,
}

impl UpBlock {
    pub fn new(
        name: &str,
        low_channels: usize,
        skip_channels: usize,
        fusion: Fusion,
        rng: &mut impl Rng,
    ) -> Self {
        let up = ConvTranspose2d::new(&format!("{name}.up"), low_channels, skip_channels, 2, rng);
        let fuse_in = match fusion {
            Fusion::Sum => skip_channels,
            Fusion::Concat => 2 * skip_channels,
        };
        let fuse_conv = Conv2d::new(&format!("{name}.fuse"), fuse_in, skip_channels, 3, 1, 1, 1, rng);
        let bn = BatchNorm2d::new(&format!("{name}.bn"), skip_channels);
        UpBlock {
            fusion,
            up,
            fuse_conv,
            bn,
            cache: None,
            skip_channels,
        }
    }

    pub fn forward(&mut self, low: &Tensor4, skip: &Tensor4, mode: Mode) -> Tensor4 {
        assert_eq!(
            (2 * low.rows(), 2 * low.cols()),
            (skip.rows(), skip.cols()),
            "up block: low {:?} must be half of skip {:?}",
            low.shape(),
            skip.shape()
        );
        let upsampled = self.up.forward(low, mode);
        let fused = match self.fusion {
            Fusion::Sum => add(&upsampled, skip),
            Fusion::Concat => concat_channels(&upsampled, skip),
        };
        let conv_out = self.fuse_conv.forward(&fused, mode);
        let activated = relu(&conv_out);
        let out = self.bn.forward(&activated, mode);
        if mode == Mode::Train {
            self.cache = Some(conv_out);
        }
        out
    }

    /// Returns (gradient at low, gradient at skip).
    pub fn backward(&mut self, gy: &Tensor4) -> (Tensor4, Tensor4) {
        let conv_out = self.cache.as_ref().expect("up block backward without cached forward");
        let g_act = self.bn.backward(gy);
        let g_conv = relu_backward(conv_out, &g_act);
        let g_fused = self.fuse_conv.backward(&g_conv);
        let (g_up, g_skip) = match self.fusion {
            Fusion::Sum => (g_fused.clone(), g_fused),
            Fusion::Concat => split_channels(&g_fused, self.skip_channels),
        };
        let g_low = self.up.backward(&g_up);
        (g_low, g_skip)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.up.visit_params(f);
        self.fuse_conv.visit_params(f);
        self.bn.visit_params(f);
    }

    pub fn visit_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d)) {
        f(&mut self.bn);
    }

    pub fn param_count(&self) -> usize {
        self.up.param_count() + self.fuse_conv.param_count() + self.bn.param_count()
    }
}

fn concat_channels(a: &Tensor4, b: &Tensor4) -> Tensor4 {
    assert_eq!(a.batch(), b.batch());
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    let (n, ca, cb) = (a.batch(), a.channels(), b.channels());
    let mut out = Tensor4::zeros([n, ca + cb, a.rows(), a.cols()]);
    for bi in 0..n {
        for c in 0..ca {
            out.plane_mut(bi, c).copy_from_slice(a.plane(bi, c));
        }
        for c in 0..cb {
            out.plane_mut(bi, ca + c).copy_from_slice(b.plane(bi, c));
        }
    }
    out
}

fn split_channels(t: &Tensor4, first: usize) -> (Tensor4, Tensor4) {
    let (n, c, h, w) = (t.batch(), t.channels(), t.rows(), t.cols());
    assert!(first < c);
    let mut a = Tensor4::zeros([n, first, h, w]);
    let mut b = Tensor4::zeros([n, c - first, h, w]);
    for bi in 0..n {
        for ch in 0..first {
            a.plane_mut(bi, ch).copy_from_slice(t.plane(bi, ch));
        }
        for ch in first..c {
            b.plane_mut(bi, ch - first).copy_from_slice(t.plane(bi, ch));
        }
    }
    (a, b)
}
