use std::fmt;

/// Dense 4-axis tensor with shape (batch, channel, row, col), row-major with
/// the column axis innermost.
///
/// Values are stored as `f64`. The layer gradient checks run central finite
/// differences at h = 1e-3 against tolerances down to 1e-4; single-precision
/// storage leaves too little headroom between truncation and round-off for
/// those checks to pass reliably, so the whole stack computes in f64 and
/// only the on-disk checkpoint payload is f32.
#[derive(Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        let len = shape.iter().product();
        Tensor4 {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor4 { shape, data }
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor4 {
            shape,
            data: vec![value; len],
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Flat offset of element (n, c, r, col).
    #[inline]
    pub fn idx(&self, n: usize, c: usize, r: usize, col: usize) -> usize {
        debug_assert!(n < self.shape[0] && c < self.shape[1] && r < self.shape[2] && col < self.shape[3]);
        ((n * self.shape[1] + c) * self.shape[2] + r) * self.shape[3] + col
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, r: usize, col: usize) -> f64 {
        self.data[self.idx(n, c, r, col)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, r: usize, col: usize, v: f64) {
        let i = self.idx(n, c, r, col);
        self.data[i] = v;
    }

    /// Contiguous row (n, c, r, 0..cols) as a slice.
    #[inline]
    pub fn row(&self, n: usize, c: usize, r: usize) -> &[f64] {
        let start = self.idx(n, c, r, 0);
        &self.data[start..start + self.shape[3]]
    }

    #[inline]
    pub fn row_mut(&mut self, n: usize, c: usize, r: usize) -> &mut [f64] {
        let start = self.idx(n, c, r, 0);
        let w = self.shape[3];
        &mut self.data[start..start + w]
    }

    /// Contiguous (rows * cols) plane for one (batch, channel) pair.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor4) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn iter_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor4{:?} [{} values]",
            self.shape,
            self.data.len()
        )
    }
}

/// A named learnable parameter with its gradient accumulator.
///
/// Layers own their parameters; the optimizer walks them through
/// `visit_params` on the model. Names are stable across runs and double as
/// checkpoint keys.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(data.len(), len, "param data length mismatch");
        Param {
            name: name.into(),
            shape,
            grad: vec![0.0; len],
            data,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len: usize = shape.iter().product();
        Param::new(name, shape, vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grad {
            *g = 0.0;
        }
    }
}
