//! Dense numeric core: a row-major matrix, a tanh MLP with reverse- and
//! forward-mode derivatives, and an Adam optimizer over flat parameter
//! vectors.
//!
//! Flat parameter ordering is fixed: layers in order, and within a layer the
//! weight matrix (shape `out x in`, row-major) followed by the bias vector.

use crate::error::{DncError, Result};
use crate::rng::Rng;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DncError::shape("matrix data", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Stacks equal-length rows. An empty slice gives a `0 x 0` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(DncError::shape("matrix row", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Strided row/column layout of a matrix operand.
#[derive(Clone, Copy)]
struct Layout {
    rs: isize,
    cs: isize,
}

const ROW_MAJOR: fn(usize) -> Layout = |cols| Layout {
    rs: cols as isize,
    cs: 1,
};
const TRANSPOSED: fn(usize) -> Layout = |cols| Layout {
    rs: 1,
    cs: cols as isize,
};

/// `C = A B + beta C` for an `m x k` operand `A` and a `k x n` operand `B`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
    lc: Layout,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            lc.rs,
            lc.cs,
        );
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Hyperbolic tangent through a single `exp`; within 4e-16 of `f64::tanh`
/// and about twice as fast.
#[inline]
pub fn tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

/// Parameters of a fully connected network with tanh hidden layers and a
/// linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    weights: Vec<Mat>,
    biases: Vec<Vec<f64>>,
}

/// Per-layer activations of a batched forward pass; `activations[0]` is the
/// input and the last entry is the (linear) output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Mat>,
}

impl ForwardCache {
    pub fn output(&self) -> &Mat {
        self.activations.last().expect("cache holds at least the input")
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].rows()
    }
}

impl MlpParams {
    fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
        if layer_sizes.len() < 2 {
            return Err(DncError::Config(format!(
                "an MLP needs at least input and output sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(DncError::Config(format!(
                "layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        Ok(())
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        Self::check_sizes(layer_sizes)?;
        let weights = layer_sizes.windows(2).map(|w| Mat::zeros(w[1], w[0])).collect();
        let biases = layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    pub fn init(layer_sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut params = Self::zeros(layer_sizes)?;
        for w in &mut params.weights {
            let bound = 1.0 / (w.cols() as f64).sqrt();
            for v in w.as_mut_slice() {
                *v = rng.uniform_range(-bound, bound);
            }
        }
        Ok(params)
    }

    pub fn from_parts(layer_sizes: &[usize], weights: Vec<Mat>, biases: Vec<Vec<f64>>) -> Result<Self> {
        let template = Self::zeros(layer_sizes)?;
        if weights.len() != template.weights.len() {
            return Err(DncError::shape("layer count", template.weights.len(), weights.len()));
        }
        if biases.len() != template.biases.len() {
            return Err(DncError::shape("bias count", template.biases.len(), biases.len()));
        }
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            let (out, inp) = (layer_sizes[l + 1], layer_sizes[l]);
            if w.rows() != out {
                return Err(DncError::shape("weight rows", out, w.rows()));
            }
            if w.cols() != inp {
                return Err(DncError::shape("weight cols", inp, w.cols()));
            }
            if b.len() != out {
                return Err(DncError::shape("bias length", out, b.len()));
            }
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self, layer: usize) -> &Mat {
        &self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            flat.extend_from_slice(w.as_slice());
            flat.extend_from_slice(b);
        }
        flat
    }

    /// Builds parameters with `self`'s architecture from a flat vector.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.param_count() {
            return Err(DncError::shape("flat parameter vector", self.param_count(), flat.len()));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for (w, b) in out.weights.iter_mut().zip(out.biases.iter_mut()) {
            let n = w.as_slice().len();
            w.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
            let m = b.len();
            b.copy_from_slice(&flat[offset..offset + m]);
            offset += m;
        }
        Ok(out)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(DncError::shape("mlp input", self.input_dim(), input.len()));
        }
        let last = self.num_layers() - 1;
        let mut x = input.to_vec();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z: Vec<f64> = (0..w.rows()).map(|o| b[o] + dot(w.row(o), &x)).collect();
            if l < last {
                z.iter_mut().for_each(|v| *v = tanh(*v));
            }
            x = z;
        }
        Ok(x)
    }

    /// Gradient of `<forward(input), output_grad>` with respect to the flat
    /// parameters and the input.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = Mat::from_vec(1, input.len(), input.to_vec())?;
        let cache = self.forward_batch(&x)?;
        let g = Mat::from_vec(1, output_grad.len(), output_grad.to_vec())?;
        let (pg, ig) = self.backward_batch(&cache, &g, true)?;
        Ok((pg, ig.expect("input grad requested").into_vec()))
    }

    pub fn forward_batch(&self, inputs: &Mat) -> Result<ForwardCache> {
        if inputs.cols() != self.input_dim() {
            return Err(DncError::shape("mlp batch input", self.input_dim(), inputs.cols()));
        }
        let last = self.num_layers() - 1;
        let mut activations = Vec::with_capacity(self.num_layers() + 1);
        activations.push(inputs.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let x = activations.last().expect("non-empty");
            let (n, in_dim, out_dim) = (x.rows(), w.cols(), w.rows());
            let mut z = Mat::zeros(n, out_dim);
            for r in 0..n {
                z.row_mut(r).copy_from_slice(b);
            }
            gemm(
                n,
                in_dim,
                out_dim,
                x.as_slice(),
                ROW_MAJOR(in_dim),
                w.as_slice(),
                TRANSPOSED(in_dim),
                1.0,
                z.as_mut_slice(),
                ROW_MAJOR(out_dim),
            );
            if l < last {
                z.as_mut_slice().iter_mut().for_each(|v| *v = tanh(*v));
            }
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    /// Reverse pass for a batch: returns the flat parameter gradient of
    /// `sum_r <output_r, output_grad_r>` and, optionally, the per-row input
    /// gradients.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        output_grad: &Mat,
        want_input_grad: bool,
    ) -> Result<(Vec<f64>, Option<Mat>)> {
        let n = cache.batch_size();
        if output_grad.rows() != n {
            return Err(DncError::shape("output gradient rows", n, output_grad.rows()));
        }
        if output_grad.cols() != self.output_dim() {
            return Err(DncError::shape(
                "output gradient cols",
                self.output_dim(),
                output_grad.cols(),
            ));
        }
        let mut grad = vec![0.0; self.param_count()];
        let offsets = self.layer_offsets();
        let last = self.num_layers() - 1;
        let mut delta = output_grad.clone();
        let mut input_grad = None;
        for l in (0..self.num_layers()).rev() {
            let w = &self.weights[l];
            let x = &cache.activations[l];
            let (in_dim, out_dim) = (w.cols(), w.rows());
            if l < last {
                let h = &cache.activations[l + 1];
                for (d, hv) in delta.as_mut_slice().iter_mut().zip(h.as_slice()) {
                    *d *= 1.0 - hv * hv;
                }
            }
            let (wg, bg) = grad[offsets[l]..offsets[l] + out_dim * in_dim + out_dim].split_at_mut(out_dim * in_dim);
            gemm(
                out_dim,
                n,
                in_dim,
                delta.as_slice(),
                TRANSPOSED(out_dim),
                x.as_slice(),
                ROW_MAJOR(in_dim),
                1.0,
                wg,
                ROW_MAJOR(in_dim),
            );
            for r in 0..n {
                for (b, g) in bg.iter_mut().zip(delta.row(r)) {
                    *b += g;
                }
            }
            if l > 0 || want_input_grad {
                let mut prev = Mat::zeros(n, in_dim);
                gemm(
                    n,
                    out_dim,
                    in_dim,
                    delta.as_slice(),
                    ROW_MAJOR(out_dim),
                    w.as_slice(),
                    ROW_MAJOR(in_dim),
                    0.0,
                    prev.as_mut_slice(),
                    ROW_MAJOR(in_dim),
                );
                if l == 0 {
                    input_grad = Some(prev);
                } else {
                    delta = prev;
                }
            }
        }
        Ok((grad, input_grad))
    }

    /// Forward-mode directional derivative of the batch outputs along the
    /// flat parameter direction `direction`.
    pub fn jvp_batch(&self, cache: &ForwardCache, direction: &[f64]) -> Result<Mat> {
        if direction.len() != self.param_count() {
            return Err(DncError::shape("jvp direction", self.param_count(), direction.len()));
        }
        let n = cache.batch_size();
        let offsets = self.layer_offsets();
        let last = self.num_layers() - 1;
        // Tangent of the current layer input; the network input has none.
        let mut tangent: Option<Mat> = None;
        for l in 0..self.num_layers() {
            let w = &self.weights[l];
            let x = &cache.activations[l];
            let (in_dim, out_dim) = (w.cols(), w.rows());
            let dw = &direction[offsets[l]..offsets[l] + out_dim * in_dim];
            let db = &direction[offsets[l] + out_dim * in_dim..offsets[l] + out_dim * in_dim + out_dim];
            let mut t = Mat::zeros(n, out_dim);
            for r in 0..n {
                t.row_mut(r).copy_from_slice(db);
            }
            gemm(
                n,
                in_dim,
                out_dim,
                x.as_slice(),
                ROW_MAJOR(in_dim),
                dw,
                TRANSPOSED(in_dim),
                1.0,
                t.as_mut_slice(),
                ROW_MAJOR(out_dim),
            );
            if let Some(tin) = &tangent {
                gemm(
                    n,
                    in_dim,
                    out_dim,
                    tin.as_slice(),
                    ROW_MAJOR(in_dim),
                    w.as_slice(),
                    TRANSPOSED(in_dim),
                    1.0,
                    t.as_mut_slice(),
                    ROW_MAJOR(out_dim),
                );
            }
            if l < last {
                let h = &cache.activations[l + 1];
                for (tv, hv) in t.as_mut_slice().iter_mut().zip(h.as_slice()) {
                    *tv *= 1.0 - hv * hv;
                }
            }
            tangent = Some(t);
        }
        Ok(tangent.expect("at least one layer"))
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.num_layers());
        let mut acc = 0;
        for w in self.layer_sizes.windows(2) {
            offsets.push(acc);
            acc += w[0] * w[1] + w[1];
        }
        offsets
    }
}

/// Adam over a flat parameter vector (Kingma & Ba defaults).
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One descent step on `params` given the loss gradient `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn tanh_matches_std() {
        for x in [
            0.0,
            -0.0,
            1e-300,
            1e-8,
            -0.3,
            0.5,
            2.0,
            -19.0,
            400.0,
            -400.0,
            f64::INFINITY,
            f64::NEG_INFINITY,
        ] {
            assert!((tanh(x) - x.tanh()).abs() <= 4e-16, "{x}");
        }
        assert!(tanh(f64::NAN).is_nan());
    }

    proptest! {
        #[test]
        fn tanh_close_to_std(x in -40.0f64..40.0) {
            prop_assert!((tanh(x) - x.tanh()).abs() <= 4e-16);
        }
    }

    /// Straight-line forward pass for a 2-3-1 net, written out by hand.
    fn hand_forward_231(p: &MlpParams, x: &[f64]) -> f64 {
        let w0 = p.weights(0);
        let b0 = p.biases(0);
        let mut h = [0.0; 3];
        for (j, hj) in h.iter_mut().enumerate() {
            *hj = (w0.get(j, 0) * x[0] + w0.get(j, 1) * x[1] + b0[j]).tanh();
        }
        let w1 = p.weights(1);
        w1.get(0, 0) * h[0] + w1.get(0, 1) * h[1] + w1.get(0, 2) * h[2] + p.biases(1)[0]
    }

    fn output_dot(p: &MlpParams, x: &[f64], g: &[f64]) -> f64 {
        dot(&p.forward(x).unwrap(), g)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(p.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn affine_net() {
        let w = Mat::from_vec(1, 1, vec![2.0]).unwrap();
        let p = MlpParams::from_parts(&[1, 1], vec![w], vec![vec![3.0]]).unwrap();
        assert_eq!(p.forward(&[1.5]).unwrap(), vec![2.0 * 1.5 + 3.0]);
        assert_eq!(p.flatten(), vec![2.0, 3.0]);
        let (pg, ig) = p.backward(&[1.5], &[1.0]).unwrap();
        assert_eq!(pg, vec![1.5, 1.0]);
        assert_eq!(ig, vec![2.0]);
    }

    #[test]
    fn param_count_2_2() {
        assert_eq!(MlpParams::zeros(&[2, 2]).unwrap().param_count(), 6);
    }

    #[test]
    fn matches_hand_coded_forward() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let p = MlpParams::init(&[2, 3, 1], &mut rng).unwrap();
            let x = [rng.normal(), rng.normal()];
            let got = p.forward(&x).unwrap()[0];
            assert!((got - hand_forward_231(&p, &x)).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_output_grad_gives_zero() {
        let mut rng = Rng::new(9);
        let p = MlpParams::init(&[3, 4, 2], &mut rng).unwrap();
        let (pg, ig) = p.backward(&[0.3, 0.1, -0.2], &[0.0, 0.0]).unwrap();
        assert!(pg.iter().all(|v| *v == 0.0));
        assert!(ig.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let p = MlpParams::zeros(&[3, 2]).unwrap();
        assert!(matches!(p.forward(&[1.0]), Err(DncError::Shape { .. })));
        assert!(matches!(
            p.backward(&[1.0, 2.0, 3.0], &[1.0]),
            Err(DncError::Shape { .. })
        ));
        assert!(matches!(p.unflatten(&[0.0; 7]), Err(DncError::Shape { .. })));
        assert!(MlpParams::zeros(&[3]).is_err());
    }

    #[test]
    fn finite_difference_4_8_3() {
        let mut rng = Rng::new(21);
        let p = MlpParams::init(&[4, 8, 3], &mut rng).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let g: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let (pg, ig) = p.backward(&x, &g).unwrap();
        let flat = p.flatten();
        let h = 1e-5;
        for k in 0..flat.len() {
            let mut up = flat.clone();
            up[k] += h;
            let mut dn = flat.clone();
            dn[k] -= h;
            let fd = (output_dot(&p.unflatten(&up).unwrap(), &x, &g) - output_dot(&p.unflatten(&dn).unwrap(), &x, &g))
                / (2.0 * h);
            assert!(rel_err(pg[k], fd) < 1e-6, "param {k}: {} vs {fd}", pg[k]);
        }
        for k in 0..x.len() {
            let mut up = x.clone();
            up[k] += h;
            let mut dn = x.clone();
            dn[k] -= h;
            let fd = (output_dot(&p, &up, &g) - output_dot(&p, &dn, &g)) / (2.0 * h);
            assert!(rel_err(ig[k], fd) < 1e-6);
        }
    }

    #[test]
    fn jvp_matches_finite_difference() {
        let mut rng = Rng::new(4);
        let p = MlpParams::init(&[3, 6, 5, 2], &mut rng).unwrap();
        let x = Mat::from_rows(&[vec![0.2, -0.4, 1.0], vec![1.5, 0.0, -0.3]]).unwrap();
        let dir: Vec<f64> = (0..p.param_count()).map(|_| rng.normal()).collect();
        let cache = p.forward_batch(&x).unwrap();
        let jv = p.jvp_batch(&cache, &dir).unwrap();
        let flat = p.flatten();
        let h = 1e-6;
        let shifted = |s: f64| {
            let v: Vec<f64> = flat.iter().zip(&dir).map(|(a, d)| a + s * d).collect();
            p.unflatten(&v).unwrap().forward_batch(&x).unwrap().output().clone()
        };
        let (up, dn) = (shifted(h), shifted(-h));
        for i in 0..jv.as_slice().len() {
            let fd = (up.as_slice()[i] - dn.as_slice()[i]) / (2.0 * h);
            assert!(rel_err(jv.as_slice()[i], fd) < 1e-6);
        }
    }

    #[test]
    fn batch_backward_sums_rows() {
        let mut rng = Rng::new(8);
        let p = MlpParams::init(&[2, 4, 2], &mut rng).unwrap();
        let xs = [vec![0.1, 0.2], vec![-1.0, 0.5], vec![0.3, 0.3]];
        let gs = [vec![1.0, 0.0], vec![0.5, -2.0], vec![0.0, 1.0]];
        let cache = p.forward_batch(&Mat::from_rows(&xs).unwrap()).unwrap();
        let (batch, _) = p.backward_batch(&cache, &Mat::from_rows(&gs).unwrap(), false).unwrap();
        let mut summed = vec![0.0; p.param_count()];
        for (x, g) in xs.iter().zip(&gs) {
            let (pg, _) = p.backward(x, g).unwrap();
            summed.iter_mut().zip(pg).for_each(|(s, v)| *s += v);
        }
        for (a, b) in batch.iter().zip(&summed) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = MlpParams::init(&[3, 16, 2], &mut Rng::new(99)).unwrap();
        let b = MlpParams::init(&[3, 16, 2], &mut Rng::new(99)).unwrap();
        assert_eq!(a, b);
        let bound = 1.0 / 3f64.sqrt();
        assert!(a.weights(0).as_slice().iter().all(|v| v.abs() <= bound));
        assert!(a.biases(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g = vec![2.0 * x[0], 2.0 * x[1]];
            opt.step(&mut x, &g);
        }
        assert!(x[0].abs() < 1e-2 && x[1].abs() < 1e-2);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_bijection(
            sizes in proptest::collection::vec(1usize..6, 2..5),
            seed in any::<u64>(),
        ) {
            let template = MlpParams::zeros(&sizes).unwrap();
            let mut rng = Rng::new(seed);
            let v: Vec<f64> = (0..template.param_count()).map(|_| rng.normal() * 10.0).collect();
            let p = template.unflatten(&v).unwrap();
            prop_assert_eq!(p.flatten(), v);
            prop_assert_eq!(p.unflatten(&p.flatten()).unwrap(), p);
        }
    }
}
