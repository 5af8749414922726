//! Dense row-major tensors and the numeric kernels shared by the graph ops.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type (`f32` for training, `f64` for gradient
/// checks).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// `C = alpha·A·B + beta·C` with arbitrary strides.
    ///
    /// # Safety
    /// The pointers and strides must describe in-bounds `m×k`, `k×n` and
    /// `m×n` matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    /// Bit pattern widened to 64 bits; used for byte-exact comparisons.
    fn bits(self) -> u64;
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// `C (m×n) = op(A)·op(B) + beta·C`. `A` is stored `m×k` (or `k×m` when
/// `ta`), `B` is stored `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], ta: bool, b: &[T], tb: bool, c: &mut [T], beta: T) {
    assert_eq!(a.len(), m * k, "gemm: A has {} elements, expected {m}×{k}", a.len());
    assert_eq!(b.len(), k * n, "gemm: B has {} elements, expected {k}×{n}", b.len());
    assert_eq!(c.len(), m * n, "gemm: C has {} elements, expected {m}×{n}", c.len());
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths are checked above and `c` is a distinct &mut borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|v| T::lit(*v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape to {shape:?}");
        self.shape = shape.to_vec();
        self
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum()
    }
}

/// Bilinear resize of `[C, H, W]` with half-pixel centers (no
/// antialiasing), the `align_corners = false` convention.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let [c, h, w] = chw(x);
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, T)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, T::lit(src - i0 as f64))
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);
    let mut out = vec![T::zero(); c * out_h * out_w];
    for ch in 0..c {
        let plane = &x.data[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let (r0, r1) = (&plane[y0 * w..y0 * w + w], &plane[y1 * w..y1 * w + w]);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                dst[oy * out_w + ox] = top + (bottom - top) * fy;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

pub(crate) fn chw<T>(x: &Tensor<T>) -> [usize; 3] {
    match x.shape[..] {
        [c, h, w] => [c, h, w],
        ref s => panic!("expected a [C, H, W] tensor, got {s:?}"),
    }
}

/// Output size of a convolution along one axis.
pub fn conv_out(n: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - kernel) / stride + 1
}

pub(crate) fn im2col<T: Scalar>(x: &[T], [c, h, w]: [usize; 3], k: usize, stride: usize, pad: usize) -> (Vec<T>, usize, usize) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let mut cols = vec![T::zero(); c * k * k * ho * wo];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[ch * h * w + iy as usize * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

pub(crate) fn col2im<T: Scalar>(cols: &[T], [c, h, w]: [usize; 3], k: usize, stride: usize, pad: usize) -> Vec<T> {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let mut x = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[ch * h * w + iy as usize * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Local correlation cost volume. Channel `(dy + d)·(2d + 1) + (dx + d)` at
/// `(i, j)` holds `<f1[:, i, j], f2[:, i + dy, j + dx]> / C`, zero where the
/// displaced position falls outside the map.
pub fn corr<T: Scalar>(f1: &Tensor<T>, f2: &Tensor<T>, max_disp: usize) -> Tensor<T> {
    let [c, h, w] = chw(f1);
    assert_eq!(f1.shape(), f2.shape(), "corr: operand shapes differ");
    let side = 2 * max_disp + 1;
    let d = max_disp as isize;
    let inv_c = T::one() / T::lit(c as f64);
    let mut out = vec![T::zero(); side * side * h * w];
    for dy in -d..=d {
        for dx in -d..=d {
            let ch_out = ((dy + d) as usize * side + (dx + d) as usize) * h * w;
            for i in 0..h {
                let i2 = i as isize + dy;
                if i2 < 0 || i2 >= h as isize {
                    continue;
                }
                for j in 0..w {
                    let j2 = j as isize + dx;
                    if j2 < 0 || j2 >= w as isize {
                        continue;
                    }
                    let (p, q) = (i * w + j, i2 as usize * w + j2 as usize);
                    let mut acc = T::zero();
                    for ch in 0..c {
                        acc += f1.data[ch * h * w + p] * f2.data[ch * h * w + q];
                    }
                    out[ch_out + p] = acc * inv_c;
                }
            }
        }
    }
    Tensor::new(&[side * side, h, w], out)
}

/// Gradients of [`corr`] with respect to both operands.
pub(crate) fn corr_backward<T: Scalar>(f1: &Tensor<T>, f2: &Tensor<T>, g: &[T], max_disp: usize) -> (Vec<T>, Vec<T>) {
    let [c, h, w] = chw(f1);
    let side = 2 * max_disp + 1;
    let d = max_disp as isize;
    let inv_c = T::one() / T::lit(c as f64);
    let mut g1 = vec![T::zero(); c * h * w];
    let mut g2 = vec![T::zero(); c * h * w];
    for dy in -d..=d {
        for dx in -d..=d {
            let ch_out = ((dy + d) as usize * side + (dx + d) as usize) * h * w;
            for i in 0..h {
                let i2 = i as isize + dy;
                if i2 < 0 || i2 >= h as isize {
                    continue;
                }
                for j in 0..w {
                    let j2 = j as isize + dx;
                    if j2 < 0 || j2 >= w as isize {
                        continue;
                    }
                    let (p, q) = (i * w + j, i2 as usize * w + j2 as usize);
                    let go = g[ch_out + p] * inv_c;
                    for ch in 0..c {
                        g1[ch * h * w + p] += go * f2.data[ch * h * w + q];
                        g2[ch * h * w + q] += go * f1.data[ch * h * w + p];
                    }
                }
            }
        }
    }
    (g1, g2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // A = [[1,2,3],[4,5,6]], B = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // Aᵀ stored as 3×2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [0.0f64; 4];
        gemm(2, 3, 2, &at, true, &bt, true, &mut c2, 0.0);
        assert_eq!(c2, c);
    }

    #[test]
    fn resize_identity_and_constant() {
        let x = Tensor::<f64>::from_f64(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(resize_bilinear(&x, 2, 3), x);
        let c = Tensor::<f64>::full(&[2, 5, 7], 3.5);
        let r = resize_bilinear(&c, 11, 4);
        assert_eq!(r.shape(), &[2, 11, 4]);
        assert!(r.data().iter().all(|v| (*v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn resize_upsample_interpolates() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2], &[0.0, 1.0]);
        let r = resize_bilinear(&x, 1, 4);
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn stride2_conv_size() {
        assert_eq!(conv_out(447, 3, 2, 1), 224);
        assert_eq!(conv_out(224, 16, 16, 0), 14);
        assert_eq!(conv_out(640, 3, 2, 1), 320);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let dims = [2, 5, 6];
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
        let (cols, ho, wo) = im2col(&x, dims, 3, 2, 1);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, dims, 3, 2, 1);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert_eq!((ho, wo), (3, 3));
    }
}
