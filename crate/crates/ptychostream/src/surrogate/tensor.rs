//! Rank-4 tensors (batch, channels, height, width) over f32 or f64.
//!
//! Training runs in f32; the f64 instantiation exists for the tighter
//! finite-difference tolerance in gradient tests. [`Scalar::gemm`]
//! dispatches to the matching BLAS-style kernel so the conv layers stay
//! generic without paying for dynamic dispatch in the inner loop.

use super::SurrogateError;
use num_traits::Float;

/// Element type of the network: f32 in production, f64 in checks.
pub trait Scalar: Float + Send + Sync + std::fmt::Debug + 'static {
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self {
        Self::from(v).expect("f64 representable")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::cast::<Self, f64>(self).expect("scalar fits f64")
    }
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        assert!(a.len() >= gemm_span(m, k, rsa, csa));
        assert!(b.len() >= gemm_span(k, n, rsb, csb));
        assert!(c.len() >= gemm_span(m, n, rsc, csc));
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        assert!(a.len() >= gemm_span(m, k, rsa, csa));
        assert!(b.len() >= gemm_span(k, n, rsb, csb));
        assert!(c.len() >= gemm_span(m, n, rsc, csc));
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

/// Number of elements a (rows, cols) matrix with the given strides spans.
fn gemm_span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

/// Row-major (batch, channels, height, width) tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4Of<S> {
    shape: (usize, usize, usize, usize),
    data: Vec<S>,
}

/// The production (f32) tensor.
pub type Tensor4 = Tensor4Of<f32>;

impl<S: Scalar> Tensor4Of<S> {
    pub fn zeros(shape: (usize, usize, usize, usize)) -> Self {
        Tensor4Of { shape, data: vec![S::zero(); shape.0 * shape.1 * shape.2 * shape.3] }
    }

    pub fn from_data(
        shape: (usize, usize, usize, usize),
        data: Vec<S>,
    ) -> Result<Self, SurrogateError> {
        let need = shape.0 * shape.1 * shape.2 * shape.3;
        if data.len() != need {
            return Err(SurrogateError::BadTensor { expected: need, got: data.len() });
        }
        Ok(Tensor4Of { shape, data })
    }

    pub fn from_fn(
        shape: (usize, usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize, usize) -> S,
    ) -> Self {
        let mut t = Self::zeros(shape);
        let (nb, nc, nh, nw) = shape;
        let mut i = 0;
        for b in 0..nb {
            for c in 0..nc {
                for y in 0..nh {
                    for x in 0..nw {
                        t.data[i] = f(b, c, y, x);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> S {
        let (_, nc, nh, nw) = self.shape;
        self.data[((b * nc + c) * nh + y) * nw + x]
    }

    /// Contiguous (channels, height, width) block of one batch element.
    pub fn batch(&self, b: usize) -> &[S] {
        let per = self.shape.1 * self.shape.2 * self.shape.3;
        &self.data[b * per..(b + 1) * per]
    }

    pub fn batch_mut(&mut self, b: usize) -> &mut [S] {
        let per = self.shape.1 * self.shape.2 * self.shape.3;
        &mut self.data[b * per..(b + 1) * per]
    }

    /// Stacks tensors along the batch axis; all other dims must agree.
    pub fn concat_batch(parts: &[&Tensor4Of<S>]) -> Result<Self, SurrogateError> {
        let first = parts.first().ok_or(SurrogateError::EmptyBatch)?;
        let (_, c, h, w) = first.shape;
        let mut data = Vec::new();
        let mut total = 0;
        for p in parts {
            if (p.shape.1, p.shape.2, p.shape.3) != (c, h, w) {
                return Err(SurrogateError::ShapeMismatch {
                    context: "concat_batch",
                    expected: (1, c, h, w),
                    got: p.shape,
                });
            }
            total += p.shape.0;
            data.extend_from_slice(&p.data);
        }
        Tensor4Of::from_data((total, c, h, w), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor4Of::<f32>::from_fn((2, 3, 4, 5), |b, c, y, x| {
            (b * 1000 + c * 100 + y * 10 + x) as f32
        });
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.numel() - 1], 1234.0);
        assert_eq!(t.batch(1)[0], 1000.0);
    }

    #[test]
    fn from_data_checks_length() {
        assert!(Tensor4Of::<f32>::from_data((1, 1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Tensor4Of::<f32>::from_data((1, 1, 2, 2), vec![0.0; 4]).is_ok());
    }

    #[test]
    fn concat_batch_stacks() {
        let a = Tensor4Of::<f32>::from_fn((1, 1, 2, 2), |_, _, y, x| (y + x) as f32);
        let b = Tensor4Of::<f32>::from_fn((2, 1, 2, 2), |bb, _, y, x| (bb * 10 + y + x) as f32);
        let cat = Tensor4Of::concat_batch(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), (3, 1, 2, 2));
        assert_eq!(cat.at(0, 0, 1, 1), 2.0);
        assert_eq!(cat.at(2, 0, 0, 0), 10.0);
        let bad = Tensor4Of::<f32>::zeros((1, 2, 2, 2));
        assert!(Tensor4Of::concat_batch(&[&a, &bad]).is_err());
    }

    #[test]
    fn gemm_matches_naive() {
        // (2x3) * (3x2) row-major
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f32, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f32; 4];
        f32::gemm(2, 3, 2, 1.0, &a, 3, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // transposed-A view: strides swap makes A^T available in place
        let mut ct = [0.0f32; 9];
        f32::gemm(3, 2, 3, 1.0, &a, 1, 3, &a, 3, 1, 0.0, &mut ct, 3, 1);
        // A^T A is symmetric
        assert_eq!(ct[1], ct[3]);
        assert_eq!(ct[2], ct[6]);
    }
}
