use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense tensor of rank 1 through 4, row-major, `(N, C, H, W)` order for
/// rank-4 activations and `(C_out, C_in, kH, kW)` for conv weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: &[usize], data: Vec<S>) -> Result<Self> {
        check_dims(dims)?;
        let want: usize = dims.iter().product();
        if data.len() != want {
            return Err(Error::Shape(format!(
                "dims {:?} need {} elements, got {}",
                dims,
                want,
                data.len()
            )));
        }
        Ok(Self { dims: dims.to_vec(), data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        let n: usize = dims.iter().product();
        Ok(Self { dims: dims.to_vec(), data: vec![S::zero(); n] })
    }

    pub fn full(dims: &[usize], v: S) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        t.data.iter_mut().for_each(|x| *x = v);
        Ok(t)
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Size along one axis.
    pub fn size(&self, axis: usize) -> usize {
        self.dims[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Same data under new dims; element count must match.
    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        Self::new(dims, self.data.clone())
    }

    #[inline]
    pub fn idx2(&self, a: usize, b: usize) -> usize {
        debug_assert_eq!(self.rank(), 2);
        a * self.dims[1] + b
    }

    #[inline]
    pub fn idx4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn at2(&self, a: usize, b: usize) -> S {
        self.data[self.idx2(a, b)]
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        self.data[self.idx4(n, c, h, w)]
    }

    #[inline]
    pub fn set4(&mut self, n: usize, c: usize, h: usize, w: usize, v: S) {
        let i = self.idx4(n, c, h, w);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { dims: self.dims.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "elementwise add on {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(Self { dims: self.dims.clone(), data })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "elementwise add on {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: S) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn fill_uniform(&mut self, rng: &mut impl Rng, lo: f64, hi: f64) {
        for x in self.data.iter_mut() {
            *x = S::from_f64_lossy(rng.gen_range(lo..hi));
        }
    }

    /// New tensor made of the given axis-0 rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let row = self.len() / self.dims[0];
        let mut dims = self.dims.clone();
        dims[0] = indices.len();
        let mut data = Vec::with_capacity(row * indices.len());
        for &i in indices {
            if i >= self.dims[0] {
                return Err(Error::Shape(format!(
                    "row {i} out of range for axis-0 size {}",
                    self.dims[0]
                )));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        Self::new(&dims, data)
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::Shape(format!("rank must be 1..=4, got dims {:?}", dims)));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("zero-sized axis in dims {:?}", dims)));
    }
    Ok(())
}
