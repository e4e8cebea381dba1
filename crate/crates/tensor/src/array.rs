use crate::error::{Result, TensorError};
use crate::float::Float;

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Array<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::shape(
                "from_vec",
                format!("shape {:?} holds {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// First element; meant for scalar results.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::shape(
                "dims4",
                format!("expected rank 4, got {:?}", self.shape),
            )),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::shape(
                "dims2",
                format!("expected rank 2, got {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold(
            (T::infinity(), T::neg_infinity()),
            |(lo, hi), &v| (lo.min(v), hi.max(v)),
        )
    }

    pub fn cast<U: Float>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Items `start..start + len` along axis 0.
    pub fn slice_outer(&self, start: usize, len: usize) -> Result<Self> {
        let outer = *self.shape.first().unwrap_or(&1);
        if start + len > outer {
            return Err(TensorError::Index {
                op: "slice_outer",
                index: start + len,
                bound: outer + 1,
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self {
            shape,
            data: self.data[start * inner..(start + len) * inner].to_vec(),
        })
    }

    /// Concatenates along axis 0.
    pub fn concat_outer(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::shape("concat_outer", "empty input"))?;
        let tail = &first.shape[1..];
        let mut outer = 0;
        let mut data = Vec::new();
        for it in items {
            if &it.shape[1..] != tail {
                return Err(TensorError::shape(
                    "concat_outer",
                    format!("{:?} vs {:?}", it.shape, first.shape),
                ));
            }
            outer += it.shape[0];
            data.extend_from_slice(&it.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = outer;
        Ok(Self { shape, data })
    }
}
