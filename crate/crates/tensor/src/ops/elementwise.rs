use crate::array::Array;
use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::Var;

fn same_shape<T: Float>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<T: Float> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        same_shape("add", self, other)?;
        let out = self.value().zip_map(other.value(), |a, b| a + b);
        Ok(Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        same_shape("sub", self, other)?;
        let out = self.value().zip_map(other.value(), |a, b| a - b);
        Ok(Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", self, other)?;
        let out = self.value().zip_map(other.value(), |a, b| a * b);
        Ok(Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, xs, _| {
                vec![
                    xs[0]
                        .requires_grad()
                        .then(|| g.zip_map(xs[1].value(), |g, b| g * b)),
                    xs[1]
                        .requires_grad()
                        .then(|| g.zip_map(xs[0].value(), |g, a| g * a)),
                ]
            }),
        ))
    }

    pub fn scale(&self, c: T) -> Var<T> {
        Var::from_op(
            self.value().map(|v| v * c),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.map(|v| v * c))]),
        )
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        Var::from_op(
            self.value().map(|v| v + c),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.clone())]),
        )
    }

    pub fn square(&self) -> Var<T> {
        Var::from_op(
            self.value().map(|v| v * v),
            vec![self.clone()],
            Box::new(|g, xs, _| {
                let two = T::one() + T::one();
                vec![Some(g.zip_map(xs[0].value(), |g, x| two * g * x))]
            }),
        )
    }

    pub fn relu(&self) -> Var<T> {
        Var::from_op(
            self.value().map(|v| v.max(T::zero())),
            vec![self.clone()],
            Box::new(|g, xs, _| {
                vec![Some(g.zip_map(xs[0].value(), |g, x| {
                    if x > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        Var::from_op(
            self.value().map(|v| if v > T::zero() { v } else { v * slope }),
            vec![self.clone()],
            Box::new(move |g, xs, _| {
                vec![Some(g.zip_map(xs[0].value(), |g, x| {
                    if x > T::zero() {
                        g
                    } else {
                        g * slope
                    }
                }))]
            }),
        )
    }

    pub fn tanh(&self) -> Var<T> {
        Var::from_op(
            self.value().map(|v| v.tanh()),
            vec![self.clone()],
            Box::new(|g, _, y| vec![Some(g.zip_map(y, |g, y| g * (T::one() - y * y)))]),
        )
    }

    /// Sum of all elements, as a rank-0 value.
    pub fn sum_all(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        Var::from_op(
            Array::scalar(self.value().sum()),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(Array::full(shape.clone(), g.item()))]),
        )
    }

    /// Mean of all elements, as a rank-0 value.
    pub fn mean_all(&self) -> Var<T> {
        let n = T::from_f64(self.value().len() as f64);
        let shape = self.shape().to_vec();
        Var::from_op(
            Array::scalar(self.value().sum() / n),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(Array::full(shape.clone(), g.item() / n))]),
        )
    }

    /// Mean over the spatial axes of an NCHW value, giving `[N, C]`.
    pub fn spatial_mean(&self) -> Result<Var<T>> {
        let (n, c, h, w) = self.value().dims4()?;
        let hw = h * w;
        let scale = T::from_f64(1.0 / hw as f64);
        let out: Vec<T> = self
            .value()
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * scale)
            .collect();
        Ok(Var::from_op(
            Array::from_vec(vec![n, c], out)?,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dx = Vec::with_capacity(n * c * hw);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat(gv * scale).take(hw));
                }
                vec![Some(Array::from_vec(vec![n, c, h, w], dx).expect("shape"))]
            }),
        ))
    }
}

/// Sum of several values with the same shape.
pub fn sum_vars<T: Float>(vars: &[Var<T>]) -> Result<Var<T>> {
    let mut it = vars.iter();
    let first = it
        .next()
        .ok_or_else(|| TensorError::shape("sum_vars", "empty input"))?
        .clone();
    it.try_fold(first, |acc, v| acc.add(v))
}
