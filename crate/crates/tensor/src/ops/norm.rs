use crate::array::Array;
use crate::error::Result;
use crate::float::Float;
use crate::graph::Var;

impl<T: Float> Var<T> {
    /// Per-sample, per-channel normalization over the spatial axes (no affine terms).
    pub fn instance_norm(&self, eps: f64) -> Result<Var<T>> {
        let (n, c, h, w) = self.value().dims4()?;
        let hw = h * w;
        let inv_hw = T::from_f64(1.0 / hw as f64);
        let eps = T::from_f64(eps);
        let mut out = Vec::with_capacity(n * c * hw);
        let mut inv_std = Vec::with_capacity(n * c);
        for plane in self.value().data().chunks(hw) {
            let mean = plane.iter().copied().sum::<T>() * inv_hw;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_hw;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(plane.iter().map(|&v| (v - mean) * is));
        }
        Ok(Var::from_op(
            Array::from_vec(vec![n, c, h, w], out)?,
            vec![self.clone()],
            Box::new(move |g, _, y| {
                let mut dx = Vec::with_capacity(n * c * hw);
                for ((gp, yp), &is) in g.data().chunks(hw).zip(y.data().chunks(hw)).zip(&inv_std) {
                    let mg = gp.iter().copied().sum::<T>() * inv_hw;
                    let mgy = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>() * inv_hw;
                    dx.extend(gp.iter().zip(yp).map(|(&gv, &yv)| is * (gv - mg - yv * mgy)));
                }
                vec![Some(Array::from_vec(vec![n, c, h, w], dx).expect("dx"))]
            }),
        ))
    }
}
