//! Ops on `[rows, features]` matrices: projection MLPs, similarity and softmax losses.

use crate::array::Array;
use crate::error::{Result, TensorError};
use crate::float::{gemm, Float};
use crate::graph::Var;

impl<T: Float> Var<T> {
    /// `x W^T + b` with `x: [r, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let (r, fin) = self.value().dims2()?;
        let (fout, wfin) = weight.value().dims2()?;
        if wfin != fin {
            return Err(TensorError::shape(
                "linear",
                format!("input width {fin}, weight expects {wfin}"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [fout] {
                return Err(TensorError::shape("linear", format!("bias {:?}", b.shape())));
            }
        }
        let mut out = vec![T::zero(); r * fout];
        gemm(r, fin, fout, self.value().data(), false, weight.value().data(), true, &mut out, false);
        if let Some(b) = bias {
            for row in out.chunks_mut(fout) {
                for (v, &bv) in row.iter_mut().zip(b.value().data()) {
                    *v += bv;
                }
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        Ok(Var::from_op(
            Array::from_vec(vec![r, fout], out)?,
            inputs,
            Box::new(move |g, xs, _| {
                let gd = g.data();
                let dx = xs[0].requires_grad().then(|| {
                    let mut dx = vec![T::zero(); r * fin];
                    gemm(r, fout, fin, gd, false, xs[1].value().data(), false, &mut dx, false);
                    Array::from_vec(vec![r, fin], dx).expect("dx")
                });
                let dw = xs[1].requires_grad().then(|| {
                    let mut dw = vec![T::zero(); fout * fin];
                    gemm(fout, r, fin, gd, true, xs[0].value().data(), false, &mut dw, false);
                    Array::from_vec(vec![fout, fin], dw).expect("dw")
                });
                let mut res = vec![dx, dw];
                if xs.len() == 3 {
                    res.push(xs[2].requires_grad().then(|| {
                        let mut db = vec![T::zero(); fout];
                        for row in gd.chunks(fout) {
                            for (acc, &v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        Array::from_vec(vec![fout], db).expect("db")
                    }));
                }
                res
            }),
        ))
    }

    /// `A B^T` with `A: [m, k]`, `B: [n, k]`.
    pub fn matmul_nt(&self, other: &Var<T>) -> Result<Var<T>> {
        let (m, k) = self.value().dims2()?;
        let (n, k2) = other.value().dims2()?;
        if k != k2 {
            return Err(TensorError::shape(
                "matmul_nt",
                format!("[{m},{k}] x [{n},{k2}]^T"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value().data(), false, other.value().data(), true, &mut out, false);
        Ok(Var::from_op(
            Array::from_vec(vec![m, n], out)?,
            vec![self.clone(), other.clone()],
            Box::new(move |g, xs, _| {
                let gd = g.data();
                let da = xs[0].requires_grad().then(|| {
                    let mut d = vec![T::zero(); m * k];
                    gemm(m, n, k, gd, false, xs[1].value().data(), false, &mut d, false);
                    Array::from_vec(vec![m, k], d).expect("da")
                });
                let db = xs[1].requires_grad().then(|| {
                    let mut d = vec![T::zero(); n * k];
                    gemm(n, m, k, gd, true, xs[0].value().data(), false, &mut d, false);
                    Array::from_vec(vec![n, k], d).expect("db")
                });
                vec![da, db]
            }),
        ))
    }

    /// Scales each row to unit L2 norm (rows with norm below 1e-12 are divided by 1e-12).
    pub fn l2_normalize_rows(&self) -> Result<Var<T>> {
        let (r, c) = self.value().dims2()?;
        let floor = T::from_f64(1e-12);
        let norms: Vec<T> = self
            .value()
            .data()
            .chunks(c)
            .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor))
            .collect();
        let out: Vec<T> = self
            .value()
            .data()
            .chunks(c)
            .zip(&norms)
            .flat_map(|(row, &nrm)| row.iter().map(move |&v| v / nrm))
            .collect();
        Ok(Var::from_op(
            Array::from_vec(vec![r, c], out)?,
            vec![self.clone()],
            Box::new(move |g, _, y| {
                let mut dx = Vec::with_capacity(r * c);
                for ((gr, yr), &nrm) in g.data().chunks(c).zip(y.data().chunks(c)).zip(&norms) {
                    if nrm <= floor {
                        dx.extend(gr.iter().map(|&gv| gv / nrm));
                        continue;
                    }
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    dx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| (gv - yv * dot) / nrm));
                }
                vec![Some(Array::from_vec(vec![r, c], dx).expect("dx"))]
            }),
        ))
    }

    /// Mean over rows of `-ln(max(softmax(row)[target], eps))`.
    pub fn cross_entropy_rows(&self, targets: &[usize], eps: f64) -> Result<Var<T>> {
        let (r, k) = self.value().dims2()?;
        if targets.len() != r {
            return Err(TensorError::shape(
                "cross_entropy_rows",
                format!("{r} rows but {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::Index {
                op: "cross_entropy_rows",
                index: bad,
                bound: k,
            });
        }
        let ln_eps = T::from_f64(eps.ln());
        let mut probs = Vec::with_capacity(r * k);
        let mut clamped = Vec::with_capacity(r);
        let mut total = T::zero();
        for (row, &t) in self.value().data().chunks(k).zip(targets) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
            let logp = row[t] - lse;
            let is_clamped = logp < ln_eps;
            clamped.push(is_clamped);
            total -= if is_clamped { ln_eps } else { logp };
        }
        let inv_r = T::from_f64(1.0 / r.max(1) as f64);
        let targets = targets.to_vec();
        Ok(Var::from_op(
            Array::scalar(total * inv_r),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let scale = g.item() * inv_r;
                let mut dx = Vec::with_capacity(r * k);
                for ((pr, &t), &cl) in probs.chunks(k).zip(&targets).zip(&clamped) {
                    if cl {
                        dx.extend(std::iter::repeat(T::zero()).take(k));
                        continue;
                    }
                    dx.extend(pr.iter().enumerate().map(|(j, &p)| {
                        let y = if j == t { T::one() } else { T::zero() };
                        scale * (p - y)
                    }));
                }
                vec![Some(Array::from_vec(vec![r, k], dx).expect("dx"))]
            }),
        ))
    }

    /// Gathers `x[b, :, pos]` for each batch item `b` and each flat spatial index in
    /// `positions`, giving `[n * positions.len(), c]` (batch-major).
    pub fn select_positions(&self, positions: &[usize]) -> Result<Var<T>> {
        let (n, c, h, w) = self.value().dims4()?;
        let hw = h * w;
        if let Some(&bad) = positions.iter().find(|&&p| p >= hw) {
            return Err(TensorError::Index {
                op: "select_positions",
                index: bad,
                bound: hw,
            });
        }
        let p = positions.len();
        let x = self.value().data();
        let mut out = Vec::with_capacity(n * p * c);
        for b in 0..n {
            for &pos in positions {
                out.extend((0..c).map(|ch| x[(b * c + ch) * hw + pos]));
            }
        }
        let positions = positions.to_vec();
        Ok(Var::from_op(
            Array::from_vec(vec![n * p, c], out)?,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dx = vec![T::zero(); n * c * hw];
                let gd = g.data();
                for b in 0..n {
                    for (i, &pos) in positions.iter().enumerate() {
                        let row = &gd[(b * p + i) * c..(b * p + i + 1) * c];
                        for (ch, &v) in row.iter().enumerate() {
                            dx[(b * c + ch) * hw + pos] += v;
                        }
                    }
                }
                vec![Some(Array::from_vec(vec![n, c, h, w], dx).expect("dx"))]
            }),
        ))
    }

    /// `[n, c, h, w]` to `[n * h * w, c]`: one row per pixel.
    pub fn channels_to_rows(&self) -> Result<Var<T>> {
        let (n, c, h, w) = self.value().dims4()?;
        let hw = h * w;
        let x = self.value().data();
        let mut out = Vec::with_capacity(n * hw * c);
        for b in 0..n {
            for pos in 0..hw {
                out.extend((0..c).map(|ch| x[(b * c + ch) * hw + pos]));
            }
        }
        Ok(Var::from_op(
            Array::from_vec(vec![n * hw, c], out)?,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let gd = g.data();
                let mut dx = vec![T::zero(); n * c * hw];
                for b in 0..n {
                    for pos in 0..hw {
                        for ch in 0..c {
                            dx[(b * c + ch) * hw + pos] = gd[(b * hw + pos) * c + ch];
                        }
                    }
                }
                vec![Some(Array::from_vec(vec![n, c, h, w], dx).expect("dx"))]
            }),
        ))
    }

    /// Rows `start..start + len` of a `[r, c]` value.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Var<T>> {
        let (r, c) = self.value().dims2()?;
        if start + len > r {
            return Err(TensorError::Index {
                op: "narrow_rows",
                index: start + len,
                bound: r + 1,
            });
        }
        let out = self.value().data()[start * c..(start + len) * c].to_vec();
        Ok(Var::from_op(
            Array::from_vec(vec![len, c], out)?,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dx = vec![T::zero(); r * c];
                dx[start * c..(start + len) * c].copy_from_slice(g.data());
                vec![Some(Array::from_vec(vec![r, c], dx).expect("dx"))]
            }),
        ))
    }
}
