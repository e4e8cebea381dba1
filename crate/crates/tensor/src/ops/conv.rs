use crate::array::Array;
use crate::error::{Result, TensorError};
use crate::float::{gemm, Float};
use crate::graph::Var;

/// Sliding-window geometry over an image of `c x h x w`, producing `oh x ow` positions.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Valid output-column range for kernel column `kj` when stride is 1.
    fn unit_stride_span(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).min(self.ow);
        let hi = (self.w + self.pad).saturating_sub(kj).min(self.ow).max(lo);
        (lo, hi)
    }
}

fn im2col<T: Float>(img: &[T], g: &Geom, cols: &mut [T]) {
    let (s, p) = (g.stride as isize, g.pad as isize);
    let ow = g.ow;
    let mut row = 0;
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst_row = &mut cols[row * g.positions()..(row + 1) * g.positions()];
                for oy in 0..g.oh {
                    let dst = &mut dst_row[oy * ow..(oy + 1) * ow];
                    let iy = oy as isize * s + ki as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.unit_stride_span(kj);
                        if hi > lo {
                            dst[..lo].fill(T::zero());
                            let start = lo + kj - g.pad;
                            dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                            dst[hi..].fill(T::zero());
                        } else {
                            dst.fill(T::zero());
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            *d = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Float>(cols: &[T], g: &Geom, img: &mut [T]) {
    let (s, p) = (g.stride as isize, g.pad as isize);
    let ow = g.ow;
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src_row = &cols[row * g.positions()..(row + 1) * g.positions()];
                for oy in 0..g.oh {
                    let iy = oy as isize * s + ki as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &src_row[oy * ow..(oy + 1) * ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.unit_stride_span(kj);
                        if hi == lo {
                            continue;
                        }
                        let start = lo + kj - g.pad;
                        for (d, &v) in dst[start..start + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn bias_grad<T: Float>(g: &Array<T>, n: usize, c: usize, hw: usize) -> Array<T> {
    let mut db = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            let off = (b * c + ch) * hw;
            *acc += g.data()[off..off + hw].iter().copied().sum::<T>();
        }
    }
    Array::from_vec(vec![c], db).expect("bias shape")
}

fn add_bias<T: Float>(out: &mut [T], bias: &[T], hw: usize) {
    for (plane, &b) in out.chunks_mut(hw).zip(bias.iter().cycle()) {
        plane.iter_mut().for_each(|v| *v += b);
    }
}

fn check_bias<T: Float>(op: &'static str, bias: Option<&Var<T>>, c: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [c] {
            return Err(TensorError::shape(
                op,
                format!("bias {:?}, expected [{c}]", b.shape()),
            ));
        }
    }
    Ok(())
}

impl<T: Float> Var<T> {
    /// 2-D convolution with zero padding. `weight` is `[c_out, c_in, kh, kw]`.
    pub fn conv2d(
        &self,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<T>> {
        let (n, cin, h, w) = self.value().dims4()?;
        let (cout, wcin, kh, kw) = weight.value().dims4()?;
        if wcin != cin {
            return Err(TensorError::shape(
                "conv2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit {h}x{w} with pad {pad}"),
            ));
        }
        check_bias("conv2d", bias, cout)?;
        let geom = Geom {
            c: cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let (k, hw_out, in_sz) = (geom.rows(), geom.positions(), cin * h * w);
        let mut out = vec![T::zero(); n * cout * hw_out];
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * hw_out] };
        let x = self.value().data();
        let wt = weight.value().data();
        for b in 0..n {
            let xb = &x[b * in_sz..(b + 1) * in_sz];
            let src: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, &geom, &mut cols);
                &cols
            };
            let ob = &mut out[b * cout * hw_out..(b + 1) * cout * hw_out];
            gemm(cout, k, hw_out, wt, false, src, false, ob, false);
        }
        if let Some(bias) = bias {
            add_bias(&mut out, bias.value().data(), hw_out);
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        let value = Array::from_vec(vec![n, cout, geom.oh, geom.ow], out)?;
        Ok(Var::from_op(
            value,
            inputs,
            Box::new(move |g, xs, _| {
                let x = xs[0].value().data();
                let wt = xs[1].value().data();
                let gd = g.data();
                let need_x = xs[0].requires_grad();
                let need_w = xs[1].requires_grad();
                let mut dx = need_x.then(|| vec![T::zero(); n * in_sz]);
                let mut dw = need_w.then(|| vec![T::zero(); cout * k]);
                let mut cols = vec![T::zero(); k * hw_out];
                for b in 0..n {
                    let gb = &gd[b * cout * hw_out..(b + 1) * cout * hw_out];
                    let xb = &x[b * in_sz..(b + 1) * in_sz];
                    if let Some(dw) = dw.as_mut() {
                        let src: &[T] = if pointwise {
                            xb
                        } else {
                            im2col(xb, &geom, &mut cols);
                            &cols
                        };
                        gemm(cout, hw_out, k, gb, false, src, true, dw, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
                        if pointwise {
                            gemm(k, cout, hw_out, wt, true, gb, false, dxb, true);
                        } else {
                            gemm(k, cout, hw_out, wt, true, gb, false, &mut cols, false);
                            col2im_add(&cols, &geom, dxb);
                        }
                    }
                }
                let mut res = vec![
                    dx.map(|d| Array::from_vec(vec![n, cin, h, w], d).expect("dx")),
                    dw.map(|d| Array::from_vec(vec![cout, cin, kh, kw], d).expect("dw")),
                ];
                if xs.len() == 3 {
                    res.push(xs[2].requires_grad().then(|| bias_grad(g, n, cout, hw_out)));
                }
                res
            }),
        ))
    }

    /// Transposed convolution (adjoint of [`Var::conv2d`]). `weight` is `[c_in, c_out, kh, kw]`.
    ///
    /// Output size is `(in - 1) * stride - 2 * pad + k + output_pad`.
    pub fn conv_transpose2d(
        &self,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var<T>> {
        let (n, cin, hin, win) = self.value().dims4()?;
        let (wcin, cout, kh, kw) = weight.value().dims4()?;
        if wcin != cin {
            return Err(TensorError::shape(
                "conv_transpose2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if stride == 0 || output_pad >= stride || hin == 0 || win == 0 {
            return Err(TensorError::shape(
                "conv_transpose2d",
                format!("invalid stride {stride} / output_pad {output_pad}"),
            ));
        }
        check_bias("conv_transpose2d", bias, cout)?;
        let hout = ((hin - 1) * stride + kh + output_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| TensorError::shape("conv_transpose2d", "padding too large"))?;
        let wout = ((win - 1) * stride + kw + output_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| TensorError::shape("conv_transpose2d", "padding too large"))?;
        let geom = Geom {
            c: cout,
            h: hout,
            w: wout,
            kh,
            kw,
            stride,
            pad,
            oh: hin,
            ow: win,
        };
        let (k, hw_in, out_sz) = (geom.rows(), hin * win, cout * hout * wout);
        let mut out = vec![T::zero(); n * out_sz];
        let mut cols = vec![T::zero(); k * hw_in];
        let x = self.value().data();
        let wt = weight.value().data();
        for b in 0..n {
            let xb = &x[b * cin * hw_in..(b + 1) * cin * hw_in];
            gemm(k, cin, hw_in, wt, true, xb, false, &mut cols, false);
            col2im_add(&cols, &geom, &mut out[b * out_sz..(b + 1) * out_sz]);
        }
        if let Some(bias) = bias {
            add_bias(&mut out, bias.value().data(), hout * wout);
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        let value = Array::from_vec(vec![n, cout, hout, wout], out)?;
        Ok(Var::from_op(
            value,
            inputs,
            Box::new(move |g, xs, _| {
                let x = xs[0].value().data();
                let wt = xs[1].value().data();
                let gd = g.data();
                let mut dx = xs[0].requires_grad().then(|| vec![T::zero(); n * cin * hw_in]);
                let mut dw = xs[1].requires_grad().then(|| vec![T::zero(); cin * k]);
                let mut cols = vec![T::zero(); k * hw_in];
                for b in 0..n {
                    im2col(&gd[b * out_sz..(b + 1) * out_sz], &geom, &mut cols);
                    if let Some(dx) = dx.as_mut() {
                        let dxb = &mut dx[b * cin * hw_in..(b + 1) * cin * hw_in];
                        gemm(cin, k, hw_in, wt, false, &cols, false, dxb, false);
                    }
                    if let Some(dw) = dw.as_mut() {
                        let xb = &x[b * cin * hw_in..(b + 1) * cin * hw_in];
                        gemm(cin, hw_in, k, xb, false, &cols, true, dw, true);
                    }
                }
                let mut res = vec![
                    dx.map(|d| Array::from_vec(vec![n, cin, hin, win], d).expect("dx")),
                    dw.map(|d| Array::from_vec(vec![cin, cout, kh, kw], d).expect("dw")),
                ];
                if xs.len() == 3 {
                    res.push(
                        xs[2]
                            .requires_grad()
                            .then(|| bias_grad(g, n, cout, hout * wout)),
                    );
                }
                res
            }),
        ))
    }

    /// Mirror padding without repeating the edge pixel.
    pub fn reflect_pad(&self, pad: usize) -> Result<Var<T>> {
        let (n, c, h, w) = self.value().dims4()?;
        if pad >= h || pad >= w {
            return Err(TensorError::shape(
                "reflect_pad",
                format!("pad {pad} needs spatial size > pad, got {h}x{w}"),
            ));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let reflect = move |i: usize, len: usize| -> usize {
            let j = i as isize - pad as isize;
            let j = if j < 0 { -j } else { j };
            let j = if j >= len as isize { 2 * (len as isize - 1) - j } else { j };
            j as usize
        };
        let src_y: Vec<usize> = (0..ph).map(|i| reflect(i, h)).collect();
        let src_x: Vec<usize> = (0..pw).map(|i| reflect(i, w)).collect();
        let x = self.value().data();
        let mut out = vec![T::zero(); n * c * ph * pw];
        for (plane_in, plane_out) in x.chunks(h * w).zip(out.chunks_mut(ph * pw)) {
            for (oy, &sy) in src_y.iter().enumerate() {
                let row = &plane_in[sy * w..(sy + 1) * w];
                for (ox, &sx) in src_x.iter().enumerate() {
                    plane_out[oy * pw + ox] = row[sx];
                }
            }
        }
        Ok(Var::from_op(
            Array::from_vec(vec![n, c, ph, pw], out)?,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for (plane_g, plane_dx) in g.data().chunks(ph * pw).zip(dx.chunks_mut(h * w)) {
                    for (oy, &sy) in src_y.iter().enumerate() {
                        for (ox, &sx) in src_x.iter().enumerate() {
                            plane_dx[sy * w + sx] += plane_g[oy * pw + ox];
                        }
                    }
                }
                vec![Some(Array::from_vec(vec![n, c, h, w], dx).expect("dx"))]
            }),
        ))
    }
}

/// Concatenates NCHW values along the channel axis.
pub fn cat_channels<T: Float>(parts: &[Var<T>]) -> Result<Var<T>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::shape("cat_channels", "empty input"))?;
    let (n, _, h, w) = first.value().dims4()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pn, pc, ph, pw) = p.value().dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(TensorError::shape(
                "cat_channels",
                format!("{:?} vs {:?}", p.shape(), first.shape()),
            ));
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for (p, &c) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.value().data()[b * c * hw..(b + 1) * c * hw]);
        }
    }
    let value = Array::from_vec(vec![n, total, h, w], out)?;
    Ok(Var::from_op(
        value,
        parts.to_vec(),
        Box::new(move |g, xs, _| {
            let mut grads: Vec<Option<Vec<T>>> = xs
                .iter()
                .zip(&widths)
                .map(|(x, &c)| x.requires_grad().then(|| Vec::with_capacity(n * c * hw)))
                .collect();
            let gd = g.data();
            for b in 0..n {
                let mut off = b * total * hw;
                for (dst, &c) in grads.iter_mut().zip(&widths) {
                    if let Some(dst) = dst {
                        dst.extend_from_slice(&gd[off..off + c * hw]);
                    }
                    off += c * hw;
                }
            }
            grads
                .into_iter()
                .zip(&widths)
                .map(|(d, &c)| d.map(|d| Array::from_vec(vec![n, c, h, w], d).expect("dcat")))
                .collect()
        }),
    ))
}
