//! 3D convolution kernels.
//!
//! Layouts: input `[batch, cin, d, h, w]`, weight `[cout, cin, k, k, k]`,
//! output `[batch, cout, od, oh, ow]`, all row-major with `w` fastest.
//! [`conv3d_direct`] is the plain seven-loop definition and serves as the
//! reference for the im2col + GEMM path used by the tape.

use crate::element::{Element, Strides};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// Output extent along one axis, or `None` when the kernel does not fit.
    pub fn out_extent(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = n + 2 * padding;
        if stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Reference convolution by direct summation over all taps.
pub fn conv3d_direct<T: Element>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.kernel;
    let mut out = vec![T::zero(); g.batch * g.cout * g.out_voxels()];
    for b in 0..g.batch {
        for co in 0..g.cout {
            for z in 0..od {
                for y in 0..oh {
                    for x0 in 0..ow {
                        let mut acc = bias.map_or(T::zero(), |bs| bs[co]);
                        for ci in 0..g.cin {
                            for kz in 0..k {
                                let sz = (z * g.stride + kz) as isize - g.padding as isize;
                                if sz < 0 || sz >= id as isize {
                                    continue;
                                }
                                for ky in 0..k {
                                    let sy = (y * g.stride + ky) as isize - g.padding as isize;
                                    if sy < 0 || sy >= ih as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let sx = (x0 * g.stride + kx) as isize - g.padding as isize;
                                        if sx < 0 || sx >= iw as isize {
                                            continue;
                                        }
                                        let xi = (((b * g.cin + ci) * id + sz as usize) * ih + sy as usize) * iw
                                            + sx as usize;
                                        let wi = (((co * g.cin + ci) * k + kz) * k + ky) * k + kx;
                                        acc = acc + x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[(((b * g.cout + co) * od + z) * oh + y) * ow + x0] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Source index along one axis for output position `o` and tap `t`.
#[inline]
fn src(o: usize, t: usize, g: &ConvGeom, n: usize) -> Option<usize> {
    let s = (o * g.stride + t) as isize - g.padding as isize;
    (s >= 0 && (s as usize) < n).then_some(s as usize)
}

/// Unfolds one batch item into `[cin * k³, out_voxels]` columns.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.kernel;
    let p = g.out_voxels();
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for z in 0..od {
                        let sz = src(z, kz, g, id);
                        for y in 0..oh {
                            let sy = sz.and_then(|sz| src(y, ky, g, ih).map(|sy| (sz, sy)));
                            match sy {
                                None => dst[o..o + ow].fill(T::zero()),
                                Some((sz, sy)) => {
                                    let line = &plane[(sz * ih + sy) * iw..(sz * ih + sy + 1) * iw];
                                    for (x0, d) in dst[o..o + ow].iter_mut().enumerate() {
                                        *d = match src(x0, kx, g, iw) {
                                            Some(sx) => line[sx],
                                            None => T::zero(),
                                        };
                                    }
                                }
                            }
                            o += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Folds column gradients back onto one batch item's input gradient.
fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.kernel;
    let p = g.out_voxels();
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let srow = &cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for z in 0..od {
                        let sz = src(z, kz, g, id);
                        for y in 0..oh {
                            if let (Some(sz), Some(sy)) = (sz, src(y, ky, g, ih)) {
                                let base = (sz * ih + sy) * iw;
                                for (x0, &v) in srow[o..o + ow].iter().enumerate() {
                                    if let Some(sx) = src(x0, kx, g, iw) {
                                        plane[base + sx] = plane[base + sx] + v;
                                    }
                                }
                            }
                            o += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Convolution through im2col and a single GEMM per batch item.
pub fn conv3d_gemm<T: Element>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let p = g.out_voxels();
    let r = g.cin * g.taps();
    let in_item = g.cin * g.in_voxels();
    let out_item = g.cout * p;
    let mut out = vec![T::zero(); g.batch * out_item];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); r * p] };
    for b in 0..g.batch {
        let xb = &x[b * in_item..(b + 1) * in_item];
        let ob = &mut out[b * out_item..(b + 1) * out_item];
        if let Some(bs) = bias {
            for (co, chunk) in ob.chunks_exact_mut(p).enumerate() {
                chunk.fill(bs[co]);
            }
        }
        let rhs: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.cout,
            r,
            p,
            T::one(),
            w,
            Strides::row_major(r),
            rhs,
            Strides::row_major(p),
            beta,
            ob,
            Strides::row_major(p),
        );
    }
    out
}

/// Gradients of [`conv3d_gemm`]: `(dx, dw, dbias)`; `dx` only when requested.
pub fn conv3d_backward<T: Element>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let p = g.out_voxels();
    let r = g.cin * g.taps();
    let in_item = g.cin * g.in_voxels();
    let out_item = g.cout * p;
    let mut dx = need_dx.then(|| vec![T::zero(); g.batch * in_item]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut dbias = vec![T::zero(); g.cout];
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); r * p] };
    let mut dcols = if need_dx && !pointwise { vec![T::zero(); r * p] } else { Vec::new() };
    for b in 0..g.batch {
        let xb = &x[b * in_item..(b + 1) * in_item];
        let gb = &gout[b * out_item..(b + 1) * out_item];
        for (co, chunk) in gb.chunks_exact(p).enumerate() {
            dbias[co] = chunk.iter().fold(dbias[co], |acc, &v| acc + v);
        }
        if let Some(dw) = dw.as_mut() {
            let rhs: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            // dw[cout, r] += gout[cout, p] · cols[r, p]ᵀ
            T::gemm(
                g.cout,
                p,
                r,
                T::one(),
                gb,
                Strides::row_major(p),
                rhs,
                Strides::transposed(p),
                T::one(),
                dw,
                Strides::row_major(r),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_item..(b + 1) * in_item];
            // dcols[r, p] = wᵀ[r, cout] · gout[cout, p]
            if pointwise {
                T::gemm(
                    r,
                    g.cout,
                    p,
                    T::one(),
                    w,
                    Strides::transposed(r),
                    gb,
                    Strides::row_major(p),
                    T::zero(),
                    dxb,
                    Strides::row_major(p),
                );
            } else {
                T::gemm(
                    r,
                    g.cout,
                    p,
                    T::one(),
                    w,
                    Strides::transposed(r),
                    gb,
                    Strides::row_major(p),
                    T::zero(),
                    &mut dcols,
                    Strides::row_major(p),
                );
                col2im(&dcols, g, dxb);
            }
        }
    }
    (dx, dw, dbias)
}

/// Nearest-neighbour upsampling of `[batch·channels, d, h, w]` planes.
pub fn upsample_nearest<T: Element>(x: &[T], planes: usize, dims: [usize; 3], factor: usize) -> Vec<T> {
    let [d, h, w] = dims;
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    let mut out = Vec::with_capacity(planes * od * oh * ow);
    for pl in 0..planes {
        let src = &x[pl * d * h * w..(pl + 1) * d * h * w];
        for z in 0..od {
            for y in 0..oh {
                let line = &src[((z / factor) * h + y / factor) * w..][..w];
                out.extend((0..ow).map(|x0| line[x0 / factor]));
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Element>(gout: &[T], planes: usize, dims: [usize; 3], factor: usize) -> Vec<T> {
    let [d, h, w] = dims;
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    let mut dx = vec![T::zero(); planes * d * h * w];
    for pl in 0..planes {
        let dst = &mut dx[pl * d * h * w..(pl + 1) * d * h * w];
        let gsrc = &gout[pl * od * oh * ow..(pl + 1) * od * oh * ow];
        for z in 0..od {
            for y in 0..oh {
                let base = ((z / factor) * h + y / factor) * w;
                let line = &gsrc[(z * oh + y) * ow..][..ow];
                for (x0, &v) in line.iter().enumerate() {
                    dst[base + x0 / factor] = dst[base + x0 / factor] + v;
                }
            }
        }
    }
    dx
}
