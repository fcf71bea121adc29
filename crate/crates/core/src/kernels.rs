//! Slice-level kernels behind the graph ops. Layout is channel-last throughout.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Real;

/// Stride and zero padding of a 3D window op, ordered (time, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window3 {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Window3 {
    pub const UNIT: Window3 = Window3 {
        stride: [1, 1, 1],
        padding: [0, 0, 0],
    };

    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { stride, padding }
    }

    /// Output extents for input `(t,h,w)` under kernel extents `kernel`.
    pub fn output_extents(
        &self,
        op: &'static str,
        input: [usize; 3],
        kernel: [usize; 3],
    ) -> Result<[usize; 3]> {
        const AXES: [&str; 3] = ["time", "height", "width"];
        let mut out = [0; 3];
        for a in 0..3 {
            if self.stride[a] == 0 {
                return Err(shape_err(op, format!("{} stride must be at least 1", AXES[a])));
            }
            if kernel[a] == 0 {
                return Err(shape_err(op, format!("{} kernel extent is zero", AXES[a])));
            }
            let padded = input[a] + 2 * self.padding[a];
            if kernel[a] > padded {
                return Err(shape_err(
                    op,
                    format!(
                        "{} kernel extent {} exceeds padded input extent {}",
                        AXES[a], kernel[a], padded
                    ),
                ));
            }
            out[a] = (padded - kernel[a]) / self.stride[a] + 1;
        }
        if input.iter().any(|&e| e == 0) {
            return Err(Error::EmptyOutput {
                op,
                detail: format!("input extents {:?}", input),
            });
        }
        Ok(out)
    }
}

/// Geometry of one conv3d call, resolved from shapes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub cin: usize,
    pub cout: usize,
    pub window: Window3,
}

impl ConvDims {
    pub fn resolve(x: &[usize], k: &[usize], window: Window3) -> Result<Self> {
        if x.len() != 5 {
            return Err(shape_err(
                "conv3d",
                format!("input must be [n,t,h,w,c], got rank {}", x.len()),
            ));
        }
        if k.len() != 5 {
            return Err(shape_err(
                "conv3d",
                format!("kernel must be [kt,kh,kw,cin,cout], got rank {}", k.len()),
            ));
        }
        if x[4] != k[3] {
            return Err(shape_err(
                "conv3d",
                format!("input channels {} but kernel expects cin {}", x[4], k[3]),
            ));
        }
        let input = [x[1], x[2], x[3]];
        let kernel = [k[0], k[1], k[2]];
        let output = window.output_extents("conv3d", input, kernel)?;
        if x[0] == 0 || k[4] == 0 {
            return Err(Error::EmptyOutput {
                op: "conv3d",
                detail: format!("batch {} cout {}", x[0], k[4]),
            });
        }
        Ok(Self {
            n: x[0],
            input,
            kernel,
            output,
            cin: x[4],
            cout: k[4],
            window,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.output[0], self.output[1], self.output[2], self.cout]
    }

    /// Visit every (output position, input position, kernel tap) triple that
    /// lands inside the unpadded input. Offsets are element offsets of the
    /// first channel.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [t, h, w] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [ot, oh, ow] = self.output;
        let [st, sh, sw] = self.window.stride;
        let [pt, ph, pw] = self.window.padding;
        for b in 0..self.n {
            for zt in 0..ot {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let out_pos = (((b * ot + zt) * oh + zh) * ow + zw) * self.cout;
                        for dt in 0..kt {
                            let it = zt * st + dt;
                            if it < pt || it - pt >= t {
                                continue;
                            }
                            let it = it - pt;
                            for dh in 0..kh {
                                let ih = zh * sh + dh;
                                if ih < ph || ih - ph >= h {
                                    continue;
                                }
                                let ih = ih - ph;
                                for dw in 0..kw {
                                    let iw = zw * sw + dw;
                                    if iw < pw || iw - pw >= w {
                                        continue;
                                    }
                                    let iw = iw - pw;
                                    let in_pos = (((b * t + it) * h + ih) * w + iw) * self.cin;
                                    let tap = ((dt * kh + dh) * kw + dw) * self.cin * self.cout;
                                    f(out_pos, in_pos, tap);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Real>(dims: &ConvDims, x: &[T], k: &[T]) -> Vec<T> {
    let numel = dims.n * dims.output.iter().product::<usize>() * dims.cout;
    let mut out = vec![T::zero(); numel];
    let (cin, cout) = (dims.cin, dims.cout);
    dims.for_each_tap(|o, i, tap| {
        let acc = &mut out[o..o + cout];
        let xin = &x[i..i + cin];
        let slab = &k[tap..tap + cin * cout];
        for (c, &xv) in xin.iter().enumerate() {
            let row = &slab[c * cout..(c + 1) * cout];
            for (a, &kv) in acc.iter_mut().zip(row) {
                *a = *a + xv * kv;
            }
        }
    });
    out
}

/// Returns (dx, dk) for upstream gradient `dy`.
pub(crate) fn conv3d_backward<T: Real>(
    dims: &ConvDims,
    x: &[T],
    k: &[T],
    dy: &[T],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (cin, cout) = (dims.cin, dims.cout);
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dk = want_dk.then(|| vec![T::zero(); k.len()]);
    dims.for_each_tap(|o, i, tap| {
        let g = &dy[o..o + cout];
        let slab = &k[tap..tap + cin * cout];
        if let Some(dx) = dx.as_mut() {
            let dxin = &mut dx[i..i + cin];
            for (c, d) in dxin.iter_mut().enumerate() {
                let row = &slab[c * cout..(c + 1) * cout];
                let mut s = T::zero();
                for (&gv, &kv) in g.iter().zip(row) {
                    s = s + gv * kv;
                }
                *d = *d + s;
            }
        }
        if let Some(dk) = dk.as_mut() {
            let xin = &x[i..i + cin];
            let dslab = &mut dk[tap..tap + cin * cout];
            for (c, &xv) in xin.iter().enumerate() {
                let row = &mut dslab[c * cout..(c + 1) * cout];
                for (r, &gv) in row.iter_mut().zip(g) {
                    *r = *r + xv * gv;
                }
            }
        }
    });
    (dx, dk)
}

/// `out[r, :] = x[r, :] · w + b` for `rows` rows.
pub(crate) fn rows_matmul<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    rows: usize,
    cin: usize,
    cout: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cout];
    for r in 0..rows {
        let acc = &mut out[r * cout..(r + 1) * cout];
        if let Some(b) = bias {
            acc.copy_from_slice(b);
        }
        for (c, &xv) in x[r * cin..(r + 1) * cin].iter().enumerate() {
            let row = &w[c * cout..(c + 1) * cout];
            for (a, &wv) in acc.iter_mut().zip(row) {
                *a = *a + xv * wv;
            }
        }
    }
    out
}

pub(crate) struct MatmulGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn rows_matmul_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    rows: usize,
    cin: usize,
    cout: usize,
    want: [bool; 3],
) -> MatmulGrads<T> {
    let mut dx = want[0].then(|| vec![T::zero(); rows * cin]);
    let mut dw = want[1].then(|| vec![T::zero(); cin * cout]);
    let mut db = want[2].then(|| vec![T::zero(); cout]);
    for r in 0..rows {
        let g = &dy[r * cout..(r + 1) * cout];
        if let Some(dx) = dx.as_mut() {
            for (c, d) in dx[r * cin..(r + 1) * cin].iter_mut().enumerate() {
                let row = &w[c * cout..(c + 1) * cout];
                let mut s = T::zero();
                for (&gv, &wv) in g.iter().zip(row) {
                    s = s + gv * wv;
                }
                *d = s;
            }
        }
        if let Some(dw) = dw.as_mut() {
            for (c, &xv) in x[r * cin..(r + 1) * cin].iter().enumerate() {
                let row = &mut dw[c * cout..(c + 1) * cout];
                for (d, &gv) in row.iter_mut().zip(g) {
                    *d = *d + xv * gv;
                }
            }
        }
        if let Some(db) = db.as_mut() {
            for (d, &gv) in db.iter_mut().zip(g) {
                *d = *d + gv;
            }
        }
    }
    MatmulGrads { dx, dw, db }
}

/// Windowed max. Returns values and, per output element, the flat input index
/// of the winning element (first occurrence on ties).
pub(crate) fn max_pool3d_forward<T: Real>(
    x: &[T],
    shape: &[usize],
    window: [usize; 3],
    geom: Window3,
) -> Result<(Vec<usize>, Vec<T>, Vec<usize>)> {
    if shape.len() != 5 {
        return Err(shape_err(
            "max_pool3d",
            format!("input must be [n,t,h,w,c], got rank {}", shape.len()),
        ));
    }
    for a in 0..3 {
        if geom.padding[a] >= window[a] {
            return Err(shape_err(
                "max_pool3d",
                format!("padding {:?} must be smaller than window {:?}", geom.padding, window),
            ));
        }
    }
    let (n, c) = (shape[0], shape[4]);
    let input = [shape[1], shape[2], shape[3]];
    let [t, h, w] = input;
    let [ot, oh, ow] = geom.output_extents("max_pool3d", input, window)?;
    let [st, sh, sw] = geom.stride;
    let [pt, ph, pw] = geom.padding;
    let numel = n * ot * oh * ow * c;
    let mut out = vec![T::zero(); numel];
    let mut arg = vec![0usize; numel];
    for b in 0..n {
        for zt in 0..ot {
            for zh in 0..oh {
                for zw in 0..ow {
                    let o = (((b * ot + zt) * oh + zh) * ow + zw) * c;
                    for ch in 0..c {
                        let mut best: Option<(T, usize)> = None;
                        for dt in 0..window[0] {
                            let it = zt * st + dt;
                            if it < pt || it - pt >= t {
                                continue;
                            }
                            for dh in 0..window[1] {
                                let ih = zh * sh + dh;
                                if ih < ph || ih - ph >= h {
                                    continue;
                                }
                                for dw in 0..window[2] {
                                    let iw = zw * sw + dw;
                                    if iw < pw || iw - pw >= w {
                                        continue;
                                    }
                                    let idx = (((b * t + it - pt) * h + ih - ph) * w + iw - pw) * c
                                        + ch;
                                    let v = x[idx];
                                    match best {
                                        Some((bv, _)) if !(v > bv) => {}
                                        _ => best = Some((v, idx)),
                                    }
                                }
                            }
                        }
                        let (v, idx) = best.ok_or(Error::EmptyOutput {
                            op: "max_pool3d",
                            detail: format!("window at {:?} covers only padding", (zt, zh, zw)),
                        })?;
                        out[o + ch] = v;
                        arg[o + ch] = idx;
                    }
                }
            }
        }
    }
    Ok((vec![n, ot, oh, ow, c], out, arg))
}
