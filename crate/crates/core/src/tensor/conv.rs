//! 2-D cross-correlation (no kernel flip) lowered to GEMM through an
//! im2col buffer.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use super::tape::{BackwardOp, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so that the output extent is `ceil(input / stride)`.
    Same,
    /// No padding.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dParams {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    dilation: usize,
    pad_top: usize,
    pad_left: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(input: &[usize], kernel: &[usize], p: Conv2dParams) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        if input[1] != kernel[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        if p.stride == 0 || p.dilation == 0 {
            return Err(Error::Domain {
                op: "conv2d",
                reason: "stride and dilation must be positive".into(),
            });
        }
        let (h, w, kh, kw) = (input[2], input[3], kernel[2], kernel[3]);
        let span = |k: usize| p.dilation * (k - 1) + 1;
        let (ho, wo, pad_top, pad_left) = match p.padding {
            Padding::Same => {
                let ho = h.div_ceil(p.stride);
                let wo = w.div_ceil(p.stride);
                let ph = ((ho - 1) * p.stride + span(kh)).saturating_sub(h);
                let pw = ((wo - 1) * p.stride + span(kw)).saturating_sub(w);
                (ho, wo, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if span(kh) > h || span(kw) > w {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d (valid padding)",
                        left: input.to_vec(),
                        right: kernel.to_vec(),
                    });
                }
                (
                    (h - span(kh)) / p.stride + 1,
                    (w - span(kw)) / p.stride + 1,
                    0,
                    0,
                )
            }
        };
        Ok(Self {
            n: input[0],
            cin: input[1],
            h,
            w,
            cout: kernel[0],
            kh,
            kw,
            stride: p.stride,
            dilation: p.dilation,
            pad_top,
            pad_left,
            ho,
            wo,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Source row/column for output position `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Output columns `lo..hi` whose tap `kx` lands inside the input row, and
    /// the input column of `lo`.
    #[inline]
    fn col_span(&self, kx: usize) -> (usize, usize, usize) {
        let off = (kx * self.dilation) as isize - self.pad_left as isize;
        let s = self.stride as isize;
        // smallest ox with ox·s + off ≥ 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest ox with ox·s + off ≤ w − 1
        let last = self.w as isize - 1 - off;
        let hi = if last < 0 {
            0
        } else {
            (last / s + 1).min(self.wo as isize)
        };
        let lo = lo.min(hi);
        (lo as usize, hi as usize, (lo * s + off).max(0) as usize)
    }

    /// Writes the patch matrix (patch × out_plane) of sample `n`.
    fn im2col(&self, x: &[f64], n: usize, col: &mut [f64]) {
        let plane = self.out_plane();
        let img = &x[n * self.cin * self.h * self.w..(n + 1) * self.cin * self.h * self.w];
        for ci in 0..self.cin {
            let chan = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    let (lo, hi, ix0) = self.col_span(kx);
                    for oy in 0..self.ho {
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let Some(iy) = self.src(oy, ky, self.pad_top, self.h) else {
                            out_row.fill(0.0);
                            continue;
                        };
                        let src_row = &chan[iy * self.w..(iy + 1) * self.w];
                        out_row[..lo].fill(0.0);
                        out_row[hi..].fill(0.0);
                        if self.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src_row[ix0..ix0 + hi - lo]);
                        } else {
                            for (j, slot) in out_row[lo..hi].iter_mut().enumerate() {
                                *slot = src_row[ix0 + j * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a patch-matrix gradient back into sample `n` of `dx`.
    fn col2im(&self, col: &[f64], n: usize, dx: &mut [f64]) {
        let plane = self.out_plane();
        let img = &mut dx[n * self.cin * self.h * self.w..(n + 1) * self.cin * self.h * self.w];
        for ci in 0..self.cin {
            let chan = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[row * plane..(row + 1) * plane];
                    let (lo, hi, ix0) = self.col_span(kx);
                    for oy in 0..self.ho {
                        let Some(iy) = self.src(oy, ky, self.pad_top, self.h) else {
                            continue;
                        };
                        let dst_row = &mut chan[iy * self.w..(iy + 1) * self.w];
                        let src_row = &src[oy * self.wo + lo..oy * self.wo + hi];
                        if self.stride == 1 {
                            for (d, v) in dst_row[ix0..ix0 + hi - lo].iter_mut().zip(src_row) {
                                *d += v;
                            }
                        } else {
                            for (j, v) in src_row.iter().enumerate() {
                                dst_row[ix0 + j * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c (m×n) = beta·c + a (m×k) · b (k×n)` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Conv2dBackward {
    geom: Geometry,
    has_bias: bool,
}

thread_local! {
    /// Patch-matrix buffer reused across calls.
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

impl BackwardOp for Conv2dBackward {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let geo = &self.geom;
        let (patch, plane) = (geo.patch(), geo.out_plane());
        let kernel = inputs[1].values();

        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; inputs[0].len()];
            with_scratch(patch * plane, |dcol| {
                for n in 0..geo.n {
                    let gy = &g[n * geo.cout * plane..(n + 1) * geo.cout * plane];
                    // dcol = Kᵀ · dY
                    gemm(
                        patch, geo.cout, plane, kernel, 1, patch, gy, plane, 1, 0.0, dcol,
                    );
                    geo.col2im(dcol, n, &mut dx);
                }
            });
            dx
        });

        let dk = needs[1].then(|| {
            let mut dk = vec![0.0; geo.cout * patch];
            let x = inputs[0].values();
            with_scratch(patch * plane, |col| {
                for n in 0..geo.n {
                    let gy = &g[n * geo.cout * plane..(n + 1) * geo.cout * plane];
                    geo.im2col(x, n, col);
                    // dK += dY · colᵀ
                    gemm(
                        geo.cout, plane, patch, gy, plane, 1, col, 1, plane, 1.0, &mut dk,
                    );
                }
            });
            dk
        });

        let mut out = vec![dx, dk];
        if self.has_bias {
            out.push(needs[2].then(|| {
                let mut db = vec![0.0; geo.cout];
                for n in 0..geo.n {
                    for (co, slot) in db.iter_mut().enumerate() {
                        let off = (n * geo.cout + co) * plane;
                        *slot += g[off..off + plane].iter().sum::<f64>();
                    }
                }
                db
            }));
        }
        out
    }
}

impl Tape {
    /// Cross-correlation of an N×Cin×H×W input with a Cout×Cin×Kh×Kw kernel
    /// plus an optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        params: Conv2dParams,
    ) -> Result<Var> {
        let x = self.value(input)?;
        let k = self.value(kernel)?;
        let geo = Geometry::new(x.shape(), k.shape(), params)?;
        if let Some(b) = bias {
            let bs = self.value(b)?.shape();
            if bs != [geo.cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: bs.to_vec(),
                    right: vec![geo.cout],
                });
            }
        }
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);

        let (patch, plane) = (geo.patch(), geo.out_plane());
        let mut out = vec![0.0; geo.n * geo.cout * plane];
        let xv = x.values();
        let kv = k.values();
        with_scratch(patch * plane, |col| {
            for n in 0..geo.n {
                geo.im2col(xv, n, col);
                let dst = &mut out[n * geo.cout * plane..(n + 1) * geo.cout * plane];
                gemm(
                    geo.cout, patch, plane, kv, patch, 1, col, plane, 1, 0.0, dst,
                );
            }
        });
        if let Some(b) = bias {
            let bv = self.value(b)?.values();
            for n in 0..geo.n {
                for (co, &bc) in bv.iter().enumerate() {
                    let off = (n * geo.cout + co) * plane;
                    out[off..off + plane].iter_mut().for_each(|v| *v += bc);
                }
            }
        }
        let value = Tensor::from_raw(vec![geo.n, geo.cout, geo.ho, geo.wo], out);
        self.record(
            value,
            &inputs,
            Box::new(Conv2dBackward {
                geom: geo,
                has_bias: bias.is_some(),
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    #[test]
    fn identity_kernel() {
        let x = Tensor::new(
            &[2, 1, 4, 5],
            Fill::Uniform {
                lo: -1.0,
                hi: 1.0,
                seed: 1,
            },
        )
        .unwrap();
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let k = tape.constant(Tensor::new(&[1, 1, 1, 1], Fill::Constant(1.0)).unwrap());
        let y = tape.conv2d(xi, k, None, Conv2dParams::default()).unwrap();
        assert_eq!(tape.value(y).unwrap().values(), x.values());
    }

    #[test]
    fn ones_valid_sum_is_nine() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 3, 3], Fill::Constant(1.0)).unwrap());
        let k = tape.constant(Tensor::new(&[1, 1, 3, 3], Fill::Constant(1.0)).unwrap());
        let p = Conv2dParams {
            padding: Padding::Valid,
            ..Default::default()
        };
        let y = tape.conv2d(x, k, None, p).unwrap();
        assert_eq!(tape.value(y).unwrap().shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).unwrap().values(), &[9.0]);
    }

    #[test]
    fn same_padding_preserves_extent_with_dilation() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2, 8, 8], Fill::Constant(1.0)).unwrap());
        let k = tape.constant(Tensor::new(&[3, 2, 3, 3], Fill::Constant(1.0)).unwrap());
        let p = Conv2dParams {
            dilation: 2,
            ..Default::default()
        };
        let y = tape.conv2d(x, k, None, p).unwrap();
        assert_eq!(tape.value(y).unwrap().shape(), &[1, 3, 8, 8]);
    }

    #[test]
    fn channel_mismatch_and_oversized_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3]).unwrap());
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]).unwrap());
        assert!(tape.conv2d(x, k, None, Conv2dParams::default()).is_err());
        let k = tape.constant(Tensor::zeros(&[1, 2, 5, 5]).unwrap());
        let p = Conv2dParams {
            padding: Padding::Valid,
            ..Default::default()
        };
        assert!(tape.conv2d(x, k, None, p).is_err());
    }
}
