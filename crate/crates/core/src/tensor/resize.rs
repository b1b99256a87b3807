use super::tape::{BackwardOp, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

struct ResizeConcat {
    factor: usize,
}

impl BackwardOp for ResizeConcat {
    fn name(&self) -> &'static str {
        "resize_concat"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (low, skip) = (inputs[0].shape(), inputs[1].shape());
        let (n, cl, h, w) = (low[0], low[1], low[2], low[3]);
        let (cs, hs, ws) = (skip[1], skip[2], skip[3]);
        let ct = cl + cs;
        let f = self.factor;
        let plane = hs * ws;

        let dlow = needs[0].then(|| {
            let mut d = vec![0.0; n * cl * h * w];
            for ni in 0..n {
                for c in 0..cl {
                    let src = &g[(ni * ct + c) * plane..(ni * ct + c + 1) * plane];
                    let dst = &mut d[(ni * cl + c) * h * w..(ni * cl + c + 1) * h * w];
                    for y in 0..hs {
                        for x in 0..ws {
                            dst[(y / f) * w + x / f] += src[y * ws + x];
                        }
                    }
                }
            }
            d
        });
        let dskip = needs[1].then(|| {
            let mut d = Vec::with_capacity(n * cs * plane);
            for ni in 0..n {
                d.extend_from_slice(&g[(ni * ct + cl) * plane..(ni + 1) * ct * plane]);
            }
            d
        });
        vec![dlow, dskip]
    }
}

impl Tape {
    /// Nearest-neighbour upsamples `low` by the integer factor that matches
    /// `skip`'s spatial extent, then concatenates channels as `[low, skip]`.
    pub fn resize_concat(&mut self, low: Var, skip: Var) -> Result<Var> {
        let lo = self.value(low)?;
        let sk = self.value(skip)?;
        let (ls, ss) = (lo.shape(), sk.shape());
        let mismatch = || Error::ShapeMismatch {
            op: "resize_concat",
            left: ls.to_vec(),
            right: ss.to_vec(),
        };
        if ls.len() != 4 || ss.len() != 4 || ls[0] != ss[0] {
            return Err(mismatch());
        }
        let (n, cl, h, w) = (ls[0], ls[1], ls[2], ls[3]);
        let (cs, hs, ws) = (ss[1], ss[2], ss[3]);
        if hs % h != 0 || ws % w != 0 || hs / h != ws / w {
            return Err(mismatch());
        }
        let f = hs / h;
        let plane = hs * ws;
        let ct = cl + cs;
        let mut out = vec![0.0; n * ct * plane];
        let (lv, sv) = (lo.values(), sk.values());
        for ni in 0..n {
            for c in 0..cl {
                let src = &lv[(ni * cl + c) * h * w..(ni * cl + c + 1) * h * w];
                let dst = &mut out[(ni * ct + c) * plane..(ni * ct + c + 1) * plane];
                for y in 0..hs {
                    for x in 0..ws {
                        dst[y * ws + x] = src[(y / f) * w + x / f];
                    }
                }
            }
            out[(ni * ct + cl) * plane..(ni + 1) * ct * plane]
                .copy_from_slice(&sv[ni * cs * plane..(ni + 1) * cs * plane]);
        }
        let value = Tensor::from_raw(vec![n, ct, hs, ws], out);
        self.record(value, &[low, skip], Box::new(ResizeConcat { factor: f }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    #[test]
    fn upsample_single_cell() {
        let mut tape = Tape::new();
        let low = tape.param(Tensor::new(&[1, 1, 1, 1], Fill::Constant(5.0)).unwrap());
        let skip = tape.constant(Tensor::zeros(&[1, 1, 2, 2]).unwrap());
        let y = tape.resize_concat(low, skip).unwrap();
        let v = tape.value(y).unwrap();
        assert_eq!(v.shape(), &[1, 2, 2, 2]);
        assert_eq!(&v.values()[..4], &[5.0; 4]);
        // Gradient of ones over the four duplicated cells sums to 4 at the source.
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(low).unwrap().unwrap(), &[4.0]);
    }

    #[test]
    fn channel_arithmetic() {
        let mut tape = Tape::new();
        let low = tape.constant(Tensor::zeros(&[2, 2, 3, 3]).unwrap());
        let skip = tape.constant(Tensor::zeros(&[2, 3, 6, 6]).unwrap());
        let y = tape.resize_concat(low, skip).unwrap();
        assert_eq!(tape.value(y).unwrap().shape(), &[2, 5, 6, 6]);
    }

    #[test]
    fn irreconcilable_extents() {
        let mut tape = Tape::new();
        let low = tape.constant(Tensor::zeros(&[1, 1, 3, 3]).unwrap());
        let skip = tape.constant(Tensor::zeros(&[1, 1, 4, 4]).unwrap());
        assert!(tape.resize_concat(low, skip).is_err());
        let skip = tape.constant(Tensor::zeros(&[1, 1, 6, 9]).unwrap());
        assert!(tape.resize_concat(low, skip).is_err());
    }
}
