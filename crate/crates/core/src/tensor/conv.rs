//! im2col convolution over channels-last feature maps.

use super::kernels::gemm;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 || x[3] != k[2] || stride == 0 {
            return Err(Error::shape("conv2d", x, k));
        }
        let (h, w) = (x[1] + 2 * pad, x[2] + 2 * pad);
        if h < k[0] || w < k[1] {
            return Err(Error::shape("conv2d", x, k));
        }
        Ok(ConvGeom {
            batch: x[0],
            h: x[1],
            w: x[2],
            cin: x[3],
            kh: k[0],
            kw: k[1],
            cout: k[3],
            stride,
            pad,
            ho: (h - k[0]) / stride + 1,
            wo: (w - k[1]) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.ho, self.wo, self.cout]
    }

    fn rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Calls `f(col_offset, input_offset)` for every in-bounds
    /// (output position, kernel tap) pair; each covers `cin` contiguous values.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let patch = self.patch();
        for b in 0..self.batch {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (b * self.ho + oy) * self.wo + ox;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let col = row * patch + (ky * self.kw + kx) * self.cin;
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            f(col, src);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let mut cols = vec![0.0; g.rows() * g.patch()];
    g.for_each_tap(|col, src| cols[col..col + g.cin].copy_from_slice(&x[src..src + g.cin]));
    cols
}

pub(crate) fn forward(g: &ConvGeom, cols: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.rows() * g.cout];
    gemm(g.rows(), g.patch(), g.cout, cols, false, w, false, &mut out, false);
    out
}

pub(crate) fn weight_grad(g: &ConvGeom, cols: &[f64], grad: &[f64]) -> Vec<f64> {
    let mut gw = vec![0.0; g.patch() * g.cout];
    gemm(g.patch(), g.rows(), g.cout, cols, true, grad, false, &mut gw, false);
    gw
}

pub(crate) fn input_grad(g: &ConvGeom, w: &[f64], grad: &[f64]) -> Vec<f64> {
    let mut dcols = vec![0.0; g.rows() * g.patch()];
    gemm(g.rows(), g.cout, g.patch(), grad, false, w, true, &mut dcols, false);
    let mut gx = vec![0.0; g.batch * g.h * g.w * g.cin];
    g.for_each_tap(|col, src| {
        for c in 0..g.cin {
            gx[src + c] += dcols[col + c];
        }
    });
    gx
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor};

    /// Direct nested-loop convolution.
    fn naive(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (b, h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kh, kw, co) = (k.shape()[0], k.shape()[1], k.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[b, ho, wo, co]);
        for n in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for o in 0..co {
                        let mut s = 0.0;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for c in 0..ci {
                                    s += x.get(&[n, iy as usize, ix as usize, c])
                                        * k.get(&[ky, kx, c, o]);
                                }
                            }
                        }
                        let at = ((n * ho + oy) * wo + ox) * co + o;
                        out.data_mut()[at] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops_with_stride_and_padding() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[2, 5, 7, 3], 1.0, &mut rng);
        let k = Tensor::uniform(&[3, 3, 3, 4], 1.0, &mut rng);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let tape = Tape::new();
            let y = tape
                .constant(x.clone())
                .conv2d(&tape.constant(k.clone()), stride, pad)
                .unwrap();
            let expect = naive(&x, &k, stride, pad);
            assert_eq!(y.shape(), expect.shape());
            assert!(y.value().max_abs_diff(&expect).unwrap() < 1e-12);
        }
    }

    #[test]
    fn stride_two_halves_with_ceiling() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 64, 257, 1]));
        let k = tape.constant(Tensor::zeros(&[3, 3, 1, 2]));
        assert_eq!(x.conv2d(&k, 2, 1).unwrap().shape(), vec![1, 32, 129, 2]);
    }
}
