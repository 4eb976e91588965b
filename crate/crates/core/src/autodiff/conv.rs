use rayon::prelude::*;

use super::gemm::gemm;
use super::tensor::{Op, Tensor};

/// Geometry of a 2-D convolution over NCHW tensors. The same geometry
/// describes the convolution, its input gradient (a transposed convolution)
/// and its weight gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Forward geometry for a convolution of `[c_in, in_h, in_w]` inputs.
    pub fn new(
        c_in: usize,
        c_out: usize,
        in_h: usize,
        in_w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        assert!(
            in_h + 2 * pad >= k && in_w + 2 * pad >= k,
            "kernel larger than padded input"
        );
        ConvGeom {
            c_in,
            c_out,
            in_h,
            in_w,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
            kh: k,
            kw: k,
            stride,
            pad,
        }
    }

    /// Geometry of the convolution whose input gradient maps `[c_t_in, h, w]`
    /// to `[c_t_out, (h-1)*stride - 2*pad + k, ...]`, i.e. a transposed
    /// convolution with `c_t_in` input channels.
    pub fn transposed(
        c_t_in: usize,
        c_t_out: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let out_h = (h - 1) * stride + k - 2 * pad;
        let out_w = (w - 1) * stride + k - 2 * pad;
        ConvGeom {
            c_in: c_t_out,
            c_out: c_t_in,
            in_h: out_h,
            in_w: out_w,
            out_h: h,
            out_w: w,
            kh: k,
            kw: k,
            stride,
            pad,
        }
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn input_len(&self) -> usize {
        self.c_in * self.in_h * self.in_w
    }

    fn output_len(&self) -> usize {
        self.c_out * self.out_h * self.out_w
    }

    fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kh, self.kw]
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.in_h + iy as usize) * self.in_w..][..self.in_w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.in_w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let p = self.positions();
        x.fill(0.0);
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut x[(c * self.in_h + iy as usize) * self.in_w..][..self.in_w];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn check_input(&self, t: &Tensor) -> usize {
        assert_eq!(
            &t.shape()[1..],
            &[self.c_in, self.in_h, self.in_w],
            "conv input shape mismatch"
        );
        t.dim(0)
    }

    fn check_output(&self, t: &Tensor) -> usize {
        assert_eq!(
            &t.shape()[1..],
            &[self.c_out, self.out_h, self.out_w],
            "conv output-gradient shape mismatch"
        );
        t.dim(0)
    }

    fn check_weight(&self, w: &Tensor) {
        assert_eq!(
            w.shape(),
            &self.weight_shape(),
            "conv weight shape mismatch"
        );
    }
}

impl Tensor {
    /// Cross-correlation of an NCHW input with `[c_out, c_in, k, k]` weights.
    pub fn conv2d(&self, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        assert_eq!(self.rank(), 4, "conv2d expects NCHW input");
        assert_eq!(w.rank(), 4, "conv2d expects a rank-4 weight");
        assert_eq!(w.dim(2), w.dim(3), "square kernels only");
        let geom = ConvGeom::new(
            w.dim(1),
            w.dim(0),
            self.dim(2),
            self.dim(3),
            w.dim(2),
            stride,
            pad,
        );
        self.conv2d_geom(w, geom)
    }

    /// Transposed convolution with `[c_in, c_out, k, k]` weights.
    pub fn conv_transpose2d(&self, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        assert_eq!(self.rank(), 4, "conv_transpose2d expects NCHW input");
        assert_eq!(w.dim(0), self.dim(1), "conv_transpose2d channel mismatch");
        let geom = ConvGeom::transposed(
            w.dim(0),
            w.dim(1),
            self.dim(2),
            self.dim(3),
            w.dim(2),
            stride,
            pad,
        );
        self.conv_input_grad(w, geom)
    }

    pub(crate) fn conv2d_geom(&self, w: &Tensor, geom: ConvGeom) -> Tensor {
        let n = geom.check_input(self);
        geom.check_weight(w);
        let (k, p) = (geom.patch_len(), geom.positions());
        let (in_len, out_len) = (geom.input_len(), geom.output_len());
        let x = self.data();
        let wd = w.data();
        let mut out = vec![0.0; n * out_len];
        out.par_chunks_mut(out_len).enumerate().for_each(|(i, y)| {
            let xs = &x[i * in_len..(i + 1) * in_len];
            if geom.is_pointwise() {
                gemm(geom.c_out, k, p, wd, false, xs, false, y, 0.0);
            } else {
                let mut cols = vec![0.0; k * p];
                geom.im2col(xs, &mut cols);
                gemm(geom.c_out, k, p, wd, false, &cols, false, y, 0.0);
            }
        });
        Tensor::from_op(
            out,
            vec![n, geom.c_out, geom.out_h, geom.out_w],
            Op::Conv(self.clone(), w.clone(), geom),
        )
    }

    /// Gradient of a convolution with respect to its input, with `self` as the
    /// output gradient. Also serves as the transposed-convolution forward pass.
    pub(crate) fn conv_input_grad(&self, w: &Tensor, geom: ConvGeom) -> Tensor {
        let n = geom.check_output(self);
        geom.check_weight(w);
        let (k, p) = (geom.patch_len(), geom.positions());
        let (in_len, out_len) = (geom.input_len(), geom.output_len());
        let g = self.data();
        let wd = w.data();
        let mut out = vec![0.0; n * in_len];
        out.par_chunks_mut(in_len).enumerate().for_each(|(i, x)| {
            let gs = &g[i * out_len..(i + 1) * out_len];
            if geom.is_pointwise() {
                gemm(k, geom.c_out, p, wd, true, gs, false, x, 0.0);
            } else {
                let mut cols = vec![0.0; k * p];
                gemm(k, geom.c_out, p, wd, true, gs, false, &mut cols, 0.0);
                geom.col2im(&cols, x);
            }
        });
        Tensor::from_op(
            out,
            vec![n, geom.c_in, geom.in_h, geom.in_w],
            Op::ConvInputGrad(self.clone(), w.clone(), geom),
        )
    }

    /// Gradient of a convolution with respect to its weight, with `self` as
    /// the input and `g` the output gradient.
    pub(crate) fn conv_weight_grad(&self, g: &Tensor, geom: ConvGeom) -> Tensor {
        let n = geom.check_input(self);
        assert_eq!(geom.check_output(g), n, "conv batch mismatch");
        let (k, p) = (geom.patch_len(), geom.positions());
        let (in_len, out_len) = (geom.input_len(), geom.output_len());
        let x = self.data();
        let gd = g.data();
        let partials: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xs = &x[i * in_len..(i + 1) * in_len];
                let gs = &gd[i * out_len..(i + 1) * out_len];
                let mut acc = vec![0.0; geom.c_out * k];
                if geom.is_pointwise() {
                    gemm(geom.c_out, p, k, gs, false, xs, true, &mut acc, 0.0);
                } else {
                    let mut cols = vec![0.0; k * p];
                    geom.im2col(xs, &mut cols);
                    gemm(geom.c_out, p, k, gs, false, &cols, true, &mut acc, 0.0);
                }
                acc
            })
            .collect();
        // Fixed-order reduction keeps results independent of thread count.
        let mut out = vec![0.0; geom.c_out * k];
        for part in &partials {
            for (o, v) in out.iter_mut().zip(part) {
                *o += v;
            }
        }
        Tensor::from_op(
            out,
            geom.weight_shape().to_vec(),
            Op::ConvWeightGrad(self.clone(), g.clone(), geom),
        )
    }
}
