use super::Activation;
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_at, matmul_bt, Scalar, Tensor};

/// 2-D convolution with square kernels, lowered to GEMM through im2col.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    /// `[c_out, c_in, k, k]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[c_out, c_in, kernel, kernel]),
            bias: Tensor::zeros(&[c_out]),
            stride,
            pad,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel();
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if hp < k || wp < k {
            return None;
        }
        Some(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    fn geometry(&self, x: &Activation<T>) -> Result<Geometry> {
        if x.c != self.c_in() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.c_in(),
                x.c
            )));
        }
        let (ho, wo) = self.out_size(x.h, x.w).ok_or_else(|| {
            Error::Shape(format!(
                "{}x{} input too small for {}x{} kernel",
                x.h,
                x.w,
                self.kernel(),
                self.kernel()
            ))
        })?;
        Ok(Geometry {
            c: x.c,
            h: x.h,
            w: x.w,
            k: self.kernel(),
            stride: self.stride,
            pad: self.pad,
            ho,
            wo,
        })
    }

    pub fn forward(&self, x: &Activation<T>) -> Result<Activation<T>> {
        let g = self.geometry(x)?;
        let c_out = self.c_out();
        let kk = g.c * g.k * g.k;
        let p = g.ho * g.wo;
        let mut out = Activation::zeros(x.n, c_out, g.ho, g.wo);
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
        for i in 0..x.n {
            let xs = x.sample(i);
            let ys = out.sample_mut(i);
            for (co, row) in ys.chunks_exact_mut(p).enumerate() {
                row.fill(self.bias.data()[co]);
            }
            if g.is_pointwise() {
                matmul(c_out, kk, p, self.weight.data(), xs, ys, true);
            } else {
                g.im2col(xs, &mut cols);
                matmul(c_out, kk, p, self.weight.data(), &cols, ys, true);
            }
        }
        Ok(out)
    }

    /// Accumulates `dL/dW`, `dL/db` into `grad`; returns `dL/dx` when asked.
    pub fn backward(
        &self,
        x: &Activation<T>,
        dy: &Activation<T>,
        grad: &mut Conv2d<T>,
        need_dx: bool,
    ) -> Result<Option<Activation<T>>> {
        let g = self.geometry(x)?;
        let c_out = self.c_out();
        if dy.n != x.n || dy.c != c_out || dy.h != g.ho || dy.w != g.wo {
            return Err(Error::Shape("conv backward: output gradient shape".into()));
        }
        let kk = g.c * g.k * g.k;
        let p = g.ho * g.wo;
        let mut dx = need_dx.then(|| Activation::zeros(x.n, x.c, x.h, x.w));
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
        let mut dcols = vec![T::zero(); kk * p];
        for i in 0..x.n {
            let dys = dy.sample(i);
            for (co, row) in dys.chunks_exact(p).enumerate() {
                grad.bias.data_mut()[co] += row.iter().copied().sum::<T>();
            }
            let xcols: &[T] = if g.is_pointwise() {
                x.sample(i)
            } else {
                g.im2col(x.sample(i), &mut cols);
                &cols
            };
            // dW[c_out×kk] += dY[c_out×p] · cols^T
            matmul_bt(c_out, p, kk, dys, xcols, grad.weight.data_mut(), true);
            if let Some(dx) = dx.as_mut() {
                // dcols[kk×p] = W^T · dY
                if g.is_pointwise() {
                    matmul_at(kk, c_out, p, self.weight.data(), dys, dx.sample_mut(i), false);
                } else {
                    matmul_at(kk, c_out, p, self.weight.data(), dys, &mut dcols, false);
                    g.col2im(&dcols, dx.sample_mut(i));
                }
            }
        }
        Ok(dx)
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.ho * self.wo;
        let pad = self.pad as isize;
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = &mut cols[((c * self.k + ki) * self.k + kj) * p..][..p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - pad;
                        let dst = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - pad;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.ho * self.wo;
        let pad = self.pad as isize;
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = &cols[((c * self.k + ki) * self.k + kj) * p..][..p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let src = &row[oy * self.wo..(oy + 1) * self.wo];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - pad;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}
