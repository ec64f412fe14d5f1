//! Same-padded stride-1 convolutions via im2col + GEMM.
//!
//! Layout is channel-last: inputs [B,T,H,W,C] (3D) or [B,H,W,C] (2D),
//! kernels [kT,kH,kW,Cin,Cout] / [kH,kW,Cin,Cout] with extent 3.

use super::elem::Elem;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub struct ConvGrads<E> {
    pub d_input: Tensor<E>,
    pub d_kernel: Tensor<E>,
    pub d_bias: Tensor<E>,
}

fn check_conv3d<E: Elem>(input: &Tensor<E>, kernel: &Tensor<E>, bias: &Tensor<E>) -> Result<()> {
    let is = input.shape();
    let ks = kernel.shape();
    if is.len() != 5 {
        return Err(Error::shape(format!("conv3d input must be [B,T,H,W,C], got {:?}", is)));
    }
    if ks.len() != 5 || ks[0] != 3 || ks[1] != 3 || ks[2] != 3 {
        return Err(Error::shape(format!("conv3d kernel must be [3,3,3,Cin,Cout], got {:?}", ks)));
    }
    if is[4] != ks[3] {
        return Err(Error::shape(format!(
            "conv3d channel mismatch: input {:?} has C_in={}, kernel {:?} expects C_in={}",
            is, is[4], ks, ks[3]
        )));
    }
    if bias.shape() != [ks[4]] {
        return Err(Error::shape(format!(
            "conv3d bias {:?} does not match C_out={}",
            bias.shape(),
            ks[4]
        )));
    }
    Ok(())
}

fn check_conv2d<E: Elem>(input: &Tensor<E>, kernel: &Tensor<E>, bias: &Tensor<E>) -> Result<()> {
    let is = input.shape();
    let ks = kernel.shape();
    if is.len() != 4 {
        return Err(Error::shape(format!("conv2d input must be [B,H,W,C], got {:?}", is)));
    }
    if ks.len() != 4 || ks[0] != 3 || ks[1] != 3 {
        return Err(Error::shape(format!("conv2d kernel must be [3,3,Cin,Cout], got {:?}", ks)));
    }
    if is[3] != ks[2] {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input {:?} has C_in={}, kernel {:?} expects C_in={}",
            is, is[3], ks, ks[2]
        )));
    }
    if bias.shape() != [ks[3]] {
        return Err(Error::shape(format!(
            "conv2d bias {:?} does not match C_out={}",
            bias.shape(),
            ks[3]
        )));
    }
    Ok(())
}

/// Unfolds one [T,H,W,C] sample into [T*H*W, 27*C] with zero padding.
fn im2col3d<E: Elem>(x: &[E], t: usize, h: usize, w: usize, c: usize, col: &mut [E]) {
    let kcols = 27 * c;
    for ot in 0..t {
        for oy in 0..h {
            for ox in 0..w {
                let row = ((ot * h + oy) * w + ox) * kcols;
                for kt in 0..3usize {
                    let st = ot as isize + kt as isize - 1;
                    for ky in 0..3usize {
                        let sy = oy as isize + ky as isize - 1;
                        for kx in 0..3usize {
                            let sx = ox as isize + kx as isize - 1;
                            let dst = row + ((kt * 3 + ky) * 3 + kx) * c;
                            if st >= 0
                                && st < t as isize
                                && sy >= 0
                                && sy < h as isize
                                && sx >= 0
                                && sx < w as isize
                            {
                                let src = (((st as usize * h) + sy as usize) * w + sx as usize) * c;
                                col[dst..dst + c].copy_from_slice(&x[src..src + c]);
                            } else {
                                col[dst..dst + c].iter_mut().for_each(|v| *v = E::zero());
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adds the columns of `col` back into one [T,H,W,C] gradient sample.
fn col2im3d<E: Elem>(col: &[E], t: usize, h: usize, w: usize, c: usize, dx: &mut [E]) {
    let kcols = 27 * c;
    for ot in 0..t {
        for oy in 0..h {
            for ox in 0..w {
                let row = ((ot * h + oy) * w + ox) * kcols;
                for kt in 0..3usize {
                    let st = ot as isize + kt as isize - 1;
                    if st < 0 || st >= t as isize {
                        continue;
                    }
                    for ky in 0..3usize {
                        let sy = oy as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let sx = ox as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let src = row + ((kt * 3 + ky) * 3 + kx) * c;
                            let dst = (((st as usize * h) + sy as usize) * w + sx as usize) * c;
                            for i in 0..c {
                                dx[dst + i] += col[src + i];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col2d<E: Elem>(x: &[E], h: usize, w: usize, c: usize, col: &mut [E]) {
    let kcols = 9 * c;
    for oy in 0..h {
        for ox in 0..w {
            let row = (oy * w + ox) * kcols;
            for ky in 0..3usize {
                let sy = oy as isize + ky as isize - 1;
                for kx in 0..3usize {
                    let sx = ox as isize + kx as isize - 1;
                    let dst = row + (ky * 3 + kx) * c;
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        let src = (sy as usize * w + sx as usize) * c;
                        col[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    } else {
                        col[dst..dst + c].iter_mut().for_each(|v| *v = E::zero());
                    }
                }
            }
        }
    }
}

fn col2im2d<E: Elem>(col: &[E], h: usize, w: usize, c: usize, dx: &mut [E]) {
    let kcols = 9 * c;
    for oy in 0..h {
        for ox in 0..w {
            let row = (oy * w + ox) * kcols;
            for ky in 0..3usize {
                let sy = oy as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3usize {
                    let sx = ox as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = row + (ky * 3 + kx) * c;
                    let dst = (sy as usize * w + sx as usize) * c;
                    for i in 0..c {
                        dx[dst + i] += col[src + i];
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward<E: Elem>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>> {
    check_conv3d(input, kernel, bias)?;
    let [b, t, h, w, cin] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
        input.shape()[4],
    ];
    let cout = kernel.shape()[4];
    let rows = t * h * w;
    let kcols = 27 * cin;
    let mut out = Tensor::zeros(&[b, t, h, w, cout]);
    let mut col = vec![E::zero(); rows * kcols];
    for s in 0..b {
        let x = &input.data()[s * rows * cin..(s + 1) * rows * cin];
        im2col3d(x, t, h, w, cin, &mut col);
        let o = &mut out.data_mut()[s * rows * cout..(s + 1) * rows * cout];
        unsafe {
            E::gemm(
                rows,
                kcols,
                cout,
                E::one(),
                col.as_ptr(),
                kcols as isize,
                1,
                kernel.data().as_ptr(),
                cout as isize,
                1,
                E::zero(),
                o.as_mut_ptr(),
                cout as isize,
                1,
            );
        }
        for orow in o.chunks_mut(cout) {
            for (v, bv) in orow.iter_mut().zip(bias.data()) {
                *v += *bv;
            }
        }
    }
    Ok(out)
}

pub fn conv3d_backward<E: Elem>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    d_out: &Tensor<E>,
) -> Result<ConvGrads<E>> {
    let [b, t, h, w, cin] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
        input.shape()[4],
    ];
    let cout = kernel.shape()[4];
    let rows = t * h * w;
    let kcols = 27 * cin;
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_kernel = Tensor::zeros(kernel.shape());
    let mut d_bias = Tensor::zeros(&[cout]);
    let mut col = vec![E::zero(); rows * kcols];
    let mut dcol = vec![E::zero(); rows * kcols];
    for s in 0..b {
        let x = &input.data()[s * rows * cin..(s + 1) * rows * cin];
        let dy = &d_out.data()[s * rows * cout..(s + 1) * rows * cout];
        im2col3d(x, t, h, w, cin, &mut col);
        unsafe {
            // dK += col^T @ dY
            E::gemm(
                kcols,
                rows,
                cout,
                E::one(),
                col.as_ptr(),
                1,
                kcols as isize,
                dy.as_ptr(),
                cout as isize,
                1,
                E::one(),
                d_kernel.data_mut().as_mut_ptr(),
                cout as isize,
                1,
            );
            // dCol = dY @ K^T
            E::gemm(
                rows,
                cout,
                kcols,
                E::one(),
                dy.as_ptr(),
                cout as isize,
                1,
                kernel.data().as_ptr(),
                1,
                cout as isize,
                E::zero(),
                dcol.as_mut_ptr(),
                kcols as isize,
                1,
            );
        }
        let dx = &mut d_input.data_mut()[s * rows * cin..(s + 1) * rows * cin];
        col2im3d(&dcol, t, h, w, cin, dx);
        for dyrow in dy.chunks(cout) {
            for (a, g) in d_bias.data_mut().iter_mut().zip(dyrow) {
                *a += *g;
            }
        }
    }
    Ok(ConvGrads {
        d_input,
        d_kernel,
        d_bias,
    })
}

pub fn conv2d_forward<E: Elem>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>> {
    check_conv2d(input, kernel, bias)?;
    let [b, h, w, cin] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let cout = kernel.shape()[3];
    let rows = h * w;
    let kcols = 9 * cin;
    let mut out = Tensor::zeros(&[b, h, w, cout]);
    let mut col = vec![E::zero(); rows * kcols];
    for s in 0..b {
        let x = &input.data()[s * rows * cin..(s + 1) * rows * cin];
        im2col2d(x, h, w, cin, &mut col);
        let o = &mut out.data_mut()[s * rows * cout..(s + 1) * rows * cout];
        unsafe {
            E::gemm(
                rows,
                kcols,
                cout,
                E::one(),
                col.as_ptr(),
                kcols as isize,
                1,
                kernel.data().as_ptr(),
                cout as isize,
                1,
                E::zero(),
                o.as_mut_ptr(),
                cout as isize,
                1,
            );
        }
        for orow in o.chunks_mut(cout) {
            for (v, bv) in orow.iter_mut().zip(bias.data()) {
                *v += *bv;
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward<E: Elem>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    d_out: &Tensor<E>,
) -> Result<ConvGrads<E>> {
    let [b, h, w, cin] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let cout = kernel.shape()[3];
    let rows = h * w;
    let kcols = 9 * cin;
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_kernel = Tensor::zeros(kernel.shape());
    let mut d_bias = Tensor::zeros(&[cout]);
    let mut col = vec![E::zero(); rows * kcols];
    let mut dcol = vec![E::zero(); rows * kcols];
    for s in 0..b {
        let x = &input.data()[s * rows * cin..(s + 1) * rows * cin];
        let dy = &d_out.data()[s * rows * cout..(s + 1) * rows * cout];
        im2col2d(x, h, w, cin, &mut col);
        unsafe {
            E::gemm(
                kcols,
                rows,
                cout,
                E::one(),
                col.as_ptr(),
                1,
                kcols as isize,
                dy.as_ptr(),
                cout as isize,
                1,
                E::one(),
                d_kernel.data_mut().as_mut_ptr(),
                cout as isize,
                1,
            );
            E::gemm(
                rows,
                cout,
                kcols,
                E::one(),
                dy.as_ptr(),
                cout as isize,
                1,
                kernel.data().as_ptr(),
                1,
                cout as isize,
                E::zero(),
                dcol.as_mut_ptr(),
                kcols as isize,
                1,
            );
        }
        let dx = &mut d_input.data_mut()[s * rows * cin..(s + 1) * rows * cin];
        col2im2d(&dcol, h, w, cin, dx);
        for dyrow in dy.chunks(cout) {
            for (a, g) in d_bias.data_mut().iter_mut().zip(dyrow) {
                *a += *g;
            }
        }
    }
    Ok(ConvGrads {
        d_input,
        d_kernel,
        d_bias,
    })
}
