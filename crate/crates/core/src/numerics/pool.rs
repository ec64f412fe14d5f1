//! Max pooling and nearest-neighbor upsampling.
//!
//! Pooling ties break toward the first maximal element in scan order so
//! gradient routing replays deterministically.

use super::elem::Elem;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// 1x2x2 pooling over [B,T,H,W,C]. Returns (output, argmax flat indices).
pub fn maxpool3d_spatial<E: Elem>(input: &Tensor<E>) -> Result<(Tensor<E>, Vec<u32>)> {
    let s = input.shape();
    if s.len() != 5 {
        return Err(Error::shape(format!("maxpool3d input must be [B,T,H,W,C], got {:?}", s)));
    }
    let [b, t, h, w, c] = [s[0], s[1], s[2], s[3], s[4]];
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("maxpool3d requires even H and W, got {}x{}", h, w)));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, t, oh, ow, c]);
    let mut argmax = vec![0u32; out.numel()];
    let x = input.data();
    let o = out.data_mut();
    let mut oi = 0;
    for s_ in 0..b {
        for ti in 0..t {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = E::neg_infinity();
                        let mut best_idx = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((((s_ * t + ti) * h + oy * 2 + dy) * w)
                                    + ox * 2
                                    + dx)
                                    * c
                                    + ch;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        o[oi] = best;
                        argmax[oi] = best_idx as u32;
                        oi += 1;
                    }
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Global temporal + 2x2 spatial pooling: [B,T,H,W,C] -> [B,1,H/2,W/2,C].
pub fn maxpool3d_global_temporal<E: Elem>(input: &Tensor<E>) -> Result<(Tensor<E>, Vec<u32>)> {
    let s = input.shape();
    if s.len() != 5 {
        return Err(Error::shape(format!("maxpool3d input must be [B,T,H,W,C], got {:?}", s)));
    }
    let [b, t, h, w, c] = [s[0], s[1], s[2], s[3], s[4]];
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("maxpool3d requires even H and W, got {}x{}", h, w)));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, 1, oh, ow, c]);
    let mut argmax = vec![0u32; out.numel()];
    let x = input.data();
    let o = out.data_mut();
    let mut oi = 0;
    for s_ in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = E::neg_infinity();
                    let mut best_idx = 0usize;
                    for ti in 0..t {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((((s_ * t + ti) * h + oy * 2 + dy) * w)
                                    + ox * 2
                                    + dx)
                                    * c
                                    + ch;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    o[oi] = best;
                    argmax[oi] = best_idx as u32;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// 2x2 pooling over [B,H,W,C].
pub fn maxpool2d<E: Elem>(input: &Tensor<E>) -> Result<(Tensor<E>, Vec<u32>)> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("maxpool2d input must be [B,H,W,C], got {:?}", s)));
    }
    let [b, h, w, c] = [s[0], s[1], s[2], s[3]];
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("maxpool2d requires even H and W, got {}x{}", h, w)));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, oh, ow, c]);
    let mut argmax = vec![0u32; out.numel()];
    let x = input.data();
    let o = out.data_mut();
    let mut oi = 0;
    for s_ in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = E::neg_infinity();
                    let mut best_idx = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx =
                                (((s_ * h) + oy * 2 + dy) * w + ox * 2 + dx) * c + ch;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    o[oi] = best;
                    argmax[oi] = best_idx as u32;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Nearest-neighbor 2x upsampling over [B,H,W,C].
pub fn upsample2x<E: Elem>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("upsample2x input must be [B,H,W,C], got {:?}", s)));
    }
    let [b, h, w, c] = [s[0], s[1], s[2], s[3]];
    let mut out = Tensor::zeros(&[b, 2 * h, 2 * w, c]);
    let x = input.data();
    let o = out.data_mut();
    for s_ in 0..b {
        for y in 0..2 * h {
            for xcol in 0..2 * w {
                let src = (((s_ * h) + y / 2) * w + xcol / 2) * c;
                let dst = (((s_ * 2 * h) + y) * 2 * w + xcol) * c;
                o[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    Ok(out)
}

/// Each input cell's gradient is the sum of its four replicas.
pub fn upsample2x_backward<E: Elem>(input_shape: &[usize], d_out: &Tensor<E>) -> Result<Tensor<E>> {
    let [b, h, w, c] = [input_shape[0], input_shape[1], input_shape[2], input_shape[3]];
    let mut d_input = Tensor::zeros(input_shape);
    let dy = d_out.data();
    let dx = d_input.data_mut();
    for s_ in 0..b {
        for y in 0..2 * h {
            for xcol in 0..2 * w {
                let src = (((s_ * h) + y / 2) * w + xcol / 2) * c;
                let dst = (((s_ * 2 * h) + y) * 2 * w + xcol) * c;
                for i in 0..c {
                    dx[src + i] += dy[dst + i];
                }
            }
        }
    }
    Ok(d_input)
}
