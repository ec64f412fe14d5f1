//! Batch normalization (channel-last) and row softmax.

use super::elem::Elem;
use super::graph::{BnMode, BnStats};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub struct BnForward<E> {
    pub value: Tensor<E>,
    /// Mean used for normalization (batch or running, depending on mode).
    pub mean: Tensor<E>,
    pub inv_std: Tensor<E>,
    /// Batch variance (biased); only meaningful in train mode.
    pub var: Tensor<E>,
}

pub struct BnGrads<E> {
    pub d_input: Tensor<E>,
    pub d_gamma: Tensor<E>,
    pub d_beta: Tensor<E>,
}

pub fn batch_norm_forward<E: Elem>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: E,
    mode: BnMode,
    stats: &BnStats<E>,
) -> Result<BnForward<E>> {
    let c = *input
        .shape()
        .last()
        .ok_or_else(|| Error::shape("batch_norm on rank-0 tensor"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "batch_norm gamma/beta must be [{}], got {:?}/{:?}",
            c,
            gamma.shape(),
            beta.shape()
        )));
    }
    let m = input.numel() / c;
    if m == 0 {
        return Err(Error::arg("batch_norm on an empty batch"));
    }
    let (mean, var) = match mode {
        BnMode::Train => {
            let mut mean = vec![E::zero(); c];
            let mut var = vec![E::zero(); c];
            for row in input.data().chunks(c) {
                for (a, &v) in mean.iter_mut().zip(row) {
                    *a += v;
                }
            }
            let inv_m = E::one() / E::from_f64(m as f64);
            mean.iter_mut().for_each(|v| *v *= inv_m);
            for row in input.data().chunks(c) {
                for ((a, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - mu;
                    *a += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v *= inv_m);
            (mean, var)
        }
        BnMode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
    };
    let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
    let mut out = Tensor::zeros(input.shape());
    for (orow, xrow) in out.data_mut().chunks_mut(c).zip(input.data().chunks(c)) {
        for i in 0..c {
            orow[i] = gamma.data()[i] * (xrow[i] - mean[i]) * inv_std[i] + beta.data()[i];
        }
    }
    Ok(BnForward {
        value: out,
        mean: Tensor::from_vec(&[c], mean)?,
        inv_std: Tensor::from_vec(&[c], inv_std)?,
        var: Tensor::from_vec(&[c], var)?,
    })
}

pub fn updated_running_stats<E: Elem>(
    batch_mean: &Tensor<E>,
    batch_var: &Tensor<E>,
    stats: &BnStats<E>,
    momentum: E,
) -> (Tensor<E>, Tensor<E>) {
    let keep = E::one() - momentum;
    let mean = Tensor::from_vec(
        batch_mean.shape(),
        stats
            .mean
            .data()
            .iter()
            .zip(batch_mean.data())
            .map(|(&o, &n)| o * keep + n * momentum)
            .collect(),
    )
    .expect("shapes match");
    let var = Tensor::from_vec(
        batch_var.shape(),
        stats
            .var
            .data()
            .iter()
            .zip(batch_var.data())
            .map(|(&o, &n)| o * keep + n * momentum)
            .collect(),
    )
    .expect("shapes match");
    (mean, var)
}

pub fn batch_norm_backward<E: Elem>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    mean: &Tensor<E>,
    inv_std: &Tensor<E>,
    train: bool,
    d_out: &Tensor<E>,
) -> BnGrads<E> {
    let c = *input.shape().last().unwrap();
    let m = input.numel() / c;
    let mf = E::from_f64(m as f64);
    let mut d_gamma = vec![E::zero(); c];
    let mut d_beta = vec![E::zero(); c];
    let mut sum_dxhat = vec![E::zero(); c];
    let mut sum_dxhat_xhat = vec![E::zero(); c];
    for (xrow, dyrow) in input.data().chunks(c).zip(d_out.data().chunks(c)) {
        for i in 0..c {
            let xhat = (xrow[i] - mean.data()[i]) * inv_std.data()[i];
            d_gamma[i] += dyrow[i] * xhat;
            d_beta[i] += dyrow[i];
            let dxhat = dyrow[i] * gamma.data()[i];
            sum_dxhat[i] += dxhat;
            sum_dxhat_xhat[i] += dxhat * xhat;
        }
    }
    let mut d_input = Tensor::zeros(input.shape());
    if train {
        for ((dxrow, xrow), dyrow) in d_input
            .data_mut()
            .chunks_mut(c)
            .zip(input.data().chunks(c))
            .zip(d_out.data().chunks(c))
        {
            for i in 0..c {
                let xhat = (xrow[i] - mean.data()[i]) * inv_std.data()[i];
                let dxhat = dyrow[i] * gamma.data()[i];
                dxrow[i] = inv_std.data()[i]
                    * (dxhat - sum_dxhat[i] / mf - xhat * sum_dxhat_xhat[i] / mf);
            }
        }
    } else {
        // running stats are constants in eval mode
        for (dxrow, dyrow) in d_input
            .data_mut()
            .chunks_mut(c)
            .zip(d_out.data().chunks(c))
        {
            for i in 0..c {
                dxrow[i] = dyrow[i] * gamma.data()[i] * inv_std.data()[i];
            }
        }
    }
    BnGrads {
        d_input,
        d_gamma: Tensor::from_vec(&[c], d_gamma).expect("shape"),
        d_beta: Tensor::from_vec(&[c], d_beta).expect("shape"),
    }
}

/// Numerically stable row-wise softmax of [B,K].
pub fn softmax_rows<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    let k = x.shape()[1];
    let mut out = Tensor::zeros(x.shape());
    for (orow, xrow) in out.data_mut().chunks_mut(k).zip(x.data().chunks(k)) {
        let mx = xrow.iter().cloned().fold(E::neg_infinity(), E::max);
        let mut sum = E::zero();
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = (v - mx).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}
