//! Node kinds specific to the network: the asymmetric convolution sum,
//! ReLU, channel concatenation and residual addition, each with its
//! backward pass.

use crate::error::{Error, Result};
use crate::tensor::{conv2d_backward, conv2d_forward, ConvSpec, Scalar, Tensor};

/// Kernel shapes of the three parallel convolutions, in summation order.
pub const ASYM_KERNELS: [(usize, usize); 3] = [(1, 3), (3, 3), (3, 1)];

/// Suffixes used for the three member convolutions in parameter names.
pub const ASYM_NAMES: [&str; 3] = ["k1x3", "k3x3", "k3x1"];

/// One convolution's weight and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub spec: ConvSpec,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(spec: ConvSpec) -> Self {
        ConvParams {
            weight: Tensor::zeros(&spec.weight_shape()),
            bias: Tensor::zeros(&[spec.out_channels]),
            spec,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_forward(x, &self.weight, &self.bias, &self.spec)
    }
}

/// Parallel 1×3, 3×3 and 3×1 convolutions whose outputs are summed.
#[derive(Clone, Debug, PartialEq)]
pub struct AsymConvParams<T = f32> {
    pub convs: [ConvParams<T>; 3],
}

impl<T: Scalar> AsymConvParams<T> {
    pub fn specs(in_channels: usize, out_channels: usize) -> Result<[ConvSpec; 3]> {
        let mut out = Vec::with_capacity(3);
        for (kh, kw) in ASYM_KERNELS {
            out.push(ConvSpec::new(in_channels, out_channels, kh, kw)?);
        }
        Ok([out[0], out[1], out[2]])
    }

    pub fn zeros(in_channels: usize, out_channels: usize) -> Result<Self> {
        let [a, b, c] = Self::specs(in_channels, out_channels)?;
        Ok(AsymConvParams {
            convs: [
                ConvParams::zeros(a),
                ConvParams::zeros(b),
                ConvParams::zeros(c),
            ],
        })
    }

    pub fn in_channels(&self) -> usize {
        self.convs[1].spec.in_channels
    }
}

/// `conv1x3(x) + conv3x3(x) + conv3x1(x)`, summed left to right.
pub fn asym_conv<T: Scalar>(x: &Tensor<T>, p: &AsymConvParams<T>) -> Result<Tensor<T>> {
    let [_, c, _, _] = x.dims4()?;
    if c != p.in_channels() {
        return Err(Error::config(format!(
            "asymmetric convolution expects {} channels, got {c}",
            p.in_channels()
        )));
    }
    let mut acc = p.convs[0].forward(x)?;
    for conv in &p.convs[1..] {
        acc.add_assign(&conv.forward(x)?)?;
    }
    Ok(acc)
}

/// Per-convolution `(grad_w, grad_b)` plus the input gradient.
pub struct AsymConvGrads<T = f32> {
    pub grad_x: Tensor<T>,
    pub params: [(Tensor<T>, Tensor<T>); 3],
}

pub fn asym_conv_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &AsymConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<AsymConvGrads<T>> {
    let mut grad_x: Option<Tensor<T>> = None;
    let mut params = Vec::with_capacity(3);
    for conv in &p.convs {
        let g = conv2d_backward(x, &conv.weight, grad_out, &conv.spec)?;
        match grad_x.as_mut() {
            None => grad_x = Some(g.grad_x),
            Some(acc) => acc.add_assign(&g.grad_x)?,
        }
        params.push((g.grad_w, g.grad_b));
    }
    let mut it = params.into_iter();
    Ok(AsymConvGrads {
        grad_x: grad_x.expect("three member convolutions"),
        params: [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()],
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its *output*; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(out: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if out.shape() != grad_out.shape() {
        return Err(Error::config("relu gradient shape mismatch"));
    }
    let data = out
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(out.shape(), data)
}

/// Concatenate along channels, `a`'s channels first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.dims4()?;
    let [nb, cb, hb, wb] = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::config(format!(
            "cannot concatenate {:?} and {:?}: batch or spatial extents differ",
            a.shape(),
            b.shape()
        )));
    }
    let (pa, pb) = (ca * h * w, cb * h * w);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for ni in 0..n {
        data.extend_from_slice(&a.data()[ni * pa..(ni + 1) * pa]);
        data.extend_from_slice(&b.data()[ni * pb..(ni + 1) * pb]);
    }
    Tensor::new(&[n, ca + cb, h, w], data)
}

/// Split channels `[0, first)` and `[first, C)`; inverse of [`concat_channels`].
pub fn split_channels<T: Scalar>(x: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = x.dims4()?;
    if first > c {
        return Err(Error::config(format!(
            "cannot split {c} channels at {first}"
        )));
    }
    let plane = h * w;
    let mut a = Vec::with_capacity(n * first * plane);
    let mut b = Vec::with_capacity(n * (c - first) * plane);
    for ni in 0..n {
        let item = &x.data()[ni * c * plane..(ni + 1) * c * plane];
        a.extend_from_slice(&item[..first * plane]);
        b.extend_from_slice(&item[first * plane..]);
    }
    Ok((
        Tensor::new(&[n, first, h, w], a)?,
        Tensor::new(&[n, c - first, h, w], b)?,
    ))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "cannot add {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}
