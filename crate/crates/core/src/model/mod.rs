//! Network assembly: odd/even enhancement blocks, the full trunk with its
//! global and local residual taps, the sub-pixel upsampler, initialization
//! and the ablation variants.
//!
//! Layer numbering follows the usual description of the network: layer 1 is
//! the head convolution, layer `2k` is the k-th odd enhancement block (OEB),
//! layer `2k+1` the k-th even enhancement block (EEB), then the trunk tail
//! convolution, the upsampler and the reconstruction convolution. With the
//! default 16 block pairs that is 36 layers.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::autograd::{LayerGraph, NodeId, ParamRole};
use crate::error::{Error, Result};
use crate::layers::{self, asym_conv, concat_channels, relu, AsymConvParams, ConvParams};
use crate::tensor::{cast, pixel_shuffle, Scalar, Tensor};

pub use checkpoint::{
    inspect_checkpoint, load_checkpoint, load_checkpoint_into, read_checkpoint, save_checkpoint,
    Checkpoint, CheckpointEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

/// Channels of input and output images.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// The complete network.
    Full,
    /// Every OEB replaced by an EEB.
    EebOnly,
    /// OEB whose concatenation feeds a 1×1 channel reduction, without skip.
    OebNoSerial,
    /// OEB without the skip from its first ReLU.
    OebNoResidual,
    /// Every OEB replaced by three stacked 3×3 conv + ReLU.
    PlainConvs,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::EebOnly,
        Variant::OebNoSerial,
        Variant::OebNoResidual,
        Variant::PlainConvs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::EebOnly => "eeb_only",
            Variant::OebNoSerial => "oeb_no_serial",
            Variant::OebNoResidual => "oeb_no_residual",
            Variant::PlainConvs => "plain_convs",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Variant::Full => 0,
            Variant::EebOnly => 1,
            Variant::OebNoSerial => 2,
            Variant::OebNoResidual => 3,
            Variant::PlainConvs => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.code() == code)
            .ok_or_else(|| Error::config(format!("unknown variant code {code}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant '{s}'")))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsrnetConfig {
    pub features: usize,
    pub n_pairs: usize,
    pub scale: usize,
    pub local_tap_src: usize,
    pub local_tap_dst: usize,
    pub variant: Variant,
}

impl Default for CsrnetConfig {
    fn default() -> Self {
        CsrnetConfig {
            features: 64,
            n_pairs: 16,
            scale: 2,
            local_tap_src: 9,
            local_tap_dst: 21,
            variant: Variant::Full,
        }
    }
}

impl CsrnetConfig {
    /// Small configuration used by gradient checks and smoke tests.
    pub fn mini(features: usize, scale: usize) -> Self {
        CsrnetConfig {
            features,
            n_pairs: 2,
            scale,
            local_tap_src: 2,
            local_tap_dst: 5,
            variant: Variant::Full,
        }
    }

    /// Layers of the low-frequency trunk: head conv, blocks, tail conv.
    pub fn trunk_layers(&self) -> usize {
        2 * self.n_pairs + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.features == 0 {
            return Err(Error::config("model.features must be >= 1"));
        }
        if self.n_pairs == 0 {
            return Err(Error::config("model.n_pairs must be >= 1"));
        }
        if !matches!(self.scale, 2..=4) {
            return Err(Error::config(format!(
                "scale must be 2, 3 or 4, got {}",
                self.scale
            )));
        }
        let last_block = 2 * self.n_pairs + 1;
        if !(1 <= self.local_tap_src
            && self.local_tap_src < self.local_tap_dst
            && self.local_tap_dst <= last_block)
        {
            return Err(Error::config(format!(
                "local residual taps must satisfy 1 <= src < dst <= {last_block}, got {} -> {}",
                self.local_tap_src, self.local_tap_dst
            )));
        }
        Ok(())
    }
}

fn layer_prefix(layer: usize) -> String {
    format!("layer{layer:02}")
}

/// Append an odd enhancement block (or its ablation replacement) to `g`.
pub fn build_oeb<T: Scalar>(
    g: &mut LayerGraph<T>,
    p: &str,
    x: NodeId,
    f: usize,
    variant: Variant,
) -> Result<NodeId> {
    match variant {
        Variant::EebOnly => return build_eeb(g, p, x, f),
        Variant::PlainConvs => {
            let mut cur = x;
            for i in 1..=3 {
                let c = g.conv(&format!("{p}.conv{i}"), cur, f, 3, 3)?;
                cur = g.relu(&format!("{p}.relu{i}"), c)?;
            }
            return Ok(cur);
        }
        _ => {}
    }
    let r0 = g.relu(&format!("{p}.relu_in"), x)?;
    let mut branches = [0; 2];
    for (b, out) in branches.iter_mut().enumerate() {
        let q = format!("{p}.branch{}", b + 1);
        let a1 = g.asym_conv(&format!("{q}.asym1"), r0, f)?;
        let r = g.relu(&format!("{q}.relu"), a1)?;
        *out = g.asym_conv(&format!("{q}.asym2"), r, f)?;
    }
    let cat = g.concat(&format!("{p}.concat"), branches[0], branches[1])?;
    let cr = g.relu(&format!("{p}.concat_relu"), cat)?;
    let s = if variant == Variant::OebNoSerial {
        let c = g.conv(&format!("{p}.reduce"), cr, f, 1, 1)?;
        g.relu(&format!("{p}.reduce_relu"), c)?
    } else {
        let c = g.asym_conv(&format!("{p}.serial"), cr, f)?;
        g.relu(&format!("{p}.serial_relu"), c)?
    };
    if variant == Variant::Full {
        g.add(&format!("{p}.skip"), s, r0)
    } else {
        Ok(s)
    }
}

/// Append an even enhancement block: `conv(relu(conv(x))) + x`.
pub fn build_eeb<T: Scalar>(g: &mut LayerGraph<T>, p: &str, x: NodeId, f: usize) -> Result<NodeId> {
    let c1 = g.conv(&format!("{p}.conv1"), x, f, 3, 3)?;
    let r = g.relu(&format!("{p}.relu"), c1)?;
    let c2 = g.conv(&format!("{p}.conv2"), r, f, 3, 3)?;
    g.add(&format!("{p}.skip"), c2, x)
}

/// Append a sub-pixel upsampler: conv to `r²·F` channels then pixel
/// shuffle by `r`; ×4 is two ×2 stages.
pub fn build_upsampler<T: Scalar>(
    g: &mut LayerGraph<T>,
    prefix: &str,
    x: NodeId,
    features: usize,
    scale: usize,
) -> Result<NodeId> {
    let stages: &[usize] = match scale {
        2 => &[2],
        3 => &[3],
        4 => &[2, 2],
        s => return Err(Error::config(format!("unsupported upsampling scale {s}"))),
    };
    let mut cur = x;
    for (i, &r) in stages.iter().enumerate() {
        let c = g.conv(
            &format!("{prefix}.up{}.conv", i + 1),
            cur,
            features * r * r,
            3,
            3,
        )?;
        cur = g.pixel_shuffle(&format!("{prefix}.up{}.shuffle", i + 1), c, r)?;
    }
    Ok(cur)
}

/// Build the network described by `cfg` (including its variant).
pub fn build_csrnet<T: Scalar>(cfg: &CsrnetConfig) -> Result<LayerGraph<T>> {
    cfg.validate()?;
    let f = cfg.features;
    let mut g = LayerGraph::new(IMAGE_CHANNELS);
    let input = g.input();

    let head = g.conv(&format!("{}.conv", layer_prefix(1)), input, f, 3, 3)?;
    let mut outputs = vec![input, head];
    let mut cur = head;
    for k in 1..=cfg.n_pairs {
        for layer in [2 * k, 2 * k + 1] {
            let p = layer_prefix(layer);
            let raw = if layer % 2 == 0 {
                build_oeb(&mut g, &format!("{p}.oeb"), cur, f, cfg.variant)?
            } else {
                build_eeb(&mut g, &format!("{p}.eeb"), cur, f)?
            };
            outputs.push(raw);
            cur = if layer == cfg.local_tap_dst {
                g.add(
                    &format!("{p}.local_residual"),
                    raw,
                    outputs[cfg.local_tap_src],
                )?
            } else {
                raw
            };
        }
    }

    let tail_layer = cfg.trunk_layers();
    let tail = g.conv(&format!("{}.conv", layer_prefix(tail_layer)), cur, f, 3, 3)?;
    let merged = g.add(
        &format!("{}.global_residual", layer_prefix(tail_layer)),
        tail,
        head,
    )?;
    let up = build_upsampler(&mut g, &layer_prefix(tail_layer + 1), merged, f, cfg.scale)?;
    let recon = g.conv(
        &format!("{}.conv", layer_prefix(tail_layer + 2)),
        up,
        IMAGE_CHANNELS,
        3,
        3,
    )?;
    g.output("output", recon)?;
    Ok(g)
}

/// Build an ablation variant of the network.
pub fn build_variant<T: Scalar>(cfg: &CsrnetConfig, variant: Variant) -> Result<LayerGraph<T>> {
    build_csrnet(&CsrnetConfig {
        variant,
        ..cfg.clone()
    })
}

/// Weights uniform in `±1/sqrt(kh·kw·Cin)`, zero biases. Draws follow
/// parameter construction order from one seeded generator.
pub fn init_params<T: Scalar>(g: &mut LayerGraph<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in g.params_mut() {
        match p.role {
            ParamRole::Bias => p.value.fill(T::zero()),
            ParamRole::Weight { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                for v in p.value.data_mut() {
                    *v = cast(dist.sample(&mut rng));
                }
            }
        }
        p.grad.fill(T::zero());
    }
}

/// Weights of one odd enhancement block, for evaluating it outside a graph.
#[derive(Clone, Debug)]
pub struct OebParams<T = f32> {
    pub branch1: [AsymConvParams<T>; 2],
    pub branch2: [AsymConvParams<T>; 2],
    pub serial: AsymConvParams<T>,
}

impl<T: Scalar> OebParams<T> {
    pub fn zeros(features: usize) -> Result<Self> {
        let a = AsymConvParams::zeros(features, features)?;
        Ok(OebParams {
            branch1: [a.clone(), a.clone()],
            branch2: [a.clone(), a],
            serial: AsymConvParams::zeros(2 * features, features)?,
        })
    }

    /// Copy the weights of the block whose nodes are named `{prefix}.*`.
    pub fn from_graph(g: &LayerGraph<T>, prefix: &str) -> Result<Self> {
        let get = |name: String| {
            g.find_node(&name)
                .and_then(|id| g.asym_params_of(id))
                .ok_or_else(|| Error::Schema(format!("no asymmetric convolution '{name}'")))
        };
        Ok(OebParams {
            branch1: [
                get(format!("{prefix}.branch1.asym1"))?,
                get(format!("{prefix}.branch1.asym2"))?,
            ],
            branch2: [
                get(format!("{prefix}.branch2.asym1"))?,
                get(format!("{prefix}.branch2.asym2"))?,
            ],
            serial: get(format!("{prefix}.serial"))?,
        })
    }
}

/// Odd enhancement block:
/// `r0 = relu(x)`, two branches `A(relu(A(r0)))`, `relu(concat)`,
/// `relu(A_serial(·))`, plus the skip `r0`.
pub fn oeb_forward<T: Scalar>(x: &Tensor<T>, p: &OebParams<T>) -> Result<Tensor<T>> {
    let [_, c, _, _] = x.dims4()?;
    if c != p.branch1[0].in_channels() {
        return Err(Error::config(format!(
            "OEB expects {} channels, got {c}",
            p.branch1[0].in_channels()
        )));
    }
    let r0 = relu(x);
    let branch = |a: &[AsymConvParams<T>; 2]| -> Result<Tensor<T>> {
        asym_conv(&relu(&asym_conv(&r0, &a[0])?), &a[1])
    };
    let cat = relu(&concat_channels(
        &branch(&p.branch1)?,
        &branch(&p.branch2)?,
    )?);
    let s = relu(&asym_conv(&cat, &p.serial)?);
    layers::add(&s, &r0)
}

/// Weights of one even enhancement block.
#[derive(Clone, Debug)]
pub struct EebParams<T = f32> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
}

impl<T: Scalar> EebParams<T> {
    pub fn zeros(features: usize) -> Result<Self> {
        let spec = crate::tensor::ConvSpec::new(features, features, 3, 3)?;
        Ok(EebParams {
            conv1: ConvParams::zeros(spec),
            conv2: ConvParams::zeros(spec),
        })
    }

    pub fn from_graph(g: &LayerGraph<T>, prefix: &str) -> Result<Self> {
        let get = |name: String| {
            g.find_node(&name)
                .and_then(|id| g.conv_params_of(id))
                .ok_or_else(|| Error::Schema(format!("no convolution '{name}'")))
        };
        Ok(EebParams {
            conv1: get(format!("{prefix}.conv1"))?,
            conv2: get(format!("{prefix}.conv2"))?,
        })
    }
}

/// Even enhancement block: `conv(relu(conv(x))) + x`.
pub fn eeb_forward<T: Scalar>(x: &Tensor<T>, p: &EebParams<T>) -> Result<Tensor<T>> {
    let [_, c, _, _] = x.dims4()?;
    if c != p.conv1.spec.in_channels {
        return Err(Error::config(format!(
            "EEB expects {} channels, got {c}",
            p.conv1.spec.in_channels
        )));
    }
    let y = p.conv2.forward(&relu(&p.conv1.forward(x)?))?;
    layers::add(&y, x)
}

/// Sub-pixel upsampling outside a graph: `(conv, factor)` stages in order.
pub fn upsample_forward<T: Scalar>(
    x: &Tensor<T>,
    stages: &[(ConvParams<T>, usize)],
) -> Result<Tensor<T>> {
    let mut cur = x.clone();
    for (conv, r) in stages {
        cur = pixel_shuffle(&conv.forward(&cur)?, *r)?;
    }
    Ok(cur)
}
