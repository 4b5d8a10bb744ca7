//! Static layer graph with cached activations and reverse-mode gradients.
//!
//! Nodes are appended in construction order and may only reference earlier
//! nodes, so insertion order is a topological order. Channel counts and
//! relative spatial scale are checked when a node is added; spatial extents
//! are checked at run time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    self, asym_conv_backward, concat_channels, relu_backward, split_channels, AsymConvParams,
    ConvParams, ASYM_KERNELS, ASYM_NAMES,
};
use crate::tensor::{
    cast, conv2d_backward, conv2d_forward, pixel_shuffle, pixel_unshuffle, ConvSpec, Scalar, Tensor,
};

pub type NodeId = usize;
pub type ParamId = usize;

/// Largest number of scalars [`LayerGraph::grad_check`] will perturb.
pub const GRAD_CHECK_MAX_SCALARS: usize = 200_000;

/// Step halvings tried when a finite-difference stencil crosses a ReLU kink.
pub const GRAD_CHECK_REFINEMENTS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight { fan_in: usize },
    Bias,
}

#[derive(Clone, Debug)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub role: ParamRole,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvRef {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

#[derive(Clone, Debug)]
pub enum NodeKind {
    Input,
    Conv(ConvRef),
    AsymConv([ConvRef; 3]),
    Relu,
    Concat,
    Add,
    PixelShuffle(usize),
    Output,
}

impl NodeKind {
    pub fn label(&self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::Conv(_) => "conv",
            NodeKind::AsymConv(_) => "asym_conv",
            NodeKind::Relu => "relu",
            NodeKind::Concat => "concat",
            NodeKind::Add => "add",
            NodeKind::PixelShuffle(_) => "pixel_shuffle",
            NodeKind::Output => "output",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    channels: usize,
    scale: usize,
}

impl Node {
    pub fn channels(&self) -> usize {
        self.channels
    }
}

#[derive(Clone, Debug)]
pub struct LayerGraph<T = f32> {
    nodes: Vec<Node>,
    params: Vec<Parameter<T>>,
    output: Option<NodeId>,
    cache: Vec<Option<Tensor<T>>>,
    input_grad: Option<Tensor<T>>,
}

fn at_node(node: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("node '{node}': {m}")),
        Error::Numeric(m) => Error::Numeric(format!("node '{node}': {m}")),
        other => other,
    }
}

impl<T: Scalar> LayerGraph<T> {
    /// Empty graph whose single input node expects `input_channels` channels.
    pub fn new(input_channels: usize) -> Self {
        LayerGraph {
            nodes: vec![Node {
                name: "input".into(),
                kind: NodeKind::Input,
                inputs: vec![],
                channels: input_channels,
                scale: 1,
            }],
            params: Vec::new(),
            output: None,
            cache: Vec::new(),
            input_grad: None,
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn find_node(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn input_channels(&self) -> usize {
        self.nodes[0].channels
    }

    pub fn output_node(&self) -> Option<NodeId> {
        self.output
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Total number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Gradient with respect to the graph input from the last backward pass.
    pub fn input_grad(&self) -> Option<&Tensor<T>> {
        self.input_grad.as_ref()
    }

    /// Cached activation of a node from the last forward pass.
    pub fn activation(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.cache.get(id).and_then(|c| c.as_ref())
    }

    /// Copy of every parameter converted to another precision.
    pub fn cast<U: Scalar>(&self) -> LayerGraph<U> {
        LayerGraph {
            nodes: self.nodes.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    role: p.role,
                })
                .collect(),
            output: self.output,
            cache: Vec::new(),
            input_grad: None,
        }
    }

    fn push_node(
        &mut self,
        name: &str,
        kind: NodeKind,
        inputs: Vec<NodeId>,
        channels: usize,
        scale: usize,
    ) -> Result<NodeId> {
        if self.output.is_some() {
            return Err(Error::config(format!(
                "node '{name}' added after the output node"
            )));
        }
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::config(format!("duplicate node name '{name}'")));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(Error::config(format!(
                "node '{name}' references unknown node {bad}"
            )));
        }
        self.nodes.push(Node {
            name: name.to_string(),
            kind,
            inputs,
            channels,
            scale,
        });
        Ok(self.nodes.len() - 1)
    }

    fn add_param(&mut self, name: String, shape: &[usize], role: ParamRole) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::config(format!("duplicate parameter name '{name}'")));
        }
        self.params.push(Parameter {
            name,
            value: Tensor::zeros(shape),
            grad: Tensor::zeros(shape),
            role,
        });
        Ok(self.params.len() - 1)
    }

    fn add_conv_params(&mut self, prefix: &str, spec: ConvSpec) -> Result<ConvRef> {
        let weight = self.add_param(
            format!("{prefix}.weight"),
            &spec.weight_shape(),
            ParamRole::Weight {
                fan_in: spec.patch_len(),
            },
        )?;
        let bias = self.add_param(
            format!("{prefix}.bias"),
            &[spec.out_channels],
            ParamRole::Bias,
        )?;
        Ok(ConvRef { weight, bias, spec })
    }

    fn check_input(&self, name: &str, x: NodeId) -> Result<&Node> {
        self.nodes
            .get(x)
            .ok_or_else(|| Error::config(format!("node '{name}' references unknown node {x}")))
    }

    /// Same-padded `kernel_h × kernel_w` convolution to `out_channels`.
    pub fn conv(
        &mut self,
        name: &str,
        x: NodeId,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    ) -> Result<NodeId> {
        let src = self.check_input(name, x)?;
        let (cin, scale) = (src.channels, src.scale);
        let spec =
            ConvSpec::new(cin, out_channels, kernel_h, kernel_w).map_err(|e| at_node(name, e))?;
        let r = self.add_conv_params(name, spec)?;
        self.push_node(name, NodeKind::Conv(r), vec![x], out_channels, scale)
    }

    /// Sum of parallel 1×3, 3×3 and 3×1 convolutions.
    pub fn asym_conv(&mut self, name: &str, x: NodeId, out_channels: usize) -> Result<NodeId> {
        let src = self.check_input(name, x)?;
        let (cin, scale) = (src.channels, src.scale);
        let mut refs = Vec::with_capacity(3);
        for ((kh, kw), suffix) in ASYM_KERNELS.into_iter().zip(ASYM_NAMES) {
            let spec = ConvSpec::new(cin, out_channels, kh, kw).map_err(|e| at_node(name, e))?;
            refs.push(self.add_conv_params(&format!("{name}.{suffix}"), spec)?);
        }
        self.push_node(
            name,
            NodeKind::AsymConv([refs[0], refs[1], refs[2]]),
            vec![x],
            out_channels,
            scale,
        )
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let src = self.check_input(name, x)?;
        let (c, s) = (src.channels, src.scale);
        self.push_node(name, NodeKind::Relu, vec![x], c, s)
    }

    pub fn concat(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, sa) = {
            let n = self.check_input(name, a)?;
            (n.channels, n.scale)
        };
        let (cb, sb) = {
            let n = self.check_input(name, b)?;
            (n.channels, n.scale)
        };
        if sa != sb {
            return Err(Error::config(format!(
                "node '{name}': concatenated inputs differ in spatial scale"
            )));
        }
        self.push_node(name, NodeKind::Concat, vec![a, b], ca + cb, sa)
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, sa) = {
            let n = self.check_input(name, a)?;
            (n.channels, n.scale)
        };
        let (cb, sb) = {
            let n = self.check_input(name, b)?;
            (n.channels, n.scale)
        };
        if (ca, sa) != (cb, sb) {
            return Err(Error::config(format!(
                "node '{name}': cannot add {ca}-channel and {cb}-channel activations"
            )));
        }
        self.push_node(name, NodeKind::Add, vec![a, b], ca, sa)
    }

    pub fn pixel_shuffle(&mut self, name: &str, x: NodeId, factor: usize) -> Result<NodeId> {
        let src = self.check_input(name, x)?;
        let (c, s) = (src.channels, src.scale);
        if factor == 0 || c % (factor * factor) != 0 {
            return Err(Error::config(format!(
                "node '{name}': {c} channels not divisible by {}",
                factor * factor
            )));
        }
        self.push_node(
            name,
            NodeKind::PixelShuffle(factor),
            vec![x],
            c / (factor * factor),
            s * factor,
        )
    }

    /// Mark `x` as the graph output. No nodes may be added afterwards.
    pub fn output(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let src = self.check_input(name, x)?;
        let (c, s) = (src.channels, src.scale);
        let id = self.push_node(name, NodeKind::Output, vec![x], c, s)?;
        self.output = Some(id);
        Ok(id)
    }

    /// Channel count and spatial multiplier of the output.
    pub fn output_spec(&self) -> Option<(usize, usize)> {
        self.output
            .map(|o| (self.nodes[o].channels, self.nodes[o].scale))
    }

    fn conv_params(&self, r: &ConvRef) -> (&Tensor<T>, &Tensor<T>) {
        (&self.params[r.weight].value, &self.params[r.bias].value)
    }

    /// Extract the weights of a convolution node as a standalone value.
    pub fn conv_params_of(&self, id: NodeId) -> Option<ConvParams<T>> {
        match &self.nodes[id].kind {
            NodeKind::Conv(r) => Some(self.conv_value(r)),
            _ => None,
        }
    }

    /// Extract the weights of an asymmetric convolution node.
    pub fn asym_params_of(&self, id: NodeId) -> Option<AsymConvParams<T>> {
        match &self.nodes[id].kind {
            NodeKind::AsymConv(rs) => Some(AsymConvParams {
                convs: [
                    self.conv_value(&rs[0]),
                    self.conv_value(&rs[1]),
                    self.conv_value(&rs[2]),
                ],
            }),
            _ => None,
        }
    }

    fn conv_value(&self, r: &ConvRef) -> ConvParams<T> {
        let (w, b) = self.conv_params(r);
        ConvParams {
            weight: w.clone(),
            bias: b.clone(),
            spec: r.spec,
        }
    }

    fn cached(&self, id: NodeId) -> &Tensor<T> {
        self.cache[id]
            .as_ref()
            .expect("producer evaluated before consumer")
    }

    fn eval_node(&self, id: NodeId, input: &Tensor<T>) -> Result<Tensor<T>> {
        let node = &self.nodes[id];
        let arg = |k: usize| self.cached(node.inputs[k]);
        match &node.kind {
            NodeKind::Input => Ok(input.clone()),
            NodeKind::Conv(r) => {
                let (w, b) = self.conv_params(r);
                conv2d_forward(arg(0), w, b, &r.spec)
            }
            NodeKind::AsymConv(rs) => {
                let x = arg(0);
                let (w, b) = self.conv_params(&rs[0]);
                let mut acc = conv2d_forward(x, w, b, &rs[0].spec)?;
                for r in &rs[1..] {
                    let (w, b) = self.conv_params(r);
                    acc.add_assign(&conv2d_forward(x, w, b, &r.spec)?)?;
                }
                Ok(acc)
            }
            NodeKind::Relu => Ok(layers::relu(arg(0))),
            NodeKind::Concat => concat_channels(arg(0), arg(1)),
            NodeKind::Add => layers::add(arg(0), arg(1)),
            NodeKind::PixelShuffle(r) => pixel_shuffle(arg(0), *r),
            NodeKind::Output => Ok(arg(0).clone()),
        }
    }

    /// Run every node in order, caching activations, and return the output.
    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let out_id = self
            .output
            .ok_or_else(|| Error::config("graph has no output node"))?;
        let [_, c, _, _] = input.dims4().map_err(|e| at_node("input", e))?;
        if c != self.input_channels() {
            return Err(Error::config(format!(
                "node 'input': expected {} channels, got {c}",
                self.input_channels()
            )));
        }
        self.input_grad = None;
        self.cache.clear();
        self.cache.resize(self.nodes.len(), None);
        for id in 0..self.nodes.len() {
            let out = self
                .eval_node(id, input)
                .map_err(|e| at_node(&self.nodes[id].name, e))?;
            out.ensure_finite("activation")
                .map_err(|e| at_node(&self.nodes[id].name, e))?;
            self.cache[id] = Some(out);
        }
        Ok(self.cached(out_id).clone())
    }

    /// Forward pass that frees each activation after its last consumer.
    /// Leaves no cache behind, so `backward` is unavailable afterwards.
    pub fn infer(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let out_id = self
            .output
            .ok_or_else(|| Error::config("graph has no output node"))?;
        let [_, c, _, _] = input.dims4().map_err(|e| at_node("input", e))?;
        if c != self.input_channels() {
            return Err(Error::config(format!(
                "node 'input': expected {} channels, got {c}",
                self.input_channels()
            )));
        }
        let mut last_use: Vec<usize> = (0..self.nodes.len()).collect();
        for (id, node) in self.nodes.iter().enumerate() {
            for &src in &node.inputs {
                last_use[src] = last_use[src].max(id);
            }
        }
        self.input_grad = None;
        self.cache.clear();
        self.cache.resize(self.nodes.len(), None);
        let result = (|| {
            for id in 0..self.nodes.len() {
                let out = self
                    .eval_node(id, input)
                    .map_err(|e| at_node(&self.nodes[id].name, e))?;
                out.ensure_finite("activation")
                    .map_err(|e| at_node(&self.nodes[id].name, e))?;
                self.cache[id] = Some(out);
                for &src in &self.nodes[id].inputs {
                    if last_use[src] == id && src != out_id {
                        self.cache[src] = None;
                    }
                }
            }
            Ok(self.cache[out_id].take().expect("output evaluated"))
        })();
        self.cache.clear();
        result
    }

    /// Accumulate `∂L/∂θ` into every parameter's `grad` given `∂L/∂output`.
    pub fn backward(&mut self, grad_output: &Tensor<T>) -> Result<()> {
        let out_id = self
            .output
            .ok_or_else(|| Error::config("graph has no output node"))?;
        if self.cache.len() != self.nodes.len() || self.cache.iter().any(Option::is_none) {
            return Err(Error::State("backward called before forward".into()));
        }
        if grad_output.shape() != self.cached(out_id).shape() {
            return Err(Error::config(format!(
                "output gradient shape {:?} does not match output {:?}",
                grad_output.shape(),
                self.cached(out_id).shape()
            )));
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[out_id] = Some(grad_output.clone());

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let name = self.nodes[id].name.clone();
            let inputs = self.nodes[id].inputs.clone();
            let contributions: Vec<(NodeId, Tensor<T>)> = match self.nodes[id].kind.clone() {
                NodeKind::Input => {
                    self.input_grad = Some(g);
                    vec![]
                }
                NodeKind::Output => vec![(inputs[0], g)],
                NodeKind::Conv(r) => {
                    let cg = conv2d_backward(
                        self.cached(inputs[0]),
                        &self.params[r.weight].value,
                        &g,
                        &r.spec,
                    )
                    .map_err(|e| at_node(&name, e))?;
                    self.params[r.weight].grad.add_assign(&cg.grad_w)?;
                    self.params[r.bias].grad.add_assign(&cg.grad_b)?;
                    vec![(inputs[0], cg.grad_x)]
                }
                NodeKind::AsymConv(rs) => {
                    let p = AsymConvParams {
                        convs: rs.map(|r| self.conv_value(&r)),
                    };
                    let ag = asym_conv_backward(self.cached(inputs[0]), &p, &g)
                        .map_err(|e| at_node(&name, e))?;
                    for (r, (gw, gb)) in rs.iter().zip(&ag.params) {
                        self.params[r.weight].grad.add_assign(gw)?;
                        self.params[r.bias].grad.add_assign(gb)?;
                    }
                    vec![(inputs[0], ag.grad_x)]
                }
                NodeKind::Relu => vec![(
                    inputs[0],
                    relu_backward(self.cached(id), &g).map_err(|e| at_node(&name, e))?,
                )],
                NodeKind::Concat => {
                    let first = self.cached(inputs[0]).dims4()?[1];
                    let (ga, gb) = split_channels(&g, first)?;
                    vec![(inputs[0], ga), (inputs[1], gb)]
                }
                NodeKind::Add => vec![(inputs[0], g.clone()), (inputs[1], g)],
                NodeKind::PixelShuffle(r) => vec![(
                    inputs[0],
                    pixel_unshuffle(&g, r).map_err(|e| at_node(&name, e))?,
                )],
            };
            for (src, t) in contributions {
                match grads[src].as_mut() {
                    Some(acc) => acc.add_assign(&t)?,
                    None => grads[src] = Some(t),
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
        self.input_grad = None;
    }

    /// Smallest `|pre-activation|` seen by any ReLU node in the last forward
    /// pass; used to screen finite-difference checks away from the kink.
    pub fn min_relu_margin(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for node in &self.nodes {
            if let NodeKind::Relu = node.kind {
                let pre = self.activation(node.inputs[0])?;
                for v in pre.data() {
                    let m = v.abs().to_f64().unwrap_or(f64::INFINITY);
                    best = Some(best.map_or(m, |b: f64| b.min(m)));
                }
            }
        }
        best
    }

    /// Hash of which ReLU inputs are positive in the cached forward pass.
    fn relu_pattern(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let NodeKind::Relu = node.kind {
                if let Some(pre) = self.activation(node.inputs[0]) {
                    for v in pre.data() {
                        h ^= (*v > T::zero()) as u64;
                        h = h.wrapping_mul(0x0100_0000_01b3);
                    }
                }
            }
        }
        h
    }

    /// Central difference `(L(+h) - L(-h)) / 2h`, halving `h` (at most
    /// `GRAD_CHECK_REFINEMENTS` times) while either side leaves the base
    /// activation pattern.
    fn stencil(
        &mut self,
        h: f64,
        base_pattern: u64,
        refined: &mut usize,
        mut eval: impl FnMut(&mut Self, f64) -> Result<(f64, u64)>,
    ) -> Result<f64> {
        let mut step = h;
        for k in 0..=GRAD_CHECK_REFINEMENTS {
            let (plus, pp) = eval(self, step)?;
            let (minus, pm) = eval(self, -step)?;
            if (pp == base_pattern && pm == base_pattern) || k == GRAD_CHECK_REFINEMENTS {
                if k > 0 {
                    *refined += 1;
                }
                return Ok((plus - minus) / (2.0 * step));
            }
            step *= 0.5;
        }
        unreachable!("loop returns on its last iteration")
    }

    fn projected_loss(&mut self, input: &Tensor<T>, projection: &Tensor<T>) -> Result<(f64, u64)> {
        let out = self.forward(input)?;
        let loss = out
            .data()
            .iter()
            .zip(projection.data())
            .map(|(a, b)| (*a * *b).to_f64().unwrap_or(f64::NAN))
            .sum();
        Ok((loss, self.relu_pattern()))
    }

    /// Compare backward against central finite differences of the scalar
    /// `L = Σ output ⊙ R` for a fixed random projection `R`.
    ///
    /// Every parameter scalar and every input scalar is perturbed by `±h`.
    /// The output is piecewise linear in any single scalar, so a stencil
    /// that changes the ReLU activation pattern is retried with the step
    /// halved until both sides stay on the unperturbed linear piece.
    /// Leaves the analytic gradients of `L` in the parameters' `grad`.
    pub fn grad_check(&mut self, input: &Tensor<T>, h: f64, tol: f64) -> Result<GradCheckReport> {
        if T::NAME != "f64" {
            return Err(Error::config(format!(
                "gradient checks need 64-bit precision, graph uses {}",
                T::NAME
            )));
        }
        let scalars = self.count_params() + input.len();
        if scalars > GRAD_CHECK_MAX_SCALARS {
            return Err(Error::config(format!(
                "graph has {scalars} scalars, gradient check limit is {GRAD_CHECK_MAX_SCALARS}"
            )));
        }

        let out = self.forward(input)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
        let projection = Tensor::from_fn(out.shape(), |_| cast::<T>(rng.random_range(-1.0..1.0)));
        let (_, base_pattern) = self.projected_loss(input, &projection)?;
        self.zero_grads();
        self.backward(&projection)?;
        let analytic_input = self
            .input_grad
            .clone()
            .ok_or_else(|| Error::State("input gradient missing after backward".into()))?;

        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-12);
        let mut entries = Vec::new();

        for pi in 0..self.params.len() {
            let mut worst = 0.0f64;
            let mut refined = 0;
            for j in 0..self.params[pi].value.len() {
                let orig = self.params[pi].value.data()[j];
                let numeric = self.stencil(h, base_pattern, &mut refined, |g, v| {
                    g.params[pi].value.data_mut()[j] = orig + cast::<T>(v);
                    let r = g.projected_loss(input, &projection);
                    g.params[pi].value.data_mut()[j] = orig;
                    r
                })?;
                let analytic = self.params[pi].grad.data()[j].to_f64().unwrap_or(f64::NAN);
                worst = worst.max(rel(analytic, numeric));
            }
            entries.push(GradCheckEntry {
                name: self.params[pi].name.clone(),
                scalars: self.params[pi].value.len(),
                max_rel_error: worst,
                refined,
            });
        }

        let mut probe = input.clone();
        let mut worst = 0.0f64;
        let mut refined = 0;
        for j in 0..probe.len() {
            let orig = probe.data()[j];
            let numeric = self.stencil(h, base_pattern, &mut refined, |g, v| {
                probe.data_mut()[j] = orig + cast::<T>(v);
                let r = g.projected_loss(&probe, &projection);
                probe.data_mut()[j] = orig;
                r
            })?;
            let analytic = analytic_input.data()[j].to_f64().unwrap_or(f64::NAN);
            worst = worst.max(rel(analytic, numeric));
        }
        entries.push(GradCheckEntry {
            name: "<input>".into(),
            scalars: input.len(),
            max_rel_error: worst,
            refined,
        });

        // Leave caches consistent with the unperturbed input.
        self.forward(input)?;
        self.input_grad = Some(analytic_input);

        let passed = entries.iter().all(|e| e.max_rel_error <= tol);
        Ok(GradCheckReport {
            entries,
            tolerance: tol,
            passed,
        })
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub scalars: usize,
    pub max_rel_error: f64,
    /// Scalars whose stencil crossed a ReLU kink at the requested step and
    /// were measured with a smaller one.
    pub refined: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(kind: &str) -> LayerGraph<f64> {
        let mut g = LayerGraph::new(1);
        let x = g.input();
        let y = match kind {
            "relu" => g.relu("r", x).unwrap(),
            "add" => g.add("a", x, x).unwrap(),
            _ => unreachable!(),
        };
        g.output("out", y).unwrap();
        g
    }

    #[test]
    fn relu_graph() {
        let mut g = single("relu");
        let x = Tensor::new(&[1, 1, 1, 2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(g.forward(&x).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn fan_out_add_accumulates() {
        let mut g = single("add");
        let x = Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap();
        assert_eq!(g.forward(&x).unwrap().data(), &[6.0]);
        g.backward(&Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.input_grad().unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut g = single("relu");
        assert!(matches!(
            g.backward(&Tensor::zeros(&[1, 1, 1, 1])),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn build_time_checks() {
        let mut g = LayerGraph::<f32>::new(3);
        let x = g.input();
        let a = g.conv("a", x, 4, 3, 3).unwrap();
        assert!(g.add("bad", x, a).is_err());
        assert!(g.conv("a", x, 4, 3, 3).is_err());
        assert!(g.pixel_shuffle("ps", a, 3).is_err());
        assert_eq!(g.params().len(), 2);
    }

    #[test]
    fn runtime_shape_error_names_node() {
        let mut g = LayerGraph::<f32>::new(2);
        let x = g.input();
        let c = g.conv("first_conv", x, 4, 3, 3).unwrap();
        g.output("out", c).unwrap();
        let err = g.forward(&Tensor::zeros(&[1, 3, 4, 4])).unwrap_err();
        assert!(err.to_string().contains("input"), "{err}");
    }

    #[test]
    fn non_finite_activation_names_node() {
        let mut g = LayerGraph::<f32>::new(1);
        let x = g.input();
        let c = g.conv("blowup", x, 1, 1, 1).unwrap();
        g.output("out", c).unwrap();
        g.param_mut("blowup.weight").unwrap().value.fill(f32::MAX);
        let x = Tensor::full(&[1, 1, 2, 2], 10.0);
        let err = g.forward(&x).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains("blowup"), "{err}");
    }

    #[test]
    fn grad_check_rejects_f32() {
        let mut g = LayerGraph::<f32>::new(1);
        let x = g.input();
        let r = g.relu("r", x).unwrap();
        g.output("out", r).unwrap();
        assert!(matches!(
            g.grad_check(&Tensor::full(&[1, 1, 2, 2], 1.0), 1e-4, 1e-4),
            Err(Error::Config(_))
        ));
    }
}
