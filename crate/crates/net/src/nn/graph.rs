//! Static layer DAG description.

use lwe_core::bilateral::GridSpec;

use crate::error::{Error, Result};

/// Index of a tensor in a graph: inputs first, then one value per node.
pub type ValueId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    /// Normalizes across channels at every pixel.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerKind {
    /// Same-padded convolution with edge-clamped borders.
    Conv2d {
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: usize,
    },
    Activation(Activation),
    /// Half-pixel bilinear 2x upsampling with clamped borders.
    Upsample2x,
    /// Mean over non-overlapping 2x2 blocks; needs even sides.
    AvgPool2x,
    Concat,
    Add,
    SpaceToDepth,
    /// Inputs `(lowres, guide)`; the output has the guide's resolution.
    /// The guide only selects the slicing operator and receives no gradient.
    BilateralSlice(GridSpec),
}

impl LayerKind {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerKind::Conv2d {
                kernel, cin, cout, ..
            } => kernel * kernel * cin * cout + cout,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<ValueId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph {
    pub name: String,
    /// Named inputs with their channel counts.
    pub inputs: Vec<(String, usize)>,
    /// Topologically ordered.
    pub nodes: Vec<Node>,
    pub outputs: Vec<(String, ValueId)>,
    channels: Vec<usize>,
}

impl NetworkGraph {
    pub fn value_count(&self) -> usize {
        self.inputs.len() + self.nodes.len()
    }

    pub fn node_value(&self, node: usize) -> ValueId {
        self.inputs.len() + node
    }

    /// Static channel count of a value.
    pub fn channels(&self, v: ValueId) -> usize {
        self.channels[v]
    }

    pub fn value_name(&self, v: ValueId) -> &str {
        if v < self.inputs.len() {
            &self.inputs[v].0
        } else {
            &self.nodes[v - self.inputs.len()].name
        }
    }

    pub fn output(&self, name: &str) -> Result<ValueId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::graph(format!("{}: no output named {name:?}", self.name)))
    }

    pub fn kernel_name(&self, node: &Node) -> String {
        format!("{}.{}.kernel", self.name, node.name)
    }

    pub fn bias_name(&self, node: &Node) -> String {
        format!("{}.{}.bias", self.name, node.name)
    }

    /// Trainable parameter count: sum of `kh*kw*cin*cout + cout` over convs.
    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(|n| n.kind.param_count()).sum()
    }

    /// For each value, the nodes that read it.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.value_count()];
        for (i, n) in self.nodes.iter().enumerate() {
            for &v in &n.inputs {
                out[v].push(i);
            }
        }
        out
    }

    /// Spatial `(height, width)` of every value for the given input sizes.
    pub fn infer_shapes(&self, inputs: &[(usize, usize)]) -> Result<Vec<(usize, usize)>> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::graph(format!(
                "{} expects {} inputs, got {}",
                self.name,
                self.inputs.len(),
                inputs.len()
            )));
        }
        let mut shapes = inputs.to_vec();
        for n in &self.nodes {
            let ins: Vec<(usize, usize)> = n.inputs.iter().map(|&v| shapes[v]).collect();
            let edge = |k: usize| format!("{} -> {}", self.value_name(n.inputs[k]), n.name);
            let (h, w) = ins[0];
            let out = match n.kind {
                LayerKind::Conv2d { stride, .. } => (h.div_ceil(stride), w.div_ceil(stride)),
                LayerKind::Activation(_) => (h, w),
                LayerKind::Upsample2x => (2 * h, 2 * w),
                LayerKind::AvgPool2x | LayerKind::SpaceToDepth => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::graph(format!("edge {}: {h}x{w} is not divisible by 2", edge(0))));
                    }
                    (h / 2, w / 2)
                }
                LayerKind::Concat | LayerKind::Add => {
                    for (k, s) in ins.iter().enumerate() {
                        if *s != (h, w) {
                            return Err(Error::graph(format!(
                                "edge {}: spatial size {:?} differs from {:?}",
                                edge(k),
                                s,
                                (h, w)
                            )));
                        }
                    }
                    (h, w)
                }
                LayerKind::BilateralSlice(_) => {
                    let (gh, gw) = ins[1];
                    if h > gh || w > gw || h == 0 || w == 0 {
                        return Err(Error::graph(format!(
                            "edge {}: low-res {h}x{w} must be non-empty and no larger than guide {gh}x{gw}",
                            edge(0)
                        )));
                    }
                    (gh, gw)
                }
            };
            if out.0 == 0 || out.1 == 0 {
                return Err(Error::graph(format!("{}: empty output", n.name)));
            }
            shapes.push(out);
        }
        Ok(shapes)
    }
}

/// Incremental graph construction with static channel checking.
#[derive(Debug)]
pub struct GraphBuilder {
    name: String,
    inputs: Vec<(String, usize)>,
    nodes: Vec<Node>,
    outputs: Vec<(String, ValueId)>,
    channels: Vec<usize>,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            inputs: Vec::new(),
            nodes: Vec::new(),
            outputs: Vec::new(),
            channels: Vec::new(),
        }
    }

    /// Inputs must all be declared before the first node.
    pub fn input(&mut self, name: impl Into<String>, channels: usize) -> ValueId {
        assert!(self.nodes.is_empty(), "inputs must precede nodes");
        self.inputs.push((name.into(), channels));
        self.channels.push(channels);
        self.channels.len() - 1
    }

    pub fn channels(&self, v: ValueId) -> usize {
        self.channels[v]
    }

    fn check_value(&self, v: ValueId, node: &str) -> Result<()> {
        if v >= self.channels.len() {
            return Err(Error::graph(format!("{}.{node}: unknown input value {v}", self.name)));
        }
        Ok(())
    }

    fn push(&mut self, name: impl Into<String>, kind: LayerKind, inputs: Vec<ValueId>) -> Result<ValueId> {
        let name = name.into();
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::graph(format!("{}: duplicate node name {name}", self.name)));
        }
        for &v in &inputs {
            self.check_value(v, &name)?;
        }
        let ch: Vec<usize> = inputs.iter().map(|&v| self.channels[v]).collect();
        let edge = |k: usize| format!("{}.{} input {k}", self.name, name);
        let out = match kind {
            LayerKind::Conv2d {
                kernel,
                cin,
                cout,
                stride,
            } => {
                if kernel != 1 && kernel != 3 {
                    return Err(Error::graph(format!("{}: kernel must be 1 or 3, got {kernel}", edge(0))));
                }
                if stride != 1 && stride != 2 {
                    return Err(Error::graph(format!("{}: stride must be 1 or 2, got {stride}", edge(0))));
                }
                if ch.len() != 1 || ch[0] != cin {
                    return Err(Error::graph(format!("{}: expects {cin} channels, got {:?}", edge(0), ch)));
                }
                cout
            }
            LayerKind::Activation(_) | LayerKind::Upsample2x | LayerKind::AvgPool2x => {
                if ch.len() != 1 {
                    return Err(Error::graph(format!("{}: expects one input", edge(0))));
                }
                ch[0]
            }
            LayerKind::SpaceToDepth => {
                if ch.len() != 1 {
                    return Err(Error::graph(format!("{}: expects one input", edge(0))));
                }
                4 * ch[0]
            }
            LayerKind::Concat => {
                if ch.is_empty() {
                    return Err(Error::graph(format!("{}: concat of nothing", edge(0))));
                }
                ch.iter().sum()
            }
            LayerKind::Add => {
                if ch.is_empty() {
                    return Err(Error::graph(format!("{}: add of nothing", edge(0))));
                }
                if let Some(k) = ch.iter().position(|&c| c != ch[0]) {
                    return Err(Error::graph(format!("{}: {} channels vs {}", edge(k), ch[k], ch[0])));
                }
                ch[0]
            }
            LayerKind::BilateralSlice(_) => {
                if ch.len() != 2 || ch[1] != 1 {
                    return Err(Error::graph(format!(
                        "{}: expects (lowres, single-channel guide), got {:?}",
                        edge(0),
                        ch
                    )));
                }
                ch[0]
            }
        };
        self.nodes.push(Node { name, kind, inputs });
        self.channels.push(out);
        Ok(self.channels.len() - 1)
    }

    pub fn conv(&mut self, name: &str, x: ValueId, kernel: usize, cout: usize, stride: usize) -> Result<ValueId> {
        self.check_value(x, name)?;
        let cin = self.channels[x];
        self.push(
            name,
            LayerKind::Conv2d {
                kernel,
                cin,
                cout,
                stride,
            },
            vec![x],
        )
    }

    pub fn activation(&mut self, name: &str, x: ValueId, a: Activation) -> Result<ValueId> {
        self.push(name, LayerKind::Activation(a), vec![x])
    }

    /// `conv` followed by a ReLU named `{name}_relu`.
    pub fn conv_relu(&mut self, name: &str, x: ValueId, kernel: usize, cout: usize, stride: usize) -> Result<ValueId> {
        let c = self.conv(name, x, kernel, cout, stride)?;
        self.activation(&format!("{name}_relu"), c, Activation::Relu)
    }

    pub fn upsample2x(&mut self, name: &str, x: ValueId) -> Result<ValueId> {
        self.push(name, LayerKind::Upsample2x, vec![x])
    }

    pub fn avgpool2x(&mut self, name: &str, x: ValueId) -> Result<ValueId> {
        self.push(name, LayerKind::AvgPool2x, vec![x])
    }

    pub fn concat(&mut self, name: &str, xs: &[ValueId]) -> Result<ValueId> {
        self.push(name, LayerKind::Concat, xs.to_vec())
    }

    pub fn add(&mut self, name: &str, xs: &[ValueId]) -> Result<ValueId> {
        self.push(name, LayerKind::Add, xs.to_vec())
    }

    pub fn space_to_depth(&mut self, name: &str, x: ValueId) -> Result<ValueId> {
        self.push(name, LayerKind::SpaceToDepth, vec![x])
    }

    pub fn bilateral_slice(&mut self, name: &str, low: ValueId, guide: ValueId, spec: GridSpec) -> Result<ValueId> {
        self.push(name, LayerKind::BilateralSlice(spec), vec![low, guide])
    }

    pub fn output(&mut self, name: impl Into<String>, v: ValueId) -> Result<()> {
        let name = name.into();
        self.check_value(v, &name)?;
        if self.outputs.iter().any(|(n, _)| *n == name) {
            return Err(Error::graph(format!("{}: duplicate output {name}", self.name)));
        }
        self.outputs.push((name, v));
        Ok(())
    }

    pub fn build(self) -> Result<NetworkGraph> {
        if self.inputs.is_empty() || self.outputs.is_empty() {
            return Err(Error::graph(format!("{}: graph needs inputs and outputs", self.name)));
        }
        // every node must be reachable from an input (always true for a
        // builder-made DAG) and contribute to some output
        let n_in = self.inputs.len();
        let mut live = vec![false; self.channels.len()];
        for (_, v) in &self.outputs {
            live[*v] = true;
        }
        for (i, node) in self.nodes.iter().enumerate().rev() {
            if live[n_in + i] {
                for &v in &node.inputs {
                    live[v] = true;
                }
            }
        }
        if let Some(i) = (0..self.nodes.len()).find(|&i| !live[n_in + i]) {
            return Err(Error::graph(format!(
                "{}: node {} does not reach any output",
                self.name, self.nodes[i].name
            )));
        }
        Ok(NetworkGraph {
            name: self.name,
            inputs: self.inputs,
            nodes: self.nodes,
            outputs: self.outputs,
            channels: self.channels,
        })
    }
}
