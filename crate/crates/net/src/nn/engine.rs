//! Graph execution: forward with cached activations, and reverse-mode
//! gradients with respect to parameters and inputs.

use lwe_core::bilateral::BilateralSlicer;
use lwe_core::ops::{depth_to_space, space_to_depth};
use lwe_core::Image;

use super::graph::{LayerKind, NetworkGraph, Node, ValueId};
use super::layers::{self, ConvGeom, Float};
use super::weights::WeightStore;
use crate::error::{Error, Result};

/// Every value of one forward evaluation, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass<T: Float> {
    pub values: Vec<Image<T>>,
    /// The slicing operator of each bilateral-slice node, by node index.
    pub slicers: Vec<Option<BilateralSlicer>>,
}

impl<T: Float> ForwardPass<T> {
    pub fn output(&self, graph: &NetworkGraph, name: &str) -> Result<&Image<T>> {
        Ok(&self.values[graph.output(name)?])
    }
}

#[derive(Clone, Debug)]
pub struct Gradients<T: Float> {
    pub params: WeightStore<T>,
    /// One entry per graph input; `None` when no gradient reaches it.
    pub inputs: Vec<Option<Image<T>>>,
}

fn check_inputs<T: Float>(graph: &NetworkGraph, inputs: &[&Image<T>]) -> Result<()> {
    if inputs.len() != graph.inputs.len() {
        return Err(Error::graph(format!(
            "{} expects {} inputs, got {}",
            graph.name,
            graph.inputs.len(),
            inputs.len()
        )));
    }
    for ((name, ch), img) in graph.inputs.iter().zip(inputs) {
        if img.channels() != *ch {
            return Err(Error::graph(format!(
                "{}: input {name} needs {ch} channels, got {}",
                graph.name,
                img.channels()
            )));
        }
    }
    let dims: Vec<_> = inputs.iter().map(|i| (i.height(), i.width())).collect();
    graph.infer_shapes(&dims)?;
    Ok(())
}

fn eval_node<T: Float>(
    graph: &NetworkGraph,
    weights: &WeightStore<T>,
    node: &Node,
    ins: &[&Image<T>],
) -> Result<(Image<T>, Option<BilateralSlicer>)> {
    let x = ins[0];
    let out = match node.kind {
        LayerKind::Conv2d {
            kernel,
            cin,
            cout,
            stride,
        } => {
            let g = ConvGeom {
                h: x.height(),
                w: x.width(),
                cin,
                cout,
                kernel,
                stride,
            };
            let k = &weights.get(&graph.kernel_name(node))?.data;
            let b = &weights.get(&graph.bias_name(node))?.data;
            let data = layers::conv_forward(&g, x.data(), k, b);
            Image::from_vec(g.out_h(), g.out_w(), cout, data)?
        }
        LayerKind::Activation(a) => layers::activation_forward(a, x),
        LayerKind::Upsample2x => layers::upsample2x_forward(x),
        LayerKind::AvgPool2x => layers::avgpool2x_forward(x),
        LayerKind::Concat => Image::concat_channels(ins)?,
        LayerKind::Add => {
            let mut acc = x.clone();
            for other in &ins[1..] {
                acc.add_assign(other);
            }
            acc
        }
        LayerKind::SpaceToDepth => space_to_depth(x, 2)?,
        LayerKind::BilateralSlice(spec) => {
            let s = BilateralSlicer::new(x.height(), x.width(), ins[1], spec)?;
            let planes = (0..x.channels())
                .map(|c| s.apply(&x.channel(c)))
                .collect::<lwe_core::Result<Vec<_>>>()?;
            return Ok((Image::from_channels(&planes)?, Some(s)));
        }
    };
    Ok((out, None))
}

/// Evaluates every node and keeps all intermediate values.
pub fn forward<T: Float>(
    graph: &NetworkGraph,
    weights: &WeightStore<T>,
    inputs: &[&Image<T>],
) -> Result<ForwardPass<T>> {
    check_inputs(graph, inputs)?;
    let mut values: Vec<Image<T>> = inputs.iter().map(|&i| i.clone()).collect();
    let mut slicers = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let ins: Vec<&Image<T>> = node.inputs.iter().map(|&v| &values[v]).collect();
        let (out, s) = eval_node(graph, weights, node, &ins)?;
        values.push(out);
        slicers.push(s);
    }
    Ok(ForwardPass { values, slicers })
}

/// Forward evaluation that frees each value after its last reader; returns
/// the named outputs in declaration order.
pub fn infer<T: Float>(
    graph: &NetworkGraph,
    weights: &WeightStore<T>,
    inputs: &[&Image<T>],
) -> Result<Vec<(String, Image<T>)>> {
    check_inputs(graph, inputs)?;
    let n_in = graph.inputs.len();
    let mut last_use = vec![0usize; graph.value_count()];
    for (i, node) in graph.nodes.iter().enumerate() {
        for &v in &node.inputs {
            last_use[v] = last_use[v].max(i + 1);
        }
    }
    for (_, v) in &graph.outputs {
        last_use[*v] = usize::MAX;
    }
    let mut values: Vec<Option<Image<T>>> = vec![None; graph.value_count()];
    for (i, node) in graph.nodes.iter().enumerate() {
        let (out, _) = {
            let ins: Vec<&Image<T>> = node
                .inputs
                .iter()
                .map(|&v| if v < n_in { inputs[v] } else { values[v].as_ref().expect("live value") })
                .collect();
            eval_node(graph, weights, node, &ins)?
        };
        values[n_in + i] = Some(out);
        for &v in &node.inputs {
            if v >= n_in && last_use[v] == i + 1 {
                values[v] = None;
            }
        }
    }
    graph
        .outputs
        .iter()
        .map(|(name, v)| {
            let img = if *v < n_in {
                inputs[*v].clone()
            } else {
                values[*v].clone().expect("outputs are kept")
            };
            Ok((name.clone(), img))
        })
        .collect()
}

fn accumulate<T: Float>(slot: &mut Option<Image<T>>, g: Image<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Reverse pass seeded with gradients on named outputs. Outputs that are
/// not listed contribute nothing.
pub fn backward<T: Float>(
    graph: &NetworkGraph,
    weights: &WeightStore<T>,
    pass: &ForwardPass<T>,
    out_grads: &[(&str, &Image<T>)],
) -> Result<Gradients<T>> {
    let mut grads: Vec<Option<Image<T>>> = vec![None; graph.value_count()];
    for (name, g) in out_grads {
        let v: ValueId = graph.output(name)?;
        if g.shape() != pass.values[v].shape() {
            return Err(Error::graph(format!(
                "{}: gradient for {name} has shape {:?}, value has {:?}",
                graph.name,
                g.shape(),
                pass.values[v].shape()
            )));
        }
        accumulate(&mut grads[v], (*g).clone());
    }
    let mut params = weights.zeros_like();
    for (i, node) in graph.nodes.iter().enumerate().rev() {
        let Some(dy) = grads[graph.node_value(i)].take() else {
            continue;
        };
        let x = &pass.values[node.inputs[0]];
        match node.kind {
            LayerKind::Conv2d {
                kernel,
                cin,
                cout,
                stride,
            } => {
                let g = ConvGeom {
                    h: x.height(),
                    w: x.width(),
                    cin,
                    cout,
                    kernel,
                    stride,
                };
                let k = &weights.get(&graph.kernel_name(node))?.data;
                let mut dk = std::mem::take(&mut params.get_mut(&graph.kernel_name(node))?.data);
                let mut db = std::mem::take(&mut params.get_mut(&graph.bias_name(node))?.data);
                let dx = layers::conv_backward(&g, x.data(), k, dy.data(), &mut dk, &mut db);
                params.get_mut(&graph.kernel_name(node))?.data = dk;
                params.get_mut(&graph.bias_name(node))?.data = db;
                accumulate(&mut grads[node.inputs[0]], Image::from_vec(g.h, g.w, cin, dx)?);
            }
            LayerKind::Activation(a) => {
                let y = &pass.values[graph.node_value(i)];
                accumulate(&mut grads[node.inputs[0]], layers::activation_backward(a, y, &dy));
            }
            LayerKind::Upsample2x => accumulate(&mut grads[node.inputs[0]], layers::upsample2x_backward(&dy)),
            LayerKind::AvgPool2x => accumulate(&mut grads[node.inputs[0]], layers::avgpool2x_backward(&dy)),
            LayerKind::Concat => {
                let mut start = 0;
                for &v in &node.inputs {
                    let c = graph.channels(v);
                    accumulate(&mut grads[v], dy.slice_channels(start, c));
                    start += c;
                }
            }
            LayerKind::Add => {
                for &v in &node.inputs {
                    accumulate(&mut grads[v], dy.clone());
                }
            }
            LayerKind::SpaceToDepth => accumulate(&mut grads[node.inputs[0]], depth_to_space(&dy, 2)?),
            LayerKind::BilateralSlice(_) => {
                let s = pass.slicers[i]
                    .as_ref()
                    .ok_or_else(|| Error::graph(format!("{}: missing slicer for {}", graph.name, node.name)))?;
                let planes = (0..dy.channels())
                    .map(|c| s.apply_transpose(&dy.channel(c)))
                    .collect::<lwe_core::Result<Vec<_>>>()?;
                accumulate(&mut grads[node.inputs[0]], Image::from_channels(&planes)?);
            }
        }
    }
    let inputs = grads.drain(..graph.inputs.len()).collect();
    Ok(Gradients { params, inputs })
}
