//! Group-correlation encoding and message passing on the group and city
//! graphs.
//!
//! Both graphs are batched by stacking `B` copies of the node set; node `n` of
//! sample `b` lives in row `b·N + n`. Messages are summed per destination, so
//! an empty neighbourhood aggregates to the zero vector.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::graph::{CityGraph, GroupGraph};
use crate::nn::{Mlp, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source and destination row indices of `edges` replicated over `batch`
/// stacked copies of an `n_nodes` graph.
pub fn batched_edges(edges: &[(usize, usize)], n_nodes: usize, batch: usize) -> (Vec<usize>, Vec<usize>) {
    let mut src = Vec::with_capacity(edges.len() * batch);
    let mut dst = Vec::with_capacity(edges.len() * batch);
    for b in 0..batch {
        for &(s, d) in edges {
            src.push(b * n_nodes + s);
            dst.push(b * n_nodes + d);
        }
    }
    (src, dst)
}

/// `R_{i,j} = ReLU(MLP([Z_i ‖ Z_j ‖ time]))` for every ordered pair.
#[derive(Clone, Debug)]
pub struct CorrelationEncoder {
    pub mlp: Mlp,
}

impl CorrelationEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        time_width: usize,
        d_edge: usize,
    ) -> Self {
        Self {
            mlp: Mlp::new(store, rng, name, &[2 * width + time_width, width, d_edge]),
        }
    }

    /// `z`: `[(B·G)×d]`, `time`: `[B×t]` → `[(B·E)×d_edge]`, rows ordered as
    /// `graph.edges` within each sample; row `(i, j)` holds `R_{i,j}`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, z: Var, time: Var, graph: &GroupGraph) -> Var {
        let batch = tape.value(time).rows();
        let (src, dst) = batched_edges(&graph.edges, graph.n_nodes, batch);
        let sample: Vec<usize> = (0..batch)
            .flat_map(|b| std::iter::repeat_n(b, graph.edges.len()))
            .collect();
        let zi = tape.gather_rows(z, src);
        let zj = tape.gather_rows(z, dst);
        let t = tape.gather_rows(time, sample);
        let input = tape.concat_cols(&[zi, zj, t]);
        let out = self.mlp.forward(tape, input);
        tape.relu(out)
    }
}

#[derive(Clone, Debug)]
pub struct MessagePassingLayer {
    pub message: Mlp,
    pub update: Mlp,
}

impl MessagePassingLayer {
    /// Message MLPs start with a zero output layer: summed messages then
    /// begin at zero instead of scaling with node degree.
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        message_dims: &[usize],
        update_dims: &[usize],
    ) -> Self {
        let message = Mlp::new(store, rng, &format!("{name}.message"), message_dims);
        message.zero_output(store);
        let update = Mlp::new(store, rng, &format!("{name}.update"), update_dims);
        Self { message, update }
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.message.params();
        p.extend(self.update.params());
        p
    }
}

/// Message passing on the complete group graph.
///
/// Per layer: `m_{j→i} = MLP_msg([Z_i ‖ Z_j ‖ R_{j,i}])`,
/// `r_i = Σ_j m_{j→i}`, `Z′_i = MLP_upd([r_i ‖ Z_i])`.
#[derive(Clone, Debug)]
pub struct GroupMessagePassing {
    pub layers: Vec<MessagePassingLayer>,
}

impl GroupMessagePassing {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        d_edge: usize,
        n_layers: usize,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                MessagePassingLayer::new(
                    store,
                    rng,
                    &format!("{name}.layer{l}"),
                    &[2 * width + d_edge, width, width],
                    &[2 * width, width, width],
                )
            })
            .collect();
        Self { layers }
    }

    /// `r` rows follow `graph.edges` per sample, as produced by
    /// [`CorrelationEncoder::forward`].
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, mut z: Var, r: Var, graph: &GroupGraph) -> Var {
        let rows = tape.value(z).rows();
        let batch = rows / graph.n_nodes;
        let (src, dst) = batched_edges(&graph.edges, graph.n_nodes, batch);
        for layer in &self.layers {
            let zi = tape.gather_rows(z, dst.clone());
            let zj = tape.gather_rows(z, src.clone());
            let input = tape.concat_cols(&[zi, zj, r]);
            let m = layer.message.forward(tape, input);
            let agg = tape.scatter_add_rows(m, dst.clone(), rows);
            let upd_in = tape.concat_cols(&[agg, z]);
            z = layer.update.forward(tape, upd_in);
        }
        z
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(MessagePassingLayer::params).collect()
    }
}

/// `X² = MLP([X ‖ X¹])`.
#[derive(Clone, Debug)]
pub struct CityFusion {
    pub mlp: Mlp,
}

impl CityFusion {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, width: usize) -> Self {
        Self {
            mlp: Mlp::new(store, rng, name, &[2 * width, width, width]),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, x1: Var) -> Var {
        let input = tape.concat_cols(&[x, x1]);
        self.mlp.forward(tape, input)
    }
}

/// Message passing on the city graph with the scalar edge weight as the
/// edge attribute.
///
/// Per layer: `m_{n→i} = MLP_msg([X_i ‖ X_n ‖ E_{n,i}])`,
/// `r_i = Σ_n m_{n→i}`, `X′_i = MLP_upd([X_i ‖ r_i])`.
#[derive(Clone, Debug)]
pub struct CityMessagePassing {
    pub layers: Vec<MessagePassingLayer>,
}

impl CityMessagePassing {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, width: usize, n_layers: usize) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                MessagePassingLayer::new(
                    store,
                    rng,
                    &format!("{name}.layer{l}"),
                    &[2 * width + 1, width, width],
                    &[2 * width, width, width],
                )
            })
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, mut x: Var, graph: &CityGraph) -> Var {
        let rows = tape.value(x).rows();
        let batch = rows / graph.n_nodes;
        let (src, dst) = batched_edges(&graph.edges, graph.n_nodes, batch);
        let weights: Vec<T> = (0..batch)
            .flat_map(|_| graph.weights.iter().map(|&w| T::lit(w)))
            .collect();
        let e = tape.constant(Tensor::from_vec(weights.len(), 1, weights));
        for layer in &self.layers {
            let xi = tape.gather_rows(x, dst.clone());
            let xn = tape.gather_rows(x, src.clone());
            let input = tape.concat_cols(&[xi, xn, e]);
            let m = layer.message.forward(tape, input);
            let agg = tape.scatter_add_rows(m, dst.clone(), rows);
            let upd_in = tape.concat_cols(&[x, agg]);
            x = layer.update.forward(tape, upd_in);
        }
        x
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(MessagePassingLayer::params).collect()
    }
}
