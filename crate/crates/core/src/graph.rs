//! Normalized bipartite propagation operators over the joint node space
//! `[users | items]` (user `u` is node `u`, item `i` is node `M + i`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    /// `1/sqrt(deg(u) deg(i))` in both directions.
    Symmetric,
    /// Row-stochastic: a node averages its neighbours.
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
struct Csr {
    offsets: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
}

impl Csr {
    fn from_triplets(nodes: usize, mut triplets: Vec<(u32, u32, f64)>) -> Self {
        triplets.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut offsets = vec![0usize; nodes + 1];
        for &(r, _, _) in &triplets {
            offsets[r as usize + 1] += 1;
        }
        for k in 0..nodes {
            offsets[k + 1] += offsets[k];
        }
        Self {
            offsets,
            cols: triplets.iter().map(|t| t.1).collect(),
            weights: triplets.iter().map(|t| t.2).collect(),
        }
    }

    fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.cols[span.clone()]
            .iter()
            .zip(&self.weights[span])
            .map(|(&c, &w)| (c as usize, w))
    }

    fn apply(&self, x: &DenseMatrix, out: &mut DenseMatrix) {
        let d = x.cols();
        out.as_mut_slice()
            .par_chunks_mut(d.max(1))
            .enumerate()
            .for_each(|(r, dst)| {
                dst.iter_mut().for_each(|v| *v = 0.0);
                for (c, w) in self.row(r) {
                    for (o, s) in dst.iter_mut().zip(x.row(c)) {
                        *o += w * s;
                    }
                }
            });
    }
}

/// A propagation operator `A` with `layers` hops; encoding averages
/// `A^0 z, ..., A^L z`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationGraph {
    num_users: usize,
    num_items: usize,
    layers: usize,
    normalization: Normalization,
    forward: Csr,
    transpose: Csr,
    edges: usize,
}

impl PropagationGraph {
    pub fn build(
        histories: &[Vec<u32>],
        num_items: usize,
        layers: usize,
        normalization: Normalization,
    ) -> Result<Self> {
        let num_users = histories.len();
        let nodes = num_users + num_items;
        let mut item_degree = vec![0usize; num_items];
        for items in histories {
            for &i in items {
                let slot = item_degree.get_mut(i as usize).ok_or_else(|| {
                    Error::Argument(format!("item {i} >= {num_items}"))
                })?;
                *slot += 1;
            }
        }
        let mut fwd = Vec::new();
        let mut edges = 0;
        for (u, items) in histories.iter().enumerate() {
            let du = items.len() as f64;
            for &i in items {
                let di = item_degree[i as usize] as f64;
                let item_node = (num_users + i as usize) as u32;
                let (w_ui, w_iu) = match normalization {
                    Normalization::Symmetric => {
                        let w = 1.0 / (du * di).sqrt();
                        (w, w)
                    }
                    Normalization::Mean => (1.0 / du, 1.0 / di),
                };
                fwd.push((u as u32, item_node, w_ui));
                fwd.push((item_node, u as u32, w_iu));
                edges += 1;
            }
        }
        let transpose = Csr::from_triplets(nodes, fwd.iter().map(|&(r, c, w)| (c, r, w)).collect());
        let forward = Csr::from_triplets(nodes, fwd);
        Ok(Self {
            num_users,
            num_items,
            layers,
            normalization,
            forward,
            transpose,
            edges,
        })
    }

    /// Symmetric-normalized LightGCN adjacency.
    pub fn lightgcn(histories: &[Vec<u32>], num_items: usize, layers: usize) -> Result<Self> {
        Self::build(histories, num_items, layers, Normalization::Symmetric)
    }

    /// One-hop neighbour averaging, used to give MF an interaction-set view.
    pub fn mean_one_hop(histories: &[Vec<u32>], num_items: usize) -> Result<Self> {
        Self::build(histories, num_items, 1, Normalization::Mean)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.edges
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    /// Weight of the directed entry `A[row, col]`, zero when absent.
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.forward
            .row(row)
            .find(|&(c, _)| c == col)
            .map_or(0.0, |(_, w)| w)
    }

    fn layer_mean(&self, x: &DenseMatrix, op: &Csr) -> DenseMatrix {
        let mut acc = x.clone();
        let mut cur = x.clone();
        let mut next = DenseMatrix::zeros(x.rows(), x.cols());
        for _ in 0..self.layers {
            op.apply(&cur, &mut next);
            for (a, n) in acc.as_mut_slice().iter_mut().zip(next.as_slice()) {
                *a += n;
            }
            std::mem::swap(&mut cur, &mut next);
        }
        let scale = 1.0 / (self.layers as f64 + 1.0);
        acc.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        acc
    }

    /// `(1/(L+1)) sum_l A^l x`.
    pub fn propagate(&self, x: &DenseMatrix) -> DenseMatrix {
        debug_assert_eq!(x.rows(), self.num_nodes());
        self.layer_mean(x, &self.forward)
    }

    /// Adjoint of [`propagate`](Self::propagate): `(1/(L+1)) sum_l (A^T)^l g`.
    pub fn propagate_adjoint(&self, g: &DenseMatrix) -> DenseMatrix {
        debug_assert_eq!(g.rows(), self.num_nodes());
        self.layer_mean(g, &self.transpose)
    }
}
