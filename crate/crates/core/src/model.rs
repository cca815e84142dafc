//! Base encoders (MF and LightGCN), the BPR objective, and negative sampling.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{self, Reader, Writer};
use crate::graph::PropagationGraph;
use crate::linalg::{self, DenseMatrix};
use crate::seed;

/// Trainable user and item vectors stacked as `[users | items]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    num_users: usize,
    num_items: usize,
    values: DenseMatrix,
}

impl EmbeddingTable {
    pub fn new(num_users: usize, num_items: usize, values: DenseMatrix) -> Result<Self> {
        if values.rows() != num_users + num_items {
            return Err(Error::Argument(format!(
                "table has {} rows, expected {}",
                values.rows(),
                num_users + num_items
            )));
        }
        Ok(Self {
            num_users,
            num_items,
            values,
        })
    }

    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        Self {
            num_users,
            num_items,
            values: DenseMatrix::zeros(num_users + num_items, dim),
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &DenseMatrix {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut DenseMatrix {
        &mut self.values
    }

    pub fn user(&self, u: usize) -> &[f64] {
        self.values.row(u)
    }

    pub fn item(&self, i: usize) -> &[f64] {
        self.values.row(self.num_users + i)
    }

    pub fn is_finite(&self) -> bool {
        self.values.as_slice().iter().all(|v| v.is_finite())
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(formats::CHECKPOINT_MAGIC);
        w.u32(self.num_users)?.u32(self.num_items)?.u32(self.dim())?;
        w.f32s(self.values.as_slice());
        w.finish(path)
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader::open(&bytes, formats::CHECKPOINT_MAGIC)?;
        let m = r.u32()?;
        let n = r.u32()?;
        let d = r.u32()?;
        let data = r.f32s((m + n) * d, d)?;
        r.expect_end()?;
        Self::new(m, n, DenseMatrix::from_vec(m + n, d, data)?)
    }
}

/// Uniform Xavier initialization: user rows in `±sqrt(6/(M+d))`, item rows
/// in `±sqrt(6/(N+d))`.
pub fn init_xavier(num_users: usize, num_items: usize, dim: usize, seed: u64) -> EmbeddingTable {
    assert!(dim >= 1, "embedding size must be positive");
    let mut rng = seed::rng_for(seed, "init");
    let mut values = DenseMatrix::zeros(num_users + num_items, dim);
    let user_bound = (6.0 / (num_users + dim) as f64).sqrt();
    let item_bound = (6.0 / (num_items + dim) as f64).sqrt();
    for r in 0..num_users + num_items {
        let bound = if r < num_users { user_bound } else { item_bound };
        for v in values.row_mut(r) {
            *v = rng.random_range(-bound..=bound);
        }
    }
    EmbeddingTable {
        num_users,
        num_items,
        values,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Mf,
    LightGcn,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mf" => Ok(EncoderKind::Mf),
            "lightgcn" | "lgcn" => Ok(EncoderKind::LightGcn),
            other => Err(Error::Argument(format!("unknown encoder '{other}'"))),
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderKind::Mf => "mf",
            EncoderKind::LightGcn => "lightgcn",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum View {
    /// No interaction set involved (plain MF).
    Identity,
    Original,
    Augmented,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub values: DenseMatrix,
    pub num_users: usize,
    pub view: View,
}

impl EncoderOutput {
    pub fn user(&self, u: usize) -> &[f64] {
        self.values.row(u)
    }

    pub fn item(&self, i: usize) -> &[f64] {
        self.values.row(self.num_users + i)
    }

    pub fn num_items(&self) -> usize {
        self.values.rows() - self.num_users
    }

    pub fn score(&self, u: usize, i: usize) -> f64 {
        linalg::dot(self.user(u), self.item(i))
    }
}

/// `graph = None` is the MF identity encoder.
pub fn encode(table: &EmbeddingTable, graph: Option<&PropagationGraph>, view: View) -> EncoderOutput {
    let values = match graph {
        None => table.values.clone(),
        Some(g) => g.propagate(&table.values),
    };
    EncoderOutput {
        values,
        num_users: table.num_users,
        view: if graph.is_none() { View::Identity } else { view },
    }
}

/// Pulls a gradient w.r.t. encoder output back to the table.
pub fn encode_backward(graph: Option<&PropagationGraph>, grad_output: &DenseMatrix) -> DenseMatrix {
    match graph {
        None => grad_output.clone(),
        Some(g) => g.propagate_adjoint(grad_output),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean BPR loss over `batch` plus `reg/(2|B|) * sum(|z_u|^2 + |z_pos|^2 + |z_neg|^2)`
/// on the layer-0 table rows.
///
/// Gradients are accumulated: the ranking part into `grad_output` (w.r.t.
/// encoder output), the L2 part into `grad_table`.
pub fn bpr_loss_and_grad(
    output: &EncoderOutput,
    table: &EmbeddingTable,
    batch: &[Triple],
    reg: f64,
    grad_output: &mut DenseMatrix,
    grad_table: &mut DenseMatrix,
) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let b = batch.len() as f64;
    let m = output.num_users;
    let d = table.dim();
    let mut ranking = 0.0;
    let mut l2 = 0.0;
    let mut diff = vec![0.0; d];
    for t in batch {
        let (u, p, n) = (t.user as usize, t.pos as usize, t.neg as usize);
        let eu = output.user(u).to_vec();
        let ep = output.item(p);
        let en = output.item(n);
        for k in 0..d {
            diff[k] = ep[k] - en[k];
        }
        let x = linalg::dot(&eu, &diff);
        ranking += softplus(-x);
        let coef = -sigmoid(-x) / b;
        linalg::axpy(coef, &diff, grad_output.row_mut(u));
        linalg::axpy(coef, &eu, grad_output.row_mut(m + p));
        linalg::axpy(-coef, &eu, grad_output.row_mut(m + n));
        if reg > 0.0 {
            for node in [u, m + p, m + n] {
                let z = table.values.row(node);
                l2 += linalg::dot(z, z);
                linalg::axpy(reg / b, z, grad_table.row_mut(node));
            }
        }
    }
    ranking / b + 0.5 * reg * l2 / b
}

/// Uniformly samples an item outside `history` (sorted ascending).
pub fn uniform_negative_sample<R: Rng + ?Sized>(
    history: &[u32],
    num_items: usize,
    rng: &mut R,
) -> Result<u32> {
    if history.len() >= num_items {
        return Err(Error::Argument(format!(
            "user has interacted with all {num_items} items; no negative exists"
        )));
    }
    if history.len() * 2 < num_items {
        loop {
            let cand = rng.random_range(0..num_items) as u32;
            if history.binary_search(&cand).is_err() {
                return Ok(cand);
            }
        }
    }
    // dense history: pick the r-th item of the complement directly
    let mut r = rng.random_range(0..num_items - history.len()) as u32;
    for &h in history {
        if h <= r {
            r += 1;
        } else {
            break;
        }
    }
    Ok(r)
}
