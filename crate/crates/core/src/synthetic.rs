//! Cluster-structured interaction data with matching profile embeddings.

use std::collections::BTreeSet;

use rand::Rng;
use rand::distr::Distribution;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{LogNormal, StandardNormal};

use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub clusters: usize,
    pub users_per_cluster: usize,
    pub items_per_cluster: usize,
    /// Probability that an interaction lands outside the user's cluster.
    pub noise: f64,
    pub dim: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(clusters: usize, users_per_cluster: usize, items_per_cluster: usize, noise: f64, seed: u64) -> Self {
        Self {
            clusters,
            users_per_cluster,
            items_per_cluster,
            noise,
            dim: 64,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub num_users: usize,
    pub num_items: usize,
    pub pairs: Vec<Interaction>,
    pub user_embeddings: DenseMatrix,
    pub item_embeddings: DenseMatrix,
    pub user_cluster: Vec<usize>,
    pub item_cluster: Vec<usize>,
    pub user_profiles: Vec<String>,
    pub item_profiles: Vec<String>,
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = crate::linalg::norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// User `u` belongs to cluster `u / users_per_cluster`, item `i` to
/// `i / items_per_cluster`. History lengths are log-normal, in-cluster picks
/// follow a power-law popularity, and a `noise` share goes to other clusters.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    let c = config;
    if c.clusters == 0 || c.users_per_cluster == 0 || c.items_per_cluster == 0 || c.dim == 0 {
        return Err(Error::Argument("cluster, user, item and dimension counts must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&c.noise) {
        return Err(Error::Argument(format!("noise must be in [0, 1), got {}", c.noise)));
    }
    let num_users = c.clusters * c.users_per_cluster;
    let num_items = c.clusters * c.items_per_cluster;
    let user_cluster: Vec<usize> = (0..num_users).map(|u| u / c.users_per_cluster).collect();
    let item_cluster: Vec<usize> = (0..num_items).map(|i| i / c.items_per_cluster).collect();

    let mut rng = seed::rng_for(c.seed, "synthetic/interactions");
    let popularity = WeightedIndex::new((0..c.items_per_cluster).map(|r| 1.0 / (r as f64 + 1.0).powf(0.8)))
        .expect("positive weights");
    let lengths = LogNormal::new(6f64.ln(), 0.6).expect("valid parameters");
    let max_len = ((c.items_per_cluster as f64 * 0.7).floor() as usize).max(1);
    let outside = num_items - c.items_per_cluster;
    let mut pairs = Vec::new();
    for u in 0..num_users {
        let k = user_cluster[u];
        let target = (lengths.sample(&mut rng).round() as usize).clamp(3.min(max_len), max_len);
        let mut chosen = BTreeSet::new();
        while chosen.len() < target {
            let item = if outside > 0 && rng.random::<f64>() < c.noise {
                let r = rng.random_range(0..outside);
                if r < k * c.items_per_cluster { r } else { r + c.items_per_cluster }
            } else {
                k * c.items_per_cluster + popularity.sample(&mut rng)
            };
            chosen.insert(item as u32);
        }
        pairs.extend(chosen.into_iter().map(|i| Interaction::new(u as u32, i)));
    }

    let mut rng = seed::rng_for(c.seed, "synthetic/profiles");
    let centers: Vec<Vec<f64>> = (0..c.clusters)
        .map(|_| unit(gaussian_vec(&mut rng, c.dim, 1.0)))
        .collect();
    let spread = 0.6 / (c.dim as f64).sqrt();
    let mut place = |cluster: usize| -> Vec<f64> {
        let noise = gaussian_vec(&mut rng, c.dim, spread);
        centers[cluster].iter().zip(noise).map(|(a, b)| a + b).collect()
    };
    let user_rows: Vec<Vec<f64>> = user_cluster.iter().map(|&k| place(k)).collect();
    let item_rows: Vec<Vec<f64>> = item_cluster.iter().map(|&k| place(k)).collect();

    Ok(SyntheticData {
        num_users,
        num_items,
        pairs,
        user_embeddings: DenseMatrix::from_rows(&user_rows)?,
        item_embeddings: DenseMatrix::from_rows(&item_rows)?,
        user_profiles: user_cluster
            .iter()
            .enumerate()
            .map(|(u, k)| format!("user {u} mostly engages with topic {k}"))
            .collect(),
        item_profiles: item_cluster
            .iter()
            .enumerate()
            .map(|(i, k)| format!("item {i} belongs to topic {k}"))
            .collect(),
        user_cluster,
        item_cluster,
    })
}
