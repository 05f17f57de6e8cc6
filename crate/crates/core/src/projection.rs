//! Two-dimensional PCA export of item points, for checking that items
//! sharing a concept cluster in the embedding space.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ParamStore;

pub const POWER_TOL: f64 = 1e-8;
pub const POWER_MAX_ITER: usize = 1000;

/// One exported point: `item_id,x,y,label`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionRow {
    pub item_id: u32,
    pub x: f64,
    pub y: f64,
    pub label: &'static str,
}

fn mean_center(points: &mut [Vec<f64>]) {
    let n = points.len() as f64;
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points.iter() {
        for k in 0..d {
            mean[k] += p[k] / n;
        }
    }
    for p in points.iter_mut() {
        for k in 0..d {
            p[k] -= mean[k];
        }
    }
}

fn covariance(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = points.len() as f64;
    let d = points[0].len();
    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        for i in 0..d {
            for j in i..d {
                cov[i][j] += p[i] * p[j] / n;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
    }
    cov
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(&a, &b)| a * b).sum()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fix the sign so the largest-magnitude coordinate is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Dominant eigenvector of a PSD matrix by power iteration.
fn power_iterate(m: &[Vec<f64>], rng: &mut impl Rng) -> Vec<f64> {
    let d = m.len();
    let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n0 = norm(&v);
    for x in v.iter_mut() {
        *x /= n0;
    }
    for _ in 0..POWER_MAX_ITER {
        let mut w = mat_vec(m, &v);
        let nw = norm(&w);
        if nw < 1e-300 {
            break; // zero matrix: any direction is an eigenvector
        }
        for x in w.iter_mut() {
            *x /= nw;
        }
        let delta: f64 = w.iter().zip(&v).map(|(&a, &b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = w;
        if delta < POWER_TOL {
            break;
        }
    }
    canonical_sign(&mut v);
    v
}

/// Top-2 principal directions of a point set (mean-centered internally),
/// via power iteration with deflation.
pub fn top2_components(points: &[Vec<f64>], seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if points.len() < 2 {
        return Err(Error::Contract("PCA needs at least two points".into()));
    }
    let d = points[0].len();
    if d < 2 {
        return Err(Error::Contract("PCA export needs dimension >= 2".into()));
    }
    let mut centered = points.to_vec();
    mean_center(&mut centered);
    let mut cov = covariance(&centered);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v1 = power_iterate(&cov, &mut rng);
    // deflate: C' = C - lambda v v^T
    let cv = mat_vec(&cov, &v1);
    let lambda: f64 = cv.iter().zip(&v1).map(|(&a, &b)| a * b).sum();
    for i in 0..d {
        for j in 0..d {
            cov[i][j] -= lambda * v1[i] * v1[j];
        }
    }
    let v2 = power_iterate(&cov, &mut rng);
    Ok((v1, v2))
}

/// Item points linked to `concept`, plus `n_random` items that are not,
/// projected onto the pooled set's top-2 principal directions.
pub fn export_projection(
    store: &ParamStore,
    ds: &Dataset,
    concept: (u32, u32),
    n_random: usize,
    seed: u64,
) -> Result<Vec<ProjectionRow>> {
    let linked = ds.concepts.items_of(concept);
    if linked.is_empty() {
        return Err(Error::Contract(format!(
            "concept (relation {}, tag {}) has no linked items",
            concept.0, concept.1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unlinked: Vec<u32> = (0..ds.graph.n_items as u32)
        .filter(|i| linked.binary_search(i).is_err())
        .collect();
    unlinked.shuffle_take(n_random, &mut rng);

    let mut ids: Vec<(u32, &'static str)> = linked.iter().map(|&i| (i, "concept")).collect();
    ids.extend(unlinked.iter().map(|&i| (i, "random")));

    let points: Vec<Vec<f64>> = ids.iter().map(|&(i, _)| store.item_point(i)).collect();
    let (c1, c2) = top2_components(&points, seed)?;

    // project the mean-centered coordinates
    let mut centered = points;
    mean_center(&mut centered);
    Ok(ids
        .iter()
        .zip(&centered)
        .map(|(&(item_id, label), p)| ProjectionRow {
            item_id,
            x: p.iter().zip(&c1).map(|(&a, &b)| a * b).sum(),
            y: p.iter().zip(&c2).map(|(&a, &b)| a * b).sum(),
            label,
        })
        .collect())
}

trait ShuffleTake {
    fn shuffle_take(&mut self, n: usize, rng: &mut impl Rng);
}

impl ShuffleTake for Vec<u32> {
    fn shuffle_take(&mut self, n: usize, rng: &mut impl Rng) {
        use rand::seq::SliceRandom;
        let n = n.min(self.len());
        self.partial_shuffle(rng, n);
        self.truncate(n);
    }
}

pub fn rows_to_csv(rows: &[ProjectionRow]) -> String {
    let mut out = String::from("item_id,x,y,label\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.item_id, r.x, r.y, r.label));
    }
    out
}
