//! Seeded synthetic datasets with planted concept geometry.
//!
//! The generator plants axis-aligned concept boxes in a latent space, draws
//! each item inside the intersection of one to three concepts (emitting one
//! membership triplet per concept), and gives every user an interest equal to
//! the intersection of a few concepts; their interactions are the items
//! whose latent points lie inside that region. An oracle scorer ranks items
//! by the true latent geometry, giving the ceiling any learner can reach.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{parse_interactions, parse_kg, ConceptIndex, Dataset};
use crate::error::{Error, Result};
use crate::eval::{ndcg_at_k, recall_at_k, EvalReport};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_concepts: usize,
    pub n_items: usize,
    pub n_users: usize,
    /// Latent dimension, decoupled from the model dimension.
    pub d_true: usize,
    pub concepts_per_interest: usize,
    /// Cap on interactions per user; 0 keeps the full pool.
    pub items_per_user: usize,
    /// Probability that an interaction is replaced by a uniform random item.
    pub noise: f64,
    /// Fraction of items that never enter a training split: they stay
    /// reachable only through the KG and land in test sets alone, which is
    /// what separates the KG-trained pipeline from interaction-only training.
    pub cold_fraction: f64,
    pub seed: u64,
    /// Also link overlapping concepts with TRT triplets.
    pub emit_trt: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_concepts: 20,
            n_items: 2000,
            n_users: 200,
            d_true: 8,
            concepts_per_interest: 2,
            items_per_user: 0,
            noise: 0.0,
            cold_fraction: 0.15,
            seed: 0,
            emit_trt: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_concepts == 0
            || self.n_items == 0
            || self.n_users == 0
            || self.d_true == 0
            || self.concepts_per_interest == 0
        {
            return Err(Error::Config("synthetic counts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config("noise must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.cold_fraction) {
            return Err(Error::Config("cold_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Planted geometry, written as a sidecar next to the dataset files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub d_true: usize,
    /// Per concept: (lower corner, upper corner).
    pub boxes: Vec<(Vec<f64>, Vec<f64>)>,
    pub item_points: Vec<Vec<f64>>,
    pub user_concepts: Vec<Vec<u32>>,
}

/// Dataset file contents plus the planted truth.
#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub train_text: String,
    pub test_text: String,
    pub kg_text: String,
    pub ground_truth: GroundTruth,
}

fn region_of(boxes: &[(Vec<f64>, Vec<f64>)], ids: &[u32]) -> (Vec<f64>, Vec<f64>) {
    let d = boxes[ids[0] as usize].0.len();
    let mut lo = vec![f64::NEG_INFINITY; d];
    let mut hi = vec![f64::INFINITY; d];
    for &c in ids {
        let (bl, bh) = &boxes[c as usize];
        for k in 0..d {
            lo[k] = lo[k].max(bl[k]);
            hi[k] = hi[k].min(bh[k]);
        }
    }
    (lo, hi)
}

fn region_nonempty(lo: &[f64], hi: &[f64]) -> bool {
    lo.iter().zip(hi).all(|(&l, &h)| l < h)
}

fn point_inside(p: &[f64], lo: &[f64], hi: &[f64]) -> bool {
    p.iter().zip(lo.iter().zip(hi)).all(|(&x, (&l, &h))| l <= x && x <= h)
}

/// Generate the dataset files and the ground truth for `cfg`.
pub fn generate_files(cfg: &SynthConfig) -> Result<SynthFiles> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_true;

    // planted concept boxes: consecutive even/odd concepts share a region so
    // multi-concept interests always exist, while the boxes stay small enough
    // that a random item rarely falls into a foreign region
    let mut boxes: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(cfg.n_concepts);
    for c in 0..cfg.n_concepts {
        let mut lo = Vec::with_capacity(d);
        let mut hi = Vec::with_capacity(d);
        for k in 0..d {
            let center: f64 = if c % 2 == 1 {
                let (pl, ph) = (&boxes[c - 1].0[k], &boxes[c - 1].1[k]);
                (pl + ph) / 2.0 + rng.random_range(-0.2..0.2)
            } else {
                rng.random_range(-1.0..1.0)
            };
            let half: f64 = rng.random_range(0.3..0.5);
            lo.push(center - half);
            hi.push(center + half);
        }
        boxes.push((lo, hi));
    }

    // combinations of concepts with a non-empty common region
    let mut valid_pairs: Vec<Vec<u32>> = Vec::new();
    for a in 0..cfg.n_concepts as u32 {
        for b in (a + 1)..cfg.n_concepts as u32 {
            let (lo, hi) = region_of(&boxes, &[a, b]);
            if region_nonempty(&lo, &hi) {
                valid_pairs.push(vec![a, b]);
            }
        }
    }

    // grow a valid combination of the requested size from a seed pair
    let pick_combo = |size: usize, rng: &mut ChaCha8Rng| -> Vec<u32> {
        if size <= 1 || valid_pairs.is_empty() {
            return vec![rng.random_range(0..cfg.n_concepts as u32)];
        }
        let mut ids = valid_pairs[rng.random_range(0..valid_pairs.len())].clone();
        while ids.len() < size {
            let mut extended = false;
            for _ in 0..20 {
                let c = rng.random_range(0..cfg.n_concepts as u32);
                if ids.contains(&c) {
                    continue;
                }
                let mut cand = ids.clone();
                cand.push(c);
                let (lo, hi) = region_of(&boxes, &cand);
                if region_nonempty(&lo, &hi) {
                    ids = cand;
                    extended = true;
                    break;
                }
            }
            if !extended {
                break; // settle for the smaller combination
            }
        }
        ids.sort_unstable();
        ids
    };

    // items: point inside the intersection of 1..=3 concepts
    let mut item_points = Vec::with_capacity(cfg.n_items);
    let mut memberships: Vec<Vec<u32>> = Vec::with_capacity(cfg.n_items);
    for _ in 0..cfg.n_items {
        let k = rng.random_range(1..=3usize).min(cfg.n_concepts);
        let ids = pick_combo(k, &mut rng);
        let (lo, hi) = region_of(&boxes, &ids);
        let point: Vec<f64> = (0..d).map(|j| rng.random_range(lo[j]..hi[j])).collect();
        item_points.push(point);
        memberships.push(ids);
    }

    // cold items never enter a training split
    let mut is_cold = vec![false; cfg.n_items];
    let n_cold = (cfg.cold_fraction * cfg.n_items as f64).floor() as usize;
    if n_cold > 0 {
        let mut ids: Vec<u32> = (0..cfg.n_items as u32).collect();
        ids.partial_shuffle(&mut rng, n_cold);
        for &i in &ids[..n_cold] {
            is_cold[i as usize] = true;
        }
    }

    // users: interest region = intersection of a few concepts
    let mut user_concepts = Vec::with_capacity(cfg.n_users);
    let mut train: Vec<Vec<u32>> = Vec::with_capacity(cfg.n_users);
    let mut test: Vec<Vec<u32>> = Vec::with_capacity(cfg.n_users);
    for user in 0..cfg.n_users {
        let mut cpi = cfg.concepts_per_interest.min(cfg.n_concepts);
        let (ids, pool) = 'outer: loop {
            for _ in 0..100 {
                let ids = pick_combo(cpi, &mut rng);
                if ids.len() < cpi {
                    continue;
                }
                let (lo, hi) = region_of(&boxes, &ids);
                if !region_nonempty(&lo, &hi) {
                    continue;
                }
                let pool: Vec<u32> = (0..cfg.n_items as u32)
                    .filter(|&i| point_inside(&item_points[i as usize], &lo, &hi))
                    .collect();
                let warm = pool.iter().filter(|&&i| !is_cold[i as usize]).count();
                if pool.len() >= 2 && warm >= 1 {
                    break 'outer (ids, pool);
                }
            }
            if cpi == 1 {
                return Err(Error::Contract(format!(
                    "user {user}: no concept region contains two items; enlarge the item count"
                )));
            }
            cpi -= 1; // empty intersections persisted: fall back to fewer concepts
        };
        let mut pool = pool;
        pool.shuffle(&mut rng);
        if cfg.items_per_user > 0 && pool.len() > cfg.items_per_user {
            // keep at least one warm item when truncating
            pool.sort_by_key(|&i| is_cold[i as usize]); // stable: shuffled order within warm/cold
            pool.truncate(cfg.items_per_user);
            pool.shuffle(&mut rng);
        }
        // 80/20 over the whole pool; the training side draws warm items only
        let warm: Vec<u32> = pool.iter().copied().filter(|&i| !is_cold[i as usize]).collect();
        let cold: Vec<u32> = pool.iter().copied().filter(|&i| is_cold[i as usize]).collect();
        let n_train = (((pool.len() as f64) * 0.8).round() as usize).clamp(1, warm.len().min(pool.len() - 1));
        let mut tr: Vec<u32> = warm[..n_train].to_vec();
        let mut te: Vec<u32> = warm[n_train..].to_vec();
        te.extend_from_slice(&cold);
        for slot in tr.iter_mut().chain(te.iter_mut()) {
            if cfg.noise > 0.0 && rng.random_bool(cfg.noise) {
                *slot = rng.random_range(0..cfg.n_items as u32);
            }
        }
        user_concepts.push(ids);
        train.push(tr);
        test.push(te);
    }

    // the loader derives the item universe from the interactions, so the top
    // item id must be interacted: swap labels with an interacted item if not
    let top = cfg.n_items as u32 - 1;
    let interacted_max = train
        .iter()
        .chain(test.iter())
        .flat_map(|v| v.iter().copied())
        .max()
        .ok_or_else(|| Error::Contract("no interactions generated".into()))?;
    if interacted_max != top {
        let y = interacted_max;
        item_points.swap(top as usize, y as usize);
        memberships.swap(top as usize, y as usize);
        for list in train.iter_mut().chain(test.iter_mut()) {
            for v in list.iter_mut() {
                if *v == y {
                    *v = top;
                } else if *v == top {
                    *v = y;
                }
            }
        }
    }

    // serialize in the interaction / KG file formats
    let mut train_text = String::new();
    let mut test_text = String::new();
    for user in 0..cfg.n_users {
        if !train[user].is_empty() {
            train_text.push_str(&format!("{user}"));
            for i in &train[user] {
                train_text.push_str(&format!(" {i}"));
            }
            train_text.push('\n');
        }
        if !test[user].is_empty() {
            test_text.push_str(&format!("{user}"));
            for i in &test[user] {
                test_text.push_str(&format!(" {i}"));
            }
            test_text.push('\n');
        }
    }
    let mut kg_text = String::new();
    for (item, ids) in memberships.iter().enumerate() {
        for &c in ids {
            kg_text.push_str(&format!("{item} 0 {}\n", cfg.n_items + c as usize));
        }
    }
    if cfg.emit_trt {
        for a in 0..cfg.n_concepts as u32 {
            for b in (a + 1)..cfg.n_concepts as u32 {
                let (lo, hi) = region_of(&boxes, &[a, b]);
                if region_nonempty(&lo, &hi) {
                    kg_text.push_str(&format!(
                        "{} 1 {}\n",
                        cfg.n_items + a as usize,
                        cfg.n_items + b as usize
                    ));
                }
            }
        }
    }

    Ok(SynthFiles {
        train_text,
        test_text,
        kg_text,
        ground_truth: GroundTruth {
            d_true: d,
            boxes,
            item_points,
            user_concepts,
        },
    })
}

/// Generate and load in one step: the returned dataset went through the same
/// parsers as on-disk files, so all loader invariants hold.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Dataset, GroundTruth)> {
    let files = generate_files(cfg)?;
    let graph = parse_interactions(
        files.train_text.as_bytes(),
        "synthetic-train",
        files.test_text.as_bytes(),
        "synthetic-test",
    )?;
    let triplets = parse_kg(files.kg_text.as_bytes(), "synthetic-kg", graph.n_items)?;
    let concepts = ConceptIndex::build(&triplets);
    Ok((
        Dataset {
            graph,
            triplets,
            concepts,
        },
        files.ground_truth,
    ))
}

/// Write the dataset files plus the `ground_truth.json` sidecar.
pub fn write_dataset(cfg: &SynthConfig, dir: &std::path::Path) -> Result<()> {
    let files = generate_files(cfg)?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("train.txt"), &files.train_text)?;
    std::fs::write(dir.join("test.txt"), &files.test_text)?;
    std::fs::write(dir.join("kg_final.txt"), &files.kg_text)?;
    let gt = serde_json::to_string(&files.ground_truth)
        .map_err(|e| Error::Config(format!("ground truth serialization: {e}")))?;
    std::fs::write(dir.join("ground_truth.json"), gt)?;
    Ok(())
}

pub fn read_ground_truth(dir: &std::path::Path) -> Result<GroundTruth> {
    let text = std::fs::read_to_string(dir.join("ground_truth.json"))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: dir.join("ground_truth.json").display().to_string(),
        line: 0,
        msg: e.to_string(),
    })
}

/// Ceiling metrics: rank items by the true latent point-to-region distance,
/// containment first (outside distance, then inside distance, then id).
pub fn oracle_metrics(gt: &GroundTruth, ds: &Dataset, k: usize) -> Result<EvalReport> {
    let n_items = ds.graph.n_items;
    if gt.item_points.len() != n_items {
        return Err(Error::Shape(format!(
            "ground truth has {} item points but the dataset has {n_items} items",
            gt.item_points.len()
        )));
    }
    let mut per_user = Vec::new();
    for user in 0..ds.graph.n_users {
        let mask = &ds.graph.train[user];
        let truth = &ds.graph.test[user];
        if mask.is_empty() || truth.is_empty() {
            continue;
        }
        let (lo, hi) = region_of(&gt.boxes, &gt.user_concepts[user]);
        let cen: Vec<f64> = lo.iter().zip(&hi).map(|(&l, &h)| (l + h) / 2.0).collect();
        let hw: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(&l, &h)| ((h - l) / 2.0).max(0.0))
            .collect();
        let mut scored: Vec<(f64, f64, u32)> = Vec::with_capacity(n_items - mask.len());
        for item in 0..n_items as u32 {
            if mask.binary_search(&item).is_ok() {
                continue;
            }
            let p = &gt.item_points[item as usize];
            let d_out = crate::geometry::kernel::dist_out(p, &cen, &hw);
            let d_in = crate::geometry::kernel::dist_in(p, &cen, &hw);
            scored.push((d_out, d_in, item));
        }
        scored.sort_unstable_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap()
                .then(a.1.partial_cmp(&b.1).unwrap())
                .then(a.2.cmp(&b.2))
        });
        let topk: Vec<u32> = scored.into_iter().take(k).map(|(_, _, id)| id).collect();
        per_user.push((
            user as u32,
            recall_at_k(&topk, truth),
            ndcg_at_k(&topk, truth),
        ));
    }
    if per_user.is_empty() {
        return Err(Error::Contract("oracle: no evaluable users".into()));
    }
    let n = per_user.len();
    Ok(EvalReport {
        k,
        recall: per_user.iter().map(|r| r.1).sum::<f64>() / n as f64,
        ndcg: per_user.iter().map(|r| r.2).sum::<f64>() / n as f64,
        n_users_evaluated: n,
        per_user: Some(per_user),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_concepts: 8,
            n_items: 300,
            n_users: 30,
            d_true: 6,
            concepts_per_interest: 2,
            items_per_user: 0,
            noise: 0.0,
            cold_fraction: 0.15,
            seed: 11,
            emit_trt: true,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_files(&small_cfg()).unwrap();
        let b = generate_files(&small_cfg()).unwrap();
        assert_eq!(a.train_text, b.train_text);
        assert_eq!(a.test_text, b.test_text);
        assert_eq!(a.kg_text, b.kg_text);
    }

    #[test]
    fn irt_count_matches_membership_recount() {
        let cfg = small_cfg();
        let (ds, gt) = generate_synthetic(&cfg).unwrap();
        // one IRT triplet per membership; memberships recounted from the truth
        let mut expected = 0usize;
        for item in 0..cfg.n_items as u32 {
            expected += ds.concepts.concepts_of(item).unwrap().len();
        }
        assert_eq!(ds.triplets.irt.len(), expected);
        assert!(expected >= cfg.n_items); // every item has at least one concept
        assert_eq!(gt.item_points.len(), cfg.n_items);
    }

    #[test]
    fn positives_lie_inside_the_planted_region() {
        let (ds, gt) = generate_synthetic(&small_cfg()).unwrap();
        for user in 0..ds.graph.n_users {
            let (lo, hi) = region_of(&gt.boxes, &gt.user_concepts[user]);
            for &item in ds.graph.train[user].iter().chain(&ds.graph.test[user]) {
                assert!(
                    point_inside(&gt.item_points[item as usize], &lo, &hi),
                    "user {user} item {item} outside its region"
                );
            }
        }
    }

    #[test]
    fn single_concept_interest_matches_member_items() {
        let mut cfg = small_cfg();
        cfg.concepts_per_interest = 1;
        cfg.items_per_user = 0;
        let (ds, gt) = generate_synthetic(&cfg).unwrap();
        for user in 0..ds.graph.n_users {
            let c = gt.user_concepts[user][0];
            let (lo, hi) = (&gt.boxes[c as usize].0, &gt.boxes[c as usize].1);
            let members: std::collections::BTreeSet<u32> = (0..cfg.n_items as u32)
                .filter(|&i| point_inside(&gt.item_points[i as usize], lo, hi))
                .collect();
            let positives: std::collections::BTreeSet<u32> = ds.graph.train[user]
                .iter()
                .chain(&ds.graph.test[user])
                .copied()
                .collect();
            assert_eq!(positives, members, "user {user}");
        }
    }

    #[test]
    fn loader_round_trip_preserves_counts() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&cfg, dir.path()).unwrap();
        let ds = crate::data::load_dataset(dir.path()).unwrap();
        let (mem, _) = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.manifest(), mem.manifest());
        assert_eq!(ds.graph.n_items, cfg.n_items);
        let gt = read_ground_truth(dir.path()).unwrap();
        assert_eq!(gt.item_points.len(), cfg.n_items);
    }

    #[test]
    fn oracle_is_perfect_without_noise() {
        let cfg = small_cfg();
        let (ds, gt) = generate_synthetic(&cfg).unwrap();
        let report = oracle_metrics(&gt, &ds, 20).unwrap();
        // only users with more than 20 test items can fall short
        let all_small = ds.graph.test.iter().all(|t| t.len() <= 20);
        if all_small {
            assert!(
                (report.recall - 1.0).abs() < 1e-12,
                "oracle recall {}",
                report.recall
            );
        } else {
            assert!(report.recall > 0.9);
        }
    }
}
