//! All-ranking evaluation: score every non-interacted item per user, take the
//! top K, and average recall@K / ndcg@K over evaluable users.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::act;
use crate::model::{interest_box_over, truncated_history, InterestConfig, ParamStore};

/// Aggregated ranking metrics.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub n_users_evaluated: usize,
    pub per_user: Option<Vec<(u32, f64, f64)>>,
}

impl EvalReport {
    pub fn to_toml(&self) -> String {
        format!(
            "k = {}\nn_users = {}\nrecall = {}\nndcg = {}\n",
            self.k, self.n_users_evaluated, self.recall, self.ndcg
        )
    }
}

/// Interest matching score: the margin minus the point-to-box distance.
pub fn score(dist_pb: f64, gamma: f64) -> f64 {
    gamma - dist_pb
}

/// One user's ranking task: build the interest box from `history`, skip the
/// `mask` (sorted), and measure against `truth` (sorted).
#[derive(Debug, Clone)]
pub struct UserEvalCase<'a> {
    pub user: u32,
    pub history: &'a [u32],
    pub mask: &'a [u32],
    pub truth: &'a [u32],
}

fn dist_pb_row(p: &[f32], cen: &[f64], hw: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..p.len() {
        let pk = p[k] as f64;
        let hi = cen[k] + hw[k];
        let lo = cen[k] - hw[k];
        if pk > hi {
            s += pk - hi;
        }
        if lo > pk {
            s += lo - pk;
        }
        let q = crate::geometry::kernel::clamp(pk, lo, hi);
        s += (cen[k] - q).abs();
    }
    s
}

/// Scores of every item against a user box; masked items get `None`.
fn score_all(store: &ParamStore, cen: &[f64], hw: &[f64], mask: &[u32]) -> Vec<(f64, u32)> {
    let n_items = store.shapes().n_items;
    let mut out = Vec::with_capacity(n_items - mask.len());
    for item in 0..n_items as u32 {
        if mask.binary_search(&item).is_ok() {
            continue;
        }
        let row = &store.data[store.layout.item(item)];
        out.push((score(dist_pb_row(row, cen, hw), store.gamma), item));
    }
    out
}

/// Sorts scored items descending, ties broken by ascending item id, and
/// returns the first `k` ids.
pub fn top_k(mut scored: Vec<(f64, u32)>, k: usize) -> Vec<u32> {
    scored.sort_unstable_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("scores are finite")
            .then(a.1.cmp(&b.1))
    });
    scored.into_iter().take(k).map(|(_, id)| id).collect()
}

/// Top-K ranked items for a user over everything outside their training set.
pub fn rank_items(
    store: &ParamStore,
    ds: &Dataset,
    user: u32,
    k: usize,
    cfg: &InterestConfig,
) -> Result<Vec<u32>> {
    let order = ds
        .graph
        .train_order
        .get(user as usize)
        .ok_or_else(|| Error::Range(format!("user {user} outside interaction graph")))?;
    if order.is_empty() {
        return Err(Error::Contract(format!("user {user} has no training history")));
    }
    let history = truncated_history(order, cfg.history_limit);
    let b = interest_box_over(store, &ds.concepts, history, user, cfg)?;
    let hw: Vec<f64> = b.offset_raw.iter().map(|&o| act(o)).collect();
    let mask = &ds.graph.train[user as usize];
    Ok(top_k(score_all(store, &b.center, &hw, mask), k))
}

/// Fraction of the test items that appear in the top K.
pub fn recall_at_k(topk: &[u32], test_items: &[u32]) -> f64 {
    if test_items.is_empty() {
        return 0.0;
    }
    let hits = topk
        .iter()
        .filter(|id| test_items.binary_search(id).is_ok())
        .count();
    hits as f64 / test_items.len() as f64
}

/// Binary-relevance NDCG with the log2(p+1) discount; the ideal DCG truncates
/// at min(K, |test|).
pub fn ndcg_at_k(topk: &[u32], test_items: &[u32]) -> f64 {
    if test_items.is_empty() {
        return 0.0;
    }
    let mut dcg = 0.0;
    for (pos, id) in topk.iter().enumerate() {
        if test_items.binary_search(id).is_ok() {
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let cutoff = test_items.len().min(topk.len());
    let idcg: f64 = (0..cutoff).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Evaluates a set of prepared ranking cases. The per-user work runs in
/// parallel unless `sequential`; the reduction is a fixed-order sum either
/// way, so results are identical.
pub fn evaluate_cases(
    store: &ParamStore,
    concepts: &crate::data::ConceptIndex,
    cases: &[UserEvalCase<'_>],
    k: usize,
    cfg: &InterestConfig,
    sequential: bool,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Contract("no evaluable users".into()));
    }
    let eval_one = |case: &UserEvalCase<'_>| -> Result<(u32, f64, f64)> {
        let b = interest_box_over(store, concepts, case.history, case.user, cfg)?;
        let hw: Vec<f64> = b.offset_raw.iter().map(|&o| act(o)).collect();
        let topk = top_k(score_all(store, &b.center, &hw, case.mask), k);
        Ok((
            case.user,
            recall_at_k(&topk, case.truth),
            ndcg_at_k(&topk, case.truth),
        ))
    };
    let per_user: Vec<(u32, f64, f64)> = if sequential {
        cases.iter().map(eval_one).collect::<Result<_>>()?
    } else {
        cases.par_iter().map(eval_one).collect::<Result<_>>()?
    };
    let n = per_user.len();
    let recall = per_user.iter().map(|r| r.1).sum::<f64>() / n as f64;
    let ndcg = per_user.iter().map(|r| r.2).sum::<f64>() / n as f64;
    Ok(EvalReport {
        k,
        recall,
        ndcg,
        n_users_evaluated: n,
        per_user: Some(per_user),
    })
}

/// Test-split evaluation over every user with a non-empty training history
/// and a non-empty test set.
pub fn evaluate_all(
    store: &ParamStore,
    ds: &Dataset,
    k: usize,
    cfg: &InterestConfig,
    sequential: bool,
) -> Result<EvalReport> {
    let mut cases = Vec::new();
    for user in 0..ds.graph.n_users {
        let order = &ds.graph.train_order[user];
        let truth = &ds.graph.test[user];
        if order.is_empty() || truth.is_empty() {
            continue;
        }
        cases.push(UserEvalCase {
            user: user as u32,
            history: truncated_history(order, cfg.history_limit),
            mask: &ds.graph.train[user],
            truth,
        });
    }
    evaluate_cases(store, &ds.concepts, &cases, k, cfg, sequential)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_shifts_with_gamma() {
        assert_eq!(score(0.0, 12.0), 12.0);
        assert_eq!(score(2.0, 12.0), 10.0);
        // a constant shift never changes the ordering
        let dists = [3.0, 0.5, 7.0];
        let a = top_k(dists.iter().enumerate().map(|(i, &d)| (score(d, 12.0), i as u32)).collect(), 3);
        let b = top_k(dists.iter().enumerate().map(|(i, &d)| (score(d, 20.0), i as u32)).collect(), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let ranked = top_k(vec![(1.0, 7), (1.0, 3), (0.5, 1)], 3);
        assert_eq!(ranked, vec![3, 7, 1]);
    }

    #[test]
    fn recall_fixtures() {
        assert_eq!(recall_at_k(&[1, 2, 3], &[1, 2]), 1.0);
        assert_eq!(recall_at_k(&[4, 5], &[1, 2]), 0.0);
        assert_eq!(recall_at_k(&[1, 9, 2, 8], &[1, 2, 3, 4]), 0.5);
    }

    #[test]
    fn ndcg_fixtures() {
        // all test items at the top
        assert!((ndcg_at_k(&[1, 2, 9, 8], &[1, 2]) - 1.0).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&[7, 8], &[1, 2]), 0.0);
        // K=2, single test item at position 2
        let got = ndcg_at_k(&[9, 1], &[1]);
        let want = (1.0 / 3f64.log2()) / (1.0 / 2f64.log2());
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn metrics_monotone_in_k() {
        let ranking = [5u32, 1, 9, 2, 7, 3];
        let truth = [1u32, 2, 3];
        let mut prev_r = 0.0;
        for k in 1..=ranking.len() {
            let r = recall_at_k(&ranking[..k], &truth);
            assert!(r >= prev_r - 1e-12);
            prev_r = r;
        }
        // with the ideal DCG truncated at min(K, |test|), ndcg is monotone
        // once K covers the test set
        let mut prev_n = ndcg_at_k(&ranking[..truth.len()], &truth);
        for k in truth.len()..=ranking.len() {
            let n = ndcg_at_k(&ranking[..k], &truth);
            assert!(n >= prev_n - 1e-12);
            prev_n = n;
        }
    }

    #[test]
    fn ndcg_is_one_iff_test_items_fill_the_top() {
        let truth = [2u32, 4, 6];
        assert!((ndcg_at_k(&[2, 4, 6, 1, 3], &truth) - 1.0).abs() < 1e-12);
        assert!(ndcg_at_k(&[2, 1, 4, 6, 3], &truth) < 1.0);
    }
}
