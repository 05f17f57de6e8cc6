//! Finite-difference verification of every stage loss, both intersection
//! variants, both loss forms, and the interest-box ablations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use inbox_core::data::Dataset;
use inbox_core::model::{init_params, ParamStore, Shapes};
use inbox_core::synth::{generate_synthetic, SynthConfig};
use inbox_core::training::batch::{
    assemble_intersection_batch, assemble_pretrain_batch, assemble_recommend_group,
};
use inbox_core::training::gradcheck::{finite_difference_check, GradCheckConfig};
use inbox_core::training::{grad_step, StageBatch, TrainConfig};

fn toy_dataset() -> Dataset {
    let cfg = SynthConfig {
        n_concepts: 5,
        n_items: 24,
        n_users: 6,
        d_true: 3,
        concepts_per_interest: 2,
        items_per_user: 0,
        noise: 0.0,
        cold_fraction: 0.0,
        seed: 42,
        emit_trt: true,
    };
    generate_synthetic(&cfg).unwrap().0
}

fn toy_store(ds: &Dataset, seed: u64) -> ParamStore {
    init_params(
        Shapes {
            d: 4,
            hidden_width: 4,
            hidden_layers: 1,
            n_items: ds.graph.n_items,
            n_tags: ds.triplets.n_tags,
            n_relations_aug: ds.triplets.n_relations_aug,
            n_users: ds.graph.n_users,
        },
        2.0,
        None,
        seed,
    )
    .unwrap()
}

fn toy_train_config(ds: &Dataset) -> TrainConfig {
    let _ = ds;
    TrainConfig {
        dim: 4,
        margin: 2.0,
        batch_size: 6,
        n_negatives: 3,
        ..TrainConfig::default()
    }
}

fn pretrain_batch(ds: &Dataset, cfg: &TrainConfig, seed: u64) -> StageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    assemble_pretrain_batch(ds, cfg, &mut rng).unwrap()
}

fn intersection_batch(ds: &Dataset, cfg: &TrainConfig, seed: u64) -> StageBatch {
    let items: Vec<u32> = (0..ds.graph.n_items as u32)
        .filter(|&i| !ds.concepts.concepts_of(i).unwrap().is_empty())
        .take(cfg.batch_size)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    assemble_intersection_batch(ds, &items, cfg, &mut rng).unwrap()
}

fn recommend_batch(ds: &Dataset, cfg: &TrainConfig, seed: u64) -> StageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    for user in 0..3u32 {
        let history = &ds.graph.train_order[user as usize];
        if history.is_empty() {
            continue;
        }
        let positives: Vec<u32> = history.iter().copied().take(2).collect();
        groups.push(
            assemble_recommend_group(ds, user, history, history.len(), &positives, cfg, &mut rng)
                .unwrap(),
        );
    }
    StageBatch::Recommend(groups)
}

fn check(ds: &Dataset, cfg: &TrainConfig, batch: &StageBatch, label: &str) {
    let store = toy_store(ds, 7);
    let gc = GradCheckConfig {
        n_params: 32,
        h: 1e-4,
        tol: 1e-3,
        seed: 1,
    };
    let report = finite_difference_check(&store, &ds.concepts, batch, cfg, &gc)
        .unwrap_or_else(|e| panic!("{label}: {e}"));
    assert!(
        report.passed(),
        "{label}: {} failures, first {:?}, max rel err {}",
        report.failures.len(),
        report.failures.first(),
        report.max_rel_err
    );
    assert!(report.checked >= 8, "{label}: only {} params checked", report.checked);
}

#[test]
fn stage1_gradients_both_loss_forms() {
    let ds = toy_dataset();
    let mut cfg = toy_train_config(&ds);
    for literal in [false, true] {
        cfg.literal_loss = literal;
        for seed in 0..4 {
            let batch = pretrain_batch(&ds, &cfg, seed);
            check(&ds, &cfg, &batch, &format!("stage1 literal={literal} seed={seed}"));
        }
    }
}

#[test]
fn stage2_gradients_both_variants_and_forms() {
    let ds = toy_dataset();
    let mut cfg = toy_train_config(&ds);
    for maxmin in [false, true] {
        for literal in [false, true] {
            cfg.maxmin = maxmin;
            cfg.literal_loss = literal;
            let batch = intersection_batch(&ds, &cfg, 9);
            check(
                &ds,
                &cfg,
                &batch,
                &format!("stage2 maxmin={maxmin} literal={literal}"),
            );
        }
    }
}

#[test]
fn stage3_gradients_all_configurations() {
    let ds = toy_dataset();
    let mut cfg = toy_train_config(&ds);
    for maxmin in [false, true] {
        for literal in [false, true] {
            for (no_user, only_user) in [(false, false), (true, false), (false, true)] {
                cfg.maxmin = maxmin;
                cfg.literal_loss = literal;
                cfg.no_user_bias = no_user;
                cfg.only_user_bias = only_user;
                let batch = recommend_batch(&ds, &cfg, 13);
                check(
                    &ds,
                    &cfg,
                    &batch,
                    &format!("stage3 maxmin={maxmin} literal={literal} no_user={no_user} only_user={only_user}"),
                );
            }
        }
    }
}

#[test]
fn stage3_gradients_with_deeper_networks() {
    let ds = toy_dataset();
    let mut cfg = toy_train_config(&ds);
    cfg.hidden_layers = 2;
    cfg.hidden_width = Some(5);
    let store = init_params(
        Shapes {
            d: 4,
            hidden_width: 5,
            hidden_layers: 2,
            n_items: ds.graph.n_items,
            n_tags: ds.triplets.n_tags,
            n_relations_aug: ds.triplets.n_relations_aug,
            n_users: ds.graph.n_users,
        },
        2.0,
        None,
        3,
    )
    .unwrap();
    let batch = recommend_batch(&ds, &cfg, 21);
    let gc = GradCheckConfig::default();
    let report = finite_difference_check(&store, &ds.concepts, &batch, &cfg, &gc).unwrap();
    assert!(report.passed(), "deep nets: {:?}", report.failures.first());
}

#[test]
fn grad_step_is_deterministic_and_local() {
    let ds = toy_dataset();
    let cfg = toy_train_config(&ds);
    let store = toy_store(&ds, 7);
    let batch = pretrain_batch(&ds, &cfg, 0);
    let (l1, t1) = grad_step(&store, &ds.concepts, &batch, &cfg).unwrap();
    let (l2, t2) = grad_step(&store, &ds.concepts, &batch, &cfg).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(t1.data, t2.data);

    // stage 1 never touches user vectors or the intersection networks
    let layout = &store.layout;
    for u in 0..ds.graph.n_users as u32 {
        for idx in layout.user(u) {
            assert_eq!(t1.data[idx], 0.0);
        }
    }
    for idx in layout.attn_net_range() {
        assert_eq!(t1.data[idx], 0.0);
    }
}
