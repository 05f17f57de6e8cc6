//! Batch structures consumed by `grad_step`, plus their assembly from the
//! dataset samplers. Assembly is separated from the gradient computation so
//! a batch can be frozen and replayed (determinism tests, gradient checks).

use rand::Rng;

use crate::data::{
    sample_negatives, sample_weight, triplet_type_sampler, Dataset, NegEntity, NegKind,
    SamplerCtx, TripletClass, WeightCtx,
};
use crate::error::{Error, Result};

use super::TrainConfig;

/// One stage-1 positive triplet with its weight and drawn negatives.
/// For IRI rows `head`/`tail` are item ids; for TRT rows tag indexes; for IRT
/// rows `head` is an item and `tail` a tag index.
#[derive(Debug, Clone)]
pub struct PretrainSample {
    pub class: TripletClass,
    pub head: u32,
    pub rel: u32,
    pub tail: u32,
    pub weight: f64,
    pub negatives: Vec<NegEntity>,
}

/// One stage-2 item positioned against its concept-intersection box.
#[derive(Debug, Clone)]
pub struct IntersectionSample {
    pub item: u32,
    pub weight: f64,
    pub neg_items: Vec<u32>,
}

/// A stage-3 positive item with its drawn negatives.
#[derive(Debug, Clone)]
pub struct PositiveSample {
    pub item: u32,
    pub neg_items: Vec<u32>,
}

/// Stage-3 samples grouped per user so the interest box is built once per
/// group. `history` is the truncated box history; `weight` is 1/(m + alpha)
/// over the user's full stage-3 positive count.
#[derive(Debug, Clone)]
pub struct RecommendGroup {
    pub user: u32,
    pub history: Vec<u32>,
    pub weight: f64,
    pub positives: Vec<PositiveSample>,
}

#[derive(Debug, Clone)]
pub enum StageBatch {
    Pretrain(Vec<PretrainSample>),
    Intersection(Vec<IntersectionSample>),
    Recommend(Vec<RecommendGroup>),
}

impl StageBatch {
    /// Number of margin-loss terms in the batch.
    pub fn n_atoms(&self) -> usize {
        match self {
            StageBatch::Pretrain(s) => s.len(),
            StageBatch::Intersection(s) => s.len(),
            StageBatch::Recommend(groups) => groups.iter().map(|g| g.positives.len()).sum(),
        }
    }
}

/// Draw one stage-1 batch: a triplet class proportional to class counts, then
/// uniform positives of that class with weights and filtered negatives.
pub fn assemble_pretrain_batch(
    ds: &Dataset,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<StageBatch> {
    let store = &ds.triplets;
    let ctx = SamplerCtx {
        store,
        concepts: &ds.concepts,
        graph: &ds.graph,
    };
    let class = if cfg.only_irt {
        if store.irt.is_empty() {
            return Err(Error::Contract("only-irt: the store has no IRT triplets".into()));
        }
        TripletClass::Irt
    } else {
        triplet_type_sampler(store, rng)?
    };
    let rows = match class {
        TripletClass::Iri => &store.iri,
        TripletClass::Trt => &store.trt,
        TripletClass::Irt => &store.irt,
    };
    let mut samples = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let (head, rel, tail) = rows[rng.random_range(0..rows.len())];
        let weight = sample_weight(WeightCtx::Answers(store.answer_count(class, rel, tail)))?;
        let kind = match class {
            TripletClass::Iri => NegKind::IriHead { rel, tail },
            TripletClass::Trt => NegKind::TrtHead { rel, tail },
            TripletClass::Irt => NegKind::IrtItemOrTag {
                item: head,
                rel,
                tag: tail,
            },
        };
        let negatives = sample_negatives(ctx, kind, cfg.n_negatives, rng)?;
        samples.push(PretrainSample {
            class,
            head,
            rel,
            tail,
            weight,
            negatives,
        });
    }
    Ok(StageBatch::Pretrain(samples))
}

/// Build one stage-2 batch from a slice of item ids (all with >= 1 concept).
pub fn assemble_intersection_batch(
    ds: &Dataset,
    items: &[u32],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<StageBatch> {
    let ctx = SamplerCtx {
        store: &ds.triplets,
        concepts: &ds.concepts,
        graph: &ds.graph,
    };
    let mut samples = Vec::with_capacity(items.len());
    for &item in items {
        let n_concepts = ds.concepts.concepts_of(item)?.len();
        let weight = sample_weight(WeightCtx::Concepts(n_concepts))?;
        let negatives = sample_negatives(ctx, NegKind::ItemNotInConcepts { item }, cfg.n_negatives, rng)?;
        let neg_items = negatives
            .into_iter()
            .map(|n| match n {
                NegEntity::Item(i) => i,
                NegEntity::Tag(_) => unreachable!("stage 2 draws items only"),
            })
            .collect();
        samples.push(IntersectionSample {
            item,
            weight,
            neg_items,
        });
    }
    Ok(StageBatch::Intersection(samples))
}

/// Build one stage-3 group for a user from a slice of their positives.
pub fn assemble_recommend_group(
    ds: &Dataset,
    user: u32,
    history: &[u32],
    full_history_len: usize,
    positive_items: &[u32],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<RecommendGroup> {
    let ctx = SamplerCtx {
        store: &ds.triplets,
        concepts: &ds.concepts,
        graph: &ds.graph,
    };
    let weight = sample_weight(WeightCtx::History {
        m: full_history_len,
        alpha: cfg.alpha,
    })?;
    let mut positives = Vec::with_capacity(positive_items.len());
    for &item in positive_items {
        let negatives = sample_negatives(ctx, NegKind::ItemNotInteracted { user }, cfg.n_negatives, rng)?;
        let neg_items = negatives
            .into_iter()
            .map(|n| match n {
                NegEntity::Item(i) => i,
                NegEntity::Tag(_) => unreachable!("stage 3 draws items only"),
            })
            .collect();
        positives.push(PositiveSample { item, neg_items });
    }
    Ok(RecommendGroup {
        user,
        history: history.to_vec(),
        weight,
        positives,
    })
}
