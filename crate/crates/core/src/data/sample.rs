//! Negative sampling, sample weights, and the per-step triplet-type sampler.

use rand::Rng;

use crate::error::{Error, Result};

use super::{ConceptIndex, InteractionGraph, TripletClass, TypedTripletStore};

/// How many rejection retries a single draw gets before the unfiltered draw
/// is accepted.
const RETRY_BUDGET: usize = 64;

/// What is being corrupted, and against which positive context to filter.
#[derive(Debug, Clone, Copy)]
pub enum NegKind {
    /// Stage 1, IRI: random item heads not answering `(?, r, tail_item)`.
    IriHead { rel: u32, tail: u32 },
    /// Stage 1, TRT: random tag heads not answering `(?, r, tail_tag)`.
    TrtHead { rel: u32, tail: u32 },
    /// Stage 1, IRT: corrupt either the item or the tag, a fair coin per draw.
    IrtItemOrTag { item: u32, rel: u32, tag: u32 },
    /// Stage 2: items not covered by any of the item's concepts.
    ItemNotInConcepts { item: u32 },
    /// Stage 3: items outside the user's training interactions.
    ItemNotInteracted { user: u32 },
}

/// A drawn negative entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegEntity {
    Item(u32),
    Tag(u32),
}

/// Borrowed dataset views the sampler filters against.
#[derive(Clone, Copy)]
pub struct SamplerCtx<'a> {
    pub store: &'a TypedTripletStore,
    pub concepts: &'a ConceptIndex,
    pub graph: &'a InteractionGraph,
}

fn draw_filtered(
    range: usize,
    excluded: &dyn Fn(u32) -> bool,
    rng: &mut impl Rng,
    what: &str,
) -> Result<u32> {
    if range == 0 {
        return Err(Error::Sampling(format!("{what}: empty admissible range")));
    }
    let mut candidate = 0u32;
    for _ in 0..=RETRY_BUDGET {
        candidate = rng.random_range(0..range as u32);
        if !excluded(candidate) {
            return Ok(candidate);
        }
    }
    // budget exhausted: accept the unfiltered draw
    Ok(candidate)
}

/// Draw `n` negatives for the given context with rejection filtering against
/// the true-positive set.
pub fn sample_negatives(
    ctx: SamplerCtx<'_>,
    kind: NegKind,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<NegEntity>> {
    if n == 0 {
        return Err(Error::Contract("sample_negatives: n must be >= 1".into()));
    }
    let n_items = ctx.store.n_items;
    let n_tags = ctx.store.n_tags;
    let mut out = Vec::with_capacity(n);
    match kind {
        NegKind::IriHead { rel, tail } => {
            let truth = ctx.store.iri_heads.get(&(rel, tail));
            let excluded = |c: u32| truth.is_some_and(|v| v.binary_search(&c).is_ok());
            for _ in 0..n {
                out.push(NegEntity::Item(draw_filtered(n_items, &excluded, rng, "iri head")?));
            }
        }
        NegKind::TrtHead { rel, tail } => {
            let truth = ctx.store.trt_heads.get(&(rel, tail));
            let excluded = |c: u32| truth.is_some_and(|v| v.binary_search(&c).is_ok());
            for _ in 0..n {
                out.push(NegEntity::Tag(draw_filtered(n_tags, &excluded, rng, "trt head")?));
            }
        }
        NegKind::IrtItemOrTag { item, rel, tag } => {
            let item_truth = ctx.store.irt_heads.get(&(rel, tag));
            let tag_truth = ctx.store.irt_tags.get(&(item, rel));
            let item_excluded = |c: u32| item_truth.is_some_and(|v| v.binary_search(&c).is_ok());
            let tag_excluded = |c: u32| tag_truth.is_some_and(|v| v.binary_search(&c).is_ok());
            for _ in 0..n {
                if rng.random_bool(0.5) {
                    out.push(NegEntity::Item(draw_filtered(
                        n_items,
                        &item_excluded,
                        rng,
                        "irt item",
                    )?));
                } else {
                    out.push(NegEntity::Tag(draw_filtered(n_tags, &tag_excluded, rng, "irt tag")?));
                }
            }
        }
        NegKind::ItemNotInConcepts { item } => {
            let mut covered: Vec<u32> = Vec::new();
            for &c in ctx.concepts.concepts_of(item)? {
                covered.extend_from_slice(ctx.concepts.items_of(c));
            }
            covered.sort_unstable();
            covered.dedup();
            let excluded = |c: u32| covered.binary_search(&c).is_ok();
            for _ in 0..n {
                out.push(NegEntity::Item(draw_filtered(
                    n_items,
                    &excluded,
                    rng,
                    "stage-2 item",
                )?));
            }
        }
        NegKind::ItemNotInteracted { user } => {
            let train = ctx
                .graph
                .train
                .get(user as usize)
                .ok_or_else(|| Error::Range(format!("user {user} outside interaction graph")))?;
            let excluded = |c: u32| train.binary_search(&c).is_ok();
            for _ in 0..n {
                out.push(NegEntity::Item(draw_filtered(
                    n_items,
                    &excluded,
                    rng,
                    "stage-3 item",
                )?));
            }
        }
    }
    Ok(out)
}

/// Context for [`sample_weight`].
#[derive(Debug, Clone, Copy)]
pub enum WeightCtx {
    /// Stage 1: number of true heads answering the `(?, r, t)` query.
    Answers(usize),
    /// Stage 2: number of concepts attached to the item.
    Concepts(usize),
    /// Stage 3: interaction-history size, weighted as `1 / (m + alpha)`.
    History { m: usize, alpha: f64 },
}

/// Per-sample loss weight; stage 1 uses `1/answers`, stage 2 `1/(n+1)`,
/// stage 3 `1/(m+alpha)`.
pub fn sample_weight(ctx: WeightCtx) -> Result<f64> {
    match ctx {
        WeightCtx::Answers(0) => Err(Error::Contract("stage-1 weight: zero answers".into())),
        WeightCtx::Answers(n) => Ok(1.0 / n as f64),
        WeightCtx::Concepts(0) => Err(Error::Contract("stage-2 weight: zero concepts".into())),
        WeightCtx::Concepts(n) => Ok(1.0 / (n as f64 + 1.0)),
        WeightCtx::History { m: 0, .. } => {
            Err(Error::Contract("stage-3 weight: empty history".into()))
        }
        WeightCtx::History { m, alpha } => Ok(1.0 / (m as f64 + alpha)),
    }
}

/// Draw a triplet class with probability proportional to class counts.
pub fn triplet_type_sampler(store: &TypedTripletStore, rng: &mut impl Rng) -> Result<TripletClass> {
    let counts = [store.iri.len(), store.trt.len(), store.irt.len()];
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Contract("triplet_type_sampler: empty store".into()));
    }
    let mut x = rng.random_range(0..total);
    for (class, &c) in [TripletClass::Iri, TripletClass::Trt, TripletClass::Irt]
        .iter()
        .zip(&counts)
    {
        if x < c {
            return Ok(*class);
        }
        x -= c;
    }
    unreachable!()
}
