//! Reverse-mode gradients for the three stage losses.
//!
//! Every operation on the loss path is differentiated by hand using the
//! geometry module's subgradient conventions. `grad_step` returns the batch
//! mean of the margin-loss terms together with a tape holding the exact
//! gradient of that mean with respect to every parameter touched.

use crate::data::{ConceptIndex, NegEntity, TripletClass};
use crate::error::{Error, Result};
use crate::geometry::{act, act_prime, kernel, sgn, BoxEmbedding};
use crate::model::intersect::{
    attention_backward, attention_forward, maxmin_backward, maxmin_forward, user_bias_backward,
    user_bias_forward, AttnCache, BoxGrad, MaxMinCache, UserBiasCache,
};
use crate::model::{IntersectKind, ParamStore, UserBiasMode};

use super::{margin_loss_backward, GradTape, StageBatch, TrainConfig};
use super::batch::{IntersectionSample, PretrainSample, RecommendGroup};

/// Computes the batch loss and its exact gradient tape. The batch must have
/// been assembled for the matching stage; sampling happens at assembly time,
/// so repeated calls with the same inputs are bit-identical.
pub fn grad_step(
    store: &ParamStore,
    concepts: &ConceptIndex,
    batch: &StageBatch,
    cfg: &TrainConfig,
) -> Result<(f64, GradTape)> {
    let n_atoms = batch.n_atoms();
    if n_atoms == 0 {
        return Err(Error::Contract("grad_step: empty batch".into()));
    }
    let mut tape = GradTape::zeros(store.data.len());
    let inv = 1.0 / n_atoms as f64;
    let mut loss = 0.0;

    match batch {
        StageBatch::Pretrain(samples) => {
            for s in samples {
                loss += pretrain_sample(store, s, cfg, inv, &mut tape)?;
            }
        }
        StageBatch::Intersection(samples) => {
            for s in samples {
                loss += intersection_sample(store, concepts, s, cfg, inv, &mut tape)?;
            }
        }
        StageBatch::Recommend(groups) => {
            for g in groups {
                loss += recommend_group(store, concepts, g, cfg, inv, &mut tape)?;
            }
        }
    }

    if !loss.is_finite() || !tape.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {loss}")));
    }
    Ok((loss, tape))
}

fn check_weight(w: f64) -> Result<()> {
    if w > 0.0 && w.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("sample weight {w} must be positive")))
    }
}

fn add_into(tape: &mut [f64], range: std::ops::Range<usize>, src: &[f64]) {
    for (slot, &g) in tape[range].iter_mut().zip(src) {
        *slot += g;
    }
}

/// Chains a concept-box gradient into the tag and relation tables. The
/// concept box is `(tag_center + rel_center, act(tag_offset) + rel_offset)`.
fn scatter_concept_grad(
    store: &ParamStore,
    rel: u32,
    tag: u32,
    d_center: &[f64],
    d_offset_raw: &[f64],
    tape: &mut [f64],
) {
    let layout = &store.layout;
    add_into(tape, layout.tag_center(tag), d_center);
    add_into(tape, layout.rel_center(rel), d_center);
    add_into(tape, layout.rel_offset(rel), d_offset_raw);
    let to = layout.tag_offset(tag);
    let to_start = to.start;
    for (k, &g) in d_offset_raw.iter().enumerate() {
        tape[to_start + k] += g * act_prime(store.data[to_start + k] as f64);
    }
}

fn pretrain_sample(
    store: &ParamStore,
    s: &PretrainSample,
    cfg: &TrainConfig,
    inv: f64,
    tape: &mut GradTape,
) -> Result<f64> {
    check_weight(s.weight)?;
    match s.class {
        TripletClass::Iri => pretrain_iri(store, s, cfg, inv, tape),
        TripletClass::Trt => pretrain_trt(store, s, cfg, inv, tape),
        TripletClass::Irt => pretrain_irt(store, s, cfg, inv, tape),
    }
}

fn pretrain_iri(
    store: &ParamStore,
    s: &PretrainSample,
    cfg: &TrainConfig,
    inv: f64,
    tape: &mut GradTape,
) -> Result<f64> {
    let d = store.dim();
    let layout = &store.layout;
    let v_tail = store.read(layout.item(s.tail));
    let c_rel = store.read(layout.rel_center(s.rel));
    let pred: Vec<f64> = v_tail.iter().zip(&c_rel).map(|(&a, &b)| a + b).collect();

    let v_head = store.read(layout.item(s.head));
    let d_pos = kernel::l1(&v_head, &pred);
    let neg_ids: Vec<u32> = s
        .negatives
        .iter()
        .map(|n| match n {
            NegEntity::Item(i) => Ok(*i),
            NegEntity::Tag(_) => Err(Error::Contract("IRI negatives must be items".into())),
        })
        .collect::<Result<_>>()?;
    let neg_points: Vec<Vec<f64>> = neg_ids.iter().map(|&i| store.read(layout.item(i))).collect();
    let d_negs: Vec<f64> = neg_points.iter().map(|p| kernel::l1(p, &pred)).collect();

    let (loss, gp, gn) = margin_loss_backward(d_pos, &d_negs, s.weight, cfg.margin, cfg.literal_loss);

    let mut d_pred = vec![0.0; d];
    let mut d_head = vec![0.0; d];
    let fp = gp * inv;
    for k in 0..d {
        let sg = sgn(v_head[k] - pred[k]) * fp;
        d_head[k] += sg;
        d_pred[k] -= sg;
    }
    add_into(&mut tape.data, layout.item(s.head), &d_head);
    for (j, p) in neg_points.iter().enumerate() {
        let fj = gn[j] * inv;
        let mut d_neg = vec![0.0; d];
        for k in 0..d {
            let sg = sgn(p[k] - pred[k]) * fj;
            d_neg[k] += sg;
            d_pred[k] -= sg;
        }
        add_into(&mut tape.data, layout.item(neg_ids[j]), &d_neg);
    }
    add_into(&mut tape.data, layout.item(s.tail), &d_pred);
    add_into(&mut tape.data, layout.rel_center(s.rel), &d_pred);
    Ok(loss * inv)
}

fn pretrain_trt(
    store: &ParamStore,
    s: &PretrainSample,
    cfg: &TrainConfig,
    inv: f64,
    tape: &mut GradTape,
) -> Result<f64> {
    let d = store.dim();
    let layout = &store.layout;
    let tc_tail = store.read(layout.tag_center(s.tail));
    let to_tail = store.read(layout.tag_offset(s.tail));
    let rc = store.read(layout.rel_center(s.rel));
    let ro = store.read(layout.rel_offset(s.rel));
    let c_pred: Vec<f64> = tc_tail.iter().zip(&rc).map(|(&a, &b)| a + b).collect();
    let o_pred: Vec<f64> = to_tail.iter().zip(&ro).map(|(&a, &b)| act(a) + b).collect();

    let dist = |tag: u32| -> (Vec<f64>, Vec<f64>, f64) {
        let tc = store.read(layout.tag_center(tag));
        let to = store.read(layout.tag_offset(tag));
        let d_val = kernel::dist_bb(&tc, &to, &c_pred, &o_pred);
        (tc, to, d_val)
    };

    let (tc_head, to_head, d_pos) = dist(s.head);
    let neg_ids: Vec<u32> = s
        .negatives
        .iter()
        .map(|n| match n {
            NegEntity::Tag(t) => Ok(*t),
            NegEntity::Item(_) => Err(Error::Contract("TRT negatives must be tags".into())),
        })
        .collect::<Result<_>>()?;
    let neg_boxes: Vec<(Vec<f64>, Vec<f64>, f64)> = neg_ids.iter().map(|&t| dist(t)).collect();
    let d_negs: Vec<f64> = neg_boxes.iter().map(|(_, _, d)| *d).collect();

    let (loss, gp, gn) = margin_loss_backward(d_pos, &d_negs, s.weight, cfg.margin, cfg.literal_loss);

    let mut d_cpred = vec![0.0; d];
    let mut d_opred = vec![0.0; d];
    let term = |tag: u32, tc: &[f64], to: &[f64], factor: f64, tape: &mut GradTape,
                    d_cpred: &mut [f64], d_opred: &mut [f64]| {
        let mut d_tc = vec![0.0; d];
        let mut d_to = vec![0.0; d];
        for k in 0..d {
            let sc = sgn(tc[k] - c_pred[k]) * factor;
            d_tc[k] += sc;
            d_cpred[k] -= sc;
            let so = sgn(act(to[k]) - act(o_pred[k])) * factor;
            d_to[k] += so * act_prime(to[k]);
            d_opred[k] -= so * act_prime(o_pred[k]);
        }
        add_into(&mut tape.data, layout.tag_center(tag), &d_tc);
        add_into(&mut tape.data, layout.tag_offset(tag), &d_to);
    };
    term(s.head, &tc_head, &to_head, gp * inv, tape, &mut d_cpred, &mut d_opred);
    for (j, (tc, to, _)) in neg_boxes.iter().enumerate() {
        term(neg_ids[j], tc, to, gn[j] * inv, tape, &mut d_cpred, &mut d_opred);
    }

    add_into(&mut tape.data, layout.rel_center(s.rel), &d_cpred);
    add_into(&mut tape.data, layout.rel_offset(s.rel), &d_opred);
    let mut d_totail = vec![0.0; d];
    for k in 0..d {
        d_totail[k] = d_opred[k] * act_prime(to_tail[k]);
    }
    add_into(&mut tape.data, layout.tag_center(s.tail), &d_cpred);
    add_into(&mut tape.data, layout.tag_offset(s.tail), &d_totail);
    Ok(loss * inv)
}

fn pretrain_irt(
    store: &ParamStore,
    s: &PretrainSample,
    cfg: &TrainConfig,
    inv: f64,
    tape: &mut GradTape,
) -> Result<f64> {
    let d = store.dim();
    let layout = &store.layout;
    let cbox = store.concept_box(s.rel, s.tail);
    let hw: Vec<f64> = cbox.offset_raw.iter().map(|&o| act(o)).collect();

    let v_item = store.read(layout.item(s.head));
    let d_pos = kernel::dist_pb(&v_item, &cbox.center, &hw);

    // negative distances; tag negatives rebuild the concept box
    struct TagNeg {
        tag: u32,
        cbox: BoxEmbedding,
        hw: Vec<f64>,
    }
    let mut d_negs = Vec::with_capacity(s.negatives.len());
    let mut tag_negs: Vec<Option<TagNeg>> = Vec::with_capacity(s.negatives.len());
    for n in &s.negatives {
        match *n {
            NegEntity::Item(i) => {
                let v = store.read(layout.item(i));
                d_negs.push(kernel::dist_pb(&v, &cbox.center, &hw));
                tag_negs.push(None);
            }
            NegEntity::Tag(t) => {
                let nb = store.concept_box(s.rel, t);
                let nhw: Vec<f64> = nb.offset_raw.iter().map(|&o| act(o)).collect();
                d_negs.push(kernel::dist_pb(&v_item, &nb.center, &nhw));
                tag_negs.push(Some(TagNeg {
                    tag: t,
                    cbox: nb,
                    hw: nhw,
                }));
            }
        }
    }

    let (loss, gp, gn) = margin_loss_backward(d_pos, &d_negs, s.weight, cfg.margin, cfg.literal_loss);

    let mut d_vitem = vec![0.0; d];
    let mut d_cbox = vec![0.0; d];
    let mut d_hw = vec![0.0; d];
    kernel::dist_pb_backward(&v_item, &cbox.center, &hw, gp * inv, &mut d_vitem, &mut d_cbox, &mut d_hw);

    for (j, n) in s.negatives.iter().enumerate() {
        let fj = gn[j] * inv;
        match (*n, &tag_negs[j]) {
            (NegEntity::Item(i), _) => {
                let v = store.read(layout.item(i));
                let mut d_v = vec![0.0; d];
                kernel::dist_pb_backward(&v, &cbox.center, &hw, fj, &mut d_v, &mut d_cbox, &mut d_hw);
                add_into(&mut tape.data, layout.item(i), &d_v);
            }
            (NegEntity::Tag(_), Some(tn)) => {
                let mut d_c = vec![0.0; d];
                let mut d_w = vec![0.0; d];
                kernel::dist_pb_backward(&v_item, &tn.cbox.center, &tn.hw, fj, &mut d_vitem, &mut d_c, &mut d_w);
                let d_oraw: Vec<f64> = d_w
                    .iter()
                    .zip(&tn.cbox.offset_raw)
                    .map(|(&g, &o)| g * act_prime(o))
                    .collect();
                scatter_concept_grad(store, s.rel, tn.tag, &d_c, &d_oraw, &mut tape.data);
            }
            _ => unreachable!(),
        }
    }

    let d_oraw: Vec<f64> = d_hw
        .iter()
        .zip(&cbox.offset_raw)
        .map(|(&g, &o)| g * act_prime(o))
        .collect();
    scatter_concept_grad(store, s.rel, s.tail, &d_cbox, &d_oraw, &mut tape.data);
    add_into(&mut tape.data, layout.item(s.head), &d_vitem);
    Ok(loss * inv)
}

/// Forward state of one history item's interest box inside a stage-3 group.
enum ItemBoxFwd {
    /// No concepts: a zero-width box at the item's point.
    Degenerate { item: u32 },
    Composed {
        concept_ids: Vec<(u32, u32)>,
        boxes: Vec<BoxEmbedding>,
        item_part: Option<(BoxEmbedding, ItemIntersectCache)>,
        user_part: Option<(BoxEmbedding, UserBiasCache)>,
    },
}

enum ItemIntersectCache {
    Attention(AttnCache),
    MaxMin(MaxMinCache),
}

fn concept_boxes_of(store: &ParamStore, ids: &[(u32, u32)]) -> Vec<BoxEmbedding> {
    ids.iter().map(|&(r, t)| store.concept_box(r, t)).collect()
}

fn intersection_sample(
    store: &ParamStore,
    concepts: &ConceptIndex,
    s: &IntersectionSample,
    cfg: &TrainConfig,
    inv: f64,
    tape: &mut GradTape,
) -> Result<f64> {
    check_weight(s.weight)?;
    let d = store.dim();
    let layout = &store.layout;
    let concept_ids = concepts.concepts_of(s.item)?;
    if concept_ids.is_empty() {
        return Err(Error::Contract(format!(
            "stage-2 sample for item {} with no concepts",
            s.item
        )));
    }
    let boxes = concept_boxes_of(store, concept_ids);
    let (ibox, cache) = match cfg.interest_config().intersect {
        IntersectKind::Attention => {
            let (b, c) = attention_forward(store, &boxes);
            (b, ItemIntersectCache::Attention(c))
        }
        IntersectKind::MaxMin => {
            let (b, c) = maxmin_forward(&boxes);
            (b, ItemIntersectCache::MaxMin(c))
        }
    };
    let hw: Vec<f64> = ibox.offset_raw.iter().map(|&o| act(o)).collect();

    let v_item = store.read(layout.item(s.item));
    let d_pos = kernel::dist_pb(&v_item, &ibox.center, &hw);
    let neg_points: Vec<Vec<f64>> = s.neg_items.iter().map(|&i| store.read(layout.item(i))).collect();
    let d_negs: Vec<f64> = neg_points
        .iter()
        .map(|p| kernel::dist_pb(p, &ibox.center, &hw))
        .collect();

    let (loss, gp, gn) = margin_loss_backward(d_pos, &d_negs, s.weight, cfg.margin, cfg.literal_loss);

    let mut d_vitem = vec![0.0; d];
    let mut d_center = vec![0.0; d];
    let mut d_hw = vec![0.0; d];
    kernel::dist_pb_backward(&v_item, &ibox.center, &hw, gp * inv, &mut d_vitem, &mut d_center, &mut d_hw);
    for (j, p) in neg_points.iter().enumerate() {
        let mut d_v = vec![0.0; d];
        kernel::dist_pb_backward(p, &ibox.center, &hw, gn[j] * inv, &mut d_v, &mut d_center, &mut d_hw);
        add_into(&mut tape.data, layout.item(s.neg_items[j]), &d_v);
    }
    add_into(&mut tape.data, layout.item(s.item), &d_vitem);

    let d_halfwidth: Vec<f64> = d_hw
        .iter()
        .zip(&ibox.offset_raw)
        .map(|(&g, &o)| g * act_prime(o))
        .collect();
    let box_grads = match &cache {
        ItemIntersectCache::Attention(c) => {
            attention_backward(store, &boxes, c, &d_center, &d_halfwidth, &mut tape.data)
        }
        ItemIntersectCache::MaxMin(c) => maxmin_backward(&boxes, c, &d_center, &d_halfwidth),
    };
    for (bg, &(rel, tag)) in box_grads.iter().zip(concept_ids) {
        scatter_concept_grad(store, rel, tag, &bg.d_center, &bg.d_offset_raw, &mut tape.data);
    }
    Ok(loss * inv)
}

fn recommend_group(
    store: &ParamStore,
    concepts: &ConceptIndex,
    g: &RecommendGroup,
    cfg: &TrainConfig,
    inv: f64,
    tape: &mut GradTape,
) -> Result<f64> {
    check_weight(g.weight)?;
    if g.history.is_empty() {
        return Err(Error::Contract(format!("user {} has an empty history", g.user)));
    }
    let d = store.dim();
    let layout = &store.layout;
    let icfg = cfg.interest_config();
    let user_vec = store.user_vec(g.user);

    // forward: one interest box per history item, then the mean
    let mut fwd = Vec::with_capacity(g.history.len());
    let mut center_sum = vec![0.0; d];
    let mut width_sum = vec![0.0; d];
    for &item in &g.history {
        let concept_ids = concepts.concepts_of(item)?.to_vec();
        if concept_ids.is_empty() {
            let v = store.read(layout.item(item));
            for k in 0..d {
                center_sum[k] += v[k];
            }
            fwd.push(ItemBoxFwd::Degenerate { item });
            continue;
        }
        let boxes = concept_boxes_of(store, &concept_ids);
        let item_part = match icfg.user_mode {
            UserBiasMode::UserOnly => None,
            _ => Some(match icfg.intersect {
                IntersectKind::Attention => {
                    let (b, c) = attention_forward(store, &boxes);
                    (b, ItemIntersectCache::Attention(c))
                }
                IntersectKind::MaxMin => {
                    let (b, c) = maxmin_forward(&boxes);
                    (b, ItemIntersectCache::MaxMin(c))
                }
            }),
        };
        let user_part = match icfg.user_mode {
            UserBiasMode::ItemOnly => None,
            _ => Some(user_bias_forward(store, &boxes, &user_vec)),
        };
        let (c_k, w_k): (Vec<f64>, Vec<f64>) = match (&item_part, &user_part) {
            (Some((a, _)), Some((b, _))) => (
                a.center.iter().zip(&b.center).map(|(&x, &y)| (x + y) / 2.0).collect(),
                a.offset_raw
                    .iter()
                    .zip(&b.offset_raw)
                    .map(|(&x, &y)| (x + y) / 2.0)
                    .collect(),
            ),
            (Some((a, _)), None) | (None, Some((a, _))) => (a.center.clone(), a.offset_raw.clone()),
            (None, None) => unreachable!(),
        };
        for k in 0..d {
            center_sum[k] += c_k[k];
            width_sum[k] += w_k[k];
        }
        fwd.push(ItemBoxFwd::Composed {
            concept_ids,
            boxes,
            item_part,
            user_part,
        });
    }
    let m = g.history.len() as f64;
    let center: Vec<f64> = center_sum.iter().map(|&c| c / m).collect();
    let width_raw: Vec<f64> = width_sum.iter().map(|&w| w / m).collect();
    let hw: Vec<f64> = width_raw.iter().map(|&w| act(w)).collect();

    // distance terms for every positive and its negatives
    let mut loss = 0.0;
    let mut d_center = vec![0.0; d];
    let mut d_hw = vec![0.0; d];
    for p in &g.positives {
        let v_pos = store.read(layout.item(p.item));
        let d_pos = kernel::dist_pb(&v_pos, &center, &hw);
        let neg_points: Vec<Vec<f64>> =
            p.neg_items.iter().map(|&i| store.read(layout.item(i))).collect();
        let d_negs: Vec<f64> = neg_points
            .iter()
            .map(|q| kernel::dist_pb(q, &center, &hw))
            .collect();
        let (l, gp, gn) = margin_loss_backward(d_pos, &d_negs, g.weight, cfg.margin, cfg.literal_loss);
        loss += l * inv;

        let mut d_v = vec![0.0; d];
        kernel::dist_pb_backward(&v_pos, &center, &hw, gp * inv, &mut d_v, &mut d_center, &mut d_hw);
        add_into(&mut tape.data, layout.item(p.item), &d_v);
        for (j, q) in neg_points.iter().enumerate() {
            let mut d_vn = vec![0.0; d];
            kernel::dist_pb_backward(q, &center, &hw, gn[j] * inv, &mut d_vn, &mut d_center, &mut d_hw);
            add_into(&mut tape.data, layout.item(p.neg_items[j]), &d_vn);
        }
    }

    // mean backward: each history item receives 1/m of the box gradient
    let d_width_raw: Vec<f64> = d_hw
        .iter()
        .zip(&width_raw)
        .map(|(&g, &w)| g * act_prime(w))
        .collect();
    let d_ck: Vec<f64> = d_center.iter().map(|&v| v / m).collect();
    let d_ok: Vec<f64> = d_width_raw.iter().map(|&v| v / m).collect();
    let mut d_user = vec![0.0; d];
    for state in &fwd {
        match state {
            ItemBoxFwd::Degenerate { item } => {
                add_into(&mut tape.data, layout.item(*item), &d_ck);
            }
            ItemBoxFwd::Composed {
                concept_ids,
                boxes,
                item_part,
                user_part,
            } => {
                let both = item_part.is_some() && user_part.is_some();
                let scale = if both { 0.5 } else { 1.0 };
                let d_c: Vec<f64> = d_ck.iter().map(|&v| v * scale).collect();
                let d_o: Vec<f64> = d_ok.iter().map(|&v| v * scale).collect();
                let mut totals: Vec<BoxGrad> = Vec::new();
                if let Some((_, cache)) = item_part {
                    let grads = match cache {
                        ItemIntersectCache::Attention(c) => {
                            attention_backward(store, boxes, c, &d_c, &d_o, &mut tape.data)
                        }
                        ItemIntersectCache::MaxMin(c) => maxmin_backward(boxes, c, &d_c, &d_o),
                    };
                    totals = grads;
                }
                if let Some((_, cache)) = user_part {
                    let (grads, du) =
                        user_bias_backward(store, boxes, cache, &d_c, &d_o, &mut tape.data);
                    for (k, v) in du.iter().enumerate() {
                        d_user[k] += v;
                    }
                    if totals.is_empty() {
                        totals = grads;
                    } else {
                        for (t, g) in totals.iter_mut().zip(grads) {
                            for k in 0..d {
                                t.d_center[k] += g.d_center[k];
                                t.d_offset_raw[k] += g.d_offset_raw[k];
                            }
                        }
                    }
                }
                for (bg, &(rel, tag)) in totals.iter().zip(concept_ids) {
                    scatter_concept_grad(store, rel, tag, &bg.d_center, &bg.d_offset_raw, &mut tape.data);
                }
            }
        }
    }
    add_into(&mut tape.data, layout.user(g.user), &d_user);
    Ok(loss)
}
