//! Trainable parameters and the learned intersection operators.
//!
//! All tables live in one flat `f32` buffer described by [`Layout`]:
//! item points, tag boxes, relation boxes, user vectors, then the attention
//! networks and the user-bias networks. Training, checkpointing, and the
//! finite-difference harness all address parameters through that layout.

mod checkpoint;
pub mod intersect;
pub mod nets;

pub use checkpoint::{checkpoint_load, checkpoint_save, OptimizerState};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ConceptIndex, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{act, BoxEmbedding};
use nets::{AffineSeg, MlpSeg};

/// Architecture of the intersection networks. Every network is a stack of
/// affine maps with ReLU between them; the attention temperature is fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionNetConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub activation: String,
    pub temperature: f64,
}

impl IntersectionNetConfig {
    pub fn with_width(width: usize) -> Self {
        Self {
            hidden_layers: 1,
            hidden_width: width,
            activation: "relu".into(),
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers < 1 || self.hidden_width < 1 {
            return Err(Error::Config(
                "intersection nets need hidden_layers >= 1 and hidden_width >= 1".into(),
            ));
        }
        if self.activation != "relu" {
            return Err(Error::Config(format!(
                "unsupported activation {:?} (only \"relu\")",
                self.activation
            )));
        }
        if self.temperature != 1.0 {
            return Err(Error::Config("attention temperature is fixed at 1".into()));
        }
        Ok(())
    }
}

/// Table and network dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shapes {
    pub d: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub n_items: usize,
    pub n_tags: usize,
    pub n_relations_aug: usize,
    pub n_users: usize,
}

/// Offsets of every table and network inside the flat parameter buffer.
/// Order: items, tags, relations, users, attention nets (center, offset
/// inner, offset outer), user-bias nets (center, offset).
#[derive(Debug, Clone)]
pub struct Layout {
    pub shapes: Shapes,
    items_off: usize,
    tags_off: usize,
    rels_off: usize,
    users_off: usize,
    pub attn_center: MlpSeg,
    pub attn_off_inner: MlpSeg,
    pub attn_off_outer: MlpSeg,
    pub user_center: MlpSeg,
    pub user_offset: MlpSeg,
    total: usize,
}

fn build_mlp(start: &mut usize, in_dim: usize, width: usize, layers: usize, out: usize) -> MlpSeg {
    let mut dims = Vec::with_capacity(layers + 2);
    dims.push(in_dim);
    dims.extend(std::iter::repeat(width).take(layers));
    dims.push(out);
    let mut affines = Vec::with_capacity(dims.len() - 1);
    for w in dims.windows(2) {
        let (i, o) = (w[0], w[1]);
        let w_off = *start;
        let b_off = w_off + o * i;
        *start = b_off + o;
        affines.push(AffineSeg {
            w_off,
            b_off,
            in_dim: i,
            out_dim: o,
        });
    }
    MlpSeg { affines }
}

impl Layout {
    pub fn new(shapes: Shapes) -> Self {
        let d = shapes.d;
        let (w, l) = (shapes.hidden_width, shapes.hidden_layers);
        let mut off = 0usize;
        let items_off = off;
        off += shapes.n_items * d;
        let tags_off = off;
        off += shapes.n_tags * 2 * d;
        let rels_off = off;
        off += shapes.n_relations_aug * 2 * d;
        let users_off = off;
        off += shapes.n_users * d;
        let attn_center = build_mlp(&mut off, d, w, l, d);
        let attn_off_inner = build_mlp(&mut off, d, w, l, d);
        let attn_off_outer = build_mlp(&mut off, d, w, l, d);
        let user_center = build_mlp(&mut off, 2 * d, w, l, d);
        let user_offset = build_mlp(&mut off, 2 * d, w, l, d);
        Self {
            shapes,
            items_off,
            tags_off,
            rels_off,
            users_off,
            attn_center,
            attn_off_inner,
            attn_off_outer,
            user_center,
            user_offset,
            total: off,
        }
    }

    pub fn param_count(&self) -> usize {
        self.total
    }

    pub fn item(&self, i: u32) -> std::ops::Range<usize> {
        let d = self.shapes.d;
        let s = self.items_off + i as usize * d;
        s..s + d
    }

    pub fn tag_center(&self, t: u32) -> std::ops::Range<usize> {
        let d = self.shapes.d;
        let s = self.tags_off + t as usize * 2 * d;
        s..s + d
    }

    pub fn tag_offset(&self, t: u32) -> std::ops::Range<usize> {
        let d = self.shapes.d;
        let s = self.tags_off + t as usize * 2 * d + d;
        s..s + d
    }

    pub fn rel_center(&self, r: u32) -> std::ops::Range<usize> {
        let d = self.shapes.d;
        let s = self.rels_off + r as usize * 2 * d;
        s..s + d
    }

    pub fn rel_offset(&self, r: u32) -> std::ops::Range<usize> {
        let d = self.shapes.d;
        let s = self.rels_off + r as usize * 2 * d + d;
        s..s + d
    }

    pub fn user(&self, u: u32) -> std::ops::Range<usize> {
        let d = self.shapes.d;
        let s = self.users_off + u as usize * d;
        s..s + d
    }

    /// Parameter ranges of the three attention-intersection networks.
    pub fn attn_net_range(&self) -> std::ops::Range<usize> {
        let start = self.attn_center.affines[0].w_off;
        let last = self.attn_off_outer.affines.last().unwrap();
        start..last.b_off + last.out_dim
    }
}

/// All trainable state plus the margin and the seed it was initialized with.
#[derive(Debug, Clone)]
pub struct ParamStore {
    pub layout: Layout,
    pub gamma: f64,
    pub seed: u64,
    pub stage_completed: u32,
    pub data: Vec<f32>,
}

impl ParamStore {
    pub fn shapes(&self) -> &Shapes {
        &self.layout.shapes
    }

    pub fn dim(&self) -> usize {
        self.layout.shapes.d
    }

    pub fn read(&self, range: std::ops::Range<usize>) -> Vec<f64> {
        self.data[range].iter().map(|&x| x as f64).collect()
    }

    pub fn item_point(&self, i: u32) -> Vec<f64> {
        self.read(self.layout.item(i))
    }

    pub fn user_vec(&self, u: u32) -> Vec<f64> {
        self.read(self.layout.user(u))
    }

    /// Concept box: the tag box projected by its relation box.
    pub fn concept_box(&self, rel: u32, tag: u32) -> BoxEmbedding {
        let d = self.dim();
        let tc = &self.data[self.layout.tag_center(tag)];
        let to = &self.data[self.layout.tag_offset(tag)];
        let rc = &self.data[self.layout.rel_center(rel)];
        let ro = &self.data[self.layout.rel_offset(rel)];
        let mut center = vec![0.0; d];
        let mut offset_raw = vec![0.0; d];
        for k in 0..d {
            center[k] = tc[k] as f64 + rc[k] as f64;
            offset_raw[k] = act(to[k] as f64) + ro[k] as f64;
        }
        BoxEmbedding { center, offset_raw }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Initialize every table from a seeded stream: centers, item points, and
/// user vectors uniform in `±gamma*scale/(2d)`, raw offsets uniform in
/// `(0, gamma/d)`, network weights uniform in `±1/sqrt(fan_in)`.
pub fn init_params(
    shapes: Shapes,
    gamma: f64,
    init_scale: Option<f64>,
    seed: u64,
) -> Result<ParamStore> {
    if shapes.d == 0 || shapes.n_items == 0 || shapes.n_users == 0 {
        return Err(Error::Contract(
            "init_params: zero dimension or entity count".into(),
        ));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Contract("init_params: margin must be positive".into()));
    }
    let layout = Layout::new(shapes);
    let mut data = vec![0.0f32; layout.param_count()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let scale = init_scale.unwrap_or(shapes.d as f64 / 8.0);
    let center_bound = (gamma * scale / (2.0 * shapes.d as f64)) as f32;
    let offset_bound = (gamma / shapes.d as f64) as f32;

    fn fill_uniform(
        rng: &mut ChaCha8Rng,
        range: std::ops::Range<usize>,
        lo: f32,
        hi: f32,
        data: &mut [f32],
    ) {
        for v in &mut data[range] {
            *v = rng.random_range(lo..hi);
        }
    }

    for i in 0..shapes.n_items as u32 {
        fill_uniform(&mut rng, layout.item(i), -center_bound, center_bound, &mut data);
    }
    for t in 0..shapes.n_tags as u32 {
        fill_uniform(&mut rng, layout.tag_center(t), -center_bound, center_bound, &mut data);
        for idx in layout.tag_offset(t) {
            let mut v = rng.random_range(0.0..offset_bound);
            while v == 0.0 {
                v = rng.random_range(0.0..offset_bound);
            }
            data[idx] = v;
        }
    }
    for r in 0..shapes.n_relations_aug as u32 {
        fill_uniform(&mut rng, layout.rel_center(r), -center_bound, center_bound, &mut data);
        fill_uniform(&mut rng, layout.rel_offset(r), 0.0, offset_bound, &mut data);
    }
    for u in 0..shapes.n_users as u32 {
        fill_uniform(&mut rng, layout.user(u), -center_bound, center_bound, &mut data);
    }
    for seg in [
        &layout.attn_center,
        &layout.attn_off_inner,
        &layout.attn_off_outer,
        &layout.user_center,
        &layout.user_offset,
    ] {
        for aff in &seg.affines {
            let bound = 1.0 / (aff.in_dim as f32).sqrt();
            let w_range = aff.w_off..aff.w_off + aff.out_dim * aff.in_dim;
            fill_uniform(&mut rng, w_range, -bound, bound, &mut data);
            fill_uniform(&mut rng, aff.b_off..aff.b_off + aff.out_dim, -bound, bound, &mut data);
        }
    }

    Ok(ParamStore {
        layout,
        gamma,
        seed,
        stage_completed: 0,
        data,
    })
}

/// Which intersection operator forms an item's concept box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntersectKind {
    Attention,
    MaxMin,
}

/// How the item-only and user-bias intersections are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UserBiasMode {
    Both,
    ItemOnly,
    UserOnly,
}

/// Settings for interest-box construction shared by training and evaluation.
#[derive(Debug, Clone, Copy)]
pub struct InterestConfig {
    pub intersect: IntersectKind,
    pub user_mode: UserBiasMode,
    pub history_limit: usize,
}

impl Default for InterestConfig {
    fn default() -> Self {
        Self {
            intersect: IntersectKind::Attention,
            user_mode: UserBiasMode::Both,
            history_limit: 64,
        }
    }
}

/// Learned intersection of a non-empty set of boxes: softmax attention over
/// centers, gated elementwise-minimum half-width. The returned box stores its
/// half-width directly in `offset_raw` (already non-negative).
pub fn attention_intersect(store: &ParamStore, boxes: &[BoxEmbedding]) -> Result<BoxEmbedding> {
    if boxes.is_empty() {
        return Err(Error::Contract("attention_intersect: empty box set".into()));
    }
    Ok(intersect::attention_forward(store, boxes).0)
}

/// Intersection whose attention conditions on the user vector; offsets are
/// combined on activated half-widths.
pub fn user_bias_intersect(
    store: &ParamStore,
    boxes: &[BoxEmbedding],
    user_vec: &[f64],
) -> Result<BoxEmbedding> {
    if boxes.is_empty() {
        return Err(Error::Contract("user_bias_intersect: empty box set".into()));
    }
    if user_vec.len() != store.dim() {
        return Err(Error::Contract(format!(
            "user_bias_intersect: user vector has dim {} but store has {}",
            user_vec.len(),
            store.dim()
        )));
    }
    Ok(intersect::user_bias_forward(store, boxes, user_vec).0)
}

/// Concept boxes of an item, in the deterministic order of the concept index.
pub fn concept_boxes(store: &ParamStore, concepts: &ConceptIndex, item: u32) -> Result<Vec<BoxEmbedding>> {
    Ok(concepts
        .concepts_of(item)?
        .iter()
        .map(|&(r, t)| store.concept_box(r, t))
        .collect())
}

/// Interest box of a single item for a given user: the average of the
/// item-only intersection and the user-bias intersection of the item's
/// concept boxes. Items without concepts degenerate to a zero-width box at
/// the item's point.
pub fn item_interest_box(
    store: &ParamStore,
    concepts: &ConceptIndex,
    item: u32,
    user: u32,
    cfg: &InterestConfig,
) -> Result<BoxEmbedding> {
    let boxes = concept_boxes(store, concepts, item)?;
    if boxes.is_empty() {
        return Ok(BoxEmbedding {
            center: store.item_point(item),
            offset_raw: vec![0.0; store.dim()],
        });
    }
    let b_item = match cfg.user_mode {
        UserBiasMode::UserOnly => None,
        _ => Some(match cfg.intersect {
            IntersectKind::Attention => intersect::attention_forward(store, &boxes).0,
            IntersectKind::MaxMin => intersect::maxmin_forward(&boxes).0,
        }),
    };
    let b_user = match cfg.user_mode {
        UserBiasMode::ItemOnly => None,
        _ => Some(intersect::user_bias_forward(store, &boxes, &store.user_vec(user)).0),
    };
    Ok(match (b_item, b_user) {
        (Some(a), Some(b)) => BoxEmbedding {
            center: a
                .center
                .iter()
                .zip(&b.center)
                .map(|(&x, &y)| (x + y) / 2.0)
                .collect(),
            offset_raw: a
                .offset_raw
                .iter()
                .zip(&b.offset_raw)
                .map(|(&x, &y)| (x + y) / 2.0)
                .collect(),
        },
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => unreachable!(),
    })
}

/// Truncated training history used for interest boxes: the most recent
/// `limit` items by file order.
pub fn truncated_history(order: &[u32], limit: usize) -> &[u32] {
    let start = order.len().saturating_sub(limit);
    &order[start..]
}

/// A user's interest box: the arithmetic mean of the interest boxes of their
/// (truncated) training history.
pub fn user_interest_box(
    store: &ParamStore,
    dataset: &Dataset,
    user: u32,
    cfg: &InterestConfig,
) -> Result<BoxEmbedding> {
    let order = dataset
        .graph
        .train_order
        .get(user as usize)
        .ok_or_else(|| Error::Range(format!("user {user} outside interaction graph")))?;
    let history = truncated_history(order, cfg.history_limit);
    interest_box_over(store, &dataset.concepts, history, user, cfg)
}

/// Interest box over an explicit history slice.
pub fn interest_box_over(
    store: &ParamStore,
    concepts: &ConceptIndex,
    history: &[u32],
    user: u32,
    cfg: &InterestConfig,
) -> Result<BoxEmbedding> {
    if history.is_empty() {
        return Err(Error::Contract(format!(
            "user {user} has an empty training history"
        )));
    }
    let d = store.dim();
    let mut center = vec![0.0; d];
    let mut offset_raw = vec![0.0; d];
    for &item in history {
        let b = item_interest_box(store, concepts, item, user, cfg)?;
        for k in 0..d {
            center[k] += b.center[k];
            offset_raw[k] += b.offset_raw[k];
        }
    }
    let m = history.len() as f64;
    for k in 0..d {
        center[k] /= m;
        offset_raw[k] /= m;
    }
    Ok(BoxEmbedding { center, offset_raw })
}
