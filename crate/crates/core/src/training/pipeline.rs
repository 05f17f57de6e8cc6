//! The three-stage schedule: pretraining on typed triplets, box-intersection
//! training, and interest-box recommendation with validation-based early
//! stopping. Ablation toggles skip stages, restrict stage-1 sampling, switch
//! the intersection operator, or drop one side of the interest-box average.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_cases, UserEvalCase};
use crate::model::{
    checkpoint_save, init_params, truncated_history, OptimizerState, ParamStore, Shapes,
};

use super::batch::{assemble_intersection_batch, assemble_pretrain_batch, assemble_recommend_group};
use super::{grad_step, lr_schedule, StageBatch, TrainConfig};

/// One line of the training log: `stage epoch step loss lr recall20`.
#[derive(Debug, Clone)]
pub struct StageLogRecord {
    pub stage: u32,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub recall: Option<f64>,
}

impl std::fmt::Display for StageLogRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {}",
            self.stage,
            self.epoch,
            self.step,
            self.loss,
            self.lr,
            self.recall.map_or_else(|| "-".to_string(), |r| r.to_string()),
        )
    }
}

#[derive(Debug)]
pub struct PipelineResult {
    pub store: ParamStore,
    pub optimizer: OptimizerState,
    pub logs: Vec<StageLogRecord>,
    pub early_stopped: bool,
}

/// Stops once the tracked metric fails to increase for `patience`
/// consecutive updates.
#[derive(Debug)]
pub struct EarlyStopper {
    best: f64,
    bad: usize,
    patience: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            best: f64::NEG_INFINITY,
            bad: 0,
            patience,
        }
    }

    /// Feed one metric value; returns true when training should stop.
    pub fn update(&mut self, value: f64) -> bool {
        if value > self.best {
            self.best = value;
            self.bad = 0;
            false
        } else {
            self.bad += 1;
            self.bad >= self.patience
        }
    }
}

/// Per-user stage-3 views: positives (training remainder after the validation
/// holdout, file order), the truncated box history, the sorted mask, and the
/// sorted validation items.
struct Stage3View {
    positives: Vec<Vec<u32>>,
    box_history: Vec<Vec<u32>>,
    mask: Vec<Vec<u32>>,
    val: Vec<Vec<u32>>,
}

fn build_stage3_view(ds: &Dataset, cfg: &TrainConfig) -> Stage3View {
    let n = ds.graph.n_users;
    let mut view = Stage3View {
        positives: Vec::with_capacity(n),
        box_history: Vec::with_capacity(n),
        mask: Vec::with_capacity(n),
        val: Vec::with_capacity(n),
    };
    for user in 0..n {
        let order = &ds.graph.train_order[user];
        let k_val = (order.len() as f64 * cfg.val_fraction).floor() as usize;
        let split = order.len() - k_val;
        let remainder = &order[..split];
        let mut val: Vec<u32> = order[split..].to_vec();
        val.sort_unstable();
        let mut mask: Vec<u32> = remainder.to_vec();
        mask.sort_unstable();
        view.positives.push(remainder.to_vec());
        view.box_history
            .push(truncated_history(remainder, cfg.history_limit).to_vec());
        view.mask.push(mask);
        view.val.push(val);
    }
    view
}

fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

struct StageRunner<'a> {
    ds: &'a Dataset,
    cfg: &'a TrainConfig,
    store: ParamStore,
    optimizer: OptimizerState,
    logs: Vec<StageLogRecord>,
    log_file: Option<std::fs::File>,
    out_dir: Option<&'a Path>,
    /// Step counter across all enabled stages; the decay schedule runs over
    /// the pipeline's whole step budget.
    global_step: usize,
    total_steps: usize,
}

impl StageRunner<'_> {
    fn record(&mut self, rec: StageLogRecord) -> Result<()> {
        log::info!(
            "stage {} epoch {} loss {:.6} lr {:.2e}{}",
            rec.stage,
            rec.epoch,
            rec.loss,
            rec.lr,
            rec.recall.map_or(String::new(), |r| format!(" recall@k {r:.4}")),
        );
        if let Some(f) = &mut self.log_file {
            writeln!(f, "{rec}")?;
        }
        self.logs.push(rec);
        Ok(())
    }

    /// Apply one assembled batch; returns the loss, or None for a skipped
    /// (diverged) step.
    fn apply(&mut self, batch: &StageBatch, lr: f64) -> Result<Option<f64>> {
        let (loss, mut tape) = match grad_step(&self.store, &self.ds.concepts, batch, self.cfg) {
            Ok(ok) => ok,
            Err(Error::Divergence(msg)) => {
                log::warn!("skipping diverged step: {msg}");
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        tape.clip_to(self.cfg.grad_clip);
        if self.cfg.freeze_attn_in_stage3 && matches!(batch, StageBatch::Recommend(_)) {
            for g in &mut tape.data[self.store.layout.attn_net_range()] {
                *g = 0.0;
            }
        }
        super::optimizer_update(&mut self.store, &tape, &mut self.optimizer, lr);
        Ok(Some(loss))
    }

    fn save_stage_checkpoint(&mut self, stage: u32) -> Result<()> {
        self.store.stage_completed = stage;
        if let Some(dir) = self.out_dir {
            let path = dir.join(format!("checkpoint_stage{stage}.ckpt"));
            checkpoint_save(&self.store, Some(&self.optimizer), &path)?;
        }
        Ok(())
    }
}

/// Run the enabled stages in order and return the trained store, optimizer
/// state, and per-epoch logs. When `out_dir` is given, a `train.log` file and
/// per-stage checkpoints are written there.
pub fn run_pipeline(ds: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<PipelineResult> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let shapes = Shapes {
        d: cfg.dim,
        hidden_width: cfg.hidden_width.unwrap_or(cfg.dim),
        hidden_layers: cfg.hidden_layers,
        n_items: ds.graph.n_items,
        n_tags: ds.triplets.n_tags,
        n_relations_aug: ds.triplets.n_relations_aug,
        n_users: ds.graph.n_users,
    };
    let store = init_params(shapes, cfg.margin, cfg.init_scale, cfg.seed)?;
    let optimizer = OptimizerState::zeros(store.data.len());
    let log_file = out_dir
        .map(|dir| {
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("train.log"))
        })
        .transpose()?;

    let mut runner = StageRunner {
        ds,
        cfg,
        store,
        optimizer,
        logs: Vec::new(),
        log_file,
        out_dir,
        global_step: 0,
        total_steps: pipeline_step_budget(ds, cfg),
    };

    if !cfg.skip_pretrain {
        run_pretrain_stage(&mut runner)?;
        runner.save_stage_checkpoint(1)?;
    }
    if !cfg.skip_intersection {
        run_intersection_stage(&mut runner)?;
        runner.save_stage_checkpoint(2)?;
    }
    let early_stopped = run_recommend_stage(&mut runner)?;
    runner.save_stage_checkpoint(3)?;
    if let Some(dir) = out_dir {
        checkpoint_save(&runner.store, Some(&runner.optimizer), &dir.join("final.ckpt"))?;
    }

    Ok(PipelineResult {
        store: runner.store,
        optimizer: runner.optimizer,
        logs: runner.logs,
        early_stopped,
    })
}

/// Total optimizer steps over all enabled stages; the decay milestones are
/// fractions of this budget.
fn pipeline_step_budget(ds: &Dataset, cfg: &TrainConfig) -> usize {
    let mut total = 0usize;
    if !cfg.skip_pretrain {
        let atoms = if cfg.only_irt {
            ds.triplets.irt.len()
        } else {
            ds.triplets.total()
        };
        total += atoms.div_ceil(cfg.batch_size) * cfg.epochs_pretrain;
    }
    if !cfg.skip_intersection {
        let items = (0..ds.graph.n_items as u32)
            .filter(|&i| ds.concepts.concepts_of(i).map(|c| !c.is_empty()).unwrap_or(false))
            .count();
        total += items.div_ceil(cfg.batch_size) * cfg.epochs_intersection;
    }
    let pairs: usize = ds
        .graph
        .train_order
        .iter()
        .map(|order| {
            let k_val = (order.len() as f64 * cfg.val_fraction).floor() as usize;
            order.len() - k_val
        })
        .sum();
    total += pairs.div_ceil(cfg.batch_size) * cfg.epochs_recommend;
    total
}

fn run_pretrain_stage(r: &mut StageRunner<'_>) -> Result<()> {
    let cfg = r.cfg;
    let n_atoms = if cfg.only_irt {
        r.ds.triplets.irt.len()
    } else {
        r.ds.triplets.total()
    };
    if n_atoms == 0 {
        log::warn!("pretraining skipped: the KG has no triplets");
        return Ok(());
    }
    let steps_per_epoch = n_atoms.div_ceil(cfg.batch_size);
    let mut rng = stage_rng(cfg.seed, 1);
    for epoch in 0..cfg.epochs_pretrain {
        let mut loss_sum = 0.0;
        let mut ok_steps = 0usize;
        let mut lr = cfg.base_lr;
        for _ in 0..steps_per_epoch {
            let batch = assemble_pretrain_batch(r.ds, cfg, &mut rng)?;
            lr = lr_schedule(r.global_step, r.total_steps, cfg);
            if let Some(loss) = r.apply(&batch, lr)? {
                loss_sum += loss;
                ok_steps += 1;
            }
            r.global_step += 1;
        }
        if ok_steps == 0 {
            return Err(Error::Divergence(format!(
                "pretraining epoch {epoch}: every step diverged"
            )));
        }
        r.record(StageLogRecord {
            stage: 1,
            epoch,
            step: r.global_step,
            loss: loss_sum / ok_steps as f64,
            lr,
            recall: None,
        })?;
    }
    Ok(())
}

fn run_intersection_stage(r: &mut StageRunner<'_>) -> Result<()> {
    let cfg = r.cfg;
    let mut items: Vec<u32> = (0..r.ds.graph.n_items as u32)
        .filter(|&i| {
            r.ds
                .concepts
                .concepts_of(i)
                .map(|c| !c.is_empty())
                .unwrap_or(false)
        })
        .collect();
    if items.is_empty() {
        log::warn!("intersection stage skipped: no item has concepts");
        return Ok(());
    }
    let mut rng = stage_rng(cfg.seed, 2);
    for epoch in 0..cfg.epochs_intersection {
        items.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut ok_steps = 0usize;
        let mut lr = cfg.base_lr;
        for chunk in items.chunks(cfg.batch_size) {
            let batch = assemble_intersection_batch(r.ds, chunk, cfg, &mut rng)?;
            lr = lr_schedule(r.global_step, r.total_steps, cfg);
            if let Some(loss) = r.apply(&batch, lr)? {
                loss_sum += loss;
                ok_steps += 1;
            }
            r.global_step += 1;
        }
        if ok_steps == 0 {
            return Err(Error::Divergence(format!(
                "intersection epoch {epoch}: every step diverged"
            )));
        }
        r.record(StageLogRecord {
            stage: 2,
            epoch,
            step: r.global_step,
            loss: loss_sum / ok_steps as f64,
            lr,
            recall: None,
        })?;
    }
    Ok(())
}

fn run_recommend_stage(r: &mut StageRunner<'_>) -> Result<bool> {
    let cfg = r.cfg;
    let view = build_stage3_view(r.ds, cfg);
    let users: Vec<u32> = (0..r.ds.graph.n_users as u32)
        .filter(|&u| !view.positives[u as usize].is_empty())
        .collect();
    if users.is_empty() {
        return Err(Error::Contract(
            "recommendation stage: no user has training interactions".into(),
        ));
    }
    let icfg = cfg.interest_config();
    let mut rng = stage_rng(cfg.seed, 3);
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);

    for epoch in 0..cfg.epochs_recommend {
        let mut order = users.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut ok_steps = 0usize;
        let mut skipped = 0usize;
        let mut lr = cfg.base_lr;

        // stream (user, positive) pairs in user-grouped order, cutting
        // batches at the configured atom count
        let mut groups: Vec<super::RecommendGroup> = Vec::new();
        let mut atoms = 0usize;
        let flush = |groups: &mut Vec<super::RecommendGroup>,
                         atoms: &mut usize,
                         r: &mut StageRunner<'_>,
                         loss_sum: &mut f64,
                         ok_steps: &mut usize,
                         skipped: &mut usize,
                         lr: &mut f64|
         -> Result<()> {
            if groups.is_empty() {
                return Ok(());
            }
            let batch = StageBatch::Recommend(std::mem::take(groups));
            *atoms = 0;
            *lr = lr_schedule(r.global_step, r.total_steps, cfg);
            match r.apply(&batch, *lr)? {
                Some(loss) => {
                    *loss_sum += loss;
                    *ok_steps += 1;
                }
                None => *skipped += 1,
            }
            r.global_step += 1;
            Ok(())
        };

        for &user in &order {
            let mut positives = view.positives[user as usize].clone();
            positives.shuffle(&mut rng);
            let history = &view.box_history[user as usize];
            let full_len = view.positives[user as usize].len();
            let mut rest = positives.as_slice();
            while !rest.is_empty() {
                let room = cfg.batch_size - atoms;
                let take = room.min(rest.len());
                let group = assemble_recommend_group(
                    r.ds, user, history, full_len, &rest[..take], cfg, &mut rng,
                )?;
                rest = &rest[take..];
                atoms += take;
                groups.push(group);
                if atoms == cfg.batch_size {
                    flush(
                        &mut groups, &mut atoms, r, &mut loss_sum,
                        &mut ok_steps, &mut skipped, &mut lr,
                    )?;
                }
            }
        }
        flush(
            &mut groups, &mut atoms, r, &mut loss_sum, &mut ok_steps,
            &mut skipped, &mut lr,
        )?;

        if ok_steps == 0 {
            return Err(Error::Divergence(format!(
                "recommendation epoch {epoch}: every step diverged"
            )));
        }

        let recall = validation_recall(r, &view, &icfg)?;
        r.record(StageLogRecord {
            stage: 3,
            epoch,
            step: r.global_step,
            loss: loss_sum / ok_steps as f64,
            lr,
            recall,
        })?;
        if let Some(rec) = recall {
            if stopper.update(rec) {
                log::info!("early stop after epoch {epoch}: recall@{} plateaued", cfg.eval_k);
                return Ok(true);
            }
        }
    }
    Ok(false)
}

fn validation_recall(
    r: &StageRunner<'_>,
    view: &Stage3View,
    icfg: &crate::model::InterestConfig,
) -> Result<Option<f64>> {
    let mut cases = Vec::new();
    for user in 0..r.ds.graph.n_users {
        if view.box_history[user].is_empty() || view.val[user].is_empty() {
            continue;
        }
        cases.push(UserEvalCase {
            user: user as u32,
            history: &view.box_history[user],
            mask: &view.mask[user],
            truth: &view.val[user],
        });
    }
    if cases.is_empty() {
        return Ok(None); // nothing held out; early stopping disabled
    }
    let report = evaluate_cases(
        &r.store,
        &r.ds.concepts,
        &cases,
        r.cfg.eval_k,
        icfg,
        r.cfg.deterministic,
    )?;
    Ok(Some(report.recall))
}
