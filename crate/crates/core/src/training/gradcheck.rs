//! Central finite-difference verification of the analytic gradients.
//!
//! The check perturbs stored `f32` parameters, recomputes the batch loss in
//! `f64`, and divides by the actually-applied perturbation. Points too close
//! to a subgradient kink are screened out by comparing estimates at two step
//! sizes; the conventions at kinks themselves are fixed by the geometry
//! module and are not what finite differences can validate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ConceptIndex;
use crate::error::{Error, Result};
use crate::model::ParamStore;

use super::{grad_step, StageBatch, TrainConfig};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// How many on-path parameters to verify.
    pub n_params: usize,
    /// Central-difference step.
    pub h: f64,
    /// Maximum allowed |analytic - fd| / (|analytic| + 1e-6).
    pub tol: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            n_params: 32,
            h: 1e-4,
            tol: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_near_kink: usize,
    pub max_rel_err: f64,
    /// (flat parameter index, analytic, finite-difference) of failures.
    pub failures: Vec<(usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn loss_at(
    store: &mut ParamStore,
    concepts: &ConceptIndex,
    batch: &StageBatch,
    cfg: &TrainConfig,
    idx: usize,
    value: f32,
) -> Result<f64> {
    let original = store.data[idx];
    store.data[idx] = value;
    let r = grad_step(store, concepts, batch, cfg).map(|(l, _)| l);
    store.data[idx] = original;
    r
}

/// Verifies the analytic gradient of `grad_step` on `n_params` randomly
/// chosen on-path parameters, plus a handful of off-path parameters that must
/// have zero gradient.
pub fn finite_difference_check(
    store: &ParamStore,
    concepts: &ConceptIndex,
    batch: &StageBatch,
    cfg: &TrainConfig,
    gc: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut work = store.clone();
    let (_, tape) = grad_step(&work, concepts, batch, cfg)?;

    let mut candidates: Vec<usize> = (0..tape.data.len())
        .filter(|&i| tape.data[i].abs() > 1e-9)
        .collect();
    if candidates.is_empty() {
        return Err(Error::Contract(
            "gradient check: no parameter on the loss path".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    candidates.shuffle(&mut rng);

    let mut report = GradCheckReport {
        checked: 0,
        skipped_near_kink: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };

    let fd_at = |work: &mut ParamStore, idx: usize, h: f64| -> Result<Option<f64>> {
        let x = work.data[idx];
        let xp = (x as f64 + h) as f32;
        let xm = (x as f64 - h) as f32;
        let delta = xp as f64 - xm as f64;
        if delta == 0.0 {
            return Ok(None); // parameter too large for this step size
        }
        let lp = loss_at(work, concepts, batch, cfg, idx, xp)?;
        let lm = loss_at(work, concepts, batch, cfg, idx, xm)?;
        Ok(Some((lp - lm) / delta))
    };

    for &idx in &candidates {
        if report.checked >= gc.n_params {
            break;
        }
        let Some(fd) = fd_at(&mut work, idx, gc.h)? else {
            continue;
        };
        let Some(fd_half) = fd_at(&mut work, idx, gc.h / 2.0)? else {
            continue;
        };
        // the two step sizes must agree, otherwise a kink sits inside the stencil
        if (fd - fd_half).abs() > 1e-4 * (1.0 + fd.abs()) {
            report.skipped_near_kink += 1;
            continue;
        }
        let analytic = tape.data[idx];
        let rel = (analytic - fd).abs() / (analytic.abs() + 1e-6);
        report.max_rel_err = report.max_rel_err.max(rel);
        if rel >= gc.tol {
            report.failures.push((idx, analytic, fd));
        }
        report.checked += 1;
    }

    if report.checked < gc.n_params.min(candidates.len()).min(8) {
        return Err(Error::Contract(format!(
            "gradient check exercised only {} parameters (kink screening too aggressive)",
            report.checked
        )));
    }

    // off-path parameters: finite differences must also vanish
    let zeros: Vec<usize> = (0..tape.data.len())
        .filter(|&i| tape.data[i] == 0.0)
        .take(4)
        .collect();
    for idx in zeros {
        if let Some(fd) = fd_at(&mut work, idx, gc.h)? {
            if fd.abs() > 1e-6 {
                report.failures.push((idx, 0.0, fd));
            }
        }
    }

    Ok(report)
}
