//! Run logs and their CSV / JSON serialization.
//!
//! Floats are written with Rust's shortest round-trip formatting so identical
//! runs produce identical bytes. Step rows are re-checked against the
//! optimizer invariants while being written.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use pugd_core::landscape::{LandscapeGrid, Trajectory};
use pugd_core::optimizer::BOUNDED_DIFFERENCE_CONSTANT;
use pugd_core::{OptimizerKind, StepRecord};
use serde::Serialize;

use crate::error::{LabError, Result};

pub const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetadata {
    pub optimizer: String,
    pub config_hash: String,
    pub code_version: String,
    pub iterations: u64,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub kind: OptimizerKind,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub metadata: RunMetadata,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Checks one step record against the invariants of its optimizer.
pub fn check_step(kind: OptimizerKind, r: &StepRecord) -> Result<()> {
    let fail = |what: String| {
        Err(LabError::Core(pugd_core::Error::InvariantViolation(format!(
            "{kind} step {}: {what}",
            r.step_index
        ))))
    };
    if let Some(d) = r.d_t {
        if !(d <= BOUNDED_DIFFERENCE_CONSTANT + UNIT_TOLERANCE) {
            return fail(format!("d_t = {d} exceeds the bound"));
        }
    }
    if kind.is_unit_step() && !r.flags.zero_norm_update {
        if (r.update_dual_norm - r.lr_used).abs() > UNIT_TOLERANCE {
            return fail(format!("update norm {} differs from lr {}", r.update_dual_norm, r.lr_used));
        }
        match r.direction_norm {
            Some(n) if (n - 1.0).abs() <= UNIT_TOLERANCE => {}
            other => return fail(format!("direction norm {other:?} is not 1")),
        }
    }
    if kind == OptimizerKind::Pugd && !r.flags.perturbation_skipped {
        match r.perturb_norm {
            Some(n) if (n - 1.0).abs() <= UNIT_TOLERANCE => {}
            other => return fail(format!("perturbation norm {other:?} is not 1")),
        }
    }
    Ok(())
}

pub fn steps_csv(kind: OptimizerKind, steps: &[StepRecord]) -> Result<String> {
    let mut out = String::from("step,lr,loss,grad_norm,update_norm,d_t,perturb_norm,flags\n");
    for r in steps {
        check_step(kind, r)?;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step_index,
            r.lr_used,
            r.loss_before,
            r.grad_dual_norm,
            r.update_dual_norm,
            opt(r.d_t),
            opt(r.perturb_norm),
            r.flags.label()
        );
    }
    Ok(out)
}

pub fn epochs_csv(epochs: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,step,train_loss,train_accuracy,test_loss,test_accuracy\n");
    for e in epochs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            e.epoch, e.step, e.train_loss, e.train_accuracy, e.test_loss, e.test_accuracy
        );
    }
    out
}

pub fn trajectory_csv(t: &Trajectory) -> String {
    let mut out = String::from("step,alpha,beta,train_loss,test_loss\n");
    for p in &t.points {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.step,
            p.alpha,
            p.beta,
            p.train_loss,
            opt(p.test_loss)
        );
    }
    out
}

pub fn grid_csv(g: &LandscapeGrid) -> String {
    let mut out = String::from("alpha,beta,train_loss,test_loss,clipped\n");
    for (i, a) in g.alphas.iter().enumerate() {
        for (j, b) in g.betas.iter().enumerate() {
            let test = g.test_loss.as_ref().map(|t| t[[i, j]]);
            let _ = writeln!(
                out,
                "{a},{b},{},{},{}",
                g.train_loss[[i, j]],
                opt(test),
                g.clipped[[i, j]]
            );
        }
    }
    out
}

#[derive(Serialize)]
struct GridDocument<'a> {
    alphas: &'a [f64],
    betas: &'a [f64],
    train_loss: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_loss: Option<Vec<Vec<f64>>>,
    clipped: Vec<Vec<bool>>,
    clip_ceiling: f64,
    anchor_meta: &'a std::collections::BTreeMap<String, String>,
}

pub fn grid_json(g: &LandscapeGrid) -> Result<String> {
    let rows = |m: &pugd_core::landscape::LandscapeGrid, f: &dyn Fn(usize, usize) -> f64| {
        (0..m.alphas.len())
            .map(|i| (0..m.betas.len()).map(|j| f(i, j)).collect())
            .collect::<Vec<Vec<f64>>>()
    };
    let doc = GridDocument {
        alphas: &g.alphas,
        betas: &g.betas,
        train_loss: rows(g, &|i, j| g.train_loss[[i, j]]),
        test_loss: g.test_loss.as_ref().map(|t| rows(g, &|i, j| t[[i, j]])),
        clipped: g.clipped.rows().into_iter().map(|r| r.to_vec()).collect(),
        clip_ceiling: g.clip_ceiling,
        anchor_meta: &g.anchor_meta,
    };
    to_json(&doc)
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| LabError::config(format!("json encoding failed: {e}")))
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(LabError::io(parent))?;
    }
    fs::write(path, contents).map_err(LabError::io(path))
}
