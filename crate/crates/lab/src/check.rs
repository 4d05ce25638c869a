//! Self-contained invariant suite behind `pugd-lab check`. Uses synthetic
//! data only, so it runs without the dataset.

use ndarray::Array2;
use pugd_core::landscape::{random_directions, slice_params, Normalization, Plane};
use pugd_core::optimizer::{ngd_fm_step, pugd_step, ugd_step};
use pugd_core::{
    check_bounded_difference, Activation, Batch, BatchObjective, Component, LossKind, Mlp, OptimizerConfig,
    OptimizerKind, OptimizerState, RaggedTensor, Schedule,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::runlog::check_step;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

fn random_tensor(rng: &mut ChaCha8Rng) -> RaggedTensor {
    let parts = rng.random_range(1..5);
    let comps = (0..parts)
        .map(|i| {
            let shape: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..6)).collect();
            let n = shape.iter().product();
            let values = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            Component::new(format!("c{i}"), shape, values).expect("valid component")
        })
        .collect();
    RaggedTensor::new(comps).expect("distinct names")
}

fn problem_with(dims: Vec<usize>, activation: Activation, rng: &mut ChaCha8Rng) -> (Mlp, Batch) {
    let (d_in, d_out) = (dims[0], dims[dims.len() - 1]);
    let mlp = Mlp::init(dims, activation, rng).expect("valid dims");
    let x = Array2::from_shape_fn((12, d_in), |_| rng.random_range(-1.0..1.0));
    let y = Array2::from_shape_fn((12, d_out), |_| rng.random_range(-1.0..1.0));
    (mlp, Batch::new(x, y).expect("matching rows"))
}

fn synthetic_problem(seed: u64) -> (Mlp, Batch) {
    problem_with(vec![8, 6, 3], Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Random depth, widths and activation.
fn random_problem(seed: u64) -> (Mlp, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(2..5);
    let dims = (0..depth).map(|_| rng.random_range(2..9)).collect();
    let activation = if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Relu };
    problem_with(dims, activation, &mut rng)
}

pub fn dual_norm_oracle() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let worst = (0..1000)
        .map(|_| {
            let t = random_tensor(&mut rng);
            let flat = t.flatten().iter().fold(0.0f64, |a, &v| a.hypot(v));
            (t.dual_norm() - flat).abs() / flat
        })
        .fold(0.0, f64::max);
    outcome("dual-norm equals flat L2", worst <= 1e-12, format!("max rel error {worst:e}"))
}

pub fn unit_tensors() -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let worst = (0..1000)
        .map(|_| (random_tensor(&mut rng).unit().map(|u| u.dual_norm()).unwrap_or(1.0) - 1.0).abs())
        .fold(0.0, f64::max);
    outcome("unit tensors have dual-norm 1", worst <= 1e-9, format!("max deviation {worst:e}"))
}

pub fn bounded_difference() -> CheckOutcome {
    let a = RaggedTensor::from_vec("w", vec![0.6, 0.8]).expect("valid");
    match check_bounded_difference(&a, &a.scale(-1.0)) {
        Ok(d) => outcome("antipodal units reach the bound 2", (d - 2.0).abs() <= 1e-9, format!("d = {d}")),
        Err(e) => outcome("antipodal units reach the bound 2", false, e.to_string()),
    }
}

pub fn ugd_matches_ngd_fm() -> CheckOutcome {
    let (mlp, batch) = synthetic_problem(3);
    let oracle = BatchObjective {
        model: &mlp,
        batch: &batch,
        loss: LossKind::Mse,
    };
    let (mut a, mut b) = (mlp.params().clone(), mlp.params().clone());
    let (mut sa, mut sb) = (OptimizerState::default(), OptimizerState::default());
    let (ca, cb) = (OptimizerConfig::new(OptimizerKind::Ugd), OptimizerConfig::new(OptimizerKind::NgdFm));
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        if ugd_step(&mut a, &oracle, 0.05, &ca, &mut sa).is_err() || ngd_fm_step(&mut b, &oracle, 0.05, &cb, &mut sb).is_err() {
            return outcome("ugd and ngd_fm coincide", false, "step failed".into());
        }
        worst = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    outcome("ugd and ngd_fm coincide", worst <= 1e-12, format!("max elementwise gap {worst:e} over 1000 steps"))
}

pub fn gradients() -> CheckOutcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let (mlp, batch) = random_problem(100 + seed);
        let kind = if seed % 2 == 0 { LossKind::Mse } else { LossKind::CrossEntropy };
        let (Ok((_, g)), Ok(fd)) = (mlp.grad(&batch, kind), mlp.finite_diff_grad(&batch, kind, 1e-6)) else {
            return outcome("analytic gradients match central differences", false, "evaluation failed".into());
        };
        for (a, n) in g.iter().zip(fd.iter()) {
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-4));
        }
    }
    outcome("analytic gradients match central differences", worst < 1e-5, format!("max rel error {worst:e}"))
}

pub fn unit_step_lengths() -> CheckOutcome {
    let (mlp, batch) = synthetic_problem(4);
    let oracle = BatchObjective {
        model: &mlp,
        batch: &batch,
        loss: LossKind::Mse,
    };
    let total = 200;
    let Ok(schedule) = Schedule::cosine(0.1, 0.001, total) else {
        return outcome("unit step lengths follow the schedule", false, "bad schedule".into());
    };
    for kind in [OptimizerKind::Ugd, OptimizerKind::NgdFm, OptimizerKind::Pugd] {
        let cfg = OptimizerConfig::new(kind);
        let mut state = OptimizerState::default();
        let mut w = mlp.params().clone();
        for t in 0..=total {
            let lr = schedule.lr_at(t).expect("t within range");
            let before = w.clone();
            let step = match kind {
                OptimizerKind::Ugd => ugd_step(&mut w, &oracle, lr, &cfg, &mut state),
                OptimizerKind::NgdFm => ngd_fm_step(&mut w, &oracle, lr, &cfg, &mut state),
                _ => pugd_step(&mut w, &oracle, lr, &cfg, &mut state),
            };
            let Ok(r) = step else {
                return outcome("unit step lengths follow the schedule", false, format!("{kind} step failed"));
            };
            let moved = w.difference_norm(&before).unwrap_or(f64::NAN);
            if check_step(kind, &r).is_err() || (!r.flags.any() && (moved - lr).abs() > 1e-9) {
                return outcome(
                    "unit step lengths follow the schedule",
                    false,
                    format!("{kind} step {t}: moved {moved}, lr {lr}"),
                );
            }
        }
    }
    outcome("unit step lengths follow the schedule", true, "ugd, ngd_fm, pugd".into())
}

pub fn isotropic_bowl() -> CheckOutcome {
    let bowl = |p: &RaggedTensor| Ok((p.dot(p)? / 2.0, p.clone()));
    let cfg = OptimizerConfig::plain(OptimizerKind::Ugd);
    let mut state = OptimizerState::default();
    let mut w = RaggedTensor::from_vec("w", vec![3.0, 4.0]).expect("valid");
    let mut steps = 0;
    while w.dual_norm() > 0.1 + 1e-9 && steps < 100 {
        if ugd_step(&mut w, &bowl, 0.1, &cfg, &mut state).is_err() {
            break;
        }
        steps += 1;
    }
    outcome("ugd bowl from radius 5 needs 49-50 steps", (49..=50).contains(&steps), format!("{steps} steps"))
}

pub fn projection_roundtrip() -> CheckOutcome {
    let (mlp, _) = synthetic_problem(5);
    let anchor = mlp.params();
    let result = random_directions(anchor, Normalization::FilterNorm, 5).and_then(|pair| {
        let p = slice_params(anchor, &pair, -10.1, -15.0)?;
        Plane::new(anchor, &pair)?.project(&p)
    });
    match result {
        Ok((a, b)) => outcome(
            "slice coordinates survive projection",
            (a + 10.1).abs() <= 1e-9 && (b + 15.0).abs() <= 1e-9,
            format!("({a}, {b})"),
        ),
        Err(e) => outcome("slice coordinates survive projection", false, e.to_string()),
    }
}

pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        dual_norm_oracle(),
        unit_tensors(),
        bounded_difference(),
        ugd_matches_ngd_fm(),
        gradients(),
        unit_step_lengths(),
        isotropic_bowl(),
        projection_roundtrip(),
    ]
}
