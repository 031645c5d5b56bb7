//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.
//!
//! `cargo test -p adafuse-validation --test acceptance`

use std::process::ExitCode;
use std::time::{Duration, Instant};

use adafuse_core::alignment::{coral_loss, cosine_loss};
use adafuse_core::autodiff::{Mode, Tape, Var};
use adafuse_core::batch::ClipBatch;
use adafuse_core::data::{DatasetManifest, Task};
use adafuse_core::eval::{run_fold, FoldData, FoldResult};
use adafuse_core::folds::rolling_folds;
use adafuse_core::fusion::{persuasion_loss, M2P2Model};
use adafuse_core::gradcheck::{model_grad_check, GradCheckOptions};
use adafuse_core::heterogeneity::{compute_target_weights, update_weights};
use adafuse_core::metrics::{mse, mse_decrease};
use adafuse_core::params::ParamStore;
use adafuse_core::synth::{generate, PerModality, SynthConfig};
use adafuse_core::trainer::{train, TrainConfig};
use adafuse_core::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn noisy_visual(seed: u64, rho: f64) -> DatasetManifest {
    let mut noise = PerModality::splat(0.1);
    noise.visual = 5.0;
    generate(&SynthConfig {
        noise,
        alignment_strength: rho,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

/// Trains `ablation` with default hyperparameters on the last rolling fold.
fn last_fold(m: &DatasetManifest, seed: u64, ablation: &str) -> FoldResult {
    let plan = rolling_folds(&m.episodes, 1).unwrap();
    let cfg = TrainConfig {
        seed,
        ablation: ablation.parse().unwrap(),
        ..TrainConfig::default()
    };
    run_fold(m, &plan.folds[0], 0, &cfg).unwrap().0
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let data = generate(&SynthConfig {
        n_episodes: 1,
        clips_per_episode: 4,
        seq_len: PerModality::splat([2, 6]),
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig::default();
    let model = M2P2Model::new(cfg.model_config(data.task, data.dims), &mut ChaCha8Rng::seed_from_u64(0));
    let clips: Vec<_> = data.clips.iter().collect();
    let batch = ClipBatch::new(data.task, &clips).unwrap();
    let r = model_grad_check(&model, &batch, [1.0 / 3.0; 3], cfg.gamma, GradCheckOptions::new(1e-3, 1e-4)).unwrap();
    let took = start.elapsed();
    outcome(
        r.passed && r.max_rel_err < 1e-4 && took < Duration::from_secs(60),
        format!(
            "gradient check on 4 clips: max rel err {:.2e} over {} entries ({} at kinks), {:.1?}",
            r.max_rel_err, r.checked, r.skipped, took
        ),
    )
}

fn scalar_of(f: impl FnOnce(&mut Tape<'_>) -> Result<Var>) -> f64 {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval);
    let v = f(&mut tape).unwrap();
    tape.item(v)
}

fn pair(f: fn(&mut Tape<'_>, Var, Var) -> Result<Var>, a: Tensor, b: Tensor) -> f64 {
    scalar_of(|t| {
        let (a, b) = (t.input(a), t.input(b));
        f(t, a, b)
    })
}

fn criterion_2() -> Outcome {
    let v = Tensor::from_rows(&[vec![1.0, 2.0, -3.0], vec![0.5, -1.0, 4.0]]).unwrap();
    let orth = Tensor::from_rows(&[vec![2.0, -1.0, 0.0], vec![2.0, 1.0, 0.0]]).unwrap();
    let cos = [
        pair(cosine_loss, v.clone(), v.clone()),
        pair(cosine_loss, v.clone(), orth),
        pair(cosine_loss, v.clone(), v.map(|x| -x)),
    ];
    let mut m = Tensor::zeros(&[2, 16]);
    m.data_mut()[0] = 1.0;
    m.data_mut()[16] = -1.0;
    let coral = pair(coral_loss, m, Tensor::zeros(&[2, 16]));
    let bce = scalar_of(|t| {
        let p = t.input(Tensor::full(&[4, 1], 0.5));
        let y = t.input(Tensor::from_rows(&[vec![0.0], vec![1.0], vec![1.0], vec![0.0]]).unwrap());
        persuasion_loss(t, p, y, Task::Dop)
    });
    let ok = close(cos[0], 0.0, 1e-12)
        && close(cos[1], 1.0, 1e-12)
        && close(cos[2], 2.0, 1e-12)
        && close(coral, 4.0 / 1024.0, 1e-12)
        && close(bce, std::f64::consts::LN_2, 1e-12);
    outcome(
        ok,
        format!("cosine {:?}, CORAL {coral:.12} (4/1024), BCE {bce:.12} (ln 2)", cos),
    )
}

fn criterion_3() -> Outcome {
    let target = compute_target_weights([0.01, 0.02, 0.03], 50.0);
    let oracle_ok = target
        .iter()
        .zip([0.5065, 0.3072, 0.1863])
        .all(|(w, e)| close(*w, e, 5e-4));

    let m = generate(&SynthConfig::default()).unwrap();
    let plan = rolling_folds(&m.episodes, 1).unwrap();
    let data = FoldData::new(&m, &plan.folds[0]).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        ..TrainConfig::default()
    };
    let (tr, va) = (FoldData::refs(&data.train), FoldData::refs(&data.val));
    let t = train(&cfg, m.task, m.dims, &tr, &va).unwrap();
    let epochs = &t.history.epochs;
    let simplex_ok = epochs.len() == 50
        && epochs
            .iter()
            .all(|e| (e.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9 && e.weights.iter().all(|&w| w >= 0.0));

    let mut w = [1.0 / 3.0; 3];
    let mut replay_err: f64 = 0.0;
    let mut replay_ok = true;
    for e in epochs {
        match e.ref_losses {
            Some(l) => w = update_weights(w, compute_target_weights(l, cfg.beta), cfg.alpha),
            None => replay_ok = false,
        }
        for i in 0..3 {
            replay_err = replay_err.max((w[i] - e.weights[i]).abs());
        }
    }
    replay_ok &= replay_err <= 1e-12;
    outcome(
        oracle_ok && simplex_ok && replay_ok,
        format!(
            "target weights {:.4?}; simplex over {} epochs: {simplex_ok}; replay max err {replay_err:.1e}",
            target,
            epochs.len()
        ),
    )
}

fn criterion_4() -> (Outcome, Vec<FoldResult>) {
    let start = Instant::now();
    let runs: Vec<FoldResult> = (0..SEEDS).map(|s| last_fold(&noisy_visual(s, 0.7), s, "full")).collect();
    let took = start.elapsed();
    let wins = runs
        .iter()
        .filter(|r| r.weights[1] < r.weights[0] && r.weights[1] < r.weights[2])
        .count();
    let w_v: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.weights[1])).collect();
    let o = outcome(
        wins >= 9 && took < Duration::from_secs(15 * 60),
        format!("w_V strict minimum in {wins}/{SEEDS} seeds (w_V {}), {:.0?}", w_v.join(" "), took),
    );
    (o, runs)
}

fn criterion_5() -> Outcome {
    let mut wins = 0;
    let mut diffs = Vec::new();
    for s in 0..SEEDS {
        let m = generate(&SynthConfig {
            alignment_strength: 0.9,
            seed: s,
            ..SynthConfig::default()
        })
        .unwrap();
        let on = last_fold(&m, s, "full").test_alignment.unwrap();
        let off = last_fold(&m, s, "no_alignment").test_alignment.unwrap();
        if on - off >= 0.1 {
            wins += 1;
        }
        diffs.push(format!("{:+.3}", on - off));
    }
    outcome(
        wins >= 8,
        format!("alignment gain >= 0.1 in {wins}/{SEEDS} seeds ({})", diffs.join(" ")),
    )
}

fn criterion_6() -> Outcome {
    let m = generate(&SynthConfig {
        n_episodes: 1,
        clips_per_episode: 16,
        ..SynthConfig::default()
    })
    .unwrap();
    let clips: Vec<_> = m.clips.iter().collect();
    let cfg = TrainConfig {
        epochs: 500,
        dropout: 0.0,
        ..TrainConfig::default()
    };
    let a = train(&cfg, m.task, m.dims, &clips, &clips).unwrap();
    let b = train(&cfg, m.task, m.dims, &clips, &clips).unwrap();
    let p = a.predict(&clips).unwrap();
    let train_mse = mse(&p.labels, &p.predictions).unwrap();
    let same = a.history == b.history;
    outcome(
        train_mse < 1e-3 && same,
        format!("16-clip training MSE {train_mse:.2e} after 500 epochs; identical history on rerun: {same}"),
    )
}

fn criterion_7() -> Outcome {
    let mut audit = true;
    for k in 4..=30 {
        let eps: Vec<String> = (1..=k).map(|i| format!("E{i}")).collect();
        for n in 1..=k - 3 {
            for f in rolling_folds(&eps, n).unwrap().folds {
                let t = eps.iter().position(|e| *e == f.test[0]).unwrap();
                audit &= f.is_disjoint() && f.train.iter().chain(&f.val).all(|e| eps.iter().position(|x| x == e).unwrap() < t);
            }
        }
    }
    let eps: Vec<String> = (1..=13).map(|i| format!("E{i}")).collect();
    let fold = &rolling_folds(&eps, 1).unwrap().folds[0];
    let example = fold.train == eps[..10] && fold.val == eps[10..12] && fold.test == eps[12..];
    outcome(
        audit && example,
        format!(
            "leakage audit: {audit}; 13 episodes -> train {}..{}, val {:?}, test {:?}",
            fold.train[0],
            fold.train[fold.train.len() - 1],
            fold.val,
            fold.test
        ),
    )
}

fn criterion_8() -> Outcome {
    let d = mse_decrease(0.006, 0.007).unwrap();
    outcome(close(d, 0.142, 1e-3), format!("mse_decrease(0.006, 0.007) = {d:.6}"))
}

fn criterion_9(full: &[FoldResult]) -> Outcome {
    let variants = ["no_alignment", "equal_weights", "unimodal_a", "unimodal_v", "unimodal_l"];
    let mut wins = 0;
    let mut lost_to = Vec::new();
    for (s, f) in full.iter().enumerate() {
        let m = noisy_visual(s as u64, 0.7);
        let beaten_by: Vec<&str> = variants
            .iter()
            .filter(|v| last_fold(&m, s as u64, v).metric < f.metric)
            .copied()
            .collect();
        if beaten_by.is_empty() {
            wins += 1;
        } else {
            lost_to.push(format!("seed {s}: {}", beaten_by.join(",")));
        }
    }
    outcome(
        wins >= 7,
        format!("full <= every ablation in {wins}/{SEEDS} seeds; beaten [{}]", lost_to.join("; ")),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, o: Outcome| {
        println!("{} criterion {n}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    let (c4, full) = criterion_4();
    report(4, c4);
    report(5, criterion_5());
    report(6, criterion_6());
    report(7, criterion_7());
    report(8, criterion_8());
    report(9, criterion_9(&full));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
