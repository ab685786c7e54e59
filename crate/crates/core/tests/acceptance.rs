//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use mismatch_lab::estimators::{estimate, grad_is, grad_mis, grad_tis, EstimatorConfig, EstimatorKind, Level, Mass};
use mismatch_lab::harness::{base_config, train_with, with_adaptive_scheduler, RunOptions};
use mismatch_lab::monitor::{detect_surge, SurgeDetectorState};
use mismatch_lab::oracle::{self, gradcheck, noise, GridPoint, GridReport, BOUND_SLACK};
use mismatch_lab::policy::{sample_trajectory, FeatureMap, MismatchSpec, PolicyParams, TrainScorer};
use mismatch_lab::scheduler::SchedulerState;
use mismatch_lab::toyenv::MdpSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn theorem_grid(grid: &[GridReport], elapsed: Duration) -> Outcome {
    let violations = grid.iter().filter(|r| !r.theorem.satisfied).count();
    let tvs: std::collections::BTreeSet<u64> = grid.iter().map(|r| r.point.tv_scale.to_bits()).collect();
    let seeds: std::collections::BTreeSet<u64> = grid.iter().map(|r| r.point.param_seed).collect();
    let worst = grid.iter().filter(|r| r.theorem.rhs > 0.0).map(|r| r.theorem.lhs / r.theorem.rhs).fold(0.0, f64::max);
    check(
        violations == 0 && grid.len() >= 90 && tvs.len() >= 5 && seeds.len() >= 3 && elapsed.as_secs() < 60,
        format!(
            "{} points, {} violations, tightest lhs/rhs {worst:.3}, {:.1}s",
            grid.len(),
            violations,
            elapsed.as_secs_f64()
        ),
    )
}

fn lemma1(grid: &[GridReport]) -> Outcome {
    let worst = grid.iter().map(|r| r.lemma1_residual).fold(0.0, f64::max);
    check(worst <= 1e-10, format!("max residual {worst:.3e}"))
}

fn lemma2(grid: &[GridReport]) -> Outcome {
    let mut bad = 0;
    for r in grid {
        let dm = r.theorem.delta_max;
        if r.lemma2_delta.first() != Some(&0.0) {
            bad += 1;
        }
        for (t, d) in r.lemma2_delta.iter().enumerate() {
            if *d > 2.0 * t as f64 * dm + BOUND_SLACK {
                bad += 1;
            }
        }
    }
    check(bad == 0, format!("{bad} violations over {} points", grid.len()))
}

fn seq_is(grid: &[GridReport]) -> Outcome {
    let worst = grid.iter().map(|r| r.seq_is_gap).fold(0.0, f64::max);
    let two_step = oracle::run_grid_point(GridPoint { vocab_size: 3, horizon: 2, tv_scale: 0.5, param_seed: 1 })
        .map_err(|e| e.to_string())?;
    check(
        worst <= 1e-10 && two_step.token_is_gap > 1e-6 && two_step.theorem.delta_max > 0.0,
        format!(
            "max seq-level gap {worst:.3e}; 2-step MDP token-level gap {:.3e} at Delta_max {:.3}",
            two_step.token_is_gap, two_step.theorem.delta_max
        ),
    )
}

fn degeneracies() -> Result<String, String> {
    let run = || -> mismatch_lab::Result<(bool, bool)> {
        let spec = MdpSpec::random(3, 3, Some(0), 2, 0.5, 21)?;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = PolicyParams::random(FeatureMap::hashed(6, 3, 2, true), 3, 1.0, &mut rng)?;
        let matched = MismatchSpec::controlled_tv(0.0, 5);
        let (train, rollout) = (matched.train(), matched.rollout());
        let vanilla = oracle::exact_estimator_expectation(
            &spec,
            &params,
            &train,
            &rollout,
            &EstimatorConfig::new(EstimatorKind::Vanilla),
        )?;
        let mut exact_ok = true;
        for kind in [
            EstimatorKind::Actual,
            EstimatorKind::IsToken,
            EstimatorKind::IsSeq,
            EstimatorKind::TisToken,
            EstimatorKind::TisSeq,
            EstimatorKind::MisToken,
            EstimatorKind::MisSeq,
        ] {
            let e = oracle::exact_estimator_expectation(&spec, &params, &train, &rollout, &EstimatorConfig::new(kind))?;
            exact_ok &= e == vanilla;
        }

        let noisy = MismatchSpec::controlled_tv(0.8, 5);
        let (train, rollout) = (noisy.train(), noisy.rollout());
        let scorer = TrainScorer::new(&params, train);
        let mut inf_ok = true;
        for batch_seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + batch_seed);
            let mut batch = Vec::new();
            for i in 0..32 {
                batch.push(sample_trajectory(&params, &rollout, &train, &spec, i % 2, &mut rng)?);
            }
            let signals: Vec<f64> = batch.iter().map(|t| t.reward as f64 - 0.5).collect();
            for level in [Level::Token, Level::Sequence] {
                let is = grad_is(&batch, &signals, level, &scorer)?.0.vector;
                inf_ok &= grad_tis(&batch, &signals, level, f64::INFINITY, &scorer)?.0.vector == is;
                inf_ok &= grad_mis(&batch, &signals, level, f64::INFINITY, &scorer)?.0.vector == is;
            }
            let cfg = EstimatorConfig::new(EstimatorKind::TisSeq).with_c(f64::INFINITY);
            let via_estimate = estimate(&cfg, &batch, &signals, Mass::Mean, &scorer)?.0.vector;
            inf_ok &= via_estimate == grad_is(&batch, &signals, Level::Sequence, &scorer)?.0.vector;
        }
        Ok((exact_ok, inf_ok))
    };
    let (exact_ok, inf_ok) = run().map_err(|e| e.to_string())?;
    check(
        exact_ok && inf_ok,
        format!("matched engines bitwise equal to vanilla: {exact_ok}; C=inf equals IS on 5 batches: {inf_ok}"),
    )
}

fn scheduler() -> Outcome {
    let mut closed_ok = true;
    for (eta_0, ratio, period) in [(1.0, 0.1, 7), (3e-4, 0.05, 13), (1e-6, 0.1, 204), (0.5, 1.0, 5)] {
        let mut s = SchedulerState::fixed(eta_0, eta_0 * ratio, period).map_err(|e| e.to_string())?;
        for t in 1..=10 * period {
            let lr = s.advance(t).map_err(|e| e.to_string())?;
            let closed = (eta_0 * 2f64.powi(-((t / period) as i32))).max(eta_0 * ratio);
            closed_ok &= lr == closed;
        }
    }
    let mut s = SchedulerState::fixed(1e-6, 1e-6 * 0.1, 204).map_err(|e| e.to_string())?;
    let mut seq = vec![s.eta_t];
    for t in 1..=816 {
        let lr = s.advance(t).map_err(|e| e.to_string())?;
        if t % 204 == 0 {
            seq.push(lr);
        }
    }
    let published = seq == [1e-6, 5e-7, 2.5e-7, 1.25e-7, 1e-7];
    check(closed_ok && published, format!("closed form matches: {closed_ok}; sequence {seq:?}"))
}

fn surge_on_trace(surge_at: u64) -> Result<(u64, u64), String> {
    let mut det = SurgeDetectorState::new(20, 2.5).map_err(|e| e.to_string())?;
    let mut sched = SchedulerState::adaptive(1e-6, 1e-7, 1.8).map_err(|e| e.to_string())?;
    for t in 1..=400u64 {
        let len = if t < surge_at { 1000.0 } else { 3500.0 };
        det = detect_surge(det, t, len);
        if let Some(s) = det.surge_step {
            if !sched.armed() {
                sched.arm_from_surge(s).map_err(|e| e.to_string())?;
            }
        }
        sched.advance(t).map_err(|e| e.to_string())?;
    }
    let step = det.surge_step.ok_or("no surge detected")?;
    Ok((step, sched.t_decay.ok_or("scheduler not armed")?))
}

fn surge() -> Outcome {
    let (s100, t100) = surge_on_trace(100)?;
    let (s90, t90) = surge_on_trace(90)?;
    check(
        s100.abs_diff(100) <= 2 && t100 == 180 && t90 == 162,
        format!("surge {s100} -> T_decay {t100}; surge {s90} -> T_decay {t90}"),
    )
}

fn appendix_a() -> Outcome {
    let start = Instant::now();
    let model = noise::default_model();
    let r = noise::verify_appendix_a(&model, 100_000, 0).map_err(|e| e.to_string())?;
    let noise_slope = r.scaling.noise_slope.ok_or("noise penalty vanished")?;
    let ok = r.inner_product.within
        && r.squared_norm.within
        && (noise_slope - 2.0).abs() <= 0.1
        && (r.scaling.progress_slope - 1.0).abs() <= 0.1
        && start.elapsed().as_secs() < 60;
    check(
        ok,
        format!(
            "inner product {:.2} SE, squared norm {:.2} SE at {} samples; slopes {noise_slope:.3} / {:.3}",
            r.inner_product.residual / r.inner_product.standard_error,
            r.squared_norm.residual / r.squared_norm.standard_error,
            r.samples,
            r.scaling.progress_slope
        ),
    )
}

fn gradient_check() -> Outcome {
    let r = gradcheck::run_gradcheck(200, gradcheck::DEFAULT_STEP, 2024).map_err(|e| e.to_string())?;
    check(
        r.triples >= 100 && r.passed(1e-5),
        format!("{} triples, max relative error {:.3e}", r.triples, r.max_relative_error),
    )
}

fn stabilization() -> Outcome {
    let start = Instant::now();
    let base = base_config();
    let opts = RunOptions::default();
    let b = train_with(&base, opts).map_err(|e| e.to_string())?.log.summary;
    let s = train_with(&with_adaptive_scheduler(base), opts).map_err(|e| e.to_string())?.log.summary;
    let elapsed = start.elapsed();
    let ok = b.collapse_step.is_some()
        && s.collapse_step.is_none()
        && s.final_mismatch < b.final_mismatch
        && elapsed.as_secs() < 300;
    check(
        ok,
        format!(
            "baseline collapse {:?}, mismatch {:.4}; scheduler collapse {:?} (T_decay {:?}), mismatch {:.4}; {:.1}s",
            b.collapse_step,
            b.final_mismatch,
            s.collapse_step,
            s.t_decay,
            s.final_mismatch,
            elapsed.as_secs_f64()
        ),
    )
}

fn determinism() -> Outcome {
    let mut cfg = base_config();
    cfg.total_steps = 80;
    let run = |threads| -> Result<String, String> {
        let out = train_with(&cfg, RunOptions { threads }).map_err(|e| e.to_string())?;
        out.log.to_json().map_err(|e| e.to_string())
    };
    let a = run(None)?;
    let b = run(None)?;
    let c = run(Some(1))?;
    let d = run(Some(4))?;
    check(a == b && a == c && a == d, format!("{} bytes, 4 runs across 1/4/default threads", a.len()))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let grid = match oracle::run_grid(&oracle::default_grid()) {
        Ok(g) => g,
        Err(e) => {
            println!("FAIL grid evaluation: {e}");
            return ExitCode::FAILURE;
        }
    };
    let grid_time = start.elapsed();

    let results: Vec<(&str, Outcome)> = vec![
        ("1 horizon bound grid", theorem_grid(&grid, grid_time)),
        ("2 lemma 1 identity", lemma1(&grid)),
        ("3 lemma 2 drift", lemma2(&grid)),
        ("4 sequence-level IS unbiasedness", seq_is(&grid)),
        ("5 estimator degeneracies", degeneracies()),
        ("6 scheduler exactness", scheduler()),
        ("7 surge heuristic", surge()),
        ("8 noisy-gradient identities", appendix_a()),
        ("9 gradient correctness", gradient_check()),
        ("10 paired-run stabilization", stabilization()),
        ("11 determinism", determinism()),
    ];

    let mut failed = 0;
    for (name, res) in &results {
        match res {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
