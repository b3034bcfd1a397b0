//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each, and
//! exits non-zero if any criterion fails.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use simplex_tuner::objective::{to_minimization, EvalCache, FnSource, Status};
use simplex_tuner::runner::{run_once, CommandTemplate, ScorePattern};
use simplex_tuner::session::{read_report, run_session, write_report, SessionConfig, SessionReport, SourceSpec};
use simplex_tuner::space::{ParamSpec, Point, SearchSpace};
use simplex_tuner::strategies::{exhaustive_search, StrategyKind};
use simplex_tuner::synthetic::{oracle_optimum, Preset, SyntheticModel, SyntheticSource};

/// Relative raw-score gap tolerated between NM and the oracle optimum.
const QUALITY_GAP: f64 = 0.02;
const QUALITY_VARIANTS: u64 = 20;
const QUALITY_REQUIRED: usize = 19;
const MKL_DISTINCT_LIMIT: u64 = 48;
const EIGEN_RATIO_LIMIT: f64 = 0.80;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

/// Model variants drawn uniformly from the stated ranges, one seed per variant.
fn variants() -> Vec<SyntheticModel> {
    (0..QUALITY_VARIANTS)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            SyntheticModel {
                serial_fraction: rng.gen_range(0.0..=0.1),
                graph_parallel_gain: rng.gen_range(0.0..=0.3),
                oversub_exponent: rng.gen_range(0.5..=3.0),
                ..SyntheticModel::default()
            }
        })
        .collect()
}

/// Independent brute force: plain max over every grid point, first wins.
fn brute_force_argmax(model: &SyntheticModel, space: &SearchSpace) -> (Point, f64) {
    let mut best: Option<(Point, f64)> = None;
    for p in space.enumerate() {
        let s = model.throughput(p.values());
        match &best {
            Some((_, b)) if s <= *b => {}
            _ => best = Some((p, s)),
        }
    }
    best.unwrap()
}

fn criterion_1(reports: &mut Vec<SessionReport>) -> Outcome {
    let started = Instant::now();
    let space = SearchSpace::mkl_preset();
    let model = SyntheticModel::default();
    let mut src = SyntheticSource::new(model.clone(), &space).unwrap();
    let out = exhaustive_search(&space, &mut src).map_err(|e| e.to_string())?;
    let (oracle_point, oracle_score) = oracle_optimum(&model, &space).map_err(|e| e.to_string())?;
    let (brute_point, brute_score) = brute_force_argmax(&model, &space);
    let elapsed = started.elapsed();
    let best = out.best_eval();
    let session = run_session(&SessionConfig::synthetic(Preset::Mkl3d, StrategyKind::Exhaustive))
        .map_err(|e| e.to_string())?;
    let same = best.point == oracle_point
        && best.raw_score.map(f64::to_bits) == Some(oracle_score.to_bits())
        && oracle_point == brute_point
        && oracle_score.to_bits() == brute_score.to_bits()
        && out.trace.len() == 196
        && session.best.as_ref().map(|b| &b.point) == Some(&oracle_point);
    reports.push(session);
    check(
        same && elapsed < Duration::from_secs(1),
        format!("exhaustive {} = oracle {} ({oracle_score}), 196 evals, {elapsed:?}", best.point, oracle_point),
        format!(
            "exhaustive {} ({:?}) vs oracle {} ({oracle_score}) in {elapsed:?}",
            best.point, best.raw_score, oracle_point
        ),
    )
}

fn criterion_2(reports: &mut Vec<SessionReport>) -> Outcome {
    let started = Instant::now();
    let space = SearchSpace::mkl_preset();
    let mut within = 0;
    let mut worst_gap: f64 = 0.0;
    let mut misses = Vec::new();
    for (i, model) in variants().into_iter().enumerate() {
        let mut config = SessionConfig::synthetic(Preset::Mkl3d, StrategyKind::Nm);
        config.source = SourceSpec::Synthetic {
            preset: Preset::Mkl3d,
            model: model.clone(),
        };
        let report = run_session(&config).map_err(|e| e.to_string())?;
        let (_, oracle) = brute_force_argmax(&model, &space);
        let best = report.best.as_ref().unwrap().raw_score;
        let gap = (oracle - best) / oracle;
        worst_gap = worst_gap.max(gap);
        if gap <= QUALITY_GAP {
            within += 1;
        } else {
            misses.push(format!("variant {i} gap {:.2}%", 100.0 * gap));
        }
        reports.push(report);
    }
    let elapsed = started.elapsed();
    check(
        within >= QUALITY_REQUIRED && elapsed < Duration::from_secs(5),
        format!(
            "{within}/{QUALITY_VARIANTS} variants within {:.0}% (worst gap {:.2}%), {elapsed:?}",
            100.0 * QUALITY_GAP,
            100.0 * worst_gap
        ),
        format!("{within}/{QUALITY_VARIANTS} within gap, {elapsed:?}; {}", misses.join(", ")),
    )
}

fn criterion_3(reports: &mut Vec<SessionReport>) -> Outcome {
    let report = run_session(&SessionConfig::synthetic(Preset::Mkl3d, StrategyKind::Nm)).map_err(|e| e.to_string())?;
    let d = report.distinct_points_evaluated;
    let msg = format!(
        "{d}/196 distinct points ({:.1}%), stopped: {}",
        100.0 * report.efficiency_ratio,
        report.convergence_reason
    );
    reports.push(report);
    check(d <= MKL_DISTINCT_LIMIT, msg.clone(), msg)
}

fn criterion_4(reports: &mut Vec<SessionReport>) -> Outcome {
    let report = run_session(&SessionConfig::synthetic(Preset::Eigen2d, StrategyKind::Nm)).map_err(|e| e.to_string())?;
    let msg = format!(
        "{}/{} distinct points ({:.1}%), stopped: {}",
        report.distinct_points_evaluated,
        report.space_size,
        100.0 * report.efficiency_ratio,
        report.convergence_reason
    );
    let ok = report.efficiency_ratio <= EIGEN_RATIO_LIMIT;
    reports.push(report);
    check(ok, msg.clone(), msg)
}

fn criterion_5() -> Outcome {
    let space = SearchSpace::mkl_preset();
    let distinct: Vec<Point> = space.enumerate().step_by(17).take(9).collect();
    // 15 queries: all 9 once, then 6 repeats
    let order = [0, 1, 2, 3, 4, 5, 6, 7, 8, 0, 3, 8, 3, 5, 1];
    let mut calls = 0u32;
    let mut src = FnSource::new("counting", |p: &Point| {
        calls += 1;
        p.values().iter().sum::<i64>() as f64
    });
    let mut cache = EvalCache::new();
    let mut hits = 0;
    for &i in &order {
        hits += cache.evaluate(&mut src, &distinct[i]).from_cache as u32;
    }
    drop(src);
    check(
        calls == 9 && hits == 6 && cache.len() == 9,
        format!("15 queries, 9 distinct, {calls} source invocations"),
        format!("15 queries, 9 distinct, {calls} source invocations, {hits} hits"),
    )
}

fn criterion_6() -> Outcome {
    let space = SearchSpace::new(vec![ParamSpec::new("threads", 1, 4, 1)]).unwrap();
    let p = Point::new(vec![2]);
    let sh = |script: &str| CommandTemplate::new(vec!["sh".into(), "-c".into(), script.into()]);

    let mut scored = sh("for i in 1 2 3; do echo \"step $i images/sec: 9$i.0\"; done; echo 'total images/sec: 123.45'");
    scored.score_pattern = ScorePattern::new(r"total images/sec: ([0-9.]+)").unwrap();
    let r = run_once(&scored, &space, &p).map_err(|e| e.to_string())?;
    if r.status() != Status::Ok || r.raw_score() != Some(123.45) {
        return Err(format!("score stub gave {:?} {:?}", r.status(), r.raw_score()));
    }

    let r = run_once(&sh("echo 'total images/sec: 5'; exit 1"), &space, &p).map_err(|e| e.to_string())?;
    if r.status() != Status::RunFailed {
        return Err(format!("failing stub gave {:?}", r.status()));
    }

    let mut sleeper = sh("sleep 5; echo 'total images/sec: 1'");
    sleeper.timeout = Some(Duration::from_secs(1));
    let started = Instant::now();
    let r = run_once(&sleeper, &space, &p).map_err(|e| e.to_string())?;
    let wall = started.elapsed();
    check(
        r.status() == Status::Timeout && wall < Duration::from_secs(2),
        format!("score 123.45 exact, exit 1 -> run_failed, sleep 5 under 1 s timeout -> timeout in {wall:?}"),
        format!("sleeper gave {:?} after {wall:?}", r.status()),
    )
}

fn criterion_7() -> Outcome {
    let space = SearchSpace::mkl_preset();
    let mut models = variants();
    models.push(SyntheticModel::default());
    for (i, model) in models.iter().enumerate() {
        let scores: Vec<(Point, f64)> = space.enumerate().map(|p| {
            let s = model.throughput(p.values());
            (p, s)
        }).collect();
        let argmax = scores
            .iter()
            .fold(None::<&(Point, f64)>, |acc, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            })
            .unwrap();
        let argmin = scores
            .iter()
            .fold(None::<&(Point, f64)>, |acc, x| match acc {
                Some(a) if to_minimization(Some(a.1)) <= to_minimization(Some(x.1)) => Some(a),
                _ => Some(x),
            })
            .unwrap();
        if argmax.0 != argmin.0 {
            return Err(format!("variant {i}: argmax {} != argmin {}", argmax.0, argmin.0));
        }
    }
    Ok(format!("argmax score = argmin 1/score on all 196 points for {} models", models.len()))
}

fn criterion_8() -> Outcome {
    let mut lines = Vec::new();
    for kind in StrategyKind::ALL {
        let mut config = SessionConfig::synthetic(Preset::Mkl3d, kind);
        config.seed = 7;
        if kind == StrategyKind::Random {
            config.max_distinct_evals = Some(40);
        }
        let a = run_session(&config).map_err(|e| e.to_string())?;
        let b = run_session(&config).map_err(|e| e.to_string())?;
        let ja = serde_json::to_vec(&a.without_timings()).unwrap();
        let jb = serde_json::to_vec(&b.without_timings()).unwrap();
        if ja != jb {
            return Err(format!("{kind}: reports differ"));
        }
        lines.push(format!("{kind} ({} bytes)", ja.len()));
    }
    Ok(format!("byte-identical reports: {}", lines.join(", ")))
}

fn criterion_9(reports: &[SessionReport]) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (i, r) in reports.iter().enumerate() {
        let path = dir.path().join(format!("report-{i}.json"));
        write_report(r, &path).map_err(|e| e.to_string())?;
        let back = read_report(&path).map_err(|e| e.to_string())?;
        if &back != r {
            return Err(format!("report {i} changed on round trip"));
        }
    }
    let distinct: HashSet<_> = reports.iter().map(|r| r.config.strategy).collect();
    check(
        reports.len() >= 4 && distinct.len() == 2,
        format!("{} reports round-trip identically", reports.len()),
        format!("only {} reports collected", reports.len()),
    )
}

fn main() {
    let mut reports = Vec::new();
    let results: Vec<(&str, Outcome)> = vec![
        ("1 oracle equivalence", criterion_1(&mut reports)),
        ("2 nm quality", criterion_2(&mut reports)),
        ("3 nm efficiency 3-d", criterion_3(&mut reports)),
        ("4 nm efficiency 2-d", criterion_4(&mut reports)),
        ("5 cache exactness", criterion_5()),
        ("6 runner fidelity", criterion_6()),
        ("7 argmax invariance", criterion_7()),
        ("8 determinism", criterion_8()),
    ];
    let nine = criterion_9(&reports);
    let mut failed = 0;
    for (name, outcome) in results.iter().chain(std::iter::once(&("9 report round-trip", nine))) {
        match outcome {
            Ok(msg) => println!("PASS criterion {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
