//! Acceptance suite. Runs every criterion in order and prints one
//! `criterion N ...: PASS|FAIL` line each; exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use sapkit_core::detmetrics::{average_precision, recall_level, MatchPool, RECALL_POINTS};
use sapkit_core::harness::training::{train, SamplingMode, TrainConfig};
use sapkit_core::harness::{
    evaluate_offline_map_j, evaluate_sap, generate_scenario, make_oracle, pair_streaming, run_stream, AccelerationSpec,
    Detector, EvalOptions, Emission, ObjectSpec, OracleKind, Scenario, ScenarioSpec, StrategyToggles, StreamConfig,
    StreamTrace, VelocityEpisode, DEFAULT_OFFLINE_PAST,
};
use sapkit_core::harness::{DelayModel, FramePolicy};
use sapkit_core::model::{
    forecast, forecast_features, run_gradient_checks, tat_layer, toy_backbone, toy_head, window_partition,
    window_reverse, ModelConfig, ModelParams, OptimizerConfig, TemporalProposal, WindowConfig,
};
use sapkit_core::numerics::Tensor;
use sapkit_core::strategy::{ComponentDelays, PlannerConfig};
use sapkit_core::DetectionSet;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

/// Interpolated AP straight from the definition: for each recall level, the
/// best precision over every cut-off of the ranked list that reaches it.
fn ap_oracle(dets: &[(f64, bool)], num_gt: usize) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].0.partial_cmp(&dets[a].0).unwrap().then(a.cmp(&b)));
    let mut total = 0.0;
    for r in 0..RECALL_POINTS {
        let level = recall_level(r);
        let mut best: f64 = 0.0;
        for cut in 1..=order.len() {
            let tp = order[..cut].iter().filter(|&&i| dets[i].1).count();
            let recall = tp as f64 / num_gt as f64;
            if recall >= level {
                best = best.max(tp as f64 / cut as f64);
            }
        }
        total += best;
    }
    total / RECALL_POINTS as f64
}

fn criterion_1() -> Outcome {
    const SCORES: [f64; 3] = [0.9, 0.6, 0.3];
    let mut instances = 0usize;
    let mut worst: f64 = 0.0;
    for n in 0..=6u32 {
        // each detection: one of 3 scores (ties included) × tp/fp
        for code in 0..6usize.pow(n) {
            let mut c = code;
            let dets: Vec<(f64, bool)> = (0..n)
                .map(|_| {
                    let d = (SCORES[c % 3], (c / 3) % 2 == 1);
                    c /= 6;
                    d
                })
                .collect();
            let tps = dets.iter().filter(|d| d.1).count();
            for num_gt in tps.max(1)..=4 {
                let pool = MatchPool {
                    detections: dets.clone(),
                    num_gt,
                };
                let got = average_precision(&pool);
                ensure(!got.no_ground_truth, || "flagged empty gt".into())?;
                let want = ap_oracle(&dets, num_gt);
                let err = (got.ap - want).abs();
                worst = worst.max(err);
                ensure(err <= 1e-12, || format!("{dets:?} gt={num_gt}: {} vs oracle {want}", got.ap))?;
                instances += 1;
            }
        }
    }
    let empty = average_precision(&MatchPool::new());
    ensure(empty.no_ground_truth && empty.ap == 0.0, || "empty pool not flagged".into())?;
    Ok(format!("{instances} instances, max |Δ| = {worst:e}"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let results = run_gradient_checks(0).map_err(e2s)?;
    let mut parts = Vec::new();
    for r in &results {
        parts.push(format!("{} {:.1e}", r.name, r.max_rel_error));
        ensure(r.max_rel_error < 1e-4, || format!("{} max rel error {}", r.name, r.max_rel_error))?;
    }
    Ok(parts.join(", "))
}

// ---------------------------------------------------------------- 3

fn ramp(shape: &[usize], phase: f64) -> Tensor {
    Tensor::from_fn(shape, |i| (i as f64 * 0.731 + phase).sin())
}

fn criterion_3() -> Outcome {
    // window partition / reverse
    for (shape, win) in [([4, 6, 6, 8], (2, 3, 3)), ([3, 5, 7, 4], (2, 2, 3)), ([1, 4, 4, 2], (4, 4, 4))] {
        let x = ramp(&shape, 0.1);
        let cfg = WindowConfig::new(win.0, win.1, win.2).map_err(e2s)?;
        let (tokens, _) = window_partition(&x, cfg).map_err(e2s)?;
        let back = window_reverse(&tokens, cfg, shape).map_err(e2s)?;
        ensure(back == x, || format!("window roundtrip differs for {shape:?} / {win:?}"))?;
    }

    // bias depends only on relative offsets: shifting every time leaves the
    // layer output unchanged
    let mut cfg = ModelConfig::tiny();
    cfg.window = WindowConfig { t: 2, h: 2, w: 2 };
    let mut params = ModelParams::init(&cfg, 3).map_err(e2s)?;
    for (name, t) in params.tensors.iter_mut() {
        if name.contains("rtpe2") {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = 0.2 * ((i as f64) * 0.9).cos();
            }
        }
    }
    let (gh, gw, c) = (3, 3, cfg.channels);
    let q = ramp(&[2, gh, gw, c], 0.3);
    let k = ramp(&[3, gh, gw, c], 1.1);
    let v = ramp(&[3, gh, gw, c], 2.7);
    let base = tat_layer(&params, 0, &q, &k, &v, &[1, 3], &[-2, -1, 0]).map_err(e2s)?;
    for s in [1, 5, 17] {
        let shifted = tat_layer(&params, 0, &q, &k, &v, &[1 + s, 3 + s], &[-2 + s, -1 + s, s]).map_err(e2s)?;
        ensure(shifted == base, || format!("shift by {s} changed the output"))?;
    }
    let prop = TemporalProposal::new(vec![-4, -1], vec![1, 3]).map_err(e2s)?;
    let table = sapkit_core::model::build_rtpe(&params, 0, &prop, cfg.window).map_err(e2s)?;
    let mut pairs = 0;
    for dt in 0..=3i64 {
        for (dh, dw) in [(0, 0), (1, -1), (-1, 1)] {
            let a = table.lookup((dt, dh, dw), (0, 0, 0)).map_err(e2s)?;
            let b = table.lookup((dt + 2, dh + 1, dw + 1), (2, 1, 1)).map_err(e2s)?;
            ensure(a.is_some() && a == b, || format!("table lookup not shift invariant at dt={dt}"))?;
            pairs += 1;
        }
    }

    // residual identity
    let mut zp = ModelParams::init(&ModelConfig::default(), 4).map_err(e2s)?;
    zp.zero_residual_branches();
    let img = |seed: f64| Tensor::from_fn(&[3, 32, 32], |i| (i as f64 * 0.013 + seed).sin().abs());
    let current = toy_backbone(&zp, &img(0.0)).map_err(e2s)?;
    let prop = TemporalProposal::new(vec![-3, -2, -1], vec![1, 2, 5]).map_err(e2s)?;
    let buffered: Vec<_> = [-3, -2, -1]
        .iter()
        .enumerate()
        .map(|(i, &p)| toy_backbone(&zp, &img(i as f64 + 1.0)).map(|f| f.with_source_index(p)))
        .collect::<Result<_, _>>()
        .map_err(e2s)?;
    for f in forecast_features(&zp, &current, &buffered, &prop).map_err(e2s)? {
        ensure(f.grid == current.grid, || "zeroed branches changed features".into())?;
    }
    let head_now = toy_head(&zp, &current).map_err(e2s)?;
    let out = forecast(&zp, &img(0.0), &buffered, &prop).map_err(e2s)?;
    for (d, &h) in out.detections.iter().zip(&prop.future) {
        ensure(d.boxes == head_now.boxes && d.frame_index == h, || "horizon heads differ from head(F0)".into())?;
    }

    // causal mask: a key later than every query has no influence at all
    let q1 = ramp(&[1, gh, gw, c], 0.5);
    let k_a = ramp(&[3, gh, gw, c], 0.9);
    let v_a = ramp(&[3, gh, gw, c], 1.9);
    let mut k_b = k_a.clone();
    let mut v_b = v_a.clone();
    let late = gh * gw * c;
    for i in 2 * late..3 * late {
        k_b.data_mut()[i] = 50.0 * (i as f64).cos();
        v_b.data_mut()[i] = -80.0 * (i as f64).sin();
    }
    let a = tat_layer(&params, 0, &q1, &k_a, &v_a, &[1], &[-1, 0, 2]).map_err(e2s)?;
    let b = tat_layer(&params, 0, &q1, &k_b, &v_b, &[1], &[-1, 0, 2]).map_err(e2s)?;
    ensure(a == b, || "future key leaked into the output".into())?;
    let c_ = tat_layer(&params, 0, &q1, &k_b, &v_b, &[2], &[-1, 0, 2]).map_err(e2s)?;
    let d_ = tat_layer(&params, 0, &q1, &k_a, &v_a, &[2], &[-1, 0, 2]).map_err(e2s)?;
    ensure(c_ != d_, || "same-time key had no influence".into())?;
    Ok(format!("roundtrip 3 shapes, {pairs} bias pairs, residual and mask exact"))
}

// ---------------------------------------------------------------- 4

fn manual_trace(times: &[f64], num_frames: usize) -> StreamTrace {
    StreamTrace {
        frame_rate: 30.0,
        num_frames,
        delay_factor: 1.0,
        fingerprint: String::new(),
        failure: None,
        loops: Vec::new(),
        emissions: times
            .iter()
            .enumerate()
            .map(|(i, &t)| Emission {
                time: t,
                source_loop: i,
                target: i as i64,
                produced_at: t,
                warmup: false,
                repeated: false,
                detections: DetectionSet::empty(i as i64),
            })
            .collect(),
    }
}

fn check_clock(trace: &StreamTrace) -> Result<usize, String> {
    for l in &trace.loops {
        let t_prime = l.arrival + l.total + l.startup;
        ensure(l.finish == t_prime, || {
            format!("loop {}: finish {} != t + Δt^I + Δt^S = {}", l.loop_index, l.finish, t_prime)
        })?;
    }
    Ok(trace.loops.len())
}

fn criterion_4() -> Outcome {
    let pairing = pair_streaming(&manual_trace(&[0.034, 0.067], 4), 4).map_err(e2s)?;
    let first = &pairing.entries[0].frames;
    ensure(*first == vec![2], || format!("first emission paired with {first:?}"))?;
    ensure(pairing.entries[1].frames == vec![3], || "second emission".into())?;
    ensure(pairing.misses == vec![0, 1], || format!("misses {:?}", pairing.misses))?;

    let spec = ScenarioSpec {
        length: 40,
        ..Default::default()
    };
    let scenario = generate_scenario(&spec, 1).map_err(e2s)?;
    let kind = OracleKind::PerfectCurrent;
    let det = Detector::Oracle(make_oracle(&kind, &scenario).map_err(e2s)?);
    let stream = StreamConfig {
        toggles: StrategyToggles::strategy_off(),
        ..Default::default()
    };
    let trace = run_stream(&det, &scenario, &DelayModel::constant_total(0.034), &stream).map_err(e2s)?;
    let frames: Vec<i64> = trace.loops.iter().map(|l| l.frame).collect();
    let want: Vec<i64> = (0..40).step_by(2).collect();
    ensure(frames == want, || format!("constant 0.034 s processed {frames:?}"))?;

    // clock identity across policies, delay models and toggles
    let mut checked = 0;
    let delays = [
        DelayModel::default(),
        DelayModel::constant_total(0.034),
        DelayModel::table(vec![ComponentDelays::new(0.03, 0.0, 0.0, 0.0), ComponentDelays::new(0.09, 0.0, 0.0, 0.0)]),
        DelayModel::burst(ComponentDelays::new(0.02, 0.01, 0.003, 0.001), 0.3, 4.0, 7),
    ];
    let tiny = ModelParams::init(&ModelConfig::tiny(), 0).map_err(e2s)?;
    let small = generate_scenario(
        &ScenarioSpec {
            width: 32,
            height: 32,
            length: 24,
            size_range: (6.0, 10.0),
            ..Default::default()
        },
        2,
    )
    .map_err(e2s)?;
    let mh = OracleKind::MultiHorizon;
    let oracle = Detector::Oracle(make_oracle(&mh, &scenario).map_err(e2s)?);
    for d in &delays {
        for policy in [FramePolicy::DropMidInference, FramePolicy::LatestAvailable] {
            for toggles in [StrategyToggles::all_on(), StrategyToggles::strategy_off()] {
                let cfg = StreamConfig {
                    toggles,
                    frame_policy: policy,
                    ..Default::default()
                };
                let t = run_stream(&oracle, &scenario, d, &cfg).map_err(e2s)?;
                checked += check_clock(&t)?;
                let mut no_buf = cfg.clone();
                no_buf.toggles.feature_buffer = false;
                let t = run_stream(&Detector::Model(&tiny), &small, &d.clone().with_factor(4.0), &no_buf).map_err(e2s)?;
                checked += check_clock(&t)?;
            }
        }
    }
    Ok(format!("pairing {{2}}, frames 0,2,4,…, clock identity on {checked} loops"))
}

// ---------------------------------------------------------------- 5

/// Objects hidden off-screen until frame `h`, then `velocity` afterwards.
fn appearing_scene(h: usize, velocity: (f64, f64), length: usize) -> Result<Scenario, String> {
    let objects = vec![
        ObjectSpec {
            class_id: 0,
            x: -60.0,
            y: 10.0,
            width: 14.0,
            height: 12.0,
            velocity: (0.0, 0.0),
            episodes: vec![
                VelocityEpisode {
                    start: h - 1,
                    end: h,
                    velocity: (70.0, 0.0),
                },
                VelocityEpisode {
                    start: h,
                    end: length,
                    velocity,
                },
            ],
        },
        ObjectSpec {
            class_id: 1,
            x: 30.0,
            y: -50.0,
            width: 10.0,
            height: 16.0,
            velocity: (0.0, 0.0),
            episodes: vec![
                VelocityEpisode {
                    start: h - 1,
                    end: h,
                    velocity: (0.0, 90.0),
                },
                VelocityEpisode {
                    start: h,
                    end: length,
                    velocity: (-velocity.1, velocity.0),
                },
            ],
        },
    ];
    let spec = ScenarioSpec {
        width: 96,
        height: 96,
        length,
        num_objects: 0,
        objects,
        ..Default::default()
    };
    generate_scenario(&spec, 0).map_err(e2s)
}

fn oracle_sap(kind: &OracleKind, scenario: &Scenario, delays: &DelayModel, stream: &StreamConfig) -> Result<(f64, StreamTrace), String> {
    let det = Detector::Oracle(make_oracle(kind, scenario).map_err(e2s)?);
    let trace = run_stream(&det, scenario, delays, stream).map_err(e2s)?;
    if let Some(f) = &trace.failure {
        return Err(f.message.clone());
    }
    let r = evaluate_sap(&trace, scenario, EvalOptions::default()).map_err(e2s)?;
    Ok((r.ap(), trace))
}

fn criterion_5() -> Outcome {
    let stream = StreamConfig {
        toggles: StrategyToggles::strategy_off(),
        ..Default::default()
    };
    let mut parts = Vec::new();
    for h in 1..=4i64 {
        // each emission stands in for h frames, so only h = 1 can move
        let velocity = if h == 1 { (1.5, 0.5) } else { (0.0, 0.0) };
        let scene = appearing_scene(h as usize, velocity, 40)?;
        let delays = DelayModel::constant_total(h as f64 / 30.0);
        let (ap, trace) = oracle_sap(&OracleKind::PerfectForecast { horizon: h }, &scene, &delays, &stream)?;
        ensure(trace.loops.iter().all(|l| l.startup == 0.0), || format!("h={h}: non-zero start-up"))?;
        ensure(ap == 1.0, || format!("perfect-forecast({h}) sAP = {ap}"))?;
        parts.push(format!("h={h} 1.0"));
    }
    let objects = vec![ObjectSpec {
        class_id: 0,
        x: 4.0,
        y: 20.0,
        width: 8.0,
        height: 8.0,
        velocity: (6.0, 0.0),
        episodes: Vec::new(),
    }];
    let spec = ScenarioSpec {
        width: 96,
        height: 48,
        length: 12,
        num_objects: 0,
        objects,
        ..Default::default()
    };
    let scene = generate_scenario(&spec, 0).map_err(e2s)?;
    let (ap, _) = oracle_sap(&OracleKind::PerfectCurrent, &scene, &DelayModel::constant_total(1.0 / 30.0), &stream)?;
    ensure(ap == 0.0, || format!("perfect-current under 1-frame delay sAP = {ap}"))?;
    parts.push("current@1 frame 0.0".into());
    Ok(parts.join(", "))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let stream = StreamConfig {
        toggles: StrategyToggles::strategy_off(),
        ..Default::default()
    };
    let factors = [1.0, 2.0, 4.0, 8.0, 16.0];
    // every object at the same constant speed, slow enough that sAP_16
    // stays above the chance-match floor
    let spec = ScenarioSpec {
        speed_range: (0.25, 0.25),
        ..Default::default()
    };
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let scene = generate_scenario(&spec, seed).map_err(e2s)?;
        let saps = factors
            .iter()
            .map(|&d| oracle_sap(&OracleKind::PerfectCurrent, &scene, &DelayModel::default().with_factor(d), &stream).map(|r| r.0))
            .collect::<Result<Vec<_>, _>>()?;
        let mono = saps.windows(2).all(|w| w[0] >= w[1]);
        let strict = saps.windows(2).filter(|w| w[0] > w[1]).count();
        ensure(mono && strict >= 2, || format!("seed {seed}: {saps:?}"))?;
        lines.push(format!("seed {seed} {saps:.3?}"));
    }
    Ok(lines.join("; "))
}

// ---------------------------------------------------------------- 7

fn bimodal() -> DelayModel {
    DelayModel::table(vec![ComponentDelays::new(0.03, 0.0, 0.0, 0.0), ComponentDelays::new(0.09, 0.0, 0.0, 0.0)])
}

fn adaptive_stream(stride: Option<i64>) -> StreamConfig {
    StreamConfig {
        toggles: StrategyToggles::all_on(),
        planner: PlannerConfig {
            max_future: 4,
            future_stride: stride,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn criterion_7() -> Outcome {
    let fixed = StreamConfig {
        toggles: StrategyToggles::strategy_off(),
        ..Default::default()
    };
    let mut lines = Vec::new();
    let mut worst_margin = f64::INFINITY;
    for seed in 0..3u64 {
        let scene = generate_scenario(&ScenarioSpec::default(), seed).map_err(e2s)?;
        let (adaptive, _) = oracle_sap(&OracleKind::MultiHorizon, &scene, &bimodal(), &adaptive_stream(Some(1)))?;
        let mut best_fixed: f64 = 0.0;
        let mut fixed_saps = Vec::new();
        for h in 1..=4 {
            let (s, _) = oracle_sap(&OracleKind::PerfectForecast { horizon: h }, &scene, &bimodal(), &fixed)?;
            best_fixed = best_fixed.max(s);
            fixed_saps.push(s);
        }
        let margin = adaptive - best_fixed;
        worst_margin = worst_margin.min(margin);
        let (derived, _) = oracle_sap(&OracleKind::MultiHorizon, &scene, &bimodal(), &adaptive_stream(None))?;
        let burst = DelayModel::burst(ComponentDelays::new(0.03, 0.0, 0.0, 0.0), 0.5, 3.0, seed);
        let (burst_ad, _) = oracle_sap(&OracleKind::MultiHorizon, &scene, &burst, &adaptive_stream(Some(1)))?;
        let burst_fixed = (1..=4)
            .map(|h| oracle_sap(&OracleKind::PerfectForecast { horizon: h }, &scene, &burst, &fixed).map(|r| r.0))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .fold(0.0, f64::max);
        lines.push(format!(
            "seed {seed}: adaptive {adaptive:.4} vs fixed {fixed_saps:.4?} (derived stride {derived:.4}, burst {burst_ad:.4} vs {burst_fixed:.4})"
        ));
        ensure(margin >= 0.01, || format!("{} margin {margin:.4}", lines.last().unwrap()))?;
    }
    Ok(format!("min margin {worst_margin:.4}; {}", lines.join("; ")))
}

// ---------------------------------------------------------------- 8 and 9

fn model_scenario() -> ScenarioSpec {
    ScenarioSpec {
        width: 64,
        height: 64,
        length: 60,
        num_objects: 4,
        size_range: (10.0, 18.0),
        speed_range: (0.2, 0.5),
        acceleration: Some(AccelerationSpec::default()),
        ..Default::default()
    }
}

fn train_config(sampling: SamplingMode, use_rtpe: bool) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            use_rtpe,
            ..ModelConfig::default()
        },
        scenario: model_scenario(),
        num_scenarios: 16,
        steps: 800,
        batch_size: 8,
        seed: 0,
        sampling,
        optimizer: OptimizerConfig {
            lr: 0.02,
            momentum: 0.9,
            grad_clip: Some(1.0),
        },
        ..TrainConfig::default()
    }
}

fn trained(cell: &'static OnceLock<ModelParams>, label: &str, cfg: TrainConfig) -> &'static ModelParams {
    cell.get_or_init(|| {
        let t = Instant::now();
        let out = train(&cfg).expect("training");
        let l = out.losses();
        let tail = &l[l.len().saturating_sub(50)..];
        println!(
            "    trained {label}: {} steps in {:.0}s, loss {:.3} -> {:.3}",
            l.len(),
            t.elapsed().as_secs_f64(),
            l[..50.min(l.len())].iter().sum::<f64>() / 50f64.min(l.len() as f64),
            tail.iter().sum::<f64>() / tail.len() as f64
        );
        out.params
    })
}

fn mixed_model() -> &'static ModelParams {
    static CELL: OnceLock<ModelParams> = OnceLock::new();
    trained(&CELL, "mixed", train_config(SamplingMode::Mixed, true))
}

fn fixed_model() -> &'static ModelParams {
    static CELL: OnceLock<ModelParams> = OnceLock::new();
    trained(&CELL, "fixed", train_config(SamplingMode::Fixed { horizon: 1 }, true))
}

fn no_rtpe_model() -> &'static ModelParams {
    static CELL: OnceLock<ModelParams> = OnceLock::new();
    trained(&CELL, "rtpe-off", train_config(SamplingMode::Mixed, false))
}

fn eval_scenes() -> &'static Vec<Scenario> {
    static CELL: OnceLock<Vec<Scenario>> = OnceLock::new();
    CELL.get_or_init(|| {
        (0..8)
            .map(|i| generate_scenario(&model_scenario(), 900_000 + i).expect("scenario"))
            .collect()
    })
}

fn mean_map(params: &ModelParams, j: i64) -> Result<f64, String> {
    let scenes = eval_scenes();
    let mut total = 0.0;
    for s in scenes {
        total += evaluate_offline_map_j(&Detector::Model(params), s, j, &DEFAULT_OFFLINE_PAST)
            .map_err(e2s)?
            .ap();
    }
    Ok(total / scenes.len() as f64)
}

const HORIZONS: [i64; 5] = [1, 2, 4, 8, 16];

fn map_table(params: &ModelParams) -> Result<BTreeMap<i64, f64>, String> {
    HORIZONS.iter().map(|&j| mean_map(params, j).map(|v| (j, v))).collect()
}

fn mixed_table() -> Result<&'static BTreeMap<i64, f64>, String> {
    static CELL: OnceLock<BTreeMap<i64, f64>> = OnceLock::new();
    if let Some(t) = CELL.get() {
        return Ok(t);
    }
    let t = map_table(mixed_model())?;
    Ok(CELL.get_or_init(|| t))
}

fn criterion_8() -> Outcome {
    let mixed = mixed_table()?;
    let fixed = map_table(fixed_model())?;
    let fmt = |t: &BTreeMap<i64, f64>| t.iter().map(|(j, v)| format!("{j}:{v:.3}")).collect::<Vec<_>>().join(" ");
    let detail = format!("mixed [{}] fixed [{}]", fmt(mixed), fmt(&fixed));
    ensure(mixed[&8] > fixed[&8] && mixed[&16] > fixed[&16], || detail.clone())?;
    Ok(detail)
}

fn model_sap(params: &ModelParams, delays: &DelayModel, stream: &StreamConfig, scenes: usize) -> Result<(f64, f64), String> {
    let mut ap = 0.0;
    let mut delay = 0.0;
    for s in &eval_scenes()[..scenes] {
        let trace = run_stream(&Detector::Model(params), s, delays, stream).map_err(e2s)?;
        if let Some(f) = &trace.failure {
            return Err(f.message.clone());
        }
        ap += evaluate_sap(&trace, s, EvalOptions::default()).map_err(e2s)?.ap();
        delay += trace.loops.iter().map(|l| l.total).sum::<f64>() / trace.loops.len() as f64;
    }
    Ok((ap / scenes as f64, delay / scenes as f64))
}

fn criterion_9() -> Outcome {
    let model = mixed_model();
    let on = StreamConfig::default();
    let mut off = on.clone();
    off.toggles.feature_buffer = false;
    let (sap_on, d_on) = model_sap(model, &DelayModel::default(), &on, 4)?;
    let (sap_off, d_off) = model_sap(model, &DelayModel::default(), &off, 4)?;
    let buffer = format!("buffer on {sap_on:.4} ({:.1} ms) vs off {sap_off:.4} ({:.1} ms)", d_on * 1e3, d_off * 1e3);

    let mut no_plan = on.clone();
    no_plan.toggles.planner = false;
    let (plan_on, _) = model_sap(model, &bimodal(), &on, 4)?;
    let (plan_off, _) = model_sap(model, &bimodal(), &no_plan, 4)?;
    let planner = format!("planner on {plan_on:.4} vs off {plan_off:.4}");

    let mean = |t: &BTreeMap<i64, f64>| t.values().sum::<f64>() / t.len() as f64;
    let rtpe_on = mean(mixed_table()?);
    let rtpe_off = mean(&map_table(no_rtpe_model())?);
    let rtpe = format!("rtpe on {rtpe_on:.4} vs off {rtpe_off:.4} (mean mAP_j)");

    let detail = format!("{buffer}; {planner}; {rtpe}");
    ensure(sap_off < sap_on, || format!("buffer: {detail}"))?;
    ensure(plan_on >= plan_off, || format!("planner: {detail}"))?;
    ensure(rtpe_on >= rtpe_off, || format!("rtpe: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 10

const CLI_CONFIG: &str = r#"
[scenario]
width = 32
height = 32
length = 30
size_range = [6.0, 10.0]
num_objects = 2

[train]
steps = 4
batch_size = 2
num_scenarios = 2

[train.model]
channels = 8
layers = 1
heads = 1
rtpe_hidden = 4
window = { t = 2, h = 2, w = 2 }

[train.scenario]
width = 32
height = 32
length = 48
size_range = [6.0, 10.0]
num_objects = 2

[eval]
horizons = [1, 2]
delay_factors = [1.0, 2.0]

[sweep]
workers = 2

[[sweep.methods]]
name = "current"
detector = { oracle = { kind = "perfect_current" } }

[[sweep.methods]]
name = "model"
detector = { checkpoint = "model/checkpoint.json" }
"#;

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sapkit"))
        .current_dir(dir)
        .env_remove("SAPKIT_OUT_DIR")
        .args(args)
        .output()
        .map_err(e2s)?;
    ensure(out.status.success(), || {
        format!("sapkit {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim())
    })
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let d = tmp.path();
    fs::write(d.join("run.toml"), CLI_CONFIG).map_err(e2s)?;
    run_cli(d, &["train", "--config", "run.toml", "--out-dir", "model"])?;
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("train", vec!["train"]),
        ("simulate", vec!["simulate", "--checkpoint", "model/checkpoint.json"]),
        ("simulate-oracle", vec!["simulate"]),
        ("evaluate", vec!["evaluate", "--checkpoint", "model/checkpoint.json"]),
        ("sweep", vec!["sweep"]),
        ("ablate", vec!["ablate", "--checkpoint", "model/checkpoint.json"]),
        ("gradcheck", vec!["gradcheck"]),
    ];
    let mut files = 0;
    for (name, args) in &commands {
        let mut dirs = Vec::new();
        for rep in 0..2 {
            let out = format!("{name}-{rep}");
            let mut full = args.clone();
            full.extend(["--config", "run.toml", "--seed", "3", "--out-dir", &out]);
            run_cli(d, &full)?;
            dirs.push(d.join(out));
        }
        let mut names: Vec<_> = fs::read_dir(&dirs[0]).map_err(e2s)?.map(|e| e.unwrap().file_name()).collect();
        names.sort();
        ensure(!names.is_empty(), || format!("{name} wrote nothing"))?;
        for n in &names {
            let a = fs::read(dirs[0].join(n)).map_err(e2s)?;
            let b = fs::read(dirs[1].join(n)).map_err(|e| format!("{name}/{n:?}: {e}"))?;
            ensure(a == b, || format!("{name}: {n:?} differs between runs"))?;
            files += 1;
        }
        let count = fs::read_dir(&dirs[1]).map_err(e2s)?.count();
        ensure(count == names.len(), || format!("{name}: file sets differ"))?;
    }
    // evaluate on a saved trace as well
    for rep in 0..2 {
        run_cli(
            d,
            &["evaluate", "--config", "run.toml", "--seed", "3", "--trace", "simulate-0/trace.jsonl", "--out-dir", &format!("trace-{rep}")],
        )?;
    }
    ensure(
        fs::read(d.join("trace-0/results.jsonl")).map_err(e2s)? == fs::read(d.join("trace-1/results.jsonl")).map_err(e2s)?,
        || "evaluate --trace differs".into(),
    )?;
    Ok(format!("{} commands, {files} files byte-identical", commands.len() + 1))
}

// ----------------------------------------------------------------

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("metric kernel matches exhaustive oracle", criterion_1),
        ("gradient checks", criterion_2),
        ("structural identities", criterion_3),
        ("streaming protocol exactness", criterion_4),
        ("oracle sAP extremes", criterion_5),
        ("delay-factor monotonicity", criterion_6),
        ("adaptive strategy dominance", criterion_7),
        ("mixed-speed training trend", criterion_8),
        ("ablation structure", criterion_9),
        ("determinism", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let suite = Instant::now();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|a| a == &n.to_string()) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} {name}: PASS ({secs:.1}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({secs:.1}s) {detail}");
            }
        }
    }
    println!("acceptance: {failed} failed, {:.0}s total", suite.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
