//! Discrete-event simulation of one detector on one video stream.
//!
//! Frame `i` arrives at `i/k`. A loop picks a frame, runs for the sampled
//! delay and emits at `t' = start + Σ delays`. Loops never overlap.

use serde::{Deserialize, Serialize};

use super::delay::DelayModel;
use super::detector::{model_predict, Detector, PastSource};
use super::scenario::Scenario;
use crate::detmetrics::DetectionSet;
use crate::error::{Error, Result};
use crate::model::{FeatureMap, TemporalProposal};
use crate::strategy::{ema_update, plan, ComponentDelays, DelayEstimate, FeatureBuffer, OutputBuffer, PlannerConfig};
use crate::timebase::{ceil_frame, floor_frame, frame_time};

/// Which frame the next loop starts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FramePolicy {
    /// Frames arriving while a loop runs are dropped; the next loop waits
    /// for the first frame that arrives at or after the finish time.
    DropMidInference,
    /// The next loop starts at the finish time on the newest frame that has
    /// arrived by then, which may lag (start-up delay).
    LatestAvailable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyToggles {
    /// Delay-aware proposal planning; off uses the fixed proposal.
    pub planner: bool,
    /// Cache past features; off recomputes every past frame.
    pub feature_buffer: bool,
    /// Buffer every horizon and dispatch per frame; off emits the first
    /// horizon at the finish time.
    pub output_buffer: bool,
}

impl Default for StrategyToggles {
    fn default() -> Self {
        Self::all_on()
    }
}

impl StrategyToggles {
    pub fn all_on() -> Self {
        Self {
            planner: true,
            feature_buffer: true,
            output_buffer: true,
        }
    }

    /// Raw detector output, no planning or dispatch.
    pub fn strategy_off() -> Self {
        Self {
            planner: false,
            feature_buffer: true,
            output_buffer: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub toggles: StrategyToggles,
    pub planner: PlannerConfig,
    pub buffer_capacity: usize,
    pub frame_policy: FramePolicy,
    /// Proposal used when the planner is off.
    pub fixed_proposal: TemporalProposal,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            toggles: StrategyToggles::default(),
            planner: PlannerConfig::default(),
            buffer_capacity: 8,
            frame_policy: FramePolicy::DropMidInference,
            fixed_proposal: TemporalProposal {
                past: vec![-3, -2, -1],
                future: vec![1],
            },
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        self.planner.validate()?;
        self.fixed_proposal
            .validate()
            .map_err(|e| Error::Config(format!("fixed_proposal: {e}")))?;
        if self.buffer_capacity == 0 {
            return Err(Error::Config("buffer_capacity must be >= 1".into()));
        }
        Ok(())
    }
}

/// One inference loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub loop_index: usize,
    pub frame: i64,
    /// Nominal arrival time of `frame`.
    pub arrival: f64,
    pub start: f64,
    /// `start - arrival`.
    pub startup: f64,
    /// Sampled stage delays, factor applied.
    pub delays: ComponentDelays,
    /// Backbone time spent recomputing past features missing from the buffer.
    pub recompute: f64,
    /// Absolute indices of recomputed past frames.
    pub recomputed: Vec<i64>,
    /// `delays.total() + recompute`.
    pub total: f64,
    pub finish: f64,
    /// Estimate the planner used (`None` before the first loop completes).
    pub estimate: Option<DelayEstimate>,
    pub proposal: TemporalProposal,
    pub synthetic_past: bool,
    /// Cold-start loop of a feature-consuming detector.
    pub warmup: bool,
    /// Absolute targets this loop produced predictions for.
    pub targets: Vec<i64>,
    /// Feature buffer contents after this loop.
    pub buffer: Vec<i64>,
}

/// A detection set becoming the standing output at `time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub time: f64,
    pub source_loop: usize,
    /// Absolute frame the prediction was made for.
    pub target: i64,
    /// Finish time of the loop that produced it.
    pub produced_at: f64,
    pub warmup: bool,
    /// Re-emission of the previous output because nothing was dispatchable.
    pub repeated: bool,
    pub detections: DetectionSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub loop_index: usize,
    pub frame: i64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamTrace {
    pub frame_rate: f64,
    pub num_frames: usize,
    pub delay_factor: f64,
    /// Identity of scenario, delays, stream config and detector.
    pub fingerprint: String,
    pub failure: Option<Failure>,
    pub loops: Vec<LoopRecord>,
    pub emissions: Vec<Emission>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum TraceLine {
    Stream {
        frame_rate: f64,
        num_frames: usize,
        delay_factor: f64,
        fingerprint: String,
        failure: Option<Failure>,
    },
    Loop(LoopRecord),
    Emit(Emission),
}

impl StreamTrace {
    /// One JSON object per line: a `stream` header, then `loop` records,
    /// then `emit` records.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let header = TraceLine::Stream {
            frame_rate: self.frame_rate,
            num_frames: self.num_frames,
            delay_factor: self.delay_factor,
            fingerprint: self.fingerprint.clone(),
            failure: self.failure.clone(),
        };
        out.push_str(&serde_json::to_string(&header)?);
        out.push('\n');
        for l in &self.loops {
            out.push_str(&serde_json::to_string(&TraceLine::Loop(l.clone()))?);
            out.push('\n');
        }
        for e in &self.emissions {
            out.push_str(&serde_json::to_string(&TraceLine::Emit(e.clone()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut trace: Option<StreamTrace> = None;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: TraceLine = serde_json::from_str(line)?;
            match (parsed, trace.as_mut()) {
                (
                    TraceLine::Stream {
                        frame_rate,
                        num_frames,
                        delay_factor,
                        fingerprint,
                        failure,
                    },
                    None,
                ) => {
                    trace = Some(StreamTrace {
                        frame_rate,
                        num_frames,
                        delay_factor,
                        fingerprint,
                        failure,
                        loops: Vec::new(),
                        emissions: Vec::new(),
                    })
                }
                (TraceLine::Loop(l), Some(t)) => t.loops.push(l),
                (TraceLine::Emit(e), Some(t)) => t.emissions.push(e),
                _ => return Err(Error::Contract(format!("unexpected trace line {}", n + 1))),
            }
        }
        trace.ok_or_else(|| Error::Contract("trace has no header".into()))
    }
}

/// A finished loop's predictions waiting for the dispatcher.
#[derive(Debug, Clone)]
struct Pending {
    source_loop: usize,
    warmup: bool,
    detections: DetectionSet,
}

struct Produced {
    finish: f64,
    source_loop: usize,
    warmup: bool,
    predictions: Vec<(i64, DetectionSet)>,
}

/// Simulate `detector` over `scenario`.
///
/// A detector error stops the simulation; the trace keeps everything up to
/// that loop and records the failure.
pub fn run_stream(
    detector: &Detector<'_>,
    scenario: &Scenario,
    delays: &DelayModel,
    cfg: &StreamConfig,
) -> Result<StreamTrace> {
    delays.validate()?;
    cfg.validate()?;
    if scenario.is_empty() {
        return Err(Error::Config("scenario has no frames".into()));
    }
    let k = scenario.frame_rate();
    let len = scenario.len() as i64;
    let toggles = cfg.toggles;

    let mut trace = StreamTrace {
        frame_rate: k,
        num_frames: scenario.len(),
        delay_factor: delays.factor,
        fingerprint: super::fingerprint(&serde_json::json!({
            "scenario": scenario.spec,
            "scenario_seed": scenario.seed,
            "delays": delays,
            "stream": cfg,
            "detector": detector.describe(),
        }))?,
        failure: None,
        loops: Vec::new(),
        emissions: Vec::new(),
    };
    let mut features: FeatureBuffer<Option<FeatureMap>> = FeatureBuffer::new(cfg.buffer_capacity)?;
    let mut estimate: Option<DelayEstimate> = None;
    let mut produced: Vec<Produced> = Vec::new();
    let (mut frame, mut start) = (0i64, 0.0f64);

    for n in 0.. {
        let arrival = frame_time(frame, k);
        let startup = (start - arrival).max(0.0);

        let (proposal, synthetic_past) = if toggles.planner {
            let available: Vec<i64> = if toggles.feature_buffer {
                features.indices()
            } else {
                ((frame + cfg.planner.clip_min).max(0)..frame).collect()
            };
            let p = plan(&available, estimate.as_ref(), frame, &cfg.planner)?;
            (p.proposal, p.synthetic_past)
        } else {
            let p = cfg.fixed_proposal.clone();
            let synthetic = p.past.iter().all(|&o| frame + o < 0);
            (p, synthetic)
        };
        let sources: Vec<PastSource> = proposal
            .past
            .iter()
            .map(|&o| {
                let abs = frame + o;
                if abs < 0 || (toggles.planner && synthetic_past) {
                    PastSource::Synthetic
                } else if toggles.feature_buffer && features.get(abs).is_some() {
                    PastSource::Buffered
                } else {
                    PastSource::Recomputed
                }
            })
            .collect();
        let recomputed: Vec<i64> = proposal
            .past
            .iter()
            .zip(&sources)
            .filter(|(_, s)| detector.uses_features() && **s == PastSource::Recomputed)
            .map(|(&o, _)| frame + o)
            .collect();

        let sampled = delays.sample(n);
        let recompute = sampled.backbone * recomputed.len() as f64;
        let total = sampled.total() + recompute;
        // t' = t + Δt^I + Δt^S, summed in that order so records reproduce it
        let finish = arrival + total + startup;
        let warmup = synthetic_past && detector.uses_features();

        let result = match detector {
            Detector::Oracle(o) => Ok((None, o.predict(frame, &proposal))),
            Detector::Model(params) => {
                let cached = |abs: i64| features.get(abs).cloned().flatten();
                model_predict(params, scenario, frame, &proposal, &cached, &sources).map(|(f, p)| (Some(f), p))
            }
        };
        let (feature, predictions) = match result {
            Ok(r) => r,
            Err(e) => {
                trace.failure = Some(Failure {
                    loop_index: n,
                    frame,
                    message: e.to_string(),
                });
                break;
            }
        };

        if toggles.feature_buffer {
            features.push(frame, feature)?;
        }
        trace.loops.push(LoopRecord {
            loop_index: n,
            frame,
            arrival,
            start,
            startup,
            delays: sampled,
            recompute,
            recomputed,
            total,
            finish,
            estimate,
            proposal,
            synthetic_past,
            warmup,
            targets: predictions.iter().map(|(t, _)| *t).collect(),
            buffer: features.indices(),
        });

        let mut observed = sampled;
        observed.backbone += recompute;
        estimate = Some(ema_update(estimate.as_ref(), &observed, startup)?);

        if toggles.output_buffer {
            produced.push(Produced {
                finish,
                source_loop: n,
                warmup,
                predictions,
            });
        } else if let Some((target, detections)) = predictions.into_iter().next() {
            trace.emissions.push(Emission {
                time: finish,
                source_loop: n,
                target,
                produced_at: finish,
                warmup,
                repeated: false,
                detections,
            });
        }

        let (next, next_start) = match cfg.frame_policy {
            FramePolicy::DropMidInference => {
                // ceil_frame snaps within FRAME_EPS, so the loop starts on
                // the frame's own timestamp and start-up stays exactly 0
                let j = ceil_frame(finish, k).max(frame + 1);
                (j, frame_time(j, k))
            }
            FramePolicy::LatestAvailable => {
                let j = floor_frame(finish, k);
                if j > frame {
                    (j, finish)
                } else {
                    (frame + 1, frame_time(frame + 1, k).max(finish))
                }
            }
        };
        if next >= len {
            break;
        }
        frame = next;
        start = next_start;
    }

    if toggles.output_buffer {
        trace.emissions = dispatch_all(&produced, k, len);
    }
    Ok(trace)
}

/// Per-frame dispatch: at each frame time, first take in every loop that has
/// finished, then emit the buffered prediction nearest to that frame.
fn dispatch_all(produced: &[Produced], k: f64, len: i64) -> Vec<Emission> {
    let Some(first) = produced.first() else {
        return Vec::new();
    };
    let mut buffer: OutputBuffer<Pending> = OutputBuffer::new();
    let mut emissions: Vec<Emission> = Vec::new();
    let mut next = 0;
    for q in ceil_frame(first.finish, k).max(0)..len {
        while next < produced.len() && ceil_frame(produced[next].finish, k) <= q {
            let p = &produced[next];
            let items = p
                .predictions
                .iter()
                .map(|(t, d)| {
                    (
                        *t,
                        Pending {
                            source_loop: p.source_loop,
                            warmup: p.warmup,
                            detections: d.clone(),
                        },
                    )
                })
                .collect();
            buffer
                .push(items, p.finish)
                .expect("proposal targets are distinct");
            next += 1;
        }
        let time = frame_time(q, k);
        match buffer.dispatch(q) {
            Some(b) => emissions.push(Emission {
                time,
                source_loop: b.value.source_loop,
                target: b.target,
                produced_at: b.produced_at,
                warmup: b.value.warmup,
                repeated: false,
                detections: b.value.detections,
            }),
            None => {
                if let Some(last) = emissions.last().cloned() {
                    emissions.push(Emission {
                        time,
                        repeated: true,
                        ..last
                    });
                }
            }
        }
    }
    emissions
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::detector::{make_oracle, OracleKind};
    use crate::harness::scenario::{generate_scenario, ScenarioSpec};

    fn scenario(len: usize) -> Scenario {
        generate_scenario(
            &ScenarioSpec {
                length: len,
                ..Default::default()
            },
            1,
        )
        .unwrap()
    }

    fn oracle_trace(kind: OracleKind, delays: DelayModel, cfg: StreamConfig, len: usize) -> StreamTrace {
        let s = scenario(len);
        let o = make_oracle(&kind, &s).unwrap();
        run_stream(&Detector::Oracle(o), &s, &delays, &cfg).unwrap()
    }

    fn raw() -> StreamConfig {
        StreamConfig {
            toggles: StrategyToggles::strategy_off(),
            ..Default::default()
        }
    }

    #[test]
    fn zero_delay_processes_every_frame() {
        let t = oracle_trace(OracleKind::PerfectCurrent, DelayModel::constant_total(0.0), raw(), 20);
        assert_eq!(t.loops.iter().map(|l| l.frame).collect::<Vec<_>>(), (0..20).collect::<Vec<_>>());
        assert!(t.loops.iter().all(|l| l.startup == 0.0));
    }

    #[test]
    fn constant_034_skips_alternate_frames() {
        let t = oracle_trace(OracleKind::PerfectCurrent, DelayModel::constant_total(0.034), raw(), 30);
        let frames: Vec<i64> = t.loops.iter().map(|l| l.frame).collect();
        assert_eq!(frames, (0..30).step_by(2).collect::<Vec<_>>());
    }

    #[test]
    fn latest_available_policy_lags() {
        let cfg = StreamConfig {
            frame_policy: FramePolicy::LatestAvailable,
            ..raw()
        };
        let t = oracle_trace(OracleKind::PerfectCurrent, DelayModel::constant_total(0.05), cfg, 30);
        // finish 0.05 -> frame 1 (arrived 0.0333) starts late
        assert_eq!(t.loops[1].frame, 1);
        assert!((t.loops[1].startup - (0.05 - 1.0 / 30.0)).abs() < 1e-12);
    }

    #[test]
    fn clock_sanity_and_no_overlap() {
        let delays = DelayModel::burst(ComponentDelays::new(0.02, 0.01, 0.003, 0.002), 0.3, 3.0, 4);
        let t = oracle_trace(OracleKind::MultiHorizon, delays, StreamConfig::default(), 60);
        for w in t.loops.windows(2) {
            assert!(w[1].start >= w[0].finish - crate::timebase::FRAME_EPS / 30.0);
        }
        for l in &t.loops {
            assert_eq!(l.finish, l.arrival + l.delays.total() + l.recompute + l.startup);
            assert!(l.start >= l.arrival);
        }
    }

    #[test]
    fn dispatch_never_time_travels() {
        let delays = DelayModel::burst(ComponentDelays::new(0.02, 0.01, 0.003, 0.002), 0.4, 4.0, 2);
        let t = oracle_trace(OracleKind::MultiHorizon, delays, StreamConfig::default(), 80);
        assert!(!t.emissions.is_empty());
        for e in &t.emissions {
            assert!(e.produced_at <= e.time + 1e-9, "{e:?}");
            let l = &t.loops[e.source_loop];
            assert_eq!(l.finish, e.produced_at);
        }
    }

    #[test]
    fn factor_doubles_recorded_delays() {
        let base = DelayModel::constant(ComponentDelays::new(0.011, 0.005, 0.002, 0.001));
        let a = oracle_trace(OracleKind::PerfectCurrent, base.clone(), raw(), 40);
        let b = oracle_trace(OracleKind::PerfectCurrent, base.with_factor(2.0), raw(), 40);
        for (x, y) in a.loops.iter().zip(&b.loops) {
            for (u, v) in x.delays.as_array().iter().zip(y.delays.as_array()) {
                assert_eq!(2.0 * u, v);
            }
        }
    }

    #[test]
    fn buffer_off_recomputes_past() {
        let cfg = StreamConfig {
            toggles: StrategyToggles {
                feature_buffer: false,
                ..StrategyToggles::all_on()
            },
            ..Default::default()
        };
        let s = scenario(30);
        let params = crate::model::ModelParams::init(&crate::model::ModelConfig::tiny(), 0).unwrap();
        let t = run_stream(&Detector::Model(&params), &s, &DelayModel::constant_total(0.02), &cfg).unwrap();
        assert!(t.failure.is_none());
        for l in t.loops.iter().skip(1) {
            let real = l.proposal.past.iter().filter(|&&p| l.frame + p >= 0).count();
            assert_eq!(l.recomputed.len(), real);
            assert_eq!(l.recompute, 0.02 * real as f64);
        }
    }

    #[test]
    fn oracles_never_pay_for_recompute() {
        let cfg = StreamConfig {
            toggles: StrategyToggles {
                feature_buffer: false,
                ..StrategyToggles::all_on()
            },
            ..Default::default()
        };
        let t = oracle_trace(OracleKind::MultiHorizon, DelayModel::constant_total(0.02), cfg, 30);
        assert!(t.loops.iter().all(|l| l.recompute == 0.0 && l.recomputed.is_empty()));
    }

    #[test]
    fn jsonl_roundtrip() {
        let t = oracle_trace(OracleKind::MultiHorizon, DelayModel::default(), StreamConfig::default(), 20);
        let text = t.to_jsonl().unwrap();
        assert!(text.lines().next().unwrap().contains("\"event\":\"stream\""));
        assert_eq!(StreamTrace::from_jsonl(&text).unwrap(), t);
    }
}
