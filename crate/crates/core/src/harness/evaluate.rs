use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::detector::Detector;
use super::scenario::Scenario;
use super::stream::StreamTrace;
use crate::detmetrics::{evaluate_pairs, APReport, DetectionSet, EvalPair};
use crate::error::{Error, Result};
use crate::model::{forecast_features, toy_backbone, toy_head, TemporalProposal};
use crate::timebase::ceil_frame;

/// Ground-truth frames scored against one emission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingEntry {
    pub emission: usize,
    pub frames: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Pairing {
    /// One entry per emission, in emission order.
    pub entries: Vec<PairingEntry>,
    /// Frames before the first emission.
    pub misses: Vec<i64>,
}

/// Assign every frame to the latest emission whose `⌈t'·k⌉` is at or before
/// it. With emissions `t'₁ < t'₂` the first one covers `⌈t'₁k⌉ ..= ⌊t'₂k⌋`,
/// except that a frame landing exactly on `t'₂` goes to the second.
pub fn pair_streaming(trace: &StreamTrace, num_frames: usize) -> Result<Pairing> {
    let k = trace.frame_rate;
    if let Some(w) = trace.emissions.windows(2).find(|w| w[1].time < w[0].time) {
        return Err(Error::Contract(format!(
            "emissions out of order: {} after {}",
            w[1].time, w[0].time
        )));
    }
    let starts: Vec<i64> = trace.emissions.iter().map(|e| ceil_frame(e.time, k)).collect();
    let mut entries: Vec<PairingEntry> = (0..starts.len())
        .map(|emission| PairingEntry {
            emission,
            frames: Vec::new(),
        })
        .collect();
    let mut misses = Vec::new();
    for f in 0..num_frames as i64 {
        let owner = starts.partition_point(|&s| s <= f);
        match owner.checked_sub(1) {
            Some(e) => entries[e].frames.push(f),
            None => misses.push(f),
        }
    }
    Ok(Pairing { entries, misses })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Score frames covered by cold-start emissions instead of skipping them.
    pub include_warmup: bool,
}

/// Scored run: AP summary, how frames were paired, and a config fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `sAP`, `sAP_<d>` or `mAP_<j>`.
    pub metric: String,
    pub report: APReport,
    pub pairing: Vec<PairingEntry>,
    pub misses: Vec<i64>,
    /// Frames left out of scoring (warm-up).
    pub excluded: Vec<i64>,
    pub fingerprint: String,
}

fn number_label(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

impl EvalResult {
    /// Headline AP (mean over IoU thresholds).
    pub fn ap(&self) -> f64 {
        self.report.ap_mean
    }

    /// Flat record for export: one key per AP field.
    pub fn record(&self) -> BTreeMap<String, serde_json::Value> {
        use serde_json::json;
        let r = &self.report;
        let mut m = BTreeMap::new();
        m.insert("metric".into(), json!(self.metric));
        m.insert("fingerprint".into(), json!(self.fingerprint));
        m.insert("ap".into(), json!(r.ap_mean));
        for (pct, v) in &r.ap_per_iou {
            m.insert(format!("ap{pct}"), json!(v));
        }
        m.insert("ap_small".into(), json!(r.ap_small));
        m.insert("ap_medium".into(), json!(r.ap_medium));
        m.insert("ap_large".into(), json!(r.ap_large));
        m.insert("frames_paired".into(), json!(self.pairing.iter().map(|p| p.frames.len()).sum::<usize>()));
        m.insert("frames_missed".into(), json!(self.misses.len()));
        m.insert("frames_excluded".into(), json!(self.excluded.len()));
        m.insert("flags".into(), json!(r.flags.join(";")));
        m
    }
}

/// Streaming AP of a trace.
pub fn evaluate_sap(trace: &StreamTrace, scenario: &Scenario, opts: EvalOptions) -> Result<EvalResult> {
    if trace.num_frames != scenario.len() {
        return Err(Error::Contract(format!(
            "trace covers {} frames, scenario has {}",
            trace.num_frames,
            scenario.len()
        )));
    }
    let pairing = pair_streaming(trace, scenario.len())?;
    let empty: Vec<DetectionSet> = pairing
        .misses
        .iter()
        .map(|&f| DetectionSet::empty(f))
        .collect();
    let mut pairs = Vec::new();
    let mut excluded = Vec::new();
    for entry in &pairing.entries {
        let e = &trace.emissions[entry.emission];
        if e.warmup && !opts.include_warmup {
            excluded.extend(&entry.frames);
            continue;
        }
        for &f in &entry.frames {
            pairs.push(EvalPair {
                preds: &e.detections,
                gts: &scenario.ground_truth[f as usize],
            });
        }
    }
    for (i, &f) in pairing.misses.iter().enumerate() {
        pairs.push(EvalPair {
            preds: &empty[i],
            gts: &scenario.ground_truth[f as usize],
        });
    }
    let metric = if trace.delay_factor == 1.0 {
        "sAP".to_string()
    } else {
        format!("sAP_{}", number_label(trace.delay_factor))
    };
    Ok(EvalResult {
        metric,
        report: evaluate_pairs(&pairs),
        pairing: pairing.entries,
        misses: pairing.misses,
        excluded,
        fingerprint: trace.fingerprint.clone(),
    })
}

/// Past offsets used for offline forecasting when none are given.
pub const DEFAULT_OFFLINE_PAST: [i64; 4] = [-8, -4, -2, -1];

/// Offline forecasting accuracy `j` frames ahead, no delay simulation.
///
/// Every frame `i` with `i + min(past) >= 0` and `i + j` inside the clip
/// predicts frame `i + j` and is scored against `O_{i+j}`.
pub fn evaluate_offline_map_j(detector: &Detector<'_>, scenario: &Scenario, j: i64, past: &[i64]) -> Result<EvalResult> {
    if j < 1 {
        return Err(Error::Config(format!("horizon must be >= 1, got {j}")));
    }
    let proposal = TemporalProposal::new(past.to_vec(), vec![j])?;
    let earliest = -proposal.past[0];
    let len = scenario.len() as i64;
    let frames: Vec<i64> = (earliest..len - j).collect();

    let features = match detector {
        Detector::Model(params) => scenario
            .frames
            .iter()
            .enumerate()
            .map(|(i, img)| Ok(toy_backbone(params, img)?.with_source_index(i as i64)))
            .collect::<Result<Vec<_>>>()?,
        Detector::Oracle(_) => Vec::new(),
    };
    let mut preds = Vec::with_capacity(frames.len());
    for &i in &frames {
        let det = match detector {
            Detector::Oracle(o) => o
                .predict(i, &proposal)
                .into_iter()
                .next()
                .map(|(_, d)| d)
                .unwrap_or_default(),
            Detector::Model(params) => {
                let cur = &features[i as usize];
                let buffered: Vec<_> = proposal
                    .past
                    .iter()
                    .map(|&p| features[(i + p) as usize].with_source_index(p))
                    .collect();
                let future = forecast_features(params, &cur.with_source_index(0), &buffered, &proposal)?;
                toy_head(params, &future[0])?
            }
        };
        preds.push(det.with_frame_index(i + j));
    }
    let pairs: Vec<EvalPair<'_>> = frames
        .iter()
        .zip(&preds)
        .map(|(&i, p)| EvalPair {
            preds: p,
            gts: &scenario.ground_truth[(i + j) as usize],
        })
        .collect();
    let fingerprint = super::fingerprint(&serde_json::json!({
        "scenario": scenario.spec,
        "scenario_seed": scenario.seed,
        "horizon": j,
        "past": proposal.past,
        "detector": detector.describe(),
    }))?;
    Ok(EvalResult {
        metric: format!("mAP_{j}"),
        report: evaluate_pairs(&pairs),
        pairing: Vec::new(),
        misses: Vec::new(),
        excluded: Vec::new(),
        fingerprint,
    })
}
