use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scenario::Scenario;
use crate::detmetrics::{BBox, DetectionSet};
use crate::error::{Error, Result};
use crate::model::{forecast_features, toy_backbone, toy_head, FeatureMap, ModelParams, TemporalProposal};

/// Synthetic detectors with known behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleKind {
    /// `O_i` for input frame `i`.
    PerfectCurrent,
    /// `O_{i+h}`, empty past the end of the clip.
    PerfectForecast { horizon: i64 },
    /// `O_i` with Gaussian jitter of `sigma` pixels on every corner.
    Noisy { sigma: f64, seed: u64 },
    /// `O_{i+j}` for every future offset `j` of the proposal.
    MultiHorizon,
}

/// An oracle bound to the scenario it reads ground truth from.
#[derive(Debug, Clone, Copy)]
pub struct Oracle<'s> {
    pub kind: &'s OracleKind,
    pub scenario: &'s Scenario,
}

pub fn make_oracle<'s>(kind: &'s OracleKind, scenario: &'s Scenario) -> Result<Oracle<'s>> {
    match kind {
        OracleKind::PerfectForecast { horizon } if *horizon < 0 => {
            return Err(Error::Config(format!("oracle horizon must be >= 0, got {horizon}")));
        }
        OracleKind::Noisy { sigma, .. } if !(*sigma >= 0.0 && sigma.is_finite()) => {
            return Err(Error::Config(format!("oracle sigma must be >= 0, got {sigma}")));
        }
        _ => {}
    }
    Ok(Oracle { kind, scenario })
}

fn as_predictions(gt: Option<&DetectionSet>, frame_index: i64) -> DetectionSet {
    let boxes = gt
        .map(|g| {
            g.boxes
                .iter()
                .map(|b| BBox::pred(b.x_min, b.y_min, b.x_max, b.y_max, b.class_id, 1.0))
                .collect()
        })
        .unwrap_or_default();
    DetectionSet::new(frame_index, boxes)
}

impl Oracle<'_> {
    fn noisy(&self, frame: i64, sigma: f64, seed: u64) -> DetectionSet {
        let exact = as_predictions(self.scenario.gt(frame), frame);
        if sigma == 0.0 {
            return exact;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(frame as u64);
        let normal = Normal::new(0.0, sigma).expect("sigma validated");
        let (w, h) = (self.scenario.spec.width as f64, self.scenario.spec.height as f64);
        let boxes = exact
            .boxes
            .iter()
            .filter_map(|b| {
                let mut c = [b.x_min, b.y_min, b.x_max, b.y_max];
                for v in &mut c {
                    *v += normal.sample(&mut rng);
                }
                let (x0, x1) = (c[0].min(c[2]).clamp(0.0, w), c[0].max(c[2]).clamp(0.0, w));
                let (y0, y1) = (c[1].min(c[3]).clamp(0.0, h), c[1].max(c[3]).clamp(0.0, h));
                (x1 > x0 && y1 > y0).then(|| BBox::pred(x0, y0, x1, y1, b.class_id, 1.0))
            })
            .collect();
        DetectionSet::new(frame, boxes)
    }

    /// Predictions for input `frame` as `(absolute target, detections)`.
    pub fn predict(&self, frame: i64, proposal: &TemporalProposal) -> Vec<(i64, DetectionSet)> {
        match self.kind {
            OracleKind::PerfectCurrent => vec![(frame, as_predictions(self.scenario.gt(frame), frame))],
            OracleKind::PerfectForecast { horizon } => {
                let t = frame + horizon;
                vec![(t, as_predictions(self.scenario.gt(t), t))]
            }
            OracleKind::Noisy { sigma, seed } => vec![(frame, self.noisy(frame, *sigma, *seed))],
            OracleKind::MultiHorizon => proposal
                .future
                .iter()
                .map(|j| {
                    let t = frame + j;
                    (t, as_predictions(self.scenario.gt(t), t))
                })
                .collect(),
        }
    }
}

/// What drives a stream: an oracle, or the forecaster.
#[derive(Debug, Clone, Copy)]
pub enum Detector<'a> {
    Oracle(Oracle<'a>),
    Model(&'a ModelParams),
}

impl Detector<'_> {
    /// Whether the detector consumes past features.
    pub fn uses_features(&self) -> bool {
        matches!(self, Detector::Model(_))
    }

    /// Stable identity for result fingerprints.
    pub fn describe(&self) -> serde_json::Value {
        match self {
            Detector::Oracle(o) => serde_json::json!({ "oracle": o.kind }),
            Detector::Model(p) => {
                let mut h = Sha256::new();
                for (name, t) in &p.tensors {
                    h.update(name.as_bytes());
                    for v in t.data() {
                        h.update(v.to_bits().to_le_bytes());
                    }
                }
                let digest: String = h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();
                serde_json::json!({ "model": p.config, "weights": digest })
            }
        }
    }
}

/// Where each past feature of a model loop comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PastSource {
    Buffered,
    Recomputed,
    /// Stand-in for a frame before the stream start: the current features.
    Synthetic,
}

/// Run the forecaster on frame `frame`. `past` supplies, per past offset,
/// either a cached map (absolute source index) or the source to use.
pub(crate) fn model_predict(
    params: &ModelParams,
    scenario: &Scenario,
    frame: i64,
    proposal: &TemporalProposal,
    cached: &dyn Fn(i64) -> Option<FeatureMap>,
    sources: &[PastSource],
) -> Result<(FeatureMap, Vec<(i64, DetectionSet)>)> {
    let image = &scenario.frames[frame as usize];
    let current = toy_backbone(params, image)?;
    let mut buffered = Vec::with_capacity(proposal.past.len());
    for (&p, src) in proposal.past.iter().zip(sources) {
        let abs = frame + p;
        let fm = match src {
            PastSource::Synthetic => current.clone(),
            PastSource::Buffered => cached(abs)
                .ok_or_else(|| Error::Contract(format!("frame {abs} not in feature buffer")))?,
            PastSource::Recomputed => toy_backbone(params, &scenario.frames[abs as usize])?,
        };
        buffered.push(fm.with_source_index(p));
    }
    let future = forecast_features(params, &current, &buffered, proposal)?;
    let preds = future
        .iter()
        .map(|f| Ok((frame + f.source_index, toy_head(params, f)?.with_frame_index(frame + f.source_index))))
        .collect::<Result<_>>()?;
    Ok((current.with_source_index(frame), preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scenario::{generate_scenario, ScenarioSpec};

    fn scenario() -> Scenario {
        generate_scenario(&ScenarioSpec { length: 10, ..Default::default() }, 3).unwrap()
    }

    fn prop() -> TemporalProposal {
        TemporalProposal::new(vec![-1], vec![1, 2]).unwrap()
    }

    #[test]
    fn forecast_zero_equals_current_and_noisy_zero_equals_current() {
        let s = scenario();
        let cur = OracleKind::PerfectCurrent;
        let f0 = OracleKind::PerfectForecast { horizon: 0 };
        let n0 = OracleKind::Noisy { sigma: 0.0, seed: 1 };
        for i in 0..10 {
            let a = make_oracle(&cur, &s).unwrap().predict(i, &prop());
            assert_eq!(make_oracle(&f0, &s).unwrap().predict(i, &prop()), a);
            assert_eq!(make_oracle(&n0, &s).unwrap().predict(i, &prop()), a);
        }
    }

    #[test]
    fn forecast_beyond_clip_is_empty() {
        let s = scenario();
        let k = OracleKind::PerfectForecast { horizon: 3 };
        let p = make_oracle(&k, &s).unwrap().predict(8, &prop());
        assert_eq!(p[0].0, 11);
        assert!(p[0].1.is_empty());
    }

    #[test]
    fn multi_horizon_follows_proposal() {
        let s = scenario();
        let k = OracleKind::MultiHorizon;
        let p = make_oracle(&k, &s).unwrap().predict(4, &prop());
        assert_eq!(p.iter().map(|x| x.0).collect::<Vec<_>>(), vec![5, 6]);
        assert_eq!(p[1].1.boxes.len(), s.ground_truth[6].boxes.len());
    }

    #[test]
    fn noisy_is_seeded() {
        let s = scenario();
        let k = OracleKind::Noisy { sigma: 2.0, seed: 5 };
        let o = make_oracle(&k, &s).unwrap();
        assert_eq!(o.predict(3, &prop()), o.predict(3, &prop()));
        assert_ne!(o.predict(3, &prop()), make_oracle(&OracleKind::PerfectCurrent, &s).unwrap().predict(3, &prop()));
    }

    #[test]
    fn invalid_oracles_rejected() {
        let s = scenario();
        assert!(make_oracle(&OracleKind::PerfectForecast { horizon: -1 }, &s).is_err());
        assert!(make_oracle(&OracleKind::Noisy { sigma: -1.0, seed: 0 }, &s).is_err());
    }
}
