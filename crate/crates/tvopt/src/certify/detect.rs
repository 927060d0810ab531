//! Post-hoc jump detection: classify trajectory samples by the minimizer
//! branch they would settle into if time were frozen, and report the instants
//! where that classification switches and sticks.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Result, TvError};
use crate::flow::{frozen_flow_classify, Classification, FrozenFlowConfig, TrajectoryRecord};
use crate::problem::{MinTrajectory, ProblemDefinition};

/// A persistent switch of basin membership along a recorded trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpEvent {
    /// First sample time at which the new branch is observed.
    pub t: f64,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectConfig {
    /// Classify every `stride`-th recorded sample (the last is always kept).
    pub stride: usize,
    /// A switch counts only if membership stays on the new branch for this
    /// long (or to the end of the record).
    pub window: f64,
    pub frozen: FrozenFlowConfig,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            stride: 50,
            window: 0.5,
            frozen: FrozenFlowConfig::default(),
        }
    }
}

/// Scans `record` and returns the persistent basin switches among `minima`.
///
/// Samples whose frozen-time descent diverges (settles near none of the
/// provided branches) carry no label; they never start an event and they
/// break the persistence of a candidate switch.
pub fn detect_jumps(
    p: &ProblemDefinition,
    record: &TrajectoryRecord,
    minima: &[MinTrajectory],
    cfg: &DetectConfig,
) -> Result<Vec<JumpEvent>> {
    if record.samples.is_empty() {
        return Err(TvError::InvalidParameter {
            name: "record".into(),
            reason: "cannot detect jumps on an empty trajectory record".into(),
        });
    }
    if minima.is_empty() {
        return Err(TvError::InvalidParameter {
            name: "minima".into(),
            reason: "need at least one candidate branch".into(),
        });
    }
    let stride = cfg.stride.max(1);

    let mut picked: Vec<usize> = (0..record.samples.len()).step_by(stride).collect();
    if *picked.last().unwrap() != record.samples.len() - 1 {
        picked.push(record.samples.len() - 1);
    }

    // (t, Some(label) | None for diverged) per decimated sample.
    let mut labeled: Vec<(f64, Option<String>)> = Vec::with_capacity(picked.len());
    for &i in &picked {
        let s = &record.samples[i];
        let x = DVector::from_column_slice(&s.x);
        let class = frozen_flow_classify(p, s.t, &x, minima, &cfg.frozen)?;
        let label = match class {
            Classification::Label(l) => Some(l),
            Classification::Diverged => None,
        };
        labeled.push((s.t, label));
    }

    let mut events = Vec::new();
    let mut current: Option<String> = None;
    for k in 0..labeled.len() {
        let (t_k, ref label_k) = labeled[k];
        let Some(new) = label_k else { continue };
        match &current {
            None => current = Some(new.clone()),
            Some(cur) if cur == new => {}
            Some(cur) => {
                let t_stop = t_k + cfg.window;
                let persistent = labeled[k..]
                    .iter()
                    .take_while(|(t, _)| *t <= t_stop)
                    .all(|(_, l)| l.as_deref() == Some(new.as_str()));
                if persistent {
                    events.push(JumpEvent {
                        t: t_k,
                        from: cur.clone(),
                        to: new.clone(),
                    });
                    current = Some(new.clone());
                }
            }
        }
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Sample;
    use crate::problem::builtin_quartic;

    fn branches(b: f64) -> Vec<MinTrajectory> {
        let mk = |label: &str, off: f64| {
            MinTrajectory::analytic(
                label,
                1,
                move |t: f64| DVector::from_vec(vec![off + b * t.sin()]),
                move |t: f64| DVector::from_vec(vec![b * t.cos()]),
            )
        };
        vec![mk("global", -2.0), mk("local-1", 1.0)]
    }

    fn record_from(path: impl Fn(f64) -> f64, t_end: f64, dt: f64) -> TrajectoryRecord {
        let n = (t_end / dt).round() as usize;
        let samples = (0..=n)
            .map(|i| {
                let t = i as f64 * dt;
                Sample {
                    t,
                    x: vec![path(t)],
                    feas: 0.0,
                    obj: 0.0,
                }
            })
            .collect();
        TrajectoryRecord {
            samples,
            events: Vec::new(),
        }
    }

    #[test]
    fn a_trajectory_that_stays_in_one_well_yields_no_events() {
        let b = 5.0;
        let p = builtin_quartic(b);
        let rec = record_from(|t| -2.0 + b * t.sin() + 0.05 * (3.0 * t).cos(), 3.0, 0.01);
        let events = detect_jumps(&p, &rec, &branches(b), &DetectConfig::default()).unwrap();
        assert!(events.is_empty(), "events: {events:?}");
    }

    #[test]
    fn a_single_well_hop_is_reported_once_at_the_crossing() {
        let b = 5.0;
        let p = builtin_quartic(b);
        // Sits in the deep well, then hops into the shallow one at t = 1.
        let rec = record_from(
            |t| {
                let off = if t < 1.0 { -2.0 } else { 1.0 };
                off + b * t.sin()
            },
            3.0,
            0.01,
        );
        let events = detect_jumps(&p, &rec, &branches(b), &DetectConfig::default()).unwrap();
        assert_eq!(events.len(), 1, "events: {events:?}");
        assert_eq!(events[0].from, "global");
        assert_eq!(events[0].to, "local-1");
        // Decimation stride is 50 samples = 0.5 time units here.
        assert!(events[0].t >= 1.0 - 1e-12 && events[0].t <= 1.5 + 1e-12, "t = {}", events[0].t);
    }

    #[test]
    fn a_brief_excursion_shorter_than_the_window_is_ignored() {
        let b = 5.0;
        let p = builtin_quartic(b);
        let rec = record_from(
            |t| {
                let off = if (1.0..1.2).contains(&t) { 1.0 } else { -2.0 };
                off + b * t.sin()
            },
            3.0,
            0.01,
        );
        let cfg = DetectConfig {
            stride: 5,
            window: 0.5,
            ..DetectConfig::default()
        };
        let events = detect_jumps(&p, &rec, &branches(b), &cfg).unwrap();
        assert!(events.is_empty(), "events: {events:?}");
    }

    #[test]
    fn branch_order_does_not_change_the_outcome() {
        let b = 5.0;
        let p = builtin_quartic(b);
        let rec = record_from(
            |t| {
                let off = if t < 1.0 { -2.0 } else { 1.0 };
                off + b * t.sin()
            },
            3.0,
            0.01,
        );
        let mut rev = branches(b);
        rev.reverse();
        let a = detect_jumps(&p, &rec, &branches(b), &DetectConfig::default()).unwrap();
        let c = detect_jumps(&p, &rec, &rev, &DetectConfig::default()).unwrap();
        assert_eq!(a, c);
    }
}
