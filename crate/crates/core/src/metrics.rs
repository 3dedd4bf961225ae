//! JPE, APE and FDE in millimeters with scene-level min-JPE mode selection.
//!
//! Poses are `[N, T, J, 3]` arrays in meters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForecastBundle;
use crate::motion::GlobalPoseSequence;
use crate::numerics::Array;

fn dims(pred: &Array, gt: &Array) -> Result<(usize, usize, usize)> {
    let s = pred.shape();
    if s.len() != 4 || s[3] != 3 || s != gt.shape() {
        return Err(Error::shape("poses [N, T, J, 3] (prediction vs ground truth)", gt.shape(), s));
    }
    Ok((s[0], s[1], s[2]))
}

fn check_frame(frame: usize, frames: usize) -> Result<()> {
    if frame >= frames {
        return Err(Error::Data(format!("evaluation frame {frame} outside the {frames}-frame horizon")));
    }
    Ok(())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Future-frame index for a timestamp in seconds: `floor(t·fps) − 1`.
pub fn frame_index(seconds: f64, frame_rate: f64, horizon: usize) -> Result<usize> {
    // The small slack keeps products like 2.3·10 from landing just below 23.
    let k = (seconds * frame_rate + 1e-9).floor();
    if !(k >= 1.0) || k as usize > horizon {
        return Err(Error::Data(format!(
            "timestamp {seconds}s at {frame_rate} Hz is outside the {horizon}-frame horizon"
        )));
    }
    Ok(k as usize - 1)
}

/// Mean joint distance over agents and joints at `frame`, in mm.
pub fn jpe(pred: &Array, gt: &Array, frame: usize) -> Result<f64> {
    let (n, t, j) = dims(pred, gt)?;
    check_frame(frame, t)?;
    let mut total = 0.0;
    for a in 0..n {
        for q in 0..j {
            let o = pred.offset(&[a, frame, q, 0]);
            total += dist(&pred.data()[o..o + 3], &gt.data()[o..o + 3]);
        }
    }
    Ok(total / (n * j) as f64 * 1000.0)
}

/// JPE after subtracting each pose's own hip, in mm.
pub fn ape(pred: &Array, gt: &Array, frame: usize, hip: usize) -> Result<f64> {
    let (n, t, j) = dims(pred, gt)?;
    check_frame(frame, t)?;
    if hip >= j {
        return Err(Error::shape("hip index (< J)", j, hip));
    }
    let (p, g) = (pred.data(), gt.data());
    let mut total = 0.0;
    for a in 0..n {
        let h = pred.offset(&[a, frame, hip, 0]);
        for q in 0..j {
            let o = pred.offset(&[a, frame, q, 0]);
            let lp = [p[o] - p[h], p[o + 1] - p[h + 1], p[o + 2] - p[h + 2]];
            let lg = [g[o] - g[h], g[o + 1] - g[h + 1], g[o + 2] - g[h + 2]];
            total += dist(&lp, &lg);
        }
    }
    Ok(total / (n * j) as f64 * 1000.0)
}

/// Mean hip distance over agents at `frame`, in mm.
pub fn fde(pred: &Array, gt: &Array, frame: usize, hip: usize) -> Result<f64> {
    let (n, t, j) = dims(pred, gt)?;
    check_frame(frame, t)?;
    if hip >= j {
        return Err(Error::shape("hip index (< J)", j, hip));
    }
    let total: f64 = (0..n)
        .map(|a| {
            let o = pred.offset(&[a, frame, hip, 0]);
            dist(&pred.data()[o..o + 3], &gt.data()[o..o + 3])
        })
        .sum();
    Ok(total / n as f64 * 1000.0)
}

/// Mode with the lowest JPE averaged over agents, joints and every future
/// frame. Ties go to the lowest index.
pub fn select_mode(bundle: &ForecastBundle, gt: &Array) -> Result<usize> {
    let mut best = (0, f64::INFINITY);
    for k in 0..bundle.modes() {
        let pred = bundle.mode(k)?;
        let frames = pred.shape()[1];
        let mut e = 0.0;
        for f in 0..frames {
            e += jpe(&pred, gt, f)?;
        }
        e /= frames as f64;
        if e < best.1 {
            best = (k, e);
        }
    }
    Ok(best.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub jpe: f64,
    pub ape: f64,
    pub fde: f64,
}

/// Metrics of one scene, keyed by timestamp labels like `"1.0s"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: String,
    pub selected_mode: usize,
    pub metrics: BTreeMap<String, MetricTriple>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub timestamps: Vec<f64>,
    pub scenes: Vec<SceneMetrics>,
    /// Per-timestamp means over scenes.
    pub aggregate: BTreeMap<String, MetricTriple>,
}

pub fn timestamp_label(seconds: f64) -> String {
    format!("{seconds:?}s")
}

/// Ground-truth future as an `[N, T, J, 3]` array.
pub fn to_array(seq: &GlobalPoseSequence) -> Array {
    Array::from_vec(&[seq.agents(), seq.frames(), seq.joints(), 3], seq.positions().to_vec())
        .expect("sequence dimensions match its data")
}

/// Scores `bundle` against `gt` (the `T_f` future frames) at `timestamps`.
pub fn evaluate_scene(bundle: &ForecastBundle, gt: &GlobalPoseSequence, hip: usize, timestamps: &[f64]) -> Result<SceneMetrics> {
    let gt_arr = to_array(gt);
    let k = select_mode(bundle, &gt_arr)?;
    let pred = bundle.mode(k)?;
    let mut metrics = BTreeMap::new();
    for &ts in timestamps {
        let f = frame_index(ts, gt.frame_rate(), gt.frames())?;
        metrics.insert(
            timestamp_label(ts),
            MetricTriple {
                jpe: jpe(&pred, &gt_arr, f)?,
                ape: ape(&pred, &gt_arr, f, hip)?,
                fde: fde(&pred, &gt_arr, f, hip)?,
            },
        );
    }
    Ok(SceneMetrics { scene_id: bundle.scene_id.clone(), selected_mode: k, metrics })
}

pub fn aggregate(timestamps: &[f64], scenes: Vec<SceneMetrics>) -> MetricReport {
    let mut agg = BTreeMap::new();
    for &ts in timestamps {
        let key = timestamp_label(ts);
        let rows: Vec<&MetricTriple> = scenes.iter().filter_map(|s| s.metrics.get(&key)).collect();
        let c = rows.len().max(1) as f64;
        agg.insert(
            key,
            MetricTriple {
                jpe: rows.iter().map(|m| m.jpe).sum::<f64>() / c,
                ape: rows.iter().map(|m| m.ape).sum::<f64>() / c,
                fde: rows.iter().map(|m| m.fde).sum::<f64>() / c,
            },
        );
    }
    MetricReport { timestamps: timestamps.to_vec(), scenes, aggregate: agg }
}
