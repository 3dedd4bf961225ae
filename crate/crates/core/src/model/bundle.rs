use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Array;

/// F-mode forecast for one scene: hip trajectories `[F, N, T_f, 3]`, local
/// poses `[F, N, T_f, J, 3]` and their joint-wise sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BundleRecord", into = "BundleRecord")]
pub struct ForecastBundle {
    pub scene_id: String,
    pub agent_ids: Vec<String>,
    pub frame_rate: f64,
    pub trajectories: Array,
    pub local: Array,
    pub composed: Array,
}

/// Joint-wise addition of trajectories and local poses.
pub fn compose(trajectories: &Array, local: &Array) -> Result<ForecastBundle> {
    let ts = trajectories.shape();
    let ls = local.shape();
    if ts.len() != 4 || ls.len() != 5 || ts[3] != 3 || ls[4] != 3 || ts[..3] != ls[..3] {
        return Err(Error::shape("trajectories [F, N, T, 3] vs local [F, N, T, J, 3]", ts, ls));
    }
    let j = ls[3];
    let tr = trajectories.data();
    let mut composed = local.data().to_vec();
    for (row, c) in composed.chunks_exact_mut(j * 3).enumerate() {
        for joint in c.chunks_exact_mut(3) {
            for a in 0..3 {
                joint[a] += tr[row * 3 + a];
            }
        }
    }
    Ok(ForecastBundle {
        scene_id: String::new(),
        agent_ids: (0..ts[1]).map(|n| n.to_string()).collect(),
        frame_rate: 0.0,
        trajectories: trajectories.clone(),
        local: local.clone(),
        composed: Array::from_vec(ls, composed)?,
    })
}

impl ForecastBundle {
    pub fn modes(&self) -> usize {
        self.trajectories.shape()[0]
    }

    pub fn agents(&self) -> usize {
        self.trajectories.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.trajectories.shape()[2]
    }

    pub fn joints(&self) -> usize {
        self.local.shape()[3]
    }

    /// Composed poses of mode `k`, `[N, T_f, J, 3]`.
    pub fn mode(&self, k: usize) -> Result<Array> {
        if k >= self.modes() {
            return Err(Error::shape("mode index (< F)", self.modes(), k));
        }
        let (n, t, j) = (self.agents(), self.frames(), self.joints());
        let per = n * t * j * 3;
        Ok(Array::from_vec(&[n, t, j, 3], self.composed.data()[k * per..(k + 1) * per].to_vec())?)
    }

    /// Slices agents `range` out of stacked `[N, F, ...]` network outputs
    /// and reorders to mode-major layout.
    pub(crate) fn from_stacked(tr: &Array, lo: &Array, range: std::ops::Range<usize>) -> Result<Self> {
        let (f, t, j) = (tr.shape()[1], tr.shape()[2], lo.shape()[3]);
        let n = range.len();
        let start = range.start;
        let trajectories = Array::from_fn(&[f, n, t, 3], |i| tr.get(&[start + i[1], i[0], i[2], i[3]]));
        let local = Array::from_fn(&[f, n, t, j, 3], |i| lo.get(&[start + i[1], i[0], i[2], i[3], i[4]]));
        compose(&trajectories, &local)
    }
}

#[derive(Serialize, Deserialize)]
struct BundleRecord {
    scene_id: String,
    agent_ids: Vec<String>,
    frame_rate: f64,
    /// `[F][N][T_f]` hip positions.
    trajectories: Vec<Vec<Vec<[f64; 3]>>>,
    /// `[F][N][T_f][J]` hip-relative joints.
    local: Vec<Vec<Vec<Vec<[f64; 3]>>>>,
}

impl From<ForecastBundle> for BundleRecord {
    fn from(b: ForecastBundle) -> Self {
        let (f, n, t, j) = (b.modes(), b.agents(), b.frames(), b.joints());
        let xyz = |a: &Array, idx: &[usize]| -> [f64; 3] {
            let o = a.offset(&[idx, &[0]].concat());
            [a.data()[o], a.data()[o + 1], a.data()[o + 2]]
        };
        Self {
            trajectories: (0..f)
                .map(|m| (0..n).map(|a| (0..t).map(|s| xyz(&b.trajectories, &[m, a, s])).collect()).collect())
                .collect(),
            local: (0..f)
                .map(|m| {
                    (0..n)
                        .map(|a| (0..t).map(|s| (0..j).map(|q| xyz(&b.local, &[m, a, s, q])).collect()).collect())
                        .collect()
                })
                .collect(),
            scene_id: b.scene_id,
            agent_ids: b.agent_ids,
            frame_rate: b.frame_rate,
        }
    }
}

impl TryFrom<BundleRecord> for ForecastBundle {
    type Error = Error;

    fn try_from(r: BundleRecord) -> Result<Self> {
        let f = r.trajectories.len();
        let n = r.trajectories.first().map_or(0, |m| m.len());
        let t = r.trajectories.first().and_then(|m| m.first()).map_or(0, |a| a.len());
        let j = r.local.first().and_then(|m| m.first()).and_then(|a| a.first()).map_or(0, |s| s.len());
        let tr: Vec<f64> = r.trajectories.iter().flatten().flatten().flatten().copied().collect();
        let lo: Vec<f64> = r.local.iter().flatten().flatten().flatten().flatten().copied().collect();
        let trajectories = Array::from_vec(&[f, n, t, 3], tr)?;
        let local = Array::from_vec(&[f, n, t, j, 3], lo)?;
        if n != r.agent_ids.len() {
            return Err(Error::shape("forecast agent ids", n, r.agent_ids.len()));
        }
        let mut b = compose(&trajectories, &local)?;
        b.scene_id = r.scene_id;
        b.agent_ids = r.agent_ids;
        b.frame_rate = r.frame_rate;
        Ok(b)
    }
}
