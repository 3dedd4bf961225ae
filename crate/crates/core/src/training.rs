//! Winner-takes-all loss, AdamW steps and the training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Forward, Model, PreparedScene, Target};
use crate::motion::Scene;
use crate::numerics::optim::{adamw_step, AdamW};
use crate::numerics::{Array, Tape, Var};

/// How the winning mode is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeSelection {
    /// One mode per scene, by the error of the composed poses.
    #[default]
    Joint,
    /// Trajectory and local-pose terms each pick their own best mode.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Frames between consecutive training windows of one scene.
    pub window_stride: usize,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    pub selection: ModeSelection,
    /// Linear learning-rate ramp over the first steps (0 disables).
    pub warmup_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            weight_decay: 0.01,
            batch_size: 4,
            steps: 2000,
            seed: 0,
            window_stride: 1,
            checkpoint_every: 0,
            selection: ModeSelection::Joint,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("lr {} / weight_decay {} out of range", self.lr, self.weight_decay)));
        }
        if self.batch_size == 0 || self.window_stride == 0 {
            return Err(Error::Config("batch_size and window_stride must be positive".into()));
        }
        Ok(())
    }

    /// Optimizer settings for the update that follows `step` completed steps.
    pub fn optimizer(&self, step: u64) -> AdamW {
        let ramp = if step < self.warmup_steps { (step + 1) as f64 / self.warmup_steps as f64 } else { 1.0 };
        AdamW { lr: self.lr * ramp, weight_decay: self.weight_decay, ..AdamW::default() }
    }
}

/// Loss terms of one batch: distances summed over agents, frames (and
/// joints) within a scene, then averaged over scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub l_tr: f64,
    pub l_po: f64,
    pub l: f64,
    /// Winning mode per scene (the trajectory choice under independent
    /// selection).
    pub winning_mode: Vec<usize>,
}

/// Summed Euclidean distance per scene and mode between `pred` `[N, F, T, ..., 3]`
/// and the stacked targets `[N, T, ..., 3]`.
fn mode_errors(pred: &Array, target: &[f64], batch: &Batch) -> Vec<Vec<f64>> {
    let (n, f) = (pred.shape()[0], pred.shape()[1]);
    let per = pred.numel() / (n * f);
    let p = pred.data();
    (0..batch.scenes())
        .map(|s| {
            let agents = batch.scene_agents(s);
            (0..f)
                .map(|k| {
                    let mut total = 0.0;
                    for a in agents.clone() {
                        let pp = &p[(a * f + k) * per..(a * f + k + 1) * per];
                        let tt = &target[a * per..(a + 1) * per];
                        for (x, y) in pp.chunks_exact(3).zip(tt.chunks_exact(3)) {
                            total += ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt();
                        }
                    }
                    total
                })
                .collect()
        })
        .collect()
}

fn argmin(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &x)| if x < bv { (i, x) } else { (bi, bv) })
        .0
}

fn stack_targets(targets: &[Target], pick: impl Fn(&Target) -> &Array) -> Vec<f64> {
    targets.iter().flat_map(|t| pick(t).data().iter().copied()).collect()
}

/// Summed distance between the winning-mode rows of `pred` `[N, F, T, ..., 3]`
/// and `target`, averaged over scenes.
fn winner_term(tape: &mut Tape<'_>, pred: Var, target: Vec<f64>, modes: &[usize], batch: &Batch) -> Result<Var> {
    let sh = tape.shape(pred).to_vec();
    let (n, f) = (sh[0], sh[1]);
    let mut flat = vec![n * f];
    flat.extend(&sh[2..]);
    let rows = tape.reshape(pred, &flat)?;
    let idx: Vec<usize> = (0..n).map(|a| a * f + modes[batch.scene_of[a]]).collect();
    let chosen = tape.index_select(rows, 0, &idx)?;
    let mut tshape = vec![n];
    tshape.extend(&sh[2..]);
    let target = tape.constant(Array::from_vec(&tshape, target)?);
    let diff = tape.sub(chosen, target)?;
    let dist = tape.norm_last(diff)?;
    let total = tape.sum(dist);
    Ok(tape.scale(total, 1.0 / batch.scenes() as f64))
}

/// Builds the winner-takes-all loss on the tape. Returns the scalar loss
/// node and the report.
pub fn compute_loss(tape: &mut Tape<'_>, fwd: &Forward, batch: &Batch, selection: ModeSelection) -> Result<(Var, LossReport)> {
    let targets = batch
        .targets
        .as_ref()
        .ok_or_else(|| Error::Data("training batch has no ground-truth future".into()))?;
    let joints = stack_targets(targets, |t| &t.joints);
    let hips = stack_targets(targets, |t| &t.hips);
    let local = stack_targets(targets, |t| &t.local);
    let (tr_modes, po_modes) = match selection {
        ModeSelection::Joint => {
            let m: Vec<usize> = mode_errors(tape.value(fwd.composed), &joints, batch).iter().map(|e| argmin(e)).collect();
            (m.clone(), m)
        }
        ModeSelection::Independent => (
            mode_errors(tape.value(fwd.trajectories), &hips, batch).iter().map(|e| argmin(e)).collect(),
            mode_errors(tape.value(fwd.local), &local, batch).iter().map(|e| argmin(e)).collect(),
        ),
    };
    let l_tr = winner_term(tape, fwd.trajectories, hips, &tr_modes, batch)?;
    let l_po = winner_term(tape, fwd.local, local, &po_modes, batch)?;
    let loss = tape.add(l_tr, l_po)?;
    let report = LossReport {
        l_tr: tape.value(l_tr).data()[0],
        l_po: tape.value(l_po).data()[0],
        l: tape.value(loss).data()[0],
        winning_mode: tr_modes,
    };
    Ok((loss, report))
}

fn mix(seed: u64, step: u64) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Forward, backward and one AdamW update. Dropout masks depend only on
/// `seed` and the store's step, so a resumed run repeats them exactly.
pub fn train_step(model: &mut Model, batch: &Batch, opt: &AdamW, selection: ModeSelection, seed: u64) -> Result<LossReport> {
    let step = model.store.step();
    let (report, grads) = {
        let mut tape = Tape::new(&model.store, true, mix(seed, step));
        let fwd = model.network.forward(&mut tape, batch)?;
        let (loss, report) = compute_loss(&mut tape, &fwd, batch, selection)?;
        if let Some(bad) = tape.first_non_finite() {
            return Err(Error::NonFinite { step, op: bad.op, node: bad.node });
        }
        (report, tape.backward(loss)?)
    };
    model.store.zero_grad();
    model.store.accumulate(&grads, 1.0);
    if let Some(p) = model.store.params().iter().position(|p| !p.grad.is_finite()) {
        return Err(Error::NonFinite { step, op: "backward", node: p });
    }
    adamw_step(&mut model.store, opt);
    Ok(report)
}

/// Every training window of every scene.
pub fn prepare_windows(model: &Model, scenes: &[Scene], stride: usize) -> Result<Vec<PreparedScene>> {
    let total = model.config.scenario.total();
    let mut out = Vec::new();
    for scene in scenes {
        let frames = scene.poses.frames();
        if frames < total {
            continue;
        }
        for start in (0..=frames - total).step_by(stride) {
            out.push(PreparedScene::from_window(&model.config, &scene.poses, start)?);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

/// Sample indices of the batch trained at `step`: a seeded permutation per
/// epoch, cut into consecutive batches (the last one may be short).
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = len.div_ceil(batch_size) as u64;
    let epoch = step / per_epoch;
    let pos = (step % per_epoch) as usize;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch) ^ 0x5eed));
    order[pos * batch_size..((pos + 1) * batch_size).min(len)].to_vec()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub l_tr: f64,
    pub l_po: f64,
    pub l: f64,
    /// Scenes won by each mode in this step's batch.
    pub wins: Vec<usize>,
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let modes = rows.first().map_or(0, |r| r.wins.len());
    let mut text = String::from("step,l_tr,l_po,l");
    for k in 0..modes {
        text.push_str(&format!(",wins_mode{k}"));
    }
    text.push('\n');
    for r in rows {
        text.push_str(&format!("{},{},{},{}", r.step, r.l_tr, r.l_po, r.l));
        for w in &r.wins {
            text.push_str(&format!(",{w}"));
        }
        text.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Training loop state. Continues from the model's step counter, so a model
/// restored from a checkpoint resumes where it stopped.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub samples: Vec<PreparedScene>,
    pub trace: Vec<TraceRow>,
    /// Checkpoints are written here as `step-<n>.ckpt` when set.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: Model, scenes: &[Scene]) -> Result<Self> {
        config.validate()?;
        let samples = prepare_windows(&model, scenes, config.window_stride)?;
        Ok(Self { config, model, samples, trace: Vec::new(), checkpoint_dir: None })
    }

    pub fn step(&mut self) -> Result<LossReport> {
        let step = self.model.store.step();
        let idx = batch_indices(self.samples.len(), self.config.batch_size, self.config.seed, step);
        let refs: Vec<&PreparedScene> = idx.iter().map(|&i| &self.samples[i]).collect();
        let batch = Batch::pack(&refs)?;
        let report = train_step(&mut self.model, &batch, &self.config.optimizer(step), self.config.selection, self.config.seed)?;
        let mut wins = vec![0; self.model.config.scenario.modes];
        for &k in &report.winning_mode {
            wins[k] += 1;
        }
        self.trace.push(TraceRow { step, l_tr: report.l_tr, l_po: report.l_po, l: report.l, wins });
        let done = self.model.store.step();
        if let Some(dir) = &self.checkpoint_dir {
            if self.config.checkpoint_every > 0 && done % self.config.checkpoint_every == 0 {
                self.model.save(&dir.join(format!("step-{done}.ckpt")))?;
            }
        }
        Ok(report)
    }

    /// Runs until the model's step counter reaches `config.steps`.
    pub fn fit(&mut self, mut on_step: impl FnMut(&LossReport, u64)) -> Result<()> {
        while self.model.store.step() < self.config.steps {
            let r = self.step()?;
            on_step(&r, self.model.store.step());
        }
        Ok(())
    }
}
