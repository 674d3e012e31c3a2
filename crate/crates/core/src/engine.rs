//! Staged training over cached self-predictions, and iterated inference.
//!
//! Stage t trains on every training sample paired with each of its cached predictions
//! from stages 0..t, then caches `p⁽ᵗ⁾ = f(x, p⁽ᵗ⁻¹⁾)` for every sample. Stage 0 is the
//! constant ½ map. Inference starts from the same constant map and applies f M times.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::PatchSample;
use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::model::{encode_input, predict_heatmap, SegNet};
use crate::nn::{sgd_step, weighted_bce_with_logits, LayerGrads, OptimizerState, Tape};
use crate::tensor::Tensor;

/// Test-time iterations used unless configured otherwise.
pub const DEFAULT_ITERATIONS: usize = 3;

/// Cached predictions keyed by (sample position, stage).
///
/// Sample keys are positions in the slice handed to [`train_stages`]. Each stage is
/// written once, as a whole.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionStore {
    heatmap_size: usize,
    stages: Vec<Vec<Heatmap>>,
}

impl PredictionStore {
    /// A store holding only stage 0 for `num_samples` samples.
    pub fn new(num_samples: usize, heatmap_size: usize) -> Self {
        PredictionStore {
            heatmap_size,
            stages: vec![vec![Heatmap::half(heatmap_size, heatmap_size); num_samples]],
        }
    }

    pub fn num_samples(&self) -> usize {
        self.stages[0].len()
    }

    /// Highest stage present; 0 before any training stage finished.
    pub fn last_stage(&self) -> usize {
        self.stages.len() - 1
    }

    /// Number of stored heatmaps across all stages.
    pub fn len(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, sample: usize, stage: usize) -> Result<&Heatmap> {
        self.stages
            .get(stage)
            .and_then(|s| s.get(sample))
            .ok_or_else(|| Error::Internal(format!("no cached prediction for sample {sample} at stage {stage}")))
    }

    /// Appends the next stage; it must cover every sample with heatmaps in [0, 1].
    pub fn push_stage(&mut self, heatmaps: Vec<Heatmap>) -> Result<()> {
        if heatmaps.len() != self.num_samples() {
            return Err(Error::Internal(format!(
                "stage {} has {} heatmaps for {} samples",
                self.stages.len(),
                heatmaps.len(),
                self.num_samples()
            )));
        }
        let h = self.heatmap_size;
        if let Some(i) = heatmaps
            .iter()
            .position(|m| m.height() != h || m.width() != h || !m.in_unit_range())
        {
            return Err(Error::Internal(format!(
                "stage {}: heatmap {i} is not a {h}×{h} map in [0, 1]",
                self.stages.len()
            )));
        }
        self.stages.push(heatmaps);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSchedule {
    /// Minibatch steps per stage; its length is the number of stages.
    pub iterations: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule {
            iterations: vec![3000, 3000, 2000],
            batch_size: 16,
            learning_rate: 1e-3,
            momentum: 0.9,
        }
    }
}

impl StageSchedule {
    pub fn num_stages(&self) -> usize {
        self.iterations.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations.is_empty() || self.iterations.contains(&0) {
            return Err(Error::Config(format!(
                "stage schedule needs at least one stage and positive step counts, got {:?}",
                self.iterations
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One entry of a stage-t training pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PoolEntry {
    pub sample: usize,
    pub source_stage: usize,
}

/// Every (sample, i) with i < t, ordered by source stage then sample.
pub fn build_stage_training_set(store: &PredictionStore, num_samples: usize, t: usize) -> Result<Vec<PoolEntry>> {
    if t == 0 {
        return Err(Error::Usage("training stages start at 1".into()));
    }
    if store.last_stage() + 1 < t || store.num_samples() < num_samples {
        return Err(Error::Internal(format!(
            "stage {t} needs cached predictions for stages 0..{t} of {num_samples} samples; store has stages 0..={} of {}",
            store.last_stage(),
            store.num_samples()
        )));
    }
    Ok((0..t)
        .flat_map(|i| {
            (0..num_samples).map(move |s| PoolEntry {
                sample: s,
                source_stage: i,
            })
        })
        .collect())
}

/// One minibatch loss value; `step` counts from 1 across all stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub stage: usize,
    pub loss: f64,
}

/// Writes `step,stage,loss` rows with round-trip float precision.
pub fn write_loss_csv(mut w: impl Write, trace: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "step,stage,loss")?;
    for r in trace {
        writeln!(w, "{},{},{:.16e}", r.step, r.stage, r.loss)?;
    }
    Ok(())
}

/// Hooks called while training runs.
pub trait TrainObserver {
    fn step(&mut self, _record: &LossRecord) {}

    /// Called after stage `stage` finished and its predictions were cached.
    fn stage_end(&mut self, _stage: usize, _net: &SegNet, _store: &PredictionStore) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: SegNet,
    /// Parameters as they were at the end of each stage, stage 1 first.
    pub stage_nets: Vec<SegNet>,
    pub store: PredictionStore,
    pub losses: Vec<LossRecord>,
}

/// Category-uniform minibatch sampler over a stage pool.
struct Sampler {
    by_category: Vec<Vec<usize>>,
    stages: usize,
}

impl Sampler {
    fn new(samples: &[&PatchSample], stages: usize) -> Self {
        let categories = samples.iter().map(|s| s.category + 1).max().unwrap_or(0);
        let mut by_category = vec![Vec::new(); categories];
        for (i, s) in samples.iter().enumerate() {
            by_category[s.category].push(i);
        }
        by_category.retain(|c| !c.is_empty());
        Sampler { by_category, stages }
    }

    /// Uniform category, then a uniform (sample, source stage) pair of that category.
    fn draw(&self, rng: &mut ChaCha8Rng) -> PoolEntry {
        let members = &self.by_category[rng.random_range(0..self.by_category.len())];
        PoolEntry {
            sample: members[rng.random_range(0..members.len())],
            source_stage: rng.random_range(0..self.stages),
        }
    }
}

/// Loss and summed parameter gradients of one minibatch.
///
/// The loss is the area-weighted pixel BCE averaged over batch entries and pixels.
fn minibatch_gradients(
    net: &SegNet,
    samples: &[&PatchSample],
    store: &PredictionStore,
    batch: &[PoolEntry],
) -> Result<(f64, Vec<LayerGrads>)> {
    let h = net.arch.heatmap_size;
    let scale = 1.0 / (batch.len() * h * h) as f64;
    let mut grads: Vec<LayerGrads> = net.params.iter().map(LayerGrads::zeros_like).collect();
    let mut loss = 0.0;
    for entry in batch {
        let sample = samples[entry.sample];
        let prev = store.get(entry.sample, entry.source_stage)?;
        let input = encode_input(&net.arch, &sample.to_tensor(), prev, sample.category)?;
        let target = Tensor::from_vec([1, 1, h, h], sample.target())?;
        let mut tape = Tape::new();
        let x = tape.constant(input.0);
        let logits = net.forward_logits(&mut tape, x)?;
        let (l, mut g) = weighted_bce_with_logits(tape.value(logits), &target, &[sample.area_weight])?;
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
        loss += l * scale;
        let sample_grads = tape.backward(&net.params, logits, g)?;
        for (acc, layer) in grads.iter_mut().zip(&sample_grads.layers) {
            acc.accumulate(layer);
        }
    }
    Ok((loss, grads))
}

/// Predictions `f(x, prev)` for each sample.
pub fn predict_samples(net: &SegNet, samples: &[&PatchSample], prev: &[Heatmap]) -> Result<Vec<Heatmap>> {
    samples
        .iter()
        .zip(prev)
        .map(|(s, p)| predict_heatmap(net, &encode_input(&net.arch, &s.to_tensor(), p, s.category)?))
        .collect()
}

/// Runs every stage of `schedule`, continuing from the parameters of `net`.
pub fn train_stages(
    samples: &[&PatchSample],
    net: SegNet,
    schedule: &StageSchedule,
    seed: u64,
    observer: &mut impl TrainObserver,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let mut net = net;
    let mut store = PredictionStore::new(samples.len(), net.arch.heatmap_size);
    let mut optimizer = OptimizerState::new(&net.params, schedule.learning_rate, schedule.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(schedule.iterations.iter().sum());
    let mut stage_nets = Vec::with_capacity(schedule.num_stages());
    let mut step = 0;

    for (t, &iterations) in (1..).zip(&schedule.iterations) {
        let pool = build_stage_training_set(&store, samples.len(), t)?;
        debug_assert_eq!(pool.len(), samples.len() * t);
        let sampler = Sampler::new(samples, t);
        let mut batch = Vec::with_capacity(schedule.batch_size);
        for _ in 0..iterations {
            step += 1;
            batch.clear();
            batch.extend((0..schedule.batch_size).map(|_| sampler.draw(&mut rng)));
            let (loss, grads) = minibatch_gradients(&net, samples, &store, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { stage: t, step, loss });
            }
            sgd_step(&mut net.params, &grads, &mut optimizer)?;
            if !net.is_finite() {
                return Err(Error::Divergence {
                    stage: t,
                    step,
                    loss: f64::NAN,
                });
            }
            let record = LossRecord { step, stage: t, loss };
            observer.step(&record);
            losses.push(record);
        }
        let prev: Vec<Heatmap> = (0..samples.len())
            .map(|s| store.get(s, t - 1).cloned())
            .collect::<Result<_>>()?;
        store.push_stage(predict_samples(&net, samples, &prev)?)?;
        stage_nets.push(net.clone());
        observer.stage_end(t, &net, &store)?;
    }
    Ok(TrainOutcome {
        net,
        stage_nets,
        store,
        losses,
    })
}

/// `ŷ⁽⁰⁾ = ½`, `ŷ⁽ᵗ⁾ = f(x, ŷ⁽ᵗ⁻¹⁾)`; returns all M + 1 maps, the final one last.
pub fn infer(net: &SegNet, patch: &Tensor, category: usize, iterations: usize) -> Result<Vec<Heatmap>> {
    let h = net.arch.heatmap_size;
    let mut trajectory = Vec::with_capacity(iterations + 1);
    trajectory.push(Heatmap::half(h, h));
    for _ in 0..iterations {
        let prev = trajectory.last().expect("non-empty trajectory");
        let next = predict_heatmap(net, &encode_input(&net.arch, patch, prev, category)?)?;
        trajectory.push(next);
    }
    Ok(trajectory)
}

/// Mean absolute change between consecutive maps of a trajectory.
pub fn convergence_trace(trajectory: &[Heatmap]) -> Vec<f64> {
    trajectory.windows(2).map(|w| w[1].mean_abs_diff(&w[0])).collect()
}
