//! Siamese contrastive training with per-modality gate routing and Adam.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{stack_images, ModelAssembly};
use crate::block::{BlockMode, Gate};
use crate::data::{hash64, DatasetBundle, Modality, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::metrics;
use crate::tensor::Tensor;

/// Pair label for two images of the same identity.
pub const GENUINE: u8 = 0;
/// Pair label for two different identities.
pub const IMPOSTOR: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Pairs per batch.
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Record the held-out cross-modal EER after every epoch.
    pub track_holdout_eer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 2.0,
            learning_rate: 1e-4,
            epochs: 20,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            track_holdout_eer: true,
        }
    }
}

impl TrainConfig {
    /// Full-length schedule: 50 epochs of 90 pairs.
    pub fn full_schedule() -> Self {
        TrainConfig { epochs: 50, batch_size: 90, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.margin.is_nan() || self.margin <= 0.0 {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size < 2 {
            return bad(format!("batch must hold at least 2 pairs, got {}", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }
}

/// Index pairs into a left and a right pool, with `Y_p` labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairIndices {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub labels: Vec<u8>,
}

/// Materialized batch: source images, target images and labels
/// (0 = same identity).
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub source: Tensor,
    pub target: Tensor,
    pub labels: Vec<u8>,
    pub source_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    /// Pairs had to be drawn with replacement.
    pub with_replacement: bool,
}

/// Balanced genuine/impostor pair schedule over two pools.
///
/// One epoch visits every genuine `(left, right)` combination once in a
/// shuffled order; each genuine pair is matched by an impostor pair that
/// keeps the right-hand image and draws a left image of another identity.
#[derive(Clone, Debug)]
pub struct PairSampler {
    left_ids: Vec<u32>,
    right_ids: Vec<u32>,
    genuine: Vec<(usize, usize)>,
    batch_size: usize,
    seed: u64,
}

impl PairSampler {
    /// With `same_pool`, a sample is never paired with itself.
    pub fn new(left_ids: Vec<u32>, right_ids: Vec<u32>, same_pool: bool, batch_size: usize, seed: u64) -> Result<Self> {
        let mut distinct: Vec<u32> = left_ids.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(Error::Data(format!("need at least 2 identities to form pairs, got {}", distinct.len())));
        }
        if batch_size < 2 {
            return Err(Error::Config("batch must hold at least 2 pairs".into()));
        }
        let mut genuine = Vec::new();
        for (r, rid) in right_ids.iter().enumerate() {
            for (l, lid) in left_ids.iter().enumerate() {
                if lid == rid && !(same_pool && l == r) {
                    genuine.push((l, r));
                }
            }
        }
        if genuine.is_empty() {
            return Err(Error::Data("no genuine pairs can be formed".into()));
        }
        Ok(PairSampler { left_ids, right_ids, genuine, batch_size, seed })
    }

    fn half(&self) -> usize {
        self.batch_size / 2
    }

    /// True when one batch needs more genuine pairs than exist.
    pub fn needs_replacement(&self) -> bool {
        self.genuine.len() < self.half()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.genuine.len().div_ceil(self.half().max(1))
    }

    fn impostor_for(&self, right: usize, rng: &mut ChaCha8Rng) -> usize {
        let rid = self.right_ids[right];
        loop {
            let l = rng.random_range(0..self.left_ids.len());
            if self.left_ids[l] != rid {
                return l;
            }
        }
    }

    pub fn epoch(&self, epoch: usize) -> Vec<PairIndices> {
        let mut rng = ChaCha8Rng::seed_from_u64(hash64(&[self.seed, 0xe90c, epoch as u64]));
        let half = self.half();
        let order: Vec<(usize, usize)> = if self.needs_replacement() {
            (0..half).map(|_| self.genuine[rng.random_range(0..self.genuine.len())]).collect()
        } else {
            let mut g = self.genuine.clone();
            g.shuffle(&mut rng);
            g
        };
        order
            .chunks(half)
            .map(|chunk| {
                let mut batch = PairIndices { left: Vec::new(), right: Vec::new(), labels: Vec::new() };
                for &(l, r) in chunk {
                    batch.left.push(l);
                    batch.right.push(r);
                    batch.labels.push(GENUINE);
                    batch.left.push(self.impostor_for(r, &mut rng));
                    batch.right.push(r);
                    batch.labels.push(IMPOSTOR);
                }
                batch
            })
            .collect()
    }
}

fn cross_modal_sampler(data: &DatasetBundle, batch_size: usize, seed: u64) -> Result<(PairSampler, Vec<&SampleRecord>, Vec<&SampleRecord>)> {
    let src = data.select(Split::Train, Modality::Source);
    let tgt = data.select(Split::Train, Modality::Target);
    let sampler = PairSampler::new(
        src.iter().map(|r| r.identity).collect(),
        tgt.iter().map(|r| r.identity).collect(),
        false,
        batch_size,
        seed,
    )?;
    Ok((sampler, src, tgt))
}

/// First batch of the seeded cross-modal schedule on the train split.
pub fn sample_pairs(data: &DatasetBundle, batch_size: usize, seed: u64) -> Result<PairBatch> {
    let (sampler, src, tgt) = cross_modal_sampler(data, batch_size, seed)?;
    let idx = sampler.epoch(0).into_iter().next().expect("at least one batch");
    let pick = |pool: &[&SampleRecord], ix: &[usize]| -> Result<(Tensor, Vec<u32>)> {
        let recs: Vec<&SampleRecord> = ix.iter().map(|&i| pool[i]).collect();
        let imgs: Vec<&Tensor> = recs.iter().map(|r| &r.image).collect();
        Ok((stack_images(&imgs)?, recs.iter().map(|r| r.identity).collect()))
    };
    let (source, source_ids) = pick(&src, &idx.left)?;
    let (target, target_ids) = pick(&tgt, &idx.right)?;
    Ok(PairBatch {
        source,
        target,
        labels: idx.labels,
        source_ids,
        target_ids,
        with_replacement: sampler.needs_replacement(),
    })
}

/// Mean contrastive loss; `labels` use 0 for genuine and 1 for impostor.
pub fn contrastive_loss(tape: &mut Tape, e1: Var, e2: Var, labels: &[u8], margin: f64) -> Result<Var> {
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Data(format!("pair label must be 0 or 1, got {bad}")));
    }
    let dissimilar: Vec<bool> = labels.iter().map(|&y| y == IMPOSTOR).collect();
    tape.contrastive_loss(e1, e2, &dissimilar, margin)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam step. Nothing is modified when any gradient is
/// non-finite.
pub fn adam_update(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adam_update", format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape("adam_update", format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {i} at step {}", state.step + 1)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let pd = p.data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            let mk = &mut m.data_mut()[k];
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * gk;
            let vk = &mut v.data_mut()[k];
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * gk * gk;
            let mhat = m.data()[k] / bc1;
            let vhat = v.data()[k] / bc2;
            pd[k] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// `None` when held-out tracking is disabled.
    pub holdout_eer: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,holdout_eer\n");
        for r in &self.epochs {
            let eer = r.holdout_eer.map(|e| format!("{e:e}")).unwrap_or_default();
            out.push_str(&format!("{},{:e},{eer}\n", r.epoch, r.mean_loss));
        }
        out
    }
}

fn numeric(e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Numeric(format!("training diverged: non-finite value in {op}")),
        other => other,
    }
}

/// Left branch of a pair batch.
enum Left<'a> {
    Images(&'a Tensor, Gate),
    /// Precomputed embeddings, constant under training.
    Embedded(Tensor),
}

/// Loss and gradients (trainable tensors, in `trainable_tensors` order) of
/// one batch.
fn batch_gradients(model: &ModelAssembly, left: Left<'_>, right: &Tensor, right_gate: Gate, labels: &[u8], margin: f64) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true)?;
    let el = match left {
        Left::Embedded(e) => tape.constant(&e)?,
        Left::Images(x, gate) => {
            let x = tape.constant(x)?;
            model.embed_on_tape(&mut tape, &bound, x, gate)?
        }
    };
    let xr = tape.constant(right)?;
    let er = model.embed_on_tape(&mut tape, &bound, xr, right_gate)?;
    let loss = contrastive_loss(&mut tape, el, er, labels, margin)?;
    tape.backward(loss)?;
    let vars = if model.frozen { bound.caim_vars() } else { bound.backbone_vars() };
    let grads = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();
    Ok((tape.value(loss).data()[0], grads))
}

fn gather(pool: &[&SampleRecord], idx: &[usize]) -> Result<Tensor> {
    let imgs: Vec<&Tensor> = idx.iter().map(|&i| &pool[i].image).collect();
    stack_images(&imgs)
}

/// Trains the CAIM blocks of a frozen assembly on cross-modal pairs: source
/// images with gate 0, target images with gate 1.
pub fn train_caim(model: &ModelAssembly, data: &DatasetBundle, cfg: &TrainConfig) -> Result<(ModelAssembly, History)> {
    cfg.validate()?;
    if !model.frozen || model.caim.is_empty() {
        return Err(Error::Config("train_caim needs a frozen backbone with inserted CAIM blocks".into()));
    }
    let mut model = model.clone();
    let mut history = History::default();
    if cfg.epochs == 0 {
        return Ok((model, history));
    }
    let (sampler, src, tgt) = cross_modal_sampler(data, cfg.batch_size, cfg.seed)?;
    // With conditional blocks the source branch never touches trainable
    // tensors, so its embeddings are fixed for the whole run.
    let cached_source = match model.mode {
        BlockMode::Conditional => {
            let imgs: Vec<&Tensor> = src.iter().map(|r| &r.image).collect();
            Some(model.embed_images(&imgs, Gate::Source)?)
        }
        _ => None,
    };
    let mut adam = AdamState::new(&model.trainable_tensors());
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = sampler.epoch(epoch);
        for b in &batches {
            let images;
            let left = match &cached_source {
                Some(e) => {
                    let d = e.shape()[1];
                    let rows: Vec<f64> = b.left.iter().flat_map(|&i| e.data()[i * d..(i + 1) * d].iter().copied()).collect();
                    Left::Embedded(Tensor::new(vec![b.left.len(), d], rows)?)
                }
                None => {
                    images = gather(&src, &b.left)?;
                    Left::Images(&images, Gate::Source)
                }
            };
            let right = gather(&tgt, &b.right)?;
            let (loss, grads) = batch_gradients(&model, left, &right, Gate::Target, &b.labels, cfg.margin).map_err(numeric)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss became {loss} in epoch {}", epoch + 1)));
            }
            total += loss;
            adam_update(&mut model.trainable_tensors_mut(), &grads, &mut adam, cfg)?;
        }
        let holdout_eer = if cfg.track_holdout_eer { Some(metrics::evaluate(&model, data).map_err(numeric)?.cross.eer) } else { None };
        history.epochs.push(EpochRecord { epoch: epoch + 1, mean_loss: total / batches.len() as f64, holdout_eer });
    }
    Ok((model, history))
}

/// Trains an unfrozen backbone on source/source pairs, then freezes it.
pub fn pretrain_source(model: &ModelAssembly, data: &DatasetBundle, cfg: &TrainConfig) -> Result<(ModelAssembly, History)> {
    cfg.validate()?;
    if model.frozen {
        return Err(Error::Config("backbone is already frozen".into()));
    }
    let pool = data.pretrain_pool();
    let ids: Vec<u32> = pool.iter().map(|r| r.identity).collect();
    let sampler = PairSampler::new(ids.clone(), ids, true, cfg.batch_size, cfg.seed)?;
    let mut model = model.clone();
    let mut adam = AdamState::new(&model.trainable_tensors());
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = sampler.epoch(epoch);
        for b in &batches {
            let left = gather(&pool, &b.left)?;
            let right = gather(&pool, &b.right)?;
            let (loss, grads) =
                batch_gradients(&model, Left::Images(&left, Gate::Source), &right, Gate::Source, &b.labels, cfg.margin).map_err(numeric)?;
            total += loss;
            adam_update(&mut model.trainable_tensors_mut(), &grads, &mut adam, cfg)?;
        }
        let holdout_eer = if cfg.track_holdout_eer {
            metrics::source_report(&model, data, Split::Eval).map_err(numeric)?.map(|r| r.eer)
        } else {
            None
        };
        history.epochs.push(EpochRecord { epoch: epoch + 1, mean_loss: total / batches.len() as f64, holdout_eer });
    }
    model.freeze();
    Ok((model, history))
}
