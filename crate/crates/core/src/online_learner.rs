//! On-device learning: single-pass class insertion and optional FCR
//! finetuning from stored class-average activations.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{sgd_step_layers, BackwardScope, FeatureExtractor, Features, GradientTape, Gradients, ModelParams};
use crate::error::{shape, Error, Result};
use crate::explicit_memory::{bipolarize, quantize_feature, ExplicitMemory};
use crate::io_util::{write_file, ByteReader};
use crate::numerics::{cossim_with_grad, Matrix};

const AM_MAGIC: &[u8; 4] = b"OFAM";
const AM_VERSION: u32 = 1;

pub const DEFAULT_FINETUNE_EPOCHS: usize = 100;
pub const DEFAULT_FINETUNE_SUB_BATCH: usize = 5;
pub const DEFAULT_FINETUNE_LR: f64 = 0.01;

/// Per-class mean backbone activation `θ̄_a` with its shot count.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationEntry {
    pub mean: Vec<f64>,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMemory {
    d_a: usize,
    entries: BTreeMap<u32, ActivationEntry>,
}

impl ActivationMemory {
    pub fn new(d_a: usize) -> Self {
        Self {
            d_a,
            entries: BTreeMap::new(),
        }
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, class_id: u32) -> bool {
        self.entries.contains_key(&class_id)
    }

    pub fn get(&self, class_id: u32) -> Option<&ActivationEntry> {
        self.entries.get(&class_id)
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.entries.keys().copied().collect()
    }

    pub fn insert(&mut self, class_id: u32, entry: ActivationEntry) -> Result<()> {
        if self.contains(class_id) {
            return Err(Error::DuplicateClass(class_id));
        }
        if entry.mean.len() != self.d_a {
            return Err(shape(format!("activation of length {} for d_a {}", entry.mean.len(), self.d_a)));
        }
        self.entries.insert(class_id, entry);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(AM_MAGIC);
        for v in [AM_VERSION, self.entries.len() as u32, self.d_a as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (id, e) in &self.entries {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&e.count.to_le_bytes());
            for v in &e.mean {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::FormatVersionMismatch(format!("activation memory: {what}"));
        let mut r = ByteReader::new(bytes);
        if r.take(4) != Some(AM_MAGIC.as_slice()) {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != AM_VERSION {
            return Err(bad(&format!("version {version}, expected {AM_VERSION}")));
        }
        let n = r.u32().ok_or_else(|| bad("truncated header"))?;
        let d_a = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let mut am = Self::new(d_a);
        for _ in 0..n {
            let id = r.u32().ok_or_else(|| bad("truncated record"))?;
            let count = r.u32().ok_or_else(|| bad("truncated record"))?;
            let mean = (0..d_a)
                .map(|_| r.f64().ok_or_else(|| bad("truncated payload")))
                .collect::<Result<Vec<_>>>()?;
            am.insert(id, ActivationEntry { mean, count }).map_err(|e| bad(&e.to_string()))?;
        }
        if r.remaining() != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(am)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Wraps an extractor and counts forward passes.
pub struct CountingExtractor<'a, F: FeatureExtractor + ?Sized> {
    inner: &'a F,
    calls: Cell<usize>,
}

impl<'a, F: FeatureExtractor + ?Sized> CountingExtractor<'a, F> {
    pub fn new(inner: &'a F) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    pub fn reset(&self) {
        self.calls.set(0);
    }
}

impl<F: FeatureExtractor + ?Sized> FeatureExtractor for CountingExtractor<'_, F> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn d_a(&self) -> usize {
        self.inner.d_a()
    }

    fn d_p(&self) -> usize {
        self.inner.d_p()
    }

    fn extract(&self, x: &[f64]) -> Result<Features> {
        self.calls.set(self.calls.get() + 1);
        self.inner.extract(x)
    }
}

/// Adds a class from its shots in one pass: each sample is extracted once,
/// its projection quantized and summed into the prototype accumulator, and
/// its activation summed into the activation memory.
///
/// Nothing is stored unless every shot succeeds.
pub fn learn_class<F: FeatureExtractor + ?Sized>(
    em: &mut ExplicitMemory,
    act_mem: &mut ActivationMemory,
    extractor: &F,
    samples: &[Vec<f64>],
    class_id: u32,
) -> Result<()> {
    if em.contains(class_id) || act_mem.contains(class_id) {
        return Err(Error::DuplicateClass(class_id));
    }
    if samples.is_empty() {
        return Err(Error::EmptySampleSet(class_id));
    }
    if extractor.d_p() != em.d_p() || extractor.d_a() != act_mem.d_a() {
        return Err(shape(format!(
            "extractor dims (d_a {}, d_p {}) do not match memories (d_a {}, d_p {})",
            extractor.d_a(),
            extractor.d_p(),
            act_mem.d_a(),
            em.d_p()
        )));
    }
    let spec = em.spec().clone();
    if samples.len() > spec.max_shots as usize {
        return Err(Error::ShotLimitExceeded {
            class_id,
            max_shots: spec.max_shots,
        });
    }
    let limit = (1i64 << (spec.accum_bits - 1)) - 1;
    let mut accum = vec![0i64; em.d_p()];
    let mut act_sum = vec![0.0; act_mem.d_a()];
    for x in samples {
        let f = extractor.extract(x)?;
        let q = quantize_feature(&f.projection, spec.feature_bits)?;
        for (a, v) in accum.iter_mut().zip(&q.values) {
            *a = a
                .checked_add(*v)
                .filter(|s| s.abs() <= limit)
                .ok_or(Error::AccumulatorOverflow {
                    class_id,
                    bits: spec.accum_bits,
                })?;
        }
        for (s, v) in act_sum.iter_mut().zip(&f.activation) {
            *s += v;
        }
    }
    let count = samples.len() as u32;
    let inv = 1.0 / count as f64;
    let mean = act_sum.into_iter().map(|s| s * inv).collect();
    em.add_class(class_id, accum, count)?;
    act_mem.insert(class_id, ActivationEntry { mean, count })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Classes per sub-batch; clamped to the number of stored classes.
    pub sub_batch: usize,
    pub lr: f64,
    /// Shuffles the sub-batch order each epoch when set.
    pub shuffle_seed: Option<u64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_FINETUNE_EPOCHS,
            sub_batch: DEFAULT_FINETUNE_SUB_BATCH,
            lr: DEFAULT_FINETUNE_LR,
            shuffle_seed: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.sub_batch == 0 {
            return Err(Error::InvalidConfig("finetune epochs and sub_batch must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("finetune lr {}", self.lr)));
        }
        Ok(())
    }
}

/// Consecutive groups of `n` class indices; the last may be shorter.
pub fn subbatch_plan(num_classes: usize, n: usize) -> Vec<Vec<usize>> {
    let n = n.max(1);
    (0..num_classes)
        .collect::<Vec<_>>()
        .chunks(n)
        .map(<[usize]>::to_vec)
        .collect()
}

/// The matrices one finetuning step works on: class-average activations,
/// the FCR's current outputs for them, and the bipolar targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SubBatch {
    pub class_ids: Vec<u32>,
    pub inputs: Matrix,
    pub outputs: Matrix,
    pub targets: Matrix,
}

/// `Σᵢ (1 − cos(FCR(θ̄_a,i), tᵢ))` and its gradient. Only FCR buffers of the
/// returned gradients are populated.
pub fn finetune_objective(params: &ModelParams, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(f64, Gradients)> {
    if inputs.len() != targets.len() {
        return Err(shape(format!("{} inputs with {} targets", inputs.len(), targets.len())));
    }
    let mut tape = GradientTape::new(params);
    let mut loss = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        let y = params.forward_fcr(x, Some(&mut tape))?;
        let (c, gy, _) = cossim_with_grad(&y, t)?;
        loss += 1.0 - c;
        let upstream: Vec<f64> = gy.iter().map(|g| -g).collect();
        params.backward(&mut tape, &upstream, BackwardScope::FcrOnly)?;
    }
    Ok((loss, tape.grads))
}

fn check_aligned(act_mem: &ActivationMemory, em: &ExplicitMemory, params: &ModelParams) -> Result<()> {
    if act_mem.class_ids() != em.class_ids() {
        return Err(Error::MisalignedMemories(format!(
            "activation memory holds {:?}, prototype memory holds {:?}",
            act_mem.class_ids(),
            em.class_ids()
        )));
    }
    if act_mem.d_a() != params.d_a() || em.d_p() != params.d_p() {
        return Err(Error::MisalignedMemories(format!(
            "memories have d_a {} / d_p {}, model has {} / {}",
            act_mem.d_a(),
            em.d_p(),
            params.d_a(),
            params.d_p()
        )));
    }
    Ok(())
}

/// Assembles the sub-batches of one epoch in plan order.
pub fn assemble_subbatches(
    params: &ModelParams,
    act_mem: &ActivationMemory,
    em: &ExplicitMemory,
    sub_batch: usize,
) -> Result<Vec<SubBatch>> {
    check_aligned(act_mem, em, params)?;
    let ids = em.class_ids();
    subbatch_plan(ids.len(), sub_batch.min(ids.len()))
        .into_iter()
        .map(|group| {
            let class_ids: Vec<u32> = group.iter().map(|&i| ids[i]).collect();
            let mut inputs = Vec::new();
            let mut outputs = Vec::new();
            let mut targets = Vec::new();
            for id in &class_ids {
                let a = &act_mem.get(*id).unwrap().mean;
                outputs.push(params.forward_fcr(a, None)?);
                inputs.push(a.clone());
                targets.push(target_for(em, *id));
            }
            Ok(SubBatch {
                class_ids,
                inputs: Matrix::from_rows(&inputs)?,
                outputs: Matrix::from_rows(&outputs)?,
                targets: Matrix::from_rows(&targets)?,
            })
        })
        .collect()
}

fn target_for(em: &ExplicitMemory, class_id: u32) -> Vec<f64> {
    bipolarize(&em.get(class_id).unwrap().quantized)
        .into_iter()
        .map(f64::from)
        .collect()
}

/// Objective summed over each epoch, evaluated before that epoch's updates.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneHistory {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Trains the FCR toward the bipolarized prototypes with one SGD step per
/// sub-batch. The backbone and the prototypes are left untouched.
pub fn finetune_fcr(
    params: &mut ModelParams,
    act_mem: &ActivationMemory,
    em: &ExplicitMemory,
    cfg: &FinetuneConfig,
) -> Result<FinetuneHistory> {
    cfg.validate()?;
    check_aligned(act_mem, em, params)?;
    let ids = em.class_ids();
    let mut history = FinetuneHistory {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        steps: 0,
    };
    if ids.is_empty() {
        return Ok(history);
    }
    let inputs: Vec<Vec<f64>> = ids.iter().map(|id| act_mem.get(*id).unwrap().mean.clone()).collect();
    let targets: Vec<Vec<f64>> = ids.iter().map(|id| target_for(em, *id)).collect();
    let mut plan = subbatch_plan(ids.len(), cfg.sub_batch.min(ids.len()));
    let mut rng = cfg.shuffle_seed.map(ChaCha8Rng::seed_from_u64);
    let fcr = params.split()..params.split() + 1;
    for _ in 0..cfg.epochs {
        if let Some(r) = rng.as_mut() {
            plan.shuffle(r);
        }
        let mut epoch_loss = 0.0;
        for group in &plan {
            let xs: Vec<Vec<f64>> = group.iter().map(|&i| inputs[i].clone()).collect();
            let ts: Vec<Vec<f64>> = group.iter().map(|&i| targets[i].clone()).collect();
            let (loss, grads) = finetune_objective(params, &xs, &ts)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NumericFailure("non-finite finetuning loss".into()));
            }
            epoch_loss += loss;
            sgd_step_layers(params, &grads, cfg.lr, fcr.clone());
            history.steps += 1;
        }
        history.epoch_losses.push(epoch_loss);
    }
    Ok(history)
}
