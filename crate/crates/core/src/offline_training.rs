//! Server-side training: pretraining through a temporary classification head
//! and prototype-based metalearning on the base session.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{sgd_step, BackwardScope, GradientTape, Gradients, ModelParams};
use crate::data_io::LabeledDataset;
use crate::error::{shape, Error, Result};
use crate::explicit_memory::{quantize_feature, ExplicitMemory, QuantSpec};
use crate::losses::{
    cutmix_with_box, mean_offdiag_gram, mixup_with_lambda, multi_margin_loss, pretrain_loss, sample_augmentation,
    sample_lambda, Augmentation, Grid, PatchBox, PretrainLossConfig,
};
use crate::numerics::{argmax, cossim_with_grad, one_hot, softmax_ce, Matrix};
use crate::online_learner::{learn_class, ActivationMemory};

pub const DEFAULT_PRETRAIN_EPOCHS: usize = 30;
pub const DEFAULT_PRETRAIN_LR: f64 = 0.05;
pub const DEFAULT_BATCH_SIZE: usize = 8;
pub const DEFAULT_META_SAMPLES: usize = 5;
pub const DEFAULT_META_ITERATIONS: usize = 500;
pub const DEFAULT_META_LR: f64 = 1.0;
pub const DEFAULT_QUERY_BATCH: usize = 64;

/// Linear classifier over `θ_p` used only while pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct FccHead {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl FccHead {
    /// Glorot-uniform weights, zero bias. Requires fewer classes than `d_p`.
    pub fn init<R: Rng + ?Sized>(num_classes: usize, d_p: usize, rng: &mut R) -> Result<Self> {
        if num_classes == 0 || num_classes >= d_p {
            return Err(Error::InvalidConfig(format!(
                "classification head needs 0 < classes < d_p, got {num_classes} classes for d_p {d_p}"
            )));
        }
        let bound = (6.0 / (num_classes + d_p) as f64).sqrt();
        let data = (0..num_classes * d_p).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(Self {
            weight: Matrix::new(num_classes, d_p, data)?,
            bias: vec![0.0; num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn logits(&self, theta_p: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.weight.matvec(theta_p)?;
        for (v, b) in z.iter_mut().zip(&self.bias) {
            *v += b;
        }
        Ok(z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub loss: PretrainLossConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Spatial layout for cutmix; a flat strip when absent.
    pub grid: Option<Grid>,
    /// Passes `θ_p` through 8-bit quantize→dequantize with a straight-through
    /// gradient.
    pub quantize_features: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            loss: PretrainLossConfig::default(),
            epochs: DEFAULT_PRETRAIN_EPOCHS,
            lr: DEFAULT_PRETRAIN_LR,
            batch_size: DEFAULT_BATCH_SIZE,
            grid: None,
            quantize_features: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub ortho: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl PretrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,ce,ortho,accuracy\n");
        for r in &self.epochs {
            writeln!(out, "{},{:.9},{:.9},{:.6}", r.epoch, r.ce, r.ortho, r.accuracy).unwrap();
        }
        out
    }
}

/// Sorted class ids of a dataset with their positions.
pub fn class_index(ds: &LabeledDataset) -> BTreeMap<u32, usize> {
    ds.classes().into_iter().enumerate().map(|(i, c)| (c, i)).collect()
}

fn straight_through(theta_p: Vec<f64>, enabled: bool) -> Result<Vec<f64>> {
    if !enabled {
        return Ok(theta_p);
    }
    let q = quantize_feature(&theta_p, 8)?;
    Ok(if q.degenerate { theta_p } else { q.dequantize() })
}

/// Batch boundaries; a trailing singleton joins the previous batch so every
/// batch has at least two rows for the Gram term.
fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().unwrap().len() == 1 {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

fn check_finite_params(params: &ModelParams) -> Result<()> {
    let ok = params
        .layers()
        .iter()
        .all(|l| l.weight.data().iter().chain(&l.bias).all(|v| v.is_finite()));
    if ok {
        Ok(())
    } else {
        Err(Error::NumericFailure("parameters became non-finite".into()))
    }
}

/// Minibatch SGD on `L_ce + λ·L_ortho` through the FCC head. Each batch is
/// augmented by at most one of mixup and cutmix, pairing samples with a
/// shuffled copy of the batch.
pub fn pretrain(
    params: &mut ModelParams,
    fcc: &mut FccHead,
    dataset: &LabeledDataset,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainHistory> {
    cfg.loss.validate()?;
    if cfg.epochs == 0 || cfg.batch_size < 2 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("pretraining needs epochs ≥ 1, batch_size ≥ 2 and lr > 0".into()));
    }
    if dataset.len() < 2 {
        return Err(shape("pretraining needs at least two samples"));
    }
    if dataset.input_dim() != params.input_dim() {
        return Err(shape(format!(
            "dataset dim {} for model input {}",
            dataset.input_dim(),
            params.input_dim()
        )));
    }
    let classes = class_index(dataset);
    if classes.len() != fcc.num_classes() || fcc.weight.cols() != params.d_p() {
        return Err(shape(format!(
            "head of {}x{} for {} classes and d_p {}",
            fcc.num_classes(),
            fcc.weight.cols(),
            classes.len(),
            params.d_p()
        )));
    }
    let grid = cfg.grid.unwrap_or(Grid::strip(dataset.input_dim()));
    if grid.len() != dataset.input_dim() {
        return Err(shape("cutmix grid does not cover the input"));
    }
    let c = classes.len();
    let labels: Vec<usize> = dataset.labels().iter().map(|y| classes[y]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = PretrainHistory::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ce_sum, mut ortho_sum, mut correct, mut batches) = (0.0, 0.0, 0usize, 0usize);
        for range in batch_ranges(order.len(), cfg.batch_size) {
            let idx = &order[range];
            let b = idx.len();
            let mut xs: Vec<Vec<f64>> = idx.iter().map(|&i| dataset.inputs()[i].clone()).collect();
            let mut ys: Vec<Vec<f64>> = idx.iter().map(|&i| one_hot(labels[i], c)).collect();
            match sample_augmentation(&cfg.loss, &mut rng) {
                Augmentation::None => {}
                aug => {
                    let mut partner: Vec<usize> = (0..b).collect();
                    partner.shuffle(&mut rng);
                    let lambda = sample_lambda(cfg.loss.mix_alpha, &mut rng)?;
                    let patch = PatchBox::sample(grid, lambda, &mut rng);
                    let (x0, y0) = (xs.clone(), ys.clone());
                    for i in 0..b {
                        let j = partner[i];
                        let (x, y) = if aug == Augmentation::Mixup {
                            mixup_with_lambda(&x0[i], &x0[j], &y0[i], &y0[j], lambda)?
                        } else {
                            cutmix_with_box(&x0[i], &x0[j], &y0[i], &y0[j], grid, patch)?
                        };
                        xs[i] = x;
                        ys[i] = y;
                    }
                }
            }

            let forward: Vec<(GradientTape, Vec<f64>)> = xs
                .par_iter()
                .map(|x| {
                    let mut tape = GradientTape::new(params);
                    let f = params.forward(x, Some(&mut tape))?;
                    Ok((tape, straight_through(f.projection, cfg.quantize_features)?))
                })
                .collect::<Result<_>>()?;
            let feats: Vec<&[f64]> = forward.iter().map(|(_, f)| f.as_slice()).collect();
            let theta = Matrix::from_rows(&feats)?;
            let logits_rows = feats.iter().map(|f| fcc.logits(f)).collect::<Result<Vec<_>>>()?;
            let logits = Matrix::from_rows(&logits_rows)?;
            let loss = pretrain_loss(&logits, &ys, &theta, &cfg.loss)?;
            if !loss.total.is_finite() {
                return Err(Error::NumericFailure(format!("pretraining loss is {} at epoch {epoch}", loss.total)));
            }
            for (k, &i) in idx.iter().enumerate() {
                if argmax(logits.row(k)) == labels[i] {
                    correct += 1;
                }
            }

            let mut fcc_w = Matrix::zeros(fcc.weight.rows(), fcc.weight.cols());
            let mut fcc_b = vec![0.0; c];
            let mut upstream = Vec::with_capacity(b);
            for k in 0..b {
                let gl = loss.grad_logits.row(k);
                fcc_w.add_outer(gl, feats[k], 1.0);
                for (o, g) in fcc_b.iter_mut().zip(gl) {
                    *o += g;
                }
                let mut up = fcc.weight.matvec_transposed(gl)?;
                for (u, g) in up.iter_mut().zip(loss.grad_features.row(k)) {
                    *u += g;
                }
                upstream.push(up);
            }
            let per_sample: Vec<Gradients> = forward
                .into_par_iter()
                .zip(upstream.par_iter())
                .map(|((mut tape, _), up)| {
                    params.backward(&mut tape, up, BackwardScope::Full)?;
                    Ok(tape.grads)
                })
                .collect::<Result<_>>()?;
            let mut grads = Gradients::zeros_like(params);
            for g in &per_sample {
                grads.add_assign(g);
            }
            if !grads.is_finite() {
                return Err(Error::NumericFailure(format!("non-finite gradient at epoch {epoch}")));
            }
            sgd_step(params, &grads, cfg.lr);
            for (w, g) in fcc.weight.data_mut().iter_mut().zip(fcc_w.data()) {
                *w -= cfg.lr * g;
            }
            for (w, g) in fcc.bias.iter_mut().zip(&fcc_b) {
                *w -= cfg.lr * g;
            }
            check_finite_params(params)?;
            ce_sum += loss.ce;
            ortho_sum += loss.ortho;
            batches += 1;
        }
        history.epochs.push(EpochRecord {
            epoch,
            ce: ce_sum / batches as f64,
            ortho: ortho_sum / batches as f64,
            accuracy: correct as f64 / dataset.len() as f64,
        });
    }
    Ok(history)
}

/// Fraction of samples whose FCC argmax is their label.
pub fn fcc_accuracy(params: &ModelParams, fcc: &FccHead, ds: &LabeledDataset, classes: &BTreeMap<u32, usize>) -> Result<f64> {
    let hits = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = ds.get(i);
            let z = fcc.logits(&params.forward(x, None)?.projection)?;
            Ok(usize::from(classes.get(&y) == Some(&argmax(&z))))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / ds.len().max(1) as f64)
}

/// Which loss metalearning minimizes over the sharpened scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaObjective {
    MultiMargin,
    CrossEntropy,
}

impl MetaObjective {
    pub fn name(self) -> &'static str {
        match self {
            MetaObjective::MultiMargin => "multi-margin",
            MetaObjective::CrossEntropy => "cross-entropy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "multi-margin" | "mm" => Some(MetaObjective::MultiMargin),
            "cross-entropy" | "ce" => Some(MetaObjective::CrossEntropy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    pub meta_samples: usize,
    pub iterations: usize,
    pub lr: f64,
    pub margin: f64,
    pub query_batch: usize,
    pub objective: MetaObjective,
    /// Back-propagates through the prototype means as well as the queries.
    pub through_prototypes: bool,
    pub quantize_features: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            meta_samples: DEFAULT_META_SAMPLES,
            iterations: DEFAULT_META_ITERATIONS,
            lr: DEFAULT_META_LR,
            margin: crate::losses::DEFAULT_MARGIN,
            query_batch: DEFAULT_QUERY_BATCH,
            objective: MetaObjective::MultiMargin,
            through_prototypes: false,
            quantize_features: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.meta_samples == 0 || self.iterations == 0 || self.query_batch == 0 {
            return Err(Error::InvalidConfig("meta_samples, iterations and query_batch must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.margin > 0.0) {
            return Err(Error::InvalidConfig("metalearning lr and margin must be positive".into()));
        }
        Ok(())
    }
}

/// `lᵢ = ReLU(cos(θ_p, pᵢ))` for each prototype.
pub fn meta_score(params: &ModelParams, x: &[f64], prototypes: &[Vec<f64>]) -> Result<Vec<f64>> {
    let theta = params.forward(x, None)?.projection;
    prototypes
        .iter()
        .map(|p| Ok(crate::numerics::cossim(&theta, p)?.max(0.0)))
        .collect()
}

/// Loss on the scores and its gradient w.r.t. them.
fn score_loss(scores: &[f64], gt: usize, objective: MetaObjective, margin: f64) -> Result<(f64, Vec<f64>)> {
    match objective {
        MetaObjective::MultiMargin => multi_margin_loss(scores, gt, margin),
        MetaObjective::CrossEntropy => softmax_ce(scores, gt),
    }
}

/// Loss of one query against fixed prototypes, plus parameter gradients and
/// the gradient w.r.t. each prototype.
struct QueryGrad {
    loss: f64,
    correct: bool,
    grads: Gradients,
    proto_grads: Vec<Vec<f64>>,
}

fn query_grad(
    params: &ModelParams,
    x: &[f64],
    gt: usize,
    prototypes: &[Vec<f64>],
    objective: MetaObjective,
    margin: f64,
    quantize: bool,
) -> Result<QueryGrad> {
    let mut tape = GradientTape::new(params);
    let theta = straight_through(params.forward(x, Some(&mut tape))?.projection, quantize)?;
    let mut scores = Vec::with_capacity(prototypes.len());
    let mut d_theta_parts = Vec::with_capacity(prototypes.len());
    for p in prototypes {
        let (c, ga, gb) = cossim_with_grad(&theta, p)?;
        let active = c > 0.0;
        scores.push(if active { c } else { 0.0 });
        d_theta_parts.push((active, ga, gb));
    }
    let (loss, dl) = score_loss(&scores, gt, objective, margin)?;
    let mut upstream = vec![0.0; theta.len()];
    let mut proto_grads = Vec::with_capacity(prototypes.len());
    for ((active, ga, gb), d) in d_theta_parts.into_iter().zip(&dl) {
        if active && *d != 0.0 {
            for (u, g) in upstream.iter_mut().zip(&ga) {
                *u += d * g;
            }
            proto_grads.push(gb.into_iter().map(|g| d * g).collect());
        } else {
            proto_grads.push(vec![0.0; theta.len()]);
        }
    }
    params.backward(&mut tape, &upstream, BackwardScope::Full)?;
    Ok(QueryGrad {
        loss,
        correct: argmax(&scores) == gt,
        grads: tape.grads,
        proto_grads,
    })
}

/// Metalearning loss of one query with the prototypes held constant, and its
/// gradient w.r.t. every parameter.
pub fn meta_query_loss(
    params: &ModelParams,
    x: &[f64],
    gt: usize,
    prototypes: &[Vec<f64>],
    objective: MetaObjective,
    margin: f64,
) -> Result<(f64, Gradients)> {
    let q = query_grad(params, x, gt, prototypes, objective, margin, false)?;
    Ok((q.loss, q.grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaRecord {
    pub iteration: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetaHistory {
    pub iterations: Vec<MetaRecord>,
}

impl MetaHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,accuracy\n");
        for r in &self.iterations {
            writeln!(out, "{},{:.9},{:.6}", r.iteration, r.loss, r.accuracy).unwrap();
        }
        out
    }
}

/// Episodic training on the base session. Each iteration draws
/// `meta_samples` per class to form full-precision prototypes, scores a
/// query batch from the remaining samples, and takes one SGD step on the
/// backbone and FCR.
pub fn metalearn(params: &mut ModelParams, dataset: &LabeledDataset, cfg: &MetaConfig, seed: u64) -> Result<MetaHistory> {
    cfg.validate()?;
    let by_class = dataset.indices_by_class();
    if by_class.len() < 2 {
        return Err(Error::InsufficientClasses {
            needed: 2,
            available: by_class.len(),
        });
    }
    for (&class_id, rows) in &by_class {
        if rows.len() < cfg.meta_samples {
            return Err(Error::InsufficientSamples {
                class_id,
                needed: cfg.meta_samples,
                available: rows.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = by_class.values().cloned().collect();
    let mut history = MetaHistory::default();
    let n = cfg.meta_samples;

    for iteration in 0..cfg.iterations {
        let mut meta: Vec<Vec<usize>> = Vec::with_capacity(pools.len());
        let mut queries: Vec<(usize, usize)> = Vec::new();
        for (ci, rows) in pools.iter_mut().enumerate() {
            rows.shuffle(&mut rng);
            meta.push(rows[..n].to_vec());
            queries.extend(rows[n..].iter().map(|&i| (i, ci)));
        }
        if queries.is_empty() {
            return Err(Error::InsufficientSamples {
                class_id: *by_class.keys().next().unwrap(),
                needed: n + 1,
                available: n,
            });
        }
        queries.shuffle(&mut rng);
        queries.truncate(cfg.query_batch);

        let meta_fwd: Vec<Vec<(Option<GradientTape>, Vec<f64>)>> = meta
            .iter()
            .map(|rows| {
                rows.par_iter()
                    .map(|&i| {
                        let mut tape = cfg.through_prototypes.then(|| GradientTape::new(params));
                        let f = params.forward(&dataset.inputs()[i], tape.as_mut())?;
                        Ok((tape, straight_through(f.projection, cfg.quantize_features)?))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let prototypes: Vec<Vec<f64>> = meta_fwd
            .iter()
            .map(|fs| {
                let mut m = vec![0.0; params.d_p()];
                for (_, f) in fs {
                    for (a, v) in m.iter_mut().zip(f) {
                        *a += v;
                    }
                }
                m.iter().map(|v| v / n as f64).collect()
            })
            .collect();

        let results: Vec<QueryGrad> = queries
            .par_iter()
            .map(|&(i, ci)| {
                query_grad(
                    params,
                    &dataset.inputs()[i],
                    ci,
                    &prototypes,
                    cfg.objective,
                    cfg.margin,
                    cfg.quantize_features,
                )
            })
            .collect::<Result<_>>()?;
        let q = results.len() as f64;
        let mut grads = Gradients::zeros_like(params);
        let mut loss = 0.0;
        let mut correct = 0usize;
        let mut proto_up = vec![vec![0.0; params.d_p()]; prototypes.len()];
        for r in &results {
            grads.add_assign(&r.grads);
            loss += r.loss;
            correct += usize::from(r.correct);
            for (acc, g) in proto_up.iter_mut().zip(&r.proto_grads) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        grads.scale(1.0 / q);
        if cfg.through_prototypes {
            for (fs, up) in meta_fwd.into_iter().zip(&proto_up) {
                let up: Vec<f64> = up.iter().map(|v| v / (q * n as f64)).collect();
                for (tape, _) in fs {
                    let mut tape = tape.unwrap();
                    params.backward(&mut tape, &up, BackwardScope::Full)?;
                    grads.add_assign(&tape.grads);
                }
            }
        }
        loss /= q;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NumericFailure(format!("metalearning loss is {loss} at iteration {iteration}")));
        }
        sgd_step(params, &grads, cfg.lr);
        check_finite_params(params)?;
        history.iterations.push(MetaRecord {
            iteration,
            loss,
            accuracy: correct as f64 / q,
        });
    }
    Ok(history)
}

/// Inserts every base class into fresh memories, using all of its samples.
pub fn build_base_em(
    params: &ModelParams,
    base: &LabeledDataset,
    quant: &QuantSpec,
) -> Result<(ExplicitMemory, ActivationMemory)> {
    let mut em = ExplicitMemory::new(params.d_p(), quant.clone())?;
    let mut am = ActivationMemory::new(params.d_a());
    for class_id in base.classes() {
        learn_class(&mut em, &mut am, params, &base.samples_of(class_id), class_id)?;
    }
    Ok((em, am))
}

/// `θ_p` for every sample, computed in parallel.
pub fn project_all(params: &ModelParams, ds: &LabeledDataset) -> Result<Vec<Vec<f64>>> {
    ds.inputs()
        .par_iter()
        .map(|x| Ok(params.forward(x, None)?.projection))
        .collect()
}

/// Fraction of samples the memory assigns to their label.
pub fn em_accuracy(params: &ModelParams, em: &ExplicitMemory, ds: &LabeledDataset) -> Result<f64> {
    let feats = project_all(params, ds)?;
    let hits = feats
        .par_iter()
        .zip(ds.labels().par_iter())
        .map(|(f, y)| Ok(usize::from(em.classify(f)?.class_id == *y)))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / ds.len().max(1) as f64)
}

/// Mean off-diagonal `|cos|` between the projections of `ds`.
pub fn feature_gram(params: &ModelParams, ds: &LabeledDataset) -> Result<f64> {
    let feats = project_all(params, ds)?;
    mean_offdiag_gram(&Matrix::from_rows(&feats)?)
}
