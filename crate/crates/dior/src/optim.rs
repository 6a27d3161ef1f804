//! Adam, the cosine-annealing warm-restart schedule, and the joint
//! categorical/differential training loop.

use crate::autodiff::{Scalar, Tape, TensorId};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{self, DiffLossKind, LossConfig};
use crate::metrics::{self, ConfusionMatrix};
use crate::model::{
    self, categorical_head, differential_head, extract_features, insert_params, ArchConfig,
    ModelLeaves, ModelParams,
};
use crate::pairing::enumerate_pairs;
use crate::rng::substream_indexed;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

/// Thread pool sized by the DIOR_THREADS environment variable
/// (default: all cores). Used for pure per-sample work only.
pub fn thread_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("DIOR_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
    })
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter first and second moments, zero-initialized.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        AdamState {
            m: params
                .tensors
                .iter()
                .map(|t| vec![S::zero(); t.values.len()])
                .collect(),
            v: params
                .tensors
                .iter()
                .map(|t| vec![S::zero(); t.values.len()])
                .collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update. `grads` is one gradient array per
/// parameter tensor, in layout order.
pub fn adam_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &[Vec<S>],
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<()> {
    assert_eq!(grads.len(), params.tensors.len());
    for (tensor, g) in params.tensors.iter().zip(grads) {
        if g.iter().any(|v| v.is_nan()) {
            return Err(Error::NumericDomain {
                op: "adam_step",
                detail: format!("NaN gradient in parameter group `{}`", tensor.name),
            });
        }
        assert_eq!(tensor.values.len(), g.len());
    }
    state.t += 1;
    let b1 = S::from_f64(ADAM_BETA1);
    let b2 = S::from_f64(ADAM_BETA2);
    let eps = S::from_f64(ADAM_EPS);
    let corr1 = S::from_f64(1.0 - ADAM_BETA1.powi(state.t as i32));
    let corr2 = S::from_f64(1.0 - ADAM_BETA2.powi(state.t as i32));
    let lr = S::from_f64(lr);
    for ((tensor, g), (m, v)) in params
        .tensors
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (S::one() - b1) * g[i];
            v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            tensor.values[i] = tensor.values[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub eta_max: f64,
    pub eta_min: f64,
    /// Epochs in the first cycle.
    pub t_0: usize,
    /// Cycle length multiplier.
    pub t_mult: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            eta_max: 1e-4,
            eta_min: 0.0,
            t_0: 10,
            t_mult: 2,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_max > self.eta_min && self.eta_min >= 0.0) {
            return Err(Error::Config(format!(
                "need eta_max > eta_min >= 0, got {} and {}",
                self.eta_max, self.eta_min
            )));
        }
        if self.t_0 < 1 || self.t_mult < 1 {
            return Err(Error::Config("t_0 and t_mult must be at least 1".into()));
        }
        Ok(())
    }
}

/// Learning rate at the start of `epoch` under warm restarts: within
/// cycle i of length T_0 * t_mult^i, cosine-anneal from eta_max down
/// toward eta_min, restarting at each cycle boundary.
pub fn lr_at(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    let mut cycle_len = cfg.t_0;
    let mut cursor = epoch;
    while cursor >= cycle_len {
        cursor -= cycle_len;
        cycle_len *= cfg.t_mult;
    }
    let frac = cursor as f64 / cycle_len as f64;
    cfg.eta_min + (cfg.eta_max - cfg.eta_min) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub arch: ArchConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 50,
            seed: 0,
            arch: ArchConfig::default(),
            loss: LossConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.schedule.validate()?;
        if self.loss.kind != DiffLossKind::None && self.batch_size < 2 {
            return Err(Error::Config(
                "differential learning needs a batch size of at least 2".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Forward a whole batch per the training procedure: one feature
/// extraction per sample, categorical CE over the stacked features, the
/// configured pair loss over all ordered pairs, combined total.
pub fn batch_loss<S: Scalar>(
    tape: &mut Tape<S>,
    arch: &ArchConfig,
    leaves: &ModelLeaves,
    images: &[&[f32]],
    labels: &[u8],
    loss_cfg: &LossConfig,
) -> Result<BatchLoss> {
    assert_eq!(images.len(), labels.len());
    let d = arch.token_dim;
    let mut features = Vec::with_capacity(images.len());
    for img in images {
        features.push(extract_features(tape, arch, leaves, img)?);
    }
    let rows: Vec<TensorId> = features
        .iter()
        .map(|&f| tape.reshape(f, vec![1, d]))
        .collect::<Result<_>>()?;
    let stacked = tape.concat(&rows, 0)?;
    let probs = categorical_head(tape, arch, leaves, stacked)?;
    let l_cat = losses::cross_entropy(tape, probs, labels)?;

    let l_diff = if loss_cfg.kind == DiffLossKind::None {
        None
    } else {
        let pairs = enumerate_pairs(labels, arch.num_classes)?;
        let mut fd_rows = Vec::with_capacity(pairs.pairs.len());
        for &(i, j) in &pairs.pairs {
            let fd = tape.sub(features[i], features[j])?;
            fd_rows.push(tape.reshape(fd, vec![1, d])?);
        }
        let fd = tape.concat(&fd_rows, 0)?;
        let rhat = differential_head(tape, arch, leaves, fd)?;
        losses::diff_loss(tape, rhat, &pairs.labels, loss_cfg)?
    };
    let total = losses::total_loss(tape, l_cat, l_diff, loss_cfg.lambda)?;
    Ok(BatchLoss {
        total,
        cat: tape.values(l_cat)[0].to_f64_(),
        diff: l_diff.map(|id| tape.values(id)[0].to_f64_()).unwrap_or(0.0),
        total_value: tape.values(total)[0].to_f64_(),
    })
}

pub struct BatchLoss {
    pub total: TensorId,
    pub cat: f64,
    pub diff: f64,
    pub total_value: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EpochSummary {
    pub loss_cat: f64,
    pub loss_diff: f64,
    pub loss_total: f64,
}

/// Gradients per parameter tensor, zeros where a leaf was unused.
fn collect_grads<S: Scalar>(
    tape: &Tape<S>,
    leaves: &ModelLeaves,
    params: &ModelParams<S>,
) -> Vec<Vec<S>> {
    leaves
        .ids()
        .iter()
        .zip(&params.tensors)
        .map(|(&id, t)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![S::zero(); t.values.len()])
        })
        .collect()
}

/// One pass over the dataset: seed-deterministic shuffle, one backward
/// pass and one Adam step per batch. The last partial batch is kept when
/// it still has two samples to pair.
pub fn train_epoch<S: Scalar>(
    params: &mut ModelParams<S>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    state: &mut AdamState<S>,
    epoch: usize,
) -> Result<EpochSummary> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Contract {
            op: "train_epoch",
            detail: "empty dataset".into(),
        });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = substream_indexed(cfg.seed, "shuffle", epoch as u64);
    order.shuffle(&mut rng);

    let lr = lr_at(epoch, &cfg.schedule);
    let mut sums = EpochSummary::default();
    let mut batches = 0usize;
    for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
        if chunk.len() < 2 {
            // dropped for every arm, so CE-only and lambda=0 runs walk
            // identical batch sequences (pairing needs two samples)
            continue;
        }
        let images: Vec<&[f32]> = chunk.iter().map(|&i| dataset.images[i].as_slice()).collect();
        let labels: Vec<u8> = chunk.iter().map(|&i| dataset.labels[i]).collect();
        let mut tape: Tape<S> = Tape::new();
        let leaves = insert_params(&mut tape, params, true)?;
        let bl = batch_loss(&mut tape, &cfg.arch, &leaves, &images, &labels, &cfg.loss)
            .map_err(|e| batch_err(e, batch_idx))?;
        tape.backward(bl.total).map_err(|e| batch_err(e, batch_idx))?;
        let grads = collect_grads(&tape, &leaves, params);
        adam_step(params, &grads, state, lr).map_err(|e| batch_err(e, batch_idx))?;
        sums.loss_cat += bl.cat;
        sums.loss_diff += bl.diff;
        sums.loss_total += bl.total_value;
        batches += 1;
    }
    if batches > 0 {
        sums.loss_cat /= batches as f64;
        sums.loss_diff /= batches as f64;
        sums.loss_total /= batches as f64;
    }
    Ok(sums)
}

fn batch_err(e: Error, batch_idx: usize) -> Error {
    match e {
        Error::NumericDomain { op, detail } => Error::NumericDomain {
            op,
            detail: format!("{detail} (batch {batch_idx})"),
        },
        other => other,
    }
}

/// Argmax class prediction for one image.
pub fn predict<S: Scalar>(params: &ModelParams<S>, image: &[f32]) -> Result<u8> {
    let mut tape: Tape<S> = Tape::new();
    let leaves = insert_params(&mut tape, params, false)?;
    let f = extract_features(&mut tape, &params.arch, &leaves, image)?;
    let p = categorical_head(&mut tape, &params.arch, &leaves, f)?;
    let probs = tape.values(p);
    let mut best = 0;
    for (i, &v) in probs.iter().enumerate() {
        if v > probs[best] {
            best = i;
        }
    }
    Ok(best as u8 + 1)
}

/// Confusion matrix of argmax predictions over a dataset. Samples are
/// forwarded in parallel; the integer merge is order-independent.
pub fn evaluate<S: Scalar>(params: &ModelParams<S>, dataset: &Dataset) -> Result<ConfusionMatrix> {
    let preds: Vec<u8> = thread_pool().install(|| {
        dataset
            .images
            .par_iter()
            .map(|img| predict(params, img))
            .collect::<Result<Vec<u8>>>()
    })?;
    ConfusionMatrix::from_labels(&dataset.labels, &preds, params.arch.num_classes as usize)
}

/// Mean |r - r̂| over `budget` seed-deterministically sampled ordered
/// pairs of distinct dataset indices.
pub fn mean_pair_error<S: Scalar>(
    params: &ModelParams<S>,
    dataset: &Dataset,
    budget: usize,
    seed: u64,
) -> Result<f64> {
    if dataset.len() < 2 {
        return Err(Error::Contract {
            op: "mean_pair_error",
            detail: "need at least 2 samples to form pairs".into(),
        });
    }
    use rand::Rng;
    let mut rng = crate::rng::substream(seed, "pair-sampling");
    let pairs: Vec<(usize, usize)> = (0..budget)
        .map(|_| loop {
            let i = rng.gen_range(0..dataset.len());
            let j = rng.gen_range(0..dataset.len());
            if i != j {
                break (i, j);
            }
        })
        .collect();
    let errors: Vec<f64> = thread_pool().install(|| {
        pairs
            .par_iter()
            .map(|&(i, j)| -> Result<f64> {
                let mut tape: Tape<S> = Tape::new();
                let leaves = insert_params(&mut tape, params, false)?;
                let (_, rhat) = model::forward_pair(
                    &mut tape,
                    &params.arch,
                    &leaves,
                    &dataset.images[i],
                    &dataset.images[j],
                )?;
                let r = dataset.labels[i] as f64 - dataset.labels[j] as f64;
                Ok((r - tape.values(rhat)[0].to_f64_()).abs())
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_cat: f64,
    pub loss_diff: f64,
    pub loss_total: f64,
    pub val_acc: f64,
    pub val_f1: f64,
    pub val_kappa: f64,
}

impl EpochRecord {
    pub fn csv_header() -> &'static str {
        "epoch,lr,loss_cat,loss_diff,loss_total,val_acc,val_f1,val_kappa"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.lr,
            self.loss_cat,
            self.loss_diff,
            self.loss_total,
            self.val_acc,
            self.val_f1,
            self.val_kappa
        )
    }
}

pub struct TrainOutcome {
    pub best: ModelParams<f32>,
    pub final_params: ModelParams<f32>,
    pub log: Vec<EpochRecord>,
}

/// Full training run: per-epoch schedule, validation metrics, and
/// best-validation-accuracy checkpoint selection.
pub fn train(
    mut params: ModelParams<f32>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut state = AdamState::new(&params);
    let mut best = params.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let summary = train_epoch(&mut params, train_set, cfg, &mut state, epoch)?;
        let (val_acc, val_f1, val_kappa) = if val_set.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let cm = evaluate(&params, val_set)?;
            (
                metrics::accuracy(&cm)?,
                metrics::macro_f1(&cm)?,
                metrics::quadratic_weighted_kappa(&cm).unwrap_or(f64::NAN),
            )
        };
        log.push(EpochRecord {
            epoch,
            lr: lr_at(epoch, &cfg.schedule),
            loss_cat: summary.loss_cat,
            loss_diff: summary.loss_diff,
            loss_total: summary.loss_total,
            val_acc,
            val_f1,
            val_kappa,
        });
        if !val_set.is_empty() && val_acc > best_acc {
            best_acc = val_acc;
            best = params.clone();
        }
    }
    if val_set.is_empty() || log.is_empty() {
        best = params.clone();
    }
    Ok(TrainOutcome {
        best,
        final_params: params,
        log,
    })
}

/// Per-parameter-group max relative error of the analytic batch-loss
/// gradient versus central finite differences, on a tiny f64 model.
/// `corrupt_group` deliberately biases that group's analytic gradient —
/// a negative control that the check actually detects wrong derivatives.
pub fn grad_check_groups(
    arch: &ArchConfig,
    loss_cfg: &LossConfig,
    images: &[&[f32]],
    labels: &[u8],
    seed: u64,
    h: f64,
    corrupt_group: Option<usize>,
) -> Result<Vec<(String, f64)>> {
    let mut params = ModelParams::<f64>::init(arch, seed)?;
    let mut tape: Tape<f64> = Tape::new();
    let leaves = insert_params(&mut tape, &params, true)?;
    let bl = batch_loss(&mut tape, arch, &leaves, images, labels, loss_cfg)?;
    tape.backward(bl.total)?;
    let mut analytic = collect_grads(&tape, &leaves, &params);
    if let Some(g) = corrupt_group {
        if g >= analytic.len() {
            return Err(Error::Config(format!(
                "corrupt group index {g} out of range (0..{})",
                analytic.len()
            )));
        }
        for v in &mut analytic[g] {
            *v += 1.0;
        }
    }

    let base = params.to_flat();
    let eval = |flat: &[f64], params: &mut ModelParams<f64>| -> f64 {
        params.load_flat(flat);
        let mut tape: Tape<f64> = Tape::new();
        let leaves = insert_params(&mut tape, params, false).unwrap();
        batch_loss(&mut tape, arch, &leaves, images, labels, loss_cfg)
            .unwrap()
            .total_value
    };

    let mut report = Vec::new();
    let mut offset = 0usize;
    for (t_idx, tensor) in analytic.iter().enumerate() {
        let name = params.tensors[t_idx].name.clone();
        let group_offset = offset;
        let mut flat = base.clone();
        let mut worst = 0.0f64;
        for i in 0..tensor.len() {
            let idx = group_offset + i;
            flat[idx] = base[idx] + h;
            let plus = eval(&flat, &mut params);
            flat[idx] = base[idx] - h;
            let minus = eval(&flat, &mut params);
            flat[idx] = base[idx];
            let numeric = (plus - minus) / (2.0 * h);
            // The floor keeps degenerate coordinates honest: a parameter
            // the loss provably ignores (e.g. key biases, which softmax
            // cancels) has both gradients at rounding-noise level, where
            // a pure ratio would amplify ~1e-11 noise into false alarms.
            let denom = tensor[i].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((tensor[i] - numeric).abs() / denom);
        }
        report.push((name, worst));
        offset += tensor.len();
    }
    params.load_flat(&base);
    Ok(report)
}
