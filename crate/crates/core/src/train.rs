//! Optimiser, training loop, evaluation metrics, calibration sweeps and the
//! two numerical self-checks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check_many, Gradients, Tape};
use crate::data::{SplitSpec, ZslDataset};
use crate::encoder::EncoderConfig;
use crate::error::{invalid, Error, Result};
use crate::head::{predict, EvalMode, HeadConfig, SemanticSpace};
use crate::model::{sample_loss, LossWeights, ModelSpec, ZslModel};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng64;
use crate::ssm::{inverse_softplus, ssm_conv_apply, ssm_conv_kernel, ssm_recurrence, DiscreteSsm};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_sc: f64,
    pub lambda_col: f64,
    pub temperature: f64,
    pub seed: u64,
    pub precision: Precision,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 16,
            epochs: 30,
            lambda_sc: 1.0,
            lambda_col: 0.3,
            temperature: 1.0,
            seed: 0,
            precision: Precision::F32,
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lambda_sc", self.lambda_sc),
            ("lambda_col", self.lambda_col),
            ("temperature", self.temperature),
        ];
        for (name, v) in rates {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid!("{name} must be a finite nonnegative number, got {v}"));
            }
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be at least 1"));
        }
        Ok(())
    }

    pub fn model_spec(&self, dataset: &ZslDataset) -> ModelSpec {
        ModelSpec {
            image_shape: dataset.image_shape,
            attributes: dataset.semantic.attribute_count(),
            embed_dim: dataset.semantic.embed_dim(),
            encoder: self.encoder.clone(),
            head: self.head.clone(),
        }
    }
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug)]
pub struct SgdState<T: Scalar> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        SgdState {
            velocity: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// `g = grad + wd p; v = mu v + g; p -= lr v`, for every parameter.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut SgdState<T>,
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(invalid!(
            "{} gradients and {} momentum buffers for {} parameters",
            grads.len(),
            state.velocity.len(),
            params.len()
        ));
    }
    let (lr, mu, wd) = (T::of(learning_rate), T::of(momentum), T::of(weight_decay));
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = params.get(id);
        let (g, v) = (&grads[k], &state.velocity[k]);
        if g.shape() != p.shape() {
            return Err(invalid!(
                "gradient for {} has shape {:?}, parameter has {:?}",
                params.name(id),
                g.shape(),
                p.shape()
            ));
        }
        let mut nv = Vec::with_capacity(p.len());
        let mut np = Vec::with_capacity(p.len());
        for ((&pi, &gi), &vi) in p.data().iter().zip(g.data()).zip(v.data()) {
            let vel = mu * vi + (gi + wd * pi);
            nv.push(vel);
            np.push(pi - lr * vel);
        }
        let shape = p.shape().to_vec();
        state.velocity[k] = Tensor::new(&shape, nv)?;
        params.set(id, Tensor::new(&shape, np)?)?;
    }
    Ok(())
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub sc: f64,
    pub total: f64,
}

/// Trained parameters and per-epoch losses.
#[derive(Clone, Debug)]
pub struct Trained<T: Scalar> {
    pub model: ZslModel,
    pub params: ParamStore<T>,
    pub log: Vec<EpochLog>,
}

fn accumulate<T: Scalar>(acc: &mut [Vec<T>], grads: &Gradients<T>, bound: &Bound) {
    for (a, &v) in acc.iter_mut().zip(bound.vars()) {
        if let Some(g) = grads.get(v) {
            for (x, &y) in a.iter_mut().zip(g.data()) {
                *x = *x + y;
            }
        }
    }
}

/// Minibatch SGD over `split.train_idx`, reshuffled every epoch.
///
/// Parameters are initialised from `Rng64::new(seed)`; the shuffle stream is
/// `Rng64::new(seed).fork()`. Per-sample gradients are summed in batch order
/// and divided by the batch size. `on_epoch` sees each epoch's record as it
/// completes.
pub fn train<T: Scalar>(
    dataset: &ZslDataset,
    split: &SplitSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Trained<T>> {
    cfg.validate()?;
    split.validate(&dataset.labels, dataset.class_count())?;
    if split.train_idx.is_empty() {
        return Err(invalid!("no training samples"));
    }
    let (model, init) = ZslModel::init(&cfg.model_spec(dataset), cfg.seed)?;
    let mut params: ParamStore<T> = init.cast();
    let mut state = SgdState::new(&params);
    let sem = dataset.semantic.tensors::<T>();
    let weights = LossWeights {
        lambda_sc: cfg.lambda_sc,
        temperature: cfg.temperature,
    };
    let mut shuffle = Rng64::new(cfg.seed).fork();
    let mut order = split.train_idx.clone();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        let (mut ce_sum, mut sc_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Vec<T>> = params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
            for &i in batch {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let loss = sample_loss(
                    &model,
                    &mut tape,
                    &bound,
                    &sem,
                    &split.seen_classes,
                    dataset.image(i),
                    dataset.labels[i],
                    weights,
                )?;
                let total = tape.value(loss.total).item().as_f64();
                if !total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss {total} at epoch {epoch}, sample {i}"
                    )));
                }
                ce_sum += tape.value(loss.ce).item().as_f64();
                sc_sum += tape.value(loss.sc).item().as_f64();
                total_sum += total;
                let grads = tape.backward(loss.total)?;
                accumulate(&mut acc, &grads, &bound);
            }
            let inv = T::of(1.0 / batch.len() as f64);
            let grads = acc
                .into_iter()
                .zip(params.iter())
                .map(|(g, (_, p))| Tensor::new(p.shape(), g.into_iter().map(|x| x * inv).collect()))
                .collect::<Result<Vec<_>>>()?;
            sgd_step(
                &mut params,
                &grads,
                &mut state,
                cfg.learning_rate,
                cfg.momentum,
                cfg.weight_decay,
            )?;
        }
        if let Some((id, _)) = params.ids().zip(params.iter()).find(|(_, (_, t))| !t.all_finite()) {
            return Err(Error::Numerical(format!(
                "parameter {} became non-finite at epoch {epoch}",
                params.name(id)
            )));
        }
        let n = order.len() as f64;
        let rec = EpochLog {
            epoch,
            ce: ce_sum / n,
            sc: sc_sum / n,
            total: total_sum / n,
        };
        on_epoch(&rec);
        log.push(rec);
    }
    Ok(Trained { model, params, log })
}

/// Rebuilds the model layout for `spec` and checks `params` against it.
pub fn restore<T: Scalar>(spec: &ModelSpec, params: ParamStore<T>) -> Result<(ZslModel, ParamStore<T>)> {
    let (model, init) = ZslModel::init(spec, 0)?;
    init.check_layout(&params)?;
    Ok((model, params))
}

/// Accuracies in percent. CZSL fills `acc`; GZSL fills `s`, `u` and `h`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: Option<f64>,
    pub s: Option<f64>,
    pub u: Option<f64>,
    pub h: Option<f64>,
}

/// `2su / (s + u)`, or 0 when `s + u = 0`.
pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

impl Metrics {
    pub fn czsl(acc: f64) -> Self {
        Metrics {
            acc: Some(acc),
            ..Metrics::default()
        }
    }

    pub fn gzsl(s: f64, u: f64) -> Self {
        Metrics {
            acc: None,
            s: Some(s),
            u: Some(u),
            h: Some(harmonic_mean(s, u)),
        }
    }

    /// One-decimal human-readable form.
    pub fn summary(&self) -> String {
        let parts: Vec<String> = [("acc", self.acc), ("S", self.s), ("U", self.u), ("H", self.h)]
            .iter()
            .filter_map(|(k, v)| v.map(|v| format!("{k}={v:.1}")))
            .collect();
        parts.join(" ")
    }
}

/// Unweighted mean over classes of per-class top-1 accuracy, in percent.
/// Only classes that occur in `labels` count.
pub fn per_class_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || predictions.len() != labels.len() {
        return Err(invalid!(
            "need a non-empty test set with one prediction per label ({} predictions, {} labels)",
            predictions.len(),
            labels.len()
        ));
    }
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let mut hit = vec![0usize; classes];
    let mut tot = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        tot[l] += 1;
        if p == l {
            hit[l] += 1;
        }
    }
    let accs: Vec<f64> = hit
        .iter()
        .zip(&tot)
        .filter(|(_, &t)| t > 0)
        .map(|(&h, &t)| h as f64 / t as f64)
        .collect();
    Ok(100.0 * accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Cosine scores of every test sample against every class, computed once
/// and reused across calibration settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub unseen: Vec<bool>,
    /// `(label, scores over all classes)` for `test_seen_idx`.
    pub seen_rows: Vec<(usize, Vec<f64>)>,
    /// Same for `test_unseen_idx`.
    pub unseen_rows: Vec<(usize, Vec<f64>)>,
}

pub fn score_table<T: Scalar>(
    model: &ZslModel,
    params: &ParamStore<T>,
    dataset: &ZslDataset,
    split: &SplitSpec,
) -> Result<ScoreTable> {
    let classes: Vec<usize> = (0..dataset.class_count()).collect();
    let sem = dataset.semantic.tensors::<T>();
    let rows = |idx: &[usize]| -> Result<Vec<(usize, Vec<f64>)>> {
        idx.iter()
            .map(|&i| Ok((dataset.labels[i], model.scores(params, &sem, dataset.image(i), &classes)?)))
            .collect()
    };
    Ok(ScoreTable {
        unseen: split.unseen_mask(dataset.class_count()),
        seen_rows: rows(&split.test_seen_idx)?,
        unseen_rows: rows(&split.test_unseen_idx)?,
    })
}

fn accuracy_of(rows: &[(usize, Vec<f64>)], unseen: &[bool], lambda_col: f64, mode: EvalMode) -> Result<f64> {
    let preds = rows
        .iter()
        .map(|(_, s)| predict(s, unseen, lambda_col, mode))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = rows.iter().map(|(l, _)| *l).collect();
    per_class_accuracy(&preds, &labels)
}

impl ScoreTable {
    pub fn metrics(&self, mode: EvalMode, lambda_col: f64) -> Result<Metrics> {
        match mode {
            EvalMode::Czsl => Ok(Metrics::czsl(accuracy_of(&self.unseen_rows, &self.unseen, lambda_col, mode)?)),
            EvalMode::Gzsl => {
                let s = accuracy_of(&self.seen_rows, &self.unseen, lambda_col, mode)?;
                let u = accuracy_of(&self.unseen_rows, &self.unseen, lambda_col, mode)?;
                Ok(Metrics::gzsl(s, u))
            }
        }
    }
}

pub fn evaluate<T: Scalar>(
    model: &ZslModel,
    params: &ParamStore<T>,
    dataset: &ZslDataset,
    split: &SplitSpec,
    mode: EvalMode,
    lambda_col: f64,
) -> Result<Metrics> {
    let mut split = split.clone();
    if mode == EvalMode::Czsl {
        split.test_seen_idx.clear();
    }
    score_table(model, params, dataset, &split)?.metrics(mode, lambda_col)
}

/// One row of a calibration sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda_col: f64,
    pub s: f64,
    pub u: f64,
    pub h: f64,
}

/// GZSL metrics at each calibration value without rescoring.
pub fn sweep(table: &ScoreTable, grid: &[f64]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(invalid!("calibration grid is empty"));
    }
    grid.iter()
        .map(|&l| {
            let m = table.metrics(EvalMode::Gzsl, l)?;
            Ok(SweepRow {
                lambda_col: l,
                s: m.s.expect("gzsl"),
                u: m.u.expect("gzsl"),
                h: m.h.expect("gzsl"),
            })
        })
        .collect()
}

/// The first row with the largest `h`.
pub fn best_row(rows: &[SweepRow]) -> Option<SweepRow> {
    rows.iter().copied().fold(None, |best: Option<SweepRow>, r| match best {
        Some(b) if b.h >= r.h => Some(b),
        _ => Some(r),
    })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("lambda_col,s,u,h\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.lambda_col, r.s, r.u, r.h));
    }
    s
}

/// Worst finite-difference relative error over one group of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub group: String,
    pub params: usize,
    pub max_rel_error: f64,
}

/// Small model used for the full-loss gradient check: `3x8x8` images,
/// `K = 4`, `d_s = 3`, final features `d_v = 8` on a `2x2` grid.
pub fn gradcheck_spec() -> ModelSpec {
    ModelSpec {
        image_shape: [3, 8, 8],
        attributes: 4,
        embed_dim: 3,
        encoder: EncoderConfig {
            patch_size: 2,
            stage_dims: vec![4, 8],
            stage_depths: vec![1, 1],
            state_dim: 2,
            mlp_ratio: 2,
            ..EncoderConfig::default()
        },
        head: HeadConfig::default(),
    }
}

/// Groups are parameter names with their final component removed.
pub fn param_group(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(g, _)| g)
}

/// Central-difference check of the full training loss in 64-bit with respect
/// to every parameter of `spec`'s model, for one random image and class.
pub fn gradcheck(spec: &ModelSpec, seed: u64, h: f64, fault: Option<&'static str>) -> Result<Vec<GroupError>> {
    let (model, mut params) = ZslModel::init(spec, seed)?;
    let mut rng = Rng64::new(seed).fork();
    // Training-time step sizes (1e-3..1e-1) leave some scan gradients near
    // 1e-9, under the central-difference round-off floor; check at
    // step sizes in [0.1, 1) instead.
    let ids: Vec<_> = params.ids().filter(|&id| params.name(id).ends_with(".delta_bias")).collect();
    for id in ids {
        let t = params.get(id);
        let data = (0..t.len()).map(|_| inverse_softplus(rng.uniform_in(0.1, 1.0))).collect();
        let shape = t.shape().to_vec();
        params.set(id, Tensor::new(&shape, data)?)?;
    }
    let [c, hh, w] = spec.image_shape;
    let k = spec.attributes;
    let classes = 3;
    let image = Tensor::new(&[c, hh, w], (0..c * hh * w).map(|_| rng.uniform()).collect())?;
    let protos: Vec<f64> = (0..k * classes).map(|_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 }).collect();
    let emb: Vec<f64> = (0..k * spec.embed_dim).map(|_| rng.normal()).collect();
    let sem = SemanticSpace::new(Tensor::new(&[k, classes], protos)?, Tensor::new(&[k, spec.embed_dim], emb)?)?;
    let sem = sem.tensors::<f64>();
    let seen: Vec<usize> = (0..classes).collect();
    let weights = LossWeights {
        lambda_sc: 1.0,
        temperature: 1.0,
    };
    let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let checks = finite_diff_check_many(
        |tape, vars| {
            if let Some(op) = fault {
                tape.inject_backward_fault(op);
            }
            let bound = Bound::from_vars(vars.to_vec());
            let loss = sample_loss(&model, tape, &bound, &sem, &seen, image.clone(), 1, weights)?;
            Ok(loss.total)
        },
        &inputs,
        h,
    )?;
    let mut groups: Vec<GroupError> = Vec::new();
    for ((name, t), chk) in params.iter().zip(&checks) {
        let g = param_group(name);
        match groups.last_mut() {
            Some(last) if last.group == g => {
                last.params += t.len();
                last.max_rel_error = last.max_rel_error.max(chk.max_rel_error);
            }
            _ => groups.push(GroupError {
                group: g.to_string(),
                params: t.len(),
                max_rel_error: chk.max_rel_error,
            }),
        }
    }
    Ok(groups)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanEquivReport {
    pub trials: usize,
    pub max_deviation: f64,
}

/// Compares recurrent and convolutional evaluation on random time-invariant
/// systems: `N` in `1..=8`, `A` in `[-3, -0.05)`, step in `[1e-3, 1)`,
/// `B`, `C` and inputs uniform on `[-1, 1)`, length in `1..=max_len`.
pub fn scan_equiv(trials: usize, max_len: usize, seed: u64) -> Result<ScanEquivReport> {
    if max_len == 0 {
        return Err(invalid!("max_len must be at least 1"));
    }
    let mut rng = Rng64::new(seed);
    let mut max_deviation: f64 = 0.0;
    for _ in 0..trials {
        let n = 1 + rng.below(8);
        let len = 1 + rng.below(max_len);
        let a: Vec<f64> = (0..n).map(|_| rng.uniform_in(-3.0, -0.05)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let delta = rng.uniform_in(1e-3, 1.0);
        let x: Vec<f64> = (0..len).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let disc = DiscreteSsm::from_continuous(&a, &b, delta)?;
        let y_rec = ssm_recurrence(&disc, &c, &x)?;
        let y_conv = ssm_conv_apply(&ssm_conv_kernel(&disc, &c, len)?, &x);
        for (p, q) in y_rec.iter().zip(&y_conv) {
            max_deviation = max_deviation.max((p - q).abs());
        }
    }
    Ok(ScanEquivReport { trials, max_deviation })
}
