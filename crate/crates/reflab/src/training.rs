//! Optimizers, learning-rate schedules, and the training regimes: plain
//! cross-entropy, contrastive learning with in-batch negatives (Sum-H /
//! Max-H), multi-task alternation with the relational-QA head, and a
//! sequential transfer-learning baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{correct_at_iou, DEFAULT_IOU_THRESHOLD};
use crate::model::{
    grounding_backward, grounding_forward, predict_answer, predict_box, qa_backward, qa_forward,
    tokens_to_ids, EncoderKind, ModelParams, QaInstance, Tensors, TrainingExample,
    DEFAULT_EMBED_DIM,
};
use crate::rng::{mix, Stream};

pub const DEFAULT_TAU: f64 = 0.2;
pub const DEFAULT_NEGATIVES: usize = 64;

/// max(0, x); the subgradient at exactly 0 is taken as 0.
pub fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    SumH,
    MaxH,
}

/// Sum-H adds every hinge; Max-H keeps only the largest (ties going to
/// the lowest index, which is also the term that gets gradient).
pub fn aggregate_hinges(values: &[f64], agg: Aggregation) -> (f64, Option<usize>) {
    match agg {
        Aggregation::SumH => (values.iter().map(|&x| hinge(x)).sum(), None),
        Aggregation::MaxH => {
            let mut best = 0usize;
            for (i, &v) in values.iter().enumerate() {
                if v > values[best] {
                    best = i;
                }
            }
            if values.is_empty() {
                (0.0, None)
            } else {
                (hinge(values[best]), Some(best))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub aggregation: Aggregation,
    /// Per-anchor cap; the effective K is min(this, batch - 1).
    pub negatives_per_example: usize,
    pub ce_weight: f64,
    pub hinge_weight: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: DEFAULT_TAU,
            aggregation: Aggregation::SumH,
            negatives_per_example: DEFAULT_NEGATIVES,
            ce_weight: 1.0,
            hinge_weight: 1.0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 0.0
            || self.ce_weight < 0.0
            || self.hinge_weight < 0.0
            || self.negatives_per_example < 1
        {
            return Err(Error::BadConfig(
                "contrastive: tau/weights must be >= 0 and K >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    WarmupLinearDecay,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub schedule: ScheduleKind,
    /// Fraction of total steps spent ramping 0 -> lr.
    pub warmup_fraction: f64,
    /// Epochs without a dev-accuracy improvement before stopping; 0
    /// disables early stopping.
    pub patience: usize,
    pub seed: u64,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 25,
            lr: 1e-2,
            optimizer: OptimizerKind::default(),
            schedule: ScheduleKind::WarmupLinearDecay,
            warmup_fraction: 0.1,
            patience: 0,
            seed: 0,
            embed_dim: DEFAULT_EMBED_DIM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1
            || self.epochs < 1
            || self.lr < 0.0
            || !(0.0..1.0).contains(&self.warmup_fraction)
            || self.embed_dim < 1
        {
            return Err(Error::BadConfig("train: bad batch/epochs/lr/warmup".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MtlConfig {
    /// Grounding batches per QA batch.
    pub mixing_ratio: usize,
    pub qa_lr_scale: f64,
}

impl Default for MtlConfig {
    fn default() -> Self {
        MtlConfig {
            mixing_ratio: 1,
            qa_lr_scale: 0.5,
        }
    }
}

impl MtlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mixing_ratio < 1 || self.qa_lr_scale < 0.0 {
            return Err(Error::BadConfig("mtl: mixing_ratio >= 1 required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Ce,
    Contrastive,
    Mtl,
    Tl,
}

impl Regime {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Regime::Ce),
            "contrastive" => Ok(Regime::Contrastive),
            "mtl" => Ok(Regime::Mtl),
            "tl" => Ok(Regime::Tl),
            other => Err(Error::BadConfig(format!("unknown regime '{other}'"))),
        }
    }
}

/// Linear ramp 0 -> lr over `warmup` steps, then linear decay to 0 at
/// `total`; constant schedule ignores the step.
pub fn lr_at(
    schedule: ScheduleKind,
    lr: f64,
    step: usize,
    warmup: usize,
    total: usize,
) -> Result<f64> {
    match schedule {
        ScheduleKind::Constant => Ok(lr),
        ScheduleKind::WarmupLinearDecay => {
            if total <= warmup {
                return Err(Error::BadSchedule { total, warmup });
            }
            if step < warmup {
                Ok(lr * step as f64 / warmup as f64)
            } else if step >= total {
                Ok(0.0)
            } else {
                Ok(lr * (total - step) as f64 / (total - warmup) as f64)
            }
        }
    }
}

pub struct Optimizer {
    kind: OptimizerKind,
    m: Tensors,
    v: Tensors,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, dim: usize) -> Self {
        Optimizer {
            kind,
            m: Tensors::zeros(dim),
            v: Tensors::zeros(dim),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Tensors, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                params.tensors.axpy(-lr, grads);
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (((_, p), (_, g)), ((_, m), (_, v))) in params
                    .tensors
                    .fields_mut()
                    .into_iter()
                    .zip(grads.fields())
                    .zip(self.m.fields_mut().into_iter().zip(self.v.fields_mut()))
                {
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Mean grounding CE over a batch; gradients accumulated if requested.
pub fn ce_batch(
    params: &ModelParams,
    batch: &[&TrainingExample],
    mut grads: Option<&mut Tensors>,
) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ex in batch {
        let ids = tokens_to_ids(&ex.expr.tokens)?;
        let fwd = grounding_forward(params, &ex.scene, &ids, ex.gold_index())?;
        total += fwd.loss * scale;
        if let Some(g) = grads.as_deref_mut() {
            grounding_backward(params, &fwd, scale, g);
        }
    }
    Ok(total)
}

/// Mean QA CE over a batch; gradients accumulated if requested.
pub fn qa_batch(
    params: &ModelParams,
    batch: &[&QaInstance],
    mut grads: Option<&mut Tensors>,
) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ex in batch {
        let ids = tokens_to_ids(&ex.qa.tokens)?;
        let fwd = qa_forward(params, &ex.scene, &ids, ex.qa.answer.index())?;
        total += fwd.loss * scale;
        if let Some(g) = grads.as_deref_mut() {
            qa_backward(params, &fwd, scale, g);
        }
    }
    Ok(total)
}

/// Contrastive batch loss with in-batch negative mining.
///
/// Per anchor (i, e, b): expression-negatives re-score scene i against
/// another anchor's expression e' with the same CE label b; scene-
/// negatives score scene i' against e with label b'. K negatives are
/// sampled without replacement from the other batch members via a seed
/// derived per anchor, and the same K serve both families. The anchor
/// loss is ce_weight * l(i,e,b) + lambda * (F(H_e) + F(H_i)); the batch
/// loss is the mean over anchors.
pub fn contrastive_batch(
    params: &ModelParams,
    batch: &[&TrainingExample],
    cfg: &ContrastiveConfig,
    seed: u64,
    mut grads: Option<&mut Tensors>,
) -> Result<f64> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let k = cfg.negatives_per_example.min(b - 1);
    let scale = 1.0 / b as f64;
    let mut total = 0.0;

    for (ai, anchor) in batch.iter().enumerate() {
        let ids = tokens_to_ids(&anchor.expr.tokens)?;
        let gold = anchor.gold_index();
        let fwd = grounding_forward(params, &anchor.scene, &ids, gold)?;

        let mut rng = Stream::new(mix(seed, ai as u64));
        let picks = rng.sample_indices(b - 1, k);
        let negatives: Vec<usize> = picks
            .iter()
            .map(|&j| if j < ai { j } else { j + 1 })
            .collect();

        let mut expr_fwd = Vec::with_capacity(k);
        let mut scene_fwd = Vec::with_capacity(k);
        let mut expr_margins = Vec::with_capacity(k);
        let mut scene_margins = Vec::with_capacity(k);
        for &ni in &negatives {
            let neg = batch[ni];
            let neg_ids = tokens_to_ids(&neg.expr.tokens)?;
            let ef = grounding_forward(params, &anchor.scene, &neg_ids, gold)?;
            let sf = grounding_forward(params, &neg.scene, &ids, neg.gold_index())?;
            expr_margins.push(fwd.loss - ef.loss - cfg.tau);
            scene_margins.push(fwd.loss - sf.loss - cfg.tau);
            expr_fwd.push(ef);
            scene_fwd.push(sf);
        }

        let (fe, e_arg) = aggregate_hinges(&expr_margins, cfg.aggregation);
        let (fs, s_arg) = aggregate_hinges(&scene_margins, cfg.aggregation);
        let anchor_loss = cfg.ce_weight * fwd.loss + cfg.hinge_weight * (fe + fs);
        total += anchor_loss * scale;

        if let Some(g) = grads.as_deref_mut() {
            let lam = cfg.hinge_weight * scale;
            let mut anchor_coef = cfg.ce_weight * scale;
            let active = |margins: &[f64], arg: Option<usize>, i: usize| match arg {
                Some(a) => i == a && margins[a] > 0.0,
                None => margins[i] > 0.0,
            };
            for i in 0..k {
                if active(&expr_margins, e_arg, i) {
                    anchor_coef += lam;
                    grounding_backward(params, &expr_fwd[i], -lam, g);
                }
                if active(&scene_margins, s_arg, i) {
                    anchor_coef += lam;
                    grounding_backward(params, &scene_fwd[i], -lam, g);
                }
            }
            grounding_backward(params, &fwd, anchor_coef, g);
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite {
            param: "batch loss".into(),
            context: "contrastive_batch".into(),
        });
    }
    Ok(total)
}

/// Scalar-only surface of the contrastive loss.
pub fn contrastive_batch_loss(
    params: &ModelParams,
    batch: &[&TrainingExample],
    cfg: &ContrastiveConfig,
    seed: u64,
) -> Result<f64> {
    contrastive_batch(params, batch, cfg, seed, None)
}

/// Fraction of instances whose argmax box overlaps gold above threshold.
pub fn grounding_accuracy(params: &ModelParams, data: &[TrainingExample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for ex in data {
        let pred = predict_box(params, &ex.scene, &ex.expr.tokens)?;
        let pb = ex.scene.get(pred).unwrap();
        let gb = ex.scene.get(ex.gold_box).unwrap();
        if correct_at_iou(pb, gb, DEFAULT_IOU_THRESHOLD) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn qa_accuracy(params: &ModelParams, data: &[QaInstance]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for ex in data {
        if predict_answer(params, ex)? == ex.qa.answer.index() {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// One metrics-log record. Epoch 0 is the pre-training snapshot: no loss
/// or updates, just accuracies at initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: String,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub qa_train_loss: Option<f64>,
    pub dev_accuracy: f64,
    pub qa_dev_accuracy: Option<f64>,
    pub grounding_updates: usize,
    pub qa_updates: usize,
}

pub struct GroundingData<'a> {
    pub train: &'a [TrainingExample],
    pub dev: &'a [TrainingExample],
}

pub struct QaData<'a> {
    pub train: &'a [QaInstance],
    pub dev: &'a [QaInstance],
}

struct Loop<'a> {
    tcfg: &'a TrainConfig,
    opt: Optimizer,
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
}

impl<'a> Loop<'a> {
    fn new(tcfg: &'a TrainConfig, total_steps: usize) -> Result<Self> {
        let warmup_steps = match tcfg.schedule {
            ScheduleKind::Constant => 0,
            ScheduleKind::WarmupLinearDecay => {
                ((total_steps as f64 * tcfg.warmup_fraction) as usize).max(1)
            }
        };
        if tcfg.schedule == ScheduleKind::WarmupLinearDecay && total_steps <= warmup_steps {
            return Err(Error::BadSchedule {
                total: total_steps,
                warmup: warmup_steps,
            });
        }
        Ok(Loop {
            tcfg,
            opt: Optimizer::new(tcfg.optimizer, tcfg.embed_dim),
            step: 0,
            total_steps,
            warmup_steps,
        })
    }

    fn next_lr(&mut self) -> Result<f64> {
        let lr = lr_at(
            self.tcfg.schedule,
            self.tcfg.lr,
            self.step,
            self.warmup_steps,
            self.total_steps,
        )?;
        self.step += 1;
        Ok(lr)
    }

    fn apply(&mut self, params: &mut ModelParams, grads: &Tensors, lr: f64) {
        self.opt.step(params, grads, lr);
    }
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut Stream) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

const SHUFFLE_TAG: u64 = 0x7368_7566;
const NEG_TAG: u64 = 0x6e65_6773;
const INIT_TAG: u64 = 0x696e_6974;

/// Run a training regime to completion.
///
/// Fully deterministic given the configs: shuffling, negative sampling,
/// and initialization all derive from `tcfg.seed`. Early stopping (if
/// `patience > 0`) tracks dev grounding accuracy (QA dev accuracy during
/// the TL pretrain phase) and returns the best-dev parameters.
pub fn train(
    encoder: EncoderKind,
    regime: Regime,
    data: &GroundingData,
    qa: Option<&QaData>,
    tcfg: &TrainConfig,
    ccfg: &ContrastiveConfig,
    mcfg: &MtlConfig,
) -> Result<(ModelParams, Vec<EpochMetrics>)> {
    tcfg.validate()?;
    ccfg.validate()?;
    mcfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::BadConfig("empty training set".into()));
    }
    if matches!(regime, Regime::Mtl | Regime::Tl) && qa.is_none() {
        return Err(Error::BadConfig("mtl/tl regimes require a QA dataset".into()));
    }
    if regime == Regime::Contrastive && tcfg.batch_size < 2 {
        return Err(Error::BatchTooSmall(tcfg.batch_size));
    }

    let mut params = ModelParams::init(encoder, tcfg.embed_dim, mix(tcfg.seed, INIT_TAG));
    let mut log = Vec::new();

    if regime == Regime::Tl {
        let qa = qa.unwrap();
        run_phase(
            &mut params,
            Phase::QaOnly,
            data,
            Some(qa),
            tcfg,
            ccfg,
            mcfg,
            mix(tcfg.seed, 1),
            "qa_pretrain",
            &mut log,
        )?;
        run_phase(
            &mut params,
            Phase::Grounding(Regime::Ce),
            data,
            Some(qa),
            tcfg,
            ccfg,
            mcfg,
            mix(tcfg.seed, 2),
            "grounding",
            &mut log,
        )?;
    } else {
        run_phase(
            &mut params,
            Phase::Grounding(regime),
            data,
            qa,
            tcfg,
            ccfg,
            mcfg,
            tcfg.seed,
            "train",
            &mut log,
        )?;
    }
    params.tensors.check_finite("train: final parameters")?;
    Ok((params, log))
}

#[derive(Clone, Copy, PartialEq)]
enum Phase {
    Grounding(Regime),
    QaOnly,
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    params: &mut ModelParams,
    phase: Phase,
    data: &GroundingData,
    qa: Option<&QaData>,
    tcfg: &TrainConfig,
    ccfg: &ContrastiveConfig,
    mcfg: &MtlConfig,
    seed: u64,
    phase_name: &str,
    log: &mut Vec<EpochMetrics>,
) -> Result<()> {
    let is_mtl = matches!(phase, Phase::Grounding(Regime::Mtl));
    let n = match phase {
        Phase::QaOnly => qa.unwrap().train.len(),
        Phase::Grounding(_) => data.train.len(),
    };
    let batches_per_epoch = n.div_ceil(tcfg.batch_size);
    let qa_per_epoch = if is_mtl {
        batches_per_epoch.div_ceil(mcfg.mixing_ratio)
    } else {
        0
    };
    let total_steps = tcfg.epochs * batches_per_epoch;
    let mut lp = Loop::new(tcfg, total_steps)?;
    // Each task keeps its own optimizer state and schedule; sharing Adam
    // moments across tasks lets QA gradients damp the grounding updates.
    let mut qa_lp = if is_mtl {
        Some(Loop::new(tcfg, tcfg.epochs * qa_per_epoch)?)
    } else {
        None
    };

    let eval = |p: &ModelParams| -> Result<(f64, Option<f64>)> {
        let dev = grounding_accuracy(p, data.dev)?;
        let qd = match qa {
            Some(q) => Some(qa_accuracy(p, q.dev)?),
            None => None,
        };
        Ok((dev, qd))
    };

    let (dev0, qad0) = eval(params)?;
    log.push(EpochMetrics {
        epoch: 0,
        phase: phase_name.to_string(),
        lr: 0.0,
        train_loss: None,
        qa_train_loss: None,
        dev_accuracy: dev0,
        qa_dev_accuracy: qad0,
        grounding_updates: 0,
        qa_updates: 0,
    });

    let select = |dev: f64, qad: Option<f64>| match phase {
        Phase::QaOnly => qad.unwrap(),
        Phase::Grounding(_) => dev,
    };
    let mut best_metric = select(dev0, qad0);
    let mut best_params = params.clone();
    let mut since_best = 0usize;

    for epoch in 1..=tcfg.epochs {
        let mut rng = Stream::new(mix(mix(seed, SHUFFLE_TAG), epoch as u64));
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        let mut qa_loss_sum = 0.0;
        let mut qa_loss_n = 0usize;
        let mut g_updates = 0usize;
        let mut q_updates = 0usize;
        let mut last_lr = 0.0;

        let mut qa_cursor = 0usize;
        let qa_batches: Vec<Vec<usize>> = match (phase, qa) {
            (Phase::QaOnly, Some(q)) | (Phase::Grounding(Regime::Mtl), Some(q)) => {
                shuffled_batches(q.train.len(), tcfg.batch_size, &mut rng)
            }
            _ => Vec::new(),
        };

        let do_qa_update = |params: &mut ModelParams,
                                lp: &mut Loop,
                                cursor: &mut usize,
                                lr_scale: f64|
         -> Result<(f64, f64)> {
            let q = qa.unwrap();
            let bi = &qa_batches[*cursor % qa_batches.len()];
            *cursor += 1;
            let batch: Vec<&QaInstance> = bi.iter().map(|&i| &q.train[i]).collect();
            let mut grads = Tensors::zeros(tcfg.embed_dim);
            let loss = qa_batch(params, &batch, Some(&mut grads))?;
            grads.check_finite("qa batch gradients")?;
            let lr = lp.next_lr()? * lr_scale;
            lp.apply(params, &grads, lr);
            Ok((loss, lr))
        };

        match phase {
            Phase::QaOnly => {
                for _ in 0..qa_batches.len() {
                    let (loss, lr) =
                        do_qa_update(params, &mut lp, &mut qa_cursor, mcfg.qa_lr_scale)?;
                    if !loss.is_finite() {
                        return Err(Error::Diverged {
                            epoch,
                            step: lp.step,
                        });
                    }
                    qa_loss_sum += loss;
                    qa_loss_n += 1;
                    q_updates += 1;
                    last_lr = lr;
                }
            }
            Phase::Grounding(regime) => {
                let mut batches = shuffled_batches(data.train.len(), tcfg.batch_size, &mut rng);
                if regime == Regime::Contrastive {
                    batches.retain(|b| b.len() >= 2);
                    if batches.is_empty() {
                        return Err(Error::BatchTooSmall(1));
                    }
                }
                let n_batches = batches.len();
                for (b_idx, bi) in batches.into_iter().enumerate() {
                    let batch: Vec<&TrainingExample> =
                        bi.iter().map(|&i| &data.train[i]).collect();
                    let mut grads = Tensors::zeros(tcfg.embed_dim);
                    let loss = match regime {
                        Regime::Contrastive => {
                            let nseed = mix(
                                mix(seed, NEG_TAG),
                                (epoch * 1_000_003 + b_idx) as u64,
                            );
                            contrastive_batch(params, &batch, ccfg, nseed, Some(&mut grads))?
                        }
                        _ => ce_batch(params, &batch, Some(&mut grads))?,
                    };
                    if !loss.is_finite() {
                        return Err(Error::Diverged {
                            epoch,
                            step: lp.step,
                        });
                    }
                    grads.check_finite("grounding batch gradients")?;
                    let lr = lp.next_lr()?;
                    lp.apply(params, &grads, lr);
                    loss_sum += loss;
                    loss_n += 1;
                    g_updates += 1;
                    last_lr = lr;

                    if is_mtl
                        && ((b_idx + 1) % mcfg.mixing_ratio == 0
                            || b_idx + 1 == n_batches && !n_batches.is_multiple_of(mcfg.mixing_ratio))
                    {
                        let qa_loop = qa_lp.as_mut().unwrap();
                        let (ql, _) =
                            do_qa_update(params, qa_loop, &mut qa_cursor, mcfg.qa_lr_scale)?;
                        qa_loss_sum += ql;
                        qa_loss_n += 1;
                        q_updates += 1;
                    }
                }
            }
        }

        let (dev, qad) = eval(params)?;
        log.push(EpochMetrics {
            epoch,
            phase: phase_name.to_string(),
            lr: last_lr,
            train_loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
            qa_train_loss: (qa_loss_n > 0).then(|| qa_loss_sum / qa_loss_n as f64),
            dev_accuracy: dev,
            qa_dev_accuracy: qad,
            grounding_updates: g_updates,
            qa_updates: q_updates,
        });

        let metric = select(dev, qad);
        if metric > best_metric {
            best_metric = metric;
            best_params = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if tcfg.patience > 0 && since_best >= tcfg.patience {
                break;
            }
        }
    }
    *params = best_params;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{generate_instance, generate_qa, Form, GenConfig};

    fn dataset(n: usize, seed: u64, cfg: &GenConfig) -> Vec<TrainingExample> {
        (0..n)
            .map(|i| {
                let (s, e) = generate_instance(mix(seed, i as u64), cfg).unwrap();
                TrainingExample::new(s, e)
            })
            .collect()
    }

    fn qa_dataset(n: usize, seed: u64, cfg: &GenConfig) -> Vec<QaInstance> {
        (0..n)
            .map(|i| {
                let (scene, qa) = generate_qa(mix(seed, i as u64), cfg).unwrap();
                QaInstance { scene, qa }
            })
            .collect()
    }

    #[test]
    fn hinge_examples_exact() {
        assert_eq!(hinge(-1.3), 0.0);
        assert_eq!(hinge(0.9), 0.9);
        assert_eq!(hinge(0.0), 0.0);
        assert_eq!(hinge(0.3 - 0.9 - 0.2), 0.0);
        assert!((hinge(1.5 - 0.4 - 0.2) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn aggregation_examples_exact() {
        let vals = [0.2, 0.0, 0.5];
        let (s, _) = aggregate_hinges(&vals, Aggregation::SumH);
        let (m, arg) = aggregate_hinges(&vals, Aggregation::MaxH);
        assert!((s - 0.7).abs() < 1e-15);
        assert_eq!(m, 0.5);
        assert_eq!(arg, Some(2));
        // ties go to the lowest index
        let (_, arg) = aggregate_hinges(&[0.5, 0.5], Aggregation::MaxH);
        assert_eq!(arg, Some(0));
    }

    #[test]
    fn lambda_zero_equals_plain_ce() {
        let cfg = GenConfig::default();
        let data = dataset(8, 3, &cfg);
        let batch: Vec<&TrainingExample> = data.iter().collect();
        let params = ModelParams::init(EncoderKind::Seq, 16, 5);
        let ccfg = ContrastiveConfig {
            hinge_weight: 0.0,
            ..ContrastiveConfig::default()
        };
        let c = contrastive_batch_loss(&params, &batch, &ccfg, 9).unwrap();
        let ce = ce_batch(&params, &batch, None).unwrap();
        assert_eq!(c, ce);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let cfg = GenConfig::default();
        let data = dataset(1, 4, &cfg);
        let batch: Vec<&TrainingExample> = data.iter().collect();
        let params = ModelParams::init(EncoderKind::Bow, 16, 5);
        assert!(matches!(
            contrastive_batch_loss(&params, &batch, &ContrastiveConfig::default(), 1),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn batch_of_two_matches_hand_computation() {
        // with batch 2 each anchor has exactly one negative per family
        let cfg = GenConfig::default();
        let data = dataset(2, 6, &cfg);
        let batch: Vec<&TrainingExample> = data.iter().collect();
        let params = ModelParams::init(EncoderKind::Seq, 16, 7);
        let ccfg = ContrastiveConfig::default();
        let got = contrastive_batch_loss(&params, &batch, &ccfg, 11).unwrap();

        let loss_of = |scene, tokens: &Vec<String>, gold| {
            let ids = tokens_to_ids(tokens).unwrap();
            grounding_forward(&params, scene, &ids, gold).unwrap().loss
        };
        let mut want = 0.0;
        for (a, o) in [(0usize, 1usize), (1, 0)] {
            let la = loss_of(&data[a].scene, &data[a].expr.tokens, data[a].gold_index());
            let le = loss_of(&data[a].scene, &data[o].expr.tokens, data[a].gold_index());
            let ls = loss_of(&data[o].scene, &data[a].expr.tokens, data[o].gold_index());
            want += la + hinge(la - le - ccfg.tau) + hinge(la - ls - ccfg.tau);
        }
        want /= 2.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let cfg = GenConfig::default();
        let data = dataset(4, 8, &cfg);
        let batch: Vec<&TrainingExample> = data.iter().collect();
        for agg in [Aggregation::SumH, Aggregation::MaxH] {
            let ccfg = ContrastiveConfig {
                aggregation: agg,
                ..ContrastiveConfig::default()
            };
            let params = ModelParams::init(EncoderKind::Seq, 8, 13);
            let mut grads = Tensors::zeros(8);
            contrastive_batch(&params, &batch, &ccfg, 17, Some(&mut grads)).unwrap();
            let flat = params.tensors.flatten();
            let gflat = grads.flatten();
            let h = 1e-5;
            let mut rng = Stream::new(3);
            for _ in 0..100 {
                let i = rng.choose_index(flat.len());
                let mut fp = flat.clone();
                let mut plus = params.clone();
                fp[i] += h;
                plus.tensors.assign_flat(&fp);
                let mut minus = params.clone();
                fp[i] -= 2.0 * h;
                minus.tensors.assign_flat(&fp);
                let lp = contrastive_batch_loss(&plus, &batch, &ccfg, 17).unwrap();
                let lm = contrastive_batch_loss(&minus, &batch, &ccfg, 17).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let denom = fd.abs().max(gflat[i].abs()).max(1e-8);
                assert!(
                    (fd - gflat[i]).abs() / denom < 1e-4,
                    "{agg:?} param {i}: {fd} vs {g}",
                    g = gflat[i]
                );
            }
        }
    }

    #[test]
    fn lr_schedule_endpoints() {
        let s = ScheduleKind::WarmupLinearDecay;
        assert_eq!(lr_at(s, 0.1, 0, 10, 100).unwrap(), 0.0);
        assert_eq!(lr_at(s, 0.1, 10, 10, 100).unwrap(), 0.1);
        assert_eq!(lr_at(s, 0.1, 100, 10, 100).unwrap(), 0.0);
        assert_eq!(lr_at(ScheduleKind::Constant, 0.1, 57, 0, 0).unwrap(), 0.1);
        assert!(matches!(
            lr_at(s, 0.1, 0, 10, 10),
            Err(Error::BadSchedule { .. })
        ));
    }

    #[test]
    fn zero_lr_leaves_metrics_constant() {
        let cfg = GenConfig::default();
        let train_set = dataset(20, 30, &cfg);
        let dev_set = dataset(10, 31, &cfg);
        let tcfg = TrainConfig {
            lr: 0.0,
            epochs: 3,
            batch_size: 10,
            embed_dim: 8,
            schedule: ScheduleKind::Constant,
            seed: 1,
            ..TrainConfig::default()
        };
        let (params, log) = train(
            EncoderKind::Seq,
            Regime::Ce,
            &GroundingData {
                train: &train_set,
                dev: &dev_set,
            },
            None,
            &tcfg,
            &ContrastiveConfig::default(),
            &MtlConfig::default(),
        )
        .unwrap();
        let accs: Vec<f64> = log.iter().map(|m| m.dev_accuracy).collect();
        assert!(accs.iter().all(|&a| a == accs[0]));
        let fresh = ModelParams::init(EncoderKind::Seq, 8, mix(1, INIT_TAG));
        assert_eq!(params.tensors, fresh.tensors);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = GenConfig::default();
        let train_set = dataset(24, 40, &cfg);
        let dev_set = dataset(8, 41, &cfg);
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            embed_dim: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || {
            train(
                EncoderKind::Seq,
                Regime::Contrastive,
                &GroundingData {
                    train: &train_set,
                    dev: &dev_set,
                },
                None,
                &tcfg,
                &ContrastiveConfig::default(),
                &MtlConfig::default(),
            )
            .unwrap()
        };
        let (p1, l1) = run();
        let (p2, l2) = run();
        assert_eq!(p1.tensors, p2.tensors);
        assert_eq!(l1, l2);
    }

    #[test]
    fn mtl_update_counts_match_mixing_ratio() {
        let cfg = GenConfig::default();
        let train_set = dataset(25, 50, &cfg);
        let dev_set = dataset(5, 51, &cfg);
        let qa_train = qa_dataset(20, 52, &cfg);
        let qa_dev = qa_dataset(5, 53, &cfg);
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 5, // 5 grounding batches per epoch
            embed_dim: 8,
            seed: 6,
            ..TrainConfig::default()
        };
        let mcfg = MtlConfig {
            mixing_ratio: 2,
            qa_lr_scale: 0.5,
        };
        let (_, log) = train(
            EncoderKind::Seq,
            Regime::Mtl,
            &GroundingData {
                train: &train_set,
                dev: &dev_set,
            },
            Some(&QaData {
                train: &qa_train,
                dev: &qa_dev,
            }),
            &tcfg,
            &ContrastiveConfig::default(),
            &mcfg,
        )
        .unwrap();
        for m in log.iter().filter(|m| m.epoch > 0) {
            assert_eq!(m.grounding_updates, 5);
            assert_eq!(m.qa_updates, 3); // ceil(5/2)
        }
    }

    #[test]
    fn ce_learns_attribute_only_dataset() {
        let gcfg = GenConfig {
            form_mix: [1.0, 0.0, 0.0],
            ..GenConfig::default()
        };
        let train_set = dataset(100, 60, &gcfg);
        let dev_set = dataset(30, 61, &gcfg);
        assert!(train_set.iter().all(|e| e.expr.form == Form::AttributeOnly));
        let tcfg = TrainConfig {
            epochs: 15,
            batch_size: 16,
            embed_dim: 16,
            seed: 7,
            ..TrainConfig::default()
        };
        let (params, _) = train(
            EncoderKind::Seq,
            Regime::Ce,
            &GroundingData {
                train: &train_set,
                dev: &dev_set,
            },
            None,
            &tcfg,
            &ContrastiveConfig::default(),
            &MtlConfig::default(),
        )
        .unwrap();
        let acc = grounding_accuracy(&params, &train_set).unwrap();
        assert!(acc >= 0.9, "train accuracy {acc}");
    }

    #[test]
    fn tl_regime_runs_both_phases() {
        let cfg = GenConfig::default();
        let train_set = dataset(16, 70, &cfg);
        let dev_set = dataset(4, 71, &cfg);
        let qa_train = qa_dataset(16, 72, &cfg);
        let qa_dev = qa_dataset(4, 73, &cfg);
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            embed_dim: 8,
            seed: 8,
            ..TrainConfig::default()
        };
        let (_, log) = train(
            EncoderKind::Seq,
            Regime::Tl,
            &GroundingData {
                train: &train_set,
                dev: &dev_set,
            },
            Some(&QaData {
                train: &qa_train,
                dev: &qa_dev,
            }),
            &tcfg,
            &ContrastiveConfig::default(),
            &MtlConfig::default(),
        )
        .unwrap();
        assert!(log.iter().any(|m| m.phase == "qa_pretrain"));
        assert!(log.iter().any(|m| m.phase == "grounding"));
        // pretrain phase does only QA updates
        for m in log.iter().filter(|m| m.phase == "qa_pretrain" && m.epoch > 0) {
            assert_eq!(m.grounding_updates, 0);
            assert!(m.qa_updates > 0);
        }
    }
}
