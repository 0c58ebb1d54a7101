//! Supervised autoencoder baselines: a per-pixel decoder mirroring the
//! encoder plus three training schemes (iterative, joint, cascade) that
//! combine reconstruction and classification objectives.

use crate::classifier::{self, ClassifierParams, LossWeights};
use crate::dataset::{Patch, PatchSet, SplitPlan, Task};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sscl::{self, EncoderParams, ENCODER_HIDDEN};
use crate::tensor::{Tape, Tensor, TensorId};
use crate::training::{self, AdamState, LrSchedule, RunConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Iterative,
    Joint,
    Cascade,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scheme::Iterative => write!(f, "iterative"),
            Scheme::Joint => write!(f, "joint"),
            Scheme::Cascade => write!(f, "cascade"),
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iterative" => Ok(Scheme::Iterative),
            "joint" => Ok(Scheme::Joint),
            "cascade" => Ok(Scheme::Cascade),
            other => Err(Error::InvalidArgument(format!(
                "unknown scheme '{other}', expected iterative, joint or cascade"
            ))),
        }
    }
}

/// Per-pixel decoder mirroring the encoder: hidden -> 128 -> bands with
/// shared weights across the spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub bands: usize,
    pub hidden: usize,
}

impl DecoderParams {
    pub fn init(bands: usize, hidden: usize, rng: &mut Rng) -> Self {
        DecoderParams {
            w1: Tensor::init_uniform(ENCODER_HIDDEN, hidden, hidden, rng),
            b1: Tensor::zeros(vec![ENCODER_HIDDEN]),
            w2: Tensor::init_uniform(bands, ENCODER_HIDDEN, ENCODER_HIDDEN, rng),
            b2: Tensor::zeros(vec![bands]),
            bands,
            hidden,
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("decoder.w1", &self.w1),
            ("decoder.b1", &self.b1),
            ("decoder.w2", &self.w2),
            ("decoder.b2", &self.b2),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("decoder.w1", &mut self.w1),
            ("decoder.b1", &mut self.b1),
            ("decoder.w2", &mut self.w2),
            ("decoder.b2", &mut self.b2),
        ]
    }
}

pub struct DecoderIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

pub fn decoder_leaves(tape: &mut Tape, params: &DecoderParams) -> DecoderIds {
    DecoderIds {
        w1: tape.leaf(params.w1.clone()),
        b1: tape.leaf(params.b1.clone()),
        w2: tape.leaf(params.w2.clone()),
        b2: tape.leaf(params.b2.clone()),
    }
}

/// Reconstruct patches from encoded features [n, p*p*h] -> [n, p*p*bands].
pub fn decode(
    tape: &mut Tape,
    ids: &DecoderIds,
    h: TensorId,
    n: usize,
    patch_size: usize,
    bands: usize,
    hidden: usize,
) -> Result<TensorId> {
    let pixels = n * patch_size * patch_size;
    let a = tape.reshape(h, vec![pixels, hidden])?;
    let a = tape.affine(a, ids.w1, ids.b1)?;
    let a = tape.relu(a);
    let a = tape.affine(a, ids.w2, ids.b2)?;
    tape.reshape(a, vec![n, patch_size * patch_size * bands])
}

/// Mean squared error between reconstruction and input.
pub fn reconstruction_loss(tape: &mut Tape, recon: TensorId, x: TensorId) -> Result<TensorId> {
    let d = tape.sub(recon, x)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

pub struct SchemeOutcome {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub head: ClassifierParams,
    pub best_val_metric: f64,
    pub best_epoch: usize,
    pub test_accuracy: f64,
}

struct Model {
    encoder: EncoderParams,
    decoder: DecoderParams,
    head: ClassifierParams,
}

enum StepKind {
    /// Reconstruction loss only; updates encoder + decoder.
    Recon,
    /// Task loss only with frozen encoder; updates head.
    HeadOnly,
    /// (1 - lambda) * recon + lambda * task; updates everything.
    Joint(f32),
}

#[allow(clippy::too_many_arguments)]
fn batch_step(
    model: &mut Model,
    set: &PatchSet,
    chunk: &[usize],
    kind: &StepKind,
    config: &RunConfig,
    lr: f32,
    adam: &mut AdamState,
    dropout_rng: &mut Rng,
    epoch: usize,
    batch_idx: usize,
) -> Result<f64> {
    let n = chunk.len();
    let p = set.patch_size;
    let bands = set.bands;
    let h = model.encoder.hidden;
    let c = set.num_classes as usize;

    let mut tape = Tape::new();
    let enc_ids = sscl::encoder_leaves(&mut tape, &model.encoder);
    let dec_ids = decoder_leaves(&mut tape, &model.decoder);
    let head_ids = classifier::head_leaves(&mut tape, &model.head);
    let x = tape.leaf(training::batch_tensor(set, chunk)?);
    let enc_dropout = match kind {
        StepKind::HeadOnly => 0.0,
        _ => config.dropout_encoder,
    };
    let hrep = sscl::encode(
        &mut tape, &enc_ids, x, n, p, bands, h, enc_dropout, dropout_rng, true,
    )?;

    let task_loss = |tape: &mut Tape, dropout_rng: &mut Rng| -> Result<TensorId> {
        let logits = classifier::head_forward(
            tape,
            &head_ids,
            hrep,
            config.dropout_classifier,
            dropout_rng,
            true,
        )?;
        match set.task {
            Task::Multi => {
                let batch_patches: Vec<&Patch> = chunk.iter().map(|&i| &set.patches[i]).collect();
                let targets = classifier::multi_targets(&batch_patches, c);
                classifier::bce_logits_loss(tape, logits, n, c, &targets, &LossWeights::neutral(c))
            }
            Task::Single => {
                let targets: Vec<u32> = chunk
                    .iter()
                    .map(|&i| set.patches[i].label_single.expect("single-label set"))
                    .collect();
                classifier::cross_entropy_loss(tape, logits, n, c, &targets)
            }
        }
    };

    let loss = match kind {
        StepKind::Recon => {
            let recon = decode(&mut tape, &dec_ids, hrep, n, p, bands, h)?;
            reconstruction_loss(&mut tape, recon, x)?
        }
        StepKind::HeadOnly => task_loss(&mut tape, dropout_rng)?,
        StepKind::Joint(lambda) => {
            let recon = decode(&mut tape, &dec_ids, hrep, n, p, bands, h)?;
            let rl = reconstruction_loss(&mut tape, recon, x)?;
            let tl = task_loss(&mut tape, dropout_rng)?;
            let rl = tape.scale(rl, 1.0 - lambda);
            let tl = tape.scale(tl, *lambda);
            tape.add(rl, tl)?
        }
    };
    let loss_val = tape.value(loss).data()[0] as f64;
    if !loss_val.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            batch: batch_idx,
        });
    }
    let grads = tape.backward(loss)?;

    // One Adam state covers all twelve tensors; frozen groups get zero
    // gradients, which Adam leaves untouched only if their moments are
    // zero, so frozen tensors are simply excluded from the step.
    let all_ids = [
        enc_ids.w1, enc_ids.b1, enc_ids.w2, enc_ids.b2, //
        dec_ids.w1, dec_ids.b1, dec_ids.w2, dec_ids.b2, //
        head_ids.w1, head_ids.b1, head_ids.w2, head_ids.b2,
    ];
    let active: Vec<usize> = match kind {
        StepKind::Recon => (0..8).collect(),
        StepKind::HeadOnly => (8..12).collect(),
        StepKind::Joint(_) => (0..12).collect(),
    };
    let grad_slices: Vec<&[f32]> = active.iter().map(|&i| grads.get(all_ids[i])).collect();
    let mut enc_mut = model.encoder.named_tensors_mut();
    let mut dec_mut = model.decoder.named_tensors_mut();
    let mut head_mut = model.head.named_tensors_mut();
    let mut all_params: Vec<&mut Tensor> = enc_mut
        .iter_mut()
        .map(|(_, t)| &mut **t)
        .chain(dec_mut.iter_mut().map(|(_, t)| &mut **t))
        .chain(head_mut.iter_mut().map(|(_, t)| &mut **t))
        .collect();
    let mut params: Vec<&mut Tensor> = Vec::with_capacity(active.len());
    for (i, param) in all_params.drain(..).enumerate() {
        if active.contains(&i) {
            params.push(param);
        }
    }
    adam.step(&mut params, &grad_slices, lr, config.l2_weight)?;
    Ok(loss_val)
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut Model,
    set: &PatchSet,
    order: &[usize],
    kind: &StepKind,
    config: &RunConfig,
    lr: f32,
    adam: &mut AdamState,
    dropout_rng: &mut Rng,
    epoch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut batches = 0usize;
    for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
        total += batch_step(
            model, set, chunk, kind, config, lr, adam, dropout_rng, epoch, batch_idx,
        )?;
        batches += 1;
    }
    Ok(if batches > 0 { total / batches as f64 } else { 0.0 })
}

fn adam_for(model: &Model, kind: &StepKind) -> AdamState {
    let lens: Vec<usize> = match kind {
        StepKind::Recon => model
            .encoder
            .named_tensors()
            .iter()
            .chain(model.decoder.named_tensors().iter())
            .map(|(_, t)| t.len())
            .collect(),
        StepKind::HeadOnly => model
            .head
            .named_tensors()
            .iter()
            .map(|(_, t)| t.len())
            .collect(),
        StepKind::Joint(_) => model
            .encoder
            .named_tensors()
            .iter()
            .chain(model.decoder.named_tensors().iter())
            .chain(model.head.named_tensors().iter())
            .map(|(_, t)| t.len())
            .collect(),
    };
    AdamState::new(&lens)
}

/// Train one supervised autoencoder baseline from random initialization.
///
/// * iterative — epochs alternate between a reconstruction pass over
///   encoder+decoder and a head-only classification pass.
/// * joint — every batch optimizes (1 - lambda) * reconstruction +
///   lambda * task loss end to end.
/// * cascade — a full reconstruction phase first, then the encoder is
///   frozen and only the head is trained.
pub fn train_scheme(
    scheme: Scheme,
    set: &PatchSet,
    plan: &SplitPlan,
    config: &RunConfig,
    seed: u64,
) -> Result<SchemeOutcome> {
    if plan.cls_train.is_empty() || plan.cls_val.is_empty() || plan.cls_test.is_empty() {
        return Err(Error::DegenerateInput("empty classifier split".into()));
    }
    let p = set.patch_size;
    let bands = set.bands;
    let h = config.hidden_size;
    let c = set.num_classes as usize;
    let feat_h = p * p * h;

    let root = Rng::new(seed);
    let mut init_rng = root.fork(0x62617365);
    let mut model = Model {
        encoder: EncoderParams::init(bands, h, &mut init_rng),
        decoder: DecoderParams::init(bands, h, &mut init_rng),
        head: ClassifierParams::init(feat_h, c, &mut init_rng),
    };
    let mut shuffle_rng = root.fork(0x73687566);
    let mut dropout_rng = root.fork(0x64726f70);
    let schedule = LrSchedule {
        base: config.lr,
        step: config.lr_step,
        gamma: config.gamma,
    };

    let mut best: Option<(f64, usize, EncoderParams, ClassifierParams)> = None;
    let consider = |model: &Model,
                        epoch: usize,
                        best: &mut Option<(f64, usize, EncoderParams, ClassifierParams)>|
     -> Result<()> {
        let val_acc = classifier::evaluate(
            &model.encoder,
            &model.head,
            set,
            &plan.cls_val,
            config.threshold,
        )?;
        let better = match best {
            None => true,
            Some((b, _, _, _)) => val_acc > *b,
        };
        if better {
            *best = Some((val_acc, epoch, model.encoder.clone(), model.head.clone()));
        }
        Ok(())
    };

    match scheme {
        Scheme::Iterative => {
            let mut adam_recon = adam_for(&model, &StepKind::Recon);
            let mut adam_head = adam_for(&model, &StepKind::HeadOnly);
            for epoch in 0..config.epochs {
                let lr = training::lr_at(&schedule, epoch);
                let mut order = plan.cls_train.clone();
                shuffle_rng.shuffle(&mut order);
                let (kind, adam) = if epoch % 2 == 0 {
                    (StepKind::Recon, &mut adam_recon)
                } else {
                    (StepKind::HeadOnly, &mut adam_head)
                };
                run_epoch(
                    &mut model, set, &order, &kind, config, lr, adam, &mut dropout_rng, epoch,
                )?;
                if epoch % 2 == 1 || config.epochs == 1 {
                    consider(&model, epoch, &mut best)?;
                }
            }
        }
        Scheme::Joint => {
            let kind = StepKind::Joint(config.joint_lambda);
            let mut adam = adam_for(&model, &kind);
            for epoch in 0..config.epochs {
                let lr = training::lr_at(&schedule, epoch);
                let mut order = plan.cls_train.clone();
                shuffle_rng.shuffle(&mut order);
                run_epoch(
                    &mut model, set, &order, &kind, config, lr, &mut adam, &mut dropout_rng, epoch,
                )?;
                consider(&model, epoch, &mut best)?;
            }
        }
        Scheme::Cascade => {
            let mut adam = adam_for(&model, &StepKind::Recon);
            for epoch in 0..config.epochs {
                let lr = training::lr_at(&schedule, epoch);
                let mut order = plan.cls_train.clone();
                shuffle_rng.shuffle(&mut order);
                run_epoch(
                    &mut model,
                    set,
                    &order,
                    &StepKind::Recon,
                    config,
                    lr,
                    &mut adam,
                    &mut dropout_rng,
                    epoch,
                )?;
            }
            let mut adam = adam_for(&model, &StepKind::HeadOnly);
            for epoch in 0..config.epochs {
                let lr = training::lr_at(&schedule, epoch);
                let mut order = plan.cls_train.clone();
                shuffle_rng.shuffle(&mut order);
                run_epoch(
                    &mut model,
                    set,
                    &order,
                    &StepKind::HeadOnly,
                    config,
                    lr,
                    &mut adam,
                    &mut dropout_rng,
                    epoch,
                )?;
                consider(&model, epoch, &mut best)?;
            }
        }
    }

    let (best_val_metric, best_epoch, encoder, head) =
        best.ok_or_else(|| Error::InvalidArgument("baseline ran zero epochs".into()))?;
    let test_accuracy =
        classifier::evaluate(&encoder, &head, set, &plan.cls_test, config.threshold)?;
    Ok(SchemeOutcome {
        encoder,
        decoder: model.decoder,
        head,
        best_val_metric,
        best_epoch,
        test_accuracy,
    })
}
