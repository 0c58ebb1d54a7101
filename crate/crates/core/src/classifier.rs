//! Supervised stage: classification head on top of the spectral encoder,
//! the two loss functions, thresholded/argmax decision rules, and the
//! fine-tuning loop with CL-tune / CL-freeze encoder handling.

use crate::dataset::{Patch, PatchSet, SplitPlan, Task};
use crate::error::{Error, Result};
use crate::eval;
use crate::rng::Rng;
use crate::sscl::{self, EncoderParams};
use crate::tensor::{Tape, Tensor, TensorId};
use crate::training::{self, AdamState, LrSchedule, RunConfig};
use serde::{Deserialize, Serialize};

pub const HEAD_HIDDEN: usize = 64;

/// Whether fine-tuning updates the encoder (CL-tune) or keeps it frozen
/// and trains only the head (CL-freeze).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FineTuneMode {
    #[serde(rename = "cl-tune")]
    ClTune,
    #[serde(rename = "cl-freeze")]
    ClFreeze,
}

impl std::fmt::Display for FineTuneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FineTuneMode::ClTune => write!(f, "cl-tune"),
            FineTuneMode::ClFreeze => write!(f, "cl-freeze"),
        }
    }
}

impl std::str::FromStr for FineTuneMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cl-tune" => Ok(FineTuneMode::ClTune),
            "cl-freeze" => Ok(FineTuneMode::ClFreeze),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode '{other}', expected cl-tune or cl-freeze"
            ))),
        }
    }
}

/// Two-layer head mapping the flattened encoded patch to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ClassifierParams {
    pub fn init(input_dim: usize, num_classes: usize, rng: &mut Rng) -> Self {
        ClassifierParams {
            w1: Tensor::init_uniform(HEAD_HIDDEN, input_dim, input_dim, rng),
            b1: Tensor::zeros(vec![HEAD_HIDDEN]),
            w2: Tensor::init_uniform(num_classes, HEAD_HIDDEN, HEAD_HIDDEN, rng),
            b2: Tensor::zeros(vec![num_classes]),
            input_dim,
            num_classes,
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("head.w1", &self.w1),
            ("head.b1", &self.b1),
            ("head.w2", &self.w2),
            ("head.b2", &self.b2),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("head.w1", &mut self.w1),
            ("head.b1", &mut self.b1),
            ("head.w2", &mut self.w2),
            ("head.b2", &mut self.b2),
        ]
    }
}

pub struct HeadIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

pub fn head_leaves(tape: &mut Tape, params: &ClassifierParams) -> HeadIds {
    HeadIds {
        w1: tape.leaf(params.w1.clone()),
        b1: tape.leaf(params.b1.clone()),
        w2: tape.leaf(params.w2.clone()),
        b2: tape.leaf(params.b2.clone()),
    }
}

/// Logits for a batch of flattened encoder outputs [n, input_dim].
pub fn head_forward(
    tape: &mut Tape,
    ids: &HeadIds,
    h: TensorId,
    dropout_rate: f32,
    rng: &mut Rng,
    training: bool,
) -> Result<TensorId> {
    let a = tape.affine(h, ids.w1, ids.b1)?;
    let a = tape.relu(a);
    let a = tape.dropout(a, dropout_rate, rng, training)?;
    tape.affine(a, ids.w2, ids.b2)
}

/// Sample/class weight `w` and per-class positive weights `p_c`; the
/// neutral defaults leave the loss unweighted.
#[derive(Debug, Clone)]
pub struct LossWeights {
    pub w: f32,
    pub pos: Vec<f32>,
}

impl LossWeights {
    pub fn neutral(num_classes: usize) -> Self {
        LossWeights {
            w: 1.0,
            pos: vec![1.0; num_classes],
        }
    }
}

/// Weighted multi-label BCE-with-logits over an [n, c] logit matrix.
pub fn bce_logits_loss(
    tape: &mut Tape,
    logits: TensorId,
    n: usize,
    c: usize,
    targets: &[f32],
    weights: &LossWeights,
) -> Result<TensorId> {
    if weights.pos.len() != c {
        return Err(Error::shape(
            "bce_logits_loss",
            format!("{c} positive weights"),
            format!("{}", weights.pos.len()),
        ));
    }
    if weights.w <= 0.0 || weights.pos.iter().any(|&p| p <= 0.0) {
        return Err(Error::InvalidArgument(
            "loss weights must be positive".into(),
        ));
    }
    let w_vec = vec![weights.w; n * c];
    let mut pos_vec = Vec::with_capacity(n * c);
    for _ in 0..n {
        pos_vec.extend_from_slice(&weights.pos);
    }
    tape.bce_with_logits(logits, targets.to_vec(), w_vec, pos_vec)
}

/// Cross-entropy over an [n, c] logit matrix; labels are 1-based class ids.
pub fn cross_entropy_loss(
    tape: &mut Tape,
    logits: TensorId,
    n: usize,
    c: usize,
    targets: &[u32],
) -> Result<TensorId> {
    if targets.len() != n {
        return Err(Error::shape(
            "cross_entropy_loss",
            format!("{n} targets"),
            format!("{}", targets.len()),
        ));
    }
    let mut indices = Vec::with_capacity(n);
    for (i, &t) in targets.iter().enumerate() {
        if t == 0 || t as usize > c {
            return Err(Error::InvalidArgument(format!(
                "class label {t} out of range 1..={c}"
            )));
        }
        indices.push(i * c + (t as usize - 1));
    }
    let lsm = tape.log_softmax_rows(logits);
    let picked = tape.gather(lsm, indices)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// Per-sample predicted label sets: class c is on when sigmoid(logit) >=
/// threshold. Returned ids are 1-based and sorted.
pub fn predict_multi(logits: &Tensor, num_classes: usize, threshold: f32) -> Vec<Vec<u32>> {
    let data = logits.data();
    let n = data.len() / num_classes;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut labels = Vec::new();
        for c in 0..num_classes {
            let x = data[i * num_classes + c];
            let s = if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            };
            if s >= threshold {
                labels.push(c as u32 + 1);
            }
        }
        out.push(labels);
    }
    out
}

/// Per-sample argmax class (1-based); ties break to the lowest index.
pub fn predict_single(logits: &Tensor, num_classes: usize) -> Vec<u32> {
    let data = logits.data();
    let n = data.len() / num_classes;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &data[i * num_classes..(i + 1) * num_classes];
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        out.push(best as u32 + 1);
    }
    out
}

/// Binary target matrix for multi-label patches (class ids are 1-based).
pub fn multi_targets(patches: &[&Patch], num_classes: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; patches.len() * num_classes];
    for (i, patch) in patches.iter().enumerate() {
        for &c in &patch.label_multi {
            t[i * num_classes + (c as usize - 1)] = 1.0;
        }
    }
    t
}

pub struct FinetuneOutcome {
    pub encoder: EncoderParams,
    pub head: ClassifierParams,
    pub best_val_metric: f64,
    pub best_epoch: usize,
    pub test_accuracy: f64,
    pub train_losses: Vec<f64>,
}

/// Accuracy (percent) of the given encoder + head over `indices`, run in
/// evaluation mode (dropout off).
pub fn evaluate(
    encoder: &EncoderParams,
    head: &ClassifierParams,
    set: &PatchSet,
    indices: &[usize],
    threshold: f32,
) -> Result<f64> {
    let c = set.num_classes as usize;
    let mut preds_multi = Vec::new();
    let mut truth_multi = Vec::new();
    let mut preds_single = Vec::new();
    let mut truth_single = Vec::new();
    let mut rng = Rng::new(0); // eval mode: dropout is identity
    for chunk in indices.chunks(512) {
        let n = chunk.len();
        let mut tape = Tape::new();
        let enc_ids = sscl::encoder_leaves(&mut tape, encoder);
        let head_ids = head_leaves(&mut tape, head);
        let x = tape.leaf(training::batch_tensor(set, chunk)?);
        let hrep = sscl::encode(
            &mut tape,
            &enc_ids,
            x,
            n,
            set.patch_size,
            set.bands,
            encoder.hidden,
            0.0,
            &mut rng,
            false,
        )?;
        let logits = head_forward(&mut tape, &head_ids, hrep, 0.0, &mut rng, false)?;
        let logits = tape.value(logits);
        match set.task {
            Task::Multi => {
                preds_multi.extend(predict_multi(logits, c, threshold));
                truth_multi.extend(chunk.iter().map(|&i| set.patches[i].label_multi.clone()));
            }
            Task::Single => {
                preds_single.extend(predict_single(logits, c));
                truth_single.extend(chunk.iter().map(|&i| {
                    set.patches[i]
                        .label_single
                        .expect("single-label patch set")
                }));
            }
        }
    }
    match set.task {
        Task::Multi => eval::multilabel_accuracy(&preds_multi, &truth_multi),
        Task::Single => eval::singlelabel_accuracy(&preds_single, &truth_single),
    }
}

/// Stage-2 supervised fine-tuning. The best validation-accuracy epoch is
/// kept; under CL-freeze the encoder parameters are returned byte-identical.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    encoder: &EncoderParams,
    head: Option<ClassifierParams>,
    mode: FineTuneMode,
    set: &PatchSet,
    plan: &SplitPlan,
    config: &RunConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    if plan.cls_train.is_empty() || plan.cls_val.is_empty() || plan.cls_test.is_empty() {
        return Err(Error::DegenerateInput("empty classifier split".into()));
    }
    let p = set.patch_size;
    let bands = set.bands;
    let h = encoder.hidden;
    let c = set.num_classes as usize;
    let feat_h = p * p * h;

    let root = Rng::new(seed);
    let mut init_rng = root.fork(0x68656164);
    let mut head = head.unwrap_or_else(|| ClassifierParams::init(feat_h, c, &mut init_rng));
    let mut encoder = encoder.clone();
    let mut shuffle_rng = root.fork(0x73687566);
    let mut dropout_rng = root.fork(0x64726f70);

    let tune_encoder = mode == FineTuneMode::ClTune;
    let param_lens: Vec<usize> = if tune_encoder {
        encoder
            .named_tensors()
            .iter()
            .chain(head.named_tensors().iter())
            .map(|(_, t)| t.len())
            .collect()
    } else {
        head.named_tensors().iter().map(|(_, t)| t.len()).collect()
    };
    let mut adam = AdamState::new(&param_lens);
    let schedule = LrSchedule {
        base: config.lr,
        step: config.lr_step,
        gamma: config.gamma,
    };
    let weights = LossWeights::neutral(c);

    let mut best: Option<(f64, usize, EncoderParams, ClassifierParams)> = None;
    let mut train_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = training::lr_at(&schedule, epoch);
        let mut order = plan.cls_train.clone();
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        // Unlike pretraining, the trailing partial batch is kept.
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let n = chunk.len();
            let mut tape = Tape::new();
            let enc_ids = sscl::encoder_leaves(&mut tape, &encoder);
            let head_ids = head_leaves(&mut tape, &head);
            let x = tape.leaf(training::batch_tensor(set, chunk)?);
            let hrep = sscl::encode(
                &mut tape,
                &enc_ids,
                x,
                n,
                p,
                bands,
                h,
                config.dropout_encoder,
                &mut dropout_rng,
                true,
            )?;
            let logits = head_forward(
                &mut tape,
                &head_ids,
                hrep,
                config.dropout_classifier,
                &mut dropout_rng,
                true,
            )?;
            let loss = match set.task {
                Task::Multi => {
                    let batch_patches: Vec<&Patch> =
                        chunk.iter().map(|&i| &set.patches[i]).collect();
                    let targets = multi_targets(&batch_patches, c);
                    bce_logits_loss(&mut tape, logits, n, c, &targets, &weights)?
                }
                Task::Single => {
                    let targets: Vec<u32> = chunk
                        .iter()
                        .map(|&i| set.patches[i].label_single.expect("single-label set"))
                        .collect();
                    cross_entropy_loss(&mut tape, logits, n, c, &targets)?
                }
            };
            let loss_val = tape.value(loss).data()[0] as f64;
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_loss += loss_val;
            batches += 1;
            let grads = tape.backward(loss)?;

            let head_grad_ids = [head_ids.w1, head_ids.b1, head_ids.w2, head_ids.b2];
            if tune_encoder {
                let grad_ids = [
                    enc_ids.w1, enc_ids.b1, enc_ids.w2, enc_ids.b2, //
                    head_ids.w1, head_ids.b1, head_ids.w2, head_ids.b2,
                ];
                let grad_slices: Vec<&[f32]> =
                    grad_ids.iter().map(|&id| grads.get(id)).collect();
                let mut enc_mut = encoder.named_tensors_mut();
                let mut head_mut = head.named_tensors_mut();
                let mut params: Vec<&mut Tensor> = enc_mut
                    .iter_mut()
                    .map(|(_, t)| &mut **t)
                    .chain(head_mut.iter_mut().map(|(_, t)| &mut **t))
                    .collect();
                adam.step(&mut params, &grad_slices, lr, config.l2_weight)?;
            } else {
                let grad_slices: Vec<&[f32]> =
                    head_grad_ids.iter().map(|&id| grads.get(id)).collect();
                let mut head_mut = head.named_tensors_mut();
                let mut params: Vec<&mut Tensor> =
                    head_mut.iter_mut().map(|(_, t)| &mut **t).collect();
                adam.step(&mut params, &grad_slices, lr, config.l2_weight)?;
            }
        }
        train_losses.push(if batches > 0 { epoch_loss / batches as f64 } else { 0.0 });

        let val_acc = evaluate(&encoder, &head, set, &plan.cls_val, config.threshold)?;
        let better = match &best {
            None => true,
            Some((b, _, _, _)) => val_acc > *b,
        };
        if better {
            best = Some((val_acc, epoch, encoder.clone(), head.clone()));
        }
    }
    let (best_val_metric, best_epoch, encoder, head) =
        best.ok_or_else(|| Error::InvalidArgument("finetune ran zero epochs".into()))?;
    let test_accuracy = evaluate(&encoder, &head, set, &plan.cls_test, config.threshold)?;
    Ok(FinetuneOutcome {
        encoder,
        head,
        best_val_metric,
        best_epoch,
        test_accuracy,
        train_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits_tape(n: usize, c: usize, data: Vec<f32>) -> (Tape, TensorId) {
        let mut tape = Tape::new();
        let id = tape.leaf(Tensor::matrix(n, c, data).unwrap());
        (tape, id)
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let (mut tape, logits) = logits_tape(1, 1, vec![0.0]);
        let loss = bce_logits_loss(&mut tape, logits, 1, 1, &[1.0], &LossWeights::neutral(1)).unwrap();
        let v = tape.value(loss).data()[0];
        assert!((v - std::f32::consts::LN_2).abs() < 1e-7, "{v}");
    }

    #[test]
    fn bce_saturated_correct_is_tiny() {
        let (mut tape, logits) = logits_tape(1, 2, vec![20.0, -20.0]);
        let loss = bce_logits_loss(&mut tape, logits, 1, 2, &[1.0, 0.0], &LossWeights::neutral(2)).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-8);
    }

    #[test]
    fn bce_matches_literal_oracle() {
        // Direct Eq-style double loop in f64, including w and p_c.
        let mut rng = Rng::new(11);
        let (n, c) = (5, 7);
        let logits: Vec<f32> = (0..n * c).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let targets: Vec<f32> = (0..n * c).map(|_| if rng.coin() { 1.0 } else { 0.0 }).collect();
        let weights = LossWeights {
            w: 1.3,
            pos: (0..c).map(|_| rng.uniform(0.5, 2.0)).collect(),
        };
        let mut expected = 0.0f64;
        for i in 0..n {
            for j in 0..c {
                let x = logits[i * c + j] as f64;
                let y = targets[i * c + j] as f64;
                let p = weights.pos[j] as f64;
                let sig = 1.0 / (1.0 + (-x).exp());
                expected -= 1.3 * (p * y * sig.ln() + (1.0 - y) * (1.0 - sig).ln());
            }
        }
        expected /= (n * c) as f64;
        let (mut tape, ids) = logits_tape(n, c, logits);
        let loss = bce_logits_loss(&mut tape, ids, n, c, &targets, &weights).unwrap();
        let got = tape.value(loss).data()[0] as f64;
        assert!((got - expected).abs() < 1e-6, "got {got} expected {expected}");
    }

    #[test]
    fn bce_rejects_nonpositive_weights() {
        let (mut tape, logits) = logits_tape(1, 1, vec![0.0]);
        let bad = LossWeights { w: 0.0, pos: vec![1.0] };
        assert!(bce_logits_loss(&mut tape, logits, 1, 1, &[1.0], &bad).is_err());
    }

    #[test]
    fn ce_uniform_logits_is_ln_c() {
        let (mut tape, logits) = logits_tape(3, 5, vec![0.25; 15]);
        let loss = cross_entropy_loss(&mut tape, logits, 3, 5, &[1, 3, 5]).unwrap();
        let v = tape.value(loss).data()[0];
        assert!((v - (5.0f32).ln()).abs() < 1e-6, "{v}");
    }

    #[test]
    fn ce_matches_literal_oracle() {
        let mut rng = Rng::new(23);
        let (n, c) = (6, 4);
        let logits: Vec<f32> = (0..n * c).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let targets: Vec<u32> = (0..n).map(|_| rng.below(c) as u32 + 1).collect();
        let mut expected = 0.0f64;
        for i in 0..n {
            let row: Vec<f64> = logits[i * c..(i + 1) * c].iter().map(|&v| v as f64).collect();
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expected -= row[targets[i] as usize - 1] - lse;
        }
        expected /= n as f64;
        let (mut tape, ids) = logits_tape(n, c, logits);
        let loss = cross_entropy_loss(&mut tape, ids, n, c, &targets).unwrap();
        let got = tape.value(loss).data()[0] as f64;
        assert!((got - expected).abs() < 1e-5, "got {got} expected {expected}");
    }

    #[test]
    fn ce_is_shift_invariant() {
        let base = vec![0.3, -1.2, 2.0, 0.7];
        let shifted: Vec<f32> = base.iter().map(|v| v + 10.0).collect();
        let (mut t1, l1) = logits_tape(1, 4, base);
        let (mut t2, l2) = logits_tape(1, 4, shifted);
        let a = cross_entropy_loss(&mut t1, l1, 1, 4, &[2]).unwrap();
        let b = cross_entropy_loss(&mut t2, l2, 1, 4, &[2]).unwrap();
        assert!((t1.value(a).data()[0] - t2.value(b).data()[0]).abs() < 1e-5);
    }

    #[test]
    fn ce_rejects_out_of_range_labels() {
        let (mut tape, logits) = logits_tape(1, 3, vec![0.0; 3]);
        assert!(cross_entropy_loss(&mut tape, logits, 1, 3, &[0]).is_err());
        let (mut tape, logits) = logits_tape(1, 3, vec![0.0; 3]);
        assert!(cross_entropy_loss(&mut tape, logits, 1, 3, &[4]).is_err());
    }

    #[test]
    fn predict_multi_thresholds_at_zero_logit() {
        // sigmoid(x) >= 0.5 iff x >= 0
        let logits = Tensor::matrix(2, 3, vec![1.0, -1.0, 0.0, -0.1, 5.0, -7.0]).unwrap();
        let preds = predict_multi(&logits, 3, 0.5);
        assert_eq!(preds, vec![vec![1, 3], vec![2]]);
    }

    #[test]
    fn predict_single_breaks_ties_low() {
        let logits = Tensor::matrix(2, 3, vec![2.0, 2.0, 1.0, -1.0, 0.5, 0.5]).unwrap();
        assert_eq!(predict_single(&logits, 3), vec![1, 2]);
    }

    #[test]
    fn predict_single_is_shift_invariant() {
        let base = vec![0.4, -0.2, 1.7, 0.0, 0.3, 0.1, -2.0, 0.9];
        let shifted: Vec<f32> = base.iter().map(|v| v + 3.5).collect();
        let a = predict_single(&Tensor::matrix(2, 4, base).unwrap(), 4);
        let b = predict_single(&Tensor::matrix(2, 4, shifted).unwrap(), 4);
        assert_eq!(a, b);
    }

    #[test]
    fn multi_targets_sets_one_hot_rows() {
        let patch = Patch {
            pixels: vec![0.0],
            origin: (0, 0),
            label_multi: vec![1, 3],
            label_single: None,
            is_mixed: true,
        };
        let t = multi_targets(&[&patch], 4);
        assert_eq!(t, vec![1.0, 0.0, 1.0, 0.0]);
    }
}
