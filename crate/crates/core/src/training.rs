//! Optimization loop machinery: Adam with L2 regularization, step-decay
//! learning rate schedule, seeding, checkpoint persistence, experiment
//! configuration, and the per-stage experiment runner with three-seed
//! averaging.

use crate::baselines::{self, Scheme};
use crate::classifier::{self, FineTuneMode};
use crate::dataset::{self, PatchSet, SplitPlan, Task};
use crate::error::{Error, Result};
use crate::eval;
use crate::npy::{self, NpyData};
use crate::rng::Rng;
use crate::sscl::{self, EncoderParams, ProjectionParams};
use crate::tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// First/second moment per parameter tensor plus the shared timestep.
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl AdamState {
    pub fn new(param_lens: &[usize]) -> Self {
        AdamState {
            m: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Classic Adam update with L2 added to the gradient before the moment
    /// updates: g <- g + l2_weight * theta.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&[f32]],
        lr: f32,
        l2_weight: f32,
    ) -> Result<()> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (pi, param) in params.iter_mut().enumerate() {
            let g_in = grads[pi];
            if g_in.iter().any(|g| !g.is_finite()) {
                return Err(Error::InvalidArgument(
                    "non-finite gradient in Adam step".into(),
                ));
            }
            let data = param.data_mut();
            debug_assert_eq!(data.len(), g_in.len());
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            for i in 0..data.len() {
                let g = g_in[i] + l2_weight * data[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// lr(epoch) = base * gamma^floor(epoch / step).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f32,
    pub step: usize,
    pub gamma: f32,
}

pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> f32 {
    schedule.base * schedule.gamma.powi((epoch / schedule.step) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
    Baseline,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Baseline => "baseline",
        };
        write!(f, "{s}")
    }
}

/// Per-stage hyperparameter overrides, used when a sweep or a fine-tune run
/// has to (re)train the encoder first.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub gamma: f32,
    pub lr_step: usize,
    pub l2_weight: f32,
    pub dropout: f32,
}

/// Full experiment configuration; the declarative TOML file is the single
/// source of truth, CLI flags only override.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: String,
    pub task: Task,
    pub stage: Stage,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub gt: Option<PathBuf>,
    #[serde(default)]
    pub patches_dir: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub gamma: f32,
    pub lr_step: usize,
    #[serde(default)]
    pub l2_weight: f32,
    #[serde(default = "default_temperature")]
    pub temperature: f32,
    #[serde(default)]
    pub dropout_encoder: f32,
    #[serde(default)]
    pub dropout_classifier: f32,
    #[serde(default = "default_hidden")]
    pub hidden_size: usize,
    #[serde(default = "default_reduction")]
    pub reduction: f64,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_mode")]
    pub mode: FineTuneMode,
    #[serde(default)]
    pub scheme: Option<Scheme>,
    #[serde(default = "default_threshold")]
    pub threshold: f32,
    #[serde(default = "default_joint_lambda")]
    pub joint_lambda: f32,
    #[serde(default)]
    pub pretrain: Option<PretrainSettings>,
}

fn default_temperature() -> f32 {
    0.1
}
fn default_hidden() -> usize {
    32
}
fn default_reduction() -> f64 {
    1.0
}
fn default_patch_size() -> usize {
    3
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_mode() -> FineTuneMode {
    FineTuneMode::ClTune
}
fn default_threshold() -> f32 {
    0.5
}
fn default_joint_lambda() -> f32 {
    0.5
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !(0.0..=1.0).contains(&self.gamma) || self.gamma == 0.0 {
            return Err(Error::Config(format!(
                "rates must be positive and gamma in (0,1], got lr={} gamma={}",
                self.lr, self.gamma
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if self.lr_step == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs, batch_size and lr_step must be positive".into(),
            ));
        }
        if !dataset::ALLOWED_REDUCTIONS.contains(&self.reduction) {
            return Err(Error::Config(format!(
                "reduction {} not in {:?}",
                self.reduction,
                dataset::ALLOWED_REDUCTIONS
            )));
        }
        if !(0.0..1.0).contains(&self.joint_lambda) && self.joint_lambda != 1.0 {
            return Err(Error::Config("joint_lambda must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())[..16].to_string()
    }

    /// Hyperparameters for a pretrain pass: the explicit [pretrain] section
    /// when present, otherwise this config's own loop settings.
    pub fn pretrain_settings(&self) -> PretrainSettings {
        self.pretrain.clone().unwrap_or(PretrainSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            gamma: self.gamma,
            lr_step: self.lr_step,
            l2_weight: self.l2_weight,
            dropout: self.dropout_encoder,
        })
    }
}

/// Parse a TOML config file, resolving relative data paths against
/// HSIC_DATA_DIR when set.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    if !path.exists() {
        return Err(Error::DataNotFound(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut config: RunConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{e}")))?;
    config.validate()?;
    if let Ok(root) = std::env::var("HSIC_DATA_DIR") {
        let root = PathBuf::from(root);
        for p in [&mut config.data, &mut config.gt, &mut config.patches_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = root.join(&p);
            }
        }
    }
    Ok(config)
}

/// SHA-256 over the raw little-endian bytes of every tensor, in order.
pub fn params_digest(named: &[(&'static str, &Tensor)]) -> String {
    let mut hasher = Sha256::new();
    for (name, tensor) in named {
        hasher.update(name.as_bytes());
        for v in tensor.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    format!("{:x}", hasher.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub hidden_size: usize,
    pub bands: usize,
    pub patch_size: usize,
    pub temperature: f32,
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
}

/// One NPY file per parameter tensor plus manifest.json.
pub fn save_checkpoint(
    dir: &Path,
    named: &[(&'static str, &Tensor)],
    manifest: &CheckpointManifest,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, tensor) in named {
        npy::write_f32(&dir.join(format!("{name}.npy")), tensor.shape(), tensor.data())?;
    }
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(manifest)?,
    )?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::CheckpointMismatch(format!(
            "no manifest.json in {}",
            dir.display()
        )));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn load_tensor(dir: &Path, name: &str, expect_shape: &[usize]) -> Result<Tensor> {
    let arr = npy::read(&dir.join(format!("{name}.npy")))?;
    if arr.shape != expect_shape {
        return Err(Error::CheckpointMismatch(format!(
            "{name}: shape {:?} does not match manifest {:?}",
            arr.shape, expect_shape
        )));
    }
    match arr.data {
        NpyData::F32(v) => Tensor::new(arr.shape, v),
        _ => Err(Error::CheckpointMismatch(format!("{name}: expected <f4"))),
    }
}

pub fn load_encoder(dir: &Path) -> Result<(EncoderParams, CheckpointManifest)> {
    let manifest = load_manifest(dir)?;
    let shape = |name: &str| -> Result<Vec<usize>> {
        manifest
            .shapes
            .get(name)
            .cloned()
            .ok_or_else(|| Error::CheckpointMismatch(format!("manifest missing {name}")))
    };
    let encoder = EncoderParams {
        w1: load_tensor(dir, "encoder.w1", &shape("encoder.w1")?)?,
        b1: load_tensor(dir, "encoder.b1", &shape("encoder.b1")?)?,
        w2: load_tensor(dir, "encoder.w2", &shape("encoder.w2")?)?,
        b2: load_tensor(dir, "encoder.b2", &shape("encoder.b2")?)?,
        bands: manifest.bands,
        hidden: manifest.hidden_size,
    };
    Ok((encoder, manifest))
}

fn manifest_for(
    named: &[(&'static str, &Tensor)],
    config: &RunConfig,
    seed: u64,
    epoch: usize,
    bands: usize,
) -> CheckpointManifest {
    CheckpointManifest {
        shapes: named
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect(),
        hidden_size: config.hidden_size,
        bands,
        patch_size: config.patch_size,
        temperature: config.temperature,
        seed,
        epoch,
        config_hash: config.hash(),
    }
}

/// Collect a batch of flattened patches as one leaf tensor.
pub fn batch_tensor(set: &PatchSet, indices: &[usize]) -> Result<Tensor> {
    let feat = set.features();
    let mut data = Vec::with_capacity(indices.len() * feat);
    for &i in indices {
        data.extend_from_slice(&set.patches[i].pixels);
    }
    Tensor::matrix(indices.len(), feat, data)
}

pub struct PretrainOutcome {
    pub encoder: EncoderParams,
    pub projection: ProjectionParams,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub train_losses: Vec<f64>,
}

/// Stage-1 contrastive pretraining over a normalized patch set.
/// Incomplete trailing batches are dropped so the negatives-per-batch count
/// stays consistent; exact duplicates are removed within each batch.
pub fn pretrain(
    set: &PatchSet,
    plan: &SplitPlan,
    config: &RunConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    let settings = config.pretrain_settings();
    let p = set.patch_size;
    let bands = set.bands;
    let h = config.hidden_size;
    let feat_h = p * p * h;

    let root = Rng::new(seed);
    let mut init_rng = root.fork(0x696e6974);
    let mut encoder = EncoderParams::init(bands, h, &mut init_rng);
    let mut projection = ProjectionParams::init(feat_h, &mut init_rng);
    let mut shuffle_rng = root.fork(0x73687566);
    let mut dropout_rng = root.fork(0x64726f70);
    let mut augment_rng = root.fork(0x61756d67);

    let param_lens: Vec<usize> = encoder
        .named_tensors()
        .iter()
        .chain(projection.named_tensors().iter())
        .map(|(_, t)| t.len())
        .collect();
    let mut adam = AdamState::new(&param_lens);
    let schedule = LrSchedule {
        base: settings.lr,
        step: settings.lr_step,
        gamma: settings.gamma,
    };

    let mut best: Option<(f64, usize, EncoderParams, ProjectionParams)> = None;
    let mut train_losses = Vec::with_capacity(settings.epochs);

    for epoch in 0..settings.epochs {
        let lr = lr_at(&schedule, epoch);
        let mut order = plan.pretrain_train.clone();
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks_exact(settings.batch_size).enumerate() {
            let deduped = dataset::dedup_batch(chunk.iter().map(|&i| set.patches[i].clone()).collect());
            if deduped.len() < 2 {
                continue;
            }
            let loss = contrastive_step(
                &mut encoder,
                &mut projection,
                &deduped,
                p,
                bands,
                h,
                config.temperature,
                settings.dropout,
                settings.l2_weight,
                lr,
                &mut adam,
                &mut augment_rng,
                &mut dropout_rng,
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_loss += loss;
            batches += 1;
        }
        train_losses.push(if batches > 0 { epoch_loss / batches as f64 } else { 0.0 });

        let val_loss = contrastive_eval_loss(
            &encoder,
            &projection,
            set,
            &plan.pretrain_val,
            settings.batch_size,
            config.temperature,
        )?;
        let better = match &best {
            None => true,
            Some((b, _, _, _)) => val_loss < *b,
        };
        if better {
            best = Some((val_loss, epoch, encoder.clone(), projection.clone()));
        }
    }
    let (best_val_loss, best_epoch, encoder, projection) =
        best.ok_or_else(|| Error::InvalidArgument("pretrain ran zero epochs".into()))?;
    Ok(PretrainOutcome {
        encoder,
        projection,
        best_val_loss,
        best_epoch,
        train_losses,
    })
}

#[allow(clippy::too_many_arguments)]
fn contrastive_step(
    encoder: &mut EncoderParams,
    projection: &mut ProjectionParams,
    patches: &[dataset::Patch],
    p: usize,
    bands: usize,
    h: usize,
    temperature: f32,
    dropout: f32,
    l2_weight: f32,
    lr: f32,
    adam: &mut AdamState,
    augment_rng: &mut Rng,
    dropout_rng: &mut Rng,
) -> Result<f64> {
    let n = patches.len();
    let feat = p * p * bands;
    let mut views = Vec::with_capacity(2 * n * feat);
    for patch in patches {
        let pair = sscl::augment(patch, p, bands, augment_rng);
        views.extend_from_slice(&pair.view_a);
        views.extend_from_slice(&pair.view_b);
    }
    let mut tape = Tape::new();
    let enc_ids = sscl::encoder_leaves(&mut tape, encoder);
    let proj_ids = sscl::projection_leaves(&mut tape, projection);
    let x = tape.leaf(Tensor::matrix(2 * n, feat, views)?);
    let hrep = sscl::encode(&mut tape, &enc_ids, x, 2 * n, p, bands, h, dropout, dropout_rng, true)?;
    let z = sscl::project(&mut tape, &proj_ids, hrep, dropout, dropout_rng, true)?;
    let loss = sscl::nt_xent(&mut tape, z, temperature)?;
    let loss_val = tape.value(loss).data()[0] as f64;
    let grads = tape.backward(loss)?;

    let grad_ids = [
        enc_ids.w1, enc_ids.b1, enc_ids.w2, enc_ids.b2, //
        proj_ids.w1, proj_ids.b1, proj_ids.w2, proj_ids.b2,
    ];
    let grad_slices: Vec<&[f32]> = grad_ids.iter().map(|&id| grads.get(id)).collect();
    let mut enc_mut = encoder.named_tensors_mut();
    let mut proj_mut = projection.named_tensors_mut();
    let mut params: Vec<&mut Tensor> = enc_mut
        .iter_mut()
        .map(|(_, t)| &mut **t)
        .chain(proj_mut.iter_mut().map(|(_, t)| &mut **t))
        .collect();
    adam.step(&mut params, &grad_slices, lr, l2_weight)?;
    Ok(loss_val)
}

fn contrastive_eval_loss(
    encoder: &EncoderParams,
    projection: &ProjectionParams,
    set: &PatchSet,
    indices: &[usize],
    batch_size: usize,
    temperature: f32,
) -> Result<f64> {
    let p = set.patch_size;
    let bands = set.bands;
    let h = encoder.hidden;
    let feat = set.features();
    let mut total = 0.0f64;
    let mut batches = 0usize;
    let mut rng = Rng::new(0); // unused in eval mode
    for chunk in indices.chunks_exact(batch_size.min(indices.len().max(2))) {
        let deduped = dataset::dedup_batch(chunk.iter().map(|&i| set.patches[i].clone()).collect());
        if deduped.len() < 2 {
            continue;
        }
        let n = deduped.len();
        // Evaluation uses the un-flipped patch as both views.
        let mut views = Vec::with_capacity(2 * n * feat);
        for patch in &deduped {
            views.extend_from_slice(&patch.pixels);
            views.extend_from_slice(&patch.pixels);
        }
        let mut tape = Tape::new();
        let enc_ids = sscl::encoder_leaves(&mut tape, encoder);
        let proj_ids = sscl::projection_leaves(&mut tape, projection);
        let x = tape.leaf(Tensor::matrix(2 * n, feat, views)?);
        let hrep = sscl::encode(&mut tape, &enc_ids, x, 2 * n, p, bands, h, 0.0, &mut rng, false)?;
        let z = sscl::project(&mut tape, &proj_ids, hrep, 0.0, &mut rng, false)?;
        let loss = sscl::nt_xent(&mut tape, z, temperature)?;
        total += tape.value(loss).data()[0] as f64;
        batches += 1;
    }
    Ok(if batches > 0 { total / batches as f64 } else { 0.0 })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub accuracy: f64,
    pub best_val_metric: f64,
    pub best_epoch: usize,
    pub wall_time_s: f64,
    pub test_digest: String,
}

/// Per-seed metrics and their mean for one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub dataset: String,
    pub task: Task,
    pub stage: Stage,
    pub mode: String,
    pub hidden_size: usize,
    pub reduction: f64,
    pub temperature: f32,
    pub metric: String,
    pub per_seed: Vec<SeedMetrics>,
    pub mean_accuracy: f64,
    pub config_hash: String,
}

impl RunMetrics {
    pub fn run_name(&self) -> String {
        format!(
            "{}_{}_{}_{}_h{}_r{}_T{}",
            self.dataset, self.task, self.stage, self.mode, self.hidden_size, self.reduction,
            self.temperature
        )
    }
}

fn mode_label(config: &RunConfig) -> String {
    match config.stage {
        Stage::Pretrain => "pretrain".to_string(),
        Stage::Finetune => config.mode.to_string(),
        Stage::Baseline => config
            .scheme
            .map(|s| s.to_string())
            .unwrap_or_else(|| "baseline".to_string()),
    }
}

/// Default checkpoint directory for a pretrained encoder under `out`.
pub fn checkpoint_path(out: &Path, config: &RunConfig, seed: u64) -> PathBuf {
    out.join("checkpoints").join(format!(
        "{}_{}_h{}_T{}_seed{}",
        config.dataset, config.task, config.hidden_size, config.temperature, seed
    ))
}

/// Load the patch set named by the config: an existing patch directory, or
/// a cube + ground-truth pair sampled on the fly.
pub fn load_patches(config: &RunConfig) -> Result<PatchSet> {
    if let Some(dir) = &config.patches_dir {
        return dataset::load_patchset(dir);
    }
    match (&config.data, &config.gt) {
        (Some(data), Some(gt)) => {
            let cube = dataset::load_cube(data, gt)?;
            dataset::sample_patches(&cube, config.patch_size, config.task)
        }
        _ => Err(Error::Config(
            "config needs either patches_dir or data + gt paths".into(),
        )),
    }
}

/// Normalize with band stats from the classifier training split.
pub fn normalized_for_seed(set: &PatchSet, config: &RunConfig, seed: u64) -> Result<(PatchSet, SplitPlan)> {
    let plan = dataset::make_splits(set.len(), seed, config.reduction)?;
    let stats = dataset::compute_band_stats(set, &plan.cls_train)?;
    Ok((dataset::normalize(set, &stats), plan))
}

/// Execute the configured stage once per seed, persist checkpoints and a
/// results record under `out`, and return the per-seed metrics plus mean.
pub fn run_experiment(config: &RunConfig, out: &Path) -> Result<RunMetrics> {
    config.validate()?;
    let set = load_patches(config)?;
    std::fs::create_dir_all(out)?;

    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let start = Instant::now();
        let (normalized, plan) = normalized_for_seed(&set, config, seed)?;
        let test_digest = dataset::test_index_digest(&plan);
        let (accuracy, best_val, best_epoch) = match config.stage {
            Stage::Pretrain => {
                let outcome = pretrain(&normalized, &plan, config, seed)?;
                let dir = checkpoint_path(out, config, seed);
                let named: Vec<(&'static str, &Tensor)> = outcome
                    .encoder
                    .named_tensors()
                    .into_iter()
                    .chain(outcome.projection.named_tensors())
                    .collect();
                let manifest = manifest_for(&named, config, seed, outcome.best_epoch, set.bands);
                save_checkpoint(&dir, &named, &manifest)?;
                // Pretraining has no accuracy; the contrastive validation
                // loss is recorded as the val metric and accuracy stays 0.
                (0.0, outcome.best_val_loss, outcome.best_epoch)
            }
            Stage::Finetune => {
                let ckpt_dir = config
                    .checkpoint_dir
                    .clone()
                    .unwrap_or_else(|| checkpoint_path(out, config, seed));
                let (encoder, manifest) = load_encoder(&ckpt_dir)?;
                if manifest.hidden_size != config.hidden_size
                    || manifest.bands != set.bands
                    || manifest.patch_size != set.patch_size
                {
                    return Err(Error::CheckpointMismatch(format!(
                        "checkpoint (h={}, bands={}, p={}) vs config (h={}, bands={}, p={})",
                        manifest.hidden_size,
                        manifest.bands,
                        manifest.patch_size,
                        config.hidden_size,
                        set.bands,
                        set.patch_size
                    )));
                }
                let outcome =
                    classifier::finetune(&encoder, None, config.mode, &normalized, &plan, config, seed)?;
                let dir = out.join("models").join(format!(
                    "{}_seed{seed}",
                    RunMetrics {
                        dataset: config.dataset.clone(),
                        task: config.task,
                        stage: config.stage,
                        mode: mode_label(config),
                        hidden_size: config.hidden_size,
                        reduction: config.reduction,
                        temperature: config.temperature,
                        metric: String::new(),
                        per_seed: vec![],
                        mean_accuracy: 0.0,
                        config_hash: String::new(),
                    }
                    .run_name()
                ));
                let named: Vec<(&'static str, &Tensor)> = outcome
                    .encoder
                    .named_tensors()
                    .into_iter()
                    .chain(outcome.head.named_tensors())
                    .collect();
                let manifest = manifest_for(&named, config, seed, outcome.best_epoch, set.bands);
                save_checkpoint(&dir, &named, &manifest)?;
                (outcome.test_accuracy, outcome.best_val_metric, outcome.best_epoch)
            }
            Stage::Baseline => {
                let scheme = config
                    .scheme
                    .ok_or_else(|| Error::Config("baseline stage needs a scheme".into()))?;
                let outcome = baselines::train_scheme(scheme, &normalized, &plan, config, seed)?;
                (outcome.test_accuracy, outcome.best_val_metric, outcome.best_epoch)
            }
        };
        per_seed.push(SeedMetrics {
            seed,
            accuracy,
            best_val_metric: best_val,
            best_epoch,
            wall_time_s: start.elapsed().as_secs_f64(),
            test_digest,
        });
    }

    let mean_accuracy =
        per_seed.iter().map(|s| s.accuracy).sum::<f64>() / per_seed.len() as f64;
    let metrics = RunMetrics {
        dataset: config.dataset.clone(),
        task: config.task,
        stage: config.stage,
        mode: mode_label(config),
        hidden_size: config.hidden_size,
        reduction: config.reduction,
        temperature: config.temperature,
        metric: match config.task {
            Task::Multi => "jaccard".into(),
            Task::Single => "overall".into(),
        },
        per_seed,
        mean_accuracy,
        config_hash: config.hash(),
    };
    eval::persist_run(&metrics, config, out)?;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = Tensor::scalar(1.5);
        let mut adam = AdamState::new(&[1]);
        adam.step(&mut [&mut p], &[&[0.0]], 0.1, 0.0).unwrap();
        assert_eq!(p.data(), &[1.5]);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // With bias correction, |delta| ~= lr for any nonzero gradient at t=1.
        let mut p = Tensor::scalar(0.7);
        let mut adam = AdamState::new(&[1]);
        adam.step(&mut [&mut p], &[&[0.3]], 0.05, 0.0).unwrap();
        let delta = (0.7 - p.data()[0]).abs();
        assert!((delta - 0.05).abs() < 1e-6, "delta {delta}");
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // Independent reference recurrence cross-check on f(x) = x^2.
        let mut p = Tensor::scalar(1.0);
        let mut adam = AdamState::new(&[1]);
        let mut reference = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = 2.0 * p.data()[0];
            adam.step(&mut [&mut p], &[&[g]], 0.1, 0.0).unwrap();
            let gr = 2.0 * reference;
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            reference -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!(p.data()[0].abs() < 0.2, "theta {}", p.data()[0]);
        assert!((p.data()[0] as f64 - reference).abs() < 1e-3);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = Tensor::scalar(1.0);
        let mut adam = AdamState::new(&[1]);
        assert!(adam.step(&mut [&mut p], &[&[f32::NAN]], 0.1, 0.0).is_err());
    }

    #[test]
    fn lr_schedule_values() {
        let s = LrSchedule {
            base: 1e-3,
            step: 10,
            gamma: 0.9,
        };
        assert_eq!(lr_at(&s, 0), 1e-3);
        assert!((lr_at(&s, 10) - 9e-4).abs() < 1e-10);
        assert!((lr_at(&s, 25) - 1e-3 * 0.81).abs() < 1e-9);
    }

    #[test]
    fn lr_schedule_non_increasing() {
        let s = LrSchedule {
            base: 0.01,
            step: 3,
            gamma: 0.6,
        };
        let mut prev = f32::INFINITY;
        for epoch in 0..40 {
            let lr = lr_at(&s, epoch);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let toml_text = r#"
            dataset = "synthetic"
            task = "single"
            stage = "finetune"
            epochs = 5
            batch_size = 16
            lr = 1e-3
            gamma = 0.9
            lr_step = 10
        "#;
        let config: RunConfig = toml::from_str(toml_text).unwrap();
        config.validate().unwrap();
        assert_eq!(config.hidden_size, 32);
        assert_eq!(config.temperature, 0.1);
        assert_eq!(config.seeds, vec![1, 2, 3]);

        let bad: RunConfig = toml::from_str(&toml_text.replace("lr = 1e-3", "lr = -1.0")).unwrap();
        assert!(bad.validate().is_err());
    }
}
