//! The experiment loop: dense training, then prune → retrain → measure until
//! terminal sparsity, with persistent artifacts after every iteration so a
//! killed run can resume and reproduce the uninterrupted metrics exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{DataSource, ExperimentConfig};
use super::metrics::{read_metrics, write_metrics, MetricsRow};
use super::{atomic_write, derive_seed, io_err, sha256_hex, HarnessError};
use crate::data::{
    compute_normalization, inject_symmetric_noise, load_cifar, load_external_labels,
    make_synthetic, split, CifarVariant, Dataset, Flip, NoiseSpec, Normalization,
};
use crate::detector::{
    bump_magnitude, detect_with_smoothing, segment_phases, PhaseSegmentation, SddState,
};
use crate::optim::{lr_at, Optimizer};
use crate::params::{GradSet, ParamSet};
use crate::pruning::{
    apply_mask, magnitude_prune_count, magnitude_prune_layer_count, mask_gradients, PruneMask,
    PruneScope,
};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vit::{init_params, insert_params, prunable_names, vit_forward};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const TEST_METRICS_FILE: &str = "test_metrics.csv";
pub const FLIPS_FILE: &str = "flips.json";
pub const VERDICT_FILE: &str = "verdict.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const INIT_CHECKPOINT: &str = "init.ckpt";

const EPOCHS_HEADER: &str = "run_id,prune_iter,epoch,lr_last,train_loss_running,train_acc_running";
const TEST_HEADER: &str = "run_id,prune_iter,sparsity,test_acc,test_loss";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
    Interrupted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedSeeds {
    pub master: u64,
    pub split: u64,
    pub noise: u64,
    pub init: u64,
    pub train_base: u64,
}

impl DerivedSeeds {
    fn new(config: &ExperimentConfig) -> Self {
        let master = config.seed;
        Self {
            master,
            split: derive_seed(master, "split", 0),
            noise: derive_seed(master, "noise", 0),
            init: derive_seed(master, "init", 0),
            train_base: config.train.seed.unwrap_or_else(|| derive_seed(master, "train", 0)),
        }
    }
}

/// Checkpoint bookkeeping; `file == None` marks a retention-pruned iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointNote {
    pub iter: usize,
    pub file: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub status: RunStatus,
    #[serde(default)]
    pub note: Option<String>,
    pub deterministic: bool,
    pub seeds: DerivedSeeds,
    pub normalization: Normalization,
    pub train_labels_hash: String,
    pub flip_count: usize,
    pub prunable_total: usize,
    pub planned_iterations: usize,
    pub iterations_done: usize,
    pub checkpoints: Vec<CheckpointNote>,
    pub timings_sec: Vec<f64>,
    pub wall_clock_sec: f64,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictFile {
    pub sdd: bool,
    pub trigger_index: Option<usize>,
    pub trigger_sparsity: Option<f64>,
    pub delta: f64,
    pub smoothing_window: usize,
    pub dense_ref: f64,
    pub phases: PhaseSegmentation,
    pub bump_val_loss: f64,
}

#[derive(Debug)]
pub struct RunRecord {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub curve: Vec<MetricsRow>,
    pub verdict: Option<VerdictFile>,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub deterministic: bool,
    pub quiet: bool,
    /// Test hook: stop (status `interrupted`) once this many metric rows exist.
    pub abort_after_iterations: Option<usize>,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self { out_dir: out_dir.into(), deterministic: true, quiet: false, abort_after_iterations: None }
    }
}

struct Prepared {
    train_images: Vec<f32>,
    train_labels: Vec<usize>,
    val_images: Vec<f32>,
    val_labels: Vec<usize>,
    test: Option<(Vec<f32>, Vec<usize>)>,
    normalization: Normalization,
    noise: NoiseSpec,
    labels_hash: String,
    pix: usize,
}

fn hash_labels(labels: &[usize]) -> String {
    let mut bytes = Vec::with_capacity(labels.len() * 8);
    for &l in labels {
        bytes.extend_from_slice(&(l as u64).to_le_bytes());
    }
    sha256_hex(&bytes)
}

fn concat_datasets(mut parts: Vec<Dataset>) -> Dataset {
    let mut first = parts.remove(0);
    for p in parts {
        first.images.extend_from_slice(&p.images);
        first.labels.extend_from_slice(&p.labels);
        first.n += p.n;
    }
    first
}

fn load_source(config: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>), HarnessError> {
    match &config.data.source {
        DataSource::Synthetic { spec } => Ok((make_synthetic(spec)?, None)),
        DataSource::Cifar10 { train_files, test_file } => {
            let parts = train_files
                .iter()
                .map(|p| load_cifar(p, CifarVariant::Cifar10))
                .collect::<Result<Vec<_>, _>>()?;
            let test = test_file
                .as_ref()
                .map(|p| load_cifar(p, CifarVariant::Cifar10))
                .transpose()?;
            Ok((concat_datasets(parts), test))
        }
        DataSource::Cifar100 { train_files, test_file } => {
            let parts = train_files
                .iter()
                .map(|p| load_cifar(p, CifarVariant::Cifar100))
                .collect::<Result<Vec<_>, _>>()?;
            let test = test_file
                .as_ref()
                .map(|p| load_cifar(p, CifarVariant::Cifar100))
                .transpose()?;
            Ok((concat_datasets(parts), test))
        }
    }
}

fn normalize_images(ds: &Dataset, norm: &Normalization) -> Vec<f32> {
    let plane = ds.height * ds.width;
    let mut out = Vec::with_capacity(ds.images.len());
    for i in 0..ds.n {
        let img = ds.image(i);
        for c in 0..ds.channels {
            let (m, s) = (norm.mean[c], norm.std[c]);
            out.extend(img[c * plane..(c + 1) * plane].iter().map(|&p| (p - m) / s));
        }
    }
    out
}

/// Build the training inputs. `reuse_noise` replays a persisted flip record
/// (resume path) instead of regenerating it.
fn prepare(
    config: &ExperimentConfig,
    seeds: &DerivedSeeds,
    reuse_noise: Option<NoiseSpec>,
) -> Result<Prepared, HarnessError> {
    let (full, test) = load_source(config)?;
    let (train, val) = split(&full, config.data.val_fraction, seeds.split)?;
    let normalization = compute_normalization(&train);

    let (train_labels, noise) = match reuse_noise {
        Some(spec) => {
            let mut labels = train.labels.clone();
            spec.apply(&mut labels)?;
            (labels, spec)
        }
        None => match &config.noise.external_labels {
            Some(path) => {
                let labels = load_external_labels(path, &train)?;
                let flips: Vec<Flip> = train
                    .labels
                    .iter()
                    .zip(&labels)
                    .enumerate()
                    .filter(|(_, (&a, &b))| a != b)
                    .map(|(index, (&original, &new_label))| Flip { index, original, new_label })
                    .collect();
                let epsilon = flips.len() as f64 / labels.len().max(1) as f64;
                (labels, NoiseSpec { epsilon, seed: 0, flips })
            }
            None => {
                let (labels, spec) = inject_symmetric_noise(
                    &train.labels,
                    config.noise.epsilon,
                    train.num_classes,
                    seeds.noise,
                )?;
                (labels, spec)
            }
        },
    };

    let labels_hash = hash_labels(&train_labels);
    let pix = train.pixels_per_image();
    Ok(Prepared {
        train_images: normalize_images(&train, &normalization),
        train_labels,
        val_images: normalize_images(&val, &normalization),
        val_labels: val.labels.clone(),
        test: test.map(|t| (normalize_images(&t, &normalization), t.labels.clone())),
        normalization,
        noise,
        labels_hash,
        pix,
    })
}

fn gather_batch(
    config: &ExperimentConfig,
    images: &[f32],
    labels: &[usize],
    pix: usize,
    indices: &[usize],
) -> (Tensor<f32>, Vec<usize>) {
    let m = &config.model;
    let mut data = Vec::with_capacity(indices.len() * pix);
    let mut batch_labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(&images[i * pix..(i + 1) * pix]);
        batch_labels.push(labels[i]);
    }
    let tensor = Tensor::new(
        vec![indices.len(), m.channels, m.image_size, m.image_size],
        data,
    )
    .expect("batch extents consistent");
    (tensor, batch_labels)
}

/// Correct count and summed cross-entropy straight from logits (f64 math;
/// used for reporting only, training loss comes from the tape).
fn metrics_from_logits(logits: &Tensor<f32>, labels: &[usize]) -> (usize, f64) {
    let k = logits.cols();
    let mut correct = 0;
    let mut loss_sum = 0.0f64;
    for (row, &label) in labels.iter().enumerate() {
        let r = &logits.data()[row * k..(row + 1) * k];
        let mut best = 0;
        let mut max = r[0];
        for (j, &v) in r.iter().enumerate() {
            if v > max {
                max = v;
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
        let max = max as f64;
        let lse: f64 = r.iter().map(|&v| ((v as f64) - max).exp()).sum::<f64>().ln() + max;
        loss_sum += lse - r[label] as f64;
    }
    (correct, loss_sum)
}

const EVAL_BATCH: usize = 256;

fn evaluate(
    config: &ExperimentConfig,
    params: &ParamSet<f32>,
    images: &[f32],
    labels: &[usize],
    pix: usize,
) -> Result<(f64, f64), HarnessError> {
    let n = labels.len();
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (batch, batch_labels) = gather_batch(config, images, labels, pix, chunk);
        let mut tape = Tape::new();
        let vars = insert_params(&mut tape, params, false)?;
        let out = vit_forward(&mut tape, &config.model, &vars, &batch)?;
        let (c, l) = metrics_from_logits(tape.value(out), &batch_labels);
        correct += c;
        loss_sum += l;
    }
    Ok((correct as f64 / n as f64, loss_sum / n as f64))
}

/// One full training round under the run policy; optimizer state starts
/// fresh and the schedule restarts. Returns the last learning rate used.
#[allow(clippy::too_many_arguments)]
fn train_round(
    config: &ExperimentConfig,
    params: &mut ParamSet<f32>,
    mask: &PruneMask,
    prepared: &Prepared,
    round: usize,
    train_base: u64,
    run_id: &str,
    epoch_log: &mut String,
) -> Result<f64, HarnessError> {
    let policy = &config.train;
    let n = prepared.train_labels.len();
    let steps_per_epoch = n.div_ceil(policy.batch_size);
    let total_steps = policy.epochs * steps_per_epoch;
    let mut optimizer = Optimizer::<f32>::new(policy);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train_base, "round", round as u64));
    let mut lr = policy.base_lr;
    let mut step = 0usize;

    for epoch in 0..policy.epochs {
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        let mut running_loss = 0.0f64;
        let mut running_correct = 0usize;
        for chunk in indices.chunks(policy.batch_size) {
            lr = lr_at(policy, step, total_steps, epoch)?;
            let (batch, labels) =
                gather_batch(config, &prepared.train_images, &prepared.train_labels, prepared.pix, chunk);
            let mut tape = Tape::new();
            let vars = insert_params(&mut tape, params, true)?;
            let logits = vit_forward(&mut tape, &config.model, &vars, &batch)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let loss_val = tape.value(loss).item() as f64;
            if !loss_val.is_finite() {
                return Err(HarnessError::NanLoss { round, step });
            }
            let (c, _) = metrics_from_logits(tape.value(logits), &labels);
            running_correct += c;
            running_loss += loss_val * labels.len() as f64;

            tape.backward(loss)?;
            let mut grads = GradSet::new();
            for (name, var) in vars.iter() {
                if let Some(g) = tape.grad(*var) {
                    grads.insert(name.clone(), g.to_vec());
                }
            }
            mask_gradients(&mut grads, mask);
            optimizer.step(params, &grads, lr, policy.lambda, &policy.decay_exclude)?;
            apply_mask(params, mask);
            step += 1;
        }
        epoch_log.push_str(&format!(
            "{run_id},{round},{epoch},{lr},{},{}\n",
            running_loss / n as f64,
            running_correct as f64 / n as f64
        ));
    }
    Ok(lr)
}

struct Driver<'a> {
    config: &'a ExperimentConfig,
    opts: &'a RunOptions,
    run_dir: PathBuf,
    prepared: Prepared,
    manifest: RunManifest,
    params: ParamSet<f32>,
    mask: PruneMask,
    curve: Vec<MetricsRow>,
    epoch_log: String,
    test_log: String,
    online: SddState,
}

impl<'a> Driver<'a> {
    fn write_manifest(&mut self) -> Result<(), HarnessError> {
        let path = self.run_dir.join(MANIFEST_FILE);
        self.manifest.wall_clock_sec = self.manifest.timings_sec.iter().sum();
        let json = serde_json::to_vec_pretty(&self.manifest)
            .map_err(|e| HarnessError::Json { path: path.display().to_string(), source: e })?;
        atomic_write(&path, &json)
    }

    fn checkpoint_path(&self, iter: usize) -> PathBuf {
        self.run_dir.join(CHECKPOINT_DIR).join(format!("iter_{iter:04}.ckpt"))
    }

    fn save_iteration_checkpoint(&mut self, iter: usize) -> Result<(), HarnessError> {
        let path = self.checkpoint_path(iter);
        save_checkpoint(&path, &self.params, &self.mask)?;
        self.manifest.checkpoints.push(CheckpointNote {
            iter,
            file: Some(path.file_name().unwrap().to_string_lossy().into_owned()),
        });
        // retention: keep iteration 0, every Nth, and the latest
        let every = self.config.checkpoint_every.max(1);
        let latest = iter;
        for note in &mut self.manifest.checkpoints {
            let keep = note.iter == 0 || note.iter == latest || note.iter % every == 0;
            if !keep {
                if let Some(file) = note.file.take() {
                    let _ = std::fs::remove_file(self.run_dir.join(CHECKPOINT_DIR).join(file));
                }
            }
        }
        Ok(())
    }

    fn persist_round(&mut self) -> Result<(), HarnessError> {
        write_metrics(&self.run_dir.join(METRICS_FILE), &self.curve)?;
        let mut epochs = String::from(EPOCHS_HEADER);
        epochs.push('\n');
        epochs.push_str(&self.epoch_log);
        atomic_write(&self.run_dir.join(EPOCHS_FILE), epochs.as_bytes())?;
        if self.prepared.test.is_some() {
            let mut t = String::from(TEST_HEADER);
            t.push('\n');
            t.push_str(&self.test_log);
            atomic_write(&self.run_dir.join(TEST_METRICS_FILE), t.as_bytes())?;
        }
        Ok(())
    }

    fn record(self, verdict: Option<VerdictFile>) -> RunRecord {
        RunRecord { run_dir: self.run_dir, manifest: self.manifest, curve: self.curve, verdict }
    }

    /// Run rounds starting at `start_round` until terminal sparsity.
    fn drive(mut self, start_round: usize) -> Result<RunRecord, HarnessError> {
        enum LoopEnd {
            Done,
            Interrupted,
        }
        let schedule = self.config.prune.clone();
        let total = self.mask.total();
        let run_id = self.manifest.run_id.clone();
        let mut round = start_round;

        let outcome: Result<LoopEnd, HarnessError> = (|| {
            loop {
                // a resumed run may already sit at terminal sparsity
                if !self.curve.is_empty() && self.mask.sparsity() >= schedule.zeta_end {
                    break;
                }
                if round > 0 {
                    let survivors = self.mask.survivors();
                    let pruned = match schedule.scope {
                        PruneScope::Global => {
                            let target = schedule.target_survivors(total, round);
                            let count = survivors.saturating_sub(target);
                            if count > 0 {
                                magnitude_prune_count(&mut self.params, &mut self.mask, count)?
                            } else {
                                0
                            }
                        }
                        PruneScope::PerLayer => {
                            let mut counts = BTreeMap::new();
                            for (name, bits) in self.mask.iter() {
                                let t = schedule.target_survivors(bits.len(), round);
                                let alive = bits.iter().filter(|&&b| b == 1).count();
                                counts.insert(name.clone(), alive.saturating_sub(t));
                            }
                            let mut pruned = 0;
                            for (name, count) in counts {
                                pruned += magnitude_prune_layer_count(
                                    &mut self.params,
                                    &mut self.mask,
                                    &name,
                                    count,
                                )?;
                            }
                            pruned
                        }
                    };
                    if pruned == 0 {
                        self.manifest.note =
                            Some("pruning stalled before zeta_end (no weights left to remove)".into());
                        break;
                    }
                }

                // every retraining round must consume the persisted noisy labels
                if hash_labels(&self.prepared.train_labels) != self.manifest.train_labels_hash {
                    return Err(HarnessError::LabelsDrift { round });
                }

                let round_start = Instant::now();
                let lr_final = train_round(
                    self.config,
                    &mut self.params,
                    &self.mask,
                    &self.prepared,
                    round,
                    self.manifest.seeds.train_base,
                    &run_id,
                    &mut self.epoch_log,
                )?;
                let (train_acc, train_loss) = evaluate(
                    self.config,
                    &self.params,
                    &self.prepared.train_images,
                    &self.prepared.train_labels,
                    self.prepared.pix,
                )?;
                let (val_acc, val_loss) = evaluate(
                    self.config,
                    &self.params,
                    &self.prepared.val_images,
                    &self.prepared.val_labels,
                    self.prepared.pix,
                )?;
                let sparsity = self.mask.sparsity();
                self.curve.push(MetricsRow {
                    run_id: run_id.clone(),
                    prune_iter: round,
                    sparsity,
                    train_acc,
                    train_loss,
                    val_acc,
                    val_loss,
                    epochs_trained: self.config.train.epochs,
                    lr_final,
                    seed: self.manifest.seeds.master,
                });
                if let Some((images, labels)) = &self.prepared.test {
                    let (test_acc, test_loss) =
                        evaluate(self.config, &self.params, images, labels, self.prepared.pix)?;
                    self.test_log.push_str(&format!(
                        "{run_id},{round},{sparsity},{test_acc},{test_loss}\n"
                    ));
                }

                let was_sdd = self.online.sdd;
                self.online = self.online.step(val_acc);
                if !self.opts.quiet {
                    let flag = if self.online.sdd && !was_sdd { "  <- SDD flagged" } else { "" };
                    eprintln!(
                        "[{run_id}] iter {round:>3}  zeta={sparsity:.4}  train_acc={train_acc:.4}  val_acc={val_acc:.4}  val_loss={val_loss:.4}  ({:.1}s){flag}",
                        round_start.elapsed().as_secs_f64()
                    );
                }

                self.manifest.timings_sec.push(round_start.elapsed().as_secs_f64());
                self.manifest.iterations_done = self.curve.len();
                self.persist_round()?;
                self.save_iteration_checkpoint(round)?;
                self.manifest.status = RunStatus::Running;
                self.write_manifest()?;

                if let Some(limit) = self.opts.abort_after_iterations {
                    if self.curve.len() >= limit {
                        return Ok(LoopEnd::Interrupted);
                    }
                }
                if self.mask.sparsity() >= schedule.zeta_end {
                    break;
                }
                round += 1;
            }
            Ok(LoopEnd::Done)
        })();

        match outcome {
            Ok(LoopEnd::Done) => {}
            Ok(LoopEnd::Interrupted) => {
                self.manifest.status = RunStatus::Interrupted;
                self.manifest.note = Some("aborted by request".into());
                self.write_manifest()?;
                return Ok(self.record(None));
            }
            Err(e) => {
                self.manifest.status = RunStatus::Failed;
                self.manifest.note = Some(e.to_string());
                self.write_manifest()?;
                return Err(e);
            }
        }

        // final verdict: offline detection with configured smoothing
        let vals: Vec<f64> = self.curve.iter().map(|r| r.val_acc).collect();
        let losses: Vec<f64> = self.curve.iter().map(|r| r.val_loss).collect();
        let verdict = detect_with_smoothing(
            &vals,
            self.config.detect.delta,
            self.config.detect.smoothing_window,
        );
        let dense_ref = vals.first().copied().unwrap_or(0.0);
        let phases = segment_phases(&vals, self.config.detect.delta, dense_ref);
        let file = VerdictFile {
            sdd: verdict.sdd,
            trigger_index: verdict.trigger_index,
            trigger_sparsity: verdict.trigger_index.map(|i| self.curve[i].sparsity),
            delta: verdict.delta,
            smoothing_window: verdict.smoothing_window,
            dense_ref,
            phases,
            bump_val_loss: bump_magnitude(&losses),
        };
        let verdict_path = self.run_dir.join(VERDICT_FILE);
        let json = serde_json::to_vec_pretty(&file)
            .map_err(|e| HarnessError::Json { path: verdict_path.display().to_string(), source: e })?;
        atomic_write(&verdict_path, &json)?;

        self.manifest.status = RunStatus::Completed;
        self.manifest.wall_clock_sec = self.manifest.timings_sec.iter().sum();
        self.write_manifest()?;
        Ok(self.record(Some(file)))
    }
}

fn read_manifest(run_dir: &Path) -> Result<RunManifest, HarnessError> {
    let path = run_dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(HarnessError::MissingManifest { dir: run_dir.display().to_string() });
    }
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| HarnessError::Json { path: path.display().to_string(), source: e })
}

fn read_verdict(run_dir: &Path) -> Result<Option<VerdictFile>, HarnessError> {
    let path = run_dir.join(VERDICT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    Ok(Some(serde_json::from_str(&text).map_err(|e| HarnessError::Json {
        path: path.display().to_string(),
        source: e,
    })?))
}

/// Load a completed or partial run from disk without executing anything.
pub fn load_record(run_dir: &Path) -> Result<RunRecord, HarnessError> {
    let manifest = read_manifest(run_dir)?;
    let metrics_path = run_dir.join(METRICS_FILE);
    let curve = if metrics_path.exists() { read_metrics(&metrics_path)? } else { Vec::new() };
    let verdict = read_verdict(run_dir)?;
    Ok(RunRecord { run_dir: run_dir.to_path_buf(), manifest, curve, verdict })
}

/// Execute a full experiment into a fresh directory.
pub fn run_experiment(
    config: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<RunRecord, HarnessError> {
    config.validate()?;
    let run_dir = opts.out_dir.clone();
    if run_dir.join(MANIFEST_FILE).exists() {
        return Err(HarnessError::Config(format!(
            "{} already contains a run; use resume or a fresh directory",
            run_dir.display()
        )));
    }
    std::fs::create_dir_all(run_dir.join(CHECKPOINT_DIR))
        .map_err(|e| io_err(&run_dir, e))?;

    let seeds = DerivedSeeds::new(config);
    let prepared = prepare(config, &seeds, None)?;
    let flips_json = serde_json::to_vec_pretty(&prepared.noise)
        .map_err(|e| HarnessError::Json { path: FLIPS_FILE.into(), source: e })?;
    atomic_write(&run_dir.join(FLIPS_FILE), &flips_json)?;

    let params = init_params::<f32>(&config.model, seeds.init)?;
    let mask = PruneMask::new(&params, &prunable_names(&config.model))?;
    save_checkpoint(&run_dir.join(CHECKPOINT_DIR).join(INIT_CHECKPOINT), &params, &mask)?;

    let config_hash = config.hash();
    let run_id = format!("{}-s{}", &config_hash[..12], config.seed);
    let manifest = RunManifest {
        run_id,
        config_hash,
        status: RunStatus::Running,
        note: None,
        deterministic: opts.deterministic,
        seeds,
        normalization: prepared.normalization.clone(),
        train_labels_hash: prepared.labels_hash.clone(),
        flip_count: prepared.noise.flips.len(),
        prunable_total: mask.total(),
        planned_iterations: config.prune.planned_rounds(),
        iterations_done: 0,
        checkpoints: Vec::new(),
        timings_sec: Vec::new(),
        wall_clock_sec: 0.0,
        config: config.clone(),
    };

    let mut driver = Driver {
        config,
        opts,
        run_dir,
        prepared,
        manifest,
        params,
        mask,
        curve: Vec::new(),
        epoch_log: String::new(),
        test_log: String::new(),
        online: SddState::new(config.detect.delta),
    };
    driver.write_manifest()?;
    driver.drive(0)
}

/// Continue an interrupted run from its last completed iteration. Resuming a
/// completed run is a no-op that returns the stored record.
pub fn resume(run_dir: &Path, quiet: bool) -> Result<RunRecord, HarnessError> {
    let manifest = read_manifest(run_dir)?;
    if manifest.status == RunStatus::Completed {
        return load_record(run_dir);
    }
    let config = manifest.config.clone();
    config.validate()?;

    let flips_path = run_dir.join(FLIPS_FILE);
    let flips_text = std::fs::read_to_string(&flips_path).map_err(|e| io_err(&flips_path, e))?;
    let noise: NoiseSpec = serde_json::from_str(&flips_text)
        .map_err(|e| HarnessError::Json { path: flips_path.display().to_string(), source: e })?;
    let prepared = prepare(&config, &manifest.seeds, Some(noise))?;
    if prepared.labels_hash != manifest.train_labels_hash {
        return Err(HarnessError::LabelsDrift { round: manifest.iterations_done });
    }

    // last iteration with a surviving checkpoint file
    let latest = manifest
        .checkpoints
        .iter()
        .filter(|n| n.file.is_some())
        .map(|n| n.iter)
        .max();
    let (params, mask, start_round, keep_rows) = match latest {
        Some(iter) => {
            let file = manifest
                .checkpoints
                .iter()
                .find(|n| n.iter == iter)
                .and_then(|n| n.file.clone())
                .expect("filtered on file presence");
            let (params, mask) = load_checkpoint(&run_dir.join(CHECKPOINT_DIR).join(file))?;
            (params, mask, iter + 1, iter + 1)
        }
        None => {
            // crashed before the first checkpoint: start over from init
            let params = init_params::<f32>(&config.model, manifest.seeds.init)?;
            let mask = PruneMask::new(&params, &prunable_names(&config.model))?;
            (params, mask, 0, 0)
        }
    };

    let metrics_path = run_dir.join(METRICS_FILE);
    let mut curve = if metrics_path.exists() { read_metrics(&metrics_path)? } else { Vec::new() };
    if curve.len() < keep_rows {
        return Err(HarnessError::Config(format!(
            "{}: metrics has {} rows but checkpoints reach iteration {}",
            run_dir.display(),
            curve.len(),
            keep_rows
        )));
    }
    curve.truncate(keep_rows);

    // rebuild logs and detector state for the kept prefix
    let epoch_path = run_dir.join(EPOCHS_FILE);
    let epoch_log = if epoch_path.exists() {
        let text = std::fs::read_to_string(&epoch_path).map_err(|e| io_err(&epoch_path, e))?;
        let mut body = String::new();
        for line in text.lines().skip(1) {
            let round: Option<usize> =
                line.split(',').nth(1).and_then(|f| f.parse().ok());
            if round.is_some_and(|r| r < start_round) {
                body.push_str(line);
                body.push('\n');
            }
        }
        body
    } else {
        String::new()
    };
    let test_path = run_dir.join(TEST_METRICS_FILE);
    let test_log = if test_path.exists() {
        let text = std::fs::read_to_string(&test_path).map_err(|e| io_err(&test_path, e))?;
        let mut body = String::new();
        for line in text.lines().skip(1) {
            let round: Option<usize> =
                line.split(',').nth(1).and_then(|f| f.parse().ok());
            if round.is_some_and(|r| r < start_round) {
                body.push_str(line);
                body.push('\n');
            }
        }
        body
    } else {
        String::new()
    };

    let mut online = SddState::new(config.detect.delta);
    for row in &curve {
        online = online.step(row.val_acc);
    }

    let mut manifest = manifest;
    manifest.status = RunStatus::Running;
    manifest.note = None;
    manifest.iterations_done = curve.len();
    manifest.checkpoints.retain(|n| n.iter < keep_rows);
    manifest.timings_sec.truncate(keep_rows);

    let opts = RunOptions { out_dir: run_dir.to_path_buf(), deterministic: manifest.deterministic, quiet, abort_after_iterations: None };
    let driver = Driver {
        config: &config,
        opts: &opts,
        run_dir: run_dir.to_path_buf(),
        prepared,
        manifest,
        params,
        mask,
        curve,
        epoch_log,
        test_log,
        online,
    };
    let record = driver.drive(start_round)?;
    Ok(record)
}
