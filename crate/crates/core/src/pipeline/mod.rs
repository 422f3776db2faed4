//! End-to-end experiment orchestration: data generation, the five-model
//! training matrix, evaluation, representation comparison, and report
//! assembly, all driven by one JSON config and one master seed.
//!
//! The model matrix is:
//!
//! * `teacher` — full-size model, supervised on the reading task.
//! * `small` — narrow student, supervised from scratch.
//! * `small-distilled` — narrow student distilled from the teacher.
//! * `pruned` — the trained teacher with its smallest-magnitude weights
//!   zeroed; no further training.
//! * `hole` — the pruned teacher distilled from the original teacher
//!   with the zero pattern held fixed.
//!
//! Every variant is then fine-tuned on the key-information-extraction
//! task from its upstream checkpoint (masks kept where they exist).
//!
//! All commands are deterministic given the config: two runs into two
//! fresh output directories produce bit-identical checkpoints, CSVs, and
//! ledgers (with `zero_timings`, the default, keeping wall-clock noise
//! out of the files).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::cka::layerwise_table;
use crate::distill::{self, DistillConfig};
use crate::docgen::{gen_split, manifest_records, write_manifest, GenConfig, Split, Task};
use crate::model::{capture_activations, Model, ModelConfig, Variant};
use crate::prune::{apply_masks, magnitude_mask, report_csv, sparsity_report};
use crate::tokenizer::{Tokenizer, BOS};
use crate::{derive_seed, Error, Result};

mod report;

pub use report::{cmd_report, density_reduction, expected_reduction};

/// One of the five trained-model identities in the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunVariant {
    Teacher,
    Small,
    SmallDistilled,
    Pruned,
    Hole,
}

impl RunVariant {
    pub const ALL: [RunVariant; 5] = [
        RunVariant::Teacher,
        RunVariant::Small,
        RunVariant::SmallDistilled,
        RunVariant::Pruned,
        RunVariant::Hole,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            RunVariant::Teacher => "teacher",
            RunVariant::Small => "small",
            RunVariant::SmallDistilled => "small-distilled",
            RunVariant::Pruned => "pruned",
            RunVariant::Hole => "hole",
        }
    }

    pub fn parse(s: &str) -> Result<RunVariant> {
        RunVariant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| {
                Error::Contract(format!(
                    "unknown variant {s:?}; expected one of teacher, small, small-distilled, pruned, hole"
                ))
            })
    }

    /// Architecture tag stored in this variant's checkpoints.
    pub fn model_variant(self) -> Variant {
        match self {
            RunVariant::Teacher => Variant::Teacher,
            RunVariant::Small | RunVariant::SmallDistilled => Variant::Small,
            RunVariant::Pruned | RunVariant::Hole => Variant::Pruned,
        }
    }
}

impl std::fmt::Display for RunVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Optimization settings shared by all training phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    /// Supervised reading steps (teacher and small baselines).
    pub upstream_steps: usize,
    /// Distillation steps on the reading task (hole, small-distilled).
    pub distill_steps: usize,
    /// Supervised fine-tuning steps on the extraction task.
    pub kie_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub alpha: f64,
    pub temperature: f64,
    pub eval_every: usize,
    pub eval_samples: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            // The reading task has a sharp phase transition (the decoder
            // first learns glyph statistics, then snaps onto the image);
            // at this rate the teacher crosses it near step 1500 and is
            // comfortably converged by 3000.
            upstream_steps: 3000,
            distill_steps: 3000,
            kie_steps: 600,
            batch_size: 8,
            lr: 3e-3,
            warmup_steps: 100,
            alpha: 0.5,
            temperature: 2.0,
            eval_every: 300,
            eval_samples: 32,
        }
    }
}

/// The whole experiment in one structure. A config file may set any
/// subset of fields; everything else takes these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub reading: GenConfig,
    pub kie: GenConfig,
    pub teacher_model: ModelConfig,
    pub small_model: ModelConfig,
    pub train: TrainSection,
    /// Fraction of non-embedding weights zeroed for pruned/hole.
    pub sparsity: f64,
    /// Held-out reading samples used to capture activations.
    pub probe_samples: usize,
    pub master_seed: u64,
    /// Report 0.0 wall times everywhere, making every output file
    /// byte-reproducible. Flip off to measure real durations.
    pub zero_timings: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            reading: GenConfig::reading_default(),
            kie: GenConfig::kie_default(),
            teacher_model: ModelConfig::teacher_default(),
            small_model: ModelConfig::small_default(),
            train: TrainSection::default(),
            // The pruned/hole variants keep 37 of every 140 non-embedding
            // weights, matching the parameter budget the headline
            // reduction figure is quoted against.
            sparsity: 103.0 / 140.0,
            probe_samples: 64,
            master_seed: 7,
            zero_timings: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Contract(format!("experiment config: {msg}")));
        self.reading.validate()?;
        self.kie.validate()?;
        self.teacher_model.validate()?;
        self.small_model.validate()?;
        let vocab = Tokenizer::new().vocab_size();
        for (name, m) in [("teacher", &self.teacher_model), ("small", &self.small_model)] {
            if m.vocab_size != vocab {
                return fail(format!(
                    "{name} model vocabulary {} does not match the tokenizer's {vocab}",
                    m.vocab_size
                ));
            }
            for (task, g) in [(Task::Reading, &self.reading), (Task::Kie, &self.kie)] {
                if (g.image_h, g.image_w) != (m.image_h, m.image_w) {
                    return fail(format!(
                        "{task} pages are {}×{} but the {name} model expects {}×{}",
                        g.image_h, g.image_w, m.image_h, m.image_w
                    ));
                }
                let need = g.max_target_tokens(task) + 1;
                if need > m.max_len {
                    return fail(format!(
                        "{task} targets need up to {need} decoder positions, {name} model has {}",
                        m.max_len
                    ));
                }
            }
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return fail(format!("sparsity {} outside [0,1)", self.sparsity));
        }
        if self.probe_samples < 2 {
            return fail("need at least 2 probe samples".to_string());
        }
        if self.probe_samples > self.reading.test {
            return fail(format!(
                "{} probe samples exceed the reading test split ({})",
                self.probe_samples, self.reading.test
            ));
        }
        Ok(())
    }

    /// Generator settings for one task, with the split seed derived from
    /// both the experiment's master seed and the section's own seed — so
    /// `--seed` replicates the entire experiment, data included.
    pub fn gen_for(&self, task: Task) -> GenConfig {
        let section = match task {
            Task::Reading => &self.reading,
            Task::Kie => &self.kie,
        };
        GenConfig {
            master_seed: derive_seed(self.master_seed, &format!("data/{task}"), section.master_seed),
            ..section.clone()
        }
    }
}

/// Stable output layout under one root directory.
#[derive(Debug, Clone)]
pub struct OutDirs {
    pub root: PathBuf,
}

impl OutDirs {
    pub fn new(root: &Path) -> OutDirs {
        OutDirs { root: root.to_path_buf() }
    }

    pub fn manifest(&self, task: Task, split: Split) -> PathBuf {
        self.root.join("data").join(format!("{task}.{split}.jsonl"))
    }

    pub fn run_dir(&self, v: RunVariant) -> PathBuf {
        self.root.join("runs").join(v.tag())
    }

    pub fn checkpoint(&self, v: RunVariant) -> PathBuf {
        self.run_dir(v).join("model.dnth")
    }

    pub fn best_checkpoint(&self, v: RunVariant) -> PathBuf {
        self.run_dir(v).join("best.dnth")
    }

    pub fn history(&self, v: RunVariant) -> PathBuf {
        self.run_dir(v).join("history.csv")
    }

    pub fn sparsity_csv(&self, v: RunVariant) -> PathBuf {
        self.run_dir(v).join("sparsity.csv")
    }

    pub fn kie_checkpoint(&self, v: RunVariant) -> PathBuf {
        self.run_dir(v).join("kie").join("model.dnth")
    }

    pub fn kie_history(&self, v: RunVariant) -> PathBuf {
        self.run_dir(v).join("kie").join("history.csv")
    }

    pub fn eval_csv(&self, v: RunVariant, task: Task, split: Split) -> PathBuf {
        self.root.join("eval").join(format!("{}.{task}.{split}.csv", v.tag()))
    }

    pub fn cka_csv(&self, a: RunVariant, b: RunVariant) -> PathBuf {
        self.root.join("cka").join(format!("{}_vs_{}.csv", a.tag(), b.tag()))
    }

    pub fn cka_index(&self, a: RunVariant, b: RunVariant) -> PathBuf {
        self.root.join("cka").join(format!("{}_vs_{}.index.txt", a.tag(), b.tag()))
    }

    pub fn ledger(&self) -> PathBuf {
        self.root.join("ledger.json")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Results accumulated across commands, one row per variant. A field is
/// written once; rewriting it with a different value is an error, so a
/// ledger never silently mixes results from different configs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_total: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_nonzero: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upstream_nted: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downstream_nted: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downstream_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cka_vs_teacher: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub rows: IndexMap<String, LedgerRow>,
}

impl RunLedger {
    pub fn load(path: &Path) -> Result<RunLedger> {
        if !path.exists() {
            return Ok(RunLedger::default());
        }
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_text(path, &(text + "\n"))
    }

    pub fn row(&self, v: RunVariant) -> Option<&LedgerRow> {
        self.rows.get(v.tag())
    }

    /// Merge the populated fields of `update` into the variant's row.
    pub fn merge(&mut self, v: RunVariant, update: LedgerRow) -> Result<()> {
        let row = self.rows.entry(v.tag().to_string()).or_default();
        fn set<T: PartialEq + std::fmt::Debug>(
            variant: &str,
            field: &str,
            slot: &mut Option<T>,
            new: Option<T>,
        ) -> Result<()> {
            if let Some(new) = new {
                match slot {
                    Some(old) if *old != new => Err(Error::Contract(format!(
                        "ledger row {variant}/{field} already holds {old:?}, refusing to \
                         overwrite with {new:?}; use a fresh output directory"
                    ))),
                    _ => {
                        *slot = Some(new);
                        Ok(())
                    }
                }
            } else {
                Ok(())
            }
        }
        let tag = v.tag();
        set(tag, "checkpoint", &mut row.checkpoint, update.checkpoint)?;
        set(tag, "params_total", &mut row.params_total, update.params_total)?;
        set(tag, "params_nonzero", &mut row.params_nonzero, update.params_nonzero)?;
        set(tag, "upstream_nted", &mut row.upstream_nted, update.upstream_nted)?;
        set(tag, "downstream_nted", &mut row.downstream_nted, update.downstream_nted)?;
        set(tag, "downstream_f1", &mut row.downstream_f1, update.downstream_f1)?;
        set(tag, "cka_vs_teacher", &mut row.cka_vs_teacher, update.cka_vs_teacher)?;
        set(tag, "wall_time_s", &mut row.wall_time_s, update.wall_time_s)?;
        Ok(())
    }
}

fn update_ledger(dirs: &OutDirs, v: RunVariant, update: LedgerRow) -> Result<()> {
    let path = dirs.ledger();
    let mut ledger = RunLedger::load(&path)?;
    ledger.merge(v, update)?;
    ledger.save(&path)
}

/// Exclusive ownership of a run directory for the duration of a
/// training command; the lock file disappears when the guard drops.
#[derive(Debug)]
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<RunLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Contract(format!(
                "{} exists — another run owns this directory (delete the file if it is stale)",
                path.display()
            ))),
            Err(e) => Err(Error::Io(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Count nonzero values across every tensor, embeddings included.
fn nonzero_total(model: &Model) -> usize {
    model.params.values().flat_map(|t| &t.data).filter(|v| **v != 0.0).count()
}

/// Materialize all six dataset manifests (2 tasks × 3 splits). Rerunning
/// with the same config rewrites identical bytes.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let dirs = OutDirs::new(out);
    for task in [Task::Reading, Task::Kie] {
        for split in Split::ALL {
            let samples = gen_split(&cfg.gen_for(task), task, split)?;
            let records = manifest_records(&samples, task, split);
            write_manifest(&dirs.manifest(task, split), &records)?;
        }
    }
    Ok(())
}

fn load_required(
    path: &Path,
    missing_hint: &str,
) -> Result<(Model, Option<crate::prune::MaskSet>)> {
    if !path.exists() {
        return Err(Error::Contract(format!(
            "no checkpoint at {}; run `docpress train {missing_hint}` first",
            path.display()
        )));
    }
    checkpoint::load(path)
}

fn distill_cfg(cfg: &ExperimentConfig, steps: usize, seed: u64) -> DistillConfig {
    DistillConfig {
        alpha: cfg.train.alpha,
        temperature: cfg.train.temperature,
        steps,
        batch_size: cfg.train.batch_size,
        lr: cfg.train.lr,
        warmup_steps: cfg.train.warmup_steps,
        eval_every: cfg.train.eval_every,
        eval_samples: cfg.train.eval_samples,
        seed,
        zero_timings: cfg.zero_timings,
        masks: None,
    }
}

/// Train one variant: its upstream reading phase, then supervised
/// fine-tuning on the extraction task. Writes checkpoints, histories,
/// and the variant's ledger row.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, variant: RunVariant) -> Result<()> {
    cfg.validate()?;
    let dirs = OutDirs::new(out);
    let _lock = RunLock::acquire(&dirs.run_dir(variant))?;
    let started = Instant::now();
    let ms = cfg.master_seed;

    let reading_gen = cfg.gen_for(Task::Reading);
    let reading_train = gen_split(&reading_gen, Task::Reading, Split::Train)?;
    let reading_val = gen_split(&reading_gen, Task::Reading, Split::Val)?;

    // Upstream phase.
    let (upstream, masks) = match variant {
        RunVariant::Teacher | RunVariant::Small => {
            let (model_cfg, mv) = match variant {
                RunVariant::Teacher => (cfg.teacher_model.clone(), Variant::Teacher),
                _ => (cfg.small_model.clone(), Variant::Small),
            };
            let init = Model::init(model_cfg, mv, derive_seed(ms, "init", variant as u64))?;
            let dc = distill_cfg(cfg, cfg.train.upstream_steps, derive_seed(ms, "upstream", variant as u64));
            let outcome = distill::train(init, None, &reading_train, &reading_val, &dc)?;
            finish_upstream(&dirs, variant, outcome, None)?
        }
        RunVariant::SmallDistilled => {
            let (teacher, _) = load_required(&dirs.checkpoint(RunVariant::Teacher), "teacher")?;
            let init = Model::init(
                cfg.small_model.clone(),
                Variant::Small,
                derive_seed(ms, "init", variant as u64),
            )?;
            let dc = distill_cfg(cfg, cfg.train.distill_steps, derive_seed(ms, "upstream", variant as u64));
            let outcome = distill::train(init, Some(&teacher), &reading_train, &reading_val, &dc)?;
            finish_upstream(&dirs, variant, outcome, None)?
        }
        RunVariant::Pruned => {
            let (teacher, _) = load_required(&dirs.checkpoint(RunVariant::Teacher), "teacher")?;
            let mut model =
                Model::from_params(teacher.config.clone(), Variant::Pruned, teacher.params)?;
            let masks = magnitude_mask(&model, cfg.sparsity)?;
            apply_masks(&mut model, &masks)?;
            checkpoint::save(&dirs.checkpoint(variant), &model, Some(&masks))?;
            write_text(&dirs.sparsity_csv(variant), &report_csv(&sparsity_report(&model, &masks)?))?;
            (model, Some(masks))
        }
        RunVariant::Hole => {
            let (teacher, _) = load_required(&dirs.checkpoint(RunVariant::Teacher), "teacher")?;
            let mut student =
                Model::from_params(teacher.config.clone(), Variant::Pruned, teacher.params.clone())?;
            let masks = magnitude_mask(&student, cfg.sparsity)?;
            apply_masks(&mut student, &masks)?;
            let mut dc = distill_cfg(cfg, cfg.train.distill_steps, derive_seed(ms, "upstream", variant as u64));
            dc.masks = Some(masks.clone());
            let outcome = distill::train(student, Some(&teacher), &reading_train, &reading_val, &dc)?;
            let (model, masks) = finish_upstream(&dirs, variant, outcome, Some(masks))?;
            write_text(
                &dirs.sparsity_csv(variant),
                &report_csv(&sparsity_report(&model, masks.as_ref().unwrap())?),
            )?;
            (model, masks)
        }
    };

    // Downstream phase: supervised fine-tuning from the upstream weights,
    // keeping the sparsity pattern where one exists.
    let kie_gen = cfg.gen_for(Task::Kie);
    let kie_train = gen_split(&kie_gen, Task::Kie, Split::Train)?;
    let kie_val = gen_split(&kie_gen, Task::Kie, Split::Val)?;
    let student = Model::from_params(upstream.config.clone(), upstream.variant, upstream.params.clone())?;
    let mut dc = distill_cfg(cfg, cfg.train.kie_steps, derive_seed(ms, "kie", variant as u64));
    dc.masks = masks.clone();
    let outcome = distill::train(student, None, &kie_train, &kie_val, &dc)?;
    checkpoint::save(&dirs.kie_checkpoint(variant), &outcome.model, masks.as_ref())?;
    write_text(&dirs.kie_history(variant), &outcome.history.to_csv())?;

    let counts = upstream.count_params();
    update_ledger(
        &dirs,
        variant,
        LedgerRow {
            checkpoint: Some(format!("runs/{}/model.dnth", variant.tag())),
            params_total: Some(counts.total),
            params_nonzero: Some(nonzero_total(&upstream)),
            wall_time_s: Some(if cfg.zero_timings { 0.0 } else { started.elapsed().as_secs_f64() }),
            ..LedgerRow::default()
        },
    )
}

/// Save a finished upstream run (final + best checkpoints, history CSV)
/// and hand the final model back for the downstream phase.
fn finish_upstream(
    dirs: &OutDirs,
    variant: RunVariant,
    outcome: distill::TrainOutcome,
    masks: Option<crate::prune::MaskSet>,
) -> Result<(Model, Option<crate::prune::MaskSet>)> {
    checkpoint::save(&dirs.checkpoint(variant), &outcome.model, masks.as_ref())?;
    if let Some(best) = &outcome.best {
        let snapshot = Model::from_params(
            outcome.model.config.clone(),
            outcome.model.variant,
            best.params.clone(),
        )?;
        checkpoint::save(&dirs.best_checkpoint(variant), &snapshot, masks.as_ref())?;
    }
    write_text(&dirs.history(variant), &outcome.history.to_csv())?;
    Ok((outcome.model, masks))
}

/// Score one variant's checkpoint on one split. Writes the per-sample
/// CSV; test-split results also land in the ledger (reading fills the
/// upstream column, extraction the downstream ones).
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    out: &Path,
    variant: RunVariant,
    task: Task,
    split: Split,
) -> Result<distill::EvalReport> {
    cfg.validate()?;
    let dirs = OutDirs::new(out);
    let ckpt = match task {
        Task::Reading => dirs.checkpoint(variant),
        Task::Kie => dirs.kie_checkpoint(variant),
    };
    let (model, _) = load_required(&ckpt, variant.tag())?;
    let samples = gen_split(&cfg.gen_for(task), task, split)?;
    let report = distill::evaluate(&model, &samples)?;

    // Reading reports have no F1 column; field F1 only means something
    // for the key-value task.
    let mut csv = String::new();
    match task {
        Task::Reading => {
            csv.push_str("index,nted_accuracy\n");
            for r in &report.rows {
                csv.push_str(&format!("{},{}\n", r.index, r.nted));
            }
        }
        Task::Kie => csv.push_str(&report.to_csv()),
    }
    write_text(&dirs.eval_csv(variant, task, split), &csv)?;

    if split == Split::Test {
        let update = match task {
            Task::Reading => LedgerRow { upstream_nted: Some(report.mean_nted), ..LedgerRow::default() },
            Task::Kie => LedgerRow {
                downstream_nted: Some(report.mean_nted),
                downstream_f1: Some(report.mean_f1),
                ..LedgerRow::default()
            },
        };
        update_ledger(&dirs, variant, update)?;
    }
    Ok(report)
}

/// Compare two variants' layer representations on the shared probe
/// batch. Writes the score grid and the one-line global index; indices
/// against the teacher also land in the ledger.
pub fn cmd_cka(cfg: &ExperimentConfig, out: &Path, a: RunVariant, b: RunVariant) -> Result<f64> {
    cfg.validate()?;
    let dirs = OutDirs::new(out);
    let (model_a, _) = load_required(&dirs.checkpoint(a), a.tag())?;
    let (model_b, _) = load_required(&dirs.checkpoint(b), b.tag())?;
    if (model_a.config.image_h, model_a.config.image_w)
        != (model_b.config.image_h, model_b.config.image_w)
    {
        return Err(Error::Contract(format!(
            "cannot share a probe batch: {a} reads {}×{} pages, {b} reads {}×{}",
            model_a.config.image_h, model_a.config.image_w, model_b.config.image_h, model_b.config.image_w
        )));
    }

    let test = gen_split(&cfg.gen_for(Task::Reading), Task::Reading, Split::Test)?;
    let probes: Vec<(Vec<f64>, Vec<usize>)> = test
        .iter()
        .take(cfg.probe_samples)
        .map(|s| {
            let mut tokens = vec![BOS];
            tokens.extend_from_slice(&s.target_tokens);
            (s.image.clone(), tokens)
        })
        .collect();
    let probe_refs: Vec<(&[f64], &[usize])> =
        probes.iter().map(|(img, toks)| (img.as_slice(), toks.as_slice())).collect();

    let taps_a = capture_activations(&model_a, &probe_refs)?;
    let taps_b = capture_activations(&model_b, &probe_refs)?;
    let table = layerwise_table(&taps_a, &taps_b)?;
    let index = table.global_index()?;
    write_text(&dirs.cka_csv(a, b), &table.to_csv())?;
    write_text(&dirs.cka_index(a, b), &format!("{index}\n"))?;

    if a == RunVariant::Teacher {
        update_ledger(&dirs, b, LedgerRow { cka_vs_teacher: Some(index), ..LedgerRow::default() })?;
    }
    Ok(index)
}
