//! Experiment orchestration shared by the CLI and the language bindings:
//! dataset construction, pretrain/adapt/eval runs, and the ablation harness.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::adapt::{
    adapt_resume, AdaptConfig, AdaptObserver, AdaptOptions, EpochStats, MetricsRow,
    METRICS_CSV_HEADER,
};
use crate::checkpoint::{write_file_atomic, Checkpoint, CheckpointKind};
use crate::config::ExperimentConfig;
use crate::detection::LabeledImage;
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::eval::EvalResult;
use crate::raster::Raster;
use crate::rng::derive_seed;
use crate::toy::{
    generate_dataset, pretrain, DomainShift, SgdMomentum, ToyDetector,
};

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    write_file_atomic(path, bytes)
}

/// The four generated splits of a two-domain experiment.
pub struct Datasets {
    pub source_train: Vec<LabeledImage>,
    pub source_eval: Vec<LabeledImage>,
    pub target_train: Vec<LabeledImage>,
    pub target_eval: Vec<LabeledImage>,
}

impl Datasets {
    /// Unlabeled view of the target training split (adaptation never sees
    /// target labels).
    pub fn target_train_images(&self) -> Vec<Raster> {
        self.target_train.iter().map(|l| l.image.clone()).collect()
    }
}

/// Generate all splits deterministically from the config and a seed.
pub fn make_datasets(cfg: &ExperimentConfig, seed: u64) -> Result<Datasets> {
    let clean = DomainShift::none();
    let gen = |shift: &DomainShift, n: usize, tag: &str| {
        generate_dataset(&cfg.scene, shift, n, derive_seed(seed, tag, &[]))
    };
    Ok(Datasets {
        source_train: gen(&clean, cfg.data.source_train, "split-source-train")?,
        source_eval: gen(&clean, cfg.data.source_eval, "split-source-eval")?,
        target_train: gen(&cfg.shift, cfg.data.target_train, "split-target-train")?,
        target_eval: gen(&cfg.shift, cfg.data.target_eval, "split-target-eval")?,
    })
}

/// Fresh detector for this config and seed.
pub fn build_detector(cfg: &ExperimentConfig, seed: u64) -> Result<ToyDetector> {
    ToyDetector::new(cfg.detector_config(), derive_seed(seed, "detector-init", &[]))
}

/// Outcome of a pretraining run.
pub struct PretrainArtifacts {
    pub checkpoint_path: PathBuf,
    pub source_map: f64,
    pub target_map: f64,
    pub epoch_losses: Vec<f64>,
}

/// Pretrain on clean source data, report source/target mAP, and write a
/// checkpoint under `out_dir`.
pub fn run_pretrain(cfg: &ExperimentConfig, out_dir: &Path, seed: u64) -> Result<PretrainArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let data = make_datasets(cfg, seed)?;
    let mut model = build_detector(cfg, seed)?;
    let epoch_losses = pretrain(
        &mut model,
        &data.source_train,
        cfg.pretrain.epochs,
        cfg.pretrain.learning_rate,
        cfg.pretrain.momentum,
        derive_seed(seed, "pretrain", &[]),
    )?;
    let source_map = crate::eval::evaluate(&model, &data.source_eval)?.map;
    let target_map = crate::eval::evaluate(&model, &data.target_eval)?.map;

    let checkpoint_path = out_dir.join("pretrained.ckpt");
    Checkpoint {
        config_hash: cfg.hash()?,
        detector_config: cfg.detector_config(),
        epoch: cfg.pretrain.epochs as u32,
        kind: CheckpointKind::Pretrained {
            params: model.params(),
        },
    }
    .save(&checkpoint_path)?;

    let report = serde_json::json!({
        "source_map": source_map,
        "target_map": target_map,
        "epochs": cfg.pretrain.epochs,
        "epoch_losses": epoch_losses,
        "seed": seed,
    });
    write_atomic(
        &out_dir.join("pretrain_report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;

    Ok(PretrainArtifacts {
        checkpoint_path,
        source_map,
        target_map,
        epoch_losses,
    })
}

/// Behavior overrides for a single adaptation run (CLI flags).
#[derive(Debug, Clone, Copy, Default)]
pub struct AdaptOverrides {
    pub no_teacher: bool,
    pub no_daca: bool,
    pub seed: Option<u64>,
    pub selection_confidence: Option<f64>,
    pub alpha: Option<f64>,
    pub epochs: Option<usize>,
}

impl AdaptOverrides {
    fn apply(&self, mut adapt: AdaptConfig) -> AdaptConfig {
        if self.no_teacher {
            adapt.enable_teacher = false;
        }
        if self.no_daca {
            adapt.enable_daca = false;
        }
        if let Some(t) = self.selection_confidence {
            adapt.selection_confidence = t;
        }
        if let Some(a) = self.alpha {
            adapt.alpha = a;
        }
        if let Some(e) = self.epochs {
            adapt.epochs = e;
        }
        adapt
    }
}

/// Outcome of an adaptation run.
pub struct AdaptArtifacts {
    pub metrics_path: PathBuf,
    pub final_checkpoint_path: PathBuf,
    pub final_map: Option<f64>,
    pub initial_map: Option<f64>,
    pub rows: Vec<MetricsRow>,
    pub epochs: Vec<EpochStats>,
}

struct CheckpointEveryEpoch<'a> {
    out_dir: &'a Path,
    config_hash: String,
    detector_config: crate::toy::ToyDetectorConfig,
}

impl AdaptObserver<ToyDetector> for CheckpointEveryEpoch<'_> {
    fn on_epoch_end(
        &mut self,
        epoch: usize,
        student: &ToyDetector,
        teacher: &ToyDetector,
        optimizer: &SgdMomentum,
        _stats: &EpochStats,
    ) -> Result<()> {
        Checkpoint {
            config_hash: self.config_hash.clone(),
            detector_config: self.detector_config.clone(),
            epoch: epoch as u32,
            kind: CheckpointKind::AdaptState {
                student: student.params(),
                teacher: teacher.params(),
                velocity: optimizer.velocity.clone(),
            },
        }
        .save(&self.out_dir.join(format!("epoch_{epoch:03}.ckpt")))
    }
}

/// Load a checkpoint, clone it into student + teacher, run the adaptation
/// schedule, and write per-epoch checkpoints plus the metrics CSV.
pub fn run_adapt(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    out_dir: &Path,
    overrides: &AdaptOverrides,
) -> Result<AdaptArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let seed = overrides.seed.unwrap_or(cfg.run.seed);
    let adapt_cfg = overrides.apply(cfg.adapt);
    adapt_cfg.validate()?;

    let ckpt = Checkpoint::load(checkpoint_path)?;
    let expected = cfg.detector_config();
    if ckpt.detector_config != expected {
        return Err(Error::ArchitectureMismatch {
            left: format!("checkpoint {:?}", ckpt.detector_config),
            right: format!("config {expected:?}"),
        });
    }

    let data = make_datasets(cfg, seed)?;
    let target_images = data.target_train_images();

    // A pretrained checkpoint seeds both models; an adaptation checkpoint
    // resumes with its own teacher and optimizer state.
    let student = ckpt.primary_model()?;
    let (teacher, velocity, start_epoch) = match (&ckpt.kind, ckpt.teacher_model()?) {
        (CheckpointKind::AdaptState { velocity, .. }, Some(teacher)) => {
            (teacher, velocity.clone(), ckpt.epoch as usize)
        }
        _ => (crate::detector::clone_model(&student), None, 0),
    };
    let mut optimizer = SgdMomentum::new(adapt_cfg.learning_rate, adapt_cfg.momentum);
    optimizer.velocity = velocity;

    let opts = AdaptOptions {
        augment: cfg.augment.clone(),
        seed,
        eval_split: Some(&data.target_eval),
        eval_every: cfg.run.eval_every,
    };
    let mut observer = CheckpointEveryEpoch {
        out_dir,
        config_hash: cfg.hash()?,
        detector_config: expected.clone(),
    };
    let outcome = adapt_resume(
        student,
        teacher,
        optimizer,
        start_epoch,
        &target_images,
        &adapt_cfg,
        &opts,
        &mut observer,
    )?;

    let metrics_path = out_dir.join("metrics.csv");
    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');
    for row in &outcome.rows {
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    write_atomic(&metrics_path, csv.as_bytes())?;

    let final_checkpoint_path = out_dir.join("adapted.ckpt");
    Checkpoint {
        config_hash: cfg.hash()?,
        detector_config: expected,
        epoch: adapt_cfg.epochs as u32,
        kind: CheckpointKind::AdaptState {
            student: outcome.student.params(),
            teacher: outcome.teacher.params(),
            velocity: outcome.optimizer.velocity.clone(),
        },
    }
    .save(&final_checkpoint_path)?;

    let initial_map = outcome
        .rows
        .first()
        .filter(|r| r.epoch == 0)
        .and_then(|r| r.map_eval);
    let final_map = outcome.epochs.last().and_then(|e| e.map_eval);
    Ok(AdaptArtifacts {
        metrics_path,
        final_checkpoint_path,
        final_map,
        initial_map,
        rows: outcome.rows,
        epochs: outcome.epochs,
    })
}

/// Evaluate a checkpoint on a generated split.
pub fn run_eval(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    split: EvalSplit,
    out_dir: &Path,
) -> Result<EvalResult> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let model = ckpt.primary_model()?;
    let data = make_datasets(cfg, cfg.run.seed)?;
    let dataset = match split {
        EvalSplit::Source => &data.source_eval,
        EvalSplit::Target => &data.target_eval,
    };
    let result = crate::eval::evaluate(&model, dataset)?;
    write_atomic(
        &out_dir.join("eval.json"),
        result.to_json()?.as_bytes(),
    )?;
    let mut pr = Vec::new();
    result.write_pr_csv(&mut pr)?;
    write_atomic(&out_dir.join("pr_curves.csv"), &pr)?;
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Source,
    Target,
}

/// Which hyperparameter an ablation sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    /// Pseudo-label selection confidence.
    Threshold,
    /// EMA retention coefficient.
    Alpha,
}

impl SweepKind {
    /// Default grids for the two studied hyperparameters.
    pub fn grid(self) -> &'static [f64] {
        match self {
            SweepKind::Threshold => &[0.1, 0.3, 0.5, 0.7, 0.9, 0.95],
            SweepKind::Alpha => &[0.3, 0.5, 0.7, 0.8, 0.9, 0.95, 0.99],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Threshold => "selection_confidence",
            SweepKind::Alpha => "alpha",
        }
    }
}

/// One sweep row: the grid value plus one mAP per seed (None = failed run).
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub per_seed: Vec<(u64, Option<f64>)>,
}

impl SweepRow {
    pub fn mean(&self) -> Option<f64> {
        let ok: Vec<f64> = self.per_seed.iter().filter_map(|(_, m)| *m).collect();
        if ok.is_empty() {
            None
        } else {
            Some(ok.iter().sum::<f64>() / ok.len() as f64)
        }
    }
}

pub struct AblationArtifacts {
    pub rows: Vec<SweepRow>,
    pub csv_path: PathBuf,
    pub markdown_path: PathBuf,
}

/// Run the sweep: one shared pretraining checkpoint per seed, one adaptation
/// per grid point and seed, final target mAP recorded per cell. Failed runs
/// become explicit empty cells rather than vanishing rows.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    sweep: SweepKind,
    out_dir: &Path,
) -> Result<AblationArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let seeds = if cfg.run.ablation_seeds.is_empty() {
        vec![cfg.run.seed]
    } else {
        cfg.run.ablation_seeds.clone()
    };

    // Shared pretraining checkpoints, one per seed.
    let mut pre_paths = Vec::new();
    for &seed in &seeds {
        let dir = out_dir.join(format!("pretrain_seed{seed}"));
        let pre = run_pretrain(cfg, &dir, seed)?;
        pre_paths.push(pre.checkpoint_path);
    }

    let mut rows = Vec::new();
    for &value in sweep.grid() {
        let mut per_seed = Vec::new();
        for (&seed, pre_path) in seeds.iter().zip(&pre_paths) {
            let overrides = AdaptOverrides {
                seed: Some(seed),
                selection_confidence: (sweep == SweepKind::Threshold).then_some(value),
                alpha: (sweep == SweepKind::Alpha).then_some(value),
                ..AdaptOverrides::default()
            };
            let run_dir = out_dir.join(format!("{}_{value}_seed{seed}", sweep.name()));
            let map = match run_adapt(cfg, pre_path, &run_dir, &overrides) {
                Ok(artifacts) => artifacts.final_map,
                Err(_) => None,
            };
            per_seed.push((seed, map));
        }
        rows.push(SweepRow { value, per_seed });
    }

    // Table artifacts.
    let mut csv = format!("{},{}", sweep.name(), seeds
        .iter()
        .map(|s| format!("map_seed{s}"))
        .collect::<Vec<_>>()
        .join(","));
    csv.push_str(",map_mean\n");
    for row in &rows {
        let _ = write!(csv, "{}", row.value);
        for (_, m) in &row.per_seed {
            match m {
                Some(v) => {
                    let _ = write!(csv, ",{v}");
                }
                None => csv.push_str(",error"),
            }
        }
        match row.mean() {
            Some(m) => {
                let _ = writeln!(csv, ",{m}");
            }
            None => csv.push_str(",error\n"),
        }
    }
    let csv_path = out_dir.join(format!("sweep_{}.csv", sweep.name()));
    write_atomic(&csv_path, csv.as_bytes())?;

    let mut md = format!(
        "| {} | {} | mean mAP |\n|---|{}---|\n",
        sweep.name(),
        seeds
            .iter()
            .map(|s| format!("seed {s}"))
            .collect::<Vec<_>>()
            .join(" | "),
        "---|".repeat(seeds.len())
    );
    for row in &rows {
        let _ = write!(md, "| {} |", row.value);
        for (_, m) in &row.per_seed {
            match m {
                Some(v) => {
                    let _ = write!(md, " {v:.4} |");
                }
                None => md.push_str(" error |"),
            }
        }
        match row.mean() {
            Some(m) => {
                let _ = writeln!(md, " {m:.4} |");
            }
            None => md.push_str(" error |\n"),
        }
    }
    let markdown_path = out_dir.join(format!("sweep_{}.md", sweep.name()));
    write_atomic(&markdown_path, md.as_bytes())?;

    Ok(AblationArtifacts {
        rows,
        csv_path,
        markdown_path,
    })
}
