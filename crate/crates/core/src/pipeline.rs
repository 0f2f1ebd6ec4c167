//! End-to-end orchestration: train, select ranks, regularize, factorize,
//! fine-tune, evaluate, quantize.
//!
//! Each stage reads a checkpoint, writes one under the output directory, and
//! emits its logs as CSV and its reports as JSON with the resolved
//! configuration embedded. Models are rounded through `f32` before they are
//! saved or handed on, so resuming from any saved stage reproduces the
//! uninterrupted run bit for bit.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};

use crate::compress::{factorize_model, finetune, model_flops, shapes_of, CompressionReport, FlopsConvention};
use crate::dataio::{mnist_desk, split, synth_blobs, Dataset, SplitKind};
use crate::error::{Error, Result};
use crate::nn::{evaluate_accuracy, train, EpochLog, Layer, Model, TrainConfig};
use crate::persist::{load_checkpoint, save_checkpoint, save_json, save_text, Checkpoint, Stage};
use crate::quantize::{quantization_row, quantize_model, QuantRow, SUPPORTED_BITS};
use crate::ranksel::{
    energy_baseline, multi_config_search, truncated_accuracy, BeamCandidate, FactorCache, RankVector,
    SearchConfig, TraceRow, TruncationEvaluator, DEFAULT_CONFIGS,
};
use crate::regularizer::{layer_msr, LambdaMode, MsrRegularizer, RegSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Directory with the four MNIST IDX files.
    Mnist { dir: PathBuf },
    /// Gaussian blobs, split by `fractions` (train, val, test).
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        fractions: [f64; 3],
    },
}

impl DatasetSpec {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        let loaded = match self {
            DatasetSpec::Mnist { dir } => mnist_desk(dir, seed),
            DatasetSpec::Blobs {
                classes,
                per_class,
                dim,
                fractions,
            } => synth_blobs(*classes, *per_class, *dim, seed).and_then(|d| split(d, *fractions, seed)),
        };
        loaded.map_err(|e| Error::Config(format!("cannot load dataset: {e}")))
    }
}

/// When the target ranks are (re)selected during compression-friendly
/// training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankUpdate {
    /// Selected once on the base model.
    #[default]
    Once,
    /// Selected again on the regularized model before factorization.
    BeforeDecomposition,
    /// Re-selected every `rank_update_every` regularized epochs.
    Multiple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub dataset: DatasetSpec,
    /// Hidden widths; input width and class count come from the dataset.
    pub hidden: Vec<usize>,
    pub base: TrainConfig,
    pub regularized: TrainConfig,
    pub finetune: TrainConfig,
    pub search: SearchConfig,
    /// `(s, K)` settings; the most accurate successful search wins.
    pub search_configs: Vec<(usize, usize)>,
    pub schedule: RegSchedule,
    pub rank_update: RankUpdate,
    pub rank_update_every: usize,
    /// Also report the equal-energy rank selection.
    pub energy_baseline: bool,
    pub quant_bits: Vec<u32>,
    pub ablation_seeds: Vec<u64>,
    pub out: PathBuf,
    /// Data split and initialization seed; phase seeds derive from it.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let cfg = Self {
            dataset: DatasetSpec::Mnist {
                dir: PathBuf::from("data/mnist"),
            },
            hidden: vec![256, 128],
            base: TrainConfig::default(),
            regularized: TrainConfig {
                epochs: 60,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                eta0: 0.01,
                ..TrainConfig::default()
            },
            search: SearchConfig::default(),
            search_configs: DEFAULT_CONFIGS.to_vec(),
            schedule: RegSchedule::default(),
            rank_update: RankUpdate::Once,
            rank_update_every: 30,
            energy_baseline: false,
            quant_bits: SUPPORTED_BITS.to_vec(),
            ablation_seeds: vec![0, 1, 2],
            out: PathBuf::from("runs/bsr"),
            seed: 0,
        };
        cfg.with_seed(0)
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Sets the global seed and the per-phase seeds derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.base.seed = seed;
        self.regularized.seed = seed.wrapping_add(1);
        self.finetune.seed = seed.wrapping_add(2);
        self.search.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.regularized.validate()?;
        self.finetune.validate()?;
        self.search.validate()?;
        self.schedule.validate()?;
        if self.search_configs.is_empty() || self.search_configs.iter().any(|&(s, k)| s == 0 || k == 0) {
            return Err(Error::Config("search_configs needs (s, K) pairs with s, K >= 1".into()));
        }
        if self.rank_update_every == 0 {
            return Err(Error::Config("rank_update_every must be >= 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        if let Some(b) = self.quant_bits.iter().find(|b| !SUPPORTED_BITS.contains(b)) {
            return Err(Error::Config(format!("unsupported bit-width {b}")));
        }
        Ok(())
    }
}

/// Report JSON with the configuration that produced it.
#[derive(Serialize)]
struct WithConfig<'a, T: Serialize> {
    config: &'a PipelineConfig,
    result: &'a T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRunSummary {
    pub s: usize,
    pub k: usize,
    pub success: bool,
    pub levels: usize,
    pub evaluations: usize,
    pub selected: BeamCandidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub method: String,
    pub ranks: RankVector,
    pub ratio: f64,
    pub in_band: bool,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

impl BaselineRow {
    pub const CSV_HEADER: &'static str = "method,ranks,ratio,in_band,val_accuracy,test_accuracy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.method,
            self.ranks,
            self.ratio,
            u8::from(self.in_band),
            self.val_accuracy,
            self.test_accuracy
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub ranks: RankVector,
    pub best: BeamCandidate,
    /// Index of the winning `(s, K)` setting.
    pub chosen: usize,
    pub runs: Vec<SearchRunSummary>,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
    pub baseline: Vec<BaselineRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub stage: Stage,
    pub ranks: Option<RankVector>,
    pub params: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub c_d: f64,
    pub tau: f64,
    pub ranks: RankVector,
    pub ratio: f64,
    pub baseline_accuracy: f64,
    /// After factorization, before fine-tuning.
    pub factorized_accuracy: f64,
    pub accuracy: f64,
    pub mflops_before: f64,
    pub mflops_exact: f64,
    pub mflops_fused: f64,
    pub memory_mb: [f64; 4],
}

impl CurveRow {
    pub const CSV_HEADER: &'static str = "c_d,tau,ranks,ratio,baseline_accuracy,factorized_accuracy,accuracy,mflops_before,mflops_exact,mflops_fused,mem32,mem16,mem8,mem4";

    pub fn csv_row(&self) -> String {
        let m = self.memory_mb;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.c_d,
            self.tau,
            self.ranks,
            self.ratio,
            self.baseline_accuracy,
            self.factorized_accuracy,
            self.accuracy,
            self.mflops_before,
            self.mflops_exact,
            self.mflops_fused,
            m[0],
            m[1],
            m[2],
            m[3]
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `rank_update` or `lambda`.
    pub experiment: String,
    pub variant: String,
    pub seed: u64,
    pub ranks: RankVector,
    pub ratio: f64,
    pub mean_msr: f64,
    pub accuracy: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "experiment,variant,seed,ranks,ratio,mean_msr,accuracy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.experiment, self.variant, self.seed, self.ranks, self.ratio, self.mean_msr, self.accuracy
        )
    }
}

fn csv(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

fn epoch_csv(log: &[EpochLog]) -> String {
    let header = if log.iter().any(|l| l.msr.is_some()) {
        EpochLog::CSV_HEADER_REG
    } else {
        EpochLog::CSV_HEADER
    };
    csv(header, log.iter().map(EpochLog::csv_row))
}

fn rounded(mut model: Model) -> Model {
    model.round_to_f32();
    model
}

fn require_ranks(ck: &Checkpoint) -> Result<&RankVector> {
    ck.ranks
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{} checkpoint carries no rank vector", ck.stage)))
}

fn require_dense(ck: &Checkpoint) -> Result<()> {
    if ck.model.layers.iter().any(|l| matches!(l, Layer::Factorized(_))) {
        return Err(Error::Config(format!("{} checkpoint is already factorized", ck.stage)));
    }
    Ok(())
}

/// Reads a stage input, reporting an unreadable path as a usage error.
pub fn load_input(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    load_checkpoint(path).map_err(|e| match e {
        Error::Io { .. } => Error::Config(format!("cannot read checkpoint {}: {e}", path.display())),
        other => other,
    })
}

/// A validated configuration with its dataset loaded.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub dataset: Arc<Dataset>,
    fingerprint: String,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let dataset = config.dataset.load(config.seed)?;
        Ok(Self::with_dataset(config, dataset))
    }

    /// Reuses an already loaded dataset, e.g. across runs that only differ
    /// in search or training settings.
    pub fn with_dataset(config: PipelineConfig, dataset: impl Into<Arc<Dataset>>) -> Self {
        let dataset = dataset.into();
        let fingerprint = dataset.fingerprint();
        Self {
            config,
            dataset,
            fingerprint,
        }
    }

    pub fn out(&self) -> &Path {
        &self.config.out
    }

    fn path(&self, name: &str) -> PathBuf {
        self.config.out.join(name)
    }

    fn report<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        save_json(
            &WithConfig {
                config: &self.config,
                result: value,
            },
            self.path(name),
        )
    }

    fn checkpoint(
        &self,
        stage: Stage,
        model: Model,
        ranks: Option<RankVector>,
        report: Option<CompressionReport>,
    ) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(stage, model);
        ck.ranks = ranks;
        ck.report = report;
        ck.dataset_fingerprint = Some(self.fingerprint.clone());
        ck.seeds = [
            ("global", self.config.seed),
            ("base", self.config.base.seed),
            ("regularized", self.config.regularized.seed),
            ("finetune", self.config.finetune.seed),
            ("search", self.config.search.seed),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let dir = self.path(&stage.to_string());
        save_checkpoint(&ck, &dir)?;
        info!("saved {} checkpoint to {}", stage, dir.display());
        Ok(ck)
    }

    fn check_input(&self, ck: &Checkpoint) -> Result<()> {
        match &ck.dataset_fingerprint {
            Some(f) if *f != self.fingerprint => Err(Error::Config(format!(
                "{} checkpoint was produced from a different dataset",
                ck.stage
            ))),
            _ => Ok(()),
        }
    }

    fn accuracy(&self, model: &Model, split: SplitKind) -> Result<f64> {
        evaluate_accuracy(model, &self.dataset, split)
    }

    pub fn train(&self) -> Result<Checkpoint> {
        let mut dims = vec![self.dataset.dim()];
        dims.extend(&self.config.hidden);
        dims.push(self.dataset.classes);
        let mut model = Model::mlp(&dims, self.config.seed)?;
        info!("training {dims:?} for {} epochs", self.config.base.epochs);
        let log = train(&mut model, &self.dataset, &self.config.base, None)?;
        save_text(&epoch_csv(&log), self.path("train_log.csv"))?;
        self.checkpoint(Stage::Trained, rounded(model), None, None)
    }

    /// Multi-configuration beam search on `model`.
    pub fn search(&self, model: &Model) -> Result<Selection> {
        let cfg = &self.config.search;
        let shapes = shapes_of(model);
        let cache = FactorCache::new(model)?;
        let eval = TruncationEvaluator::new(model, &cache, &self.dataset, SplitKind::Val, cfg.val_subset, cfg.seed)?;
        let outcome = multi_config_search(&eval, &shapes, cfg, &self.config.search_configs)?;
        let runs = outcome
            .runs
            .iter()
            .zip(&self.config.search_configs)
            .map(|(o, &(s, k))| SearchRunSummary {
                s,
                k,
                success: o.success,
                levels: o.levels,
                evaluations: o.evaluations,
                selected: o.selected.clone(),
            })
            .collect();
        let trace = outcome.runs[outcome.chosen].trace.clone();

        let mut baseline = Vec::new();
        if self.config.energy_baseline {
            let energy = energy_baseline(&cache.factors, &shapes, cfg.c_d, cfg.tau)?;
            for (method, r, c, in_band) in [
                ("mbs", outcome.best.r.clone(), outcome.best.c, true),
                ("energy", energy.r.clone(), energy.c, energy.in_band),
            ] {
                baseline.push(BaselineRow {
                    method: method.into(),
                    val_accuracy: truncated_accuracy(model, &cache, &r, &self.dataset, SplitKind::Val)?,
                    test_accuracy: truncated_accuracy(model, &cache, &r, &self.dataset, SplitKind::Test)?,
                    ranks: r,
                    ratio: c,
                    in_band,
                });
            }
        }
        info!(
            "selected {} (C = {:.4}, val acc {:.4}) with (s, K) = {:?}",
            outcome.best.r, outcome.best.c, outcome.best.a, self.config.search_configs[outcome.chosen]
        );
        Ok(Selection {
            ranks: outcome.best.r.clone(),
            best: outcome.best,
            chosen: outcome.chosen,
            runs,
            trace,
            baseline,
        })
    }

    pub fn select_rank(&self, ck: &Checkpoint) -> Result<(Checkpoint, Selection)> {
        self.check_input(ck)?;
        require_dense(ck)?;
        let sel = self.search(&ck.model)?;
        save_text(
            &csv(TraceRow::CSV_HEADER, sel.trace.iter().map(TraceRow::csv_row)),
            self.path("search_trace.csv"),
        )?;
        save_json(&sel.ranks, self.path("ranks.json"))?;
        self.report("search.json", &sel)?;
        if !sel.baseline.is_empty() {
            save_text(
                &csv(BaselineRow::CSV_HEADER, sel.baseline.iter().map(BaselineRow::csv_row)),
                self.path("baseline.csv"),
            )?;
        }
        let out = self.checkpoint(Stage::RankSelected, ck.model.clone(), Some(sel.ranks.clone()), None)?;
        Ok((out, sel))
    }

    /// Compression-friendly training towards the checkpoint's ranks.
    pub fn regularize(&self, ck: &Checkpoint) -> Result<Checkpoint> {
        self.check_input(ck)?;
        require_dense(ck)?;
        let targets = require_ranks(ck)?.clone();
        let mut model = ck.model.clone();
        let schedule = self.config.schedule.clone();
        let mode = self.config.rank_update;

        let (log, history) = {
            let mut reg = MsrRegularizer::new(schedule, targets)?;
            if mode == RankUpdate::Multiple {
                let every = self.config.rank_update_every;
                reg = reg.with_retarget(
                    every,
                    self.config.regularized.epochs,
                    Box::new(move |m: &Model| Ok(self.search(&rounded(m.clone()))?.ranks)),
                );
            }
            let log = train(&mut model, &self.dataset, &self.config.regularized, Some(&mut reg))?;
            (log, reg.target_history)
        };
        save_text(&epoch_csv(&log), self.path("regularize_log.csv"))?;
        let model = rounded(model);
        let mut ranks = history.last().expect("initial targets").1.clone();
        if mode == RankUpdate::BeforeDecomposition {
            ranks = self.search(&model)?.ranks;
        }
        if history.len() > 1 || mode == RankUpdate::BeforeDecomposition {
            let rows = history.iter().map(|(e, r)| format!("{e},{r}"));
            let mut text = csv("epoch,ranks", rows);
            if mode == RankUpdate::BeforeDecomposition {
                text.push_str(&format!("{},{ranks}\n", self.config.regularized.epochs));
            }
            save_text(&text, self.path("rank_updates.csv"))?;
        }
        self.checkpoint(Stage::Regularized, model, Some(ranks), None)
    }

    pub fn compress(&self, ck: &Checkpoint) -> Result<(Checkpoint, CompressionReport)> {
        self.check_input(ck)?;
        require_dense(ck)?;
        let r = require_ranks(ck)?.clone();
        let shapes = shapes_of(&ck.model);
        let factorized = rounded(factorize_model(&ck.model, &r)?);
        let report = CompressionReport::new(
            &shapes,
            &r,
            self.accuracy(&ck.model, SplitKind::Test)?,
            self.accuracy(&factorized, SplitKind::Test)?,
        )?;
        self.report("compress_report.json", &report)?;
        let out = self.checkpoint(Stage::Factorized, factorized, Some(r), Some(report.clone()))?;
        Ok((out, report))
    }

    pub fn finetune(&self, ck: &Checkpoint) -> Result<Checkpoint> {
        self.check_input(ck)?;
        let mut model = ck.model.clone();
        let log = finetune(&mut model, &self.dataset, &self.config.finetune)?;
        save_text(&epoch_csv(&log), self.path("finetune_log.csv"))?;
        let model = rounded(model);
        let mut report = ck.report.clone();
        if let Some(report) = report.as_mut() {
            report.accuracy_after = self.accuracy(&model, SplitKind::Test)?;
            self.report("report.json", report)?;
        }
        self.checkpoint(Stage::Finetuned, model, ck.ranks.clone(), report)
    }

    pub fn evaluate(&self, ck: &Checkpoint) -> Result<Evaluation> {
        self.check_input(ck)?;
        let ev = Evaluation {
            stage: ck.stage,
            ranks: ck.ranks.clone(),
            params: ck.model.layers.iter().map(Layer::weight_count).sum(),
            val_accuracy: self.accuracy(&ck.model, SplitKind::Val)?,
            test_accuracy: self.accuracy(&ck.model, SplitKind::Test)?,
        };
        self.report("evaluate.json", &ev)?;
        Ok(ev)
    }

    pub fn quantize(&self, ck: &Checkpoint) -> Result<QuantRow> {
        self.check_input(ck)?;
        let setting = match &ck.ranks {
            Some(r) => format!("{}:{r}", ck.stage),
            None => ck.stage.to_string(),
        };
        let row = quantization_row(&ck.model, &self.dataset, SplitKind::Test, &setting, &self.config.quant_bits)?;
        save_text(&csv(&row.csv_header(), [row.csv_row()]), self.path("quantization.csv"))?;
        self.report("quantization.json", &row)?;
        for &bits in self.config.quant_bits.iter().filter(|&&b| b < 32) {
            let (q, _) = quantize_model(&ck.model, bits)?;
            let mut out = Checkpoint::new(Stage::Quantized, rounded(q));
            out.ranks = ck.ranks.clone();
            out.dataset_fingerprint = ck.dataset_fingerprint.clone();
            out.seeds = ck.seeds.clone();
            out.seeds.insert("bits".into(), bits as u64);
            save_checkpoint(&out, self.path(&format!("quantized-{bits}bit")))?;
        }
        Ok(row)
    }

    /// Selection through fine-tuning from a trained checkpoint.
    pub fn compress_from(&self, trained: &Checkpoint) -> Result<(Checkpoint, CurveRow)> {
        let baseline_accuracy = self.accuracy(&trained.model, SplitKind::Test)?;
        let (selected, _) = self.select_rank(trained)?;
        let regularized = self.regularize(&selected)?;
        let (factorized, report) = self.compress(&regularized)?;
        let finetuned = self.finetune(&factorized)?;
        self.quantize(&finetuned)?;

        let r = require_ranks(&finetuned)?.clone();
        let shapes = shapes_of(&trained.model);
        let mflops = |r: Option<&RankVector>, c| model_flops(&shapes, r, c).map(|f| f as f64 / 1e6);
        let row = CurveRow {
            c_d: self.config.search.c_d,
            tau: self.config.search.tau,
            ratio: report.ratio,
            baseline_accuracy,
            factorized_accuracy: report.accuracy_after,
            accuracy: self.accuracy(&finetuned.model, SplitKind::Test)?,
            mflops_before: mflops(None, FlopsConvention::Exact)?,
            mflops_exact: mflops(Some(&r), FlopsConvention::Exact)?,
            mflops_fused: mflops(Some(&r), FlopsConvention::Fused)?,
            memory_mb: report.memory_mb.as_array(),
            ranks: r,
        };
        save_text(&csv(CurveRow::CSV_HEADER, [row.csv_row()]), self.path("curve.csv"))?;
        Ok((finetuned, row))
    }

    /// The whole pipeline from scratch.
    pub fn bsr(&self) -> Result<CurveRow> {
        let trained = self.train()?;
        Ok(self.compress_from(&trained)?.1)
    }

    /// Rank-update and lambda-schedule ablations from a shared trained
    /// checkpoint, one run per variant and seed in `ablation_seeds`.
    pub fn ablate(&self, trained: &Checkpoint) -> Result<Vec<AblationRow>> {
        self.check_input(trained)?;
        let mut rows = Vec::new();
        for &seed in &self.config.ablation_seeds {
            let variants = [
                ("rank_update", "once", RankUpdate::Once, LambdaMode::Scheduled),
                ("rank_update", "before_decomposition", RankUpdate::BeforeDecomposition, LambdaMode::Scheduled),
                ("rank_update", "multiple", RankUpdate::Multiple, LambdaMode::Scheduled),
                ("lambda", "fixed", RankUpdate::Once, LambdaMode::Fixed),
            ];
            let mut selected: Option<Checkpoint> = None;
            for (experiment, variant, update, lambda) in variants {
                let mut cfg = self.config.clone();
                cfg.out = self.path(&format!("ablation/{variant}-seed{seed}"));
                cfg.search.seed = seed;
                cfg.regularized.seed = seed.wrapping_add(1);
                cfg.finetune.seed = seed.wrapping_add(2);
                cfg.rank_update = update;
                cfg.schedule.mode = lambda;
                let child = Pipeline {
                    config: cfg,
                    dataset: Arc::clone(&self.dataset),
                    fingerprint: self.fingerprint.clone(),
                };
                info!("ablation {variant}, seed {seed}");
                // The initial selection depends only on the seed.
                let start = match &selected {
                    Some(ck) => ck.clone(),
                    None => {
                        let ck = child.select_rank(trained)?.0;
                        selected = Some(ck.clone());
                        ck
                    }
                };
                let regularized = child.regularize(&start)?;
                let ranks = require_ranks(&regularized)?.clone();
                let msr = layer_msr(&regularized.model, &ranks)?;
                let (factorized, report) = child.compress(&regularized)?;
                let finetuned = child.finetune(&factorized)?;
                let row = AblationRow {
                    experiment: experiment.into(),
                    variant: variant.into(),
                    seed,
                    ratio: report.ratio,
                    mean_msr: msr.iter().sum::<f64>() / msr.len() as f64,
                    accuracy: child.accuracy(&finetuned.model, SplitKind::Test)?,
                    ranks,
                };
                if variant == "once" {
                    rows.push(AblationRow {
                        experiment: "lambda".into(),
                        variant: "scheduled".into(),
                        ..row.clone()
                    });
                }
                rows.push(row);
            }
        }
        rows.sort_by(|a, b| (&a.experiment, &a.variant, a.seed).cmp(&(&b.experiment, &b.variant, b.seed)));
        save_text(
            &csv(AblationRow::CSV_HEADER, rows.iter().map(AblationRow::csv_row)),
            self.path("ablation.csv"),
        )?;
        self.report("ablation.json", &rows)?;
        Ok(rows)
    }
}
