//! Subcommand runners. Each returns the artifacts it declares; the binary
//! checks that every one of them exists before exiting successfully.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cardcount::datagen::{generate_corpus, read_corpus, write_corpus, Corpus, Split};
use cardcount::harness::report::{
    ablation_table, eval_table, guide_runs_table, guide_table, size_bias_tables, threshold_table,
    train_log_table,
};
use cardcount::harness::{
    evaluate, run_ablation, run_guide_suite, size_bias_sweep, threshold_sweep, train_stage,
    Inference, TrainData,
};
use cardcount::model::CountModel;
use serde::de::DeserializeOwned;

use crate::config::{
    parse, resolve, AblateFileConfig, EvalFileConfig, GenDataConfig, GuideFileConfig,
    SizeBiasFileConfig, ThresholdFileConfig, TrainFileConfig,
};

/// Where a run reads its configuration and writes its outputs.
pub struct RunContext {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

impl RunContext {
    fn load<T: DeserializeOwned>(&self) -> Result<T> {
        let text = fs::read_to_string(&self.config)
            .with_context(|| format!("reading config {}", self.config.display()))?;
        parse(&text).with_context(|| format!("parsing config {}", self.config.display()))
    }

    fn base(&self) -> &Path {
        self.config.parent().unwrap_or(Path::new("."))
    }

    fn input(&self, path: &Path) -> PathBuf {
        resolve(self.base(), path)
    }

    fn output(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))
    }
}

/// `key: value` lines.
#[derive(Default)]
struct Summary(String);

impl Summary {
    fn line(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.0, "{key}: {value}");
        self
    }

    fn write(&self, path: &Path) -> Result<PathBuf> {
        fs::write(path, &self.0).with_context(|| format!("writing {}", path.display()))?;
        Ok(path.to_path_buf())
    }
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn load_model(path: &Path) -> Result<CountModel> {
    CountModel::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

pub fn gen_data(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let mut cfg: GenDataConfig = ctx.load()?;
    if let Some(seed) = ctx.seed {
        cfg.scene.seed = seed;
    }
    ctx.prepare()?;
    let mut artifacts = Vec::new();
    let mut summary = Summary::default();
    summary.line("seed", cfg.scene.seed);
    for (split, n, name) in [
        (Split::Train, cfg.sizes.train, "train.corpus"),
        (Split::Val, cfg.sizes.val, "val.corpus"),
        (Split::Test, cfg.sizes.test, "test.corpus"),
    ] {
        let corpus = generate_corpus(&cfg.scene, split, n)?;
        let objects: usize = corpus.samples().map(|s| s.count()).sum();
        let path = ctx.output(name);
        write_corpus(&corpus, &path)?;
        summary.line(&format!("{name} scenes"), n);
        summary.line(&format!("{name} query objects"), objects);
        artifacts.push(path);
    }
    artifacts.push(summary.write(&ctx.output("summary.txt"))?);
    Ok(artifacts)
}

pub fn train(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let mut cfg: TrainFileConfig = ctx.load()?;
    if let Some(seed) = ctx.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    let model = match &cfg.init {
        Some(p) => load_model(&ctx.input(p))?,
        None => CountModel::new(cfg.model.clone())?,
    };
    let primary = load_corpus(&ctx.input(&cfg.data.train))?;
    let val = cfg.data.val.as_ref().map(|p| load_corpus(&ctx.input(p))).transpose()?;
    let strong = cfg.data.strong.as_ref().map(|p| load_corpus(&ctx.input(p))).transpose()?;
    ctx.prepare()?;
    let (model, log) = train_stage(
        model,
        TrainData {
            primary: &primary,
            strong: strong.as_ref(),
            val: val.as_ref(),
        },
        &cfg.train,
    )?;
    let ckpt = ctx.output("model.ckpt");
    model.save(&ckpt)?;
    let log_path = ctx.output("train_log.csv");
    train_log_table(&log).write(&log_path)?;
    let mut summary = Summary::default();
    summary
        .line("stage", format!("{:?}", cfg.train.stage).to_lowercase())
        .line("target", format!("{:?}", cfg.train.target).to_lowercase())
        .line("seed", cfg.train.seed)
        .line("epochs run", log.epochs.len())
        .line("best epoch", log.best_epoch)
        .line("stopped early", log.stopped_early)
        .line("parameters", model.param_count())
        .line("checksum", format!("{:08x}", model.checksum()));
    if let Some(mae) = log.epochs.get(log.best_epoch).and_then(|e| e.val_mae) {
        summary.line("best val mae", mae);
    }
    Ok(vec![ckpt, log_path, summary.write(&ctx.output("summary.txt"))?])
}

pub fn eval(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let cfg: EvalFileConfig = ctx.load()?;
    let model = load_model(&ctx.input(&cfg.checkpoint))?;
    let corpus = load_corpus(&ctx.input(&cfg.corpus))?;
    let inference = Inference {
        kappa: cfg.kappa,
        tiled: cfg.tiled,
    };
    let metrics = evaluate(&model, &corpus, inference)?;
    ctx.prepare()?;
    let csv = ctx.output("eval.csv");
    let name = cfg.checkpoint.display().to_string();
    eval_table(&[(name.as_str(), metrics, inference)]).write(&csv)?;
    let mut summary = Summary::default();
    summary
        .line("checkpoint", &name)
        .line("images", metrics.n)
        .line("mae", metrics.mae)
        .line("rmse", metrics.rmse)
        .line("kappa", cfg.kappa)
        .line("tiled", cfg.tiled);
    Ok(vec![csv, summary.write(&ctx.output("summary.txt"))?])
}

pub fn size_bias(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let cfg: SizeBiasFileConfig = ctx.load()?;
    if cfg.models.is_empty() {
        bail!("size-bias config lists no models");
    }
    let corpus = load_corpus(&ctx.input(&cfg.corpus))?;
    let models = cfg
        .models
        .iter()
        .map(|m| Ok((m.name.as_str(), load_model(&ctx.input(&m.checkpoint))?)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(&str, &CountModel)> = models.iter().map(|(n, m)| (*n, m)).collect();
    let report = size_bias_sweep(&refs, &corpus, &cfg.ratios, cfg.size_classes)?;
    ctx.prepare()?;
    let (rows, classes) = size_bias_tables(&report);
    let rows_path = ctx.output("size_bias.csv");
    let classes_path = ctx.output("size_class.csv");
    rows.write(&rows_path)?;
    classes.write(&classes_path)?;
    let mut summary = Summary::default();
    summary.line("images", corpus.len()).line(
        "size class bounds (mean object area)",
        format!("{:?}", report.class_bounds),
    );
    for r in &report.rows {
        summary.line(
            &format!("{} ratio {}", r.model, r.ratio),
            format!("drift {:+.4} abs {:.4} mae {:.4}", r.mean_drift, r.mean_abs_drift, r.mae),
        );
    }
    Ok(vec![rows_path, classes_path, summary.write(&ctx.output("summary.txt"))?])
}

pub fn threshold(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let cfg: ThresholdFileConfig = ctx.load()?;
    let model = load_model(&ctx.input(&cfg.checkpoint))?;
    let corpus = load_corpus(&ctx.input(&cfg.corpus))?;
    let report = threshold_sweep(&model, &corpus, &cfg.kappas)?;
    ctx.prepare()?;
    let csv = ctx.output("threshold.csv");
    threshold_table(&report).write(&csv)?;
    let mut summary = Summary::default();
    summary.line("images", corpus.len()).line("best kappa", report.best_kappa);
    Ok(vec![csv, summary.write(&ctx.output("summary.txt"))?])
}

pub fn guide(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let mut cfg: GuideFileConfig = ctx.load()?;
    if let Some(seed) = ctx.seed {
        cfg.suite.seed = seed;
    }
    let model = load_model(&ctx.input(&cfg.checkpoint))?;
    let runs = run_guide_suite(&model, &cfg.suite)?;
    ctx.prepare()?;
    let runs_path = ctx.output("guide_runs.csv");
    guide_runs_table(&runs).write(&runs_path)?;
    let steps_path = ctx.output("guide_steps.csv");
    let trajectories: Vec<(u32, &_)> = runs.iter().map(|r| (r.requested, &r.trajectory)).collect();
    guide_table(&trajectories).write(&steps_path)?;
    let successes = runs.iter().filter(|r| r.success).count();
    let mut summary = Summary::default();
    summary
        .line("runs", runs.len())
        .line("successes", successes)
        .line("success rate", successes as f64 / runs.len() as f64)
        .line("oracle threshold", cfg.suite.oracle_threshold)
        .line(
            "note",
            "success is scored by connected components of the rendered scene, standing in for a human count",
        );
    for &q in &cfg.suite.requested {
        let of_q: Vec<_> = runs.iter().filter(|r| r.requested == q).collect();
        let ok = of_q.iter().filter(|r| r.success).count();
        summary.line(&format!("requested {q}"), format!("{ok}/{}", of_q.len()));
    }
    Ok(vec![runs_path, steps_path, summary.write(&ctx.output("summary.txt"))?])
}

pub fn ablate(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let mut cfg: AblateFileConfig = ctx.load()?;
    if let Some(seed) = ctx.seed {
        cfg.model.seed = seed;
        cfg.strong.seed = seed;
        cfg.weak.seed = seed;
    }
    let (outcomes, _) = run_ablation(&cfg)?;
    ctx.prepare()?;
    let mut artifacts = Vec::new();
    let mut summary = Summary::default();
    for o in &outcomes {
        let name = o.row.variant.name();
        let ckpt = ctx.output(&format!("{name}.ckpt"));
        o.model.save(&ckpt)?;
        artifacts.push(ckpt);
        let stages = [o.row.strong_weights.map(|_| "strong"), o.row.weak_weights.map(|_| "weak")];
        for (log, stage) in o.logs.iter().zip(stages.into_iter().flatten()) {
            let path = ctx.output(&format!("{name}-{stage}.csv"));
            train_log_table(log).write(&path)?;
            artifacts.push(path);
        }
        summary.line(
            name,
            format!("mae {:.4} rmse {:.4} n {}", o.row.metrics.mae, o.row.metrics.rmse, o.row.metrics.n),
        );
    }
    let rows: Vec<_> = outcomes.iter().map(|o| &o.row).collect();
    let csv = ctx.output("ablation.csv");
    ablation_table(&rows).write(&csv)?;
    artifacts.push(csv);
    artifacts.push(summary.write(&ctx.output("summary.txt"))?);
    Ok(artifacts)
}
