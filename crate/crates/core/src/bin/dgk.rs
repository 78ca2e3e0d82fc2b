//! Command-line front end: dataset generation, model training, evaluation,
//! matching diagnostics, and the component ablation grid. One JSON config
//! drives every command, the run seed pins all randomness, and artifacts are
//! byte-identical across re-runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dgk::error::{Error, Result};
use dgk::graph::{Dataset, PredictedGraph, SceneGraph};
use dgk::infer::{
    load_predictions, predict, save_predictions, ImagePredictions, InferConfig, PredicatePrior,
};
use dgk::losses::{LossBreakdown, LossWeights};
use dgk::matching::{match_graphs, MatchCostConfig};
use dgk::metrics::{evaluate, EvalConfig, EvalReport};
use dgk::model::{
    train, Model, ModelConfig, OptimConfig, ScoreMode, CHECKPOINT_MANIFEST_FILE, CHECKPOINT_WEIGHTS_FILE,
};
use dgk::synth::{featurize, feature_width, generate, holdout_zero_shot, DatasetSplit, GenConfig, PREDICATES};

#[derive(Parser)]
#[command(name = "dgk", version, about = "Scene-graph prediction toolkit: generate, train, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset split: train.json, test.json, zero_shot.json.
    Gen(CommonArgs),
    /// Train a model; writes the checkpoint and a loss curve CSV.
    Train(TrainArgs),
    /// Evaluate predictions; writes the metric report as JSON and text.
    Eval(EvalArgs),
    /// Match a predicted graph against a scene and print the assignment.
    Match(MatchArgs),
    /// Train and evaluate the four-row component grid.
    Ablate(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides out_dir from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Training scenes file; omitted means the split is generated from the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Ground-truth scenes file; with --pred, scores that file pair instead
    /// of running the checkpointed model.
    #[arg(long, requires = "pred")]
    gt: Option<PathBuf>,
    /// Predictions file to score against --gt.
    #[arg(long, requires = "gt")]
    pred: Option<PathBuf>,
    /// Report JSON path; defaults to <out>/report.json.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct MatchArgs {
    /// Run configuration (JSON); supplies the cost weights.
    #[arg(long)]
    config: PathBuf,
    /// Ground-truth scenes file.
    #[arg(long)]
    gt: PathBuf,
    /// Predicted graph file.
    #[arg(long)]
    pred: PathBuf,
    /// Scene index inside --gt to match against.
    #[arg(long, default_value_t = 0)]
    scene: usize,
}

/// One config file for every command. The run seed overrides the generator
/// seed and derives the model, shuffle, and holdout seeds, so a single
/// number pins the whole pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    seed: u64,
    out_dir: Option<PathBuf>,
    /// Combos scrubbed from the training scenes for zero-shot evaluation.
    zero_shot_holdout: usize,
    gen: GenConfig,
    /// Absent means the model is sized from the generator config. Class
    /// count, token width, and predicate count always follow the generator.
    model: Option<ModelConfig>,
    optim: OptimConfig,
    loss: LossWeights,
    #[serde(rename = "match")]
    match_cost: MatchCostConfig,
    infer: InferConfig,
    eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: None,
            zero_shot_holdout: 0,
            gen: GenConfig::default(),
            model: None,
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            match_cost: MatchCostConfig::default(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Ok(v) = std::env::var("DGK_SEED") {
        cfg.seed = v
            .parse()
            .map_err(|_| Error::Config(format!("DGK_SEED must be an unsigned integer, got {v:?}")))?;
    }
    cfg.gen.seed = cfg.seed;
    Ok(cfg)
}

fn model_config(cfg: &RunConfig) -> ModelConfig {
    let mut mc = cfg.model.clone().unwrap_or_else(|| ModelConfig::for_gen(&cfg.gen));
    mc.n_classes = cfg.gen.n_classes;
    mc.d_in = feature_width(cfg.gen.n_classes);
    mc.n_predicates = PREDICATES.len();
    mc
}

fn make_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    let split = generate(&cfg.gen)?;
    if cfg.zero_shot_holdout > 0 {
        holdout_zero_shot(&split, cfg.zero_shot_holdout, cfg.seed.wrapping_add(3))
    } else {
        Ok(split)
    }
}

/// Records every artifact it writes so a failed command can remove its
/// partial output.
#[derive(Default)]
struct Sink {
    created: Vec<PathBuf>,
}

impl Sink {
    fn write(&mut self, path: &Path, text: &str) -> Result<()> {
        fs::write(path, text)?;
        self.created.push(path.to_path_buf());
        Ok(())
    }

    fn record(&mut self, path: PathBuf) {
        self.created.push(path);
    }

    fn discard_all(&self) {
        for p in &self.created {
            let _ = fs::remove_file(p);
        }
    }
}

fn with_sink(f: impl FnOnce(&mut Sink) -> Result<()>) -> Result<()> {
    let mut sink = Sink::default();
    let outcome = f(&mut sink);
    if outcome.is_err() {
        sink.discard_all();
    }
    outcome
}

fn out_dir(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = flag
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

fn cmd_gen(cfg: &RunConfig, out: &Path, sink: &mut Sink) -> Result<()> {
    let split = make_split(cfg)?;
    let train_ds = Dataset::new(split.vocab.clone(), split.train)?;
    sink.write(&out.join("train.json"), &(train_ds.to_json()? + "\n"))?;
    let test_ds = Dataset::new(split.vocab, split.test)?;
    sink.write(&out.join("test.json"), &(test_ds.to_json()? + "\n"))?;
    let combos = serde_json::json!({ "combos": split.zero_shot_combos });
    sink.write(&out.join("zero_shot.json"), &pretty(&combos)?)?;
    Ok(())
}

fn loss_curve_csv(curve: &[LossBreakdown]) -> String {
    let mut out = String::from("epoch,box,giou,ent,rel,filter,total\n");
    for (epoch, row) in curve.iter().enumerate() {
        writeln!(out, "{epoch},{},{},{},{},{},{}", row.box_l1, row.giou, row.ent, row.rel, row.filter, row.total)
            .unwrap();
    }
    out
}

fn cmd_train(cfg: &RunConfig, out: &Path, data: &Option<PathBuf>, sink: &mut Sink) -> Result<()> {
    let scenes = match data {
        Some(path) => {
            let ds = Dataset::load(path)?;
            if ds.vocab.n_classes() != cfg.gen.n_classes {
                return Err(Error::Config(format!(
                    "dataset has {} entity classes, config expects {}",
                    ds.vocab.n_classes(),
                    cfg.gen.n_classes
                )));
            }
            ds.scenes
        }
        None => make_split(cfg)?.train,
    };
    let mut model = Model::init(model_config(cfg), cfg.seed.wrapping_add(1))?;
    let curve = train(&mut model, &scenes, &cfg.gen, &cfg.loss, &cfg.match_cost, &cfg.optim, cfg.seed.wrapping_add(2))?;
    model.save(out)?;
    sink.record(out.join(CHECKPOINT_MANIFEST_FILE));
    sink.record(out.join(CHECKPOINT_WEIGHTS_FILE));
    sink.write(&out.join("loss_curve.csv"), &loss_curve_csv(&curve))?;
    Ok(())
}

fn predicate_counts(scenes: &[SceneGraph]) -> Vec<usize> {
    let mut counts = vec![0usize; PREDICATES.len()];
    for s in scenes {
        for t in s.to_triplets() {
            counts[t.predicate_id] += 1;
        }
    }
    counts
}

fn predict_dataset(
    model: &Model,
    scenes: &[SceneGraph],
    gen: &GenConfig,
    prior: &PredicatePrior,
    ic: &InferConfig,
) -> Result<Vec<ImagePredictions>> {
    let mut out = Vec::with_capacity(scenes.len());
    for (image_id, scene) in scenes.iter().enumerate() {
        let feats = featurize(scene, gen)?;
        let (_, pg) = model.forward(&feats)?;
        let ranked = predict(&pg, prior, ic)?;
        out.push(ImagePredictions { image_id, triplets: ranked.triplets });
    }
    Ok(out)
}

fn report_text(report: &EvalReport) -> String {
    let mut text = report.table();
    writeln!(
        text,
        "greedy shortfall vs bipartite optimum: {} images, {} triplets",
        report.discrepancy.images, report.discrepancy.shortfall
    )
    .unwrap();
    text
}

fn write_report(report: &EvalReport, json_path: &Path, sink: &mut Sink) -> Result<()> {
    sink.write(json_path, &pretty(report)?)?;
    sink.write(&json_path.with_extension("txt"), &report_text(report))?;
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs, sink: &mut Sink) -> Result<()> {
    if let (Some(gt), Some(pred)) = (&args.gt, &args.pred) {
        let ds = Dataset::load(gt)?;
        let preds = load_predictions(pred)?;
        let report = evaluate(&preds, &ds.scenes, &cfg.eval)?;
        let json_path = match &args.report {
            Some(p) => p.clone(),
            None => out_dir(cfg, &args.common.out)?.join("report.json"),
        };
        return write_report(&report, &json_path, sink);
    }

    // Pipeline mode: regenerate the split, run the checkpointed model over
    // the test scenes, then score.
    let out = out_dir(cfg, &args.common.out)?;
    let split = make_split(cfg)?;
    let model = Model::load(&out)?;
    let prior = PredicatePrior::from_scenes(&split.train, PREDICATES.len())?;
    let mut eval_cfg = cfg.eval.clone();
    if eval_cfg.zero_shot_combos.is_none() && !split.zero_shot_combos.is_empty() {
        eval_cfg.zero_shot_combos = Some(split.zero_shot_combos.clone());
    }
    if eval_cfg.predicate_counts.is_none() {
        eval_cfg.predicate_counts = Some(predicate_counts(&split.train));
    }
    let mut infer_cfg = cfg.infer;
    infer_cfg.single_label = model.cfg.single_label;
    let preds = predict_dataset(&model, &split.test, &cfg.gen, &prior, &infer_cfg)?;
    let pred_path = out.join("predictions.json");
    save_predictions(&pred_path, &preds)?;
    sink.record(pred_path);
    let report = evaluate(&preds, &split.test, &eval_cfg)?;
    let json_path = args.report.clone().unwrap_or_else(|| out.join("report.json"));
    write_report(&report, &json_path, sink)
}

fn cmd_match(args: &MatchArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let ds = Dataset::load(&args.gt)?;
    let scene = ds.scenes.get(args.scene).ok_or_else(|| {
        Error::InvalidInput(format!("scene {} out of range ({} scenes in file)", args.scene, ds.scenes.len()))
    })?;
    let pg = PredictedGraph::load(&args.pred)?;
    let assignment = match_graphs(scene, &pg, &cfg.match_cost)?;
    let doc = serde_json::json!({
        "sigma": assignment.sigma,
        "total_cost": assignment.total_cost,
        "per_pair_costs": assignment.per_pair_costs,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    name: String,
    score_mode: ScoreMode,
    tau: f64,
    report: EvalReport,
}

fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    write!(out, "{:<14}", "row").unwrap();
    for kr in &rows[0].report.ks {
        write!(out, " {:>9} {:>9} {:>9}", format!("R@{}", kr.k), format!("mR@{}", kr.k), format!("M@{}", kr.k))
            .unwrap();
    }
    out.push('\n');
    for row in rows {
        write!(out, "{:<14}", row.name).unwrap();
        for kr in &row.report.ks {
            write!(out, " {:>9.4} {:>9.4} {:>9.4}", kr.recall, kr.mean_recall, kr.mean_at_k).unwrap();
        }
        out.push('\n');
    }
    out
}

fn cmd_ablate(cfg: &RunConfig, out: &Path, sink: &mut Sink) -> Result<()> {
    let split = make_split(cfg)?;
    let prior = PredicatePrior::from_scenes(&split.train, PREDICATES.len())?;
    let counts = predicate_counts(&split.train);
    // Each row adds one scoring stage on top of the previous: raw pair
    // scores, entity-confidence re-scoring, the compatibility filter, and
    // finally the rare-predicate adjustment at ranking time.
    let grid: [(&str, ScoreMode, f64); 4] = [
        ("bare", ScoreMode::Raw, 0.0),
        ("+rescoring", ScoreMode::Rescored, 0.0),
        ("+distillation", ScoreMode::Full, 0.0),
        ("+LA", ScoreMode::Full, cfg.infer.tau),
    ];
    let mut rows = Vec::with_capacity(grid.len());
    for (name, score_mode, tau) in grid {
        let mut mc = model_config(cfg);
        mc.score_mode = score_mode;
        let mut model = Model::init(mc, cfg.seed.wrapping_add(1))?;
        train(&mut model, &split.train, &cfg.gen, &cfg.loss, &cfg.match_cost, &cfg.optim, cfg.seed.wrapping_add(2))?;
        let mut ic = cfg.infer;
        ic.tau = tau;
        ic.single_label = model.cfg.single_label;
        let preds = predict_dataset(&model, &split.test, &cfg.gen, &prior, &ic)?;
        let mut ec = cfg.eval.clone();
        if ec.zero_shot_combos.is_none() && !split.zero_shot_combos.is_empty() {
            ec.zero_shot_combos = Some(split.zero_shot_combos.clone());
        }
        if ec.predicate_counts.is_none() {
            ec.predicate_counts = Some(counts.clone());
        }
        let report = evaluate(&preds, &split.test, &ec)?;
        rows.push(AblationRow { name: name.to_string(), score_mode, tau, report });
    }
    sink.write(&out.join("ablation.json"), &pretty(&rows)?)?;
    sink.write(&out.join("ablation.txt"), &ablation_table(&rows))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => with_sink(|sink| {
            let cfg = load_config(&args.config)?;
            let out = out_dir(&cfg, &args.out)?;
            cmd_gen(&cfg, &out, sink)
        }),
        Command::Train(args) => with_sink(|sink| {
            let cfg = load_config(&args.common.config)?;
            let out = out_dir(&cfg, &args.common.out)?;
            cmd_train(&cfg, &out, &args.data, sink)
        }),
        Command::Eval(args) => with_sink(|sink| {
            let cfg = load_config(&args.common.config)?;
            cmd_eval(&cfg, &args, sink)
        }),
        Command::Match(args) => cmd_match(&args),
        Command::Ablate(args) => with_sink(|sink| {
            let cfg = load_config(&args.config)?;
            let out = out_dir(&cfg, &args.out)?;
            cmd_ablate(&cfg, &out, sink)
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error: {}", line.trim().trim_start_matches("error: "));
            return ExitCode::FAILURE;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
