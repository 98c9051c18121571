use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use harmreason::data_io::{
    load_dataset, load_predictions, read_jsonl, to_jsonl, write_atomic, write_jsonl, RunDir, TrainConfig,
};
use harmreason::grpo::{run_grpo, RationaleReward, RunOptions, StepReport};
use harmreason::metrics::{
    aggregate_rubric, classification_report, counterfactual_pair_accuracy, pairs_from_samples, pct, transfer_matrix,
    Predictor, RubricScore,
};
use harmreason::policy::sft_warmup;
use harmreason::{total_reward, DatasetName, Label, Lexicon, Sample, ToyPolicy, Verdict};
use serde::Deserialize;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "harmreason",
    version,
    about = "Rationale rewards, GRPO training and evaluation for harm classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score completions and print one reward breakdown per line.
    Score(ScoreArgs),
    /// Train the classification head on gold labels and write a checkpoint.
    TrainSft(TrainSftArgs),
    /// Run GRPO from a warm checkpoint (default) or the base policy.
    TrainGrpo(TrainGrpoArgs),
    /// Accuracy and macro-F1 of predictions against a dataset.
    Eval(EvalArgs),
    /// Cross-dataset macro-F1 matrix with the in-domain drop per row.
    Transfer(TransferArgs),
    /// Counterfactual pair accuracy.
    Pairs(PairsArgs),
    /// Aggregate judge rubric scores.
    Rubric(RubricArgs),
}

#[derive(Args)]
struct ScoreArgs {
    /// JSONL records with `label` (0/1) and `completion`, plus an optional `id`.
    #[arg(long)]
    completions: PathBuf,
    /// Config whose weights and lexicon are used; defaults apply otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Lexicon file overriding the config's.
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args)]
struct TrainSftArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint path; defaults to `<output_dir>/sft.ckpt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainGrpoArgs {
    #[arg(long)]
    config: PathBuf,
    /// Warm-start checkpoint; defaults to `<output_dir>/sft.ckpt`.
    #[arg(long, conflicts_with = "cold")]
    init: Option<PathBuf>,
    /// Start from the untrained base policy instead of a warm checkpoint.
    #[arg(long)]
    cold: bool,
    /// Overrides `grpo_steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Run directory; defaults to `<output_dir>/grpo-warm` or `grpo-cold`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PredictionSource {
    /// JSONL of `{"id", "verdict"}` or `{"id", "completion"}` records.
    #[arg(long, conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
    /// Policy checkpoint; predictions are its greedy verdicts.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    source: PredictionSource,
    /// Print a JSON record instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TransferArgs {
    /// Evaluation set as NAME=PATH; repeat for each dataset.
    #[arg(long = "dataset", value_parser = parse_pair, required = true)]
    datasets: Vec<(String, PathBuf)>,
    /// Model trained on NAME as NAME=CHECKPOINT.
    #[arg(long = "model", value_parser = parse_pair)]
    models: Vec<(String, PathBuf)>,
    /// Predictions of the model trained on NAME, covering every dataset, as NAME=PATH.
    #[arg(long = "predictions", value_parser = parse_pair)]
    predictions: Vec<(String, PathBuf)>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PairsArgs {
    /// Dataset whose `counterfactual_pair_id` links define the pairs.
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    source: PredictionSource,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RubricArgs {
    /// JSONL of `{"vg", "tg", "cm", "hm", "vc"}` records.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    json: bool,
}

fn parse_pair(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected NAME=PATH, got {s:?}"))?;
    if name.is_empty() || path.is_empty() {
        return Err(format!("expected NAME=PATH, got {s:?}"));
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Score(a) => score(a),
        Command::TrainSft(a) => train_sft(a),
        Command::TrainGrpo(a) => train_grpo(a),
        Command::Eval(a) => eval(a),
        Command::Transfer(a) => transfer(a),
        Command::Pairs(a) => pairs(a),
        Command::Rubric(a) => rubric(a),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CompletionRecord {
    #[serde(default)]
    id: Option<String>,
    label: Label,
    completion: String,
}

fn score(a: ScoreArgs) -> Result<()> {
    let config = a.config.as_deref().map(TrainConfig::load).transpose()?;
    let lexicon = match (&a.lexicon, &config) {
        (Some(p), _) => harmreason::lexicon::load_lexicon(p)?,
        (None, Some(c)) => c.lexicon()?,
        (None, None) => Lexicon::default_lexicon(),
    };
    let (ew, rw) = config.as_ref().map(|c| (c.evidence_weights, c.reward_weights)).unwrap_or_default();
    let records: Vec<CompletionRecord> = read_jsonl(&a.completions)?;
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let id = r.id.clone().unwrap_or_else(|| format!("{}", i + 1));
        let sample = Sample::new(id.clone(), r.label, 0);
        let b = total_reward(&sample, &r.completion, &lexicon, &ew, &rw);
        let verdict = harmreason::parse_completion(&r.completion).verdict;
        out.push(json!({
            "id": id,
            "verdict": verdict,
            "outcome": b.outcome,
            "format": b.format,
            "evidence": b.evidence,
            "consistency": b.consistency,
            "total": b.total,
        }));
    }
    print!("{}", to_jsonl(&out)?);
    Ok(())
}

fn training_corpus(config: &TrainConfig) -> Result<Vec<Sample>> {
    let mut corpus = Vec::new();
    for (name, p) in &config.dataset_paths {
        let samples = load_dataset(config.resolve(p)).with_context(|| format!("loading dataset {name}"))?;
        corpus.extend(samples);
    }
    if corpus.is_empty() {
        bail!("training datasets are empty");
    }
    Ok(corpus)
}

fn default_sft_checkpoint(config: &TrainConfig) -> PathBuf {
    config.output_dir().join("sft.ckpt")
}

fn train_sft(a: TrainSftArgs) -> Result<()> {
    let config = TrainConfig::load(&a.config)?;
    let corpus = training_corpus(&config)?;
    let (policy, curve) = sft_warmup(&config.initial_policy(), &corpus, &config.sft_config())?;
    let out = a.out.unwrap_or_else(|| default_sft_checkpoint(&config));
    policy.save(&out).with_context(|| format!("writing {}", out.display()))?;
    let losses: Vec<_> = curve
        .iter()
        .enumerate()
        .map(|(epoch, loss)| json!({"epoch": epoch, "loss": loss, "seed": config.seed}))
        .collect();
    let curve_path = out.with_extension("loss.jsonl");
    write_jsonl(&curve_path, &losses)?;
    println!(
        "sft: {} samples, {} epochs, final loss {:.4}, checkpoint {}",
        corpus.len(),
        curve.len(),
        curve.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn train_grpo(a: TrainGrpoArgs) -> Result<()> {
    let config = TrainConfig::load(&a.config)?;
    let corpus = training_corpus(&config)?;
    let start = if a.cold {
        config.initial_policy()
    } else {
        let ckpt = a.init.clone().unwrap_or_else(|| default_sft_checkpoint(&config));
        ToyPolicy::load(&ckpt).with_context(|| format!("loading warm-start checkpoint {}", ckpt.display()))?
    };
    let expected = config.initial_policy();
    if !start.same_architecture(&expected) {
        bail!("checkpoint architecture does not match the config's policy section");
    }
    let run_dir = a.run_dir.unwrap_or_else(|| config.output_dir().join(if a.cold { "grpo-cold" } else { "grpo-warm" }));
    let dir = RunDir::create(&run_dir, &config)?;
    let reward = RationaleReward {
        lexicon: config.lexicon()?,
        evidence_weights: config.evidence_weights,
        reward_weights: config.reward_weights,
    };
    let options = RunOptions { steps: a.steps.unwrap_or(config.grpo_steps), batch_size: config.batch_size };
    let (policy, reports) = run_grpo(&start, &start, &corpus, &reward, &config.grpo, options, |_, _| true)?;
    write_jsonl(dir.path(RunDir::STEPS), &reports)?;
    policy.save(dir.path(RunDir::CHECKPOINT))?;
    let meta = json!({
        "seed": config.seed,
        "start": if a.cold { "cold" } else { "warm" },
        "steps": reports.len(),
    });
    let meta_path = dir.path("run.json");
    write_atomic(&meta_path, format!("{meta}\n").as_bytes())?;
    match reports.last() {
        Some(StepReport { step, mean_reward, verdict_accuracy, mean_format_reward, mean_kl, .. }) => println!(
            "grpo: step {step} reward {mean_reward:.3} accuracy {} format {mean_format_reward:.3} kl {mean_kl:.3}; run dir {}",
            pct(*verdict_accuracy),
            dir.root.display()
        ),
        None => println!("grpo: 0 steps; run dir {}", dir.root.display()),
    }
    Ok(())
}

/// Verdict for every sample, failing on samples without a prediction.
fn predict_all(samples: &[Sample], source: &PredictionSource) -> Result<HashMap<String, Verdict>> {
    match (&source.predictions, &source.checkpoint) {
        (Some(p), None) => {
            let preds = load_predictions(p)?;
            if let Some(missing) = samples.iter().find(|s| !preds.contains_key(&s.id)) {
                bail!("{} has no prediction for sample {:?}", p.display(), missing.id);
            }
            Ok(preds)
        }
        (None, Some(c)) => {
            let policy = ToyPolicy::load(c).with_context(|| format!("loading {}", c.display()))?;
            Ok(samples.iter().map(|s| (s.id.clone(), policy.greedy_verdict(s))).collect())
        }
        _ => bail!("exactly one of --predictions or --checkpoint is required"),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let samples = load_dataset(&a.dataset)?;
    let preds = predict_all(&samples, &a.source)?;
    let p: Vec<Verdict> = samples.iter().map(|s| preds[&s.id]).collect();
    let g: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let r = classification_report(&p, &g)?;
    if a.json {
        println!("{}", serde_json::to_string(&r)?);
    } else {
        println!("samples {}", r.n);
        println!("accuracy {}", pct(r.accuracy));
        println!("macro_f1 {}", pct(r.macro_f1));
        let invalid = p.iter().filter(|v| !v.is_valid()).count();
        println!("invalid {invalid}");
    }
    Ok(())
}

struct MapPredictor(HashMap<String, Verdict>);

impl Predictor for MapPredictor {
    fn predict(&self, sample: &Sample) -> Verdict {
        self.0.get(&sample.id).copied().unwrap_or(Verdict::Invalid)
    }
}

struct PolicyPredictor(ToyPolicy);

impl Predictor for PolicyPredictor {
    fn predict(&self, sample: &Sample) -> Verdict {
        self.0.greedy_verdict(sample)
    }
}

fn transfer(a: TransferArgs) -> Result<()> {
    let mut datasets = BTreeMap::new();
    for (name, p) in &a.datasets {
        let key = DatasetName::from(name.as_str());
        if datasets.insert(key, load_dataset(p)?).is_some() {
            bail!("dataset {name} given twice");
        }
    }
    let mut predictors: BTreeMap<DatasetName, Box<dyn Predictor>> = BTreeMap::new();
    for (name, ckpt) in &a.models {
        let policy = ToyPolicy::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        predictors.insert(DatasetName::from(name.as_str()), Box::new(PolicyPredictor(policy)));
    }
    for (name, p) in &a.predictions {
        let preds = load_predictions(p)?;
        for samples in datasets.values() {
            if let Some(missing) = samples.iter().find(|s| !preds.contains_key(&s.id)) {
                bail!("{} has no prediction for sample {:?}", p.display(), missing.id);
            }
        }
        let key = DatasetName::from(name.as_str());
        if predictors.insert(key, Box::new(MapPredictor(preds))).is_some() {
            bail!("more than one predictor for {name}");
        }
    }
    let m = transfer_matrix(&predictors, &datasets)?;
    if a.json {
        println!("{}", json!({"datasets": m.datasets, "f1": m.f1, "delta": m.deltas()}));
    } else {
        print!("{m}");
    }
    Ok(())
}

fn pairs(a: PairsArgs) -> Result<()> {
    let samples = load_dataset(&a.dataset)?;
    let pairs = pairs_from_samples(&samples);
    if pairs.is_empty() {
        return Err(anyhow!("{} contains no counterfactual pairs", a.dataset.display()));
    }
    let preds = predict_all(&samples, &a.source)?;
    let golds: HashMap<String, Label> = samples.iter().map(|s| (s.id.clone(), s.label)).collect();
    let acc = counterfactual_pair_accuracy(&preds, &golds, &pairs)?;
    if a.json {
        println!("{}", json!({"pairs": pairs.len(), "pair_accuracy": acc}));
    } else {
        println!("pairs {}", pairs.len());
        println!("pair_accuracy {}", pct(acc));
    }
    Ok(())
}

fn rubric(a: RubricArgs) -> Result<()> {
    let scores: Vec<RubricScore> = read_jsonl(&a.scores)?;
    let r = aggregate_rubric(&scores)?;
    if a.json {
        println!("{}", serde_json::to_string(&r)?);
    } else {
        println!("examples {}", r.n);
        println!("{r}");
    }
    Ok(())
}
