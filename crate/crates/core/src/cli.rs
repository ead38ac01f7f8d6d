//! The `mmave` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataio::{
    generate_synthetic, load_instances, load_unlabelled, DatasetSpec, Instance, Manifest, SynthConfig, Vocabulary,
};
use crate::encoders::{ImageEncoderConfig, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::evaluation::{awareness, evaluate, inspect_gates, upper_bound_eval, AwarenessConfig, UpperBound};
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::training::{train, EpochMetrics, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "mmave", version, about = "Multimodal attribute prediction and value extraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model (or several seeds of one).
    Train(TrainArgs),
    /// Score a checkpoint on labelled data.
    Eval(EvalArgs),
    /// Measure how much predictions depend on the matching image.
    Awareness(AwarenessArgs),
    /// Predict attributes and values for unlabelled instances.
    Predict(PredictArgs),
    /// Dump gate values for one instance.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub labels: usize,
    #[arg(long, default_value_t = 0.3)]
    pub ambiguity: f64,
    #[arg(long, default_value_t = 32)]
    pub dv: usize,
    #[arg(long, default_value_t = 9)]
    pub k: usize,
    /// Feature noise relative to the prototype norm.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
}

/// Model dimensions and architecture switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub d: usize,
    pub d_a: usize,
    pub layers: usize,
    pub ff: usize,
    pub image_proj: Option<usize>,
    pub untie_visual_value: bool,
    pub attr_sum_includes_special: bool,
    pub freeze_text_encoder: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d: 64,
            d_a: 200,
            layers: 2,
            ff: 128,
            image_proj: None,
            untie_visual_value: false,
            attr_sum_includes_special: false,
            freeze_text_encoder: false,
        }
    }
}

impl ModelDims {
    pub fn model_config(&self, manifest: &Manifest, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            text: TextEncoderConfig {
                vocab_size,
                max_positions: manifest.max_len + 2,
                d: self.d,
                layers: self.layers,
                ff: self.ff,
            },
            image: ImageEncoderConfig { d_v: manifest.d_v, k: manifest.k, proj: self.image_proj },
            d_a: self.d_a,
            num_labels: manifest.labels.len(),
            untie_visual_value: self.untie_visual_value,
            attr_sum_includes_special: self.attr_sum_includes_special,
            freeze_text_encoder: self.freeze_text_encoder,
        }
    }
}

/// Everything needed to re-create a training run; written into its output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seeds: usize,
    pub model: ModelDims,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { manifest: None, out: None, seeds: 1, model: ModelDims::default(), train: TrainConfig::default() }
    }
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Run config JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated switches, e.g. `use_visual=false,use_kl=false`.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub d_a: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub ff: Option<usize>,
    #[arg(long)]
    pub image_proj: Option<usize>,
    #[arg(long)]
    pub untie_visual_value: bool,
    #[arg(long)]
    pub attr_sum_includes_special: bool,
    #[arg(long)]
    pub freeze_text_encoder: bool,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Labelled JSONL file, or a manifest (then `--split` selects the file).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// `attr_given_gold_values` or `value_given_gold_attrs`.
    #[arg(long)]
    pub upper_bound: Option<String>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AwarenessArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 8)]
    pub permutations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4999)]
    pub resamples: usize,
    #[arg(long, hide = true)]
    pub identity_permutation: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL instances; gold fields are ignored if present.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub instance_id: String,
    /// Directory for `global_gates.csv` and `regional_gates.csv`; stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn quiet() -> bool {
    std::env::var("MMAVE_LOG").is_ok_and(|v| v == "quiet" || v == "off")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn pretty<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        labels: a.labels,
        ambiguity: a.ambiguity,
        d_v: a.dv,
        k: a.k,
        noise: a.noise,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(a.n, a.seed, &cfg)?;
    data.write(&a.out)?;
    write_file(&a.out.join("synth_config.json"), &pretty(&json!({ "n": a.n, "seed": a.seed, "config": cfg }))?)
}

/// Merges the config file (if any) with flags; flags win.
pub fn resolve_run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut rc = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Data {
                path: p.display().to_string(),
                line: e.line(),
                msg: e.to_string(),
            })?
        }
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    if a.data.is_some() {
        rc.manifest = a.data.clone();
    }
    if a.out.is_some() {
        rc.out = a.out.clone();
    }
    set!(a.seeds, rc.seeds);
    set!(a.seed, rc.train.seed);
    set!(a.epochs, rc.train.epochs);
    set!(a.lr, rc.train.adam.lr);
    set!(a.batch_size, rc.train.batch_size);
    set!(a.lambda, rc.train.lambda);
    set!(a.train_fraction, rc.train.train_fraction);
    set!(a.d, rc.model.d);
    set!(a.d_a, rc.model.d_a);
    set!(a.layers, rc.model.layers);
    set!(a.ff, rc.model.ff);
    if a.patience.is_some() {
        rc.train.patience = a.patience;
    }
    if a.image_proj.is_some() {
        rc.model.image_proj = a.image_proj;
    }
    rc.model.untie_visual_value |= a.untie_visual_value;
    rc.model.attr_sum_includes_special |= a.attr_sum_includes_special;
    rc.model.freeze_text_encoder |= a.freeze_text_encoder;
    if let Some(spec) = &a.ablation {
        rc.train.ablation.apply(spec)?;
    }
    if rc.manifest.is_none() {
        return Err(Error::Usage("no dataset given; pass --data <manifest.json> or set `manifest` in --config".into()));
    }
    if rc.out.is_none() {
        return Err(Error::Usage("no output directory given; pass --out <dir>".into()));
    }
    if rc.seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()));
    }
    rc.train.validate()?;
    Ok(rc)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub test_attr_f1: Option<f64>,
    pub test_value_f1: Option<f64>,
}

fn load_split(manifest: &Manifest, path: &Path, split: &str, spec: &DatasetSpec) -> Result<Vec<Instance>> {
    match manifest.split_path(path, split) {
        Ok(p) => load_instances(&p, spec),
        Err(_) if split != "train" => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

/// Trains one seed into `out`.
pub fn train_one(rc: &RunConfig, seed: u64, out: &Path) -> Result<RunSummary> {
    let manifest_path = rc.manifest.as_deref().expect("resolved config has a manifest");
    let manifest = Manifest::load(manifest_path)?;
    let spec = manifest.spec()?;
    let train_set = load_split(&manifest, manifest_path, "train", &spec)?;
    let valid = load_split(&manifest, manifest_path, "valid", &spec)?;
    let test = load_split(&manifest, manifest_path, "test", &spec)?;

    let mut rc = rc.clone();
    rc.train.seed = seed;
    rc.seeds = 1;
    rc.out = Some(out.to_path_buf());
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join("config.json"), &pretty(&rc)?)?;

    let vocab = Vocabulary::build(&train_set);
    let config = rc.model.model_config(&manifest, vocab.len());
    let model = Model::<f32>::new(config, rc.train.ablation, spec.scheme.clone(), vocab, seed)?;
    let mut log = String::new();
    let loud = !quiet();
    let outcome = train(model, &train_set, &valid, &rc.train, |m: &EpochMetrics| {
        let line = serde_json::to_string(m).expect("metrics serialise");
        if loud {
            eprintln!("[seed {seed}] {line}");
        }
        log.push_str(&line);
        log.push('\n');
    })?;
    write_file(&out.join("metrics.jsonl"), &log)?;
    save_checkpoint(&outcome.model, &out.join("model.ckpt"))?;
    let mut summary = RunSummary { seed, best_epoch: outcome.best_epoch, test_attr_f1: None, test_value_f1: None };
    if !test.is_empty() {
        let report = evaluate(&outcome.model, &test)?;
        write_file(&out.join("test_report.json"), &pretty(&report)?)?;
        summary.test_attr_f1 = Some(report.attribute.f1);
        summary.test_value_f1 = Some(report.value.f1);
    }
    Ok(summary)
}

fn mean_std(xs: &[f64]) -> serde_json::Value {
    if xs.is_empty() {
        return serde_json::Value::Null;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    json!({ "mean": m, "std": sd })
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let rc = resolve_run_config(a)?;
    let out = rc.out.clone().expect("resolved");
    if rc.seeds == 1 {
        let s = train_one(&rc, rc.train.seed, &out)?;
        return emit(None, &pretty(&s)?);
    }
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_file(&out.join("config.json"), &pretty(&rc)?)?;
    let mut runs = Vec::new();
    for i in 0..rc.seeds as u64 {
        let seed = rc.train.seed + i;
        runs.push(train_one(&rc, seed, &out.join(format!("seed-{seed}")))?);
    }
    let attr: Vec<f64> = runs.iter().filter_map(|r| r.test_attr_f1).collect();
    let value: Vec<f64> = runs.iter().filter_map(|r| r.test_value_f1).collect();
    let summary = json!({ "runs": runs, "attr_f1": mean_std(&attr), "value_f1": mean_std(&value) });
    let text = pretty(&summary)?;
    write_file(&out.join("summary.json"), &text)?;
    emit(None, &text)
}

fn load_eval_data(model: &Model<f32>, d: &DataArgs) -> Result<Vec<Instance>> {
    let spec = DatasetSpec { scheme: model.scheme.clone(), d_v: model.config.image.d_v, k: model.config.image.k };
    if d.data.extension().is_some_and(|e| e == "json") {
        let manifest = Manifest::load(&d.data)?;
        if manifest.labels != model.scheme.labels() {
            return Err(Error::contract(format!(
                "manifest labels [{}] differ from the checkpoint's [{}]",
                manifest.labels.join(","),
                model.scheme
            )));
        }
        if manifest.d_v != spec.d_v || manifest.k != spec.k {
            return Err(Error::contract("manifest image geometry differs from the checkpoint's"));
        }
        load_instances(&manifest.split_path(&d.data, &d.split)?, &spec)
    } else {
        load_instances(&d.data, &spec)
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let data = load_eval_data(&model, &a.data)?;
    let (mode, report) = match &a.upper_bound {
        Some(m) => {
            let mode: UpperBound = m.parse()?;
            (m.as_str(), upper_bound_eval(&model, &data, mode)?)
        }
        None => ("standard", evaluate(&model, &data)?),
    };
    let mut v = serde_json::to_value(&report)?;
    v["mode"] = json!(mode);
    emit(a.out.as_deref(), &pretty(&v)?)
}

pub fn cmd_awareness(a: &AwarenessArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let data = load_eval_data(&model, &a.data)?;
    let cfg = AwarenessConfig {
        permutations: a.permutations,
        seed: a.seed,
        resamples: a.resamples,
        identity: a.identity_permutation,
    };
    let report = awareness(&model, &data, &cfg)?;
    emit(a.out.as_deref(), &pretty(&report)?)
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let spec = DatasetSpec { scheme: model.scheme.clone(), d_v: model.config.image.d_v, k: model.config.image.k };
    let data = load_unlabelled(&a.input, &spec)?;
    let mut out = String::new();
    for inst in &data {
        let p = model.predict(inst)?;
        let attributes: Vec<_> = p
            .attributes
            .iter()
            .map(|&l| json!({ "label": model.scheme.label_name(l), "score": p.attr_probs[l] }))
            .collect();
        let values: Vec<_> = p
            .spans
            .iter()
            .map(|s| {
                json!({
                    "label": model.scheme.label_name(s.label),
                    "start": s.start,
                    "end": s.end,
                    "text": inst.tokens[s.start..s.end].join(" "),
                })
            })
            .collect();
        let tags: Vec<String> = p.tags.iter().map(|&t| model.scheme.tag_name(t)).collect();
        out.push_str(&serde_json::to_string(
            &json!({ "id": inst.id, "attributes": attributes, "values": values, "tags": tags }),
        )?);
        out.push('\n');
    }
    emit(a.out.as_deref(), &out)
}

pub fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let data = load_eval_data(&model, &a.data)?;
    let inst = data
        .iter()
        .find(|i| i.id == a.instance_id)
        .ok_or_else(|| Error::contract(format!("no instance with id `{}`", a.instance_id)))?;
    let dump = inspect_gates(&model, inst)?;
    match &a.out {
        Some(dir) => {
            write_file(&dir.join("global_gates.csv"), &dump.global_csv())?;
            write_file(&dir.join("regional_gates.csv"), &dump.regional_csv())?;
            write_file(&dir.join("gates.json"), &pretty(&dump)?)
        }
        None => emit(None, &format!("{}\n{}", dump.global_csv(), dump.regional_csv())),
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Awareness(a) => cmd_awareness(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

/// Parses `std::env::args`, runs the command and returns the process exit code.
pub fn main_exit_code() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
