//! The experiment driver. Each subcommand reads and writes files under
//! one out-dir; every relative path, on the command line or in a config,
//! resolves against it. Only `judge` may touch the network, and only when
//! given an endpoint instead of a mock fixture.

use crate::adapters::{fuse, load_adapter_set, save_adapter_set, AdapterSet, AdapterSpec, LoraBlock};
use crate::config::ExperimentConfig;
use crate::corpus::{
    build_preference_pairs, read_jsonl, read_pairs_jsonl, synth_corpus, write_jsonl,
    write_pairs_jsonl, ControlAttribute, PromptStyle, SynthTask,
};
use crate::judge::{judge, HttpTransport, JudgeError, JudgeRequest, MockTransport, Transport};
use crate::manifest::ExperimentManifest;
use crate::metrics::{aggregate, EvalSample, SurfaceCueScorer};
use crate::model::{encode_prompt, encode_response, Decoder, TinyLm};
use crate::objectives::{run_schedule, Dataset, DpoExample, Objective, SftExample};
use crate::report::{combined_csv, combined_table, metrics_table, read_metrics_csv, write_metrics_csv};
use clap::{Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Judge(String),
}

impl CliError {
    /// 0 ok, 2 usage (clap), 3 config, 4 data, 5 judge transport.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Data(_) => 4,
            CliError::Judge(_) => 5,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

impl From<crate::config::ConfigError> for CliError {
    fn from(e: crate::config::ConfigError) -> CliError {
        CliError::Config(e.to_string())
    }
}

macro_rules! data_error_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> CliError {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error_from!(
    crate::corpus::CorpusError,
    crate::metrics::MetricError,
    crate::report::ReportError,
    crate::manifest::ManifestError,
    crate::model::ModelError,
    crate::adapters::AdapterError,
    crate::objectives::ObjectiveError
);

impl From<JudgeError> for CliError {
    fn from(e: JudgeError) -> CliError {
        match e {
            JudgeError::BadRequest(_) | JudgeError::Fixture { .. } => CliError::Data(e.to_string()),
            other => CliError::Judge(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "alab", version, about = "Adapter training and evaluation laboratory")]
struct Cli {
    /// Directory all relative paths resolve against.
    #[arg(long, default_value = ".", global = true)]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic control corpus with known-true labels.
    Synth {
        /// "length_control" or "copy_control".
        #[arg(long)]
        task: String,
        /// Number of records.
        #[arg(long, default_value_t = 96)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSONL; a .manifest.json sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build preference pairs by grouping records that share a source and
    /// differ in one control value.
    BuildPrefs {
        /// Record corpus (JSONL).
        #[arg(long)]
        input: PathBuf,
        /// Output pairs (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Prompt style baked into the pairs: "compact" or "instruct".
        #[arg(long, default_value = "compact")]
        style: String,
    },
    /// Run the training schedule in an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fuse trained adapters into one delta adapter by weighted sum.
    Fuse {
        /// Comma-separated adapter files, one per weight.
        #[arg(long, value_delimiter = ',')]
        adapters: Vec<PathBuf>,
        /// Comma-separated weights, e.g. "0.67,0.33". Used as given.
        #[arg(long)]
        weights: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate summaries for a record corpus and score them.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Adapter file to attach; omit for the zero-shot base model.
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Record corpus (JSONL) with reference summaries.
        #[arg(long)]
        data: PathBuf,
        /// Report destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// "table" or "csv".
        #[arg(long, default_value = "table")]
        format: String,
        /// Also write generations as judge-ready tasks (JSONL).
        #[arg(long)]
        gen_out: Option<PathBuf>,
    },
    /// Rate judge tasks for topical coherence via a chat endpoint or a
    /// mock reply fixture.
    Judge {
        /// Tasks (JSONL): {id, document, topics, summary}.
        #[arg(long)]
        input: PathBuf,
        /// Verdicts (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Fixture file of canned replies, one per line; no network.
        #[arg(long)]
        mock_replies: Option<PathBuf>,
        /// Chat-completions base URL; key read from ALAB_JUDGE_KEY.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value = "gpt-4o-mini")]
        model: String,
        /// Ratings per task.
        #[arg(long, default_value_t = 3)]
        samples: usize,
        /// Extra attempts per rating when a reply fails to parse.
        #[arg(long, default_value_t = 3)]
        retries: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 30)]
        timeout_secs: u64,
    },
    /// Combine eval CSVs into one method-by-bucket grid.
    Report {
        /// Comma-separated eval CSVs.
        #[arg(long, value_delimiter = ',')]
        inputs: Vec<PathBuf>,
        /// Row labels, one per input; file stems when omitted.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        /// "table" or "csv".
        #[arg(long, default_value = "table")]
        format: String,
        /// Destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn main() -> i32 {
    run_from(std::env::args_os())
}

/// Parses and runs one invocation; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let out_dir = cli.out_dir;
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", out_dir.display())))?;
    match cli.command {
        Command::Synth { task, n, seed, out } => cmd_synth(&out_dir, &task, n, seed, &out),
        Command::BuildPrefs { input, out, style } => cmd_build_prefs(&out_dir, &input, &out, &style),
        Command::Train { config } => cmd_train(&out_dir, &config),
        Command::Fuse { adapters, weights, out } => cmd_fuse(&out_dir, &adapters, &weights, &out),
        Command::Eval { config, adapter, data, out, format, gen_out } => {
            cmd_eval(&out_dir, &config, adapter.as_deref(), &data, out.as_deref(), &format, gen_out.as_deref())
        }
        Command::Judge {
            input,
            out,
            mock_replies,
            endpoint,
            model,
            samples,
            retries,
            temperature,
            timeout_secs,
        } => cmd_judge(
            &out_dir,
            &input,
            &out,
            mock_replies.as_deref(),
            endpoint.as_deref(),
            &model,
            samples,
            retries,
            temperature,
            timeout_secs,
        ),
        Command::Report { inputs, labels, format, out } => {
            cmd_report(&out_dir, &inputs, &labels, &format, out.as_deref())
        }
    }
}

fn resolve(out_dir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        out_dir.join(path)
    }
}

fn parse_style(style: &str) -> Result<PromptStyle> {
    match style {
        "compact" => Ok(PromptStyle::Compact),
        "instruct" => Ok(PromptStyle::Instruct),
        other => Err(CliError::Config(format!(
            "key style: unknown style {other:?}, expected \"compact\" or \"instruct\""
        ))),
    }
}

fn cmd_synth(out_dir: &Path, task: &str, n: usize, seed: u64, out: &Path) -> Result<()> {
    let task = match task {
        "length_control" => SynthTask::LengthControl,
        "copy_control" => SynthTask::CopyControl,
        other => {
            return Err(CliError::Config(format!(
                "key task: unknown task {other:?}, expected \"length_control\" or \"copy_control\""
            )))
        }
    };
    if n == 0 {
        return Err(CliError::Config("key n: must be positive".into()));
    }
    let records = synth_corpus(task, n, seed);
    let out_path = resolve(out_dir, out);
    write_jsonl(&records, &out_path)?;

    let mut manifest = ExperimentManifest::new(format!("synth-{}", task.as_str()), seed);
    manifest.param("task", task.as_str()).param("n", n);
    manifest.record_artifact(out.display().to_string(), &out_path)?;
    let manifest_path = out_path.with_extension("manifest.json");
    manifest.save(&manifest_path)?;

    println!("wrote {} records to {}", records.len(), out_path.display());
    println!("wrote {}", manifest_path.display());
    Ok(())
}

fn cmd_build_prefs(out_dir: &Path, input: &Path, out: &Path, style: &str) -> Result<()> {
    let style = parse_style(style)?;
    let records = read_jsonl(&resolve(out_dir, input))?;
    let build = build_preference_pairs(&records, style)?;
    let out_path = resolve(out_dir, out);
    write_pairs_jsonl(&build.pairs, &out_path)?;
    println!(
        "wrote {} pairs to {} ({} groups skipped for a single value, {} pairs skipped for identical summaries)",
        build.pairs.len(),
        out_path.display(),
        build.skipped_groups,
        build.skipped_identical
    );
    Ok(())
}

fn load_dataset(path: &Path, objective: &Objective, style: PromptStyle) -> Result<Dataset> {
    match objective {
        Objective::Sft => {
            let records = read_jsonl(path)?;
            let mut examples = Vec::with_capacity(records.len());
            for record in &records {
                let prompt = style.render(&record.attributes, &record.source)?;
                examples.push(SftExample {
                    prompt: encode_prompt(&prompt),
                    response: encode_response(&record.summary),
                });
            }
            Ok(Dataset::Sft(examples))
        }
        Objective::Dpo { .. } => {
            let pairs = read_pairs_jsonl(path)?;
            let examples = pairs
                .iter()
                .map(|pair| DpoExample {
                    prompt: encode_prompt(&pair.prompt),
                    chosen: encode_response(&pair.chosen),
                    rejected: encode_response(&pair.rejected),
                })
                .collect();
            Ok(Dataset::Dpo(examples))
        }
    }
}

fn cmd_train(out_dir: &Path, config_path: &Path) -> Result<()> {
    let config_file = resolve(out_dir, config_path);
    let config = ExperimentConfig::load(&config_file)?;
    let mut model = TinyLm::new(config.model_config())?;
    let opts = config.train_opts(&model)?;
    let schedule = config.schedule();
    let style = config.prompt_style()?;

    let mut manifest = ExperimentManifest::new(&config.id, config.seed);
    manifest.config = config_path.display().to_string();
    manifest.record_input(config_path.display().to_string(), &config_file)?;

    let mut datasets: BTreeMap<String, Dataset> = BTreeMap::new();
    for stage in &schedule.stages {
        if !datasets.contains_key(&stage.dataset) {
            let data_path = resolve(out_dir, Path::new(&stage.dataset));
            datasets.insert(stage.dataset.clone(), load_dataset(&data_path, &opts.objective, style)?);
            manifest.record_input(stage.dataset.clone(), &data_path)?;
        }
    }

    let outcome = run_schedule(&mut model, &schedule, &datasets, &opts)?;

    for (name, set) in &outcome.artifacts {
        let file_name = format!("{}.{}.adapter", config.id, name);
        let file = out_dir.join(&file_name);
        save_adapter_set(&file, set)?;
        manifest.record_artifact(file_name.clone(), &file)?;
        println!("wrote {}", file.display());
    }

    let losses_name = format!("{}.losses.csv", config.id);
    let losses_path = out_dir.join(&losses_name);
    let mut writer = csv::Writer::from_path(&losses_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", losses_path.display())))?;
    for point in &outcome.losses {
        writer
            .serialize(point)
            .map_err(|e| CliError::Data(format!("{}: {e}", losses_path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| CliError::Data(format!("{}: {e}", losses_path.display())))?;
    manifest.record_artifact(losses_name, &losses_path)?;

    let manifest_path = out_dir.join(format!("{}.manifest.json", config.id));
    manifest.save(&manifest_path)?;
    println!("wrote {}", manifest_path.display());

    for (stage, chunk) in outcome
        .losses
        .chunk_by(|a, b| a.stage == b.stage)
        .enumerate()
    {
        let first = chunk.first().expect("chunks are nonempty");
        let last = chunk.last().expect("chunks are nonempty");
        println!(
            "stage {stage}: loss {:.4} -> {:.4} over {} steps",
            first.loss,
            last.loss,
            chunk.len()
        );
    }
    Ok(())
}

fn cmd_fuse(out_dir: &Path, adapters: &[PathBuf], weights: &str, out: &Path) -> Result<()> {
    let weights: Vec<f64> = weights
        .split(',')
        .map(|token| {
            token.trim().parse::<f64>().map_err(|_| {
                CliError::Config(format!("key weights: {token:?} is not a number"))
            })
        })
        .collect::<Result<_>>()?;
    if adapters.is_empty() {
        return Err(CliError::Config("key adapters: list at least one adapter".into()));
    }
    if weights.len() != adapters.len() {
        return Err(CliError::Config(format!(
            "key weights: {} weights for {} adapters",
            weights.len(),
            adapters.len()
        )));
    }

    let mut sets: Vec<(String, AdapterSet)> = Vec::with_capacity(adapters.len());
    for path in adapters {
        let resolved = resolve(out_dir, path);
        sets.push((path.display().to_string(), load_adapter_set(&resolved)?));
    }
    let (first_name, first) = &sets[0];
    let keys: Vec<&String> = first.keys().collect();
    for (name, set) in &sets[1..] {
        if set.keys().collect::<Vec<_>>() != keys {
            return Err(CliError::Data(format!(
                "{name} attaches to different points than {first_name}"
            )));
        }
    }

    let mut fused = AdapterSet::new();
    for key in keys {
        let entries: Vec<(&LoraBlock, f64)> = sets
            .iter()
            .zip(&weights)
            .map(|((name, set), weight)| match set.get(key) {
                Some(AdapterSpec::Lora(block)) => Ok((block, *weight)),
                _ => Err(CliError::Data(format!(
                    "{name}: fusion needs a plain low-rank block at {key}"
                ))),
            })
            .collect::<Result<_>>()?;
        fused.insert(key.clone(), AdapterSpec::Delta(fuse(&entries)?));
    }

    let out_path = resolve(out_dir, out);
    save_adapter_set(&out_path, &fused)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

/// Low-rank specs become explicit deltas before generation, so an adapter
/// evaluated alone and the same adapter arriving through fusion follow one
/// arithmetic route and produce identical text.
fn canonical(spec: AdapterSpec) -> Result<AdapterSpec> {
    Ok(match spec {
        AdapterSpec::Lora(block) => AdapterSpec::Delta(block.delta()?),
        AdapterSpec::Stack(blocks) => {
            let entries: Vec<(&LoraBlock, f64)> = blocks.iter().map(|b| (b, 1.0)).collect();
            AdapterSpec::Delta(fuse(&entries)?)
        }
        other => other,
    })
}

fn topic_phrases(attributes: &[ControlAttribute]) -> Vec<String> {
    attributes
        .iter()
        .filter_map(|a| match a {
            ControlAttribute::Topic(phrases) => Some(phrases.clone()),
            _ => None,
        })
        .flatten()
        .collect()
}

fn cmd_eval(
    out_dir: &Path,
    config_path: &Path,
    adapter: Option<&Path>,
    data: &Path,
    out: Option<&Path>,
    format: &str,
    gen_out: Option<&Path>,
) -> Result<()> {
    let config = ExperimentConfig::load(&resolve(out_dir, config_path))?;
    let style = config.prompt_style()?;
    let mut model = TinyLm::new(config.model_config())?;
    if let Some(adapter_path) = adapter {
        let set = load_adapter_set(&resolve(out_dir, adapter_path))?;
        for (name, spec) in set {
            model.attach(&name, canonical(spec)?)?;
        }
    }

    let records = read_jsonl(&resolve(out_dir, data))?;
    let mut samples = Vec::with_capacity(records.len());
    let mut tasks = Vec::new();
    for record in &records {
        let prompt = style.render(&record.attributes, &record.source)?;
        let generated = model.complete_text(&prompt, config.eval.max_new_tokens, Decoder::Greedy)?;
        let bucket = record
            .attributes
            .iter()
            .map(|a| a.value_label())
            .collect::<Vec<_>>()
            .join("+");
        if gen_out.is_some() {
            tasks.push(json!({
                "id": record.id,
                "document": record.source,
                "topics": topic_phrases(&record.attributes),
                "summary": generated,
            }));
        }
        samples.push(EvalSample {
            bucket,
            article: record.source.clone(),
            reference: record.summary.clone(),
            generated,
        });
    }

    let reports = aggregate(&samples, &SurfaceCueScorer)?;
    let rendered = match format {
        "table" => metrics_table(&reports),
        "csv" => {
            let tmp = out
                .map(|p| resolve(out_dir, p))
                .ok_or_else(|| CliError::Config("key out: csv format needs --out".into()))?;
            write_metrics_csv(&reports, &tmp)?;
            println!("wrote {}", tmp.display());
            String::new()
        }
        other => {
            return Err(CliError::Config(format!(
                "key format: unknown format {other:?}, expected \"table\" or \"csv\""
            )))
        }
    };
    if format == "table" {
        match out {
            Some(path) => {
                let path = resolve(out_dir, path);
                std::fs::write(&path, &rendered)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
                println!("wrote {}", path.display());
            }
            None => print!("{rendered}"),
        }
    }

    if let Some(gen_path) = gen_out {
        let gen_path = resolve(out_dir, gen_path);
        let mut file = std::fs::File::create(&gen_path)
            .map_err(|e| CliError::Data(format!("{}: {e}", gen_path.display())))?;
        for task in &tasks {
            writeln!(file, "{task}").map_err(|e| CliError::Data(format!("{}: {e}", gen_path.display())))?;
        }
        println!("wrote {}", gen_path.display());
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct JudgeTask {
    id: String,
    document: String,
    #[serde(default)]
    topics: Vec<String>,
    summary: String,
}

#[allow(clippy::too_many_arguments)]
fn cmd_judge(
    out_dir: &Path,
    input: &Path,
    out: &Path,
    mock_replies: Option<&Path>,
    endpoint: Option<&str>,
    model: &str,
    samples: usize,
    retries: usize,
    temperature: f64,
    timeout_secs: u64,
) -> Result<()> {
    let mut transport: Box<dyn Transport> = match (mock_replies, endpoint) {
        (Some(fixture), None) => Box::new(MockTransport::from_fixture(&resolve(out_dir, fixture))?),
        (None, Some(endpoint)) => Box::new(HttpTransport::from_env(
            endpoint,
            std::time::Duration::from_secs(timeout_secs),
        )),
        _ => {
            return Err(CliError::Config(
                "key endpoint: give exactly one of --mock-replies or --endpoint".into(),
            ))
        }
    };

    let input_path = resolve(out_dir, input);
    let text = std::fs::read_to_string(&input_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", input_path.display())))?;
    let mut rows = Vec::new();
    let mut unavailable = 0usize;
    for (i, line) in text.lines().enumerate() {
        let task: JudgeTask = serde_json::from_str(line)
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", input_path.display(), i + 1)))?;
        let mut request = JudgeRequest::new(task.document, task.topics, task.summary);
        request.samples = samples;
        request.max_retries = retries;
        request.model = model.to_string();
        request.temperature = temperature;
        match judge(&request, transport.as_mut()) {
            Ok(verdict) => rows.push(json!({
                "id": task.id,
                "scores": verdict.scores,
                "mean": verdict.mean,
                "std": verdict.std,
                "failures": verdict.failures,
            })),
            Err(JudgeError::Unavailable { attempts }) => {
                unavailable += 1;
                rows.push(json!({"id": task.id, "unavailable": true, "attempts": attempts}));
            }
            Err(JudgeError::BadRequest(what)) => {
                return Err(CliError::Data(format!(
                    "{}:{}: {what}",
                    input_path.display(),
                    i + 1
                )))
            }
            Err(other) => return Err(other.into()),
        }
    }

    let out_path = resolve(out_dir, out);
    let mut file = std::fs::File::create(&out_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", out_path.display())))?;
    for row in &rows {
        writeln!(file, "{row}").map_err(|e| CliError::Data(format!("{}: {e}", out_path.display())))?;
    }
    println!("judged {} tasks, {} unavailable; wrote {}", rows.len(), unavailable, out_path.display());
    Ok(())
}

fn cmd_report(
    out_dir: &Path,
    inputs: &[PathBuf],
    labels: &[String],
    format: &str,
    out: Option<&Path>,
) -> Result<()> {
    if inputs.is_empty() {
        return Err(CliError::Config("key inputs: list at least one eval csv".into()));
    }
    if !labels.is_empty() && labels.len() != inputs.len() {
        return Err(CliError::Config(format!(
            "key labels: {} labels for {} inputs",
            labels.len(),
            inputs.len()
        )));
    }
    let mut entries = Vec::with_capacity(inputs.len());
    for (i, path) in inputs.iter().enumerate() {
        let label = match labels.get(i) {
            Some(label) => label.clone(),
            None => path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        };
        entries.push((label, read_metrics_csv(&resolve(out_dir, path))?));
    }
    let rendered = match format {
        "table" => combined_table(&entries)?,
        "csv" => combined_csv(&entries)?,
        other => {
            return Err(CliError::Config(format!(
                "key format: unknown format {other:?}, expected \"table\" or \"csv\""
            )))
        }
    };
    match out {
        Some(path) => {
            let path = resolve(out_dir, path);
            std::fs::write(&path, &rendered)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            println!("wrote {}", path.display());
        }
        None => print!("{rendered}"),
    }
    Ok(())
}
