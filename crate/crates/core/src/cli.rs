// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line interface. [`run`] parses arguments, executes one subcommand
//! and returns the process exit code: 0 on success, 1 on a runtime failure,
//! 2 on a usage or input-parse failure.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::aca::{
    self, AcaOptions, AcaTemplates, LlmBackend, LocalBackend, RemoteBackend, RemoteShape,
    ScriptedBackend,
};
use crate::chat::{generate, render_prompt, Turn};
use crate::error::Error;
use crate::eval::{self, EvalOptions, EvalReport};
use crate::hub::Hub;
use crate::model::{
    fixtures, load_model, ModelConfig, ModelHandle, ModelWeights, PositionalScheme, Tokenizer,
};
use crate::service::{self, AppState, ServiceConfig};
use crate::steering::{
    default_layer, extract_control_vector, gamma_sweep, make_hooks, PromptPairSet, ReadPosition,
    SteeringPlan,
};

#[derive(Debug, Parser)]
#[command(
    name = "controllm",
    version,
    about = "Steer transformer behaviour with residual-stream control vectors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct ModelArgs {
    /// Model config file (`key = value` lines).
    #[arg(long)]
    model: PathBuf,
    /// Weights file.
    #[arg(long)]
    weights: PathBuf,
    /// Optional vocabulary file; defaults to the byte tokenizer.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
struct PlanArgs {
    /// Trait to apply; repeat for several entries.
    #[arg(long = "trait")]
    traits: Vec<String>,
    /// γ for the trait at the same position.
    #[arg(long = "gamma", allow_negative_numbers = true)]
    gammas: Vec<f32>,
    /// Layers for the trait at the same position, e.g. `2,3` or `1-3`. When
    /// omitted entirely, every stored layer is used.
    #[arg(long = "layers")]
    layers: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    Mpi,
    Lm,
    Reason,
    Sycophancy,
    /// Raw logit of `--token` after `--prompt` (sweep only).
    Logit,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Positional {
    Rotary,
    LearnedAbsolute,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Shape {
    Chat,
    Completion,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a randomly initialised model config and weights file.
    Init {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 4)]
        n_layers: usize,
        #[arg(long, default_value_t = 32)]
        hidden_dim: usize,
        #[arg(long, default_value_t = 4)]
        n_heads: usize,
        #[arg(long, default_value_t = fixtures::TINY_VOCAB)]
        vocab_size: usize,
        #[arg(long, default_value_t = fixtures::TINY_MAX_SEQ)]
        max_seq_len: usize,
        #[arg(long, value_enum, default_value_t = Positional::Rotary)]
        positional: Positional,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Extract a control vector from a JSON Lines pairs file into the hub.
    Extract {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        hub: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Layers to record; defaults to two thirds of the depth.
        #[arg(long)]
        layers: Option<String>,
        #[arg(long, default_value = "last")]
        read_position: ReadPosition,
        /// Overwrite an existing entry for the same trait and model.
        #[arg(long)]
        replace: bool,
    },
    /// Inspect a hub file.
    Hub {
        #[command(subcommand)]
        command: HubCommand,
    },
    /// Greedy generation under an optional steering plan.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        hub: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        #[command(flatten)]
        plan: PlanArgs,
        /// Wrap the prompt as a single user turn of a chat transcript.
        #[arg(long)]
        chat: bool,
        /// Print `{prompt, continuation, plan, model_id}` as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run an evaluation task and write JSON and CSV reports.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        hub: Option<PathBuf>,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        /// Inventory prompt template with an `{item}` slot.
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long)]
        concurrency: Option<usize>,
    },
    /// Evaluate one metric over a list of γ values; prints `gamma,metric,status`.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        hub: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        /// Comma-separated γ values.
        #[arg(long = "gammas", allow_hyphen_values = true)]
        gamma_list: String,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Report metric to record; each task has a default.
        #[arg(long)]
        metric: Option<String>,
        /// Prompt for the `logit` task.
        #[arg(long)]
        prompt: Option<String>,
        /// Token id for the `logit` task.
        #[arg(long)]
        token: Option<u32>,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        #[arg(long)]
        template: Option<PathBuf>,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a trait dataset with an LLM, extract its vector and store it.
    Aca {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        hub: PathBuf,
        #[arg(long = "trait")]
        trait_name: String,
        #[arg(long)]
        layers: Option<String>,
        #[arg(long, default_value_t = 16)]
        pair_count: usize,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        /// HTTP endpoint of the generator; the key comes from `CONTROLLM_API_KEY`.
        #[arg(long, conflicts_with_all = ["fixture", "local_backend"])]
        backend_url: Option<String>,
        #[arg(long, default_value = "default")]
        backend_model: String,
        #[arg(long, value_enum, default_value_t = Shape::Chat)]
        backend_shape: Shape,
        /// Scripted responses (JSON) instead of a live generator.
        #[arg(long, conflicts_with = "local_backend")]
        fixture: Option<PathBuf>,
        /// Use the loaded model itself as the generator.
        #[arg(long)]
        local_backend: bool,
        /// Directory holding alternative prompt templates.
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Also write the generated pairs as JSON Lines.
        #[arg(long)]
        dataset_out: Option<PathBuf>,
        #[arg(long, default_value = "last")]
        read_position: ReadPosition,
        #[arg(long)]
        replace: bool,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        weights: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        hub: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Allowed CORS origin; repeat for several. Any origin when omitted.
        #[arg(long = "cors-origin")]
        cors_origins: Vec<String>,
        /// Static files (such as a web UI) served for unmatched paths.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
    },
}

#[derive(Debug, Subcommand)]
enum HubCommand {
    /// One line per entry.
    List {
        #[arg(long)]
        hub: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Every entry with its vectors, as JSON.
    Export {
        #[arg(long)]
        hub: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every checksum.
    Verify {
        #[arg(long)]
        hub: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(Error::Other(e.to_string()))
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Parse errors in user-supplied input files are usage failures.
fn input(e: Error) -> Failure {
    match e {
        Error::Schema { .. }
        | Error::UnknownTrait(_)
        | Error::InvalidPair(_)
        | Error::Config(_)
        | Error::Dimension(_) => Failure::Usage(e.to_string()),
        other => Failure::Runtime(other),
    }
}

/// Execute the command line `args` (including the program name).
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                0
            } else {
                let _ = write!(err, "{}", e.render());
                2
            };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn require_file(path: &Path, what: &str) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

/// Parse `2,3,5-7` into a layer set.
fn parse_layers(text: &str) -> CliResult<BTreeSet<usize>> {
    let bad = || usage(format!("invalid layer list `{text}`"));
    let mut set = BTreeSet::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (
                    a.trim().parse().map_err(|_| bad())?,
                    b.trim().parse().map_err(|_| bad())?,
                );
                if a > b {
                    return Err(bad());
                }
                set.extend(a..=b);
            }
            None => {
                set.insert(part.parse().map_err(|_| bad())?);
            }
        }
    }
    if set.is_empty() {
        return Err(bad());
    }
    Ok(set)
}

fn parse_gammas(text: &str) -> CliResult<Vec<f32>> {
    let gammas = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f32>()
                .map_err(|_| usage(format!("invalid gamma `{s}`")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if gammas.is_empty() {
        return Err(usage("gamma list is empty"));
    }
    Ok(gammas)
}

impl ModelArgs {
    fn check(&self) -> CliResult {
        require_file(&self.model, "model config")?;
        require_file(&self.weights, "weights file")?;
        if let Some(v) = &self.vocab {
            require_file(v, "vocabulary file")?;
        }
        Ok(())
    }

    fn load(&self) -> CliResult<ModelHandle> {
        let handle = load_model(&self.model, &self.weights).map_err(|e| e.at_stage("load"))?;
        Ok(match &self.vocab {
            Some(v) => {
                let vocab = handle.config().vocab_size;
                handle.with_tokenizer(
                    Tokenizer::from_vocab_file(v, vocab).map_err(|e| e.at_stage("load"))?,
                )
            }
            None => handle,
        })
    }
}

impl PlanArgs {
    fn check(&self, hub: Option<&Path>) -> CliResult<Vec<Option<BTreeSet<usize>>>> {
        if self.traits.len() != self.gammas.len() {
            return Err(usage(format!(
                "{} --trait flags but {} --gamma flags",
                self.traits.len(),
                self.gammas.len()
            )));
        }
        if !self.layers.is_empty() && self.layers.len() != self.traits.len() {
            return Err(usage("give --layers once per --trait, or not at all"));
        }
        if !self.traits.is_empty() && hub.is_none() {
            return Err(usage("--hub is required when --trait is given"));
        }
        if self.layers.is_empty() {
            Ok(vec![None; self.traits.len()])
        } else {
            self.layers
                .iter()
                .map(|l| parse_layers(l).map(Some))
                .collect()
        }
    }

    fn resolve(
        &self,
        layers: &[Option<BTreeSet<usize>>],
        hub: Option<&Path>,
        handle: &ModelHandle,
    ) -> CliResult<SteeringPlan> {
        let mut plan = SteeringPlan::vanilla();
        for ((name, gamma), layers) in self.traits.iter().zip(&self.gammas).zip(layers) {
            let hub = Hub::new(hub.expect("checked"));
            let control = hub
                .load(name, handle.model_id())
                .map_err(|e| e.at_stage("plan"))?;
            let layers = layers.clone().unwrap_or_else(|| control.layers());
            plan = plan.with_entry(Arc::new(control), layers, *gamma);
        }
        plan.validate(handle).map_err(|e| e.at_stage("plan"))?;
        Ok(plan)
    }
}

fn execute(command: Command, out: &mut dyn Write) -> CliResult {
    match command {
        Command::Init {
            model,
            weights,
            n_layers,
            hidden_dim,
            n_heads,
            vocab_size,
            max_seq_len,
            positional,
            seed,
        } => {
            let config = ModelConfig {
                n_layers,
                hidden_dim,
                n_heads,
                vocab_size,
                max_seq_len,
                norm_epsilon: 1e-5,
                positional_scheme: match positional {
                    Positional::Rotary => PositionalScheme::Rotary,
                    Positional::LearnedAbsolute => PositionalScheme::LearnedAbsolute,
                },
            };
            config.validate().map_err(input)?;
            let handle = ModelHandle::new(config.clone(), ModelWeights::random(&config, seed))?;
            handle.save(&model, &weights)?;
            writeln!(out, "model_id: {}", handle.model_id().to_hex())?;
            Ok(())
        }
        Command::Extract {
            model,
            hub,
            pairs,
            layers,
            read_position,
            replace,
        } => {
            require_file(&pairs, "pairs file")?;
            model.check()?;
            let layers = layers.as_deref().map(parse_layers).transpose()?;
            let text = std::fs::read_to_string(&pairs)
                .map_err(|e| usage(format!("{}: {e}", pairs.display())))?;
            let set = PromptPairSet::from_jsonl(&text).map_err(input)?;
            let handle = model.load()?;
            let layers =
                layers.unwrap_or_else(|| BTreeSet::from([default_layer(handle.n_layers())]));
            let vector = extract_control_vector(&handle, &set, &layers, read_position)
                .map_err(|e| e.at_stage("extract"))?;
            let id = Hub::new(&hub)
                .save(&vector, replace)
                .map_err(|e| e.at_stage("save"))?;
            writeln!(out, "trait: {}", vector.trait_name)?;
            writeln!(out, "pairs: {}", set.len())?;
            writeln!(out, "layers: {}", join(vector.layers()))?;
            writeln!(out, "entry: {id}")?;
            for (l, n) in vector.norms() {
                writeln!(out, "norm[{l}]: {n}")?;
            }
            Ok(())
        }
        Command::Hub { command } => hub_command(command, out),
        Command::Generate {
            model,
            hub,
            prompt,
            max_new,
            plan,
            chat,
            json,
        } => {
            let layers = plan.check(hub.as_deref())?;
            model.check()?;
            let handle = model.load()?;
            let steering = plan.resolve(&layers, hub.as_deref(), &handle)?;
            let text = if chat {
                render_prompt(&[Turn::user(&prompt)])
            } else {
                prompt.clone()
            };
            let continuation =
                generate(&handle, &steering, &text, max_new).map_err(|e| e.at_stage("generate"))?;
            if json {
                let doc = json!({
                    "prompt": prompt,
                    "continuation": continuation,
                    "plan": eval::plan_descriptor(&steering),
                    "model_id": handle.model_id().to_hex(),
                });
                writeln!(
                    out,
                    "{}",
                    serde_json::to_string_pretty(&doc).expect("serializable")
                )?;
            } else {
                writeln!(out, "{continuation}")?;
            }
            Ok(())
        }
        Command::Eval {
            model,
            hub,
            task,
            corpus,
            out: out_dir,
            plan,
            max_new,
            template,
            concurrency,
        } => {
            if task == Task::Logit {
                return Err(usage("the logit task is only available in sweep"));
            }
            let layers = plan.check(hub.as_deref())?;
            require_file(&corpus, "corpus")?;
            model.check()?;
            let template = read_template(template.as_deref())?;
            let corpus = Corpus::load(task, &corpus)?;
            let handle = model.load()?;
            let steering = plan.resolve(&layers, hub.as_deref(), &handle)?;
            let options = eval_options(max_new, concurrency);
            let report = run_task(&corpus, &template, &handle, &steering, &options)
                .map_err(|e| e.at_stage("eval"))?;
            report.write_to_dir(&out_dir)?;
            for m in &report.metrics {
                writeln!(out, "{} = {}", m.name, m.value)?;
            }
            Ok(())
        }
        Command::Sweep {
            model,
            hub,
            task,
            gamma_list,
            plan,
            corpus,
            metric,
            prompt,
            token,
            max_new,
            template,
            out: out_file,
        } => {
            let gammas = parse_gammas(&gamma_list)?;
            let mut plan = plan;
            if plan.gammas.is_empty() {
                plan.gammas = vec![0.0; plan.traits.len()];
            }
            if plan.traits.is_empty() {
                return Err(usage("sweep needs at least one --trait"));
            }
            let layers = plan.check(Some(&hub))?;
            model.check()?;
            let corpus = match task {
                Task::Logit => {
                    if prompt.is_none() || token.is_none() {
                        return Err(usage("the logit task needs --prompt and --token"));
                    }
                    None
                }
                _ => {
                    let path = corpus.ok_or_else(|| usage("--corpus is required for this task"))?;
                    require_file(&path, "corpus")?;
                    Some(Corpus::load(task, &path)?)
                }
            };
            let template = read_template(template.as_deref())?;
            let handle = model.load()?;
            let steering = plan.resolve(&layers, Some(&hub), &handle)?;
            let options = eval_options(max_new, None);
            let table =
                gamma_sweep(&steering, &gammas, |p| match &corpus {
                    None => {
                        let ids = handle.encode(prompt.as_deref().unwrap_or_default())?;
                        let mut hooks = make_hooks(p, &handle)?;
                        let logits = handle.forward(&ids, &mut hooks)?;
                        let t = token.unwrap_or_default() as usize;
                        logits.last_row().get(t).map(|&v| f64::from(v)).ok_or(
                            Error::TokenOutOfRange {
                                id: t as u32,
                                vocab: handle.config().vocab_size,
                            },
                        )
                    }
                    Some(c) => {
                        let report = run_task(c, &template, &handle, p, &options)?;
                        let name = metric.clone().unwrap_or_else(|| default_metric(&report));
                        report
                            .get(&name)
                            .ok_or_else(|| Error::Other(format!("report has no metric `{name}`")))
                    }
                })?;
            let csv = table.to_csv();
            match out_file {
                Some(p) => std::fs::write(&p, &csv).map_err(|e| Error::io(&p, e))?,
                None => write!(out, "{csv}")?,
            }
            if table.succeeded() == 0 {
                return Err(Failure::Runtime(Error::Other(
                    "every sweep row failed".into(),
                )));
            }
            Ok(())
        }
        Command::Aca {
            model,
            hub,
            trait_name,
            layers,
            pair_count,
            concurrency,
            backend_url,
            backend_model,
            backend_shape,
            fixture,
            local_backend,
            templates,
            dataset_out,
            read_position,
            replace,
        } => {
            if backend_url.is_none() && fixture.is_none() && !local_backend {
                return Err(usage(
                    "choose a generator: --backend-url, --fixture or --local-backend",
                ));
            }
            if let Some(f) = &fixture {
                require_file(f, "fixture")?;
            }
            model.check()?;
            let layers = layers.as_deref().map(parse_layers).transpose()?;
            let templates = match &templates {
                Some(dir) => AcaTemplates::from_dir(dir).map_err(input)?,
                None => AcaTemplates::default(),
            };
            let handle = Arc::new(model.load()?);
            let backend: Box<dyn LlmBackend> = match (backend_url, fixture) {
                (Some(url), _) => Box::new(RemoteBackend::new(
                    url,
                    backend_model,
                    match backend_shape {
                        Shape::Chat => RemoteShape::Chat,
                        Shape::Completion => RemoteShape::Completion,
                    },
                )),
                (None, Some(f)) => Box::new(ScriptedBackend::from_file(&f).map_err(input)?),
                (None, None) => Box::new(LocalBackend::new(Arc::clone(&handle))),
            };
            let layers =
                layers.unwrap_or_else(|| BTreeSet::from([default_layer(handle.n_layers())]));
            let options = AcaOptions {
                pair_count,
                concurrency,
                read_position,
                replace,
                templates,
                ..AcaOptions::default()
            };
            let outcome = aca::build_and_save(
                &trait_name,
                backend.as_ref(),
                &handle,
                &layers,
                &Hub::new(&hub),
                &options,
            )?;
            if let Some(p) = dataset_out {
                std::fs::write(&p, outcome.pairs.to_jsonl()).map_err(|e| Error::io(&p, e))?;
            }
            writeln!(out, "trait: {trait_name}")?;
            writeln!(out, "seed words: {}", outcome.seed.seed_words.join(", "))?;
            writeln!(
                out,
                "seed behaviors: {}",
                outcome.seed.seed_behaviors.join("; ")
            )?;
            writeln!(out, "pairs: {}", outcome.pairs.len())?;
            writeln!(out, "entry: {}", outcome.entry)?;
            Ok(())
        }
        Command::Serve {
            model,
            weights,
            vocab,
            hub,
            host,
            port,
            cors_origins,
            static_dir,
            max_new,
        } => {
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|_| usage(format!("invalid address {host}:{port}")))?;
            let handle = match (model, weights) {
                (Some(model), Some(weights)) => {
                    let args = ModelArgs {
                        model,
                        weights,
                        vocab,
                    };
                    args.check()?;
                    Some(Arc::new(args.load()?))
                }
                (Some(_), None) => return Err(usage("--model needs --weights")),
                _ => None,
            };
            let state = AppState::new(
                handle,
                Hub::new(hub),
                ServiceConfig {
                    cors_origins,
                    static_dir,
                    default_max_new: max_new,
                },
            );
            service::serve_blocking(addr, state, |bound| {
                let _ = writeln!(out, "listening on http://{bound}");
                let _ = out.flush();
            })?;
            Ok(())
        }
    }
}

fn hub_command(command: HubCommand, out: &mut dyn Write) -> CliResult {
    match command {
        HubCommand::List { hub, json } => {
            let entries = Hub::new(&hub).list()?;
            if json {
                writeln!(
                    out,
                    "{}",
                    serde_json::to_string_pretty(&entries).expect("serializable")
                )?;
            } else {
                for e in entries {
                    writeln!(
                        out,
                        "{}\t{}\tlayers={}\tpairs={}\tcreated={}",
                        e.trait_name,
                        e.model_id.short(),
                        join(e.layers.iter().copied()),
                        e.meta.pair_count,
                        e.meta.created_unix
                    )?;
                }
            }
        }
        HubCommand::Export { hub, out: dest } => {
            let doc =
                serde_json::to_string_pretty(&Hub::new(&hub).export_json()?).expect("serializable");
            match dest {
                Some(p) => std::fs::write(&p, doc + "\n").map_err(|e| Error::io(&p, e))?,
                None => writeln!(out, "{doc}")?,
            }
        }
        HubCommand::Verify { hub } => {
            let n = Hub::new(&hub).verify()?;
            writeln!(out, "{n} entries ok")?;
        }
    }
    Ok(())
}

fn join(it: impl IntoIterator<Item = usize>) -> String {
    it.into_iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn eval_options(max_new: usize, concurrency: Option<usize>) -> EvalOptions {
    let mut o = EvalOptions {
        max_new,
        ..EvalOptions::default()
    };
    if let Some(c) = concurrency {
        o.concurrency = c.max(1);
    }
    o
}

fn read_template(path: Option<&Path>) -> CliResult<String> {
    match path {
        Some(p) => {
            require_file(p, "template")?;
            Ok(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)
        }
        None => Ok(eval::default_mpi_template().to_string()),
    }
}

enum Corpus {
    Mpi(Vec<eval::MpiItem>),
    Lm(Vec<String>),
    Reason(Vec<eval::QaItem>),
    Sycophancy(Vec<eval::QaItem>),
}

impl Corpus {
    fn load(task: Task, path: &Path) -> CliResult<Self> {
        Ok(match task {
            Task::Mpi => Corpus::Mpi(eval::load_mpi_items(path).map_err(input)?),
            Task::Lm => Corpus::Lm(eval::load_text_corpus(path).map_err(input)?),
            Task::Reason => Corpus::Reason(eval::load_qa_items(path).map_err(input)?),
            Task::Sycophancy => Corpus::Sycophancy(eval::load_qa_items(path).map_err(input)?),
            Task::Logit => unreachable!("logit has no corpus"),
        })
    }
}

fn run_task(
    corpus: &Corpus,
    template: &str,
    handle: &ModelHandle,
    plan: &SteeringPlan,
    options: &EvalOptions,
) -> crate::Result<EvalReport> {
    match corpus {
        Corpus::Mpi(items) => {
            let run = eval::run_mpi(handle, items, template, plan, options)?;
            Ok(eval::mpi_report(&run, items, handle, plan))
        }
        Corpus::Lm(texts) => {
            let seqs = texts
                .iter()
                .map(|t| handle.encode(t))
                .collect::<crate::Result<Vec<_>>>()?;
            let m = eval::eval_language_modeling(handle, &seqs, plan, options)?;
            Ok(eval::lm_report(&m, handle, plan))
        }
        Corpus::Reason(items) => eval::run_reasoning(handle, items, plan, options),
        Corpus::Sycophancy(items) => eval::run_sycophancy(handle, items, plan, options),
    }
}

fn default_metric(report: &EvalReport) -> String {
    let preferred = match report.task.as_str() {
        "lm" => "perplexity",
        "reason" => "accuracy",
        "sycophancy" => "flip_rate",
        _ => "",
    };
    if !preferred.is_empty() {
        return preferred.to_string();
    }
    report
        .metrics
        .iter()
        .find(|m| m.name.starts_with("score_"))
        .map_or_else(|| "parse_failure_rate".to_string(), |m| m.name.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_lists() {
        assert_eq!(parse_layers("2,3").ok(), Some(BTreeSet::from([2, 3])));
        assert_eq!(
            parse_layers("1-3, 5").ok(),
            Some(BTreeSet::from([1, 2, 3, 5]))
        );
        assert!(parse_layers("").is_err());
        assert!(parse_layers("3-1").is_err());
        assert!(parse_layers("x").is_err());
    }

    #[test]
    fn gamma_lists() {
        assert_eq!(parse_gammas("-1, 0,1.5").ok(), Some(vec![-1.0, 0.0, 1.5]));
        assert!(parse_gammas(",").is_err());
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(["controllm", "--help"], &mut o, &mut e), 0);
        assert_eq!(run(["controllm", "bogus"], &mut o, &mut e), 2);
        let mut e = Vec::new();
        let code = run(
            [
                "controllm",
                "extract",
                "--model",
                "m",
                "--weights",
                "w",
                "--hub",
                "h",
                "--pairs",
                "/nonexistent/pairs.jsonl",
            ],
            &mut o,
            &mut e,
        );
        assert_eq!(code, 2);
        assert!(String::from_utf8_lossy(&e).contains("/nonexistent/pairs.jsonl"));
    }
}
