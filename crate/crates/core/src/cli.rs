//! Command-line front end.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::adapter::{
    combine, extract_blora, load_adapter, merge_into_base, save_adapter, scale_adapter, LoraAdapter, Role,
};
use crate::analysis::{
    eval_similarity, load_embeddings, probe_blocks, prompt_pairs, Embedder, EvalReport, LabelLists, ProbeSetup,
    StubEmbedder, REFERENCE_CONTENT_SCORE, REFERENCE_STYLE_SCORE,
};
use crate::checkpoint::TensorFile;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::topology::{block_of_key, keymap_document, BlockId, NamingScheme};
use crate::toy::{pair_grid, train_blora, PromptEncoder, SyntheticFamily, ToyConfig, ToyModel, TrainSpec};

pub const MANIFEST_KEY: &str = "blora.manifest";

#[derive(Debug, Parser)]
#[command(name = "blora", version, about = "Block-indexed LoRA adapter toolkit")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Output file (adapters, merged weights, or reports).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-block tensor counts, ranks, dtypes and metadata of an adapter file.
    Inspect { file: PathBuf },
    /// The block ↔ key-stem mapping table.
    Keymap {
        #[arg(long, default_value = "diffusers")]
        scheme: NamingScheme,
    },
    /// Keep only the stems of one block.
    Extract {
        file: PathBuf,
        #[arg(long)]
        block: BlockId,
        #[arg(long)]
        role: Role,
    },
    /// Union of a content adapter and a style adapter from disjoint blocks.
    Combine { content: PathBuf, style: PathBuf },
    /// Multiply every pair's strength by `alpha`.
    Scale {
        file: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        alpha: f32,
    },
    /// Dense `W0 + alpha·ΔW` for every adapted base weight.
    Merge {
        base: PathBuf,
        adapter: PathBuf,
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        alpha: f32,
    },
    /// Train block adapters on the toy network.
    TrainToy(TrainArgs),
    /// Per-block prompt-injection attribution on the toy network.
    Probe(ProbeArgs),
    /// Style / content similarity from precomputed embeddings.
    Eval(EvalArgs),
    /// Train every block pair and report final losses.
    PairGrid(TrainArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_delimiter = ',', default_value = "W4,W5")]
    blocks: Vec<BlockId>,
    #[arg(long, default_value_t = TrainSpec::DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = TrainSpec::DEFAULT_LR)]
    lr: f32,
    #[arg(long, default_value_t = TrainSpec::DEFAULT_RANK)]
    rank: usize,
    /// Seeds the synthetic sample family.
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
    #[arg(long, default_value_t = 0)]
    content_label: u32,
    #[arg(long, default_value_t = 0)]
    style_label: u32,
    #[arg(long, default_value = "A [v]")]
    prompt: String,
    #[arg(long, default_value_t = 1.0)]
    noise_level: f32,
    #[arg(long)]
    center_crop: Option<usize>,
    #[arg(long, default_value_t = 4)]
    grid_side: usize,
    /// Also write the frozen toy base weights here.
    #[arg(long)]
    base_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    /// Pairs per prompt family.
    #[arg(long, default_value_t = 400)]
    pairs: usize,
    /// Probe a fixture model in which only this block affects the output.
    #[arg(long)]
    hand_wired: Option<BlockId>,
    #[arg(long, value_delimiter = ',', default_value = "W1,W2,W3,W4,W5,W6")]
    blocks: Vec<BlockId>,
    #[arg(long, default_value_t = 4)]
    grid_side: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Tensor file mapping labels to embedding vectors.
    embeddings: PathBuf,
    /// `OUTPUT,STYLE_REF,CONTENT_REF` labels; repeatable.
    #[arg(long = "entry", value_name = "OUT,STYLE,CONTENT", required = true)]
    entries: Vec<String>,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Failures print one `error[<code>]: <message>` line
/// to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            e.kind() as i32
        }
    }
}

/// An `f32` as the JSON number it prints as (`5e-5`, not `4.999999873689376e-5`).
fn num(v: f32) -> Value {
    serde_json::from_str(&v.to_string()).unwrap_or(Value::Null)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of the adapter's canonical serialization, so equivalent inputs in
/// either naming scheme hash alike.
fn adapter_digest(adapter: &LoraAdapter) -> Result<String> {
    Ok(sha256_hex(&save_adapter(adapter)?.serialize()))
}

struct Manifest {
    command: &'static str,
    flags: BTreeMap<&'static str, Value>,
    inputs: Vec<(&'static str, String)>,
}

impl Manifest {
    fn new(command: &'static str) -> Self {
        Manifest {
            command,
            flags: BTreeMap::new(),
            inputs: Vec::new(),
        }
    }

    fn flag(mut self, name: &'static str, value: impl Into<Value>) -> Self {
        self.flags.insert(name, value.into());
        self
    }

    fn input(mut self, role: &'static str, digest: String) -> Self {
        self.inputs.push((role, digest));
        self
    }

    fn render(&self, seed: u64) -> String {
        let inputs: Vec<Value> = self
            .inputs
            .iter()
            .map(|(role, d)| json!({ "role": role, "sha256": d }))
            .collect();
        json!({
            "tool": "blora",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "flags": self.flags,
            "seed": seed,
            "inputs": inputs,
        })
        .to_string()
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
}

impl Ctx<'_> {
    fn out_path(&self) -> Result<&Path> {
        self.cli
            .out
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("this command writes a file; pass --out PATH".into()))
    }

    fn read_adapter(&self, path: &Path) -> Result<LoraAdapter> {
        load_adapter(&TensorFile::read(path)?)
    }

    fn write_file(&self, file: &TensorFile) -> Result<()> {
        let path = self.out_path()?;
        let bytes = file.serialize();
        std::fs::write(path, &bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        if self.cli.json {
            self.emit(&json!({
                "output": path.display().to_string(),
                "tensors": file.len(),
                "bytes": bytes.len(),
                "sha256": sha256_hex(&bytes),
            }))
        } else {
            self.say(&format!("wrote {} ({} tensors)", path.display(), file.len()))
        }
    }

    fn write_adapter(&self, mut adapter: LoraAdapter, manifest: Manifest) -> Result<()> {
        adapter.set_metadata(MANIFEST_KEY, manifest.render(self.cli.seed))?;
        self.write_file(&save_adapter(&adapter)?)
    }

    fn say(&self, text: &str) -> Result<()> {
        let mut out = std::io::stdout().lock();
        writeln!(out, "{text}").map_err(|e| Error::io("writing stdout", e))
    }

    /// A JSON report: to `--out` when given, else stdout.
    fn emit(&self, value: &Value) -> Result<()> {
        let text = serde_json::to_string_pretty(value).expect("json values serialize");
        self.say(&text)
    }

    fn report(&self, value: &Value) -> Result<()> {
        match &self.cli.out {
            Some(path) => {
                let text = serde_json::to_string_pretty(value).expect("json values serialize") + "\n";
                std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
            }
            None => self.emit(value),
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let ctx = Ctx { cli };
    match &cli.command {
        Command::Inspect { file } => inspect(&ctx, file),
        Command::Keymap { scheme } => ctx.report(&keymap_document(*scheme)),
        Command::Extract { file, block, role } => {
            let adapter = ctx.read_adapter(file)?;
            let digest = adapter_digest(&adapter)?;
            let b = extract_blora(&adapter, *block, *role)?;
            let manifest = Manifest::new("extract")
                .flag("block", block.name())
                .flag("role", role.as_str())
                .input("adapter", digest);
            ctx.write_adapter(b.into_adapter(), manifest)
        }
        Command::Combine { content, style } => {
            let (c, s) = (ctx.read_adapter(content)?, ctx.read_adapter(style)?);
            let manifest = Manifest::new("combine")
                .input("content", adapter_digest(&c)?)
                .input("style", adapter_digest(&s)?);
            let (combined, warnings) = combine(&c, &s)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            ctx.write_adapter(combined, manifest)
        }
        Command::Scale { file, alpha } => {
            let adapter = ctx.read_adapter(file)?;
            let manifest = Manifest::new("scale")
                .flag("alpha", num(*alpha))
                .input("adapter", adapter_digest(&adapter)?);
            ctx.write_adapter(scale_adapter(&adapter, *alpha)?, manifest)
        }
        Command::Merge { base, adapter, alpha } => {
            let base_file = TensorFile::read(base)?;
            let a = ctx.read_adapter(adapter)?;
            let manifest = Manifest::new("merge")
                .flag("alpha", num(*alpha))
                .input("base", sha256_hex(&base_file.serialize()))
                .input("adapter", adapter_digest(&a)?);
            let mut merged = merge_into_base(&base_file, &a, *alpha)?;
            merged.set_metadata(MANIFEST_KEY, manifest.render(cli.seed));
            ctx.write_file(&merged)
        }
        Command::TrainToy(args) => train_toy(&ctx, args),
        Command::Probe(args) => probe(&ctx, args),
        Command::Eval(args) => eval(&ctx, args),
        Command::PairGrid(args) => grid(&ctx, args),
    }
}

fn inspect(ctx: &Ctx<'_>, path: &Path) -> Result<()> {
    let file = TensorFile::read(path)?;
    let adapter = load_adapter(&file)?;
    let mut blocks: Vec<Value> = Vec::new();
    for b in BlockId::ALL {
        let stems: Vec<&str> = adapter.stems_in_block(b);
        if stems.is_empty() {
            continue;
        }
        let mut ranks: Vec<usize> = stems.iter().map(|s| adapter.get(s).expect("listed").rank()).collect();
        ranks.sort_unstable();
        ranks.dedup();
        let mut dtypes: Vec<&str> = file
            .entries()
            .filter(|e| block_of_key(&e.name).is_ok_and(|x| x == b))
            .map(|e| e.dtype.as_str())
            .collect();
        dtypes.sort_unstable();
        dtypes.dedup();
        let tensors = stems
            .iter()
            .map(|s| {
                if adapter.get(s).expect("listed").network_alpha().is_some() {
                    3
                } else {
                    2
                }
            })
            .sum::<usize>();
        blocks.push(json!({
            "block": b.name(),
            "index": b.index(),
            "stems": stems.len(),
            "tensors": tensors,
            "ranks": ranks,
            "dtypes": dtypes,
        }));
    }
    let out_of_topology: Vec<&str> = adapter.out_of_topology();
    let report = json!({
        "file": path.display().to_string(),
        "tensors": file.len(),
        "stems": adapter.len(),
        "blocks": blocks,
        "out_of_topology": out_of_topology,
        "metadata": file.metadata(),
    });
    if ctx.cli.json {
        return ctx.report(&report);
    }
    let mut lines = vec![format!(
        "{}: {} tensors, {} stems",
        path.display(),
        file.len(),
        adapter.len()
    )];
    for b in report["blocks"].as_array().expect("array") {
        lines.push(format!(
            "  {}  stems {:>3}  tensors {:>3}  ranks {}  dtypes {}",
            b["block"].as_str().unwrap_or_default(),
            b["stems"],
            b["tensors"],
            b["ranks"],
            b["dtypes"]
        ));
    }
    for s in &out_of_topology {
        lines.push(format!("  out-of-topology: {s}"));
    }
    for (k, v) in file.metadata() {
        lines.push(format!("  meta {k} = {v}"));
    }
    ctx.say(&lines.join("\n"))
}

struct ToySetup {
    model: ToyModel,
    spec: TrainSpec,
    family: SyntheticFamily,
}

fn toy_setup(ctx: &Ctx<'_>, args: &TrainArgs) -> Result<ToySetup> {
    let config = ToyConfig {
        seed: ctx.cli.seed,
        ..ToyConfig::default()
    };
    let model = ToyModel::new(config.clone())?;
    let encoder = PromptEncoder::new(ctx.cli.seed, config.prompt_tokens, config.prompt_dim);
    let mut spec = TrainSpec::new(encoder.embed(&args.prompt), args.blocks.iter().copied());
    spec.steps = args.steps;
    spec.learning_rate = args.lr;
    spec.rank = args.rank;
    spec.seed = ctx.cli.seed;
    spec.noise_level = args.noise_level;
    spec.center_crop = args.center_crop;
    spec.validate()?;
    let family = SyntheticFamily::new(args.grid_side, config.token_dim, args.sample_seed)?;
    Ok(ToySetup { model, spec, family })
}

fn train_flags(m: Manifest, args: &TrainArgs, spec: &TrainSpec) -> Manifest {
    let blocks: Vec<String> = spec.blocks.iter().map(|b| b.name()).collect();
    m.flag("blocks", blocks)
        .flag("steps", args.steps)
        .flag("lr", num(args.lr))
        .flag("rank", args.rank)
        .flag("sample_seed", args.sample_seed)
        .flag("content_label", args.content_label)
        .flag("style_label", args.style_label)
        .flag("prompt", args.prompt.clone())
        .flag("noise_level", num(args.noise_level))
        .flag("center_crop", args.center_crop)
        .flag("grid_side", args.grid_side)
        .flag(
            "adam",
            json!({ "beta1": num(spec.adam.beta1), "beta2": num(spec.adam.beta2), "eps": num(spec.adam.eps) }),
        )
}

fn train_toy(ctx: &Ctx<'_>, args: &TrainArgs) -> Result<()> {
    let out = ctx.out_path()?;
    let ToySetup { model, spec, family } = toy_setup(ctx, args)?;
    let sample = family.sample(args.content_label, args.style_label);
    let outcome = train_blora(&model, &sample, &spec)?;
    if let Some(base_out) = &args.base_out {
        model.base_file()?.write(base_out)?;
    }
    let manifest = train_flags(Manifest::new("train-toy"), args, &spec);
    let mut adapter = outcome.adapter.clone();
    adapter.set_metadata(crate::adapter::META_PROMPT, args.prompt.clone())?;
    adapter.set_metadata(MANIFEST_KEY, manifest.render(ctx.cli.seed))?;
    let file = save_adapter(&adapter)?;
    file.write(out)?;
    let summary = json!({
        "output": out.display().to_string(),
        "tensors": file.len(),
        "initial_loss": outcome.initial_loss,
        "final_loss": outcome.final_loss,
        "reduction": outcome.reduction(),
        "steps": spec.steps,
        "lr": num(spec.learning_rate),
        "rank": spec.rank,
    });
    if ctx.cli.json {
        ctx.emit(&summary)
    } else {
        ctx.say(&format!(
            "wrote {} ({} tensors); loss {:.6} -> {:.6} ({:.1}% lower)",
            out.display(),
            file.len(),
            outcome.initial_loss,
            outcome.final_loss,
            100.0 * outcome.reduction()
        ))
    }
}

fn grid(ctx: &Ctx<'_>, args: &TrainArgs) -> Result<()> {
    let ToySetup { model, spec, family } = toy_setup(ctx, args)?;
    let sample = family.sample(args.content_label, args.style_label);
    let g = pair_grid(&model, &sample, &spec)?;
    let median = g.median();
    let report = json!({
        "losses": g.losses,
        "initial_loss": g.initial_loss,
        "median": median,
        "cell_4_5": g.losses[4][5],
        "cell_4_5_at_or_below_median": g.losses[4][5] <= median,
        "manifest": serde_json::from_str::<Value>(&train_flags(Manifest::new("pair-grid"), args, &spec).render(ctx.cli.seed)).expect("valid json"),
    });
    ctx.report(&report)
}

fn probe(ctx: &Ctx<'_>, args: &ProbeArgs) -> Result<()> {
    let config = ToyConfig {
        seed: ctx.cli.seed,
        ..ToyConfig::default()
    };
    let model = match args.hand_wired {
        Some(b) => ToyModel::hand_wired(config.clone(), b, 1.0)?,
        None => ToyModel::new(config.clone())?,
    };
    let labels = LabelLists::builtin();
    let (content, style) = (labels.content_prompts(), labels.style_prompts());
    let encoder = PromptEncoder::new(ctx.cli.seed, config.prompt_tokens, config.prompt_dim);
    let embedder = StubEmbedder::new(ctx.cli.seed, config.token_dim, content.iter().chain(&style).cloned());
    let tokens = args.grid_side * args.grid_side;
    let latent = Tensor::new(
        vec![tokens, config.token_dim],
        Rng::for_label(ctx.cli.seed, "probe", "latent").normal_vec(tokens * config.token_dim, 1.0),
    )?;
    let setup = ProbeSetup {
        model: &model,
        encoder: &encoder,
        embedder: &embedder,
        latent: &latent,
        blocks: args.blocks.clone(),
        allow_identity: false,
    };
    let report = probe_blocks(
        &setup,
        &prompt_pairs(&content, args.pairs, ctx.cli.seed, "content")?,
        &prompt_pairs(&style, args.pairs, ctx.cli.seed, "style")?,
    )?;
    ctx.report(&serde_json::to_value(report).expect("plain struct"))
}

fn eval(ctx: &Ctx<'_>, args: &EvalArgs) -> Result<()> {
    let embedder = load_embeddings(&TensorFile::read(&args.embeddings)?)?;
    let mut entries = Vec::with_capacity(args.entries.len());
    for e in &args.entries {
        let parts: Vec<&str> = e.split(',').collect();
        let [out, style, content] = parts[..] else {
            return Err(Error::InvalidArgument(format!(
                "--entry wants OUTPUT,STYLE_REF,CONTENT_REF, got {e:?}"
            )));
        };
        entries.push(eval_similarity(
            &embedder.embed_text(out)?,
            &embedder.embed_text(style)?,
            &embedder.embed_text(content)?,
        )?);
    }
    let mut report = serde_json::to_value(EvalReport::from_entries(entries)).expect("plain struct");
    report["reference"] = json!({
        "note": "reference DINO ViT-B/8 scores; not reproducible with local embeddings",
        "style": { "mean": REFERENCE_STYLE_SCORE.0, "std": REFERENCE_STYLE_SCORE.1 },
        "content": { "mean": REFERENCE_CONTENT_SCORE.0, "std": REFERENCE_CONTENT_SCORE.1 },
    });
    ctx.report(&report)
}
