use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use imgtrace::attacks::{apply_attack, AttackKind, AttackSpec};
use imgtrace::bench::{run_bench, write_report, BenchConfig};
use imgtrace::detector::{self, DetectorModel, EmbeddingPair, TrainConfig};
use imgtrace::payload::{self, issue, keypair_load_or_generate, PayloadSpec};
use imgtrace::pipeline::{
    self, check_recovered, encode_scheme, image_stem, recover, verify_against, PayloadRegistry, PipelineParams,
    Recovered, Scheme, SchemeDiagnostic,
};
use imgtrace::Raster;

/// Watermark, attack, detect and trace images.
#[derive(Parser, Debug)]
#[command(name = "imgtrace", version)]
struct Cli {
    /// Directory holding the RSA key pair and the payload registry.
    #[arg(long, global = true, default_value = "keys")]
    key_dir: PathBuf,
    /// Output root.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed for every randomized step (bench timestamps, training).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON file with parameter overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create the key pair if absent and print its key id.
    Keygen,
    /// Sign a payload for USER and embed it with one or all schemes.
    Embed(EmbedArgs),
    /// Decode one scheme and verify it against the registered payloads.
    Decode(DecodeArgs),
    /// Decode and verify all five schemes.
    Verify(ImageArg),
    /// Apply one post-distribution attack.
    Attack(AttackArgs),
    /// Run the robustness benchmark over a corpus directory.
    Bench(BenchArgs),
    /// Train the harm detector on a JSONL embedding dataset.
    Train(TrainArgs),
    /// Score a JSONL embedding dataset with a trained detector.
    Classify(ClassifyArgs),
    /// Classify an (image, caption) pair and attribute it if harmful.
    Trace(TraceArgs),
}

#[derive(Args, Debug)]
struct ImageArg {
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    user: String,
    /// `all`, or one of lsb, dct, dwt, ss, dwt-ss.
    #[arg(long, default_value = "all")]
    scheme: String,
    /// Payload timestamp (seconds); defaults to now.
    #[arg(long)]
    timestamp: Option<u64>,
    #[arg(long, default_value_t = 1)]
    rules_version: u32,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    scheme: String,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long)]
    image: PathBuf,
    /// none, gaussian_blur (or blur), jpeg, resize.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    quality: Option<u8>,
    #[arg(long)]
    factor: Option<f64>,
    /// Defaults to `<out>/<stem>_attacked_<kind>.png`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Also save run 0's attacked images under `<out>/attacked`.
    #[arg(long)]
    persist: bool,
    /// Defaults to `<out>/bench.csv`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Defaults to `<out>/model.json`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[arg(long)]
    image: PathBuf,
    /// JSONL file holding the pair's embeddings.
    #[arg(long)]
    embeddings: PathBuf,
    /// Record id inside the JSONL file; defaults to the first record.
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CliConfig {
    key_dir: Option<PathBuf>,
    output_root: Option<PathBuf>,
    spread_strength: Option<f64>,
    corr_threshold: Option<f64>,
    checkpoint: Option<PathBuf>,
    threshold: Option<f64>,
    train: Option<TrainConfig>,
}

struct Ctx {
    key_dir: PathBuf,
    out: PathBuf,
    seed: u64,
    cfg: CliConfig,
}

impl Ctx {
    fn from_cli(cli: &Cli) -> anyhow::Result<Self> {
        let cfg: CliConfig = match &cli.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => CliConfig::default(),
        };
        Ok(Ctx {
            key_dir: cfg.key_dir.clone().unwrap_or_else(|| cli.key_dir.clone()),
            out: cfg.output_root.clone().unwrap_or_else(|| cli.out.clone()),
            seed: cli.seed,
            cfg,
        })
    }

    fn params(&self, pk: &payload::PublicKey) -> anyhow::Result<PipelineParams> {
        let mut p = PipelineParams::for_key(pk);
        if let Some(a) = self.cfg.spread_strength {
            p.spread.strength = a;
        }
        if let Some(t) = self.cfg.corr_threshold {
            p.spread.corr_threshold = t;
        }
        p.validate()?;
        Ok(p)
    }

    fn registry_path(&self) -> PathBuf {
        self.key_dir.join(PayloadRegistry::FILE_NAME)
    }

    fn checkpoint(&self, flag: Option<&PathBuf>) -> PathBuf {
        flag.cloned()
            .or_else(|| self.cfg.checkpoint.clone())
            .unwrap_or_else(|| self.out.join("model.json"))
    }

    fn model(&self, flag: Option<&PathBuf>) -> anyhow::Result<DetectorModel> {
        let path = self.checkpoint(flag);
        let mut m = DetectorModel::load(&path).with_context(|| format!("loading {}", path.display()))?;
        if let Some(t) = self.cfg.threshold {
            m.threshold = t;
            m.validate()?;
        }
        Ok(m)
    }
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse_scheme(name: &str) -> anyhow::Result<Scheme> {
    Scheme::parse(name).ok_or_else(|| anyhow!("unknown scheme {name:?} (expected lsb, dct, dwt, ss or dwt-ss)"))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn cmd_keygen(ctx: &Ctx) -> anyhow::Result<()> {
    let kp = keypair_load_or_generate(&ctx.key_dir)?;
    println!("{}", kp.key_id());
    Ok(())
}

#[derive(Serialize)]
struct EmbedOutput {
    image: String,
    key_id: String,
    payload: String,
    fingerprint: String,
    verification: Vec<SchemeDiagnostic>,
}

fn cmd_embed(ctx: &Ctx, args: &EmbedArgs) -> anyhow::Result<()> {
    let kp = keypair_load_or_generate(&ctx.key_dir)?;
    let params = ctx.params(kp.public_key())?;
    let spec = PayloadSpec::new(&args.user, args.rules_version, args.timestamp.unwrap_or_else(now));
    let sp = issue(&kp, &spec)?;

    let mut registry = PayloadRegistry::load(&ctx.registry_path())?;
    if registry.register(kp.key_id(), sp.clone()) {
        registry.save(&ctx.registry_path())?;
    }

    let verification = if args.scheme.eq_ignore_ascii_case("all") {
        pipeline::process_image_file(&args.image, &ctx.out, &sp, kp.public_key(), &params)?
            .verification
            .diagnostics
    } else {
        let scheme = parse_scheme(&args.scheme)?;
        let img = Raster::load(&args.image)?;
        let encoded = encode_scheme(&img, scheme, &sp, &params)?;
        let dir = if scheme.bit_level().is_some() {
            pipeline::ENCODED_DIR
        } else {
            pipeline::SPREAD_ENCODED_DIR
        };
        let path = ctx
            .out
            .join(image_stem(&args.image))
            .join(dir)
            .join(format!("{}.png", scheme.name().replace('-', "_")));
        encoded.save(&path)?;
        log::info!("wrote {}", path.display());
        vec![pipeline::verify_scheme(&encoded, scheme, &sp, kp.public_key(), &params)]
    };
    print_json(&EmbedOutput {
        image: args.image.display().to_string(),
        key_id: kp.key_id().to_string(),
        payload: sp.plaintext_label.clone(),
        fingerprint: sp.fingerprint().hex(),
        verification,
    })
}

#[derive(Serialize)]
struct DecodeOutput {
    image: String,
    scheme: Scheme,
    verdict: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    identity: Option<PayloadSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostic: Option<SchemeDiagnostic>,
}

fn registered(ctx: &Ctx) -> anyhow::Result<(payload::PublicKey, Vec<payload::SignedPayload>)> {
    let pk = payload::load_public_key(&ctx.key_dir)?;
    let registry = PayloadRegistry::load(&ctx.registry_path())?;
    let candidates = registry.candidates(&payload::key_id(&pk)).to_vec();
    Ok((pk, candidates))
}

fn cmd_decode(ctx: &Ctx, args: &DecodeArgs) -> anyhow::Result<()> {
    let scheme = parse_scheme(&args.scheme)?;
    let (pk, candidates) = registered(ctx)?;
    let params = ctx.params(&pk)?;
    let img = Raster::load(&args.image)?;
    let bit_length = candidates.first().map_or(payload::SIGNATURE_BYTES * 8, |c| c.bit_length);
    let recovered = recover(&img, scheme, bit_length, &params);
    let best = candidates
        .iter()
        .map(|sp| (sp, check_recovered(scheme, &recovered, sp, &pk, &params)))
        .max_by(|(_, a), (_, b)| {
            (a.valid, a.correlation.unwrap_or(f64::MIN)).partial_cmp(&(b.valid, b.correlation.unwrap_or(f64::MIN))).unwrap()
        });
    if let Recovered::Failed(reason) = &recovered {
        log::warn!("{scheme}: {reason}");
    }
    let valid = best.as_ref().is_some_and(|(_, d)| d.valid);
    let identity = match (&best, scheme.bit_level()) {
        (Some((sp, d)), Some(_)) if d.valid => Some(sp.identity()?),
        _ => None,
    };
    print_json(&DecodeOutput {
        image: args.image.display().to_string(),
        scheme,
        verdict: if valid { "VALID" } else { "INVALID" },
        identity,
        diagnostic: best.map(|(_, d)| d),
    })
}

fn cmd_verify(ctx: &Ctx, args: &ImageArg) -> anyhow::Result<()> {
    let (pk, candidates) = registered(ctx)?;
    let params = ctx.params(&pk)?;
    let img = Raster::load(&args.image)?;
    match verify_against(&img, &candidates, &pk, &params) {
        Some((_, v)) => print_json(&v),
        None => bail!("no payloads registered for key {}", payload::key_id(&pk)),
    }
}

fn cmd_attack(ctx: &Ctx, args: &AttackArgs) -> anyhow::Result<()> {
    let kind = AttackKind::parse(&args.kind).ok_or_else(|| anyhow!("unknown attack {:?}", args.kind))?;
    let mut spec = AttackSpec::of_kind(kind);
    if let Some(s) = args.sigma {
        spec.blur_sigma = s;
    }
    if let Some(q) = args.quality {
        spec.jpeg_quality = q;
    }
    if let Some(f) = args.factor {
        spec.resize_factor = f;
    }
    spec.validate()?;
    let img = Raster::load(&args.image)?;
    let attacked = apply_attack(&img, &spec)?;
    let path = args.output.clone().unwrap_or_else(|| {
        ctx.out
            .join(format!("{}_attacked_{}.png", image_stem(&args.image), spec.name()))
    });
    attacked.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_bench(ctx: &Ctx, args: &BenchArgs) -> anyhow::Result<()> {
    let kp = keypair_load_or_generate(&ctx.key_dir)?;
    let mut cfg = BenchConfig::new(&args.corpus);
    cfg.runs = args.runs;
    cfg.rng_base_seed = ctx.seed;
    cfg.persist_dir = args.persist.then(|| ctx.out.join("attacked"));
    let report = run_bench(&cfg, &kp)?;
    for (path, why) in &report.skipped {
        log::warn!("skipped {}: {why}", path.display());
    }
    let path = args.report.clone().unwrap_or_else(|| ctx.out.join("bench.csv"));
    write_report(&report, &path)?;
    print!("{}", std::fs::read_to_string(&path)?);
    Ok(())
}

fn cmd_train(ctx: &Ctx, args: &TrainArgs) -> anyhow::Result<()> {
    let data = detector::load_jsonl(&args.data)?;
    let mut cfg = ctx.cfg.train.clone().unwrap_or_default();
    cfg.rng_seed = ctx.seed;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(t) = ctx.cfg.threshold {
        cfg.threshold = t;
    }
    let detector::TrainOutcome { model, history, .. } = detector::train(&data, &cfg)?;
    let path = ctx.checkpoint(args.checkpoint.as_ref());
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    model.save(&path)?;
    let hist = path.with_file_name(format!("{}_history.csv", path.file_stem().unwrap_or_default().to_string_lossy()));
    detector::write_history_csv(&hist, &history)?;
    log::info!("wrote {} and {}", path.display(), hist.display());
    print_json(&serde_json::json!({
        "checkpoint": path.display().to_string(),
        "history": hist.display().to_string(),
        "metrics": detector::evaluate(&model, &data)?,
    }))
}

fn cmd_classify(ctx: &Ctx, args: &ClassifyArgs) -> anyhow::Result<()> {
    let model = ctx.model(args.checkpoint.as_ref())?;
    let data = detector::load_jsonl(&args.data)?;
    let probs = detector::predict(&model, &data)?;
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["id", "p", "y_hat"])?;
        for (pair, p) in data.iter().zip(&probs) {
            w.write_record([pair.id.clone(), format!("{p:.6}"), u8::from(*p >= model.threshold).to_string()])?;
        }
        w.flush()?;
    }
    match &args.output {
        Some(path) => std::fs::write(path, &buf)?,
        None => print!("{}", String::from_utf8(buf)?),
    }
    if data.iter().all(|p| p.label.is_some()) {
        match detector::evaluate(&model, &data) {
            Ok(m) => log::info!(
                "accuracy {:.4} precision {:.4} recall {:.4} auc {:.4}",
                m.accuracy,
                m.precision,
                m.recall,
                m.auc_roc
            ),
            Err(e) => log::info!("metrics unavailable: {e}"),
        }
    }
    Ok(())
}

fn select_pair(path: &Path, id: Option<&str>) -> anyhow::Result<EmbeddingPair> {
    let data = detector::load_jsonl(path)?;
    match id {
        Some(id) => data
            .into_iter()
            .find(|p| p.id == id)
            .ok_or_else(|| anyhow!("no record {id:?} in {}", path.display())),
        None => data.into_iter().next().ok_or_else(|| anyhow!("{} is empty", path.display())),
    }
}

fn cmd_trace(ctx: &Ctx, args: &TraceArgs) -> anyhow::Result<()> {
    let model = ctx.model(args.checkpoint.as_ref())?;
    let (pk, candidates) = registered(ctx)?;
    let params = ctx.params(&pk)?;
    let pair = select_pair(&args.embeddings, args.id.as_deref())?;
    let img = Raster::load(&args.image)?;
    let report = pipeline::trace(&img, &pair, &model, &pk, &candidates, &params)?;
    let text = pipeline::report_json(&report)?;
    if let Some(path) = &args.output {
        std::fs::write(path, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let ctx = Ctx::from_cli(&cli)?;
    match &cli.command {
        Command::Keygen => cmd_keygen(&ctx),
        Command::Embed(a) => cmd_embed(&ctx, a),
        Command::Decode(a) => cmd_decode(&ctx, a),
        Command::Verify(a) => cmd_verify(&ctx, a),
        Command::Attack(a) => cmd_attack(&ctx, a),
        Command::Bench(a) => cmd_bench(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Classify(a) => cmd_classify(&ctx, a),
        Command::Trace(a) => cmd_trace(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
