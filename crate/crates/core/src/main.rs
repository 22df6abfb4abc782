use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use engine_health::context::{explained_variance_scan, ContextMethod, ContextOptions, CovarianceKind};
use engine_health::correction::SmoothingScope;
use engine_health::detect::{read_verdicts, write_verdicts, DetectionMode};
use engine_health::eval::{evaluate, EvalCase, TruthLabeling};
use engine_health::inject::{inject_with_profile, signature_set, AmplitudeRange, DefectProfile, InjectionRecord, Signature};
use engine_health::pipeline::{project, verdicts, ModelBundle, PipelineConfig};
use engine_health::render::{distance_plot_svg, export_component_planes, UnitCounts};
use engine_health::schema::{load_table, save_table, split_train_test, Schema, ENVIRONMENTAL};
use engine_health::som::InitMethod;
use engine_health::synth::{generate, GeneratorConfig};
use engine_health::{Error, Result};

#[derive(Parser)]
#[command(name = "engine-health", version, about = "Context-corrected SOM anomaly detection for engine snapshots")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Seed for every random choice (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML or JSON file with default values for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Decision rule used by `detect` and `export-maps`.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic snapshot table.
    Generate(GenerateArgs),
    /// Split a table into random training and test parts.
    Split(SplitArgs),
    /// Fit the full model and write a bundle.
    Train(TrainArgs),
    /// Add a defect signature to a window of consecutive rows.
    Inject(InjectArgs),
    /// Write per-row verdicts for a table.
    Detect(DetectArgs),
    /// Score verdicts against injection records.
    Eval(EvalArgs),
    /// Write one component plane per variable.
    ExportMaps(ExportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    engines: Option<usize>,
    #[arg(long)]
    rows: Option<usize>,
    /// Number of flight regimes.
    #[arg(long)]
    regimes: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Also write the generator's ground truth as JSON.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    input: PathBuf,
    /// Number of training rows.
    #[arg(long)]
    train: usize,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of context clusters.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    context_method: Option<MethodArg>,
    #[arg(long, value_enum)]
    covariance: Option<CovarianceArg>,
    /// Map size as ROWSxCOLS.
    #[arg(long, value_parser = parse_grid)]
    som: Option<(usize, usize)>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    som_init: Option<InitArg>,
    #[arg(long)]
    percentile: Option<f64>,
    #[arg(long)]
    min_local_count: Option<usize>,
    /// Moving-average width.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, value_enum)]
    smoothing_scope: Option<ScopeArg>,
    /// Print the explained variance for K = 1..=MAX and exit.
    #[arg(long, value_name = "MAX")]
    explained_variance_scan: Option<usize>,
}

#[derive(Args)]
struct InjectArgs {
    #[arg(long)]
    input: PathBuf,
    /// Default signature name ("Defect 1".."Defect 12") or a JSON file.
    #[arg(long)]
    signature: String,
    /// Number of consecutive rows to corrupt.
    #[arg(long)]
    window: Option<usize>,
    /// Bundle whose residual scales convert the signature from residual
    /// standard deviations to table units. Without it offsets are used as-is.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    min_amplitude: Option<f64>,
    #[arg(long)]
    max_amplitude: Option<f64>,
    #[arg(long)]
    ramp: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    record: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Distance-versus-threshold SVG.
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Injection record used to mark correct detections on the plot.
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// RECORD.json,GLOBAL.csv[,LOCAL.csv]; repeat once per defect.
    #[arg(long = "case", required = true)]
    cases: Vec<String>,
    #[arg(long, value_enum)]
    labeling: Option<LabelingArg>,
    /// Report as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report as aligned text.
    #[arg(long)]
    text: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Table whose verdicts are overlaid as dots.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    cell_px: usize,
}

#[derive(Clone, Copy, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ModeArg {
    Global,
    Local,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Gmm,
    Hac,
}

#[derive(Clone, Copy, ValueEnum)]
enum CovarianceArg {
    Full,
    Diagonal,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Pca,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Engine,
    Global,
}

#[derive(Clone, Copy, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
enum LabelingArg {
    Overlap,
    Center,
}

impl From<ModeArg> for DetectionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Global => DetectionMode::Global,
            ModeArg::Local => DetectionMode::Local,
        }
    }
}

impl From<LabelingArg> for TruthLabeling {
    fn from(l: LabelingArg) -> Self {
        match l {
            LabelingArg::Overlap => TruthLabeling::Overlap,
            LabelingArg::Center => TruthLabeling::Center,
        }
    }
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let r: usize = r.trim().parse().map_err(|e| format!("rows: {e}"))?;
    let c: usize = c.trim().parse().map_err(|e| format!("cols: {e}"))?;
    if r == 0 || c == 0 {
        return Err("map dimensions must be positive".into());
    }
    Ok((r, c))
}

/// Defaults read from `--config`; every flag has a counterpart here and
/// flags take precedence.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    mode: Option<ModeArg>,
    generate: GenerateConfig,
    train: Option<PipelineConfig>,
    inject: InjectConfig,
    eval: EvalConfig,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenerateConfig {
    engines: Option<usize>,
    rows: Option<usize>,
    regimes: Option<usize>,
    noise: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct InjectConfig {
    window: Option<usize>,
    min_amplitude: Option<f64>,
    max_amplitude: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    labeling: Option<LabelingArg>,
}

fn read_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        Ok(serde_json::from_str(&text)?)
    } else {
        toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_record(path: &Path) -> Result<InjectionRecord> {
    Ok(serde_json::from_reader(open(path)?)?)
}

struct Ctx {
    seed: u64,
    mode: DetectionMode,
    file: FileConfig,
}

fn run_generate(ctx: &Ctx, a: GenerateArgs) -> Result<()> {
    let g = &ctx.file.generate;
    let base = GeneratorConfig::protocol_scale(ctx.seed);
    let engines = a.engines.or(g.engines).unwrap_or(base.n_engines);
    let rows = a.rows.or(g.rows).unwrap_or(base.n_rows);
    let regimes = a.regimes.or(g.regimes).unwrap_or(base.k_true);
    let mut cfg = GeneratorConfig::new(engines, rows, regimes, ctx.seed);
    if let Some(noise) = a.noise.or(g.noise) {
        cfg = cfg.with_noise(noise);
    }
    let (table, truth) = generate(&cfg)?;
    save_table(&a.out, &table)?;
    if let Some(path) = a.truth {
        write_text(&path, &(serde_json::to_string_pretty(&truth)? + "\n"))?;
    }
    println!("wrote {} rows for {} engines to {}", table.len(), engines, a.out.display());
    Ok(())
}

fn run_split(ctx: &Ctx, a: SplitArgs) -> Result<()> {
    let table = load_table(&a.input, &Schema::cruise())?;
    let (train, test) = split_train_test(&table, a.train, ctx.seed)?;
    save_table(&a.train_out, &train)?;
    save_table(&a.test_out, &test)?;
    println!("{} training rows, {} test rows", train.len(), test.len());
    Ok(())
}

fn run_train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let mut cfg = ctx.file.train.clone().unwrap_or_default();
    cfg.seed = ctx.seed;
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(m) = a.context_method {
        cfg.context_method = match m {
            MethodArg::Gmm => ContextMethod::GmmEm,
            MethodArg::Hac => ContextMethod::WardHac,
        };
    }
    if let Some(c) = a.covariance {
        cfg.covariance = match c {
            CovarianceArg::Full => CovarianceKind::Full,
            CovarianceArg::Diagonal => CovarianceKind::Diagonal,
        };
    }
    if let Some((r, c)) = a.som {
        cfg.som_rows = r;
        cfg.som_cols = c;
    }
    if let Some(e) = a.epochs {
        cfg.som_epochs = e;
    }
    if let Some(i) = a.som_init {
        cfg.som_init = match i {
            InitArg::Pca => InitMethod::Pca,
            InitArg::Random => InitMethod::Random,
        };
    }
    if let Some(p) = a.percentile {
        cfg.percentile = p;
    }
    if let Some(m) = a.min_local_count {
        cfg.min_local_count = m;
    }
    if let Some(w) = a.window {
        cfg.smoothing_width = w;
    }
    if let Some(s) = a.smoothing_scope {
        cfg.smoothing_scope = match s {
            ScopeArg::Engine => SmoothingScope::Engine,
            ScopeArg::Global => SmoothingScope::Global,
        };
    }

    let table = load_table(&a.input, &Schema::cruise())?;
    if let Some(max_k) = a.explained_variance_scan {
        let norm = engine_health::schema::NormalizationCoefficients::fit(&table)?;
        let env = norm.apply(&table)?.columns(&ENVIRONMENTAL)?;
        let opts = ContextOptions {
            method: cfg.context_method,
            covariance: cfg.covariance,
            max_iter: cfg.em_max_iter,
            tol: cfg.em_tol,
            seed: cfg.seed,
            ..Default::default()
        };
        println!("k,explained_variance");
        for (k, ev) in explained_variance_scan(&env, &ENVIRONMENTAL, max_k, &opts)? {
            println!("{k},{ev:.6}");
        }
        return Ok(());
    }
    let bundle = engine_health::train_pipeline(&table, &cfg)?;
    bundle.save(&a.out)?;
    println!("{}", bundle.summary);
    println!("bundle written to {}", a.out.display());
    Ok(())
}

fn resolve_signature(spec: &str, range: AmplitudeRange) -> Result<Signature> {
    if let Some(sig) = signature_set(range).into_iter().find(|s| s.name == spec) {
        return Ok(sig);
    }
    let path = Path::new(spec);
    if path.exists() {
        let sig: Signature = serde_json::from_reader(open(path)?)?;
        sig.validate()?;
        return Ok(sig);
    }
    Err(Error::InvalidArgument(format!(
        "signature {spec:?} is neither a default signature name nor a file"
    )))
}

fn run_inject(ctx: &Ctx, a: InjectArgs) -> Result<()> {
    let c = &ctx.file.inject;
    let defaults = AmplitudeRange::default();
    let range = AmplitudeRange {
        min: a.min_amplitude.or(c.min_amplitude).unwrap_or(defaults.min),
        max: a.max_amplitude.or(c.max_amplitude).unwrap_or(defaults.max),
    };
    let window = a.window.or(c.window).unwrap_or(30);
    let mut sig = resolve_signature(&a.signature, range)?;
    if let Some(path) = &a.bundle {
        sig = ModelBundle::load(path)?.raw_signature(&sig)?;
    }
    let table = load_table(&a.input, &Schema::cruise())?;
    let profile = if a.ramp { DefectProfile::Ramp } else { DefectProfile::Step };
    let (corrupted, record) = inject_with_profile(&table, &sig, window, ctx.seed, profile)?;
    save_table(&a.out, &corrupted)?;
    write_text(&a.record, &(serde_json::to_string_pretty(&record)? + "\n"))?;
    println!(
        "{} injected into engine {} from timestamp {} over {} rows",
        record.signature, record.engine_id, record.start_timestamp, record.window_len
    );
    Ok(())
}

fn run_detect(ctx: &Ctx, a: DetectArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.bundle)?;
    let table = load_table(&a.input, &bundle.schema)?;
    let projections = project(&table, &bundle)?;
    let v = verdicts(&projections, &bundle.thresholds, ctx.mode);
    write_verdicts(create(&a.out)?, &v)?;
    if let Some(plot) = &a.plot {
        let truth = match &a.record {
            Some(path) => {
                let rec = read_record(path)?;
                let labels = engine_health::eval::truth_labels(&v, &[rec], TruthLabeling::default())?;
                Some(v.iter().zip(labels).filter(|(_, b)| *b).map(|(r, _)| r.key).collect::<HashSet<_>>())
            }
            None => None,
        };
        write_text(plot, &distance_plot_svg(&v, bundle.thresholds.global_upper, truth.as_ref()))?;
    }
    let flagged = v.iter().filter(|r| !r.verdict.healthy).count();
    println!("{} verdicts, {} flagged, written to {}", v.len(), flagged, a.out.display());
    Ok(())
}

fn run_eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let labeling = a
        .labeling
        .or(ctx.file.eval.labeling)
        .map(TruthLabeling::from)
        .unwrap_or_default();
    let cases = a
        .cases
        .iter()
        .map(|spec| {
            let parts: Vec<&str> = spec.split(',').collect();
            if !(2..=3).contains(&parts.len()) {
                return Err(Error::InvalidArgument(format!(
                    "--case expects RECORD,GLOBAL[,LOCAL], got {spec:?}"
                )));
            }
            Ok(EvalCase {
                record: read_record(Path::new(parts[0]))?,
                global: read_verdicts(open(Path::new(parts[1]))?)?,
                local: parts
                    .get(2)
                    .map(|p| read_verdicts(open(Path::new(p))?))
                    .transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&cases, labeling)?;
    if let Some(path) = &a.out {
        report.write_csv(create(path)?)?;
    }
    let text = report.to_text();
    if let Some(path) = &a.text {
        write_text(path, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn run_export(ctx: &Ctx, a: ExportArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.bundle)?;
    let overlay = match &a.input {
        Some(path) => {
            let table = load_table(path, &bundle.schema)?;
            let v = verdicts(&project(&table, &bundle)?, &bundle.thresholds, ctx.mode);
            let assignments: Vec<(usize, bool)> = v.iter().map(|r| (r.verdict.bmu, r.verdict.healthy)).collect();
            Some(UnitCounts::from_assignments(bundle.som.units(), &assignments))
        }
        None => None,
    };
    let vars: Vec<String> = bundle.correction.variables().iter().map(|s| s.to_string()).collect();
    let written = export_component_planes(&bundle.som, &vars, overlay.as_ref(), &a.out_dir, a.cell_px)?;
    println!("wrote {} files to {}", written.len(), a.out_dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => read_config(path)?,
        None => FileConfig::default(),
    };
    let ctx = Ctx {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        mode: cli.mode.or(file.mode).map(DetectionMode::from).unwrap_or_default(),
        file,
    };
    match cli.command {
        Command::Generate(a) => run_generate(&ctx, a),
        Command::Split(a) => run_split(&ctx, a),
        Command::Train(a) => run_train(&ctx, a),
        Command::Inject(a) => run_inject(&ctx, a),
        Command::Detect(a) => run_detect(&ctx, a),
        Command::Eval(a) => run_eval(&ctx, a),
        Command::ExportMaps(a) => run_export(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
