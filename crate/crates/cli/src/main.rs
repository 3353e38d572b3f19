use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use capcrop::bench::{run_bench, BenchConfig, BENCH_HEADER};
use capcrop::gradcheck::{run_gradcheck, GradcheckConfig, GRADCHECK_TOLERANCE};
use capcrop::imagecore::{build_pyramid, load_image, save_image};
use capcrop::landscape::{evaluate_grid, heatmap_image, write_csv};
use capcrop::objective::bag_from_text;
use capcrop::objective::fixtures::bag_loss_fixtures;
use capcrop::objective::synthetic::builtin_scorer;
use capcrop::pipeline::{self, CropObjective, NoiseKind};
use capcrop::sampler::theta_to_pixel_box;
use capcrop::scorerproto::{connect_scorer, serve_echo, ConnectOptions, EchoMode, EchoOptions, Endpoint};
use capcrop::{Image, ObjectiveError, PipelineError, PixelBox, RunConfig, Scorer, Vocabulary};

#[derive(Parser)]
#[command(name = "capcrop", version, about = "Caption-guided image cropping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for the best crop of an image.
    Crop(CropArgs),
    /// Render the loss over a grid of crop centers.
    Landscape(LandscapeArgs),
    /// Compare analytic and finite-difference crop gradients.
    Gradcheck(GradcheckArgs),
    /// Time outer iterations on a synthetic image.
    Bench(BenchArgs),
    /// Serve the reference echo scorer on stdin/stdout.
    EchoScorer(EchoArgs),
    /// Write caption-loss fixtures as JSON lines.
    BagFixtures(BagFixtureArgs),
}

#[derive(Args)]
struct ScorerArgs {
    /// `builtin:<name>`, `cmd:<program> [args]` or `tcp:<host>:<port>`.
    #[arg(long, default_value = "builtin:synthetic")]
    scorer: String,
    /// Vocabulary file, one token per line.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Per-request timeout for external scorers, in seconds.
    #[arg(long, default_value_t = 30.0)]
    timeout: f64,
    /// Request pixel gradients from external scorers that offer them.
    #[arg(long)]
    scorer_gradients: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Noise {
    Gaussian,
    Uniform,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, default_value_t = 0.01, allow_negative_numbers = true)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 224)]
    out_size: usize,
    #[arg(long, default_value_t = 0.98)]
    anneal: f64,
    #[arg(long, default_value_t = 0.25)]
    min_scale: f64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long, value_enum, default_value_t = Noise::Gaussian)]
    noise: Noise,
    #[arg(long, default_value_t = 1e-3)]
    fd_step: f64,
    /// Stop after this many outer iterations even above the minimum scale.
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Pyramid factors below 1; the original resolution is always added.
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 1.0 / 3.0, 0.5])]
    pyramid: Vec<f64>,
    /// Solve restarts one after another.
    #[arg(long)]
    serial: bool,
}

impl SearchArgs {
    fn config(&self) -> RunConfig {
        let mut scale_set = self.pyramid.clone();
        scale_set.push(1.0);
        RunConfig {
            anneal_factor: self.anneal,
            min_scale: self.min_scale,
            restarts: self.restarts,
            noise_sigma: self.sigma,
            noise_kind: match self.noise {
                Noise::Gaussian => NoiseKind::Gaussian,
                Noise::Uniform => NoiseKind::Uniform,
            },
            lambda: self.lambda,
            scale_set,
            out_size: self.out_size,
            rng_seed: self.seed,
            fd_step: self.fd_step,
            max_iterations: self.max_iterations,
            parallel: !self.serial,
            ..RunConfig::default()
        }
    }
}

#[derive(Args)]
struct CropArgs {
    image: PathBuf,
    #[arg(long)]
    caption: String,
    #[command(flatten)]
    scorer: ScorerArgs,
    #[command(flatten)]
    search: SearchArgs,
    /// Output directory; defaults to the image's directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct LandscapeArgs {
    image: PathBuf,
    #[arg(long)]
    caption: String,
    #[command(flatten)]
    scorer: ScorerArgs,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.5])]
    scales: Vec<f64>,
    #[arg(long, default_value_t = 21)]
    grid: usize,
    /// Side of one grid cell in the heatmap, in pixels.
    #[arg(long, default_value_t = 8)]
    cell_px: usize,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Print one line per trial.
    #[arg(long)]
    verbose: bool,
    #[arg(long, hide = true)]
    corrupt_jacobian: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// `builtin:<name>`.
    #[arg(long, default_value = "builtin:synthetic")]
    scorer: String,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    iters: usize,
    #[arg(long, default_value_t = 224)]
    out_size: usize,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EchoArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Uniform caption steps per response.
    #[arg(long, default_value_t = 2)]
    steps: usize,
    /// Answer with the fixture formula under this seed instead.
    #[arg(long)]
    fixture_seed: Option<u64>,
    /// Stop answering after this many score requests.
    #[arg(long)]
    stall_after: Option<u64>,
}

#[derive(Args)]
struct BagFixtureArgs {
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

type CliResult<T> = Result<T, Failure>;

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn objective_failure(e: ObjectiveError) -> Failure {
    match e {
        ObjectiveError::EmptyCaption => Failure::Usage(e.to_string()),
        other => runtime(other),
    }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::Config(_) => Failure::Usage(e.to_string()),
        PipelineError::Objective(inner) => objective_failure(inner),
        other => runtime(other),
    }
}

fn make_scorer(args: &ScorerArgs, channels: usize, seed: u64) -> CliResult<Box<dyn Scorer>> {
    let vocab = args.vocab.as_ref().map(Vocabulary::load).transpose().map_err(runtime)?;
    if let Some(name) = args.scorer.strip_prefix("builtin:") {
        return builtin_scorer(name, vocab, channels, seed).map_err(|e| Failure::Usage(e.to_string()));
    }
    let endpoint = Endpoint::parse(&args.scorer).map_err(|e| Failure::Usage(e.to_string()))?;
    let vocab = vocab.ok_or_else(|| Failure::Usage("external scorers need --vocab".into()))?;
    if !(args.timeout > 0.0) {
        return Err(Failure::Usage(format!("timeout {} must be positive", args.timeout)));
    }
    let opts = ConnectOptions { timeout: Duration::from_secs_f64(args.timeout), use_gradients: args.scorer_gradients };
    Ok(Box::new(connect_scorer(&endpoint, vocab, &opts).map_err(runtime)?))
}

fn output_path(image: &Path, out_dir: Option<&PathBuf>, suffix: &str) -> CliResult<PathBuf> {
    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Failure::Usage(format!("cannot derive a name from {}", image.display())))?;
    let dir = match out_dir {
        Some(d) => d.clone(),
        None => image.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    Ok(dir.join(format!("{stem}.{suffix}")))
}

fn require_caption(caption: &str) -> CliResult<()> {
    if caption.trim().is_empty() {
        return Err(Failure::Usage("caption is empty".into()));
    }
    Ok(())
}

/// Copy of `img` in RGB with a red outline just inside `b`.
fn overlay(img: &Image, b: PixelBox, thickness: i64) -> Image {
    let rgb = img.to_rgb();
    Image::from_fn(rgb.height(), rgb.width(), 3, |i, j, c| {
        let (x, y) = (j as i64, i as i64);
        let inside = x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1;
        let edge = x < b.x0 + thickness || x >= b.x1 - thickness || y < b.y0 + thickness || y >= b.y1 - thickness;
        if inside && edge {
            if c == 0 { 1.0 } else { 0.0 }
        } else {
            rgb.get(i, j, c)
        }
    })
    .expect("overlay shape")
}

fn cmd_crop(args: &CropArgs) -> CliResult<()> {
    require_caption(&args.caption)?;
    let cfg = args.search.config();
    cfg.validate().map_err(pipeline_failure)?;
    let image = load_image(&args.image).map_err(runtime)?;
    let scorer = make_scorer(&args.scorer, image.channels(), args.search.seed)?;
    bag_from_text(&args.caption, scorer.vocabulary()).map_err(objective_failure)?;
    let run = pipeline::run(&image, &args.caption, scorer.as_ref(), &cfg).map_err(pipeline_failure)?;

    let user = bag_from_text(&args.caption, scorer.vocabulary()).map_err(objective_failure)?;
    let pyramid = build_pyramid(&image, &cfg.scale_set, cfg.blur).map_err(runtime)?;
    let report = CropObjective::new(&pyramid, &user, scorer.as_ref(), &cfg)
        .value(run.best_theta)
        .map_err(objective_failure)?;

    let b = theta_to_pixel_box(run.best_theta, image.width(), image.height());
    let crop = image
        .crop_box(b.x0 as usize, b.y0 as usize, b.x1 as usize, b.y1 as usize)
        .map_err(runtime)?;
    let out = args.out_dir.as_ref();
    if let Some(d) = out {
        std::fs::create_dir_all(d).map_err(runtime)?;
    }
    let crop_path = output_path(&args.image, out, "crop.png")?;
    let overlay_path = output_path(&args.image, out, "overlay.png")?;
    let trace_path = output_path(&args.image, out, "trace.txt")?;
    let record_path = output_path(&args.image, out, "crop.json")?;
    save_image(&crop, &crop_path).map_err(runtime)?;
    let thickness = (image.width().min(image.height()) as i64 / 200).max(1);
    save_image(&overlay(&image, b, thickness), &overlay_path).map_err(runtime)?;
    let mut trace = BufWriter::new(File::create(&trace_path).map_err(runtime)?);
    run.write_trace(&mut trace).and_then(|_| trace.flush()).map_err(runtime)?;

    let record = json!({
        "image": args.image.display().to_string(),
        "caption": args.caption,
        "scorer": args.scorer.scorer,
        "best_theta": run.best_theta,
        "best_loss": run.best_loss,
        "caption_loss": report.caption_term,
        "aesthetic_loss": report.aesthetic_term,
        "lambda": cfg.lambda,
        "box": b,
        "iterations": run.iterations_run,
        "seed": cfg.rng_seed,
        "crop": crop_path.display().to_string(),
        "overlay": overlay_path.display().to_string(),
        "trace": trace_path.display().to_string(),
    });
    let text = serde_json::to_string_pretty(&record).map_err(runtime)?;
    std::fs::write(&record_path, format!("{text}\n")).map_err(runtime)?;
    println!("{text}");
    Ok(())
}

fn cmd_landscape(args: &LandscapeArgs) -> CliResult<()> {
    require_caption(&args.caption)?;
    if args.grid < 3 {
        return Err(Failure::Usage(format!("grid {} must be at least 3", args.grid)));
    }
    if args.cell_px == 0 {
        return Err(Failure::Usage("cell size must be positive".into()));
    }
    if let Some(s) = args.scales.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
        return Err(Failure::Usage(format!("scale {s} not in (0, 1]")));
    }
    let cfg = args.search.config();
    cfg.validate().map_err(pipeline_failure)?;
    let image = load_image(&args.image).map_err(runtime)?;
    let scorer = make_scorer(&args.scorer, image.channels(), args.search.seed)?;
    let user = bag_from_text(&args.caption, scorer.vocabulary()).map_err(objective_failure)?;
    let pyramid = build_pyramid(&image, &cfg.scale_set, cfg.blur).map_err(runtime)?;
    let objective = CropObjective::new(&pyramid, &user, scorer.as_ref(), &cfg);

    let mut outputs = Vec::new();
    for &scale in &args.scales {
        let cells = evaluate_grid(&objective, scale, args.grid, cfg.parallel).map_err(objective_failure)?;
        outputs.push((scale, cells));
    }
    let out = args.out_dir.as_ref();
    if let Some(d) = out {
        std::fs::create_dir_all(d).map_err(runtime)?;
    }
    for (scale, cells) in &outputs {
        let csv_path = output_path(&args.image, out, &format!("landscape.{scale}.csv"))?;
        let png_path = output_path(&args.image, out, &format!("landscape.{scale}.png"))?;
        let mut w = BufWriter::new(File::create(&csv_path).map_err(runtime)?);
        write_csv(cells, &mut w).and_then(|_| w.flush()).map_err(runtime)?;
        save_image(&heatmap_image(cells, args.grid, args.cell_px), &png_path).map_err(runtime)?;
        println!("{}\t{}\t{}", scale, csv_path.display(), png_path.display());
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<bool> {
    if args.trials == 0 {
        return Err(Failure::Usage("at least one trial is required".into()));
    }
    let cfg = GradcheckConfig {
        trials: args.trials,
        seed: args.seed,
        lambda: args.lambda,
        corrupt_jacobian: args.corrupt_jacobian,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg).map_err(runtime)?;
    if args.verbose {
        for (k, c) in report.cases.iter().enumerate() {
            println!(
                "trial {k}: theta=({:.6}, {:.6}, {:.6}) analytic=({:.9e}, {:.9e}) numeric=({:.9e}, {:.9e}) rel={:.3e}",
                c.theta.x, c.theta.y, c.theta.s, c.analytic[0], c.analytic[1], c.numeric[0], c.numeric[1], c.rel_error
            );
        }
    }
    println!("trials: {}", report.cases.len());
    println!("max relative error: {:.6e}", report.max_rel_error);
    println!("draws rejected at cell boundaries: {}", report.rejected);
    println!("tolerance: {GRADCHECK_TOLERANCE:e}");
    println!("{}", if report.passed { "PASS" } else { "FAIL" });
    Ok(report.passed)
}

fn cmd_bench(args: &BenchArgs) -> CliResult<()> {
    let name = args
        .scorer
        .strip_prefix("builtin:")
        .ok_or_else(|| Failure::Usage(format!("bench needs a builtin scorer, got '{}'", args.scorer)))?;
    let run = RunConfig { out_size: args.out_size, restarts: args.restarts, rng_seed: args.seed, ..RunConfig::default() };
    let cfg = BenchConfig { scorer: name.to_owned(), image_size: args.size, iterations: args.iters, seed: args.seed, run, ..BenchConfig::default() };
    let rows = run_bench(&cfg).map_err(pipeline_failure)?;
    println!("{BENCH_HEADER}\tper_eval_ms");
    for r in &rows {
        println!("{}\t{:.3}", r.to_line(), 1e3 * r.seconds / r.evaluations as f64);
    }
    if !rows.is_empty() {
        let mean = rows.iter().map(|r| r.seconds).sum::<f64>() / rows.len() as f64;
        eprintln!("mean seconds per iteration: {mean:.4}");
    }
    Ok(())
}

fn cmd_echo(args: &EchoArgs) -> CliResult<()> {
    let vocab = Vocabulary::load(&args.vocab).map_err(runtime)?;
    if args.steps == 0 {
        return Err(Failure::Usage("at least one caption step is required".into()));
    }
    let mode = match args.fixture_seed {
        Some(seed) => EchoMode::Fixture { seed },
        None => EchoMode::Uniform { steps: args.steps },
    };
    let opts = EchoOptions { vocab, mode, stall_after: args.stall_after };
    let stdin = io::stdin();
    serve_echo(BufReader::new(stdin.lock()), io::stdout().lock(), &opts).map_err(runtime)
}

fn cmd_bag_fixtures(args: &BagFixtureArgs) -> CliResult<()> {
    let fixtures = bag_loss_fixtures(args.count, args.seed).map_err(runtime)?;
    let mut text = String::new();
    for f in &fixtures {
        text.push_str(&serde_json::to_string(f).map_err(runtime)?);
        text.push('\n');
    }
    match &args.out {
        Some(p) => std::fs::write(p, text).map_err(runtime),
        None => io::stdout().write_all(text.as_bytes()).map_err(runtime),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match &cli.command {
        Command::Crop(a) => cmd_crop(a).map(|_| true),
        Command::Landscape(a) => cmd_landscape(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a).map(|_| true),
        Command::EchoScorer(a) => cmd_echo(a).map(|_| true),
        Command::BagFixtures(a) => cmd_bag_fixtures(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
