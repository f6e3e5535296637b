use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use psvit::backbone::STRIDE;
use psvit::checkpoint;
use psvit::data::{self, Dataset};
use psvit::gradcheck::{self, GradReport};
use psvit::optim::AdamWConfig;
use psvit::train::{self, EpochMetrics, TrainConfig};
use psvit::{cost_report, Mode, PsVit, PsVitConfig};

use crate::args::{DataArgs, EvalArgs, GradcheckArgs, ModelArgs, SummaryArgs, TrainArgs, VizArgs};
use crate::CliError;

type CliResult<T> = Result<T, CliError>;

pub const LOCK_FILE: &str = ".psvit.lock";
pub const CONFIG_FILE: &str = "config.json";
pub const FINAL_CHECKPOINT: &str = "final.psvt";
pub const BEST_CHECKPOINT: &str = "best.psvt";

// ---------------------------------------------------------------------------
// shared plumbing

/// Exclusive claim on an output directory, released on drop.
struct OutDir {
    path: PathBuf,
    lock: PathBuf,
}

impl OutDir {
    fn claim(path: &Path) -> CliResult<Self> {
        fs::create_dir_all(path).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", path.display())))?;
        let lock = path.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| {
                CliError::runtime(format!(
                    "output directory {} is locked by another run ({}: {e})",
                    path.display(),
                    lock.display()
                ))
            })?;
        Ok(Self {
            path: path.to_path_buf(),
            lock,
        })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        let p = self.file(name);
        fs::write(&p, contents).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", p.display())))
    }

    fn echo_config(&self, config: &PsVitConfig) -> CliResult<()> {
        let json = serde_json::to_string_pretty(config).map_err(|e| CliError::runtime(e.to_string()))?;
        self.write(CONFIG_FILE, json + "\n")
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Base configuration from `--config` or `--preset` (default `fallback`),
/// then field overrides, then validation.
pub fn resolve_config(args: &ModelArgs, fallback: &str) -> CliResult<PsVitConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(_), Some(_)) => {
            return Err(CliError::validation("--config and --preset are mutually exclusive"));
        }
        (Some(path), None) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::validation(format!("invalid config {}: {e}", path.display())))?
        }
        (None, Some(name)) => PsVitConfig::preset(name)?,
        (None, None) => PsVitConfig::preset(fallback)?,
    };
    if args.share {
        cfg.share_weights = true;
    }
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.samples, args.n);
    set(&mut cfg.iterations, args.iters);
    set(&mut cfg.depth, args.depth);
    set(&mut cfg.dim, args.dim);
    set(&mut cfg.heads, args.heads);
    set(&mut cfg.num_classes, args.classes);
    set(&mut cfg.input_size, args.input_size);
    if let Some(d) = args.dropout {
        cfg.dropout = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the dataset and center-crops it to the model input size.
fn load_dataset(args: &DataArgs, config: &PsVitConfig) -> CliResult<Dataset> {
    let ds = match (&args.images, &args.labels, args.synthetic) {
        (Some(images), Some(labels), false) => data::load_idx(images, labels, Some(config.num_classes))?,
        (None, None, true) => data::synthetic_blobs(args.samples, config.input_size, args.data_seed)?,
        _ => {
            return Err(CliError::validation(
                "a dataset is required: pass --images and --labels, or --synthetic",
            ))
        }
    };
    let (_, h, w) = ds.image_shape();
    if h < config.input_size || w < config.input_size {
        return Err(CliError::validation(format!(
            "images are {h}x{w}, smaller than the model input {0}x{0}",
            config.input_size
        )));
    }
    Ok(ds.center_cropped(config.input_size)?)
}

/// Parses counts like `4.7M`, `1.6B`, `1600000`.
pub fn parse_count(s: &str) -> CliResult<f64> {
    let t = s.trim();
    let (num, mult) = match t.chars().last().map(|c| c.to_ascii_uppercase()) {
        Some('K') => (&t[..t.len() - 1], 1e3),
        Some('M') => (&t[..t.len() - 1], 1e6),
        Some('B') | Some('G') => (&t[..t.len() - 1], 1e9),
        _ => (t, 1.0),
    };
    num.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite() && *v > 0.0)
        .map(|v| v * mult)
        .ok_or_else(|| CliError::validation(format!("cannot parse count {s:?}")))
}

fn human(v: u64) -> String {
    let v = v as f64;
    if v >= 1e9 {
        format!("{:.2}B", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.2}K", v / 1e3)
    } else {
        format!("{v}")
    }
}

// ---------------------------------------------------------------------------
// summary

pub fn summary(args: &SummaryArgs) -> CliResult<()> {
    let config = resolve_config(&args.model, "ps-vit-ti")?;
    if !(args.tol_pct >= 0.0 && args.tol_pct.is_finite()) {
        return Err(CliError::validation(format!(
            "--tol-pct must be >= 0, got {}",
            args.tol_pct
        )));
    }
    let expect_params = args.expect_params.as_deref().map(parse_count).transpose()?;
    let expect_flops = args.expect_flops.as_deref().map(parse_count).transpose()?;
    let report = cost_report(&config)?;

    println!(
        "config: C={} M={} n={} N={} N_v={} K={} input={} shared={}",
        config.dim,
        config.heads,
        config.samples,
        config.iterations,
        config.depth,
        config.num_classes,
        config.input_size,
        config.share_weights
    );
    println!("{:<12} {:>14} {:>16}", "module", "params", "flops");
    for e in &report.breakdown {
        println!("{:<12} {:>14} {:>16}", e.module, e.params, e.flops);
    }
    println!("{:<12} {:>14} {:>16}", "total", report.params, report.flops);
    println!(
        "params {}  flops {} (multiply-accumulates)",
        human(report.params),
        human(report.flops)
    );

    if let Some(dir) = &args.out {
        let out = OutDir::claim(dir)?;
        out.echo_config(&config)?;
        out.write("summary.csv", report.to_csv())?;
    }

    let mut failures = Vec::new();
    for (what, expected, actual) in [
        ("params", expect_params, report.params),
        ("flops", expect_flops, report.flops),
    ] {
        let Some(expected) = expected else { continue };
        let dev = 100.0 * (actual as f64 - expected).abs() / expected;
        let ok = dev <= args.tol_pct;
        println!(
            "expect {what}: {} vs {} ({dev:.2}% off, tol {}%) {}",
            human(actual),
            human(expected.round() as u64),
            args.tol_pct,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failures.push(what);
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::audit(format!(
            "expectation violated: {}",
            failures.join(", ")
        )))
    }
}

// ---------------------------------------------------------------------------
// gradcheck

pub fn gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let cases = match args.scope.as_str() {
        "all" => gradcheck::registry(),
        name => vec![gradcheck::find_case(name).ok_or_else(|| {
            let names: Vec<_> = gradcheck::registry().iter().map(|c| c.name).collect();
            CliError::validation(format!(
                "unknown scope {name:?}; expected \"all\" or one of: {}",
                names.join(", ")
            ))
        })?],
    };
    if args.seeds == 0 {
        return Err(CliError::validation("--seeds must be >= 1"));
    }
    if let Some(t) = args.tol.filter(|t| t.is_nan() || *t <= 0.0) {
        return Err(CliError::validation(format!("--tol must be > 0, got {t}")));
    }
    if args.h.is_nan() || args.h <= 0.0 {
        return Err(CliError::validation(format!("--h must be > 0, got {}", args.h)));
    }
    let out = args.out.as_deref().map(OutDir::claim).transpose()?;
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
    let mut csv = String::from("op,seed,pass,max_rel,max_abs,tol,coords,kinked\n");
    let mut rows: Vec<(&str, bool, f64, f64)> = Vec::new();
    for case in &cases {
        let tol = args.tol.unwrap_or(case.tol);
        let reports = gradcheck::run_case_with_tol(case, &seeds, args.h, tol)?;
        for (seed, r) in seeds.iter().zip(&reports) {
            println!("seed {seed:<3} {r}");
            let _ = writeln!(
                csv,
                "{},{seed},{},{:.6e},{:.6e},{tol:e},{},{}",
                case.name,
                r.pass,
                r.max_rel(),
                r.max_abs(),
                r.coords(),
                r.skipped()
            );
        }
        let worst = reports.iter().map(GradReport::max_rel).fold(0.0, f64::max);
        rows.push((case.name, reports.iter().all(|r| r.pass), worst, tol));
    }
    println!();
    println!("{:<20} {:>6} {:>12} {:>8}", "op", "result", "worst_rel", "tol");
    for (name, pass, worst, tol) in &rows {
        println!(
            "{name:<20} {:>6} {worst:>12.3e} {tol:>8.0e}",
            if *pass { "PASS" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!(
        "{}/{} operations pass over {} seeds",
        rows.len() - failed.len(),
        rows.len(),
        seeds.len()
    );
    if let Some(out) = &out {
        out.write("gradcheck.csv", csv)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::audit(format!("gradient audit failed: {}", failed.join(", "))))
    }
}

// ---------------------------------------------------------------------------
// train

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let config = resolve_config(&args.model, "toy")?;
    let ds = load_dataset(&args.data, &config)?;
    if ds.num_classes != config.num_classes {
        return Err(CliError::validation(format!(
            "dataset has {} classes but the model has {}; pass --classes {}",
            ds.num_classes, config.num_classes, ds.num_classes
        )));
    }
    if args.epochs == 0 || args.batch == 0 {
        return Err(CliError::validation("--epochs and --batch must be >= 1"));
    }
    if let Some(t) = args.target_acc.filter(|t| !(0.0..=1.0).contains(t)) {
        return Err(CliError::validation(format!("--target-acc must be in [0, 1], got {t}")));
    }
    let tc = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        base_lr: args.lr,
        warmup_epochs: args.warmup,
        optimizer: AdamWConfig {
            weight_decay: args.weight_decay,
            ..Default::default()
        },
        smoothing: args.smoothing,
        seed: args.seed,
        target_accuracy: args.target_acc,
        min_epochs: 0,
    };
    tc.schedule(ds.len())?;

    let out = OutDir::claim(&args.out)?;
    out.echo_config(&config)?;
    let mut model = PsVit::<f32>::build(&config, args.seed)?;
    let mut best = f64::NEG_INFINITY;
    let best_path = out.file(BEST_CHECKPOINT);
    println!("training on {} samples, {} classes", ds.len(), ds.num_classes);
    let metrics = train::train(&mut model, &ds, &tc, |m: &EpochMetrics, model| {
        println!(
            "epoch {:>4}  loss {:.6}  acc {:.4}  lr {:.3e}",
            m.epoch, m.loss, m.accuracy, m.lr
        );
        if m.accuracy > best {
            best = m.accuracy;
            checkpoint::save(&model.param_store(), &best_path)?;
        }
        Ok(())
    })?;
    let mut csv = Vec::new();
    train::write_metrics_csv(&metrics, &mut csv)?;
    out.write("metrics.csv", csv)?;
    checkpoint::save(&model.param_store(), out.file(FINAL_CHECKPOINT))?;
    let last = metrics.last().expect("at least one epoch");
    println!(
        "final accuracy {:.4} after {} epochs; best {:.4}",
        last.accuracy,
        metrics.len(),
        best
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn load_model(path: &Path, model_args: &ModelArgs) -> CliResult<PsVit<f32>> {
    let store = checkpoint::load(path)?;
    if model_args.any_set() {
        let config = resolve_config(model_args, "ps-vit-ti")?;
        let mut model = PsVit::<f32>::zeros(&config)?;
        model.load_store(&store, true)?;
        Ok(model)
    } else {
        Ok(PsVit::from_store(&store)?)
    }
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let model = load_model(&args.checkpoint, &args.model)?;
    let ds = load_dataset(&args.data, &model.config)?;
    if ds.num_classes != model.config.num_classes {
        return Err(CliError::validation(format!(
            "dataset has {} classes but the checkpoint has {}",
            ds.num_classes, model.config.num_classes
        )));
    }
    let report = train::evaluate(&model, &ds, args.batch)?;
    println!(
        "samples {}  top1 {:.4}  top5 {:.4}  loss {:.6}",
        report.samples, report.top1, report.top5, report.loss
    );
    if let Some(dir) = &args.out {
        let out = OutDir::claim(dir)?;
        out.echo_config(&model.config)?;
        out.write("eval.csv", report.to_csv())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// viz

pub fn viz(args: &VizArgs) -> CliResult<()> {
    let model = match &args.checkpoint {
        Some(path) => load_model(path, &args.model)?,
        None => PsVit::<f32>::build(&resolve_config(&args.model, "toy")?, args.seed)?,
    };
    if args.count == 0 {
        return Err(CliError::validation("--count must be >= 1"));
    }
    if !(args.scale > 0.0 && args.scale.is_finite()) {
        return Err(CliError::validation(format!("--scale must be > 0, got {}", args.scale)));
    }
    let ds = load_dataset(&args.data, &model.config)?;
    let count = args.count.min(ds.len());
    let out = OutDir::claim(&args.out)?;
    out.echo_config(&model.config)?;
    let images = &ds.images[..count];
    let pass = model.forward(images, &mut Mode::Eval)?;
    for (i, (log, image)) in pass.trajectories().iter().zip(images).enumerate() {
        let csv_path = out.file(&format!("trajectory_{i:03}.csv"));
        let f = File::create(&csv_path)
            .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", csv_path.display())))?;
        log.write_csv(BufWriter::new(f))?;
        out.write(
            &format!("trajectory_{i:03}.svg"),
            log.to_svg(Some(image), STRIDE, args.scale),
        )?;
        println!(
            "image {i}: label {} points {} iterations {} max displacement {:.4}",
            ds.labels[i],
            log.spec.num_points(),
            log.iterations(),
            log.max_displacement()
        );
    }
    Ok(())
}
