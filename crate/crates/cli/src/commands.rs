use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use dyns_core::data::{load_dataset, split_dataset, synth_generate, write_dataset, DatasetSplit, RoiTimeSeries};
use dyns_core::gradcheck::op_suite;
use dyns_core::params::Role;
use dyns_core::scan::{scan_parallel, scan_sequential};
use dyns_core::train::{evaluate, normalize_all, run_variant, LogRecord, RunResult};
use dyns_core::{checkpoint, Error, Metrics, Pipeline, Result, ScanBackend, Tensor, Variant, VERSION};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{AblateArgs, Cli, Command, EvaluateArgs, GenerateArgs, GradcheckArgs, ReportArgs, RunArgs, ScanBenchArgs};

pub fn run(cli: &Cli) -> Result<u8> {
    let ui = Ui {
        quiet: cli.quiet,
        json: cli.json,
    };
    match &cli.command {
        Command::GenerateData(a) => generate(a, &ui),
        Command::Train(a) => train(a, &ui),
        Command::Evaluate(a) => evaluate_run(a, &ui),
        Command::Ablate(a) => ablate(a, &ui),
        Command::ScanBench(a) => scan_bench(a, &ui),
        Command::Gradcheck(a) => gradcheck(a, &ui),
        Command::Report(a) => report(a, &ui),
    }
}

struct Ui {
    quiet: bool,
    json: bool,
}

impl Ui {
    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// Summary on stdout: JSON with `--json`, else the human text.
    fn summary(&self, value: &impl Serialize, human: impl FnOnce() -> String) {
        if self.json {
            println!("{}", serde_json::to_string(value).expect("summary serializes"));
        } else if !self.quiet {
            println!("{}", human());
        }
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("DYNS_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("DYNS_SEED=`{s}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Resolution order: flag, config file, `DYNS_SEED`, preset default.
fn resolve_seed(flag: Option<u64>, cfg: &mut RunConfig, file_set: bool) -> Result<()> {
    if let Some(s) = flag {
        cfg.seed = s;
    } else if !file_set {
        if let Some(s) = env_seed()? {
            cfg.seed = s;
        }
    }
    Ok(())
}

fn resolve(a: &RunArgs) -> Result<RunConfig> {
    let (mut cfg, seed_set) = RunConfig::load(a.config.as_deref(), a.preset)?;
    resolve_seed(a.seed, &mut cfg, seed_set)?;
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(a.epochs, cfg.train.epochs);
    set!(a.lr, cfg.train.learning_rate);
    set!(a.batch_size, cfg.train.batch_size);
    set!(a.accumulation_steps, cfg.train.accumulation_steps);
    set!(a.d_lat, cfg.model.d_lat);
    set!(a.d_h, cfg.model.d_h);
    set!(a.d_k, cfg.model.d_k);
    set!(a.tokens, cfg.model.tokens);
    set!(a.rank, cfg.model.rank);
    set!(a.alpha, cfg.model.alpha);
    set!(a.dropout, cfg.model.dropout);
    if let Some(v) = &a.variant {
        cfg.variant = v.parse()?;
    }
    if let Some(b) = &a.backend {
        cfg.backend = b.parse().map_err(|e: String| Error::Config(e))?;
    }
    cfg.train_config().validate()?;
    if !(cfg.train.train_fraction > 0.0 && cfg.train.train_fraction < 1.0) {
        return Err(Error::Config("train_fraction must be in (0, 1)".into()));
    }
    Ok(cfg)
}

fn subjects_for(cfg: &RunConfig, seed: u64) -> Result<Vec<RoiTimeSeries>> {
    match &cfg.data {
        Some(p) => load_dataset(p),
        None => synth_generate(&cfg.synth.spec(seed)),
    }
}

fn dataset_for(cfg: &RunConfig, seed: u64) -> Result<DatasetSplit> {
    split_dataset(&subjects_for(cfg, seed)?, cfg.train.train_fraction, seed)
}

fn run_dir(out: Option<&Path>, seed: u64) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        PathBuf::from("run").join(format!("{secs}-seed{seed}"))
    })
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = format!("# dyns {VERSION}\n{}", cfg.to_toml());
    fs::write(dir.join("config.resolved"), text)?;
    Ok(())
}

fn generate(a: &GenerateArgs, ui: &Ui) -> Result<u8> {
    let (mut cfg, seed_set) = RunConfig::load(a.config.as_deref(), None)?;
    resolve_seed(a.seed, &mut cfg, seed_set)?;
    let s = &mut cfg.synth;
    if let Some(v) = a.rois {
        s.rois = v;
    }
    if let Some(v) = a.steps {
        s.steps = v;
    }
    if let Some(v) = a.subjects_per_class {
        s.subjects_per_class = v;
    }
    if let Some(v) = a.separation {
        s.separation = v;
    }
    if let Some(v) = a.switch_rate {
        s.switch_rate = v;
    }
    if let Some(v) = a.noise_std {
        s.noise_std = v;
    }
    s.null |= a.null;
    let subjects = synth_generate(&cfg.synth.spec(cfg.seed))?;
    let manifest = write_dataset(&a.out, &subjects)?;
    write_resolved(&a.out, &cfg)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        out: &'a Path,
        subjects: usize,
        seed: u64,
    }
    ui.summary(
        &Summary {
            out: &a.out,
            subjects: manifest.len(),
            seed: cfg.seed,
        },
        || format!("wrote {} subjects to {}", manifest.len(), a.out.display()),
    );
    Ok(0)
}

#[derive(Serialize, Deserialize)]
struct MetricsFile {
    version: String,
    seed: u64,
    variant: Variant,
    best_epoch: usize,
    test: Metrics,
    test_loss: f64,
    trainable_ratio: f64,
    frozen_checksum: String,
}

fn log_line(w: &mut impl Write, r: &LogRecord) -> Result<()> {
    writeln!(w, "{}", serde_json::to_string(r)?)?;
    Ok(())
}

fn train(a: &RunArgs, ui: &Ui) -> Result<u8> {
    let cfg = resolve(a)?;
    let dir = run_dir(a.out.as_deref(), cfg.seed);
    let ckpt = dir.join("checkpoints");
    fs::create_dir_all(&ckpt)?;
    write_resolved(&dir, &cfg)?;
    let dataset = dataset_for(&cfg, cfg.seed)?;
    ui.progress(format!(
        "training {} on {} train / {} test subjects into {}",
        cfg.variant,
        dataset.train.len(),
        dataset.test.len(),
        dir.display()
    ));
    let mut logs = std::io::BufWriter::new(fs::File::create(dir.join("logs.jsonl"))?);
    let mut io_err = None;
    let result = run_variant(cfg.variant, &dataset, &cfg.model, &cfg.train_config(), Some(&ckpt), |r| {
        if let Err(e) = log_line(&mut logs, r) {
            io_err.get_or_insert(e);
        }
        ui.progress(format!(
            "epoch {:>3} {:<5} loss {:.4} acc {:.4} f1 {:.4}",
            r.epoch, r.split, r.loss, r.accuracy, r.f1
        ));
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    logs.flush()?;
    checkpoint::save(ckpt.join("best.dyns"), &result.model.store.to_named())?;
    let metrics = metrics_file(&cfg, &result);
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;
    ui.summary(&metrics, || {
        let m = &metrics.test;
        format!(
            "test accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4} (best epoch {})",
            m.accuracy, m.precision, m.recall, m.f1, metrics.best_epoch
        )
    });
    Ok(0)
}

fn metrics_file(cfg: &RunConfig, r: &RunResult) -> MetricsFile {
    MetricsFile {
        version: VERSION.into(),
        seed: cfg.seed,
        variant: r.variant,
        best_epoch: r.best_epoch,
        test: r.test.metrics,
        test_loss: r.test.loss,
        trainable_ratio: r.model.trainable_ratio(),
        frozen_checksum: format!("{:016x}", r.model.store.checksum(Role::Frozen)),
    }
}

fn evaluate_run(a: &EvaluateArgs, ui: &Ui) -> Result<u8> {
    let resolved = a.run.join("config.resolved");
    let cfg: RunConfig = toml::from_str(&fs::read_to_string(&resolved)?)
        .map_err(|e| Error::Config(format!("{}: {e}", resolved.display())))?;
    let subjects = match &a.data {
        Some(p) => normalize_all(&load_dataset(p)?)?,
        None => normalize_all(&dataset_for(&cfg, cfg.seed)?.test)?,
    };
    let first = subjects
        .first()
        .ok_or_else(|| Error::Evaluation("dataset is empty".into()))?;
    let mut model = Pipeline::new(cfg.model.clone(), cfg.variant, first.rois(), cfg.seed)?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| a.run.join("checkpoints").join("best.dyns"));
    model.store.load_named(&checkpoint::load(&ckpt)?)?;
    let eval = evaluate(&model, &subjects, cfg.backend)?;
    let json = serde_json::to_string_pretty(&eval.metrics)? + "\n";
    match &a.out {
        Some(p) => fs::write(p, &json)?,
        None if !ui.json => print!("{json}"),
        None => {}
    }
    if ui.json {
        ui.summary(&eval.metrics, String::new);
    }
    Ok(0)
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    seeds: usize,
    accuracy_mean: f64,
    accuracy_std: f64,
    precision_mean: f64,
    precision_std: f64,
    recall_mean: f64,
    recall_std: f64,
    f1_mean: f64,
    f1_std: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn ablate(a: &AblateArgs, ui: &Ui) -> Result<u8> {
    let cfg = resolve(&a.run)?;
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let variants: Vec<Variant> = a
        .variants
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_>>()?;
    let dir = run_dir(a.run.out.as_deref(), cfg.seed);
    write_resolved(&dir, &cfg)?;
    let mut per_seed = csv_writer(&dir.join("ablation_runs.csv"))?;
    writeln!(per_seed, "variant,seed,best_epoch,accuracy,precision,recall,f1,test_loss")?;
    let mut logs = std::io::BufWriter::new(fs::File::create(dir.join("logs.jsonl"))?);
    let mut rows = Vec::new();
    for v in &variants {
        let mut ms: Vec<Metrics> = Vec::new();
        for seed in cfg.seed..cfg.seed + a.seeds {
            let dataset = dataset_for(&cfg, seed)?;
            let tc = dyns_core::TrainConfig {
                seed,
                ..cfg.train_config()
            };
            let r = run_variant(*v, &dataset, &cfg.model, &tc, None, |_| {})?;
            for rec in &r.log {
                #[derive(Serialize)]
                struct Tagged<'a> {
                    variant: String,
                    seed: u64,
                    #[serde(flatten)]
                    rec: &'a LogRecord,
                }
                writeln!(
                    logs,
                    "{}",
                    serde_json::to_string(&Tagged {
                        variant: v.to_string(),
                        seed,
                        rec
                    })?
                )?;
            }
            let m = r.test.metrics;
            writeln!(
                per_seed,
                "{v},{seed},{},{:?},{:?},{:?},{:?},{:?}",
                r.best_epoch, m.accuracy, m.precision, m.recall, m.f1, r.test.loss
            )?;
            ui.progress(format!("{v:<22} seed {seed}: accuracy {:.4} f1 {:.4}", m.accuracy, m.f1));
            ms.push(m);
        }
        let col = |f: fn(&Metrics) -> f64| mean_std(&ms.iter().map(f).collect::<Vec<_>>());
        let (am, asd) = col(|m| m.accuracy);
        let (pm, psd) = col(|m| m.precision);
        let (rm, rsd) = col(|m| m.recall);
        let (fm, fsd) = col(|m| m.f1);
        rows.push(AblationRow {
            variant: v.to_string(),
            seeds: ms.len(),
            accuracy_mean: am,
            accuracy_std: asd,
            precision_mean: pm,
            precision_std: psd,
            recall_mean: rm,
            recall_std: rsd,
            f1_mean: fm,
            f1_std: fsd,
        });
    }
    per_seed.flush()?;
    logs.flush()?;
    let mut w = csv_writer(&dir.join("ablation.csv"))?;
    writeln!(w, "variant,seeds,accuracy_mean,accuracy_std,precision_mean,precision_std,recall_mean,recall_std,f1_mean,f1_std")?;
    for r in &rows {
        writeln!(
            w,
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            r.variant,
            r.seeds,
            r.accuracy_mean,
            r.accuracy_std,
            r.precision_mean,
            r.precision_std,
            r.recall_mean,
            r.recall_std,
            r.f1_mean,
            r.f1_std
        )?;
    }
    w.flush()?;
    ui.summary(&rows, || {
        let mut s = format!("{:<22} {:>16} {:>16}\n", "variant", "accuracy", "f1");
        for r in &rows {
            s += &format!(
                "{:<22} {:>8.4} ± {:.4} {:>8.4} ± {:.4}\n",
                r.variant, r.accuracy_mean, r.accuracy_std, r.f1_mean, r.f1_std
            );
        }
        s.trim_end().to_string()
    });
    Ok(0)
}

fn csv_writer(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    Ok(std::io::BufWriter::new(fs::File::create(path)?))
}

/// Linearly interpolated quantile of sorted samples.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn scan_bench(a: &ScanBenchArgs, ui: &Ui) -> Result<u8> {
    if a.repeats == 0 || a.width == 0 || a.chunk == 0 || a.lengths.contains(&0) {
        return Err(Error::Config("lengths, width, repeats and chunk must be positive".into()));
    }
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("T,backend,median_ns,p10_ns,p90_ns\n");
    #[derive(Serialize)]
    struct Row {
        #[serde(rename = "T")]
        steps: usize,
        backend: ScanBackend,
        median_ns: f64,
        p10_ns: f64,
        p90_ns: f64,
    }
    let mut rows = Vec::new();
    for &t in &a.lengths {
        let decay = Tensor::uniform(vec![t, a.width], 0.45, &mut rng).map(|x| x + 0.5);
        let drive = Tensor::normal(vec![t, a.width], 1.0, &mut rng);
        for backend in [ScanBackend::Sequential, ScanBackend::Parallel] {
            let mut times: Vec<f64> = (0..a.repeats)
                .map(|_| {
                    let start = Instant::now();
                    let s = match backend {
                        ScanBackend::Sequential => scan_sequential(decay.data(), drive.data(), a.width),
                        ScanBackend::Parallel => scan_parallel(decay.data(), drive.data(), a.width, a.chunk),
                    };
                    std::hint::black_box(s);
                    start.elapsed().as_nanos() as f64
                })
                .collect();
            times.sort_by(f64::total_cmp);
            let row = Row {
                steps: t,
                backend,
                median_ns: quantile(&times, 0.5),
                p10_ns: quantile(&times, 0.1),
                p90_ns: quantile(&times, 0.9),
            };
            out += &format!("{t},{backend},{:.0},{:.0},{:.0}\n", row.median_ns, row.p10_ns, row.p90_ns);
            rows.push(row);
        }
    }
    match &a.out {
        Some(p) => fs::write(p, &out)?,
        None if !ui.json => print!("{out}"),
        None => {}
    }
    if ui.json {
        ui.summary(&rows, String::new);
    }
    Ok(0)
}

fn gradcheck(a: &GradcheckArgs, ui: &Ui) -> Result<u8> {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let checks = op_suite(seed)?;
    let mut failed = 0;
    #[derive(Serialize)]
    struct Row {
        op: &'static str,
        max_rel_error: f64,
        coordinates: usize,
        pass: bool,
    }
    let rows: Vec<Row> = checks
        .iter()
        .map(|c| {
            let pass = c.report.max_rel_error < a.tolerance;
            failed += usize::from(!pass);
            Row {
                op: c.name,
                max_rel_error: c.report.max_rel_error,
                coordinates: c.report.coordinates,
                pass,
            }
        })
        .collect();
    ui.summary(&rows, || {
        rows.iter()
            .map(|r| {
                format!(
                    "{:<20} {:>10.3e} over {:>4} coords  {}",
                    r.op,
                    r.max_rel_error,
                    r.coordinates,
                    if r.pass { "ok" } else { "FAIL" }
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    });
    if failed > 0 {
        eprintln!("error: {failed} op(s) exceed tolerance {:e}", a.tolerance);
        return Ok(3);
    }
    Ok(0)
}

fn find_logs(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let log = root.join("logs.jsonl");
    if log.is_file() {
        out.push(log);
        return Ok(());
    }
    if root.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(root)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for e in entries.into_iter().filter(|p| p.is_dir()) {
            find_logs(&e, out)?;
        }
    }
    Ok(())
}

fn report(a: &ReportArgs, ui: &Ui) -> Result<u8> {
    let mut logs = Vec::new();
    for r in &a.runs {
        find_logs(r, &mut logs)?;
    }
    if logs.is_empty() {
        return Err(Error::Content("no logs.jsonl found under the given paths".into()));
    }
    let mut out = String::from("run,variant,seed,epoch,split,loss,accuracy,precision,recall,f1\n");
    let mut count = 0;
    for path in &logs {
        let run = path.parent().map(|p| p.display().to_string()).unwrap_or_default();
        let text = fs::read_to_string(path)?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            #[derive(Deserialize)]
            struct Line {
                #[serde(default)]
                variant: Option<String>,
                #[serde(default)]
                seed: Option<u64>,
                #[serde(flatten)]
                rec: LogRecord,
            }
            let l: Line = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            let r = l.rec;
            out += &format!(
                "{run},{},{},{},{},{:?},{:?},{:?},{:?},{:?}\n",
                l.variant.unwrap_or_default(),
                l.seed.map(|s| s.to_string()).unwrap_or_default(),
                r.epoch,
                r.split,
                r.loss,
                r.accuracy,
                r.precision,
                r.recall,
                r.f1
            );
            count += 1;
        }
    }
    match &a.out {
        Some(p) => fs::write(p, &out)?,
        None if !ui.json => print!("{out}"),
        None => {}
    }
    #[derive(Serialize)]
    struct Summary {
        runs: usize,
        records: usize,
    }
    if ui.json || a.out.is_some() {
        ui.summary(
            &Summary {
                runs: logs.len(),
                records: count,
            },
            || format!("collected {count} records from {} run(s)", logs.len()),
        );
    }
    Ok(0)
}
