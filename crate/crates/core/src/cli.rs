//! The `pden` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{Arm, DataSpec, Layout, RunConfig};
use crate::data::{apply_shift, save_pgm_grid, DomainDataset, ShiftSpec};
use crate::error::{PdenError, Result};
use crate::eval::{
    benchmark_domains, dedup_values, evaluate_all, export_features, few_shot_adapt, sweep, write_metrics_csv, ArmTag,
    MetricsRecord, SweepParam,
};
use crate::gradcheck::{format_report, run_suite_timed, GradcheckOptions};
use crate::nn::Checkpoint;
use crate::pipeline::{pretrain, run_pden_observed, MetricsLog, RunOutput};
use crate::tensor::{derive_seed, Rng};

/// Environment variable naming the root directory for run outputs.
pub const OUT_DIR_ENV: &str = "PDEN_OUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "pden",
    version,
    about = "Progressive domain expansion on small image datasets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the arm selected in a config file.
    Train(TrainArgs),
    /// Evaluate a task-model checkpoint on one or more domains.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Train one arm per value of a hyperparameter.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config and the environment.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// erm, pden, sweep, fewshot or gradcheck.
    #[arg(long)]
    pub arm: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Inline JSON or a path to a JSON file: `{"data": ..., "shifts": [...]}`.
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = GradcheckOptions::default().seed)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// K, w_adv, w_cyc or w_div.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub values: Vec<f64>,
}

/// Domains to evaluate a checkpoint on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub data: DataSpec,
    #[serde(default)]
    pub layout: Option<Layout>,
    /// Shifted copies to evaluate in addition to the data itself.
    #[serde(default)]
    pub shifts: Vec<ShiftSpec>,
}

/// Process exit code for an error: 2 for usage and configuration problems,
/// 1 for everything else.
pub fn exit_code(err: &PdenError) -> u8 {
    match err {
        PdenError::Config(_) => 2,
        _ => 1,
    }
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train(a) => {
            let mut cfg = load_config(&a.run)?;
            if let Some(arm) = &a.arm {
                cfg.arm = arm.parse()?;
                cfg.validate()?;
            }
            train(&cfg, &a.run)
        }
        Command::Eval(a) => eval_cmd(&a),
        Command::Gradcheck(a) => {
            let opts = GradcheckOptions {
                instances: a.instances,
                seed: a.seed,
                ..Default::default()
            };
            gradcheck(&opts, a.out.as_deref())
        }
        Command::Sweep(a) => {
            let mut cfg = load_config(&a.run)?;
            let param: SweepParam = a.param.parse()?;
            let (values, dups) = dedup_values(&a.values);
            if !dups.is_empty() {
                warn!("ignoring duplicate sweep values {dups:?}");
            }
            if values.is_empty() {
                return Err(PdenError::Config("--values needs at least one value".into()));
            }
            cfg.arm = Arm::Sweep;
            cfg.sweep = Some(crate::config::SweepSpec { param, values });
            cfg.validate()?;
            train(&cfg, &a.run)
        }
    }
}

fn load_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(root) = std::env::var_os(OUT_DIR_ENV) {
        return PathBuf::from(root).join(&cfg.name);
    }
    cfg.out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name))
}

/// Files written by a run, relative to its output directory.
struct Artifacts {
    root: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    fn new(root: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            files: Vec::new(),
        })
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        if !self.files.iter().any(|f| f == rel) {
            self.files.push(rel.to_owned());
        }
        Ok(p)
    }

    fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(self.path(rel)?, bytes)?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub arm: Arm,
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
}

fn write_manifest(art: &mut Artifacts, cfg: &RunConfig, run_id: &str) -> Result<()> {
    let mut artifacts = Vec::new();
    for rel in &art.files {
        let bytes = std::fs::read(art.root.join(rel))?;
        artifacts.push(ArtifactEntry {
            path: rel.clone(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = RunManifest {
        run_id: run_id.into(),
        arm: cfg.arm,
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        artifacts,
    };
    std::fs::write(art.root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn config_base(a: &RunArgs) -> PathBuf {
    a.config.parent().map(Path::to_path_buf).unwrap_or_default()
}

const GRID_COLS: usize = 8;

fn write_grid(art: &mut Artifacts, rel: &str, ds: &DomainDataset, count: usize) -> Result<()> {
    let images = ds.images.slice_rows(0, count.min(ds.len()));
    save_pgm_grid(&images, GRID_COLS, &art.path(rel)?)
}

fn write_dataset_manifest(art: &mut Artifacts, ds: &DomainDataset) -> Result<()> {
    let rel = format!("datasets/{}.json", ds.name.replace('/', "_"));
    ds.manifest().save(&art.path(&rel)?)
}

fn write_train_log(art: &mut Artifacts, log: &MetricsLog) -> Result<()> {
    let mut w = csv::Writer::from_path(art.path("train_log.csv")?)?;
    for s in &log.steps {
        w.serialize(s)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(art.path("phases.csv")?)?;
    for p in &log.phases {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

fn print_records(records: &[MetricsRecord]) {
    for r in records {
        println!(
            "{:<10} K={:<2} {:<28} acc={:.4} n={}",
            r.arm, r.k, r.domain, r.accuracy, r.n
        );
    }
}

/// Runs `cfg.arm` and writes its artifacts. Returns the process exit code.
pub fn train(cfg: &RunConfig, args: &RunArgs) -> Result<u8> {
    let run_id = format!("{}-{}", cfg.name, &cfg.hash()[..12]);
    let mut art = Artifacts::new(out_dir(cfg, args.out.as_deref()))?;
    info!("run {run_id} ({:?}) writing to {}", cfg.arm, art.root.display());
    art.write("config.json", cfg.to_json())?;

    if cfg.arm == Arm::Gradcheck {
        let opts = GradcheckOptions {
            instances: cfg.gradcheck_instances.unwrap_or(20),
            seed: cfg.train.seed,
            ..Default::default()
        };
        let (results, secs) = run_suite_timed(&opts);
        let report = format_report(&results, secs);
        print!("{report}");
        art.write("gradcheck.txt", &report)?;
        write_manifest(&mut art, cfg, &run_id)?;
        return Ok(if results.iter().all(|r| r.passed) { 0 } else { 1 });
    }

    let base = config_base(args);
    let train_ds = DomainDataset {
        name: "train".into(),
        ..cfg.train_data.load(&base, cfg.layout)?
    };
    let test_ds = DomainDataset {
        name: "test".into(),
        ..cfg.test_data.load(&base, cfg.layout)?
    };
    let domains = benchmark_domains(&test_ds, &cfg.benchmark)?;
    let tc = &cfg.train;
    let tag = |arm: &str, k: usize| ArmTag {
        run_id: run_id.clone(),
        arm: arm.into(),
        seed: tc.seed,
        k,
        weights: tc.weights,
    };
    write_grid(&mut art, "grids/source.pgm", &train_ds, cfg.grid_images)?;
    write_dataset_manifest(&mut art, &train_ds)?;
    write_dataset_manifest(&mut art, &domains[0])?;
    for d in &domains[1..] {
        write_dataset_manifest(&mut art, d)?;
        write_grid(
            &mut art,
            &format!("grids/{}.pgm", d.name.replace('/', "_")),
            d,
            cfg.grid_images,
        )?;
    }

    let records = match cfg.arm {
        Arm::Erm => {
            let mut log = MetricsLog::default();
            let model = pretrain(&train_ds, tc, &mut log)?;
            Checkpoint::from_task(&model, tc.seed, tc.pretrain_steps() as u64)
                .with_extra(json!({ "run_id": run_id, "arm": "erm" }))
                .save(&art.path("checkpoints/task_final.ckpt")?)?;
            write_train_log(&mut art, &log)?;
            if cfg.export_features {
                export_features(&model, &train_ds, &domains, &art.path("features.csv")?)?;
            }
            let mut r = tag("erm", 0).records(&evaluate_all(&model, std::slice::from_ref(&train_ds))?);
            r.extend(tag("erm", 0).records(&evaluate_all(&model, &domains)?));
            r
        }
        Arm::Pden | Arm::Fewshot => {
            let out = run_with_checkpoints(&mut art, cfg, &run_id, &train_ds)?;
            write_train_log(&mut art, &out.log)?;
            if cfg.export_features {
                export_features(&out.model, &train_ds, &domains, &art.path("features.csv")?)?;
            }
            let source = std::slice::from_ref(&train_ds);
            let mut r = tag("erm", 0).records(&evaluate_all(&out.pretrained, source)?);
            r.extend(tag("erm", 0).records(&evaluate_all(&out.pretrained, &domains)?));
            r.extend(tag("pden", tc.k).records(&evaluate_all(&out.model, source)?));
            r.extend(tag("pden", tc.k).records(&evaluate_all(&out.model, &domains)?));
            if cfg.arm == Arm::Fewshot {
                r.extend(fewshot_records(cfg, &out, &train_ds, &test_ds, &tag)?);
            }
            r
        }
        Arm::Sweep => {
            let spec = cfg.sweep.as_ref().expect("validated");
            let (values, dups) = dedup_values(&spec.values);
            if !dups.is_empty() {
                warn!("ignoring duplicate sweep values {dups:?}");
            }
            sweep(&train_ds, &domains, tc, spec.param, &values, &run_id)?
        }
        Arm::Gradcheck => unreachable!(),
    };
    print_records(&records);
    write_metrics_csv(&art.path("metrics.csv")?, &records)?;
    write_manifest(&mut art, cfg, &run_id)?;
    Ok(0)
}

/// Expansion run that flushes checkpoints and sample grids after every
/// round, so an aborted run keeps everything finished before the failure.
fn run_with_checkpoints(
    art: &mut Artifacts,
    cfg: &RunConfig,
    run_id: &str,
    train_ds: &DomainDataset,
) -> Result<RunOutput> {
    let tc = &cfg.train;
    let extra = json!({ "run_id": run_id, "weights": tc.weights });
    let out = run_pden_observed(train_ds, tc, |e| {
        let step = e.k as u64;
        if e.k == 0 {
            return Checkpoint::from_task(e.model, tc.seed, step)
                .with_extra(extra.clone())
                .save(&art.path("checkpoints/task_pretrain.ckpt")?);
        }
        let domain = e.pool.synthetic.last().expect("round adds a domain");
        Checkpoint::from_task(e.model, tc.seed, step)
            .with_extra(extra.clone())
            .save(&art.path(&format!("checkpoints/task_k{}.ckpt", e.k))?)?;
        Checkpoint::from_generator(&domain.generator, tc.seed, step)
            .with_extra(extra.clone())
            .save(&art.path(&format!("checkpoints/generator_k{}.ckpt", e.k))?)?;
        if let Some(c) = e.cycle {
            Checkpoint::from_cycle(c, tc.seed, step)
                .with_extra(extra.clone())
                .save(&art.path(&format!("checkpoints/cycle_k{}.ckpt", e.k))?)?;
        }
        write_dataset_manifest(art, &domain.data)?;
        write_grid(
            art,
            &format!("grids/synthetic_k{}.pgm", e.k),
            &domain.data,
            cfg.grid_images,
        )
    })?;
    Checkpoint::from_task(&out.model, tc.seed, tc.k as u64)
        .with_extra(extra)
        .save(&art.path("checkpoints/task_final.ckpt")?)?;
    Ok(out)
}

fn fewshot_records(
    cfg: &RunConfig,
    out: &RunOutput,
    train_ds: &DomainDataset,
    test_ds: &DomainDataset,
    tag: &dyn Fn(&str, usize) -> ArmTag,
) -> Result<Vec<MetricsRecord>> {
    let spec = cfg.fewshot.as_ref().expect("validated");
    let target_train = apply_shift(train_ds, &spec.shift)?;
    let target_test = [apply_shift(test_ds, &spec.shift)?];
    let k = cfg.train.k;
    let mut records = tag("fewshot-0", k).records(&evaluate_all(&out.model, &target_test)?);
    for &n in &spec.shots {
        let mut rng = Rng::new(derive_seed(cfg.train.seed, 0xf5 + n as u64));
        let shots = target_train.shots(n, &mut rng)?;
        let adapted = few_shot_adapt(&out.model, &shots, &spec.finetune, &mut rng)?;
        records.extend(tag(&format!("fewshot-{n}"), k).records(&evaluate_all(&adapted, &target_test)?));
    }
    Ok(records)
}

fn gradcheck(opts: &GradcheckOptions, out: Option<&Path>) -> Result<u8> {
    let (results, secs) = run_suite_timed(opts);
    let report = format_report(&results, secs);
    print!("{report}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("gradcheck.txt"), &report)?;
    }
    Ok(if results.iter().all(|r| r.passed) { 0 } else { 1 })
}

fn eval_cmd(a: &EvalArgs) -> Result<u8> {
    let (text, base) = if a.data.trim_start().starts_with('{') {
        (a.data.clone(), PathBuf::new())
    } else {
        let p = Path::new(&a.data);
        let text = std::fs::read_to_string(p)
            .map_err(|e| PdenError::Config(format!("cannot read data spec {}: {e}", p.display())))?;
        (text, p.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    let spec: EvalSpec = serde_json::from_str(&text).map_err(|e| PdenError::Config(format!("data spec: {e}")))?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let model = ckpt.to_task()?;
    let data = spec.data.load(&base, spec.layout)?;
    let mut domains = vec![data.clone()];
    for s in &spec.shifts {
        domains.push(apply_shift(&data, s)?);
    }
    let run_id = ckpt
        .manifest
        .extra
        .get("run_id")
        .and_then(|v| v.as_str())
        .unwrap_or("eval")
        .to_owned();
    let weights = ckpt
        .manifest
        .extra
        .get("weights")
        .and_then(|w| serde_json::from_value(w.clone()).ok())
        .unwrap_or_default();
    let tag = ArmTag {
        run_id,
        arm: "eval".into(),
        seed: ckpt.manifest.seed,
        k: ckpt.manifest.step as usize,
        weights,
    };
    let records = tag.records(&evaluate_all(&model, &domains)?);
    print_records(&records);
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        write_metrics_csv(&dir.join("eval_metrics.csv"), &records)?;
    }
    Ok(0)
}
