//! `radflip`: train engines, scan them bit by bit, and run injection
//! campaigns against them.
//!
//! Exit codes: 0 success, 2 config error, 3 planning or campaign error,
//! 4 training divergence.

mod config;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use config::Run;
use radflip::addrspace::{build_block_map, OsPagemapProvider, Roi};
use radflip::dram::SchemeId;
use radflip::injector::apply_flips;
use radflip::nn::engine::EngineImage;
use radflip::nn::suite::{build_suite, Variant};
use radflip::nn::{ActivationKind, EngineModel, ExitPolicy, NnError};
use radflip::report::{report_dirs, write_report_csv, CampaignRecord, ROUNDS_FILE, SUMMARY_FILE};
use radflip::scanner::{
    plan_round, run_campaign, sensitivity_scan, Area, CampaignConfig, InjectionMode, PageSource, Platform, ScanOptions,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "radflip", version, about = "DRAM bit-flip emulation against quantized inference engines")]
struct Cli {
    /// Overrides the manifest seed (campaigns, injection) or the model seed (train).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the manifest's `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Address mapping scheme, replacing the one in dram_mapping.json.
    #[arg(long, global = true, value_parser = ["s1", "s2", "s3"])]
    scheme: Option<String>,
    /// Translate the loaded image through this process's page table instead
    /// of the synthetic allocator. Needs CAP_SYS_ADMIN on Linux.
    #[arg(long, global = true)]
    os_pagemap: bool,
    /// Run manifest.
    #[arg(long, global = true, default_value = "run.json")]
    manifest: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the clean, clip and protected engines.
    Train,
    /// Recalibrate the clip bounds of an engine on the calibration split.
    Calibrate {
        #[arg(long)]
        engine: PathBuf,
        /// Calibration samples; defaults to the model config.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Flip every bit of an area once and record the metric drop.
    Scan {
        #[arg(long)]
        engine: PathBuf,
        /// `global` (parameters), `image`, or `START+LEN`.
        #[arg(long, default_value = "global")]
        area: String,
        #[arg(long, default_value_t = 64)]
        eval_samples: usize,
        #[arg(long, default_value_t = 4096)]
        page_size: usize,
        #[arg(long, default_value_t = 16)]
        page_rows: usize,
    },
    /// Plan one round of flips and write the plan (and optionally the flipped image).
    Inject {
        #[arg(long)]
        engine: PathBuf,
        #[arg(long)]
        bits: usize,
        #[arg(long, default_value = "global")]
        area: String,
        /// Independent uniform bits instead of SEU/MCU events.
        #[arg(long)]
        uniform: bool,
        /// Also write the flipped image.
        #[arg(long)]
        apply: bool,
    },
    /// Run a multi-round campaign.
    Campaign {
        #[arg(long)]
        engine: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Label for the report; inferred from the engine when omitted.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Merge campaign result directories into one table.
    Report { dirs: Vec<PathBuf> },
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

trait Code<T> {
    fn code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Code<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, err: e.into() })
    }
}

const CONFIG: u8 = 2;
const CAMPAIGN: u8 = 3;
const DIVERGED: u8 = 4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let scheme = cli.scheme.as_deref().map(str::parse::<SchemeId>).transpose().code(CONFIG)?;
    if let Cmd::Report { dirs } = &cli.cmd {
        return report(dirs, cli.out.as_deref().unwrap_or(Path::new(".")));
    }
    let run = Run::load(&cli.manifest, scheme).code(CONFIG)?;
    let out = cli.out.clone().unwrap_or_else(|| run.manifest.out.clone());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display())).code(CONFIG)?;
    let seed = cli.seed.unwrap_or(run.manifest.seed);
    match &cli.cmd {
        Cmd::Train => train(&run, cli.seed, &out),
        Cmd::Calibrate { engine, samples } => calibrate(&run, engine, *samples, &out),
        Cmd::Scan { engine, area, eval_samples, page_size, page_rows } => {
            let (image, model) = load_engine(engine)?;
            let area = parse_area(area).code(CONFIG)?;
            scan(&run, image, &model, area, *eval_samples, (*page_size, *page_rows), &out)
        }
        Cmd::Inject { engine, bits, area, uniform, apply } => {
            let (image, _) = load_engine(engine)?;
            let mut cfg = CampaignConfig::new(*bits, 1, parse_area(area).code(CONFIG)?);
            cfg.seed = seed;
            cfg.mode = if *uniform { InjectionMode::Uniform } else { InjectionMode::Correlated };
            inject(&run, image, &cfg, *apply, cli.os_pagemap, &out)
        }
        Cmd::Campaign { engine, config, variant } => {
            let (image, model) = load_engine(engine)?;
            let text = std::fs::read_to_string(config)
                .with_context(|| format!("reading campaign config {}", config.display()))
                .code(CONFIG)?;
            let mut cfg: CampaignConfig = serde_json::from_str(&text)
                .with_context(|| format!("parsing campaign config {}", config.display()))
                .code(CONFIG)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let variant = variant.unwrap_or_else(|| infer_variant(&model));
            campaign(&run, image, &model, &cfg, variant, cli.os_pagemap, &out)
        }
        Cmd::Report { .. } => unreachable!(),
    }
}

fn load_engine(path: &Path) -> Result<(EngineImage, EngineModel), Failure> {
    let bytes = std::fs::read(path).with_context(|| format!("reading engine {}", path.display())).code(CONFIG)?;
    EngineImage::from_bytes(bytes).with_context(|| format!("parsing engine {}", path.display())).code(CONFIG)
}

fn parse_area(s: &str) -> Result<Area> {
    match s {
        "global" => Ok(Area::Global),
        "image" => Ok(Area::Image),
        _ => {
            let (a, b) = s.split_once('+').ok_or_else(|| anyhow!("area {s:?}: expected global, image or START+LEN"))?;
            Ok(Area::Sensitive { start: a.trim().parse()?, len: b.trim().parse()? })
        }
    }
}

fn infer_variant(m: &EngineModel) -> Variant {
    if !m.exits.is_empty() || m.backbone.iter().any(|l| l.act.kind == ActivationKind::LogClip) {
        Variant::Protected
    } else if m.backbone.iter().any(|l| l.act.kind == ActivationKind::Clip) {
        Variant::Clip
    } else {
        Variant::Clean
    }
}

/// Exit heads only fire under the model config's policy.
fn policy_for(run: &Run, m: &EngineModel) -> ExitPolicy {
    if m.exits.is_empty() {
        ExitPolicy::DISABLED
    } else {
        run.suite.policy
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display())).code(CONFIG)
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(v).code(CONFIG)?;
    text.push('\n');
    write(path, text)
}

fn train(run: &Run, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let mut cfg = run.suite.clone();
    if let Some(s) = seed {
        cfg.model_seed = s;
    }
    let suite = build_suite(&cfg).map_err(|e| {
        let code = if matches!(e, NnError::Diverged { .. }) { DIVERGED } else { CONFIG };
        Failure { code, err: anyhow::Error::new(e).context("training") }
    })?;
    for v in Variant::ALL {
        let path = out.join(format!("{v}.rdnt"));
        write(&path, &suite.engine(v).serialize().bytes)?;
        println!("{v}: {} bytes -> {}", suite.engine(v).serialize().len(), path.display());
    }
    write_json(&out.join("provenance.json"), &suite.provenance)
}

fn calibrate(run: &Run, engine: &Path, samples: Option<usize>, out: &Path) -> Result<(), Failure> {
    let (_, mut model) = load_engine(engine)?;
    let (train, _) = run.suite.datasets();
    let calib = train.head(samples.unwrap_or(run.suite.calib_samples));
    let theta = model.calibrate_theta((0..calib.len()).map(|i| calib.input(i))).code(CONFIG)?;
    model.apply_theta(&theta);
    let stem = engine.file_stem().and_then(|s| s.to_str()).unwrap_or("engine");
    write(&out.join(format!("{stem}.calibrated.rdnt")), &model.serialize().bytes)?;
    write_json(&out.join("theta.json"), &theta)
}

fn scan(
    run: &Run,
    mut image: EngineImage,
    model: &EngineModel,
    area: Area,
    eval_samples: usize,
    (page_size, page_rows): (usize, usize),
    out: &Path,
) -> Result<(), Failure> {
    let range = area.resolve(&image).code(CONFIG)?;
    let opts = ScanOptions { range: Some(range), eval_samples };
    let map = sensitivity_scan(&mut image, &run.eval, &policy_for(run, model), &opts).code(CAMPAIGN)?;
    let csv = std::fs::File::create(out.join("sensitivity.csv")).code(CONFIG)?;
    map.write_csv(std::io::BufWriter::new(csv)).code(CONFIG)?;
    let grid = std::fs::File::create(out.join("page_grid.csv")).code(CONFIG)?;
    map.write_page_grid(std::io::BufWriter::new(grid), page_size, page_rows).code(CONFIG)?;
    let summary = serde_json::json!({
        "image_len": map.image_len,
        "range": range,
        "baseline": map.baseline,
        "eval_samples": map.eval_samples,
        "bits": map.bits.len(),
        "sensitive_bits": map.sensitive_count(),
        "densest_page": map.densest_window(page_size).map(|(start, count)| serde_json::json!({"start": start, "len": page_size, "sensitive_bits": count})),
    });
    write_json(&out.join("scan.json"), &summary)?;
    println!("{} of {} bits sensitive", map.sensitive_count(), map.bits.len());
    Ok(())
}

fn platform(run: &Run, image: &EngineImage, os_pagemap: bool) -> Result<Platform, Failure> {
    let pages = if os_pagemap {
        let mut provider = OsPagemapProvider::open().code(CONFIG)?;
        let roi = Roi::new(image.bytes.as_ptr() as u64, image.len() as u64).code(CONFIG)?;
        PageSource::Fixed(build_block_map(roi, &mut provider).code(CONFIG)?)
    } else {
        PageSource::Synthetic
    };
    Ok(Platform { dram: run.dram.clone(), error_model: run.error_model.clone(), pages })
}

fn inject(run: &Run, mut image: EngineImage, cfg: &CampaignConfig, apply: bool, os: bool, out: &Path) -> Result<(), Failure> {
    let platform = platform(run, &image, os)?;
    let (_, plan) = plan_round(&image, &platform, cfg, 0).code(CAMPAIGN)?;
    write_json(&out.join("plan.json"), &plan)?;
    if apply {
        let record = apply_flips(&mut image.bytes, &plan).code(CAMPAIGN)?;
        write(&out.join("injected.rdnt"), &image.bytes)?;
        write_json(&out.join("record.json"), &record)?;
    }
    println!("{} bits in {} events", plan.total_bits, plan.events.len());
    Ok(())
}

fn campaign(
    run: &Run,
    mut image: EngineImage,
    model: &EngineModel,
    cfg: &CampaignConfig,
    variant: Variant,
    os: bool,
    out: &Path,
) -> Result<(), Failure> {
    let platform = platform(run, &image, os)?;
    cfg.area.resolve(&image).code(CONFIG)?;
    let result = run_campaign(&mut image, &run.eval, &policy_for(run, model), &platform, cfg).code(CAMPAIGN)?;
    let rounds = std::fs::File::create(out.join(ROUNDS_FILE)).code(CONFIG)?;
    result.write_rounds_csv(std::io::BufWriter::new(rounds)).code(CONFIG)?;
    let summary = result.summary();
    println!(
        "{variant}: {} rounds of {} bits, crash rate {:.4}, mean {}",
        summary.rounds,
        summary.total_bits,
        summary.crash_rate,
        summary.mean.map_or("-".into(), |m| format!("{m:.2}"))
    );
    write_json(&out.join(SUMMARY_FILE), &CampaignRecord::new(run.scheme, run.suite.task, variant, summary))
}

fn report(dirs: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let rows = report_dirs(dirs).code(CONFIG)?;
    std::fs::create_dir_all(out).code(CONFIG)?;
    let mut buf = Vec::new();
    write_report_csv(&rows, &mut buf).code(CONFIG)?;
    write(&out.join("report.csv"), &buf)?;
    write_json(&out.join("report.json"), &rows)?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}
