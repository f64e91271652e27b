use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};

use curvreg::batch::{run_batch, write_synthetic_set};
use curvreg::config::RunConfig;
use curvreg::curvelet::{coefficient_mosaic, encode_coefficients, fdct_forward};
use curvreg::evaluation::TerrainSpec;
use curvreg::geometry::PointCloud;
use curvreg::io::{
    keypoints_csv, load_cloud, matches_csv, read_pgm16, write_atomic, write_descriptors,
    write_pgm16, write_range_image, write_text,
};
use curvreg::pipeline::{extract_features, register_pair_detailed};
use curvreg::range_image::{build_range_image, RangeImage};
use curvreg::selftest;

/// Curvelet-feature registration of terrain laser scans.
#[derive(Debug, Parser)]
#[command(name = "curvreg", version)]
struct Cli {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Leave wall-clock timings out of all outputs.
    #[arg(long, global = true)]
    no_timings: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Project a point cloud to a 16-bit range image (PGM plus sidecar).
    Project {
        cloud: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Write the log-magnitude curvelet coefficient mosaic of a range image.
    Coeffs {
        /// Point cloud, or a range-image PGM written by `project`.
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Also dump all coefficients in binary form.
        #[arg(long)]
        raw: Option<PathBuf>,
    },
    /// Detect keypoints and write `<prefix>.keypoints.csv` and `<prefix>.descriptors.bin`.
    Features {
        cloud: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Register `data` into the frame of `model` and print the result JSON.
    Register {
        model: PathBuf,
        data: PathBuf,
        /// Write the JSON here instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Write the putative matches with inlier flags as CSV.
        #[arg(long)]
        matches: Option<PathBuf>,
    },
    /// Register a directory of scans pairwise and evaluate against ground truth.
    Batch {
        scans: PathBuf,
        /// Pose file with one `id tx ty tz qw qx qy qz` line per scan.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        /// Overrides `evaluation.stride`.
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Scan a synthetic terrain along a random trajectory.
    Synth {
        #[arg(short, long)]
        output: PathBuf,
        /// Terrain description (TOML); a random terrain from the seed when omitted.
        #[arg(long)]
        terrain: Option<PathBuf>,
        /// Overrides `synth.scans`.
        #[arg(long)]
        scans: Option<usize>,
    },
    /// Run the built-in property checks.
    Selftest,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn read_cloud(path: &Path) -> Result<PointCloud> {
    let loaded = load_cloud(path)?;
    if loaded.dropped > 0 {
        warn!(
            "{}: dropped {} non-finite points",
            path.display(),
            loaded.dropped
        );
    }
    info!("{}: {} points", path.display(), loaded.cloud.len());
    Ok(loaded.cloud)
}

fn range_image(cfg: &RunConfig, cloud: &Path) -> Result<RangeImage> {
    let cloud = read_cloud(cloud)?;
    build_range_image(&cloud, &cfg.projection.model(), &cfg.limits).context("project stage failed")
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let with_timings = !cli.no_timings;
    match cli.command {
        Command::Project { cloud, output } => {
            let img = range_image(&cfg, &cloud)?;
            write_range_image(&output, &img)?;
        }
        Command::Coeffs { input, output, raw } => {
            let (w, h, values) = if input
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
            {
                read_pgm16(&input)?
            } else {
                let img = range_image(&cfg, &input)?;
                (img.width, img.height, img.normalized)
            };
            let pyr =
                fdct_forward(&values, h, w, &cfg.curvelet).context("curvelet stage failed")?;
            write_pgm16(&output, w, h, &coefficient_mosaic(&pyr))?;
            if let Some(raw) = raw {
                let bytes = encode_coefficients(&pyr);
                write_atomic(&raw, |f| f.write_all(&bytes))?;
            }
        }
        Command::Features { cloud, output } => {
            let cloud = read_cloud(&cloud)?;
            let f = extract_features(&cloud, &cfg.pipeline(cli.seed), None)?;
            let prefix = output.to_string_lossy();
            write_text(
                Path::new(&format!("{prefix}.keypoints.csv")),
                &keypoints_csv(&f.features.keypoints),
            )?;
            write_descriptors(
                Path::new(&format!("{prefix}.descriptors.bin")),
                &f.features.descriptors,
            )?;
            println!("{} keypoints", f.features.len());
        }
        Command::Register {
            model,
            data,
            output,
            matches,
        } => {
            let (m, d) = (read_cloud(&model)?, read_cloud(&data)?);
            let r = register_pair_detailed(&m, &d, &cfg.pipeline(cli.seed))?;
            let json = r.result.to_json(with_timings) + "\n";
            match output {
                Some(p) => write_text(&p, &json)?,
                None => print!("{json}"),
            }
            if let Some(p) = matches {
                write_text(&p, &matches_csv(&r.matches, &r.inlier_flags))?;
            }
        }
        Command::Batch {
            scans,
            truth,
            output,
            stride,
        } => {
            let mut cfg = cfg;
            if let Some(s) = stride {
                cfg.evaluation.stride = s;
            }
            let s = run_batch(
                &scans,
                truth.as_deref(),
                &output,
                &cfg,
                cli.seed,
                with_timings,
            )?;
            println!(
                "{} pairs, {} registration failures",
                s.pairs.len(),
                s.registration_failures()
            );
            if let (Some((t, r)), Some(f)) = (s.rmse, s.failure_rate) {
                println!("RMSE translation {t:.4} m, rotation {r:.4} rad, failure rate {f:.3}");
            }
        }
        Command::Synth {
            output,
            terrain,
            scans,
        } => {
            let mut cfg = cfg;
            if let Some(n) = scans {
                cfg.synth.scans = n;
            }
            let spec = match terrain {
                Some(p) => {
                    let text = fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    let spec: TerrainSpec = toml::from_str(&text)
                        .with_context(|| format!("parsing {}", p.display()))?;
                    spec
                }
                None => TerrainSpec {
                    noise_sigma: cfg.synth.noise_sigma_m,
                    ..TerrainSpec::random_sized(cli.seed, cfg.synth.terrain_size_m)
                },
            };
            let poses = write_synthetic_set(&spec, &cfg, cli.seed, &output)?;
            println!("{} scans written to {}", poses.len(), output.display());
        }
        Command::Selftest => {
            let results = selftest::run(cli.seed);
            let mut failed = 0;
            for r in &results {
                let status = if r.passed { "PASS" } else { "FAIL" };
                if with_timings {
                    println!("{status} {}: {} ({:.2} s)", r.name, r.detail, r.seconds);
                } else {
                    println!("{status} {}: {}", r.name, r.detail);
                }
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                bail!("{failed} of {} checks failed", results.len());
            }
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("CURVREG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .with_context(|| format!("CURVREG_THREADS={v:?} is not a non-negative integer"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
