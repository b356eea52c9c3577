use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use entropy_monitor::dump::RunManifest;
use entropy_monitor::entropy::{build_default_binning, BinningScheme};
use entropy_monitor::error::{Error, Result};
use entropy_monitor::pipeline::{
    calibrate, manifest_entropies, manifest_plot_data, profile_manifest, run_demo, run_detect,
    select_layers, write_demo_dumps, CalibrationMethod, DemoConfig, DetectionReport, ProfileStore,
    ThresholdStore,
};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  invalid command line
  3  configuration error (bin edges, layer coverage, weights, dimensions)
  4  data error (non-finite activations, degenerate batches, inconsistent report)
  5  format error (malformed dump, manifest, report or store)
  6  compatibility error (unsupported dump version or dtype)
  7  calibration error (missing adversarial samples, zero spread)
  8  I/O error";

const HIST_BINS: usize = 20;

#[derive(Parser)]
#[command(name = "entropy-monitor", version, about = "Activation-entropy adversarial input monitor", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct BinsArg {
    /// Bin scheme: `default` or a TOML file with a [layers] table.
    #[arg(long, default_value = "default")]
    bins: String,
}

impl BinsArg {
    fn load(&self) -> Result<(BinningScheme, String)> {
        if self.bins == "default" {
            Ok((build_default_binning(), "default".into()))
        } else {
            let path = PathBuf::from(&self.bins);
            Ok((BinningScheme::from_toml_file(&path)?, path.display().to_string()))
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic end-to-end run: toy CNN, FGSM, profiling, calibration, detection.
    Demo {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        train_batches: Option<usize>,
        #[arg(long)]
        test_batches: Option<usize>,
        /// Comma-separated tap names.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<String>>,
        /// TOML file with demo settings; flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        bins: BinsArg,
        #[arg(long, default_value = "demo-out")]
        out: PathBuf,
        /// Also write activation dumps with train/test manifests.
        #[arg(long)]
        dump: bool,
    },
    /// Build baseline profiles from a labelled training manifest.
    Profile {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<String>>,
        #[command(flatten)]
        bins: BinsArg,
        #[arg(long, default_value = "profiles.json")]
        out: PathBuf,
    },
    /// Derive per-layer thresholds from stored profiles.
    Calibrate {
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Optimized)]
        method: Method,
        #[arg(long, default_value_t = 1.0)]
        fpr_weight: f64,
        #[arg(long, default_value_t = 1.0)]
        fnr_weight: f64,
        #[arg(long, default_value = "thresholds.json")]
        out: PathBuf,
    },
    /// Classify every batch of a manifest against stored thresholds.
    Detect {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        thresholds: PathBuf,
        /// Profiles for the fused multi-layer score.
        #[arg(long)]
        profiles: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<String>>,
        #[command(flatten)]
        bins: BinsArg,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Check a report's metrics against its verdicts and print the table.
    Eval {
        #[arg(long)]
        report: PathBuf,
    },
    /// Per-batch entropies and entropy histograms as CSV.
    PlotData {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<String>>,
        #[command(flatten)]
        bins: BinsArg,
        #[arg(long, default_value = "plot-data")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Midpoint,
    Optimized,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn file_safe(layer: &str) -> String {
    layer.replace(|c: char| !c.is_ascii_alphanumeric() && c != '.' && c != '_', "_")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Demo {
            seed,
            epsilon,
            batch_size,
            train_batches,
            test_batches,
            layers,
            config,
            bins,
            out,
            dump,
        } => {
            let mut cfg = match config {
                Some(path) => DemoConfig::from_toml_file(&path)?,
                None => DemoConfig::default(),
            };
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = epsilon {
                cfg.epsilon = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = train_batches {
                cfg.train_batches = v;
            }
            if let Some(v) = test_batches {
                cfg.test_batches = v;
            }
            if let Some(v) = layers {
                cfg.layers = v;
            }
            let (scheme, bins_id) = bins.load()?;
            let run = run_demo(&cfg, &scheme, &bins_id, dump)?;
            create_dir(&out)?;
            write(&out.join("report.json"), &run.report.to_json())?;
            run.profiles.save(&out.join("profiles.json"))?;
            run.thresholds.save(&out.join("thresholds.json"))?;
            write(&out.join("entropies.csv"), &run.entropies_csv())?;
            for l in &cfg.layers {
                let csv = run.histogram_csv(l, HIST_BINS)?;
                write(&out.join(format!("hist_{}.csv", file_safe(l))), &csv)?;
            }
            if dump {
                write_demo_dumps(&run, &out)?;
            }
            print!("{}", run.report.summary_table());
            println!("\nwrote {}", out.display());
        }
        Command::Profile {
            manifest,
            layers,
            bins,
            out,
        } => {
            let m = RunManifest::load(&manifest)?;
            let (scheme, bins_id) = bins.load()?;
            let layers = select_layers(&m, layers.as_deref());
            let store = profile_manifest(&m, &scheme, &layers, &bins_id)?;
            store.save(&out)?;
            for p in &store.profiles {
                print!(
                    "{}: clean mean {:.4} std {:.4} [{:.4}, {:.4}] over {} batches",
                    p.layer_key, p.clean.mean, p.clean.std, p.clean.min, p.clean.max, p.n_train_batches
                );
                match &p.adversarial {
                    Some(a) => println!("; adversarial mean {:.4} [{:.4}, {:.4}]", a.mean, a.min, a.max),
                    None => println!(),
                }
            }
        }
        Command::Calibrate {
            profiles,
            method,
            fpr_weight,
            fnr_weight,
            out,
        } => {
            let store = ProfileStore::load(&profiles)?;
            let method = match method {
                Method::Midpoint => CalibrationMethod::Midpoint,
                Method::Optimized => CalibrationMethod::Optimized,
            };
            let thresholds = calibrate(&store, method, fpr_weight, fnr_weight)?;
            thresholds.save(&out)?;
            for t in &thresholds.thresholds {
                println!(
                    "{}: tau {:.4} {:?} (train FPR {:.2}, FNR {:.2})",
                    t.layer_key, t.tau, t.direction, t.train_fpr, t.train_fnr
                );
            }
        }
        Command::Detect {
            manifest,
            thresholds,
            profiles,
            layers,
            bins,
            out,
        } => {
            let m = RunManifest::load(&manifest)?;
            let (scheme, bins_id) = bins.load()?;
            let thresholds = ThresholdStore::load(&thresholds)?;
            let profiles = profiles.map(|p| ProfileStore::load(&p)).transpose()?;
            let layers = select_layers(&m, layers.as_deref());
            let report = run_detect(&m, &scheme, &bins_id, profiles.as_ref(), &thresholds, &layers)?;
            write(&out, &report.to_json())?;
            print!("{}", report.summary_table());
        }
        Command::Eval { report } => {
            let text = std::fs::read_to_string(&report).map_err(|e| Error::io(&report, e))?;
            let r = DetectionReport::from_json(&text)?;
            r.verify()?;
            print!("{}", r.summary_table());
            println!("\nreport metrics consistent with verdicts");
        }
        Command::PlotData {
            manifest,
            layers,
            bins,
            out,
        } => {
            let m = RunManifest::load(&manifest)?;
            let (scheme, _) = bins.load()?;
            let layers = select_layers(&m, layers.as_deref());
            let entropies = manifest_entropies(&m, &scheme, &layers)?;
            create_dir(&out)?;
            let mut csv = String::from("batch_id,truth,layer,entropy_bits,sample_count,empty\n");
            for b in &entropies {
                for (l, e) in &b.estimates {
                    let truth = serde_json::to_value(b.truth).expect("label serializes");
                    csv.push_str(&format!(
                        "{},{},{},{:.10},{},{}\n",
                        b.batch_id,
                        truth.as_str().unwrap_or("unknown"),
                        l,
                        e.entropy_bits,
                        e.sample_count,
                        e.empty
                    ));
                }
            }
            write(&out.join("entropies.csv"), &csv)?;
            for l in &layers {
                let hist = manifest_plot_data(&entropies, l, HIST_BINS)?;
                write(&out.join(format!("hist_{}.csv", file_safe(l))), &hist)?;
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
