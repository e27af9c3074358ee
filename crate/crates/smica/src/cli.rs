//! Command-line surface. One command per process; every artifact is written
//! with fixed-precision numbers so identical inputs, flags, and seed produce
//! identical bytes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use crate::baselines::{self, JdiagOptions};
use crate::em::{self, FitOptions};
use crate::error::{Result, SmicaError};
use crate::extract;
use crate::io;
use crate::model::{ParamsFile, SmicaParams};
use crate::spectral::{self, BandSpec, Recording};
use crate::synth;

#[derive(Parser)]
#[command(
    name = "smica",
    about = "Blind source separation on band-averaged spectral covariances",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct InputArgs {
    /// Recording CSV: rows are time samples, columns are channels, optional
    /// header row.
    #[arg(long, short = 'i')]
    input: PathBuf,
    /// Sampling rate in Hz. Falls back to a JSON sidecar next to the input
    /// (same stem, .json extension) containing {"fs": <Hz>}.
    #[arg(long)]
    fs: Option<f64>,
}

#[derive(Args, Clone)]
struct BandArgs {
    /// Uniform band layout lo:hi:count in Hz.
    #[arg(long, default_value = "1:70:40", conflicts_with = "bands_file")]
    bands: String,
    /// JSON file with explicit band edges: [[lo, hi], ...].
    #[arg(long)]
    bands_file: Option<PathBuf>,
    /// Drop or trim bands below this frequency.
    #[arg(long)]
    fmin: Option<f64>,
    /// Drop or trim bands above this frequency.
    #[arg(long)]
    fmax: Option<f64>,
}

impl BandArgs {
    fn resolve(&self) -> Result<BandSpec> {
        let spec = match &self.bands_file {
            Some(path) => BandSpec::new(io::read_json(path)?)?,
            None => {
                let parts: Vec<&str> = self.bands.split(':').collect();
                if parts.len() != 3 {
                    return Err(SmicaError::Config(format!(
                        "--bands expects lo:hi:count, got '{}'",
                        self.bands
                    )));
                }
                let lo: f64 = parts[0]
                    .parse()
                    .map_err(|_| SmicaError::Config(format!("bad band edge '{}'", parts[0])))?;
                let hi: f64 = parts[1]
                    .parse()
                    .map_err(|_| SmicaError::Config(format!("bad band edge '{}'", parts[1])))?;
                let count: usize = parts[2]
                    .parse()
                    .map_err(|_| SmicaError::Config(format!("bad band count '{}'", parts[2])))?;
                BandSpec::uniform(lo, hi, count)?
            }
        };
        if self.fmin.is_some() || self.fmax.is_some() {
            spec.clip(self.fmin, self.fmax)
        } else {
            Ok(spec)
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit the spectral model and write params + fit report JSON.
    Fit {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        bands: BandArgs,
        /// Number of sources to estimate.
        #[arg(long, short = 'q')]
        q: usize,
        /// Relative loss-decrease stopping threshold.
        #[arg(long, default_value_t = 1e-7)]
        tol: f64,
        #[arg(long, default_value_t = 100)]
        max_iter_warm: usize,
        #[arg(long, default_value_t = 10_000)]
        max_iter_main: usize,
        /// Output prefix; writes <prefix>.params.json and <prefix>.report.json.
        #[arg(long, short = 'o')]
        output: PathBuf,
    },
    /// Dump the band-averaged spectral covariance set as JSON.
    Spectra {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        bands: BandArgs,
        /// Output JSON path.
        #[arg(long, short = 'o')]
        output: PathBuf,
    },
    /// Extract source time courses with a fitted model.
    Separate {
        #[command(flatten)]
        input: InputArgs,
        /// Fitted parameters (<prefix>.params.json from `fit`).
        #[arg(long)]
        params: PathBuf,
        /// wiener or pinv.
        #[arg(long, default_value = "wiener")]
        method: String,
        /// Output CSV of sources (rows are time samples, q columns).
        #[arg(long, short = 'o')]
        output: PathBuf,
    },
    /// Zero the listed sources and project back to sensor space.
    Denoise {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        params: PathBuf,
        /// Comma-separated source indices to remove, or 'none'.
        #[arg(long, default_value = "none")]
        exclude: String,
        /// Output CSV of cleaned channels.
        #[arg(long, short = 'o')]
        output: PathBuf,
    },
    /// Joint diagonalization of the band covariances (noiseless baseline).
    Jdiag {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        bands: BandArgs,
        #[arg(long, default_value_t = 1000)]
        max_sweeps: usize,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// Output JSON with the unmixing matrix.
        #[arg(long, short = 'o')]
        output: PathBuf,
    },
    /// Narrow-band Rayleigh-quotient spatial filter.
    Ssd {
        #[command(flatten)]
        input: InputArgs,
        /// Target frequency in Hz.
        #[arg(long)]
        freq: f64,
        /// Band width around the target, in Hz.
        #[arg(long, default_value_t = 2.0)]
        bandwidth: f64,
        /// Output prefix; writes <prefix>.filter.json and <prefix>.source.csv.
        #[arg(long, short = 'o')]
        output: PathBuf,
    },
    /// Run a named synthetic scenario and write a results table.
    Benchmark {
        /// Scenario name: phantom or recovery.
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Planted-source amplitude for the phantom scenario: a tier name
        /// (high, mid, low) or a number.
        #[arg(long, default_value = "high")]
        amplitude: String,
        /// Output prefix; writes <prefix>.results.json and <prefix>.results.csv.
        #[arg(long, short = 'o')]
        output: PathBuf,
    },
}

fn load_recording(args: &InputArgs) -> Result<Recording> {
    let fs = io::resolve_fs(&args.input, args.fs)?;
    io::read_recording(&args.input, fs)
}

fn load_params(path: &Path) -> Result<SmicaParams> {
    let file: ParamsFile = io::read_json(path)?;
    file.into_params()
}

#[derive(serde::Serialize)]
struct UnmixingFile {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    criterion: f64,
    converged: bool,
}

#[derive(serde::Serialize)]
struct FilterFile {
    w: Vec<f64>,
    target_freq: f64,
    bandwidth: f64,
}

#[derive(serde::Serialize, Clone)]
struct BenchmarkRow {
    scenario: String,
    method: String,
    amari: Option<f64>,
    cosine: Option<f64>,
    runtime_s: f64,
}

#[derive(serde::Serialize)]
struct BenchmarkFile {
    scenario: String,
    seed: u64,
    /// Declared mapping from the amplitude knob to this run.
    amplitude: Option<AmplitudeDecl>,
    rows: Vec<BenchmarkRow>,
}

#[derive(serde::Serialize)]
struct AmplitudeDecl {
    tier: String,
    value: f64,
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit {
            input,
            bands,
            q,
            tol,
            max_iter_warm,
            max_iter_main,
            output,
        } => {
            let rec = load_recording(&input)?;
            let band_spec = bands.resolve()?;
            let emp = spectral::estimate_spectral_covariances(&rec, &band_spec)?;
            let opts = FitOptions {
                q,
                max_iter_warm,
                max_iter_main,
                tol,
                seed: 0,
            };
            let (params, report) = em::fit(&emp, &opts)?;
            io::write_json(&suffixed(&output, ".params.json"), &ParamsFile::from(&params))?;
            io::write_json(&suffixed(&output, ".report.json"), &report)?;
            eprintln!(
                "fit: {} iterations (warm {}, main {}), converged={}, final loss {:.6e}",
                report.warm_iterations + report.main_iterations,
                report.warm_iterations,
                report.main_iterations,
                report.converged,
                report.loss_history.last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Spectra {
            input,
            bands,
            output,
        } => {
            let rec = load_recording(&input)?;
            let band_spec = bands.resolve()?;
            let emp = spectral::estimate_spectral_covariances(&rec, &band_spec)?;
            io::write_json(&output, &io::SpectraFile::from(&emp))
        }
        Command::Separate {
            input,
            params,
            method,
            output,
        } => {
            let rec = load_recording(&input)?;
            let params = load_params(&params)?;
            let est = match method.as_str() {
                "wiener" => extract::wiener_sources(&params, &rec)?,
                "pinv" => extract::pinv_sources(&params, &rec)?,
                other => {
                    return Err(SmicaError::Config(format!(
                        "unknown extraction method '{other}' (expected wiener or pinv)"
                    )))
                }
            };
            io::write_matrix_csv(&output, &est.data, true, "s")
        }
        Command::Denoise {
            input,
            params,
            exclude,
            output,
        } => {
            let rec = load_recording(&input)?;
            let params = load_params(&params)?;
            let spurious = parse_exclude(&exclude)?;
            let cleaned = extract::denoise(&params, &rec, &spurious)?;
            io::write_matrix_csv(&output, cleaned.data(), true, "ch")
        }
        Command::Jdiag {
            input,
            bands,
            max_sweeps,
            tol,
            output,
        } => {
            let rec = load_recording(&input)?;
            let band_spec = bands.resolve()?;
            let emp = spectral::estimate_spectral_covariances(&rec, &band_spec)?;
            let unmix = baselines::jdiag_fit(&emp, &JdiagOptions { max_sweeps, tol })?;
            if !unmix.converged {
                eprintln!("warning: joint diagonalization hit the sweep cap before converging");
            }
            let rows = (0..unmix.w.nrows())
                .map(|r| unmix.w.row(r).iter().copied().collect())
                .collect();
            io::write_json(
                &output,
                &UnmixingFile {
                    w: rows,
                    criterion: unmix.criterion,
                    converged: unmix.converged,
                },
            )
        }
        Command::Ssd {
            input,
            freq,
            bandwidth,
            output,
        } => {
            let rec = load_recording(&input)?;
            let filter = baselines::ssd(&rec, freq, bandwidth)?;
            io::write_json(
                &suffixed(&output, ".filter.json"),
                &FilterFile {
                    w: filter.w.iter().copied().collect(),
                    target_freq: filter.target_freq,
                    bandwidth: filter.bandwidth,
                },
            )?;
            let series = filter.apply(&rec)?;
            let as_matrix = DMatrix::from_fn(1, series.len(), |_, s| series[s]);
            io::write_matrix_csv(&suffixed(&output, ".source.csv"), &as_matrix, true, "s")
        }
        Command::Benchmark {
            scenario,
            seed,
            amplitude,
            output,
        } => run_benchmark(&scenario, seed, &amplitude, &output),
    }
}

fn parse_exclude(text: &str) -> Result<Vec<usize>> {
    let trimmed = text.trim();
    if trimmed.is_empty() || trimmed == "none" {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| SmicaError::Config(format!("bad source index '{part}' in --exclude")))
        })
        .collect()
}

fn parse_amplitude(text: &str) -> Result<(String, f64)> {
    for (tier, value) in synth::PHANTOM_TIERS {
        if text == tier {
            return Ok((tier.to_string(), value));
        }
    }
    text.parse::<f64>()
        .map(|v| ("custom".to_string(), v))
        .map_err(|_| {
            SmicaError::Config(format!(
                "bad --amplitude '{text}': expected high, mid, low, or a number"
            ))
        })
}

fn pattern_of(rec: &Recording, w: &DVector<f64>) -> DVector<f64> {
    // generative topography of a spatial filter: Cov(X) w
    let p = rec.channels();
    let t = rec.samples();
    let mut centered = rec.data().clone();
    for r in 0..p {
        let mean = centered.row(r).sum() / t as f64;
        for s in 0..t {
            centered[(r, s)] -= mean;
        }
    }
    let cov = &centered * centered.transpose() / t as f64;
    cov * w
}

fn run_benchmark(scenario: &str, seed: u64, amplitude: &str, output: &Path) -> Result<()> {
    let (rows, decl) = match scenario {
        "phantom" => {
            let (tier, value) = parse_amplitude(amplitude)?;
            let gt = synth::phantom_scenario(seed, value)?;
            let emp = spectral::estimate_spectral_covariances(&gt.recording, &gt.bands)?;
            let planted = gt.mixing.column(0).into_owned();
            let mut rows = Vec::new();

            let start = Instant::now();
            let (params, _) = em::fit(&emp, &FitOptions::new(gt.mixing.ncols()))?;
            let (_, cos) = synth::best_column_match(&params.mixing, &planted);
            rows.push(BenchmarkRow {
                scenario: scenario.into(),
                method: "smica".into(),
                amari: None,
                cosine: Some(cos),
                runtime_s: start.elapsed().as_secs_f64(),
            });

            let start = Instant::now();
            let unmix = baselines::jdiag_fit(&emp, &JdiagOptions::default())?;
            let mixing = unmix.w.clone().try_inverse().ok_or_else(|| {
                SmicaError::Numerical("joint-diagonalization unmixing is singular".into())
            })?;
            let (_, cos) = synth::best_column_match(&mixing, &planted);
            rows.push(BenchmarkRow {
                scenario: scenario.into(),
                method: "jdiag".into(),
                amari: None,
                cosine: Some(cos),
                runtime_s: start.elapsed().as_secs_f64(),
            });

            let start = Instant::now();
            let filter = baselines::ssd(&gt.recording, 20.0, 2.0)?;
            let pattern = pattern_of(&gt.recording, &filter.w);
            let cos = synth::cosine_similarity(&pattern, &planted);
            rows.push(BenchmarkRow {
                scenario: scenario.into(),
                method: "ssd".into(),
                amari: None,
                cosine: Some(cos),
                runtime_s: start.elapsed().as_secs_f64(),
            });
            (rows, Some(AmplitudeDecl { tier, value }))
        }
        "recovery" => {
            let bands = BandSpec::uniform(1.0, 45.0, 8)?;
            let (p, q, t) = (6usize, 3usize, 1 << 16);
            let mut spectra = DMatrix::<f64>::zeros(8, q);
            for b in 0..8 {
                for i in 0..q {
                    spectra[(b, i)] = 2.5_f64.powf(((b + 3 * i) % 8) as f64 / 7.0 * 2.0 - 1.0);
                }
            }
            let mean_power = spectra.sum() / (8 * q) as f64;
            let gt = synth::generate(&synth::SynthSpec {
                p,
                q,
                bands: bands.clone(),
                samples: t,
                fs: 100.0,
                seed,
                source_power: spectra,
                noise_power: DMatrix::from_element(8, p, mean_power / 10.0),
                mixing: None,
            })?;
            let emp = spectral::estimate_spectral_covariances(&gt.recording, &bands)?;
            let mut rows = Vec::new();

            let start = Instant::now();
            let (params, _) = em::fit(&emp, &FitOptions::new(q))?;
            let (amari, cos) = synth::recovery_scores(&params.mixing, &gt.mixing)?;
            rows.push(BenchmarkRow {
                scenario: scenario.into(),
                method: "smica".into(),
                amari: Some(amari),
                cosine: Some(cos),
                runtime_s: start.elapsed().as_secs_f64(),
            });

            let start = Instant::now();
            let unmix = baselines::jdiag_fit(&emp, &JdiagOptions::default())?;
            let mixing = unmix.w.clone().try_inverse().ok_or_else(|| {
                SmicaError::Numerical("joint-diagonalization unmixing is singular".into())
            })?;
            let (amari, cos) = synth::recovery_scores(&mixing, &gt.mixing)?;
            rows.push(BenchmarkRow {
                scenario: scenario.into(),
                method: "jdiag".into(),
                amari: Some(amari),
                cosine: Some(cos),
                runtime_s: start.elapsed().as_secs_f64(),
            });
            (rows, None)
        }
        other => {
            return Err(SmicaError::Config(format!(
                "unknown scenario '{other}' (expected phantom or recovery)"
            )))
        }
    };

    io::write_json(
        &suffixed(output, ".results.json"),
        &BenchmarkFile {
            scenario: scenario.into(),
            seed,
            amplitude: decl,
            rows: rows.clone(),
        },
    )?;
    let mut csv = String::from("scenario,method,amari,cosine,runtime_s\n");
    for row in &rows {
        let amari = row.amari.map(io::format_f64).unwrap_or_default();
        let cosine = row.cosine.map(io::format_f64).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.scenario,
            row.method,
            amari,
            cosine,
            io::format_f64(row.runtime_s)
        ));
    }
    std::fs::write(suffixed(output, ".results.csv"), csv)?;
    Ok(())
}
