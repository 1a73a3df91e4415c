use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use jointlens::classifier::{load_external_scores, measure_latency, write_scores};
use jointlens::service::{run_pipeline, PipelineOptions, Store};
use jointlens::soxai::export_soxai_scatter;
use jointlens::synthgen::{generate_dataset, generate_joint, stratified_split, DatasetConfig, JointSpec, Split};
use jointlens::triage::{evaluate, format_eval_table};
use jointlens::trust::{format_trust_matrix, trust_matrix, trust_report};
use jointlens::xai::{explain, export_explanation, render_overlay, Explanation};
use jointlens::{preprocess, Config, DatasetManifest, DefectKind, NormalizedImage, ReferenceScorer, ScoreRecord, ScorerBackend};
use jointlens_api::{router, AppState};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "jointlens", version, about = "Solder joint inspection with occlusion explanations and review triage")]
struct Cli {
    /// JSON config file; omitted fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic joint dataset with ground-truth masks.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        defect_ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Assign stratified train/val/test splits to a manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        /// Output manifest; defaults to rewriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.6)]
        train: f64,
        #[arg(long, default_value_t = 0.2)]
        val: f64,
        #[arg(long, default_value_t = 0.2)]
        test: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score, triage and explain a dataset into a case store.
    Inspect {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// JSONL scores that replace the reference scorer's confidences.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Accuracy / overkill / escape table.
    Eval {
        #[command(flatten)]
        src: ScoreSource,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value = "reference")]
        name: String,
        /// Also write the computed scores as JSONL.
        #[arg(long)]
        write_scores: Option<PathBuf>,
    },
    /// Explain one joint, given as a manifest id or an image path.
    Explain {
        target: String,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "explanation")]
        out: PathBuf,
    },
    /// Second-order scatter of explanations across a dataset.
    Soxai {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "soxai")]
        out: PathBuf,
        /// Include non-defective joints as well.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Trust matrix and NetTrustScore.
    Trust {
        #[command(flatten)]
        src: ScoreSource,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Mean scorer latency after warm-up runs.
    BenchLatency {
        #[arg(long, default_value_t = 20)]
        warmups: usize,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "splash")]
        kind: DefectKind,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ScoreSource {
    /// JSONL score records with labels.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Score a manifest with the reference scorer.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Restrict manifest scoring to one split.
    #[arg(long, requires = "manifest")]
    split: Option<Split>,
}

fn load_image(path: &Path) -> Result<NormalizedImage> {
    let raw = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(preprocess(&raw.to_rgb8())?)
}

fn score_manifest(manifest: &DatasetManifest, split: Option<Split>, scorer: &dyn ScorerBackend) -> Result<Vec<ScoreRecord>> {
    manifest
        .entries
        .par_iter()
        .filter(|e| split.is_none() || e.split == split)
        .map(|e| {
            let img = load_image(&manifest.resolve(&e.image_path))?;
            let c = scorer.score(&img).map_err(|f| anyhow::anyhow!("scoring {}: {}", e.id, f.0))?;
            Ok(ScoreRecord::new(e.id.clone(), c.value(), Some(e.label))?)
        })
        .collect()
}

fn records(src: &ScoreSource) -> Result<Vec<ScoreRecord>> {
    match (&src.scores, &src.manifest) {
        (Some(p), _) => Ok(load_external_scores(p)?),
        (None, Some(m)) => score_manifest(&DatasetManifest::load(m)?, src.split, &ReferenceScorer::default()),
        (None, None) => bail!("either --scores or --manifest is required"),
    }
}

fn write_explanation(expl: &Explanation, img: &NormalizedImage, out: &Path, stem: &str) -> Result<PathBuf> {
    let json = export_explanation(expl, out, stem)?;
    render_overlay(&img.to_rgb8(), expl)?.save(out.join(format!("{stem}.overlay.png")))?;
    Ok(json)
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => Config::default(),
    };
    let scorer = ReferenceScorer::default();
    match cli.command {
        Command::GenData {
            out,
            n,
            defect_ratio,
            seed,
        } => {
            let m = generate_dataset(&DatasetConfig::uniform(n, defect_ratio, seed), &out)?;
            println!(
                "wrote {} joints ({} defective) to {}",
                m.entries.len(),
                m.count(jointlens::Label::Defective, None),
                out.join("manifest.jsonl").display()
            );
        }
        Command::Split {
            manifest,
            out,
            train,
            val,
            test,
            seed,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let outcome = stratified_split(&m, (train, val, test), seed)?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            let dest = out.unwrap_or(manifest);
            outcome.manifest.save(&dest)?;
            for label in jointlens::Label::ALL {
                let c = |s| outcome.manifest.count(label, Some(s));
                println!(
                    "{label}: train {} / val {} / test {}",
                    c(Split::Train),
                    c(Split::Val),
                    c(Split::Test)
                );
            }
        }
        Command::Inspect {
            manifest,
            data_dir,
            scores,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let store = Store::open(&data_dir, config.service.clone())?;
            let score_overrides = match scores {
                Some(p) => Some(
                    load_external_scores(p)?
                        .into_iter()
                        .map(|r| (r.id, r.confidence.value()))
                        .collect::<BTreeMap<_, _>>(),
                ),
                None => None,
            };
            let opts = PipelineOptions {
                thresholds: config.thresholds,
                xai: config.xai.clone(),
                score_overrides,
                ..PipelineOptions::default()
            };
            let s = run_pipeline(&store, &m, &scorer, &opts)?;
            store.snapshot()?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Eval {
            src,
            threshold,
            name,
            write_scores: dest,
        } => {
            let recs = records(&src)?;
            if let Some(p) = dest {
                write_scores(p, &recs)?;
            }
            let report = evaluate(&recs, threshold.unwrap_or(config.eval_threshold))?;
            print!("{}", format_eval_table(&[(name.as_str(), &report)]));
        }
        Command::Explain { target, manifest, out } => {
            let (stem, img) = match &manifest {
                Some(mp) if !Path::new(&target).is_file() => {
                    let m = DatasetManifest::load(mp)?;
                    let e = m
                        .get(&target)
                        .with_context(|| format!("no entry '{target}' in {}", mp.display()))?;
                    (e.id.clone(), load_image(&m.resolve(&e.image_path))?)
                }
                _ => {
                    let p = Path::new(&target);
                    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("joint").to_string();
                    (stem, load_image(p)?)
                }
            };
            let expl = explain(&img, &scorer, &config.xai)?;
            let json = write_explanation(&expl, &img, &out, &stem)?;
            println!(
                "confidence {:.4}, {} factor(s), mass fraction {:.3}",
                expl.importance.base_confidence.value(),
                expl.factors.len(),
                expl.mass_fraction
            );
            for (i, f) in expl.factors.iter().enumerate() {
                println!("  factor {i}: {} cell(s), importance {:.4}, bbox {:?}", f.cells.len(), f.importance, f.bbox());
            }
            println!("wrote {}", json.display());
        }
        Command::Soxai { manifest, out, all, limit } => {
            let mut m = DatasetManifest::load(&manifest)?;
            if !all {
                m.entries.retain(|e| e.label.is_defective());
            }
            if let Some(n) = limit {
                m.entries.truncate(n);
            }
            let expl_dir = out.join("explanations");
            let explanations = m
                .entries
                .par_iter()
                .map(|e| {
                    let img = load_image(&m.resolve(&e.image_path))?;
                    let x = explain(&img, &scorer, &config.xai)?;
                    write_explanation(&x, &img, &expl_dir, &e.id)?;
                    Ok((e.id.clone(), x))
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            let res = export_soxai_scatter(&m, &explanations, Some(&scorer), &config.tsne, &out)?;
            println!(
                "{} points, final KL {:.4}; wrote {} and {}",
                res.points.len(),
                res.kl_history.last().copied().unwrap_or(0.0),
                res.scatter_path.display(),
                res.plot_path.display()
            );
        }
        Command::Trust { src, threshold, json } => {
            let recs = records(&src)?;
            let t = threshold.unwrap_or(config.eval_threshold);
            if json {
                println!("{}", serde_json::to_string_pretty(&trust_report(&recs, t, &config.trust)?)?);
            } else {
                let report = trust_report(&recs, t, &config.trust)?;
                print!("{}", format_trust_matrix(&trust_matrix(&recs, t, &config.trust)?));
                println!("NetTrustScore {:.4} over {} samples", report.net_trust_score, report.n);
            }
        }
        Command::BenchLatency {
            warmups,
            runs,
            seed,
            kind,
        } => {
            let joint = generate_joint(&JointSpec::new(seed, kind))?;
            let img = preprocess(&joint.image)?;
            let r = measure_latency(&scorer, &img, warmups, runs)?;
            println!(
                "{}: mean {:.3} ms over {} runs after {} warm-ups (min {:.3}, max {:.3})",
                r.backend,
                r.mean_seconds * 1e3,
                r.runs,
                r.warmups,
                r.min_seconds * 1e3,
                r.max_seconds * 1e3
            );
        }
        Command::Serve { port, data_dir, host } => {
            fs::create_dir_all(&data_dir)?;
            let state = Arc::new(AppState::open(&data_dir, config, Arc::new(scorer))?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                tracing::info!("listening on {}", listener.local_addr()?);
                axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    run(Cli::parse())
}
