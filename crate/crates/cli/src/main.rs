//! `reid` — command-line surface over the re-identification toolkit.
//!
//! Exit codes: 0 success, 1 verification failure (gradcheck), 2 usage
//! errors, 3 data errors. The `REID_THREADS` environment variable caps the
//! worker count (0 or unset picks the automatic default).

use clap::{Parser, Subcommand};
use reid_core::blob::{
    read_distance_matrix, read_heatmap_stack, write_distance_matrix, write_fusion_head,
    write_heatmap_stack,
};
use reid_core::error::Error;
use reid_core::evaluation::{
    evaluate_vehicleid, evaluate_veri, keypoint_mse, keypoint_mse_squared, keypoint_precision,
    KeypointEval, Protocol,
};
use reid_core::fusion::{train, FusionConfig, FusionSample};
use reid_core::gradcheck;
use reid_core::heatmaps::{find_peak, stack_selected, DEFAULT_SIGMA, NUM_KEYPOINT_CHANNELS};
use reid_core::manifest::{
    load_embedding_records, load_heatmaps, load_keypoint_annotation, load_manifest,
};
use reid_core::orientation::{
    confusion_matrix, select_group, Orientation, OrientationLikelihood,
};
use reid_core::retrieval::{assemble_joint_distances, rerank_distances, DistanceMetric, RerankParams};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "reid",
    version,
    about = "Vehicle re-identification toolkit: key-point selection, losses, retrieval and evaluation protocols"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Comma-separated 8-vector, e.g. `0.5,0.3,0.2,0,0,0,0,0`.
#[derive(Clone, Debug)]
struct EightFloats([f64; 8]);

fn parse_eight_floats(s: &str) -> Result<EightFloats, String> {
    let values: Result<Vec<f64>, _> = s.split(',').map(|t| t.trim().parse::<f64>()).collect();
    match values {
        Ok(v) if v.len() == 8 => {
            let mut arr = [0.0; 8];
            arr.copy_from_slice(&v);
            Ok(EightFloats(arr))
        }
        Ok(v) => Err(format!("expected 8 comma-separated values, got {}", v.len())),
        Err(e) => Err(format!("bad float: {e}")),
    }
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Comma-separated layer widths, e.g. `1024,512`.
#[derive(Clone, Debug)]
struct Widths(Vec<usize>);

fn parse_widths(s: &str) -> Result<Widths, String> {
    let values: Result<Vec<usize>, _> = s.split(',').map(|t| t.trim().parse::<usize>()).collect();
    match values {
        Ok(v) if !v.is_empty() => Ok(Widths(v)),
        Ok(_) => Err("expected at least one width".into()),
        Err(e) => Err(format!("bad width: {e}")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pick the key-point group for an orientation likelihood and export the
    /// dilated 7-channel heatmap stack
    SelectKeypoints {
        /// Input heatmap stack blob (20 foreground channels, background last)
        #[arg(long)]
        heatmaps: PathBuf,
        /// 8 comma-separated probabilities (canonical orientation order)
        #[arg(long, value_parser = parse_eight_floats, conflicts_with = "logits")]
        likelihood: Option<EightFloats>,
        /// 8 comma-separated raw logits, softmaxed before selection
        #[arg(long, value_parser = parse_eight_floats)]
        logits: Option<EightFloats>,
        /// Dilation kernel width
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
        /// Where to write the dilated stack blob
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a retrieval protocol over manifests and report mAP/CMC
    Evaluate {
        #[arg(long, value_parser = parse_protocol)]
        protocol: Protocol,
        /// Test-set manifest (the gallery for the cross-camera protocol)
        #[arg(long)]
        manifest: PathBuf,
        /// Query manifest (cross-camera protocol only)
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Gallery-sampling trials (single-match protocol)
        #[arg(long, default_value_t = 10)]
        trials: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Re-rank with k-reciprocal encoding before scoring
        #[arg(long)]
        rerank: bool,
        #[arg(long, default_value_t = 20)]
        k1: usize,
        #[arg(long, default_value_t = 6)]
        k2: usize,
        #[arg(long = "lambda-rr", alias = "lambda", default_value_t = 0.3)]
        lambda_rr: f64,
        /// Write the report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-rank distance blobs: query-query, query-gallery and
    /// gallery-gallery blocks in, final query-gallery distances out
    Rerank {
        #[arg(long = "dist-qq")]
        dist_qq: PathBuf,
        #[arg(long = "dist-qg")]
        dist_qg: PathBuf,
        #[arg(long = "dist-gg")]
        dist_gg: PathBuf,
        #[arg(long, default_value_t = 20)]
        k1: usize,
        #[arg(long, default_value_t = 6)]
        k2: usize,
        #[arg(long = "lambda-rr", alias = "lambda", default_value_t = 0.3)]
        lambda_rr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify every analytic gradient against central finite differences
    Gradcheck {
        #[arg(long, default_value_t = gradcheck::DEFAULT_TRIALS)]
        trials: usize,
        /// Finite-difference step size
        #[arg(long = "h", default_value_t = gradcheck::DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the fusion head on manifest features and save a checkpoint
    TrainFusion {
        #[arg(long)]
        manifest: PathBuf,
        /// Leading feature dimensions treated as the global descriptor
        #[arg(long = "global-dim")]
        global_dim: usize,
        /// Trailing feature dimensions treated as the local descriptor
        #[arg(long = "local-dim")]
        local_dim: usize,
        #[arg(long, value_parser = parse_widths, default_value = "1024,512")]
        hidden: Widths,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 150)]
        batch: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Initial hypersphere radius
        #[arg(long, default_value_t = 30.0)]
        alpha: f64,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
        /// Optional per-epoch history file
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Key-point localization error and precision over a manifest
    KpMetrics {
        #[arg(long)]
        manifest: PathBuf,
        /// Precision thresholds in 48-grid pixels (repeatable)
        #[arg(long = "r0", default_values_t = [3.0, 5.0])]
        r0: Vec<f64>,
    },
    /// Orientation confusion matrix: likelihood argmax vs manifest labels
    Confusion {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads() {
        Ok(()) => {}
        Err(message) => {
            eprintln!("error: {message}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("REID_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| format!("REID_THREADS must be a non-negative integer, got `{raw}`"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| format!("failed to configure {n} worker threads: {e}"))?;
    }
    Ok(())
}

fn run(command: Command) -> reid_core::Result<ExitCode> {
    match command {
        Command::SelectKeypoints {
            heatmaps,
            likelihood,
            logits,
            sigma,
            out,
        } => select_keypoints(&heatmaps, likelihood, logits, sigma, out.as_deref()),
        Command::Evaluate {
            protocol,
            manifest,
            queries,
            trials,
            seed,
            rerank,
            k1,
            k2,
            lambda_rr,
            out,
        } => evaluate(
            protocol,
            &manifest,
            queries.as_deref(),
            trials,
            seed,
            rerank.then_some(RerankParams {
                k1,
                k2,
                lambda: lambda_rr,
            }),
            out.as_deref(),
        ),
        Command::Rerank {
            dist_qq,
            dist_qg,
            dist_gg,
            k1,
            k2,
            lambda_rr,
            out,
        } => rerank_blobs(
            &dist_qq,
            &dist_qg,
            &dist_gg,
            RerankParams {
                k1,
                k2,
                lambda: lambda_rr,
            },
            &out,
        ),
        Command::Gradcheck {
            trials,
            step,
            tol,
            seed,
        } => run_gradcheck(trials, step, tol, seed),
        Command::TrainFusion {
            manifest,
            global_dim,
            local_dim,
            hidden,
            lr,
            batch,
            epochs,
            seed,
            alpha,
            out,
            history,
        } => train_fusion(
            &manifest,
            global_dim,
            local_dim,
            hidden,
            lr,
            batch,
            epochs,
            seed,
            alpha,
            &out,
            history.as_deref(),
        ),
        Command::KpMetrics { manifest, r0 } => kp_metrics(&manifest, &r0),
        Command::Confusion { manifest } => confusion(&manifest),
    }
}

fn select_keypoints(
    heatmaps: &Path,
    likelihood: Option<EightFloats>,
    logits: Option<EightFloats>,
    sigma: f64,
    out: Option<&Path>,
) -> reid_core::Result<ExitCode> {
    let lik = match (likelihood, logits) {
        (Some(p), None) => OrientationLikelihood::from_probabilities(p.0)?,
        (None, Some(l)) => OrientationLikelihood::from_logits(l.0)?,
        _ => {
            return Err(Error::InvalidArgument(
                "exactly one of --likelihood or --logits is required".into(),
            ))
        }
    };
    let stack = read_heatmap_stack(heatmaps)?;
    if stack.num_channels() < NUM_KEYPOINT_CHANNELS {
        return Err(Error::DimensionMismatch {
            context: "heatmap blob channels".into(),
            expected: format!(">= {NUM_KEYPOINT_CHANNELS}"),
            actual: stack.num_channels().to_string(),
        });
    }
    let group = select_group(&lik);
    println!("group={}", group.center);
    println!(
        "members={}",
        group
            .members
            .iter()
            .map(|m| m.label())
            .collect::<Vec<_>>()
            .join(",")
    );
    println!(
        "keypoints={}",
        group
            .keypoints
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    if let Some(path) = out {
        let selected = stack_selected(&stack, &group.keypoints, sigma)?;
        write_heatmap_stack(path, &selected)?;
        println!("wrote={}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn evaluate(
    protocol: Protocol,
    manifest_path: &Path,
    queries_path: Option<&Path>,
    trials: u32,
    seed: u64,
    rerank: Option<RerankParams>,
    out: Option<&Path>,
) -> reid_core::Result<ExitCode> {
    let manifest = load_manifest(manifest_path)?;
    let records = load_embedding_records(&manifest)?;
    let report = match protocol {
        Protocol::Veri => {
            let queries_path = queries_path.ok_or_else(|| {
                Error::InvalidArgument("--queries is required for the veri protocol".into())
            })?;
            let query_manifest = load_manifest(queries_path)?;
            let queries = load_embedding_records(&query_manifest)?;
            evaluate_veri(&queries, &records, rerank.as_ref())?
        }
        Protocol::VehicleId => {
            if queries_path.is_some() {
                return Err(Error::InvalidArgument(
                    "--queries does not apply to the vehicleid protocol (galleries are sampled)"
                        .into(),
                ));
            }
            if rerank.is_some() {
                return Err(Error::InvalidArgument(
                    "re-ranking does not apply to the single-match protocol".into(),
                ));
            }
            evaluate_vehicleid(&records, trials, seed)?
        }
    };
    let text = report.to_text();
    match out {
        Some(path) => {
            std::fs::write(path, &text)?;
            println!("wrote={}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn rerank_blobs(
    dist_qq: &Path,
    dist_qg: &Path,
    dist_gg: &Path,
    params: RerankParams,
    out: &Path,
) -> reid_core::Result<ExitCode> {
    let qq = read_distance_matrix(dist_qq, DistanceMetric::Cosine)?;
    let qg = read_distance_matrix(dist_qg, DistanceMetric::Cosine)?;
    let gg = read_distance_matrix(dist_gg, DistanceMetric::Cosine)?;
    let joint = assemble_joint_distances(&qq, &qg, &gg)?;
    let reranked = rerank_distances(&joint, qq.rows(), &params)?;
    write_distance_matrix(out, &reranked)?;
    println!(
        "wrote={} rows={} cols={}",
        out.display(),
        reranked.rows(),
        reranked.cols()
    );
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(trials: usize, step: f64, tol: f64, seed: u64) -> reid_core::Result<ExitCode> {
    let entries = gradcheck::run_suite(trials, step, tol, seed)?;
    let mut all_passed = true;
    for e in &entries {
        println!(
            "check={} trials={} max_rel_err={:.3e} tol={:.1e} status={}",
            e.name,
            e.trials,
            e.max_rel_error,
            tol,
            if e.passed { "pass" } else { "fail" }
        );
        all_passed &= e.passed;
    }
    println!("overall={}", if all_passed { "pass" } else { "fail" });
    Ok(if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

#[allow(clippy::too_many_arguments)]
fn train_fusion(
    manifest_path: &Path,
    global_dim: usize,
    local_dim: usize,
    hidden: Widths,
    lr: f64,
    batch: usize,
    epochs: usize,
    seed: u64,
    alpha: f64,
    out: &Path,
    history_path: Option<&Path>,
) -> reid_core::Result<ExitCode> {
    let manifest = load_manifest(manifest_path)?;
    let records = load_embedding_records(&manifest)?;
    if records.is_empty() {
        return Err(Error::DegenerateInput("manifest has no records".into()));
    }
    let dim = records[0].feature.len();
    if dim != global_dim + local_dim {
        return Err(Error::DimensionMismatch {
            context: "feature split".into(),
            expected: format!("{global_dim}+{local_dim}={}", global_dim + local_dim),
            actual: dim.to_string(),
        });
    }

    // Identity labels become dense class indices in sorted order.
    let mut identities: Vec<i64> = records.iter().map(|r| r.identity).collect();
    identities.sort_unstable();
    identities.dedup();
    let class_of = |identity: i64| identities.binary_search(&identity).expect("known identity");

    let samples: Vec<FusionSample> = records
        .iter()
        .map(|r| FusionSample {
            global_feature: r.feature[..global_dim].to_vec(),
            local_feature: r.feature[global_dim..].to_vec(),
            label: class_of(r.identity),
        })
        .collect();

    let config = FusionConfig {
        global_dim,
        local_dim,
        hidden: hidden.0,
        classes: identities.len(),
        learning_rate: lr,
        batch_size: batch,
        epochs,
        seed,
        alpha_init: alpha,
    };
    let (head, history) = train(&config, &samples)?;

    println!(
        "samples={} classes={} params={}",
        samples.len(),
        identities.len(),
        head.num_params()
    );
    let mut lines = String::new();
    for (i, e) in history.epochs.iter().enumerate() {
        lines.push_str(&format!(
            "epoch={} loss={:.6} accuracy={:.6}\n",
            i + 1,
            e.mean_loss,
            e.accuracy
        ));
    }
    lines.push_str(&format!("checksum={:016x}\n", history.params_checksum));
    print!("{lines}");

    write_fusion_head(out, &head)?;
    println!("wrote={}", out.display());
    if let Some(path) = history_path {
        std::fs::write(path, &lines)?;
        println!("wrote={}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn kp_metrics(manifest_path: &Path, thresholds: &[f64]) -> reid_core::Result<ExitCode> {
    let manifest = load_manifest(manifest_path)?;
    let mut images = Vec::new();
    for record in manifest.records() {
        if record.heatmaps.is_none() || record.keypoints.is_none() {
            continue;
        }
        let stack = load_heatmaps(&manifest, record)?;
        let annotation = load_keypoint_annotation(&manifest, record)?;
        let num_kp = annotation.points.len();
        // A stack may carry one extra background channel at the end.
        if stack.num_channels() != num_kp && stack.num_channels() != num_kp + 1 {
            return Err(Error::DimensionMismatch {
                context: format!("record `{}` heatmap channels", record.image_id),
                expected: format!("{num_kp} or {}", num_kp + 1),
                actual: stack.num_channels().to_string(),
            });
        }
        let predicted: Vec<[f64; 2]> = (0..num_kp)
            .map(|k| {
                let peak = find_peak(stack.channel(k));
                [peak.x as f64, peak.y as f64]
            })
            .collect();
        images.push(KeypointEval::new(
            predicted,
            annotation.points.clone(),
            annotation.visible.clone(),
        )?);
    }
    if images.is_empty() {
        return Err(Error::DegenerateInput(
            "no record has both heatmaps and key-point annotations".into(),
        ));
    }
    println!("images={}", images.len());
    println!("mse_px={:.6}", keypoint_mse(&images)?);
    println!("mse_px2={:.6}", keypoint_mse_squared(&images)?);
    for &r0 in thresholds {
        println!(
            "precision r0={r0} value={:.6}",
            keypoint_precision(&images, r0)?
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn confusion(manifest_path: &Path) -> reid_core::Result<ExitCode> {
    let manifest = load_manifest(manifest_path)?;
    let mut blobs: std::collections::HashMap<String, reid_core::blob::EmbeddingBlob> =
        std::collections::HashMap::new();
    let mut predictions = Vec::new();
    let mut ground_truth = Vec::new();
    for record in manifest.records() {
        let (Some(label), Some(feat)) = (record.orientation, &record.features) else {
            continue;
        };
        if !blobs.contains_key(&feat.path) {
            let blob = reid_core::blob::read_embeddings(&manifest.resolve(&feat.path))?;
            blobs.insert(feat.path.clone(), blob);
        }
        let Some(lik) = blobs[&feat.path].likelihood(feat.row)? else {
            continue;
        };
        predictions.push(lik.argmax());
        ground_truth.push(label);
    }
    if predictions.is_empty() {
        return Err(Error::DegenerateInput(
            "no record has an orientation label, features and a likelihood".into(),
        ));
    }
    let matrix = confusion_matrix(&predictions, &ground_truth)?;
    println!("records={}", predictions.len());
    println!("accuracy={:.6}", matrix.accuracy());
    println!(
        "labels={}",
        Orientation::ALL
            .iter()
            .map(|o| o.label())
            .collect::<Vec<_>>()
            .join(",")
    );
    for gt in Orientation::ALL {
        let row: Vec<String> = Orientation::ALL
            .iter()
            .map(|&pred| matrix.count(gt, pred).to_string())
            .collect();
        println!("{} {}", gt.label(), row.join(" "));
    }
    Ok(ExitCode::SUCCESS)
}
