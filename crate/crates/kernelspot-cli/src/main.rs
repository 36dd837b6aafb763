//! Binary entry point: argument parsing and subcommand dispatch. Exit
//! codes are a stable contract: 0 success, 1 usage error, 2 data error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kernelspot::eval::{
    aed, e2e_f_measure, image_edit_distance, match_detections, pooled_scores, EvalPred,
    MatchReport,
};
use kernelspot::fixture::{
    adjacent_pair_fixture, idealized_predictions, random_scene, render_image, scale_annotations,
};
use kernelspot::geometry::{read_annotations, write_annotations, TextAnnotation};
use kernelspot::labelgen::{generate_labels, LabelSet};
use kernelspot::losses::fd::{finite_diff_check, standard_suite};
use kernelspot::pa::{aggregate, connected_components};
use kernelspot::tensor::read_ptm_file;
use kernelspot::{Error, Result};

use kernelspot_cli::config::RunConfig;
use kernelspot_cli::detfile::{read_detections, write_detections, Detection};
use kernelspot_cli::pipeline::{
    build_weights, run_pipeline, stats_ms, StageTimes, WeightSource,
};
use kernelspot_cli::{atomic_write, atomic_write_ptm, ppm};

#[derive(Parser)]
#[command(
    name = "kernelspot",
    version,
    about = "Kernel-based arbitrarily-shaped text spotting pipeline"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value config file with [model]/[pa]/[loss]/[rec]/[run] sections
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set pa.dist_threshold=4 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Random seed (overrides run.seed)
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        cfg.apply_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate training label maps from annotation files
    GenLabels {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Annotation file, or a directory of .txt annotation files
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Label map height in pixels
        #[arg(long)]
        height: usize,
        /// Label map width in pixels
        #[arg(long)]
        width: usize,
        /// Kernel shrink rate (overrides run.shrink_rate)
        #[arg(long)]
        shrink_rate: Option<f64>,
    },
    /// Full forward pipeline on one [3,H,W] image tensor
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Load weights from this directory instead of seeding them
        #[arg(long, conflicts_with = "zero_weights")]
        weights: Option<PathBuf>,
        /// All-zero weights (every probability collapses to 0.5)
        #[arg(long)]
        zero_weights: bool,
        /// Skip recognition; transcriptions come out empty
        #[arg(long)]
        det_only: bool,
    },
    /// Pixel aggregation on prediction maps
    Postprocess {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        p_tex: PathBuf,
        #[arg(long)]
        p_ker: PathBuf,
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also time aggregation over this many repetitions
        #[arg(long, value_name = "REPS")]
        bench: Option<usize>,
    },
    /// Finite-difference verification of all loss gradients
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        /// Minimum sampled coordinates per loss input
        #[arg(long, default_value_t = 200)]
        min_coords: usize,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Detection / end-to-end scores over matching gt and prediction files
    Eval {
        /// Directory of ground-truth annotation .txt files
        #[arg(long)]
        gt_dir: PathBuf,
        /// Directory of prediction .txt files, paired by file name
        #[arg(long)]
        pred_dir: PathBuf,
        /// Canvas height for polygon rasterization
        #[arg(long)]
        height: usize,
        /// Canvas width for polygon rasterization
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Also require matching transcriptions and report AED
        #[arg(long)]
        e2e: bool,
        #[arg(long)]
        case_sensitive: bool,
        /// Write per-image scores to this CSV file
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the pipeline repeatedly on a synthetic scene and report stage times
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Square image side in pixels (must be divisible by 32)
        #[arg(long, default_value_t = 640)]
        size: usize,
        /// Text instances in the benchmark scene
        #[arg(long, default_value_t = 5)]
        count: usize,
        /// Repetitions (overrides run.reps)
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        det_only: bool,
    },
    /// Write a synthetic scene: annotations, image, labels, idealized maps
    Fixture {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 640)]
        height: usize,
        #[arg(long, default_value_t = 640)]
        width: usize,
        /// Number of text instances
        #[arg(long, default_value_t = 5)]
        count: usize,
        /// Instead write the two-boxes-2px-apart separation fixture
        #[arg(long)]
        adjacent_pair: bool,
    },
    /// Convert a binary PPM (P6) image to a [3,H,W] PTM tensor
    Ppm2ptm {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenLabels { cfg, input, out_dir, height, width, shrink_rate } => {
            let mut cfg = cfg.build()?;
            if let Some(r) = shrink_rate {
                cfg.shrink_rate = r;
            }
            cmd_gen_labels(&cfg, &input, &out_dir, height, width)
        }
        Cmd::Infer { cfg, image, out_dir, weights, zero_weights, det_only } => {
            let cfg = cfg.build()?;
            let source = match weights {
                Some(dir) => WeightSource::Dir(dir),
                None if zero_weights => WeightSource::Zeroed,
                None => WeightSource::Seeded(cfg.seed),
            };
            cmd_infer(&cfg, &image, &out_dir, &source, det_only)
        }
        Cmd::Postprocess { cfg, p_tex, p_ker, emb, out_dir, bench } => {
            cmd_postprocess(&cfg.build()?, &p_tex, &p_ker, &emb, &out_dir, bench)
        }
        Cmd::GradCheck { cfg, eps, min_coords, tolerance } => {
            cmd_grad_check(&cfg.build()?, eps, min_coords, tolerance)
        }
        Cmd::Eval { gt_dir, pred_dir, height, width, iou, e2e, case_sensitive, csv } => {
            cmd_eval(&gt_dir, &pred_dir, (height, width), iou, e2e, case_sensitive, csv.as_deref())
        }
        Cmd::Bench { cfg, size, count, reps, det_only } => {
            let mut cfg = cfg.build()?;
            if let Some(r) = reps {
                cfg.reps = r;
            }
            cmd_bench(&cfg, size, count, det_only)
        }
        Cmd::Fixture { cfg, out_dir, height, width, count, adjacent_pair } => {
            cmd_fixture(&cfg.build()?, &out_dir, height, width, count, adjacent_pair)
        }
        Cmd::Ppm2ptm { input, output } => {
            let t = ppm::read_ppm_file(&input)?;
            atomic_write_ptm(&t, &output)?;
            println!("wrote {} [{}x{}] -> {}", input.display(), t.dims()[1], t.dims()[2], output.display());
            Ok(())
        }
    }
}

/// Annotation files to process: a lone file, or every .txt in a
/// directory in name order.
fn annotation_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::invalid(format!("{} does not exist", input.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!("no .txt files in {}", input.display())));
    }
    Ok(files)
}

fn stem_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into())
}

fn write_label_set(labels: &LabelSet, out_dir: &Path, stem: &str) -> Result<()> {
    for (name, t) in [
        ("g_tex", labels.g_tex.clone()),
        ("g_ker", labels.g_ker.clone()),
        ("instances", labels.instances.to_tensor()),
        ("kernel_instances", labels.kernel_instances.to_tensor()),
        ("ignore_mask", labels.ignore_mask.clone()),
    ] {
        atomic_write_ptm(&t, &out_dir.join(format!("{stem}.{name}.ptm")))?;
    }
    Ok(())
}

fn cmd_gen_labels(
    cfg: &RunConfig,
    input: &Path,
    out_dir: &Path,
    height: usize,
    width: usize,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for file in annotation_files(input)? {
        let anns = read_annotations(&file)?;
        let labels = generate_labels(&anns, height, width, cfg.shrink_rate)?;
        let stem = stem_of(&file);
        write_label_set(&labels, out_dir, &stem)?;
        println!("file={stem} instances={}", labels.instances.max_label());
    }
    Ok(())
}

fn print_times(times: &StageTimes) {
    println!(
        "stage_ms backbone={:.3} enhance={:.3} det_pa={:.3} rec={:.3} total={:.3}",
        times.backbone_ms,
        times.enhance_ms,
        times.det_pa_ms,
        times.rec_ms,
        times.total_ms()
    );
}

fn cmd_infer(
    cfg: &RunConfig,
    image: &Path,
    out_dir: &Path,
    source: &WeightSource,
    det_only: bool,
) -> Result<()> {
    let charset = cfg.charset()?;
    let img = read_ptm_file(image)?;
    let ws = build_weights(source, cfg, &charset, det_only)?;
    let out = run_pipeline(&img, &ws, cfg, &charset, det_only)?;
    std::fs::create_dir_all(out_dir)?;
    atomic_write_ptm(&out.det.p_tex, &out_dir.join("p_tex.ptm"))?;
    atomic_write_ptm(&out.det.p_ker, &out_dir.join("p_ker.ptm"))?;
    atomic_write_ptm(&out.det.emb, &out_dir.join("emb.ptm"))?;
    atomic_write_ptm(&out.pa.label_map.to_tensor(), &out_dir.join("instances.ptm"))?;
    write_detections(&out.detections, out_dir.join("detections.txt"))?;
    println!("instances={}", out.pa.instances.len());
    print_times(&out.times);
    Ok(())
}

fn cmd_postprocess(
    cfg: &RunConfig,
    p_tex: &Path,
    p_ker: &Path,
    emb: &Path,
    out_dir: &Path,
    bench: Option<usize>,
) -> Result<()> {
    let p_tex = read_ptm_file(p_tex)?;
    let p_ker = read_ptm_file(p_ker)?;
    let emb = read_ptm_file(emb)?;
    let out = aggregate(&p_tex, &p_ker, &emb, &cfg.pa)?;
    std::fs::create_dir_all(out_dir)?;
    atomic_write_ptm(&out.label_map.to_tensor(), &out_dir.join("instances.ptm"))?;
    let dets: Vec<Detection> = out
        .instances
        .iter()
        .map(|inst| Detection {
            polygon: inst.contour_scaled.clone(),
            text: String::new(),
            confidence: inst.confidence,
        })
        .collect();
    write_detections(&dets, out_dir.join("detections.txt"))?;
    println!("instances={}", out.instances.len());
    if let Some(reps) = bench {
        if reps == 0 {
            return Err(Error::invalid("--bench needs at least 1 repetition"));
        }
        let mut samples = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t = std::time::Instant::now();
            let _ = aggregate(&p_tex, &p_ker, &emb, &cfg.pa)?;
            samples.push(t.elapsed().as_secs_f64() * 1e3);
        }
        let (mean, p50, p99) = stats_ms(&samples);
        println!("pa_ms reps={reps} mean={mean:.3} p50={p50:.3} p99={p99:.3}");
    }
    Ok(())
}

fn cmd_grad_check(cfg: &RunConfig, eps: f64, min_coords: usize, tolerance: f64) -> Result<()> {
    let mut failures = 0;
    let suite = standard_suite(cfg.seed);
    for probe in &suite {
        let outcome = finite_diff_check(probe.as_ref(), eps, min_coords, cfg.seed);
        let ok = outcome.passed(tolerance);
        failures += usize::from(!ok);
        println!(
            "probe={} checked={} skipped_near_kink={} max_rel_err={:.3e} status={}",
            outcome.probe,
            outcome.checked,
            outcome.skipped_near_kink,
            outcome.max_rel_err,
            if ok { "pass" } else { "FAIL" }
        );
    }
    println!("gradient_checks={} failures={failures}", suite.len());
    if failures > 0 {
        return Err(Error::invalid(format!(
            "{failures} gradient check(s) exceeded tolerance {tolerance}"
        )));
    }
    Ok(())
}

fn cmd_eval(
    gt_dir: &Path,
    pred_dir: &Path,
    canvas: (usize, usize),
    iou: f64,
    e2e: bool,
    case_sensitive: bool,
    csv: Option<&Path>,
) -> Result<()> {
    let gt_files = annotation_files(gt_dir)?;
    let mut det_reports: Vec<MatchReport> = Vec::new();
    let mut e2e_reports: Vec<MatchReport> = Vec::new();
    let mut csv_rows = vec![String::from("image,det_precision,det_recall,det_f")];
    if e2e {
        csv_rows[0].push_str(",e2e_precision,e2e_recall,e2e_f,edit_distance");
    }
    let mut images: Vec<(Vec<TextAnnotation>, Vec<EvalPred>)> = Vec::new();
    let mut missing = 0usize;
    for gt_file in &gt_files {
        let stem = stem_of(gt_file);
        let gts = read_annotations(gt_file)?;
        let pred_path = pred_dir.join(format!("{stem}.txt"));
        let preds: Vec<EvalPred> = if pred_path.is_file() {
            read_detections(&pred_path)?
                .into_iter()
                .map(|d| EvalPred::new(d.polygon, d.text))
                .collect()
        } else {
            missing += 1;
            Vec::new()
        };
        let det = match_detections(&gts, &preds, canvas, iou)?;
        let mut row = format!(
            "{stem},{:.6},{:.6},{:.6}",
            det.precision, det.recall, det.f_measure
        );
        if e2e {
            let rep = e2e_f_measure(&gts, &preds, canvas, iou, case_sensitive)?;
            let dist = image_edit_distance(&gts, &preds, canvas, iou)?;
            row.push_str(&format!(
                ",{:.6},{:.6},{:.6},{dist}",
                rep.precision, rep.recall, rep.f_measure
            ));
            e2e_reports.push(rep);
        }
        csv_rows.push(row);
        det_reports.push(det);
        images.push((gts, preds));
    }
    let (p, r, f) = pooled_scores(&det_reports);
    println!("images={} missing_prediction_files={missing}", gt_files.len());
    println!("detection_precision={p:.6}");
    println!("detection_recall={r:.6}");
    println!("detection_f={f:.6}");
    if e2e {
        let (p, r, f) = pooled_scores(&e2e_reports);
        println!("e2e_precision={p:.6}");
        println!("e2e_recall={r:.6}");
        println!("e2e_f={f:.6}");
        let mean = aed(
            images.iter().map(|(g, p)| (g.as_slice(), p.as_slice(), canvas)),
            iou,
        )?;
        println!("aed={mean:.6}");
    }
    if let Some(path) = csv {
        atomic_write(path, (csv_rows.join("\n") + "\n").as_bytes())?;
    }
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, size: usize, count: usize, det_only: bool) -> Result<()> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::invalid(format!(
            "bench size must be a positive multiple of 32, got {size}"
        )));
    }
    let charset = cfg.charset()?;
    let anns = random_scene(size, size, count, cfg.seed)?;
    let image = render_image(&anns, size, size, cfg.seed);
    let ws = build_weights(&WeightSource::Seeded(cfg.seed), cfg, &charset, det_only)?;
    let mut stages: [Vec<f64>; 4] = Default::default();
    let mut pa_only = Vec::new();
    let mut totals = Vec::new();
    let mut instances = 0;
    for _ in 0..cfg.reps {
        let out = run_pipeline(&image, &ws, cfg, &charset, det_only)?;
        stages[0].push(out.times.backbone_ms);
        stages[1].push(out.times.enhance_ms);
        stages[2].push(out.times.det_pa_ms);
        stages[3].push(out.times.rec_ms);
        pa_only.push(out.times.pa_only_ms);
        totals.push(out.times.total_ms());
        instances = out.pa.instances.len();
    }
    println!("size={size} reps={} instances={instances}", cfg.reps);
    for (name, samples) in ["backbone", "enhance", "det_pa", "recognition"].iter().zip(&stages) {
        let (mean, p50, p99) = stats_ms(samples);
        println!("stage={name} mean_ms={mean:.3} p50_ms={p50:.3} p99_ms={p99:.3}");
    }
    let (_, pa_p50, _) = stats_ms(&pa_only);
    println!("pa_only p50_ms={pa_p50:.3}");
    let (mean, _, _) = stats_ms(&totals);
    println!("total mean_ms={mean:.3} fps={:.3}", 1e3 / mean);
    Ok(())
}

fn cmd_fixture(
    cfg: &RunConfig,
    out_dir: &Path,
    height: usize,
    width: usize,
    count: usize,
    adjacent_pair: bool,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    if adjacent_pair {
        let fx = adjacent_pair_fixture();
        atomic_write_ptm(&fx.p_tex, &out_dir.join("p_tex.ptm"))?;
        atomic_write_ptm(&fx.p_ker, &out_dir.join("p_ker.ptm"))?;
        atomic_write_ptm(&fx.emb, &out_dir.join("emb.ptm"))?;
        // Demonstrate the separation claim right here: gated aggregation
        // splits the pair, a region-only flood fill cannot.
        let out = aggregate(&fx.p_tex, &fx.p_ker, &fx.emb, &cfg.pa)?;
        let region = fx.p_tex.map(|v| f32::from(v >= cfg.pa.tex_threshold));
        let flood = connected_components(&region, 1)?;
        println!(
            "pa_instances={} flood_fill_components={}",
            out.instances.len(),
            flood.max_label()
        );
        return Ok(());
    }
    if height % 32 != 0 || width % 32 != 0 {
        return Err(Error::invalid(format!(
            "fixture dims must be divisible by 32 so infer can consume the image, got {height}x{width}"
        )));
    }
    let anns = random_scene(height, width, count, cfg.seed)?;
    write_annotations(&anns, out_dir.join("gt.txt"))?;
    let image = render_image(&anns, height, width, cfg.seed);
    atomic_write_ptm(&image, &out_dir.join("image.ptm"))?;
    let small = scale_annotations(&anns, 0.25)?;
    let labels = generate_labels(&small, height / 4, width / 4, cfg.shrink_rate)?;
    write_label_set(&labels, out_dir, "labels")?;
    let (p_tex, p_ker, emb) = idealized_predictions(&labels, cfg.model.emb_dim)?;
    atomic_write_ptm(&p_tex, &out_dir.join("p_tex.ptm"))?;
    atomic_write_ptm(&p_ker, &out_dir.join("p_ker.ptm"))?;
    atomic_write_ptm(&emb, &out_dir.join("emb.ptm"))?;
    println!(
        "scene={}x{} instances={count} label_maps={}x{} -> {}",
        height,
        width,
        height / 4,
        width / 4,
        out_dir.display()
    );
    Ok(())
}
