//! Command implementations shared by the binary and the integration tests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::assign::{assign_anchor_free, coverage_stats, dea_enhance, match_anchors, AssignError, CoverageSummary, PyramidGeometry};
use crate::autodiff::{AutodiffError, GradCheckReport};
use crate::config::{ConfigError, RunConfig};
use crate::detector::{
    prepare_sample, save_checkpoint, thread_pool, train, CheckpointError, Detection, Detector, DetectorError, HtMode, StepLog, TrainSample,
};
use crate::dota::{self, DotaError, DotaRecord};
use crate::eval::{self, EvalError, EvalReport, LevelRate};
use crate::gradsuite;
use crate::imageio::{GrayImage, ImageError};
use crate::plot;
use crate::synth::{self, Scene, Split, SynthError, CLASS_NAMES};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Dota(#[from] DotaError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{0}")]
    Input(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Validated configuration plus output location.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub quiet: bool,
}

impl Context {
    /// `run.seed` drives scene generation, initialisation and shuffling.
    pub fn new(mut cfg: RunConfig, out: PathBuf, quiet: bool) -> Result<Self> {
        cfg.scene.seed = cfg.run.seed;
        cfg.detector.seed = cfg.run.seed;
        cfg.validate()?;
        std::fs::create_dir_all(&out)?;
        Ok(Self { cfg, out, quiet })
    }

    pub fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        std::fs::write(self.out.join(name), text)?;
        Ok(())
    }

    /// Same settings, another output directory.
    fn child(&self, dir: &str, cfg: RunConfig) -> Result<Self> {
        Self::new(cfg, self.out.join(dir), self.quiet)
    }
}

/// Train scenes `0..n_train`, test scenes right after them.
pub fn synthetic_split(cfg: &RunConfig) -> Vec<(Scene, Split)> {
    let n = cfg.run.train_images;
    let train = synth::generate_range(&cfg.scene, 0, n).into_iter().map(|s| (s, Split::Train));
    let test = synth::generate_range(&cfg.scene, n, cfg.run.test_images).into_iter().map(|s| (s, Split::Test));
    train.chain(test).collect()
}

/// The configured dataset directory, or freshly generated scenes.
pub fn load_scenes(cfg: &RunConfig) -> Result<Vec<(Scene, Split)>> {
    if cfg.run.dataset.is_empty() {
        Ok(synthetic_split(cfg))
    } else {
        Ok(synth::load_dataset(Path::new(&cfg.run.dataset))?)
    }
}

fn split_of(scenes: &[(Scene, Split)], split: Split) -> Vec<&Scene> {
    scenes.iter().filter(|(_, s)| *s == split).map(|(s, _)| s).collect()
}

pub fn gen_data(ctx: &Context) -> Result<PathBuf> {
    let scenes = synthetic_split(&ctx.cfg);
    let dir = ctx.out.join("dataset");
    synth::export(&scenes, &dir)?;
    ctx.note(format!("wrote {} scenes to {}", scenes.len(), dir.display()));
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DotaSummary {
    pub images: usize,
    pub patches: usize,
    pub objects: usize,
    /// `file:line: message` for every skipped annotation line.
    pub rejected: Vec<String>,
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "pgm", "pnm"].iter().map(|ext| dir.join(format!("{stem}.{ext}"))).find(|p| p.exists())
}

fn hbb_record(b: crate::boxes::BBox, category: &str, difficult: u8) -> DotaRecord {
    DotaRecord {
        quad: [b.x0, b.y0, b.x1, b.y0, b.x1, b.y1, b.x0, b.y1],
        category: category.to_string(),
        difficult,
    }
}

/// Reads `input/labelTxt/*.txt` with the matching `input/images/*`, tiles
/// every image and writes a dataset directory of patches. Malformed
/// annotation lines are skipped and reported.
pub fn parse_dota(ctx: &Context, input: &Path) -> Result<DotaSummary> {
    let patch_cfg = &ctx.cfg.patch;
    let label_dir = input.join("labelTxt");
    let mut labels: Vec<PathBuf> = std::fs::read_dir(&label_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    labels.retain(|p| p.extension().is_some_and(|e| e == "txt"));
    labels.sort();
    let mut parsed = Vec::new();
    let mut rejected = Vec::new();
    for path in &labels {
        let stem = path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| PipelineError::Input(format!("bad file name {}", path.display())))?;
        let (records, errors) = dota::parse_annotation_lenient(&std::fs::read_to_string(path)?);
        rejected.extend(errors.into_iter().map(|(line, msg)| format!("{stem}.txt:{line}: {msg}")));
        let image_path = find_image(&input.join("images"), stem).ok_or_else(|| PipelineError::Input(format!("no image for {stem}")))?;
        parsed.push((stem.to_string(), records, image_path));
    }
    let mut categories: Vec<String> = parsed.iter().flat_map(|(_, r, _)| r.iter().map(|r| r.category.clone())).collect();
    categories.sort();
    categories.dedup();

    let out_images = ctx.out.join("images");
    let out_labels = ctx.out.join("labelTxt");
    std::fs::create_dir_all(&out_images)?;
    std::fs::create_dir_all(&out_labels)?;
    let mut manifest = String::new();
    let mut summary = DotaSummary {
        images: parsed.len(),
        patches: 0,
        objects: 0,
        rejected,
    };
    for (stem, records, image_path) in &parsed {
        let image = GrayImage::read(image_path)?;
        let plan = dota::plan_patches(image.width, image.height, patch_cfg)?;
        let boxes: Vec<_> = records.iter().map(dota::quad_to_hbb).collect();
        for (x0, y0) in plan.origins() {
            let patch = image.crop(x0, y0, plan.patch_size, plan.patch_size);
            let window = crate::boxes::BBox::new(x0 as f64, y0 as f64, (x0 + patch.width) as f64, (y0 + patch.height) as f64);
            let mut kept = Vec::new();
            for (r, b) in records.iter().zip(&boxes) {
                let gt = [crate::boxes::GroundTruthBox { bbox: *b, class: 1 }];
                if let Some(c) = dota::clip_to_window(&gt, &window, patch_cfg.min_kept_fraction).first() {
                    kept.push(hbb_record(c.bbox, &r.category, r.difficult));
                }
            }
            let name = format!("{stem}__{x0}__{y0}");
            patch.write(&out_images.join(format!("{name}.pgm")))?;
            std::fs::write(out_labels.join(format!("{name}.txt")), dota::serialize(&kept))?;
            let _ = writeln!(manifest, "{name} train");
            summary.patches += 1;
            summary.objects += kept.len();
        }
    }
    ctx.write("manifest.txt", &manifest)?;
    ctx.write("classes.txt", &(categories.join("\n") + if categories.is_empty() { "" } else { "\n" }))?;
    let mut report = String::new();
    for r in &summary.rejected {
        let _ = writeln!(report, "{r}");
    }
    ctx.write("rejected_lines.txt", &report)?;
    ctx.note(format!(
        "{} images -> {} patches, {} objects, {} rejected lines",
        summary.images,
        summary.patches,
        summary.objects,
        summary.rejected.len()
    ));
    Ok(summary)
}

/// Anchor coverage before and after the rescue pass over every scene.
pub fn coverage(cfg: &RunConfig, scenes: &[&Scene]) -> Result<CoverageSummary> {
    let m = &cfg.matcher;
    let mut summaries = Vec::with_capacity(scenes.len());
    for s in scenes {
        let geometry = PyramidGeometry::new(s.image.height, s.image.width);
        let anchors = m.anchors(&geometry);
        let anchor_map = match_anchors(&anchors.anchors, &s.gts, m)?;
        let free_map = assign_anchor_free(&geometry, &s.gts, m)?;
        let (enhanced, _) = dea_enhance(&anchor_map, &free_map, &anchors, &s.gts, m)?;
        summaries.push(coverage_stats(&anchor_map, &free_map, &enhanced, &s.gts));
    }
    Ok(CoverageSummary::merge(summaries))
}

pub fn assign_stats(ctx: &Context) -> Result<CoverageSummary> {
    let scenes = load_scenes(&ctx.cfg)?;
    let all: Vec<&Scene> = scenes.iter().map(|(s, _)| s).collect();
    let summary = coverage(&ctx.cfg, &all)?;
    ctx.write("coverage.csv", &summary.to_csv())?;
    let mut buckets = String::from("bucket,n_gt,uncovered_before,uncovered_after,fraction_before,fraction_after\n");
    let mut labels = Vec::new();
    let mut before = Vec::new();
    for (i, &(_, n, b, a)) in summary.buckets.iter().enumerate() {
        let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        let label = CoverageSummary::bucket_label(i);
        let _ = writeln!(buckets, "{label},{n},{b},{a},{:.6},{:.6}", frac(b), frac(a));
        labels.push(label);
        before.push(frac(b));
    }
    ctx.write("coverage_buckets.csv", &buckets)?;
    ctx.write("coverage.svg", &plot::bar_chart("ground truths without an IoU-matched anchor, by area", &labels, &before, 1.0))?;
    ctx.note(format!(
        "{} ground truths: uncovered {:.4} before rescue, {:.4} after",
        summary.rows.len(),
        summary.uncovered_before,
        summary.uncovered_after
    ));
    Ok(summary)
}

/// Runs the gradient suite; returns every report (failures included).
pub fn gradcheck(ctx: &Context, instances: usize) -> Result<Vec<GradCheckReport>> {
    let reports = gradsuite::run_suite(ctx.cfg.run.seed, instances)?;
    let mut csv = String::from("op,max_rel_error,tolerance,passed\n");
    for r in &reports {
        let _ = writeln!(csv, "{},{:e},{:e},{}", r.op_name, r.max_rel_error, r.tolerance, r.passed);
        ctx.note(format!("{:24} {:.3e} {}", r.op_name, r.max_rel_error, if r.passed { "ok" } else { "FAILED" }));
    }
    ctx.write("gradcheck.csv", &csv)?;
    Ok(reports)
}

fn samples(scenes: &[&Scene]) -> Vec<TrainSample> {
    scenes
        .iter()
        .map(|s| TrainSample {
            image: s.image.to_array(),
            gts: s.gts.clone(),
        })
        .collect()
}

/// Trains on the train split and writes the log, loss plot and checkpoint.
pub fn train_detector(ctx: &Context, scenes: &[(Scene, Split)]) -> Result<(Detector, Vec<StepLog>)> {
    let cfg = &ctx.cfg;
    let train_scenes = split_of(scenes, Split::Train);
    if train_scenes.is_empty() {
        return Err(PipelineError::Input("dataset has no training scenes".into()));
    }
    let mut detector = Detector::build(cfg.detector.clone(), cfg.matcher.clone(), cfg.detector.seed)?;
    let prepared = samples(&train_scenes)
        .iter()
        .map(|s| prepare_sample(&detector, s))
        .collect::<Result<Vec<_>, _>>()?;
    let every = (cfg.detector.steps / 10).max(1);
    let logs = train(&mut detector, &prepared, &cfg.loss, &thread_pool(), |l| {
        if l.step as usize % every == 0 {
            ctx.note(format!("step {:5} loss {:.4} (cls {:.4} reg {:.4})", l.step, l.total, l.cls_loss, l.reg_loss));
        }
    })?;
    let mut csv = format!("{}\n", StepLog::CSV_HEADER);
    for l in &logs {
        let _ = writeln!(csv, "{}", l.csv_row());
    }
    ctx.write("train_log.csv", &csv)?;
    let y_max = logs.iter().map(|l| l.total).fold(1e-9, f64::max);
    let curve: Vec<(f64, f64)> = logs.iter().map(|l| (l.step as f64, l.total)).collect();
    ctx.write("loss.svg", &plot::line_chart("training loss", &[("total".into(), curve)], logs.len() as f64, y_max))?;
    save_checkpoint(&detector, &ctx.out.join("model.pfck"))?;
    Ok((detector, logs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub report: EvalReport,
    pub mismatch: Vec<LevelRate>,
}

pub fn detect(detector: &Detector, scenes: &[&Scene]) -> Result<Vec<Vec<Detection>>> {
    let images: Vec<_> = scenes.iter().map(|s| s.image.to_array()).collect();
    Ok(detector.infer_many(&images, &thread_pool())?)
}

/// Evaluates on the test split and writes metrics and plots.
pub fn evaluate_detector(ctx: &Context, detector: &Detector, scenes: &[(Scene, Split)]) -> Result<EvalSummary> {
    let test = split_of(scenes, Split::Test);
    let dets = detect(detector, &test)?;
    let gts: Vec<_> = test.iter().map(|s| s.gts.clone()).collect();
    let k = detector.config.num_classes;
    let report = eval::evaluate(&dets, &gts, k, &ctx.cfg.eval)?;
    let mismatch = eval::mismatch_error_rate(&dets, &gts, k, &ctx.cfg.eval)?;
    ctx.write("results.csv", &eval::results_csv(&report.per_class, report.map))?;
    ctx.write("results_small.csv", &eval::results_csv(&report.small, report.small_map))?;
    ctx.write("mismatch.csv", &eval::mismatch_csv(&mismatch))?;
    let series: Vec<(String, Vec<(f64, f64)>)> = report
        .curves
        .iter()
        .enumerate()
        .map(|(c, pts)| (class_name(c as u32 + 1), pts.clone()))
        .collect();
    ctx.write("pr.svg", &plot::line_chart("precision / recall", &series, 1.0, 1.0))?;
    ctx.note(format!("mAP {:.4}, small-object mAP {:.4}", report.map, report.small_map));
    Ok(EvalSummary { report, mismatch })
}

fn class_name(class: u32) -> String {
    CLASS_NAMES.get(class as usize - 1).map_or_else(|| format!("class{class}"), |s| s.to_string())
}

/// Generate, train and evaluate in one go.
pub fn smoke(ctx: &Context) -> Result<EvalSummary> {
    let scenes = synthetic_split(&ctx.cfg);
    synth::export(&scenes, &ctx.out.join("dataset"))?;
    let (detector, _) = train_detector(ctx, &scenes)?;
    evaluate_detector(ctx, &detector, &scenes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Baseline,
    Dea,
    Ht,
    DeaHt,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::Dea, Arm::Ht, Arm::DeaHt];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Dea => "+DEA",
            Arm::Ht => "+HT",
            Arm::DeaHt => "+DEA+HT",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Dea => "dea",
            Arm::Ht => "ht",
            Arm::DeaHt => "dea_ht",
        }
    }

    fn apply(self, cfg: &mut RunConfig) {
        cfg.detector.dea_enabled = matches!(self, Arm::Dea | Arm::DeaHt);
        cfg.detector.ht = if matches!(self, Arm::Ht | Arm::DeaHt) { HtMode::Both } else { HtMode::None };
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub per_class: Vec<f64>,
    pub map: f64,
    pub small_map: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub arm: Arm,
    /// Median over seeds.
    pub per_class: Vec<f64>,
    pub map: f64,
    pub small_map: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub runs: Vec<ArmRun>,
    pub arms: Vec<ArmSummary>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Minimum small-object AP gain of the DEA arm, in absolute AP.
pub const DEA_SMALL_GAIN: f64 = 0.05;

impl Ablation {
    pub fn arm(&self, arm: Arm) -> &ArmSummary {
        self.arms.iter().find(|a| a.arm == arm).expect("every arm is run")
    }

    /// Named ordering checks on the median results.
    pub fn checks(&self) -> Vec<(String, bool)> {
        let base = self.arm(Arm::Baseline);
        let dea = self.arm(Arm::Dea);
        let ht = self.arm(Arm::Ht);
        let full = self.arm(Arm::DeaHt);
        vec![
            (format!("baseline {:.4} <= +DEA {:.4}", base.map, dea.map), base.map <= dea.map),
            (format!("baseline {:.4} <= +HT {:.4}", base.map, ht.map), base.map <= ht.map),
            (format!("baseline {:.4} < +DEA+HT {:.4}", base.map, full.map), base.map < full.map),
            (
                format!("+DEA small-object AP gain {:.4} >= {DEA_SMALL_GAIN}", dea.small_map - base.small_map),
                dea.small_map - base.small_map >= DEA_SMALL_GAIN,
            ),
        ]
    }

    pub fn passed(&self) -> bool {
        self.checks().iter().all(|c| c.1)
    }

    pub fn table_csv(&self) -> String {
        let mut out = String::from("arm,dea,ht");
        for name in CLASS_NAMES {
            let _ = write!(out, ",AP_{name}");
        }
        out.push_str(",mAP,small_mAP\n");
        for a in &self.arms {
            let _ = write!(
                out,
                "{},{},{}",
                a.arm.label(),
                matches!(a.arm, Arm::Dea | Arm::DeaHt) as u8,
                matches!(a.arm, Arm::Ht | Arm::DeaHt) as u8
            );
            for ap in &a.per_class {
                let _ = write!(out, ",{ap:.4}");
            }
            let _ = writeln!(out, ",{:.4},{:.4}", a.map, a.small_map);
        }
        out
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from("arm,seed,mAP,small_mAP\n");
        for r in &self.runs {
            let _ = writeln!(out, "{},{},{:.6},{:.6}", r.arm.label(), r.seed, r.map, r.small_map);
        }
        out
    }
}

/// Four arms, each trained and evaluated once per seed on shared data.
pub fn ablate(ctx: &Context) -> Result<Ablation> {
    let mut runs = Vec::new();
    for i in 0..ctx.cfg.run.ablation_seeds as u64 {
        let seed = ctx.cfg.run.seed + i;
        let mut seeded = ctx.cfg.clone();
        seeded.run.seed = seed;
        seeded.scene.seed = seed;
        let scenes = synthetic_split(&seeded);
        for arm in Arm::ALL {
            let mut cfg = seeded.clone();
            arm.apply(&mut cfg);
            let run_ctx = ctx.child(&format!("{}_seed{seed}", arm.slug()), cfg)?;
            run_ctx.note(format!("== {} seed {seed}", arm.label()));
            let (detector, _) = train_detector(&run_ctx, &scenes)?;
            let summary = evaluate_detector(&run_ctx, &detector, &scenes)?;
            runs.push(ArmRun {
                arm,
                seed,
                per_class: summary.report.per_class.iter().map(|c| c.ap).collect(),
                map: summary.report.map,
                small_map: summary.report.small_map,
            });
        }
    }
    let arms = Arm::ALL
        .iter()
        .map(|&arm| {
            let mine: Vec<&ArmRun> = runs.iter().filter(|r| r.arm == arm).collect();
            let k = mine.first().map_or(0, |r| r.per_class.len());
            ArmSummary {
                arm,
                per_class: (0..k).map(|c| median(&mine.iter().map(|r| r.per_class[c]).collect::<Vec<_>>())).collect(),
                map: median(&mine.iter().map(|r| r.map).collect::<Vec<_>>()),
                small_map: median(&mine.iter().map(|r| r.small_map).collect::<Vec<_>>()),
            }
        })
        .collect();
    let ablation = Ablation { runs, arms };
    ctx.write("ablation.csv", &ablation.table_csv())?;
    ctx.write("ablation_runs.csv", &ablation.runs_csv())?;
    let labels: Vec<String> = ablation.arms.iter().map(|a| a.arm.label().to_string()).collect();
    let maps: Vec<f64> = ablation.arms.iter().map(|a| a.map).collect();
    ctx.write("ablation.svg", &plot::bar_chart("median mAP per arm", &labels, &maps, 1.0))?;
    for (name, ok) in ablation.checks() {
        ctx.note(format!("{} {name}", if ok { "ok  " } else { "FAIL" }));
    }
    Ok(ablation)
}
