use std::fmt::Write as _;
use std::path::Path;

use log::info;
use sanity_core::detector::{
    load_checkpoint, save_checkpoint, BBox, Decision, Detection, Detector, DetectorConfig, TrainOptions,
};
use sanity_core::metrics::{map_ssim, score_table_markdown, MetricThresholds, ScoreRow};
use sanity_core::saliency::{export_map, ExplanationTarget, Method, SaliencyConfig};
use sanity_core::sanity::{
    compare_models_with_maps, data_randomization_on, model_randomization_test, shape_agreement, DataSanityConfig,
    DataSanityReport, LevelInfo, MethodObservations, PairedMaps, SanityRunConfig,
};
use sanity_core::synthdata::{
    default_box_noise, export_dataset, format_annotations, generate as generate_scenes, load_dataset, randomize,
    read_rgb_png, scene_stem, GeneratorConfig, RandomizationSpec, SyntheticScene,
};
use sanity_core::Error;
use serde::Serialize;

use crate::args::{
    DataSanityArgs, ExplainArgs, GenerateArgs, ModelSanityArgs, TestDataArgs, ThresholdArgs, TrainArgs,
};
use crate::error::CliError;
use crate::manifest::{Manifest, MANIFEST_FILE};
use crate::report::{create_dir, opt, write_grid, write_json, write_text};
use crate::Status;

pub const DATA_REPORT_SCHEMA: &str = "saliency-sanity/data-report/1";
pub const MODEL_REPORT_SCHEMA: &str = "saliency-sanity/model-report/1";

/// `all` or a comma-separated list of decision names.
pub fn parse_decisions(text: &str) -> Result<Vec<Decision>, CliError> {
    if text.trim() == "all" {
        return Ok(Decision::ALL.to_vec());
    }
    let mut out: Vec<Decision> = Vec::new();
    for part in text.split(',').map(str::trim) {
        let d: Decision = part.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
        if out.contains(&d) {
            return Err(CliError::Usage(format!("decision {d} listed twice")));
        }
        out.push(d);
    }
    Ok(out)
}

fn thresholds(args: &ThresholdArgs) -> MetricThresholds {
    let mut t = MetricThresholds::default();
    args.apply(&mut t);
    t
}

fn load_test_scenes(
    args: &TestDataArgs,
    image_size: usize,
    manifest: &mut Manifest,
) -> Result<Vec<SyntheticScene>, CliError> {
    match &args.dataset {
        Some(dir) => {
            manifest.set("test_data.source", dir.display());
            Ok(load_dataset(dir)?)
        }
        None => {
            let cfg = GeneratorConfig {
                count: args.test_count,
                seed: args.test_seed,
                image_size,
                ..GeneratorConfig::default()
            };
            manifest.set("test_data.source", "generated");
            manifest.record("test_data.generator", &cfg);
            Ok(generate_scenes(&cfg)?)
        }
    }
}

fn level_dir(fraction: f64) -> String {
    format!("level_{:03}", (fraction * 100.0).round() as u32)
}

pub fn generate(a: &GenerateArgs) -> Result<Status, CliError> {
    let cfg = a.generator();
    let scenes = generate_scenes(&cfg)?;
    let written = export_dataset(&scenes, &a.out)?;
    let mut m = Manifest::new("generate");
    m.record("generator", &cfg);
    m.set("output.files", written.len() + 1);
    m.write(&a.out)?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(Status::Success)
}

fn write_loss_trace(dir: &Path, trace: &[f64]) -> Result<(), CliError> {
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in trace.iter().enumerate() {
        writeln!(csv, "{},{l}", i + 1).unwrap();
    }
    write_text(&dir.join("loss_trace.csv"), &csv)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    manifest: &'a str,
    fingerprint: String,
    epochs_run: usize,
    train_map: f64,
    reached_target: bool,
    budget_exhausted: bool,
    randomized_annotations: bool,
}

pub fn train(a: &TrainArgs) -> Result<Status, CliError> {
    let scenes = load_dataset(&a.dataset)?;
    let config = DetectorConfig {
        activation: a.activation.into(),
        seed: a.init_seed,
        ..DetectorConfig::default()
    };
    let opts = a.options();
    let detector = Detector::build(config.clone())?;
    create_dir(&a.out)?;
    let mut m = Manifest::new("train");
    m.record("args", a);
    m.record("detector", &config);
    m.record("training", &opts);

    let randomized = a.random_labels || a.box_noise.is_some();
    let scenes = if randomized {
        let spec = RandomizationSpec {
            permute_labels: a.random_labels,
            box_noise_stddev: a.box_noise.unwrap_or_else(|| default_box_noise(&scenes)),
            seed: a.randomization_seed,
        };
        m.record("randomization", &spec);
        let noisy = randomize(&scenes, &spec)?;
        // The annotations the model is trained (and scored) against.
        let labels = a.out.join("labels");
        create_dir(&labels)?;
        for (i, s) in noisy.iter().enumerate() {
            write_text(&labels.join(format!("{}.txt", scene_stem(i))), &format_annotations(&s.annotations))?;
        }
        noisy
    } else {
        scenes
    };

    let outcome = match sanity_core::detector::train(detector, &scenes, &opts) {
        Ok(o) => o,
        Err(Error::Diverged { epoch, loss, trace }) => {
            write_loss_trace(&a.out, &trace)?;
            m.set("result.diverged", true);
            m.set("result.diverged_epoch", epoch);
            m.write(&a.out)?;
            return Err(Error::Diverged { epoch, loss, trace }.into());
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&outcome.detector, &a.out.join("checkpoint.json"))?;
    write_loss_trace(&a.out, &outcome.loss_trace)?;
    let budget_exhausted = opts.target_map.is_some() && !outcome.reached_target;
    let summary = TrainSummary {
        manifest: MANIFEST_FILE,
        fingerprint: outcome.detector.model.fingerprint(),
        epochs_run: outcome.epochs_run,
        train_map: outcome.train_map,
        reached_target: outcome.reached_target,
        budget_exhausted,
        randomized_annotations: randomized,
    };
    m.set("result.diverged", false);
    m.set("result.epochs_run", summary.epochs_run);
    m.set("result.train_map", summary.train_map);
    m.set("result.reached_target", summary.reached_target);
    m.set("result.budget_exhausted", budget_exhausted);
    m.set("result.fingerprint", &summary.fingerprint);
    write_json(&a.out.join("train_summary.json"), &summary)?;
    m.write(&a.out)?;
    println!(
        "trained {} epochs, train mAP@0.5 {:.4}{}",
        outcome.epochs_run,
        outcome.train_map,
        if randomized { " (against the randomized annotations)" } else { "" }
    );
    if budget_exhausted {
        return Ok(Status::Warnings(vec![format!(
            "target mAP {} not reached within {} epochs (budget exhausted)",
            a.target_map, a.epochs
        )]));
    }
    Ok(Status::Success)
}

#[derive(Serialize)]
struct DetectionsFile<'a> {
    manifest: &'a str,
    model_fingerprint: String,
    detections: &'a [Detection],
}

pub fn explain(a: &ExplainArgs) -> Result<Status, CliError> {
    let decisions = parse_decisions(&a.decision)?;
    let cfg = a.saliency.config();
    cfg.validate()?;
    let detector = load_checkpoint(&a.checkpoint)?;
    let image = read_rgb_png(&a.image)?;
    create_dir(&a.out)?;
    let mut m = Manifest::new("explain");
    m.record("args", a);
    m.record("saliency", &cfg);
    m.set("model.fingerprint", detector.model.fingerprint());

    let detections = detector.detect(&image, a.detection.score_threshold, a.detection.nms_iou)?;
    write_json(
        &a.out.join("detections.json"),
        &DetectionsFile {
            manifest: MANIFEST_FILE,
            model_fingerprint: detector.model.fingerprint(),
            detections: &detections,
        },
    )?;
    m.set("result.detections", detections.len());
    if detections.is_empty() {
        m.set("result.maps", 0);
        m.write(&a.out)?;
        return Ok(Status::Warnings(vec![format!(
            "no detections above score threshold {} in {}",
            a.detection.score_threshold,
            a.image.display()
        )]));
    }
    let mut written = 0;
    for (k, d) in detections.iter().enumerate() {
        let targets: Vec<ExplanationTarget> =
            decisions.iter().map(|&dec| ExplanationTarget::from_detection(d, dec)).collect();
        let maps = sanity_core::saliency::explain(&detector, &image, &targets, a.method, &cfg)?;
        for map in &maps {
            let name = format!("det{k:02}_{}_{}.png", a.method, map.target.decision);
            export_map(map, &cfg, &a.out.join(name))?;
            written += 1;
        }
    }
    m.set("result.maps", written);
    m.write(&a.out)?;
    println!("{} detections, {written} maps written to {}", detections.len(), a.out.display());
    Ok(Status::Success)
}

#[derive(Serialize)]
struct TargetInfo {
    scene_index: usize,
    anchor_index: usize,
    class_id: usize,
    score: f64,
    bbox: BBox,
    others: Vec<BBox>,
}

#[derive(Serialize)]
struct LevelMeans {
    fraction: f64,
    mean_ssim: Vec<(Method, f64)>,
}

#[derive(Serialize)]
struct ModelReport<'a> {
    schema: &'a str,
    manifest: &'a str,
    model_fingerprint: &'a str,
    levels: &'a [LevelInfo],
    skipped: &'a [usize],
    targets: Vec<TargetInfo>,
    mean_ssim: Vec<LevelMeans>,
    observations: &'a [MethodObservations],
    scores: &'a [ScoreRow],
}

pub fn model_sanity(a: &ModelSanityArgs) -> Result<Status, CliError> {
    let config = SanityRunConfig {
        levels: a.levels.clone(),
        image_count: a.images,
        methods: a.methods.clone(),
        decisions: parse_decisions(&a.decisions)?,
        randomization_seed: a.randomization_seed,
        saliency: a.saliency.config(),
        score_threshold: a.detection.score_threshold,
        nms_iou: a.detection.nms_iou,
        thresholds: thresholds(&a.thresholds),
    };
    config.validate()?;
    let detector = load_checkpoint(&a.checkpoint)?;
    create_dir(&a.out)?;
    let mut m = Manifest::new("model-sanity");
    m.record("args", a);
    m.record("run", &config);
    m.set("model.fingerprint", detector.model.fingerprint());
    let scenes = load_test_scenes(&a.data, detector.config.input_size, &mut m)?;

    let result = model_randomization_test(&detector, &scenes, &config)?;
    let last = config.levels.len() - 1;

    let mut csv = String::from("method,decision,fraction,mean_ssim,n_images\n");
    for c in result.ssim_curves()? {
        for p in &c.points {
            writeln!(csv, "{},{},{},{},{}", c.method, c.decision, p.fraction, p.mean_ssim, p.n_images).unwrap();
        }
    }
    write_text(&a.out.join("ssim.csv"), &csv)?;

    let mut pairs = String::from("scene,method,decision,fraction,ssim\n");
    for im in &result.images {
        for (li, level) in result.levels.iter().enumerate() {
            for (mi, method) in config.methods.iter().enumerate() {
                for (di, decision) in config.decisions.iter().enumerate() {
                    let s = map_ssim(&im.maps[0][mi][di], &im.maps[li][mi][di])?;
                    writeln!(pairs, "{},{method},{decision},{},{s}", im.target.scene_index, level.fraction).unwrap();
                }
            }
        }
    }
    write_text(&a.out.join("ssim_pairs.csv"), &pairs)?;

    let observations = result.observations(last)?;
    let rows = result.score_rows(last, &a.detector_name)?;
    write_text(&a.out.join("scores.md"), &score_table_markdown(&rows))?;
    let report = ModelReport {
        schema: MODEL_REPORT_SCHEMA,
        manifest: MANIFEST_FILE,
        model_fingerprint: &result.true_fingerprint,
        levels: &result.levels,
        skipped: &result.skipped,
        targets: result
            .images
            .iter()
            .map(|im| TargetInfo {
                scene_index: im.target.scene_index,
                anchor_index: im.target.detection.anchor_index,
                class_id: im.target.detection.class_id,
                score: im.target.detection.score,
                bbox: im.target.detection.bbox,
                others: im.target.others.clone(),
            })
            .collect(),
        mean_ssim: (0..result.levels.len())
            .map(|li| {
                Ok(LevelMeans {
                    fraction: result.levels[li].fraction,
                    mean_ssim: result.mean_ssim(li)?,
                })
            })
            .collect::<Result<_, Error>>()?,
        observations: &observations,
        scores: &rows,
    };
    write_json(&a.out.join("report.json"), &report)?;

    let previews = a.out.join("report");
    create_dir(&previews)?;
    for im in &result.images {
        let stem = scene_stem(im.target.scene_index);
        for (mi, method) in config.methods.iter().enumerate() {
            // Rows are decisions, columns are randomization levels.
            let grid: Vec<Vec<_>> = (0..config.decisions.len())
                .map(|di| im.maps.iter().map(|level| &level[mi][di].values).collect())
                .collect();
            write_grid(&grid, &previews.join(format!("{stem}_{method}.png")))?;
        }
        if !a.no_maps {
            for (li, level) in result.levels.iter().enumerate() {
                let dir = a.out.join("maps").join(&stem).join(level_dir(level.fraction));
                create_dir(&dir)?;
                for per_method in &im.maps[li] {
                    for map in per_method {
                        let name = format!("{}_{}.png", map.method, map.target.decision);
                        export_map(map, &config.saliency, &dir.join(name))?;
                    }
                }
            }
        }
    }

    m.set("result.images", result.images.len());
    m.set(
        "result.skipped",
        result.skipped.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
    );
    m.write(&a.out)?;
    print!("{}", score_table_markdown(&rows));

    let mut warnings = Vec::new();
    if !result.skipped.is_empty() {
        warnings.push(format!(
            "{} scene(s) without a detection were skipped: {:?}",
            result.skipped.len(),
            result.skipped
        ));
    }
    if result.images.is_empty() {
        warnings.push("no scene produced a detection; the grid is empty".into());
    }
    Ok(if warnings.is_empty() {
        Status::Success
    } else {
        Status::Warnings(warnings)
    })
}

#[derive(Serialize)]
struct DataReport<'a> {
    schema: &'a str,
    manifest: &'a str,
    true_fingerprint: String,
    random_fingerprint: String,
    #[serde(flatten)]
    report: &'a DataSanityReport,
}

fn verdict_table(report: &DataSanityReport) -> String {
    let mut md = String::from("| method | pairs | different | fraction different | verdict |\n");
    md.push_str("|---|---|---|---|---|\n");
    for v in &report.verdicts {
        writeln!(
            md,
            "| {} | {} | {} | {:.3} | {} |",
            v.method,
            v.pairs,
            v.different,
            v.fraction_different,
            if v.passes {
                "passes data randomization"
            } else {
                "fails data randomization"
            }
        )
        .unwrap();
    }
    md
}

pub fn data_sanity(a: &DataSanityArgs) -> Result<Status, CliError> {
    let defaults = DataSanityConfig::default();
    let config = DataSanityConfig {
        detector: DetectorConfig {
            seed: a.init_seed,
            ..DetectorConfig::default()
        },
        train_data: GeneratorConfig {
            count: a.train_count,
            seed: a.train_seed,
            ..GeneratorConfig::default()
        },
        test_data: GeneratorConfig {
            count: a.data.test_count,
            seed: a.data.test_seed,
            ..GeneratorConfig::default()
        },
        permute_labels: !a.keep_labels,
        box_noise_stddev: a.box_noise,
        randomization_seed: a.randomization_seed,
        true_training: TrainOptions {
            epochs: a.true_epochs,
            learning_rate: a.lr,
            target_map: Some(a.target_map),
            ..defaults.true_training
        },
        random_training: TrainOptions {
            epochs: a.random_epochs,
            learning_rate: a.lr,
            target_map: Some(a.target_map),
            ..defaults.random_training
        },
        methods: a.methods.clone(),
        decisions: parse_decisions(&a.decisions)?,
        saliency: a.saliency.config(),
        score_threshold: a.detection.score_threshold,
        nms_iou: a.detection.nms_iou,
        thresholds: thresholds(&a.thresholds),
        ssim_threshold: a.ssim_threshold,
        pass_fraction: a.pass_fraction,
    };
    config.saliency.validate()?;
    if config.methods.is_empty() {
        return Err(CliError::Usage("at least one method is required".into()));
    }
    create_dir(&a.out)?;
    let mut m = Manifest::new("data-sanity");
    m.record("args", a);
    m.record("run", &config);
    let test_scenes = load_test_scenes(&a.data, config.detector.input_size, &mut m)?;

    let (true_model, random_model, report, maps) = match (&a.true_checkpoint, &a.random_checkpoint) {
        (Some(t), Some(r)) => {
            let true_model = load_checkpoint(t)?;
            let random_model = load_checkpoint(r)?;
            m.set("arms.source", "checkpoints");
            let (mut report, maps) = compare_models_with_maps(&true_model, &random_model, &test_scenes, &config)?;
            report.random_shape_agreement =
                shape_agreement(&random_model, &test_scenes, config.score_threshold, config.nms_iou)?;
            (true_model, random_model, report, maps)
        }
        _ => {
            let train_scenes = match &a.train_dataset {
                Some(dir) => {
                    m.set("train_data.source", dir.display());
                    load_dataset(dir)?
                }
                None => {
                    m.set("train_data.source", "generated");
                    generate_scenes(&config.train_data)?
                }
            };
            m.set("arms.source", "trained");
            let run = data_randomization_on(&train_scenes, &test_scenes, &config)?;
            save_checkpoint(&run.true_model, &a.out.join("true_checkpoint.json"))?;
            save_checkpoint(&run.random_model, &a.out.join("random_checkpoint.json"))?;
            (run.true_model, run.random_model, run.report, run.maps)
        }
    };
    m.set("arms.true_fingerprint", true_model.model.fingerprint());
    m.set("arms.random_fingerprint", random_model.model.fingerprint());
    if let Some(arm) = &report.true_arm {
        m.record("result.true_arm", arm);
    }
    if let Some(arm) = &report.random_arm {
        m.record("result.random_arm", arm);
    }
    m.set("result.threshold_not_met", report.threshold_not_met);
    m.set("result.fraction_different", report.fraction_different);

    let mut csv = String::from("scene,method,decision,ssim,range_ratio,texture_intersection,different\n");
    for p in &report.pairs {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            p.scene_index,
            p.method,
            p.decision,
            p.ssim,
            opt(p.range_ratio),
            p.texture_intersection,
            p.different
        )
        .unwrap();
    }
    write_text(&a.out.join("pairs.csv"), &csv)?;
    write_text(&a.out.join("verdicts.md"), &verdict_table(&report))?;
    write_json(
        &a.out.join("report.json"),
        &DataReport {
            schema: DATA_REPORT_SCHEMA,
            manifest: MANIFEST_FILE,
            true_fingerprint: true_model.model.fingerprint(),
            random_fingerprint: random_model.model.fingerprint(),
            report: &report,
        },
    )?;
    write_paired_maps(&maps, &config.saliency, &a.out)?;
    m.write(&a.out)?;
    print!("{}", verdict_table(&report));

    let mut warnings = Vec::new();
    if report.threshold_not_met {
        warnings.push("random-label arm did not reach the target mAP (budget exhausted)".to_string());
    }
    if !report.skipped.is_empty() {
        warnings.push(format!("test scenes without a detection were skipped: {:?}", report.skipped));
    }
    Ok(if warnings.is_empty() {
        Status::Success
    } else {
        Status::Warnings(warnings)
    })
}

/// 16-bit maps of both arms plus one preview per scene and method (rows:
/// true arm, random arm; columns: decisions).
fn write_paired_maps(maps: &[PairedMaps], cfg: &SaliencyConfig, out: &Path) -> Result<(), CliError> {
    let previews = out.join("report");
    create_dir(&previews)?;
    for pair in maps {
        let stem = scene_stem(pair.target.scene_index);
        for (arm, grid) in [("true", &pair.true_maps), ("random", &pair.random_maps)] {
            let dir = out.join("maps").join(&stem).join(arm);
            create_dir(&dir)?;
            for map in grid.iter().flatten() {
                export_map(map, cfg, &dir.join(format!("{}_{}.png", map.method, map.target.decision)))?;
            }
        }
        for (mi, per_method) in pair.true_maps.iter().enumerate() {
            let method = per_method.first().map(|m| m.method.name()).unwrap_or("none");
            let rows = vec![
                per_method.iter().map(|m| &m.values).collect(),
                pair.random_maps[mi].iter().map(|m| &m.values).collect(),
            ];
            write_grid(&rows, &previews.join(format!("{stem}_{method}.png")))?;
        }
    }
    info!("wrote paired maps for {} scenes", maps.len());
    Ok(())
}
