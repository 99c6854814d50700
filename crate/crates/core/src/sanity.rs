//! Model-parameter and data randomization runners.
//!
//! Cascading randomization re-initializes whole parameterized layers,
//! walking from the output side towards the input, until the cumulative
//! re-initialized parameter count first reaches `p * total`. Fresh values are
//! drawn exactly as [`Model::initialize`] would (layer `i` in
//! [`Model::param_layers`] order draws from stream `i`), so the randomized
//! layer set only grows with `p` for a fixed seed.
//!
//! Both runners explain one target per image chosen on the trained model
//! (its highest-scoring detection) and reuse the same anchor, class and
//! decision on every randomized or random-label model, which may detect
//! nothing at all.

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::detector::{
    iou, train, BBox, Decision, Detection, Detector, DetectorConfig, TrainOptions,
    MATCH_IOU,
};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate_score, detect_intensity_change, map_ssim, observe, AspectFlags, AspectObservation,
    MetricThresholds, ScoreRow, SsimCurve, SsimPoint,
};
use crate::model::{LayerSlot, Model};
use crate::saliency::{explain, ExplanationTarget, Method, SaliencyConfig, SaliencyMap};
use crate::synthdata::{default_box_noise, generate, randomize, GeneratorConfig, RandomizationSpec, SyntheticScene};
use crate::tensor::Tensor;

/// Fraction of parameters to re-initialize, in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct RandomizationLevel(f64);

impl RandomizationLevel {
    pub fn new(fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!(
                "randomization fraction {fraction} outside [0, 1]"
            )));
        }
        Ok(RandomizationLevel(fraction))
    }

    pub fn fraction(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutcome {
    pub model: Model,
    /// Re-initialized layers, output side first.
    pub randomized: Vec<LayerSlot>,
    pub randomized_params: usize,
}

/// Randomization draws from ChaCha streams above this offset, disjoint from
/// the streams used by [`Model::initialize`], so no seed can reproduce a
/// model's initial weights.
pub const RANDOMIZATION_STREAM_OFFSET: u64 = 1 << 32;

/// Returns a copy of `model` with the output-side layers re-initialized.
pub fn cascade_randomize(model: &Model, level: RandomizationLevel, seed: u64) -> CascadeOutcome {
    let total = model.param_count();
    let target = level.fraction() * total as f64;
    let mut out = model.clone();
    let mut randomized = Vec::new();
    let mut count = 0usize;
    for (stream, slot) in model.param_layers().into_iter().enumerate().rev() {
        if count as f64 >= target {
            break;
        }
        let layer = out.layer_mut(slot);
        layer.reinitialize(seed, RANDOMIZATION_STREAM_OFFSET + stream as u64);
        count += layer.param_count();
        randomized.push(slot);
    }
    CascadeOutcome {
        model: out,
        randomized,
        randomized_params: count,
    }
}

/// Detector wrapper around [`cascade_randomize`].
pub fn cascade_randomize_detector(detector: &Detector, level: RandomizationLevel, seed: u64) -> (Detector, CascadeOutcome) {
    let outcome = cascade_randomize(&detector.model, level, seed);
    let randomized = Detector {
        config: detector.config.clone(),
        model: outcome.model.clone(),
    };
    (randomized, outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityRunConfig {
    /// Ascending, starting at 0 and ending at 1.
    pub levels: Vec<f64>,
    pub image_count: usize,
    pub methods: Vec<Method>,
    pub decisions: Vec<Decision>,
    /// Seed of the re-initialized parameters.
    pub randomization_seed: u64,
    pub saliency: SaliencyConfig,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub thresholds: MetricThresholds,
}

impl Default for SanityRunConfig {
    fn default() -> Self {
        SanityRunConfig {
            levels: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            image_count: 15,
            methods: vec![Method::Gbp, Method::Sgbp, Method::Ig, Method::Sig],
            decisions: Decision::ALL.to_vec(),
            randomization_seed: 1,
            saliency: SaliencyConfig::default(),
            score_threshold: 0.3,
            nms_iou: 0.45,
            thresholds: MetricThresholds::default(),
        }
    }
}

impl SanityRunConfig {
    pub fn validate(&self) -> Result<()> {
        let l = &self.levels;
        if l.first() != Some(&0.0) || (l.len() > 1 && l.last() != Some(&1.0)) {
            return Err(Error::InvalidConfig(format!(
                "levels must start at 0 and end at 1, got {l:?}"
            )));
        }
        if l.windows(2).any(|w| !(w[0] < w[1])) || l.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::InvalidConfig(format!(
                "levels must be strictly ascending within [0, 1], got {l:?}"
            )));
        }
        if self.image_count == 0 || self.methods.is_empty() || self.decisions.is_empty() {
            return Err(Error::InvalidConfig(
                "image_count, methods and decisions must be non-empty".into(),
            ));
        }
        self.saliency.validate()
    }
}

/// The target picked on the trained model for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ChosenTarget {
    pub scene_index: usize,
    pub image: Tensor,
    pub detection: Detection,
    /// Ground-truth boxes that do not match the detection.
    pub others: Vec<BBox>,
}

/// Highest-scoring detection of `detector` on the scene, if any.
pub fn choose_target(
    detector: &Detector,
    scene: &SyntheticScene,
    scene_index: usize,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Option<ChosenTarget>> {
    let detections = detector.detect(&scene.image, score_threshold, nms_iou)?;
    let Some(best) = detections.into_iter().max_by(|a, b| a.score.total_cmp(&b.score)) else {
        return Ok(None);
    };
    let others = scene
        .annotations
        .iter()
        .filter(|a| iou(&a.bbox, &best.bbox) < MATCH_IOU)
        .map(|a| a.bbox)
        .collect();
    Ok(Some(ChosenTarget {
        scene_index,
        image: scene.image.clone(),
        detection: best,
        others,
    }))
}

/// All maps of one target: `[method][decision]`.
pub fn explain_grid(
    detector: &Detector,
    target: &ChosenTarget,
    methods: &[Method],
    decisions: &[Decision],
    saliency: &SaliencyConfig,
) -> Result<Vec<Vec<SaliencyMap>>> {
    let targets: Vec<ExplanationTarget> = decisions
        .iter()
        .map(|&d| ExplanationTarget::from_detection(&target.detection, d))
        .collect();
    methods
        .iter()
        .map(|&m| explain(detector, &target.image, &targets, m, saliency))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelInfo {
    pub fraction: f64,
    pub randomized_layers: Vec<String>,
    pub randomized_params: usize,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplainedImage {
    pub target: ChosenTarget,
    /// `[level][method][decision]`.
    pub maps: Vec<Vec<Vec<SaliencyMap>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSanityResult {
    pub config: SanityRunConfig,
    pub true_fingerprint: String,
    pub levels: Vec<LevelInfo>,
    pub images: Vec<ExplainedImage>,
    /// Scenes without any detection on the trained model.
    pub skipped: Vec<usize>,
}

/// Explains the first `image_count` scenes at every level of the cascade.
pub fn model_randomization_test(
    detector: &Detector,
    scenes: &[SyntheticScene],
    config: &SanityRunConfig,
) -> Result<ModelSanityResult> {
    config.validate()?;
    let mut levels = Vec::with_capacity(config.levels.len());
    let mut models = Vec::with_capacity(config.levels.len());
    for &fraction in &config.levels {
        let (randomized, outcome) =
            cascade_randomize_detector(detector, RandomizationLevel::new(fraction)?, config.randomization_seed);
        levels.push(LevelInfo {
            fraction,
            randomized_layers: outcome
                .randomized
                .iter()
                .map(|&s| detector.model.layer(s).name())
                .collect(),
            randomized_params: outcome.randomized_params,
            fingerprint: randomized.model.fingerprint(),
        });
        models.push(randomized);
    }

    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for (index, scene) in scenes.iter().enumerate().take(config.image_count) {
        let Some(target) = choose_target(detector, scene, index, config.score_threshold, config.nms_iou)? else {
            warn!("scene {index}: no detection on the trained model, skipped");
            skipped.push(index);
            continue;
        };
        let maps = models
            .iter()
            .map(|m| explain_grid(m, &target, &config.methods, &config.decisions, &config.saliency))
            .collect::<Result<Vec<_>>>()?;
        info!("scene {index}: explained at {} levels", models.len());
        images.push(ExplainedImage { target, maps });
    }
    Ok(ModelSanityResult {
        config: config.clone(),
        true_fingerprint: detector.model.fingerprint(),
        levels,
        images,
        skipped,
    })
}

/// Observations of one method at one level, over images and decisions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodObservations {
    pub method: Method,
    pub fraction: f64,
    pub observations: Vec<AspectObservation>,
    pub majority: AspectFlags,
}

impl ModelSanityResult {
    /// Mean SSIM against the level-0 map, per (method, decision).
    pub fn ssim_curves(&self) -> Result<Vec<SsimCurve>> {
        let mut curves = Vec::new();
        for (mi, &method) in self.config.methods.iter().enumerate() {
            for (di, &decision) in self.config.decisions.iter().enumerate() {
                let mut points = Vec::with_capacity(self.levels.len());
                for (li, level) in self.levels.iter().enumerate() {
                    let values = self
                        .images
                        .iter()
                        .map(|im| map_ssim(&im.maps[0][mi][di], &im.maps[li][mi][di]))
                        .collect::<Result<Vec<_>>>()?;
                    let n = values.len();
                    points.push(SsimPoint {
                        fraction: level.fraction,
                        mean_ssim: if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 },
                        n_images: n,
                    });
                }
                curves.push(SsimCurve {
                    method,
                    decision,
                    points,
                });
            }
        }
        Ok(curves)
    }

    /// Mean SSIM over all decisions and images at a level, per method.
    pub fn mean_ssim(&self, level_index: usize) -> Result<Vec<(Method, f64)>> {
        let curves = self.ssim_curves()?;
        Ok(self
            .config
            .methods
            .iter()
            .map(|&m| {
                let pts: Vec<f64> = curves
                    .iter()
                    .filter(|c| c.method == m)
                    .map(|c| c.points[level_index].mean_ssim)
                    .collect();
                (m, pts.iter().sum::<f64>() / pts.len() as f64)
            })
            .collect())
    }

    /// Aspect observations comparing `level_index` against level 0.
    pub fn observations(&self, level_index: usize) -> Result<Vec<MethodObservations>> {
        self.config
            .methods
            .iter()
            .enumerate()
            .map(|(mi, &method)| {
                let mut observations = Vec::new();
                for im in &self.images {
                    for di in 0..self.config.decisions.len() {
                        observations.push(observe(
                            &im.maps[0][mi][di],
                            &im.maps[level_index][mi][di],
                            &im.target.image,
                            &im.target.detection.bbox,
                            &im.target.others,
                            &self.config.thresholds,
                        )?);
                    }
                }
                let flags: Vec<AspectFlags> = observations.iter().map(|o| o.flags).collect();
                Ok(MethodObservations {
                    method,
                    fraction: self.levels[level_index].fraction,
                    majority: AspectFlags::majority(&flags),
                    observations,
                })
            })
            .collect()
    }

    /// One score row per method from the majority flags at `level_index`.
    pub fn score_rows(&self, level_index: usize, detector_name: &str) -> Result<Vec<ScoreRow>> {
        Ok(self
            .observations(level_index)?
            .into_iter()
            .map(|o| ScoreRow {
                detector: detector_name.to_string(),
                method: o.method,
                flags: o.majority,
                score: aggregate_score(&o.majority),
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSanityConfig {
    pub detector: DetectorConfig,
    pub train_data: GeneratorConfig,
    pub test_data: GeneratorConfig,
    pub permute_labels: bool,
    /// Box noise standard deviation in pixels; `None` uses ten percent of the
    /// mean box side.
    pub box_noise_stddev: Option<f64>,
    pub randomization_seed: u64,
    pub true_training: TrainOptions,
    pub random_training: TrainOptions,
    pub methods: Vec<Method>,
    pub decisions: Vec<Decision>,
    pub saliency: SaliencyConfig,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub thresholds: MetricThresholds,
    /// A pair counts as different when SSIM falls below this.
    pub ssim_threshold: f64,
    /// A method passes when at least this fraction of its pairs differ.
    pub pass_fraction: f64,
}

impl Default for DataSanityConfig {
    fn default() -> Self {
        DataSanityConfig {
            detector: DetectorConfig::default(),
            train_data: GeneratorConfig::default(),
            test_data: GeneratorConfig {
                count: 15,
                seed: 1_000,
                ..GeneratorConfig::default()
            },
            permute_labels: true,
            box_noise_stddev: None,
            randomization_seed: 7,
            true_training: TrainOptions {
                target_map: Some(0.8),
                ..TrainOptions::default()
            },
            random_training: TrainOptions {
                epochs: 300,
                target_map: Some(0.8),
                ..TrainOptions::default()
            },
            methods: vec![Method::Gbp, Method::Sgbp, Method::Ig, Method::Sig],
            decisions: Decision::ALL.to_vec(),
            saliency: SaliencyConfig::default(),
            score_threshold: 0.3,
            nms_iou: 0.45,
            thresholds: MetricThresholds::default(),
            ssim_threshold: 0.9,
            pass_fraction: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub fingerprint: String,
    pub epochs_run: usize,
    /// Train mAP@0.5 against the arm's own annotations.
    pub train_map: f64,
    pub reached_target: bool,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub scene_index: usize,
    pub method: Method,
    pub decision: Decision,
    pub ssim: f64,
    /// Random-arm raw range over true-arm raw range.
    pub range_ratio: Option<f64>,
    pub texture_intersection: f64,
    pub different: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodVerdict {
    pub method: Method,
    pub pairs: usize,
    pub different: usize,
    pub fraction_different: f64,
    pub passes: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSanityReport {
    pub true_arm: Option<ArmSummary>,
    pub random_arm: Option<ArmSummary>,
    /// Set when the random-label arm ran out of epochs below the target.
    pub threshold_not_met: bool,
    /// Share of the random arm's test detections whose class equals the
    /// true shape of a matching object.
    pub random_shape_agreement: Option<f64>,
    pub pairs: Vec<PairComparison>,
    pub verdicts: Vec<MethodVerdict>,
    pub fraction_different: f64,
    pub skipped: Vec<usize>,
}

/// The explanations behind one scene's pairs, indexed `[method][decision]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedMaps {
    pub target: ChosenTarget,
    pub true_maps: Vec<Vec<SaliencyMap>>,
    pub random_maps: Vec<Vec<SaliencyMap>>,
}

/// Compares explanations of two models on `test_scenes`, one target per
/// scene chosen on `true_model`.
pub fn compare_models(
    true_model: &Detector,
    random_model: &Detector,
    test_scenes: &[SyntheticScene],
    config: &DataSanityConfig,
) -> Result<DataSanityReport> {
    compare_models_with_maps(true_model, random_model, test_scenes, config).map(|(report, _)| report)
}

/// [`compare_models`] that also returns the compared maps.
pub fn compare_models_with_maps(
    true_model: &Detector,
    random_model: &Detector,
    test_scenes: &[SyntheticScene],
    config: &DataSanityConfig,
) -> Result<(DataSanityReport, Vec<PairedMaps>)> {
    config.saliency.validate()?;
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    let mut paired = Vec::new();
    for (index, scene) in test_scenes.iter().enumerate() {
        let Some(target) = choose_target(true_model, scene, index, config.score_threshold, config.nms_iou)? else {
            warn!("test scene {index}: no detection on the true-label model, skipped");
            skipped.push(index);
            continue;
        };
        let a = explain_grid(true_model, &target, &config.methods, &config.decisions, &config.saliency)?;
        let b = explain_grid(random_model, &target, &config.methods, &config.decisions, &config.saliency)?;
        for (mi, &method) in config.methods.iter().enumerate() {
            for (di, &decision) in config.decisions.iter().enumerate() {
                let (ma, mb) = (&a[mi][di], &b[mi][di]);
                let ssim = map_ssim(ma, mb)?;
                let intensity = detect_intensity_change(ma.raw_range(), mb.raw_range(), &config.thresholds);
                let texture = crate::metrics::detect_texture_change(&ma.values, &mb.values, &config.thresholds)?;
                pairs.push(PairComparison {
                    scene_index: index,
                    method,
                    decision,
                    ssim,
                    range_ratio: intensity.range_ratio,
                    texture_intersection: texture.intersection,
                    different: intensity.present || ssim < config.ssim_threshold,
                });
            }
        }
        info!("test scene {index}: compared");
        paired.push(PairedMaps {
            target,
            true_maps: a,
            random_maps: b,
        });
    }
    let verdicts = config
        .methods
        .iter()
        .map(|&method| {
            let mine: Vec<&PairComparison> = pairs.iter().filter(|p| p.method == method).collect();
            let different = mine.iter().filter(|p| p.different).count();
            let fraction = if mine.is_empty() { 0.0 } else { different as f64 / mine.len() as f64 };
            MethodVerdict {
                method,
                pairs: mine.len(),
                different,
                fraction_different: fraction,
                passes: !mine.is_empty() && fraction >= config.pass_fraction,
            }
        })
        .collect();
    let different = pairs.iter().filter(|p| p.different).count();
    let report = DataSanityReport {
        true_arm: None,
        random_arm: None,
        threshold_not_met: false,
        random_shape_agreement: None,
        fraction_different: if pairs.is_empty() { 0.0 } else { different as f64 / pairs.len() as f64 },
        pairs,
        verdicts,
        skipped,
    };
    Ok((report, paired))
}

/// Share of detections matching (IoU >= 0.5) an object whose true shape
/// equals the predicted class; `None` without matched detections or
/// without object geometry.
pub fn shape_agreement(detector: &Detector, scenes: &[SyntheticScene], score_threshold: f64, nms_iou: f64) -> Result<Option<f64>> {
    let (mut matched, mut agree) = (0usize, 0usize);
    for scene in scenes {
        if scene.objects.len() != scene.annotations.len() {
            continue;
        }
        for d in detector.detect(&scene.image, score_threshold, nms_iou)? {
            let best = scene
                .annotations
                .iter()
                .zip(&scene.objects)
                .map(|(a, o)| (iou(&a.bbox, &d.bbox), o.kind.class_id()))
                .max_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((overlap, shape)) = best {
                if overlap >= MATCH_IOU {
                    matched += 1;
                    agree += (shape == d.class_id) as usize;
                }
            }
        }
    }
    Ok((matched > 0).then(|| agree as f64 / matched as f64))
}

impl From<&crate::detector::TrainOutcome> for ArmSummary {
    fn from(outcome: &crate::detector::TrainOutcome) -> Self {
        ArmSummary {
            fingerprint: outcome.detector.model.fingerprint(),
            epochs_run: outcome.epochs_run,
            train_map: outcome.train_map,
            reached_target: outcome.reached_target,
            final_loss: outcome.loss_trace.last().copied(),
        }
    }
}

/// Result of [`data_randomization_test`], including both trained arms.
#[derive(Clone, Debug)]
pub struct DataSanityRun {
    pub true_model: Detector,
    pub random_model: Detector,
    pub report: DataSanityReport,
    pub maps: Vec<PairedMaps>,
}

/// Trains a true-label arm and a randomized-annotation arm from the same
/// initialization, then compares their explanations on held-out scenes.
pub fn data_randomization_test(config: &DataSanityConfig) -> Result<DataSanityRun> {
    let train_scenes = generate(&config.train_data)?;
    let test_scenes = generate(&config.test_data)?;
    data_randomization_on(&train_scenes, &test_scenes, config)
}

/// [`data_randomization_test`] on given scenes; the generator settings in
/// `config` are ignored.
pub fn data_randomization_on(
    train_scenes: &[SyntheticScene],
    test_scenes: &[SyntheticScene],
    config: &DataSanityConfig,
) -> Result<DataSanityRun> {
    let spec = RandomizationSpec {
        permute_labels: config.permute_labels,
        box_noise_stddev: config.box_noise_stddev.unwrap_or_else(|| default_box_noise(train_scenes)),
        seed: config.randomization_seed,
    };
    let random_scenes = randomize(train_scenes, &spec)?;

    let init = Detector::build(config.detector.clone())?;
    let true_outcome = train(init.clone(), train_scenes, &config.true_training)?;
    info!(
        "true-label arm: {} epochs, train mAP {:.3}",
        true_outcome.epochs_run, true_outcome.train_map
    );
    let random_outcome = train(init, &random_scenes, &config.random_training)?;
    let threshold_not_met = config.random_training.target_map.is_some() && !random_outcome.reached_target;
    if threshold_not_met {
        warn!(
            "random-label arm: threshold not met, train mAP {:.3} after {} epochs",
            random_outcome.train_map, random_outcome.epochs_run
        );
    } else {
        info!(
            "random-label arm: {} epochs, train mAP {:.3}",
            random_outcome.epochs_run, random_outcome.train_map
        );
    }

    let (mut report, maps) =
        compare_models_with_maps(&true_outcome.detector, &random_outcome.detector, test_scenes, config)?;
    report.true_arm = Some(ArmSummary::from(&true_outcome));
    report.random_arm = Some(ArmSummary::from(&random_outcome));
    report.threshold_not_met = threshold_not_met;
    report.random_shape_agreement =
        shape_agreement(&random_outcome.detector, test_scenes, config.score_threshold, config.nms_iou)?;
    Ok(DataSanityRun {
        true_model: true_outcome.detector,
        random_model: random_outcome.detector,
        report,
        maps,
    })
}
