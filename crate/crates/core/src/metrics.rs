//! Map comparison and scoring.
//!
//! - [`ssim`]: mean structural similarity over 8x8 sliding windows (unit
//!   stride, population statistics, `L = 1`).
//! - Six aspect detectors that turn a (true, randomized) map pair into flags
//!   with the evidence behind each flag.
//! - [`aggregate_score`]: the +-1 sensitivity score with a pass bonus.
//! - Export helpers for SSIM curves (CSV), observations (JSON) and the score
//!   table (markdown).

use std::fmt::Write as _;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::detector::{BBox, Decision};
use crate::error::{Error, Result};
use crate::saliency::{Method, SaliencyMap};
use crate::tensor::Tensor;

/// `(v - min) / (max - min)`; a constant input maps to all zeros.
pub fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - min) / range).collect()
}

/// Min-max normalized view of a map, `[H, W]`.
pub fn normalize_map(map: &SaliencyMap) -> Tensor {
    Tensor::new(map.values.shape().to_vec(), minmax_normalize(map.values.data()))
        .expect("same shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 8,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

fn hw(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(Error::InvalidShape(format!("expected an [H, W] map, got {s:?}"))),
    }
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

/// Mean SSIM over all `window x window` positions.
///
/// Written so that `ssim(a, a) == 1` and `ssim(a, b) == ssim(b, a)` hold
/// exactly in floating point.
pub fn ssim_with(a: &Tensor, b: &Tensor, params: &SsimParams) -> Result<f64> {
    let (h, w) = hw(a)?;
    if b.shape() != a.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let k = params.window;
    if k == 0 || h < k || w < k {
        return Err(Error::InvalidShape(format!(
            "map {h}x{w} smaller than the {k}x{k} ssim window"
        )));
    }
    let n = (k * k) as f64;
    let (da, db) = (a.data(), b.data());
    let mut total = 0.0;
    let mut windows = 0usize;
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let idx = |i: usize| (y0 + i / k) * w + x0 + i % k;
            let (mut sa, mut sb) = (0.0, 0.0);
            for i in 0..k * k {
                sa += da[idx(i)];
                sb += db[idx(i)];
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..k * k {
                let (x, y) = (da[idx(i)] - ma, db[idx(i)] - mb);
                va += x * x;
                vb += y * y;
                cov += x * y;
            }
            let (va, vb, cov) = (va / n, vb / n, cov / n);
            let num = (2.0 * (ma * mb) + params.c1) * (2.0 * cov + params.c2);
            let den = (ma * ma + mb * mb + params.c1) * (va + vb + params.c2);
            total += num / den;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// SSIM of the min-max normalized views of two maps.
pub fn map_ssim(a: &SaliencyMap, b: &SaliencyMap) -> Result<f64> {
    ssim(&normalize_map(a), &normalize_map(b))
}

/// Sobel gradient magnitude with edge-replicated borders.
pub fn sobel_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        plane[y * w + x]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Channel mean of a `[C, H, W]` (or `[1, C, H, W]`) image.
pub fn grayscale(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match image.shape() {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        s => return Err(Error::InvalidShape(format!("expected [C, H, W] image, got {s:?}"))),
    };
    let plane = h * w;
    let d = image.data();
    Tensor::new(
        vec![h, w],
        (0..plane)
            .map(|i| (0..c).map(|ch| d[ch * plane + i]).sum::<f64>() / c as f64)
            .collect(),
    )
}

/// Pearson correlation; `None` when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricThresholds {
    /// Edge detector: correlation above this.
    pub edge_correlation: f64,
    /// Fraction of the highest-saliency pixels used by the focus criteria.
    pub top_fraction: f64,
    /// Only-interest: interest share of the in-box mass at least this.
    pub interest_share: f64,
    /// A box "holds" mass when its share is at least this.
    pub box_share: f64,
    /// Texture change: histogram intersection below this.
    pub texture_intersection: f64,
    pub texture_bins: usize,
    /// Artifacts: corner-spectrum energy ratio above this.
    pub artifact_ratio: f64,
    /// Corner bins start at this fraction of the Nyquist frequency.
    pub artifact_band: f64,
    /// Intensity change: range ratio outside `[low, high]`.
    pub intensity_low: f64,
    pub intensity_high: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        MetricThresholds {
            edge_correlation: 0.5,
            top_fraction: 0.1,
            interest_share: 0.8,
            box_share: 0.1,
            texture_intersection: 0.6,
            texture_bins: 16,
            artifact_ratio: 0.25,
            artifact_band: 0.75,
            intensity_low: 0.5,
            intensity_high: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeEvidence {
    /// `None` when the image or the map is constant.
    pub correlation: Option<f64>,
    pub present: bool,
}

/// Correlation of the normalized map with the image's Sobel magnitude.
pub fn detect_edge_detector(map: &Tensor, image: &Tensor, thresholds: &MetricThresholds) -> Result<EdgeEvidence> {
    let (h, w) = hw(map)?;
    let gray = grayscale(image)?;
    if gray.shape() != map.shape() {
        return Err(Error::shape("edge detector image", map.shape(), gray.shape()));
    }
    let edges = sobel_magnitude(gray.data(), h, w);
    let correlation = pearson(&minmax_normalize(map.data()), &edges);
    if correlation.is_none() {
        log::debug!("edge detector: constant map or image, correlation undefined");
    }
    Ok(EdgeEvidence {
        correlation,
        present: correlation.is_some_and(|c| c > thresholds.edge_correlation),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocusEvidence {
    /// Share of the top-pixel mass inside each box; index 0 is the interest box.
    pub box_shares: Vec<f64>,
    /// Share of the top-pixel mass inside any box.
    pub in_box_share: f64,
    pub only_interest: bool,
    pub multiple: bool,
}

/// Focus criteria on the top `top_fraction` pixels (ties at the cut
/// included). A pixel belongs to a box when its center lies inside.
pub fn detect_focus(
    map: &Tensor,
    interest: &BBox,
    others: &[BBox],
    thresholds: &MetricThresholds,
) -> Result<FocusEvidence> {
    let (h, w) = hw(map)?;
    let values = minmax_normalize(map.data());
    let boxes: Vec<&BBox> = std::iter::once(interest).chain(others).collect();
    let mut sorted = values.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((thresholds.top_fraction * values.len() as f64).ceil() as usize).clamp(1, values.len());
    let cut = sorted[k - 1];
    let mut total = 0.0;
    let mut per_box = vec![0.0; boxes.len()];
    let mut in_any = 0.0;
    for (i, &v) in values.iter().enumerate() {
        if v < cut {
            continue;
        }
        total += v;
        let (x, y) = (i % w, i / w);
        let mut inside = false;
        for (b, mass) in boxes.iter().zip(per_box.iter_mut()) {
            if b.contains_pixel(x, y) {
                *mass += v;
                inside = true;
            }
        }
        if inside {
            in_any += v;
        }
    }
    debug_assert!(h * w == values.len());
    if !(total > 0.0) {
        return Ok(FocusEvidence {
            box_shares: vec![0.0; boxes.len()],
            in_box_share: 0.0,
            only_interest: false,
            multiple: false,
        });
    }
    let box_shares: Vec<f64> = per_box.iter().map(|m| m / total).collect();
    let in_box_share = in_any / total;
    let holding = box_shares.iter().filter(|&&s| s >= thresholds.box_share).count();
    let only_interest = box_shares[0] >= thresholds.box_share
        && box_shares[0] >= thresholds.interest_share * in_box_share
        && box_shares[1..].iter().all(|&s| s < thresholds.box_share);
    Ok(FocusEvidence {
        box_shares,
        in_box_share,
        only_interest,
        multiple: holding >= 2,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureEvidence {
    pub intersection: f64,
    pub present: bool,
}

/// Histogram intersection of the Sobel-magnitude distributions of two
/// normalized maps over a shared range.
pub fn detect_texture_change(
    map_true: &Tensor,
    map_rand: &Tensor,
    thresholds: &MetricThresholds,
) -> Result<TextureEvidence> {
    let (h, w) = hw(map_true)?;
    if map_rand.shape() != map_true.shape() {
        return Err(Error::shape("texture change", map_true.shape(), map_rand.shape()));
    }
    let ga = sobel_magnitude(&minmax_normalize(map_true.data()), h, w);
    let gb = sobel_magnitude(&minmax_normalize(map_rand.data()), h, w);
    let top = ga.iter().chain(&gb).copied().fold(0.0, f64::max);
    let bins = thresholds.texture_bins.max(1);
    let histogram = |g: &[f64]| {
        let mut hist = vec![0.0; bins];
        for &v in g {
            let b = if top > 0.0 {
                ((v / top * bins as f64) as usize).min(bins - 1)
            } else {
                0
            };
            hist[b] += 1.0 / g.len() as f64;
        }
        hist
    };
    let (ha, hb) = (histogram(&ga), histogram(&gb));
    let intersection: f64 = ha.iter().zip(&hb).map(|(a, b)| a.min(*b)).sum();
    Ok(TextureEvidence {
        intersection,
        present: intersection < thresholds.texture_intersection,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEvidence {
    pub high_frequency_ratio: f64,
    pub present: bool,
}

/// Share of AC spectral energy in the bins where both frequency magnitudes
/// are at least `artifact_band` of Nyquist.
pub fn detect_artifacts(map: &Tensor, thresholds: &MetricThresholds) -> Result<ArtifactEvidence> {
    let (h, w) = hw(map)?;
    let values = minmax_normalize(map.data());
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut buf: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row = planner.plan_fft_forward(w);
    for r in buf.chunks_mut(w) {
        row.process(r);
    }
    let col = planner.plan_fft_forward(h);
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
    let freq = |i: usize, n: usize| -> f64 {
        let f = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
        f.abs() / (n as f64 / 2.0)
    };
    let (mut total, mut corner) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if x == 0 && y == 0 {
                continue;
            }
            let e = buf[y * w + x].norm_sqr();
            total += e;
            if freq(x, w) >= thresholds.artifact_band && freq(y, h) >= thresholds.artifact_band {
                corner += e;
            }
        }
    }
    let ratio = if total > 0.0 { corner / total } else { 0.0 };
    Ok(ArtifactEvidence {
        high_frequency_ratio: ratio,
        present: ratio > thresholds.artifact_ratio,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityEvidence {
    /// Randomized raw range over true raw range; `None` when the true map is
    /// constant.
    pub range_ratio: Option<f64>,
    pub present: bool,
}

pub fn detect_intensity_change(
    true_range: f64,
    rand_range: f64,
    thresholds: &MetricThresholds,
) -> IntensityEvidence {
    if !(true_range > 0.0) {
        return IntensityEvidence {
            range_ratio: None,
            present: rand_range > 0.0,
        };
    }
    let ratio = rand_range / true_range;
    IntensityEvidence {
        range_ratio: Some(ratio),
        present: !(thresholds.intensity_low..=thresholds.intensity_high).contains(&ratio),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectFlags {
    pub edge_detector: bool,
    pub highlight_only_interest: bool,
    pub focus_multiple: bool,
    pub texture_change: bool,
    pub shows_artifacts: bool,
    pub intensity_range_change: bool,
}

impl AspectFlags {
    pub const NAMES: [&'static str; 6] = [
        "edge_detector",
        "highlight_only_interest",
        "focus_multiple",
        "texture_change",
        "shows_artifacts",
        "intensity_range_change",
    ];

    pub fn as_array(&self) -> [bool; 6] {
        [
            self.edge_detector,
            self.highlight_only_interest,
            self.focus_multiple,
            self.texture_change,
            self.shows_artifacts,
            self.intensity_range_change,
        ]
    }

    pub fn from_array(f: [bool; 6]) -> Self {
        AspectFlags {
            edge_detector: f[0],
            highlight_only_interest: f[1],
            focus_multiple: f[2],
            texture_change: f[3],
            shows_artifacts: f[4],
            intensity_range_change: f[5],
        }
    }

    /// Per aspect, present when strictly more than half of `all` show it.
    pub fn majority(all: &[AspectFlags]) -> AspectFlags {
        let mut counts = [0usize; 6];
        for flags in all {
            for (c, f) in counts.iter_mut().zip(flags.as_array()) {
                *c += f as usize;
            }
        }
        AspectFlags::from_array(counts.map(|c| 2 * c > all.len()))
    }
}

/// Whether an aspect indicates sensitivity when present.
pub const ASPECT_IS_POSITIVE: [bool; 6] = [false, false, true, true, false, true];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AspectObservation {
    pub flags: AspectFlags,
    pub edge: EdgeEvidence,
    pub focus: FocusEvidence,
    pub texture: TextureEvidence,
    pub artifacts: ArtifactEvidence,
    pub intensity: IntensityEvidence,
    pub thresholds: MetricThresholds,
}

/// Runs all six detectors on a (true, randomized) map pair. The focus and
/// edge criteria look at the randomized map.
pub fn observe(
    map_true: &SaliencyMap,
    map_rand: &SaliencyMap,
    image: &Tensor,
    interest: &BBox,
    others: &[BBox],
    thresholds: &MetricThresholds,
) -> Result<AspectObservation> {
    let edge = detect_edge_detector(&map_rand.values, image, thresholds)?;
    let focus = detect_focus(&map_rand.values, interest, others, thresholds)?;
    let texture = detect_texture_change(&map_true.values, &map_rand.values, thresholds)?;
    let artifacts = detect_artifacts(&map_rand.values, thresholds)?;
    let intensity = detect_intensity_change(map_true.raw_range(), map_rand.raw_range(), thresholds);
    Ok(AspectObservation {
        flags: AspectFlags {
            edge_detector: edge.present,
            highlight_only_interest: focus.only_interest,
            focus_multiple: focus.multiple,
            texture_change: texture.present,
            shows_artifacts: artifacts.present,
            intensity_range_change: intensity.present,
        },
        edge,
        focus,
        texture,
        artifacts,
        intensity,
        thresholds: *thresholds,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitivityScore {
    /// `+1` or `-1` per aspect, in [`AspectFlags::NAMES`] order.
    pub contributions: [i32; 6],
    pub bonus: i32,
    pub total: i32,
    pub pass: bool,
}

/// Negative aspects score -1 when present and +1 when absent, positive
/// aspects the reverse; one more point when any contribution is +1.
pub fn aggregate_score(flags: &AspectFlags) -> SensitivityScore {
    let contributions = std::array::from_fn(|i| {
        let present = flags.as_array()[i];
        if present == ASPECT_IS_POSITIVE[i] {
            1
        } else {
            -1
        }
    });
    let pass = contributions.contains(&1);
    let bonus = pass as i32;
    SensitivityScore {
        contributions,
        bonus,
        total: contributions.iter().sum::<i32>() + bonus,
        pass,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimPoint {
    pub fraction: f64,
    pub mean_ssim: f64,
    pub n_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimCurve {
    pub method: Method,
    pub decision: Decision,
    pub points: Vec<SsimPoint>,
}

impl SsimCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,mean_ssim,n_images\n");
        for p in &self.points {
            writeln!(out, "{},{},{}", p.fraction, p.mean_ssim, p.n_images).expect("string write");
        }
        out
    }
}

/// One row of the score table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub detector: String,
    pub method: Method,
    pub flags: AspectFlags,
    pub score: SensitivityScore,
}

pub fn score_table_markdown(rows: &[ScoreRow]) -> String {
    let mut out = String::from(
        "| detector | method | edge detector | only interest | multiple objects | texture change | artifacts | intensity change | score |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let marks: Vec<&str> = r
            .flags
            .as_array()
            .iter()
            .map(|&f| if f { "✓" } else { "✗" })
            .collect();
        writeln!(
            out,
            "| {} | {} | {} | {} |",
            r.detector,
            r.method.name().to_uppercase(),
            marks.join(" | "),
            r.score.total
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Tensor {
        Tensor::new(vec![h, w], (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
    }

    #[test]
    fn minmax_cases() {
        assert_eq!(minmax_normalize(&[0.0, 5.0, 10.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[3.0, 3.0]), vec![0.0, 0.0]);
        assert_eq!(minmax_normalize(&[0.0, 0.25, 1.0]), vec![0.0, 0.25, 1.0]);
    }

    #[test]
    fn ssim_basics() {
        let a = t(16, 16, |y, x| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        assert!(ssim(&a, &t(16, 15, |_, _| 0.0)).is_err());
        assert!(ssim(&t(4, 4, |_, _| 0.0), &t(4, 4, |_, _| 0.0)).is_err());
    }

    #[test]
    fn ssim_constant_windows_closed_form() {
        let a = t(8, 8, |_, _| 0.2);
        let b = t(8, 8, |_, _| 0.6);
        let c1 = 1e-4;
        let expected = (2.0 * 0.2 * 0.6 + c1) / (0.2 * 0.2 + 0.6 * 0.6 + c1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn edge_detector_cases() {
        let th = MetricThresholds::default();
        let gray = t(16, 16, |y, x| if x > 7 { 0.8 } else { 0.1 + 0.01 * y as f64 });
        let image = Tensor::new(vec![1, 16, 16], gray.data().to_vec()).unwrap();
        let edges = Tensor::new(vec![16, 16], sobel_magnitude(gray.data(), 16, 16)).unwrap();
        let e = detect_edge_detector(&edges, &image, &th).unwrap();
        assert!((e.correlation.unwrap() - 1.0).abs() < 1e-12 && e.present);
        let flat = detect_edge_detector(&t(16, 16, |_, _| 1.0), &image, &th).unwrap();
        assert_eq!(flat.correlation, None);
        assert!(!flat.present);
    }

    #[test]
    fn focus_cases() {
        let th = MetricThresholds::default();
        let interest = BBox::new(0.0, 0.0, 8.0, 8.0);
        let other = BBox::new(24.0, 24.0, 32.0, 32.0);
        let inside = t(32, 32, |y, x| if interest.contains_pixel(x, y) { 1.0 } else { 0.0 });
        let f = detect_focus(&inside, &interest, &[other], &th).unwrap();
        assert!(f.only_interest && !f.multiple);

        let split = t(32, 32, |y, x| {
            if interest.contains_pixel(x, y) || other.contains_pixel(x, y) {
                1.0
            } else {
                0.0
            }
        });
        let f = detect_focus(&split, &interest, &[other], &th).unwrap();
        assert!(f.multiple && !f.only_interest);
        assert!((f.box_shares[0] - 0.5).abs() < 1e-12);

        let small_a = BBox::new(0.0, 0.0, 4.0, 4.0);
        let small_b = BBox::new(10.0, 10.0, 14.0, 14.0);
        let f = detect_focus(&t(32, 32, |_, _| 0.5), &small_a, &[small_b], &th).unwrap();
        assert!(!f.only_interest && !f.multiple);
    }

    #[test]
    fn checkerboard_and_blob_artifacts() {
        let th = MetricThresholds::default();
        let board = t(32, 32, |y, x| ((x + y) % 2) as f64);
        assert!(detect_artifacts(&board, &th).unwrap().present);
        let blob = t(32, 32, |y, x| {
            let (dx, dy) = (x as f64 - 16.0, y as f64 - 16.0);
            (-(dx * dx + dy * dy) / 40.0).exp()
        });
        let a = detect_artifacts(&blob, &th).unwrap();
        assert!(!a.present && a.high_frequency_ratio < 1e-6);
    }

    #[test]
    fn intensity_cases() {
        let th = MetricThresholds::default();
        assert!(!detect_intensity_change(2.0, 2.0, &th).present);
        assert!(detect_intensity_change(1.0, 10.0, &th).present);
        assert!(detect_intensity_change(0.0, 1.0, &th).present);
        assert!(!detect_intensity_change(0.0, 0.0, &th).present);
    }

    #[test]
    fn texture_self_is_one() {
        let a = t(16, 16, |y, x| ((x * 5 + y * 9) % 13) as f64);
        let e = detect_texture_change(&a, &a, &MetricThresholds::default()).unwrap();
        assert!((e.intersection - 1.0).abs() < 1e-12 && !e.present);
    }

    #[test]
    fn score_rule_hand_cases() {
        let none = aggregate_score(&AspectFlags::default());
        assert_eq!(none.contributions, [1, 1, -1, -1, 1, -1]);
        assert_eq!(none.total, 1);
        let best = AspectFlags::from_array([false, false, true, true, false, true]);
        assert_eq!(aggregate_score(&best).total, 7);
        let worst = AspectFlags::from_array([true, true, false, false, true, false]);
        let s = aggregate_score(&worst);
        assert_eq!((s.total, s.pass), (-6, false));
    }

    #[test]
    fn majority_needs_more_than_half() {
        let a = AspectFlags::from_array([true; 6]);
        let b = AspectFlags::default();
        assert_eq!(AspectFlags::majority(&[a, b]), b);
        assert_eq!(AspectFlags::majority(&[a, a, b]), a);
    }

    #[test]
    fn csv_and_markdown() {
        let curve = SsimCurve {
            method: Method::Gbp,
            decision: Decision::Class,
            points: vec![SsimPoint {
                fraction: 0.0,
                mean_ssim: 1.0,
                n_images: 15,
            }],
        };
        assert_eq!(curve.to_csv(), "fraction,mean_ssim,n_images\n0,1,15\n");
        let flags = AspectFlags::default();
        let md = score_table_markdown(&[ScoreRow {
            detector: "toy".into(),
            method: Method::Sig,
            flags,
            score: aggregate_score(&flags),
        }]);
        assert!(md.lines().nth(2).unwrap().starts_with("| toy | SIG | ✗"));
        assert!(md.trim_end().ends_with("| 1 |"));
    }

    proptest! {
        #[test]
        fn score_is_bounded_and_monotone(bits in 0u8..64, flip in 0usize..6) {
            let f: [bool; 6] = std::array::from_fn(|i| bits >> i & 1 == 1);
            let s = aggregate_score(&AspectFlags::from_array(f));
            prop_assert!((-6..=7).contains(&s.total));
            let mut g = f;
            g[flip] = ASPECT_IS_POSITIVE[flip];
            prop_assert!(aggregate_score(&AspectFlags::from_array(g)).total >= s.total);
        }

        #[test]
        fn ssim_symmetric(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = t(12, 10, |_, _| rng.random::<f64>());
            let b = t(12, 10, |_, _| rng.random::<f64>());
            prop_assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        }
    }
}
