//! Detection evaluation: sliding windows, NMS, greedy IoU matching,
//! miss-rate/FPPI curves with the nine-point log-average summary, and
//! the viewpoint confusion matrix.
//!
//! The matching rule is the standard benchmark protocol: detections are
//! taken in descending score order, each may claim at most one unmatched
//! ground-truth box at IoU >= 0.5, leftovers on either side count as
//! false positives or misses. Because greedy matching never lets a
//! lower-scored detection influence a higher-scored one, matching once
//! with every detection and then sweeping a score threshold gives
//! exactly the same curve as re-matching per threshold.

use crate::error::Error;
use crate::tensor::Tensor;
use crate::Result;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.area() + other.area() - inter)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub bbox: BBox,
    /// Fraction of the object visible, in [0,1].
    pub visibility: f64,
}

/// Benchmark-style "reasonable" filter: keep boxes strictly taller than
/// `min_height` pixels with at least `min_visibility` visible.
pub fn filter_reasonable(
    gts: &[GroundTruth],
    min_height: f64,
    min_visibility: f64,
) -> Vec<GroundTruth> {
    gts.iter()
        .filter(|g| g.bbox.h > min_height && g.visibility >= min_visibility)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowScan {
    pub window_h: usize,
    pub window_w: usize,
    pub stride: usize,
    /// Image resize factors; boxes are mapped back to original pixels.
    pub scales: Vec<f64>,
}

impl Default for WindowScan {
    fn default() -> Self {
        WindowScan {
            window_h: 64,
            window_w: 32,
            stride: 8,
            scales: vec![1.0],
        }
    }
}

/// Bilinear resize of a single-channel [1,H,W] tensor.
pub fn resize_bilinear(image: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if c != 1 {
        return Err(Error::Dimension(format!(
            "resize expects 1 channel, got {c}"
        )));
    }
    if new_h == h && new_w == w {
        return Ok(image.clone());
    }
    let mut out = Tensor::zeros(vec![1, new_h, new_w]);
    for i in 0..new_h {
        for j in 0..new_w {
            let sy = ((i as f64 + 0.5) * h as f64 / new_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let sx = ((j as f64 + 0.5) * w as f64 / new_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = sy - y0 as f64;
            let fx = sx - x0 as f64;
            let v = image.at3(0, y0, x0) * (1.0 - fy) * (1.0 - fx)
                + image.at3(0, y0, x1) * (1.0 - fy) * fx
                + image.at3(0, y1, x0) * fy * (1.0 - fx)
                + image.at3(0, y1, x1) * fy * fx;
            out.set3(0, i, j, v);
        }
    }
    Ok(out)
}

pub fn crop_window(image: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
    let (_, ih, iw) = image.dims3()?;
    if top + h > ih || left + w > iw {
        return Err(Error::Dimension(format!(
            "window {h}x{w} at ({top},{left}) exceeds image {ih}x{iw}"
        )));
    }
    let mut out = Tensor::zeros(vec![1, h, w]);
    for i in 0..h {
        for j in 0..w {
            out.set3(0, i, j, image.at3(0, top + i, left + j));
        }
    }
    Ok(out)
}

/// Score every window of the scan over the image. `prune` (when given)
/// runs first and cheap; only windows it keeps reach `score`, whose
/// value becomes the detection score. Boxes are reported in original
/// image coordinates, row-major per scale, scales in listed order.
pub fn sliding_window_detect(
    image_id: &str,
    image: &Tensor,
    scan: &WindowScan,
    mut prune: Option<&mut dyn FnMut(&Tensor) -> bool>,
    score: &mut dyn FnMut(&Tensor) -> f64,
) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    for &s in &scan.scales {
        if !(s > 0.0) {
            return Err(Error::Config(format!("non-positive scale {s}")));
        }
        let (_, h, w) = image.dims3()?;
        let sh = ((h as f64 * s).round() as usize).max(1);
        let sw = ((w as f64 * s).round() as usize).max(1);
        let scaled = resize_bilinear(image, sh, sw)?;
        if sh < scan.window_h || sw < scan.window_w {
            continue;
        }
        let mut top = 0;
        while top + scan.window_h <= sh {
            let mut left = 0;
            while left + scan.window_w <= sw {
                let win = crop_window(&scaled, top, left, scan.window_h, scan.window_w)?;
                let keep = match prune.as_mut() {
                    Some(p) => p(&win),
                    None => true,
                };
                if keep {
                    dets.push(Detection {
                        image_id: image_id.to_string(),
                        bbox: BBox::new(
                            left as f64 / s,
                            top as f64 / s,
                            scan.window_w as f64 / s,
                            scan.window_h as f64 / s,
                        ),
                        score: score(&win),
                    });
                }
                left += scan.stride;
            }
            top += scan.stride;
        }
    }
    Ok(dets)
}

/// Greedy non-maximum suppression within each image: keep the highest
/// score, drop everything overlapping it above the threshold, repeat.
/// Ties are broken by input order, so the result is deterministic.
pub fn nms(dets: &[Detection], overlap: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order {
            if !suppressed[j]
                && j != i
                && dets[j].image_id == dets[i].image_id
                && dets[i].bbox.iou(&dets[j].bbox) > overlap
            {
                suppressed[j] = true;
            }
        }
    }
    kept.sort_unstable();
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

#[derive(Debug, Clone)]
pub struct MatchOutcome {
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    /// (score, matched) per detection in descending-score sweep order.
    pub per_detection: Vec<(f64, bool)>,
}

/// Greedy protocol matching: detections in descending score order, each
/// claiming the highest-IoU unmatched ground truth in its image at
/// IoU >= `iou_thr`. Every ground truth is matched at most once.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> MatchOutcome {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut gt_taken = vec![false; gts.len()];
    let mut per_detection = Vec::with_capacity(dets.len());
    let mut tp = 0;
    for &i in &order {
        let mut best: Option<(usize, f64)> = None;
        for (k, gt) in gts.iter().enumerate() {
            if gt_taken[k] || gt.image_id != dets[i].image_id {
                continue;
            }
            let ov = dets[i].bbox.iou(&gt.bbox);
            if ov >= iou_thr && best.is_none_or(|(_, b)| ov > b) {
                best = Some((k, ov));
            }
        }
        let matched = if let Some((k, _)) = best {
            gt_taken[k] = true;
            tp += 1;
            true
        } else {
            false
        };
        per_detection.push((dets[i].score, matched));
    }
    MatchOutcome {
        tp,
        fp: dets.len() - tp,
        fn_count: gts.len() - tp,
        per_detection,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fppi: f64,
    pub miss_rate: f64,
}

/// Operating points swept over score thresholds, FPPI ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct MissRateCurve {
    pub points: Vec<CurvePoint>,
}

/// Match once with every detection, then sweep distinct scores from
/// high to low, emitting one operating point per threshold. A detector
/// that produced nothing yields the single point (0, 1).
pub fn miss_rate_curve(
    dets: &[Detection],
    gts: &[GroundTruth],
    n_images: usize,
    iou_thr: f64,
) -> Result<MissRateCurve> {
    if gts.is_empty() || n_images == 0 {
        return Err(Error::InsufficientData(
            "miss-rate curve needs ground truth and a positive image count".into(),
        ));
    }
    let outcome = match_detections(dets, gts, iou_thr);
    let n_gt = gts.len() as f64;
    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let per = &outcome.per_detection;
    for i in 0..per.len() {
        if per[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        // Close the operating point only at the last detection of a
        // score-tie group: all of them fall on the same side of any
        // threshold.
        if i + 1 < per.len() && per[i + 1].0 == per[i].0 {
            continue;
        }
        points.push(CurvePoint {
            threshold: per[i].0,
            fppi: fp as f64 / n_images as f64,
            miss_rate: 1.0 - tp as f64 / n_gt,
        });
    }
    if points.is_empty() {
        points.push(CurvePoint {
            threshold: f64::INFINITY,
            fppi: 0.0,
            miss_rate: 1.0,
        });
    }
    Ok(MissRateCurve { points })
}

/// The nine FPPI reference points 10^(-2 + k/4), k = 0..8.
pub fn lamr_reference_points() -> [f64; 9] {
    let mut refs = [0.0; 9];
    for (k, r) in refs.iter_mut().enumerate() {
        *r = 10f64.powf(-2.0 + k as f64 / 4.0);
    }
    refs
}

/// Log-average miss rate in percent. At each reference FPPI, the curve
/// is read as a step function: the operating point with the largest
/// FPPI not exceeding the reference (latest in sweep order among equal
/// FPPIs, i.e. the lowest miss achievable within that budget); if no
/// point qualifies, miss rate 1. Misses are floored at 1e-6 before the
/// geometric mean.
pub fn log_avg_miss_rate(curve: &MissRateCurve) -> f64 {
    let refs = lamr_reference_points();
    let mut log_sum = 0.0;
    for r in refs {
        let mut miss = 1.0;
        for p in &curve.points {
            if p.fppi <= r {
                miss = p.miss_rate;
            } else {
                break;
            }
        }
        log_sum += miss.max(1e-6).ln();
    }
    (log_sum / 9.0).exp() * 100.0
}

pub const VIEWPOINT_STATES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    /// counts[true_state][predicted_state]
    pub counts: [[usize; VIEWPOINT_STATES]; VIEWPOINT_STATES],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[usize; VIEWPOINT_STATES]; VIEWPOINT_STATES]) -> ConfusionMatrix {
        ConfusionMatrix { counts }
    }

    pub fn row_sums(&self) -> [usize; VIEWPOINT_STATES] {
        let mut sums = [0; VIEWPOINT_STATES];
        for (i, row) in self.counts.iter().enumerate() {
            sums[i] = row.iter().sum();
        }
        sums
    }

    pub fn column_sums(&self) -> [usize; VIEWPOINT_STATES] {
        let mut sums = [0; VIEWPOINT_STATES];
        for row in &self.counts {
            for (j, v) in row.iter().enumerate() {
                sums[j] += v;
            }
        }
        sums
    }

    /// Per-predicted-state accuracy: diagonal over column sum. A state
    /// never predicted reads as 0.
    pub fn per_predicted_accuracy(&self) -> [f64; VIEWPOINT_STATES] {
        let cols = self.column_sums();
        let mut acc = [0.0; VIEWPOINT_STATES];
        for j in 0..VIEWPOINT_STATES {
            if cols[j] > 0 {
                acc[j] = self.counts[j][j] as f64 / cols[j] as f64;
            }
        }
        acc
    }
}

pub fn confusion_matrix(true_states: &[usize], predicted: &[usize]) -> Result<ConfusionMatrix> {
    if true_states.len() != predicted.len() {
        return Err(Error::Dimension(format!(
            "{} true states vs {} predictions",
            true_states.len(),
            predicted.len()
        )));
    }
    let mut counts = [[0usize; VIEWPOINT_STATES]; VIEWPOINT_STATES];
    for (&t, &p) in true_states.iter().zip(predicted) {
        if t >= VIEWPOINT_STATES || p >= VIEWPOINT_STATES {
            return Err(Error::Encoding(format!(
                "viewpoint state out of range: ({t}, {p})"
            )));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

// --- on-disk formats -------------------------------------------------

/// One line per box: image-id, x, y, w, h, score (or visibility for
/// ground truth), tab-separated.
pub fn format_detections(dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            d.image_id, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.score
        );
    }
    out
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    std::fs::write(path, format_detections(dets))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn parse_box_line(path: &Path, lineno: usize, line: &str) -> Result<(String, BBox, f64)> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 6 {
        return Err(Error::Format {
            path: path.display().to_string(),
            line: lineno,
            message: format!("want 6 tab-separated fields, got {}", fields.len()),
        });
    }
    let mut nums = [0.0f64; 5];
    for (slot, raw) in nums.iter_mut().zip(&fields[1..]) {
        *slot = raw.parse().map_err(|_| Error::Format {
            path: path.display().to_string(),
            line: lineno,
            message: format!("bad number {raw:?}"),
        })?;
    }
    if !(nums[2] > 0.0 && nums[3] > 0.0) || !nums[4].is_finite() {
        return Err(Error::Format {
            path: path.display().to_string(),
            line: lineno,
            message: "box must have positive size and finite score".into(),
        });
    }
    Ok((
        fields[0].to_string(),
        BBox::new(nums[0], nums[1], nums[2], nums[3]),
        nums[4],
    ))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut dets = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (image_id, bbox, score) = parse_box_line(path, i + 1, line)?;
        dets.push(Detection {
            image_id,
            bbox,
            score,
        });
    }
    Ok(dets)
}

pub fn write_ground_truth(path: &Path, gts: &[GroundTruth]) -> Result<()> {
    let mut out = String::new();
    for g in gts {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            g.image_id, g.bbox.x, g.bbox.y, g.bbox.w, g.bbox.h, g.visibility
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut gts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (image_id, bbox, visibility) = parse_box_line(path, i + 1, line)?;
        gts.push(GroundTruth {
            image_id,
            bbox,
            visibility,
        });
    }
    Ok(gts)
}

/// Curve CSV: swept operating points plus the nine reference reads used
/// for the log average. `kind` distinguishes the two row families so a
/// plotting tool can filter either.
pub fn format_curve_csv(curve: &MissRateCurve) -> String {
    let mut out = String::from("kind,threshold,fppi,miss_rate\n");
    for p in &curve.points {
        let _ = writeln!(out, "point,{},{},{}", p.threshold, p.fppi, p.miss_rate);
    }
    for r in lamr_reference_points() {
        let mut miss = 1.0;
        for p in &curve.points {
            if p.fppi <= r {
                miss = p.miss_rate;
            } else {
                break;
            }
        }
        let _ = writeln!(out, "ref,,{},{}", r, miss.max(1e-6));
    }
    out
}

pub fn write_curve_csv(path: &Path, curve: &MissRateCurve) -> Result<()> {
    std::fs::write(path, format_curve_csv(curve))
        .map_err(|e| Error::io(path.display().to_string(), e))
}
