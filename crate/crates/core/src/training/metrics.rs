//! Pixel and target-level detection metrics.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Centroid distance under which a predicted component detects a target.
pub const PD_MAX_DISTANCE: f64 = 3.0;
pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!("mask data has {} entries for {height}×{width}", data.len())));
        }
        Ok(BinaryMask { height, width, data })
    }

    /// `values > threshold` of a `1×H×W` or `H×W` map (for probabilities)
    /// or of a binary mask with threshold 0.5.
    pub fn threshold(t: &Tensor<f32>, threshold: f32) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [h, w] | [1, h, w] => (h, w),
            _ => return Err(Error::shape(format!("expected a single-plane map, got {:?}", t.shape()))),
        };
        Ok(BinaryMask {
            height: h,
            width: w,
            data: t.data().iter().map(|&v| v > threshold).collect(),
        })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// 8-connected component.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub pixels: Vec<usize>,
    /// `(x, y)` mean of the pixel coordinates.
    pub centroid: (f64, f64),
}

/// Components in order of their first pixel (row-major).
pub fn components(mask: &BinaryMask) -> Vec<Component> {
    let (h, w) = (mask.height, mask.width);
    let mut label = vec![usize::MAX; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !mask.data[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut stack = vec![start];
        label[start] = id;
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (x, y) = ((p % w) as i64, (p / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.data[q] && label[q] == usize::MAX {
                        label[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        pixels.sort_unstable();
        let n = pixels.len() as f64;
        let cx = pixels.iter().map(|&p| (p % w) as f64).sum::<f64>() / n;
        let cy = pixels.iter().map(|&p| (p / w) as f64).sum::<f64>() / n;
        out.push(Component {
            pixels,
            centroid: (cx, cy),
        });
    }
    out
}

/// Additive confusion counts; metrics are derived from sums over images.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub pixels: usize,
    pub targets: usize,
    pub detected: usize,
    /// Sum of per-target IoU over all ground-truth components.
    pub target_iou_sum: f64,
    /// Images with neither ground truth nor prediction.
    pub empty_images: usize,
    pub images: usize,
}

impl MetricCounts {
    pub fn merge(&mut self, o: &MetricCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.pixels += o.pixels;
        self.targets += o.targets;
        self.detected += o.detected;
        self.target_iou_sum += o.target_iou_sum;
        self.empty_images += o.empty_images;
        self.images += o.images;
    }

    pub fn report(&self) -> MetricReport {
        let union = self.tp + self.fp + self.fn_;
        let iou = if union == 0 { 1.0 } else { self.tp as f64 / union as f64 };
        let niou = if self.targets == 0 { iou } else { self.target_iou_sum / self.targets as f64 };
        let pd = if self.targets == 0 { 1.0 } else { self.detected as f64 / self.targets as f64 };
        let fa = if self.pixels == 0 { 0.0 } else { self.fp as f64 / self.pixels as f64 };
        MetricReport {
            iou,
            niou,
            pd,
            fa,
            counts: *self,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub iou: f64,
    pub niou: f64,
    pub pd: f64,
    pub fa: f64,
    pub counts: MetricCounts,
}

impl MetricReport {
    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let c = &self.counts;
        format!(
            "iou={:.6}\nniou={:.6}\npd={:.6}\nfa={:.8}\ntp={}\nfp={}\nfn={}\npixels={}\ntargets={}\ndetected={}\nimages={}\n",
            self.iou, self.niou, self.pd, self.fa, c.tp, c.fp, c.fn_, c.pixels, c.targets, c.detected, c.images
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "IoU {:.2}%  nIoU {:.2}%  Pd {:.2}% ({}/{})  Fa {:.3e} ({} px)",
            100.0 * self.iou,
            100.0 * self.niou,
            100.0 * self.pd,
            self.counts.detected,
            self.counts.targets,
            self.fa,
            self.counts.fp
        )
    }
}

/// Counts for one image pair.
pub fn image_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<MetricCounts> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(format!(
            "prediction is {}×{} but ground truth is {}×{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut c = MetricCounts {
        pixels: pred.data.len(),
        images: 1,
        ..Default::default()
    };
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            _ => {}
        }
    }
    if c.tp + c.fp + c.fn_ == 0 {
        c.empty_images = 1;
    }
    let gcomp = components(gt);
    let pcomp = components(pred);
    let mut pred_label = vec![usize::MAX; pred.data.len()];
    for (k, pc) in pcomp.iter().enumerate() {
        for &p in &pc.pixels {
            pred_label[p] = k;
        }
    }
    c.targets = gcomp.len();
    for g in &gcomp {
        let mut touching: Vec<usize> = g.pixels.iter().map(|&p| pred_label[p]).filter(|&l| l != usize::MAX).collect();
        touching.sort_unstable();
        touching.dedup();
        if !touching.is_empty() {
            let inter = g.pixels.iter().filter(|&&p| pred.data[p]).count();
            let pred_area: usize = touching.iter().map(|&k| pcomp[k].pixels.len()).sum();
            c.target_iou_sum += inter as f64 / (g.pixels.len() + pred_area - inter) as f64;
        }
        let hit = pcomp.iter().any(|pc| {
            let (dx, dy) = (pc.centroid.0 - g.centroid.0, pc.centroid.1 - g.centroid.1);
            (dx * dx + dy * dy).sqrt() <= PD_MAX_DISTANCE
        });
        if hit {
            c.detected += 1;
        }
    }
    Ok(c)
}

pub fn compute_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<MetricReport> {
    Ok(image_counts(pred, gt)?.report())
}

/// Default ROC thresholds `0.05, 0.10, …, 0.95`.
pub fn roc_thresholds() -> Vec<f32> {
    (1..=19).map(|k| k as f32 * 0.05).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f32,
    pub fpr: f64,
    pub tpr: f64,
}

/// Pixel-level ROC over a set of `(probability map, ground truth)` pairs.
pub fn roc_curve(pairs: &[(Tensor<f32>, BinaryMask)], thresholds: &[f32]) -> Result<Vec<RocPoint>> {
    let mut out = Vec::with_capacity(thresholds.len());
    for &th in thresholds {
        let (mut tp, mut fp, mut pos, mut neg) = (0usize, 0usize, 0usize, 0usize);
        for (prob, gt) in pairs {
            if prob.len() != gt.data.len() {
                return Err(Error::shape("probability map and mask sizes differ"));
            }
            for (&p, &g) in prob.data().iter().zip(&gt.data) {
                let on = p > th;
                if g {
                    pos += 1;
                    tp += on as usize;
                } else {
                    neg += 1;
                    fp += on as usize;
                }
            }
        }
        out.push(RocPoint {
            threshold: th,
            fpr: if neg == 0 { 0.0 } else { fp as f64 / neg as f64 },
            tpr: if pos == 0 { 0.0 } else { tp as f64 / pos as f64 },
        });
    }
    Ok(out)
}
