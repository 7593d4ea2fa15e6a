//! Energy-ascent trajectories and their feature tokens.

use crate::energy::{EnergyMap, Seed, SeedSet};
use crate::error::{Error, Result};
use crate::ops::{bilinear_sample, bilinear_taps};
use crate::tensor::{Point2D, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceConfig {
    /// Step length in pixels.
    pub eta: f64,
    /// Gradient-norm floor; also the stabilizer of the normalized step.
    pub epsilon: f64,
    pub max_len: usize,
    /// Stop once the energy drops below this fraction of the seed energy.
    pub decay_ratio: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            eta: 1.0,
            epsilon: 1e-6,
            max_len: 16,
            decay_ratio: 0.2,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("trace.eta must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("trace.epsilon must be positive"));
        }
        if self.max_len == 0 {
            return Err(Error::config("trace.max_len must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.decay_ratio) {
            return Err(Error::config("trace.decay_ratio must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Ordered positions and the stage features sampled along them.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T = f32> {
    pub stage: usize,
    pub seed: Seed,
    pub points: Vec<Point2D>,
    /// `L×C_l`.
    pub tokens: Tensor<T>,
    /// Energy at each point.
    pub energies: Vec<f64>,
}

impl<T> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn sample_scalar<T: Scalar>(map: &Tensor<T>, h: usize, w: usize, p: Point2D) -> T {
    let d = map.data();
    bilinear_taps::<T>(p, h, w).iter().map(|&(i, wt)| d[i] * wt).sum()
}

/// Follows the interpolated energy gradient from `seed`.
///
/// Each step moves `eta` pixels along the normalized gradient, clamped to
/// the map. The walk ends after `max_len` points, when the gradient
/// vanishes, when the next energy falls below `decay_ratio` of the seed
/// energy, or when the step would lose more than `eta·epsilon` energy
/// (overshooting a ridge). Rejected points are not recorded.
pub fn trace<T: Scalar>(emap: &EnergyMap<T>, grad: &Tensor<T>, seed: Point2D, cfg: &TraceConfig) -> Result<Vec<Point2D>> {
    cfg.validate()?;
    let (h, w) = (emap.height(), emap.width());
    grad.expect_shape(&[2, h, w])?;
    let (gx_map, gy_map) = grad.data().split_at(h * w);
    let clamp = |p: Point2D| Point2D::new(p.x.clamp(0.0, (w - 1) as f64), p.y.clamp(0.0, (h - 1) as f64));
    let energy_at = |p: Point2D| sample_scalar(&emap.values, h, w, p);
    let interp = |plane: &[T], p: Point2D| -> T { bilinear_taps::<T>(p, h, w).iter().map(|&(i, wt)| plane[i] * wt).sum() };

    let eta = T::of(cfg.eta);
    let eps = T::of(cfg.epsilon);
    let p1 = clamp(seed);
    let e1 = energy_at(p1);
    let floor = T::of(cfg.decay_ratio) * e1;
    let mut points = vec![p1];
    let mut e_cur = e1;
    while points.len() < cfg.max_len {
        let p = *points.last().expect("non-empty");
        let gx = interp(gx_map, p);
        let gy = interp(gy_map, p);
        let norm = (gx * gx + gy * gy).sqrt();
        if norm < eps {
            break;
        }
        let scale = eta / (norm + eps);
        let px = T::of(p.x) + scale * gx;
        let py = T::of(p.y) + scale * gy;
        let next = clamp(Point2D::new(px.to_f64().unwrap_or(p.x), py.to_f64().unwrap_or(p.y)));
        let e_next = energy_at(next);
        if e_next < floor || e_next < e_cur - eta * eps {
            break;
        }
        points.push(next);
        e_cur = e_next;
    }
    Ok(points)
}

/// Bilinear samples of a `C×H×W` map along `points`: `L×C`.
pub fn sample_tokens<T: Scalar>(feature: &Tensor<T>, points: &[Point2D]) -> Result<Tensor<T>> {
    let (c, _, _) = feature.dims3()?;
    if points.is_empty() {
        return Err(Error::shape("cannot sample an empty trajectory"));
    }
    let mut data = Vec::with_capacity(points.len() * c);
    for &p in points {
        data.extend_from_slice(bilinear_sample(feature, p)?.data());
    }
    Tensor::new(&[points.len(), c], data)
}

/// Traces every seed and samples its tokens from `feature`.
pub fn extract_all<T: Scalar>(
    feature: &Tensor<T>,
    emap: &EnergyMap<T>,
    grad: &Tensor<T>,
    seeds: &SeedSet,
    cfg: &TraceConfig,
) -> Result<Vec<Trajectory<T>>> {
    let (_, h, w) = feature.dims3()?;
    if (h, w) != (emap.height(), emap.width()) {
        return Err(Error::shape(format!(
            "feature is {h}×{w} but energy map is {}×{}",
            emap.height(),
            emap.width()
        )));
    }
    seeds
        .seeds
        .iter()
        .map(|s| {
            let points = trace(emap, grad, Point2D::new(s.x as f64, s.y as f64), cfg)?;
            let energies = points
                .iter()
                .map(|&p| sample_scalar(&emap.values, h, w, p).to_f64().unwrap_or(0.0))
                .collect();
            Ok(Trajectory {
                stage: emap.stage,
                seed: *s,
                tokens: sample_tokens(feature, &points)?,
                points,
                energies,
            })
        })
        .collect()
}

/// One parsed row of a trajectory table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub stage: usize,
    pub seed_id: usize,
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub energy: f64,
}

pub const TRAJECTORY_COLUMNS: &str = "stage\tseed_id\tj\tx\ty\tE";

/// Whitespace-separated table with one row per trajectory point, preceded by
/// a column header line. Coordinates are in stage pixels.
pub fn format_trajectories<T>(trajectories: &[Trajectory<T>]) -> String {
    let mut out = format!("{TRAJECTORY_COLUMNS}\n");
    for (id, t) in trajectories.iter().enumerate() {
        for (j, (p, e)) in t.points.iter().zip(&t.energies).enumerate() {
            out.push_str(&format!("{}\t{id}\t{j}\t{:.6}\t{:.6}\t{:.6e}\n", t.stage, p.x, p.y, e));
        }
    }
    out
}

/// Parses [`format_trajectories`] output; `#` lines and the header are
/// skipped.
pub fn parse_trajectories(text: &str) -> Result<Vec<TrajectoryRow>> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() || line.starts_with("stage") {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Data(format!("trajectory line {}: `{line}`", ln + 1));
        if f.len() != 6 {
            return Err(bad());
        }
        let u = |i: usize| f[i].parse::<usize>().map_err(|_| bad());
        let x = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        rows.push(TrajectoryRow {
            stage: u(0)?,
            seed_id: u(1)?,
            step: u(2)?,
            x: x(3)?,
            y: x(4)?,
            energy: x(5)?,
        });
    }
    Ok(rows)
}
