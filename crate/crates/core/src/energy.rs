//! Perturbation energy maps and trajectory seeds.
//!
//! `E(x, y) = Σ_c |F_c(x+1, y) − F_c(x−1, y)| + |F_c(x, y+1) − F_c(x, y−1)|`
//! with replicate boundaries, so a constant map has zero energy everywhere,
//! including the border.

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Scalar energy field of one encoder stage.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyMap<T = f32> {
    /// `H×W`, non-negative.
    pub values: Tensor<T>,
    pub stage: usize,
}

impl<T: Scalar> EnergyMap<T> {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.values.data()[y * self.width() + x]
    }

    pub fn max(&self) -> T {
        self.values.data().iter().fold(T::zero(), |m, &v| m.max(v))
    }
}

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Neighbour indices `(x-1, x+1, y-1, y+1)` with replicate clamping.
#[inline]
fn neighbours(x: usize, y: usize, w: usize, h: usize) -> (usize, usize, usize, usize) {
    (
        clamp_idx(x as isize - 1, w),
        clamp_idx(x as isize + 1, w),
        clamp_idx(y as isize - 1, h),
        clamp_idx(y as isize + 1, h),
    )
}

fn energy_values<T: Scalar>(feature: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = feature.dims3()?;
    let d = feature.data();
    let mut out = vec![T::zero(); h * w];
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (xm, xp, ym, yp) = neighbours(x, y, w, h);
                out[y * w + x] += (plane[y * w + xp] - plane[y * w + xm]).abs()
                    + (plane[yp * w + x] - plane[ym * w + x]).abs();
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w], out))
}

pub fn compute_energy<T: Scalar>(feature: &Tensor<T>, stage: usize) -> Result<EnergyMap<T>> {
    Ok(EnergyMap {
        values: energy_values(feature)?,
        stage,
    })
}

/// Taped energy of a `C×H×W` map; the result is `1×H×W`. The absolute value
/// uses the subgradient `sign(0) = 0`.
pub fn energy_var<T: Scalar>(tape: &mut Tape<T>, feature: Var) -> Result<Var> {
    let e = energy_values(tape.value(feature))?;
    let (h, w) = (e.shape()[0], e.shape()[1]);
    let e = e.reshape(&[1, h, w])?;
    Ok(tape.push(e, &[feature], EnergyOp))
}

struct EnergyOp;

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Scalar> Backward<T> for EnergyOp {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let f = inputs[0];
        let (c, h, w) = f.dims3().expect("validated in forward");
        let mut gf = Tensor::zeros(f.shape());
        let gd = gf.data_mut();
        let fd = f.data();
        let gg = g.data();
        for ch in 0..c {
            let off = ch * h * w;
            for y in 0..h {
                for x in 0..w {
                    let gv = gg[y * w + x];
                    let (xm, xp, ym, yp) = neighbours(x, y, w, h);
                    let sx = sign(fd[off + y * w + xp] - fd[off + y * w + xm]) * gv;
                    gd[off + y * w + xp] += sx;
                    gd[off + y * w + xm] -= sx;
                    let sy = sign(fd[off + yp * w + x] - fd[off + ym * w + x]) * gv;
                    gd[off + yp * w + x] += sy;
                    gd[off + ym * w + x] -= sy;
                }
            }
        }
        vec![Some(gf)]
    }
}

/// Spatial derivative estimator used to steer trajectories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GradientMode {
    #[default]
    Central,
    Sobel,
}

/// `2×H×W` field: channel 0 is ∂E/∂x (columns), channel 1 is ∂E/∂y (rows).
pub fn energy_gradient<T: Scalar>(emap: &EnergyMap<T>, mode: GradientMode) -> Tensor<T> {
    let (h, w) = (emap.height(), emap.width());
    let e = emap.values.data();
    let at = |x: isize, y: isize| e[clamp_idx(y, h) * w + clamp_idx(x, w)];
    let mut out = vec![T::zero(); 2 * h * w];
    let half = T::of(0.5);
    let eighth = T::of(0.125);
    let two = T::of(2.0);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (gx, gy) = match mode {
                GradientMode::Central => ((at(x + 1, y) - at(x - 1, y)) * half, (at(x, y + 1) - at(x, y - 1)) * half),
                GradientMode::Sobel => {
                    let gx = (at(x + 1, y - 1) + two * at(x + 1, y) + at(x + 1, y + 1))
                        - (at(x - 1, y - 1) + two * at(x - 1, y) + at(x - 1, y + 1));
                    let gy = (at(x - 1, y + 1) + two * at(x, y + 1) + at(x + 1, y + 1))
                        - (at(x - 1, y - 1) + two * at(x, y - 1) + at(x + 1, y - 1));
                    (gx * eighth, gy * eighth)
                }
            };
            let i = y as usize * w + x as usize;
            out[i] = gx;
            out[h * w + i] = gy;
        }
    }
    Tensor::from_parts(vec![2, h, w], out)
}

/// Seed selection parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedConfig {
    pub k_max: usize,
    pub min_energy_frac: f64,
    pub nms_radius: usize,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig {
            k_max: 8,
            min_energy_frac: 0.3,
            nms_radius: 2,
        }
    }
}

impl SeedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::config("seeds.k_max must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.min_energy_frac) {
            return Err(Error::config("seeds.min_energy_frac must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Seed {
    pub x: usize,
    pub y: usize,
    pub energy: f64,
}

/// Seeds sorted by energy (descending, ties in row-major order).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeedSet {
    pub seeds: Vec<Seed>,
}

impl SeedSet {
    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }
}

/// Local-maximum candidates: a pixel is kept when it is `>=` every in-bounds
/// 8-neighbour and `>` at least one of them. Equal-valued candidates that
/// touch form one plateau edge and are represented by their first pixel in
/// row-major order.
fn local_maxima<T: Scalar>(emap: &EnergyMap<T>) -> Vec<(usize, usize)> {
    let (h, w) = (emap.height(), emap.width());
    let e = |x: usize, y: usize| emap.get(x, y);
    let neigh = |x: usize, y: usize| {
        let mut v = Vec::with_capacity(8);
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if (dx, dy) != (0, 0) && nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    v.push((nx as usize, ny as usize));
                }
            }
        }
        v
    };
    let mut is_candidate = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = e(x, y);
            let ns = neigh(x, y);
            let ge_all = ns.iter().all(|&(nx, ny)| v >= e(nx, ny));
            let gt_one = ns.iter().any(|&(nx, ny)| v > e(nx, ny));
            is_candidate[y * w + x] = ge_all && gt_one;
        }
    }
    let mut visited = vec![false; h * w];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !is_candidate[y * w + x] || visited[y * w + x] {
                continue;
            }
            out.push((x, y));
            let v = e(x, y);
            let mut stack = vec![(x, y)];
            visited[y * w + x] = true;
            while let Some((cx, cy)) = stack.pop() {
                for (nx, ny) in neigh(cx, cy) {
                    let i = ny * w + nx;
                    if is_candidate[i] && !visited[i] && e(nx, ny) == v {
                        visited[i] = true;
                        stack.push((nx, ny));
                    }
                }
            }
        }
    }
    out
}

pub fn select_seeds<T: Scalar>(emap: &EnergyMap<T>, cfg: &SeedConfig) -> Result<SeedSet> {
    cfg.validate()?;
    let max = emap.max();
    if max <= T::zero() {
        return Ok(SeedSet::default());
    }
    let threshold = max * T::of(cfg.min_energy_frac);
    let mut cands: Vec<(usize, usize)> = local_maxima(emap)
        .into_iter()
        .filter(|&(x, y)| emap.get(x, y) >= threshold)
        .collect();
    // stable sort keeps row-major order among equal energies
    cands.sort_by(|a, b| {
        emap.get(b.0, b.1)
            .partial_cmp(&emap.get(a.0, a.1))
            .expect("finite energy")
    });
    let r = cfg.nms_radius;
    let mut seeds: Vec<Seed> = Vec::new();
    for (x, y) in cands {
        if seeds.len() == cfg.k_max {
            break;
        }
        let suppressed = seeds.iter().any(|s| s.x.abs_diff(x).max(s.y.abs_diff(y)) <= r);
        if !suppressed {
            seeds.push(Seed {
                x,
                y,
                energy: emap.get(x, y).to_f64().unwrap_or(0.0),
            });
        }
    }
    Ok(SeedSet { seeds })
}
