use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities of 1, 2 and 3 targets per random scene.
pub const TARGET_COUNT_WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];

const RADIUS_RANGE: (f64, f64) = (1.5, 4.0);
const BACKGROUND_RANGE: (f32, f32) = (0.05, 0.5);
const MAX_ATTEMPTS: usize = 64;

/// Gaussian target centred on a pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub x: usize,
    pub y: usize,
    /// Half-peak radius in pixels.
    pub radius: f64,
    /// Amplitude above the background.
    pub peak: f64,
}

impl Target {
    pub fn sigma(&self) -> f64 {
        self.radius / (2.0 * std::f64::consts::LN_2).sqrt()
    }
}

/// Broad bright clutter patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Linear ramp strengths along x and y, before rescaling.
    pub gradient: (f64, f64),
    /// Amplitude of the two-octave value noise.
    pub texture: f64,
    pub clutter: Vec<Blob>,
    pub targets: Vec<Target>,
    /// Standard deviation of per-pixel sensor noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::config(format!("scene size {}×{} is below 8×8", self.height, self.width)));
        }
        for (k, t) in self.targets.iter().enumerate() {
            let r = t.radius.ceil() as usize;
            if !(t.radius > 0.0) || t.x < r || t.y < r || t.x + r >= self.width || t.y + r >= self.height {
                return Err(Error::config(format!(
                    "target {k} at ({}, {}) with radius {} leaves the {}×{} image",
                    t.x, t.y, t.radius, self.width, self.height
                )));
            }
            if !(t.peak > 0.0) {
                return Err(Error::config(format!("target {k} has non-positive peak {}", t.peak)));
            }
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::config("noise_level must be non-negative"));
        }
        Ok(())
    }
}

/// Smoothly interpolated lattice noise in `[-1, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let fy = y as f64 / cell as f64;
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (smooth(fx - x0 as f64), smooth(fy - y0 as f64));
            let at = |gx: usize, gy: usize| lattice[gy * gw + gx];
            let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
            let bottom = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn render(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<f32>) {
    let (h, w) = (spec.height, spec.width);
    let coarse = value_noise(rng, h, w, (w / 4).max(2));
    let fine = value_noise(rng, h, w, (w / 8).max(2));
    let mut bg = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut v = spec.gradient.0 * x as f64 / w as f64 + spec.gradient.1 * y as f64 / h as f64;
            v += spec.texture * (coarse[i] + 0.5 * fine[i]);
            for b in &spec.clutter {
                let d2 = (x as f64 - b.x).powi(2) + (y as f64 - b.y).powi(2);
                v += b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
            }
            bg[i] = v;
        }
    }
    let (lo, hi) = bg.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-9);
    let (blo, bhi) = (BACKGROUND_RANGE.0 as f64, BACKGROUND_RANGE.1 as f64);
    let noise = Normal::new(0.0, spec.noise_level.max(0.0)).expect("finite std");
    let mut image = Vec::with_capacity(h * w);
    let mut mask = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut v = blo + (bg[i] - lo) / span * (bhi - blo) + noise.sample(rng);
            for t in &spec.targets {
                let d2 = (x as f64 - t.x as f64).powi(2) + (y as f64 - t.y as f64).powi(2);
                v += t.peak * (-d2 / (2.0 * t.sigma().powi(2))).exp();
                if d2 <= t.radius * t.radius {
                    mask[i] = 1.0;
                }
            }
            image.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    (image, mask)
}

fn strict_maxima(image: &[f32], h: usize, w: usize, targets: &[Target]) -> bool {
    targets.iter().all(|t| {
        let c = image[t.y * w + t.x];
        (-1i64..=1).all(|dy| {
            (-1i64..=1).all(|dx| {
                let (nx, ny) = (t.x as i64 + dx, t.y as i64 + dy);
                (dx == 0 && dy == 0) || nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 || image[ny as usize * w + nx as usize] < c
            })
        })
    })
}

/// Renders a scene. Sensor noise is redrawn (from the same seed stream)
/// until every target centre is a strict local maximum.
pub fn generate(spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..MAX_ATTEMPTS {
        let (image, mask) = render(spec, &mut rng);
        if strict_maxima(&image, h, w, &spec.targets) {
            let gray = Tensor::new(&[1, h, w], image)?;
            let mut s = Sample::from_gray(&gray, Tensor::new(&[1, h, w], mask)?)?;
            s.spec = Some(spec.clone());
            return Ok(s);
        }
    }
    Err(Error::Data(format!(
        "scene {} has a target that is never a strict local maximum (overlapping targets?)",
        spec.seed
    )))
}

/// Random scene of the given size. `difficulty` in `[0, 1]` adds clutter
/// and lowers the target contrast (0.3 at difficulty 0.5).
pub fn random_spec(size: usize, difficulty: f64, seed: u64) -> Result<SceneSpec> {
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::config(format!("difficulty {difficulty} is outside [0, 1]")));
    }
    if size < 16 {
        return Err(Error::config(format!("scene size {size} is below 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ce4e);
    let u: f64 = rng.random();
    let count = if u < TARGET_COUNT_WEIGHTS[0] {
        1
    } else if u < TARGET_COUNT_WEIGHTS[0] + TARGET_COUNT_WEIGHTS[1] {
        2
    } else {
        3
    };
    let margin = 0.3 * (1.5 - difficulty);
    let mut targets: Vec<Target> = Vec::with_capacity(count);
    while targets.len() < count {
        let radius = rng.random_range(RADIUS_RANGE.0..RADIUS_RANGE.1);
        let r = radius.ceil() as usize + 1;
        let t = Target {
            x: rng.random_range(r..size - r),
            y: rng.random_range(r..size - r),
            radius,
            peak: rng.random_range(margin..margin + 0.2),
        };
        // keep targets separable
        let far = targets.iter().all(|o| {
            let d = ((o.x as f64 - t.x as f64).powi(2) + (o.y as f64 - t.y as f64).powi(2)).sqrt();
            d > 2.0 * (o.radius + t.radius) + 2.0
        });
        if far {
            targets.push(t);
        }
    }
    let n_clutter = (difficulty * 6.0 + rng.random::<f64>()).floor() as usize;
    let s = size as f64;
    let clutter = (0..n_clutter)
        .map(|_| Blob {
            x: rng.random_range(0.0..s),
            y: rng.random_range(0.0..s),
            sigma: rng.random_range(0.06 * s..0.14 * s),
            amplitude: rng.random_range(0.2..0.6),
        })
        .collect();
    Ok(SceneSpec {
        height: size,
        width: size,
        gradient: (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        texture: 0.15 + 0.25 * difficulty,
        clutter,
        targets,
        noise_level: 0.005 + 0.01 * difficulty,
        seed: rng.random(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// `count` random scenes split 80/20 (train size rounded down).
pub fn make_dataset(count: usize, size: usize, difficulty: f64, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::config("dataset count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| rng.random()).collect();
    let mut samples = seeds
        .iter()
        .map(|&s| generate(&random_spec(size, difficulty, s)?))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    let n_train = count * 8 / 10;
    let mut slots: Vec<Option<Sample>> = samples.drain(..).map(Some).collect();
    let mut take = |i: usize| slots[i].take().expect("each index once");
    let train = order[..n_train].iter().map(|&i| take(i)).collect();
    let test = order[n_train..].iter().map(|&i| take(i)).collect();
    Ok(Dataset { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(size: usize, targets: Vec<Target>) -> SceneSpec {
        SceneSpec {
            height: size,
            width: size,
            gradient: (0.3, -0.2),
            texture: 0.2,
            clutter: vec![],
            targets,
            noise_level: 0.01,
            seed: 4,
        }
    }

    #[test]
    fn no_targets_gives_empty_mask() {
        let s = generate(&plain(32, vec![])).unwrap();
        assert!(s.mask.data().iter().all(|&v| v == 0.0));
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(s.image.shape(), &[3, 32, 32]);
    }

    #[test]
    fn radius_two_disk_has_thirteen_pixels() {
        let t = Target { x: 16, y: 16, radius: 2.0, peak: 0.4 };
        let s = generate(&plain(32, vec![t])).unwrap();
        // integer offsets with dx² + dy² <= 4
        let mut want = 0;
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                if dx * dx + dy * dy <= 4 {
                    want += 1;
                    assert_eq!(s.mask.at(&[0, (16 + dy) as usize, (16 + dx) as usize]), 1.0);
                }
            }
        }
        assert_eq!(want, 13);
        assert_eq!(s.mask.sum(), 13.0);
    }

    #[test]
    fn mask_is_the_half_peak_set() {
        let t = Target { x: 12, y: 9, radius: 3.3, peak: 0.5 };
        let s = generate(&plain(24, vec![t])).unwrap();
        for y in 0..24 {
            for x in 0..24 {
                let d2 = (x as f64 - 12.0).powi(2) + (y as f64 - 9.0).powi(2);
                let profile = (-d2 / (2.0 * t.sigma().powi(2))).exp();
                assert_eq!(s.mask.at(&[0, y, x]) == 1.0, profile >= 0.5 - 1e-12, "({x}, {y})");
            }
        }
    }

    #[test]
    fn same_seed_same_sample() {
        let spec = random_spec(64, 0.5, 11).unwrap();
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        assert_eq!(make_dataset(5, 32, 0.5, 2).unwrap(), make_dataset(5, 32, 0.5, 2).unwrap());
    }

    #[test]
    fn out_of_bounds_target_is_an_error() {
        let t = Target { x: 1, y: 10, radius: 2.0, peak: 0.4 };
        assert!(matches!(generate(&plain(32, vec![t])), Err(Error::Config(_))));
        assert!(random_spec(64, 1.5, 0).is_err());
    }

    #[test]
    fn split_is_eighty_twenty_and_disjoint() {
        let d = make_dataset(10, 32, 0.5, 3).unwrap();
        assert_eq!((d.train.len(), d.test.len()), (8, 2));
        let seeds: std::collections::BTreeSet<u64> = d.train.iter().chain(&d.test).map(|s| s.spec.as_ref().unwrap().seed).collect();
        assert_eq!(seeds.len(), 10);
    }

    #[test]
    fn target_count_histogram() {
        let mut hist = [0usize; 3];
        for s in 0..1000u64 {
            hist[random_spec(64, 0.5, s).unwrap().targets.len() - 1] += 1;
        }
        // binomial standard deviation is at most ~16 scenes
        for (k, &w) in TARGET_COUNT_WEIGHTS.iter().enumerate() {
            assert!((hist[k] as f64 - 1000.0 * w).abs() < 50.0, "{hist:?}");
        }
    }

    #[test]
    fn target_centres_are_strict_maxima() {
        for seed in 0..100u64 {
            let spec = random_spec(64, seed as f64 / 100.0, seed).unwrap();
            let s = generate(&spec).unwrap();
            let g = s.gray();
            assert!(strict_maxima(g.data(), 64, 64, &spec.targets), "scene {seed}");
        }
    }
}
