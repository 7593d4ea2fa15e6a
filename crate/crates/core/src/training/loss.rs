//! Segmentation loss (BCE + Dice) and the auxiliary response loss.

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::sigmoid_scalar;
use crate::tensor::{Scalar, Tensor};

/// Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1.0;
/// Probability clamp of the response loss.
pub const PROB_CLAMP: f64 = 1e-7;

fn check_target<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!("prediction {:?} and target {:?} differ", pred.shape(), target.shape())));
    }
    if target.data().iter().any(|&t| t != T::zero() && t != T::one()) {
        return Err(Error::shape("target mask must be binary"));
    }
    Ok(())
}

fn softplus<T: Scalar>(z: T) -> T {
    // log(1 + e^z) without overflow
    z.max(T::zero()) + (T::one() + (-z.abs()).exp()).ln()
}

/// Mean binary cross-entropy on `sigmoid(logits)` plus `alpha` times the
/// Dice loss, the latter computed per image and averaged. Logits are
/// `N×1×H×W` (any shape with a leading batch axis works).
pub fn seg_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: &Tensor<T>, alpha: f64) -> Result<Var> {
    let z = tape.value(logits);
    check_target(z, target)?;
    let n = z.shape()[0].max(1);
    let per = z.len() / n;
    let total = T::of(z.len() as f64);
    let s = T::of(DICE_SMOOTH);
    let (zd, td) = (z.data(), target.data());
    let p: Vec<T> = zd.iter().map(|&v| sigmoid_scalar(v)).collect();
    let bce = zd.iter().zip(td).map(|(&v, &t)| softplus(v) - t * v).sum::<T>() / total;
    let mut dice = T::zero();
    let mut sums = Vec::with_capacity(n);
    for i in 0..n {
        let r = i * per..(i + 1) * per;
        let inter: T = p[r.clone()].iter().zip(&td[r.clone()]).map(|(&a, &b)| a * b).sum();
        let denom = p[r.clone()].iter().copied().sum::<T>() + td[r].iter().copied().sum::<T>() + s;
        dice += T::one() - (T::of(2.0) * inter + s) / denom;
        sums.push((inter, denom));
    }
    let a = T::of(alpha);
    let value = bce + a * dice / T::of(n as f64);
    let op = SegLossOp {
        target: target.clone(),
        probs: p,
        sums,
        per,
        alpha: a,
    };
    Ok(tape.push(Tensor::scalar(value), &[logits], op))
}

struct SegLossOp<T> {
    target: Tensor<T>,
    probs: Vec<T>,
    sums: Vec<(T, T)>,
    per: usize,
    alpha: T,
}

impl<T: Scalar> Backward<T> for SegLossOp<T> {
    fn backward(&self, g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let g = g.item();
        let total = T::of(self.probs.len() as f64);
        let n = T::of(self.sums.len() as f64);
        let two = T::of(2.0);
        let s = T::of(DICE_SMOOTH);
        let td = self.target.data();
        let grad: Vec<T> = (0..self.probs.len())
            .map(|k| {
                let (p, t) = (self.probs[k], td[k]);
                let (inter, denom) = self.sums[k / self.per];
                let d_dice_dp = -(two * t * denom - (two * inter + s)) / (denom * denom);
                g * ((p - t) / total + self.alpha * d_dice_dp * p * (T::one() - p) / n)
            })
            .collect();
        vec![Some(Tensor::from_parts(self.target.shape().to_vec(), grad))]
    }
}

/// Mean binary cross-entropy of probabilities clamped to
/// `[PROB_CLAMP, 1 − PROB_CLAMP]`; clamped entries pass no gradient.
pub fn pgm_loss<T: Scalar>(tape: &mut Tape<T>, response: Var, target: &Tensor<T>) -> Result<Var> {
    let r = tape.value(response);
    check_target(r, target)?;
    if r.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::shape("response must lie in [0, 1]"));
    }
    let (lo, hi) = (T::of(PROB_CLAMP), T::one() - T::of(PROB_CLAMP));
    let total = T::of(r.len() as f64);
    let value = r
        .data()
        .iter()
        .zip(target.data())
        .map(|(&v, &t)| {
            let c = v.max(lo).min(hi);
            -(t * c.ln() + (T::one() - t) * (T::one() - c).ln())
        })
        .sum::<T>()
        / total;
    let op = PgmLossOp { target: target.clone() };
    Ok(tape.push(Tensor::scalar(value), &[response], op))
}

struct PgmLossOp<T> {
    target: Tensor<T>,
}

impl<T: Scalar> Backward<T> for PgmLossOp<T> {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let g = g.item();
        let (lo, hi) = (T::of(PROB_CLAMP), T::one() - T::of(PROB_CLAMP));
        let total = T::of(self.target.len() as f64);
        let grad = inputs[0].zip_map(&self.target, |r, t| {
            if r < lo || r > hi {
                T::zero()
            } else {
                g * ((T::one() - t) / (T::one() - r) - t / r) / total
            }
        });
        vec![Some(grad.expect("shapes checked in forward"))]
    }
}

/// `seg + beta·pgm`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, seg: Var, pgm: Option<Var>, beta: f64) -> Result<Var> {
    match pgm {
        Some(p) => {
            let scaled = tape.scale(p, T::of(beta));
            tape.add(seg, scaled)
        }
        None => Ok(seg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, Coverage, FD_REL_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn value(f: impl FnOnce(&mut Tape<f64>) -> Var) -> f64 {
        let mut t = Tape::new();
        let v = f(&mut t);
        t.value(v).item()
    }

    fn fixture(seed: u64, shape: &[usize]) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::from_fn(shape, |_| rng.random_range(-3.0..3.0));
        let t = Tensor::from_fn(shape, |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        (z, t)
    }

    #[test]
    fn half_probability_gives_ln_two() {
        let z = Tensor::zeros(&[1, 1, 4, 4]);
        let t = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 2) as f64);
        let v = value(|tp| {
            let z = tp.constant(z.clone());
            seg_loss(tp, z, &t, 0.0).unwrap()
        });
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_perfect_prediction_is_near_zero() {
        let t = Tensor::from_fn(&[2, 1, 5, 5], |i| ((i / 3) % 2) as f64);
        let z = t.map(|v| if v > 0.5 { 40.0 } else { -40.0 });
        let v = value(|tp| {
            let z = tp.constant(z.clone());
            seg_loss(tp, z, &t, 0.5).unwrap()
        });
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn seg_loss_matches_per_pixel_oracle() {
        for seed in 0..5 {
            let (z, t) = fixture(seed, &[3, 1, 6, 5]);
            let got = value(|tp| {
                let zv = tp.constant(z.clone());
                seg_loss(tp, zv, &t, 0.7).unwrap()
            });
            let mut bce = 0.0;
            let mut dice = 0.0;
            for i in 0..3 {
                let (mut pt, mut ps, mut ts) = (0.0, 0.0, 0.0);
                for k in i * 30..(i + 1) * 30 {
                    let p = 1.0 / (1.0 + (-z.data()[k]).exp());
                    let y = t.data()[k];
                    bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                    pt += p * y;
                    ps += p;
                    ts += y;
                }
                dice += 1.0 - (2.0 * pt + 1.0) / (ps + ts + 1.0);
            }
            let want = bce / 90.0 + 0.7 * dice / 3.0;
            assert!((got - want).abs() <= 1e-5 * want.abs(), "{got} vs {want}");
        }
    }

    #[test]
    fn pgm_loss_oracle_and_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Tensor::from_fn(&[1, 4, 4], |_| rng.random_range(0.0..1.0));
        let t = Tensor::from_fn(&[1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
        let got = value(|tp| {
            let rv = tp.constant(r.clone());
            pgm_loss(tp, rv, &t).unwrap()
        });
        let want: f64 = r
            .data()
            .iter()
            .zip(t.data())
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / 16.0;
        assert!((got - want).abs() < 1e-10);
        for (resp, mask) in [(t.clone(), t.clone()), (Tensor::zeros(&[1, 4, 4]), Tensor::zeros(&[1, 4, 4]))] {
            let v = value(|tp| {
                let rv = tp.constant(resp);
                pgm_loss(tp, rv, &mask).unwrap()
            });
            assert!(v >= 0.0 && v < 2e-7, "{v}");
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tp = Tape::<f64>::new();
        let s = tp.constant(Tensor::scalar(0.8));
        let p = tp.constant(Tensor::scalar(2.5));
        let t = total_loss(&mut tp, s, Some(p), 0.1).unwrap();
        assert!((tp.value(t).item() - 1.05).abs() < 1e-15);
        let t0 = total_loss(&mut tp, s, Some(p), 0.0).unwrap();
        assert_eq!(tp.value(t0).item(), 0.8);
        assert_eq!(total_loss(&mut tp, s, None, 0.1).unwrap(), s);
    }

    #[test]
    fn loss_gradients() {
        for seed in 0..5 {
            let (z, t) = fixture(seed + 10, &[2, 1, 4, 3 + seed as usize]);
            let r = check(&[("z", z.clone())], |tp, v| seg_loss(tp, v[0], &t, 0.5), Coverage::All, seed).unwrap();
            assert!(r.passed(FD_REL_TOL), "{r:?}");
            let probs = z.map(|v| 0.05 + 0.9 / (1.0 + (-v).exp()));
            let r = check(&[("r", probs)], |tp, v| pgm_loss(tp, v[0], &t), Coverage::All, seed).unwrap();
            assert!(r.passed(FD_REL_TOL), "{r:?}");
        }
    }

    #[test]
    fn total_gradient_is_linear_in_beta() {
        // d total / d beta by finite differences equals the pgm value, and the
        // gradient decomposes into seg + beta·pgm
        let (z, t) = fixture(1, &[1, 1, 4, 4]);
        let r = z.map(|v| 0.1 + 0.8 / (1.0 + (-v).exp()));
        let eval = |beta: f64| {
            let mut tp = Tape::<f64>::new();
            let zv = tp.param("z", &z);
            let rv = tp.param("r", &r);
            let s = seg_loss(&mut tp, zv, &t, 0.5).unwrap();
            let p = pgm_loss(&mut tp, rv, &t).unwrap();
            let tot = total_loss(&mut tp, s, Some(p), beta).unwrap();
            let g = tp.backward(tot).params(&tp);
            (tp.value(tot).item(), tp.value(p).item(), g)
        };
        let (v1, pgm, g1) = eval(0.3);
        let (v2, _, g2) = eval(0.3 + 1e-3);
        let (v0, _, g0) = eval(0.3 - 1e-3);
        assert!(((v2 - v0) / 2e-3 - pgm).abs() < 1e-9);
        let (_, _, gz) = eval(0.0);
        for k in 0..16 {
            assert_eq!(g1["z"].data()[k], gz["z"].data()[k]);
            let per_beta = (g2["r"].data()[k] - g0["r"].data()[k]) / 2e-3;
            assert!((g1["r"].data()[k] - 0.3 * per_beta).abs() < 1e-9);
        }
        assert!(v1.is_finite());
    }
}
