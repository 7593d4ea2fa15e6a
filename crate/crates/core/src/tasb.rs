//! Trajectory-aware state block: scans trajectory tokens, aligns each step
//! with its local and hierarchical embeddings, scatters the aligned states
//! back onto the grid and fuses the result into the backbone feature.

use rand::Rng;

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{BufferStore, Ctx, Init, Mode, ParamStore};
use crate::ssm::{bottleneck_var, init_bottleneck, init_ss2d, ss2d_var, Ss2dConfig};
use crate::tensor::{Point2D, Scalar, Tensor};
use crate::tokenizer::HierarchicalEmbeddings;

/// Initial value of the fusion weight λ.
pub const LAMBDA_INIT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TasbConfig {
    pub ss2d: Ss2dConfig,
    /// Grid-level SS2D contextual map.
    pub use_context: bool,
    /// State-space scan along trajectories; without it `y_j = f_j`.
    pub use_scan: bool,
    /// Word/sentence embeddings in the alignment; zeros otherwise.
    pub use_embeddings: bool,
}

impl Default for TasbConfig {
    fn default() -> Self {
        TasbConfig {
            ss2d: Ss2dConfig::default(),
            use_context: true,
            use_scan: true,
            use_embeddings: true,
        }
    }
}

/// Parameters under `{prefix}.ctx`, `{prefix}.scan`, `{prefix}.phi` and
/// `{prefix}.lambda`.
pub fn init_tasb<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, prefix: &str, c_l: usize, c_emb: usize, cfg: &TasbConfig) -> Result<()> {
    init_ss2d(init, &format!("{prefix}.ctx"), c_l, &cfg.ss2d)?;
    init_bottleneck(init, &format!("{prefix}.scan"), c_l, &cfg.ss2d.bottleneck)?;
    init.linear(&format!("{prefix}.phi"), c_l, 2 * c_l + 2 * c_emb);
    init.tensor(&format!("{prefix}.lambda"), Tensor::full(&[1], T::of(LAMBDA_INIT)));
    Ok(())
}

/// Nearest pixel of a continuous position, ties to even, clamped to the grid.
pub fn round_to_pixel(p: Point2D, h: usize, w: usize) -> usize {
    let x = (p.x.round_ties_even().max(0.0) as usize).min(w - 1);
    let y = (p.y.round_ties_even().max(0.0) as usize).min(h - 1);
    y * w + x
}

/// `z = φ([y_j ‖ f_j ‖ word ‖ sentence])`.
pub fn align<T: Scalar>(
    y_j: &Tensor<T>,
    f_j: &Tensor<T>,
    word: &Tensor<T>,
    sentence: &Tensor<T>,
    phi_w: &Tensor<T>,
    phi_b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut cat = Vec::new();
    for t in [y_j, f_j, word, sentence] {
        cat.extend_from_slice(t.data());
    }
    let [d_out, d_in] = phi_w.shape()[..] else {
        return Err(Error::shape("phi weight must be rank 2"));
    };
    if d_in != cat.len() {
        return Err(Error::config(format!(
            "alignment input width {} does not match the projection width {d_in}",
            cat.len()
        )));
    }
    phi_b.expect_shape(&[d_out])?;
    let w = phi_w.data();
    let out = (0..d_out)
        .map(|o| phi_b.data()[o] + w[o * d_in..(o + 1) * d_in].iter().zip(&cat).map(|(&a, &b)| a * b).sum::<T>())
        .collect();
    Tensor::new(&[d_out], out)
}

/// Running sums and contribution counts of scattered states.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatterAccumulator<T = f32> {
    /// `C×H×W`.
    pub sum: Tensor<T>,
    /// `H×W`.
    pub count: Vec<u32>,
}

impl<T: Scalar> ScatterAccumulator<T> {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        ScatterAccumulator {
            sum: Tensor::zeros(&[c, h, w]),
            count: vec![0; h * w],
        }
    }

    pub fn add(&mut self, p: Point2D, z: &Tensor<T>) -> Result<()> {
        let (c, h, w) = self.sum.dims3()?;
        z.expect_shape(&[c])?;
        let pix = round_to_pixel(p, h, w);
        self.count[pix] += 1;
        let d = self.sum.data_mut();
        for ch in 0..c {
            d[ch * h * w + pix] += z.data()[ch];
        }
        Ok(())
    }

    /// Divides by `max(count, 1)`.
    pub fn average(&self) -> Tensor<T> {
        let hw = self.count.len();
        Tensor::from_fn(self.sum.shape(), |i| {
            self.sum.data()[i] / T::of(self.count[i % hw].max(1) as f64)
        })
    }
}

/// Per-pixel mean of the states that round onto it; untouched pixels are 0.
/// States are accumulated in the given order.
pub fn scatter_average<T: Scalar>(aligned: &[(Point2D, Tensor<T>)], c: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let mut acc = ScatterAccumulator::new(c, h, w);
    for (p, z) in aligned {
        acc.add(*p, z)?;
    }
    Ok(acc.average())
}

/// `F + λ·F̂`.
pub fn fuse<T: Scalar>(backbone: &Tensor<T>, enhanced: &Tensor<T>, lambda: T) -> Result<Tensor<T>> {
    backbone.zip_map(enhanced, |f, e| f + lambda * e)
}

struct ScatterOp {
    pixels: Vec<usize>,
    count: Vec<u32>,
}

impl<T: Scalar> Backward<T> for ScatterOp {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let c = inputs[0].shape()[1];
        let hw = self.count.len();
        let gd = g.data();
        let mut out = Vec::with_capacity(self.pixels.len() * c);
        for &p in &self.pixels {
            let inv = T::one() / T::of(self.count[p] as f64);
            for ch in 0..c {
                out.push(gd[ch * hw + p] * inv);
            }
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), out))]
    }
}

/// Taped [`scatter_average`] of the rows of `z: R×C` onto a `C×H×W` grid.
pub fn scatter_var<T: Scalar>(tape: &mut Tape<T>, z: Var, points: &[Point2D], h: usize, w: usize) -> Result<Var> {
    let [rows, c] = tape.value(z).shape()[..] else {
        return Err(Error::shape("scatter input must be R×C"));
    };
    if rows != points.len() {
        return Err(Error::shape(format!("{rows} states but {} positions", points.len())));
    }
    let pixels: Vec<usize> = points.iter().map(|&p| round_to_pixel(p, h, w)).collect();
    let mut count = vec![0u32; h * w];
    let mut sum = vec![T::zero(); c * h * w];
    let zd = tape.value(z).data();
    for (r, &p) in pixels.iter().enumerate() {
        count[p] += 1;
        for ch in 0..c {
            sum[ch * h * w + p] += zd[r * c + ch];
        }
    }
    for i in 0..sum.len() {
        sum[i] /= T::of(count[i % (h * w)].max(1) as f64);
    }
    let value = Tensor::from_parts(vec![c, h, w], sum);
    Ok(tape.push(value, &[z], ScatterOp { pixels, count }))
}

/// One trajectory with the embedding rows of its points.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryInput {
    pub points: Vec<Point2D>,
    /// Row of each point in the word embedding matrix.
    pub word_rows: Vec<usize>,
    /// Row of each point in the sentence embedding matrix.
    pub sentence_rows: Vec<usize>,
}

/// Tape handles of a TASB output.
#[derive(Clone, Copy, Debug)]
pub struct TasbVars {
    /// `F + λ·F̂`.
    pub output: Var,
    /// `F̂`, absent when neither path is active.
    pub enhanced: Option<Var>,
    /// Trajectory scatter map before mixing with the context map.
    pub scattered: Option<Var>,
}

/// TASB on one `C×H×W` stage feature. `embeddings` are the `(F_w, F_s)`
/// matrices indexed by the trajectory rows.
pub fn tasb_forward_var<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    feature: Var,
    trajectories: &[TrajectoryInput],
    embeddings: Option<(Var, Var)>,
    prefix: &str,
    cfg: &TasbConfig,
) -> Result<TasbVars> {
    let (c, h, w) = ctx.tape.value(feature).dims3()?;
    let context = if cfg.use_context {
        Some(ss2d_var(ctx, feature, &format!("{prefix}.ctx"), &cfg.ss2d)?)
    } else {
        None
    };

    let mut rows = Vec::new();
    let mut points = Vec::new();
    let phi_in = ctx.params.get(&format!("{prefix}.phi.w"))?.shape()[1];
    if phi_in < 2 * c || (phi_in - 2 * c) % 2 != 0 {
        return Err(Error::config(format!(
            "projection width {phi_in} does not fit [y ‖ f ‖ word ‖ sentence] with {c} stage channels"
        )));
    }
    let c_emb = (phi_in - 2 * c) / 2;
    for t in trajectories {
        if t.points.is_empty() {
            continue;
        }
        let f = ctx.tape.sample_points(feature, &t.points)?;
        let y = if cfg.use_scan {
            bottleneck_var(ctx, f, &format!("{prefix}.scan"), &cfg.ss2d.bottleneck)?
        } else {
            f
        };
        let (wv, sv) = match (cfg.use_embeddings, embeddings) {
            (true, Some((fw, fs))) => (
                ctx.tape.gather_rows(fw, t.word_rows.clone())?,
                ctx.tape.gather_rows(fs, t.sentence_rows.clone())?,
            ),
            _ => {
                let z = Tensor::zeros(&[t.points.len(), c_emb]);
                (ctx.tape.constant(z.clone()), ctx.tape.constant(z))
            }
        };
        let cat = ctx.tape.concat(&[y, f, wv, sv], 1)?;
        rows.push(ctx.linear(cat, &format!("{prefix}.phi"))?);
        points.extend_from_slice(&t.points);
    }
    let scattered = if rows.is_empty() {
        None
    } else {
        let z = ctx.tape.concat(&rows, 0)?;
        Some(scatter_var(ctx.tape, z, &points, h, w)?)
    };
    let enhanced = match (context, scattered) {
        (Some(a), Some(b)) => {
            let s = ctx.tape.add(a, b)?;
            Some(ctx.tape.scale(s, T::of(0.5)))
        }
        (a, b) => a.or(b),
    };
    let output = match enhanced {
        Some(e) => {
            let lambda = ctx.p(&format!("{prefix}.lambda"))?;
            let scaled = ctx.tape.mul_scalar(e, lambda)?;
            ctx.tape.add(feature, scaled)?
        }
        None => feature,
    };
    Ok(TasbVars {
        output,
        enhanced,
        scattered,
    })
}

/// Builds trajectory inputs for a single image from its embeddings.
pub fn trajectory_inputs(points: &[Vec<Point2D>], embeddings: &HierarchicalEmbeddings<impl Scalar>, level: usize) -> Vec<TrajectoryInput> {
    let grid = embeddings.grid;
    points
        .iter()
        .map(|pts| {
            let (word_rows, sentence_rows) = pts
                .iter()
                .map(|&p| {
                    let (s, wd) = grid.locate(p, level);
                    (s * grid.m + wd, s)
                })
                .unzip();
            TrajectoryInput {
                points: pts.clone(),
                word_rows,
                sentence_rows,
            }
        })
        .collect()
}

/// Inference-mode TASB on one stage feature; returns `F_final`.
pub fn tasb_forward<T: Scalar>(
    feature: &Tensor<T>,
    trajectories: &[TrajectoryInput],
    embeddings: Option<&HierarchicalEmbeddings<T>>,
    params: &ParamStore<T>,
    prefix: &str,
    cfg: &TasbConfig,
) -> Result<Tensor<T>> {
    let buffers = BufferStore::new();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, params, &buffers, Mode::Eval);
    let f = ctx.tape.constant(feature.clone());
    let emb = embeddings.map(|e| (ctx.tape.constant(e.word.clone()), ctx.tape.constant(e.sentence.clone())));
    let out = tasb_forward_var(&mut ctx, f, trajectories, emb, prefix, cfg)?;
    Ok(tape.value(out.output).clone())
}
