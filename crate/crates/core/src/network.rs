//! Encoder-decoder detector: stem, four stages of SS2D blocks each followed
//! by the perturbation-guided path module and the trajectory block, a
//! three-step decoder with skip connections and a 1×1 head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Backward, Tape, Var};
use crate::energy::{compute_energy, energy_gradient, energy_var, select_seeds, EnergyMap, GradientMode, Seed, SeedConfig};
use crate::error::{Error, Result};
use crate::layers::{BufferStore, Ctx, Init, Mode, ParamStore};
use crate::ops::{sigmoid_scalar, BatchStats};
use crate::ssm::{ss2d_batch_var, init_ss2d, Ss2dConfig};
use crate::tasb::{init_tasb, round_to_pixel, tasb_forward_var, TasbConfig, TrajectoryInput};
use crate::tensor::{Point2D, Scalar, Tensor};
use crate::tokenizer::{embed_words_var, extract_patches, TokenGrid};
use crate::trajectory::{sample_tokens, trace, TraceConfig, Trajectory};

pub const NUM_STAGES: usize = 4;

/// Block fused into each stage after the path module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TasbVariant {
    #[default]
    Tasb,
    ResBlock,
    Bottleneck,
}

/// How much of the path module feeds the fused block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PgmVariant {
    /// Seeds only, no hierarchical embeddings.
    EnergyOnly,
    /// Full trajectories, no hierarchical embeddings.
    EnergyTraj,
    #[default]
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: [usize; NUM_STAGES],
    pub blocks_per_stage: usize,
    /// Sentences per image.
    pub sentences: usize,
    /// Words per sentence.
    pub words: usize,
    pub token_channels: usize,
    pub seeds: SeedConfig,
    pub trace: TraceConfig,
    pub gradient_mode: GradientMode,
    pub ss2d: Ss2dConfig,
    pub use_pgm: bool,
    pub use_tasb: bool,
    pub tasb_variant: TasbVariant,
    pub pgm_variant: PgmVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            channels: [32, 64, 128, 256],
            blocks_per_stage: 2,
            sentences: 16,
            words: 16,
            token_channels: 32,
            seeds: SeedConfig::default(),
            trace: TraceConfig::default(),
            gradient_mode: GradientMode::Central,
            ss2d: Ss2dConfig::default(),
            use_pgm: true,
            use_tasb: true,
            tasb_variant: TasbVariant::Tasb,
            pgm_variant: PgmVariant::Full,
        }
    }
}

impl ModelConfig {
    /// Same architecture with the path module and trajectory block off.
    pub fn unet_only(&self) -> Self {
        ModelConfig {
            use_pgm: false,
            use_tasb: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let total = 1 << NUM_STAGES;
        for (dim, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % total != 0 {
                return Err(Error::config(format!("input {dim} {v} is not divisible by the total downsampling {total}")));
            }
        }
        self.token_grid()?;
        if self.channels.iter().any(|&c| c == 0) || self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config(format!("stage channels {:?} must be positive and non-decreasing", self.channels)));
        }
        for &c in &self.channels {
            self.ss2d.bottleneck.reduced(c)?;
            if c % 4 != 0 {
                return Err(Error::config(format!("stage channels {c} must be divisible by 4")));
            }
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::config("blocks_per_stage must be at least 1"));
        }
        if self.token_channels == 0 {
            return Err(Error::config("token_channels must be at least 1"));
        }
        self.seeds.validate()?;
        self.trace.validate()
    }

    pub fn token_grid(&self) -> Result<TokenGrid> {
        TokenGrid::new(self.height, self.width, self.sentences, self.words)
    }

    /// Spatial size of stage `l` (1-based).
    pub fn stage_size(&self, l: usize) -> (usize, usize) {
        (self.height >> l, self.width >> l)
    }

    pub fn stage_trace(&self) -> TraceConfig {
        match self.pgm_variant {
            PgmVariant::EnergyOnly => TraceConfig {
                max_len: 1,
                ..self.trace
            },
            _ => self.trace,
        }
    }

    fn tasb_config(&self) -> TasbConfig {
        TasbConfig {
            ss2d: self.ss2d,
            use_context: self.use_tasb,
            use_scan: self.use_tasb,
            use_embeddings: self.pgm_variant == PgmVariant::Full,
        }
    }

    fn uses_embeddings(&self) -> bool {
        self.use_pgm && self.pgm_variant == PgmVariant::Full && self.tasb_variant == TasbVariant::Tasb
    }
}

/// Parameters and running statistics of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub buffers: BufferStore<T>,
}

/// Trajectory positions of one stage: image × trajectory × point.
pub type StagePaths = Vec<Vec<Vec<Point2D>>>;

#[derive(Clone, Debug, PartialEq)]
pub struct StageDiagnostics<T = f32> {
    pub stage: usize,
    /// One energy map per image.
    pub energy: Vec<EnergyMap<T>>,
    /// Trajectories per image.
    pub trajectories: Vec<Vec<Trajectory<T>>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics<T = f32> {
    pub stages: Vec<StageDiagnostics<T>>,
}

impl<T: Scalar> Diagnostics<T> {
    pub fn paths(&self) -> Vec<StagePaths> {
        self.stages
            .iter()
            .map(|s| {
                s.trajectories
                    .iter()
                    .map(|img| img.iter().map(|t| t.points.clone()).collect())
                    .collect()
            })
            .collect()
    }
}

/// Tape handles of a forward pass.
pub struct ForwardVars<T: Scalar> {
    /// `N×1×H×W`.
    pub logits: Var,
    /// `N×1×H×W` probabilities, present with the path module.
    pub response: Option<Var>,
    pub diagnostics: Diagnostics<T>,
}

/// Values of an un-taped forward pass.
#[derive(Clone, Debug)]
pub struct Prediction<T: Scalar = f32> {
    pub logits: Tensor<T>,
    pub response: Option<Tensor<T>>,
    pub diagnostics: Diagnostics<T>,
    pub bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut buffers = BufferStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            params: &mut params,
            buffers: &mut buffers,
            rng: &mut rng,
        };
        let c = config.channels;
        let cw = config.token_channels;
        init.conv_bn("tok.stem", cw, 3, 3);
        init.conv_bn("stem", c[0], 3, 3);
        let tcfg = config.tasb_config();
        for l in 1..=NUM_STAGES {
            let cl = c[l - 1];
            if l > 1 {
                init.conv_bn(&format!("enc{l}.down"), cl, c[l - 2], 3);
            }
            for b in 0..config.blocks_per_stage {
                init_ss2d(&mut init, &format!("enc{l}.block{b}"), cl, &config.ss2d)?;
            }
            let p = format!("tasb{l}");
            init_tasb(&mut init, &p, cl, cw, &tcfg)?;
            init.conv_bn(&format!("{p}.res1"), cl, cl, 3);
            init.conv_bn(&format!("{p}.res2"), cl, cl, 3);
            init.conv_bn(&format!("{p}.bt1"), cl / 4, cl, 1);
            init.conv_bn(&format!("{p}.bt2"), cl / 4, cl / 4, 3);
            init.conv_bn(&format!("{p}.bt3"), cl, cl / 4, 1);
        }
        for (k, l) in [(1, 3), (2, 2), (3, 1)] {
            init.conv_bn(&format!("dec{k}"), c[l - 1], c[l] + c[l - 1], 3);
        }
        init.conv("head", 1, c[0], 1);
        // start from a low foreground prior
        init.tensor("head.b", Tensor::full(&[1], T::of(-4.0)));
        init.tensor("resp.scale", Tensor::full(&[1], T::one()));
        init.tensor("resp.shift", Tensor::zeros(&[1]));
        Ok(Model { config, params, buffers })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }

    /// Forward pass without gradients. Parameters and buffers are untouched;
    /// in training mode the batch statistics are returned in
    /// [`Prediction::bn_updates`].
    pub fn forward(&self, images: &Tensor<T>, mode: Mode) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.params, &self.buffers, mode);
        let out = forward_var(&mut ctx, &self.config, images, None)?;
        let bn_updates = std::mem::take(&mut ctx.bn_updates);
        Ok(Prediction {
            logits: tape.value(out.logits).clone(),
            response: out.response.map(|r| tape.value(r).clone()),
            diagnostics: out.diagnostics,
            bn_updates,
        })
    }
}

struct StageOutput<T: Scalar> {
    feature: Var,
    diagnostics: Option<StageDiagnostics<T>>,
    /// Per image: (full-resolution position, sampled energy var row index).
    samples: Vec<Option<(Var, Vec<Point2D>)>>,
}

#[allow(clippy::too_many_arguments)]
fn pgm_stage<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    l: usize,
    f: Var,
    embeddings: Option<(Var, Var)>,
    grid: &TokenGrid,
    frozen: Option<&StagePaths>,
) -> Result<StageOutput<T>> {
    let (n, cl, h, w) = ctx.tape.value(f).dims4()?;
    let prefix = format!("tasb{l}");
    let mut diag = StageDiagnostics {
        stage: l,
        energy: Vec::with_capacity(n),
        trajectories: Vec::with_capacity(n),
    };
    let mut samples = vec![None; n];
    let mut outs = Vec::with_capacity(n);
    let conv_variant = cfg.tasb_variant != TasbVariant::Tasb;
    let tcfg = cfg.tasb_config();
    let trace_cfg = cfg.stage_trace();
    let scale = (1usize << l) as f64;
    for i in 0..n {
        let fi = ctx.tape.select(f, i)?;
        let mut inputs = Vec::new();
        if cfg.use_pgm {
            let value = ctx.tape.value(fi).clone();
            let emap = compute_energy(&value, l)?;
            let paths: Vec<Vec<Point2D>> = match frozen {
                Some(fp) => fp.get(i).cloned().ok_or_else(|| Error::shape("frozen paths do not cover the batch"))?,
                None => {
                    let grad = energy_gradient(&emap, cfg.gradient_mode);
                    let seeds = select_seeds(&emap, &cfg.seeds)?;
                    seeds
                        .seeds
                        .iter()
                        .map(|s| trace(&emap, &grad, Point2D::new(s.x as f64, s.y as f64), &trace_cfg))
                        .collect::<Result<_>>()?
                }
            };
            let mut trajs = Vec::with_capacity(paths.len());
            for pts in paths.iter().filter(|p| !p.is_empty()) {
                let energies = pts.iter().map(|&p| bilinear_energy(&emap, p)).collect();
                let (sx, sy) = (pts[0].x.round() as usize, pts[0].y.round() as usize);
                trajs.push(Trajectory {
                    stage: l,
                    seed: Seed {
                        x: sx.min(w - 1),
                        y: sy.min(h - 1),
                        energy: bilinear_energy(&emap, pts[0]),
                    },
                    tokens: sample_tokens(&value, pts)?,
                    points: pts.clone(),
                    energies,
                });
            }
            let all: Vec<Point2D> = trajs.iter().flat_map(|t| t.points.iter().copied()).collect();
            if !all.is_empty() {
                let ev = energy_var(ctx.tape, fi)?;
                let sampled = ctx.tape.sample_points(ev, &all)?;
                let norm = ctx.tape.scale(sampled, T::one() / T::of(cl as f64));
                let full: Vec<Point2D> = all.iter().map(|p| Point2D::new(p.x * scale, p.y * scale)).collect();
                samples[i] = Some((norm, full));
            }
            let words = grid.num_words();
            inputs = trajs
                .iter()
                .map(|t| {
                    let (word_rows, sentence_rows) = t
                        .points
                        .iter()
                        .map(|&p| {
                            let (s, wd) = grid.locate(p, l);
                            (i * words + s * grid.m + wd, i * grid.n + s)
                        })
                        .unzip();
                    TrajectoryInput {
                        points: t.points.clone(),
                        word_rows,
                        sentence_rows,
                    }
                })
                .collect();
            diag.energy.push(emap);
            diag.trajectories.push(trajs);
        }
        if !conv_variant {
            let out = tasb_forward_var(ctx, fi, &inputs, embeddings, &prefix, &tcfg)?;
            outs.push(out.output);
        }
    }
    let feature = if conv_variant {
        conv_block(ctx, f, &prefix, cfg.tasb_variant)?
    } else {
        ctx.tape.stack(&outs)?
    };
    Ok(StageOutput {
        feature,
        diagnostics: cfg.use_pgm.then_some(diag),
        samples,
    })
}

fn bilinear_energy<T: Scalar>(emap: &EnergyMap<T>, p: Point2D) -> f64 {
    let taps = crate::ops::bilinear_taps::<T>(p, emap.height(), emap.width());
    let d = emap.values.data();
    taps.iter().map(|&(i, w)| d[i] * w).sum::<T>().to_f64().unwrap_or(0.0)
}

/// Residual or bottleneck convolutional substitutes for the trajectory
/// block, fused with the same learnable weight.
fn conv_block<T: Scalar>(ctx: &mut Ctx<'_, T>, f: Var, prefix: &str, variant: TasbVariant) -> Result<Var> {
    let enhanced = match variant {
        TasbVariant::ResBlock => {
            let y = ctx.conv_bn(f, &format!("{prefix}.res1"), 1)?;
            let y = ctx.tape.relu(y);
            ctx.conv_bn(y, &format!("{prefix}.res2"), 1)?
        }
        TasbVariant::Bottleneck => {
            let y = ctx.conv_bn(f, &format!("{prefix}.bt1"), 1)?;
            let y = ctx.tape.relu(y);
            let y = ctx.conv_bn(y, &format!("{prefix}.bt2"), 1)?;
            let y = ctx.tape.relu(y);
            ctx.conv_bn(y, &format!("{prefix}.bt3"), 1)?
        }
        TasbVariant::Tasb => unreachable!("handled by the trajectory block"),
    };
    let lambda = ctx.p(&format!("{prefix}.lambda"))?;
    let scaled = ctx.tape.mul_scalar(enhanced, lambda)?;
    ctx.tape.add(f, scaled)
}

/// Full forward pass. `frozen` replaces the traced trajectories of each
/// stage, which makes the pass a smooth function of the parameters.
pub fn forward_var<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    images: &Tensor<T>,
    frozen: Option<&[StagePaths]>,
) -> Result<ForwardVars<T>> {
    cfg.validate()?;
    let (n, c, h, w) = images.dims4()?;
    if c != 3 || h != cfg.height || w != cfg.width {
        return Err(Error::config(format!(
            "model expects N×3×{}×{} images, got {:?}",
            cfg.height,
            cfg.width,
            images.shape()
        )));
    }
    if let Some(fp) = frozen {
        if fp.len() != NUM_STAGES {
            return Err(Error::shape("frozen paths must cover every stage"));
        }
    }
    let grid = cfg.token_grid()?;
    let x = ctx.tape.constant(images.clone());
    let embeddings = if cfg.uses_embeddings() {
        let patches = ctx.tape.constant(extract_patches(images, &grid)?);
        Some(embed_words_var(ctx, patches, "tok", &grid)?)
    } else {
        None
    };

    let stem = ctx.conv_bn(x, "stem", 2)?;
    let mut f = ctx.tape.gelu(stem);
    let mut skips = Vec::with_capacity(NUM_STAGES);
    let mut diagnostics = Diagnostics::default();
    let mut response_samples: Vec<Vec<(Var, Vec<Point2D>)>> = vec![Vec::new(); n];
    for l in 1..=NUM_STAGES {
        if l > 1 {
            let d = ctx.conv_bn(f, &format!("enc{l}.down"), 2)?;
            f = ctx.tape.gelu(d);
        }
        for b in 0..cfg.blocks_per_stage {
            f = ss2d_batch_var(ctx, f, &format!("enc{l}.block{b}"), &cfg.ss2d)?;
        }
        if cfg.use_pgm || cfg.use_tasb {
            let out = pgm_stage(ctx, cfg, l, f, embeddings, &grid, frozen.map(|fp| &fp[l - 1]))?;
            f = out.feature;
            if let Some(d) = out.diagnostics {
                diagnostics.stages.push(d);
            }
            for (i, s) in out.samples.into_iter().enumerate() {
                if let Some(s) = s {
                    response_samples[i].push(s);
                }
            }
        }
        skips.push(f);
    }

    let mut d = skips[NUM_STAGES - 1];
    for (k, l) in [(1, 3), (2, 2), (3, 1)] {
        let skip = skips[l - 1];
        let (_, _, sh, sw) = ctx.tape.value(skip).dims4()?;
        let up = ctx.tape.upsample(d, sh, sw)?;
        let cat = ctx.tape.concat(&[up, skip], 1)?;
        let y = ctx.conv_bn(cat, &format!("dec{k}"), 1)?;
        d = ctx.tape.relu(y);
    }
    let head = ctx.conv(d, "head", 1, crate::ops::PaddingMode::Zero)?;
    let logits = ctx.tape.upsample(head, h, w)?;

    let response = if cfg.use_pgm {
        let scale = ctx.p("resp.scale")?;
        let shift = ctx.p("resp.shift")?;
        let mut maps = Vec::with_capacity(n);
        for samples in &response_samples {
            maps.push(response_var(ctx.tape, samples, scale, shift, h, w)?);
        }
        Some(ctx.tape.stack(&maps)?)
    } else {
        None
    };
    Ok(ForwardVars {
        logits,
        response,
        diagnostics,
    })
}

/// Perturbation response of one image: per full-resolution pixel, the mean
/// of the normalized energies landing on it, mapped through
/// `sigmoid(scale·v + shift)`. Untouched pixels are exactly 0.
pub fn response_var<T: Scalar>(tape: &mut Tape<T>, samples: &[(Var, Vec<Point2D>)], scale: Var, shift: Var, h: usize, w: usize) -> Result<Var> {
    if samples.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[1, h, w])));
    }
    let vals: Vec<Var> = samples.iter().map(|s| s.0).collect();
    let v = tape.concat(&vals, 0)?;
    let pixels: Vec<usize> = samples
        .iter()
        .flat_map(|s| s.1.iter().map(|&p| round_to_pixel(p, h, w)))
        .collect();
    let mut count = vec![0u32; h * w];
    let mut sum = vec![T::zero(); h * w];
    for (r, &p) in pixels.iter().enumerate() {
        count[p] += 1;
        sum[p] += tape.value(v).data()[r];
    }
    let s = tape.value(scale).item();
    let b = tape.value(shift).item();
    let mut avg = vec![T::zero(); h * w];
    let mut out = vec![T::zero(); h * w];
    for p in 0..h * w {
        if count[p] > 0 {
            avg[p] = sum[p] / T::of(count[p] as f64);
            out[p] = sigmoid_scalar(s * avg[p] + b);
        }
    }
    let value = Tensor::from_parts(vec![1, h, w], out);
    Ok(tape.push(value, &[v, scale, shift], ResponseOp { pixels, count, avg }))
}

struct ResponseOp<T> {
    pixels: Vec<usize>,
    count: Vec<u32>,
    avg: Vec<T>,
}

impl<T: Scalar> Backward<T> for ResponseOp<T> {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], out: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = inputs[1].item();
        let (gd, od) = (g.data(), out.data());
        let mut g_pre = vec![T::zero(); self.count.len()];
        let (mut gs, mut gb) = (T::zero(), T::zero());
        for p in 0..self.count.len() {
            if self.count[p] > 0 {
                let gp = gd[p] * od[p] * (T::one() - od[p]);
                g_pre[p] = gp;
                gs += gp * self.avg[p];
                gb += gp;
            }
        }
        let gv: Vec<T> = self
            .pixels
            .iter()
            .map(|&p| g_pre[p] * s / T::of(self.count[p] as f64))
            .collect();
        vec![
            Some(Tensor::from_parts(inputs[0].shape().to_vec(), gv)),
            Some(Tensor::scalar(gs).reshape(&[1]).expect("one element")),
            Some(Tensor::scalar(gb).reshape(&[1]).expect("one element")),
        ]
    }
}

/// Un-taped response map from per-stage trajectories of one image, using
/// their recorded energies.
pub fn perturbation_response<T: Scalar>(
    trajectories: &[Vec<Trajectory<T>>],
    channels: &[usize],
    h: usize,
    w: usize,
    scale: f64,
    shift: f64,
) -> Result<Tensor<T>> {
    let mut tape = Tape::<T>::new();
    let mut samples = Vec::new();
    for (stage_trajs, &cl) in trajectories.iter().zip(channels) {
        for t in stage_trajs {
            let f = (1usize << t.stage) as f64;
            let vals = Tensor::new(&[t.len(), 1], t.energies.iter().map(|&e| T::of(e / cl as f64)).collect())?;
            let v = tape.constant(vals);
            samples.push((v, t.points.iter().map(|p| Point2D::new(p.x * f, p.y * f)).collect()));
        }
    }
    let s = tape.constant(Tensor::full(&[1], T::of(scale)));
    let b = tape.constant(Tensor::full(&[1], T::of(shift)));
    let r = response_var(&mut tape, &samples, s, b, h, w)?;
    Ok(tape.value(r).clone())
}
