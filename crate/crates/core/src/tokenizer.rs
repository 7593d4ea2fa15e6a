//! Two-level patch tokenizer: an image is split into `n` sentence patches,
//! each split into `m` word patches. Word embeddings come from a small
//! conv stem averaged over the patch, sentence embeddings average the words.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{BufferStore, Ctx, Mode, ParamStore};
use crate::ops::PaddingMode;
use crate::tensor::{Point2D, Scalar, Tensor};

/// Geometry of the sentence/word partition of an `H×W` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    /// Sentences per image.
    pub n: usize,
    /// Words per sentence.
    pub m: usize,
    side_n: usize,
    side_m: usize,
}

fn int_sqrt(v: usize, what: &str) -> Result<usize> {
    let r = (v as f64).sqrt().round() as usize;
    if v == 0 || r * r != v {
        return Err(Error::config(format!("{what} = {v} must be a perfect square")));
    }
    Ok(r)
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, n: usize, m: usize) -> Result<Self> {
        let side_n = int_sqrt(n, "sentences per image")?;
        let side_m = int_sqrt(m, "words per sentence")?;
        let cells = side_n * side_m;
        for (dim, size) in [("height", height), ("width", width)] {
            if size == 0 || size % cells != 0 {
                return Err(Error::config(format!(
                    "image {dim} {size} is not divisible by sqrt(n)*sqrt(m) = {cells}"
                )));
            }
        }
        Ok(TokenGrid {
            height,
            width,
            n,
            m,
            side_n,
            side_m,
        })
    }

    /// Word patch size `(h_w, w_w)`.
    pub fn word_size(&self) -> (usize, usize) {
        let cells = self.side_n * self.side_m;
        (self.height / cells, self.width / cells)
    }

    pub fn sentence_size(&self) -> (usize, usize) {
        (self.height / self.side_n, self.width / self.side_n)
    }

    pub fn num_words(&self) -> usize {
        self.n * self.m
    }

    /// Word patches in sentence-major order; within each level patches run
    /// row-major.
    pub fn patches(&self) -> Vec<WordPatch> {
        let (hw, ww) = self.word_size();
        let (hs, ws) = self.sentence_size();
        let mut out = Vec::with_capacity(self.num_words());
        for s in 0..self.n {
            let (sr, sc) = (s / self.side_n, s % self.side_n);
            for wd in 0..self.m {
                let (wr, wc) = (wd / self.side_m, wd % self.side_m);
                out.push(WordPatch {
                    sentence: s,
                    word: wd,
                    y0: sr * hs + wr * hw,
                    x0: sc * ws + wc * ww,
                    h: hw,
                    w: ww,
                });
            }
        }
        out
    }

    /// Flat word index `sentence·m + word` of the patch containing the image
    /// point `u`. Points are clamped to the image; points on a boundary
    /// belong to the lower-index patch.
    pub fn locate_pixel(&self, u: Point2D) -> (usize, usize) {
        let (hw, ww) = self.word_size();
        let cells = self.side_n * self.side_m;
        let axis = |v: f64, size: usize, dim: usize| -> usize {
            let v = v.clamp(0.0, dim as f64);
            if v <= 0.0 {
                0
            } else {
                ((v / size as f64).ceil() as usize).saturating_sub(1).min(cells - 1)
            }
        };
        let col = axis(u.x, ww, self.width);
        let row = axis(u.y, hw, self.height);
        let sentence = (row / self.side_m) * self.side_n + col / self.side_m;
        let word = (row % self.side_m) * self.side_m + col % self.side_m;
        (sentence, word)
    }

    /// Patch of a stage-`level` feature position; stage `l` has stride `2^l`.
    pub fn locate(&self, p: Point2D, level: usize) -> (usize, usize) {
        let f = (1usize << level) as f64;
        self.locate_pixel(Point2D::new(p.x * f, p.y * f))
    }
}

/// Pixel box of one word patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WordPatch {
    pub sentence: usize,
    pub word: usize,
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl WordPatch {
    pub fn contains(&self, u: Point2D) -> bool {
        u.x >= self.x0 as f64 && u.x <= (self.x0 + self.w) as f64 && u.y >= self.y0 as f64 && u.y <= (self.y0 + self.h) as f64
    }
}

/// Partition of an image into word patches.
pub fn partition(height: usize, width: usize, n: usize, m: usize) -> Result<Vec<WordPatch>> {
    Ok(TokenGrid::new(height, width, n, m)?.patches())
}

/// Cuts `N×C×H×W` images into `(N·n·m)×C×h_w×w_w` word patches, image-major
/// then in [`TokenGrid::patches`] order.
pub fn extract_patches<T: Scalar>(images: &Tensor<T>, grid: &TokenGrid) -> Result<Tensor<T>> {
    let (n, c, h, w) = images.dims4()?;
    if (h, w) != (grid.height, grid.width) {
        return Err(Error::shape(format!(
            "images are {h}×{w} but the token grid expects {}×{}",
            grid.height, grid.width
        )));
    }
    let (hw, ww) = grid.word_size();
    let patches = grid.patches();
    let d = images.data();
    let mut out = Vec::with_capacity(images.len());
    for b in 0..n {
        for p in &patches {
            for ch in 0..c {
                let plane = &d[(b * c + ch) * h * w..];
                for y in p.y0..p.y0 + hw {
                    out.extend_from_slice(&plane[y * w + p.x0..y * w + p.x0 + ww]);
                }
            }
        }
    }
    Tensor::new(&[n * patches.len(), c, hw, ww], out)
}

/// Word and sentence embeddings of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalEmbeddings<T = f32> {
    /// `(n·m)×C_w`.
    pub word: Tensor<T>,
    /// `n×C_s`.
    pub sentence: Tensor<T>,
    pub grid: TokenGrid,
}

impl<T: Scalar> HierarchicalEmbeddings<T> {
    /// Embeddings of the patch containing a stage-`level` position.
    pub fn lookup(&self, p: Point2D, level: usize) -> (Tensor<T>, Tensor<T>) {
        let (s, w) = self.grid.locate(p, level);
        (self.word.select(s * self.grid.m + w), self.sentence.select(s))
    }
}

/// Taped tokenizer over a batch of patches. Returns `(F_w, F_s)` with shapes
/// `(N·n·m)×C` and `(N·n)×C`.
pub fn embed_words_var<T: Scalar>(ctx: &mut Ctx<'_, T>, patches: Var, prefix: &str, grid: &TokenGrid) -> Result<(Var, Var)> {
    let y = ctx.conv(patches, &format!("{prefix}.stem.conv"), 1, PaddingMode::Zero)?;
    let y = ctx.bn(y, &format!("{prefix}.stem.bn"))?;
    let y = ctx.tape.gelu(y);
    let words = ctx.tape.spatial_mean(y)?;
    let sentences = ctx.tape.group_mean_rows(words, grid.m)?;
    Ok((words, sentences))
}

/// Inference-mode embeddings of a single `C×H×W` image.
pub fn embed_words<T: Scalar>(
    image: &Tensor<T>,
    params: &ParamStore<T>,
    buffers: &BufferStore<T>,
    prefix: &str,
    grid: &TokenGrid,
) -> Result<HierarchicalEmbeddings<T>> {
    let (c, h, w) = image.dims3()?;
    let batch = image.clone().reshape(&[1, c, h, w])?;
    let patches = extract_patches(&batch, grid)?;
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, params, buffers, Mode::Eval);
    let pv = ctx.tape.constant(patches);
    let (wv, sv) = embed_words_var(&mut ctx, pv, prefix, grid)?;
    Ok(HierarchicalEmbeddings {
        word: tape.value(wv).clone(),
        sentence: tape.value(sv).clone(),
        grid: *grid,
    })
}
