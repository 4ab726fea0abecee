//! Label-preserving image transforms on `[N, C, H, W]` batches in `[0, 1]`.

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};
use crate::trainers::{BatchContext, BatchHook};

fn geometry(x: &DenseArray, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [_, c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::contract(op, format!("expected [N, C, H, W], got {s:?}"))),
    }
}

/// Copies `img` shifted by `(dy, dx)` with zero fill: `out[i][j] = img[i + dy][j + dx]`.
fn shift(img: &[f32], (c, h, w): (usize, usize, usize), dy: isize, dx: isize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            let si = i as isize + dy;
            if si < 0 || si >= h as isize {
                continue;
            }
            for j in 0..w {
                let sj = j as isize + dx;
                if sj >= 0 && sj < w as isize {
                    dst[i * w + j] = plane[si as usize * w + sj as usize];
                }
            }
        }
    }
    out
}

fn mirror(img: &mut [f32], w: usize) {
    for row in img.chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Zero-pads each image by `pad` and crops back at a uniform offset in
/// `[0, 2·pad]²`. Offset `(pad, pad)` is the identity.
pub fn pad_crop(x: &DenseArray, pad: usize, rng: &mut Rng) -> Result<DenseArray> {
    let geo = geometry(x, "pad_crop")?;
    if geo.1 != geo.2 {
        return Err(Error::contract("pad_crop", format!("non-square {}x{} images", geo.1, geo.2)));
    }
    let mut out = x.clone();
    for i in 0..x.rows() {
        let oy = rng.below(2 * pad + 1) as isize - pad as isize;
        let ox = rng.below(2 * pad + 1) as isize - pad as isize;
        let shifted = shift(x.row(i), geo, oy, ox);
        out.row_mut(i).copy_from_slice(&shifted);
    }
    Ok(out)
}

/// Mirrors each image left-right with probability `prob`.
pub fn hflip(x: &DenseArray, prob: f32, rng: &mut Rng) -> Result<DenseArray> {
    let (_, _, w) = geometry(x, "hflip")?;
    let mut out = x.clone();
    for i in 0..x.rows() {
        if rng.bernoulli(prob) {
            mirror(out.row_mut(i), w);
        }
    }
    Ok(out)
}

/// One primitive of an augmentation chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugOp {
    /// Shift by up to 1/8 of the side, zero fill.
    Translate { dy: isize, dx: isize },
    HFlip,
    /// Zeroes a square of side `size` with top-left corner `(top, left)`.
    Cutout { top: usize, left: usize, size: usize },
    /// Multiplies every pixel by `factor` in `[0.7, 1.3]`.
    Brightness { factor: f32 },
    /// Scales deviations from the image mean by `factor` in `[0.7, 1.3]`.
    Contrast { factor: f32 },
}

impl AugOp {
    fn sample(rng: &mut Rng, h: usize, w: usize) -> Self {
        match rng.below(5) {
            0 => {
                let r = (h.min(w) / 8).max(1) as isize;
                AugOp::Translate {
                    dy: rng.below(2 * r as usize + 1) as isize - r,
                    dx: rng.below(2 * r as usize + 1) as isize - r,
                }
            }
            1 => AugOp::HFlip,
            2 => {
                let size = (h.min(w) / 4).max(1);
                AugOp::Cutout {
                    top: rng.below(h - size + 1),
                    left: rng.below(w - size + 1),
                    size,
                }
            }
            3 => AugOp::Brightness {
                factor: rng.uniform_range(0.7, 1.3),
            },
            _ => AugOp::Contrast {
                factor: rng.uniform_range(0.7, 1.3),
            },
        }
    }

    fn apply(&self, img: &mut Vec<f32>, geo: (usize, usize, usize)) {
        let (c, h, w) = geo;
        match *self {
            AugOp::Translate { dy, dx } => *img = shift(img, geo, dy, dx),
            AugOp::HFlip => mirror(img, w),
            AugOp::Cutout { top, left, size } => {
                for ch in 0..c {
                    for i in top..(top + size).min(h) {
                        let row = ch * h * w + i * w;
                        img[row + left..row + (left + size).min(w)].fill(0.0);
                    }
                }
            }
            AugOp::Brightness { factor } => img.iter_mut().for_each(|v| *v *= factor),
            AugOp::Contrast { factor } => {
                let mean = img.iter().map(|&v| v as f64).sum::<f64>() as f32 / img.len().max(1) as f32;
                img.iter_mut().for_each(|v| *v = mean + factor * (*v - mean));
            }
        }
    }
}

/// A sampled sequence of 1 to 3 ops and the weight of the augmented image in
/// the final convex mix with the original.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentChain {
    pub ops: Vec<AugOp>,
    pub mix_weight: f32,
}

impl AugmentChain {
    pub fn sample(rng: &mut Rng, h: usize, w: usize) -> Self {
        let len = 1 + rng.below(3);
        let ops = (0..len).map(|_| AugOp::sample(rng, h, w)).collect();
        Self {
            ops,
            mix_weight: rng.uniform_range(0.4, 1.0),
        }
    }

    /// `clamp(m · chain(img) + (1 − m) · img)` for one `[C, H, W]` image.
    pub fn apply(&self, img: &[f32], geo: (usize, usize, usize)) -> Result<Vec<f32>> {
        if !(0.0..=1.0).contains(&self.mix_weight) {
            return Err(Error::contract("AugmentChain", format!("mix weight {}", self.mix_weight)));
        }
        if img.len() != geo.0 * geo.1 * geo.2 {
            return Err(Error::contract("AugmentChain", "image size does not match geometry"));
        }
        let mut aug = img.to_vec();
        for op in &self.ops {
            op.apply(&mut aug, geo);
        }
        let m = self.mix_weight;
        Ok(aug
            .iter()
            .zip(img)
            .map(|(&a, &o)| (m * a + (1.0 - m) * o).clamp(0.0, 1.0))
            .collect())
    }
}

/// Applies an independently sampled [`AugmentChain`] to every image.
pub fn mix_augment(x: &DenseArray, rng: &mut Rng) -> Result<DenseArray> {
    let geo = geometry(x, "mix_augment")?;
    let mut out = x.clone();
    for i in 0..x.rows() {
        let chain = AugmentChain::sample(rng, geo.1, geo.2);
        let img = chain.apply(x.row(i), geo)?;
        out.row_mut(i).copy_from_slice(&img);
    }
    Ok(out)
}

/// A stochastic, label-preserving batch transform.
pub trait Augmenter {
    fn augment(&self, x: &DenseArray, rng: &mut Rng) -> Result<DenseArray>;
}

/// [`mix_augment`] as an [`Augmenter`].
#[derive(Clone, Copy, Debug, Default)]
pub struct MixAugment;

impl Augmenter for MixAugment {
    fn augment(&self, x: &DenseArray, rng: &mut Rng) -> Result<DenseArray> {
        mix_augment(x, rng)
    }
}

/// Random crop with padding followed by a random horizontal flip.
#[derive(Clone, Copy, Debug)]
pub struct StandardAugment {
    pub pad: usize,
    pub flip_prob: f32,
}

impl Default for StandardAugment {
    fn default() -> Self {
        Self {
            pad: 4,
            flip_prob: 0.5,
        }
    }
}

impl Augmenter for StandardAugment {
    fn augment(&self, x: &DenseArray, rng: &mut Rng) -> Result<DenseArray> {
        let cropped = pad_crop(x, self.pad, rng)?;
        hflip(&cropped, self.flip_prob, rng)
    }
}

impl<F> Augmenter for F
where
    F: Fn(&DenseArray, &mut Rng) -> Result<DenseArray>,
{
    fn augment(&self, x: &DenseArray, rng: &mut Rng) -> Result<DenseArray> {
        self(x, rng)
    }
}

/// Applies an augmenter to every natural training batch before the attack,
/// drawing from the `(AUGMENT, epoch, batch)` stream.
pub struct AugmentHook<A: Augmenter>(pub A);

impl<A: Augmenter> BatchHook for AugmentHook<A> {
    fn before_attack(&mut self, ctx: &BatchContext<'_>, x: DenseArray, _y: &[usize]) -> Result<DenseArray> {
        self.0.augment(&x, &mut ctx.stream(stream::AUGMENT))
    }
}
