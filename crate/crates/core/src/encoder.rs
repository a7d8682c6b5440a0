//! Convolutional backbone producing per-image feature pyramids.
//!
//! Stem conv (stride 2), one residual stage (stride 2) and stride-1 residual
//! blocks give a stride-4 base map with `dim` channels; coarser levels come
//! from repeated 2x2 average pooling. Normalization is per pixel over
//! channels so a feature depends only on its receptive field.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::RgbImage;
use crate::nn::{Conv, Norm};
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};

/// Downsampling factor of the base feature map.
pub const STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub stem_width: usize,
    pub width: usize,
    /// Stride-1 residual blocks after the downsampling stage.
    pub blocks: usize,
    /// Output channels `d`.
    pub dim: usize,
    /// Pyramid levels `S`.
    pub levels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stem_width: 64,
            width: 128,
            blocks: 2,
            dim: 128,
            levels: 4,
        }
    }
}

impl EncoderConfig {
    /// Images must be divisible by this.
    pub fn divisor(&self) -> usize {
        STRIDE << (self.levels.max(1) - 1)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    c1: Conv,
    n1: Norm,
    c2: Conv,
    n2: Norm,
    shortcut: Option<Conv>,
}

impl ResBlock {
    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.c1.forward(tape, store, x)?;
        let h = self.n1.forward(tape, store, h)?;
        let h = tape.gelu(h)?;
        let h = self.c2.forward(tape, store, h)?;
        let h = self.n2.forward(tape, store, h)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(tape, store, x)?,
            None => x,
        };
        let y = tape.add(h, s)?;
        Ok(tape.gelu(y)?)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    stem: Conv,
    stem_norm: Norm,
    blocks: Vec<ResBlock>,
    head: Conv,
}

impl Encoder {
    pub fn new(config: &EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let c = config;
        if c.levels == 0 || c.dim == 0 || c.width == 0 || c.stem_width == 0 {
            return Err(Error::invalid("encoder widths, dim and levels must be positive"));
        }
        let stem = Conv::new(store, "enc.stem", 3, 3, c.stem_width, 2, true, rng)?;
        let stem_norm = Norm::new(store, "enc.stem.norm", c.stem_width)?;
        let mut blocks = vec![ResBlock {
            c1: Conv::new(store, "enc.down.c1", 3, c.stem_width, c.width, 2, false, rng)?,
            n1: Norm::new(store, "enc.down.n1", c.width)?,
            c2: Conv::new(store, "enc.down.c2", 3, c.width, c.width, 1, false, rng)?,
            n2: Norm::new(store, "enc.down.n2", c.width)?,
            shortcut: Some(Conv::new(store, "enc.down.short", 1, c.stem_width, c.width, 2, false, rng)?),
        }];
        for i in 0..c.blocks {
            let p = format!("enc.block{i}");
            blocks.push(ResBlock {
                c1: Conv::new(store, &format!("{p}.c1"), 3, c.width, c.width, 1, false, rng)?,
                n1: Norm::new(store, &format!("{p}.n1"), c.width)?,
                c2: Conv::new(store, &format!("{p}.c2"), 3, c.width, c.width, 1, false, rng)?,
                n2: Norm::new(store, &format!("{p}.n2"), c.width)?,
                shortcut: None,
            });
        }
        let head = Conv::new(store, "enc.head", 1, c.width, c.dim, 1, true, rng)?;
        Ok(Self {
            config: c.clone(),
            stem,
            stem_norm,
            blocks,
            head,
        })
    }

    /// Check that an image can be encoded into a full pyramid.
    pub fn check_size(&self, height: usize, width: usize) -> Result<()> {
        let k = self.config.divisor();
        if height == 0 || width == 0 || !height.is_multiple_of(k) || !width.is_multiple_of(k) {
            return Err(Error::invalid(format!(
                "image size {height}x{width} is not divisible by {k}; pad frames to a multiple of {k}"
            )));
        }
        Ok(())
    }

    /// Stack images into an NHWC tensor scaled to roughly [-1, 1].
    pub fn images_tensor<T: Real>(&self, images: &[&RgbImage]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| Error::invalid("no images to encode"))?;
        let (h, w) = (first.height, first.width);
        self.check_size(h, w)?;
        let mut data = Vec::with_capacity(images.len() * h * w * 3);
        for img in images {
            if (img.height, img.width) != (h, w) {
                return Err(Error::invalid("all images in a batch must share a size"));
            }
            data.extend(img.data.iter().map(|&p| T::of(p as f64 / 127.5 - 1.0)));
        }
        Ok(Tensor::new(vec![images.len(), h, w, 3], data)?)
    }

    /// Base feature maps `[B, H/4, W/4, dim]` for an NHWC batch `[B, H, W, 3]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::invalid(format!("encoder input must be [B, H, W, 3], got {s:?}")));
        }
        self.check_size(s[1], s[2])?;
        let h = self.stem.forward(tape, store, x)?;
        let h = self.stem_norm.forward(tape, store, h)?;
        let mut h = tape.gelu(h)?;
        for b in &self.blocks {
            h = b.forward(tape, store, h)?;
        }
        Ok(self.head.forward(tape, store, h)?)
    }

    /// Encode images and return every pyramid level.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, images: &[&RgbImage]) -> Result<Vec<Var>> {
        let x = tape.constant(self.images_tensor(images)?);
        let base = self.forward(tape, store, x)?;
        build_pyramid(tape, base, self.config.levels)
    }
}

/// Level 1 is `base`; each further level is a 2x2 average pool of the previous one.
pub fn build_pyramid<T: Real>(tape: &mut Tape<T>, base: Var, levels: usize) -> Result<Vec<Var>> {
    let s = tape.shape(base).to_vec();
    if levels == 0 {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    let k = 1 << (levels - 1);
    if s.len() != 4 || !s[1].is_multiple_of(k) || !s[2].is_multiple_of(k) || s[1] == 0 || s[2] == 0 {
        return Err(Error::invalid(format!("feature map {s:?} is not divisible by {k} for {levels} levels")));
    }
    let mut out = vec![base];
    for _ in 1..levels {
        let prev = *out.last().unwrap();
        out.push(tape.avg_pool2(prev)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (Encoder, ParamStore) {
        let cfg = EncoderConfig {
            stem_width: 8,
            width: 8,
            blocks: 1,
            dim: 6,
            levels: 4,
        };
        let mut store = ParamStore::new();
        let enc = Encoder::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (enc, store)
    }

    fn image(w: usize, h: usize, f: impl Fn(usize, usize, usize) -> u8) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    img.data[(y * w + x) * 3 + c] = f(x, y, c);
                }
            }
        }
        img
    }

    #[test]
    fn output_shape_is_quarter_resolution() {
        let (enc, store) = small();
        let mut tape = Tape::<f32>::inference();
        let img = image(64, 64, |x, y, c| (x * 3 + y * 5 + c * 70) as u8);
        let levels = enc.encode(&mut tape, &store, &[&img]).unwrap();
        let shapes: Vec<Vec<usize>> = levels.iter().map(|&v| tape.shape(v).to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 16, 16, 6], vec![1, 8, 8, 6], vec![1, 4, 4, 6], vec![1, 2, 2, 6]]);
        assert!(tape.value(levels[0]).is_finite());
    }

    #[test]
    fn indivisible_size_asks_for_padding() {
        let (enc, store) = small();
        let mut tape = Tape::<f32>::inference();
        let err = enc.encode(&mut tape, &store, &[&RgbImage::new(48, 64)]).unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn constant_image_gives_constant_interior() {
        let (enc, store) = small();
        let mut tape = Tape::<f32>::inference();
        let img = image(64, 64, |_, _, c| [40, 120, 200][c]);
        let base = enc.encode(&mut tape, &store, &[&img]).unwrap()[0];
        let t = tape.value(base);
        let (h, w, d) = (16, 16, 6);
        // zero padding reaches 4 cells in from the top-left and bottom-right borders
        let at = |y: usize, x: usize, c: usize| t.data()[(y * w + x) * d + c];
        for y in 4..h - 4 {
            for x in 4..w - 4 {
                for c in 0..d {
                    assert!((at(y, x, c) - at(8, 8, c)).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn single_pixel_change_stays_in_receptive_field() {
        let (enc, store) = small();
        let a = image(64, 64, |x, y, c| ((x * 7 + y * 13 + c * 31) % 251) as u8);
        let mut b = a.clone();
        let (px, py) = (30, 33);
        b.data[(py * 64 + px) * 3] ^= 0x55;
        let mut tape = Tape::<f32>::inference();
        let fa = enc.encode(&mut tape, &store, &[&a]).unwrap()[0];
        let fb = enc.encode(&mut tape, &store, &[&b]).unwrap()[0];
        // cell j sees input pixels 4j-15..=4j+15: stem and down convs reach 3,
        // then three stride-1 3x3 convs at quarter resolution add 4 each
        let radius = 15;
        let (ta, tb) = (tape.value(fa), tape.value(fb));
        let mut changed = 0;
        for y in 0..16 {
            for x in 0..16 {
                let differs = (0..6).any(|c| ta.data()[(y * 16 + x) * 6 + c] != tb.data()[(y * 16 + x) * 6 + c]);
                let cy = (4 * y) as i64 - py as i64;
                let cx = (4 * x) as i64 - px as i64;
                if differs {
                    changed += 1;
                    assert!(cx.abs() <= radius && cy.abs() <= radius, "cell ({y},{x}) changed");
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn pyramid_of_constant_is_constant_and_mean_preserving() {
        let mut tape = Tape::<f64>::new();
        let base = tape.constant(Tensor::full(&[1, 16, 16, 3], 2.5));
        let levels = build_pyramid(&mut tape, base, 4).unwrap();
        for &l in &levels {
            assert!(tape.value(l).data().iter().all(|&v| v == 2.5));
        }
        let ramp = tape.constant(Tensor::from_fn(&[1, 16, 16, 2], |i| (i as f64 * 0.37).sin()));
        let levels = build_pyramid(&mut tape, ramp, 4).unwrap();
        let means: Vec<f64> = levels
            .iter()
            .map(|&l| tape.value(l).data().iter().sum::<f64>() / tape.value(l).numel() as f64)
            .collect();
        for w in means.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-5);
        }
    }

    #[test]
    fn pyramid_rejects_indivisible() {
        let mut tape = Tape::<f32>::new();
        let base = tape.constant(Tensor::zeros(&[1, 12, 16, 3]));
        assert!(build_pyramid(&mut tape, base, 4).is_err());
    }
}
