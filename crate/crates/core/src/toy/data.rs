use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the additive pixel noise.
pub const NOISE_SIGMA: f64 = 0.05;

/// Maximum number of shapes rendered into one sample.
const MAX_SHAPES: usize = 4;

/// One image with its per-pixel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample<T> {
    /// `[3 x H x W]`, values in `[0, 1]`.
    pub image: Tensor<T>,
    /// Row-major `H x W` class ids; `0` is background.
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeCount {
    /// 1 to 4 shapes, capped by the number of foreground classes.
    Random,
    Fixed(usize),
}

#[derive(Clone, Copy)]
enum Texture {
    HorizontalStripes,
    VerticalStripes,
    Checker,
    Diagonal,
}

impl Texture {
    const ALL: [Texture; 4] = [Texture::HorizontalStripes, Texture::VerticalStripes, Texture::Checker, Texture::Diagonal];

    /// Foreground class `c >= 1` maps to a texture and a stripe period; the
    /// period grows once the texture list wraps.
    fn for_class(class: usize) -> (Texture, usize) {
        let k = class - 1;
        (Self::ALL[k % Self::ALL.len()], 2 + k / Self::ALL.len())
    }

    fn primary(self, y: usize, x: usize, period: usize) -> bool {
        match self {
            Texture::HorizontalStripes => (y / period) % 2 == 0,
            Texture::VerticalStripes => (x / period) % 2 == 0,
            Texture::Checker => (y / period + x / period) % 2 == 0,
            Texture::Diagonal => ((x + y) / period) % 2 == 0,
        }
    }
}

enum Geometry {
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
    Disc { cy: f64, cx: f64, r: f64 },
}

impl Geometry {
    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Geometry::Rect { y0, x0, y1, x1 } => (y0..y1).contains(&y) && (x0..x1).contains(&x),
            Geometry::Disc { cy, cx, r } => {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                dy * dy + dx * dx <= r * r
            }
        }
    }

    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let short = h.min(w);
        if rng.gen_bool(0.5) {
            let rh = rng.gen_range(short / 4..=short / 2).max(3).min(h);
            let rw = rng.gen_range(short / 4..=short / 2).max(3).min(w);
            let y0 = rng.gen_range(0..=h - rh);
            let x0 = rng.gen_range(0..=w - rw);
            Geometry::Rect { y0, x0, y1: y0 + rh, x1: x0 + rw }
        } else {
            let r = rng.gen_range(short as f64 / 8.0..=short as f64 / 4.0).max(2.0);
            let cy = rng.gen_range(r.min(h as f64 / 2.0)..=(h as f64 - r).max(h as f64 / 2.0));
            let cx = rng.gen_range(r.min(w as f64 / 2.0)..=(w as f64 - r).max(w as f64 / 2.0));
            Geometry::Disc { cy, cx, r }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

/// Renders 1-4 textured rectangles or discs of distinct foreground classes on
/// a flat background (class 0), then adds Gaussian noise.
///
/// Classes are told apart by texture only; colours are drawn per shape, so
/// labelling a pixel needs spatial context. The output is a pure function of
/// the arguments.
pub fn generate_sample<T: Scalar>(seed: u64, height: usize, width: usize, num_classes: usize) -> Result<SyntheticSample<T>> {
    generate_sample_with(seed, height, width, num_classes, ShapeCount::Random)
}

pub fn generate_sample_with<T: Scalar>(
    seed: u64,
    height: usize,
    width: usize,
    num_classes: usize,
    count: ShapeCount,
) -> Result<SyntheticSample<T>> {
    if height < 8 || width < 8 {
        return Err(Error::InvalidConfig(format!("sample must be at least 8x8, got {height}x{width}")));
    }
    if num_classes < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 classes, got {num_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let foreground = num_classes - 1;
    let n_shapes = match count {
        ShapeCount::Random => rng.gen_range(1..=MAX_SHAPES).min(foreground),
        ShapeCount::Fixed(n) if n <= foreground => n,
        ShapeCount::Fixed(n) => {
            return Err(Error::InvalidConfig(format!("{n} shapes need {n} distinct foreground classes, have {foreground}")))
        }
    };
    let mut classes: Vec<usize> = (1..num_classes).collect();
    classes.shuffle(&mut rng);
    classes.truncate(n_shapes);

    let plane = height * width;
    let background = random_color(&mut rng, 0.0, 1.0);
    let mut rgb = vec![0.0f64; 3 * plane];
    for (ch, &c) in background.iter().enumerate() {
        rgb[ch * plane..(ch + 1) * plane].fill(c);
    }
    let mut labels = vec![0usize; plane];

    for &class in &classes {
        let geometry = Geometry::random(&mut rng, height, width);
        let (texture, period) = Texture::for_class(class);
        let (mut light, mut dark) = (random_color(&mut rng, 0.5, 1.0), random_color(&mut rng, 0.0, 0.5));
        if rng.gen_bool(0.5) {
            std::mem::swap(&mut light, &mut dark);
        }
        let (oy, ox) = (rng.gen_range(0..period * 2), rng.gen_range(0..period * 2));
        for y in 0..height {
            for x in 0..width {
                if !geometry.contains(y, x) {
                    continue;
                }
                let color = if texture.primary(y + oy, x + ox, period) { light } else { dark };
                for (ch, &c) in color.iter().enumerate() {
                    rgb[ch * plane + y * width + x] = c;
                }
                labels[y * width + x] = class;
            }
        }
    }

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let data = rgb.into_iter().map(|v| T::lit((v + noise.sample(&mut rng)).clamp(0.0, 1.0))).collect();
    Ok(SyntheticSample { image: Tensor::from_vec(vec![3, height, width], data)?, labels, height, width, seed })
}
