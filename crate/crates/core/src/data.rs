//! Seeded synthetic shape datasets and batch augmentation.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Labels {
    /// One class per image.
    Class(Vec<usize>),
    /// One class per pixel, `N·H·W` entries in image-major order.
    Mask(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N,H,W,C]`, values in `[0,1]`.
    pub images: Tensor<f32>,
    pub labels: Labels,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Labels, classes: usize, split: Split) -> Result<Self> {
        let [n, h, w, _] = *images.shape() else {
            return Err(Error::Rank {
                op: "dataset images",
                expected: 4,
                shape: images.shape().to_vec(),
            });
        };
        let (count, values) = match &labels {
            Labels::Class(l) => (n, l),
            Labels::Mask(l) => (n * h * w, l),
        };
        if values.len() != count {
            return Err(Error::invalid(format!(
                "{} labels for {n} images of {h}x{w}",
                values.len()
            )));
        }
        if let Some(&bad) = values.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(H, W, C)` of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn is_segmentation(&self) -> bool {
        matches!(self.labels, Labels::Mask(_))
    }

    /// Copies the images and labels at `indices` into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let (h, w, c) = self.image_dims();
        let per = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::new();
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            match &self.labels {
                Labels::Class(l) => labels.push(l[i]),
                Labels::Mask(l) => labels.extend_from_slice(&l[i * h * w..(i + 1) * h * w]),
            }
        }
        let images = Tensor::new(&[indices.len(), h, w, c], data).expect("batch shape");
        (images, labels)
    }
}

/// Primitive shapes, in class order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Cross,
    Disc,
    HollowSquare,
    Ring,
    Triangle,
    Saltire,
    Tee,
}

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Square,
        Shape::Cross,
        Shape::Disc,
        Shape::HollowSquare,
        Shape::Ring,
        Shape::Triangle,
        Shape::Saltire,
        Shape::Tee,
    ];

    /// Whether the pixel offset `(dy, dx)` from the center lies inside a
    /// shape of half-extent `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        let (ay, ax) = (dy.abs(), dx.abs());
        let arm = (r / 3.0).max(0.5);
        let in_box = ay <= r && ax <= r;
        match self {
            Shape::Square => in_box,
            Shape::Cross => (ay <= arm && ax <= r) || (ax <= arm && ay <= r),
            Shape::Disc => dy * dy + dx * dx <= r * r,
            Shape::HollowSquare => in_box && (ay > r - 1.5 || ax > r - 1.5),
            Shape::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && d2 > (r - 1.5) * (r - 1.5)
            }
            Shape::Triangle => ay <= r && ax <= (dy + r) / 2.0 + 0.25,
            Shape::Saltire => in_box && (ay - ax).abs() <= 0.75,
            Shape::Tee => in_box && (dy <= -r + 2.0 || ax <= arm),
        }
    }
}

/// Geometry of one rendered shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub shape: Shape,
    pub cy: usize,
    pub cx: usize,
    pub radius: f64,
}

/// Binary mask (`hw×hw`, row-major) of an optional shape; `None` renders an
/// empty canvas.
pub fn render_mask(hw: usize, placement: Option<&Placement>) -> Vec<bool> {
    let mut mask = vec![false; hw * hw];
    if let Some(p) = placement {
        for y in 0..hw {
            for x in 0..hw {
                let dy = y as f64 - p.cy as f64;
                let dx = x as f64 - p.cx as f64;
                mask[y * hw + x] = p.shape.contains(dy, dx, p.radius);
            }
        }
    }
    mask
}

const RADII: [f64; 5] = [2.5, 3.0, 3.5, 4.0, 4.5];

fn random_placement(rng: &mut ChaCha8Rng, shape: Shape, hw: usize) -> Placement {
    // radii whose shape leaves room to move on the canvas
    let fits = RADII.iter().take_while(|&&r| 2 * (libm::ceil(r) as usize) < hw).count();
    let radius = RADII[rng.random_range(0..fits)];
    let margin = libm::ceil(radius) as usize;
    let span = hw - 2 * margin;
    Placement {
        shape,
        cy: margin + rng.random_range(0..span),
        cx: margin + rng.random_range(0..span),
        radius,
    }
}

fn mask_hash(mask: &[bool]) -> u64 {
    // FNV-1a over the bit pattern
    mask.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

fn check_args(hw: usize, k_classes: usize) -> Result<()> {
    if hw < 8 {
        return Err(Error::config("image_size", "synthetic images need at least 8x8 pixels"));
    }
    if !(2..=8).contains(&k_classes) {
        return Err(Error::config("classes", format!("{k_classes} not in 2..=8")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct GenParams {
    hw: usize,
    noise: f64,
    segmentation: bool,
    k_classes: usize,
}

fn generate(
    rng: &mut ChaCha8Rng,
    n: usize,
    p: GenParams,
    split: Split,
    exclude: &mut BTreeSet<u64>,
    record: bool,
) -> Result<Dataset> {
    let hw = p.hw;
    let shapes = if p.segmentation { p.k_classes - 1 } else { p.k_classes };
    let mut images = Vec::with_capacity(n * hw * hw);
    let mut class_labels = Vec::new();
    let mut mask_labels = Vec::new();
    for i in 0..n {
        let class = i % shapes;
        let shape = Shape::ALL[class];
        let mut attempts = 0;
        let mask = loop {
            let pl = random_placement(rng, shape, hw);
            let mask = render_mask(hw, Some(&pl));
            let h = mask_hash(&mask) ^ (class as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            if record {
                exclude.insert(h);
                break mask;
            }
            if !exclude.contains(&h) {
                break mask;
            }
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::invalid("cannot draw a test shape disjoint from the training split"));
            }
        };
        let intensity = 0.7 + 0.3 * rng.random::<f64>();
        for &m in &mask {
            let z: f64 = rng.sample(StandardNormal);
            let v = if m { intensity } else { 0.0 } + p.noise * z;
            images.push(v.clamp(0.0, 1.0) as f32);
        }
        if p.segmentation {
            mask_labels.extend(mask.iter().map(|&m| if m { class + 1 } else { 0 }));
        } else {
            class_labels.push(class);
        }
    }
    let order = {
        let mut o: Vec<usize> = (0..n).collect();
        o.shuffle(rng);
        o
    };
    let per = hw * hw;
    let images = order
        .iter()
        .flat_map(|&i| images[i * per..(i + 1) * per].iter().copied())
        .collect();
    let labels = if p.segmentation {
        Labels::Mask(order.iter().flat_map(|&i| mask_labels[i * per..(i + 1) * per].iter().copied()).collect())
    } else {
        Labels::Class(order.iter().map(|&i| class_labels[i]).collect())
    };
    Dataset::new(Tensor::new(&[n, hw, hw, 1], images)?, labels, p.k_classes, split)
}

fn gen_pair(
    n_train: usize,
    n_test: usize,
    p: GenParams,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    check_args(p.hw, p.k_classes)?;
    if n_train == 0 {
        return Err(Error::invalid("dataset size must be positive"));
    }
    let mut seen = BTreeSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = generate(&mut rng, n_train, p, Split::Train, &mut seen, true)?;
    rng.set_stream(1);
    let test = if n_test > 0 {
        generate(&mut rng, n_test, p, Split::Test, &mut seen, false)?
    } else {
        train.clone()
    };
    Ok((train, test))
}

/// Classification set: image `i` shows shape `i mod k` (classes balanced),
/// randomly placed and sized, scaled by a random intensity, plus Gaussian
/// noise of standard deviation `noise`, clamped to `[0,1]`.
pub fn gen_shapes_classification(n: usize, hw: usize, k_classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    Ok(gen_shapes_classification_split(n, 0, hw, k_classes, noise, seed)?.0)
}

/// Train and test sets whose noise-free shape masks never coincide.
pub fn gen_shapes_classification_split(
    n_train: usize,
    n_test: usize,
    hw: usize,
    k_classes: usize,
    noise: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let p = GenParams {
        hw,
        noise,
        segmentation: false,
        k_classes,
    };
    gen_pair(n_train, n_test, p, seed)
}

/// Segmentation set: one shape per image; the label map is the rendered mask
/// with shape class `c ≥ 1` on the shape and 0 elsewhere. `k_classes`
/// includes the background.
pub fn gen_shapes_segmentation(n: usize, hw: usize, k_classes: usize, seed: u64) -> Result<Dataset> {
    Ok(gen_shapes_segmentation_split(n, 0, hw, k_classes, 0.0, seed)?.0)
}

pub fn gen_shapes_segmentation_split(
    n_train: usize,
    n_test: usize,
    hw: usize,
    k_classes: usize,
    noise: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let p = GenParams {
        hw,
        noise,
        segmentation: true,
        k_classes,
    };
    gen_pair(n_train, n_test, p, seed)
}

/// Random horizontal flip and/or a random shift of up to two pixels with zero
/// fill (a pad-2 random crop), applied per image. Masks follow their images;
/// vacated mask pixels become background.
pub fn augment(
    images: &mut Tensor<f32>,
    masks: Option<&mut [usize]>,
    flip: bool,
    crop: bool,
    rng: &mut ChaCha8Rng,
) {
    if !flip && !crop {
        return;
    }
    let s = images.shape().to_vec();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut masks = masks;
    for i in 0..n {
        let do_flip = flip && rng.random::<bool>();
        let (sy, sx) = if crop {
            (rng.random_range(-2i32..=2), rng.random_range(-2i32..=2))
        } else {
            (0, 0)
        };
        let src = |y: usize, x: usize| -> Option<(usize, usize)> {
            let yy = y as i32 + sy;
            let xx = x as i32 + sx;
            if yy < 0 || xx < 0 || yy >= h as i32 || xx >= w as i32 {
                return None;
            }
            let xx = if do_flip { w - 1 - xx as usize } else { xx as usize };
            Some((yy as usize, xx))
        };
        let per = h * w * c;
        let img = images.data()[i * per..(i + 1) * per].to_vec();
        let out = &mut images.data_mut()[i * per..(i + 1) * per];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(y * w + x) * c + ch] = match src(y, x) {
                        Some((yy, xx)) => img[(yy * w + xx) * c + ch],
                        None => 0.0,
                    };
                }
            }
        }
        if let Some(m) = masks.as_deref_mut() {
            let orig = m[i * h * w..(i + 1) * h * w].to_vec();
            let dst = &mut m[i * h * w..(i + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = src(y, x).map_or(0, |(yy, xx)| orig[yy * w + xx]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = gen_shapes_classification(103, 16, 4, 0.2, 9).unwrap();
        let b = gen_shapes_classification(103, 16, 4, 0.2, 9).unwrap();
        assert_eq!(a, b);
        let Labels::Class(l) = &a.labels else { panic!() };
        let mut hist = [0usize; 4];
        l.iter().for_each(|&c| hist[c] += 1);
        let (lo, hi) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
        assert!(hi - lo <= 1, "{hist:?}");
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_arguments() {
        assert!(gen_shapes_classification(10, 16, 1, 0.0, 0).is_err());
        assert!(gen_shapes_classification(10, 16, 9, 0.0, 0).is_err());
        assert!(gen_shapes_classification(10, 7, 2, 0.0, 0).is_err());
        assert!(gen_shapes_classification(0, 16, 2, 0.0, 0).is_err());
        assert!(gen_shapes_segmentation(10, 16, 1, 0).is_err());
    }

    #[test]
    fn smallest_canvas_generates_every_class() {
        for k in 2..=8 {
            let d = gen_shapes_classification(40, 8, k, 0.0, 1).unwrap();
            assert_eq!(d.image_dims(), (8, 8, 1));
        }
        let (_, test) = gen_shapes_classification_split(8, 4, 8, 4, 0.0, 1).unwrap();
        assert_eq!(test.len(), 4);
        // only a handful of distinct placements fit on 8x8
        assert!(gen_shapes_classification_split(400, 400, 8, 2, 0.0, 1).is_err());
        assert!(gen_shapes_segmentation(10, 8, 8, 2).is_ok());
    }

    #[test]
    fn empty_canvas_is_background() {
        assert!(render_mask(16, None).iter().all(|&m| !m));
    }

    #[test]
    fn segmentation_labels_match_masks() {
        let d = gen_shapes_segmentation(24, 16, 4, 3).unwrap();
        let Labels::Mask(m) = &d.labels else { panic!() };
        // noise-free: labelled pixels are exactly the lit pixels
        for (px, &l) in d.images.data().iter().zip(m) {
            assert_eq!(l != 0, *px > 0.0);
        }
    }

    #[test]
    fn augmentation_moves_masks_with_images() {
        let d = gen_shapes_segmentation(8, 16, 3, 5).unwrap();
        let (mut imgs, mut labels) = d.batch(&(0..8).collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        augment(&mut imgs, Some(&mut labels), true, true, &mut rng);
        for (px, &l) in imgs.data().iter().zip(&labels) {
            assert_eq!(l != 0, *px > 0.0);
        }
    }
}
