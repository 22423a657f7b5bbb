//! Exposure sequences and the deterministic synthetic scene generator.

mod imageio;
mod manifest;

pub use imageio::{
    decode_pfm, decode_ppm, encode_pfm, encode_ppm, read_image, read_pfm, read_ppm, write_pfm, write_ppm,
};
pub use manifest::{load_manifest, parse_manifest, write_manifest, SequenceDescriptor};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hdr::GAMMA;
use crate::tensor::Tensor;

/// Exposure time, in seconds, of the zero-bias frame.
pub const REFERENCE_EXPOSURE: f64 = 1.0;

/// Lowest radiance the generator produces for the reference scene.
pub const RADIANCE_FLOOR: f64 = 0.02;

/// `N` LDR frames of one scene with their exposure times.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposureSequence {
    frames: Vec<Tensor<f32>>,
    exposure_times: Vec<f64>,
    ref_index: usize,
    hdr_gt: Option<Tensor<f32>>,
}

impl ExposureSequence {
    pub fn new(
        frames: Vec<Tensor<f32>>,
        exposure_times: Vec<f64>,
        ref_index: usize,
        hdr_gt: Option<Tensor<f32>>,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("a sequence needs at least one frame".into()));
        }
        if frames.len() != exposure_times.len() {
            return Err(Error::InvalidArgument(format!(
                "{} frames but {} exposure times",
                frames.len(),
                exposure_times.len()
            )));
        }
        if ref_index >= frames.len() {
            return Err(Error::InvalidArgument(format!(
                "reference index {} out of range for {} frames",
                ref_index,
                frames.len()
            )));
        }
        if let Some(t) = exposure_times.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "exposure time must be positive, got {}",
                t
            )));
        }
        let dims = frames[0].dims3()?;
        if dims[0] != 3 {
            return Err(Error::InvalidShape {
                op: "sequence",
                detail: format!("frames must be RGB (3, H, W), got {:?}", frames[0].shape()),
            });
        }
        for f in frames.iter().chain(hdr_gt.iter()) {
            if f.shape() != frames[0].shape() {
                return Err(Error::ShapeMismatch {
                    op: "sequence",
                    lhs: frames[0].shape().to_vec(),
                    rhs: f.shape().to_vec(),
                });
            }
        }
        Ok(ExposureSequence {
            frames,
            exposure_times,
            ref_index,
            hdr_gt,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Tensor<f32>] {
        &self.frames
    }

    pub fn exposure_times(&self) -> &[f64] {
        &self.exposure_times
    }

    pub fn ref_index(&self) -> usize {
        self.ref_index
    }

    pub fn reference(&self) -> &Tensor<f32> {
        &self.frames[self.ref_index]
    }

    pub fn hdr_gt(&self) -> Option<&Tensor<f32>> {
        self.hdr_gt.as_ref()
    }

    /// `(height, width)` of every frame.
    pub fn size(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[2])
    }

    /// Keep frames at `indices` (in the given order); the reference must be
    /// among them.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let ref_pos = indices
            .iter()
            .position(|&i| i == self.ref_index)
            .ok_or_else(|| Error::InvalidArgument("selection must keep the reference frame".into()))?;
        let mut frames = Vec::with_capacity(indices.len());
        let mut times = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("frame index {} out of range", i)));
            }
            frames.push(self.frames[i].clone());
            times.push(self.exposure_times[i]);
        }
        ExposureSequence::new(frames, times, ref_pos, self.hdr_gt.clone())
    }

    /// The evaluation subset of `n` frames centred on the reference: every
    /// other frame when that fits, otherwise consecutive frames. For a
    /// seven-frame sequence this gives `{1, 3, 5}`, `{1..=5}` and `{0..=6}`.
    pub fn centered_subset(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot take {} frames from a sequence of {}",
                n,
                self.len()
            )));
        }
        let r = self.ref_index as isize;
        let len = self.len() as isize;
        // an even count leans after the reference when it can, else before
        let lean = [((n - 1) / 2, n / 2), (n / 2, (n - 1) / 2)];
        let strides: &[isize] = if n < self.len() { &[2, 1] } else { &[1] };
        let window = strides
            .iter()
            .flat_map(|&s| lean.iter().map(move |&(b, a)| (s, b as isize, a as isize)))
            .find(|&(s, b, a)| r - b * s >= 0 && r + a * s < len)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "{} frames do not fit around reference {} of {}",
                    n,
                    self.ref_index,
                    self.len()
                ))
            })?;
        let (stride, before, after) = window;
        let indices: Vec<usize> = (-before..=after).map(|k| (r + k * stride) as usize).collect();
        self.select(&indices)
    }

    /// A random `n`-frame subset containing the reference, in original order.
    pub fn random_subset(&self, n: usize, rng: &mut impl Rng) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot take {} frames from a sequence of {}",
                n,
                self.len()
            )));
        }
        let mut others: Vec<usize> = (0..self.len()).filter(|&i| i != self.ref_index).collect();
        others.shuffle(rng);
        let mut keep: Vec<usize> = others[..n - 1].to_vec();
        keep.push(self.ref_index);
        keep.sort_unstable();
        self.select(&keep)
    }

    /// Frames in a random order; the reference frame moves with its frame.
    pub fn shuffled(&self, rng: &mut impl Rng) -> Result<Self> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        self.select(&order)
    }

    pub fn reversed(&self) -> Result<Self> {
        let order: Vec<usize> = (0..self.len()).rev().collect();
        self.select(&order)
    }

    /// The same window of every frame and of the ground truth.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        let frames = self
            .frames
            .iter()
            .map(|f| f.crop(top, left, height, width))
            .collect::<Result<Vec<_>>>()?;
        let gt = self
            .hdr_gt
            .as_ref()
            .map(|g| g.crop(top, left, height, width))
            .transpose()?;
        ExposureSequence::new(frames, self.exposure_times.clone(), self.ref_index, gt)
    }
}

/// Parameters of one synthetic scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_blobs: usize,
    /// Exposure offsets in stops, ascending.
    pub exposure_biases: Vec<f64>,
    /// Displacement of the moving blob per frame step, in pixels.
    pub motion_amplitude: f64,
    pub quantize_8bit: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            height: 64,
            width: 64,
            num_blobs: 6,
            exposure_biases: vec![-2.0, 0.0, 2.0],
            motion_amplitude: 3.0,
            quantize_8bit: true,
        }
    }
}

impl SceneSpec {
    /// Symmetric biases for `n` frames: two stops apart for up to three
    /// frames, one stop apart beyond that.
    pub fn biases_for(n: usize) -> Vec<f64> {
        let step = if n <= 3 { 2.0 } else { 1.0 };
        let mid = (n as f64 - 1.0) / 2.0;
        (0..n).map(|k| (k as f64 - mid) * step).collect()
    }

    pub fn with_frames(mut self, n: usize) -> Self {
        self.exposure_biases = Self::biases_for(n);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("scene size must be positive".into()));
        }
        if self.exposure_biases.is_empty() {
            return Err(Error::InvalidArgument("scene needs at least one exposure".into()));
        }
        if self
            .exposure_biases
            .windows(2)
            .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
        {
            return Err(Error::InvalidArgument(
                "exposure biases must be strictly ascending".into(),
            ));
        }
        if !(self.motion_amplitude >= 0.0 && self.motion_amplitude.is_finite()) {
            return Err(Error::InvalidArgument("motion amplitude must be non-negative".into()));
        }
        Ok(())
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    inv_two_sigma2: f64,
    color: [f64; 3],
}

struct Scene {
    base: [[f64; 3]; 3],
    blobs: Vec<Blob>,
    direction: (f64, f64),
    height: usize,
    width: usize,
}

impl Scene {
    fn sample(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut base = [[0.0; 3]; 3];
        for channel in base.iter_mut() {
            *channel = [
                rng.random_range(0.05..0.3),
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
            ];
        }
        let size = spec.height.min(spec.width) as f64;
        let blobs = (0..spec.num_blobs)
            .map(|_| {
                let sigma = rng.random_range(0.05..0.2) * size;
                let peak = rng.random_range(0.5..2.0);
                Blob {
                    cx: rng.random_range(0.0..spec.width as f64),
                    cy: rng.random_range(0.0..spec.height as f64),
                    inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
                    color: [(); 3].map(|_| peak * rng.random_range(0.2..1.0)),
                }
            })
            .collect();
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        Scene {
            base,
            blobs,
            direction: (angle.cos(), angle.sin()),
            height: spec.height,
            width: spec.width,
        }
    }

    /// Unnormalized radiance with the first blob displaced by `shift` pixels.
    fn raw(&self, shift: f64) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let u = if w > 1 { x as f64 / (w - 1) as f64 } else { 0.0 };
                let v = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
                let mut px = [0.0; 3];
                for (c, p) in px.iter_mut().enumerate() {
                    let [a, b, d] = self.base[c];
                    *p = a + b * u + d * v;
                }
                for (j, blob) in self.blobs.iter().enumerate() {
                    let (ox, oy) = if j == 0 {
                        (shift * self.direction.0, shift * self.direction.1)
                    } else {
                        (0.0, 0.0)
                    };
                    let dx = x as f64 - blob.cx - ox;
                    let dy = y as f64 - blob.cy - oy;
                    let g = (-(dx * dx + dy * dy) * blob.inv_two_sigma2).exp();
                    for (p, col) in px.iter_mut().zip(blob.color) {
                        *p += col * g;
                    }
                }
                for (c, p) in px.iter().enumerate() {
                    out[(c * h + y) * w + x] = *p;
                }
            }
        }
        out
    }
}

fn quantize(v: f64) -> f32 {
    (v * 255.0).round() as f32 / 255.0
}

/// Render a synthetic multi-exposure sequence.
///
/// The radiance map is a smooth per-channel gradient plus Gaussian blobs,
/// normalized to `[RADIANCE_FLOOR, 1]` at the reference frame. The first blob
/// moves by `motion_amplitude` pixels per frame step; the ground truth shows it
/// where the reference frame (the middle one) sees it. Each frame is the
/// radiance scaled by its relative exposure, gamma-encoded with `1 / 2.2` and
/// clipped to `[0, 1]`.
pub fn generate(spec: &SceneSpec) -> Result<ExposureSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene = Scene::sample(spec, &mut rng);
    let n = spec.exposure_biases.len();
    let ref_index = n / 2;
    let shape = [3, spec.height, spec.width];

    let reference = scene.raw(0.0);
    let lo = reference.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let normalize = |raw: f64| (RADIANCE_FLOOR + (1.0 - RADIANCE_FLOOR) * (raw - lo) / span).max(0.0);

    let gt = Tensor::new(shape, reference.iter().map(|&r| normalize(r) as f32).collect())?;
    let mut frames = Vec::with_capacity(n);
    let mut times = Vec::with_capacity(n);
    for (k, &bias) in spec.exposure_biases.iter().enumerate() {
        let relative = 2f64.powf(bias);
        let shift = spec.motion_amplitude * (k as f64 - ref_index as f64);
        let raw = if shift == 0.0 {
            reference.clone()
        } else {
            scene.raw(shift)
        };
        let data = raw
            .iter()
            .map(|&r| {
                let v = (normalize(r) * relative).powf(1.0 / GAMMA).clamp(0.0, 1.0);
                if spec.quantize_8bit {
                    quantize(v)
                } else {
                    v as f32
                }
            })
            .collect();
        frames.push(Tensor::new(shape, data)?);
        times.push(REFERENCE_EXPOSURE * relative);
    }
    ExposureSequence::new(frames, times, ref_index, Some(gt))
}

/// `count` scenes with consecutive seeds starting at `seed`.
pub fn generate_set(template: &SceneSpec, seed: u64, count: usize) -> Result<Vec<ExposureSequence>> {
    (0..count)
        .map(|i| {
            let spec = SceneSpec {
                seed: seed.wrapping_add(i as u64),
                ..template.clone()
            };
            generate(&spec)
        })
        .collect()
}
