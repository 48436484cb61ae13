//! Synthetic schematic-face dataset.
//!
//! Class identity is encoded purely in landmark geometry (eye separation and
//! height, nose and mouth placement, mouth width, jaw width), so geometric
//! attacks are meaningful while the dataset stays fully self-contained.
//! Rendering draws anti-aliased polylines along the jaw/brow/mouth chains and
//! filled soft ellipses for eyes and nose, and returns the jittered landmarks
//! as ground truth.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{norm_to_pixel, Image, NormalizedPoint};
use crate::tps::LandmarkSet;

/// Landmark layout: a compact 23-point scheme for fast experiments and a
/// 68-point scheme with the conventional five-region group sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandmarkLayout {
    /// 23 points: 7 jaw, 4 + 4 eyes/brows, 3 nose, 5 mouth.
    Compact,
    /// 68 points: 17 jaw, 11 + 11 eyes/brows, 9 nose, 20 mouth.
    PaperLike,
}

impl LandmarkLayout {
    pub fn group_sizes(&self) -> [usize; 5] {
        match self {
            LandmarkLayout::Compact => [7, 4, 4, 3, 5],
            LandmarkLayout::PaperLike => [17, 11, 11, 9, 20],
        }
    }

    pub fn num_landmarks(&self) -> usize {
        self.group_sizes().iter().sum()
    }
}

impl std::str::FromStr for LandmarkLayout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compact" => Ok(LandmarkLayout::Compact),
            "paperlike" => Ok(LandmarkLayout::PaperLike),
            other => Err(Error::Config(format!("unknown layout {other:?}"))),
        }
    }
}

/// The six geometric parameters that define a class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    /// Distance between the two eye centers.
    pub eye_sep: f64,
    /// Vertical position of the eye centers (negative is up).
    pub eye_v: f64,
    /// Vertical position of the nose base.
    pub nose_v: f64,
    /// Mouth width.
    pub mouth_w: f64,
    /// Vertical position of the mouth center.
    pub mouth_v: f64,
    /// Half-width of the jaw arc.
    pub jaw_w: f64,
}

/// Per-parameter sampling ranges, shared by the generator and the margin
/// normalization.
const PARAM_RANGES: [(f64, f64); 6] = [
    (0.36, 0.62),   // eye_sep
    (-0.44, -0.24), // eye_v
    (0.02, 0.20),   // nose_v
    (0.26, 0.50),   // mouth_w
    (0.38, 0.58),   // mouth_v
    (0.55, 0.78),   // jaw_w
];

/// Minimum pairwise distance between class parameter vectors after scaling
/// each parameter to [0, 1].
pub const DEFAULT_CLASS_MARGIN: f64 = 0.35;

impl FaceParams {
    fn to_array(self) -> [f64; 6] {
        [self.eye_sep, self.eye_v, self.nose_v, self.mouth_w, self.mouth_v, self.jaw_w]
    }

    fn scaled_distance(&self, other: &FaceParams) -> f64 {
        let a = self.to_array();
        let b = other.to_array();
        let mut s = 0.0;
        for i in 0..6 {
            let (lo, hi) = PARAM_RANGES[i];
            let d = (a[i] - b[i]) / (hi - lo);
            s += d * d;
        }
        s.sqrt()
    }

    fn sample(rng: &mut ChaCha8Rng) -> FaceParams {
        let mut v = [0.0; 6];
        for (i, (lo, hi)) in PARAM_RANGES.iter().enumerate() {
            v[i] = rng.gen_range(*lo..*hi);
        }
        FaceParams {
            eye_sep: v[0],
            eye_v: v[1],
            nose_v: v[2],
            mouth_w: v[3],
            mouth_v: v[4],
            jaw_w: v[5],
        }
    }
}

/// A class prototype: canonical landmarks plus the parameters they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTemplate {
    pub class_id: usize,
    pub landmarks: LandmarkSet,
    pub params: FaceParams,
    pub layout: LandmarkLayout,
}

/// Jitter applied when rendering samples from a template.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    /// Rotation bound in degrees.
    pub rot_deg: f64,
    /// Relative scale bound (0.05 means +-5%).
    pub scale: f64,
    /// Translation bound in normalized units.
    pub translation: f64,
    /// Per-landmark Gaussian noise sigma.
    pub noise_sigma: f64,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self { rot_deg: 5.0, scale: 0.05, translation: 0.05, noise_sigma: 0.005 }
    }
}

impl JitterParams {
    pub fn none() -> Self {
        Self { rot_deg: 0.0, scale: 0.0, translation: 0.0, noise_sigma: 0.0 }
    }
}

/// One rendered sample with its ground-truth landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub landmarks: LandmarkSet,
    pub class_id: usize,
    pub sample_id: u32,
}

fn snap_points(points: &mut [NormalizedPoint]) {
    for p in points {
        p.u = p.u as f32 as f64;
        p.v = p.v as f32 as f64;
    }
}

/// Builds the canonical landmark list for a parameter vector. Points are
/// emitted group-major: jaw, right eye+brow, left eye+brow, nose, mouth.
fn canonical_landmarks(p: &FaceParams, layout: LandmarkLayout) -> (Vec<NormalizedPoint>, Vec<u8>) {
    let sizes = layout.group_sizes();
    let mut pts: Vec<NormalizedPoint> = Vec::with_capacity(layout.num_landmarks());
    let mut groups: Vec<u8> = Vec::with_capacity(layout.num_landmarks());

    // Group 1: jaw arc, left ear over the chin to the right ear.
    let n_jaw = sizes[0];
    for i in 0..n_jaw {
        let t = i as f64 / (n_jaw - 1) as f64;
        let theta = std::f64::consts::PI * t;
        pts.push(NormalizedPoint::new(-p.jaw_w * theta.cos(), -0.05 + 0.8 * theta.sin()));
        groups.push(1);
    }

    // Groups 2 and 3: eye + brow, mirrored about u = 0.
    let right_eye = eye_group_points(p, layout);
    for q in &right_eye {
        pts.push(*q);
        groups.push(2);
    }
    for q in &right_eye {
        pts.push(NormalizedPoint::new(-q.u, q.v));
        groups.push(3);
    }

    // Group 4: nose.
    match layout {
        LandmarkLayout::Compact => {
            pts.push(NormalizedPoint::new(0.0, p.nose_v - 0.22));
            pts.push(NormalizedPoint::new(-0.09, p.nose_v));
            pts.push(NormalizedPoint::new(0.09, p.nose_v));
            groups.extend([4, 4, 4]);
        }
        LandmarkLayout::PaperLike => {
            for i in 0..4 {
                let t = i as f64 / 3.0;
                pts.push(NormalizedPoint::new(0.0, p.nose_v - 0.26 + 0.21 * t));
                groups.push(4);
            }
            for (du, dv) in [(-0.10, 0.0), (-0.05, 0.025), (0.0, 0.035), (0.05, 0.025), (0.10, 0.0)]
            {
                pts.push(NormalizedPoint::new(du, p.nose_v + dv));
                groups.push(4);
            }
        }
    }

    // Group 5: mouth outline.
    let hw = p.mouth_w / 2.0;
    match layout {
        LandmarkLayout::Compact => {
            pts.push(NormalizedPoint::new(-hw, p.mouth_v));
            pts.push(NormalizedPoint::new(0.0, p.mouth_v - 0.05));
            pts.push(NormalizedPoint::new(hw, p.mouth_v));
            pts.push(NormalizedPoint::new(hw / 2.0, p.mouth_v + 0.06));
            pts.push(NormalizedPoint::new(-hw / 2.0, p.mouth_v + 0.06));
            groups.extend([5, 5, 5, 5, 5]);
        }
        LandmarkLayout::PaperLike => {
            // Outer lip: 12 points around an ellipse starting at the left
            // corner; inner lip: 8 points on a smaller one.
            for i in 0..12 {
                let a = std::f64::consts::TAU * i as f64 / 12.0;
                pts.push(NormalizedPoint::new(-hw * a.cos(), p.mouth_v - 0.055 * a.sin()));
                groups.push(5);
            }
            for i in 0..8 {
                let a = std::f64::consts::TAU * i as f64 / 8.0;
                pts.push(NormalizedPoint::new(-hw * 0.65 * a.cos(), p.mouth_v - 0.028 * a.sin()));
                groups.push(5);
            }
        }
    }

    snap_points(&mut pts);
    (pts, groups)
}

/// Right-eye group points relative to the face; the left eye is the mirror.
fn eye_group_points(p: &FaceParams, layout: LandmarkLayout) -> Vec<NormalizedPoint> {
    let cu = -p.eye_sep / 2.0;
    let cv = p.eye_v;
    match layout {
        LandmarkLayout::Compact => vec![
            // brow outer, brow inner, eye outer corner, eye inner corner
            NormalizedPoint::new(cu - 0.14, cv - 0.13),
            NormalizedPoint::new(cu + 0.12, cv - 0.15),
            NormalizedPoint::new(cu - 0.11, cv),
            NormalizedPoint::new(cu + 0.11, cv),
        ],
        LandmarkLayout::PaperLike => {
            let mut v = Vec::with_capacity(11);
            for i in 0..5 {
                let t = i as f64 / 4.0;
                let arch = -0.035 * (std::f64::consts::PI * t).sin();
                v.push(NormalizedPoint::new(cu - 0.16 + 0.32 * t, cv - 0.12 + arch));
            }
            for i in 0..6 {
                let a = std::f64::consts::TAU * i as f64 / 6.0;
                v.push(NormalizedPoint::new(cu - 0.11 * a.cos(), cv - 0.05 * a.sin()));
            }
            v
        }
    }
}

/// Generates `n_classes` templates whose parameter vectors keep a minimum
/// pairwise margin (rejection sampling). Deterministic in the seed.
pub fn make_classes(
    n_classes: usize,
    layout: LandmarkLayout,
    seed: u64,
) -> Result<Vec<FaceTemplate>> {
    make_classes_with_margin(n_classes, layout, seed, DEFAULT_CLASS_MARGIN)
}

pub fn make_classes_with_margin(
    n_classes: usize,
    layout: LandmarkLayout,
    seed: u64,
    margin: f64,
) -> Result<Vec<FaceTemplate>> {
    if n_classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<FaceParams> = Vec::with_capacity(n_classes);
    let max_draws = 2000 * n_classes;
    let mut draws = 0;
    while chosen.len() < n_classes {
        if draws >= max_draws {
            return Err(Error::Config(format!(
                "could not place {n_classes} classes with margin {margin} after {draws} draws; \
                 try fewer classes or a smaller margin"
            )));
        }
        draws += 1;
        let cand = FaceParams::sample(&mut rng);
        if chosen.iter().all(|c| c.scaled_distance(&cand) >= margin) {
            chosen.push(cand);
        }
    }

    chosen
        .into_iter()
        .enumerate()
        .map(|(class_id, params)| {
            let (pts, groups) = canonical_landmarks(&params, layout);
            debug_assert!(pts.iter().all(|q| q.u.abs() <= 0.9 && q.v.abs() <= 0.9));
            Ok(FaceTemplate {
                class_id,
                landmarks: LandmarkSet::new(pts, groups)?,
                params,
                layout,
            })
        })
        .collect()
}

/// Renders one jittered sample from a template.
///
/// A pure function of its arguments: the seeded generator drives the global
/// similarity transform and the per-landmark noise, and the rasterization is
/// deterministic. Pixels and landmarks are snapped to single precision so
/// samples round-trip bit-exactly through the dataset file.
pub fn render(
    template: &FaceTemplate,
    jitter: &JitterParams,
    size: usize,
    sample_id: u32,
    seed: u64,
) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounded = |rng: &mut ChaCha8Rng, b: f64| if b > 0.0 { rng.gen_range(-b..b) } else { 0.0 };
    let rot = bounded(&mut rng, jitter.rot_deg).to_radians();
    let scale = 1.0 + bounded(&mut rng, jitter.scale);
    let tu = bounded(&mut rng, jitter.translation);
    let tv = bounded(&mut rng, jitter.translation);
    let noise = if jitter.noise_sigma > 0.0 {
        Some(Normal::new(0.0, jitter.noise_sigma).expect("valid sigma"))
    } else {
        None
    };

    let (sin, cos) = rot.sin_cos();
    let mut points: Vec<NormalizedPoint> = template
        .landmarks
        .points()
        .iter()
        .map(|p| {
            let (su, sv) = (p.u * scale, p.v * scale);
            let mut u = cos * su - sin * sv + tu;
            let mut v = sin * su + cos * sv + tv;
            if let Some(n) = &noise {
                u += n.sample(&mut rng);
                v += n.sample(&mut rng);
            }
            NormalizedPoint::new(u, v)
        })
        .collect();
    snap_points(&mut points);

    let mut img = Image::new(size, size, 1)?;
    let bg = 0.93;
    for r in 0..size {
        for c in 0..size {
            img.set(r, c, 0, bg);
        }
    }
    rasterize(&mut img, &points, template.layout);
    img.snap_to_f32();

    Ok(Sample {
        image: img,
        landmarks: LandmarkSet::new(points, template.landmarks.groups().to_vec())?,
        class_id: template.class_id,
        sample_id,
    })
}

// --- rasterization -----------------------------------------------------------

fn rasterize(img: &mut Image, pts: &[NormalizedPoint], layout: LandmarkLayout) {
    let sizes = layout.group_sizes();
    let start: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, s| {
            let v = *acc;
            *acc += s;
            Some(v)
        })
        .collect();
    let g = |gi: usize, j: usize| pts[start[gi] + j];
    let stroke = 0.18;

    // Jaw chain.
    for j in 0..sizes[0] - 1 {
        draw_segment(img, g(0, j), g(0, j + 1), 0.8, stroke);
    }

    match layout {
        LandmarkLayout::Compact => {
            for eye in [1, 2] {
                // Brow segment, then the eye ellipse between the corners.
                draw_segment(img, g(eye, 0), g(eye, 1), 0.7, stroke);
                let (outer, inner) = (g(eye, 2), g(eye, 3));
                let cu = (outer.u + inner.u) / 2.0;
                let cv = (outer.v + inner.v) / 2.0;
                let ru = ((outer.u - inner.u).abs() / 2.0).max(1e-3);
                draw_ellipse(img, cu, cv, ru, 0.45 * ru, 0.25);
            }
            // Nose: soft ellipse spanning the three nose points.
            let (tip, l, r) = (g(3, 0), g(3, 1), g(3, 2));
            let cu = (l.u + r.u) / 2.0;
            let cv = (tip.v + (l.v + r.v) / 2.0) / 2.0;
            let ru = ((r.u - l.u).abs() / 2.0).max(1e-3);
            let rv = (((l.v + r.v) / 2.0 - tip.v).abs() / 2.0).max(1e-3);
            draw_ellipse(img, cu, cv, ru, rv, 0.55);
            // Mouth: closed pentagon chain.
            for j in 0..sizes[4] {
                draw_segment(img, g(4, j), g(4, (j + 1) % sizes[4]), 0.8, stroke);
            }
        }
        LandmarkLayout::PaperLike => {
            for eye in [1, 2] {
                for j in 0..4 {
                    draw_segment(img, g(eye, j), g(eye, j + 1), 0.7, stroke);
                }
                let (lo_u, hi_u) = group_extent(pts, start[eye] + 5, 6, |p| p.u);
                let (lo_v, hi_v) = group_extent(pts, start[eye] + 5, 6, |p| p.v);
                draw_ellipse(
                    img,
                    (lo_u + hi_u) / 2.0,
                    (lo_v + hi_v) / 2.0,
                    ((hi_u - lo_u) / 2.0).max(1e-3),
                    ((hi_v - lo_v) / 2.0).max(1e-3),
                    0.25,
                );
            }
            for j in 0..3 {
                draw_segment(img, g(3, j), g(3, j + 1), 0.7, stroke);
            }
            for j in 4..8 {
                draw_segment(img, g(3, j), g(3, j + 1), 0.7, stroke);
            }
            let (lo_u, hi_u) = group_extent(pts, start[3] + 4, 5, |p| p.u);
            let (lo_v, hi_v) = group_extent(pts, start[3] + 4, 5, |p| p.v);
            draw_ellipse(
                img,
                (lo_u + hi_u) / 2.0,
                (lo_v + hi_v) / 2.0,
                ((hi_u - lo_u) / 2.0).max(1e-3),
                ((hi_v - lo_v) / 2.0).max(1e-3) + 0.02,
                0.55,
            );
            for j in 0..12 {
                draw_segment(img, g(4, j), g(4, (j + 1) % 12), 0.8, stroke);
            }
            for j in 0..8 {
                draw_segment(img, g(4, 12 + j), g(4, 12 + (j + 1) % 8), 0.6, stroke + 0.15);
            }
        }
    }
}

fn group_extent(
    pts: &[NormalizedPoint],
    start: usize,
    n: usize,
    f: impl Fn(&NormalizedPoint) -> f64,
) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in &pts[start..start + n] {
        lo = lo.min(f(p));
        hi = hi.max(f(p));
    }
    (lo, hi)
}

/// Blends ink over a pixel with the given coverage.
fn blend(img: &mut Image, r: usize, c: usize, ink: f64, coverage: f64) {
    if coverage <= 0.0 {
        return;
    }
    let a = coverage.min(1.0);
    let v = img.get(r, c, 0);
    img.set(r, c, 0, v * (1.0 - a) + ink * a);
}

/// Anti-aliased line segment with half-width in pixels.
fn draw_segment(img: &mut Image, a: NormalizedPoint, b: NormalizedPoint, half_width: f64, ink: f64) {
    let (h, w) = (img.height(), img.width());
    let (ar, ac) = norm_to_pixel(a, h, w);
    let (br, bc) = norm_to_pixel(b, h, w);
    let pad = half_width + 1.5;
    let r0 = (ar.min(br) - pad).floor().max(0.0) as usize;
    let r1 = (ar.max(br) + pad).ceil().min(h as f64 - 1.0) as usize;
    let c0 = (ac.min(bc) - pad).floor().max(0.0) as usize;
    let c1 = (ac.max(bc) + pad).ceil().min(w as f64 - 1.0) as usize;
    let (dr, dc) = (br - ar, bc - ac);
    let len_sq = dr * dr + dc * dc;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let (pr, pc) = (r as f64, c as f64);
            let t = if len_sq > 0.0 {
                (((pr - ar) * dr + (pc - ac) * dc) / len_sq).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (qr, qc) = (ar + t * dr, ac + t * dc);
            let dist = ((pr - qr) * (pr - qr) + (pc - qc) * (pc - qc)).sqrt();
            blend(img, r, c, ink, half_width + 0.5 - dist);
        }
    }
}

/// Filled soft ellipse; radii in normalized units.
fn draw_ellipse(img: &mut Image, cu: f64, cv: f64, ru: f64, rv: f64, ink: f64) {
    let (h, w) = (img.height(), img.width());
    let (cr, cc) = norm_to_pixel(NormalizedPoint::new(cu, cv), h, w);
    let rr = rv * 0.5 * (h as f64 - 1.0);
    let rc = ru * 0.5 * (w as f64 - 1.0);
    let pad = 2.0;
    let r0 = (cr - rr - pad).floor().max(0.0) as usize;
    let r1 = (cr + rr + pad).ceil().min(h as f64 - 1.0) as usize;
    let c0 = (cc - rc - pad).floor().max(0.0) as usize;
    let c1 = (cc + rc + pad).ceil().min(w as f64 - 1.0) as usize;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let du = (c as f64 - cc) / rc.max(1e-9);
            let dv = (r as f64 - cr) / rr.max(1e-9);
            let d = (du * du + dv * dv).sqrt();
            // Soft edge roughly one pixel wide.
            let edge = 1.0 / rc.max(rr).max(1.0);
            blend(img, r, c, ink, (1.0 - d) / edge.max(1e-9));
        }
    }
}

// --- dataset assembly and persistence ----------------------------------------

const DATASET_MAGIC: &[u8; 4] = b"FGDS";
const DATASET_VERSION: u32 = 1;

/// Provenance and split bookkeeping for a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub layout: LandmarkLayout,
    pub n_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub split_ratio: f64,
    pub jitter: JitterParams,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// A full dataset: samples plus the manifest describing them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn train_refs(&self) -> Vec<(&Image, usize)> {
        self.manifest
            .train_indices
            .iter()
            .map(|&i| (&self.samples[i].image, self.samples[i].class_id))
            .collect()
    }

    pub fn test_refs(&self) -> Vec<(&Image, usize)> {
        self.manifest
            .test_indices
            .iter()
            .map(|&i| (&self.samples[i].image, self.samples[i].class_id))
            .collect()
    }

    pub fn test_samples(&self) -> Vec<&Sample> {
        self.manifest.test_indices.iter().map(|&i| &self.samples[i]).collect()
    }
}

/// Renders `per_class` jittered samples per template and splits them
/// deterministically (stratified by class) into train and test.
pub fn build_dataset(
    templates: &[FaceTemplate],
    per_class: usize,
    split_ratio: f64,
    image_size: usize,
    jitter: &JitterParams,
    seed: u64,
) -> Result<Dataset> {
    if templates.is_empty() || per_class == 0 {
        return Err(Error::Config("need templates and a positive per-class count".into()));
    }
    if !(0.0..1.0).contains(&split_ratio) || split_ratio == 0.0 {
        return Err(Error::Config(format!("split ratio {split_ratio} outside (0, 1)")));
    }
    let mut samples = Vec::with_capacity(templates.len() * per_class);
    for t in templates {
        for j in 0..per_class {
            let sample_id = (t.class_id * per_class + j) as u32;
            // Distinct stream per sample, derived from the dataset seed.
            let sample_seed = seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(1 + sample_id as u64));
            samples.push(render(t, jitter, image_size, sample_id, sample_seed)?);
        }
    }

    // Stratified split with a seeded shuffle inside each class block.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x511f7));
    let n_train_per_class = ((per_class as f64) * split_ratio).round() as usize;
    let mut train_indices = Vec::new();
    let mut test_indices = Vec::new();
    for class in 0..templates.len() {
        let mut idx: Vec<usize> = (0..per_class).map(|j| class * per_class + j).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng);
        train_indices.extend_from_slice(&idx[..n_train_per_class]);
        test_indices.extend_from_slice(&idx[n_train_per_class..]);
    }
    train_indices.sort_unstable();
    test_indices.sort_unstable();

    Ok(Dataset {
        samples,
        manifest: Manifest {
            version: DATASET_VERSION,
            seed,
            layout: templates[0].layout,
            n_classes: templates.len(),
            per_class,
            image_size,
            split_ratio,
            jitter: *jitter,
            train_indices,
            test_indices,
        },
    })
}

/// Writes `dataset.fgds` plus `manifest.json` into a directory.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data_path = dir.join("dataset.fgds");
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.samples.len() as u32).to_le_bytes());
    for s in &ds.samples {
        let img = &s.image;
        buf.extend_from_slice(&(s.class_id as u32).to_le_bytes());
        buf.extend_from_slice(&s.sample_id.to_le_bytes());
        buf.extend_from_slice(&(img.height() as u32).to_le_bytes());
        buf.extend_from_slice(&(img.width() as u32).to_le_bytes());
        buf.extend_from_slice(&(img.channels() as u32).to_le_bytes());
        buf.extend_from_slice(&(s.landmarks.len() as u32).to_le_bytes());
        for &v in img.pixels() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for p in s.landmarks.points() {
            buf.extend_from_slice(&(p.u as f32).to_le_bytes());
            buf.extend_from_slice(&(p.v as f32).to_le_bytes());
        }
        buf.extend_from_slice(s.landmarks.groups());
    }
    std::fs::write(&data_path, buf).map_err(|e| Error::io(&data_path, e))?;

    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&ds.manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let json = std::fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&json).map_err(|e| Error::Format(format!("bad manifest: {e}")))?;

    let data_path = dir.join("dataset.fgds");
    let file = std::fs::File::open(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let mut r = std::io::BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(&data_path, e))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!("bad dataset magic {magic:?}")));
    }
    let version = read_u32(&mut r, &data_path)?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let count = read_u32(&mut r, &data_path)? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let class = read_u32(&mut r, &data_path)? as usize;
        let sample_id = read_u32(&mut r, &data_path)?;
        let h = read_u32(&mut r, &data_path)? as usize;
        let w = read_u32(&mut r, &data_path)? as usize;
        let c = read_u32(&mut r, &data_path)? as usize;
        let k = read_u32(&mut r, &data_path)? as usize;
        let mut px = Vec::with_capacity(h * w * c);
        let mut b4 = [0u8; 4];
        for _ in 0..h * w * c {
            r.read_exact(&mut b4).map_err(|e| Error::io(&data_path, e))?;
            px.push(f32::from_le_bytes(b4) as f64);
        }
        let mut pts = Vec::with_capacity(k);
        for _ in 0..k {
            r.read_exact(&mut b4).map_err(|e| Error::io(&data_path, e))?;
            let u = f32::from_le_bytes(b4) as f64;
            r.read_exact(&mut b4).map_err(|e| Error::io(&data_path, e))?;
            let v = f32::from_le_bytes(b4) as f64;
            pts.push(NormalizedPoint::new(u, v));
        }
        let mut groups = vec![0u8; k];
        r.read_exact(&mut groups).map_err(|e| Error::io(&data_path, e))?;
        samples.push(Sample {
            image: Image::from_pixels(h, w, c, px)?,
            landmarks: LandmarkSet::new(pts, groups)?,
            class_id: class,
            sample_id,
        });
    }
    Ok(Dataset { samples, manifest })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts_have_the_documented_group_sizes() {
        assert_eq!(LandmarkLayout::Compact.group_sizes(), [7, 4, 4, 3, 5]);
        assert_eq!(LandmarkLayout::Compact.num_landmarks(), 23);
        assert_eq!(LandmarkLayout::PaperLike.group_sizes(), [17, 11, 11, 9, 20]);
        assert_eq!(LandmarkLayout::PaperLike.num_landmarks(), 68);
    }

    #[test]
    fn make_classes_is_deterministic() {
        let a = make_classes(6, LandmarkLayout::Compact, 42).unwrap();
        let b = make_classes(6, LandmarkLayout::Compact, 42).unwrap();
        assert_eq!(a, b);
        let c = make_classes(6, LandmarkLayout::Compact, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn templates_respect_layout_and_bounds() {
        for layout in [LandmarkLayout::Compact, LandmarkLayout::PaperLike] {
            let templates = make_classes(5, layout, 7).unwrap();
            for t in &templates {
                assert_eq!(t.landmarks.len(), layout.num_landmarks());
                let sizes = layout.group_sizes();
                for (gi, want) in sizes.iter().enumerate() {
                    assert_eq!(t.landmarks.group_indices(gi as u8 + 1).len(), *want);
                }
                for p in t.landmarks.points() {
                    assert!(p.u.abs() <= 0.9 && p.v.abs() <= 0.9, "landmark {p:?} out of margin");
                }
            }
        }
    }

    #[test]
    fn eye_groups_are_mirror_symmetric() {
        let templates = make_classes(3, LandmarkLayout::Compact, 11).unwrap();
        for t in &templates {
            let right = t.landmarks.group_indices(2);
            let left = t.landmarks.group_indices(3);
            assert_eq!(right.len(), left.len());
            for (ri, li) in right.iter().zip(&left) {
                let r = t.landmarks.points()[*ri];
                let l = t.landmarks.points()[*li];
                assert!((r.u + l.u).abs() < 1e-12, "u not mirrored");
                assert!((r.v - l.v).abs() < 1e-12, "v not equal");
            }
        }
    }

    #[test]
    fn class_margin_is_enforced_and_unreachable_margin_errors() {
        let templates = make_classes(8, LandmarkLayout::Compact, 3).unwrap();
        for i in 0..templates.len() {
            for j in i + 1..templates.len() {
                let d = templates[i].params.scaled_distance(&templates[j].params);
                assert!(d >= DEFAULT_CLASS_MARGIN, "classes {i},{j} too close: {d}");
            }
        }
        match make_classes_with_margin(500, LandmarkLayout::Compact, 1, 0.9) {
            Err(Error::Config(msg)) => assert!(msg.contains("fewer classes")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn render_zero_jitter_keeps_template_landmarks() {
        let t = &make_classes(2, LandmarkLayout::Compact, 5).unwrap()[0];
        let s = render(t, &JitterParams::none(), 64, 0, 123).unwrap();
        assert_eq!(s.landmarks.points(), t.landmarks.points());
        assert_eq!(s.class_id, t.class_id);
    }

    #[test]
    fn render_is_deterministic_and_seed_sensitive() {
        let t = &make_classes(2, LandmarkLayout::Compact, 5).unwrap()[0];
        let jit = JitterParams::default();
        let a = render(t, &jit, 64, 1, 10).unwrap();
        let b = render(t, &jit, 64, 1, 10).unwrap();
        assert_eq!(a, b);
        let c = render(t, &jit, 64, 1, 11).unwrap();
        assert_ne!(a.image, c.image);
        assert_eq!(a.class_id, c.class_id);
    }

    #[test]
    fn render_pixels_stay_in_unit_range() {
        for layout in [LandmarkLayout::Compact, LandmarkLayout::PaperLike] {
            let t = &make_classes(2, layout, 9).unwrap()[0];
            let s = render(t, &JitterParams::default(), 48, 0, 2).unwrap();
            assert!(s.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            // The face actually drew something.
            assert!(s.image.pixels().iter().any(|&v| v < 0.5));
        }
    }

    #[test]
    fn dataset_counts_and_uniform_histogram() {
        let templates = make_classes(4, LandmarkLayout::Compact, 21).unwrap();
        let ds = build_dataset(&templates, 10, 0.8, 32, &JitterParams::default(), 21).unwrap();
        assert_eq!(ds.samples.len(), 40);
        assert_eq!(ds.manifest.train_indices.len(), 32);
        assert_eq!(ds.manifest.test_indices.len(), 8);
        let mut histo = vec![0usize; 4];
        for s in &ds.samples {
            histo[s.class_id] += 1;
        }
        assert!(histo.iter().all(|&c| c == 10));
        // Split is stratified: each class contributes equally to the test set.
        let mut test_histo = vec![0usize; 4];
        for &i in &ds.manifest.test_indices {
            test_histo[ds.samples[i].class_id] += 1;
        }
        assert!(test_histo.iter().all(|&c| c == 2));
    }

    #[test]
    fn dataset_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let templates = make_classes(3, LandmarkLayout::Compact, 33).unwrap();
        let ds = build_dataset(&templates, 4, 0.75, 24, &JitterParams::default(), 33).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn dataset_load_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let templates = make_classes(2, LandmarkLayout::Compact, 1).unwrap();
        let ds = build_dataset(&templates, 2, 0.5, 16, &JitterParams::none(), 1).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let p = dir.path().join("dataset.fgds");
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn two_far_classes_train_to_high_accuracy() {
        use crate::victim::{train, ArchitectureDescriptor, LayerSpec, TrainParams};
        let templates = make_classes_with_margin(2, LandmarkLayout::Compact, 17, 1.2).unwrap();
        let ds = build_dataset(&templates, 24, 0.75, 32, &JitterParams::default(), 17).unwrap();
        let desc = ArchitectureDescriptor {
            input: (32, 32, 1),
            layers: vec![
                LayerSpec::Conv { filters: 6, kernel: 3, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Conv { filters: 12, kernel: 3, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 32 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 2 },
            ],
            num_classes: 2,
        };
        let hp =
            TrainParams { epochs: 20, lr: 0.05, batch_size: 8, seed: 17, ..Default::default() };
        let model = train(&desc, &ds.train_refs(), &ds.test_refs(), &hp).unwrap();
        assert!(
            model.meta().test_accuracy >= 0.99,
            "test accuracy {}",
            model.meta().test_accuracy
        );
    }
}
