//! Synthetic where×how micro-expression data.
//!
//! The class picks a region type (WHERE) and a motion pattern (HOW). The
//! onset frame carries one coloured marker whose colour identifies the
//! region type; the apex adds the motion pattern, colour-neutral, on top of
//! that marker. Each region type has a home zone of the face where its
//! marker sits with probability [`HOME_PROB`], otherwise it lands in another
//! zone. So the onset alone reveals WHERE but not HOW, the difference frame
//! reveals HOW and only guesses WHERE from position, and combining the two
//! streams reaches ceiling accuracy.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::manifest::{write_manifest, ManifestRow};
use crate::data::task::synthetic_label;
use crate::data::{DatasetIndex, Image, ImageSource, Sample, TaskName, TaskSpec};
use crate::error::{Error, Result};

/// Probability that a marker sits in its region type's home zone.
pub const HOME_PROB: f64 = 0.7;
/// Motion patterns: brighten, darken, horizontal dipole, vertical dipole.
pub const MAX_PATTERNS: usize = 4;
/// Region disk radius as a fraction of the image side.
pub const REGION_RADIUS: f32 = 0.25;

/// Colour signature per region type.
const SIGNATURES: [[f32; 3]; 4] = [
    [1.0, -0.3, -0.7],
    [-0.7, -0.3, 1.0],
    [-0.3, 1.0, -0.5],
    [0.6, 0.6, -1.0],
];

/// Generator ground truth for one sample. Positions are fractions of the
/// image side so they survive resizing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionTruth {
    pub region: usize,
    pub pattern: usize,
    /// Face zone the marker landed in.
    pub zone: usize,
    /// `(x, y)` centre of the moving marker.
    pub center: (f32, f32),
    pub radius: f32,
}

impl MotionTruth {
    /// Whether pixel `(x, y)` of a `width × height` raster lies in the region.
    pub fn contains(&self, x: usize, y: usize, width: usize, height: usize) -> bool {
        let fx = (x as f32 + 0.5) / width as f32 - self.center.0;
        let fy = (y as f32 + 0.5) / height as f32 - self.center.1;
        fx * fx + fy * fy <= self.radius * self.radius
    }
}

/// How classes factor into (region type, motion pattern).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DesignTable {
    pub classes: usize,
    pub regions: usize,
    pub patterns: usize,
}

impl DesignTable {
    pub fn new(classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("synthetic task needs at least one class".into()));
        }
        let regions = if classes <= 2 * MAX_PATTERNS { 2 } else { SIGNATURES.len() };
        let patterns = classes.div_ceil(regions);
        if patterns > MAX_PATTERNS {
            return Err(Error::Config(format!(
                "synthetic task supports at most {} classes, got {classes}",
                SIGNATURES.len() * MAX_PATTERNS
            )));
        }
        Ok(Self {
            classes,
            regions,
            patterns,
        })
    }

    pub fn region(&self, class: usize) -> usize {
        class % self.regions
    }

    pub fn pattern(&self, class: usize) -> usize {
        class / self.regions
    }
}

struct Subject {
    skin: [f32; 3],
    marker_gain: f32,
    motion_gain: f32,
}

fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    rng.sample::<f32, _>(StandardNormal)
}

/// Adds `amp · signature · exp(−r²/2σ²)` around `(cx, cy)` (pixel units).
fn add_blob(img: &mut Image, cx: f32, cy: f32, sigma: f32, amp: [f32; 3]) {
    let (c, h, w) = img.dims();
    let reach = (3.5 * sigma).ceil() as isize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let (x0, y0) = (cx.floor() as isize, cy.floor() as isize);
    for y in (y0 - reach).max(0)..(y0 + reach + 1).min(h as isize) {
        for x in (x0 - reach).max(0)..(x0 + reach + 1).min(w as isize) {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let g = (-(dx * dx + dy * dy) * inv).exp();
            for ch in 0..c {
                let v = img.get(ch, y as usize, x as usize) + amp[ch] * g;
                img.set(ch, y as usize, x as usize, v);
            }
        }
    }
}

/// Adds a colour-neutral motion pattern around `(cx, cy)`.
fn add_motion(img: &mut Image, pattern: usize, cx: f32, cy: f32, sigma: f32, amp: f32) {
    let (c, h, w) = img.dims();
    let reach = (3.5 * sigma).ceil() as isize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let (x0, y0) = (cx.floor() as isize, cy.floor() as isize);
    for y in (y0 - reach).max(0)..(y0 + reach + 1).min(h as isize) {
        for x in (x0 - reach).max(0)..(x0 + reach + 1).min(w as isize) {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let g = (-(dx * dx + dy * dy) * inv).exp();
            // Dipoles peak at ±σ with magnitude ≈ amp.
            let m = match pattern {
                0 => g,
                1 => -g,
                2 => 1.65 * dx / sigma * g,
                _ => 1.65 * dy / sigma * g,
            } * amp;
            for ch in 0..c {
                let v = img.get(ch, y as usize, x as usize) + m;
                img.set(ch, y as usize, x as usize, v);
            }
        }
    }
}

fn add_noise(img: &mut Image, std: f32, rng: &mut ChaCha8Rng) {
    for v in img.data_mut() {
        *v = (*v + std * gauss(rng)).clamp(0.0, 1.0);
    }
}

/// Zone centres as image fractions: top and bottom halves for two region
/// types, quadrants for four.
fn zones(regions: usize) -> &'static [(f32, f32)] {
    if regions <= 2 {
        &[(0.5, 0.3), (0.5, 0.7)]
    } else {
        &[(0.3, 0.3), (0.7, 0.3), (0.3, 0.7), (0.7, 0.7)]
    }
}

/// Marker centre for `region`: its home zone with probability
/// [`HOME_PROB`], else a uniformly chosen other zone; jittered inside.
fn marker_position(region: usize, regions: usize, rng: &mut ChaCha8Rng) -> (usize, (f32, f32)) {
    let zones = zones(regions);
    let zone = if rng.random_bool(HOME_PROB) {
        region
    } else {
        let mut other = rng.random_range(0..zones.len() - 1);
        if other >= region {
            other += 1;
        }
        other
    };
    let (zx, zy) = zones[zone];
    let (jx, jy) = if regions <= 2 { (0.2, 0.07) } else { (0.07, 0.07) };
    (zone, (zx + rng.random_range(-jx..jx), zy + rng.random_range(-jy..jy)))
}

fn render(
    design: &DesignTable,
    class: usize,
    subject: &Subject,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> (Image, Image, MotionTruth) {
    let s = size as f32;
    let mut face = Image::filled(3, size, size, 0.0);
    for (ch, &tone) in subject.skin.iter().enumerate() {
        face.data_mut()[ch * size * size..(ch + 1) * size * size].fill(tone);
    }
    for _ in 0..3 {
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let a = 0.06 * gauss(rng);
        add_blob(&mut face, cx, cy, rng.random_range(0.12..0.25) * s, [a, a, a]);
    }

    let region = design.region(class);
    let pattern = design.pattern(class);
    let (zone, center) = marker_position(region, design.regions, rng);
    let gain = 0.15 * subject.marker_gain;
    add_blob(&mut face, center.0 * s, center.1 * s, 0.07 * s, SIGNATURES[region].map(|v| v * gain));

    let mut apex = face.clone();
    let amp = rng.random_range(0.2..0.3) * subject.motion_gain;
    add_motion(&mut apex, pattern, center.0 * s, center.1 * s, 0.08 * s, amp);

    let mut onset = face;
    add_noise(&mut onset, 0.01, rng);
    add_noise(&mut apex, 0.01, rng);
    let truth = MotionTruth {
        region,
        pattern,
        zone,
        center,
        radius: REGION_RADIUS,
    };
    (onset, apex, truth)
}

/// Generates `n_subjects × n_per_subject` samples of the `classes`-way
/// where×how task at `image_size²`. Labels are balanced within each subject.
pub fn synthesize_dataset(
    n_subjects: usize,
    n_per_subject: usize,
    classes: usize,
    image_size: usize,
    seed: u64,
) -> Result<DatasetIndex> {
    if n_subjects == 0 || n_per_subject == 0 || image_size < 8 {
        return Err(Error::Config(
            "synthetic data needs positive subject/sample counts and image_size ≥ 8".into(),
        ));
    }
    let design = DesignTable::new(classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_subjects * n_per_subject);
    for subj in 0..n_subjects {
        let base = 0.55 + 0.08 * gauss(&mut rng);
        let subject = Subject {
            skin: [base + 0.05, base - 0.05, base - 0.1].map(|v| v.clamp(0.35, 0.7)),
            marker_gain: rng.random_range(0.85..1.15),
            motion_gain: rng.random_range(0.85..1.15),
        };
        let offset = rng.random_range(0..classes);
        let mut labels: Vec<usize> = (0..n_per_subject).map(|j| (j + offset) % classes).collect();
        labels.shuffle(&mut rng);
        for (j, &class) in labels.iter().enumerate() {
            let (onset, apex, truth) = render(&design, class, &subject, image_size, &mut rng);
            samples.push(Sample {
                subject_id: format!("sub{subj:02}"),
                clip_id: format!("sub{subj:02}_clip{j:03}"),
                onset: ImageSource::Memory(Arc::new(onset)),
                apex: ImageSource::Memory(Arc::new(apex)),
                emotion: synthetic_label(class),
                truth: Some(truth),
            });
        }
    }
    DatasetIndex::from_samples(samples, TaskSpec::new(TaskName::Synthetic(classes)))
}

/// Writes every sample's frames as PNG under `dir` plus `manifest.csv`;
/// returns the manifest path.
pub fn export_dataset(index: &DatasetIndex, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(index.len());
    for s in &index.samples {
        let (onset, apex) = s.load_pair()?;
        let on = PathBuf::from(format!("{}_onset.png", s.clip_id));
        let ap = PathBuf::from(format!("{}_apex.png", s.clip_id));
        onset.save_png(&dir.join(&on))?;
        apex.save_png(&dir.join(&ap))?;
        rows.push(ManifestRow {
            subject_id: s.subject_id.clone(),
            clip_id: s.clip_id.clone(),
            onset_path: on,
            apex_path: ap,
            emotion: s.emotion.clone(),
        });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}
