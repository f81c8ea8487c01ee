//! Synthetic segmentation datasets with optional long-range label dependencies.
//!
//! Every class owns a prototype feature vector and frames are the prototype plus
//! Gaussian noise. With `long_range` set, the final segment's label is
//! `(first segment label + 1) mod C` while its frames are drawn from the
//! prototype of a decoy class (the last class id), which never appears anywhere
//! else. The final segment therefore looks identical in every video and its
//! label can only be recovered from the start of the video. First segments
//! draw from a set of cue classes that the rest of the video never uses
//! (when there are enough classes), so the start is recognisable by content.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::io::{save_features, save_labels, save_manifest, save_mapping};
use super::{
    labels_from_segments, ClassMap, DatasetManifest, FeatureSequence, LabeledVideo, ManifestEntry,
    Segment,
};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub num_classes: usize,
    pub mean_segment_length: usize,
    pub feature_dim: usize,
    pub noise_scale: f64,
    pub long_range: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_videos: 5,
            frames_per_video: 1000,
            num_classes: 5,
            mean_segment_length: 100,
            feature_dim: 16,
            noise_scale: 0.5,
            long_range: false,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let counts = [
            ("num_videos", self.num_videos),
            ("frames_per_video", self.frames_per_video),
            ("num_classes", self.num_classes),
            ("mean_segment_length", self.mean_segment_length),
            ("feature_dim", self.feature_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v < 1) {
            return Err(Error::Argument(format!("{name} must be at least 1")));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Argument(format!("noise_scale {} must be >= 0", self.noise_scale)));
        }
        if self.long_range && self.num_classes < 2 {
            return Err(Error::Argument("long_range needs at least 2 classes".into()));
        }
        if self.long_range && self.frames_per_video < 2 {
            return Err(Error::Argument("long_range needs at least 2 frames per video".into()));
        }
        Ok(())
    }

    /// The class whose prototype renders every final segment, when `long_range` is set.
    pub fn decoy_class(&self) -> Option<usize> {
        self.long_range.then(|| self.num_classes - 1)
    }

    /// Classes that label first segments when `long_range` is set. With at
    /// least three non-decoy classes they are reserved for first segments.
    pub fn cue_classes(&self) -> Vec<usize> {
        if !self.long_range {
            return Vec::new();
        }
        let n = self.num_classes - 1;
        if n >= 3 {
            (0..(n / 2).max(2)).collect()
        } else {
            (0..n).collect()
        }
    }

    /// Classes used between the first and the final segment.
    fn body_classes(&self) -> Vec<usize> {
        let decoy = self.decoy_class();
        let cues = self.cue_classes();
        let body: Vec<usize> =
            (0..self.num_classes).filter(|k| Some(*k) != decoy && !cues.contains(k)).collect();
        if body.is_empty() {
            (0..self.num_classes).filter(|&k| Some(k) != decoy).collect()
        } else {
            body
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub classes: ClassMap,
    pub prototypes: Mat<f32>,
    pub videos: Vec<LabeledVideo>,
}

impl SynthDataset {
    /// Writes `features/<id>.ltf`, `labels/<id>.txt`, `mapping.txt` and `manifest.txt`.
    pub fn write_to(&self, dir: &Path) -> Result<DatasetManifest> {
        for sub in ["features", "labels"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut entries = Vec::with_capacity(self.videos.len());
        for v in &self.videos {
            let feature_path = dir.join("features").join(format!("{}.ltf", v.id()));
            let label_path = dir.join("labels").join(format!("{}.txt", v.id()));
            save_features(&feature_path, &v.features)?;
            save_labels(&label_path, &v.labels, &self.classes)?;
            entries.push(ManifestEntry { video_id: v.id().to_string(), feature_path, label_path });
        }
        save_mapping(&dir.join("mapping.txt"), &self.classes)?;
        let manifest = DatasetManifest::new(entries, self.classes.clone())?;
        save_manifest(&dir.join("manifest.txt"), &manifest)?;
        Ok(manifest)
    }
}

/// Generates a dataset that is a pure function of `(spec, seed)`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = spec.num_classes;
    let d = spec.feature_dim;
    let prototypes = Mat::from_fn(c, d, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z as f32
    });
    let classes = ClassMap::new((0..c).map(|k| format!("action_{k}")).collect())?;

    let decoy = spec.decoy_class();
    let pool = spec.body_classes();
    let cues = spec.cue_classes();
    let first_offset = rng.random_range(0..cues.len().max(1));

    let mut videos = Vec::with_capacity(spec.num_videos);
    for v in 0..spec.num_videos {
        let segments = if spec.long_range {
            let first = cues[(first_offset + v) % cues.len()];
            long_range_segments(spec, &pool, first, &mut rng)
        } else {
            plain_segments(spec, &pool, &mut rng)
        };
        let labels = labels_from_segments(&segments, c)?;
        let last = segments.last().expect("at least one segment");
        let mut frames = Mat::<f32>::zeros(spec.frames_per_video, d);
        for s in &segments {
            let proto_class = if spec.long_range && s == last { decoy.unwrap() } else { s.class };
            for t in s.start..s.end {
                for (j, x) in frames.row_mut(t).iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x = prototypes.get(proto_class, j) + (spec.noise_scale * z) as f32;
                }
            }
        }
        let features = FeatureSequence::new(format!("synth_{v:04}"), frames)?;
        videos.push(LabeledVideo::new(features, labels)?);
    }
    Ok(SynthDataset { classes, prototypes, videos })
}

fn draw_length(mean: usize, rng: &mut ChaCha8Rng) -> usize {
    let lo = mean.div_ceil(2).max(1);
    let hi = (mean + mean / 2).max(lo);
    rng.random_range(lo..=hi)
}

/// Picks a class from `pool` other than the excluded ones.
fn draw_class(pool: &[usize], exclude: &[usize], rng: &mut ChaCha8Rng) -> Option<usize> {
    let eligible: Vec<usize> = pool.iter().copied().filter(|k| !exclude.contains(k)).collect();
    (!eligible.is_empty()).then(|| eligible[rng.random_range(0..eligible.len())])
}

/// Appends a run of `class` of length `len`, merging into the previous run if it
/// has the same class.
fn push_run(segments: &mut Vec<Segment>, class: usize, len: usize) {
    let start = segments.last().map_or(0, |s| s.end);
    match segments.last_mut() {
        Some(prev) if prev.class == class => prev.end += len,
        _ => segments.push(Segment { class, start, end: start + len }),
    }
}

/// Fills `[from, to)` with runs from `pool`, never repeating the previous class
/// and never ending on `avoid_last`.
fn fill_runs(
    segments: &mut Vec<Segment>,
    to: usize,
    spec: &SynthSpec,
    pool: &[usize],
    avoid_last: Option<usize>,
    rng: &mut ChaCha8Rng,
) {
    loop {
        let from = segments.last().map_or(0, |s| s.end);
        if from >= to {
            break;
        }
        let mut len = draw_length(spec.mean_segment_length, rng).min(to - from);
        // Avoid a tail shorter than a quarter segment.
        if to - from - len < spec.mean_segment_length.div_ceil(4) {
            len = to - from;
        }
        let is_last = from + len == to;
        let mut exclude: Vec<usize> = segments.last().map(|s| s.class).into_iter().collect();
        if is_last {
            exclude.extend(avoid_last);
        }
        match draw_class(pool, &exclude, rng) {
            Some(class) => push_run(segments, class, len),
            None => {
                let prev = segments.last_mut().expect("first run always has a class");
                prev.end += len;
            }
        }
    }
}

fn plain_segments(spec: &SynthSpec, pool: &[usize], rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let mut segments = Vec::new();
    fill_runs(&mut segments, spec.frames_per_video, spec, pool, None, rng);
    segments
}

fn long_range_segments(
    spec: &SynthSpec,
    pool: &[usize],
    first: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Segment> {
    let t = spec.frames_per_video;
    let c = spec.num_classes;
    let final_class = (first + 1) % c;
    let final_len = draw_length(spec.mean_segment_length, rng).min(t / 2).max(1);
    let body_end = t - final_len;
    let first_len = draw_length(spec.mean_segment_length, rng).min(body_end);
    let mut segments = vec![Segment { class: first, start: 0, end: first_len }];
    fill_runs(&mut segments, body_end, spec, pool, Some(final_class), rng);
    debug_assert_ne!(segments.last().map(|s| s.class), Some(final_class));
    segments.push(Segment { class: final_class, start: body_end, end: t });
    segments
}
