//! Frame features, frame labels, and the sequence transforms used by the
//! context-window and downsampling studies.

mod io;
mod synth;

pub use io::{
    load_dataset, load_features, load_labels, load_manifest, load_mapping, save_features,
    save_labels, save_manifest, save_mapping, ClassMap, DatasetManifest, ManifestEntry,
};
pub use synth::{synth_generate, SynthDataset, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// A `T × D_in` matrix of per-frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Mat<f32>,
    pub video_id: String,
    pub frame_rate: f32,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, frames: Mat<f32>) -> Result<Self> {
        if frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::Invariant(format!(
                "feature matrix must be non-empty, got {}x{}",
                frames.rows(),
                frames.cols()
            )));
        }
        if let Some(i) = frames.as_slice().iter().position(|x| !x.is_finite()) {
            return Err(Error::Invariant(format!(
                "non-finite feature at frame {} dim {}",
                i / frames.cols(),
                i % frames.cols()
            )));
        }
        Ok(Self { frames, video_id: video_id.into(), frame_rate: 15.0 })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Per-frame class ids in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelSequence {
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabelSequence {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some((t, &c)) = labels.iter().enumerate().find(|(_, &c)| c >= num_classes) {
            return Err(Error::Invariant(format!(
                "label {c} at frame {t} is outside [0, {num_classes})"
            )));
        }
        Ok(Self { labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One maximal run of a class over the half-open frame range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Segment {
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Segments tiling `[0, T)` in order, adjacent classes distinct.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SegmentList {
    segments: Vec<Segment>,
}

impl SegmentList {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        check_tiling(&segments)?;
        for pair in segments.windows(2) {
            if pair[0].class == pair[1].class {
                return Err(Error::Invariant(format!(
                    "adjacent segments at frame {} share class {}",
                    pair[1].start, pair[1].class
                )));
            }
        }
        Ok(Self { segments })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn as_slice(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Number of frames covered.
    pub fn frames(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end)
    }

    pub fn classes(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.class).collect()
    }
}

fn check_tiling(segments: &[Segment]) -> Result<()> {
    let mut cursor = 0;
    for s in segments {
        if s.start != cursor {
            let kind = if s.start > cursor { "gap" } else { "overlap" };
            return Err(Error::Invariant(format!(
                "segment {kind} at frame {cursor} (next segment starts at {})",
                s.start
            )));
        }
        if s.end <= s.start {
            return Err(Error::Invariant(format!("empty segment at frame {}", s.start)));
        }
        cursor = s.end;
    }
    Ok(())
}

pub fn segments_from_labels(labels: &LabelSequence) -> SegmentList {
    let mut segments: Vec<Segment> = Vec::new();
    for (t, &c) in labels.labels.iter().enumerate() {
        match segments.last_mut() {
            Some(last) if last.class == c => last.end = t + 1,
            _ => segments.push(Segment { class: c, start: t, end: t + 1 }),
        }
    }
    SegmentList { segments }
}

/// Expands segments back into per-frame labels. Gaps and overlaps are rejected.
pub fn labels_from_segments(segments: &[Segment], num_classes: usize) -> Result<LabelSequence> {
    check_tiling(segments)?;
    let mut labels = Vec::with_capacity(segments.last().map_or(0, |s| s.end));
    for s in segments {
        labels.extend(std::iter::repeat_n(s.class, s.len()));
    }
    LabelSequence::new(labels, num_classes)
}

/// Features and labels of one video, with matching length.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVideo {
    pub features: FeatureSequence,
    pub labels: LabelSequence,
}

impl LabeledVideo {
    pub fn new(features: FeatureSequence, labels: LabelSequence) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Invariant(format!(
                "{} feature frames but {} labels",
                features.len(),
                labels.len()
            ))
            .in_video(&features.video_id));
        }
        Ok(Self { features, labels })
    }

    pub fn id(&self) -> &str {
        &self.features.video_id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn slice(&self, start: usize, end: usize, id: String) -> LabeledVideo {
        LabeledVideo {
            features: FeatureSequence {
                frames: self.features.frames.slice_rows(start, end),
                video_id: id,
                frame_rate: self.features.frame_rate,
            },
            labels: LabelSequence {
                labels: self.labels.labels[start..end].to_vec(),
                num_classes: self.labels.num_classes,
            },
        }
    }
}

/// How the training-context window is sized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChunkMode {
    /// The same number of frames for every video.
    Fixed { window_frames: usize },
    /// A fraction of each video's own length.
    VideoSpecific { percent: f64 },
}

/// Splits a video into consecutive non-overlapping chunks; the last one may be shorter.
pub fn chunk_sequence(video: &LabeledVideo, mode: ChunkMode) -> Result<Vec<LabeledVideo>> {
    let t = video.len();
    let window = match mode {
        ChunkMode::Fixed { window_frames } => {
            if window_frames < 1 {
                return Err(Error::Argument("window_frames must be at least 1".into()));
            }
            window_frames
        }
        ChunkMode::VideoSpecific { percent } => {
            if !(percent > 0.0 && percent <= 1.0) {
                return Err(Error::Argument(format!("percent {percent} outside (0, 1]")));
            }
            ((percent * t as f64).round() as usize).clamp(1, t.max(1))
        }
    };
    if window >= t {
        return Ok(vec![video.clone()]);
    }
    let chunks = (0..t)
        .step_by(window)
        .enumerate()
        .map(|(i, start)| video.slice(start, (start + window).min(t), format!("{}#{i}", video.id())))
        .collect();
    Ok(chunks)
}

/// Keeps frames `0, rate, 2·rate, …`.
pub fn downsample(video: &LabeledVideo, rate: usize) -> Result<LabeledVideo> {
    if rate < 1 {
        return Err(Error::Argument("downsampling rate must be at least 1".into()));
    }
    if rate == 1 {
        return Ok(video.clone());
    }
    let keep: Vec<usize> = (0..video.len()).step_by(rate).collect();
    let src = &video.features.frames;
    let mut data = Vec::with_capacity(keep.len() * src.cols());
    for &t in &keep {
        data.extend_from_slice(src.row(t));
    }
    Ok(LabeledVideo {
        features: FeatureSequence {
            frames: Mat::from_vec(keep.len(), src.cols(), data),
            video_id: video.features.video_id.clone(),
            frame_rate: video.features.frame_rate / rate as f32,
        },
        labels: LabelSequence {
            labels: keep.iter().map(|&t| video.labels.labels[t]).collect(),
            num_classes: video.labels.num_classes,
        },
    })
}
