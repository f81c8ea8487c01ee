use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{parse, parse_on_off, ModelConfig};
use crate::seqdata::SynthSpec;
use crate::train::TrainConfig;

/// How the context study sizes its training chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextMode {
    /// A fraction of the average video length, the same for every video.
    Fixed,
    /// A fraction of each video's own length.
    VideoSpecific,
}

impl std::str::FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" => Ok(ContextMode::Fixed),
            "video_specific" => Ok(ContextMode::VideoSpecific),
            _ => Err(Error::Config(format!("unknown context mode {s:?}; expected fixed or video_specific"))),
        }
    }
}

impl std::fmt::Display for ContextMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ContextMode::Fixed => "fixed",
            ContextMode::VideoSpecific => "video_specific",
        })
    }
}

/// Everything a command needs, read from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `d_in` and `classes` of 0 are filled in from the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub manifest: Option<PathBuf>,
    /// Defaults to `mapping.txt` next to the manifest.
    pub mapping: Option<PathBuf>,
    /// Held-out videos for the studies; defaults to the training manifest.
    pub test_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub context_fractions: Vec<f64>,
    pub context_mode: ContextMode,
    pub downsample_rates: Vec<usize>,
    pub ablate_axis: Option<String>,
    pub ablate_values: Vec<String>,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::new(0, 0),
            train: TrainConfig::default(),
            manifest: None,
            mapping: None,
            test_manifest: None,
            checkpoint: None,
            out: PathBuf::from("out"),
            context_fractions: vec![0.1, 0.25, 0.5, 1.0],
            context_mode: ContextMode::VideoSpecific,
            downsample_rates: vec![1, 2, 4, 8],
            ablate_axis: None,
            ablate_values: Vec::new(),
            synth: SynthSpec::default(),
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Splits `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: "expected `key = value`".into(),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse { path: path.to_path_buf(), line: i + 1, reason: "empty key".into() });
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Applies one setting. Relative paths are resolved against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = || if value.is_empty() { None } else { Some(base.join(value)) };
        match key {
            "manifest" => self.manifest = path(),
            "mapping" => self.mapping = path(),
            "test_manifest" => self.test_manifest = path(),
            "checkpoint" => self.checkpoint = path(),
            "out" => self.out = base.join(value),
            "context_fractions" => self.context_fractions = list(key, value)?,
            "context_mode" => self.context_mode = value.parse()?,
            "downsample_rates" => self.downsample_rates = list(key, value)?,
            "ablate_axis" => self.ablate_axis = (!value.is_empty()).then(|| value.to_string()),
            "ablate_values" => self.ablate_values = list(key, value)?,
            "synth_videos" => self.synth.num_videos = parse(key, value)?,
            "synth_frames" => self.synth.frames_per_video = parse(key, value)?,
            "synth_classes" => self.synth.num_classes = parse(key, value)?,
            "synth_segment_length" => self.synth.mean_segment_length = parse(key, value)?,
            "synth_feature_dim" => self.synth.feature_dim = parse(key, value)?,
            "synth_noise" => self.synth.noise_scale = parse(key, value)?,
            "synth_long_range" => self.synth.long_range = parse_on_off(key, value)?,
            _ => {
                if !self.model.set(key, value)? && !self.train.set(key, value)? {
                    return Err(Error::Config(format!("unknown setting {key:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut cfg = Self::default();
        for (line, k, v) in parse_pairs(text, path)? {
            cfg.set(&k, &v, base).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                reason: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    /// Every setting as `key = value` text that [`RunConfig::from_text`] reads
    /// back from any location; paths are written absolute.
    pub fn to_text(&self) -> String {
        let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string();
        let opt = |p: &Option<PathBuf>| p.as_deref().map(abs).unwrap_or_default();
        let mut pairs: Vec<(&str, String)> = vec![
            ("manifest", opt(&self.manifest)),
            ("mapping", opt(&self.mapping)),
            ("test_manifest", opt(&self.test_manifest)),
            ("checkpoint", opt(&self.checkpoint)),
            ("out", abs(&self.out)),
        ];
        pairs.extend(self.model.to_pairs());
        // the profile key would reset the other training settings, so it is never emitted
        pairs.extend(self.train.to_pairs());
        pairs.extend([
            ("context_fractions", join_list(&self.context_fractions)),
            ("context_mode", self.context_mode.to_string()),
            ("downsample_rates", join_list(&self.downsample_rates)),
            ("ablate_axis", self.ablate_axis.clone().unwrap_or_default()),
            ("ablate_values", self.ablate_values.join(",")),
            ("synth_videos", self.synth.num_videos.to_string()),
            ("synth_frames", self.synth.frames_per_video.to_string()),
            ("synth_classes", self.synth.num_classes.to_string()),
            ("synth_segment_length", self.synth.mean_segment_length.to_string()),
            ("synth_feature_dim", self.synth.feature_dim.to_string()),
            ("synth_noise", self.synth.noise_scale.to_string()),
            ("synth_long_range", crate::model::on_off(self.synth.long_range).to_string()),
        ]);
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn mapping_path(&self) -> Result<PathBuf> {
        if let Some(m) = &self.mapping {
            return Ok(m.clone());
        }
        let manifest = self.require_manifest()?;
        Ok(manifest.parent().unwrap_or(Path::new("")).join("mapping.txt"))
    }

    pub fn require_manifest(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::Argument("no manifest given (set `manifest` or pass --manifest)".into()))
    }
}
