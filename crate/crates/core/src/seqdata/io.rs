//! On-disk formats: LTF feature files, label text files, class mappings and manifests.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use super::{FeatureSequence, LabelSequence, LabeledVideo};
use crate::error::{Error, Result};
use crate::tensor::Mat;

const LTF_MAGIC: &[u8; 4] = b"LTF1";
const LTF_HEADER: usize = 12;

/// Writes `frames` as `LTF1`, u32 T, u32 D, then T·D little-endian f32 values.
pub fn save_features(path: &Path, features: &FeatureSequence) -> Result<()> {
    let m = &features.frames;
    let mut bytes = Vec::with_capacity(LTF_HEADER + 4 * m.len());
    bytes.extend_from_slice(LTF_MAGIC);
    bytes.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |offset: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < LTF_HEADER {
        return Err(fail(bytes.len(), "truncated header".into()));
    }
    if &bytes[..4] != LTF_MAGIC {
        return Err(fail(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (t, d) = (word(4), word(8));
    if t == 0 || d == 0 {
        return Err(fail(4, format!("empty shape {t}x{d}")));
    }
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(LTF_HEADER))
        .ok_or_else(|| fail(4, format!("shape {t}x{d} overflows")))?;
    if bytes.len() < expected {
        return Err(fail(bytes.len(), format!("truncated data, expected {expected} bytes")));
    }
    if bytes.len() > expected {
        return Err(fail(expected, "trailing bytes after data".into()));
    }
    let mut data = Vec::with_capacity(t * d);
    for (i, chunk) in bytes[LTF_HEADER..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(fail(LTF_HEADER + 4 * i, format!("non-finite value {v}")));
        }
        data.push(v);
    }
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    FeatureSequence::new(id, Mat::from_vec(t, d, data))
}

/// Bidirectional class-name ↔ id map with dense ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl ClassMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains(char::is_whitespace) {
                return Err(Error::Invariant(format!("invalid class name {n:?}")));
            }
            if ids.insert(n.clone(), i).is_some() {
                return Err(Error::Invariant(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names, ids })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, reason: reason.into() }
}

/// Reads `<id> <class_name>` lines; ids must be exactly `0..C`.
pub fn load_mapping(path: &Path) -> Result<ClassMap> {
    let text = read_text(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(id), Some(name), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(path, i + 1, format!("expected `<id> <name>`, got {line:?}")));
        };
        let id: usize =
            id.parse().map_err(|_| parse_err(path, i + 1, format!("bad class id {id:?}")))?;
        pairs.push((id, name.to_string(), i + 1));
    }
    pairs.sort_by_key(|p| p.0);
    for (expected, (id, _, line)) in pairs.iter().enumerate() {
        if *id != expected {
            return Err(parse_err(path, *line, format!("class ids not dense: expected {expected}, got {id}")));
        }
    }
    ClassMap::new(pairs.into_iter().map(|p| p.1).collect())
}

pub fn save_mapping(path: &Path, classes: &ClassMap) -> Result<()> {
    let text: String =
        classes.names().iter().enumerate().map(|(i, n)| format!("{i} {n}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One class-name token per line, line `t` = frame `t`.
pub fn load_labels(path: &Path, classes: &ClassMap) -> Result<LabelSequence> {
    let text = read_text(path)?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let token = line.trim();
        let id = classes
            .id(token)
            .ok_or_else(|| parse_err(path, i + 1, format!("unknown class {token:?}")))?;
        labels.push(id);
    }
    LabelSequence::new(labels, classes.len())
}

pub fn save_labels(path: &Path, labels: &LabelSequence, classes: &ClassMap) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 8);
    for &c in &labels.labels {
        let name = classes
            .name(c)
            .ok_or_else(|| Error::Invariant(format!("class id {c} missing from mapping")))?;
        text.push_str(name);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub feature_path: PathBuf,
    pub label_path: PathBuf,
}

/// The videos of a dataset and its class mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub classes: ClassMap,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, classes: ClassMap) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            for p in [&e.feature_path, &e.label_path] {
                if !seen.insert(p.clone()) {
                    return Err(Error::Invariant(format!(
                        "path {} listed more than once",
                        p.display()
                    )));
                }
            }
        }
        Ok(Self { entries, classes })
    }
}

/// Reads `<video_id> <feature_path> <label_path>` lines. Relative paths are
/// resolved against the manifest's directory.
pub fn load_manifest(path: &Path, mapping: &Path) -> Result<DatasetManifest> {
    let classes = load_mapping(mapping)?;
    let text = read_text(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [id, feat, lab] = parts[..] else {
            return Err(parse_err(path, i + 1, "expected `<video_id> <feature_path> <label_path>`"));
        };
        entries.push(ManifestEntry {
            video_id: id.to_string(),
            feature_path: base.join(feat),
            label_path: base.join(lab),
        });
    }
    if entries.is_empty() {
        return Err(parse_err(path, 0, "manifest lists no videos"));
    }
    DatasetManifest::new(entries, classes)
}

/// Writes manifest lines with paths relative to `path`'s directory when possible.
pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let text: String = manifest
        .entries
        .iter()
        .map(|e| format!("{} {} {}\n", e.video_id, rel(&e.feature_path), rel(&e.label_path)))
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every video listed in the manifest, in manifest order.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<LabeledVideo>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let load = || -> Result<LabeledVideo> {
                let mut features = load_features(&e.feature_path)?;
                features.video_id = e.video_id.clone();
                let labels = load_labels(&e.label_path, &manifest.classes)?;
                LabeledVideo::new(features, labels)
            };
            load().map_err(|err| match err {
                Error::Video { .. } => err,
                other => other.in_video(&e.video_id),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn classes(names: &[&str]) -> ClassMap {
        ClassMap::new(names.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn reads_row_major_frames() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ltf");
        let mut bytes = b"LTF1".to_vec();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, bytes).unwrap();
        let f = load_features(&path).unwrap();
        assert_eq!(f.frames.shape(), (3, 2));
        assert_eq!(f.frames.row(1), &[3.0, 4.0]);
        assert_eq!(f.video_id, "a");
    }

    #[test]
    fn bad_magic_truncation_and_nan_report_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ltf");
        let f = FeatureSequence::new("b", Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        save_features(&path, &f).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[1] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_features(&path), Err(Error::Format { offset: 0, .. })));

        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_features(&path), Err(Error::Format { offset: 25, .. })));

        let mut nan = good.clone();
        nan[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, &nan).unwrap();
        assert!(matches!(load_features(&path), Err(Error::Format { offset: 20, .. })));
    }

    #[test]
    fn feature_round_trip_random_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ltf");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = Mat::from_fn(50, 8, |_, _| rng.random_range(-10.0f32..10.0));
        let f = FeatureSequence::new("r", m).unwrap();
        save_features(&path, &f).unwrap();
        assert_eq!(load_features(&path).unwrap(), f);
    }

    #[test]
    fn label_tokens_map_to_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.txt");
        fs::write(&path, "cut\ncut\nmix\n").unwrap();
        let map = classes(&["cut", "mix"]);
        assert_eq!(load_labels(&path, &map).unwrap().labels, vec![0, 0, 1]);

        fs::write(&path, "cut\npour\nmix\n").unwrap();
        match load_labels(&path, &map) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn mapping_requires_dense_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        fs::write(&path, "1 mix\n0 cut\n").unwrap();
        assert_eq!(load_mapping(&path).unwrap(), classes(&["cut", "mix"]));
        fs::write(&path, "0 cut\n2 mix\n").unwrap();
        assert!(load_mapping(&path).is_err());
    }

    #[test]
    fn manifest_round_trip_and_length_check() {
        let dir = tempfile::tempdir().unwrap();
        let map = classes(&["a", "b"]);
        save_mapping(&dir.path().join("mapping.txt"), &map).unwrap();
        let f = FeatureSequence::new("v0", Mat::zeros(3, 2)).unwrap();
        save_features(&dir.path().join("v0.ltf"), &f).unwrap();
        fs::write(dir.path().join("v0.txt"), "a\nb\nb\n").unwrap();
        let manifest = DatasetManifest::new(
            vec![ManifestEntry {
                video_id: "v0".into(),
                feature_path: dir.path().join("v0.ltf"),
                label_path: dir.path().join("v0.txt"),
            }],
            map,
        )
        .unwrap();
        let mpath = dir.path().join("manifest.txt");
        save_manifest(&mpath, &manifest).unwrap();
        assert_eq!(fs::read_to_string(&mpath).unwrap(), "v0 v0.ltf v0.txt\n");
        let loaded = load_manifest(&mpath, &dir.path().join("mapping.txt")).unwrap();
        assert_eq!(loaded, manifest);
        let videos = load_dataset(&loaded).unwrap();
        assert_eq!(videos[0].labels.labels, vec![0, 1, 1]);

        fs::write(dir.path().join("v0.txt"), "a\nb\n").unwrap();
        assert!(matches!(load_dataset(&loaded), Err(Error::Video { .. })));
    }
}
