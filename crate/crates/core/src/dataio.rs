//! Scene files, dataset manifests and key-frame sampling.
//!
//! # Scene file
//!
//! Line-oriented UTF-8 text. The first line is the format tag; blank lines
//! and lines starting with `#` after it are ignored. Fields are separated by
//! whitespace.
//!
//! ```text
//! #trackgroup-scene v1
//! scene <id> <image_width> <image_height> <frames>
//! box <frame> <track_id> <x> <y> <w> <h>
//! groups <frame> <id>,<id>,... | <id>,... | ...
//! ```
//!
//! `scene` appears exactly once, before any other record. Frames are 1-based
//! (`1..=frames`). Boxes are left/top/width/height in pixels; a track exists
//! on exactly the frames it has `box` records for. A `groups` record gives the
//! ground-truth partition of the tracks visible at that frame.
//!
//! # Key frames
//!
//! With stride `s`, the candidate key frames of a scene are `s, 2s, ...` up to
//! its frame count (a 45-frame scene at stride 15 has candidates 15, 30, 45).
//! A candidate becomes a sample when the file has a `groups` record for it.
//! Each sample keeps the tracks visible at the key frame, restricted to the
//! `lookback` frames ending there; earlier frames are treated as absent.
//!
//! # Manifest
//!
//! TOML; split paths are relative to the manifest's directory.
//!
//! ```toml
//! format = "trackgroup-manifest/1"
//! image_width = 1280.0
//! image_height = 720.0
//! frame_rate = 15.0
//! keyframe_stride = 15
//! lookback = 30
//!
//! [splits]
//! train = ["train/scene_0000.txt"]
//! val = ["val/scene_0000.txt"]
//! test = []
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::Partition;
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::tracks::{Frame, SceneSample, Track, TrackId};

pub const SCENE_FORMAT: &str = "#trackgroup-scene v1";
pub const MANIFEST_FORMAT: &str = "trackgroup-manifest/1";

/// Parsed content of one scene file.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFile {
    pub scene_id: String,
    pub image_width: f64,
    pub image_height: f64,
    pub frames: Frame,
    pub tracks: Vec<Track>,
    pub groups: BTreeMap<Frame, Partition>,
}

impl SceneFile {
    /// A file holding one sample: its tracks and a `groups` record at its key
    /// frame. `frames` defaults to the key frame.
    pub fn from_sample(sample: &SceneSample) -> Self {
        let frames = sample.tracks.iter().map(Track::last_frame).max().unwrap_or(sample.keyframe).max(sample.keyframe);
        Self {
            scene_id: sample.scene_id.clone(),
            image_width: sample.image_width,
            image_height: sample.image_height,
            frames,
            tracks: sample.tracks.clone(),
            groups: BTreeMap::from([(sample.keyframe, sample.groups.clone())]),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{SCENE_FORMAT}\n");
        let _ = writeln!(
            out,
            "scene {} {} {} {}",
            self.scene_id, self.image_width, self.image_height, self.frames
        );
        let mut boxes: Vec<(Frame, TrackId, BoundingBox)> = self
            .tracks
            .iter()
            .flat_map(|t| t.states().iter().map(move |(&f, &b)| (f, t.id(), b)))
            .collect();
        boxes.sort_by_key(|&(f, id, _)| (f, id));
        for (f, id, b) in boxes {
            let _ = writeln!(out, "box {f} {id} {} {} {} {}", b.x, b.y, b.w, b.h);
        }
        for (f, p) in &self.groups {
            let _ = writeln!(out, "groups {f} {p}");
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim_end() == SCENE_FORMAT => {}
            _ => return Err(err(1, format!("expected format tag `{SCENE_FORMAT}`"))),
        }
        let mut header: Option<(String, f64, f64, Frame)> = None;
        let mut states: BTreeMap<TrackId, BTreeMap<Frame, BoundingBox>> = BTreeMap::new();
        let mut groups = BTreeMap::new();
        for (no, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_whitespace();
            let kind = fields.next().expect("non-empty line");
            let rest: Vec<&str> = fields.collect();
            let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| err(no, format!("bad number `{s}`"))) };
            let int = |s: &str| -> Result<i64> { s.parse().map_err(|_| err(no, format!("bad integer `{s}`"))) };
            match kind {
                "scene" => {
                    if header.is_some() {
                        return Err(err(no, "duplicate scene record".into()));
                    }
                    let [id, w, h, frames] = rest[..] else {
                        return Err(err(no, "scene record needs: id width height frames".into()));
                    };
                    let (w, h, frames) = (num(w)?, num(h)?, int(frames)?);
                    if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) || frames < 1 {
                        return Err(err(no, "image size and frame count must be positive".into()));
                    }
                    header = Some((id.to_string(), w, h, frames));
                }
                "box" => {
                    let Some((_, _, _, frames)) = header else {
                        return Err(err(no, "box before scene record".into()));
                    };
                    let [f, id, x, y, w, h] = rest[..] else {
                        return Err(err(no, "box record needs: frame track x y w h".into()));
                    };
                    let f = int(f)?;
                    if !(1..=frames).contains(&f) {
                        return Err(err(no, format!("frame {f} outside 1..={frames}")));
                    }
                    let id: TrackId = id.parse().map_err(|_| err(no, format!("bad track id `{id}`")))?;
                    let b = BoundingBox::new(num(x)?, num(y)?, num(w)?, num(h)?).map_err(|e| err(no, e.to_string()))?;
                    if states.entry(id).or_default().insert(f, b).is_some() {
                        return Err(err(no, format!("track {id} has two boxes at frame {f}")));
                    }
                }
                "groups" => {
                    if header.is_none() {
                        return Err(err(no, "groups before scene record".into()));
                    }
                    let Some((f, spec)) = rest.split_first() else {
                        return Err(err(no, "groups record needs a frame".into()));
                    };
                    let f = int(f)?;
                    let p = parse_partition(&spec.join(" ")).map_err(|m| err(no, m))?;
                    if groups.insert(f, p).is_some() {
                        return Err(err(no, format!("second groups record for frame {f}")));
                    }
                }
                other => return Err(err(no, format!("unknown record `{other}`"))),
            }
        }
        let Some((scene_id, image_width, image_height, frames)) = header else {
            return Err(err(0, "missing scene record".into()));
        };
        let tracks = states
            .into_iter()
            .map(|(id, s)| Track::new(id, s))
            .collect::<Result<Vec<_>>>()?;
        let file = Self {
            scene_id,
            image_width,
            image_height,
            frames,
            tracks,
            groups,
        };
        for &f in file.groups.keys() {
            file.sample_at(f, None)?;
        }
        Ok(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Sample at `keyframe`: tracks visible there, optionally restricted to
    /// the `lookback` frames ending at it.
    pub fn sample_at(&self, keyframe: Frame, lookback: Option<usize>) -> Result<SceneSample> {
        let groups = self
            .groups
            .get(&keyframe)
            .ok_or_else(|| Error::Validation(format!("scene `{}` has no groups at frame {keyframe}", self.scene_id)))?;
        let start = lookback.map_or(Frame::MIN, |l| keyframe - l as Frame + 1);
        let tracks = self
            .tracks
            .iter()
            .filter(|t| t.get(keyframe).is_some())
            .map(|t| t.restrict(start..=keyframe).expect("visible at key frame"))
            .collect();
        SceneSample::new(
            format!("{}@{keyframe}", self.scene_id),
            (self.image_width, self.image_height),
            keyframe,
            tracks,
            groups.clone(),
        )
    }

    /// Key frames at multiples of `stride` that carry a `groups` record.
    pub fn keyframes(&self, stride: usize) -> Vec<Frame> {
        let stride = stride.max(1) as Frame;
        (1..=self.frames / stride)
            .map(|k| k * stride)
            .filter(|f| self.groups.contains_key(f))
            .collect()
    }

    pub fn samples(&self, stride: usize, lookback: usize) -> Result<Vec<SceneSample>> {
        self.keyframes(stride)
            .into_iter()
            .map(|f| self.sample_at(f, Some(lookback)))
            .collect()
    }
}

/// Parse `1,2 | 3` into a partition.
pub fn parse_partition(spec: &str) -> std::result::Result<Partition, String> {
    let groups = spec
        .split('|')
        .map(|g| {
            g.split(',')
                .map(|id| id.trim().parse::<TrackId>().map_err(|_| format!("bad track id `{}`", id.trim())))
                .collect::<std::result::Result<Vec<_>, _>>()
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Partition::new(groups).map_err(|e| e.to_string())
}

/// Single-sample file: the file's only `groups` record, all tracks as stored.
pub fn load_scene(path: impl AsRef<Path>) -> Result<SceneSample> {
    let file = SceneFile::load(path.as_ref())?;
    let mut keys = file.groups.keys();
    match (keys.next(), keys.next()) {
        (Some(&f), None) => file.sample_at(f, None),
        _ => Err(Error::Validation(format!(
            "{}: expected exactly one groups record, found {}",
            path.as_ref().display(),
            file.groups.len()
        ))),
    }
}

pub fn save_scene(sample: &SceneSample, path: impl AsRef<Path>) -> Result<()> {
    SceneFile::from_sample(sample).save(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|split| split.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    #[serde(default)]
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub val: Vec<PathBuf>,
    #[serde(default)]
    pub test: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub image_width: f64,
    pub image_height: f64,
    pub frame_rate: f64,
    pub keyframe_stride: usize,
    pub lookback: usize,
    pub splits: Splits,
    /// Directory the split paths are relative to; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(image: (f64, f64), frame_rate: f64, keyframe_stride: usize, lookback: usize) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            image_width: image.0,
            image_height: image.1,
            frame_rate,
            keyframe_stride,
            lookback,
            splits: Splits::default(),
            root: PathBuf::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != MANIFEST_FORMAT {
            return Err(Error::Validation(format!(
                "manifest format `{}`, expected `{MANIFEST_FORMAT}`",
                self.format
            )));
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0 && self.frame_rate > 0.0) {
            return Err(Error::Validation("manifest dimensions and frame rate must be positive".into()));
        }
        if self.keyframe_stride == 0 || self.lookback == 0 {
            return Err(Error::Validation("keyframe_stride and lookback must be positive".into()));
        }
        Ok(())
    }

    pub fn files(&self, split: Split) -> &[PathBuf] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    pub fn files_mut(&mut self, split: Split) -> &mut Vec<PathBuf> {
        match split {
            Split::Train => &mut self.splits.train,
            Split::Val => &mut self.splits.val,
            Split::Test => &mut self.splits.test,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        m.validate()?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

/// One sample per key frame of every file in `split`, in file order.
pub fn keyframe_samples(manifest: &DatasetManifest, split: Split) -> Result<Vec<SceneSample>> {
    let mut out = Vec::new();
    for rel in manifest.files(split) {
        let file = SceneFile::load(manifest.root.join(rel))?;
        if file.image_width != manifest.image_width || file.image_height != manifest.image_height {
            return Err(Error::Validation(format!(
                "{}: image size {}x{} differs from manifest {}x{}",
                rel.display(),
                file.image_width,
                file.image_height,
                manifest.image_width,
                manifest.image_height
            )));
        }
        out.extend(file.samples(manifest.keyframe_stride, manifest.lookback)?);
    }
    Ok(out)
}
