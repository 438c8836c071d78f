//! Tracks with gapped temporal support, scene samples, and the
//! time-averaged track distance.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::ops::RangeInclusive;

use nalgebra::DMatrix;

use crate::clustering::Partition;
use crate::error::{Error, Result};
use crate::geometry::{giou_distance, BoundingBox};

pub type TrackId = u64;
pub type Frame = i64;

/// One subject's boxes indexed by frame. Gaps are allowed; the support is
/// never empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    id: TrackId,
    states: BTreeMap<Frame, BoundingBox>,
}

impl Track {
    pub fn new(id: TrackId, states: BTreeMap<Frame, BoundingBox>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Validation(format!("track {id} has no frames")));
        }
        Ok(Self { id, states })
    }

    pub fn from_boxes(id: TrackId, boxes: impl IntoIterator<Item = (Frame, BoundingBox)>) -> Result<Self> {
        Self::new(id, boxes.into_iter().collect())
    }

    pub fn id(&self) -> TrackId {
        self.id
    }

    pub fn states(&self) -> &BTreeMap<Frame, BoundingBox> {
        &self.states
    }

    pub fn get(&self, frame: Frame) -> Option<&BoundingBox> {
        self.states.get(&frame)
    }

    pub fn support(&self) -> impl Iterator<Item = Frame> + '_ {
        self.states.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn first_frame(&self) -> Frame {
        *self.states.keys().next().expect("non-empty")
    }

    pub fn last_frame(&self) -> Frame {
        *self.states.keys().next_back().expect("non-empty")
    }

    /// The part of the track inside `frames`, or `None` if nothing is left.
    pub fn restrict(&self, frames: RangeInclusive<Frame>) -> Option<Track> {
        let states: BTreeMap<_, _> = self.states.range(frames).map(|(&f, &b)| (f, b)).collect();
        (!states.is_empty()).then_some(Track { id: self.id, states })
    }
}

/// Per-frame distance between two tracks viewed as singleton-or-empty sets:
/// the GIoU distance when both exist, 1 when exactly one exists, 0 when
/// neither does.
pub fn singleton_distance(a: &Track, b: &Track, t: Frame) -> f64 {
    match (a.get(t), b.get(t)) {
        (Some(x), Some(y)) => giou_distance(x, y),
        (Some(_), None) | (None, Some(_)) => 1.0,
        (None, None) => 0.0,
    }
}

/// Mean of [`singleton_distance`] over the union of both supports; 0 when
/// that union is empty.
pub fn track_distance(a: &Track, b: &Track) -> f64 {
    let frames: BTreeSet<Frame> = a.support().chain(b.support()).collect();
    if frames.is_empty() {
        return 0.0;
    }
    let total: f64 = frames.iter().map(|&t| singleton_distance(a, b, t)).sum();
    total / frames.len() as f64
}

/// Symmetric matrix of [`track_distance`] over all pairs.
pub fn distance_matrix(tracks: &[Track]) -> Result<DMatrix<f64>> {
    let n = tracks.len();
    if n == 0 {
        return Err(Error::Input("distance matrix of zero tracks".into()));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = tracks.iter().find(|t| !seen.insert(t.id)) {
        return Err(Error::Input(format!("duplicate track id {}", dup.id)));
    }
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = track_distance(&tracks[i], &tracks[j]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(d)
}

/// Tracks at one key frame with their ground-truth grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub scene_id: String,
    pub image_width: f64,
    pub image_height: f64,
    pub keyframe: Frame,
    pub tracks: Vec<Track>,
    pub groups: Partition,
}

impl SceneSample {
    /// Validates unique ids, that every track is observed at the key frame,
    /// and that `groups` partitions exactly the track ids.
    pub fn new(
        scene_id: impl Into<String>,
        (image_width, image_height): (f64, f64),
        keyframe: Frame,
        tracks: Vec<Track>,
        groups: Partition,
    ) -> Result<Self> {
        let scene_id = scene_id.into();
        if !(image_width > 0.0 && image_height > 0.0) {
            return Err(Error::Validation(format!(
                "scene `{scene_id}`: image size {image_width}x{image_height} must be positive"
            )));
        }
        if tracks.is_empty() {
            return Err(Error::Validation(format!("scene `{scene_id}` has no tracks")));
        }
        let mut ids = BTreeSet::new();
        for t in &tracks {
            if !ids.insert(t.id) {
                return Err(Error::Validation(format!("scene `{scene_id}`: duplicate track id {}", t.id)));
            }
            if t.get(keyframe).is_none() {
                return Err(Error::Validation(format!(
                    "scene `{scene_id}`: track {} is not observed at key frame {keyframe}",
                    t.id
                )));
            }
        }
        let covered: BTreeSet<TrackId> = groups.members().collect();
        if covered != ids {
            return Err(Error::Validation(format!(
                "scene `{scene_id}`: groups cover {covered:?} but tracks are {ids:?}"
            )));
        }
        Ok(Self {
            scene_id,
            image_width,
            image_height,
            keyframe,
            tracks,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn ids(&self) -> Vec<TrackId> {
        self.tracks.iter().map(Track::id).collect()
    }

    /// Binary same-group matrix in track order (zero diagonal).
    pub fn gt_adjacency(&self) -> DMatrix<f64> {
        self.groups.adjacency(&self.ids())
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Same scene with tracks reordered by `perm` (new position `k` holds old
    /// track `perm[k]`).
    pub fn permuted(&self, perm: &[usize]) -> SceneSample {
        SceneSample {
            tracks: perm.iter().map(|&k| self.tracks[k].clone()).collect(),
            ..self.clone()
        }
    }
}
