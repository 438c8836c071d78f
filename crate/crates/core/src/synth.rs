//! Synthetic coherent-motion sequences. Each group walks as a rigid
//! formation with a shared, slowly turning velocity, reflecting off the image
//! border; members add a small bounded jitter. Different groups move
//! independently and may cross each other. Boxes are randomly dropped to
//! mimic occlusion, except at key frames, where every track is visible and
//! the ground-truth partition is recorded.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::Partition;
use crate::dataio::SceneFile;
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::tracks::{Frame, SceneSample, Track, TrackId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_width: f64,
    pub image_height: f64,
    /// Sequence length; key frames are the multiples of `keyframe_stride`.
    pub frames: usize,
    pub keyframe_stride: usize,
    /// History kept before each key frame when cutting samples.
    pub lookback: usize,
    pub min_groups: usize,
    pub max_groups: usize,
    /// Relative frequency of group sizes `1, 2, ...`.
    pub size_weights: Vec<f64>,
    /// Box width range in pixels; height is width times `aspect`.
    pub box_width: [f64; 2],
    pub aspect: [f64; 2],
    /// Group speed range, pixels per frame.
    pub speed: [f64; 2],
    /// Largest heading change per frame, radians.
    pub turn: f64,
    /// Distance between neighbouring members, in box widths.
    pub member_spacing: [f64; 2],
    /// Per-frame jitter step bound and total jitter bound, in box widths.
    pub jitter_step: f64,
    pub jitter_bound: f64,
    /// Minimum gap between group footprints at the first frame, pixels.
    pub separation: f64,
    /// Probability that a box outside the key frames is dropped.
    pub dropout: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_width: 1280.0,
            image_height: 720.0,
            frames: 60,
            keyframe_stride: 15,
            lookback: 30,
            min_groups: 1,
            max_groups: 5,
            size_weights: vec![0.3, 0.25, 0.2, 0.15, 0.1],
            box_width: [30.0, 50.0],
            aspect: [2.0, 2.6],
            speed: [0.5, 3.0],
            turn: 0.02,
            member_spacing: [1.1, 1.8],
            jitter_step: 0.05,
            jitter_bound: 0.3,
            separation: 20.0,
            dropout: 0.15,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], positive: bool) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) || (positive && r[0] <= 0.0) {
        return Err(Error::Config(format!("{name} range {r:?} is invalid")));
    }
    Ok(())
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

impl SynthConfig {
    pub fn max_group_size(&self) -> usize {
        self.size_weights.len()
    }

    /// Key frames of a generated sequence.
    pub fn keyframes(&self) -> Vec<Frame> {
        let stride = self.keyframe_stride as Frame;
        (1..=self.frames as Frame / stride).map(|k| k * stride).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.image_width > 0.0 && self.image_height > 0.0) || self.frames == 0 {
            return Err(Error::Config("image size and frame count must be positive".into()));
        }
        if self.keyframe_stride == 0 || self.keyframe_stride > self.frames || self.lookback == 0 {
            return Err(Error::Config(format!(
                "keyframe_stride {} and lookback {} must be positive with at least one key frame in {} frames",
                self.keyframe_stride, self.lookback, self.frames
            )));
        }
        if self.min_groups == 0 || self.min_groups > self.max_groups {
            return Err(Error::Config(format!(
                "group count range {}..={} is invalid",
                self.min_groups, self.max_groups
            )));
        }
        if self.size_weights.is_empty()
            || self.size_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.size_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("size_weights must be nonnegative with a positive sum".into()));
        }
        check_range("box_width", self.box_width, true)?;
        check_range("aspect", self.aspect, true)?;
        check_range("speed", self.speed, false)?;
        check_range("member_spacing", self.member_spacing, true)?;
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} is not a probability", self.dropout)));
        }
        let nonneg = [self.jitter_step, self.jitter_bound, self.separation, self.speed[0], self.turn];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("jitter, separation, speed and turn must be nonnegative".into()));
        }
        let (w, h) = self.footprint(self.max_group_size(), self.box_width[1], self.member_spacing[1]);
        if w + self.separation > self.image_width || h + self.separation > self.image_height {
            return Err(Error::Config("a single group does not fit in the image".into()));
        }
        let needed = self.max_groups as f64 * (w + self.separation) * (h + self.separation);
        if needed > self.image_width * self.image_height {
            return Err(Error::Config(format!(
                "{} groups of up to {} members cannot be packed into {}x{}",
                self.max_groups,
                self.max_group_size(),
                self.image_width,
                self.image_height
            )));
        }
        Ok(())
    }

    /// Formation extent for `size` members of nominal width `width`,
    /// including room for size variation, row stagger and jitter.
    fn footprint(&self, size: usize, width: f64, spacing: f64) -> (f64, f64) {
        let margin = 2.0 * self.jitter_bound * width;
        let widest = 1.08 * width;
        let w = (size - 1) as f64 * spacing * width + widest + margin;
        let h = widest * self.aspect[1] + 0.5 * width + margin;
        (w, h)
    }
}

struct Member {
    id: TrackId,
    offset: (f64, f64),
    size: (f64, f64),
    jitter: (f64, f64),
}

struct Group {
    members: Vec<Member>,
    /// Top-left corner of the formation and its extent.
    anchor: (f64, f64),
    extent: (f64, f64),
    heading: f64,
    speed: f64,
    jitter_step: f64,
    jitter_bound: f64,
}

fn overlaps(a: (f64, f64), ea: (f64, f64), b: (f64, f64), eb: (f64, f64), gap: f64) -> bool {
    a.0 < b.0 + eb.0 + gap && b.0 < a.0 + ea.0 + gap && a.1 < b.1 + eb.1 + gap && b.1 < a.1 + ea.1 + gap
}

fn draw_size(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    weights
        .iter()
        .position(|&w| {
            u -= w;
            u < 0.0 && w > 0.0
        })
        .unwrap_or_else(|| weights.iter().rposition(|&w| w > 0.0).expect("positive weight"))
        + 1
}

fn spawn_groups(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Group>> {
    let n_groups = rng.random_range(cfg.min_groups..=cfg.max_groups);
    let sizes: Vec<usize> = (0..n_groups).map(|_| draw_size(rng, &cfg.size_weights)).collect();
    let mut ids: Vec<TrackId> = (1..=sizes.iter().sum::<usize>() as TrackId).collect();
    ids.shuffle(rng);
    let mut ids = ids.into_iter();
    let mut groups: Vec<Group> = Vec::with_capacity(n_groups);
    for size in sizes {
        let width = draw(rng, cfg.box_width);
        let spacing = draw(rng, cfg.member_spacing);
        let extent = cfg.footprint(size, width, spacing);
        let margin = cfg.jitter_bound * width;
        let mut anchor = None;
        for _ in 0..10_000 {
            let x = rng.random_range(0.0..=(cfg.image_width - extent.0).max(0.0));
            let y = rng.random_range(0.0..=(cfg.image_height - extent.1).max(0.0));
            if groups.iter().all(|g| !overlaps(g.anchor, g.extent, (x, y), extent, cfg.separation)) {
                anchor = Some((x, y));
                break;
            }
        }
        let anchor = anchor.ok_or_else(|| Error::Config("could not place all groups; reduce counts or separation".into()))?;
        let members = (0..size)
            .map(|m| {
                let w = width * rng.random_range(0.92..1.08);
                Member {
                    id: ids.next().expect("one id per member"),
                    offset: (margin + m as f64 * spacing * width, margin + rng.random_range(0.0..0.5) * width),
                    size: (w, w * draw(rng, cfg.aspect)),
                    jitter: (0.0, 0.0),
                }
            })
            .collect();
        groups.push(Group {
            members,
            anchor,
            extent,
            heading: rng.random_range(0.0..std::f64::consts::TAU),
            speed: draw(rng, cfg.speed),
            jitter_step: cfg.jitter_step * width,
            jitter_bound: cfg.jitter_bound * width,
        });
    }
    Ok(groups)
}

impl Group {
    /// Advance one frame, reflecting off the image border.
    fn step(&mut self, cfg: &SynthConfig, rng: &mut ChaCha8Rng) {
        if cfg.turn > 0.0 {
            self.heading += rng.random_range(-cfg.turn..=cfg.turn);
        }
        // vertical motion is compressed, as for people walking on a ground
        // plane seen from a raised camera
        let (mut vx, mut vy) = (self.speed * self.heading.cos(), 0.5 * self.speed * self.heading.sin());
        let (max_x, max_y) = ((cfg.image_width - self.extent.0).max(0.0), (cfg.image_height - self.extent.1).max(0.0));
        let mut x = self.anchor.0 + vx;
        let mut y = self.anchor.1 + vy;
        if x < 0.0 || x > max_x {
            vx = -vx;
            x = x.clamp(0.0, max_x);
        }
        if y < 0.0 || y > max_y {
            vy = -vy;
            y = y.clamp(0.0, max_y);
        }
        self.heading = (2.0 * vy).atan2(vx);
        self.anchor = (x, y);
        if self.jitter_step > 0.0 {
            let (s, b) = (self.jitter_step, self.jitter_bound);
            for m in &mut self.members {
                m.jitter.0 = (m.jitter.0 + rng.random_range(-s..=s)).clamp(-b, b);
                m.jitter.1 = (m.jitter.1 + rng.random_range(-s..=s)).clamp(-b, b);
            }
        }
    }
}

/// A full sequence with a `groups` record at every key frame; deterministic
/// in `seed`.
pub fn synth_sequence(cfg: &SynthConfig, scene_id: &str, seed: u64) -> Result<SceneFile> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = spawn_groups(cfg, &mut rng)?;
    let keyframes = cfg.keyframes();
    let mut states: BTreeMap<TrackId, BTreeMap<Frame, BoundingBox>> = BTreeMap::new();
    for f in 1..=cfg.frames as Frame {
        if f > 1 {
            for g in &mut groups {
                g.step(cfg, &mut rng);
            }
        }
        let key = keyframes.contains(&f);
        for g in &groups {
            for m in &g.members {
                let visible = key || !rng.random_bool(cfg.dropout);
                if !visible {
                    continue;
                }
                let x = g.anchor.0 + m.offset.0 + m.jitter.0;
                let y = g.anchor.1 + m.offset.1 + m.jitter.1;
                if let Some(b) = clip(x, y, m.size.0, m.size.1, cfg) {
                    states.entry(m.id).or_default().insert(f, b);
                }
            }
        }
    }
    let tracks = states
        .into_iter()
        .map(|(id, s)| Track::new(id, s))
        .collect::<Result<Vec<_>>>()?;
    let partition = Partition::new(groups.iter().map(|g| g.members.iter().map(|m| m.id).collect()).collect())?;
    for &kf in &keyframes {
        if tracks.iter().any(|t| t.get(kf).is_none()) {
            return Err(Error::Validation(format!("scene `{scene_id}`: a track is missing at key frame {kf}")));
        }
    }
    Ok(SceneFile {
        scene_id: scene_id.to_string(),
        image_width: cfg.image_width,
        image_height: cfg.image_height,
        frames: cfg.frames as Frame,
        tracks,
        groups: keyframes.iter().map(|&kf| (kf, partition.clone())).collect(),
    })
}

/// The last key frame of [`synth_sequence`], cut to `cfg.lookback` frames.
pub fn synth_scene(cfg: &SynthConfig, scene_id: &str, seed: u64) -> Result<SceneSample> {
    let seq = synth_sequence(cfg, scene_id, seed)?;
    let last = *cfg.keyframes().last().expect("validated");
    seq.sample_at(last, Some(cfg.lookback))
}

/// Seed of scene `index` in split `split` of a dataset generated from `seed`.
pub fn scene_seed(seed: u64, split: u64, index: u64) -> u64 {
    // splitmix64 finaliser over a packed key
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split << 40)
        .wrapping_add(index);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` sequences named `{prefix}_{index:04}` with seeds from [`scene_seed`].
pub fn synth_split(cfg: &SynthConfig, seed: u64, split: u64, prefix: &str, count: usize) -> Result<Vec<SceneFile>> {
    (0..count)
        .map(|k| synth_sequence(cfg, &format!("{prefix}_{k:04}"), scene_seed(seed, split, k as u64)))
        .collect()
}

/// Every key-frame sample of `files`, cut to `cfg.lookback` frames.
pub fn split_samples(files: &[SceneFile], cfg: &SynthConfig) -> Result<Vec<SceneSample>> {
    let mut out = Vec::new();
    for f in files {
        out.extend(f.samples(cfg.keyframe_stride, cfg.lookback)?);
    }
    Ok(out)
}

fn clip(x: f64, y: f64, w: f64, h: f64, cfg: &SynthConfig) -> Option<BoundingBox> {
    let (x0, y0) = (x.max(0.0), y.max(0.0));
    let (x1, y1) = ((x + w).min(cfg.image_width), (y + h).min(cfg.image_height));
    (x1 - x0 >= 2.0 && y1 - y0 >= 2.0).then(|| BoundingBox::new(x0, y0, x1 - x0, y1 - y0).expect("positive size"))
}
