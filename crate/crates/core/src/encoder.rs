//! LSTM trajectory encoder: every track's sub-sampled box history up to the
//! key frame becomes one node feature vector.

use serde::{Deserialize, Serialize};
use trackgroup_nd::{Bindings, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::nn::Init;
use crate::tracks::{Frame, Track};

pub const INPUT_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub max_frames: usize,
    pub frame_stride: usize,
    /// Frames before the key frame a window may reach back to (inclusive of
    /// the key frame).
    pub lookback: usize,
    /// Feed only the key-frame box (no motion history).
    pub det_only: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            max_frames: 15,
            frame_stride: 2,
            lookback: 30,
            det_only: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.max_frames == 0 || self.frame_stride == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.frame_stride * (self.max_frames - 1) >= self.lookback {
            return Err(Error::Config(format!(
                "{} frames at stride {} do not fit in a {}-frame lookback",
                self.max_frames, self.frame_stride, self.lookback
            )));
        }
        Ok(())
    }

    /// Frames of the encoder window ending at `keyframe`, oldest first.
    pub fn window_frames(&self, keyframe: Frame) -> Vec<Frame> {
        if self.det_only {
            return vec![keyframe];
        }
        let span = (self.frame_stride * (self.max_frames - 1)) as Frame;
        (0..self.max_frames as Frame)
            .map(|k| keyframe - span + k * self.frame_stride as Frame)
            .collect()
    }
}

pub type Window = Vec<(Frame, Option<BoundingBox>)>;

/// Every `frame_stride`-th frame of the lookback ending at the key frame, each
/// with the track's box or `None` where the track is absent.
pub fn sample_window(track: &Track, keyframe: Frame, cfg: &EncoderConfig) -> Window {
    cfg.window_frames(keyframe)
        .into_iter()
        .map(|f| (f, track.get(f).copied()))
        .collect()
}

pub fn init_params(init: &mut Init, cfg: &EncoderConfig) -> Result<()> {
    let h = cfg.hidden_dim;
    init.glorot("encoder.lstm.w_x", INPUT_DIM, 4 * h)?;
    init.glorot("encoder.lstm.w_h", h, 4 * h)?;
    let bias = Tensor::from_fn(1, 4 * h, |_, c| if (h..2 * h).contains(&c) { 1.0 } else { 0.0 });
    init.tensor("encoder.lstm.b", bias)
}

/// Time-major LSTM inputs for a batch of windows. Steps where no track is
/// present are dropped; per-row masks make absent frames leave the state
/// untouched.
#[derive(Debug, Clone)]
pub struct EncoderInput {
    rows: usize,
    steps: Vec<Step>,
}

#[derive(Debug, Clone)]
struct Step {
    x: Tensor,
    /// `None` when every row is present.
    mask: Option<Tensor>,
}

impl EncoderInput {
    /// Boxes are divided by the image size before entering the network.
    pub fn new(windows: &[Window], image: (f64, f64), hidden_dim: usize) -> Result<Self> {
        let n = windows.len();
        if n == 0 {
            return Err(Error::Input("no windows to encode".into()));
        }
        if let Some(k) = windows.iter().position(|w| w.iter().all(|(_, b)| b.is_none())) {
            return Err(Error::Input(format!("window {k} has no present frame")));
        }
        let len = windows[0].len();
        if windows.iter().any(|w| w.len() != len) {
            return Err(Error::Input("windows differ in length".into()));
        }
        let (iw, ih) = image;
        let mut steps = Vec::new();
        for s in 0..len {
            let present: Vec<bool> = windows.iter().map(|w| w[s].1.is_some()).collect();
            if !present.contains(&true) {
                continue;
            }
            let x = Tensor::from_fn(n, INPUT_DIM, |i, c| match windows[i][s].1 {
                Some(b) => [b.x / iw, b.y / ih, b.w / iw, b.h / ih][c],
                None => 0.0,
            });
            let mask = (!present.iter().all(|&p| p))
                .then(|| Tensor::from_fn(n, hidden_dim, |i, _| f64::from(u8::from(present[i]))));
            steps.push(Step { x, mask });
        }
        Ok(Self { rows: n, steps })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }
}

/// Final hidden states, `n x hidden_dim`.
pub fn encode(t: &mut Tape, p: &Bindings, input: &EncoderInput, hidden_dim: usize) -> Result<Var> {
    let (w_x, w_h, b) = (p["encoder.lstm.w_x"], p["encoder.lstm.w_h"], p["encoder.lstm.b"]);
    let h = hidden_dim;
    let mut state: Option<(Var, Var)> = None;
    for step in &input.steps {
        let x = t.constant(step.x.clone());
        let mut z = t.matmul(x, w_x)?;
        if let Some((h_prev, _)) = state {
            let r = t.matmul(h_prev, w_h)?;
            z = t.add(z, r)?;
        }
        let z = t.add_row(z, b)?;
        let zi = t.slice_cols(z, 0, h)?;
        let zf = t.slice_cols(z, h, 2 * h)?;
        let zg = t.slice_cols(z, 2 * h, 3 * h)?;
        let zo = t.slice_cols(z, 3 * h, 4 * h)?;
        let (gi, gg, go) = (t.sigmoid(zi), t.tanh(zg), t.sigmoid(zo));
        let mut c_new = t.mul(gi, gg)?;
        if let Some((_, c_prev)) = state {
            let gf = t.sigmoid(zf);
            let keep = t.mul(gf, c_prev)?;
            c_new = t.add(c_new, keep)?;
        }
        let tc = t.tanh(c_new);
        let h_new = t.mul(go, tc)?;
        state = Some(match (&step.mask, state) {
            (None, _) => (h_new, c_new),
            (Some(m), prev) => {
                let m = t.constant(m.clone());
                let blend = |t: &mut Tape, new: Var, old: Option<Var>| -> Result<Var> {
                    match old {
                        None => Ok(t.mul(m, new)?),
                        Some(old) => {
                            let delta = t.sub(new, old)?;
                            let delta = t.mul(m, delta)?;
                            Ok(t.add(old, delta)?)
                        }
                    }
                };
                (
                    blend(t, h_new, prev.map(|s| s.0))?,
                    blend(t, c_new, prev.map(|s| s.1))?,
                )
            }
        });
    }
    let (h_final, _) = state.ok_or_else(|| Error::Input("nothing to encode".into()))?;
    Ok(h_final)
}

/// Encode a single window on an inference tape.
pub fn encode_track(
    window: &Window,
    image: (f64, f64),
    params: &trackgroup_nd::ParameterStore,
    cfg: &EncoderConfig,
) -> Result<Tensor> {
    let input = EncoderInput::new(std::slice::from_ref(window), image, cfg.hidden_dim)?;
    let mut t = Tape::inference();
    let p = params.bind(&mut t);
    let h = encode(&mut t, &p, &input, cfg.hidden_dim)?;
    Ok(t.value(h).clone())
}
