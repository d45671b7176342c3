//! The synthetic verb/object activity task.
//!
//! A clip shows one target glyph performing an action among static
//! distractor glyphs of other shapes. The activity label is the pair
//! `(action, object)`, flattened as `action * O + object`. All five glyphs
//! have five lit pixels in a 3x3 box, so shape is only visible through
//! spatial structure; the action is only visible across frames.

use alloc::string::ToString;
use alloc::vec::Vec;
use alloc::format;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

pub const GLYPH_SIZE: usize = 3;

/// Lit pixels `(row, col)` of each glyph in its 3x3 box.
pub const GLYPHS: [[(usize, usize); 5]; 5] = [
    // plus
    [(0, 1), (1, 0), (1, 1), (1, 2), (2, 1)],
    // x
    [(0, 0), (0, 2), (1, 1), (2, 0), (2, 2)],
    // l
    [(0, 0), (1, 0), (2, 0), (2, 1), (2, 2)],
    // t
    [(0, 0), (0, 1), (0, 2), (1, 1), (2, 1)],
    // z
    [(0, 0), (0, 1), (1, 1), (2, 1), (2, 2)],
];

pub const OBJECT_NAMES: [&str; 5] = ["plus", "x", "l", "t", "z"];
pub const ACTION_NAMES: [&str; 4] = ["hold", "stir", "drag", "shake"];

/// Radius-2 orbit sampled every 45 degrees, `(dy, dx)`.
const ORBIT: [(i32, i32); 8] = [(0, 2), (1, 1), (2, 0), (1, -1), (0, -2), (-1, -1), (-2, 0), (-1, 1)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Hold,
    Stir,
    Drag,
    Shake,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Hold, Action::Stir, Action::Drag, Action::Shake];

    pub fn from_index(i: usize) -> Result<Self> {
        Action::ALL.get(i).copied().ok_or(Error::OutOfRange {
            what: "action",
            index: i,
            bound: 4,
        })
    }

    /// Offset `(dy, dx)` of the glyph at frame `t`.
    pub fn offset(self, t: usize) -> (i32, i32) {
        match self {
            Action::Hold => (0, 0),
            Action::Stir => ORBIT[t % ORBIT.len()],
            Action::Drag => (0, (t / 2) as i32),
            // period 4 so frames sampled at stride 2 still alternate
            Action::Shake => (0, (((t + 1) / 2) % 2) as i32),
        }
    }

    /// `(min_dy, max_dy, min_dx, max_dx)` over `frames` frames.
    pub fn envelope(self, frames: usize) -> (i32, i32, i32, i32) {
        let mut e = (0, 0, 0, 0);
        for t in 0..frames {
            let (dy, dx) = self.offset(t);
            e = (e.0.min(dy), e.1.max(dy), e.2.min(dx), e.3.max(dx));
        }
        e
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(deny_unknown_fields))]
pub struct ToyTaskConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub actions: usize,
    pub objects: usize,
    pub distractors: usize,
    pub frames: usize,
    pub noise: f64,
    /// Intensity of distractor glyphs relative to the target.
    pub distractor_gain: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        ToyTaskConfig {
            height: 16,
            width: 16,
            channels: 1,
            actions: 4,
            objects: 5,
            distractors: 2,
            frames: 16,
            noise: 0.05,
            distractor_gain: 0.5,
            train_per_class: 40,
            test_per_class: 10,
            seed: 0,
        }
    }
}

impl ToyTaskConfig {
    pub fn classes(&self) -> usize {
        self.actions * self.objects
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.actions == 0 || self.actions > Action::ALL.len() {
            return bad("actions must be between 1 and 4");
        }
        if self.objects == 0 || self.objects > GLYPHS.len() {
            return bad("objects must be between 1 and 5");
        }
        if self.distractors + 1 > self.objects {
            return bad("distractors need distinct shapes other than the target");
        }
        if self.frames == 0 || self.channels == 0 {
            return bad("frames and channels must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        if !self.distractor_gain.is_finite() {
            return bad("distractor gain must be finite");
        }
        for a in &Action::ALL[..self.actions] {
            let (y0, y1, x0, x1) = a.envelope(self.frames);
            let need_h = (y1 - y0) as usize + GLYPH_SIZE;
            let need_w = (x1 - x0) as usize + GLYPH_SIZE;
            if need_h > self.height || need_w > self.width {
                return Err(Error::InvalidConfig(format!(
                    "{}x{} grid too small for the {:?} trajectory ({}x{})",
                    self.height, self.width, a, need_h, need_w
                )));
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            actions: self.actions,
            objects: self.objects,
            frames: self.frames,
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }
}

/// Target glyph box at one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub top: u16,
    pub left: u16,
    pub height: u16,
    pub width: u16,
}

impl BBox {
    pub fn area(&self) -> usize {
        self.height as usize * self.width as usize
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (t, l) = (self.top as usize, self.left as usize);
        y >= t && y < t + self.height as usize && x >= l && x < l + self.width as usize
    }
}

/// Dimensions shared by every sample in a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetMeta {
    pub actions: usize,
    pub objects: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl DatasetMeta {
    pub fn classes(&self) -> usize {
        self.actions * self.objects
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn clip_len(&self) -> usize {
        self.frames * self.frame_len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyActivitySample {
    pub action: usize,
    pub object: usize,
    pub track: Vec<BBox>,
    /// `frames x channels x height x width`, row-major.
    pub frames: Vec<f32>,
}

impl ToyActivitySample {
    pub fn activity(&self, objects: usize) -> usize {
        self.action * objects + self.object
    }

    pub fn frame(&self, meta: &DatasetMeta, t: usize) -> Result<Tensor> {
        if t >= meta.frames {
            return Err(Error::OutOfRange {
                what: "frame",
                index: t,
                bound: meta.frames,
            });
        }
        let n = meta.frame_len();
        let data = self.frames[t * n..(t + 1) * n].iter().map(|&v| v as f64).collect();
        Tensor::new(&[meta.channels, meta.height, meta.width], data)
    }

    pub fn all_frames(&self, meta: &DatasetMeta) -> Result<Vec<Tensor>> {
        (0..meta.frames).map(|t| self.frame(meta, t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<ToyActivitySample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.activity(self.meta.objects)).collect()
    }
}

pub fn decompose_prediction(activity: usize, actions: usize, objects: usize) -> Result<(usize, usize)> {
    if objects == 0 || activity >= actions * objects {
        return Err(Error::OutOfRange {
            what: "activity",
            index: activity,
            bound: actions * objects,
        });
    }
    Ok((activity / objects, activity % objects))
}

pub fn compose(action: usize, object: usize, objects: usize) -> usize {
    action * objects + object
}

/// `frames` indices spread evenly over `[0, total)`: `floor(i * total / frames)`.
pub fn sample_indices(total: usize, frames: usize) -> Vec<usize> {
    (0..frames).map(|i| i * total / frames).collect()
}

/// Generates `(train, test)`. Sample `i` of a split has activity `i mod L`.
pub fn generate_dataset(cfg: &ToyTaskConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let mut rng = SplitMix64::derive(cfg.seed, 0x7261_696e);
    let train = generate_split(cfg, cfg.train_per_class, &mut rng)?;
    let mut rng = SplitMix64::derive(cfg.seed, 0x7465_7374);
    let test = generate_split(cfg, cfg.test_per_class, &mut rng)?;
    Ok((train, test))
}

fn generate_split(cfg: &ToyTaskConfig, per_class: usize, rng: &mut SplitMix64) -> Result<Dataset> {
    let l = cfg.classes();
    let samples = (0..per_class * l)
        .map(|i| {
            let (action, object) = decompose_prediction(i % l, cfg.actions, cfg.objects)?;
            generate_sample(cfg, action, object, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        meta: cfg.meta(),
        samples,
    })
}

fn overlaps(a: (i32, i32, i32, i32), b: (i32, i32, i32, i32)) -> bool {
    // boxes as (top, left, bottom_exclusive, right_exclusive), one pixel apart at least
    a.0 <= b.2 && b.0 <= a.2 && a.1 <= b.3 && b.1 <= a.3
}

/// Renders one clip of `action` on `object`.
pub fn generate_sample(cfg: &ToyTaskConfig, action: usize, object: usize, rng: &mut SplitMix64) -> Result<ToyActivitySample> {
    let act = Action::from_index(action)?;
    if object >= cfg.objects {
        return Err(Error::OutOfRange {
            what: "object",
            index: object,
            bound: cfg.objects,
        });
    }
    let (h, w) = (cfg.height as i32, cfg.width as i32);
    let g = GLYPH_SIZE as i32;
    let (y0, y1, x0, x1) = act.envelope(cfg.frames);
    let top = -y0 + rng.below((h - g - (y1 - y0) + 1) as usize) as i32;
    let left = -x0 + rng.below((w - g - (x1 - x0) + 1) as usize) as i32;
    let mut occupied = alloc::vec![(top + y0, left + x0, top + y1 + g, left + x1 + g)];

    let mut others: Vec<usize> = (0..cfg.objects).filter(|&o| o != object).collect();
    rng.shuffle(&mut others);
    let mut distractors = Vec::with_capacity(cfg.distractors);
    for &shape in others.iter().take(cfg.distractors) {
        let mut placed = None;
        for _ in 0..1000 {
            let dy = rng.below((h - g + 1) as usize) as i32;
            let dx = rng.below((w - g + 1) as usize) as i32;
            let b = (dy, dx, dy + g, dx + g);
            if occupied.iter().all(|&o| !overlaps(o, b)) {
                placed = Some((dy, dx));
                occupied.push(b);
                break;
            }
        }
        let (dy, dx) = placed.ok_or_else(|| {
            Error::InvalidConfig(format!("no room for distractors on a {}x{} grid", cfg.height, cfg.width))
        })?;
        distractors.push((shape, dy, dx));
    }

    let meta = cfg.meta();
    let plane = cfg.height * cfg.width;
    let mut frames = Vec::with_capacity(meta.clip_len());
    let mut track = Vec::with_capacity(cfg.frames);
    let mut canvas = alloc::vec![0.0f64; plane];
    for t in 0..cfg.frames {
        canvas.iter_mut().for_each(|v| *v = 0.0);
        let (dy, dx) = act.offset(t);
        let (ty, tx) = ((top + dy) as usize, (left + dx) as usize);
        draw(&mut canvas, cfg.width, object, ty, tx, 1.0);
        for &(shape, y, x) in &distractors {
            draw(&mut canvas, cfg.width, shape, y as usize, x as usize, cfg.distractor_gain);
        }
        track.push(BBox {
            top: ty as u16,
            left: tx as u16,
            height: GLYPH_SIZE as u16,
            width: GLYPH_SIZE as u16,
        });
        for _ in 0..cfg.channels {
            for &v in &canvas {
                let noise = if cfg.noise > 0.0 { cfg.noise * rng.gaussian() } else { 0.0 };
                frames.push((v + noise) as f32);
            }
        }
    }
    Ok(ToyActivitySample {
        action,
        object,
        track,
        frames,
    })
}

fn draw(canvas: &mut [f64], width: usize, shape: usize, top: usize, left: usize, gain: f64) {
    for &(r, c) in &GLYPHS[shape] {
        canvas[(top + r) * width + left + c] += gain;
    }
}
