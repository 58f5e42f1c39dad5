//! Synthetic multimodal worlds with exact oracles, serialized into unified
//! token sequences through fixed prompt templates.
//!
//! Scenes place colored shapes on a coarse lattice whose coordinates sit on
//! location-bin centers, so box tokenization round-trips exactly and the
//! grounding oracle is perfect. Video scenes move those shapes with integer
//! lattice velocities; audio scenes are band-coded tone sequences decodable
//! by a threshold rule. Every sample records the world it came from and is
//! rendered on demand.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{AudioGrid, ImageGrid, VideoClip};
use crate::error::{Error, Result};
use crate::model::{EncoderInput, Modality, Segment};
use crate::rng::CounterRng;
use crate::vocab::{iou, BBox, Vocabulary, EOS, PAD, UNK};

/// Number of placement cells across the canvas; scene coordinates live on
/// the centers of every `bins / LATTICE`-th location bin.
pub const LATTICE: usize = 50;
/// Object side length range, in lattice cells.
pub const MIN_SIDE_CELLS: usize = 5;
pub const MAX_SIDE_CELLS: usize = 12;
/// Frames per video clip.
pub const VIDEO_FRAMES: usize = 4;
/// Audio rendering dimensions and the number of pitch bands.
pub const AUDIO_TIME_STEPS: usize = 32;
pub const AUDIO_FREQ_BINS: usize = 32;
pub const PITCH_CLASSES: usize = 8;
/// Patch edge for the toy visual codebook.
pub const T2I_PATCH: usize = 8;

pub const PROMPT_CAPTION: &str = "what does the image describe?";
pub const PROMPT_VGROUND: &str = "Which region does the <text>  describe?";
pub const PROMPT_GC: &str = "what does the region describe? region:";
pub const PROMPT_ITM: &str = "Does the image describe <text>?";
pub const PROMPT_VIDEO_CAPTION: &str = "what does the video describe?";
pub const PROMPT_VTM: &str = "Does the video describe <text>?";
pub const PROMPT_AUDIO_CAPTION: &str = "what does the audio describe?";
pub const PROMPT_T2I: &str = "what is the complete image? caption: <text>";

pub const PITCH_NAMES: [&str; PITCH_CLASSES] = [
    "low", "deep", "soft", "mid", "warm", "bright", "high", "sharp",
];

const STREAM_SCENE: u64 = 1;
const STREAM_VIDEO: u64 = 2;
const STREAM_AUDIO: u64 = 3;
const STREAM_QUESTION: u64 = 4;
const STREAM_NEGATIVE: u64 = 5;

const SHARD_MAGIC: &[u8; 4] = b"UVSH";
const SHARD_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Shape::Square => "squares",
            Shape::Circle => "circles",
            Shape::Triangle => "triangles",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub bbox: BBox,
}

impl SceneObject {
    /// "red square" — the referring phrase without an article.
    pub fn phrase(&self) -> String {
        format!("{} {}", self.color.word(), self.shape.word())
    }
}

/// A still world: 1-4 uniquely colored shapes with near-disjoint boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub canvas: usize,
    pub bins: usize,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl Scene {
    /// Geometry only: every box well-formed and inside the canvas. Video
    /// frames satisfy this even when moving objects pass each other.
    pub fn validate_bounds(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > 4 {
            return Err(Error::Validity(format!(
                "scene has {} objects, expected 1-4",
                self.objects.len()
            )));
        }
        for (i, a) in self.objects.iter().enumerate() {
            let b = &a.bbox;
            if !(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= self.canvas as f32 && b.y2 <= self.canvas as f32)
                || b.x1 >= b.x2
                || b.y1 >= b.y2
            {
                return Err(Error::Validity(format!("object {i} box out of canvas")));
            }
        }
        Ok(())
    }

    /// Full still-scene invariants: bounds, near-disjoint boxes, and unique
    /// (shape, color) pairs so referring phrases are unambiguous.
    pub fn validate(&self) -> Result<()> {
        self.validate_bounds()?;
        for (i, a) in self.objects.iter().enumerate() {
            for (j, other) in self.objects.iter().enumerate().skip(i + 1) {
                if iou(&a.bbox, &other.bbox) >= 0.1 {
                    return Err(Error::Validity(format!("objects {i},{j} overlap too much")));
                }
                if (a.shape, a.color) == (other.shape, other.color) {
                    return Err(Error::Validity(format!(
                        "objects {i},{j} repeat the pair ({}, {})",
                        a.color.word(),
                        a.shape.word()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A scene whose objects drift with integer lattice-cell velocities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScene {
    pub scene: Scene,
    /// Per-object (dx, dy) in lattice cells per frame; always axis-aligned.
    pub velocities: Vec<(i32, i32)>,
    pub frame_count: usize,
}

/// An ordered tone sequence; rendering packs events back to back, so
/// consecutive events always differ in pitch to stay threshold-decodable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioEvent {
    pub pitch: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioScene {
    pub events: Vec<AudioEvent>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Caption,
    Vqa,
    VisualGrounding,
    GroundedCaption,
    Itm,
    VideoCaption,
    VideoQa,
    Vtm,
    AudioCaption,
    TextToImage,
}

impl TaskKind {
    pub const ALL: [TaskKind; 10] = [
        TaskKind::Caption,
        TaskKind::Vqa,
        TaskKind::VisualGrounding,
        TaskKind::GroundedCaption,
        TaskKind::Itm,
        TaskKind::VideoCaption,
        TaskKind::VideoQa,
        TaskKind::Vtm,
        TaskKind::AudioCaption,
        TaskKind::TextToImage,
    ];

    pub fn id(self) -> &'static str {
        match self {
            TaskKind::Caption => "caption",
            TaskKind::Vqa => "vqa",
            TaskKind::VisualGrounding => "vground",
            TaskKind::GroundedCaption => "gc",
            TaskKind::Itm => "itm",
            TaskKind::VideoCaption => "video_caption",
            TaskKind::VideoQa => "video_qa",
            TaskKind::Vtm => "vtm",
            TaskKind::AudioCaption => "audio_caption",
            TaskKind::TextToImage => "t2i",
        }
    }

    /// The non-text modality this task feeds to the encoder, if any.
    pub fn payload_modality(self) -> Option<Modality> {
        match self {
            TaskKind::Caption
            | TaskKind::Vqa
            | TaskKind::VisualGrounding
            | TaskKind::GroundedCaption
            | TaskKind::Itm => Some(Modality::Image),
            TaskKind::VideoCaption | TaskKind::VideoQa | TaskKind::Vtm => Some(Modality::Video),
            TaskKind::AudioCaption => Some(Modality::Audio),
            TaskKind::TextToImage => None,
        }
    }

    /// The closed answer set for trie-constrained decoding, if the task has one.
    pub fn answer_set(self) -> Option<Vec<String>> {
        match self {
            TaskKind::Vqa => {
                let mut out: Vec<String> = (0..=4).map(|n| n.to_string()).collect();
                out.extend(Color::ALL.iter().map(|c| c.word().to_string()));
                out.push("yes".into());
                out.push("no".into());
                Some(out)
            }
            TaskKind::VideoQa => Some(
                ["left", "right", "up", "down"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            ),
            TaskKind::Itm | TaskKind::Vtm => Some(vec!["yes".into(), "no".into()]),
            _ => None,
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.id() == s)
            .ok_or_else(|| Error::Parse(format!("unknown task id {s:?}")))
    }
}

/// The world a sample was built from; payloads are re-rendered on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SceneSpec {
    Image(Scene),
    Video(VideoScene),
    Audio(AudioScene),
}

/// One serialized training/evaluation example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub task: TaskKind,
    /// Normalized prompt text (tokenizer round-trip of the template).
    pub prompt: String,
    /// Encoder token ids: the prompt words plus any appended location tokens.
    pub prompt_ids: Vec<u32>,
    /// Tokens fed to the decoder ahead of the target; excluded from the loss.
    pub decoder_prompt: Vec<u32>,
    /// Target ids, EOS-terminated.
    pub target: Vec<u32>,
    pub scene: SceneSpec,
    pub seed: u64,
}

impl Sample {
    /// Prompt text plus the rendered payload, ready for the encoder.
    pub fn encoder_input(&self) -> Result<EncoderInput> {
        let mut input = EncoderInput::text(self.prompt_ids.clone());
        match self.task.payload_modality() {
            None => {}
            Some(Modality::Image) => {
                let SceneSpec::Image(scene) = &self.scene else {
                    return Err(Error::Validity("sample scene is not an image".into()));
                };
                input = input.push(Segment::Image(render_scene(scene)?));
            }
            Some(Modality::Video) => {
                let SceneSpec::Video(vs) = &self.scene else {
                    return Err(Error::Validity("sample scene is not a video".into()));
                };
                input = input.push(Segment::Video(render_video(vs)?));
            }
            Some(Modality::Audio) => {
                let SceneSpec::Audio(asc) = &self.scene else {
                    return Err(Error::Validity("sample scene is not audio".into()));
                };
                input = input.push(Segment::Audio(render_audio(asc)?));
            }
            Some(Modality::Text) => unreachable!("text is never a payload"),
        }
        Ok(input)
    }

    /// Teacher-forcing pair: decoder input ids and per-position labels, with
    /// prompt positions masked to PAD so they never contribute to the loss.
    pub fn teacher_forcing(&self) -> (Vec<u32>, Vec<u32>) {
        let mut full = vec![crate::vocab::BOS];
        full.extend_from_slice(&self.decoder_prompt);
        full.extend_from_slice(&self.target);
        let input = full[..full.len() - 1].to_vec();
        let mut labels = full[1..].to_vec();
        for l in labels.iter_mut().take(self.decoder_prompt.len()) {
            *l = PAD;
        }
        (input, labels)
    }
}

/// Task, seed range and world geometry: everything that determines a shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub task: TaskKind,
    pub seed_start: u64,
    pub count: usize,
    pub canvas: usize,
    pub bins: usize,
}

impl DataManifest {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("manifest count must be positive".into()));
        }
        lattice_step(self.canvas, self.bins)?;
        if matches!(self.task, TaskKind::Itm | TaskKind::Vtm) && self.count < 2 {
            return Err(Error::Config(
                "matching tasks need at least 2 samples to draw negatives".into(),
            ));
        }
        if self.task == TaskKind::TextToImage && self.canvas % T2I_PATCH != 0 {
            return Err(Error::Config(format!(
                "canvas {} not divisible by patch {}",
                self.canvas, T2I_PATCH
            )));
        }
        Ok(())
    }

    /// Seed of the i-th sample; ranges of different manifests must not overlap
    /// when their samples should be independent.
    pub fn sample_seed(&self, index: usize) -> u64 {
        self.seed_start + index as u64
    }

    pub fn seed_range(&self) -> (u64, u64) {
        (self.seed_start, self.seed_start + self.count as u64)
    }
}

fn lattice_step(canvas: usize, bins: usize) -> Result<usize> {
    if canvas == 0 || bins == 0 || bins % LATTICE != 0 {
        return Err(Error::Config(format!(
            "canvas {canvas} / bins {bins}: bins must be a positive multiple of {LATTICE}"
        )));
    }
    Ok(bins / LATTICE)
}

/// Canvas coordinate of a lattice cell: the center of location bin
/// `cell * bins / LATTICE`, so quantization round-trips exactly.
pub fn coordinate(cell: usize, canvas: usize, bins: usize) -> f32 {
    let step = bins / LATTICE;
    (((cell * step) as f64 + 0.5) * canvas as f64 / bins as f64) as f32
}

/// Deterministic scene generation; also returns lattice placements.
fn generate_scene_cells(
    seed: u64,
    canvas: usize,
    bins: usize,
) -> Result<(Scene, Vec<(usize, usize, usize)>)> {
    lattice_step(canvas, bins)?;
    let mut rng = CounterRng::new(seed, STREAM_SCENE);
    let want = 1 + rng.gen_range(4);
    let mut combos: Vec<(Shape, Color)> = Shape::ALL
        .iter()
        .flat_map(|&s| Color::ALL.iter().map(move |&c| (s, c)))
        .collect();
    rng.shuffle(&mut combos);

    let mut objects = Vec::new();
    let mut cells = Vec::new();
    for &(shape, color) in combos.iter().take(want) {
        for _attempt in 0..64 {
            let side =
                MIN_SIDE_CELLS + rng.gen_range(MAX_SIDE_CELLS - MIN_SIDE_CELLS + 1);
            let jx = rng.gen_range(LATTICE - side);
            let jy = rng.gen_range(LATTICE - side);
            let bbox = BBox::new(
                coordinate(jx, canvas, bins),
                coordinate(jy, canvas, bins),
                coordinate(jx + side, canvas, bins),
                coordinate(jy + side, canvas, bins),
            );
            if objects
                .iter()
                .all(|o: &SceneObject| iou(&o.bbox, &bbox) < 0.1)
            {
                objects.push(SceneObject { shape, color, bbox });
                cells.push((jx, jy, side));
                break;
            }
        }
    }
    let scene = Scene {
        canvas,
        bins,
        objects,
        seed,
    };
    scene.validate()?;
    Ok((scene, cells))
}

pub fn generate_scene(seed: u64, canvas: usize, bins: usize) -> Result<Scene> {
    Ok(generate_scene_cells(seed, canvas, bins)?.0)
}

/// Scene plus axis-aligned integer velocities that keep every object
/// in-canvas across all frames.
pub fn generate_video_scene(seed: u64, canvas: usize, bins: usize) -> Result<VideoScene> {
    let (scene, cells) = generate_scene_cells(seed, canvas, bins)?;
    let mut rng = CounterRng::new(seed, STREAM_VIDEO);
    let mut velocities = Vec::with_capacity(scene.objects.len());
    for &(jx, jy, side) in &cells {
        let mut options: Vec<(i32, i32)> = vec![
            (1, 0),
            (2, 0),
            (-1, 0),
            (-2, 0),
            (0, 1),
            (0, 2),
            (0, -1),
            (0, -2),
        ];
        rng.shuffle(&mut options);
        let valid = options.into_iter().find(|&(dx, dy)| {
            (0..VIDEO_FRAMES as i64).all(|t| {
                let x = jx as i64 + dx as i64 * t;
                let y = jy as i64 + dy as i64 * t;
                x >= 0 && y >= 0 && x + side as i64 <= (LATTICE - 1) as i64
                    && y + side as i64 <= (LATTICE - 1) as i64
            })
        });
        match valid {
            Some(v) => velocities.push(v),
            None => {
                return Err(Error::Validity(format!(
                    "no in-canvas velocity for object at ({jx}, {jy}) side {side}"
                )))
            }
        }
    }
    Ok(VideoScene {
        scene,
        velocities,
        frame_count: VIDEO_FRAMES,
    })
}

/// Tone sequence: 1-3 events, 4-10 steps each, consecutive pitches distinct.
pub fn generate_audio_scene(seed: u64) -> AudioScene {
    let mut rng = CounterRng::new(seed, STREAM_AUDIO);
    let want = 1 + rng.gen_range(3);
    let mut events: Vec<AudioEvent> = Vec::new();
    let mut used = 0usize;
    for _ in 0..want {
        let steps = 4 + rng.gen_range(7);
        if used + steps > AUDIO_TIME_STEPS {
            break;
        }
        let pitch = match events.last() {
            None => rng.gen_range(PITCH_CLASSES),
            Some(prev) => {
                let p = rng.gen_range(PITCH_CLASSES - 1);
                if p >= prev.pitch {
                    p + 1
                } else {
                    p
                }
            }
        };
        events.push(AudioEvent { pitch, steps });
        used += steps;
    }
    AudioScene { events, seed }
}

fn point_in_shape(shape: Shape, b: &BBox, cx: f32, cy: f32) -> bool {
    if cx < b.x1 || cx > b.x2 || cy < b.y1 || cy > b.y2 {
        return false;
    }
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let rx = (b.x2 - b.x1) / 2.0;
            let ry = (b.y2 - b.y1) / 2.0;
            let dx = (cx - (b.x1 + rx)) / rx;
            let dy = (cy - (b.y1 + ry)) / ry;
            dx * dx + dy * dy <= 1.0
        }
        Shape::Triangle => {
            // Apex at the top center, base along the bottom edge.
            let ax = (b.x1 + b.x2) / 2.0;
            let sign = |px: f32, py: f32, qx: f32, qy: f32| {
                (cx - qx) * (py - qy) - (px - qx) * (cy - qy)
            };
            let d1 = sign(ax, b.y1, b.x1, b.y2);
            let d2 = sign(b.x1, b.y2, b.x2, b.y2);
            let d3 = sign(b.x2, b.y2, ax, b.y1);
            let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            !(has_neg && has_pos)
        }
    }
}

/// Draws filled shapes at their boxes over a black background, by pixel
/// center coverage; later objects paint over earlier ones.
pub fn render_scene(scene: &Scene) -> Result<ImageGrid> {
    scene.validate_bounds()?;
    let mut img = ImageGrid::zeros(scene.canvas, scene.canvas);
    for obj in &scene.objects {
        let rgb = obj.color.rgb();
        let x_lo = obj.bbox.x1.floor().max(0.0) as usize;
        let x_hi = (obj.bbox.x2.ceil() as usize).min(scene.canvas);
        let y_lo = obj.bbox.y1.floor().max(0.0) as usize;
        let y_hi = (obj.bbox.y2.ceil() as usize).min(scene.canvas);
        for py in y_lo..y_hi {
            for px in x_lo..x_hi {
                if point_in_shape(obj.shape, &obj.bbox, px as f32 + 0.5, py as f32 + 0.5) {
                    img.set_pixel(px, py, rgb);
                }
            }
        }
    }
    Ok(img)
}

/// Renders every frame by shifting boxes with the per-object velocity.
pub fn render_video(vs: &VideoScene) -> Result<VideoClip> {
    if vs.velocities.len() != vs.scene.objects.len() {
        return Err(Error::Validity(
            "velocity count does not match object count".into(),
        ));
    }
    let step = lattice_step(vs.scene.canvas, vs.scene.bins)? as f64;
    let cell = step * vs.scene.canvas as f64 / vs.scene.bins as f64;
    let mut frames = Vec::with_capacity(vs.frame_count);
    for t in 0..vs.frame_count {
        let mut frame_scene = vs.scene.clone();
        for (obj, &(dx, dy)) in frame_scene.objects.iter_mut().zip(&vs.velocities) {
            let sx = (dx as f64 * t as f64 * cell) as f32;
            let sy = (dy as f64 * t as f64 * cell) as f32;
            obj.bbox = BBox::new(
                obj.bbox.x1 + sx,
                obj.bbox.y1 + sy,
                obj.bbox.x2 + sx,
                obj.bbox.y2 + sy,
            );
        }
        frames.push(render_scene(&frame_scene)?);
    }
    VideoClip::new(frames)
}

/// One band per pitch class, energized during its event's steps.
pub fn render_audio(asc: &AudioScene) -> Result<AudioGrid> {
    let band = AUDIO_FREQ_BINS / PITCH_CLASSES;
    let mut grid = AudioGrid::zeros(AUDIO_TIME_STEPS, AUDIO_FREQ_BINS);
    let mut t = 0usize;
    for event in &asc.events {
        if event.pitch >= PITCH_CLASSES {
            return Err(Error::Validity(format!(
                "pitch {} out of range",
                event.pitch
            )));
        }
        if t + event.steps > AUDIO_TIME_STEPS {
            return Err(Error::Validity("audio events overflow the grid".into()));
        }
        for dt in 0..event.steps {
            for f in event.pitch * band..(event.pitch + 1) * band {
                grid.set(t + dt, f, 1.0);
            }
        }
        t += event.steps;
    }
    Ok(grid)
}

/// Threshold decoder: the inverse of [`render_audio`] for valid grids.
pub fn decode_audio(grid: &AudioGrid) -> Result<Vec<AudioEvent>> {
    let band = grid.freq_bins / PITCH_CLASSES;
    if band == 0 || grid.freq_bins % PITCH_CLASSES != 0 {
        return Err(Error::Decode(format!(
            "freq bins {} not divisible into {} bands",
            grid.freq_bins, PITCH_CLASSES
        )));
    }
    let mut events: Vec<AudioEvent> = Vec::new();
    let mut silent = false;
    for t in 0..grid.time_steps {
        let mut active = None;
        for p in 0..PITCH_CLASSES {
            let mean: f32 = (p * band..(p + 1) * band)
                .map(|f| grid.at(t, f))
                .sum::<f32>()
                / band as f32;
            if mean > 0.5 {
                if active.is_some() {
                    return Err(Error::Decode(format!("two bands active at step {t}")));
                }
                active = Some(p);
            }
        }
        match active {
            None => silent = true,
            Some(p) => {
                if silent {
                    return Err(Error::Decode(format!("sound resumes after silence at {t}")));
                }
                match events.last_mut() {
                    Some(last) if last.pitch == p => last.steps += 1,
                    _ => events.push(AudioEvent { pitch: p, steps: 1 }),
                }
            }
        }
    }
    Ok(events)
}

/// Object indices in deterministic caption order: by x1, then y1.
fn caption_order(scene: &Scene) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scene.objects.len()).collect();
    order.sort_by(|&a, &b| {
        let (oa, ob) = (&scene.objects[a].bbox, &scene.objects[b].bbox);
        oa.x1
            .partial_cmp(&ob.x1)
            .unwrap()
            .then(oa.y1.partial_cmp(&ob.y1).unwrap())
    });
    order
}

/// "a red square and a blue circle"
pub fn caption_of(scene: &Scene) -> String {
    caption_order(scene)
        .into_iter()
        .map(|i| format!("a {}", scene.objects[i].phrase()))
        .collect::<Vec<_>>()
        .join(" and ")
}

fn direction_word(v: (i32, i32)) -> &'static str {
    match v {
        (dx, 0) if dx > 0 => "right",
        (dx, 0) if dx < 0 => "left",
        (0, dy) if dy > 0 => "down",
        _ => "up",
    }
}

/// "a red square moving right and a blue circle moving up"
pub fn video_caption_of(vs: &VideoScene) -> String {
    caption_order(&vs.scene)
        .into_iter()
        .map(|i| {
            format!(
                "a {} moving {}",
                vs.scene.objects[i].phrase(),
                direction_word(vs.velocities[i])
            )
        })
        .collect::<Vec<_>>()
        .join(" and ")
}

/// "a low tone then a high tone"
pub fn audio_caption_of(asc: &AudioScene) -> String {
    asc.events
        .iter()
        .map(|e| format!("a {} tone", PITCH_NAMES[e.pitch]))
        .collect::<Vec<_>>()
        .join(" then ")
}

/// Every word surface the task grammars can emit, sorted and unique.
pub fn lexicon() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let mut add = |w: &str| words.push(w.to_string());
    for w in [
        "a", "and", "audio", "caption:", "color", "complete", "describe", "describe?",
        "direction", "does", "how", "image", "image?", "is", "many", "moving", "moving?", "no",
        "region", "region:", "the", "then", "there", "tone", "video", "what", "which", "yes",
    ] {
        add(w);
    }
    for n in 0..=4 {
        add(&n.to_string());
    }
    for c in Color::ALL {
        add(c.word());
    }
    for s in Shape::ALL {
        add(s.word());
        add(&format!("{}?", s.word()));
        add(s.plural());
        add(&format!("{}?", s.plural()));
    }
    for d in ["left", "right", "up", "down"] {
        add(d);
        add(&format!("{d}?"));
    }
    for p in PITCH_NAMES {
        add(p);
    }
    words.sort();
    words.dedup();
    words
}

/// Encodes text that must be fully in-vocabulary.
fn encode_checked(vocab: &Vocabulary, text: &str) -> Result<Vec<u32>> {
    let ids = vocab.encode_text(text);
    if ids.contains(&UNK) {
        return Err(Error::Validity(format!(
            "text {text:?} does not tokenize without UNK"
        )));
    }
    Ok(ids)
}

/// Tokenizer round-trip: lowercased, single-spaced serialization of `text`.
fn normalize_prompt(vocab: &Vocabulary, text: &str) -> Result<String> {
    let ids = encode_checked(vocab, text)?;
    vocab.decode_text(&ids)
}

fn target_ids(vocab: &Vocabulary, text: &str) -> Result<Vec<u32>> {
    let mut ids = encode_checked(vocab, text)?;
    ids.push(EOS);
    Ok(ids)
}

fn text_sample(
    task: TaskKind,
    vocab: &Vocabulary,
    prompt_template: &str,
    target_text: &str,
    decoder_prompt: Vec<u32>,
    scene: SceneSpec,
    seed: u64,
) -> Result<Sample> {
    let prompt = normalize_prompt(vocab, prompt_template)?;
    let prompt_ids = encode_checked(vocab, &prompt)?;
    Ok(Sample {
        task,
        prompt,
        prompt_ids,
        decoder_prompt,
        target: target_ids(vocab, target_text)?,
        scene,
        seed,
    })
}

pub fn caption_sample(scene: &Scene, vocab: &Vocabulary, seed: u64) -> Result<Sample> {
    text_sample(
        TaskKind::Caption,
        vocab,
        PROMPT_CAPTION,
        &caption_of(scene),
        Vec::new(),
        SceneSpec::Image(scene.clone()),
        seed,
    )
}

/// Closed question grammar answered exactly from scene state.
pub fn vqa_oracle(scene: &Scene, question: &str) -> Result<String> {
    let words: Vec<String> = question
        .split_whitespace()
        .map(|w| w.to_lowercase())
        .collect();
    let strip = |w: &str| w.strip_suffix('?').map(|s| s.to_string());
    let parse_shape = |w: &str| Shape::ALL.iter().copied().find(|s| s.word() == w);
    let parse_color = |w: &str| Color::ALL.iter().copied().find(|c| c.word() == w);

    match words.as_slice() {
        [how, many, last] if how == "how" && many == "many" => {
            let plural = strip(last).ok_or_else(|| grammar_err(question))?;
            let shape = Shape::ALL
                .iter()
                .copied()
                .find(|s| s.plural() == plural)
                .ok_or_else(|| grammar_err(question))?;
            let n = scene.objects.iter().filter(|o| o.shape == shape).count();
            Ok(n.to_string())
        }
        [what, color, is, the, last]
            if what == "what" && color == "color" && is == "is" && the == "the" =>
        {
            let word = strip(last).ok_or_else(|| grammar_err(question))?;
            let shape = parse_shape(&word).ok_or_else(|| grammar_err(question))?;
            let matches: Vec<&SceneObject> =
                scene.objects.iter().filter(|o| o.shape == shape).collect();
            match matches.as_slice() {
                [only] => Ok(only.color.word().to_string()),
                [] => Err(Error::Oracle(format!(
                    "no {} in the scene",
                    shape.word()
                ))),
                _ => Err(Error::Oracle(format!(
                    "multiple {} make the color ambiguous",
                    shape.plural()
                ))),
            }
        }
        [is, there, a, color, last] if is == "is" && there == "there" && a == "a" => {
            let color = parse_color(color).ok_or_else(|| grammar_err(question))?;
            let word = strip(last).ok_or_else(|| grammar_err(question))?;
            let shape = parse_shape(&word).ok_or_else(|| grammar_err(question))?;
            let found = scene
                .objects
                .iter()
                .any(|o| o.shape == shape && o.color == color);
            Ok(if found { "yes" } else { "no" }.to_string())
        }
        _ => Err(grammar_err(question)),
    }
}

fn grammar_err(question: &str) -> Error {
    Error::Grammar(format!("question {question:?} not in the closed grammar"))
}

pub fn vqa_sample(scene: &Scene, vocab: &Vocabulary, seed: u64) -> Result<Sample> {
    let mut rng = CounterRng::new(seed, STREAM_QUESTION);
    let unambiguous: Vec<Shape> = Shape::ALL
        .iter()
        .copied()
        .filter(|&s| scene.objects.iter().filter(|o| o.shape == s).count() == 1)
        .collect();
    let kinds = if unambiguous.is_empty() { 2 } else { 3 };
    let question = match rng.gen_range(kinds) {
        0 => {
            let shape = *rng.choose(&Shape::ALL);
            format!("how many {}?", shape.plural())
        }
        1 => {
            let (color, shape) = if rng.gen_range(2) == 0 {
                let obj = rng.choose(&scene.objects);
                (obj.color, obj.shape)
            } else {
                (*rng.choose(&Color::ALL), *rng.choose(&Shape::ALL))
            };
            format!("is there a {} {}?", color.word(), shape.word())
        }
        _ => {
            let shape = *rng.choose(&unambiguous);
            format!("what color is the {}?", shape.word())
        }
    };
    let answer = vqa_oracle(scene, &question)?;
    let prompt_ids = encode_checked(vocab, &question)?;
    text_sample(
        TaskKind::Vqa,
        vocab,
        &question,
        &answer,
        prompt_ids,
        SceneSpec::Image(scene.clone()),
        seed,
    )
}

/// The unique object matching "color shape", or an oracle error.
pub fn vground_oracle<'s>(scene: &'s Scene, phrase: &str) -> Result<&'s SceneObject> {
    let mut parts = phrase.split_whitespace();
    let (Some(cw), Some(sw), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(Error::Grammar(format!(
            "phrase {phrase:?} is not \"<color> <shape>\""
        )));
    };
    let color = Color::ALL
        .iter()
        .copied()
        .find(|c| c.word() == cw)
        .ok_or_else(|| Error::Grammar(format!("unknown color {cw:?}")))?;
    let shape = Shape::ALL
        .iter()
        .copied()
        .find(|s| s.word() == sw)
        .ok_or_else(|| Error::Grammar(format!("unknown shape {sw:?}")))?;
    scene
        .objects
        .iter()
        .find(|o| o.color == color && o.shape == shape)
        .ok_or_else(|| Error::Oracle(format!("no {phrase} in the scene")))
}

pub fn vground_sample(scene: &Scene, vocab: &Vocabulary, seed: u64) -> Result<Sample> {
    let mut rng = CounterRng::new(seed, STREAM_QUESTION);
    let obj = rng.choose(&scene.objects).clone();
    let prompt_text = PROMPT_VGROUND.replace("<text>", &obj.phrase());
    let prompt = normalize_prompt(vocab, &prompt_text)?;
    let prompt_ids = encode_checked(vocab, &prompt)?;
    let extent = scene.canvas as f64;
    let tokens = vocab.box_to_tokens(&obj.bbox, extent, extent)?;
    let mut target = tokens.to_vec();
    target.push(EOS);
    Ok(Sample {
        task: TaskKind::VisualGrounding,
        prompt,
        prompt_ids,
        decoder_prompt: Vec::new(),
        target,
        scene: SceneSpec::Image(scene.clone()),
        seed,
    })
}

pub fn gc_sample(scene: &Scene, vocab: &Vocabulary, seed: u64) -> Result<Sample> {
    let mut rng = CounterRng::new(seed, STREAM_QUESTION);
    let obj = rng.choose(&scene.objects).clone();
    let prompt = normalize_prompt(vocab, PROMPT_GC)?;
    let mut prompt_ids = encode_checked(vocab, &prompt)?;
    let extent = scene.canvas as f64;
    prompt_ids.extend(vocab.box_to_tokens(&obj.bbox, extent, extent)?);
    Ok(Sample {
        task: TaskKind::GroundedCaption,
        prompt,
        prompt_ids,
        decoder_prompt: Vec::new(),
        target: target_ids(vocab, &format!("a {}", obj.phrase()))?,
        scene: SceneSpec::Image(scene.clone()),
        seed,
    })
}

/// `negative`: a caption from some other scene, used for the "no" branch.
pub fn itm_sample(
    scene: &Scene,
    negative: Option<&str>,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Sample> {
    let mut rng = CounterRng::new(seed, STREAM_QUESTION);
    let own = caption_of(scene);
    let (text, answer) = match negative {
        Some(neg) if rng.gen_range(2) == 1 => (neg.to_string(), "no"),
        _ => (own, "yes"),
    };
    text_sample(
        TaskKind::Itm,
        vocab,
        &PROMPT_ITM.replace("<text>", &text),
        answer,
        Vec::new(),
        SceneSpec::Image(scene.clone()),
        seed,
    )
}

pub fn video_caption_sample(vs: &VideoScene, vocab: &Vocabulary, seed: u64) -> Result<Sample> {
    text_sample(
        TaskKind::VideoCaption,
        vocab,
        PROMPT_VIDEO_CAPTION,
        &video_caption_of(vs),
        Vec::new(),
        SceneSpec::Video(vs.clone()),
        seed,
    )
}

pub fn video_qa_sample(vs: &VideoScene, vocab: &Vocabulary, seed: u64) -> Result<Sample> {
    let mut rng = CounterRng::new(seed, STREAM_QUESTION);
    let idx = rng.gen_range(vs.scene.objects.len());
    let obj = &vs.scene.objects[idx];
    let question = format!("which direction is the {} moving?", obj.phrase());
    let answer = direction_word(vs.velocities[idx]);
    let prompt_ids = encode_checked(vocab, &question)?;
    text_sample(
        TaskKind::VideoQa,
        vocab,
        &question,
        answer,
        prompt_ids,
        SceneSpec::Video(vs.clone()),
        seed,
    )
}

pub fn vtm_sample(
    vs: &VideoScene,
    negative: Option<&str>,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Sample> {
    let mut rng = CounterRng::new(seed, STREAM_QUESTION);
    let own = video_caption_of(vs);
    let (text, answer) = match negative {
        Some(neg) if rng.gen_range(2) == 1 => (neg.to_string(), "no"),
        _ => (own, "yes"),
    };
    text_sample(
        TaskKind::Vtm,
        vocab,
        &PROMPT_VTM.replace("<text>", &text),
        answer,
        Vec::new(),
        SceneSpec::Video(vs.clone()),
        seed,
    )
}

pub fn audio_caption_sample(asc: &AudioScene, vocab: &Vocabulary, seed: u64) -> Result<Sample> {
    text_sample(
        TaskKind::AudioCaption,
        vocab,
        PROMPT_AUDIO_CAPTION,
        &audio_caption_of(asc),
        Vec::new(),
        SceneSpec::Audio(asc.clone()),
        seed,
    )
}

pub fn t2i_sample(scene: &Scene, vocab: &Vocabulary, seed: u64) -> Result<Sample> {
    let img = render_scene(scene)?;
    let codes = image_to_codes(&img, T2I_PATCH, vocab.visual_codes())?;
    let prompt_text = PROMPT_T2I.replace("<text>", &caption_of(scene));
    let prompt = normalize_prompt(vocab, &prompt_text)?;
    let prompt_ids = encode_checked(vocab, &prompt)?;
    let mut target = Vec::with_capacity(codes.len() + 1);
    for code in codes {
        target.push(vocab.visual_token(code)?);
    }
    target.push(EOS);
    Ok(Sample {
        task: TaskKind::TextToImage,
        prompt,
        prompt_ids,
        decoder_prompt: Vec::new(),
        target,
        scene: SceneSpec::Image(scene.clone()),
        seed,
    })
}

/// Builds the sample at `index`; fully determined by the manifest.
pub fn build_indexed_sample(
    manifest: &DataManifest,
    index: usize,
    vocab: &Vocabulary,
) -> Result<Sample> {
    manifest.validate()?;
    if index >= manifest.count {
        return Err(Error::Index(format!(
            "sample index {index} outside manifest count {}",
            manifest.count
        )));
    }
    let seed = manifest.sample_seed(index);
    let (canvas, bins) = (manifest.canvas, manifest.bins);
    match manifest.task {
        TaskKind::Caption => caption_sample(&generate_scene(seed, canvas, bins)?, vocab, seed),
        TaskKind::Vqa => vqa_sample(&generate_scene(seed, canvas, bins)?, vocab, seed),
        TaskKind::VisualGrounding => {
            vground_sample(&generate_scene(seed, canvas, bins)?, vocab, seed)
        }
        TaskKind::GroundedCaption => gc_sample(&generate_scene(seed, canvas, bins)?, vocab, seed),
        TaskKind::Itm => {
            let scene = generate_scene(seed, canvas, bins)?;
            let negative = draw_negative(manifest, index, &caption_of(&scene), |s| {
                Ok(caption_of(&generate_scene(s, canvas, bins)?))
            })?;
            itm_sample(&scene, negative.as_deref(), vocab, seed)
        }
        TaskKind::VideoCaption => {
            video_caption_sample(&generate_video_scene(seed, canvas, bins)?, vocab, seed)
        }
        TaskKind::VideoQa => {
            video_qa_sample(&generate_video_scene(seed, canvas, bins)?, vocab, seed)
        }
        TaskKind::Vtm => {
            let vs = generate_video_scene(seed, canvas, bins)?;
            let negative = draw_negative(manifest, index, &video_caption_of(&vs), |s| {
                Ok(video_caption_of(&generate_video_scene(s, canvas, bins)?))
            })?;
            vtm_sample(&vs, negative.as_deref(), vocab, seed)
        }
        TaskKind::AudioCaption => audio_caption_sample(&generate_audio_scene(seed), vocab, seed),
        TaskKind::TextToImage => t2i_sample(&generate_scene(seed, canvas, bins)?, vocab, seed),
    }
}

/// A caption from another sample in the shard that differs from `own`;
/// `None` when every attempt collides.
fn draw_negative(
    manifest: &DataManifest,
    index: usize,
    own: &str,
    caption_at: impl Fn(u64) -> Result<String>,
) -> Result<Option<String>> {
    let mut rng = CounterRng::new(manifest.sample_seed(index), STREAM_NEGATIVE);
    for _ in 0..16 {
        let other = (index + 1 + rng.gen_range(manifest.count - 1)) % manifest.count;
        let caption = caption_at(manifest.sample_seed(other))?;
        if caption != own {
            return Ok(Some(caption));
        }
    }
    Ok(None)
}

pub fn build_dataset(manifest: &DataManifest, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    manifest.validate()?;
    (0..manifest.count)
        .map(|i| build_indexed_sample(manifest, i, vocab))
        .collect()
}

fn code_levels(codes: usize) -> Result<usize> {
    let levels = (codes as f64).cbrt().round() as usize;
    if levels == 0 || levels * levels * levels != codes {
        return Err(Error::Config(format!(
            "visual code count {codes} is not a cube"
        )));
    }
    Ok(levels)
}

/// RGB prototype of a visual code on the `levels`-per-channel lattice.
pub fn code_prototype(code: usize, codes: usize) -> Result<[f32; 3]> {
    let levels = code_levels(codes)?;
    if code >= codes {
        return Err(Error::Index(format!("code {code} exceeds {codes}")));
    }
    let chan = |idx: usize| (idx as f32 + 0.5) / levels as f32;
    Ok([
        chan(code / (levels * levels)),
        chan((code / levels) % levels),
        chan(code % levels),
    ])
}

/// Nearest-prototype code (L2 on mean patch color) for every patch, row-major.
pub fn image_to_codes(img: &ImageGrid, patch: usize, codes: usize) -> Result<Vec<usize>> {
    if patch == 0 || img.height % patch != 0 || img.width % patch != 0 {
        return Err(Error::Shape(format!(
            "image {}x{} not divisible into {patch}x{patch} patches",
            img.height, img.width
        )));
    }
    code_levels(codes)?;
    let mut out = Vec::with_capacity((img.height / patch) * (img.width / patch));
    for py in (0..img.height).step_by(patch) {
        for px in (0..img.width).step_by(patch) {
            let mut mean = [0.0f64; 3];
            for y in py..py + patch {
                for x in px..px + patch {
                    let rgb = img.pixel(x, y);
                    for c in 0..3 {
                        mean[c] += rgb[c] as f64;
                    }
                }
            }
            let n = (patch * patch) as f64;
            let mean = [mean[0] / n, mean[1] / n, mean[2] / n];
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for code in 0..codes {
                let p = code_prototype(code, codes)?;
                let d: f64 = (0..3)
                    .map(|c| (mean[c] - p[c] as f64).powi(2))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = code;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Paints each patch with its prototype color.
pub fn codes_to_image(
    codes_seq: &[usize],
    patch: usize,
    codes: usize,
    height: usize,
    width: usize,
) -> Result<ImageGrid> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Shape(format!(
            "target {height}x{width} not divisible into {patch}x{patch} patches"
        )));
    }
    let (rows, cols) = (height / patch, width / patch);
    if codes_seq.len() != rows * cols {
        return Err(Error::Shape(format!(
            "{} codes cannot fill a {rows}x{cols} patch grid",
            codes_seq.len()
        )));
    }
    let mut img = ImageGrid::zeros(height, width);
    for (i, &code) in codes_seq.iter().enumerate() {
        let proto = code_prototype(code, codes)?;
        let (py, px) = (i / cols * patch, i % cols * patch);
        for y in py..py + patch {
            for x in px..px + patch {
                img.set_pixel(x, y, proto);
            }
        }
    }
    Ok(img)
}

/// Length-prefixed binary shard: magic, version, count, then one
/// size-prefixed serialized record per sample.
pub fn write_shard(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(SHARD_MAGIC)?;
    file.write_all(&SHARD_VERSION.to_le_bytes())?;
    file.write_all(&(samples.len() as u32).to_le_bytes())?;
    for sample in samples {
        let bytes = serde_json::to_vec(sample)
            .map_err(|e| Error::Parse(format!("sample serialization failed: {e}")))?;
        file.write_all(&(bytes.len() as u32).to_le_bytes())?;
        file.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_shard(path: &Path) -> Result<Vec<Sample>> {
    let mut file = std::fs::File::open(path)?;
    let mut head = [0u8; 12];
    file.read_exact(&mut head)?;
    if &head[..4] != SHARD_MAGIC {
        return Err(Error::Parse("not a shard file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != SHARD_VERSION {
        return Err(Error::Parse(format!("unsupported shard version {version}")));
    }
    let count = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let mut len = [0u8; 4];
        file.read_exact(&mut len)?;
        let mut bytes = vec![0u8; u32::from_le_bytes(len) as usize];
        file.read_exact(&mut bytes)?;
        let sample: Sample = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Parse(format!("record {i} failed to parse: {e}")))?;
        samples.push(sample);
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Parse(format!(
            "{} trailing bytes after the last record",
            rest.len()
        )));
    }
    Ok(samples)
}

/// The standard vocabulary for these tasks.
pub fn task_vocabulary(bins: usize, visual_codes: usize) -> Result<Vocabulary> {
    Vocabulary::new(&lexicon(), bins, visual_codes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::quantize_bin;
    use std::collections::BTreeMap;

    const CANVAS: usize = 32;
    const BINS: usize = 1000;

    fn vocab() -> Vocabulary {
        task_vocabulary(BINS, 64).unwrap()
    }

    fn solid_image(height: usize, width: usize, rgb: [f32; 3]) -> ImageGrid {
        let mut img = ImageGrid::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                img.set_pixel(x, y, rgb);
            }
        }
        img
    }

    fn hand_scene() -> Scene {
        Scene {
            canvas: 100,
            bins: 100,
            objects: vec![SceneObject {
                shape: Shape::Square,
                color: Color::Red,
                bbox: BBox::new(10.0, 20.0, 30.0, 40.0),
            }],
            seed: 0,
        }
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let a = generate_scene(7, CANVAS, BINS).unwrap();
        let b = generate_scene(7, CANVAS, BINS).unwrap();
        assert_eq!(a, b);
        let img_a = render_scene(&a).unwrap();
        let img_b = render_scene(&b).unwrap();
        assert_eq!(img_a.data(), img_b.data());
        let c = generate_scene(8, CANVAS, BINS).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn object_count_distribution_covers_one_to_four() {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for seed in 0..10_000u64 {
            let scene = generate_scene(seed, CANVAS, BINS).unwrap();
            *counts.entry(scene.objects.len()).or_insert(0) += 1;
        }
        for n in 1..=4usize {
            let freq = *counts.get(&n).unwrap_or(&0) as f64 / 10_000.0;
            assert!(freq > 0.1, "count {n} frequency {freq}");
        }
    }

    #[test]
    fn scene_invariants_hold_across_seeds() {
        for seed in 0..300u64 {
            generate_scene(seed, CANVAS, BINS).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn rendered_pixels_stay_inside_object_boxes() {
        for seed in [0u64, 3, 11, 42] {
            let scene = generate_scene(seed, CANVAS, BINS).unwrap();
            let img = render_scene(&scene).unwrap();
            for py in 0..CANVAS {
                for px in 0..CANVAS {
                    let rgb = img.pixel(px, py);
                    if rgb == [0.0, 0.0, 0.0] {
                        continue;
                    }
                    let (cx, cy) = (px as f32 + 0.5, py as f32 + 0.5);
                    let inside = scene.objects.iter().any(|o| {
                        cx >= o.bbox.x1 && cx <= o.bbox.x2 && cy >= o.bbox.y1 && cy <= o.bbox.y2
                    });
                    assert!(inside, "seed {seed} pixel ({px},{py})");
                }
            }
        }
    }

    #[test]
    fn scene_coordinates_sit_on_bin_centers() {
        for seed in 0..50u64 {
            let scene = generate_scene(seed, CANVAS, BINS).unwrap();
            let v = vocab();
            for obj in &scene.objects {
                let toks = v
                    .box_to_tokens(&obj.bbox, CANVAS as f64, CANVAS as f64)
                    .unwrap();
                let back = v.tokens_to_box(&toks, CANVAS as f64, CANVAS as f64).unwrap();
                assert_eq!(back, obj.bbox, "seed {seed}");
                assert!(iou(&obj.bbox, &back) > 1.0 - 1e-6, "seed {seed}");
            }
        }
    }

    #[test]
    fn hand_scene_caption_is_a_red_square() {
        assert_eq!(caption_of(&hand_scene()), "a red square");
        let sample = caption_sample(&hand_scene(), &vocab(), 0).unwrap();
        assert_eq!(sample.prompt, "what does the image describe?");
        let text = vocab()
            .decode_text(&sample.target[..sample.target.len() - 1])
            .unwrap();
        assert_eq!(text, "a red square");
        assert_eq!(*sample.target.last().unwrap(), EOS);
    }

    #[test]
    fn vground_hand_scene_hits_bins_10_20_30_40() {
        let v = task_vocabulary(100, 64).unwrap();
        let sample = vground_sample(&hand_scene(), &v, 0).unwrap();
        assert_eq!(sample.prompt, "which region does the red square describe?");
        let bins: Vec<usize> = sample.target[..4]
            .iter()
            .map(|&t| v.location_bin(t).unwrap())
            .collect();
        assert_eq!(bins, vec![10, 20, 30, 40]);
        assert_eq!(sample.target.len(), 5);
        assert_eq!(*sample.target.last().unwrap(), EOS);
    }

    #[test]
    fn prompt_templates_byte_match_after_tokenizer_roundtrip() {
        let v = vocab();
        let roundtrip = |text: &str| {
            let ids = v.encode_text(text);
            assert!(!ids.contains(&UNK), "{text:?}");
            v.decode_text(&ids).unwrap()
        };
        assert_eq!(roundtrip(PROMPT_CAPTION), PROMPT_CAPTION);
        assert_eq!(
            roundtrip(&PROMPT_VGROUND.replace("<text>", "red square")),
            "which region does the red square describe?"
        );
        assert_eq!(roundtrip(PROMPT_GC), PROMPT_GC);
        assert_eq!(
            roundtrip(&PROMPT_ITM.replace("<text>", "a blue circle")),
            "does the image describe a blue circle?"
        );
        assert_eq!(roundtrip(PROMPT_VIDEO_CAPTION), PROMPT_VIDEO_CAPTION);
    }

    #[test]
    fn vqa_oracle_matches_hand_answers() {
        let mut scene = hand_scene();
        scene.objects.push(SceneObject {
            shape: Shape::Circle,
            color: Color::Blue,
            bbox: BBox::new(60.0, 60.0, 80.0, 80.0),
        });
        scene.objects.push(SceneObject {
            shape: Shape::Circle,
            color: Color::Green,
            bbox: BBox::new(60.0, 10.0, 80.0, 30.0),
        });
        assert_eq!(vqa_oracle(&scene, "how many circles?").unwrap(), "2");
        assert_eq!(vqa_oracle(&scene, "how many triangles?").unwrap(), "0");
        assert_eq!(
            vqa_oracle(&scene, "what color is the square?").unwrap(),
            "red"
        );
        assert_eq!(
            vqa_oracle(&scene, "is there a yellow triangle?").unwrap(),
            "no"
        );
        assert_eq!(
            vqa_oracle(&scene, "is there a blue circle?").unwrap(),
            "yes"
        );
        assert!(matches!(
            vqa_oracle(&scene, "what color is the circle?"),
            Err(Error::Oracle(_))
        ));
        assert!(matches!(
            vqa_oracle(&scene, "why is the sky blue?"),
            Err(Error::Grammar(_))
        ));
    }

    #[test]
    fn itm_positive_uses_own_caption() {
        let v = vocab();
        let sample = itm_sample(&hand_scene(), None, &v, 3).unwrap();
        assert_eq!(sample.prompt, "does the image describe a red square?");
        assert_eq!(
            v.decode_text(&sample.target[..1]).unwrap(),
            "yes"
        );
    }

    #[test]
    fn vground_oracle_rejects_absent_objects() {
        let scene = hand_scene();
        assert!(vground_oracle(&scene, "red square").is_ok());
        assert!(matches!(
            vground_oracle(&scene, "blue circle"),
            Err(Error::Oracle(_))
        ));
        assert!(matches!(
            vground_oracle(&scene, "crimson square"),
            Err(Error::Grammar(_))
        ));
    }

    #[test]
    fn video_scenes_stay_in_canvas_and_caption_motion() {
        for seed in 0..100u64 {
            let vs = generate_video_scene(seed, CANVAS, BINS).unwrap();
            let clip = render_video(&vs).unwrap();
            assert_eq!(clip.frames.len(), VIDEO_FRAMES);
            assert!(vs.velocities.iter().all(|&v| v != (0, 0)));
            let caption = video_caption_of(&vs);
            assert!(caption.contains("moving"), "{caption}");
        }
    }

    #[test]
    fn video_frame_zero_matches_still_render() {
        let vs = generate_video_scene(5, CANVAS, BINS).unwrap();
        let clip = render_video(&vs).unwrap();
        let still = render_scene(&vs.scene).unwrap();
        assert_eq!(clip.frames[0].data(), still.data());
        assert_ne!(clip.frames[VIDEO_FRAMES - 1].data(), still.data());
    }

    #[test]
    fn audio_render_decodes_back_to_events() {
        for seed in 0..200u64 {
            let asc = generate_audio_scene(seed);
            assert!(!asc.events.is_empty());
            let grid = render_audio(&asc).unwrap();
            let decoded = decode_audio(&grid).unwrap();
            assert_eq!(decoded, asc.events, "seed {seed}");
        }
    }

    #[test]
    fn audio_caption_names_the_tones() {
        let asc = AudioScene {
            events: vec![
                AudioEvent { pitch: 0, steps: 4 },
                AudioEvent { pitch: 6, steps: 5 },
            ],
            seed: 0,
        };
        assert_eq!(audio_caption_of(&asc), "a low tone then a high tone");
    }

    #[test]
    fn solid_red_image_maps_to_one_code() {
        let img = solid_image(16, 16, [1.0, 0.0, 0.0]);
        let codes = image_to_codes(&img, 8, 64).unwrap();
        assert_eq!(codes.len(), 4);
        assert!(codes.iter().all(|&c| c == codes[0]));
        let proto = code_prototype(codes[0], 64).unwrap();
        assert_eq!(proto, [0.875, 0.125, 0.125]);
    }

    #[test]
    fn codes_roundtrip_is_idempotent() {
        let scene = generate_scene(3, CANVAS, BINS).unwrap();
        let img = render_scene(&scene).unwrap();
        let codes = image_to_codes(&img, 8, 64).unwrap();
        let painted = codes_to_image(&codes, 8, 64, CANVAS, CANVAS).unwrap();
        let codes2 = image_to_codes(&painted, 8, 64).unwrap();
        assert_eq!(codes, codes2);
        let painted2 = codes_to_image(&codes2, 8, 64, CANVAS, CANVAS).unwrap();
        assert_eq!(painted.data(), painted2.data());
    }

    #[test]
    fn solid_color_roundtrip_error_stays_under_half_distance() {
        // Brute-force the worst distance from any color to its nearest
        // prototype, then check solid images always land under it.
        let mut max_half = 0.0f64;
        let grid = 20;
        for r in 0..=grid {
            for g in 0..=grid {
                for b in 0..=grid {
                    let c = [
                        r as f64 / grid as f64,
                        g as f64 / grid as f64,
                        b as f64 / grid as f64,
                    ];
                    let mut best = f64::INFINITY;
                    for code in 0..64 {
                        let p = code_prototype(code, 64).unwrap();
                        let d: f64 = (0..3).map(|i| (c[i] - p[i] as f64).powi(2)).sum();
                        best = best.min(d.sqrt());
                    }
                    max_half = max_half.max(best);
                }
            }
        }
        let mut rng = CounterRng::new(4, 4);
        for _ in 0..50 {
            let color = [rng.next_f32(), rng.next_f32(), rng.next_f32()];
            let img = solid_image(8, 8, color);
            let codes = image_to_codes(&img, 8, 64).unwrap();
            let painted = codes_to_image(&codes, 8, 64, 8, 8).unwrap();
            let err: f64 = (0..64)
                .map(|i| {
                    let a = img.pixel(i % 8, i / 8);
                    let b = painted.pixel(i % 8, i / 8);
                    (0..3)
                        .map(|c| (a[c] as f64 - b[c] as f64).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum::<f64>()
                / 64.0;
            assert!(err < max_half, "error {err} vs half-distance {max_half}");
        }
    }

    #[test]
    fn indivisible_dims_are_a_shape_error() {
        let img = ImageGrid::zeros(10, 10);
        assert!(matches!(
            image_to_codes(&img, 8, 64),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn oracle_targets_score_perfectly_for_every_task() {
        let v = vocab();
        for task in TaskKind::ALL {
            let manifest = DataManifest {
                task,
                seed_start: 100,
                count: 8,
                canvas: CANVAS,
                bins: BINS,
            };
            for i in 0..manifest.count {
                let sample = build_indexed_sample(&manifest, i, &v).unwrap();
                assert_eq!(*sample.target.last().unwrap(), EOS, "{task} {i}");
                assert!(!sample.target.contains(&UNK));
                match task {
                    TaskKind::VisualGrounding => {
                        let SceneSpec::Image(scene) = &sample.scene else {
                            unreachable!()
                        };
                        let back = v
                            .tokens_to_box(
                                &sample.target[..4],
                                CANVAS as f64,
                                CANVAS as f64,
                            )
                            .unwrap();
                        let phrase = sample
                            .prompt
                            .trim_start_matches("which region does the ")
                            .trim_end_matches(" describe?");
                        let gold = vground_oracle(scene, phrase).unwrap().bbox;
                        let quality = iou(&gold, &back);
                        assert!(quality >= 1.0 - 4.0 / BINS as f64, "{quality}");
                        assert_eq!(back, gold);
                    }
                    TaskKind::Vqa => {
                        let SceneSpec::Image(scene) = &sample.scene else {
                            unreachable!()
                        };
                        let answer = v
                            .decode_text(&sample.target[..sample.target.len() - 1])
                            .unwrap();
                        assert_eq!(vqa_oracle(scene, &sample.prompt).unwrap(), answer);
                    }
                    TaskKind::Caption => {
                        let SceneSpec::Image(scene) = &sample.scene else {
                            unreachable!()
                        };
                        let text = v
                            .decode_text(&sample.target[..sample.target.len() - 1])
                            .unwrap();
                        assert_eq!(text, caption_of(scene));
                    }
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn datasets_are_deterministic_and_seed_indexed() {
        let v = vocab();
        let manifest = DataManifest {
            task: TaskKind::Itm,
            seed_start: 500,
            count: 6,
            canvas: CANVAS,
            bins: BINS,
        };
        let a = build_dataset(&manifest, &v).unwrap();
        let b = build_dataset(&manifest, &v).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert_eq!(a[3].seed, 503);
        assert_eq!(
            build_indexed_sample(&manifest, 3, &v).unwrap(),
            a[3]
        );
    }

    #[test]
    fn itm_negatives_use_other_scene_captions() {
        let v = vocab();
        let manifest = DataManifest {
            task: TaskKind::Itm,
            seed_start: 900,
            count: 32,
            canvas: CANVAS,
            bins: BINS,
        };
        let samples = build_dataset(&manifest, &v).unwrap();
        let mut yes = 0;
        let mut no = 0;
        for s in &samples {
            let SceneSpec::Image(scene) = &s.scene else { unreachable!() };
            let own = caption_of(scene);
            let answer = v.decode_text(&s.target[..1]).unwrap();
            let quoted = s
                .prompt
                .trim_start_matches("does the image describe ")
                .trim_end_matches('?');
            if answer == "yes" {
                yes += 1;
                assert_eq!(quoted, own);
            } else {
                no += 1;
                assert_ne!(quoted, own);
            }
        }
        assert!(yes >= 8 && no >= 8, "yes {yes} no {no}");
    }

    #[test]
    fn decoder_prompts_route_questions_for_qa_tasks() {
        let v = vocab();
        for (task, expect_prompt) in [
            (TaskKind::Vqa, true),
            (TaskKind::VideoQa, true),
            (TaskKind::Caption, false),
            (TaskKind::Itm, false),
        ] {
            let manifest = DataManifest {
                task,
                seed_start: 40,
                count: 3,
                canvas: CANVAS,
                bins: BINS,
            };
            let s = build_indexed_sample(&manifest, 0, &v).unwrap();
            assert_eq!(!s.decoder_prompt.is_empty(), expect_prompt, "{task}");
            if expect_prompt {
                assert_eq!(s.decoder_prompt, s.prompt_ids);
            }
            let (input, labels) = s.teacher_forcing();
            assert_eq!(input.len(), labels.len());
            assert_eq!(input[0], crate::vocab::BOS);
            assert!(labels[..s.decoder_prompt.len()].iter().all(|&l| l == PAD));
            assert_eq!(&labels[s.decoder_prompt.len()..], &s.target[..]);
        }
    }

    #[test]
    fn shards_roundtrip_sample_exactly() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("caption.shard");
        let manifest = DataManifest {
            task: TaskKind::VideoQa,
            seed_start: 7,
            count: 4,
            canvas: CANVAS,
            bins: BINS,
        };
        let samples = build_dataset(&manifest, &v).unwrap();
        write_shard(&path, &samples).unwrap();
        let back = read_shard(&path).unwrap();
        assert_eq!(samples, back);

        std::fs::write(dir.path().join("bad"), b"nope").unwrap();
        assert!(read_shard(&dir.path().join("bad")).is_err());
    }

    #[test]
    fn encoder_inputs_carry_the_right_payloads() {
        let v = vocab();
        for (task, segments) in [
            (TaskKind::Caption, 2),
            (TaskKind::AudioCaption, 2),
            (TaskKind::VideoCaption, 2),
            (TaskKind::TextToImage, 1),
        ] {
            let manifest = DataManifest {
                task,
                seed_start: 60,
                count: 2,
                canvas: CANVAS,
                bins: BINS,
            };
            let s = build_indexed_sample(&manifest, 0, &v).unwrap();
            let input = s.encoder_input().unwrap();
            assert_eq!(input.segments.len(), segments, "{task}");
        }
    }

    #[test]
    fn quantization_floor_rule_examples() {
        // Bin edges shift to the bin center on decode; centers are fixed.
        assert_eq!(quantize_bin(10.0, 100.0, 100).unwrap(), 10);
        let c = coordinate(10, CANVAS, BINS);
        assert_eq!(quantize_bin(c as f64, CANVAS as f64, BINS).unwrap(), 200);
    }

    #[test]
    fn manifest_validation_rejects_bad_geometry() {
        let bad = DataManifest {
            task: TaskKind::Caption,
            seed_start: 0,
            count: 1,
            canvas: CANVAS,
            bins: 48,
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let itm = DataManifest {
            task: TaskKind::Itm,
            seed_start: 0,
            count: 1,
            canvas: CANVAS,
            bins: BINS,
        };
        assert!(itm.validate().is_err());
    }
}
