//! Deterministic synthetic image-QA and video-QA scenes.
//!
//! Scenes are solid shapes on a black background, drawn with integer-only
//! rasterization so the pixels are identical on every platform. Inside a
//! square box of side `b` with local coordinates `(u, v)`:
//!
//! - square: every pixel of the box;
//! - circle: `(2u + 1 - b)^2 + (2v + 1 - b)^2 <= b^2`;
//! - triangle (apex up): `|2u + 1 - b| <= v + 1`.
//!
//! Image scenes split the canvas into a `g x g` grid of cells; a non-empty
//! cell holds one shape in a box inset by `cell / 8` on each side. Video
//! scenes move one shape a fixed number of pixels per frame while any
//! distractors stay put.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNKNOWN: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

const QUESTION_WORDS: [&str; 13] = [
    "what", "color", "is", "the", "shape", "how", "many", "shapes", "which", "direction", "does", "move", "moving",
];

pub const NUMBER_WORDS: [&str; 17] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen", "sixteen",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    fn covers(self, u: usize, v: usize, side: usize) -> bool {
        let (u, v, b) = (u as i64, v as i64, side as i64);
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let (dx, dy) = (2 * u + 1 - b, 2 * v + 1 - b);
                dx * dx + dy * dy <= b * b
            }
            ShapeKind::Triangle => (2 * u + 1 - b).abs() <= v + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
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

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 255, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    pub fn word(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    /// Unit displacement `(dx, dy)` in image coordinates (y grows downwards).
    pub fn delta(self) -> (i64, i64) {
        match self {
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
        }
    }
}

/// Bidirectional word/id map; ids 0..4 are the special tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Vocab {
            words: Vec::new(),
            ids: BTreeMap::new(),
        };
        for w in SPECIALS.into_iter().chain(words) {
            if !vocab.ids.contains_key(w) {
                vocab.ids.insert(w.to_string(), vocab.words.len());
                vocab.words.push(w.to_string());
            }
        }
        vocab
    }

    /// Every word the scene grammar can produce.
    pub fn grammar() -> Self {
        let shapes = ShapeKind::ALL.map(ShapeKind::word);
        let colors = Color::ALL.map(Color::word);
        let directions = Direction::ALL.map(Direction::word);
        Self::new(
            QUESTION_WORDS
                .into_iter()
                .chain(shapes)
                .chain(colors)
                .chain(directions)
                .chain(NUMBER_WORDS),
        )
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Id of `word`, [`UNKNOWN`] when absent.
    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNKNOWN)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }
}

/// Lowercases, splits on spaces, strips `?`, `,` and `.`, and maps each
/// remaining word to its id.
pub fn text_tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    text.split(' ')
        .map(|w| {
            w.chars()
                .filter(|c| !matches!(c, '?' | ',' | '.'))
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .map(|w| vocab.id(&w))
        .collect()
}

/// Joins the words of `ids` with single spaces, skipping pad, start and end.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    let words: Vec<&str> = ids
        .iter()
        .filter(|&&id| !matches!(id, PAD | START | END))
        .map(|&id| vocab.word(id).unwrap_or(SPECIALS[UNKNOWN]))
        .collect();
    words.join(" ")
}

/// Visual input as 8-bit RGB pixels, row-major with channels last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Visual {
    Image { height: usize, width: usize, pixels: Vec<u8> },
    Video { frames: usize, height: usize, width: usize, pixels: Vec<u8> },
}

impl Visual {
    pub fn new_image(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        check_pixels(&[height, width], &pixels)?;
        Ok(Visual::Image { height, width, pixels })
    }

    pub fn new_video(frames: usize, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        check_pixels(&[frames, height, width], &pixels)?;
        Ok(Visual::Video {
            frames,
            height,
            width,
            pixels,
        })
    }

    /// Spatial (and temporal) extents without the channel axis.
    pub fn dims(&self) -> Vec<usize> {
        match self {
            Visual::Image { height, width, .. } => vec![*height, *width],
            Visual::Video {
                frames, height, width, ..
            } => vec![*frames, *height, *width],
        }
    }

    pub fn pixels(&self) -> &[u8] {
        match self {
            Visual::Image { pixels, .. } | Visual::Video { pixels, .. } => pixels,
        }
    }

    pub fn is_video(&self) -> bool {
        matches!(self, Visual::Video { .. })
    }

    /// Pixels scaled to `[0, 1]`, shaped `[H, W, 3]` or `[T, H, W, 3]`.
    pub fn to_tensor(&self) -> Tensor {
        let mut shape = self.dims();
        shape.push(3);
        let px = self.pixels();
        Tensor::from_fn(&shape, |i| f64::from(px[i]) / 255.0)
    }

    /// The same video with its frames in the order `order`.
    pub fn reorder_frames(&self, order: &[usize]) -> Result<Self> {
        let Visual::Video {
            frames,
            height,
            width,
            pixels,
        } = self
        else {
            return Err(Error::InvalidArgument("only videos have frames".into()));
        };
        let mut seen = vec![false; *frames];
        if order.len() != *frames || order.iter().any(|&f| f >= *frames || core::mem::replace(&mut seen[f], true)) {
            return Err(Error::InvalidArgument(format!("{order:?} is not a permutation of {frames} frames")));
        }
        let frame = height * width * 3;
        let pixels = order
            .iter()
            .flat_map(|&f| pixels[f * frame..(f + 1) * frame].iter().copied())
            .collect();
        Visual::new_video(*frames, *height, *width, pixels)
    }
}

fn check_pixels(dims: &[usize], pixels: &[u8]) -> Result<()> {
    let expect = dims.iter().product::<usize>() * 3;
    if dims.contains(&0) || pixels.len() != expect {
        return Err(Error::InvalidShape {
            shape: dims.to_vec(),
            len: pixels.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub visual: Visual,
    pub question: String,
    pub answer: String,
    pub question_ids: Vec<usize>,
    pub answer_ids: Vec<usize>,
}

impl Example {
    pub fn new(visual: Visual, question: &str, answer: &str, vocab: &Vocab) -> Result<Self> {
        let example = Example {
            visual,
            question: question.to_string(),
            answer: answer.to_string(),
            question_ids: text_tokenize(question, vocab),
            answer_ids: text_tokenize(answer, vocab),
        };
        example.validate(vocab.len())?;
        Ok(example)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.answer_ids.is_empty() {
            return Err(Error::InvalidArgument("answer must not be empty".into()));
        }
        if let Some(&bad) = self.question_ids.iter().chain(&self.answer_ids).find(|&&id| id >= vocab_size) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                extent: vocab_size,
            });
        }
        Ok(())
    }
}

struct Canvas {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    fn new(height: usize, width: usize) -> Self {
        Canvas {
            height,
            width,
            pixels: vec![0; height * width * 3],
        }
    }

    /// Draws `shape` in the box of side `side` whose top-left corner is
    /// `(x0, y0)`, clipped to the canvas.
    fn draw(&mut self, shape: ShapeKind, color: Color, x0: i64, y0: i64, side: usize) {
        let rgb = color.rgb();
        for v in 0..side {
            for u in 0..side {
                let (x, y) = (x0 + u as i64, y0 + v as i64);
                if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 || !shape.covers(u, v, side) {
                    continue;
                }
                let at = (y as usize * self.width + x as usize) * 3;
                self.pixels[at..at + 3].copy_from_slice(&rgb);
            }
        }
    }
}

/// Image scene layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageScene {
    pub size: usize,
    pub grid: usize,
}

impl ImageScene {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.grid) || !self.size.is_multiple_of(self.grid) || self.size / self.grid < 8 {
            return Err(Error::Config(format!(
                "image scene needs grid in 2..=4 and a size divisible by it into cells of at least 8 px, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Video scene layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VideoScene {
    pub frames: usize,
    pub size: usize,
}

impl VideoScene {
    pub fn validate(&self) -> Result<()> {
        if ![4, 8, 16].contains(&self.frames) || self.size < 16 {
            return Err(Error::Config(format!(
                "video scene needs 4, 8 or 16 frames and a size of at least 16 px, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Side of the shape box.
    pub fn shape_side(&self) -> usize {
        self.size / 4
    }

    /// Distance the mover covers between the first and last frame: the
    /// whole frame, edge to edge.
    pub fn travel(&self) -> usize {
        self.size - self.shape_side()
    }

    /// Displacement of the mover at `frame`, rounded down.
    pub fn offset(&self, frame: usize) -> usize {
        frame * self.travel() / (self.frames - 1)
    }
}

const MAX_TRIES: u64 = 100;

/// Runs `attempt` on fresh draws until it yields a scene, reseeding from a
/// derived seed after every `MAX_TRIES` failures.
fn regenerate<T>(seed: u64, mut attempt: impl FnMut(&mut Rng) -> Option<T>) -> T {
    let mut round = 0u64;
    loop {
        let mut rng = Rng::new(seed.wrapping_add(round.wrapping_mul(0xD1B5_4A32_D192_ED03)));
        for _ in 0..MAX_TRIES {
            if let Some(out) = attempt(&mut rng) {
                return out;
            }
        }
        round += 1;
    }
}

fn pick<T: Copy>(rng: &mut Rng, items: &[T]) -> T {
    items[rng.below(items.len())]
}

/// One image question. Each cell is empty with probability 1/3; the
/// question asks for the color of the only shape of a kind, the shape of the
/// only object of a color, or the number of shapes.
pub fn gen_image_example(seed: u64, scene: ImageScene, vocab: &Vocab) -> Result<Example> {
    scene.validate()?;
    let cell = scene.size / scene.grid;
    let margin = cell / 8;
    let side = cell - 2 * margin;
    let (objects, question, answer) = regenerate(seed, |rng| {
        let objects: Vec<(usize, ShapeKind, Color)> = (0..scene.grid * scene.grid)
            .filter_map(|c| (!rng.chance(1.0 / 3.0)).then(|| (c, pick(rng, &ShapeKind::ALL), pick(rng, &Color::ALL))))
            .collect();
        let qa = match rng.below(3) {
            0 => {
                if objects.is_empty() {
                    return None;
                }
                let (_, kind, color) = objects[rng.below(objects.len())];
                (objects.iter().filter(|o| o.1 == kind).count() == 1)
                    .then(|| (format!("what color is the {}", kind.word()), color.word().to_string()))
            }
            1 => {
                if objects.is_empty() {
                    return None;
                }
                let (_, kind, color) = objects[rng.below(objects.len())];
                (objects.iter().filter(|o| o.2 == color).count() == 1)
                    .then(|| (format!("what shape is {}", color.word()), kind.word().to_string()))
            }
            _ => Some(("how many shapes".to_string(), NUMBER_WORDS[objects.len()].to_string())),
        }?;
        Some((objects, qa.0, qa.1))
    });
    let mut canvas = Canvas::new(scene.size, scene.size);
    for (c, kind, color) in objects {
        let (gx, gy) = (c % scene.grid, c / scene.grid);
        canvas.draw(kind, color, (gx * cell + margin) as i64, (gy * cell + margin) as i64, side);
    }
    let visual = Visual::new_image(scene.size, scene.size, canvas.pixels)?;
    Example::new(visual, &question, &answer, vocab)
}

/// Placement of a shape box in a video.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Track {
    pub kind: ShapeKind,
    pub color: Color,
    pub x: i64,
    pub y: i64,
    /// `None` for static shapes.
    pub direction: Option<Direction>,
}

fn boxes_overlap(a: (i64, i64, i64, i64), b: (i64, i64, i64, i64)) -> bool {
    a.0 < b.2 && b.0 < a.2 && a.1 < b.3 && b.1 < a.3
}

/// Scene content of a video example: the moving shape first, then zero to
/// two static distractors of other kinds that never touch its path.
pub fn gen_video_tracks(rng: &mut Rng, scene: VideoScene) -> Vec<Track> {
    let side = scene.shape_side() as i64;
    let size = scene.size as i64;
    let travel = scene.travel() as i64;
    let direction = pick(rng, &Direction::ALL);
    let (dx, dy) = direction.delta();
    let mut span = |extent: i64| rng.below((size - side - extent + 1) as usize) as i64;
    let (x, y) = match direction {
        Direction::Left | Direction::Right => {
            let x = span(travel);
            (if dx < 0 { x + travel } else { x }, span(0))
        }
        Direction::Up | Direction::Down => {
            let y = span(travel);
            (span(0), if dy < 0 { y + travel } else { y })
        }
    };
    let mover = Track {
        kind: pick(rng, &ShapeKind::ALL),
        color: pick(rng, &Color::ALL),
        x,
        y,
        direction: Some(direction),
    };
    let (ex, ey) = (x + dx * travel, y + dy * travel);
    let path = (x.min(ex), y.min(ey), x.max(ex) + side, y.max(ey) + side);
    let mut tracks = vec![mover];
    let others: Vec<ShapeKind> = ShapeKind::ALL.into_iter().filter(|&k| k != mover.kind).collect();
    let wanted = rng.below(3);
    let mut taken = vec![path];
    for _ in 0..wanted {
        for _ in 0..20 {
            let (sx, sy) = (rng.below((size - side + 1) as usize) as i64, rng.below((size - side + 1) as usize) as i64);
            let bbox = (sx, sy, sx + side, sy + side);
            if taken.iter().all(|&t| !boxes_overlap(t, bbox)) {
                taken.push(bbox);
                tracks.push(Track {
                    kind: pick(rng, &others),
                    color: pick(rng, &Color::ALL),
                    x: sx,
                    y: sy,
                    direction: None,
                });
                break;
            }
        }
    }
    tracks
}

/// Renders `tracks` over `scene.frames` frames.
pub fn render_video(scene: VideoScene, tracks: &[Track]) -> Result<Visual> {
    let side = scene.shape_side();
    let frame_len = scene.size * scene.size * 3;
    let mut pixels = Vec::with_capacity(frame_len * scene.frames);
    for f in 0..scene.frames {
        let mut canvas = Canvas::new(scene.size, scene.size);
        for t in tracks {
            let (dx, dy) = t.direction.map_or((0, 0), Direction::delta);
            let d = scene.offset(f) as i64;
            canvas.draw(t.kind, t.color, t.x + dx * d, t.y + dy * d, side);
        }
        pixels.extend_from_slice(&canvas.pixels);
    }
    Visual::new_video(scene.frames, scene.size, scene.size, pixels)
}

/// One video question: the direction of the moving shape, or its color.
pub fn gen_video_example(seed: u64, scene: VideoScene, vocab: &Vocab) -> Result<Example> {
    scene.validate()?;
    let (tracks, ask_direction) = regenerate(seed, |rng| {
        let tracks = gen_video_tracks(rng, scene);
        Some((tracks, rng.chance(0.5)))
    });
    let mover = tracks[0];
    let (question, answer) = match (ask_direction, mover.direction) {
        (true, Some(d)) => (format!("which direction does the {} move", mover.kind.word()), d.word()),
        _ => ("what color is the moving shape".to_string(), mover.color.word()),
    };
    Example::new(render_video(scene, &tracks)?, &question, answer, vocab)
}

/// Dataset partitions with disjoint seed ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    /// Seed of example `index` of this split; splits are `2^40` seeds apart.
    pub fn seed(self, base: u64, index: u64) -> u64 {
        let offset = match self {
            Split::Train => 0,
            Split::Validation => 1u64 << 40,
            Split::Test => 2u64 << 40,
        };
        base.wrapping_add(offset).wrapping_add(index)
    }
}

/// Scene family of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Image(ImageScene),
    Video(VideoScene),
}

pub fn gen_example(seed: u64, scene: SceneKind, vocab: &Vocab) -> Result<Example> {
    match scene {
        SceneKind::Image(s) => gen_image_example(seed, s, vocab),
        SceneKind::Video(s) => gen_video_example(seed, s, vocab),
    }
}

pub fn gen_split(scene: SceneKind, split: Split, base_seed: u64, count: usize, vocab: &Vocab) -> Result<Vec<Example>> {
    (0..count as u64)
        .map(|i| gen_example(split.seed(base_seed, i), scene, vocab))
        .collect()
}
