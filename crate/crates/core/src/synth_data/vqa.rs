//! Scenes of coloured shapes on a 2×2 grid and questions about them.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::text::BINARY_SUFFIX;
use super::{split_rng, Split};

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];
pub const POSITIONS: [&str; 4] = ["top left", "top right", "bottom left", "bottom right"];

/// Gray level each colour is rendered with on the single-channel canvas.
pub const COLOR_LEVELS: [u8; 4] = [64, 128, 192, 255];

pub const IMAGE_SIZE: usize = 32;
const CELL: usize = IMAGE_SIZE / 2;

/// Row-major `[H × W × C]` 8-bit raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn blank(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![0; height * width * channels],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Hex SHA-256 over the dimensions and pixel bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for d in [self.height, self.width, self.channels] {
            h.update((d as u64).to_le_bytes());
        }
        h.update(&self.pixels);
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: usize,
    pub shape: usize,
    /// Grid cell, row-major: 0 top left .. 3 bottom right.
    pub cell: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

fn covers(shape: usize, y: usize, x: usize) -> bool {
    let (fy, fx) = (y as f32, x as f32);
    match shape {
        0 => (3..13).contains(&y) && (3..13).contains(&x),
        1 => (fy - 7.5).powi(2) + (fx - 7.5).powi(2) <= 30.25,
        _ => (3..13).contains(&y) && (fx - 7.5).abs() <= (fy - 2.0) * 0.5,
    }
}

impl Scene {
    pub fn render(&self) -> Raster {
        let mut r = Raster::blank(IMAGE_SIZE, IMAGE_SIZE, 1);
        for o in &self.objects {
            let (oy, ox) = ((o.cell / 2) * CELL, (o.cell % 2) * CELL);
            for y in 0..CELL {
                for x in 0..CELL {
                    if covers(o.shape, y, x) {
                        r.pixels[(oy + y) * IMAGE_SIZE + ox + x] = COLOR_LEVELS[o.color];
                    }
                }
            }
        }
        r
    }

    pub fn contains(&self, color: usize, shape: usize) -> bool {
        self.objects.iter().any(|o| o.color == color && o.shape == shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqaTag {
    Color,
    Shape,
    Count,
    Position,
    Yesno,
}

impl VqaTag {
    pub const ALL: [VqaTag; 5] = [VqaTag::Color, VqaTag::Shape, VqaTag::Count, VqaTag::Position, VqaTag::Yesno];

    pub fn name(self) -> &'static str {
        match self {
            VqaTag::Color => "color",
            VqaTag::Shape => "shape",
            VqaTag::Count => "count",
            VqaTag::Position => "position",
            VqaTag::Yesno => "yesno",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VqaInstruction {
    pub task_tag: VqaTag,
    pub scene: Scene,
    pub image: Raster,
    pub question: String,
    pub response: String,
}

/// Fill `n` distinct cells: the first object is `first`, the rest are drawn
/// at random subject to `allowed(color, shape)`.
fn scene_with(
    first: Option<(usize, usize)>,
    n: usize,
    rng: &mut impl Rng,
    allowed: impl Fn(usize, usize) -> bool,
) -> Scene {
    let mut cells = [0usize, 1, 2, 3];
    cells.shuffle(rng);
    let mut objects = Vec::with_capacity(n);
    for (k, &cell) in cells.iter().take(n).enumerate() {
        let (color, shape) = match (k, first) {
            (0, Some(cs)) => cs,
            _ => loop {
                let c = rng.gen_range(0..COLORS.len());
                let s = rng.gen_range(0..SHAPES.len());
                if allowed(c, s) {
                    break (c, s);
                }
            },
        };
        objects.push(SceneObject { color, shape, cell });
    }
    Scene { objects }
}

pub(crate) fn sample_vqa(tag: VqaTag, parity: bool, rng: &mut impl Rng) -> VqaInstruction {
    let n = rng.gen_range(1..=4usize);
    let c = rng.gen_range(0..COLORS.len());
    let s = rng.gen_range(0..SHAPES.len());
    let (scene, question, response) = match tag {
        VqaTag::Color => {
            let scene = scene_with(Some((c, s)), n, rng, |_, s2| s2 != s);
            (scene, format!("What color is the {}?", SHAPES[s]), COLORS[c].to_string())
        }
        VqaTag::Shape => {
            let scene = scene_with(Some((c, s)), n, rng, |c2, _| c2 != c);
            (scene, format!("What shape is {}?", COLORS[c]), SHAPES[s].to_string())
        }
        VqaTag::Count => {
            let scene = scene_with(None, n, rng, |_, _| true);
            (scene, "How many shapes?".to_string(), n.to_string())
        }
        VqaTag::Position => {
            let scene = scene_with(Some((c, s)), n, rng, |c2, s2| (c2, s2) != (c, s));
            let cell = scene.objects[0].cell;
            (
                scene,
                format!("Where is the {} {}?", COLORS[c], SHAPES[s]),
                POSITIONS[cell].to_string(),
            )
        }
        VqaTag::Yesno => {
            let scene = if parity {
                scene_with(Some((c, s)), n, rng, |_, _| true)
            } else {
                scene_with(None, n, rng, |c2, s2| (c2, s2) != (c, s))
            };
            let ans = if parity { "yes" } else { "no" };
            (
                scene,
                format!("Is there a {} {}? {BINARY_SUFFIX}", COLORS[c], SHAPES[s]),
                ans.to_string(),
            )
        }
    };
    let image = scene.render();
    VqaInstruction {
        task_tag: tag,
        scene,
        image,
        question,
        response,
    }
}

/// `n` visual questions, tags round-robin, yes/no answers alternating, on
/// the requested side of the split partition.
pub fn gen_vqa_corpus(seed: u64, n: usize, split: Split) -> Vec<VqaInstruction> {
    let mut rng = split_rng(seed, split, 1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let tag = VqaTag::ALL[i % VqaTag::ALL.len()];
        let parity = (i / VqaTag::ALL.len()) % 2 == 0;
        loop {
            let item = sample_vqa(tag, parity, &mut rng);
            if super::item_split(&item.question, &item.response, &item.image.digest()) == split {
                out.push(item);
                break;
            }
        }
    }
    out
}
