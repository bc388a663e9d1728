//! Procedural captioned-sprite corpus.
//!
//! Each identity is a distinct geometric sprite (shape + palette
//! signature). A scene places two sprites over a solid background with an
//! optional contact bar, and its caption is derivable from the scene spec
//! and vice versa. The renderer also emits exact background masks.
//!
//! The corpus additionally carries solo renders captioned with the bare
//! identity word, so single-sprite prompts are in-distribution. The last
//! identity is held out: it never appears in training captions and is
//! rendered only as solo instance images for subject fine-tuning.

use crate::error::{Result, TidmError};
use crate::image::ImageTensor;
use crate::numerics::{Rng, Tensor};

pub const IMAGE_SIZE: usize = 24;
/// Sprite occupies an 11x11 stencil around its center.
const SPRITE_R: i32 = 5;

pub const MAX_IDENTITIES: usize = 8;
pub const MAX_BACKGROUNDS: usize = 6;

const SPRITE_COLORS: [[f32; 3]; MAX_IDENTITIES] = [
    [0.95, 0.20, 0.20], // red
    [0.20, 0.90, 0.20], // green
    [0.25, 0.45, 0.95], // blue
    [0.95, 0.90, 0.20], // yellow
    [0.90, 0.25, 0.90], // magenta
    [0.20, 0.90, 0.90], // cyan
    [0.95, 0.60, 0.15], // orange
    [0.95, 0.95, 0.95], // white
];

const BACKGROUND_COLORS: [[f32; 3]; MAX_BACKGROUNDS] = [
    [0.08, 0.10, 0.25], // navy
    [0.08, 0.22, 0.10], // forest
    [0.25, 0.15, 0.08], // brown
    [0.20, 0.08, 0.22], // plum
    [0.07, 0.20, 0.20], // teal
    [0.15, 0.15, 0.15], // gray
];

const BAR_COLOR: [f32; 3] = [0.85, 0.85, 0.78];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Meets,
    Shakes,
    With,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::Meets, Relation::Shakes, Relation::With];

    pub fn word(self) -> &'static str {
        match self {
            Relation::Meets => "meets",
            Relation::Shakes => "shakes",
            Relation::With => "with",
        }
    }

    pub fn from_word(word: &str) -> Result<Relation> {
        match word {
            "meets" => Ok(Relation::Meets),
            "shakes" => Ok(Relation::Shakes),
            "with" => Ok(Relation::With),
            other => Err(TidmError::invalid(format!("unknown relation {other:?}"))),
        }
    }

    /// Sprite center columns for the left/right subject.
    fn centers(self) -> (i32, i32) {
        match self {
            Relation::Meets => (6, 18),
            Relation::Shakes => (7, 17),
            Relation::With => (5, 19),
        }
    }
}

/// One scene: two sprite identities in relation over a background, with
/// per-sprite jitter. The caption covers (a, relation, b, background).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub identity_a: usize,
    pub identity_b: usize,
    pub relation: Relation,
    pub background: usize,
    pub jitter_a: (i32, i32),
    pub jitter_b: (i32, i32),
}

impl SceneSpec {
    pub fn caption(&self) -> String {
        format!(
            "ident{} {} ident{} in bg{}",
            self.identity_a,
            self.relation.word(),
            self.identity_b,
            self.background
        )
    }

    /// Inverse of `caption` (jitter defaults to zero).
    pub fn from_caption(caption: &str) -> Result<SceneSpec> {
        let words: Vec<&str> = caption.split_whitespace().collect();
        let [a, rel, b, in_word, bg] = words.as_slice() else {
            return Err(TidmError::invalid(format!(
                "caption {caption:?} does not match 'identA REL identB in bgM'"
            )));
        };
        if *in_word != "in" {
            return Err(TidmError::invalid(format!("caption {caption:?}: expected 'in'")));
        }
        let parse_ident = |w: &str| -> Result<usize> {
            w.strip_prefix("ident")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| TidmError::invalid(format!("bad identity word {w:?}")))
        };
        let background = bg
            .strip_prefix("bg")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TidmError::invalid(format!("bad background word {bg:?}")))?;
        Ok(SceneSpec {
            identity_a: parse_ident(a)?,
            identity_b: parse_ident(b)?,
            relation: Relation::from_word(rel)?,
            background,
            jitter_a: (0, 0),
            jitter_b: (0, 0),
        })
    }

    /// Sprite centers (x, y) after jitter, left then right.
    pub fn sprite_centers(&self) -> ((i32, i32), (i32, i32)) {
        let (ax, bx) = self.relation.centers();
        let y = (IMAGE_SIZE / 2) as i32;
        (
            (ax + self.jitter_a.0, y + self.jitter_a.1),
            (bx + self.jitter_b.0, y + self.jitter_b.1),
        )
    }
}

fn sprite_stencil(shape: usize, dx: i32, dy: i32) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match shape % MAX_IDENTITIES {
        0 => dx * dx + dy * dy <= 20,                       // circle
        1 => ax <= 4 && ay <= 4,                            // square
        2 => dy >= -4 && dy <= 4 && 2 * ax <= dy + 4,       // triangle
        3 => ax + ay <= 5,                                  // diamond
        4 => (ax <= 1 && ay <= 5) || (ay <= 1 && ax <= 5),  // cross
        5 => (8..=20).contains(&(dx * dx + dy * dy)),       // ring
        6 => ax <= ay && ay <= 4,                           // hourglass
        _ => (3..=5).contains(&ax.max(ay)),                 // frame
    }
}

struct Canvas {
    data: Vec<f32>,          // [3, h, w]
    background: Vec<bool>,   // true where untouched background
}

impl Canvas {
    fn new(background: usize) -> Canvas {
        let hw = IMAGE_SIZE * IMAGE_SIZE;
        let mut data = vec![0.0f32; 3 * hw];
        let color = BACKGROUND_COLORS[background];
        for c in 0..3 {
            let v = color[c] * 2.0 - 1.0;
            data[c * hw..(c + 1) * hw].fill(v);
        }
        Canvas {
            data,
            background: vec![true; hw],
        }
    }

    fn put(&mut self, x: i32, y: i32, color: [f32; 3]) {
        if x < 0 || y < 0 || x >= IMAGE_SIZE as i32 || y >= IMAGE_SIZE as i32 {
            return;
        }
        let (x, y) = (x as usize, y as usize);
        let hw = IMAGE_SIZE * IMAGE_SIZE;
        for c in 0..3 {
            self.data[c * hw + y * IMAGE_SIZE + x] = color[c] * 2.0 - 1.0;
        }
        self.background[y * IMAGE_SIZE + x] = false;
    }

    fn draw_sprite(&mut self, identity: usize, cx: i32, cy: i32) {
        let color = SPRITE_COLORS[identity];
        for dy in -SPRITE_R..=SPRITE_R {
            for dx in -SPRITE_R..=SPRITE_R {
                if sprite_stencil(identity, dx, dy) {
                    self.put(cx + dx, cy + dy, color);
                }
            }
        }
    }

    fn finish(self) -> Result<(ImageTensor, Vec<bool>)> {
        let img = ImageTensor::new(Tensor::from_vec(
            vec![3, IMAGE_SIZE, IMAGE_SIZE],
            self.data,
        )?)?;
        Ok((img, self.background))
    }
}

/// Deterministic scene renderer.
pub fn render_scene(spec: &SceneSpec) -> Result<(ImageTensor, Vec<bool>)> {
    let mut canvas = Canvas::new(spec.background);
    let ((ax, ay), (bx, by)) = spec.sprite_centers();
    canvas.draw_sprite(spec.identity_a, ax, ay);
    canvas.draw_sprite(spec.identity_b, bx, by);
    if spec.relation == Relation::Shakes {
        // contact bar between the sprites
        let y = (IMAGE_SIZE / 2) as i32;
        for py in (y - 1)..=(y + 1) {
            for px in (ax + 3)..=(bx - 3) {
                canvas.put(px, py, BAR_COLOR);
            }
        }
    }
    canvas.finish()
}

/// Solo render of one identity centered (plus jitter) over a background.
pub fn render_solo(identity: usize, background: usize, jitter: (i32, i32)) -> Result<(ImageTensor, Vec<bool>)> {
    let mut canvas = Canvas::new(background);
    let c = (IMAGE_SIZE / 2) as i32;
    canvas.draw_sprite(identity, c + jitter.0, c + jitter.1);
    canvas.finish()
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub image: ImageTensor,
    pub background_mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct SoloImage {
    pub identity: usize,
    pub background: usize,
    pub jitter: (i32, i32),
    pub image: ImageTensor,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    /// Solo renders of trained identities, captioned with the bare
    /// identity word. They teach the single-sprite layout that subject
    /// fine-tuning and bare-identity prompts rely on.
    pub train_solo: Vec<SoloImage>,
    /// Solo renders of the held-out identity (fine-tuning instances).
    pub heldout_solo: Vec<SoloImage>,
    pub n_identities: usize,
    pub n_backgrounds: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn heldout_identity(&self) -> usize {
        self.n_identities - 1
    }

    /// Identities that appear in training captions.
    pub fn trained_identities(&self) -> std::ops::Range<usize> {
        0..self.n_identities - 1
    }
}

pub const HELDOUT_SOLO_COUNT: usize = 16;
/// Solo renders per (trained identity, background) in the corpus.
pub const TRAIN_SOLO_PER_COMBO: usize = 4;

/// Deterministic corpus generation. The held-out identity (the last one)
/// never appears in scenes; it gets `HELDOUT_SOLO_COUNT` solo renders.
pub fn make_dataset(
    n_scenes: usize,
    n_identities: usize,
    n_backgrounds: usize,
    seed: u64,
) -> Result<Dataset> {
    if !(3..=MAX_IDENTITIES).contains(&n_identities) {
        return Err(TidmError::invalid(format!(
            "make_dataset: n_identities must be in [3, {MAX_IDENTITIES}], got {n_identities}"
        )));
    }
    if !(2..=MAX_BACKGROUNDS).contains(&n_backgrounds) {
        return Err(TidmError::invalid(format!(
            "make_dataset: n_backgrounds must be in [2, {MAX_BACKGROUNDS}], got {n_backgrounds}"
        )));
    }
    if n_scenes == 0 {
        return Err(TidmError::invalid("make_dataset: n_scenes must be >= 1"));
    }
    let usable = n_identities - 1;
    let mut rng = Rng::new(seed);
    let mut scenes = Vec::with_capacity(n_scenes);
    for _ in 0..n_scenes {
        let identity_a = rng.next_below(usable as u64) as usize;
        let mut identity_b = rng.next_below((usable - 1) as u64) as usize;
        if identity_b >= identity_a {
            identity_b += 1;
        }
        let relation = Relation::ALL[rng.next_below(3) as usize];
        let background = rng.next_below(n_backgrounds as u64) as usize;
        let jitter = |rng: &mut Rng| (rng.next_below(3) as i32 - 1, rng.next_below(3) as i32 - 1);
        let spec = SceneSpec {
            identity_a,
            identity_b,
            relation,
            background,
            jitter_a: jitter(&mut rng),
            jitter_b: jitter(&mut rng),
        };
        let (image, background_mask) = render_scene(&spec)?;
        scenes.push(Scene {
            spec,
            image,
            background_mask,
        });
    }
    let mut train_solo = Vec::with_capacity(usable * n_backgrounds * TRAIN_SOLO_PER_COMBO);
    for identity in 0..usable {
        for background in 0..n_backgrounds {
            for _ in 0..TRAIN_SOLO_PER_COMBO {
                let jitter = (rng.next_below(5) as i32 - 2, rng.next_below(5) as i32 - 2);
                let (image, _) = render_solo(identity, background, jitter)?;
                train_solo.push(SoloImage {
                    identity,
                    background,
                    jitter,
                    image,
                });
            }
        }
    }
    let heldout = n_identities - 1;
    let mut heldout_solo = Vec::with_capacity(HELDOUT_SOLO_COUNT);
    for _ in 0..HELDOUT_SOLO_COUNT {
        let background = rng.next_below(n_backgrounds as u64) as usize;
        let jitter = (rng.next_below(5) as i32 - 2, rng.next_below(5) as i32 - 2);
        let (image, _) = render_solo(heldout, background, jitter)?;
        heldout_solo.push(SoloImage {
            identity: heldout,
            background,
            jitter,
            image,
        });
    }
    Ok(Dataset {
        scenes,
        train_solo,
        heldout_solo,
        n_identities,
        n_backgrounds,
        seed,
    })
}

/// Square crop around (cx, cy), clamped inside the image.
pub fn crop_patch(image: &ImageTensor, cx: i32, cy: i32, size: usize) -> Tensor {
    let (h, w) = (image.height() as i32, image.width() as i32);
    let half = (size / 2) as i32;
    let x0 = (cx - half).clamp(0, w - size as i32);
    let y0 = (cy - half).clamp(0, h - size as i32);
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for y in 0..size as i32 {
            for x in 0..size as i32 {
                data.push(image.pixel(c, (y0 + y) as usize, (x0 + x) as usize));
            }
        }
    }
    Tensor::from_vec_unchecked(vec![3, size, size], data)
}
