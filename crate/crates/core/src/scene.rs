//! Procedural videos: one rigid sprite translating over a static texture.
//!
//! Frames are `[F, 4, H, W]` in `[0, 1]`: red, green, blue and luminance.
//! Captions follow `a <color> <shape> moving <direction>` and every word is in
//! the shipped vocabulary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blending::BlendMask;
use crate::error::{Error, Result};
use crate::tensor::Array;

pub const CHANNELS: usize = 4;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }
        }

        impl std::str::FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(concat!("unknown ", stringify!($name), " `{}`"), other))),
                }
            }
        }
    };
}

word_enum!(Shape {
    Square => "square",
    Circle => "circle",
    Triangle => "triangle",
    Diamond => "diamond",
    Ring => "ring",
});

word_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    White => "white",
    Cyan => "cyan",
    Magenta => "magenta",
    Orange => "orange",
});

word_enum!(Direction {
    Left => "left",
    Right => "right",
    Up => "up",
    Down => "down",
});

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.95, 0.1, 0.1],
            Color::Green => [0.1, 0.85, 0.2],
            Color::Blue => [0.15, 0.25, 0.95],
            Color::Yellow => [0.95, 0.9, 0.1],
            Color::White => [0.97, 0.97, 0.97],
            Color::Cyan => [0.1, 0.9, 0.9],
            Color::Magenta => [0.9, 0.1, 0.85],
            Color::Orange => [1.0, 0.55, 0.05],
        }
    }
}

impl Direction {
    /// Unit displacement `(dx, dy)` per frame, y pointing down.
    pub fn step(self) -> (isize, isize) {
        match self {
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
        }
    }
}

impl Shape {
    /// Whether cell `(x, y)` of an `s x s` sprite box is covered.
    pub fn covers(self, x: usize, y: usize, s: usize) -> bool {
        let c = (s as f64 - 1.0) / 2.0;
        let (dx, dy) = (x as f64 - c, y as f64 - c);
        let r = s as f64 / 2.0;
        match self {
            Shape::Square => true,
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::Ring => {
                let d = (dx * dx + dy * dy).sqrt();
                d <= r && d >= r - 1.5
            }
            // apex on top, widening by one cell per row on each side
            Shape::Triangle => (dx.abs() * 2.0) <= (y as f64 + 1.0),
        }
    }
}

fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub frames: usize,
    pub size: usize,
    pub shape: Shape,
    pub color: Color,
    pub direction: Direction,
    /// Pixels per frame; zero keeps the sprite still.
    pub speed: usize,
    /// Side of the sprite's bounding box.
    pub sprite: usize,
    /// Top-left corner of the sprite box in the first frame.
    pub start: (isize, isize),
    pub wrap: bool,
    pub background_seed: u64,
}

impl SceneParams {
    /// Random parameters whose sprite stays on the canvas for every frame.
    pub fn sample(rng: &mut impl Rng, frames: usize, size: usize) -> Result<Self> {
        let sprite = 6usize.min(size);
        let direction = Direction::ALL[rng.gen_range(0..Direction::ALL.len())];
        let travel = frames.saturating_sub(1);
        if sprite + travel > size {
            return Err(Error::Config(format!(
                "{frames} frames of motion do not fit a {size}px canvas"
            )));
        }
        let span = size - sprite;
        let (dx, dy) = direction.step();
        let along = |d: isize, rng: &mut dyn rand::RngCore| -> isize {
            match d {
                1 => rng.gen_range(0..=span - travel) as isize,
                -1 => rng.gen_range(travel..=span) as isize,
                _ => rng.gen_range(0..=span) as isize,
            }
        };
        let x = along(dx, rng);
        let y = along(dy, rng);
        Ok(Self {
            frames,
            size,
            shape: Shape::ALL[rng.gen_range(0..Shape::ALL.len())],
            color: Color::ALL[rng.gen_range(0..Color::ALL.len())],
            direction,
            speed: 1,
            sprite,
            start: (x, y),
            wrap: false,
            background_seed: rng.gen(),
        })
    }

    pub fn caption(&self) -> String {
        caption(self.color, self.shape, self.direction)
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.size == 0 || self.sprite == 0 || self.sprite > self.size {
            return Err(Error::Config("scene needs frames, canvas and a sprite that fits".into()));
        }
        if self.wrap {
            return Ok(());
        }
        let (dx, dy) = self.direction.step();
        for f in 0..self.frames {
            let shift = (f * self.speed) as isize;
            let x = self.start.0 + dx * shift;
            let y = self.start.1 + dy * shift;
            let max = (self.size - self.sprite) as isize;
            if x < 0 || y < 0 || x > max || y > max {
                return Err(Error::Config(format!("sprite leaves the canvas at frame {f}")));
            }
        }
        Ok(())
    }
}

pub fn caption(color: Color, shape: Shape, direction: Direction) -> String {
    format!("a {} {} moving {}", color.word(), shape.word(), direction.word())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub params: SceneParams,
    /// `[F, 4, H, W]` in `[0, 1]`.
    pub frames: Array,
    pub caption: String,
    /// Exact sprite footprint per frame.
    pub masks: BlendMask,
}

/// Static texture: a tinted grey with two random gratings per channel.
fn background(size: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.08..0.08));
    let gratings: Vec<(f64, f64, f64, [f64; 3])> = (0..2)
        .map(|_| {
            let fx = rng.gen_range(0..=3) as f64;
            let fy = rng.gen_range(1..=3) as f64;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.03..0.07));
            (fx, fy, phase, amp)
        })
        .collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut px = [0.0; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let mut s = 0.35 + tint[c];
                for (fx, fy, phase, amp) in &gratings {
                    let arg = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / size as f64 + phase;
                    s += amp[c] * arg.sin();
                }
                *v = s.clamp(0.0, 1.0);
            }
            out.push(px);
        }
    }
    out
}

pub fn generate_scene(params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let (f_n, n, s) = (params.frames, params.size, params.sprite);
    let bg = background(n, params.background_seed);
    let rgb = params.color.rgb();
    let (dx, dy) = params.direction.step();
    let mut frames = Array::zeros(&[f_n, CHANNELS, n, n]);
    let mut masks = BlendMask::zeros(f_n, n, n);
    let plane = n * n;
    for f in 0..f_n {
        let shift = (f * params.speed) as isize;
        let ox = params.start.0 + dx * shift;
        let oy = params.start.1 + dy * shift;
        for sy in 0..s {
            for sx in 0..s {
                if !params.shape.covers(sx, sy, s) {
                    continue;
                }
                let x = (ox + sx as isize).rem_euclid(n as isize) as usize;
                let y = (oy + sy as isize).rem_euclid(n as isize) as usize;
                masks.set(f, y, x, true);
            }
        }
        let data = frames.data_mut();
        for y in 0..n {
            for x in 0..n {
                let px = if masks.get(f, y, x) { rgb } else { bg[y * n + x] };
                let base = f * CHANNELS * plane + y * n + x;
                for (c, v) in px.iter().enumerate() {
                    data[base + c * plane] = *v;
                }
                data[base + 3 * plane] = luminance(px);
            }
        }
    }
    Ok(Scene {
        caption: params.caption(),
        params: params.clone(),
        frames,
        masks,
    })
}

/// Random scene for `seed`.
pub fn random_scene(seed: u64, frames: usize, size: usize) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_scene(&SceneParams::sample(&mut rng, frames, size)?)
}

/// Captioned single frames `[4, H, W]` drawn from random scenes.
pub fn image_corpus(count: usize, size: usize, seed: u64) -> Result<Vec<(String, Array)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // clips as long as the canvas allows, at most eight frames
    let frames = 8.min(size + 1 - 6usize.min(size));
    (0..count)
        .map(|_| {
            let params = SceneParams::sample(&mut rng, frames, size)?;
            let scene = generate_scene(&params)?;
            let f = rng.gen_range(0..frames);
            Ok((scene.caption, scene.frames.index0(f)))
        })
        .collect()
}

/// Pixel frames in `[0, 1]` to model latents in `[-1, 1]`.
pub fn to_latent(frames: &Array) -> Array {
    frames.map(|v| 2.0 * v - 1.0)
}

/// Model latents back to pixel frames, clamped to `[0, 1]`.
pub fn from_latent(z: &Array) -> Array {
    z.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Vocab;

    fn params() -> SceneParams {
        SceneParams {
            frames: 8,
            size: 16,
            shape: Shape::Circle,
            color: Color::Red,
            direction: Direction::Right,
            speed: 1,
            sprite: 6,
            start: (2, 5),
            wrap: false,
            background_seed: 11,
        }
    }

    #[test]
    fn zero_velocity_gives_identical_frames() {
        let s = generate_scene(&SceneParams { speed: 0, ..params() }).unwrap();
        let first = s.frames.index0(0);
        for f in 1..8 {
            assert_eq!(s.frames.index0(f), first);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(random_scene(5, 8, 16).unwrap(), random_scene(5, 8, 16).unwrap());
        assert_ne!(random_scene(5, 8, 16).unwrap().frames, random_scene(6, 8, 16).unwrap().frames);
    }

    #[test]
    fn rigid_sprite_keeps_pixel_count() {
        for shape in Shape::ALL {
            let s = generate_scene(&SceneParams { shape: *shape, ..params() }).unwrap();
            let c0 = s.masks.frame_count(0);
            assert!(c0 > 0);
            for f in 0..8 {
                assert_eq!(s.masks.frame_count(f), c0, "{shape:?}");
            }
        }
    }

    #[test]
    fn masks_cover_exactly_the_sprite_pixels() {
        let s = generate_scene(&params()).unwrap();
        let rgb = Color::Red.rgb();
        for f in 0..8 {
            let frame = s.frames.index0(f);
            for y in 0..16 {
                for x in 0..16 {
                    let px = [0, 1, 2].map(|c| frame.data()[c * 256 + y * 16 + x]);
                    assert_eq!(px == rgb, s.masks.get(f, y, x));
                }
            }
        }
    }

    #[test]
    fn leaving_the_canvas_is_an_error_unless_wrapping() {
        let p = SceneParams { start: (8, 5), ..params() };
        assert!(generate_scene(&p).is_err());
        let s = generate_scene(&SceneParams { wrap: true, ..p }).unwrap();
        assert_eq!(s.masks.frame_count(7), s.masks.frame_count(0));
    }

    #[test]
    fn captions_use_closed_vocabulary() {
        let vocab = Vocab::shipped();
        for seed in 0..40 {
            let s = random_scene(seed, 8, 16).unwrap();
            for word in s.caption.split_whitespace() {
                assert!(vocab.id(word) != crate::text::UNK, "{word}");
            }
        }
    }

    #[test]
    fn latent_mapping_round_trips() {
        let s = generate_scene(&params()).unwrap();
        let back = from_latent(&to_latent(&s.frames));
        assert!(back.max_abs_diff(&s.frames).unwrap() < 1e-15);
        assert!(s.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
