//! Moving textured sprites on a flat background, with ground-truth per-token
//! activity masks and motion-direction labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::ProbabilityMap;
use crate::tokenizer::{PatchGeometry, VideoTensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpriteShape {
    #[default]
    Square,
    Disc,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    #[default]
    Constant,
    LowNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn from_label(label: u8) -> Result<Self> {
        Self::ALL
            .get(label as usize)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("direction label {label} not in 0..4")))
    }

    /// Unit step `(dy, dx)`; image rows grow downwards.
    pub fn unit(self) -> (i64, i64) {
        match self {
            Direction::Up => (-1, 0),
            Direction::Down => (1, 0),
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }
}

/// Everything that determines one clip except the background noise draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteSpec {
    /// `(C, T, H, W)`
    pub canvas: [usize; 4],
    pub shape: SpriteShape,
    pub size: usize,
    /// Top-left corner at frame 0, `(y, x)`.
    pub start: (i64, i64),
    /// Pixels per frame, `(dy, dx)`.
    pub velocity: (i64, i64),
    pub background: Background,
    /// Per-channel background level.
    pub background_level: Vec<f64>,
    pub noise_amplitude: f64,
    /// Per-channel sprite base level.
    pub sprite_level: Vec<f64>,
    /// Half the peak-to-peak swing of the pixel checkerboard on the sprite.
    pub texture_amplitude: f64,
    pub label: Direction,
}

impl SpriteSpec {
    pub fn validate(&self) -> Result<()> {
        let [c, t, h, w] = self.canvas;
        if c == 0 || t == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument("empty canvas".into()));
        }
        if self.size == 0 || self.size > h || self.size > w {
            return Err(Error::InvalidArgument(format!(
                "sprite of size {} does not fit a {h}x{w} canvas",
                self.size
            )));
        }
        if self.background_level.len() != c || self.sprite_level.len() != c {
            return Err(Error::InvalidArgument("per-channel levels must match the channel count".into()));
        }
        if self.background == Background::LowNoise && !(self.texture_amplitude > self.noise_amplitude) {
            return Err(Error::InvalidArgument("texture amplitude must exceed background noise".into()));
        }
        Ok(())
    }

    /// Top-left corner at every frame, reflecting off the canvas walls.
    pub fn trajectory(&self) -> Vec<(i64, i64)> {
        let [_, t, h, w] = self.canvas;
        let max_y = (h - self.size) as i64;
        let max_x = (w - self.size) as i64;
        (0..t as i64)
            .map(|f| {
                (
                    reflect(self.start.0 + self.velocity.0 * f, max_y),
                    reflect(self.start.1 + self.velocity.1 * f, max_x),
                )
            })
            .collect()
    }

    /// Whether sprite-local pixel `(dy, dx)` belongs to the sprite.
    pub fn covers(&self, dy: usize, dx: usize) -> bool {
        match self.shape {
            SpriteShape::Square => dy < self.size && dx < self.size,
            SpriteShape::Disc => {
                let r = self.size as f64 / 2.0;
                let cy = dy as f64 + 0.5 - r;
                let cx = dx as f64 + 0.5 - r;
                cy * cy + cx * cx <= r * r
            }
        }
    }
}

/// Folds `x` into `[0, max]` by mirror reflection.
fn reflect(x: i64, max: i64) -> i64 {
    if max == 0 {
        return 0;
    }
    let period = 2 * max;
    let m = x.rem_euclid(period);
    if m > max {
        period - m
    } else {
        m
    }
}

/// Per-token flag: the token's cube contains a sprite pixel in any frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivityMask {
    pub active: Vec<bool>,
    pub geometry: PatchGeometry,
}

impl ActivityMask {
    pub fn count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.active.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub video: VideoTensor,
    pub activity: ActivityMask,
    pub label: Direction,
}

/// Renders the clip. Values are rounded to f32 so the AVID file format
/// stores them exactly.
pub fn generate_sprite_video<R: Rng + ?Sized>(
    spec: &SpriteSpec,
    geom: &PatchGeometry,
    rng: &mut R,
) -> Result<SyntheticVideo> {
    spec.validate()?;
    if geom.video_shape() != spec.canvas {
        return Err(Error::Geometry(format!(
            "canvas {:?} does not match geometry {:?}",
            spec.canvas,
            geom.video_shape()
        )));
    }
    let [c, t, h, w] = spec.canvas;
    let mut video = VideoTensor::zeros(spec.canvas);
    for ch in 0..c {
        for f in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let mut v = spec.background_level[ch];
                    if spec.background == Background::LowNoise {
                        v += spec.noise_amplitude * (2.0 * rng.random::<f64>() - 1.0);
                    }
                    video.set(ch, f, y, x, v);
                }
            }
        }
    }
    let mut active = vec![false; geom.num_tokens()];
    for (f, &(y0, x0)) in spec.trajectory().iter().enumerate() {
        for dy in 0..spec.size {
            for dx in 0..spec.size {
                if !spec.covers(dy, dx) {
                    continue;
                }
                let (y, x) = (y0 as usize + dy, x0 as usize + dx);
                let sign = if (dy + dx) % 2 == 0 { 1.0 } else { -1.0 };
                for ch in 0..c {
                    video.set(ch, f, y, x, spec.sprite_level[ch] + sign * spec.texture_amplitude);
                }
                active[geom.token_index(f / geom.patch_t, y / geom.patch_h, x / geom.patch_w)] = true;
            }
        }
    }
    video.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    Ok(SyntheticVideo {
        video,
        activity: ActivityMask {
            active,
            geometry: *geom,
        },
        label: spec.label,
    })
}

/// Generator settings for a corpus of clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpriteConfig {
    pub shape: SpriteShape,
    pub size: usize,
    pub min_speed: i64,
    pub max_speed: i64,
    pub background: Background,
    pub noise_amplitude: f64,
    pub texture_amplitude: f64,
}

impl Default for SpriteConfig {
    fn default() -> Self {
        Self {
            shape: SpriteShape::Square,
            size: 8,
            min_speed: 1,
            max_speed: 2,
            background: Background::Constant,
            noise_amplitude: 0.02,
            texture_amplitude: 0.25,
        }
    }
}

/// Random spec moving in `direction`, placed so it never reaches a wall.
pub fn random_spec<R: Rng + ?Sized>(
    cfg: &SpriteConfig,
    canvas: [usize; 4],
    direction: Direction,
    rng: &mut R,
) -> Result<SpriteSpec> {
    let [c, t, h, w] = canvas;
    if cfg.size > h || cfg.size > w || cfg.min_speed < 0 || cfg.min_speed > cfg.max_speed {
        return Err(Error::InvalidArgument("sprite config does not fit the canvas".into()));
    }
    let speed = rng.random_range(cfg.min_speed..=cfg.max_speed);
    let (uy, ux) = direction.unit();
    let velocity = (uy * speed, ux * speed);
    let travel = speed * (t as i64 - 1);
    let place = |rng: &mut R, extent: usize, unit: i64| -> Result<i64> {
        let room = extent as i64 - cfg.size as i64;
        let span = if unit == 0 { room } else { room - travel };
        if span < 0 {
            return Err(Error::InvalidArgument(format!(
                "canvas too small for a sprite of size {} moving {travel} px",
                cfg.size
            )));
        }
        let p = rng.random_range(0..=span);
        Ok(if unit < 0 { p + travel } else { p })
    };
    let start = (place(rng, h, uy)?, place(rng, w, ux)?);
    // keep sprite and background well apart so the sprite is visible in every channel
    // gray background: a flat cube normalizes to exactly zero
    let gray = rng.random_range(0.1..0.4);
    let background_level = vec![gray; c];
    let sprite_level: Vec<f64> = background_level
        .iter()
        .map(|b| b + rng.random_range(0.35..0.55))
        .collect();
    Ok(SpriteSpec {
        canvas,
        shape: cfg.shape,
        size: cfg.size,
        start,
        velocity,
        background: cfg.background,
        background_level,
        noise_amplitude: cfg.noise_amplitude,
        sprite_level,
        texture_amplitude: cfg.texture_amplitude,
        label: direction,
    })
}

/// `Σ_{i active} P_i`.
pub fn foreground_probability_mass(p: &ProbabilityMap, m: &ActivityMask) -> Result<f64> {
    if p.len() != m.active.len() {
        return Err(Error::InvalidArgument(format!(
            "{} probabilities vs {} activity flags",
            p.len(),
            m.active.len()
        )));
    }
    Ok(p.probs.iter().zip(&m.active).filter(|(_, &a)| a).map(|(p, _)| p).sum())
}

pub const ACTIVITY_RANGE: (f64, f64) = (0.05, 0.5);

/// `count` clips, classes in round-robin order (so balanced when `count`
/// is a multiple of four). Clip `i` uses its own rng stream of `seed`.
pub fn make_corpus(count: usize, cfg: &SpriteConfig, geom: &PatchGeometry, seed: u64) -> Result<Vec<SyntheticVideo>> {
    if count < 4 {
        return Err(Error::InvalidArgument(format!("corpus needs at least 4 clips, got {count}")));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let spec = random_spec(cfg, geom.video_shape(), Direction::ALL[i % 4], &mut rng)?;
            let clip = generate_sprite_video(&spec, geom, &mut rng)?;
            let frac = clip.activity.fraction();
            if !(ACTIVITY_RANGE.0..=ACTIVITY_RANGE.1).contains(&frac) {
                return Err(Error::InvalidArgument(format!(
                    "clip {i}: activity fraction {frac} outside {ACTIVITY_RANGE:?}"
                )));
            }
            Ok(clip)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::token_grid_geometry;
    use proptest::prelude::*;

    fn toy_geom() -> PatchGeometry {
        token_grid_geometry([3, 8, 32, 32], [2, 8, 8]).unwrap()
    }

    fn spec(start: (i64, i64), velocity: (i64, i64), size: usize) -> SpriteSpec {
        SpriteSpec {
            canvas: [3, 8, 32, 32],
            shape: SpriteShape::Square,
            size,
            start,
            velocity,
            background: Background::Constant,
            background_level: vec![0.2; 3],
            noise_amplitude: 0.0,
            sprite_level: vec![0.7; 3],
            texture_amplitude: 0.2,
            label: Direction::Right,
        }
    }

    #[test]
    fn static_sprite_has_time_constant_activity() {
        let g = toy_geom();
        let clip = generate_sprite_video(&spec((5, 9), (0, 0), 8), &g, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let cells = 16;
        for s in clip.activity.active.chunks(cells) {
            assert_eq!(s, &clip.activity.active[..cells]);
        }
    }

    #[test]
    fn sprite_inside_one_cell_activates_one_token_per_slice() {
        let g = toy_geom();
        let clip = generate_sprite_video(&spec((9, 17), (0, 1), 4), &g, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // x runs 17..=24 over 8 frames, the sprite spans 17..28: crosses into the next cell
        assert!(clip.activity.count() > 4);
        let clip = generate_sprite_video(&spec((9, 17), (0, 0), 4), &g, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(clip.activity.count(), g.grid_t());
        for t in 0..g.grid_t() {
            assert!(clip.activity.active[g.token_index(t, 1, 2)]);
        }
    }

    #[test]
    fn oversized_sprite_is_rejected() {
        let g = toy_geom();
        assert!(generate_sprite_video(&spec((0, 0), (0, 0), 33), &g, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn reflection_stays_in_bounds() {
        assert_eq!(reflect(0, 4), 0);
        assert_eq!(reflect(5, 4), 3);
        assert_eq!(reflect(9, 4), 1);
        assert_eq!(reflect(-2, 4), 2);
        let s = spec((0, 20), (3, 2), 8);
        for (y, x) in s.trajectory() {
            assert!((0..=24).contains(&y) && (0..=24).contains(&x));
        }
    }

    /// Independent rasterizer: paints every pixel by asking whether it lies
    /// inside the sprite's box at that frame.
    fn rasterize(s: &SpriteSpec) -> Vec<f64> {
        let [c, t, h, w] = s.canvas;
        let mut out = Vec::with_capacity(c * t * h * w);
        let traj = s.trajectory();
        for ch in 0..c {
            for &(y0, x0) in traj.iter().take(t) {
                for y in 0..h as i64 {
                    for x in 0..w as i64 {
                        let inside = y >= y0 && y < y0 + s.size as i64 && x >= x0 && x < x0 + s.size as i64;
                        let v = if inside && s.covers((y - y0) as usize, (x - x0) as usize) {
                            let parity = ((y - y0) + (x - x0)) % 2;
                            s.sprite_level[ch] + if parity == 0 { s.texture_amplitude } else { -s.texture_amplitude }
                        } else {
                            s.background_level[ch]
                        };
                        out.push(v as f32 as f64);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_independent_rasterizer() {
        let g = toy_geom();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for shape in [SpriteShape::Square, SpriteShape::Disc] {
            for d in Direction::ALL {
                let cfg = SpriteConfig { shape, ..SpriteConfig::default() };
                let s = random_spec(&cfg, [3, 8, 32, 32], d, &mut rng).unwrap();
                let clip = generate_sprite_video(&s, &g, &mut rng).unwrap();
                assert_eq!(clip.video.data(), &rasterize(&s)[..]);
            }
        }
    }

    #[test]
    fn foreground_mass_examples() {
        let g = toy_geom();
        let mut active = vec![false; 64];
        active[..16].iter_mut().for_each(|a| *a = true);
        let m = ActivityMask { active, geometry: g };
        let uniform = ProbabilityMap::uniform(g);
        assert!((foreground_probability_mass(&uniform, &m).unwrap() - 0.25).abs() < 1e-12);
        let mut peaked = vec![1e-14; 64];
        peaked[3] = 1.0 - 63e-14;
        let p = ProbabilityMap::new(peaked, g).unwrap();
        assert!((foreground_probability_mass(&p, &m).unwrap() - 1.0).abs() < 1e-12);
        let small = token_grid_geometry([1, 2, 1, 1], [1, 1, 1]).unwrap();
        assert!(foreground_probability_mass(&ProbabilityMap::uniform(small), &m).is_err());
    }

    #[test]
    fn corpus_is_balanced_deterministic_and_in_range() {
        let g = toy_geom();
        let a = make_corpus(400, &SpriteConfig::default(), &g, 7).unwrap();
        let b = make_corpus(400, &SpriteConfig::default(), &g, 7).unwrap();
        assert_eq!(a, b);
        for d in Direction::ALL {
            assert_eq!(a.iter().filter(|c| c.label == d).count(), 100);
        }
        assert!(make_corpus(3, &SpriteConfig::default(), &g, 7).is_err());
        assert_ne!(a, make_corpus(400, &SpriteConfig::default(), &g, 8).unwrap());
    }

    /// Centroid of pixels brighter than the frame's darkest (background) level.
    fn centroid(v: &VideoTensor, f: usize) -> (f64, f64) {
        let [_, _, h, w] = v.shape();
        let bg = (0..h * w).map(|i| v.get(0, f, i / w, i % w)).fold(f64::INFINITY, f64::min);
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                if (v.get(0, f, y, x) - bg).abs() > 0.05 {
                    sy += y as f64;
                    sx += x as f64;
                    n += 1.0;
                }
            }
        }
        (sy / n, sx / n)
    }

    #[test]
    fn labels_are_recoverable_from_pixels() {
        let g = toy_geom();
        for clip in make_corpus(40, &SpriteConfig::default(), &g, 3).unwrap() {
            let (y0, x0) = centroid(&clip.video, 0);
            let (y1, x1) = centroid(&clip.video, 7);
            let (dy, dx) = (y1 - y0, x1 - x0);
            let guess = if dy.abs() > dx.abs() {
                if dy < 0.0 { Direction::Up } else { Direction::Down }
            } else if dx < 0.0 {
                Direction::Left
            } else {
                Direction::Right
            };
            assert_eq!(guess, clip.label);
        }
    }

    proptest! {
        #[test]
        fn low_noise_background_keeps_sprite_dominant(seed in any::<u64>(), dir in 0u8..4) {
            let g = toy_geom();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = SpriteConfig { background: Background::LowNoise, ..SpriteConfig::default() };
            let s = random_spec(&cfg, [3, 8, 32, 32], Direction::from_label(dir).unwrap(), &mut rng).unwrap();
            let clip = generate_sprite_video(&s, &g, &mut rng).unwrap();
            let frac = clip.activity.fraction();
            prop_assert!((ACTIVITY_RANGE.0..=ACTIVITY_RANGE.1).contains(&frac));
            for (y, x) in s.trajectory() {
                prop_assert!(y >= 0 && x >= 0 && y <= 24 && x <= 24);
            }
        }
    }
}
