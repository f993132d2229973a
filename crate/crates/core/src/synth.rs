//! Synthetic cine phantoms with analytic ground truth.
//!
//! The myocardium is an elliptical annulus that contracts radially over one
//! cycle (contract to mid-sequence, relax back). The deformation acts on the
//! radius in a whitened (area-preserving, rotated) coordinate frame:
//!
//! * cavity (`r <= R_in`): `r -> s r`
//! * wall and beyond: `r -> sqrt(r^2 - R_in^2 (1 - s^2))` (area preserving)
//!
//! with `s = 1 - A p(t)`. Both branches invert in closed form, so backward
//! flows are exact. Texture is attached to tissue coordinates, so it moves
//! with the deformation. An optional intensity-matched distractor (a rigid
//! disc touching the inner wall) follows the cavity only partially and with
//! a phase lag; the wall is drawn on top of it.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cine::{CineSequence, GroundTruth};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::mask::MaskImage;
use crate::tensor::Tensor;

const BLOOD: f64 = 0.85;
const MYOCARDIUM: f64 = 0.25;
const TISSUE: f64 = 0.55;
const EDGE_WIDTH: f64 = 0.6;
const TEXTURE_MODES: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// ED inner (endocardial) radius in pixels.
    pub inner_radius: f64,
    pub wall_thickness: f64,
    /// Ratio of the ellipse axes (>= 1).
    pub aspect: f64,
    /// Peak inward motion of the inner wall as a fraction of its radius.
    pub contraction_amplitude: f64,
    pub distractor: bool,
    pub distractor_radius: f64,
    /// 1 renders the distractor with exactly the myocardium intensity.
    pub distractor_contrast: f64,
    /// Fraction of the local cavity motion the distractor follows.
    pub distractor_follow: f64,
    /// Phase lag of the distractor motion, in frames.
    pub distractor_lag: usize,
    /// Standard deviation of the texture of the surrounding tissue.
    pub texture: f64,
    /// Texture of blood pool, wall and distractor relative to `texture`.
    pub inner_texture: f64,
    /// Standard deviation of per-frame white noise.
    pub noise: f64,
    /// ED gap between distractor and inner wall, in pixels (may be negative).
    pub distractor_gap: f64,
    /// Multiplicative intensity drift per frame (bias-field gain growth).
    pub drift: f64,
    pub spacing_mm: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 12,
            inner_radius: 13.0,
            wall_thickness: 6.0,
            aspect: 1.15,
            contraction_amplitude: 0.3,
            distractor: true,
            distractor_radius: 3.5,
            distractor_contrast: 1.0,
            distractor_follow: 0.4,
            distractor_lag: 2,
            texture: 0.08,
            inner_texture: 0.25,
            noise: 0.005,
            distractor_gap: 0.0,
            drift: 0.0,
            spacing_mm: 1.5,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// Large, flat distractor merged with the wall at ED that overshoots
    /// the cavity motion half a cycle late, so it peels off the wall while
    /// the heart relaxes.
    pub fn distractor_heavy(seed: u64) -> Self {
        Self {
            distractor_radius: 5.0,
            distractor_follow: 1.5,
            distractor_lag: 6,
            distractor_gap: -2.0,
            inner_texture: 0.1,
            noise: 0.02,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::invalid("phantom needs frames >= 2"));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::invalid("phantom grid must be at least 16x16"));
        }
        if !(0.0..1.0).contains(&self.contraction_amplitude) {
            return Err(Error::invalid("contraction_amplitude must lie in [0, 1)"));
        }
        let grid = self.height.min(self.width) as f64;
        let peak = self.contraction_amplitude * self.inner_radius * self.aspect.sqrt();
        if peak >= 0.25 * grid {
            return Err(Error::invalid(format!(
                "contraction_amplitude too large: peak displacement {peak:.2} px must stay below 25% of the grid ({:.2} px)",
                0.25 * grid
            )));
        }
        let outer = (self.inner_radius + self.wall_thickness) * self.aspect.sqrt() + 4.0;
        if outer > 0.5 * grid {
            return Err(Error::invalid("annulus does not fit inside the grid"));
        }
        if self.inner_radius <= 0.0 || self.wall_thickness <= 0.0 || self.aspect < 1.0 {
            return Err(Error::invalid("radius, thickness must be > 0 and aspect >= 1"));
        }
        if self.distractor && (self.distractor_radius <= 0.0 || self.distractor_radius >= self.inner_radius) {
            return Err(Error::invalid("distractor radius must lie in (0, inner_radius)"));
        }
        if self.texture < 0.0 || self.inner_texture < 0.0 || self.noise < 0.0 || self.drift < 0.0 || self.spacing_mm <= 0.0 {
            return Err(Error::invalid("texture, noise, drift must be >= 0 and spacing > 0"));
        }
        Ok(())
    }
}

/// A generated cine with its full ground truth.
#[derive(Clone, Debug)]
pub struct PhantomCine {
    pub cine: CineSequence,
    /// Phase of every frame in `[0, 1]` (0 = ED, 1 = peak contraction).
    pub phases: Vec<f64>,
}

impl PhantomCine {
    pub fn ground_truth(&self) -> &GroundTruth {
        self.cine.ground_truth.as_ref().expect("phantoms carry ground truth")
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Contraction phase of frame `n` out of `frames`: raised cosine.
fn phase(n: usize, frames: usize) -> f64 {
    0.5 * (1.0 - (2.0 * PI * n as f64 / frames as f64).cos())
}

/// Whitened annulus geometry shared by phantoms and mask families.
#[derive(Clone, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    cos: f64,
    sin: f64,
    sa: f64,
    r_in: f64,
    r_out: f64,
}

impl Ellipse {
    fn to_q(&self, y: f64, x: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let rx = self.cos * dx + self.sin * dy;
        let ry = -self.sin * dx + self.cos * dy;
        (rx / self.sa, ry * self.sa)
    }

    fn from_q(&self, qx: f64, qy: f64) -> (f64, f64) {
        let (rx, ry) = (qx * self.sa, qy / self.sa);
        let dx = self.cos * rx - self.sin * ry;
        let dy = self.sin * rx + self.cos * ry;
        (self.cy + dy, self.cx + dx)
    }

    fn radius(&self, y: f64, x: f64) -> f64 {
        let (qx, qy) = self.to_q(y, x);
        qx.hypot(qy)
    }

    /// Whitened polar angle.
    fn angle(&self, y: f64, x: f64) -> f64 {
        let (qx, qy) = self.to_q(y, x);
        qy.atan2(qx)
    }

    /// ED radius -> radius at scale `s`.
    fn forward_radius(&self, r: f64, s: f64) -> f64 {
        if r <= self.r_in {
            s * r
        } else {
            (r * r - self.r_in * self.r_in * (1.0 - s * s)).sqrt()
        }
    }

    /// Radius at scale `s` -> ED radius.
    fn inverse_radius(&self, rho: f64, s: f64) -> f64 {
        if rho <= s * self.r_in {
            rho / s
        } else {
            (rho * rho + self.r_in * self.r_in * (1.0 - s * s)).sqrt()
        }
    }

    fn map(&self, y: f64, x: f64, s: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
        if s == 1.0 {
            return (y, x);
        }
        let (qx, qy) = self.to_q(y, x);
        let rho = qx.hypot(qy);
        if rho == 0.0 {
            return (y, x);
        }
        let k = f(rho) / rho;
        self.from_q(qx * k, qy * k)
    }

    /// Frame point (scale `s`) -> ED point.
    fn to_ed(&self, y: f64, x: f64, s: f64) -> (f64, f64) {
        self.map(y, x, s, |rho| self.inverse_radius(rho, s))
    }

    /// ED point -> frame point at scale `s`.
    fn from_ed(&self, y: f64, x: f64, s: f64) -> (f64, f64) {
        self.map(y, x, s, |r| self.forward_radius(r, s))
    }

    fn myocardium_soft(&self, r: f64) -> f64 {
        sigmoid((r - self.r_in) / EDGE_WIDTH) * (1.0 - sigmoid((r - self.r_out) / EDGE_WIDTH))
    }
}

/// Smooth random texture: a sum of random plane waves.
#[derive(Clone, Debug)]
struct Texture {
    modes: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new(std: f64, rng: &mut ChaCha8Rng) -> Self {
        let amp = if TEXTURE_MODES == 0 { 0.0 } else { std * (2.0 / TEXTURE_MODES as f64).sqrt() };
        let modes = (0..TEXTURE_MODES)
            .map(|_| {
                let k = rng.random_range(0.25..0.9);
                let dir = rng.random_range(0.0..2.0 * PI);
                let ph = rng.random_range(0.0..2.0 * PI);
                (k * dir.cos(), k * dir.sin(), ph, amp)
            })
            .collect();
        Self { modes }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        self.modes
            .iter()
            .map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).cos())
            .sum()
    }
}

struct Scene {
    cfg: PhantomConfig,
    ellipse: Ellipse,
    texture: Texture,
    distractor_texture: Texture,
    distractor_ed: (f64, f64),
    drift_dir: (f64, f64),
}

impl Scene {
    fn new(cfg: &PhantomConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let jitter = |rng: &mut ChaCha8Rng, a: f64| rng.random_range(-a..a);
        let cy = cfg.height as f64 / 2.0 - 0.5 + jitter(&mut rng, 2.0);
        let cx = cfg.width as f64 / 2.0 - 0.5 + jitter(&mut rng, 2.0);
        let theta = rng.random_range(0.0..PI);
        let r_in = cfg.inner_radius * (1.0 + jitter(&mut rng, 0.08));
        let thick = cfg.wall_thickness * (1.0 + jitter(&mut rng, 0.1));
        let ellipse = Ellipse {
            cy,
            cx,
            cos: theta.cos(),
            sin: theta.sin(),
            sa: cfg.aspect.sqrt(),
            r_in,
            r_out: r_in + thick,
        };
        let texture = Texture::new(cfg.texture, &mut rng);
        let distractor_texture = Texture::new(cfg.texture * cfg.inner_texture, &mut rng);
        let ang = rng.random_range(0.0..2.0 * PI);
        let rd = r_in - cfg.distractor_radius - cfg.distractor_gap;
        let distractor_ed = ellipse.from_q(rd * ang.cos(), rd * ang.sin());
        let beta = rng.random_range(0.0..2.0 * PI);
        Self {
            cfg: cfg.clone(),
            ellipse,
            texture,
            distractor_texture,
            distractor_ed,
            drift_dir: (beta.cos(), beta.sin()),
        }
    }

    fn scale(&self, n: usize) -> f64 {
        1.0 - self.cfg.contraction_amplitude * phase(n, self.cfg.frames)
    }

    fn distractor_center(&self, n: usize) -> (f64, f64) {
        let lagged = n.saturating_sub(self.cfg.distractor_lag);
        let s = 1.0 - self.cfg.distractor_follow * (1.0 - self.scale(lagged));
        let (y0, x0) = self.distractor_ed;
        let e = &self.ellipse;
        (e.cy + (y0 - e.cy) * s, e.cx + (x0 - e.cx) * s)
    }

    /// Visible weight of the distractor at a frame point (wall drawn on top).
    /// Coverage of the distractor disc at a frame point.
    fn distractor_cover(&self, n: usize, y: f64, x: f64) -> f64 {
        if !self.cfg.distractor {
            return 0.0;
        }
        let (dy, dx) = self.distractor_center(n);
        let d = (y - dy).hypot(x - dx);
        1.0 - sigmoid((d - self.cfg.distractor_radius) / EDGE_WIDTH)
    }

    /// `(wall coverage, wall intensity, intensity behind the wall)` at an
    /// ED point.
    fn ed_layers(&self, y: f64, x: f64) -> (f64, f64, f64) {
        let r = self.ellipse.radius(y, x);
        let cavity = 1.0 - sigmoid((r - self.ellipse.r_in) / EDGE_WIDTH);
        let outside = sigmoid((r - self.ellipse.r_out) / EDGE_WIDTH);
        let wall = self.ellipse.myocardium_soft(r);
        let t = self.texture.at(y, x);
        let total = cavity + wall + outside;
        let inner = self.cfg.inner_texture * t;
        let behind = (cavity * (BLOOD + inner) + outside * (TISSUE + t)) / (cavity + outside);
        (wall / total, MYOCARDIUM + inner, behind)
    }

    fn render(&self, n: usize) -> (Tensor, MaskImage, FlowField, FlowField) {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let s = self.scale(n);
        let s_prev = if n > 0 { self.scale(n - 1) } else { s };
        let (dcy, dcx) = self.distractor_center(n);
        let (pcy, pcx) = self.distractor_center(n.saturating_sub(1));
        let (ecy, ecx) = self.distractor_ed;
        let distractor_value = MYOCARDIUM + (1.0 - self.cfg.distractor_contrast) * (BLOOD - MYOCARDIUM);
        let mut noise = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        noise.set_stream(n as u64 + 1);
        let mut img = vec![0.0; h * w];
        let mut mask = vec![false; h * w];
        let mut pair = vec![(0.0, 0.0); h * w];
        let mut comp = vec![(0.0, 0.0); h * w];
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64, x as f64);
                let (y0, x0) = self.ellipse.to_ed(yf, xf, s);
                let r0 = self.ellipse.radius(y0, x0);
                let (wall, wall_value, behind) = self.ed_layers(y0, x0);
                let cover = self.distractor_cover(n, yf, xf);
                let dval = distractor_value + self.distractor_texture.at(yf - dcy, xf - dcx);
                let under = cover * dval + (1.0 - cover) * behind;
                let mut v = wall * wall_value + (1.0 - wall) * under;
                let dw = cover * (1.0 - wall);
                if self.cfg.drift > 0.0 {
                    let b = ((xf - w as f64 / 2.0) * self.drift_dir.0 + (yf - h as f64 / 2.0) * self.drift_dir.1)
                        / (0.5 * h.min(w) as f64);
                    v *= 1.0 + self.cfg.drift * n as f64 * b.clamp(-1.0, 1.0);
                }
                let p = y * w + x;
                img[p] = v;
                if self.cfg.noise > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut noise);
                    img[p] += self.cfg.noise * z;
                }
                mask[p] = r0 >= self.ellipse.r_in && r0 <= self.ellipse.r_out;
                if dw > 0.5 {
                    pair[p] = (pcx - dcx, pcy - dcy);
                    comp[p] = (ecx - dcx, ecy - dcy);
                } else {
                    let (yp, xp) = self.ellipse.from_ed(y0, x0, s_prev);
                    pair[p] = (xp - xf, yp - yf);
                    comp[p] = (x0 - xf, y0 - yf);
                }
            }
        }
        let image = Tensor::new(vec![h, w], img).expect("grid-sized buffer");
        let mask = MaskImage::from_fn(h, w, |y, x| mask[y * w + x]);
        let pair = FlowField::from_fn(h, w, |y, x| pair[y * w + x]);
        let comp = FlowField::from_fn(h, w, |y, x| comp[y * w + x]);
        (image, mask, pair, comp)
    }
}

/// Renders a phantom cine with ground-truth masks and flows.
pub fn generate_phantom(config: &PhantomConfig) -> Result<PhantomCine> {
    config.validate()?;
    let scene = Scene::new(config);
    let mut frames = Vec::with_capacity(config.frames);
    let mut masks = Vec::with_capacity(config.frames);
    let mut pairwise = Vec::with_capacity(config.frames - 1);
    let mut composite = Vec::with_capacity(config.frames - 1);
    for n in 0..config.frames {
        let (img, mask, pair, comp) = scene.render(n);
        frames.push(img);
        masks.push(mask);
        if n > 0 {
            pairwise.push(pair);
            composite.push(comp);
        }
    }
    let ed_mask = masks[0].clone();
    let cine = CineSequence::new(frames, config.spacing_mm, ed_mask)?.with_ground_truth(GroundTruth {
        masks,
        pairwise,
        composite,
    })?;
    let phases = (0..config.frames).map(|n| phase(n, config.frames)).collect();
    Ok(PhantomCine { cine, phases })
}

/// Kinds of synthetic mask corruption.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptionKind {
    /// A detached disc (papillary-muscle-like leak).
    Blob,
    /// A disc removed from the wall.
    Hole,
    /// Random flips of pixels next to the boundary.
    BoundaryNoise,
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blob" => Ok(Self::Blob),
            "hole" => Ok(Self::Hole),
            "boundary_noise" => Ok(Self::BoundaryNoise),
            other => Err(Error::invalid(format!(
                "unknown corruption kind `{other}` (expected blob, hole or boundary_noise)"
            ))),
        }
    }
}

fn disc(mask: &MaskImage, cy: f64, cx: f64, r: f64, value: bool) -> MaskImage {
    let (h, w) = mask.grid();
    MaskImage::from_fn(h, w, |y, x| {
        let inside = (y as f64 - cy).hypot(x as f64 - cx) <= r;
        if inside {
            value
        } else {
            mask.get(y, x)
        }
    })
}

/// Seeded corruption of a binary mask.
pub fn corrupt_mask(mask: &MaskImage, kind: CorruptionKind, seed: u64) -> Result<MaskImage> {
    let mask = mask.threshold();
    if mask.is_empty() {
        return Err(Error::invalid("cannot corrupt an empty mask"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = mask.grid();
    let fg: Vec<(usize, usize)> = (0..h * w)
        .map(|i| (i / w, i % w))
        .filter(|&(y, x)| mask.get(y, x))
        .collect();
    match kind {
        CorruptionKind::Blob => {
            let base_components = mask.component_count();
            let (cy, cx) = fg.iter().fold((0.0, 0.0), |(a, b), &(y, x)| (a + y as f64, b + x as f64));
            let (cy, cx) = (cy / fg.len() as f64, cx / fg.len() as f64);
            let spread = (fg.len() as f64).sqrt();
            for attempt in 0..2000 {
                let r = rng.random_range(5.0..7.0);
                // prefer positions near the mask centroid (inside the cavity)
                let reach = if attempt < 1000 { spread * 0.6 } else { h.max(w) as f64 };
                let by = cy + rng.random_range(-reach..reach);
                let bx = cx + rng.random_range(-reach..reach);
                if by - r < 1.0 || bx - r < 1.0 || by + r > h as f64 - 2.0 || bx + r > w as f64 - 2.0 {
                    continue;
                }
                // keep a gap of at least two pixels to existing foreground
                let clear = fg
                    .iter()
                    .all(|&(y, x)| (y as f64 - by).hypot(x as f64 - bx) > r + 2.0);
                if !clear {
                    continue;
                }
                let out = disc(&mask, by, bx, r, true);
                if out.component_count() == base_components + 1 {
                    return Ok(out);
                }
            }
            Err(Error::invalid("no room for a detached blob"))
        }
        CorruptionKind::Hole => {
            let (y, x) = fg[rng.random_range(0..fg.len())];
            let r = rng.random_range(3.5..6.0);
            Ok(disc(&mask, y as f64, x as f64, r, false))
        }
        CorruptionKind::BoundaryNoise => {
            let out = MaskImage::from_fn(h, w, |y, x| {
                let v = mask.get(y, x);
                let near_edge = (-1isize..=1).any(|dy| {
                    (-1isize..=1).any(|dx| {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        ny >= 0
                            && nx >= 0
                            && (ny as usize) < h
                            && (nx as usize) < w
                            && mask.get(ny as usize, nx as usize) != v
                    })
                });
                if near_edge && rng.random_bool(0.3) {
                    !v
                } else {
                    v
                }
            });
            Ok(out)
        }
    }
}

/// Ranges for the randomized mask family used to train the shape prior.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskFamilyConfig {
    pub height: usize,
    pub width: usize,
    pub inner_radius: (f64, f64),
    pub thickness: (f64, f64),
    pub aspect: (f64, f64),
    pub center_jitter: f64,
    /// Fraction of open (C-shaped) masks.
    pub open_fraction: f64,
    /// Opening angle range of C-shapes, radians.
    pub gap: (f64, f64),
}

impl Default for MaskFamilyConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            inner_radius: (8.0, 15.0),
            thickness: (5.0, 9.0),
            aspect: (1.0, 1.35),
            center_jitter: 3.0,
            open_fraction: 0.25,
            gap: (0.5, 1.1),
        }
    }
}

/// Randomized annulus / C-shape masks spanning pose, thickness and
/// curvature.
pub fn generate_mask_family(count: usize, config: &MaskFamilyConfig, seed: u64) -> Result<Vec<MaskImage>> {
    if count == 0 {
        return Err(Error::invalid("mask family count must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let r_in = rng.random_range(config.inner_radius.0..=config.inner_radius.1);
        let thick = rng.random_range(config.thickness.0..=config.thickness.1);
        let aspect = rng.random_range(config.aspect.0..=config.aspect.1);
        let theta = rng.random_range(0.0..PI);
        let j = config.center_jitter;
        let e = Ellipse {
            cy: config.height as f64 / 2.0 - 0.5 + rng.random_range(-j..=j),
            cx: config.width as f64 / 2.0 - 0.5 + rng.random_range(-j..=j),
            cos: theta.cos(),
            sin: theta.sin(),
            sa: aspect.sqrt(),
            r_in,
            r_out: r_in + thick,
        };
        let open = rng.random_bool(config.open_fraction);
        let gap = rng.random_range(config.gap.0..=config.gap.1);
        let gap_dir = rng.random_range(-PI..PI);
        let m = MaskImage::from_fn(config.height, config.width, |y, x| {
            let (yf, xf) = (y as f64, x as f64);
            let r = e.radius(yf, xf);
            if r < e.r_in || r > e.r_out {
                return false;
            }
            if open {
                let d = (e.angle(yf, xf) - gap_dir + PI).rem_euclid(2.0 * PI) - PI;
                return d.abs() > gap / 2.0;
            }
            true
        });
        // a shape clipped by the border is not a plausible sample
        let touches = (0..config.height).any(|y| m.get(y, 0) || m.get(y, config.width - 1))
            || (0..config.width).any(|x| m.get(0, x) || m.get(config.height - 1, x));
        if !touches && m.component_count() == 1 {
            out.push(m);
        }
    }
    Ok(out)
}

/// Principal-axis orientation of a mask in `[0, π)`, from second moments.
pub fn mask_orientation(mask: &MaskImage) -> f64 {
    let (h, w) = mask.grid();
    let pts: Vec<(f64, f64)> = (0..h * w)
        .filter(|&i| mask.get(i / w, i % w))
        .map(|i| ((i / w) as f64, (i % w) as f64))
        .collect();
    let n = pts.len().max(1) as f64;
    let (my, mx) = pts.iter().fold((0.0, 0.0), |(a, b), &(y, x)| (a + y / n, b + x / n));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(y, x) in &pts {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    (0.5 * (2.0 * sxy).atan2(sxx - syy)).rem_euclid(PI)
}

/// Gaussian noise helper shared by tests and augmentation.
pub fn gaussian_image(height: usize, width: usize, std: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[height, width], |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * std
    })
}

/// Smooth random texture image (sum of plane waves), unit-ish amplitude.
pub fn textured_image(height: usize, width: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = Texture::new(1.0, &mut rng);
    Tensor::from_fn(&[height, width], |i| tex.at((i / width) as f64, (i % width) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::warp;

    #[test]
    fn ellipse_maps_invert() {
        let s = Scene::new(&PhantomConfig::default());
        for &(y, x) in &[(10.0, 20.0), (31.5, 33.0), (40.0, 50.0), (31.0, 31.0)] {
            let (y0, x0) = s.ellipse.to_ed(y, x, 0.75);
            let (y1, x1) = s.ellipse.from_ed(y0, x0, 0.75);
            assert!((y1 - y).abs() < 1e-10 && (x1 - x).abs() < 1e-10);
        }
    }

    #[test]
    fn static_phantom() {
        let cfg = PhantomConfig {
            contraction_amplitude: 0.0,
            distractor_follow: 0.0,
            noise: 0.0,
            ..PhantomConfig::default()
        };
        let p = generate_phantom(&cfg).unwrap();
        let f0 = &p.cine.frames[0];
        for f in &p.cine.frames {
            assert_eq!(f, f0);
        }
        for fl in &p.ground_truth().pairwise {
            assert_eq!(fl.as_tensor().max_abs(), 0.0);
        }
    }

    #[test]
    fn bookkeeping() {
        let p = generate_phantom(&PhantomConfig {
            frames: 7,
            ..PhantomConfig::default()
        })
        .unwrap();
        let gt = p.ground_truth();
        assert_eq!(p.cine.frames.len(), 7);
        assert_eq!(gt.masks.len(), 7);
        assert_eq!(gt.pairwise.len(), 6);
        assert_eq!(gt.composite.len(), 6);
    }

    #[test]
    fn invalid_amplitude_names_constraint() {
        let cfg = PhantomConfig {
            contraction_amplitude: 0.95,
            inner_radius: 20.0,
            wall_thickness: 4.0,
            ..PhantomConfig::default()
        };
        let err = generate_phantom(&cfg).unwrap_err().to_string();
        assert!(err.contains("contraction_amplitude"), "{err}");
    }

    #[test]
    fn seeded_and_reproducible() {
        let a = generate_phantom(&PhantomConfig::default()).unwrap();
        let b = generate_phantom(&PhantomConfig::default()).unwrap();
        assert_eq!(a.cine, b.cine);
        let c = generate_phantom(&PhantomConfig {
            seed: 1,
            ..PhantomConfig::default()
        })
        .unwrap();
        assert_ne!(a.cine.frames[0], c.cine.frames[0]);
    }

    #[test]
    fn distractor_excluded_from_mask() {
        let p = generate_phantom(&PhantomConfig::default()).unwrap();
        let scene = Scene::new(&PhantomConfig::default());
        let (dy, dx) = scene.distractor_center(0);
        let m = &p.cine.ed_mask;
        // the distractor centre is dark in the image but not myocardium
        assert!(!m.get(dy.round() as usize, dx.round() as usize));
        let v = p.cine.frames[0].data()[dy.round() as usize * 64 + dx.round() as usize];
        assert!((v - MYOCARDIUM).abs() < 0.35);
    }

    #[test]
    fn composite_truth_reproduces_frames() {
        let p = generate_phantom(&PhantomConfig::default()).unwrap();
        let f0 = &p.cine.frames[0];
        for (n, comp) in p.ground_truth().composite.iter().enumerate() {
            let target = &p.cine.frames[n + 1];
            let warped = warp(f0, comp).unwrap().warped;
            let range = target.data().iter().cloned().fold(f64::MIN, f64::max)
                - target.data().iter().cloned().fold(f64::MAX, f64::min);
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for y in 4..60 {
                for x in 4..60 {
                    acc += (warped.data()[y * 64 + x] - target.data()[y * 64 + x]).abs();
                    cnt += 1.0;
                }
            }
            assert!(acc / cnt < 0.02 * range, "frame {}: {}", n + 1, acc / cnt / range);
        }
    }

    #[test]
    fn corruption_kinds() {
        let fam = generate_mask_family(3, &MaskFamilyConfig::default(), 5).unwrap();
        let m = &fam[0];
        let blob = corrupt_mask(m, CorruptionKind::Blob, 1).unwrap();
        assert_eq!(blob.component_count(), m.component_count() + 1);
        assert_eq!(corrupt_mask(m, CorruptionKind::Blob, 1).unwrap(), blob);
        assert!("smudge".parse::<CorruptionKind>().is_err());
    }

    #[test]
    fn family_is_distinct_and_connected() {
        let fam = generate_mask_family(20, &MaskFamilyConfig::default(), 3).unwrap();
        for (i, a) in fam.iter().enumerate() {
            assert!(!a.is_empty());
            assert_eq!(a.component_count(), 1);
            for b in &fam[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }
}
