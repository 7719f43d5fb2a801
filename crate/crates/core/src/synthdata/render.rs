//! Raster primitives for synthetic aerial frames: value-noise ground
//! texture, a road band, shaded rotated vehicles, snow, contrast and blur.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{DomainParams, GtBox};
use crate::detect::iou;
use crate::rng::{self, Rng};

pub const SIZE: usize = 64;
pub const GRID: usize = 4;
pub const CELL: f32 = SIZE as f32 / GRID as f32;
const SNOW: [f32; 3] = [0.90, 0.92, 0.95];

/// Planar RGB image, values nominally in [0, 1].
#[derive(Clone, Debug)]
pub struct Canvas {
    pub px: Vec<[f32; 3]>,
}

impl Canvas {
    fn new() -> Self {
        Canvas {
            px: vec![[0.0; 3]; SIZE * SIZE],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> [f32; 3] {
        self.px[y * SIZE + x]
    }

    fn blend(&mut self, x: usize, y: usize, c: [f32; 3], alpha: f32) {
        let p = &mut self.px[y * SIZE + x];
        for k in 0..3 {
            p[k] = p[k] * (1.0 - alpha) + c[k] * alpha;
        }
    }

    /// Channel-first `[3, 64, 64]` data.
    pub fn to_chw(&self) -> Vec<f32> {
        let mut out = vec![0.0; 3 * SIZE * SIZE];
        for (i, p) in self.px.iter().enumerate() {
            for k in 0..3 {
                out[k * SIZE * SIZE + i] = p[k];
            }
        }
        out
    }
}

/// Bilinear interpolation of a 3x3 lattice over the unit square.
fn lattice3(l: &[f32], u: f32, v: f32) -> f32 {
    let (fu, fv) = ((u * 2.0).clamp(0.0, 2.0), (v * 2.0).clamp(0.0, 2.0));
    let (i, j) = ((fu as usize).min(1), (fv as usize).min(1));
    let (tu, tv) = (fu - i as f32, fv - j as f32);
    let at = |a: usize, b: usize| l[b * 3 + a];
    let top = at(i, j) * (1.0 - tu) + at(i + 1, j) * tu;
    let bottom = at(i, j + 1) * (1.0 - tu) + at(i + 1, j + 1) * tu;
    top * (1.0 - tv) + bottom * tv
}

pub fn intensity(c: [f32; 3]) -> f32 {
    (c[0] + c[1] + c[2]) / 3.0
}

/// Smooth lattice noise in [0, 1] with the given cell spacing.
struct ValueNoise {
    spacing: f32,
    n: usize,
    lattice: Vec<f32>,
}

impl ValueNoise {
    fn new(spacing: f32, rng: &mut Rng) -> Self {
        let n = (SIZE as f32 / spacing).ceil() as usize + 2;
        ValueNoise {
            spacing,
            n,
            lattice: (0..n * n).map(|_| rng.gen::<f32>()).collect(),
        }
    }

    fn sample(&self, x: f32, y: f32) -> f32 {
        let fx = x / self.spacing;
        let fy = y / self.spacing;
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(fx - fx.floor()), smooth(fy - fy.floor()));
        let l = |i: usize, j: usize| self.lattice[j.min(self.n - 1) * self.n + i.min(self.n - 1)];
        let top = l(ix, iy) * (1.0 - tx) + l(ix + 1, iy) * tx;
        let bottom = l(ix, iy + 1) * (1.0 - tx) + l(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn fbm(layers: &[(ValueNoise, f32)], x: f32, y: f32) -> f32 {
    let total: f32 = layers.iter().map(|(_, w)| w).sum();
    layers.iter().map(|(n, w)| n.sample(x, y) * w).sum::<f32>() / total
}

const PALETTES: [([f32; 3], [f32; 3]); 4] = [
    ([0.16, 0.27, 0.14], [0.30, 0.40, 0.22]), // conifer
    ([0.46, 0.38, 0.26], [0.58, 0.50, 0.34]), // field
    ([0.44, 0.44, 0.42], [0.56, 0.55, 0.52]), // gravel
    ([0.34, 0.38, 0.22], [0.48, 0.47, 0.31]), // marsh
];
const ASPHALT: [f32; 3] = [0.27, 0.27, 0.29];

pub const PALETTE_COUNT: u8 = PALETTES.len() as u8;

const VEHICLE_COLORS: [[f32; 3]; 10] = [
    [0.92, 0.92, 0.94], // white
    [0.74, 0.76, 0.78], // silver
    [0.07, 0.07, 0.09], // black
    [0.10, 0.13, 0.30], // navy
    [0.82, 0.18, 0.12], // red
    [0.95, 0.80, 0.20], // yellow
    [0.14, 0.18, 0.14], // dark green
    [0.92, 0.45, 0.10], // orange
    [0.45, 0.65, 0.85], // light blue
    [0.80, 0.72, 0.55], // beige
];

/// Static per-video ground layer: texture, road, and snow mask.
pub struct Background {
    pub ground: Canvas,
    /// Snow alpha per pixel for the video's snow cover.
    snow_alpha: Vec<f32>,
}

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

impl Background {
    pub fn new(domain: &DomainParams) -> Self {
        let mut rng = rng::stream(domain.texture_seed, &[rng::label("ground")]);
        let layers = [
            (ValueNoise::new(18.0, &mut rng), 0.6),
            (ValueNoise::new(6.0, &mut rng), 0.3),
            (ValueNoise::new(2.5, &mut rng), 0.1),
        ];
        let (a, b) = PALETTES[usize::from(domain.palette % PALETTE_COUNT)];
        let angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
        let offset: f32 = rng.gen_range(-16.0..16.0);
        let half_width: f32 = rng.gen_range(4.0..7.0);
        let (nx, ny) = (angle.cos(), angle.sin());
        let mut ground = Canvas::new();
        for y in 0..SIZE {
            for x in 0..SIZE {
                let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                let t = fbm(&layers, fx, fy);
                let mut c = [0.0; 3];
                for k in 0..3 {
                    c[k] = a[k] * (1.0 - t) + b[k] * t;
                }
                let dist = ((fx - 32.0) * nx + (fy - 32.0) * ny - offset).abs();
                let road = clamp01(half_width + 0.5 - dist);
                for k in 0..3 {
                    c[k] = c[k] * (1.0 - road) + (ASPHALT[k] + 0.05 * (t - 0.5)) * road;
                }
                ground.px[y * SIZE + x] = c;
            }
        }

        let mut srng = rng::stream(domain.texture_seed, &[rng::label("snow-mask")]);
        let snow_layers = [
            (ValueNoise::new(12.0, &mut srng), 0.65),
            (ValueNoise::new(3.0, &mut srng), 0.35),
        ];
        let s = domain.snow_cover;
        let snow_alpha = (0..SIZE * SIZE)
            .map(|i| {
                let (x, y) = ((i % SIZE) as f32 + 0.5, (i / SIZE) as f32 + 0.5);
                // Rescaled so s = 0 is bare ground and s = 1 is full cover.
                let m = 0.04 + 0.92 * fbm(&snow_layers, x, y);
                clamp01((s - m) * 12.5 + 0.5) * f32::from(u8::from(s > 0.0))
            })
            .collect();
        Background { ground, snow_alpha }
    }
}

/// A vehicle as a rotated rectangle in continuous pixel coordinates.
#[derive(Clone, Debug)]
pub struct Vehicle {
    pub cx: f32,
    pub cy: f32,
    pub length: f32,
    pub width: f32,
    pub angle: f32,
    pub color: [f32; 3],
}

impl Vehicle {
    fn axes(&self) -> ((f32, f32), (f32, f32)) {
        let (s, c) = self.angle.sin_cos();
        ((c, s), (-s, c))
    }

    /// Exact axis-aligned bounds of the rotated rectangle.
    pub fn bbox(&self) -> GtBox {
        let (s, c) = self.angle.sin_cos();
        let hw = 0.5 * (self.length * c.abs() + self.width * s.abs());
        let hh = 0.5 * (self.length * s.abs() + self.width * c.abs());
        GtBox {
            x1: self.cx - hw,
            y1: self.cy - hh,
            x2: self.cx + hw,
            y2: self.cy + hh,
        }
    }

    /// Position along the length (-0.5..0.5) and across the width, or `None`
    /// outside the body.
    fn local(&self, x: f32, y: f32) -> Option<(f32, f32)> {
        let ((ux, uy), (vx, vy)) = self.axes();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * ux + dy * uy) / self.length;
        let v = (dx * vx + dy * vy) / self.width;
        (u.abs() <= 0.5 && v.abs() <= 0.5).then_some((u, v))
    }
}

fn sample_vehicle(rng: &mut Rng, cell: (usize, usize)) -> Option<Vehicle> {
    for _ in 0..20 {
        let length: f32 = rng.gen_range(5.5..10.0);
        let width: f32 = rng.gen_range(4.0..length.min(6.0));
        let base = if rng.gen_bool(0.5) { 0.0 } else { std::f32::consts::FRAC_PI_2 };
        let angle = base + rng.gen_range(-0.3..0.3);
        let mut v = Vehicle {
            cx: 0.0,
            cy: 0.0,
            length,
            width,
            angle,
            color: [0.0; 3],
        };
        let b = v.bbox();
        let (bw, bh) = (b.x2 - b.x1, b.y2 - b.y1);
        if !(4.0..=10.0).contains(&bw) || !(4.0..=10.0).contains(&bh) {
            continue;
        }
        let (col, row) = cell;
        let lo_x = (col as f32 * CELL).max(bw / 2.0 + 0.5);
        let hi_x = ((col + 1) as f32 * CELL - 0.01).min(SIZE as f32 - bw / 2.0 - 0.5);
        let lo_y = (row as f32 * CELL).max(bh / 2.0 + 0.5);
        let hi_y = ((row + 1) as f32 * CELL - 0.01).min(SIZE as f32 - bh / 2.0 - 0.5);
        if lo_x >= hi_x || lo_y >= hi_y {
            continue;
        }
        v.cx = rng.gen_range(lo_x..hi_x);
        v.cy = rng.gen_range(lo_y..hi_y);
        return Some(v);
    }
    None
}

/// Chooses a colour that stands apart from the bare ground under the vehicle
/// and, where possible, from snow as well.
fn pick_color(rng: &mut Rng, ground: &Canvas, b: &GtBox) -> [f32; 3] {
    let mut acc = 0.0f32;
    let mut n = 0.0f32;
    for y in (b.y1.floor().max(0.0) as usize)..(b.y2.ceil() as usize).min(SIZE) {
        for x in (b.x1.floor().max(0.0) as usize)..(b.x2.ceil() as usize).min(SIZE) {
            acc += intensity(ground.at(x, y));
            n += 1.0;
        }
    }
    let local = acc / n.max(1.0);
    let apart = |c: [f32; 3], from: f32| (intensity(c) - from).abs() >= 0.25;
    let mut candidates: Vec<[f32; 3]> = VEHICLE_COLORS
        .iter()
        .copied()
        .filter(|&c| apart(c, local) && apart(c, intensity(SNOW)))
        .collect();
    if candidates.is_empty() {
        candidates = VEHICLE_COLORS.iter().copied().filter(|&c| apart(c, local)).collect();
    }
    if candidates.is_empty() {
        return if local > 0.5 { VEHICLE_COLORS[2] } else { VEHICLE_COLORS[0] };
    }
    candidates[rng.gen_range(0..candidates.len())]
}

/// Places up to `wanted` vehicles, one per grid cell, pairwise IoU <= 0.1.
/// Returns fewer when placement keeps failing.
pub fn place_vehicles(rng: &mut Rng, ground: &Canvas, wanted: usize) -> Vec<Vehicle> {
    let mut target = wanted.min(GRID * GRID);
    loop {
        for _attempt in 0..100 {
            let mut cells: Vec<(usize, usize)> = (0..GRID * GRID).map(|i| (i % GRID, i / GRID)).collect();
            let mut chosen = Vec::with_capacity(target);
            for _ in 0..target {
                let k = rng.gen_range(0..cells.len());
                chosen.push(cells.swap_remove(k));
            }
            let mut vs: Vec<Vehicle> = Vec::with_capacity(target);
            let mut ok = true;
            for &cell in &chosen {
                match sample_vehicle(rng, cell) {
                    Some(v) if vs.iter().all(|o| iou(&o.bbox(), &v.bbox()) <= 0.1) => vs.push(v),
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                for v in &mut vs {
                    v.color = pick_color(rng, ground, &v.bbox());
                }
                return vs;
            }
        }
        log::warn!("vehicle placement infeasible for {target} vehicles, retrying with fewer");
        target -= 1;
    }
}

const SUB: usize = 3;

/// Renders one frame. `layout_rng` drives placement; `noise_rng` drives
/// per-frame snow on vehicles and sensor noise, so scenes rendered with
/// different snow levels from the same seeds share their layout.
pub fn render(
    domain: &DomainParams,
    bg: &Background,
    vehicles: &[Vehicle],
    noise_rng: &mut Rng,
) -> Canvas {
    let s = domain.snow_cover;
    let mut canvas = bg.ground.clone();

    // Ground snow and speckle.
    for (i, p) in canvas.px.iter_mut().enumerate() {
        let a = bg.snow_alpha[i];
        let jitter = noise_rng.gen_range(-0.03..0.03);
        for k in 0..3 {
            p[k] = p[k] * (1.0 - a) + (SNOW[k] + jitter) * a;
        }
        if noise_rng.gen::<f32>() < 0.04 * s {
            *p = [0.97, 0.97, 0.98];
        }
    }

    for v in vehicles {
        let b = v.bbox();
        let x0 = b.x1.floor().max(0.0) as usize;
        let x1 = (b.x2.ceil() as usize).min(SIZE);
        let y0 = b.y1.floor().max(0.0) as usize;
        let y1 = (b.y2.ceil() as usize).min(SIZE);
        // Snow settles in coherent drifts: a ramp across the body in a random
        // direction, roughened by smooth noise, covered below 0.9 s so the
        // covered fraction grows roughly in proportion to s. Drawn whatever
        // `s` is, so matched scenes share it.
        let drift: f32 = noise_rng.gen_range(0.0..std::f32::consts::TAU);
        let field: Vec<f32> = (0..9).map(|_| noise_rng.gen::<f32>()).collect();
        let glass = [v.color[0] * 0.25, v.color[1] * 0.25, v.color[2] * 0.3 + 0.05];
        for y in y0..y1 {
            for x in x0..x1 {
                let mut acc = [0.0f32; 3];
                let mut hits = 0usize;
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let px = x as f32 + (sx as f32 + 0.5) / SUB as f32;
                        let py = y as f32 + (sy as f32 + 0.5) / SUB as f32;
                        let Some((u, vv)) = v.local(px, py) else {
                            continue;
                        };
                        hits += 1;
                        let windshield = (0.12..0.30).contains(&u) && vv.abs() < 0.42;
                        let edge = (vv.abs() * 2.0).powi(3);
                        let mut c = if windshield { glass } else { v.color };
                        let cover = if s > 0.0 {
                            let h = 0.5 + u * drift.cos() + vv * drift.sin() + 0.3 * (lattice3(&field, u + 0.5, vv + 0.5) - 0.5);
                            clamp01((0.9 * s - h) * 12.5 + 0.5)
                        } else {
                            0.0
                        };
                        // Snow rounds the body off, so covered parts keep only a faint edge.
                        for k in 0..3 {
                            c[k] = c[k] * (1.0 - 0.25 * edge) * (1.0 - cover) + SNOW[k] * (1.0 - 0.1 * edge) * cover;
                        }
                        acc = [acc[0] + c[0], acc[1] + c[1], acc[2] + c[2]];
                    }
                }
                if hits == 0 {
                    continue;
                }
                let n = hits as f32;
                let c = [acc[0] / n, acc[1] / n, acc[2] / n];
                canvas.blend(x, y, c, n / (SUB * SUB) as f32);
            }
        }
    }

    let noise = Normal::new(0.0f32, 0.012).expect("valid sigma");
    let gain = 1.0 + noise_rng.gen_range(-0.03..0.03);
    for p in canvas.px.iter_mut() {
        for ch in p.iter_mut() {
            *ch = *ch * gain + noise.sample(noise_rng);
            *ch = 0.5 + domain.contrast * (*ch - 0.5);
        }
    }
    if domain.blur > 0.0 {
        gaussian_blur(&mut canvas, domain.blur);
    }
    for p in canvas.px.iter_mut() {
        for ch in p.iter_mut() {
            *ch = clamp01(*ch);
        }
    }
    canvas
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(canvas: &mut Canvas, sigma: f32) {
    let kernel = gaussian_kernel(sigma);
    let r = kernel.len() / 2;
    let mut tmp = canvas.px.clone();
    for y in 0..SIZE {
        for x in 0..SIZE {
            let mut acc = [0.0f32; 3];
            for (i, w) in kernel.iter().enumerate() {
                let xx = (x as isize + i as isize - r as isize).clamp(0, SIZE as isize - 1) as usize;
                let p = canvas.px[y * SIZE + xx];
                for k in 0..3 {
                    acc[k] += w * p[k];
                }
            }
            tmp[y * SIZE + x] = acc;
        }
    }
    for y in 0..SIZE {
        for x in 0..SIZE {
            let mut acc = [0.0f32; 3];
            for (i, w) in kernel.iter().enumerate() {
                let yy = (y as isize + i as isize - r as isize).clamp(0, SIZE as isize - 1) as usize;
                let p = tmp[yy * SIZE + x];
                for k in 0..3 {
                    acc[k] += w * p[k];
                }
            }
            canvas.px[y * SIZE + x] = acc;
        }
    }
}

pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-((i * i) as f32) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Gaussian blur of a channel-first `[C, n, n]` buffer, edge-clamped.
pub fn blur_planar(data: &mut [f32], n: usize, sigma: f32) {
    let kernel = gaussian_kernel(sigma);
    let r = kernel.len() as isize / 2;
    let last = n as isize - 1;
    let mut tmp = vec![0.0f32; n * n];
    for plane in data.chunks_exact_mut(n * n) {
        for y in 0..n {
            for x in 0..n {
                tmp[y * n + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w * plane[y * n + (x as isize + i as isize - r).clamp(0, last) as usize])
                    .sum();
            }
        }
        for y in 0..n {
            for x in 0..n {
                plane[y * n + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w * tmp[(y as isize + i as isize - r).clamp(0, last) as usize * n + x])
                    .sum();
            }
        }
    }
}
