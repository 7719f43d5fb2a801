//! Deterministic synthetic aerial videos of parked and moving vehicles under
//! varying snow, contrast, and blur, with exact box annotations.

mod disk;
pub mod render;
mod split;

use std::ops::RangeInclusive;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::LabeledImage;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use render::{Background, Canvas, SIZE};

pub use disk::{read_corpus, write_corpus, Manifest, ManifestVideo};
pub use split::{leave_one_out, make_split, FrameRef, Protocol, Role, SplitPlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainParams {
    pub snow_cover: f32,
    pub contrast: f32,
    pub blur: f32,
    pub texture_seed: u64,
    pub palette: u8,
}

impl DomainParams {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f32, lo: f32, hi: f32| {
            if (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} {v} outside [{lo}, {hi}]")))
            }
        };
        check("snow_cover", self.snow_cover, 0.0, 1.0)?;
        check("contrast", self.contrast, 0.4, 1.0)?;
        check("blur", self.blur, 0.0, 1.5)
    }
}

/// Axis-aligned box in pixel coordinates of the 64x64 frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl GtBox {
    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f32, f32) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn validate(&self) -> Result<()> {
        let max = SIZE as f32;
        let ok = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.x2 <= max
            && self.y2 <= max
            && self.x2 > self.x1
            && self.y2 > self.y1;
        if ok {
            Ok(())
        } else {
            Err(Error::Dataset(format!("box {self:?} is degenerate or outside the {SIZE}x{SIZE} frame")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Frame {
    /// `[3, 64, 64]`, values in [0, 1].
    pub image: Tensor,
}

#[derive(Clone, Debug)]
pub struct SynthVideo {
    pub video_id: String,
    pub domain: DomainParams,
    pub seed: u64,
    pub frames: Vec<Frame>,
    /// Per-frame boxes; empty lists for an unannotated video.
    pub annotations: Vec<Vec<GtBox>>,
    pub annotated: bool,
}

/// One rendered scene with its ground truth.
pub struct Scene {
    pub image: Tensor,
    pub boxes: Vec<GtBox>,
}

fn to_tensor(c: &Canvas) -> Tensor {
    Tensor::new([3, SIZE, SIZE], c.to_chw()).expect("fixed frame shape")
}

/// Renders a scene whose layout depends only on `layout_seed` and the
/// domain's texture, so two domains differing only in snow, contrast, or
/// blur produce the same vehicles in the same places.
pub fn render_scene(domain: &DomainParams, bg: &Background, n_vehicles: usize, layout_seed: u64) -> Scene {
    let mut layout = rng::stream(layout_seed, &[rng::label("layout")]);
    let mut noise = rng::stream(layout_seed, &[rng::label("noise")]);
    let vehicles = render::place_vehicles(&mut layout, &bg.ground, n_vehicles);
    let canvas = render::render(domain, bg, &vehicles, &mut noise);
    Scene {
        image: to_tensor(&canvas),
        boxes: vehicles.iter().map(render::Vehicle::bbox).collect(),
    }
}

pub fn generate_video(
    video_id: &str,
    domain: &DomainParams,
    n_frames: usize,
    n_vehicles: RangeInclusive<usize>,
    seed: u64,
    annotated: bool,
) -> Result<SynthVideo> {
    domain.validate()?;
    if n_vehicles.is_empty() || *n_vehicles.end() > render::GRID * render::GRID {
        return Err(Error::invalid(format!("vehicle range {n_vehicles:?} not within 0..=16")));
    }
    let bg = Background::new(domain);
    let vid = rng::label(video_id);
    let scenes: Vec<Scene> = (0..n_frames)
        .into_par_iter()
        .map(|k| {
            let frame_seed = rng::derive(seed, &[vid, k as u64]);
            let mut count_rng = rng::stream(frame_seed, &[rng::label("count")]);
            let n = count_rng.gen_range(n_vehicles.clone());
            render_scene(domain, &bg, n, frame_seed)
        })
        .collect();
    let mut frames = Vec::with_capacity(n_frames);
    let mut annotations = Vec::with_capacity(n_frames);
    for s in scenes {
        frames.push(Frame { image: s.image });
        annotations.push(if annotated { s.boxes } else { Vec::new() });
    }
    Ok(SynthVideo {
        video_id: video_id.to_owned(),
        domain: domain.clone(),
        seed,
        frames,
        annotations,
        annotated,
    })
}

/// Mean intensity inside each box minus the mean over a 3-pixel ring around
/// it (ring pixels inside other boxes excluded), averaged in absolute value
/// over all boxes. `None` when there are no boxes.
pub fn visibility_gap(image: &Tensor, boxes: &[GtBox]) -> Option<f32> {
    let inside = |b: &GtBox, x: usize, y: usize| {
        let (cx, cy) = (x as f32 + 0.5, y as f32 + 0.5);
        cx >= b.x1 && cx < b.x2 && cy >= b.y1 && cy < b.y2
    };
    let lum = |x: usize, y: usize| {
        (0..3).map(|c| image.data()[c * SIZE * SIZE + y * SIZE + x]).sum::<f32>() / 3.0
    };
    let mut gaps = Vec::new();
    for b in boxes {
        let ring = GtBox {
            x1: b.x1 - 3.0,
            y1: b.y1 - 3.0,
            x2: b.x2 + 3.0,
            y2: b.y2 + 3.0,
        };
        let (mut vin, mut nin, mut vout, mut nout) = (0.0, 0.0, 0.0, 0.0);
        for y in 0..SIZE {
            for x in 0..SIZE {
                if inside(b, x, y) {
                    vin += lum(x, y);
                    nin += 1.0;
                } else if inside(&ring, x, y) && !boxes.iter().any(|o| inside(o, x, y)) {
                    vout += lum(x, y);
                    nout += 1.0;
                }
            }
        }
        if nin > 0.0 && nout > 0.0 {
            gaps.push((vin / nin - vout / nout).abs());
        }
    }
    (!gaps.is_empty()).then(|| gaps.iter().sum::<f32>() / gaps.len() as f32)
}

/// Train/test snow separation of the generated corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gap {
    #[default]
    Standard,
    Wide,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusOptions {
    pub gap: Gap,
    pub annotated_frames: usize,
    pub pool_frames: usize,
    pub vehicles_min: usize,
    pub vehicles_max: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            gap: Gap::Standard,
            annotated_frames: 200,
            pool_frames: 100,
            vehicles_min: 1,
            vehicles_max: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub seed: u64,
    pub options: CorpusOptions,
    pub annotated: Vec<SynthVideo>,
    /// Split role of each annotated video under the video-level protocol.
    pub roles: Vec<Role>,
    pub unannotated: Vec<SynthVideo>,
}

impl Corpus {
    pub fn test_video(&self) -> usize {
        self.roles.iter().position(|r| *r == Role::Test).expect("corpus has a test video")
    }

    pub fn image(&self, r: FrameRef) -> &Tensor {
        &self.annotated[r.video].frames[r.frame].image
    }

    pub fn boxes(&self, r: FrameRef) -> &[GtBox] {
        &self.annotated[r.video].annotations[r.frame]
    }

    pub fn frame_id(&self, r: FrameRef) -> String {
        format!("{}/{:05}", self.annotated[r.video].video_id, r.frame)
    }
}

fn domain(seed: u64, id: &str, snow: f32, contrast: f32, blur: f32, palette: u8) -> DomainParams {
    DomainParams {
        snow_cover: snow,
        contrast,
        blur,
        texture_seed: rng::derive(seed, &[rng::label("texture"), rng::label(id)]),
        palette,
    }
}

/// Five annotated videos in the roles three-train / one-val / one-test, plus
/// twelve unannotated videos spanning the whole domain range.
pub fn standard_corpus(seed: u64) -> Result<Corpus> {
    corpus_with(seed, &CorpusOptions::default())
}

pub fn corpus_with(seed: u64, opts: &CorpusOptions) -> Result<Corpus> {
    if opts.vehicles_min > opts.vehicles_max {
        return Err(Error::invalid("vehicles_min exceeds vehicles_max"));
    }
    let train_snow: [f32; 3] = match opts.gap {
        Gap::Standard => [0.05, 0.35, 0.55],
        Gap::Wide => [0.0, 0.12, 0.25],
    };
    let test_snow = match opts.gap {
        Gap::Standard => 0.75,
        Gap::Wide => 0.95,
    };
    let specs: [(&str, DomainParams, Role); 5] = [
        ("v1", domain(seed, "v1", train_snow[0], 0.95, 0.3, 0), Role::Train),
        ("v2", domain(seed, "v2", train_snow[1], 0.9, 0.2, 1), Role::Train),
        ("v3", domain(seed, "v3", train_snow[2], 1.0, 0.0, 2), Role::Train),
        ("v4", domain(seed, "v4", 0.1, 0.7, 1.0, 3), Role::Val),
        ("v5", domain(seed, "v5", test_snow, 0.9, 0.2, 0), Role::Test),
    ];
    let vehicles = opts.vehicles_min..=opts.vehicles_max;
    let mut annotated = Vec::new();
    let mut roles = Vec::new();
    for (id, d, role) in specs {
        annotated.push(generate_video(id, &d, opts.annotated_frames, vehicles.clone(), seed, true)?);
        roles.push(role);
    }
    let mut unannotated = Vec::new();
    for i in 0..12u8 {
        let id = format!("u{:02}", i + 1);
        let d = domain(
            seed,
            &id,
            f32::from(i) / 11.0,
            [1.0, 0.85, 0.7, 0.55][usize::from(i % 4)],
            [0.0, 0.5, 1.0, 1.5][usize::from((i / 2) % 4)],
            i % render::PALETTE_COUNT,
        );
        unannotated.push(generate_video(&id, &d, opts.pool_frames, vehicles.clone(), seed, false)?);
    }
    Ok(Corpus {
        seed,
        options: opts.clone(),
        annotated,
        roles,
        unannotated,
    })
}

/// Vehicle-count classification scenes (0, 1, 2+ vehicles) for upstream
/// pretraining. Snow never exceeds 0.6, keeping the fresh-snow test regime out.
pub fn proxy_dataset(n: usize, seed: u64) -> Vec<LabeledImage> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let s = rng::derive(seed, &[rng::label("proxy"), i as u64]);
            let mut r: Rng = rng::stream(s, &[]);
            let d = DomainParams {
                snow_cover: r.gen_range(0.0..=0.6),
                contrast: r.gen_range(0.6..=1.0),
                blur: r.gen_range(0.0..=1.0),
                texture_seed: r.gen(),
                palette: r.gen_range(0..render::PALETTE_COUNT),
            };
            let label = r.gen_range(0..3usize);
            let count = if label == 2 { r.gen_range(2..=4) } else { label };
            let bg = Background::new(&d);
            LabeledImage {
                image: render_scene(&d, &bg, count, s).image,
                label,
            }
        })
        .collect()
}
