//! On-disk corpus: `<dir>/<video_id>/frame_{k:05}.ppm` (binary 8-bit PPM),
//! `<dir>/<video_id>/annotations.csv`, and `<dir>/manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::render::SIZE;
use super::{Corpus, CorpusOptions, DomainParams, Frame, GtBox, Role, SynthVideo};
use crate::error::{Error, Result};
use crate::io::{csv_err, write_atomic};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestVideo {
    pub video_id: String,
    pub domain: DomainParams,
    pub annotated: bool,
    pub seed: u64,
    pub frames: usize,
    /// Split role under the video-level protocol (annotated videos only).
    pub role: Option<Role>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub corpus_seed: u64,
    pub options: CorpusOptions,
    pub videos: Vec<ManifestVideo>,
}

fn ppm_bytes(image: &Tensor) -> Vec<u8> {
    let mut out = format!("P6\n{SIZE} {SIZE}\n255\n").into_bytes();
    let plane = SIZE * SIZE;
    for i in 0..plane {
        for c in 0..3 {
            out.push((image.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

fn parse_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |why: &str| Error::Dataset(format!("{}: {why}", path.display()));
    let header = format!("P6\n{SIZE} {SIZE}\n255\n");
    let body = bytes
        .strip_prefix(header.as_bytes())
        .ok_or_else(|| bad("expected a binary 64x64 8-bit PPM"))?;
    let plane = SIZE * SIZE;
    if body.len() != 3 * plane {
        return Err(bad("pixel data has the wrong length"));
    }
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in body.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::new([3, SIZE, SIZE], data)
}

fn write_video(dir: &Path, v: &SynthVideo) -> Result<()> {
    let vdir = dir.join(&v.video_id);
    for (k, f) in v.frames.iter().enumerate() {
        write_atomic(&vdir.join(format!("frame_{k:05}.ppm")), &ppm_bytes(&f.image))?;
    }
    if v.annotated {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["frame_id", "x1", "y1", "x2", "y2"]).map_err(csv_err)?;
        for (k, boxes) in v.annotations.iter().enumerate() {
            for b in boxes {
                w.write_record([
                    k.to_string(),
                    format!("{:.4}", b.x1),
                    format!("{:.4}", b.y1),
                    format!("{:.4}", b.x2),
                    format!("{:.4}", b.y2),
                ])
                .map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?;
        write_atomic(&vdir.join("annotations.csv"), &bytes)?;
    }
    Ok(())
}

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    let mut videos = Vec::new();
    for (i, v) in corpus.annotated.iter().enumerate() {
        write_video(dir, v)?;
        videos.push(entry(v, Some(corpus.roles[i])));
    }
    for v in &corpus.unannotated {
        write_video(dir, v)?;
        videos.push(entry(v, None));
    }
    let manifest = Manifest {
        corpus_seed: corpus.seed,
        options: corpus.options.clone(),
        videos,
    };
    write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

fn entry(v: &SynthVideo, role: Option<Role>) -> ManifestVideo {
    ManifestVideo {
        video_id: v.video_id.clone(),
        domain: v.domain.clone(),
        annotated: v.annotated,
        seed: v.seed,
        frames: v.frames.len(),
        role,
    }
}

fn read_file(path: &Path, hint: &str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile {
            path: path.to_path_buf(),
            hint: hint.into(),
        },
        _ => Error::Io(e),
    })
}

fn read_annotations(path: &Path, frames: usize) -> Result<Vec<Vec<GtBox>>> {
    let bytes = read_file(path, "annotated video without annotations.csv")?;
    let mut out = vec![Vec::new(); frames];
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| Error::Dataset(format!("{}: short row", path.display())))
        };
        let num = |i: usize| -> Result<f32> {
            field(i)?
                .parse()
                .map_err(|_| Error::Dataset(format!("{}: bad number `{}`", path.display(), rec.get(i).unwrap_or(""))))
        };
        let k: usize = field(0)?
            .parse()
            .map_err(|_| Error::Dataset(format!("{}: bad frame id", path.display())))?;
        let b = GtBox {
            x1: num(1)?,
            y1: num(2)?,
            x2: num(3)?,
            y2: num(4)?,
        };
        b.validate()?;
        out.get_mut(k)
            .ok_or_else(|| Error::Dataset(format!("{}: frame {k} out of range", path.display())))?
            .push(b);
    }
    Ok(out)
}

/// Loads a corpus written by [`write_corpus`]. Pixels come back quantized
/// to 8 bits; boxes to four decimals.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: Manifest = serde_json::from_slice(&read_file(
        &dir.join("manifest.json"),
        "generate a corpus with `sideload dataset gen`",
    )?)?;
    let mut corpus = Corpus {
        seed: manifest.corpus_seed,
        options: manifest.options,
        annotated: Vec::new(),
        roles: Vec::new(),
        unannotated: Vec::new(),
    };
    for mv in manifest.videos {
        mv.domain.validate()?;
        let vdir = dir.join(&mv.video_id);
        let frames = (0..mv.frames)
            .map(|k| {
                let p = vdir.join(format!("frame_{k:05}.ppm"));
                Ok(Frame {
                    image: parse_ppm(&read_file(&p, "frame listed in manifest")?, &p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let annotations = if mv.annotated {
            read_annotations(&vdir.join("annotations.csv"), mv.frames)?
        } else {
            vec![Vec::new(); mv.frames]
        };
        let video = SynthVideo {
            video_id: mv.video_id,
            domain: mv.domain,
            seed: mv.seed,
            frames,
            annotations,
            annotated: mv.annotated,
        };
        if mv.annotated {
            corpus.roles.push(
                mv.role
                    .ok_or_else(|| Error::Dataset(format!("annotated video {} has no role", video.video_id)))?,
            );
            corpus.annotated.push(video);
        } else {
            corpus.unannotated.push(video);
        }
    }
    if corpus.roles.iter().filter(|r| **r == Role::Test).count() != 1 {
        return Err(Error::Dataset("corpus must have exactly one test video".into()));
    }
    Ok(corpus)
}
