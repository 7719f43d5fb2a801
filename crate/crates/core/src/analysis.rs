//! Gate-analysis instruments: per-layer tanh(W) export, the RMS deviation
//! of gates from zero, cross-model variability of min-max scaled gates, and
//! Pearson correlation between models.

use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::fusion::Detector;
use crate::io::{fmt_f, write_csv};
use crate::tensor::Checkpoint;

#[derive(Clone, Debug, PartialEq)]
pub struct GatingRecord {
    pub model_id: String,
    pub layer_index: usize,
    /// tanh(W) per channel.
    pub values: Vec<f64>,
}

fn gate_layer(name: &str) -> Option<usize> {
    name.strip_prefix("fusion.site")?.strip_suffix(".w")?.parse().ok()
}

/// One record per `fusion.site{k}.w` parameter, ordered by layer.
pub fn export_gates(model_id: &str, ckpt: &Checkpoint) -> Result<Vec<GatingRecord>> {
    let mut out: Vec<GatingRecord> = ckpt
        .iter()
        .filter_map(|(name, t)| {
            gate_layer(name).map(|layer_index| GatingRecord {
                model_id: model_id.to_string(),
                layer_index,
                values: t.data().iter().map(|&w| f64::from(w).tanh()).collect(),
            })
        })
        .collect();
    if out.is_empty() {
        return Err(Error::invalid(format!(
            "model `{model_id}` has no gate parameters (needs weights_gating or self_weighted fusion)"
        )));
    }
    out.sort_by_key(|r| r.layer_index);
    Ok(out)
}

pub fn export_detector_gates(model_id: &str, det: &Detector) -> Result<Vec<GatingRecord>> {
    export_gates(model_id, &det.checkpoint())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Deviation {
    pub d: f64,
    pub min: f64,
    pub max: f64,
    pub sum: f64,
}

/// `d = sqrt(mean(tanh(w)^2))` plus the channel min, max and sum.
pub fn deviation(record: &GatingRecord) -> Result<Deviation> {
    let v = &record.values;
    if v.is_empty() {
        return Err(Error::invalid("deviation of an empty gating record"));
    }
    let n = v.len() as f64;
    Ok(Deviation {
        d: (v.iter().map(|x| x * x).sum::<f64>() / n).sqrt(),
        min: v.iter().copied().fold(f64::INFINITY, f64::min),
        max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        sum: v.iter().sum(),
    })
}

/// Scales to [0, 1]; a constant vector maps to all 0.5.
pub fn min_max_scale(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        warn!("min-max scaling a constant gate vector; mapping to 0.5");
        return vec![0.5; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossModelStd {
    pub layer_index: usize,
    /// Population std across models, per channel.
    pub per_channel: Vec<f64>,
    pub mean: f64,
}

/// Same layer from M >= 2 models: min-max scale each model's vector, then
/// take the population std across models for every channel.
pub fn cross_model_std(records: &[&GatingRecord]) -> Result<CrossModelStd> {
    if records.len() < 2 {
        return Err(Error::invalid("cross-model std needs at least two models"));
    }
    let c = records[0].values.len();
    if c == 0 || records.iter().any(|r| r.values.len() != c) {
        return Err(Error::invalid("cross-model std needs equal, nonzero channel counts"));
    }
    let scaled: Vec<Vec<f64>> = records.iter().map(|r| min_max_scale(&r.values)).collect();
    let m = records.len() as f64;
    let per_channel: Vec<f64> = (0..c)
        .map(|k| {
            let mean = scaled.iter().map(|s| s[k]).sum::<f64>() / m;
            (scaled.iter().map(|s| (s[k] - mean).powi(2)).sum::<f64>() / m).sqrt()
        })
        .collect();
    Ok(CrossModelStd {
        layer_index: records[0].layer_index,
        mean: per_channel.iter().sum::<f64>() / c as f64,
        per_channel,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correlation {
    /// `None` when either vector is constant.
    pub r: Option<f64>,
    pub scatter: Vec<(f64, f64)>,
}

pub fn pearson(a: &GatingRecord, b: &GatingRecord) -> Result<Correlation> {
    pearson_values(&a.values, &b.values)
}

pub fn pearson_values(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(format!(
            "pearson needs equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let r = (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0));
    Ok(Correlation {
        r,
        scatter: a.iter().copied().zip(b.iter().copied()).collect(),
    })
}

/// Groups records of several models by layer; each layer must be present in
/// every model.
pub fn by_layer(models: &[Vec<GatingRecord>]) -> Result<Vec<Vec<&GatingRecord>>> {
    let first = models.first().ok_or_else(|| Error::invalid("no models to compare"))?;
    first
        .iter()
        .map(|r| {
            models
                .iter()
                .map(|m| {
                    m.iter().find(|x| x.layer_index == r.layer_index).ok_or_else(|| {
                        Error::invalid(format!("layer {} missing from some model", r.layer_index))
                    })
                })
                .collect()
        })
        .collect()
}

pub fn write_gates(path: &Path, records: &[GatingRecord]) -> Result<()> {
    let rows = records.iter().flat_map(|r| {
        r.values.iter().enumerate().map(move |(c, v)| {
            vec![r.model_id.clone(), r.layer_index.to_string(), c.to_string(), fmt_f(*v)]
        })
    });
    write_csv(path, &["model_id", "layer", "channel", "tanh_w"], rows)
}

pub fn write_deviation(path: &Path, records: &[GatingRecord]) -> Result<()> {
    let rows = records
        .iter()
        .map(|r| {
            let d = deviation(r)?;
            Ok(vec![
                r.model_id.clone(),
                r.layer_index.to_string(),
                fmt_f(d.d),
                fmt_f(d.min),
                fmt_f(d.max),
                fmt_f(d.sum),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    write_csv(path, &["model_id", "layer", "d", "min", "max", "sum"], rows)
}

pub fn write_xstd(path: &Path, layers: &[CrossModelStd]) -> Result<()> {
    let rows = layers.iter().flat_map(|l| {
        l.per_channel
            .iter()
            .enumerate()
            .map(move |(c, s)| vec![l.layer_index.to_string(), c.to_string(), fmt_f(*s)])
    });
    write_csv(path, &["layer", "channel", "std"], rows)
}

/// One row per (layer, model pair).
pub fn write_pearson(path: &Path, rows: &[(usize, Correlation)]) -> Result<()> {
    let rows = rows.iter().map(|(layer, c)| {
        vec![
            layer.to_string(),
            c.r.map(fmt_f).unwrap_or_else(|| "NA".into()),
            c.r.is_some().to_string(),
        ]
    });
    write_csv(path, &["layer", "r", "defined"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn rec(values: &[f64]) -> GatingRecord {
        GatingRecord {
            model_id: "m".into(),
            layer_index: 0,
            values: values.to_vec(),
        }
    }

    #[test]
    fn export_reads_tanh_of_gate_params_in_layer_order() {
        let mut ck = Checkpoint::new();
        ck.insert("fusion.site3.w", Tensor::new([2], vec![1.0, -1.0]).unwrap());
        ck.insert("fusion.site0.w", Tensor::zeros([2]));
        ck.insert("fusion.site0.fc1.weight", Tensor::zeros([1, 2]));
        let recs = export_gates("a", &ck).unwrap();
        assert_eq!(recs.iter().map(|r| r.layer_index).collect::<Vec<_>>(), [0, 3]);
        assert_eq!(recs[0].values, [0.0, 0.0]);
        assert!((deviation(&recs[1]).unwrap().d - 0.761594).abs() < 1e-6);
        assert!(export_gates("b", &Checkpoint::new()).is_err());
    }

    #[test]
    fn deviation_fixtures() {
        assert_eq!(deviation(&rec(&[0.0; 4])).unwrap().d, 0.0);
        let d = deviation(&rec(&[0.3, -0.3])).unwrap();
        assert!((d.d - 0.3).abs() < 1e-12 && d.sum.abs() < 1e-12);
        assert!(deviation(&rec(&[])).is_err());
    }

    #[test]
    fn reversed_vectors_have_half_std() {
        let (a, b) = (rec(&[0.0, 1.0]), rec(&[1.0, 0.0]));
        let x = cross_model_std(&[&a, &b]).unwrap();
        assert_eq!(x.per_channel, [0.5, 0.5]);
        let same = cross_model_std(&[&a, &a]).unwrap();
        assert!(same.per_channel.iter().all(|&s| s == 0.0));
        assert!(cross_model_std(&[&a, &rec(&[1.0])]).is_err());
        assert_eq!(min_max_scale(&[0.2, 0.2]), [0.5, 0.5]);
    }

    #[test]
    fn pearson_fixtures() {
        let a = rec(&[1.0, 2.0, 3.0, 4.0]);
        let neg = rec(&[-1.0, -2.0, -3.0, -4.0]);
        assert!((pearson(&a, &a).unwrap().r.unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &neg).unwrap().r.unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&a, &rec(&[1.0; 4])).unwrap().r, None);
        assert!(pearson(&a, &rec(&[1.0])).is_err());
    }
}
