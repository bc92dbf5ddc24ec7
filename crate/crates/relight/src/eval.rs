//! Mean PSNR/SSIM over a manifest, optional external LPIPS, and the
//! key=value and JSON report formats.

use std::fmt::Write as _;
use std::path::Path;

use relight_core::metrics::{psnr, ssim};
use relight_core::train::predict;
use relight_core::{MetricReport, ModelBundle, Tensor};
use serde_json::{json, Map, Value};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::image_io;

/// Printed in place of an infinite PSNR.
pub const IDENTICAL: &str = "identical";
const EVAL_BATCH: usize = 8;

/// What produces the images compared against the targets.
pub enum Prediction<'a> {
    Model(&'a ModelBundle<f32>),
    /// The unmodified input image.
    Input,
    /// The target itself.
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub pairs: usize,
    pub metrics: MetricReport,
}

/// Per-pair LPIPS values, one per non-empty, non-`#` line. A line may
/// carry leading tab-separated fields; the value is the last one.
pub fn read_lpips(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let field = line.rsplit('\t').next().unwrap_or(line).trim();
        let v: f64 = field
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: `{field}` is not a number", i + 1)))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::format(path, format!("line {}: LPIPS {v} outside [0, 1]", i + 1)));
        }
        values.push(v);
    }
    if values.len() != expected {
        return Err(Error::format(
            path,
            format!("{} LPIPS values for {expected} pairs", values.len()),
        ));
    }
    Ok(values)
}

/// Scores every pair of `data` at `data.resolution`.
pub fn evaluate(data: &Dataset, prediction: &Prediction, lpips: Option<&[f64]>) -> Result<EvalReport> {
    let n = data.len();
    if let Some(l) = lpips {
        if l.len() != n {
            return Err(Error::usage(format!("{} LPIPS values for {n} pairs", l.len())));
        }
    }
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let outputs: Vec<Tensor<f32>> = match prediction {
            Prediction::Model(bundle) => {
                if bundle.arch().resolution != data.resolution {
                    return Err(Error::usage(format!(
                        "model expects {r}x{r} images, data was loaded at {d}x{d}",
                        r = bundle.arch().resolution,
                        d = data.resolution
                    )));
                }
                let (y, _, _) = predict(bundle, &data.batch(chunk)?.input)?;
                let y = image_io::to_unit(&y);
                (0..chunk.len()).map(|i| y.batch_item(i)).collect()
            }
            Prediction::Input => chunk.iter().map(|&i| data.input(i).clone()).collect(),
            Prediction::Target => chunk.iter().map(|&i| data.target(i).clone()).collect(),
        };
        for (&i, out) in chunk.iter().zip(&outputs) {
            psnr_sum += psnr(out, data.target(i))?;
            ssim_sum += ssim(out, data.target(i))?;
        }
    }
    let lpips_mean = lpips.map(|l| l.iter().sum::<f64>() / n as f64);
    Ok(EvalReport {
        pairs: n,
        metrics: MetricReport::new(psnr_sum / n as f64, ssim_sum / n as f64, lpips_mean)?,
    })
}

fn psnr_text(v: f64) -> String {
    if v == f64::INFINITY {
        IDENTICAL.to_string()
    } else {
        v.to_string()
    }
}

impl EvalReport {
    pub fn to_kv(&self) -> String {
        let m = &self.metrics;
        let mut s = format!("pairs={}\npsnr={}\nssim={}\n", self.pairs, psnr_text(m.psnr), m.ssim);
        if let (Some(l), Some(p)) = (m.lpips, m.mps) {
            let _ = write!(s, "lpips={l}\nmps={p}\n");
        }
        s
    }

    pub fn to_json(&self) -> String {
        let m = &self.metrics;
        let mut obj = Map::new();
        obj.insert("pairs".into(), json!(self.pairs));
        let p = if m.psnr == f64::INFINITY { json!(IDENTICAL) } else { json!(m.psnr) };
        obj.insert("psnr".into(), p);
        obj.insert("ssim".into(), json!(m.ssim));
        if let (Some(l), Some(p)) = (m.lpips, m.mps) {
            obj.insert("lpips".into(), json!(l));
            obj.insert("mps".into(), json!(p));
        }
        Value::Object(obj).to_string()
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let v: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let num = |k: &str| v.get(k).and_then(Value::as_f64);
        let pairs = v.get("pairs").and_then(Value::as_u64).ok_or("missing `pairs`")? as usize;
        let psnr = match v.get("psnr") {
            Some(Value::String(s)) if s == IDENTICAL => f64::INFINITY,
            Some(p) => p.as_f64().ok_or("`psnr` is not a number")?,
            None => return Err("missing `psnr`".into()),
        };
        let ssim = num("ssim").ok_or("missing `ssim`")?;
        let metrics = MetricReport {
            psnr,
            ssim,
            lpips: num("lpips"),
            mps: num("mps"),
        };
        if metrics.lpips.is_some() != metrics.mps.is_some() {
            return Err("`lpips` and `mps` must appear together".into());
        }
        Ok(EvalReport { pairs, metrics })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_with_sentinel() {
        let r = EvalReport {
            pairs: 3,
            metrics: MetricReport::new(f64::INFINITY, 1.0, Some(0.3794)).unwrap(),
        };
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        assert!(r.to_kv().contains("psnr=identical\n"));
        let r = EvalReport {
            pairs: 3,
            metrics: MetricReport::new(21.123456789, 0.61, None).unwrap(),
        };
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        assert!(!r.to_kv().contains("mps"));
    }
}
