//! Trains the four structural variants under one budget and tabulates
//! their validation metrics in table order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use relight_core::Variant;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, Prediction};
use crate::training::{self, RunOptions};

pub const TABLE_FILE: &str = "table.tsv";

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub generator_params: usize,
    pub report: EvalReport,
}

/// Output subdirectory of one variant.
pub fn variant_dir(v: Variant) -> &'static str {
    match v {
        Variant::NoCalNoMs => "no_cal_no_ms",
        Variant::NoCal => "no_cal",
        Variant::NoMs => "no_ms",
        Variant::Full => "full",
    }
}

/// LPIPS values for all variants: lines `<variant>\t<value>`, where the
/// variant is spelled as for `--ablate` (`none` or `full` for the full
/// model), each variant listing one value per validation pair in order.
pub fn read_lpips_by_variant(path: &Path, pairs: usize) -> Result<HashMap<Variant, Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map: HashMap<Variant, Vec<f64>> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |d: String| Error::format(path, format!("line {}: {d}", i + 1));
        let (name, value) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected `<variant>\\t<value>`".into()))?;
        let v = Variant::parse(name.trim()).ok_or_else(|| bad(format!("unknown variant `{name}`")))?;
        let x: f64 = value.trim().parse().map_err(|_| bad(format!("`{value}` is not a number")))?;
        if !(0.0..=1.0).contains(&x) {
            return Err(bad(format!("LPIPS {x} outside [0, 1]")));
        }
        map.entry(v).or_default().push(x);
    }
    for v in Variant::ALL {
        let n = map.get(&v).map_or(0, Vec::len);
        if n != pairs {
            return Err(Error::format(path, format!("{n} LPIPS values for `{}`, expected {pairs}", v.flag())));
        }
    }
    Ok(map)
}

pub fn ablate(
    data: &Path,
    val: &Path,
    config: &TrainConfig,
    out: &Path,
    no_adv: bool,
    lpips: Option<&Path>,
    progress: &mut dyn Write,
) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let val_set = Dataset::load(val, config.arch.resolution, 0)?;
    let lpips = lpips.map(|p| read_lpips_by_variant(p, val_set.len())).transpose()?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let opts = RunOptions {
            no_adv,
            ablate: Some(variant),
            resume: None,
        };
        let run = training::train(data, config, &out.join(variant_dir(variant)), &opts, progress)?;
        let parts = Checkpoint::load(&run.final_checkpoint)?.into_parts(&run.final_checkpoint)?;
        let values = lpips.as_ref().map(|m| m[&variant].as_slice());
        let report = eval::evaluate(&val_set, &Prediction::Model(&parts.bundle), values)?;
        rows.push(AblationRow {
            variant,
            generator_params: run.generator_params,
            report,
        });
    }
    let table = format_table(&rows, lpips.is_some());
    let path = out.join(TABLE_FILE);
    std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Tab-separated table with a header row; LPIPS only when supplied.
pub fn format_table(rows: &[AblationRow], with_lpips: bool) -> String {
    let mut s = String::from("Method\tPSNR\tSSIM");
    if with_lpips {
        s.push_str("\tLPIPS");
    }
    s.push('\n');
    for r in rows {
        let m = &r.report.metrics;
        let _ = write!(s, "{}\t{:.4}\t{:.4}", r.variant.label(), m.psnr, m.ssim);
        if with_lpips {
            let _ = write!(s, "\t{:.4}", m.lpips.unwrap_or(f64::NAN));
        }
        s.push('\n');
    }
    s
}
