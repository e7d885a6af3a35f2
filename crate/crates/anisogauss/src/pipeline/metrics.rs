//! Per-iteration training metrics and their writers: JSON lines,
//! a CSV summary and a plot-ready CSV. Wall time is reported on
//! stderr only so the streams stay byte-reproducible under a seed.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// One training iteration. `psnr` is against held-out views and uses
/// an infinity sentinel serialized as the string "inf".
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub l_render: f64,
    pub l_semantic: f64,
    pub l_mask: f64,
    pub l_sh: f64,
    pub l_reg: f64,
    pub total: f64,
    pub gaussian_count: usize,
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
    pub sh_active_fraction: [f64; 4],
}

fn ser_psnr<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_psnr<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Raw::Str(s) => Err(serde::de::Error::custom(format!("bad psnr sentinel {:?}", s))),
    }
}

const CSV_HEADER: &str = "iteration,l_render,l_semantic,l_mask,l_sh,l_reg,total,gaussian_count,psnr,sh_active_0,sh_active_1,sh_active_2,sh_active_3";

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{:.6}", v)
    }
}

/// Writes metrics.jsonl, metrics.csv and plot.csv into `dir`. An empty
/// record stream still produces the CSV header (and empty JSONL).
pub fn emit_metrics(records: &[MetricsRecord], dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut jsonl = std::fs::File::create(dir.join("metrics.jsonl"))?;
    for r in records {
        writeln!(jsonl, "{}", serde_json::to_string(r).expect("serializable record"))?;
    }
    let mut csv = std::fs::File::create(dir.join("metrics.csv"))?;
    writeln!(csv, "{}", CSV_HEADER)?;
    for r in records {
        writeln!(
            csv,
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.iteration,
            r.l_render,
            r.l_semantic,
            r.l_mask,
            r.l_sh,
            r.l_reg,
            r.total,
            r.gaussian_count,
            fmt_psnr(r.psnr),
            r.sh_active_fraction[0],
            r.sh_active_fraction[1],
            r.sh_active_fraction[2],
            r.sh_active_fraction[3],
        )?;
    }
    let mut plot = std::fs::File::create(dir.join("plot.csv"))?;
    writeln!(plot, "iteration,psnr,gaussian_count,l_render,l_semantic,total")?;
    for r in records {
        writeln!(
            plot,
            "{},{},{},{:.9e},{:.9e},{:.9e}",
            r.iteration,
            fmt_psnr(r.psnr),
            r.gaussian_count,
            r.l_render,
            r.l_semantic,
            r.total
        )?;
    }
    Ok(())
}

/// Reads metrics.jsonl back; used by the summary checks and the
/// round-trip tests.
pub fn read_metrics(path: &Path) -> std::io::Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })
        .collect()
}
