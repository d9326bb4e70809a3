//! PSNR/SSIM on the unit range, per-slice evaluation and report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Domain, Image, Volume};

/// Peak-to-peak range of the unit domain.
pub const DATA_RANGE: f64 = 2.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} elements", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty input".into()));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_same_len(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(R^2 / mse)`; zero error gives `f64::INFINITY`.
pub fn psnr_from_mse(mse: f64, range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (range * range / mse).log10()
    }
}

pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, DATA_RANGE))
}

pub fn psnr_volume(a: &Volume, b: &Volume) -> Result<f64> {
    check_pair(a, b)?;
    psnr(a.voxels(), b.voxels())
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of an `h x w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(t, wt)| wt * img[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(t, wt)| wt * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully-contained 11x11 Gaussian windows.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::Shape(format!("{}x{} vs {}x{}", a.h, a.w, b.h, b.w)));
    }
    if a.h < SSIM_WINDOW || a.w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.h, a.w
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let f = |v: &[f64]| filter_valid(v, a.h, a.w, &taps);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let (mu_a, mu_b) = (f(&a.data), f(&b.data));
    let e_aa = f(&prod(&a.data, &a.data));
    let e_bb = f(&prod(&b.data, &b.data));
    let e_ab = f(&prod(&a.data, &b.data));
    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

fn check_pair(pred: &Volume, truth: &Volume) -> Result<()> {
    if pred.dims() != truth.dims() {
        return Err(Error::Dims(format!(
            "prediction {:?} vs truth {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    for v in [pred, truth] {
        if v.domain() != Domain::Unit {
            return Err(Error::WrongDomain {
                expected: Domain::Unit,
                found: v.domain(),
            });
        }
    }
    Ok(())
}

/// How the volume-level row is formed from slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Mean of per-slice values.
    #[default]
    SliceMean,
    /// PSNR of the MSE pooled over the whole volume (SSIM stays a slice mean).
    PooledMse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub subject_id: String,
    /// `-1` marks the volume aggregate.
    pub slice_index: i64,
    pub method: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricRow {
    pub fn is_aggregate(&self) -> bool {
        self.slice_index < 0
    }
}

/// Mean of finite values; infinite if every value is infinite.
pub fn finite_mean(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        if values.is_empty() {
            f64::NAN
        } else {
            f64::INFINITY
        }
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

/// One row per depth slice plus a trailing aggregate row.
pub fn evaluate_volume(
    pred: &Volume,
    truth: &Volume,
    subject_id: &str,
    method: &str,
    aggregation: Aggregation,
) -> Result<Vec<MetricRow>> {
    check_pair(pred, truth)?;
    let d = pred.dims().d;
    let mut rows = Vec::with_capacity(d + 1);
    for z in 0..d {
        let (p, t) = (pred.slice(z), truth.slice(z));
        rows.push(MetricRow {
            subject_id: subject_id.to_string(),
            slice_index: z as i64,
            method: method.to_string(),
            psnr_db: psnr(&p.data, &t.data)?,
            ssim: ssim(&p, &t)?,
        });
    }
    let psnrs: Vec<f64> = rows.iter().map(|r| r.psnr_db).collect();
    let ssims: Vec<f64> = rows.iter().map(|r| r.ssim).collect();
    let psnr_db = match aggregation {
        Aggregation::SliceMean => finite_mean(&psnrs),
        Aggregation::PooledMse => psnr_volume(pred, truth)?,
    };
    rows.push(MetricRow {
        subject_id: subject_id.to_string(),
        slice_index: -1,
        method: method.to_string(),
        psnr_db,
        ssim: ssims.iter().sum::<f64>() / d as f64,
    });
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: String,
    pub subjects: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub aggregation: Aggregation,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn new(aggregation: Aggregation) -> Self {
        MetricReport {
            aggregation,
            rows: Vec::new(),
        }
    }

    /// Per-subject aggregate rows.
    pub fn subject_rows(&self) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(|r| r.is_aggregate())
    }

    /// Means of the per-subject aggregates, by method (sorted by name).
    pub fn method_aggregates(&self) -> Vec<MethodAggregate> {
        let mut groups: BTreeMap<&str, Vec<&MetricRow>> = BTreeMap::new();
        for r in self.subject_rows() {
            groups.entry(r.method.as_str()).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|(method, rs)| MethodAggregate {
                method: method.to_string(),
                subjects: rs.len(),
                psnr_db: finite_mean(&rs.iter().map(|r| r.psnr_db).collect::<Vec<_>>()),
                ssim: rs.iter().map(|r| r.ssim).sum::<f64>() / rs.len() as f64,
            })
            .collect()
    }

    pub fn method(&self, method: &str) -> Option<MethodAggregate> {
        self.method_aggregates().into_iter().find(|a| a.method == method)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

fn fmt_real(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

fn parse_real(s: &str) -> Result<f64> {
    if s == "inf" {
        return Ok(f64::INFINITY);
    }
    s.parse()
        .map_err(|_| Error::Invalid(format!("bad number in report: {s:?}")))
}

const CSV_HEADER: [&str; 6] = ["subject_id", "slice_index", "method", "psnr_db", "ssim", "lpips"];

pub fn report_to_csv(report: &MetricReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Invalid(e.to_string());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in &report.rows {
        w.write_record([
            r.subject_id.clone(),
            r.slice_index.to_string(),
            r.method.clone(),
            fmt_real(r.psnr_db),
            fmt_real(r.ssim),
            String::new(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
}

pub fn report_from_csv(text: &str, aggregation: Aggregation) -> Result<MetricReport> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let csv_err = |e: csv::Error| Error::Invalid(e.to_string());
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().take(5).ne(CSV_HEADER.iter().take(5).copied()) {
        return Err(Error::Invalid(format!("unexpected report header {header:?}")));
    }
    let mut report = MetricReport::new(aggregation);
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        report.rows.push(MetricRow {
            subject_id: rec[0].to_string(),
            slice_index: rec[1]
                .parse()
                .map_err(|_| Error::Invalid(format!("bad slice index {:?}", &rec[1])))?,
            method: rec[2].to_string(),
            psnr_db: parse_real(&rec[3])?,
            ssim: parse_real(&rec[4])?,
        });
    }
    Ok(report)
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    subject_id: String,
    slice_index: i64,
    method: String,
    psnr_db: Option<f64>,
    psnr_infinite: bool,
    ssim: f64,
    lpips: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonAggregate {
    method: String,
    subjects: usize,
    psnr_db: Option<f64>,
    psnr_infinite: bool,
    ssim: f64,
}

#[derive(Serialize, Deserialize)]
struct JsonReport {
    aggregation: Aggregation,
    rows: Vec<JsonRow>,
    aggregates: Vec<JsonAggregate>,
}

fn split_inf(v: f64) -> (Option<f64>, bool) {
    if v == f64::INFINITY {
        (None, true)
    } else {
        (Some(v), false)
    }
}

pub fn report_to_json(report: &MetricReport) -> Result<String> {
    let rows = report
        .rows
        .iter()
        .map(|r| {
            let (psnr_db, psnr_infinite) = split_inf(r.psnr_db);
            JsonRow {
                subject_id: r.subject_id.clone(),
                slice_index: r.slice_index,
                method: r.method.clone(),
                psnr_db,
                psnr_infinite,
                ssim: r.ssim,
                lpips: None,
            }
        })
        .collect();
    let aggregates = report
        .method_aggregates()
        .into_iter()
        .map(|a| {
            let (psnr_db, psnr_infinite) = split_inf(a.psnr_db);
            JsonAggregate {
                method: a.method,
                subjects: a.subjects,
                psnr_db,
                psnr_infinite,
                ssim: a.ssim,
            }
        })
        .collect();
    let doc = JsonReport {
        aggregation: report.aggregation,
        rows,
        aggregates,
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Invalid(e.to_string()))
}

pub fn report_from_json(text: &str) -> Result<MetricReport> {
    let doc: JsonReport = serde_json::from_str(text).map_err(|e| Error::Invalid(e.to_string()))?;
    let rows = doc
        .rows
        .into_iter()
        .map(|r| {
            let psnr_db = match (r.psnr_infinite, r.psnr_db) {
                (true, _) => f64::INFINITY,
                (false, Some(v)) => v,
                (false, None) => return Err(Error::Invalid("finite PSNR missing".into())),
            };
            Ok(MetricRow {
                subject_id: r.subject_id,
                slice_index: r.slice_index,
                method: r.method,
                psnr_db,
                ssim: r.ssim,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricReport {
        aggregation: doc.aggregation,
        rows,
    })
}

pub fn write_report(report: &MetricReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report_to_csv(report)?,
        ReportFormat::Json => report_to_json(report)?,
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path, format: ReportFormat, aggregation: Aggregation) -> Result<MetricReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        ReportFormat::Csv => report_from_csv(&text, aggregation),
        ReportFormat::Json => report_from_json(&text),
    }
}

/// Per-slice PSNR of one subject, one column per method (sorted by name).
pub fn slice_curve_csv(report: &MetricReport, subject_id: &str) -> String {
    let mut table: BTreeMap<&str, BTreeMap<i64, f64>> = BTreeMap::new();
    for r in report
        .rows
        .iter()
        .filter(|r| r.subject_id == subject_id && !r.is_aggregate())
    {
        table
            .entry(r.method.as_str())
            .or_default()
            .insert(r.slice_index, r.psnr_db);
    }
    let methods: Vec<&str> = table.keys().copied().collect();
    let mut slices: Vec<i64> = table.values().flat_map(|m| m.keys().copied()).collect();
    slices.sort_unstable();
    slices.dedup();
    let mut out = String::from("slice_index");
    for m in &methods {
        out.push(',');
        out.push_str(m);
    }
    out.push('\n');
    for z in slices {
        out.push_str(&z.to_string());
        for m in &methods {
            out.push(',');
            if let Some(v) = table[m].get(&z) {
                out.push_str(&fmt_real(*v));
            }
        }
        out.push('\n');
    }
    out
}

/// 8-bit absolute-error map of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<u8>,
    pub max_error: f64,
}

impl Heatmap {
    /// Plain-text PGM (`P2`).
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.w, self.h);
        for row in self.pixels.chunks(self.w) {
            let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// `|pred - truth|` on slice `z`, scaled so the largest error maps to 255.
pub fn error_heatmap(pred: &Volume, truth: &Volume, z: usize) -> Result<Heatmap> {
    check_pair(pred, truth)?;
    let d = pred.dims();
    if z >= d.d {
        return Err(Error::Dims(format!("slice {z} out of range for depth {}", d.d)));
    }
    let (p, t) = (pred.slice(z), truth.slice(z));
    let err: Vec<f64> = p.data.iter().zip(&t.data).map(|(a, b)| (a - b).abs()).collect();
    let max_error = err.iter().copied().fold(0.0, f64::max);
    let pixels = err
        .iter()
        .map(|e| {
            if max_error > 0.0 {
                (255.0 * e / max_error).round() as u8
            } else {
                0
            }
        })
        .collect();
    Ok(Heatmap {
        h: d.h,
        w: d.w,
        pixels,
        max_error,
    })
}
