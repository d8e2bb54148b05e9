use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gray::GrayImage;
use super::matching::{dense_match, local_distortion, local_distortion_masked};
use super::ssim::{black_region_mask, msssim_masked, msssim_pair, protocol_resize};
use super::text::{cer, edit_distance};
use super::MetricsError;
use crate::flow::ValidityMask;
use crate::image::ImageRaster;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub reference: String,
    pub hypothesis: String,
}

#[derive(Clone, Debug)]
pub struct EvalPair {
    pub id: String,
    pub rectified: ImageRaster,
    pub ground_truth: ImageRaster,
    /// Validity of the rectified pixels, if the rectifier reported it.
    pub validity: Option<ValidityMask>,
    pub text: Option<TextPair>,
}

/// One CSV row. Metrics that are undefined for the pair (no matchable
/// pixels, no text) are left empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub mssim: f64,
    pub mssim_m: f64,
    pub ld: Option<f64>,
    pub ld_m: Option<f64>,
    pub ed: Option<usize>,
    pub cer: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub mssim: Option<f64>,
    pub mssim_m: Option<f64>,
    pub ld: Option<f64>,
    pub ld_m: Option<f64>,
    pub ed: Option<f64>,
    pub cer: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub pairs: usize,
    pub mssim: usize,
    pub mssim_m: usize,
    pub ld: usize,
    pub ld_m: usize,
    pub ed: usize,
    pub cer: usize,
    /// Inputs skipped before evaluation (e.g. missing ground truth).
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub means: MetricMeans,
    pub counts: MetricCounts,
}

pub fn evaluate_pair(pair: &EvalPair) -> Result<MetricRow, MetricsError> {
    let rect = &pair.rectified;
    let (h, w) = (rect.height(), rect.width());
    let mask = black_region_mask(rect, pair.validity.as_ref())?;
    let mssim = msssim_pair(rect, &pair.ground_truth)?;
    let mssim_m = msssim_masked(rect, &pair.ground_truth, &mask)?;

    let rect_p = protocol_resize(rect);
    let gt_p = protocol_resize(&pair.ground_truth.resize(h, w));
    let field = dense_match(&GrayImage::from_raster(&gt_p), &GrayImage::from_raster(&rect_p))?;
    let mask_p = mask.resize_nearest(rect_p.height(), rect_p.width());
    let ld = optional(local_distortion(&field))?;
    let ld_m = optional(local_distortion_masked(&field, &mask_p))?;

    let (ed, cer) = match &pair.text {
        Some(t) => (
            Some(edit_distance(&t.reference, &t.hypothesis).total),
            optional_text(cer(&t.reference, &t.hypothesis))?,
        ),
        None => (None, None),
    };
    Ok(MetricRow {
        id: pair.id.clone(),
        mssim,
        mssim_m,
        ld,
        ld_m,
        ed,
        cer,
    })
}

fn optional(r: Result<f64, MetricsError>) -> Result<Option<f64>, MetricsError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricsError::NoValidMatches) => Ok(None),
        Err(e) => Err(e),
    }
}

fn optional_text(r: Result<f64, MetricsError>) -> Result<Option<f64>, MetricsError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricsError::EmptyReference) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Evaluates every pair (in parallel when `jobs > 1`); rows keep input order.
pub fn evaluate_set(pairs: &[EvalPair], jobs: usize) -> Result<MetricReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let rows: Vec<MetricRow> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| MetricsError::Report(format!("thread pool: {e}")))?;
        pool.install(|| pairs.par_iter().map(evaluate_pair).collect::<Result<_, _>>())?
    } else {
        pairs.iter().map(evaluate_pair).collect::<Result<_, _>>()?
    };
    Ok(MetricReport::from_rows(rows))
}

fn mean(values: impl Iterator<Item = f64>) -> (Option<f64>, usize) {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    ((n > 0).then(|| s / n as f64), n)
}

impl MetricReport {
    /// Aggregates rows in order, so rounding is reproducible.
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let (mssim, n_mssim) = mean(rows.iter().map(|r| r.mssim));
        let (mssim_m, n_mssim_m) = mean(rows.iter().map(|r| r.mssim_m));
        let (ld, n_ld) = mean(rows.iter().filter_map(|r| r.ld));
        let (ld_m, n_ld_m) = mean(rows.iter().filter_map(|r| r.ld_m));
        let (ed, n_ed) = mean(rows.iter().filter_map(|r| r.ed.map(|e| e as f64)));
        let (cer, n_cer) = mean(rows.iter().filter_map(|r| r.cer));
        Self {
            counts: MetricCounts {
                pairs: rows.len(),
                mssim: n_mssim,
                mssim_m: n_mssim_m,
                ld: n_ld,
                ld_m: n_ld_m,
                ed: n_ed,
                cer: n_cer,
                skipped: 0,
            },
            means: MetricMeans {
                mssim,
                mssim_m,
                ld,
                ld_m,
                ed,
                cer,
            },
            rows,
        }
    }

    /// Per-image CSV with the header `id,mssim,mssim_m,ld,ld_m,ed,cer`.
    pub fn to_csv(&self) -> Result<String, MetricsError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| MetricsError::Report(e.to_string()))?;
        }
        if self.rows.is_empty() {
            w.write_record(["id", "mssim", "mssim_m", "ld", "ld_m", "ed", "cer"])
                .map_err(|e| MetricsError::Report(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| MetricsError::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| MetricsError::Report(e.to_string()))
    }

    /// JSON summary with means and counts (rows omitted).
    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            means: &'a MetricMeans,
            counts: &'a MetricCounts,
        }
        serde_json::to_string_pretty(&Summary {
            means: &self.means,
            counts: &self.counts,
        })
        .expect("summary serializes")
    }
}

/// One-line aggregate in the customary column order.
pub fn format_aggregate(m: &MetricMeans) -> String {
    let f = |v: Option<f64>, p: usize| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.p$}"));
    format!(
        "MSSIM-M {}  LD-M {}  ED {}  CER {}  |  MSSIM {}  LD {}",
        f(m.mssim_m, 4),
        f(m.ld_m, 2),
        f(m.ed, 2),
        f(m.cer, 4),
        f(m.mssim, 4),
        f(m.ld, 2)
    )
}
