//! Depth evaluation: error and threshold-accuracy metrics over a range mask.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthEvalConfig {
    pub min_depth: f64,
    pub max_depth: f64,
    pub median_scaling: bool,
}

impl Default for DepthEvalConfig {
    fn default() -> Self {
        DepthEvalConfig {
            min_depth: 0.3,
            max_depth: 10.0,
            median_scaling: false,
        }
    }
}

impl DepthEvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth) {
            return Err(Error::InvalidArgument(format!(
                "evaluation range must satisfy 0 < min < max, got [{}, {}]",
                self.min_depth, self.max_depth
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics {
    pub mae: f64,
    pub mre: f64,
    pub rmse: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    /// Pixels that entered the metrics.
    pub count: usize,
    /// In-range pixels dropped because the ground truth was not positive.
    pub excluded: usize,
}

impl DepthMetrics {
    pub fn values(&self) -> [f64; 6] {
        [self.mae, self.mre, self.rmse, self.d1, self.d2, self.d3]
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Masked `(pred, gt)` pairs after optional median scaling.
fn masked_pairs(pred: &Image, gt: &Image, cfg: &DepthEvalConfig) -> Result<(Vec<(f64, f64)>, usize)> {
    cfg.validate()?;
    pred.check_same_shape(gt)?;
    if pred.channels != 1 {
        return Err(Error::Shape(format!("depth maps need one channel, got {}", pred.channels)));
    }
    let mut excluded = 0;
    let mut pairs = Vec::with_capacity(gt.data.len());
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if g.is_nan() || g <= 0.0 {
            excluded += 1;
            continue;
        }
        if g >= cfg.min_depth && g <= cfg.max_depth {
            pairs.push((p, g));
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyMask);
    }
    if cfg.median_scaling {
        let mut ps: Vec<f64> = pairs.iter().map(|x| x.0).collect();
        let mut gs: Vec<f64> = pairs.iter().map(|x| x.1).collect();
        let (mp, mg) = (median(&mut ps), median(&mut gs));
        if mp > 0.0 {
            let s = mg / mp;
            pairs.iter_mut().for_each(|x| x.0 *= s);
        }
    }
    Ok((pairs, excluded))
}

/// MAE, MRE, RMSE and δ-accuracies over pixels whose ground truth lies in
/// `[min_depth, max_depth]`.
pub fn depth_metrics(pred: &Image, gt: &Image, cfg: &DepthEvalConfig) -> Result<DepthMetrics> {
    let (pairs, excluded) = masked_pairs(pred, gt, cfg)?;
    let n = pairs.len() as f64;
    let (mut ae, mut re, mut se) = (0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for &(p, g) in &pairs {
        let e = (p - g).abs();
        ae += e;
        re += e / g;
        se += e * e;
        let ratio = (p / g).max(g / p);
        for (i, h) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(i as i32 + 1) {
                *h += 1;
            }
        }
    }
    Ok(DepthMetrics {
        mae: ae / n,
        mre: re / n,
        rmse: (se / n).sqrt(),
        d1: hits[0] as f64 / n,
        d2: hits[1] as f64 / n,
        d3: hits[2] as f64 / n,
        count: pairs.len(),
        excluded,
    })
}

/// Median of `|pred − gt|` over the same mask as [`depth_metrics`].
pub fn median_abs_error(pred: &Image, gt: &Image, cfg: &DepthEvalConfig) -> Result<f64> {
    let (pairs, _) = masked_pairs(pred, gt, cfg)?;
    let mut e: Vec<f64> = pairs.iter().map(|&(p, g)| (p - g).abs()).collect();
    Ok(median(&mut e))
}

/// Metrics of one evaluated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub scene: String,
    pub values: [f64; 6],
}

pub const CSV_HEADER: [&str; 7] = ["scene", "MAE", "MRE", "RMSE", "d1", "d2", "d3"];

/// Aligned text table with a trailing mean row, and the per-scene CSV.
pub struct MetricsReport {
    pub text: String,
    pub csv: String,
    pub mean: [f64; 6],
}

pub fn metrics_report(rows: &[MetricsRow]) -> Result<MetricsReport> {
    let mut mean = [0.0; 6];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(&r.values) {
            *m += v / rows.len() as f64;
        }
    }
    let name_w = rows.iter().map(|r| r.scene.len()).max().unwrap_or(0).max(5);
    let mut text = format!("{:<name_w$}", CSV_HEADER[0]);
    for h in &CSV_HEADER[1..] {
        write!(text, " {h:>8}").expect("writing to a String");
    }
    text.push('\n');
    let mut line = |name: &str, v: &[f64; 6]| {
        write!(text, "{name:<name_w$}").expect("writing to a String");
        for x in v {
            write!(text, " {x:>8.4}").expect("writing to a String");
        }
        text.push('\n');
    };
    for r in rows {
        line(&r.scene, &r.values);
    }
    if !rows.is_empty() {
        line("mean", &mean);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(fail)?;
    for r in rows {
        let mut rec = vec![r.scene.clone()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(fail)?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?)
        .expect("csv output is UTF-8");
    Ok(MetricsReport { text, csv, mean })
}

/// Reads rows back from [`metrics_report`]'s CSV.
pub fn parse_metrics_csv(s: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(s.as_bytes());
    let bad = |reason: String| Error::InvalidArgument(format!("metrics csv: {reason}"));
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let mut values = [0.0; 6];
            for (i, v) in values.iter_mut().enumerate() {
                *v = rec[i + 1].parse().map_err(|_| bad(format!("bad number '{}'", &rec[i + 1])))?;
            }
            Ok(MetricsRow {
                scene: rec[0].to_string(),
                values,
            })
        })
        .collect()
}
