//! Fréchet motion distance and single-source diversity metrics.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{MotionClip, Skeleton};
use crate::style_embedding::StageOneModel;

pub const COVARIANCE_JITTER: f64 = 1e-6;
pub const DEFAULT_WINDOW: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLabel {
    Content,
    Style,
}

/// `K × C` feature matrix, one row per clip.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    features: DMatrix<f64>,
    label: FeatureLabel,
}

impl FeatureSet {
    pub fn new(features: DMatrix<f64>, label: FeatureLabel) -> Result<Self> {
        if features.nrows() < 2 {
            return Err(Error::Shape(format!("need at least 2 feature rows, got {}", features.nrows())));
        }
        Ok(Self { features, label })
    }

    pub fn from_rows(rows: &[Vec<f64>], label: FeatureLabel) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        Self::new(DMatrix::from_row_iterator(rows.len(), c, rows.iter().flatten().copied()), label)
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn label(&self) -> FeatureLabel {
        self.label
    }

    pub fn mean(&self) -> DVector<f64> {
        self.features.row_mean().transpose()
    }

    /// Unbiased sample covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let k = self.features.nrows();
        let mut centered = self.features.clone();
        let mean = self.features.row_mean();
        for mut row in centered.row_iter_mut() {
            row -= &mean;
        }
        centered.transpose() * centered / (k - 1) as f64
    }
}

/// Symmetric PSD square root; tiny negative eigenvalues are clamped to zero.
fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(1.0);
    if let Some((i, v)) = eig.eigenvalues.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < -1e-8 * scale) {
        return Err(Error::Numerical(format!(
            "{what} is not positive semi-definite: eigenvalue {i} = {v:e} (largest magnitude {scale:e})"
        )));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fmd(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    let c = a.features.ncols();
    if b.features.ncols() != c {
        return Err(Error::Shape(format!("feature widths {c} and {}", b.features.ncols())));
    }
    let jitter = DMatrix::<f64>::identity(c, c) * COVARIANCE_JITTER;
    let sa = a.covariance() + &jitter;
    let sb = b.covariance() + &jitter;
    let root_a = sqrt_psd(&sa, "covariance of the first set")?;
    let cross = sqrt_psd(&(&root_a * &sb * &root_a), "product covariance")?;
    let d = a.mean() - b.mean();
    let value = d.norm_squared() + sa.trace() + sb.trace() - 2.0 * cross.trace();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("non-finite distance {value}")));
    }
    Ok(value.max(0.0))
}

/// Mean over joints of the per-joint 6D Euclidean distance between two frames.
fn frame_distance(a: &MotionClip, ta: usize, b: &MotionClip, tb: usize) -> f64 {
    let n = a.num_joints();
    (0..n)
        .map(|j| {
            let (x, y) = (a.rotation(ta, j).0, b.rotation(tb, j).0);
            x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
        })
        .sum::<f64>()
        / n as f64
}

fn window_distance(a: &MotionClip, sa: usize, b: &MotionClip, sb: usize, len: usize) -> f64 {
    (0..len).map(|k| frame_distance(a, sa + k, b, sb + k)).sum::<f64>() / len as f64
}

/// Whole-sequence distance under the best temporal offset of the shorter clip along the longer.
pub fn global_distance(sample: &MotionClip, source: &MotionClip) -> f64 {
    let (short, long) = if sample.frames() <= source.frames() { (sample, source) } else { (source, sample) };
    let len = short.frames();
    (0..=long.frames() - len).map(|o| window_distance(short, 0, long, o, len)).fold(f64::INFINITY, f64::min)
}

/// Mean over the sample's windows (stride `window`) of the nearest source window (stride 1).
pub fn local_distance(sample: &MotionClip, source: &MotionClip, window: usize) -> f64 {
    let starts: Vec<usize> = (0..=sample.frames() - window).step_by(window).collect();
    let total: f64 = starts
        .iter()
        .map(|&t| (0..=source.frames() - window).map(|u| window_distance(sample, t, source, u, window)).fold(f64::INFINITY, f64::min))
        .sum();
    total / starts.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub glo_d: f64,
    pub loc_d: f64,
    pub window: usize,
}

/// Global and local diversity of generated `samples` relative to `source`.
pub fn diversity(samples: &[MotionClip], source: &MotionClip, window: usize) -> Result<Diversity> {
    if samples.len() < 2 {
        return Err(Error::Config(format!("diversity needs at least 2 samples, got {}", samples.len())));
    }
    let shortest = samples.iter().map(MotionClip::frames).chain([source.frames()]).min().unwrap_or(0);
    if window == 0 || window > shortest {
        return Err(Error::Config(format!("window {window} must be in [1, {shortest}] (shortest clip)")));
    }
    if let Some(bad) = samples.iter().find(|s| s.num_joints() != source.num_joints()) {
        return Err(Error::Shape(format!("sample has {} joints, source {}", bad.num_joints(), source.num_joints())));
    }
    let k = samples.len() as f64;
    let glo_d = samples.iter().map(|s| global_distance(s, source)).sum::<f64>() / k;
    let loc_d = samples.iter().map(|s| local_distance(s, source, window)).sum::<f64>() / k;
    Ok(Diversity { glo_d, loc_d, window })
}

/// Content (time-averaged `f_m`) and style (`f_p`) features of canonical clips.
pub fn clip_features(model: &StageOneModel, clips: &[MotionClip], skeleton: &Skeleton) -> Result<(FeatureSet, FeatureSet)> {
    let mut content = Vec::with_capacity(clips.len());
    let mut style = Vec::with_capacity(clips.len());
    for clip in clips {
        let (f_p, f_m) = model.encode_style(clip, skeleton)?;
        content.push(f_m.mean(0)?.to_vec1::<f64>()?);
        style.push(f_p.flatten_all()?.to_vec1::<f64>()?);
    }
    Ok((FeatureSet::from_rows(&content, FeatureLabel::Content)?, FeatureSet::from_rows(&style, FeatureLabel::Style)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub content: String,
    pub style: String,
    pub content_fmd: Option<f64>,
    pub style_fmd: Option<f64>,
    pub glo_d: Option<f64>,
    pub loc_d: Option<f64>,
}

/// Plain-text table: content and style sources, both FMDs, both diversities.
pub fn render_table(rows: &[TableRow]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let header = ["Content", "Style", "Content FMD", "Style FMD", "Glo-D", "Loc-D"];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [r.content.clone(), r.style.clone(), cell(r.content_fmd), cell(r.style_fmd), cell(r.glo_d), cell(r.loc_d)]
        })
        .collect();
    let widths: Vec<usize> =
        (0..6).map(|i| body.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0)).collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "| {} |", parts.join(" | "));
    };
    line(header.to_vec(), &mut out);
    let _ = writeln!(out, "|{}|", widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|"));
    for r in &body {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}
