//! Frame accuracy and phase-level precision, recall and Jaccard, confusion
//! matrices, a causal smoother and colour-ribbon figures.
//!
//! Per phase `p`, `GT` and `P` are the sets of frame indices labelled `p` in
//! the ground truth and the prediction. PR = |GT∩P|/|P|, RE = |GT∩P|/|GT|,
//! JA = |GT∩P|/|GT∪P|. A phase in neither set is left out of that video's
//! phase average; a phase in GT but never predicted has PR = 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::runs;
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseScore {
    pub phase: usize,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video: String,
    pub frames: usize,
    pub accuracy: f64,
    /// Phases present in the ground truth or the prediction, ascending.
    pub phases: Vec<PhaseScore>,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

fn check_labels(gt: &[usize], pred: &[usize], num_phases: usize) -> Result<()> {
    if gt.len() != pred.len() {
        return Err(Error::dim("score_video", &[gt.len()], &[pred.len()]));
    }
    if gt.is_empty() {
        return Err(Error::Contract("cannot score an empty video".into()));
    }
    for &l in gt.iter().chain(pred) {
        if l >= num_phases {
            return Err(Error::Index {
                what: "phase label",
                index: l,
                len: num_phases,
            });
        }
    }
    Ok(())
}

pub fn score_video(gt: &[usize], pred: &[usize], num_phases: usize) -> Result<VideoScore> {
    check_labels(gt, pred, num_phases)?;
    let mut n_gt = vec![0usize; num_phases];
    let mut n_pred = vec![0usize; num_phases];
    let mut n_both = vec![0usize; num_phases];
    for (&g, &p) in gt.iter().zip(pred) {
        n_gt[g] += 1;
        n_pred[p] += 1;
        if g == p {
            n_both[g] += 1;
        }
    }
    let phases: Vec<PhaseScore> = (0..num_phases)
        .filter(|&c| n_gt[c] + n_pred[c] > 0)
        .map(|c| {
            let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            PhaseScore {
                phase: c,
                precision: ratio(n_both[c], n_pred[c]),
                recall: ratio(n_both[c], n_gt[c]),
                jaccard: ratio(n_both[c], n_gt[c] + n_pred[c] - n_both[c]),
            }
        })
        .collect();
    let k = phases.len() as f64;
    let correct: usize = n_both.iter().sum();
    Ok(VideoScore {
        video: String::new(),
        frames: gt.len(),
        accuracy: correct as f64 / gt.len() as f64,
        precision: phases.iter().map(|p| p.precision).sum::<f64>() / k,
        recall: phases.iter().map(|p| p.recall).sum::<f64>() / k,
        jaccard: phases.iter().map(|p| p.jaccard).sum::<f64>() / k,
        phases,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation across videos.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanStd {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub videos: usize,
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub jaccard: MeanStd,
}

pub fn aggregate(videos: &[VideoScore]) -> Result<Aggregate> {
    if videos.is_empty() {
        return Err(Error::Contract("cannot aggregate zero videos".into()));
    }
    let col = |f: fn(&VideoScore) -> f64| {
        // sorted so the result does not depend on video order
        let mut xs: Vec<f64> = videos.iter().map(f).collect();
        xs.sort_by(f64::total_cmp);
        MeanStd::of(&xs)
    };
    Ok(Aggregate {
        videos: videos.len(),
        accuracy: col(|v| v.accuracy),
        precision: col(|v| v.precision),
        recall: col(|v| v.recall),
        jaccard: col(|v| v.jaccard),
    })
}

/// Counts `m[g][p]` of frames with ground truth `g` predicted as `p`.
pub fn confusion_counts(gt: &[usize], pred: &[usize], num_phases: usize) -> Result<Vec<Vec<usize>>> {
    check_labels(gt, pred, num_phases)?;
    let mut m = vec![vec![0usize; num_phases]; num_phases];
    for (&g, &p) in gt.iter().zip(pred) {
        m[g][p] += 1;
    }
    Ok(m)
}

/// Row-normalizes counts; row `g` is the distribution of predictions given
/// ground truth `g`. Rows without frames stay zero.
pub fn normalize_rows(counts: &[Vec<usize>]) -> Vec<Vec<f64>> {
    counts
        .iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            row.iter()
                .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                .collect()
        })
        .collect()
}

pub fn confusion(
    gt: &[usize],
    pred: &[usize],
    num_phases: usize,
    normalize: bool,
) -> Result<Vec<Vec<f64>>> {
    let counts = confusion_counts(gt, pred, num_phases)?;
    Ok(if normalize {
        normalize_rows(&counts)
    } else {
        counts
            .iter()
            .map(|r| r.iter().map(|&c| c as f64).collect())
            .collect()
    })
}

/// Argmax of the mean of the last `window` frames' probabilities (fewer at the
/// start). Uses no future frames.
pub fn smooth_moving_average(probs: &Tensor, window: usize) -> Result<Vec<usize>> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Config(format!("smoothing window {window} must be odd")));
    }
    if probs.ndim() != 2 {
        return Err(Error::dim("smooth_moving_average", probs.shape(), &[0, 0]));
    }
    let c = probs.cols();
    let mut acc = vec![0.0; c];
    let mut out = Vec::with_capacity(probs.rows());
    for t in 0..probs.rows() {
        for (a, &p) in acc.iter_mut().zip(probs.row(t)) {
            *a += p;
        }
        if t >= window {
            for (a, &p) in acc.iter_mut().zip(probs.row(t - window)) {
                *a -= p;
            }
        }
        if window == 1 {
            out.push(argmax(probs.row(t)));
        } else {
            out.push(argmax(&acc));
        }
    }
    Ok(out)
}

/// Fixed categorical palette indexed by phase.
pub const PALETTE: [&str; 10] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
    "#9c755f", "#bab0ac",
];

const RIBBON_WIDTH: f64 = 800.0;
const BAND_HEIGHT: f64 = 24.0;
const BAND_GAP: f64 = 8.0;
const LABEL_WIDTH: f64 = 140.0;

/// One band per named label row, one rect per run of equal labels.
pub fn ribbon_svg_string(rows: &[(&str, &[usize])]) -> Result<String> {
    let len = rows.first().map(|r| r.1.len()).unwrap_or(0);
    if len == 0 || rows.iter().any(|r| r.1.len() != len) {
        return Err(Error::Contract("ribbon rows must be non-empty and equally long".into()));
    }
    let height = rows.len() as f64 * (BAND_HEIGHT + BAND_GAP) + BAND_GAP;
    let scale = RIBBON_WIDTH / len as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="12">"#,
        LABEL_WIDTH + RIBBON_WIDTH + BAND_GAP
    );
    for (i, (name, labels)) in rows.iter().enumerate() {
        let y = BAND_GAP + i as f64 * (BAND_HEIGHT + BAND_GAP);
        let _ = writeln!(s, r#"<g class="band">"#);
        let _ = writeln!(
            s,
            r#"<text x="4" y="{}">{}</text>"#,
            y + BAND_HEIGHT * 0.7,
            escape(name)
        );
        for (label, start, end) in runs(labels) {
            let _ = writeln!(
                s,
                r#"<rect x="{:.3}" y="{y}" width="{:.3}" height="{BAND_HEIGHT}" fill="{}"/>"#,
                LABEL_WIDTH + start as f64 * scale,
                (end - start) as f64 * scale,
                PALETTE[label % PALETTE.len()]
            );
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes a ribbon with the ground truth on top and one band per prediction.
pub fn ribbon_svg(gt: &[usize], preds: &[(&str, &[usize])], path: &Path) -> Result<()> {
    let mut rows: Vec<(&str, &[usize])> = vec![("ground truth", gt)];
    rows.extend_from_slice(preds);
    std::fs::write(path, ribbon_svg_string(&rows)?)?;
    Ok(())
}

/// Evaluation output for a set of videos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub num_phases: usize,
    /// Free-form run description (model mode, bank length, seed, ...).
    pub run: BTreeMap<String, String>,
    pub videos: Vec<VideoScore>,
    pub aggregate: Aggregate,
    /// Counts summed over all videos, rows indexed by ground truth.
    pub confusion_counts: Vec<Vec<usize>>,
    pub confusion: Vec<Vec<f64>>,
}

pub const REPORT_VERSION: u32 = 1;

impl MetricsReport {
    /// Scores `(name, ground truth, prediction)` triples.
    pub fn build(
        items: &[(String, Vec<usize>, Vec<usize>)],
        num_phases: usize,
        run: BTreeMap<String, String>,
    ) -> Result<Self> {
        let mut videos = Vec::with_capacity(items.len());
        let mut counts = vec![vec![0usize; num_phases]; num_phases];
        for (name, gt, pred) in items {
            let mut v = score_video(gt, pred, num_phases)?;
            v.video = name.clone();
            videos.push(v);
            for (acc, row) in counts.iter_mut().zip(confusion_counts(gt, pred, num_phases)?) {
                for (a, c) in acc.iter_mut().zip(row) {
                    *a += c;
                }
            }
        }
        Ok(MetricsReport {
            version: REPORT_VERSION,
            num_phases,
            run,
            aggregate: aggregate(&videos)?,
            videos,
            confusion: normalize_rows(&counts),
            confusion_counts: counts,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(r)?)
    }

    /// Flat table with columns `video, phase, PR, RE, JA, AC`: one row per
    /// scored phase plus a `mean` row per video.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["video", "phase", "PR", "RE", "JA", "AC"])?;
        for v in &self.videos {
            let ac = v.accuracy.to_string();
            for p in &v.phases {
                w.write_record([
                    v.video.clone(),
                    p.phase.to_string(),
                    p.precision.to_string(),
                    p.recall.to_string(),
                    p.jaccard.to_string(),
                    ac.clone(),
                ])?;
            }
            w.write_record([
                v.video.clone(),
                "mean".to_string(),
                v.precision.to_string(),
                v.recall.to_string(),
                v.jaccard.to_string(),
                ac,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-frame labels of a run, kept for plotting and comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub version: u32,
    pub run: BTreeMap<String, String>,
    pub videos: Vec<String>,
    pub ground_truth: Vec<Vec<usize>>,
    pub predictions: Vec<Vec<usize>>,
}

impl PredictionSet {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let set: PredictionSet = serde_json::from_slice(&std::fs::read(path)?)?;
        if set.videos.len() != set.ground_truth.len() || set.videos.len() != set.predictions.len()
        {
            return Err(Error::Format(format!("{}: inconsistent video counts", path.display())));
        }
        Ok(set)
    }
}
