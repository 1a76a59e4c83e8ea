//! Three-level evaluation: per-beat sample accuracy, clip-level majority
//! vote over a clip's beats, and patient-level cross-view fusion over the
//! available views of one (patient, pacing condition) unit. Also builds the
//! per-fold tables and their mean rows.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{PacingClass, ViewLabel};
use crate::error::{Error, Result};

/// One heartbeat's prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub patient_id: String,
    pub clip_id: String,
    pub view: ViewLabel,
    pub true_pacing: PacingClass,
    pub predicted_pacing: PacingClass,
    /// Softmax probabilities, when available; used only by the
    /// confidence tie-break.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<[f32; 3]>,
}

/// How to resolve a tied vote.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// The tied class with the lowest id.
    #[default]
    LowestId,
    /// The tied class with the highest summed softmax confidence; falls back
    /// to the lowest id without probabilities or on equal confidence.
    Confidence,
}

/// `100 * correct / total`.
pub fn accuracy(preds: &[PacingClass], truths: &[PacingClass]) -> Result<f64> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "accuracy needs equal non-empty inputs, got {} predictions and {} labels",
            preds.len(),
            truths.len()
        )));
    }
    let correct = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(percent(correct, preds.len()))
}

fn percent(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

/// Half-up rounding to 2 decimals; the small epsilon keeps values such as
/// 54.725 (stored as 54.72499...) rounding up as written.
pub fn round2(x: f64) -> f64 {
    ((x * 100.0) + 0.5 + 1e-7).floor() / 100.0
}

/// Mode of `votes`; ties go to the lowest class id, or to the highest
/// confidence first when `confidence` is given.
fn mode(votes: &[PacingClass], confidence: Option<[f64; 3]>) -> PacingClass {
    let mut counts = [0usize; 3];
    for v in votes {
        counts[v.id()] += 1;
    }
    let top = *counts.iter().max().unwrap_or(&0);
    let tied = PacingClass::ALL.into_iter().filter(|c| counts[c.id()] == top);
    match confidence {
        None => tied.min().expect("at least one class is tied for first"),
        Some(conf) => tied
            .reduce(|best, c| if conf[c.id()] > conf[best.id()] { c } else { best })
            .expect("at least one class is tied for first"),
    }
}

fn summed_probs<'a>(it: impl Iterator<Item = &'a SamplePrediction>) -> Option<[f64; 3]> {
    let mut acc = [0f64; 3];
    for s in it {
        let p = s.probs?;
        for k in 0..3 {
            acc[k] += p[k] as f64;
        }
    }
    Some(acc)
}

/// Clip-level decision: modal beat prediction, lowest id on ties.
pub fn clip_vote(samples: &[SamplePrediction]) -> Result<PacingClass> {
    clip_vote_with(samples, TieBreak::LowestId)
}

pub fn clip_vote_with(samples: &[SamplePrediction], tie: TieBreak) -> Result<PacingClass> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("clip vote over no samples".into()))?;
    if let Some(other) = samples.iter().find(|s| s.clip_id != first.clip_id) {
        return Err(Error::InvalidArgument(format!(
            "clip vote mixes clips {} and {}",
            first.clip_id, other.clip_id
        )));
    }
    let votes: Vec<PacingClass> = samples.iter().map(|s| s.predicted_pacing).collect();
    let conf = match tie {
        TieBreak::LowestId => None,
        TieBreak::Confidence => summed_probs(samples.iter()),
    };
    Ok(mode(&votes, conf))
}

/// Patient-level decision over the available views' clip decisions.
pub fn cross_view_vote(clip_preds: &BTreeMap<ViewLabel, PacingClass>) -> Result<PacingClass> {
    if clip_preds.is_empty() {
        return Err(Error::InvalidArgument("cross-view vote over no views".into()));
    }
    Ok(mode(&clip_preds.values().copied().collect::<Vec<_>>(), None))
}

/// Clip-level decision for one (patient, pacing, view) clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipDecision {
    pub patient_id: String,
    pub clip_id: String,
    pub view: ViewLabel,
    pub true_pacing: PacingClass,
    pub predicted_pacing: PacingClass,
    pub beats: usize,
}

/// Fused decision for one (patient, pacing) unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientDecision {
    pub patient_id: String,
    pub true_pacing: PacingClass,
    pub predicted_pacing: PacingClass,
    pub views: Vec<ViewLabel>,
}

/// Groups beats into clips and votes. Output is sorted by clip id.
pub fn clip_decisions(samples: &[SamplePrediction], tie: TieBreak) -> Result<Vec<ClipDecision>> {
    let mut by_clip: BTreeMap<&str, Vec<SamplePrediction>> = BTreeMap::new();
    for s in samples {
        by_clip.entry(s.clip_id.as_str()).or_default().push(s.clone());
    }
    by_clip
        .into_values()
        .map(|beats| {
            let s = &beats[0];
            if beats.iter().any(|b| b.patient_id != s.patient_id || b.view != s.view || b.true_pacing != s.true_pacing)
            {
                return Err(Error::InvalidArgument(format!("clip {} has inconsistent labels", s.clip_id)));
            }
            Ok(ClipDecision {
                patient_id: s.patient_id.clone(),
                clip_id: s.clip_id.clone(),
                view: s.view,
                true_pacing: s.true_pacing,
                predicted_pacing: clip_vote_with(&beats, tie)?,
                beats: beats.len(),
            })
        })
        .collect()
}

/// Fuses clip decisions per (patient, pacing). When one unit has several
/// clips of the same view, the first (by clip id) represents that view.
pub fn patient_decisions(clips: &[ClipDecision]) -> Vec<PatientDecision> {
    let mut units: BTreeMap<(&str, PacingClass), BTreeMap<ViewLabel, PacingClass>> = BTreeMap::new();
    for c in clips {
        units.entry((c.patient_id.as_str(), c.true_pacing)).or_default().entry(c.view).or_insert(c.predicted_pacing);
    }
    units
        .into_iter()
        .map(|((p, t), views)| PatientDecision {
            patient_id: p.to_string(),
            true_pacing: t,
            predicted_pacing: cross_view_vote(&views).expect("units have at least one view"),
            views: views.keys().copied().collect(),
        })
        .collect()
}

/// `(correct, total)`.
pub type Count = (usize, usize);

/// One row of a results table: per-view clip-level accuracy and cross-view
/// accuracy, in percent. A view without any clip is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_index: usize,
    pub per_view: [Option<f64>; 4],
    pub cross_view: Option<f64>,
    pub view_counts: [Count; 4],
    pub cross_counts: Count,
}

impl FoldReport {
    /// A report from already-computed percentages (e.g. a published table).
    pub fn from_values(fold_index: usize, per_view: [f64; 4], cross_view: f64) -> Self {
        Self {
            fold_index,
            per_view: per_view.map(Some),
            cross_view: Some(cross_view),
            view_counts: [(0, 0); 4],
            cross_counts: (0, 0),
        }
    }
}

pub fn fold_report(fold_index: usize, samples: &[SamplePrediction], tie: TieBreak) -> Result<FoldReport> {
    let clips = clip_decisions(samples, tie)?;
    let mut view_counts = [(0usize, 0usize); 4];
    for c in &clips {
        let e = &mut view_counts[c.view.id()];
        e.0 += (c.predicted_pacing == c.true_pacing) as usize;
        e.1 += 1;
    }
    let units = patient_decisions(&clips);
    let cross_counts = (units.iter().filter(|u| u.predicted_pacing == u.true_pacing).count(), units.len());
    let pct = |(c, t): Count| (t > 0).then(|| percent(c, t));
    Ok(FoldReport {
        fold_index,
        per_view: view_counts.map(pct),
        cross_view: pct(cross_counts),
        view_counts,
        cross_counts,
    })
}

/// Column means (over folds where the column is present), rounded to 2
/// decimals: `[TV, MV, LPV, CT, Cross-View]`.
pub fn aggregate_means(reports: &[FoldReport]) -> Result<[Option<f64>; 5]> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no fold reports to aggregate".into()));
    }
    let mut out = [None; 5];
    for (k, slot) in out.iter_mut().enumerate() {
        let vals: Vec<f64> =
            reports.iter().filter_map(|r| if k < 4 { r.per_view[k] } else { r.cross_view }).collect();
        if !vals.is_empty() {
            *slot = Some(round2(vals.iter().sum::<f64>() / vals.len() as f64));
        }
    }
    Ok(out)
}

/// Writes the table as CSV: `Fold,TV,MV,LPV,CT,Cross-View`, 1-based fold
/// numbers, then a `Mean` row.
pub fn write_table_csv(path: &Path, reports: &[FoldReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let cell = |v: Option<f64>| v.map(|x| format!("{:.2}", round2(x))).unwrap_or_default();
    let csv_err = |e: csv::Error| Error::Runtime(format!("{}: {e}", path.display()));
    w.write_record(["Fold", "TV", "MV", "LPV", "CT", "Cross-View"]).map_err(csv_err)?;
    for r in reports {
        let mut row = vec![(r.fold_index + 1).to_string()];
        row.extend(r.per_view.iter().map(|v| cell(*v)));
        row.push(cell(r.cross_view));
        w.write_record(&row).map_err(csv_err)?;
    }
    let mut mean = vec!["Mean".to_string()];
    mean.extend(aggregate_means(reports)?.iter().map(|v| cell(*v)));
    w.write_record(&mean).map_err(csv_err)?;
    let bytes = w.into_inner().map_err(|e| Error::Runtime(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a table written by [`write_table_csv`] back into reports (the
/// `Mean` row is skipped).
pub fn read_table_csv(path: &Path) -> Result<Vec<FoldReport>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
        if rec.get(0) == Some("Mean") {
            continue;
        }
        let num = |i: usize| -> Result<Option<f64>> {
            match rec.get(i).unwrap_or("") {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| Error::Parse { field: format!("column {i}"), message: s.into() }),
            }
        };
        let fold: usize = rec.get(0).unwrap_or("").parse().map_err(|_| Error::Parse {
            field: "Fold".into(),
            message: rec.get(0).unwrap_or("").into(),
        })?;
        out.push(FoldReport {
            fold_index: fold.saturating_sub(1),
            per_view: [num(1)?, num(2)?, num(3)?, num(4)?],
            cross_view: num(5)?,
            view_counts: [(0, 0); 4],
            cross_counts: (0, 0),
        });
    }
    Ok(out)
}

/// One JSON object per line.
pub fn write_predictions_jsonl(path: &Path, preds: &[SamplePrediction]) -> Result<()> {
    let mut buf = Vec::new();
    for p in preds {
        serde_json::to_writer(&mut buf, p).expect("prediction serializes");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_predictions_jsonl(path: &Path) -> Result<Vec<SamplePrediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { field: format!("{}:{}", path.display(), i + 1), message: e.to_string() })
        })
        .collect()
}
