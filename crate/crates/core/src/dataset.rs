//! Heartbeat samples: the preprocessed unit of model input together with
//! the labels and identifiers needed for splitting, auditing and voting.

use crate::corpus::{load_raw_clip, DatasetManifest, PacingClass, VideoTensor, ViewLabel};
use crate::error::Result;
use crate::preprocess::{preprocess_pipeline, PreprocessConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `"{patient}/{clip}#{beat}"`; unique within a corpus and the key that
    /// seeds the sample's augmentation streams.
    pub key: String,
    pub patient_id: String,
    pub clip_id: String,
    pub view: ViewLabel,
    pub pacing: PacingClass,
    pub beat_index: usize,
    pub video: VideoTensor,
}

pub fn sample_key(patient_id: &str, clip_id: &str, beat: usize) -> String {
    format!("{patient_id}/{clip_id}#{beat}")
}

/// Patient id encoded in a sample key.
pub fn key_patient(key: &str) -> &str {
    key.split_once('/').map_or(key, |(p, _)| p)
}

/// Loads and preprocesses every annotated beat of the corpus, in manifest
/// order.
pub fn build_samples(m: &DatasetManifest, cfg: &PreprocessConfig) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for p in &m.patients {
        for c in &p.clips {
            if c.beats.is_empty() {
                continue;
            }
            let raw = load_raw_clip(m, c)?;
            for (i, video) in preprocess_pipeline(&raw, &c.beats, cfg)?.into_iter().enumerate() {
                out.push(Sample {
                    key: sample_key(&p.patient_id, &c.clip_id, i),
                    patient_id: p.patient_id.clone(),
                    clip_id: c.clip_id.clone(),
                    view: c.view,
                    pacing: c.pacing,
                    beat_index: i,
                    video,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_encode_patients() {
        let k = sample_key("P07", "P07_TV_NSR", 3);
        assert_eq!(k, "P07/P07_TV_NSR#3");
        assert_eq!(key_patient(&k), "P07");
    }
}
