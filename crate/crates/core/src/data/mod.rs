//! Videos, their on-disk formats, and the synthetic benchmark generator.

mod manifest;
mod pvf;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use manifest::{load_dataset, write_dataset, ManifestEntry, MANIFEST_FILE};
pub use pvf::{
    decode_pvf, decode_pvl, encode_pvf, encode_pvl, read_pvf, read_pvl, write_pvf, write_pvl,
    CodecError, PVF_MAGIC, PVL_MAGIC,
};
pub use synth::{
    generate_dataset, generate_split, generate_video, video_id, SplitName, SynthConfig,
    SynthModality, SynthWorld,
};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frames per snippet; snippet scores expand by this factor at evaluation.
pub const FRAMES_PER_SNIPPET: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VideoLabel {
    Normal,
    Anomalous,
}

impl VideoLabel {
    pub fn is_anomalous(self) -> bool {
        self == VideoLabel::Anomalous
    }

    pub fn as_f64(self) -> f64 {
        if self.is_anomalous() {
            1.0
        } else {
            0.0
        }
    }
}

/// One video: RGB snippet features plus optional labels and modality streams.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    /// `[T, D]` snippet features.
    pub rgb: Tensor,
    pub label: VideoLabel,
    pub class_name: String,
    pub snippet_labels: Option<Vec<u8>>,
    /// Modality name to `[T, d_j]` embeddings.
    pub modalities: BTreeMap<String, Tensor>,
}

impl VideoRecord {
    pub fn snippets(&self) -> usize {
        self.rgb.shape()[0]
    }

    /// Checks the label invariant and that every stream spans the same
    /// snippets as the RGB features.
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| {
            Err(Error::Video {
                video: self.video_id.clone(),
                detail,
            })
        };
        let Ok((t, _)) = self.rgb.dims2() else {
            return fail(format!("rgb must be a matrix, got {:?}", self.rgb.shape()));
        };
        if let Some(labels) = &self.snippet_labels {
            if labels.len() != t {
                return fail(format!(
                    "snippet_labels has {} entries for {t} snippets",
                    labels.len()
                ));
            }
            let any = labels.iter().any(|&l| l == 1);
            if any != self.label.is_anomalous() {
                return fail(format!(
                    "video_label {:?} inconsistent with snippet labels",
                    self.label
                ));
            }
        }
        for (name, m) in &self.modalities {
            match m.dims2() {
                Ok((rows, _)) if rows == t => {}
                _ => {
                    return fail(format!(
                        "modality {name} has shape {:?}, expected {t} rows",
                        m.shape()
                    ))
                }
            }
        }
        Ok(())
    }

    /// Checks feature widths against a model architecture.
    pub fn check_dims(&self, model: &ModelConfig, require_modalities: bool) -> Result<()> {
        let d = self.rgb.shape()[1];
        if d != model.input_dim {
            return Err(Error::Video {
                video: self.video_id.clone(),
                detail: format!("rgb width {d}, model expects {}", model.input_dim),
            });
        }
        let mut missing = Vec::new();
        for spec in &model.modalities {
            match self.modalities.get(&spec.name) {
                Some(m) if m.shape()[1] != spec.dim => {
                    return Err(Error::Video {
                        video: self.video_id.clone(),
                        detail: format!(
                            "modality {} width {}, model expects {}",
                            spec.name,
                            m.shape()[1],
                            spec.dim
                        ),
                    })
                }
                Some(_) => {}
                None => missing.push(spec.name.clone()),
            }
        }
        if require_modalities && !missing.is_empty() {
            return Err(Error::MissingModalities {
                video: self.video_id.clone(),
                missing,
            });
        }
        Ok(())
    }

    /// Copy without any modality streams.
    pub fn rgb_only(&self) -> Self {
        Self {
            modalities: BTreeMap::new(),
            ..self.clone()
        }
    }
}

/// Per-snippet anomaly scores for one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub video_id: String,
    pub scores: Vec<f64>,
}

impl ScoreSeries {
    /// Repeats every snippet score `factor` times.
    pub fn frame_scores(&self, factor: usize) -> Vec<f64> {
        expand(&self.scores, factor)
    }
}

pub fn expand<T: Copy>(values: &[T], factor: usize) -> Vec<T> {
    values
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, factor))
        .collect()
}

pub fn count_labels(videos: &[VideoRecord]) -> (usize, usize) {
    let anomalous = videos.iter().filter(|v| v.label.is_anomalous()).count();
    (videos.len() - anomalous, anomalous)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(label: VideoLabel, snippets: Option<Vec<u8>>) -> VideoRecord {
        VideoRecord {
            video_id: "v".into(),
            rgb: Tensor::zeros(&[4, 2]),
            label,
            class_name: "c".into(),
            snippet_labels: snippets,
            modalities: BTreeMap::new(),
        }
    }

    #[test]
    fn label_invariant() {
        assert!(video(VideoLabel::Anomalous, Some(vec![0, 1, 0, 0]))
            .validate()
            .is_ok());
        assert!(video(VideoLabel::Anomalous, Some(vec![0; 4]))
            .validate()
            .is_err());
        assert!(video(VideoLabel::Normal, Some(vec![0, 0, 1, 0]))
            .validate()
            .is_err());
        assert!(video(VideoLabel::Normal, None).validate().is_ok());
        assert!(video(VideoLabel::Normal, Some(vec![0; 3]))
            .validate()
            .is_err());
    }

    #[test]
    fn frame_expansion() {
        let s = ScoreSeries {
            video_id: "v".into(),
            scores: vec![0.1, 0.9],
        };
        let f = s.frame_scores(FRAMES_PER_SNIPPET);
        assert_eq!(f.len(), 32);
        assert!(f[..16].iter().all(|v| *v == 0.1));
        assert!(f[16..].iter().all(|v| *v == 0.9));
    }
}
