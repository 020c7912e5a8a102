//! Frame-level ranking metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{expand, ScoreSeries, VideoRecord, FRAMES_PER_SNIPPET};
use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metrics(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Metrics(format!("score {i} is not finite")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Indices in descending score order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// ROC area as the Mann-Whitney statistic with midranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Metrics(format!(
            "ROC area needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Average precision `Σ (R_n - R_{n-1}) P_n` over distinct thresholds.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    if pos == 0 {
        return Err(Error::Metrics("average precision needs a positive".into()));
    }
    let idx = descending(scores);
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            tp += usize::from(labels[idx[i]] == 1);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub auc_a: f64,
    pub ap: f64,
    pub ap_a: f64,
    pub class_auc: BTreeMap<String, f64>,
    pub videos: Vec<ScoreSeries>,
}

impl EvalReport {
    /// Scores the given series against the videos' snippet labels, after
    /// expanding both to frame level. Series are matched by video id.
    pub fn from_scores(videos: &[VideoRecord], series: &[ScoreSeries]) -> Result<Self> {
        let by_id: BTreeMap<&str, &ScoreSeries> =
            series.iter().map(|s| (s.video_id.as_str(), s)).collect();
        let mut frames: Vec<(&VideoRecord, Vec<f64>, Vec<u8>)> = Vec::with_capacity(videos.len());
        for v in videos {
            let labels = v.snippet_labels.as_ref().ok_or_else(|| Error::Video {
                video: v.video_id.clone(),
                detail: "snippet labels required for evaluation".into(),
            })?;
            let s = by_id.get(v.video_id.as_str()).ok_or_else(|| Error::Video {
                video: v.video_id.clone(),
                detail: "no scores".into(),
            })?;
            if s.scores.len() != labels.len() {
                return Err(Error::Video {
                    video: v.video_id.clone(),
                    detail: format!("{} scores for {} snippets", s.scores.len(), labels.len()),
                });
            }
            frames.push((
                v,
                s.frame_scores(FRAMES_PER_SNIPPET),
                expand(labels, FRAMES_PER_SNIPPET),
            ));
        }
        let gather = |keep: &dyn Fn(&VideoRecord) -> bool| {
            let mut s = Vec::new();
            let mut l = Vec::new();
            for (v, fs, fl) in &frames {
                if keep(v) {
                    s.extend_from_slice(fs);
                    l.extend_from_slice(fl);
                }
            }
            (s, l)
        };
        let (s, l) = gather(&|_| true);
        let (sa, la) = gather(&|v| v.label.is_anomalous());
        let mut class_auc = BTreeMap::new();
        for v in videos.iter().filter(|v| v.label.is_anomalous()) {
            if class_auc.contains_key(&v.class_name) {
                continue;
            }
            let (cs, cl) = gather(&|o| !o.label.is_anomalous() || o.class_name == v.class_name);
            class_auc.insert(v.class_name.clone(), auc(&cs, &cl)?);
        }
        let mut ordered: Vec<ScoreSeries> = videos
            .iter()
            .map(|v| by_id[v.video_id.as_str()].clone())
            .collect();
        ordered.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        Ok(Self {
            auc: auc(&s, &l)?,
            auc_a: auc(&sa, &la)?,
            ap: average_precision(&s, &l)?,
            ap_a: average_precision(&sa, &la)?,
            class_auc,
            videos: ordered,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Metrics(format!("bad report JSON: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking_and_ties() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [0, 0, 1, 1];
        assert_eq!(auc(&s, &l).unwrap(), 1.0);
        assert_eq!(average_precision(&s, &l).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &l).unwrap(), 0.5);
        assert_eq!(average_precision(&[0.5; 4], &l).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(average_precision(&[0.1, 0.2], &[0, 0]).is_err());
    }
}
