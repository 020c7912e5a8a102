//! Tab-separated dataset manifests.
//!
//! One video per line: `video_id  class_name  label(0|1)  rgb_path
//! snippet_label_path|-  [name=path ...]`. Paths are relative to the
//! manifest's directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use super::{read_pvf, read_pvl, write_pvf, write_pvl, VideoLabel, VideoRecord};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub class_name: String,
    pub label: VideoLabel,
    pub rgb_path: String,
    pub snippet_label_path: Option<String>,
    pub modalities: Vec<(String, String)>,
}

impl ManifestEntry {
    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 5 {
            return Err(format!(
                "expected at least 5 fields, found {}",
                fields.len()
            ));
        }
        let label = match fields[2] {
            "0" => VideoLabel::Normal,
            "1" => VideoLabel::Anomalous,
            other => return Err(format!("video_label must be 0 or 1, found `{other}`")),
        };
        let mut modalities = Vec::new();
        for f in &fields[5..] {
            let (name, path) = f
                .split_once('=')
                .filter(|(n, p)| !n.is_empty() && !p.is_empty())
                .ok_or_else(|| format!("modality entry `{f}` is not name=path"))?;
            if modalities.iter().any(|(n, _): &(String, String)| n == name) {
                return Err(format!("modality `{name}` listed twice"));
            }
            modalities.push((name.to_string(), path.to_string()));
        }
        if fields[0].is_empty() || fields[3].is_empty() {
            return Err("video_id and rgb_path must be non-empty".into());
        }
        Ok(Self {
            video_id: fields[0].to_string(),
            class_name: fields[1].to_string(),
            label,
            rgb_path: fields[3].to_string(),
            snippet_label_path: (fields[4] != "-").then(|| fields[4].to_string()),
            modalities,
        })
    }

    pub fn to_line(&self) -> String {
        let mut s = format!(
            "{}\t{}\t{}\t{}\t{}",
            self.video_id,
            self.class_name,
            if self.label.is_anomalous() { "1" } else { "0" },
            self.rgb_path,
            self.snippet_label_path.as_deref().unwrap_or("-"),
        );
        for (n, p) in &self.modalities {
            let _ = write!(s, "\t{n}={p}");
        }
        s
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes every video's files under `dir` plus `dir/manifest.tsv`, and
/// returns the manifest path.
pub fn write_dataset(dir: &Path, videos: &[VideoRecord]) -> Result<PathBuf> {
    create_dir(&dir.join("rgb"))?;
    let mut text = String::new();
    for v in videos {
        v.validate()?;
        let rgb_path = format!("rgb/{}.pvf", v.video_id);
        write_pvf(&v.rgb, &dir.join(&rgb_path))?;
        let snippet_label_path = match &v.snippet_labels {
            Some(l) => {
                create_dir(&dir.join("labels"))?;
                let p = format!("labels/{}.pvl", v.video_id);
                write_pvl(l, &dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        let mut modalities = Vec::new();
        for (name, m) in &v.modalities {
            let sub = format!("modalities/{name}");
            create_dir(&dir.join(&sub))?;
            let p = format!("{sub}/{}.pvf", v.video_id);
            write_pvf(m, &dir.join(&p))?;
            modalities.push((name.clone(), p));
        }
        let entry = ManifestEntry {
            video_id: v.video_id.clone(),
            class_name: v.class_name.clone(),
            label: v.label,
            rgb_path,
            snippet_label_path,
            modalities,
        };
        text.push_str(&entry.to_line());
        text.push('\n');
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads every video a manifest lists. With `require_modalities` false, a
/// referenced modality file that does not exist is skipped and the record
/// simply lacks that stream.
pub fn load_dataset(manifest_path: &Path, require_modalities: bool) -> Result<Vec<VideoRecord>> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut videos = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry = ManifestEntry::parse(line).map_err(|detail| Error::Manifest {
            path: manifest_path.to_path_buf(),
            line: i + 1,
            detail,
        })?;
        if videos
            .iter()
            .any(|v: &VideoRecord| v.video_id == entry.video_id)
        {
            return Err(Error::Manifest {
                path: manifest_path.to_path_buf(),
                line: i + 1,
                detail: format!("duplicate video_id {}", entry.video_id),
            });
        }
        let field_err = |field: &str, e: Error| Error::Video {
            video: entry.video_id.clone(),
            detail: format!("{field}: {e}"),
        };
        let rgb = read_pvf(&base.join(&entry.rgb_path)).map_err(|e| field_err("rgb", e))?;
        let snippet_labels = entry
            .snippet_label_path
            .as_ref()
            .map(|p| read_pvl(&base.join(p)))
            .transpose()
            .map_err(|e| field_err("snippet_labels", e))?;
        let mut modalities = BTreeMap::new();
        for (name, p) in &entry.modalities {
            match read_pvf(&base.join(p)) {
                Ok(m) => {
                    modalities.insert(name.clone(), m);
                }
                Err(Error::Io { source, .. })
                    if !require_modalities && source.kind() == ErrorKind::NotFound => {}
                Err(e) => return Err(field_err(&format!("modality {name}"), e)),
            }
        }
        let record = VideoRecord {
            video_id: entry.video_id.clone(),
            rgb,
            label: entry.label,
            class_name: entry.class_name.clone(),
            snippet_labels,
            modalities,
        };
        record.validate()?;
        videos.push(record);
    }
    Ok(videos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_round_trip() {
        let line = "vid_1\tburglary\t1\trgb/vid_1.pvf\t-\tP=p/vid_1.pvf\tD=d/vid_1.pvf";
        let e = ManifestEntry::parse(line).unwrap();
        assert_eq!(e.label, VideoLabel::Anomalous);
        assert_eq!(e.snippet_label_path, None);
        assert_eq!(e.modalities.len(), 2);
        assert_eq!(e.to_line(), line);
    }

    #[test]
    fn malformed_lines() {
        assert!(ManifestEntry::parse("a\tb\t1\tr").is_err());
        assert!(ManifestEntry::parse("a\tb\t2\tr\t-").is_err());
        assert!(ManifestEntry::parse("a\tb\t0\tr\t-\tnoequals").is_err());
        assert!(ManifestEntry::parse("a\tb\t0\tr\t-\tP=x\tP=y").is_err());
    }
}
