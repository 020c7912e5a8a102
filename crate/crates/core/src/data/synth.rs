//! Synthetic multi-modal anomaly benchmark.
//!
//! A latent scene state `z_t ∈ R^m` follows a stationary Gaussian AR(1)
//! walk. The first `m - quiet_dims` coordinates have spread `scene_std`; the last
//! `quiet_dims` coordinates have spread `quiet_std` and hold every class's
//! anomaly direction `u_c`. Inside an anomaly window the state seen by a
//! stream is shifted by `strength * u_c`, so a stream with strength 0 carries
//! no anomaly evidence at all:
//!
//! ```text
//! rgb_t = (z_t + s_rgb * a_t * u_c) W_rgb + noise
//! e_j,t = (z_t + s_j   * a_t * u_c) W_j   + noise
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{write_dataset, VideoLabel, VideoRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthModality {
    pub name: String,
    pub dim: usize,
    /// Anomaly strength `s_j`.
    pub strength: f64,
}

impl SynthModality {
    pub fn new(name: &str, dim: usize, strength: f64) -> Self {
        Self {
            name: name.to_string(),
            dim,
            strength,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train_normal: usize,
    pub train_anomalous: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    /// Snippets per video.
    pub snippets: usize,
    pub rgb_dim: usize,
    /// Latent scene dimension `m`.
    pub latent_dim: usize,
    /// Stationary spread of the scene coordinates.
    pub scene_std: f64,
    pub quiet_dims: usize,
    pub quiet_std: f64,
    /// Lag-one autocorrelation of the latent walk.
    pub walk_rho: f64,
    pub rgb_strength: f64,
    pub noise_std: f64,
    /// Overall scale of every modality stream, noise included.
    pub modality_gain: f64,
    pub window_min: usize,
    pub window_max: usize,
    pub classes: usize,
    pub modalities: Vec<SynthModality>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_normal: 20,
            train_anomalous: 20,
            test_normal: 10,
            test_anomalous: 10,
            snippets: 32,
            rgb_dim: 64,
            latent_dim: 16,
            scene_std: 1.0,
            quiet_dims: 4,
            quiet_std: 0.1,
            walk_rho: 0.9,
            rgb_strength: 0.2,
            noise_std: 0.1,
            modality_gain: 1.0,
            window_min: 4,
            window_max: 12,
            classes: 4,
            modalities: ["P", "D", "M", "O", "txt"]
                .iter()
                .map(|n| SynthModality::new(n, 32, 1.0))
                .collect(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("data: {m}")));
        if self.snippets == 0 || self.rgb_dim == 0 || self.latent_dim == 0 {
            return fail("snippets, rgb_dim and latent_dim must be positive".into());
        }
        if self.quiet_dims == 0 || self.quiet_dims > self.latent_dim {
            return fail(format!(
                "quiet_dims {} must lie in 1..={}",
                self.quiet_dims, self.latent_dim
            ));
        }
        if self.window_min == 0 || self.window_min > self.window_max {
            return fail(format!(
                "window range {}..={} is empty",
                self.window_min, self.window_max
            ));
        }
        if self.window_max > self.snippets {
            return fail(format!(
                "anomaly window up to {} snippets cannot fit in {} snippets",
                self.window_max, self.snippets
            ));
        }
        if self.classes == 0 {
            return fail("classes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.walk_rho) {
            return fail(format!("walk_rho {} must lie in [0, 1)", self.walk_rho));
        }
        for (what, v) in [
            ("scene_std", self.scene_std),
            ("quiet_std", self.quiet_std),
            ("noise_std", self.noise_std),
            ("modality_gain", self.modality_gain),
            ("rgb_strength", self.rgb_strength),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{what} must be finite and non-negative, got {v}"));
            }
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.dim == 0 || m.name.is_empty() {
                return fail(format!("modality {i} needs a name and a positive dim"));
            }
            if !m.strength.is_finite() || m.strength < 0.0 {
                return fail(format!(
                    "modality {} strength {} is invalid",
                    m.name, m.strength
                ));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return fail(format!("modality {} listed twice", m.name));
            }
            if m.name.contains(['\t', '=', '/', '\n']) {
                return fail(format!("modality name {:?} is not file-safe", m.name));
            }
        }
        Ok(())
    }

    /// Sets every anomaly strength, RGB included, to zero.
    pub fn null_signal(mut self) -> Self {
        self.rgb_strength = 0.0;
        for m in &mut self.modalities {
            m.strength = 0.0;
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Test => "test",
        }
    }
}

fn derive_seed(seed: u64, tag: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.finalize().into()
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

/// The fixed projections and anomaly directions shared by all videos.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    /// `[m, D]`.
    pub rgb_projection: Tensor,
    /// Modality name to `[m, d_j]`.
    pub modality_projections: BTreeMap<String, Tensor>,
    /// One unit vector of length `m` per class, zero outside the quiet block.
    pub directions: Vec<Vec<f64>>,
    /// Per latent coordinate stationary standard deviation.
    pub latent_std: Vec<f64>,
}

impl SynthWorld {
    /// Projections depend only on (seed, stream name) so adding a modality
    /// does not perturb the others.
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.latent_dim;
        let scale = 1.0 / (m as f64).sqrt();
        let mut rng = ChaCha8Rng::from_seed(derive_seed(cfg.seed, "world/rgb"));
        let rgb_projection = gaussian_matrix(&mut rng, m, cfg.rgb_dim, scale);
        let modality_projections = cfg
            .modalities
            .iter()
            .map(|s| {
                let mut rng = ChaCha8Rng::from_seed(derive_seed(
                    cfg.seed,
                    &format!("world/modality/{}", s.name),
                ));
                (
                    s.name.clone(),
                    gaussian_matrix(&mut rng, m, s.dim, cfg.modality_gain * scale),
                )
            })
            .collect();
        let quiet_start = m - cfg.quiet_dims;
        let mut rng = ChaCha8Rng::from_seed(derive_seed(cfg.seed, "world/directions"));
        let directions = (0..cfg.classes)
            .map(|_| loop {
                let mut u = vec![0.0; m];
                for v in &mut u[quiet_start..] {
                    *v = rng.sample(StandardNormal);
                }
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    break u.into_iter().map(|v| v / norm).collect();
                }
            })
            .collect();
        let latent_std = (0..m)
            .map(|i| {
                if i < quiet_start {
                    cfg.scene_std
                } else {
                    cfg.quiet_std
                }
            })
            .collect();
        Ok(Self {
            rgb_projection,
            modality_projections,
            directions,
            latent_std,
        })
    }

    /// `direction · W` for one class and projection.
    pub fn projected_direction(&self, class: usize, projection: &Tensor) -> Vec<f64> {
        let (m, d) = projection.dims2().expect("matrix");
        let u = &self.directions[class];
        (0..d)
            .map(|c| (0..m).map(|r| u[r] * projection.get2(r, c)).sum())
            .collect()
    }
}

fn project(latent: &[Vec<f64>], w: &Tensor, noise_std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let (m, d) = w.dims2().expect("matrix");
    let mut data = Vec::with_capacity(latent.len() * d);
    for z in latent {
        for c in 0..d {
            let mut acc = 0.0;
            for (r, zr) in z.iter().enumerate().take(m) {
                acc += zr * w.get2(r, c);
            }
            // stored at f32, so round here to make memory match disk
            data.push((acc + noise_std * rng.sample::<f64, _>(StandardNormal)) as f32 as f64);
        }
    }
    Tensor::new(vec![latent.len(), d], data).expect("positive dims")
}

pub fn video_id(split: SplitName, label: VideoLabel, index: usize) -> String {
    let tag = if label.is_anomalous() { 'a' } else { 'n' };
    format!("{}_{tag}{index:04}", split.as_str())
}

/// Generates one video from its own seed, independent of any other video.
pub fn generate_video(
    cfg: &SynthConfig,
    world: &SynthWorld,
    split: SplitName,
    label: VideoLabel,
    index: usize,
) -> VideoRecord {
    let id = video_id(split, label, index);
    let mut rng = ChaCha8Rng::from_seed(derive_seed(cfg.seed, &format!("video/{id}")));
    let t = cfg.snippets;
    let m = cfg.latent_dim;
    let rho = cfg.walk_rho;
    let innovation = (1.0 - rho * rho).sqrt();

    let mut latent = Vec::with_capacity(t);
    let mut z: Vec<f64> = world
        .latent_std
        .iter()
        .map(|s| s * rng.sample::<f64, _>(StandardNormal))
        .collect();
    for step in 0..t {
        if step > 0 {
            for (zi, s) in z.iter_mut().zip(&world.latent_std) {
                *zi = rho * *zi + innovation * s * rng.sample::<f64, _>(StandardNormal);
            }
        }
        latent.push(z.clone());
    }

    let (class, mask) = match label {
        VideoLabel::Normal => (None, vec![0u8; t]),
        VideoLabel::Anomalous => {
            let len = rng.random_range(cfg.window_min..=cfg.window_max);
            let start = rng.random_range(0..=t - len);
            let mut mask = vec![0u8; t];
            mask[start..start + len].fill(1);
            (Some(index % cfg.classes), mask)
        }
    };
    let shifted = |strength: f64| -> Vec<Vec<f64>> {
        let Some(c) = class else {
            return latent.clone();
        };
        let u = &world.directions[c];
        latent
            .iter()
            .zip(&mask)
            .map(|(z, &a)| {
                let k = strength * f64::from(a);
                (0..m).map(|i| z[i] + k * u[i]).collect()
            })
            .collect()
    };

    let rgb = project(
        &shifted(cfg.rgb_strength),
        &world.rgb_projection,
        cfg.noise_std,
        &mut rng,
    );
    let mut modalities = BTreeMap::new();
    for spec in &cfg.modalities {
        let w = &world.modality_projections[&spec.name];
        modalities.insert(
            spec.name.clone(),
            project(
                &shifted(spec.strength),
                w,
                cfg.modality_gain * cfg.noise_std,
                &mut rng,
            ),
        );
    }
    VideoRecord {
        video_id: id,
        rgb,
        label,
        class_name: class.map_or_else(|| "normal".to_string(), |c| format!("synth_c{c}")),
        snippet_labels: Some(mask),
        modalities,
    }
}

/// All videos of one split, normals first.
pub fn generate_split(cfg: &SynthConfig, world: &SynthWorld, split: SplitName) -> Vec<VideoRecord> {
    let (normal, anomalous) = match split {
        SplitName::Train => (cfg.train_normal, cfg.train_anomalous),
        SplitName::Test => (cfg.test_normal, cfg.test_anomalous),
    };
    let mut out = Vec::with_capacity(normal + anomalous);
    for i in 0..normal {
        out.push(generate_video(cfg, world, split, VideoLabel::Normal, i));
    }
    for i in 0..anomalous {
        out.push(generate_video(cfg, world, split, VideoLabel::Anomalous, i));
    }
    out
}

/// Writes `out_dir/train` and `out_dir/test`, returning their manifest paths.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let world = SynthWorld::new(cfg)?;
    let train = write_dataset(
        &out_dir.join(SplitName::Train.as_str()),
        &generate_split(cfg, &world, SplitName::Train),
    )?;
    let test = write_dataset(
        &out_dir.join(SplitName::Test.as_str()),
        &generate_split(cfg, &world, SplitName::Test),
    )?;
    Ok((train, test))
}
