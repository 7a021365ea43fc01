//! Gaussian-mixture task pairs with a known relatedness ordering.
//!
//! Each class owns a Gaussian cluster in feature space. The target task is a
//! fresh draw from the same clusters whose labels are then degraded: a
//! fraction of classes have their pixels relabeled at random among
//! themselves, and a fraction of pixels get a uniformly random label.
//!
//! Cluster means depend only on class count, dimension and separation; the
//! seed drives pixel draws and label corruption.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::save_task_export;
use crate::error::{Error, Result};
use crate::eval::{EvalManifest, ManifestRecord};
use crate::pixelset::{PixelSet, TaskExport, IGNORE_SENTINEL};

/// Expected squared distance of a pixel to its cluster mean. Pairwise costs
/// inside a cluster are then about the default epsilon, which keeps the
/// solver within its iteration budget at the default settings.
pub const WITHIN_CLUSTER_VARIANCE: f64 = 0.05;

const LAYOUT_SEED: u64 = 0x0005_eed0_fc1a_55e5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_count: u32,
    pub feature_dim: usize,
    /// Pixels per task.
    pub pixels: usize,
    /// Per-dimension spread of the cluster means in units of the
    /// within-cluster standard deviation.
    pub cluster_separation: f64,
    /// Fraction of target pixels whose label is redrawn uniformly.
    #[serde(default)]
    pub label_noise: f64,
    /// Fraction of classes whose labels are shuffled among each other.
    #[serde(default)]
    pub label_map_scramble: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            class_count: 5,
            feature_dim: 8,
            pixels: 4000,
            cluster_separation: 3.0,
            label_noise: 0.0,
            label_map_scramble: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 || self.class_count >= u32::from(IGNORE_SENTINEL) {
            return Err(Error::Validation(format!(
                "class_count must be in [2, {}], got {}",
                IGNORE_SENTINEL - 1,
                self.class_count
            )));
        }
        if self.feature_dim == 0 || self.pixels == 0 {
            return Err(Error::Validation(
                "feature_dim and pixels must be positive".into(),
            ));
        }
        if !(self.cluster_separation.is_finite() && self.cluster_separation >= 0.0) {
            return Err(Error::Validation(
                "cluster_separation must be finite and >= 0".into(),
            ));
        }
        for (name, p) in [
            ("label_noise", self.label_noise),
            ("label_map_scramble", self.label_map_scramble),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!(
                    "{name} must be in [0, 1], got {p}"
                )));
            }
        }
        Ok(())
    }

    /// Ground-truth ordering used by ranking tests.
    pub fn relatedness(&self) -> f64 {
        (1.0 - self.label_noise) * (1.0 - self.label_map_scramble)
    }
}

fn draw_task(
    means: &Array2<f64>,
    pixels: usize,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> (Array2<f32>, Vec<u16>) {
    let (classes, dim) = means.dim();
    let mut features = Array2::<f32>::zeros((pixels, dim));
    let mut labels = Vec::with_capacity(pixels);
    for mut row in features.rows_mut() {
        let l = rng.random_range(0..classes);
        labels.push(l as u16);
        for (x, &mu) in row.iter_mut().zip(means.row(l)) {
            let z: f64 = StandardNormal.sample(rng);
            *x = (mu + noise_std * z) as f32;
        }
    }
    (features, labels)
}

/// Draws a source task and a degraded target task from shared clusters.
/// Returns them with `spec.relatedness()`.
pub fn generate_pair(spec: &SyntheticSpec) -> Result<(PixelSet, PixelSet, f64)> {
    spec.validate()?;
    let classes = spec.class_count as usize;
    let dim = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let noise_std = (WITHIN_CLUSTER_VARIANCE / dim as f64).sqrt();
    let mean_dist = Normal::new(0.0, spec.cluster_separation * noise_std)
        .map_err(|e| Error::Validation(e.to_string()))?;
    let mut layout = ChaCha8Rng::seed_from_u64(LAYOUT_SEED);
    let means = Array2::from_shape_fn((classes, dim), |_| mean_dist.sample(&mut layout));

    let (sf, sl) = draw_task(&means, spec.pixels, noise_std, &mut rng);
    let (tf, mut tl) = draw_task(&means, spec.pixels, noise_std, &mut rng);

    let scrambled = (spec.label_map_scramble * classes as f64).round() as usize;
    if scrambled >= 2 {
        let subset: Vec<u16> = index::sample(&mut rng, classes, scrambled)
            .into_iter()
            .map(|c| c as u16)
            .collect();
        let members: BTreeSet<u16> = subset.iter().copied().collect();
        for l in tl.iter_mut().filter(|l| members.contains(l)) {
            *l = subset[rng.random_range(0..subset.len())];
        }
    }
    if spec.label_noise > 0.0 {
        for l in tl.iter_mut() {
            if rng.random::<f64>() < spec.label_noise {
                *l = rng.random_range(0..classes) as u16;
            }
        }
    }

    let source = PixelSet::new(sf, sl, spec.class_count)?;
    let target = PixelSet::new(tf, tl, spec.class_count)?;
    Ok((source, target, spec.relatedness()))
}

/// Wraps a pixel set as a one-image export of height 1 with no ignore labels.
pub fn pixelset_to_export(set: &PixelSet) -> Result<TaskExport> {
    let (p, c) = set.features.dim();
    let features = set
        .features
        .clone()
        .into_shape_with_order((1, 1, p, c))
        .map_err(|e| Error::Dimension(e.to_string()))?;
    let labels = Array3::from_shape_vec((1, 1, p), set.labels.clone())
        .map_err(|e| Error::Dimension(e.to_string()))?;
    let features: Array4<f32> = features;
    TaskExport::with_ignore_labels(features, labels, set.class_count, [])
}

/// Synthetic accuracy as an affine function of relatedness plus jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyModel {
    pub slope: f64,
    pub intercept: f64,
    #[serde(default)]
    pub jitter_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for AccuracyModel {
    fn default() -> Self {
        AccuracyModel {
            slope: 0.5,
            intercept: 0.3,
            jitter_sigma: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    /// Defaults to `src<index>`.
    #[serde(default)]
    pub id: Option<String>,
    #[serde(flatten)]
    pub spec: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetGroup {
    pub target_id: String,
    pub sources: Vec<SourceSpec>,
}

/// Contents of a generation spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationPlan {
    #[serde(default)]
    pub accuracy_model: AccuracyModel,
    #[serde(default = "default_metric")]
    pub metric: String,
    pub groups: Vec<TargetGroup>,
}

fn default_metric() -> String {
    "synthetic".into()
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl GenerationPlan {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    /// Replaces every seed in the plan with one derived from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.accuracy_model.seed = mix(seed, 0);
        let mut salt = 1;
        for g in &mut self.groups {
            for s in &mut g.sources {
                s.spec.seed = mix(seed, salt);
                salt += 1;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Validation("generation plan has no groups".into()));
        }
        for g in &self.groups {
            if g.sources.len() < 3 {
                return Err(Error::Validation(format!(
                    "target {:?} has {} sources, at least 3 needed",
                    g.target_id,
                    g.sources.len()
                )));
            }
            for s in &g.sources {
                s.spec.validate()?;
            }
        }
        let m = &self.accuracy_model;
        if !(m.slope.is_finite() && m.intercept.is_finite() && m.jitter_sigma >= 0.0) {
            return Err(Error::Validation(
                "accuracy model must be finite with sigma >= 0".into(),
            ));
        }
        Ok(())
    }
}

fn export_path(dir: &Path, source_id: &str, role: &str) -> PathBuf {
    dir.join(format!("{source_id}_{role}.otseg"))
}

/// Writes every pair in `plan` under `out_dir` plus `manifest.json`, and
/// returns the manifest with paths as written (relative to `out_dir`).
pub fn generate_manifest(plan: &GenerationPlan, out_dir: &Path) -> Result<EvalManifest> {
    plan.validate()?;
    let model = plan.accuracy_model;
    let jitter =
        Normal::new(0.0, model.jitter_sigma).map_err(|e| Error::Validation(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);

    let mut records = Vec::new();
    for group in &plan.groups {
        let group_dir = out_dir.join(&group.target_id);
        fs::create_dir_all(&group_dir).map_err(|e| Error::io(&group_dir, e))?;
        for (i, s) in group.sources.iter().enumerate() {
            let id = s.id.clone().unwrap_or_else(|| format!("src{i}"));
            let (source, target, relatedness) = generate_pair(&s.spec)?;
            let sp = export_path(&group_dir, &id, "source");
            let tp = export_path(&group_dir, &id, "target");
            save_task_export(&pixelset_to_export(&source)?, &sp)?;
            save_task_export(&pixelset_to_export(&target)?, &tp)?;
            let noise = if model.jitter_sigma > 0.0 {
                jitter.sample(&mut rng)
            } else {
                0.0
            };
            let accuracy = (model.slope * relatedness + model.intercept + noise).clamp(0.0, 1.0);
            let rel = |p: &Path| {
                p.strip_prefix(out_dir)
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|_| p.to_path_buf())
            };
            records.push(ManifestRecord {
                source_id: id,
                target_id: group.target_id.clone(),
                source_export_path: rel(&sp),
                target_export_path: rel(&tp),
                transfer_accuracy: accuracy,
            });
        }
    }
    let mut manifest = EvalManifest::new(plan.metric.clone(), records);
    manifest.metadata = serde_json::json!({
        "generator": "synthetic gaussian mixture",
        "accuracy_model": model,
    });
    manifest.validate()?;
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_spec_keeps_labels_consistent() {
        let spec = SyntheticSpec {
            pixels: 500,
            ..Default::default()
        };
        let (s, t, r) = generate_pair(&spec).unwrap();
        assert_eq!(r, 1.0);
        assert_eq!(s.len(), 500);
        assert_eq!(t.feature_dim(), 8);
        assert!(s.class_histogram().iter().all(|&c| c > 0));
    }

    #[test]
    fn full_noise_has_zero_relatedness() {
        let spec = SyntheticSpec {
            label_noise: 1.0,
            ..Default::default()
        };
        assert_eq!(generate_pair(&spec).unwrap().2, 0.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec {
            pixels: 300,
            label_noise: 0.3,
            label_map_scramble: 0.4,
            seed: 11,
            ..Default::default()
        };
        let a = generate_pair(&spec).unwrap();
        let b = generate_pair(&spec).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = generate_pair(&SyntheticSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            SyntheticSpec {
                class_count: 1,
                ..Default::default()
            },
            SyntheticSpec {
                class_count: 65535,
                ..Default::default()
            },
            SyntheticSpec {
                label_noise: 1.5,
                ..Default::default()
            },
            SyntheticSpec {
                label_map_scramble: -0.1,
                ..Default::default()
            },
            SyntheticSpec {
                pixels: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(generate_pair(&spec), Err(Error::Validation(_))));
        }
    }

    #[test]
    fn export_wrapping_roundtrips_through_flatten() {
        let (s, _, _) = generate_pair(&SyntheticSpec {
            pixels: 50,
            ..Default::default()
        })
        .unwrap();
        let export = pixelset_to_export(&s).unwrap();
        assert_eq!(export.dims(), (1, 1, 50, 8));
        assert_eq!(crate::pixelset::flatten_to_pixelset(&export).unwrap(), s);
    }

    #[test]
    fn reseed_changes_all_seeds() {
        let mut plan = GenerationPlan {
            accuracy_model: AccuracyModel::default(),
            metric: "m".into(),
            groups: vec![TargetGroup {
                target_id: "t".into(),
                sources: vec![
                    SourceSpec {
                        id: None,
                        spec: SyntheticSpec::default()
                    };
                    3
                ],
            }],
        };
        plan.reseed(5);
        let seeds: BTreeSet<u64> = plan.groups[0].sources.iter().map(|s| s.spec.seed).collect();
        assert_eq!(seeds.len(), 3);
    }
}
