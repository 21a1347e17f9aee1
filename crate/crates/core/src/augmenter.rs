//! Densification by sampling candidate points around existing ones and keeping
//! those whose learned features turn out to carry signal.

use std::path::Path;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scene::{PointCloud, Scene};
use crate::trainer::{TrainConfig, Trainer};

/// Pseudo-density cut-off for candidates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum Threshold {
    /// Percentile in `(0, 100)` of the existing points' densities.
    Percentile(f64),
    Absolute(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Candidates per round; half the current cloud size when unset.
    pub n_candidates: Option<usize>,
    /// Gaussian std as a multiple of the median nearest-neighbour distance.
    pub sigma_scale: f64,
    pub threshold: Threshold,
    pub iterations: usize,
    /// Training steps between sampling and pruning; one epoch when unset.
    pub verify_train_steps: Option<usize>,
    /// Retrain from a fresh model every round instead of fine-tuning.
    pub from_scratch: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            n_candidates: None,
            sigma_scale: 3.0,
            threshold: Threshold::Percentile(10.0),
            iterations: 1,
            verify_train_steps: None,
            from_scratch: false,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_scale.is_finite() && self.sigma_scale >= 0.0) {
            return Err(Error::Config(format!("sigma_scale must be >= 0, got {}", self.sigma_scale)));
        }
        match self.threshold {
            Threshold::Percentile(p) if !(p > 0.0 && p < 100.0) => {
                Err(Error::Config(format!("threshold percentile must lie in (0, 100), got {p}")))
            }
            Threshold::Absolute(v) if !v.is_finite() => Err(Error::Config("absolute threshold must be finite".into())),
            _ => Ok(()),
        }
    }
}

/// Median distance from each point to its nearest other point.
pub fn median_nn_distance(points: &[[f32; 3]]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let pts: Vec<[f64; 3]> = points.iter().map(|p| p.map(f64::from)).collect();
    let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(&pts);
    let mut d: Vec<f64> = pts
        .iter()
        .map(|q| {
            let nn = tree.nearest_n::<SquaredEuclidean>(q, 2);
            nn.get(1).map_or(0.0, |n| n.distance.sqrt())
        })
        .collect();
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Candidates drawn around uniformly chosen parents, with the parent indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Candidates {
    pub cloud: PointCloud,
    pub parents: Vec<usize>,
    pub sigma: f64,
}

pub fn sample_candidates(cloud: &PointCloud, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Candidates> {
    if cloud.is_empty() {
        return Err(Error::Data("cannot sample candidates around an empty cloud".into()));
    }
    config.validate()?;
    let n = config.n_candidates.unwrap_or(cloud.len() / 2);
    let sigma = config.sigma_scale * median_nn_distance(&cloud.positions);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut positions = Vec::with_capacity(n);
    let mut colors = cloud.colors.as_ref().map(|_| Vec::with_capacity(n));
    let mut parents = Vec::with_capacity(n);
    for _ in 0..n {
        let p = rng.gen_range(0..cloud.len());
        let base = cloud.positions[p];
        positions.push(base.map(|v| (v as f64 + normal.sample(rng)) as f32));
        if let (Some(out), Some(src)) = (colors.as_mut(), cloud.colors.as_ref()) {
            out.push(src[p]);
        }
        parents.push(p);
    }
    Ok(Candidates {
        cloud: PointCloud { positions, colors },
        parents,
        sigma,
    })
}

/// Linear-interpolated percentile of `values`.
pub fn percentile(values: &[f32], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// What one verification pass measured and decided.
#[derive(Clone, Debug, PartialEq)]
pub struct Verification {
    /// Pseudo density of each candidate after training.
    pub sigma: Vec<f32>,
    pub threshold: f64,
    pub kept: Vec<bool>,
}

/// Appends `candidates` with zero features, trains, and drops the candidates
/// whose pseudo density falls below the threshold. Points already in the model
/// are never removed.
pub fn verify_and_prune(trainer: &mut Trainer, candidates: &PointCloud, config: &AugmentConfig) -> Result<Verification> {
    config.validate()?;
    let n0 = trainer.model.cloud.len();
    trainer.append_points(candidates);
    let steps = config.verify_train_steps.unwrap_or(trainer.steps_per_epoch());
    trainer.run_steps(steps)?;
    let density = trainer.model.texture.pseudo_density();
    let threshold = match config.threshold {
        Threshold::Percentile(p) => percentile(&density[..n0], p),
        Threshold::Absolute(v) => v,
    };
    let sigma = density[n0..].to_vec();
    let kept: Vec<bool> = sigma.iter().map(|&s| s as f64 >= threshold).collect();
    let n_kept = kept.iter().filter(|&&k| k).count();
    if n_kept == 0 && !kept.is_empty() {
        warn!("all {} candidates fell below the density threshold {threshold:.4}; cloud unchanged", kept.len());
    }
    let keep: Vec<bool> = std::iter::repeat(true).take(n0).chain(kept.iter().copied()).collect();
    trainer.retain_points(&keep)?;
    info!("kept {n_kept} of {} candidates (threshold {threshold:.4})", kept.len());
    Ok(Verification { sigma, threshold, kept })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub points_before: usize,
    pub candidates: usize,
    pub kept: usize,
    pub sample_sigma: f64,
    pub threshold: f64,
    /// Parent index (in the cloud at the start of the round) of every kept point,
    /// in the order the points were appended.
    pub parents: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub original_points: usize,
    pub config: Option<AugmentConfig>,
    pub rounds: Vec<RoundRecord>,
}

impl Provenance {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = path.as_ref();
        std::fs::write(p, serde_json::to_string_pretty(self).expect("provenance serializes")).map_err(|e| Error::io(p, e))
    }
}

pub struct Augmented {
    pub model: Model,
    pub provenance: Provenance,
}

/// Runs `iterations` rounds of sample, verify and prune. `model` continues an
/// earlier training run; without it the first round starts from a fresh model.
pub fn augment(scene: &Scene, train: &TrainConfig, config: &AugmentConfig, model: Option<Model>) -> Result<Augmented> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = match model {
        Some(m) => m,
        None => Trainer::new(scene, train.clone())?.into_model(),
    };
    let mut provenance = Provenance {
        original_points: model.cloud.len(),
        config: Some(config.clone()),
        rounds: Vec::new(),
    };
    for round in 1..=config.iterations {
        let mut trainer = if config.from_scratch {
            let mut s = scene.clone();
            s.cloud = model.cloud.clone();
            Trainer::new(&s, train.clone())?
        } else {
            Trainer::with_model(scene, train.clone(), model)?
        };
        let before = trainer.model.cloud.len();
        let cand = sample_candidates(&trainer.model.cloud, config, &mut rng)?;
        let v = verify_and_prune(&mut trainer, &cand.cloud, config)?;
        let parents: Vec<usize> = cand.parents.iter().zip(&v.kept).filter(|(_, &k)| k).map(|(&p, _)| p).collect();
        provenance.rounds.push(RoundRecord {
            round,
            points_before: before,
            candidates: cand.parents.len(),
            kept: parents.len(),
            sample_sigma: cand.sigma,
            threshold: v.threshold,
            parents,
        });
        model = trainer.into_model();
    }
    Ok(Augmented { model, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> PointCloud {
        let mut p = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                p.push([i as f32 * 0.1, j as f32 * 0.1, 0.0]);
            }
        }
        PointCloud::new(p)
    }

    #[test]
    fn median_nn_on_grid() {
        assert!((median_nn_distance(&grid().positions) - 0.1).abs() < 1e-6);
        assert_eq!(median_nn_distance(&[[1.0, 2.0, 3.0]]), 0.0);
    }

    #[test]
    fn zero_std_duplicates_parents_and_zero_count_is_empty() {
        let c = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AugmentConfig { sigma_scale: 0.0, n_candidates: Some(20), ..Default::default() };
        let s = sample_candidates(&c, &cfg, &mut rng).unwrap();
        for (p, &parent) in s.cloud.positions.iter().zip(&s.parents) {
            assert_eq!(*p, c.positions[parent]);
        }
        let cfg = AugmentConfig { n_candidates: Some(0), ..Default::default() };
        assert!(sample_candidates(&c, &cfg, &mut rng).unwrap().cloud.is_empty());
        assert_eq!(sample_candidates(&c, &AugmentConfig::default(), &mut rng).unwrap().parents.len(), 50);
        assert!(sample_candidates(&PointCloud::default(), &AugmentConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn radial_spread_matches_gaussian() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let cfg = AugmentConfig { n_candidates: Some(100_000), sigma_scale: 0.5, ..Default::default() };
        let s = sample_candidates(&c, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mean = s
            .cloud
            .positions
            .iter()
            .zip(&s.parents)
            .map(|(p, &k)| {
                let q = c.positions[k];
                ((0..3).map(|i| ((p[i] - q[i]) as f64).powi(2)).sum::<f64>()).sqrt()
            })
            .sum::<f64>()
            / 100_000.0;
        let want = 0.5 * 2.0 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean / want - 1.0).abs() < 0.05, "{mean} vs {want}");
    }

    #[test]
    fn percentiles_and_validation() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert_eq!(percentile(&v, 10.0), 1.4);
        assert!(AugmentConfig { threshold: Threshold::Percentile(100.0), ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { threshold: Threshold::Percentile(0.0), ..Default::default() }.validate().is_err());
        let t: AugmentConfig = toml::from_str("threshold = { kind = \"absolute\", value = 180.0 }").unwrap();
        assert_eq!(t.threshold, Threshold::Absolute(180.0));
    }
}
