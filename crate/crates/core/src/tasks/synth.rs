use serde::{Deserialize, Serialize};

use super::{ClinicalFeatures, ItemStore, LabeledEmbedding, NO_FINDING};
use crate::error::{Error, Result};
use crate::numerics::{norm, SeededRng};

/// Parameters of the synthetic embedding generator.
///
/// Clean items are Gaussian around a cluster mean
/// `mean_offset * 1 + cluster_separation * u`, where `u` is a random unit
/// direction per condition (and one shared direction for No-Finding).
/// Corrupted items keep their label but have their embedding replaced by
/// isotropic zero-mean noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub dim: usize,
    pub n_conditions: u32,
    pub positives_per_condition: usize,
    pub no_finding_items: usize,
    /// Component shared by every clean cluster mean (per coordinate).
    pub mean_offset: f64,
    /// Norm of the class-specific part of each cluster mean. Zero makes
    /// positives and negatives identically distributed.
    pub cluster_separation: f64,
    /// Per-coordinate standard deviation inside a clean cluster.
    pub cluster_scale: f64,
    /// Per-coordinate standard deviation of corrupted embeddings.
    pub noise_scale: f64,
    pub corruption_fraction: f64,
    /// P(frontal) for clean and for corrupted items; a gap between the two
    /// correlates laterality with corruption.
    pub frontal_prob_clean: f64,
    pub frontal_prob_corrupted: f64,
    pub female_prob: f64,
    pub age_mean: f64,
    pub age_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            n_conditions: 8,
            positives_per_condition: 1000,
            no_finding_items: 5000,
            mean_offset: 1.0,
            cluster_separation: 2.0,
            cluster_scale: 0.6,
            noise_scale: 0.85,
            corruption_fraction: 0.5,
            frontal_prob_clean: 0.85,
            frontal_prob_corrupted: 0.35,
            female_prob: 0.45,
            age_mean: 58.0,
            age_std: 17.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim < 2 {
            return fail(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.n_conditions == 0 {
            return fail("n_conditions must be positive".into());
        }
        if !(self.cluster_scale > 0.0) || !(self.noise_scale > 0.0) {
            return fail(format!(
                "covariance scales must be positive (cluster_scale {}, noise_scale {})",
                self.cluster_scale, self.noise_scale
            ));
        }
        if !(self.age_std >= 0.0) || !self.mean_offset.is_finite() || !(self.cluster_separation >= 0.0)
        {
            return fail("age_std, cluster_separation must be >= 0 and mean_offset finite".into());
        }
        for (name, p) in [
            ("corruption_fraction", self.corruption_fraction),
            ("frontal_prob_clean", self.frontal_prob_clean),
            ("frontal_prob_corrupted", self.frontal_prob_corrupted),
            ("female_prob", self.female_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if !(0.0..=120.0).contains(&self.age_mean) {
            return fail(format!("age_mean {} outside [0, 120]", self.age_mean));
        }
        Ok(())
    }
}

fn unit_direction(dim: usize, rng: &mut SeededRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Generates a labeled item store.
///
/// Item ids are assigned sequentially from 1: condition positives in
/// condition order, then No-Finding items. Embeddings and ages are rounded
/// to `f32` so the store round-trips through the binary file exactly.
pub fn generate_synthetic_dataset(config: &SynthConfig, rng: &mut SeededRng) -> Result<ItemStore> {
    config.validate()?;
    let d = config.dim;
    let offset = vec![config.mean_offset; d];
    let cluster_mean = |rng: &mut SeededRng| -> Vec<f64> {
        let u = unit_direction(d, rng);
        offset
            .iter()
            .zip(&u)
            .map(|(o, ui)| o + config.cluster_separation * ui)
            .collect()
    };
    let condition_means: Vec<Vec<f64>> =
        (0..config.n_conditions).map(|_| cluster_mean(rng)).collect();
    let no_finding_mean = cluster_mean(rng);

    let mut items = Vec::with_capacity(
        config.positives_per_condition * config.n_conditions as usize + config.no_finding_items,
    );
    let mut next_id = 1u64;
    let mut emit = |mean: &[f64], label: u8, condition: u32, rng: &mut SeededRng| {
        let corrupted = rng.bernoulli(config.corruption_fraction);
        let embedding: Vec<f64> = if corrupted {
            (0..d)
                .map(|_| (config.noise_scale * rng.normal()) as f32 as f64)
                .collect()
        } else {
            mean.iter()
                .map(|m| (m + config.cluster_scale * rng.normal()) as f32 as f64)
                .collect()
        };
        let frontal_p = if corrupted {
            config.frontal_prob_corrupted
        } else {
            config.frontal_prob_clean
        };
        let laterality = u8::from(rng.bernoulli(frontal_p));
        let sex = u8::from(rng.bernoulli(config.female_prob));
        let age = (config.age_mean + config.age_std * rng.normal()).clamp(18.0, 100.0) as f32 as f64;
        items.push(LabeledEmbedding {
            item_id: next_id,
            embedding,
            label,
            condition,
            clinical: ClinicalFeatures {
                age,
                sex,
                laterality,
            },
        });
        next_id += 1;
    };
    for (c, mean) in condition_means.iter().enumerate() {
        for _ in 0..config.positives_per_condition {
            emit(mean, 1, c as u32, rng);
        }
    }
    for _ in 0..config.no_finding_items {
        emit(&no_finding_mean, 0, NO_FINDING, rng);
    }
    ItemStore::new(d, config.n_conditions, items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            positives_per_condition: 50,
            no_finding_items: 100,
            n_conditions: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_synthetic_dataset(&small(), &mut SeededRng::new(5)).unwrap();
        let b = generate_synthetic_dataset(&small(), &mut SeededRng::new(5)).unwrap();
        assert_eq!(a.items(), b.items());
        let c = generate_synthetic_dataset(&small(), &mut SeededRng::new(6)).unwrap();
        assert_ne!(a.items(), c.items());
    }

    #[test]
    fn counts_and_labels() {
        let s = generate_synthetic_dataset(&small(), &mut SeededRng::new(1)).unwrap();
        assert_eq!(s.len(), 250);
        assert_eq!(s.items().iter().filter(|i| i.label == 1).count(), 150);
        assert!(s
            .items()
            .iter()
            .all(|i| (i.label == 0) == (i.condition == NO_FINDING)));
    }

    #[test]
    fn rejects_bad_config() {
        for bad in [
            SynthConfig { dim: 1, ..small() },
            SynthConfig { cluster_scale: 0.0, ..small() },
            SynthConfig { noise_scale: -1.0, ..small() },
            SynthConfig { corruption_fraction: 1.5, ..small() },
        ] {
            assert!(matches!(
                generate_synthetic_dataset(&bad, &mut SeededRng::new(1)),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn laterality_tracks_corruption() {
        let cfg = SynthConfig {
            positives_per_condition: 2000,
            n_conditions: 1,
            no_finding_items: 2000,
            frontal_prob_clean: 1.0,
            frontal_prob_corrupted: 0.0,
            cluster_scale: 0.1,
            ..SynthConfig::default()
        };
        let s = generate_synthetic_dataset(&cfg, &mut SeededRng::new(2)).unwrap();
        // clean items sit near the positive offset; corrupted ones are zero-mean
        for item in s.items() {
            let mean: f64 = item.embedding.iter().sum::<f64>() / cfg.dim as f64;
            if item.clinical.is_frontal() {
                assert!(mean > 0.3, "{mean}");
            }
        }
        let frontal = s.items().iter().filter(|i| i.clinical.is_frontal()).count();
        let frac = frontal as f64 / s.len() as f64;
        assert!((frac - 0.5).abs() < 0.03, "{frac}");
    }
}
