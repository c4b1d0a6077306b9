//! Synthetic paired-modality classification data.
//!
//! Each entity draws a shared latent `s`, one informative latent per modality
//! (`u1`, `u2`) and one nuisance latent per modality. The label is the argmax
//! of a fixed linear score over `(s, u1, u2)`; modality `m` observes a random
//! linear mix of `s`, its own `u_m` and its own nuisance, plus Gaussian noise.
//! Neither modality sees the other's informative latent, and nuisance never
//! reaches the label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

const STREAM_MATRICES: u64 = 0;
const STREAM_LATENTS: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_TIES: u64 = 3;
const STREAM_ORACLE_BANK: u64 = 10;
const STREAM_ORACLE_DRAWS: u64 = 11;

/// Unknown-latent draws used to estimate class posteriors in the oracle.
const ORACLE_BANK: usize = 1000;
pub const MIN_ORACLE_DRAWS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_classes: usize,
    pub obs_dim_m1: usize,
    pub obs_dim_m2: usize,
    pub shared_dim: usize,
    pub spec_dim_m1: usize,
    pub spec_dim_m2: usize,
    pub nuis_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Tile each observation into a zero-padded `1 x H x H` grid.
    pub image_layout: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_classes: 4,
            obs_dim_m1: 16,
            obs_dim_m2: 12,
            shared_dim: 4,
            spec_dim_m1: 4,
            spec_dim_m2: 4,
            nuis_dim: 4,
            noise_sigma: 0.1,
            seed: 0,
            image_layout: false,
        }
    }
}

impl SynthConfig {
    /// Latent widths may be zero (a modality without informative factors);
    /// observation widths may not.
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if self.obs_dim_m1 == 0 || self.obs_dim_m2 == 0 {
            return Err(Error::Config("observation widths must be at least 1".into()));
        }
        if self.n_samples < self.n_classes {
            return Err(Error::Config(format!(
                "n_samples ({}) must be at least n_classes ({})",
                self.n_samples, self.n_classes
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn label_rule(&self) -> LabelRule {
        self.mixing().0
    }

    /// Observation shape per modality (flat, or `[1, H, H]` in image layout).
    pub fn obs_shape(&self, modality: usize) -> Vec<usize> {
        let dim = if modality == 0 {
            self.obs_dim_m1
        } else {
            self.obs_dim_m2
        };
        if self.image_layout {
            let side = image_side(dim);
            vec![1, side, side]
        } else {
            vec![dim]
        }
    }

    fn mixing(&self) -> (LabelRule, [Matrix; 2]) {
        let mut rng = stream(self.seed, STREAM_MATRICES);
        let label = LabelRule::balanced(
            Matrix::gaussian(self.n_classes, self.shared_dim, 1.0, &mut rng),
            Matrix::gaussian(self.n_classes, self.spec_dim_m1, 1.0, &mut rng),
            Matrix::gaussian(self.n_classes, self.spec_dim_m2, 1.0, &mut rng),
        );
        let in1 = self.shared_dim + self.spec_dim_m1 + self.nuis_dim;
        let in2 = self.shared_dim + self.spec_dim_m2 + self.nuis_dim;
        let a1 = Matrix::gaussian(self.obs_dim_m1, in1, 1.0 / (in1.max(1) as f64).sqrt(), &mut rng);
        let a2 = Matrix::gaussian(self.obs_dim_m2, in2, 1.0 / (in2.max(1) as f64).sqrt(), &mut rng);
        (label, [a1, a2])
    }
}

pub(crate) fn image_side(dim: usize) -> usize {
    let mut side = (dim as f64).sqrt() as usize;
    while side * side < dim {
        side += 1;
    }
    side
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq)]
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        for (r, o) in out.iter_mut().enumerate().take(self.rows) {
            *o += self.data[r * self.cols..(r + 1) * self.cols]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
    }
}

/// Fixed linear class scores over the latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRule {
    w_s: Matrix,
    w_u1: Matrix,
    w_u2: Matrix,
}

impl LabelRule {
    /// Centers every latent column across classes and rescales each class row
    /// (over all three blocks jointly) to unit norm, so no class dominates the
    /// argmax by scale alone.
    fn balanced(mut w_s: Matrix, mut w_u1: Matrix, mut w_u2: Matrix) -> Self {
        let classes = w_s.rows;
        for m in [&mut w_s, &mut w_u1, &mut w_u2] {
            for c in 0..m.cols {
                let mean = (0..classes).map(|r| m.data[r * m.cols + c]).sum::<f64>() / classes as f64;
                for r in 0..classes {
                    m.data[r * m.cols + c] -= mean;
                }
            }
        }
        for r in 0..classes {
            let norm = [&w_s, &w_u1, &w_u2]
                .iter()
                .flat_map(|m| &m.data[r * m.cols..(r + 1) * m.cols])
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > 0.0 {
                for m in [&mut w_s, &mut w_u1, &mut w_u2] {
                    for v in &mut m.data[r * m.cols..(r + 1) * m.cols] {
                        *v /= norm;
                    }
                }
            }
        }
        Self { w_s, w_u1, w_u2 }
    }

    pub fn n_classes(&self) -> usize {
        self.w_s.rows
    }

    pub fn scores(&self, s: &[f64], u1: &[f64], u2: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_classes()];
        self.w_s.apply_into(s, &mut out);
        self.w_u1.apply_into(u1, &mut out);
        self.w_u2.apply_into(u2, &mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    pub s: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub x_m1: Tensor,
    pub x_m2: Tensor,
    pub y: usize,
    pub latents: Option<Latents>,
}

impl PairedSample {
    pub fn modality(&self, m: usize) -> &Tensor {
        if m == 0 {
            &self.x_m1
        } else {
            &self.x_m2
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Synth(SynthConfig),
    Manifest(std::path::PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub samples: Vec<PairedSample>,
    pub n_classes: usize,
    pub source: DatasetSource,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn obs_shape(&self, modality: usize) -> Option<&[usize]> {
        self.samples.first().map(|s| s.modality(modality).shape())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.y).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for s in &self.samples {
            counts[s.y] += 1;
        }
        counts
    }

    pub fn subset(&self, idx: &[usize]) -> PairedDataset {
        PairedDataset {
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            n_classes: self.n_classes,
            source: self.source.clone(),
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Picks the argmax, breaking exact ties uniformly at random.
fn argmax_random_ties(scores: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] == best).collect();
    if tied.len() == 1 {
        tied[0]
    } else {
        tied[rng.random_range(0..tied.len())]
    }
}

pub fn generate(config: &SynthConfig) -> Result<PairedDataset> {
    config.validate()?;
    let (rule, [a1, a2]) = config.mixing();
    let mut latent_rng = stream(config.seed, STREAM_LATENTS);
    let mut noise_rng = stream(config.seed, STREAM_NOISE);
    let mut tie_rng = stream(config.seed, STREAM_TIES);
    let shapes = [config.obs_shape(0), config.obs_shape(1)];

    let mut samples = Vec::with_capacity(config.n_samples);
    for _ in 0..config.n_samples {
        let s = draw(&mut latent_rng, config.shared_dim);
        let u1 = draw(&mut latent_rng, config.spec_dim_m1);
        let u2 = draw(&mut latent_rng, config.spec_dim_m2);
        let n1 = draw(&mut latent_rng, config.nuis_dim);
        let n2 = draw(&mut latent_rng, config.nuis_dim);
        let y = argmax_random_ties(&rule.scores(&s, &u1, &u2), &mut tie_rng);

        let mut observe = |a: &Matrix, own: &[f64], nuis: &[f64], shape: &[usize]| {
            let z: Vec<f64> = s.iter().chain(own).chain(nuis).copied().collect();
            let mut x = vec![0.0; a.rows];
            a.apply_into(&z, &mut x);
            for v in &mut x {
                let eps: f64 = noise_rng.sample(StandardNormal);
                // Observations are kept at f32 precision so tensor-file
                // export and re-import is lossless.
                *v = (*v + config.noise_sigma * eps) as f32 as f64;
            }
            let numel: usize = shape.iter().product();
            x.resize(numel, 0.0);
            Tensor::new(shape.to_vec(), x).expect("observation shape")
        };
        let x_m1 = observe(&a1, &u1, &n1, &shapes[0]);
        let x_m2 = observe(&a2, &u2, &n2, &shapes[1]);
        samples.push(PairedSample {
            x_m1,
            x_m2,
            y,
            latents: Some(Latents { s, u1, u2 }),
        });
    }
    Ok(PairedDataset {
        samples,
        n_classes: config.n_classes,
        source: DatasetSource::Synth(config.clone()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCeilings {
    pub acc_shared_only_m1: f64,
    pub acc_shared_only_m2: f64,
    pub acc_full_m1: f64,
    pub acc_full_m2: f64,
}

/// Monte-Carlo Bayes accuracy of the label rule when only some latents are
/// known. For each of `n_mc` draws, class posteriors given the known latents
/// are estimated by scoring the rule against a fixed bank of draws of the
/// unknown latents (exact ties split evenly); the ceiling is the mean of the
/// largest posterior.
pub fn oracle_ceilings(config: &SynthConfig, n_mc: usize) -> Result<OracleCeilings> {
    config.validate()?;
    if n_mc < MIN_ORACLE_DRAWS {
        return Err(Error::Estimation(format!(
            "n_mc = {n_mc} is below the minimum of {MIN_ORACLE_DRAWS}"
        )));
    }
    let rule = config.label_rule();
    let zeros_s = vec![0.0; config.shared_dim];
    let zeros_u1 = vec![0.0; config.spec_dim_m1];
    let zeros_u2 = vec![0.0; config.spec_dim_m2];

    let mut bank_rng = stream(config.seed, STREAM_ORACLE_BANK);
    let mut bank1 = Vec::with_capacity(ORACLE_BANK);
    let mut bank2 = Vec::with_capacity(ORACLE_BANK);
    for _ in 0..ORACLE_BANK {
        let u1 = draw(&mut bank_rng, config.spec_dim_m1);
        let u2 = draw(&mut bank_rng, config.spec_dim_m2);
        bank1.push(rule.scores(&zeros_s, &u1, &zeros_u2));
        bank2.push(rule.scores(&zeros_s, &zeros_u1, &u2));
    }

    let mut draw_rng = stream(config.seed, STREAM_ORACLE_DRAWS);
    let (mut shared, mut full1, mut full2) = (0.0, 0.0, 0.0);
    for _ in 0..n_mc {
        let s = draw(&mut draw_rng, config.shared_dim);
        let u1 = draw(&mut draw_rng, config.spec_dim_m1);
        let u2 = draw(&mut draw_rng, config.spec_dim_m2);
        let base_s = rule.scores(&s, &zeros_u1, &zeros_u2);
        let base_1 = rule.scores(&s, &u1, &zeros_u2);
        let base_2 = rule.scores(&s, &zeros_u1, &u2);
        shared += posterior_max(&base_s, &[&bank1, &bank2]);
        full1 += posterior_max(&base_1, &[&bank2]);
        full2 += posterior_max(&base_2, &[&bank1]);
    }
    let n = n_mc as f64;
    Ok(OracleCeilings {
        acc_shared_only_m1: shared / n,
        acc_shared_only_m2: shared / n,
        acc_full_m1: full1 / n,
        acc_full_m2: full2 / n,
    })
}

/// Largest class posterior given known scores `base`, averaging over the
/// banked score contributions of the unknown latents.
fn posterior_max(base: &[f64], unknown: &[&Vec<Vec<f64>>]) -> f64 {
    let c = base.len();
    let mut mass = vec![0.0; c];
    let mut scores = vec![0.0; c];
    for j in 0..ORACLE_BANK {
        scores.copy_from_slice(base);
        for bank in unknown {
            for (s, u) in scores.iter_mut().zip(&bank[j]) {
                *s += u;
            }
        }
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ties = scores.iter().filter(|&&v| v == best).count() as f64;
        for (m, &v) in mass.iter_mut().zip(&scores) {
            if v == best {
                *m += 1.0 / ties;
            }
        }
    }
    mass.iter().copied().fold(0.0, f64::max) / ORACLE_BANK as f64
}

/// Predicts labels from raw latents with the known rule (no unknowns).
pub fn predict_from_latents(rule: &LabelRule, latents: &Latents) -> usize {
    argmax(&rule.scores(&latents.s, &latents.u1, &latents.u2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_samples: 200,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
    }

    #[test]
    fn different_seed_changes_data() {
        let other = SynthConfig { seed: 1, ..small() };
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn noiseless_labels_are_recoverable_from_latents() {
        let cfg = SynthConfig {
            n_samples: 1000,
            noise_sigma: 0.0,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        let rule = cfg.label_rule();
        let correct = data
            .samples
            .iter()
            .filter(|s| predict_from_latents(&rule, s.latents.as_ref().unwrap()) == s.y)
            .count();
        assert_eq!(correct, 1000);
    }

    #[test]
    fn noise_changes_observations_not_labels() {
        let quiet = generate(&SynthConfig { noise_sigma: 0.0, ..small() }).unwrap();
        let loud = generate(&SynthConfig { noise_sigma: 2.0, ..small() }).unwrap();
        assert_eq!(quiet.labels(), loud.labels());
        assert_ne!(quiet.samples[0].x_m1, loud.samples[0].x_m1);
    }

    #[test]
    fn default_class_frequencies_are_balanced() {
        let data = generate(&SynthConfig::default()).unwrap();
        for count in data.class_counts() {
            let f = count as f64 / data.len() as f64;
            assert!((0.15..=0.35).contains(&f), "class frequency {f}");
        }
    }

    #[test]
    fn image_layout_pads_to_square() {
        let cfg = SynthConfig {
            image_layout: true,
            ..small()
        };
        let data = generate(&cfg).unwrap();
        assert_eq!(data.samples[0].x_m1.shape(), &[1, 4, 4]);
        assert_eq!(data.samples[0].x_m2.shape(), &[1, 4, 4]);
        // 12 values then 4 zero pads
        assert!(data.samples[0].x_m2.data()[12..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = SynthConfig {
            n_classes: 1,
            ..small()
        };
        assert!(matches!(generate(&bad), Err(Error::Config(_))));
        let bad = SynthConfig {
            obs_dim_m1: 0,
            ..small()
        };
        assert!(matches!(generate(&bad), Err(Error::Config(_))));
        let bad = SynthConfig {
            n_samples: 3,
            ..small()
        };
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn oracle_requires_enough_draws() {
        assert!(matches!(
            oracle_ceilings(&small(), 100),
            Err(Error::Estimation(_))
        ));
    }

    #[test]
    fn oracle_without_specific_latents_has_no_gap() {
        let cfg = SynthConfig {
            spec_dim_m1: 0,
            spec_dim_m2: 0,
            ..small()
        };
        let o = oracle_ceilings(&cfg, MIN_ORACLE_DRAWS).unwrap();
        assert_eq!(o.acc_shared_only_m1, o.acc_full_m1);
        assert_eq!(o.acc_shared_only_m2, o.acc_full_m2);
    }

    #[test]
    fn oracle_without_informative_latents_is_chance() {
        let cfg = SynthConfig {
            n_classes: 2,
            shared_dim: 0,
            spec_dim_m1: 0,
            spec_dim_m2: 0,
            noise_sigma: 0.7,
            ..small()
        };
        let o = oracle_ceilings(&cfg, MIN_ORACLE_DRAWS).unwrap();
        for v in [o.acc_shared_only_m1, o.acc_shared_only_m2, o.acc_full_m1, o.acc_full_m2] {
            assert!((v - 0.5).abs() < 1e-12);
        }
        // the generated labels follow the 50/50 prior
        let data = generate(&cfg).unwrap();
        let ones = data.labels().iter().filter(|&&y| y == 1).count() as f64;
        assert!((ones / data.len() as f64 - 0.5).abs() < 0.1);
    }

    #[test]
    fn default_oracle_has_strict_gap() {
        let o = oracle_ceilings(&SynthConfig::default(), MIN_ORACLE_DRAWS).unwrap();
        assert!(o.acc_full_m1 > o.acc_shared_only_m1, "{o:?}");
        assert!(o.acc_full_m2 > o.acc_shared_only_m2, "{o:?}");
    }
}
