//! Paired geometric augmentation: one random draw, applied to both modalities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::PairedSample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub enable_hflip: bool,
    pub enable_vflip: bool,
    pub enable_rot90: bool,
    /// Chance that each enabled transform fires for a given sample.
    pub probability: f64,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            enable_hflip: false,
            enable_vflip: false,
            enable_rot90: false,
            probability: 0.5,
            seed: 0,
        }
    }
}

/// A concrete transform: flips first, then `quarter_turns` counter-clockwise
/// quarter turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
}

impl AugmentDraw {
    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.quarter_turns.is_multiple_of(4)
    }
}

impl AugmentSpec {
    pub fn any_enabled(&self) -> bool {
        self.enable_hflip || self.enable_vflip || self.enable_rot90
    }

    /// Checks that samples of this shape can be augmented.
    pub fn check_shape(&self, shape: &[usize]) -> Result<()> {
        if !self.any_enabled() {
            return Ok(());
        }
        let &[_, h, w] = shape else {
            return Err(Error::Augment(format!(
                "geometric augmentation needs [C, H, W] observations, got {shape:?}"
            )));
        };
        if self.enable_rot90 && h != w {
            return Err(Error::Augment(format!(
                "rot90 needs square images, got {h}x{w}"
            )));
        }
        Ok(())
    }

    pub fn draw(&self, rng: &mut impl Rng) -> AugmentDraw {
        let mut d = AugmentDraw::default();
        if self.enable_hflip {
            d.hflip = rng.random_bool(self.probability);
        }
        if self.enable_vflip {
            d.vflip = rng.random_bool(self.probability);
        }
        if self.enable_rot90 && rng.random_bool(self.probability) {
            d.quarter_turns = rng.random_range(1..4);
        }
        d
    }
}

/// Applies one random draw to both modalities; the label is untouched.
pub fn augment(sample: &PairedSample, spec: &AugmentSpec, rng: &mut impl Rng) -> Result<PairedSample> {
    if !spec.any_enabled() {
        return Ok(sample.clone());
    }
    spec.check_shape(sample.x_m1.shape())?;
    spec.check_shape(sample.x_m2.shape())?;
    let draw = spec.draw(rng);
    apply_draw(sample, draw)
}

pub fn apply_draw(sample: &PairedSample, draw: AugmentDraw) -> Result<PairedSample> {
    if draw.is_identity() {
        return Ok(sample.clone());
    }
    Ok(PairedSample {
        x_m1: transform(&sample.x_m1, draw)?,
        x_m2: transform(&sample.x_m2, draw)?,
        y: sample.y,
        latents: sample.latents.clone(),
    })
}

fn transform(img: &Tensor, draw: AugmentDraw) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::Augment(format!(
            "geometric augmentation needs [C, H, W] observations, got {:?}",
            img.shape()
        )));
    };
    let turns = draw.quarter_turns % 4;
    if turns % 2 == 1 && h != w {
        return Err(Error::Augment(format!("rot90 needs square images, got {h}x{w}")));
    }
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                // position in the flipped image, then undo `turns` CCW turns
                let (mut si, mut sj) = (i, j);
                for _ in 0..turns {
                    // out[i][j] = in[j][w - 1 - i] for one CCW turn
                    (si, sj) = (sj, w - 1 - si);
                }
                if draw.vflip {
                    si = h - 1 - si;
                }
                if draw.hflip {
                    sj = w - 1 - sj;
                }
                dst[i * w + j] = plane[si * w + sj];
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(m1: Vec<f64>, m2: Vec<f64>, side: usize) -> PairedSample {
        PairedSample {
            x_m1: Tensor::new(vec![1, side, side], m1).unwrap(),
            x_m2: Tensor::new(vec![1, side, side], m2).unwrap(),
            y: 3,
            latents: None,
        }
    }

    #[test]
    fn disabled_spec_is_identity() {
        let s = pair(vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&s, &AugmentSpec::default(), &mut rng).unwrap(), s);
    }

    #[test]
    fn quarter_turn_matches_hand_computation() {
        let s = pair(vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 2.0, 3.0, 4.0], 2);
        let draw = AugmentDraw {
            quarter_turns: 1,
            ..AugmentDraw::default()
        };
        let out = apply_draw(&s, draw).unwrap();
        assert_eq!(out.x_m1.data(), &[2.0, 4.0, 1.0, 3.0]);
        assert_eq!(out.y, 3);
    }

    #[test]
    fn hflip_is_an_involution() {
        let s = pair((0..9).map(f64::from).collect(), (9..18).map(f64::from).collect(), 3);
        let draw = AugmentDraw {
            hflip: true,
            ..AugmentDraw::default()
        };
        let once = apply_draw(&s, draw).unwrap();
        assert_ne!(once, s);
        assert_eq!(once.x_m1.data()[..3], [2.0, 1.0, 0.0]);
        assert_eq!(apply_draw(&once, draw).unwrap(), s);
    }

    #[test]
    fn four_quarter_turns_compose_to_identity() {
        let s = pair((0..9).map(f64::from).collect(), (9..18).map(f64::from).collect(), 3);
        let mut cur = s.clone();
        for _ in 0..4 {
            cur = apply_draw(
                &cur,
                AugmentDraw {
                    quarter_turns: 1,
                    ..AugmentDraw::default()
                },
            )
            .unwrap();
        }
        assert_eq!(cur, s);
        let three = apply_draw(
            &s,
            AugmentDraw {
                quarter_turns: 3,
                ..AugmentDraw::default()
            },
        )
        .unwrap();
        let one = apply_draw(&three, AugmentDraw { quarter_turns: 1, ..Default::default() }).unwrap();
        assert_eq!(one, s);
    }

    #[test]
    fn both_modalities_receive_the_same_transform() {
        let base: Vec<f64> = (0..16).map(f64::from).collect();
        let s = pair(base.clone(), base, 4);
        let spec = AugmentSpec {
            enable_hflip: true,
            enable_vflip: true,
            enable_rot90: true,
            ..AugmentSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let out = augment(&s, &spec, &mut rng).unwrap();
            assert_eq!(out.x_m1, out.x_m2);
            assert_eq!(out.y, s.y);
        }
    }

    #[test]
    fn rot90_on_rectangular_images_fails() {
        let s = PairedSample {
            x_m1: Tensor::zeros(&[1, 2, 3]),
            x_m2: Tensor::zeros(&[1, 2, 3]),
            y: 0,
            latents: None,
        };
        let spec = AugmentSpec {
            enable_rot90: true,
            ..AugmentSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(augment(&s, &spec, &mut rng), Err(Error::Augment(_))));
    }

    #[test]
    fn flat_observations_cannot_be_augmented() {
        let spec = AugmentSpec {
            enable_hflip: true,
            ..AugmentSpec::default()
        };
        assert!(spec.check_shape(&[16]).is_err());
    }
}
