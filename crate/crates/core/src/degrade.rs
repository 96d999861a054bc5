// SPDX-License-Identifier: MIT OR Apache-2.0

//! Visual degradations of a patch grid, and the random contrast inputs used
//! by the stochastic-contrast baseline.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::artifact::rng_for;
use crate::error::{MesaError, Result};
use crate::tensor::Matrix;
use crate::world::{PatchGrid, World};

/// One member of the degradation family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradationSpec {
    /// Adds `N(0, sigma²)` to every coordinate.
    GaussianNoise { sigma: f64, seed: u64 },
    /// Replaces `round(ratio · N)` seeded patches with the zero vector.
    PatchMask { ratio: f64, seed: u64 },
    /// Box average over the `(2r+1)²` neighbourhood, clipped at the border.
    Blur { radius: usize },
    /// Splits the grid into `grid × grid` blocks and shuffles them.
    Jigsaw { grid: usize, seed: u64 },
    /// Every patch becomes the null prototype.
    TextOnly,
}

impl DegradationSpec {
    pub fn text_only() -> Self {
        Self::TextOnly
    }

    /// Gaussian noise, patch mask, blur, jigsaw and text-only at the default strengths.
    pub fn default_family(seed: u64) -> Vec<Self> {
        vec![
            Self::GaussianNoise { sigma: 0.5, seed },
            Self::PatchMask { ratio: 0.5, seed },
            Self::Blur { radius: 1 },
            Self::Jigsaw { grid: 2, seed },
            Self::TextOnly,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::GaussianNoise { .. } => "gaussian_noise",
            Self::PatchMask { .. } => "patch_mask",
            Self::Blur { .. } => "blur",
            Self::Jigsaw { .. } => "jigsaw",
            Self::TextOnly => "text_only",
        }
    }

    /// The same degradation with its randomness re-keyed (per-sample seeds).
    pub fn reseeded(&self, new_seed: u64) -> Self {
        match self.clone() {
            Self::GaussianNoise { sigma, .. } => Self::GaussianNoise { sigma, seed: new_seed },
            Self::PatchMask { ratio, .. } => Self::PatchMask { ratio, seed: new_seed },
            Self::Jigsaw { grid, .. } => Self::Jigsaw { grid, seed: new_seed },
            other => other,
        }
    }

    pub fn validate(&self, grid_h: usize, grid_w: usize) -> Result<()> {
        match *self {
            Self::GaussianNoise { sigma, .. } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(MesaError::config("noise sigma must be finite and >= 0"))
            }
            Self::PatchMask { ratio, .. } if !(0.0..=1.0).contains(&ratio) => {
                Err(MesaError::config("mask ratio must lie in [0, 1]"))
            }
            Self::Jigsaw { grid, .. } if grid == 0 || !grid_h.is_multiple_of(grid) || !grid_w.is_multiple_of(grid) => {
                Err(MesaError::config(format!(
                    "jigsaw grid {grid} does not divide the {grid_h}x{grid_w} patch grid"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Applies one degradation. Pure in `(grid, spec)`.
pub fn apply(world: &World, grid: &PatchGrid, spec: &DegradationSpec) -> Result<PatchGrid> {
    apply_with_null(world.null_prototype(), grid, spec)
}

/// [`apply`] with an explicit null prototype (no world needed).
pub fn apply_with_null(null: &[f64], grid: &PatchGrid, spec: &DegradationSpec) -> Result<PatchGrid> {
    spec.validate(grid.grid_h, grid.grid_w)?;
    let (h, w, dp) = (grid.grid_h, grid.grid_w, grid.patch_dim());
    let src = &grid.patches;
    let patches = match *spec {
        DegradationSpec::GaussianNoise { sigma, seed } => {
            let mut out = src.clone();
            if sigma > 0.0 {
                let mut rng = rng_for(seed, "degrade/noise");
                for v in out.data_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += sigma * z;
                }
            }
            out
        }
        DegradationSpec::PatchMask { ratio, seed } => {
            let mut out = src.clone();
            for i in mask_indices(h * w, ratio, seed) {
                out.row_mut(i).fill(0.0);
            }
            out
        }
        DegradationSpec::Blur { radius } => {
            let mut out = Matrix::zeros(h * w, dp);
            for r in 0..h {
                for c in 0..w {
                    let (r0, r1) = (r.saturating_sub(radius), (r + radius).min(h - 1));
                    let (c0, c1) = (c.saturating_sub(radius), (c + radius).min(w - 1));
                    let count = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
                    let dst = out.row_mut(r * w + c);
                    for rr in r0..=r1 {
                        for cc in c0..=c1 {
                            for (d, s) in dst.iter_mut().zip(src.row(rr * w + cc)) {
                                *d += s;
                            }
                        }
                    }
                    if radius > 0 {
                        dst.iter_mut().for_each(|d| *d /= count);
                    }
                }
            }
            out
        }
        DegradationSpec::Jigsaw { grid: g, seed } => {
            let perm = jigsaw_permutation(g * g, seed);
            let (bh, bw) = (h / g, w / g);
            let mut out = Matrix::zeros(h * w, dp);
            // Destination block `b` receives source block `perm[b]`.
            for (b, &s) in perm.iter().enumerate() {
                let (br, bc) = (b / g, b % g);
                let (sr, sc) = (s / g, s % g);
                for i in 0..bh {
                    for j in 0..bw {
                        let from = (sr * bh + i) * w + sc * bw + j;
                        let to = (br * bh + i) * w + bc * bw + j;
                        out.row_mut(to).copy_from_slice(src.row(from));
                    }
                }
            }
            out
        }
        DegradationSpec::TextOnly => {
            if null.len() != dp {
                return Err(MesaError::input("null prototype width differs from patch dimension"));
            }
            let mut out = Matrix::zeros(h * w, dp);
            for i in 0..h * w {
                out.row_mut(i).copy_from_slice(null);
            }
            out
        }
    };
    Ok(PatchGrid {
        grid_h: h,
        grid_w: w,
        patches,
        provenance: grid.provenance.clone(),
    }
    .with_tag(spec.name()))
}

fn mask_indices(n: usize, ratio: f64, seed: u64) -> Vec<usize> {
    let count = (ratio * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, "degrade/mask"));
    idx.truncate(count.min(n));
    idx
}

/// Seeded Fisher–Yates permutation of `0..n` used by the jigsaw degradation.
pub fn jigsaw_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_for(seed, "degrade/jigsaw");
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Strengths of the random contrast inputs (noise then mask).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastConfig {
    pub sigma: f64,
    pub mask_ratio: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            mask_ratio: 0.25,
        }
    }
}

/// `n` independently seeded noise-and-mask perturbations of `grid`.
pub fn stochastic_contrast_inputs(
    grid: &PatchGrid,
    n: usize,
    cfg: &ContrastConfig,
    seed: u64,
) -> Result<Vec<PatchGrid>> {
    if n == 0 {
        return Err(MesaError::config("stochastic contrast needs n >= 1"));
    }
    (0..n)
        .map(|i| {
            let s = crate::artifact::split_seed(seed, &format!("contrast/{i}"));
            let noisy = apply_with_null(
                &[],
                grid,
                &DegradationSpec::GaussianNoise {
                    sigma: cfg.sigma,
                    seed: s,
                },
            )?;
            let masked = apply_with_null(
                &[],
                &noisy,
                &DegradationSpec::PatchMask {
                    ratio: cfg.mask_ratio,
                    seed: s,
                },
            )?;
            Ok(masked.with_tag("stochastic_contrast"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldConfig;

    fn world() -> World {
        World::new(WorldConfig::default()).unwrap()
    }

    fn grid(world: &World, seed: u64) -> PatchGrid {
        world.render(&world.generate_scene(seed), seed)
    }

    #[test]
    fn zero_strength_noise_is_identity() {
        let w = world();
        let g = grid(&w, 1);
        let out = apply(&w, &g, &DegradationSpec::GaussianNoise { sigma: 0.0, seed: 3 }).unwrap();
        assert_eq!(out.patches, g.patches);
    }

    #[test]
    fn full_mask_zeroes_everything() {
        let w = world();
        let out = apply(&w, &grid(&w, 2), &DegradationSpec::PatchMask { ratio: 1.0, seed: 3 }).unwrap();
        assert!(out.patches.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blur_identity_and_constant() {
        let w = world();
        let g = grid(&w, 4);
        assert_eq!(
            apply(&w, &g, &DegradationSpec::Blur { radius: 0 }).unwrap().patches,
            g.patches
        );
        let mut c = g.clone();
        c.patches.fill(0.375);
        let out = apply(&w, &c, &DegradationSpec::Blur { radius: 2 }).unwrap();
        assert!(out.patches.data().iter().all(|&v| (v - 0.375).abs() < 1e-15));
    }

    #[test]
    fn jigsaw_matches_fisher_yates_oracle() {
        let w = world();
        let g = grid(&w, 5);
        let seed = 99;
        let out = apply(&w, &g, &DegradationSpec::Jigsaw { grid: 2, seed }).unwrap();

        // Oracle: classic descending Fisher-Yates with the same stream.
        let mut rng = rng_for(seed, "degrade/jigsaw");
        let mut perm = [0usize, 1, 2, 3];
        for i in (1..4).rev() {
            let j: usize = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        for (b, &s) in perm.iter().enumerate() {
            for i in 0..2 {
                for j in 0..2 {
                    let to = ((b / 2) * 2 + i) * 4 + (b % 2) * 2 + j;
                    let from = ((s / 2) * 2 + i) * 4 + (s % 2) * 2 + j;
                    assert_eq!(out.patches.row(to), g.patches.row(from));
                }
            }
        }
        let key = |m: &Matrix| {
            let mut rows: Vec<Vec<u64>> = m.rows_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
            rows.sort();
            rows
        };
        assert_eq!(key(&out.patches), key(&g.patches));
    }

    #[test]
    fn jigsaw_rejects_non_divisor() {
        let w = world();
        let err = apply(&w, &grid(&w, 1), &DegradationSpec::Jigsaw { grid: 3, seed: 0 }).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn text_only_uses_null_prototype() {
        let w = world();
        let out = apply(&w, &grid(&w, 6), &DegradationSpec::TextOnly).unwrap();
        for row in out.patches.rows_iter() {
            assert_eq!(row, w.null_prototype());
        }
        assert_eq!(out.provenance.tag, "text_only");
    }

    #[test]
    fn contrast_inputs_identity_and_determinism() {
        let w = world();
        let g = grid(&w, 7);
        let zero = ContrastConfig {
            sigma: 0.0,
            mask_ratio: 0.0,
        };
        let one = stochastic_contrast_inputs(&g, 1, &zero, 5).unwrap();
        assert_eq!(one[0].patches, g.patches);
        let cfg = ContrastConfig::default();
        assert_eq!(
            stochastic_contrast_inputs(&g, 4, &cfg, 5).unwrap(),
            stochastic_contrast_inputs(&g, 4, &cfg, 5).unwrap()
        );
        assert!(stochastic_contrast_inputs(&g, 0, &cfg, 5).is_err());
    }

    #[test]
    fn contrast_variance_matches_sigma() {
        let w = world();
        let g = grid(&w, 8);
        let cfg = ContrastConfig {
            sigma: 0.3,
            mask_ratio: 0.0,
        };
        let n = 10_000;
        let outs = stochastic_contrast_inputs(&g, n, &cfg, 11).unwrap();
        let target = g.patches.get(3, 5);
        let mean = outs.iter().map(|o| o.patches.get(3, 5)).sum::<f64>() / n as f64;
        let var = outs.iter().map(|o| (o.patches.get(3, 5) - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var / 0.09 - 1.0).abs() < 0.05, "variance {var}");
        assert!((mean - target).abs() < 0.02);
    }
}
