//! Prompt-conditioned toy data. A class picks a mixture centre; each
//! detail level adds a fixed fine-structure offset and halves the residual
//! spread, so richer prompts have sharper targets.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, CLASSES, MODIFIERS, TIERS};
use crate::error::{Error, Result};
use crate::rng::{Stream, StreamKey};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyShape {
    pub data_dim: usize,
    pub cond_dim: usize,
    /// Distance of class centres from the origin.
    pub center_radius: f64,
    /// Spread at detail level 0; each level halves it.
    pub base_std: f64,
    /// Length of the first fine-structure offset; each tier halves it.
    pub detail_offset: f64,
}

impl Default for ToyShape {
    fn default() -> Self {
        ToyShape {
            data_dim: 4,
            cond_dim: 64,
            center_radius: 2.5,
            base_std: 0.4,
            detail_offset: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSample {
    pub tokens: Vec<String>,
    pub detail_level: usize,
    pub class: usize,
    pub z: Vec<f64>,
}

/// Vocabulary plus the fixed generator geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld {
    pub shape: ToyShape,
    pub vocab: Vocabulary,
    centers: Vec<Vec<f64>>,
    /// `[class][tier]` unit offsets.
    directions: Vec<Vec<Vec<f64>>>,
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl ToyWorld {
    pub fn new(shape: ToyShape, key: StreamKey) -> Result<Self> {
        if shape.data_dim < 2 || shape.base_std <= 0.0 {
            return Err(Error::Config(
                "toy data needs data_dim ≥ 2 and base_std > 0".into(),
            ));
        }
        let vocab = Vocabulary::new(shape.cond_dim, key.named("vocab"))?;
        let mut rng = key.named("geometry").rng();
        let centers = (0..CLASSES.len())
            .map(|_| {
                unit(rng.normals(shape.data_dim))
                    .into_iter()
                    .map(|v| v * shape.center_radius)
                    .collect()
            })
            .collect();
        let directions = (0..CLASSES.len())
            .map(|_| {
                (0..TIERS)
                    .map(|_| unit(rng.normals(shape.data_dim)))
                    .collect()
            })
            .collect();
        Ok(ToyWorld {
            shape,
            vocab,
            centers,
            directions,
        })
    }

    pub fn classes(&self) -> usize {
        CLASSES.len()
    }

    pub fn levels(&self) -> usize {
        TIERS + 1
    }

    /// Mean of `x_0` given class and detail level.
    pub fn conditional_mean(&self, class: usize, level: usize) -> Vec<f64> {
        let mut m = self.centers[class].clone();
        for j in 0..level.min(TIERS) {
            let r = self.shape.detail_offset * 0.5f64.powi(j as i32);
            for (a, d) in m.iter_mut().zip(&self.directions[class][j]) {
                *a += r * d;
            }
        }
        m
    }

    /// Per-coordinate standard deviation given the detail level.
    pub fn conditional_std(&self, level: usize) -> f64 {
        self.shape.base_std * 0.5f64.powi(level.min(TIERS) as i32)
    }

    pub fn draw_x0(&self, class: usize, level: usize, rng: &mut Stream) -> Vec<f64> {
        let s = self.conditional_std(level);
        self.conditional_mean(class, level)
            .into_iter()
            .map(|m| m + s * rng.normal())
            .collect()
    }

    /// Class keyword followed by one modifier from each of the first
    /// `level` tiers.
    pub fn make_prompt(
        &self,
        class: usize,
        level: usize,
        rng: &mut Stream,
    ) -> Result<PromptSample> {
        if class >= CLASSES.len() || level > TIERS {
            return Err(Error::contract(format!(
                "no prompt for class {class}, level {level}"
            )));
        }
        let mut tokens = vec![CLASSES[class].to_string()];
        for tier in MODIFIERS.iter().take(level) {
            tokens.push(tier[rng.below(tier.len())].to_string());
        }
        let z = self.vocab.encode_prompt(&tokens)?;
        Ok(PromptSample {
            tokens,
            detail_level: level,
            class,
            z,
        })
    }
}

/// `n` prompts with their target samples. Levels are balanced (a shuffled
/// round-robin); classes are uniform.
pub fn generate_dataset(
    world: &ToyWorld,
    n: usize,
    key: StreamKey,
) -> Result<Vec<(PromptSample, Vec<f64>)>> {
    if n == 0 {
        return Err(Error::contract("dataset size must be at least 1"));
    }
    let mut levels: Vec<usize> = (0..n).map(|i| i % world.levels()).collect();
    key.named("levels").rng().shuffle(&mut levels);
    levels
        .into_iter()
        .enumerate()
        .map(|(i, level)| {
            let mut rng = key.child(i as u64).rng();
            let class = rng.below(world.classes());
            let prompt = world.make_prompt(class, level, &mut rng)?;
            let x0 = world.draw_x0(class, level, &mut rng);
            Ok((prompt, x0))
        })
        .collect()
}

/// One row per sample: tokens, level, class, `x_0` components and, when
/// given, the quality label.
pub fn dataset_csv(data: &[(PromptSample, Vec<f64>)], labels: Option<&[f64]>) -> Result<String> {
    if let Some(l) = labels {
        if l.len() != data.len() {
            return Err(Error::contract("one label per sample"));
        }
    }
    let d = data.first().map_or(0, |(_, x)| x.len());
    let mut s = String::from("tokens,level,class");
    for j in 0..d {
        write!(s, ",x{j}").expect("write to string");
    }
    if labels.is_some() {
        s.push_str(",quality");
    }
    s.push('\n');
    for (i, (p, x)) in data.iter().enumerate() {
        write!(s, "{},{},{}", p.tokens.join(" "), p.detail_level, p.class)
            .expect("write to string");
        for v in x {
            write!(s, ",{v:.9}").expect("write to string");
        }
        if let Some(l) = labels {
            write!(s, ",{:.9}", l[i]).expect("write to string");
        }
        s.push('\n');
    }
    Ok(s)
}
