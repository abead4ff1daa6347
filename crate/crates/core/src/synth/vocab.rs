//! Prompt micro-language: class keywords plus three tiers of detail
//! modifiers, encoded by mean-pooling rows of a fixed embedding table.

use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Tensor};
use crate::rng::StreamKey;

pub const CLASSES: [&str; 8] = [
    "cat", "dog", "bird", "house", "tree", "car", "boat", "flower",
];

pub const MODIFIERS: [[&str; 18]; 3] = [
    [
        "red", "blue", "green", "yellow", "purple", "orange", "white", "black", "grey", "pink",
        "brown", "golden", "silver", "teal", "crimson", "ivory", "amber", "violet",
    ],
    [
        "wooden",
        "furry",
        "glossy",
        "rusty",
        "woven",
        "marble",
        "velvet",
        "glass",
        "stone",
        "metallic",
        "feathered",
        "leafy",
        "painted",
        "frosted",
        "polished",
        "knitted",
        "ceramic",
        "paper",
    ],
    [
        "sunset",
        "foggy",
        "neon",
        "candlelit",
        "misty",
        "backlit",
        "overcast",
        "moonlit",
        "studio",
        "rainy",
        "snowy",
        "dusky",
        "sunlit",
        "stormy",
        "hazy",
        "twilight",
        "dawn",
        "noon",
    ],
];

/// Number of detail tiers; also the maximum detail level.
pub const TIERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Class(usize),
    /// Modifier of the given tier (0-based).
    Modifier(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<&'static str>,
    kinds: Vec<TokenKind>,
    embeddings: Tensor,
}

impl Vocabulary {
    /// Embedding rows are Gaussian; modifiers of one tier share a common
    /// tier direction plus their own noise.
    pub fn new(dim: usize, key: StreamKey) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut tokens = Vec::new();
        let mut kinds = Vec::new();
        for (c, &t) in CLASSES.iter().enumerate() {
            tokens.push(t);
            kinds.push(TokenKind::Class(c));
        }
        for (tier, words) in MODIFIERS.iter().enumerate() {
            for &w in words {
                tokens.push(w);
                kinds.push(TokenKind::Modifier(tier));
            }
        }
        let mut rng = key.rng();
        let tier_dirs: Vec<Vec<f64>> = (0..TIERS).map(|_| rng.normals(dim)).collect();
        let mut data = Vec::with_capacity(tokens.len() * dim);
        for kind in &kinds {
            let noise = rng.normals(dim);
            match kind {
                TokenKind::Class(_) => data.extend(noise),
                TokenKind::Modifier(t) => {
                    data.extend(tier_dirs[*t].iter().zip(&noise).map(|(a, b)| a + 0.5 * b))
                }
            }
        }
        let embeddings = Tensor::matrix(tokens.len(), dim, data)?;
        Ok(Vocabulary {
            tokens,
            kinds,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn index_of(&self, token: &str) -> Result<usize> {
        self.tokens
            .iter()
            .position(|&t| t == token)
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn kind(&self, index: usize) -> TokenKind {
        self.kinds[index]
    }

    /// Mean of the embedding rows of `tokens`.
    pub fn encode_prompt<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::contract("cannot encode an empty prompt"));
        }
        let mut z = vec![0.0; self.dim()];
        for t in tokens {
            let row = self.embeddings.row(self.index_of(t.as_ref())?);
            for (a, b) in z.iter_mut().zip(row) {
                *a += b;
            }
        }
        let n = tokens.len() as f64;
        Ok(z.into_iter().map(|v| v / n).collect())
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.put_tensor("synth/embeddings", &self.embeddings)
    }

    /// Restores the embedding table; the token list is fixed by the crate.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut v = Vocabulary::new(1, StreamKey::new(0, "placeholder"))?;
        let e = ck.tensor("synth/embeddings")?;
        if e.rows() != v.len() {
            return Err(Error::contract(format!(
                "embedding table has {} rows, vocabulary {}",
                e.rows(),
                v.len()
            )));
        }
        v.embeddings = e;
        Ok(v)
    }
}
