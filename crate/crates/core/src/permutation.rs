//! Factorization orders and the attention masks that realize them.
//!
//! Frames are never reordered. A sampled order assigns each position a rank;
//! position `i` may attend to position `j` in the content stream iff
//! `rank[j] <= rank[i]`, and in the query stream iff `rank[j] < rank[i]`.
//! Only the last `e` positions of the order are prediction targets.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::BoolMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum PermutationError {
    #[error("not a permutation of 0..{len}: {order:?}")]
    NotBijection { len: usize, order: Vec<usize> },
    #[error("tail fraction must be in (0, 1], got {0}")]
    Fraction(f64),
    #[error("sequence length must be positive")]
    Empty,
    #[error("mask shapes disagree with sequence length {0}")]
    MaskShape(usize),
}

/// How a factorization order is drawn for each sequence encounter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PermMode {
    /// Fresh uniform permutation every time a sequence is seen.
    #[default]
    Random,
    /// Left-to-right order; pretraining becomes a plain autoregressive model.
    Identity,
}

impl std::str::FromStr for PermMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Self::Random),
            "identity" => Ok(Self::Identity),
            other => Err(format!("unknown permutation mode `{other}` (random|identity)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationOrder {
    order: Vec<usize>,
    rank: Vec<usize>,
}

impl PermutationOrder {
    /// `order[k]` is the position predicted `k`-th.
    pub fn from_order(order: Vec<usize>) -> Result<Self, PermutationError> {
        let n = order.len();
        if n == 0 {
            return Err(PermutationError::Empty);
        }
        let mut rank = vec![usize::MAX; n];
        for (k, &p) in order.iter().enumerate() {
            if p >= n || rank[p] != usize::MAX {
                return Err(PermutationError::NotBijection { len: n, order });
            }
            rank[p] = k;
        }
        Ok(Self { order, rank })
    }

    pub fn identity(len: usize) -> Self {
        let order: Vec<usize> = (0..len).collect();
        Self {
            rank: order.clone(),
            order,
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn rank(&self) -> &[usize] {
        &self.rank
    }
}

/// Draws an order for a length-`len` sequence. Random mode is a
/// Fisher-Yates shuffle driven by `rng`; identity mode consumes no draws.
pub fn sample_permutation<R: Rng + ?Sized>(
    len: usize,
    mode: PermMode,
    rng: &mut R,
) -> PermutationOrder {
    assert!(len >= 1, "sequence length must be positive");
    match mode {
        PermMode::Identity => PermutationOrder::identity(len),
        PermMode::Random => {
            let mut order: Vec<usize> = (0..len).collect();
            order.shuffle(rng);
            PermutationOrder::from_order(order).expect("shuffle is a bijection")
        }
    }
}

/// `e = max(1, floor(fraction * len))`.
pub fn num_targets(len: usize, fraction: f64) -> Result<usize, PermutationError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PermutationError::Fraction(fraction));
    }
    Ok(((fraction * len as f64).floor() as usize).clamp(1, len))
}

/// The positions ranked in the last `e` slots of the order, sorted by
/// position.
pub fn select_targets(
    perm: &PermutationOrder,
    fraction: f64,
) -> Result<Vec<usize>, PermutationError> {
    let n = perm.len();
    let e = num_targets(n, fraction)?;
    let mut targets = perm.order[n - e..].to_vec();
    targets.sort_unstable();
    Ok(targets)
}

/// Visibility matrices for the two attention streams plus the predicted
/// positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMasks {
    pub content: Arc<BoolMatrix>,
    pub query: Arc<BoolMatrix>,
    pub targets: Vec<usize>,
}

impl AttentionMasks {
    pub fn from_parts(
        content: BoolMatrix,
        query: BoolMatrix,
        targets: Vec<usize>,
    ) -> Result<Self, PermutationError> {
        let n = content.rows();
        let square = |m: &BoolMatrix| m.rows() == n && m.cols() == n;
        if n == 0 || !square(&content) || !square(&query) || targets.iter().any(|&t| t >= n) {
            return Err(PermutationError::MaskShape(n));
        }
        Ok(Self {
            content: Arc::new(content),
            query: Arc::new(query),
            targets,
        })
    }

    /// Every position sees every position; used for finetuning.
    pub fn full(len: usize) -> Self {
        Self {
            content: Arc::new(BoolMatrix::filled(len, len, true)),
            query: Arc::new(BoolMatrix::filled(len, len, true)),
            targets: (0..len).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.content.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn build_masks(
    perm: &PermutationOrder,
    fraction: f64,
) -> Result<AttentionMasks, PermutationError> {
    let n = perm.len();
    let rank = perm.rank();
    let content = BoolMatrix::from_fn(n, n, |i, j| rank[j] <= rank[i]);
    let query = BoolMatrix::from_fn(n, n, |i, j| rank[j] < rank[i]);
    Ok(AttentionMasks {
        content: Arc::new(content),
        query: Arc::new(query),
        targets: select_targets(perm, fraction)?,
    })
}
