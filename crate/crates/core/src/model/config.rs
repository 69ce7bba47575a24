use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub seed: u64,
    #[serde(default)]
    pub tie_head: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::InvalidConfig("layers must be at least 1".into()));
        }
        if self.vocab < 2 {
            return Err(Error::InvalidConfig("vocab must be at least 2".into()));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.max_seq == 0 {
            return Err(Error::InvalidConfig("max_seq must be positive".into()));
        }
        Ok(())
    }

    pub fn mlp_width(&self) -> usize {
        4 * self.width
    }

    /// Parameters in one transformer block.
    pub fn block_param_count(&self) -> usize {
        let m = self.width;
        12 * m * m + 13 * m
    }

    /// Parameters in the host model (no passthrough layers).
    pub fn host_param_count(&self) -> usize {
        let (m, v) = (self.width, self.vocab);
        let head = if self.tie_head { v } else { m * v + v };
        v * m + self.max_seq * m + self.layers * self.block_param_count() + 2 * m + head
    }
}

/// Per-position passthrough block counts (`n_i` for host layer `i`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InsertionPlan {
    counts: Vec<usize>,
}

impl InsertionPlan {
    pub fn new(counts: Vec<usize>) -> Self {
        Self { counts }
    }

    pub fn zeros(layers: usize) -> Self {
        Self {
            counts: vec![0; layers],
        }
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// The set `K` of positions with at least one passthrough block.
    pub fn positions(&self) -> BTreeSet<usize> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(i, _)| i)
            .collect()
    }

    /// `||omega||_1`
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Short placement label such as `PTL-13` (positions with blocks).
    pub fn label(&self) -> String {
        if self.total() == 0 {
            return "host".into();
        }
        let mut s = String::from("PTL-");
        for (i, &n) in self.counts.iter().enumerate() {
            for _ in 0..n {
                s.push_str(&i.to_string());
            }
        }
        s
    }
}

impl FromStr for InsertionPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let counts = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad omega entry {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { counts })
    }
}

impl fmt::Display for InsertionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.counts.iter().map(|c| c.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}
