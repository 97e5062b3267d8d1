//! The block-layout grammar.  `M<m>x<count>` describes `count` stacked blocks
//! of `m` layers each (`M1x12` is a plain 12-layer transformer: every block
//! has one layer, so every layer computes its own attention).  The mixed form
//! `M5M3M2M2` lists block sizes explicitly, first block lowest (closest to
//! the embeddings).

use std::fmt;

use crate::error::{Error, Result};

/// Sizes of the lazy blocks from the bottom of the stack upward.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Layout {
    blocks: Vec<usize>,
}

impl Layout {
    /// `count` blocks of `m` layers each.
    pub fn uniform(m: usize, count: usize) -> Result<Self> {
        Self::from_blocks(vec![m; count])
    }

    pub fn from_blocks(blocks: Vec<usize>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Config("layout needs at least one block".into()));
        }
        if blocks.iter().any(|&m| m == 0) {
            return Err(Error::Config("layout blocks must have at least one layer".into()));
        }
        Ok(Layout { blocks })
    }

    /// Parses `M<m>x<count>` or `M<m1>M<m2>...`; anything else is rejected.
    pub fn parse(s: &str) -> Result<Self> {
        let fail = |why: &str| {
            Error::Parse(format!(
                "layout '{s}': {why}; the grammar is M<size>x<count> (uniform blocks) or \
                 M<s1>M<s2>... (mixed, lowest block first) with every size and count >= 1"
            ))
        };
        if s.is_empty() {
            return Err(fail("empty"));
        }
        // uniform form: M<m>x<count>
        if let Some((m_part, count_part)) = s.split_once('x') {
            let m_digits = m_part
                .strip_prefix('M')
                .ok_or_else(|| fail("must start with 'M'"))?;
            let m: usize = m_digits
                .parse()
                .map_err(|_| fail("block size must be a positive integer"))?;
            let count: usize = count_part
                .parse()
                .map_err(|_| fail("block count must be a positive integer"))?;
            if m == 0 || count == 0 {
                return Err(fail("block size and count must be at least 1"));
            }
            return Self::uniform(m, count);
        }
        // mixed form: one M<int> per block
        let mut blocks = Vec::new();
        let mut rest = s;
        while !rest.is_empty() {
            rest = rest
                .strip_prefix('M')
                .ok_or_else(|| fail("expected 'M' before each block size"))?;
            let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
            if digits.is_empty() {
                return Err(fail("expected digits after 'M'"));
            }
            let m: usize = digits
                .parse()
                .map_err(|_| fail("block size out of range"))?;
            if m == 0 {
                return Err(fail("block size must be at least 1"));
            }
            blocks.push(m);
            rest = &rest[digits.len()..];
        }
        Self::from_blocks(blocks)
    }

    /// Block sizes, lowest block first.
    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn total_layers(&self) -> usize {
        self.blocks.iter().sum()
    }

    /// `Some((m, count))` when every block has the same size.
    pub fn as_uniform(&self) -> Option<(usize, usize)> {
        let m = self.blocks[0];
        self.blocks.iter().all(|&b| b == m).then_some((m, self.blocks.len()))
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some((m, count)) = self.as_uniform() {
            write!(f, "M{m}x{count}")
        } else {
            for b in &self.blocks {
                write!(f, "M{b}")?;
            }
            Ok(())
        }
    }
}
