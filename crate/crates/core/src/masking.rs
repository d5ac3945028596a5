//! Utterance layouts, attention masks and positional encodings.
//!
//! A dialog context is the concatenation of its utterances. Everything that
//! makes a plain transformer encoder hierarchical is derived from two
//! per-token index vectors over that concatenation:
//!
//! * the utterance index of every token (`utterance_index`), and
//! * the position of every token inside its own utterance (`local_position`).
//!
//! From them we build the block-diagonal utterance mask (UT-Mask), the
//! context-phase masks (CT-Masks), and the local/global sinusoidal
//! positional encodings. All functions here are pure.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Token-level view of a context made of `T` utterances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceLayout {
    lengths: Vec<usize>,
    utterance_index: Vec<usize>,
    local_position: Vec<usize>,
}

impl UtteranceLayout {
    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Utterance index per token (non-decreasing; index `i` repeats `l_i` times).
    pub fn utterance_index(&self) -> &[usize] {
        &self.utterance_index
    }

    /// Position of each token relative to the start of its utterance.
    pub fn local_position(&self) -> &[usize] {
        &self.local_position
    }

    /// Total token count `L`.
    pub fn len(&self) -> usize {
        self.utterance_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterance_index.is_empty()
    }

    pub fn num_utterances(&self) -> usize {
        self.lengths.len()
    }

    /// Token range `start..end` covered by utterance `u`.
    pub fn span(&self, u: usize) -> std::ops::Range<usize> {
        let start: usize = self.lengths[..u].iter().sum();
        start..start + self.lengths[u]
    }

    /// Index of the last utterance that owns at least one token.
    pub fn last_utterance(&self) -> usize {
        *self.utterance_index.last().expect("layout is never empty")
    }
}

/// Builds the utterance-index and local-position vectors for `lengths`.
pub fn build_layout(lengths: &[usize]) -> Result<UtteranceLayout> {
    if lengths.iter().all(|&l| l == 0) {
        return Err(Error::EmptyContext);
    }
    let total: usize = lengths.iter().sum();
    let mut utterance_index = Vec::with_capacity(total);
    let mut local_position = Vec::with_capacity(total);
    for (u, &len) in lengths.iter().enumerate() {
        utterance_index.extend(std::iter::repeat_n(u, len));
        local_position.extend(0..len);
    }
    Ok(UtteranceLayout {
        lengths: lengths.to_vec(),
        utterance_index,
        local_position,
    })
}

/// Square boolean matrix; `get(i, j)` is true when query `i` may attend key `j`.
#[derive(Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::shape(
                "mask",
                format!("{rows}x{cols} mask needs {} bits, got {}", rows * cols, bits.len()),
            ));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    /// Lower-triangular mask used for decoder self-attention.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Self { rows, cols, bits }
    }

    /// Parses rows written as `0`/`1` strings.
    pub fn from_bitstrings(rows: &[&str]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut bits = Vec::new();
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("mask", "ragged bitstring rows"));
            }
            for ch in r.chars() {
                match ch {
                    '0' => bits.push(false),
                    '1' => bits.push(true),
                    other => {
                        return Err(Error::Config(format!("invalid mask character {other:?}")))
                    }
                }
            }
        }
        Self::new(rows.len(), cols, bits)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_sum(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&b| b).count()
    }

    /// Column indices allowed for query `i`.
    pub fn allowed(&self, i: usize) -> Vec<usize> {
        (0..self.cols).filter(|&j| self.get(i, j)).collect()
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn diagonal_all_ones(&self) -> bool {
        (0..self.rows.min(self.cols)).all(|i| self.get(i, i))
    }

    /// True when every allowed entry of `other` is also allowed here.
    pub fn contains(&self, other: &AttentionMask) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a || !b)
    }

    pub fn union(&self, other: &AttentionMask) -> Result<AttentionMask> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape("mask union", "sizes differ"));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            bits,
        })
    }

    /// Embeds a square mask into an `n × n` mask whose extra (padding)
    /// positions are invisible to real queries and attend only themselves.
    pub fn pad_to(&self, n: usize) -> AttentionMask {
        assert!(n >= self.rows && self.rows == self.cols, "pad_to needs a square mask no larger than n");
        Self::from_fn(n, n, |i, j| {
            if i < self.rows && j < self.cols {
                self.get(i, j)
            } else {
                i == j
            }
        })
    }

    pub fn to_bitstrings(&self) -> Vec<String> {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect()
    }
}

impl fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "AttentionMask {}x{}", self.rows, self.cols)?;
        for r in self.to_bitstrings() {
            writeln!(f, "  {r}")?;
        }
        Ok(())
    }
}

impl fmt::Display for AttentionMask {
    /// Plain-text grid of `0`/`1`, one row per line, space separated.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            let line: Vec<&str> = self.row(i).iter().map(|&b| if b { "1" } else { "0" }).collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// Context-phase attention scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CtScheme {
    /// Every utterance attends the last one and the last attends everything.
    #[serde(rename = "HIER")]
    Hier,
    /// First-token (CLS) positions attend each other only.
    #[serde(rename = "HIER_CLS")]
    HierCls,
    /// No masking; the plain transformer encoder.
    #[serde(rename = "FULL")]
    Full,
}

impl CtScheme {
    pub fn name(self) -> &'static str {
        match self {
            CtScheme::Hier => "HIER",
            CtScheme::HierCls => "HIER_CLS",
            CtScheme::Full => "FULL",
        }
    }
}

impl fmt::Display for CtScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CtScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "HIER" => Ok(CtScheme::Hier),
            "HIER_CLS" => Ok(CtScheme::HierCls),
            "FULL" => Ok(CtScheme::Full),
            _ => Err(Error::Config(format!("unknown CT scheme {s:?}"))),
        }
    }
}

/// UT-Mask via the indicator formula `A = 1(2·C_IR == C_IRᵀ + C_IR)`,
/// where `C_IR` stacks the utterance-index vector once per row.
pub fn build_ut_mask(layout: &UtteranceLayout) -> AttentionMask {
    let ci = layout.utterance_index();
    let n = ci.len();
    // C_IR[i][j] = C_I[j]; its transpose holds C_I[i].
    let cir: Vec<i64> = (0..n).flat_map(|_| ci.iter().map(|&c| c as i64)).collect();
    let bits = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            2 * cir[idx] == cir[j * n + i] + cir[idx]
        })
        .collect();
    AttentionMask { rows: n, cols: n, bits }
}

/// Same-utterance predicate, the direct reading of the UT-Mask.
pub fn same_utterance_mask(layout: &UtteranceLayout) -> AttentionMask {
    let ci = layout.utterance_index();
    AttentionMask::from_fn(ci.len(), ci.len(), |i, j| ci[i] == ci[j])
}

/// Context-phase mask for `scheme`.
pub fn build_ct_mask(layout: &UtteranceLayout, scheme: CtScheme) -> Result<AttentionMask> {
    let ci = layout.utterance_index();
    let n = ci.len();
    match scheme {
        CtScheme::Full => Ok(AttentionMask::ones(n, n)),
        CtScheme::Hier => {
            let last = layout.last_utterance();
            Ok(AttentionMask::from_fn(n, n, |i, j| {
                ci[i] == ci[j] || ci[i] == last || ci[j] == last
            }))
        }
        CtScheme::HierCls => {
            if let Some(u) = layout.lengths().iter().position(|&l| l == 0) {
                return Err(Error::NoCls { utterance: u });
            }
            let lp = layout.local_position();
            Ok(AttentionMask::from_fn(n, n, |i, j| {
                if lp[i] == 0 {
                    lp[j] == 0
                } else {
                    ci[i] == ci[j]
                }
            }))
        }
    }
}

/// Sinusoid table rows for `positions`:
/// `P[pos, 2i] = sin(pos / 10000^(2i/d))`, `P[pos, 2i+1] = cos(·)`.
pub fn sinusoidal_pe(positions: &[usize], d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "sinusoidal encoding needs a positive even dimension, got {d}"
        )));
    }
    Ok(sinusoid_rows(positions, d))
}

/// Like [`sinusoidal_pe`] but accepts odd `d` by building the `d + 1`
/// table and dropping its final column. Model code uses this so that
/// odd embedding widths remain usable.
pub fn sinusoidal_pe_any(positions: &[usize], d: usize) -> Result<Tensor> {
    if d == 0 {
        return Err(Error::Config("positional encoding dimension is zero".into()));
    }
    if d.is_multiple_of(2) {
        return sinusoidal_pe(positions, d);
    }
    let wide = sinusoid_rows(positions, d + 1);
    let data = (0..positions.len())
        .flat_map(|r| wide.row(r)[..d].to_vec())
        .collect();
    Tensor::matrix(positions.len(), d, data)
}

fn sinusoid_rows(positions: &[usize], d: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &pos in positions {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::matrix(positions.len(), d, data).expect("sinusoid table size")
}

/// Local PE: the sinusoid table gathered at within-utterance positions.
pub fn local_pe(layout: &UtteranceLayout, d: usize) -> Result<Tensor> {
    sinusoidal_pe_any(layout.local_position(), d)
}

/// Global PE: absolute positions `0..len` of the concatenated context.
pub fn global_pe(len: usize, d: usize) -> Result<Tensor> {
    let positions: Vec<usize> = (0..len).collect();
    sinusoidal_pe_any(&positions, d)
}
