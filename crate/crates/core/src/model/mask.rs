//! Which `(token, pass)` keys each query may attend to.

use crate::error::{Error, Result};

use super::config::Variant;

/// A key or query position: a token index and a 1-based pass number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub token: usize,
    pub pass: usize,
}

impl Slot {
    pub fn new(token: usize, pass: usize) -> Self {
        Slot { token, pass }
    }
}

/// Record of which tokens went through which passes.
///
/// Row `p - 1` describes pass `p`. Every token takes pass 1 and, once a token
/// skips a pass, it skips every later one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Participation {
    seq_len: usize,
    rows: Vec<Vec<bool>>,
}

impl Participation {
    pub fn full(n_passes: usize, seq_len: usize) -> Self {
        Participation {
            seq_len,
            rows: vec![vec![true; seq_len]; n_passes],
        }
    }

    pub fn from_rows(rows: Vec<Vec<bool>>) -> Result<Self> {
        let seq_len = rows.first().map_or(0, Vec::len);
        let p = Participation { seq_len, rows };
        p.check()?;
        Ok(p)
    }

    /// Builds the map from the number of passes each token took.
    pub fn from_depths(depths: &[usize], n_passes: usize) -> Result<Self> {
        let rows = (1..=n_passes)
            .map(|pass| depths.iter().map(|&d| pass <= d).collect())
            .collect();
        Self::from_rows(rows)
    }

    fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Participation(m));
        if self.rows.iter().any(|r| r.len() != self.seq_len) {
            return bad("rows of unequal length".into());
        }
        if let Some(first) = self.rows.first() {
            if let Some(t) = first.iter().position(|&b| !b) {
                return bad(format!("token {t} skips pass 1"));
            }
        }
        for (i, pair) in self.rows.windows(2).enumerate() {
            if let Some(t) = pair[1].iter().zip(&pair[0]).position(|(&now, &before)| now && !before) {
                return bad(format!("token {t} takes pass {} but not pass {}", i + 2, i + 1));
            }
        }
        Ok(())
    }

    pub(crate) fn push_row(&mut self, row: Vec<bool>) -> Result<()> {
        if self.rows.is_empty() {
            self.seq_len = row.len();
        }
        self.rows.push(row);
        if let Err(e) = self.check() {
            self.rows.pop();
            return Err(e);
        }
        Ok(())
    }

    pub(crate) fn empty() -> Self {
        Participation {
            seq_len: 0,
            rows: Vec::new(),
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn n_passes(&self) -> usize {
        self.rows.len()
    }

    /// Whether `token` went through `pass` (1-based). Passes beyond the map are `false`.
    pub fn get(&self, pass: usize, token: usize) -> bool {
        pass >= 1 && self.rows.get(pass - 1).is_some_and(|r| r[token])
    }

    pub fn row(&self, pass: usize) -> &[bool] {
        &self.rows[pass - 1]
    }

    /// Tokens taking `pass`, in token order.
    pub fn tokens(&self, pass: usize) -> Vec<usize> {
        (0..self.seq_len).filter(|&t| self.get(pass, t)).collect()
    }

    pub fn count(&self, pass: usize) -> usize {
        self.rows.get(pass - 1).map_or(0, |r| r.iter().filter(|&&b| b).count())
    }

    /// Last pass `≤ upto` that `token` took.
    pub fn last_pass(&self, token: usize, upto: usize) -> usize {
        (1..=upto.min(self.rows.len()))
            .rev()
            .find(|&p| self.get(p, token))
            .unwrap_or(1)
    }

    /// Number of passes each token took.
    pub fn depths(&self) -> Vec<usize> {
        (0..self.seq_len)
            .map(|t| (1..=self.rows.len()).filter(|&p| self.get(p, t)).count())
            .collect()
    }

    /// Fraction of the sequence taking each pass.
    pub fn ratios(&self) -> Vec<f64> {
        (1..=self.rows.len())
            .map(|p| self.count(p) as f64 / self.seq_len as f64)
            .collect()
    }
}

/// Dense attention mask for one pass: queries are the tokens taking the pass,
/// keys are laid out pass by pass, token order within a pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub queries: Vec<Slot>,
    pub keys: Vec<Slot>,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Row-major `[queries × keys]` flags.
    pub fn dense(&self) -> &[bool] {
        &self.allowed
    }

    pub fn allows(&self, query: Slot, key: Slot) -> bool {
        let qi = self.queries.iter().position(|&q| q == query);
        let ki = self.keys.iter().position(|&k| k == key);
        match (qi, ki) {
            (Some(qi), Some(ki)) => self.allowed[qi * self.keys.len() + ki],
            _ => false,
        }
    }

    /// Keys visible to `query`, in key layout order.
    pub fn allowed_keys(&self, query: Slot) -> Vec<Slot> {
        let Some(qi) = self.queries.iter().position(|&q| q == query) else {
            return Vec::new();
        };
        let n = self.keys.len();
        self.keys
            .iter()
            .zip(&self.allowed[qi * n..(qi + 1) * n])
            .filter(|(_, &ok)| ok)
            .map(|(&k, _)| k)
            .collect()
    }

    /// Whether the keys are exactly the queries in the same order.
    pub(crate) fn keys_are_queries(&self) -> bool {
        self.keys == self.queries
    }
}

/// Builds the mask for the queries of `pass`.
///
/// * CoTFormer: `(t, r)` sees `(u, r')` for every earlier token `u` and every
///   pass `r' ≤ r` that `u` took, plus itself; with `self_history` also its own
///   earlier passes.
/// * Block Universal: `(t, r)` sees every token `u ≤ t` at pass `r`. A token
///   that stopped after pass `h < r` is represented by its pass-`h` keys.
/// * Standard: plain causal mask, single pass.
pub fn build_mask(
    variant: Variant,
    seq_len: usize,
    n_repeat: usize,
    pass: usize,
    participation: &Participation,
    self_history: bool,
) -> Result<AttentionMask> {
    let bad = |m: String| Err(Error::Participation(m));
    if pass == 0 || pass > n_repeat {
        return bad(format!("pass {pass} outside 1..={n_repeat}"));
    }
    if variant == Variant::Standard && pass != 1 {
        return bad("standard variant has a single pass".into());
    }
    if participation.seq_len() != seq_len {
        return bad(format!(
            "participation covers {} tokens, sequence has {seq_len}",
            participation.seq_len()
        ));
    }
    if participation.n_passes() < pass {
        return bad(format!("participation has no row for pass {pass}"));
    }

    let queries: Vec<Slot> = participation
        .tokens(pass)
        .into_iter()
        .map(|t| Slot::new(t, pass))
        .collect();

    let keys: Vec<Slot> = match variant {
        Variant::Standard => (0..seq_len).map(|t| Slot::new(t, 1)).collect(),
        Variant::Cotformer => (1..=pass)
            .flat_map(|r| participation.tokens(r).into_iter().map(move |t| Slot::new(t, r)))
            .collect(),
        Variant::BlockUniversal => (0..seq_len)
            .map(|t| Slot::new(t, participation.last_pass(t, pass)))
            .collect(),
    };

    let mut allowed = Vec::with_capacity(queries.len() * keys.len());
    for q in &queries {
        for k in &keys {
            let ok = match variant {
                Variant::Standard | Variant::BlockUniversal => k.token <= q.token,
                Variant::Cotformer => {
                    (k.token < q.token && k.pass <= q.pass)
                        || *k == *q
                        || (self_history && k.token == q.token && k.pass < q.pass)
                }
            };
            allowed.push(ok);
        }
    }
    Ok(AttentionMask {
        queries,
        keys,
        allowed,
    })
}
