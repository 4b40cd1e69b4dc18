use super::config::Causality;

/// Square boolean matrix, `true` where the row position may attend the column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.len + col]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// Elementwise conjunction.
    pub fn and(&self, other: &AttentionMask) -> AttentionMask {
        assert_eq!(self.len, other.len, "mask sizes differ");
        AttentionMask {
            len: self.len,
            allowed: self
                .allowed
                .iter()
                .zip(&other.allowed)
                .map(|(a, b)| *a && *b)
                .collect(),
        }
    }

    pub fn from_fn(len: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..len * len).map(|i| f(i / len, i % len)).collect();
        Self { len, allowed }
    }

    pub fn causal(len: usize) -> Self {
        Self::from_fn(len, |t, s| s <= t)
    }

    pub fn local(len: usize, window: usize) -> Self {
        Self::from_fn(len, |t, s| t.abs_diff(s) <= window)
    }

    pub fn padding(padding: &[bool]) -> Self {
        Self::from_fn(padding.len(), |t, s| !padding[t] && !padding[s])
    }
}

/// Combines causality, an optional local window and padding. `padding[t]` is
/// true for padded positions.
pub fn build_attention_mask(
    causality: Causality,
    window: Option<usize>,
    padding: &[bool],
) -> AttentionMask {
    let len = padding.len();
    AttentionMask::from_fn(len, |t, s| {
        !padding[t]
            && !padding[s]
            && (causality == Causality::Ae || s <= t)
            && window.is_none_or(|w| t.abs_diff(s) <= w)
    })
}
