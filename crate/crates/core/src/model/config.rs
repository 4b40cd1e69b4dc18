use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention direction and training objective family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Causality {
    /// Bidirectional attention with masked-item reconstruction.
    Ae,
    /// Causal attention with next-item prediction.
    Ar,
}

impl Causality {
    pub fn label(self) -> &'static str {
        match self {
            Causality::Ae => "AE",
            Causality::Ar => "AR",
        }
    }
}

impl std::fmt::Display for Causality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_len: usize,
    pub dropout_hidden: f64,
    pub dropout_attention: f64,
    pub causality: Causality,
    /// Local attention half-width `w`: position `t` sees `s` only if `|t - s| <= w`.
    #[serde(default)]
    pub local_window: Option<usize>,
    /// How many heads (the first ones) use the local window. `None` means all.
    #[serde(default)]
    pub local_heads: Option<usize>,
    #[serde(default)]
    pub use_user_embedding: bool,
    #[serde(default)]
    pub sse_probability: f64,
    /// Masking probability for AE training. Must be unset for AR.
    #[serde(default)]
    pub mask_probability: Option<f64>,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be in [0, 1], got {p}")))
    }
}

impl ModelConfig {
    /// A small default for the given causality.
    pub fn small(causality: Causality, max_len: usize) -> Self {
        Self {
            hidden_size: 32,
            num_layers: 2,
            num_heads: 2,
            max_len,
            dropout_hidden: 0.1,
            dropout_attention: 0.1,
            causality,
            local_window: None,
            local_heads: None,
            use_user_embedding: false,
            sse_probability: 0.0,
            mask_probability: match causality {
                Causality::Ae => Some(0.2),
                Causality::Ar => None,
            },
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return Err(Error::Config(
                "hidden_size, num_heads and num_layers must be positive".into(),
            ));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        check_prob("dropout_hidden", self.dropout_hidden)?;
        check_prob("dropout_attention", self.dropout_attention)?;
        check_prob("sse_probability", self.sse_probability)?;
        if self.dropout_hidden >= 1.0 || self.dropout_attention >= 1.0 {
            return Err(Error::Config("dropout must be below 1".into()));
        }
        if self.local_window == Some(0) {
            return Err(Error::Config("local_window must be at least 1".into()));
        }
        if let Some(h) = self.local_heads {
            if h > self.num_heads {
                return Err(Error::Config(format!(
                    "local_heads {h} exceeds num_heads {}",
                    self.num_heads
                )));
            }
        }
        match (self.causality, self.mask_probability) {
            (Causality::Ar, Some(_)) => Err(Error::Config(
                "mask_probability must be unset for AR".into(),
            )),
            (Causality::Ae, None) => Err(Error::Config("AE requires mask_probability".into())),
            (Causality::Ae, Some(p)) if !(p > 0.0 && p < 1.0) => Err(Error::Config(format!(
                "mask_probability must be in (0, 1), got {p}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Whether head `h` uses the local window.
    pub fn head_is_local(&self, h: usize) -> bool {
        self.local_window.is_some() && h < self.local_heads.unwrap_or(self.num_heads)
    }

    /// Closed-form number of learnable scalars for a vocabulary of `n_items`
    /// and `n_users` users:
    ///
    /// `(V+2)d + Ld + [(U+1)d] + 2d + layers * (12d^2 + 13d) + 2d`
    ///
    /// covering the tied item table (pad and mask rows included), positions,
    /// the optional user table, the embedding norm, each pre-norm block
    /// (four attention projections with biases, a 4d-wide feed-forward, two
    /// norms) and the final norm.
    pub fn parameter_count(&self, n_items: usize, n_users: usize) -> usize {
        let d = self.hidden_size;
        let users = if self.use_user_embedding {
            (n_users + 1) * d
        } else {
            0
        };
        (n_items + 2) * d
            + self.max_len * d
            + users
            + 2 * d
            + self.num_layers * (12 * d * d + 13 * d)
            + 2 * d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ModelConfig::small(Causality::Ae, 10).validate().is_ok());
        assert!(ModelConfig::small(Causality::Ar, 10).validate().is_ok());
        let mut c = ModelConfig::small(Causality::Ar, 10);
        c.mask_probability = Some(0.2);
        assert!(c.validate().is_err());
        let mut c = ModelConfig::small(Causality::Ae, 10);
        c.hidden_size = 30;
        c.num_heads = 4;
        assert!(c.validate().is_err());
        c.num_heads = 3;
        c.mask_probability = Some(1.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn local_heads_default_all() {
        let mut c = ModelConfig::small(Causality::Ae, 10);
        c.num_heads = 4;
        assert!(!c.head_is_local(0));
        c.local_window = Some(2);
        assert!((0..4).all(|h| c.head_is_local(h)));
        c.local_heads = Some(1);
        assert!(c.head_is_local(0) && !c.head_is_local(1));
    }
}
