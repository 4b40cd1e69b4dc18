use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Causality, ModelConfig};
use crate::objectives::LossKind;
use crate::rng::SplitRng;

/// Named discrete axes of the design space. Grid order is lexicographic in
/// the field order below, with the last axis varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub causality: Vec<Causality>,
    pub hidden_size: Vec<usize>,
    pub num_layers: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub dropout_hidden: Vec<f64>,
    pub dropout_attention: Vec<f64>,
    /// Only used by AE points.
    pub mask_probability: Vec<f64>,
    /// `None` is global attention. Written as `"off"` in config files.
    #[serde(default = "none_axis", with = "off_axis")]
    pub local_window: Vec<Option<usize>>,
    /// `None` disables user embeddings; `Some(p)` enables them with SSE probability `p`.
    #[serde(default = "none_axis", with = "off_axis")]
    pub sse: Vec<Option<f64>>,
    pub loss: Vec<LossKind>,
    pub learning_rate: Vec<f64>,
    pub max_len: usize,
}

/// Local-attention half-widths searched by [`SearchSpace::with_local_windows`].
pub const DEFAULT_LOCAL_WINDOWS: [usize; 3] = [2, 5, 10];

fn none_axis<T>() -> Vec<Option<T>> {
    vec![None]
}

/// `Vec<Option<T>>` with `None` spelled `"off"`, since config formats
/// without a null value cannot hold it otherwise.
mod off_axis {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    enum Off {
        #[serde(rename = "off")]
        Off,
    }

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Entry<T> {
        Off(Off),
        On(T),
    }

    pub fn serialize<T: Serialize + Copy, S: Serializer>(
        v: &[Option<T>],
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry<T>> = v
            .iter()
            .map(|x| x.map_or(Entry::Off(Off::Off), Entry::On))
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, T: Deserialize<'de>, D: Deserializer<'de>>(
        d: D,
    ) -> Result<Vec<Option<T>>, D::Error> {
        let entries: Vec<Entry<T>> = Vec::deserialize(d)?;
        Ok(entries
            .into_iter()
            .map(|e| match e {
                Entry::Off(_) => None,
                Entry::On(x) => Some(x),
            })
            .collect())
    }
}

/// One point of the space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignChoice {
    pub model: ModelConfig,
    pub loss: LossKind,
    pub learning_rate: f64,
}

impl DesignChoice {
    /// Short human-readable tag of the non-default axes.
    pub fn label(&self) -> String {
        let m = &self.model;
        let mut s = format!(
            "{} d{} l{} h{} dh{:.1} da{:.1}",
            m.causality,
            m.hidden_size,
            m.num_layers,
            m.num_heads,
            m.dropout_hidden,
            m.dropout_attention
        );
        if let Some(p) = m.mask_probability {
            s.push_str(&format!(" mp{p:.1}"));
        }
        if let Some(w) = m.local_window {
            s.push_str(&format!(" w{w}"));
        }
        if m.use_user_embedding {
            s.push_str(&format!(" sse{:.1}", m.sse_probability));
        }
        s.push_str(&format!(" {:?} lr{}", self.loss, self.learning_rate).to_lowercase());
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Grid,
    Random,
}

impl SearchSpace {
    /// A narrow space around the small defaults.
    pub fn small(causality: Causality, max_len: usize) -> Self {
        Self {
            causality: vec![causality],
            hidden_size: vec![32],
            num_layers: vec![1, 2],
            num_heads: vec![1, 2],
            dropout_hidden: vec![0.1, 0.3],
            dropout_attention: vec![0.1],
            mask_probability: vec![0.2, 0.4],
            local_window: vec![None],
            sse: vec![None],
            loss: vec![LossKind::Ce],
            learning_rate: vec![1e-3],
            max_len,
        }
    }

    /// Adds global attention plus every [`DEFAULT_LOCAL_WINDOWS`] width to the window axis.
    pub fn with_local_windows(mut self) -> Self {
        self.local_window = std::iter::once(None)
            .chain(DEFAULT_LOCAL_WINDOWS.map(Some))
            .collect();
        self
    }

    fn radices(&self) -> [usize; 11] {
        [
            self.causality.len(),
            self.hidden_size.len(),
            self.num_layers.len(),
            self.num_heads.len(),
            self.dropout_hidden.len(),
            self.dropout_attention.len(),
            self.mask_probability.len(),
            self.local_window.len(),
            self.sse.len(),
            self.loss.len(),
            self.learning_rate.len(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.radices().contains(&0) {
            return Err(Error::Config(
                "every search axis needs at least one value".into(),
            ));
        }
        Ok(())
    }

    /// Raw number of axis combinations (before constraint filtering).
    pub fn cardinality(&self) -> usize {
        self.radices().iter().product()
    }

    /// Point from per-axis indices, or `None` if it violates a cross-field
    /// constraint or duplicates another point (AR ignores the mask axis).
    fn point(&self, idx: &[usize; 11]) -> Option<DesignChoice> {
        let causality = self.causality[idx[0]];
        if causality == Causality::Ar && idx[6] != 0 {
            return None;
        }
        let sse = self.sse[idx[8]];
        let model = ModelConfig {
            hidden_size: self.hidden_size[idx[1]],
            num_layers: self.num_layers[idx[2]],
            num_heads: self.num_heads[idx[3]],
            max_len: self.max_len,
            dropout_hidden: self.dropout_hidden[idx[4]],
            dropout_attention: self.dropout_attention[idx[5]],
            causality,
            local_window: self.local_window[idx[7]],
            local_heads: None,
            use_user_embedding: sse.is_some(),
            sse_probability: sse.unwrap_or(0.0),
            mask_probability: (causality == Causality::Ae).then(|| self.mask_probability[idx[6]]),
            init_std: 0.02,
        };
        model.validate().ok()?;
        Some(DesignChoice {
            model,
            loss: self.loss[idx[9]],
            learning_rate: self.learning_rate[idx[10]],
        })
    }

    /// Every valid point in grid order.
    pub fn grid(&self) -> Vec<DesignChoice> {
        let radices = self.radices();
        let total = self.cardinality();
        let mut out = Vec::new();
        for mut n in 0..total {
            let mut idx = [0usize; 11];
            for a in (0..11).rev() {
                idx[a] = n % radices[a];
                n /= radices[a];
            }
            if let Some(p) = self.point(&idx) {
                out.push(p);
            }
        }
        out
    }

    /// Uniform per-axis draw, retried until the point is valid.
    pub fn sample(&self, rng: &mut SplitRng) -> Result<DesignChoice> {
        self.validate()?;
        let radices = self.radices();
        for _ in 0..1000 {
            let mut idx = [0usize; 11];
            for (a, &r) in radices.iter().enumerate() {
                idx[a] = rng.index(r);
            }
            if self.causality[idx[0]] == Causality::Ar {
                idx[6] = 0;
            }
            if let Some(p) = self.point(&idx) {
                return Ok(p);
            }
        }
        Err(Error::Config("search space has no valid point".into()))
    }
}

/// Stateful suggestion source. Grid yields `None` once exhausted.
#[derive(Debug, Clone)]
pub struct Suggester {
    space: SearchSpace,
    strategy: Strategy,
    grid: Vec<DesignChoice>,
    next: usize,
    rng: SplitRng,
}

impl Suggester {
    pub fn new(space: SearchSpace, strategy: Strategy, seed: u64) -> Result<Self> {
        space.validate()?;
        let grid = match strategy {
            Strategy::Grid => space.grid(),
            Strategy::Random => Vec::new(),
        };
        Ok(Self {
            space,
            strategy,
            grid,
            next: 0,
            rng: SplitRng::new(seed).fork("suggest"),
        })
    }

    pub fn suggest(&mut self) -> Result<Option<DesignChoice>> {
        match self.strategy {
            Strategy::Grid => {
                let p = self.grid.get(self.next).cloned();
                self.next += 1;
                Ok(p)
            }
            Strategy::Random => self.space.sample(&mut self.rng).map(Some),
        }
    }

    /// Up to `n` suggestions.
    pub fn take(&mut self, n: usize) -> Result<Vec<DesignChoice>> {
        let mut out = Vec::new();
        while out.len() < n {
            match self.suggest()? {
                Some(p) => out.push(p),
                None => break,
            }
        }
        Ok(out)
    }
}
