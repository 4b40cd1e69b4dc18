//! Spectral analysis of attention matrices: singular-value spectra,
//! effective rank, best low-rank reconstructions and CSV exchange.

mod collect;
mod dump;
mod spectrum;
mod svd;

pub use collect::{record_attention, sample_cases};
pub use dump::{
    heatmap_csv, read_attention_dump, write_analysis, write_attention_dump, AnalysisSummary,
    MANIFEST,
};
pub use spectrum::{
    compare_spectra, low_rank_approx, svd_spectrum, svd_spectrum_with, tail_energy,
    SpectrumComparison, SpectrumReport, DEFAULT_TAU,
};
pub use svd::{svd, Svd};
