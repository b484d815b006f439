//! Statistics over allocation matrices: helping shares, layer totals and
//! their significance, oscillation periods, heavy tails, synchronized
//! moments of learning, neuron specialization and fan-in/fan-out structure.

mod help;
mod layers;
mod neurons;
mod oscillation;
mod sync;
mod tails;

pub use help::{help_fraction_histogram, helping_stats, HelpCounts, HelpSink, HelpStats, Histogram};
pub use layers::{
    layer_series, layer_significance, layer_totals, one_sample_t, sign_test, LayerSignificance, LayerTotals,
};
pub use neurons::{fanio_correlation, neuron_specialization, top_k_ratio, FanioLayer, LayerSpecialization};
pub use oscillation::{
    oscillation_counts, GradientSignSink, OscillationReport, SignChangeCounter, SignChangeSummary, SignPeriod,
};
pub use sync::{alignment_test, detect_peaks, AlignmentOptions, SyncReport};
pub use tails::{
    equal_windows, excess_kurtosis, kurtosis_test, tail_mass_ratio, tail_stats, window_stats, TailOptions,
    TailWindow,
};
