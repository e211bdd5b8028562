//! Built-in experiment configurations.

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Name and JSON text of every preset.
pub const PRESETS: [(&str, &str); 5] = [
    ("single_spin", include_str!("../presets/single_spin.json")),
    ("tilted_ising", include_str!("../presets/tilted_ising.json")),
    ("tfim_quench_l12", include_str!("../presets/tfim_quench_l12.json")),
    ("tfim_quench_n8", include_str!("../presets/tfim_quench_n8.json")),
    ("tci_bench_n8", include_str!("../presets/tci_bench_n8.json")),
];

pub fn preset_text(name: &str) -> CliResult<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
        .ok_or_else(|| CliError::UnknownPreset(name.to_string()))
}

pub fn preset(name: &str) -> CliResult<ExperimentConfig> {
    ExperimentConfig::from_json(preset_text(name)?)
}
