//! Training settings: defaults, overridden by a JSON config file, overridden by flags.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use einet::structures::SplitAxes;
use einet::trainer::EmMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    Rat,
    Pd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Gaussian,
    Categorical,
    Binomial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Axes {
    Vertical,
    Horizontal,
    Both,
}

impl From<Axes> for SplitAxes {
    fn from(a: Axes) -> Self {
        match a {
            Axes::Vertical => SplitAxes::Vertical,
            Axes::Horizontal => SplitAxes::Horizontal,
            Axes::Both => SplitAxes::Both,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Full,
    Stochastic,
}

impl From<Mode> for EmMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Full => EmMode::Full,
            Mode::Stochastic => EmMode::Stochastic,
        }
    }
}

/// Fully resolved training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub data: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub out: PathBuf,
    pub metrics: Option<PathBuf>,
    pub structure: StructureKind,
    pub depth: usize,
    pub replica: usize,
    pub structure_seed: Option<u64>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub delta: Vec<usize>,
    pub axes: Axes,
    pub k: usize,
    pub k_root: usize,
    pub family: FamilyKind,
    pub states: Option<usize>,
    pub trials: u32,
    pub mode: Mode,
    pub lambda: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clusters: usize,
    pub var_min: f64,
    pub var_max: Option<f64>,
    pub eps_w: f64,
    pub normalize: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            data: None,
            valid: None,
            out: PathBuf::from("model.einm"),
            metrics: None,
            structure: StructureKind::Rat,
            depth: 2,
            replica: 10,
            structure_seed: None,
            height: None,
            width: None,
            delta: vec![4],
            axes: Axes::Vertical,
            k: 10,
            k_root: 1,
            family: FamilyKind::Gaussian,
            states: None,
            trials: 1,
            mode: Mode::Stochastic,
            lambda: 0.5,
            batch: 500,
            epochs: 25,
            seed: 0,
            clusters: 1,
            var_min: 1e-6,
            var_max: None,
            eps_w: 1e-12,
            normalize: true,
        }
    }
}

/// Training flags. Every value is optional so that unset flags fall back to
/// the config file and then to the defaults.
#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    /// JSON file with training settings (same names as the long flags, snake_case).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training data (CSV or binary dataset file).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation data, evaluated after every epoch.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Output model file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Write the compiled layer plan as JSON to this path.
    #[arg(long)]
    pub dump_plan: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub structure: Option<StructureKind>,
    /// Split depth of random trees.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Number of random trees under the root.
    #[arg(long)]
    pub replica: Option<usize>,
    /// Seed for the random tree splits (defaults to --seed).
    #[arg(long)]
    pub structure_seed: Option<u64>,
    /// Image height for pd structures.
    #[arg(long)]
    pub height: Option<usize>,
    /// Image width for pd structures.
    #[arg(long)]
    pub width: Option<usize>,
    /// Comma-separated pd step sizes.
    #[arg(long, value_delimiter = ',')]
    pub delta: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub axes: Option<Axes>,
    /// Vector length of sums and leaves.
    #[arg(long)]
    pub k: Option<usize>,
    /// Vector length of the root.
    #[arg(long)]
    pub k_root: Option<usize>,
    #[arg(long, value_enum)]
    pub family: Option<FamilyKind>,
    /// Number of categorical states (defaults to max value + 1 in the data).
    #[arg(long)]
    pub states: Option<usize>,
    /// Number of binomial trials.
    #[arg(long)]
    pub trials: Option<u32>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Stochastic EM step size.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train a mixture of this many networks on k-means clusters.
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub var_min: Option<f64>,
    /// Upper variance clamp (defaults to 0.01 for Gaussian image models).
    #[arg(long)]
    pub var_max: Option<f64>,
    /// Floor on every sum weight.
    #[arg(long)]
    pub eps_w: Option<f64>,
    /// Keep 8-bit payloads as raw integers instead of dividing by 255.
    #[arg(long)]
    pub no_normalize: bool,
}

macro_rules! overlay {
    ($s:ident, $f:ident, $($field:ident),*) => {
        $(if let Some(v) = $f.$field.clone() { $s.$field = v; })*
    };
}

impl TrainFlags {
    /// Applies config file then flags on top of the defaults.
    pub fn resolve(&self) -> anyhow::Result<TrainSettings> {
        let mut s = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
                serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("invalid config {}: {e}", path.display()))?
            }
            None => TrainSettings::default(),
        };
        if self.data.is_some() {
            s.data = self.data.clone();
        }
        if self.valid.is_some() {
            s.valid = self.valid.clone();
        }
        if self.metrics.is_some() {
            s.metrics = self.metrics.clone();
        }
        if self.structure_seed.is_some() {
            s.structure_seed = self.structure_seed;
        }
        if self.height.is_some() {
            s.height = self.height;
        }
        if self.width.is_some() {
            s.width = self.width;
        }
        if self.states.is_some() {
            s.states = self.states;
        }
        if self.var_max.is_some() {
            s.var_max = self.var_max;
        }
        overlay!(
            s, self, out, structure, depth, replica, delta, axes, k, k_root, family, trials, mode, lambda, batch,
            epochs, seed, clusters, var_min, eps_w
        );
        if self.no_normalize {
            s.normalize = false;
        }
        Ok(s)
    }
}
