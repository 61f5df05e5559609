//! Run configuration: a flat TOML file merged with command-line flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BlockChoice {
    Gap,
    Steady,
    Full,
}

/// Every tunable of every command. Fields left unset take the command's
/// default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Optional in a config file; must match the subcommand when present.
    #[arg(skip)]
    pub command: Option<String>,
    /// Majoranas per copy.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated coupling values.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    #[serde(alias = "mu_list")]
    pub mu: Option<Vec<f64>>,
    /// `start,stop,count`, inclusive; replaces `mu` when given.
    #[arg(long, value_parser = parse_range)]
    pub mu_range: Option<Range>,
    #[arg(long, value_enum)]
    pub block: Option<BlockChoice>,
    /// Eigenvalues kept per μ when a block is too large for dense solves.
    #[arg(long)]
    pub k: Option<usize>,
    /// Largest block dimension diagonalized densely.
    #[arg(long)]
    pub dense_limit: Option<usize>,

    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub n_list: Option<Vec<usize>>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub base_seed: Option<u64>,
    /// Ensemble journal; defaults to `journal.jsonl` in the output directory.
    #[arg(long)]
    pub journal: Option<PathBuf>,
    /// Decay-rate results of `sd-solve` to juxtapose with the spectral gap.
    #[arg(long)]
    pub sd_results: Option<PathBuf>,

    /// Interaction strength of the large-N equations.
    #[arg(long)]
    pub j: Option<f64>,
    /// Comma-separated contour lengths.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub t: Option<Vec<f64>>,
    #[arg(long, value_parser = parse_range)]
    pub t_range: Option<Range>,
    /// Contour grid points of the branch scan.
    #[arg(long)]
    pub m: Option<usize>,
    /// Also solve on 2m points and extrapolate the action.
    #[arg(long)]
    pub richardson: Option<bool>,
    /// Contour length used for decay-rate fits; 0 skips them.
    #[arg(long)]
    pub decay_t: Option<f64>,
    #[arg(long)]
    pub decay_m: Option<usize>,
    /// `lo,hi` window of the decay fit.
    #[arg(long, value_parser = parse_pair)]
    pub fit_window: Option<(f64, f64)>,
    #[arg(long)]
    pub mixing: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,

    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Worker threads; overrides `LSYK_WORKERS`.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64, pub usize);

impl Range {
    pub fn values(&self) -> Vec<f64> {
        let Range(a, b, n) = *self;
        if n == 1 {
            return vec![a];
        }
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    }
}

fn parse_range(s: &str) -> Result<Range, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected start,stop,count".into());
    }
    let a = parts[0].trim().parse::<f64>().map_err(|e| e.to_string())?;
    let b = parts[1].trim().parse::<f64>().map_err(|e| e.to_string())?;
    let n = parts[2].trim().parse::<usize>().map_err(|e| e.to_string())?;
    Ok(Range(a, b, n))
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected lo,hi".into());
    }
    let a = parts[0].trim().parse::<f64>().map_err(|e| e.to_string())?;
    let b = parts[1].trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((a, b))
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($f:ident),*) => {
        $(if $top.$f.is_some() { $base.$f = $top.$f.clone(); })*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    /// Fields set in `top` replace those of `self`.
    pub fn overlay(mut self, top: &RunConfig) -> Self {
        overlay!(
            self, top, n, q, seed, mu, mu_range, block, k, dense_limit, n_list, samples, base_seed, journal, sd_results, j,
            t, t_range, m, richardson, decay_t, decay_m, fit_window, mixing, tol, max_iter, out_dir, format, workers
        );
        self
    }

    /// `mu_range` if given, else `mu`.
    pub fn mu_values(&self) -> Option<Vec<f64>> {
        self.mu_range.map(|r| r.values()).or_else(|| self.mu.clone())
    }

    pub fn t_values(&self) -> Option<Vec<f64>> {
        self.t_range.map(|r| r.values()).or_else(|| self.t.clone())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("lsyk-out"))
    }

    pub fn format(&self) -> Format {
        self.format.unwrap_or(Format::Csv)
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    /// Worker count and output location do not affect results and are left
    /// out.
    pub fn hash(&self, command: &str) -> String {
        let mut c = self.clone();
        c.workers = None;
        c.out_dir = None;
        let body = serde_json::json!({ "command": command, "config": c });
        let digest = Sha256::digest(body.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let file: RunConfig = toml::from_str("n = 8\nmu = [0.1, 0.2]\nseed = 3").unwrap();
        let flags = RunConfig { n: Some(10), ..Default::default() };
        let c = file.overlay(&flags);
        assert_eq!(c.n, Some(10));
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.mu, Some(vec![0.1, 0.2]));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("nn = 8").is_err());
    }

    #[test]
    fn ranges() {
        let c: RunConfig = toml::from_str("mu_range = [0.0, 1.0, 5]").unwrap();
        assert_eq!(c.mu_values().unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(parse_range("0,1,3").unwrap().values(), vec![0.0, 0.5, 1.0]);
        assert!(parse_range("0,1").is_err());
    }

    #[test]
    fn hash_ignores_workers_and_output() {
        let a = RunConfig { n: Some(4), workers: Some(1), ..Default::default() };
        let b = RunConfig { n: Some(4), workers: Some(8), out_dir: Some("x".into()), ..Default::default() };
        assert_eq!(a.hash("spectrum"), b.hash("spectrum"));
        assert_ne!(a.hash("spectrum"), a.hash("gap-scan"));
    }
}
