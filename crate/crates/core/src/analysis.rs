//! Layer-wise spectral profiles of hidden states on per-user local graphs, and
//! the smoothing probe for the temporal filter.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::graph::{combinatorial_laplacian, local_subgraph, CooccurrenceGraph, LocalGraph};
use crate::model::SequenceEncoder;
use crate::numcore::{DenseMatrix, Direction};
use crate::spectral::{band_energy, gft, smoothness, SpectralBasis};
use crate::tfm::{ring_adjacency, tfm_apply, ButterworthSpec};

/// Summed band energies `raw[layer][band]` over traced users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralProfile {
    pub n_bands: usize,
    pub raw: Vec<Vec<f64>>,
    pub users: usize,
    pub skipped_short: usize,
    pub skipped_edgeless: usize,
    pub fingerprint: Option<String>,
}

impl SpectralProfile {
    pub fn empty(n_layers: usize, n_bands: usize) -> Self {
        Self {
            n_bands,
            raw: vec![vec![0.0; n_bands]; n_layers],
            users: 0,
            skipped_short: 0,
            skipped_edgeless: 0,
            fingerprint: None,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.raw.len()
    }

    /// Per-layer shares; a layer with no energy maps to zeros.
    pub fn shares(&self) -> Vec<Vec<f64>> {
        self.raw
            .iter()
            .map(|row| {
                let total: f64 = row.iter().sum();
                row.iter().map(|e| if total > 0.0 { e / total } else { 0.0 }).collect()
            })
            .collect()
    }

    /// Adds another profile's users and energies.
    pub fn merge(&mut self, other: &SpectralProfile) -> Result<()> {
        if other.n_bands != self.n_bands || other.n_layers() != self.n_layers() {
            return Err(Error::input("profiles have different shapes"));
        }
        for (a, b) in self.raw.iter_mut().zip(&other.raw) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.users += other.users;
        self.skipped_short += other.skipped_short;
        self.skipped_edgeless += other.skipped_edgeless;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let shares = self.shares();
        let mut out = String::from("layer,band,energy,share\n");
        for (l, row) in self.raw.iter().enumerate() {
            for (b, e) in row.iter().enumerate() {
                writeln!(out, "{l},{},{e:?},{:?}", b + 1, shares[l][b]).unwrap();
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let body = serde_json::json!({
            "fingerprint": self.fingerprint,
            "n_bands": self.n_bands,
            "users": self.users,
            "skipped_short": self.skipped_short,
            "skipped_edgeless": self.skipped_edgeless,
            "raw": self.raw,
            "share": self.shares(),
        });
        serde_json::to_string_pretty(&body).unwrap()
    }
}

/// Band energies of each layer's hidden matrix on one local graph; the
/// matrices must have one row per local node.
pub fn user_band_energies(layers: &[DenseMatrix], local: &LocalGraph, n_bands: usize) -> Result<Vec<Vec<f64>>> {
    let basis = SpectralBasis::from_laplacian(&local.laplacian)?;
    layers
        .iter()
        .map(|h| Ok(band_energy(&gft(&basis, h, Direction::Forward)?, n_bands)?.energies))
        .collect()
}

enum UserOutcome {
    Traced(Vec<Vec<f64>>),
    Short,
    Edgeless,
}

/// For each sequence `v_1..v_T` with `T ≥ 3`: run the encoder on `v_1..v_{T−1}`,
/// build the local graph on `v_2..v_T`, and sum band energies per layer.
pub fn trace_spectral_profile(
    encoder: &SequenceEncoder,
    tokens: &DenseMatrix,
    sequences: &[Vec<usize>],
    graph: &CooccurrenceGraph,
    n_bands: usize,
) -> Result<SpectralProfile> {
    if n_bands == 0 {
        return Err(Error::input("at least one band is required"));
    }
    let outcomes: Vec<Result<UserOutcome>> = sequences
        .par_iter()
        .map(|seq| {
            let t = seq.len();
            if t < 3 {
                return Ok(UserOutcome::Short);
            }
            let local = local_subgraph(graph, &seq[1..])?;
            if local.is_edgeless() {
                return Ok(UserOutcome::Edgeless);
            }
            let trace = encoder.encode(tokens, &seq[..t - 1], true)?.trace.unwrap();
            Ok(UserOutcome::Traced(user_band_energies(&trace.layers, &local, n_bands)?))
        })
        .collect();
    let mut profile = SpectralProfile::empty(encoder.backbone.config.n_layers + 1, n_bands);
    for o in outcomes {
        match o? {
            UserOutcome::Traced(e) => {
                for (a, b) in profile.raw.iter_mut().zip(&e) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                }
                profile.users += 1;
            }
            UserOutcome::Short => profile.skipped_short += 1,
            UserOutcome::Edgeless => profile.skipped_edgeless += 1,
        }
    }
    if profile.skipped_short + profile.skipped_edgeless > 0 {
        log::info!(
            "profile skipped {} short and {} edgeless sequences",
            profile.skipped_short,
            profile.skipped_edgeless
        );
    }
    Ok(profile)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandAttenuation {
    pub band: usize,
    /// Final over initial share; `None` when the initial share is zero.
    pub ratio: Option<f64>,
    /// Least-squares slope of share against layer index.
    pub slope: f64,
}

pub fn attenuation_metric(profile: &SpectralProfile) -> Result<Vec<BandAttenuation>> {
    let n = profile.n_layers();
    if n < 2 {
        return Err(Error::input("attenuation needs at least two layers"));
    }
    let shares = profile.shares();
    let xbar = (n - 1) as f64 / 2.0;
    let sxx: f64 = (0..n).map(|l| (l as f64 - xbar).powi(2)).sum();
    Ok((0..profile.n_bands)
        .map(|b| {
            let ys: Vec<f64> = shares.iter().map(|row| row[b]).collect();
            let ybar = ys.iter().sum::<f64>() / n as f64;
            let sxy: f64 = ys.iter().enumerate().map(|(l, y)| (l as f64 - xbar) * (y - ybar)).sum();
            BandAttenuation {
                band: b + 1,
                ratio: (ys[0] != 0.0).then(|| ys[n - 1] / ys[0]),
                slope: sxy / sxx,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum GraphFamily {
    Ring,
    Locality { rho: f64 },
}

impl GraphFamily {
    /// Adjacency on `t` positions: unit cycle, or `ρ^{|i−j|}` off the diagonal.
    pub fn adjacency(&self, t: usize) -> DenseMatrix {
        match *self {
            GraphFamily::Ring => ring_adjacency(t),
            GraphFamily::Locality { rho } => DenseMatrix::from_fn(t, t, |i, j| {
                if i == j {
                    0.0
                } else {
                    rho.powi((i as i32 - j as i32).abs())
                }
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub family: GraphFamily,
    pub spec: ButterworthSpec,
    /// When set the filter is skipped, so before and after coincide.
    pub disabled: bool,
    pub t_min: usize,
    pub t_max: usize,
    pub dim: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            family: GraphFamily::Ring,
            spec: ButterworthSpec::default(),
            disabled: false,
            t_min: 3,
            t_max: 64,
            dim: 8,
            trials: 1000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub config: ProbeConfig,
    pub trials: usize,
    pub quadratic_violations: usize,
    pub rayleigh_violations: usize,
    pub mean_smoothness_before: f64,
    pub mean_smoothness_after: f64,
    pub mean_rayleigh_before: f64,
    pub mean_rayleigh_after: f64,
    /// Acceptable Rayleigh violation rate, when one has been registered.
    pub threshold: Option<f64>,
}

impl Theorem1Report {
    pub fn rayleigh_violation_rate(&self) -> f64 {
        self.rayleigh_violations as f64 / self.trials.max(1) as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap()
    }
}

/// Relative slack for counting an increase as a violation rather than rounding.
const VIOLATION_SLACK: f64 = 1e-10;

fn increased(before: f64, after: f64) -> bool {
    after > before + VIOLATION_SLACK * before.abs().max(1e-300) + 1e-14
}

/// Random Gaussian signals on random-length graphs of the family, filtered
/// along the node order. Uses combinatorial Laplacians.
pub fn theorem1_probe(config: &ProbeConfig) -> Result<Theorem1Report> {
    if let GraphFamily::Locality { rho } = config.family {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::input(format!("ρ must lie in (0, 1), got {rho}")));
        }
    }
    if config.t_min < 3 || config.t_max < config.t_min || config.dim == 0 {
        return Err(Error::input("probe needs 3 ≤ t_min ≤ t_max and dim ≥ 1"));
    }
    config.spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = Theorem1Report {
        config: config.clone(),
        trials: config.trials,
        quadratic_violations: 0,
        rayleigh_violations: 0,
        mean_smoothness_before: 0.0,
        mean_smoothness_after: 0.0,
        mean_rayleigh_before: 0.0,
        mean_rayleigh_after: 0.0,
        threshold: None,
    };
    for _ in 0..config.trials {
        let t = rng.random_range(config.t_min..=config.t_max);
        let l = combinatorial_laplacian(&config.family.adjacency(t));
        let f = DenseMatrix::from_fn(t, config.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let g = if config.disabled { f.clone() } else { tfm_apply(&f, &config.spec)? };
        let (sb, sa) = (smoothness(&l, &f)?, smoothness(&l, &g)?);
        let (nb, na) = (f.frobenius_sq(), g.frobenius_sq());
        let (rb, ra) = (sb / nb, if na > 0.0 { sa / na } else { 0.0 });
        report.quadratic_violations += increased(sb, sa) as usize;
        report.rayleigh_violations += increased(rb, ra) as usize;
        report.mean_smoothness_before += sb;
        report.mean_smoothness_after += sa;
        report.mean_rayleigh_before += rb;
        report.mean_rayleigh_after += ra;
    }
    let n = config.trials.max(1) as f64;
    report.mean_smoothness_before /= n;
    report.mean_smoothness_after /= n;
    report.mean_rayleigh_before /= n;
    report.mean_rayleigh_after /= n;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::input(format!("unknown report format `{other}`"))),
        }
    }
}

pub fn emit_profile(profile: &SpectralProfile, path: &Path, format: ReportFormat) -> Result<()> {
    let body = match format {
        ReportFormat::Csv => profile.to_csv(),
        ReportFormat::Json => profile.to_json(),
    };
    write_atomic(path, body.as_bytes())
}

pub fn emit_theorem1(report: &Theorem1Report, path: &Path) -> Result<()> {
    write_atomic(path, report.to_json().as_bytes())
}
