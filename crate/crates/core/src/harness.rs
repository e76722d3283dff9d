//! Parameter sweeps behind the landscape figures, emitted as flat CSV
//! tables plus a JSON manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{self, InitMethod, InitSpec};
use crate::lab::{self, EstimateConfig};
use crate::linalg::{ExtendedReal, NormKind};
use crate::network::{self, Family, Network, NetworkSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Experiment {
    /// K against depth, with and without residual shortcuts.
    DepthResidual,
    /// K against depth, with and without normalization.
    DepthNorm,
    Gain,
    Epsilon,
    Hidden,
    /// Sequence length (token count).
    Input,
    /// Per-layer `K_l0` and `K_Ll`.
    Layerwise,
    /// K against depth under L1, L2 and L∞.
    Norms,
    /// Singular-value histograms of Xavier-normal matrices.
    InitSpectrum,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Experiment::DepthResidual,
        Experiment::DepthNorm,
        Experiment::Gain,
        Experiment::Epsilon,
        Experiment::Hidden,
        Experiment::Input,
        Experiment::Layerwise,
        Experiment::Norms,
        Experiment::InitSpectrum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::DepthResidual => "depth_residual",
            Experiment::DepthNorm => "depth_norm",
            Experiment::Gain => "gain",
            Experiment::Epsilon => "epsilon",
            Experiment::Hidden => "hidden",
            Experiment::Input => "input",
            Experiment::Layerwise => "layerwise",
            Experiment::Norms => "norms",
            Experiment::InitSpectrum => "init_spectrum",
        }
    }

    /// Name of the swept quantity in the `grid_name` column.
    fn grid_name(self) -> &'static str {
        match self {
            Experiment::DepthResidual | Experiment::DepthNorm | Experiment::Norms => "depth",
            Experiment::Layerwise => "layer",
            Experiment::InitSpectrum => "size",
            e => e.name(),
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown experiment '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub experiment: Experiment,
    pub families: Vec<Family>,
    /// Values of the swept quantity; unused by `layerwise` and `init_spectrum`.
    pub grid: Vec<f64>,
    /// Template network; its family is replaced per row.
    pub base: NetworkSpec,
    /// Sampling settings; the seed is replaced per row.
    pub estimator: EstimateConfig,
    /// Norms of the `norms` experiment; the others use `estimator.norm`.
    pub norms: Vec<NormKind>,
    pub seeds: Vec<u64>,
    /// `(n_in, n_out)` matrix sizes of `init_spectrum`.
    pub spectrum_sizes: Vec<(usize, usize)>,
    pub bins: usize,
}

impl SweepConfig {
    pub fn new(experiment: Experiment, grid: Vec<f64>, base: NetworkSpec) -> Self {
        SweepConfig {
            experiment,
            families: vec![
                Family::ResNetConv,
                Family::TransformerDPA,
                Family::TransformerSCSA,
            ],
            grid,
            base,
            estimator: EstimateConfig {
                base_points: 5,
                perturbations: 5,
                ..EstimateConfig::default()
            },
            norms: NormKind::ALL.to_vec(),
            seeds: vec![0],
            spectrum_sizes: Vec::new(),
            bins: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.seeds.is_empty() {
            errs.push("seeds must be nonempty".to_string());
        }
        match self.experiment {
            Experiment::InitSpectrum => {
                if self.spectrum_sizes.is_empty() {
                    errs.push("init_spectrum needs spectrum_sizes".to_string());
                }
                if self.spectrum_sizes.iter().any(|&(a, b)| a == 0 || b == 0) {
                    errs.push("spectrum sizes must be >= 1".to_string());
                }
                if self.bins == 0 {
                    errs.push("bins must be >= 1".to_string());
                }
            }
            e => {
                if self.families.is_empty() {
                    errs.push("families must be nonempty".to_string());
                }
                if e != Experiment::Layerwise && self.grid.is_empty() {
                    errs.push(format!("{} needs a nonempty grid", e.name()));
                }
                if e == Experiment::Norms && self.norms.is_empty() {
                    errs.push("norms must be nonempty".to_string());
                }
                if let Err(err) = self.estimator.validate() {
                    errs.push(err.to_string());
                }
                for &v in &self.grid {
                    if let Err(msg) = check_grid_value(e, v) {
                        errs.push(msg);
                    }
                }
                // Every network the sweep will build must be valid.
                if errs.is_empty() {
                    for &family in &self.families {
                        for spec in self.specs_for(family) {
                            if let Err(Error::InvalidSpec(list)) = spec.validate() {
                                errs.extend(list.into_iter().map(|m| format!("{family}: {m}")));
                            }
                        }
                    }
                }
            }
        }
        errs.dedup();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(errs))
        }
    }

    fn spec(&self, family: Family) -> NetworkSpec {
        NetworkSpec {
            family,
            ..self.base.clone()
        }
    }

    fn specs_for(&self, family: Family) -> Vec<NetworkSpec> {
        let base = self.spec(family);
        match self.experiment {
            Experiment::DepthResidual | Experiment::DepthNorm | Experiment::Norms => {
                let depth = self.grid.iter().fold(0.0f64, |m, &v| m.max(v)) as usize;
                vec![NetworkSpec { depth, ..base }]
            }
            Experiment::Gain | Experiment::Hidden | Experiment::Input => self
                .grid
                .iter()
                .map(|&v| apply_grid(self.experiment, &base, v))
                .collect(),
            _ => vec![base],
        }
    }
}

fn check_grid_value(e: Experiment, v: f64) -> std::result::Result<(), String> {
    let integral = v >= 1.0 && v.fract() == 0.0 && v < 1e9;
    let ok = match e {
        Experiment::DepthResidual | Experiment::DepthNorm | Experiment::Norms => integral,
        Experiment::Hidden | Experiment::Input => integral,
        Experiment::Gain | Experiment::Epsilon => v > 0.0 && v.is_finite(),
        Experiment::Layerwise | Experiment::InitSpectrum => true,
    };
    if ok {
        Ok(())
    } else {
        Err(format!("invalid {} grid value {v}", e.grid_name()))
    }
}

/// `(h, w)` with `h·w = n`, `h` the largest divisor not above `√n`.
pub fn token_grid(n: usize) -> (usize, usize) {
    let mut h = (n as f64).sqrt() as usize;
    while h > 1 && n % h != 0 {
        h -= 1;
    }
    let h = h.max(1);
    (h, n / h)
}

fn apply_grid(e: Experiment, base: &NetworkSpec, v: f64) -> NetworkSpec {
    let mut spec = base.clone();
    match e {
        Experiment::Gain => spec.init.gain = v,
        Experiment::Hidden => spec.width = v as usize,
        Experiment::Input => {
            (spec.input_height, spec.input_width) = token_grid(v as usize);
        }
        _ => {}
    }
    spec
}

/// One cell of a Lipschitz sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub family: Family,
    pub toggle: String,
    pub grid_name: String,
    pub grid_value: f64,
    pub seed: u64,
    pub norm: NormKind,
    /// Sampled estimate; `inf` on overflow, `NaN` for an undefined `K_Ll`.
    #[serde(rename = "K_s")]
    pub k_s: f64,
    /// Composed analytic bound.
    #[serde(rename = "K_u")]
    pub k_u: f64,
    pub overflow_flag: bool,
}

/// One histogram bin of an `init_spectrum` sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub n_in: usize,
    pub n_out: usize,
    pub seed: u64,
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SweepTable {
    Lipschitz(Vec<SweepRow>),
    Spectrum(Vec<SpectrumRow>),
}

impl SweepTable {
    pub fn len(&self) -> usize {
        match self {
            SweepTable::Lipschitz(r) => r.len(),
            SweepTable::Spectrum(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> &[SweepRow] {
        match self {
            SweepTable::Lipschitz(r) => r,
            SweepTable::Spectrum(_) => &[],
        }
    }

    /// Rows satisfying `keep`; spectrum tables pass through unchanged.
    pub fn filter(&self, keep: impl Fn(&SweepRow) -> bool) -> SweepTable {
        match self {
            SweepTable::Lipschitz(r) => {
                SweepTable::Lipschitz(r.iter().filter(|row| keep(row)).cloned().collect())
            }
            s => s.clone(),
        }
    }
}

/// Inputs of one independent cell.
struct Cell {
    family: Family,
    toggle: &'static str,
    spec: NetworkSpec,
    seed: u64,
    /// Grid values covered by this cell, in output order.
    values: Vec<f64>,
}

pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepTable> {
    cfg.validate()?;
    if cfg.experiment == Experiment::InitSpectrum {
        return run_spectrum(cfg).map(SweepTable::Spectrum);
    }
    let cells = plan(cfg);
    let results: Vec<Result<Vec<SweepRow>>> = cells.par_iter().map(|c| run_cell(cfg, c)).collect();
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(SweepTable::Lipschitz(rows))
}

fn plan(cfg: &SweepConfig) -> Vec<Cell> {
    let toggles: &[&'static str] = match cfg.experiment {
        Experiment::DepthResidual => &["residual", "no_residual"],
        Experiment::DepthNorm => &["norm", "no_norm"],
        _ => &["default"],
    };
    let mut cells = Vec::new();
    for &family in &cfg.families {
        for &toggle in toggles {
            let mut spec = cfg.spec(family);
            match toggle {
                "residual" => spec.use_residual = true,
                "no_residual" => {
                    spec.use_residual = false;
                    spec.wrs_nu_init = None;
                }
                "norm" => spec.use_norm = true,
                "no_norm" => spec.use_norm = false,
                _ => {}
            }
            for &seed in &cfg.seeds {
                match cfg.experiment {
                    // One network per grid value.
                    Experiment::Gain | Experiment::Hidden | Experiment::Input => {
                        for &v in &cfg.grid {
                            cells.push(Cell {
                                family,
                                toggle,
                                spec: apply_grid(cfg.experiment, &spec, v),
                                seed,
                                values: vec![v],
                            });
                        }
                    }
                    _ => cells.push(Cell {
                        family,
                        toggle,
                        spec: spec.clone(),
                        seed,
                        values: cfg.grid.clone(),
                    }),
                }
            }
        }
    }
    cells
}

fn prefix_bound(per_layer: &[ExtendedReal], from: usize, to: usize) -> f64 {
    per_layer[from..to]
        .iter()
        .copied()
        .product::<ExtendedReal>()
        .to_f64()
}

fn run_cell(cfg: &SweepConfig, cell: &Cell) -> Result<Vec<SweepRow>> {
    let est = EstimateConfig {
        seed: cell.seed,
        ..cfg.estimator
    };
    let row = |grid_value: f64, norm: NormKind, k_s: f64, k_u: f64, overflow: bool| SweepRow {
        family: cell.family,
        toggle: cell.toggle.to_string(),
        grid_name: cfg.experiment.grid_name().to_string(),
        grid_value,
        seed: cell.seed,
        norm,
        k_s,
        k_u,
        overflow_flag: overflow,
    };
    let mut rows = Vec::new();
    match cfg.experiment {
        Experiment::DepthResidual | Experiment::DepthNorm | Experiment::Norms => {
            let norms = if cfg.experiment == Experiment::Norms {
                cfg.norms.clone()
            } else {
                vec![est.norm]
            };
            let depths: Vec<usize> = cell.values.iter().map(|&v| v as usize).collect();
            for (&v, per_norm) in cell
                .values
                .iter()
                .zip(depth_estimates(cell, &depths, &norms, &est)?)
            {
                for (&nk, (k_s, k_u, overflow)) in norms.iter().zip(per_norm) {
                    rows.push(row(v, nk, k_s, k_u, overflow));
                }
            }
        }
        Experiment::Gain | Experiment::Hidden | Experiment::Input => {
            let net = network::build(&cell.spec, cell.seed)?;
            let k_u = lab::compose_network_bound(&net)?.product.to_f64();
            let e = lab::estimate_K(&net, &est)?;
            rows.push(row(cell.values[0], est.norm, e.value, k_u, e.overflow));
        }
        Experiment::Epsilon => {
            let net = network::build(&cell.spec, cell.seed)?;
            let k_u = lab::compose_network_bound(&net)?.product.to_f64();
            for &eps in &cell.values {
                let e = lab::estimate_K(
                    &net,
                    &EstimateConfig {
                        epsilon: eps,
                        ..est
                    },
                )?;
                rows.push(row(eps, est.norm, e.value, k_u, e.overflow));
            }
        }
        Experiment::Layerwise => {
            let net = network::build(&cell.spec, cell.seed)?;
            let bounds = lab::compose_network_bound(&net)?.per_layer;
            let depth = net.depth();
            let x = lab::base_point(cell.seed, 0, net.input_shape);
            let p = lab::estimate_layerwise(
                &net,
                &x,
                est.perturbations,
                est.epsilon,
                est.norm,
                cell.seed,
            )?;
            for l in 0..=depth {
                let k = p.k_l0[l];
                rows.push(SweepRow {
                    toggle: "K_l0".into(),
                    ..row(
                        l as f64,
                        est.norm,
                        k,
                        prefix_bound(&bounds, 0, l),
                        k == f64::INFINITY,
                    )
                });
            }
            for l in 0..=depth {
                let k = p.k_ll[l].unwrap_or(f64::NAN);
                rows.push(SweepRow {
                    toggle: "K_Ll".into(),
                    ..row(
                        l as f64,
                        est.norm,
                        k,
                        prefix_bound(&bounds, l, depth),
                        k == f64::INFINITY,
                    )
                });
            }
        }
        Experiment::InitSpectrum => unreachable!("handled by run_spectrum"),
    }
    Ok(rows)
}

/// `(K_s, K_u, overflow)` per depth and norm. Networks drawn with
/// depth-independent initialization are prefixes of the deepest one, so a
/// single forward sweep serves the whole grid.
fn depth_estimates(
    cell: &Cell,
    depths: &[usize],
    norms: &[NormKind],
    est: &EstimateConfig,
) -> Result<Vec<Vec<(f64, f64, bool)>>> {
    let deepest = depths.iter().copied().max().unwrap_or(1);
    let depth_scaled = cell.spec.init.method == InitMethod::DepthAware;
    let collect = |net: &Network, ds: &[usize]| -> Result<Vec<Vec<(f64, f64, bool)>>> {
        let bounds = lab::compose_network_bound(net)?.per_layer;
        let est = lab::estimate_prefixes(net, ds, norms, est)?;
        Ok(ds
            .iter()
            .zip(est)
            .map(|(&d, per_norm)| {
                let k_u = prefix_bound(&bounds, 0, d);
                per_norm
                    .into_iter()
                    .map(|e| (e.value, k_u, e.overflow))
                    .collect()
            })
            .collect())
    };
    if !depth_scaled {
        let spec = NetworkSpec {
            depth: deepest,
            ..cell.spec.clone()
        };
        return collect(&network::build(&spec, cell.seed)?, depths);
    }
    let mut out = Vec::with_capacity(depths.len());
    for &d in depths {
        let spec = NetworkSpec {
            depth: d,
            ..cell.spec.clone()
        };
        out.extend(collect(&network::build(&spec, cell.seed)?, &[d])?);
    }
    Ok(out)
}

fn run_spectrum(cfg: &SweepConfig) -> Result<Vec<SpectrumRow>> {
    let spec = InitSpec::new(InitMethod::XavierNormal, 1.0);
    let jobs: Vec<((usize, usize), u64)> = cfg
        .spectrum_sizes
        .iter()
        .flat_map(|&s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let results: Vec<Result<Vec<SpectrumRow>>> = jobs
        .par_iter()
        .map(|&((n_in, n_out), seed)| {
            let w = init::init_matrix(&spec, n_in, n_out, seed)?;
            let r = init::spectrum_report(&w, cfg.bins)?;
            Ok(r.bins
                .iter()
                .map(|b| SpectrumRow {
                    n_in,
                    n_out,
                    seed,
                    bin_left: b.bin_left,
                    bin_right: b.bin_right,
                    count: b.count,
                    sigma_min: r.sigma_min,
                    sigma_max: r.sigma_max,
                })
                .collect())
        })
        .collect();
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Writes `table` as CSV (LF endings, `inf` for +∞). An empty table is an
/// error and leaves no file behind.
pub fn emit_csv(table: &SweepTable, path: &Path) -> Result<()> {
    if table.is_empty() {
        return Err(Error::InvalidParam(format!(
            "refusing to write an empty table to {}",
            path.display()
        )));
    }
    let mut buf = Vec::new();
    write_csv(table, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// CSV text of `table` with LF line endings.
pub fn write_csv<W: Write>(table: &SweepTable, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    match table {
        SweepTable::Lipschitz(rows) => rows.iter().try_for_each(|r| w.serialize(r))?,
        SweepTable::Spectrum(rows) => rows.iter().try_for_each(|r| w.serialize(r))?,
    }
    w.flush()?;
    Ok(())
}

/// Parses a Lipschitz table written by [`emit_csv`].
pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<SweepRow>, _>>()?)
}

/// Parses a spectrum table written by [`emit_csv`].
pub fn read_spectrum_csv(path: &Path) -> Result<Vec<SpectrumRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<SpectrumRow>, _>>()?)
}

/// Families ordered by decreasing `K_s` among rows at one grid value, seed
/// and norm. Ties keep the configured family order.
pub fn family_ranking(
    rows: &[SweepRow],
    grid_value: f64,
    seed: u64,
    norm: NormKind,
) -> Vec<Family> {
    let mut sel: Vec<&SweepRow> = rows
        .iter()
        .filter(|r| r.grid_value == grid_value && r.seed == seed && r.norm == norm)
        .collect();
    sel.sort_by(|a, b| b.k_s.total_cmp(&a.k_s));
    sel.into_iter().map(|r| r.family).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    /// Seconds-scale sanity run.
    Smoke,
    /// D = 256 with 16×16 inputs, depths up to 16.
    Desk,
    /// D = 1024 with 32×32 inputs and the full published grids.
    Paper,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Smoke => "smoke",
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Scale::Smoke),
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            _ => Err(Error::InvalidParam(format!(
                "unknown scale '{s}' (smoke|desk|paper)"
            ))),
        }
    }
}

/// Grids and sizes of one scale preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigurePreset {
    pub scale: Scale,
    pub width: usize,
    pub heads: usize,
    pub input_side: usize,
    pub depths: Vec<f64>,
    pub gains: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub hidden: Vec<f64>,
    pub inputs: Vec<f64>,
    /// Depth of the gain, epsilon and layer-wise runs.
    pub base_depth: usize,
    /// Depth of the hidden-dimension and input-size runs.
    pub short_depth: usize,
    pub base_points: usize,
    pub perturbations: usize,
    pub seeds: Vec<u64>,
    pub spectrum_sizes: Vec<(usize, usize)>,
    pub bins: usize,
}

impl FigurePreset {
    pub fn new(scale: Scale) -> Self {
        match scale {
            Scale::Smoke => FigurePreset {
                scale,
                width: 16,
                heads: 2,
                input_side: 4,
                depths: vec![1.0, 2.0, 4.0],
                gains: vec![0.5, 2.0],
                epsilons: vec![0.25, 1.0],
                hidden: vec![8.0, 16.0],
                inputs: vec![8.0, 16.0],
                base_depth: 3,
                short_depth: 2,
                base_points: 2,
                perturbations: 2,
                seeds: vec![0],
                spectrum_sizes: vec![(16, 16), (16, 32)],
                bins: 8,
            },
            Scale::Desk => FigurePreset {
                scale,
                width: 256,
                heads: 8,
                input_side: 16,
                depths: vec![1.0, 2.0, 4.0, 8.0, 12.0, 16.0],
                gains: vec![0.5, 1.0, 2.0, 4.0],
                epsilons: vec![0.25, 1.0, 16.0, 256.0, 1024.0],
                hidden: vec![64.0, 128.0, 256.0, 512.0],
                inputs: vec![32.0, 64.0, 128.0, 256.0],
                base_depth: 12,
                short_depth: 4,
                base_points: 5,
                perturbations: 5,
                seeds: vec![0],
                spectrum_sizes: vec![(256, 256), (256, 512), (512, 512)],
                bins: 50,
            },
            Scale::Paper => FigurePreset {
                scale,
                width: 1024,
                heads: 8,
                input_side: 32,
                depths: vec![1.0, 2.0, 4.0, 8.0, 12.0, 16.0, 24.0, 32.0, 48.0, 64.0],
                gains: vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0],
                epsilons: vec![0.25, 0.5, 1.0, 4.0, 16.0, 64.0, 128.0, 256.0, 512.0, 1024.0],
                hidden: vec![
                    128.0, 256.0, 512.0, 768.0, 1024.0, 2048.0, 3072.0, 4096.0, 6144.0, 8192.0,
                ],
                inputs: vec![
                    32.0, 64.0, 128.0, 256.0, 384.0, 512.0, 768.0, 1024.0, 1532.0, 2048.0,
                ],
                base_depth: 12,
                short_depth: 4,
                base_points: 10,
                perturbations: 10,
                seeds: vec![0],
                spectrum_sizes: vec![(1024, 1024), (1024, 2048), (2048, 2048)],
                bins: 50,
            },
        }
    }

    fn base(&self, depth: usize) -> NetworkSpec {
        NetworkSpec {
            depth,
            width: self.width,
            heads: self.heads,
            input_height: self.input_side,
            input_width: self.input_side,
            ..NetworkSpec::desk(Family::TransformerDPA)
        }
    }

    fn sweep(&self, experiment: Experiment, grid: Vec<f64>, depth: usize) -> SweepConfig {
        let mut cfg = SweepConfig::new(experiment, grid, self.base(depth));
        cfg.estimator.base_points = self.base_points;
        cfg.estimator.perturbations = self.perturbations;
        cfg.seeds = self.seeds.clone();
        cfg.spectrum_sizes = self.spectrum_sizes.clone();
        cfg.bins = self.bins;
        cfg
    }

    /// Sweep configurations behind each figure file, in file order.
    pub fn sweeps(&self) -> Vec<(&'static str, SweepConfig)> {
        let mut fig6_hidden = self.sweep(Experiment::Hidden, self.hidden.clone(), self.short_depth);
        // Heads must divide every hidden size.
        let min_hidden = self.hidden.iter().fold(f64::INFINITY, |m, &v| m.min(v)) as usize;
        while fig6_hidden.base.heads > 1 && min_hidden % fig6_hidden.base.heads != 0 {
            fig6_hidden.base.heads /= 2;
        }
        vec![
            (
                "fig3",
                self.sweep(Experiment::InitSpectrum, Vec::new(), self.base_depth),
            ),
            (
                "fig4",
                self.sweep(
                    Experiment::DepthResidual,
                    self.depths.clone(),
                    self.base_depth,
                ),
            ),
            (
                "fig5",
                self.sweep(Experiment::DepthNorm, self.depths.clone(), self.base_depth),
            ),
            (
                "fig6",
                self.sweep(Experiment::Gain, self.gains.clone(), self.base_depth),
            ),
            (
                "fig6",
                self.sweep(Experiment::Epsilon, self.epsilons.clone(), self.base_depth),
            ),
            ("fig6", fig6_hidden),
            (
                "fig6",
                self.sweep(Experiment::Input, self.inputs.clone(), self.short_depth),
            ),
            (
                "fig7",
                self.sweep(Experiment::Layerwise, Vec::new(), self.base_depth),
            ),
            (
                "fig9",
                self.sweep(Experiment::Norms, self.depths.clone(), self.base_depth),
            ),
        ]
    }
}

/// Record of one `run_all_paper_figures` call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub scale: Scale,
    pub seeds: Vec<u64>,
    pub files: Vec<String>,
    pub config: FigurePreset,
    /// Only filled on request, so that repeated runs stay byte-identical.
    pub wall_time_s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FigureOptions {
    /// Overrides the preset seeds.
    pub seeds: Option<Vec<u64>>,
    pub record_wall_time: bool,
}

/// Runs every figure sweep of `scale` into `out_dir`: `fig3.csv` …
/// `fig9.csv` plus `manifest.json`.
pub fn run_all_paper_figures(
    scale: Scale,
    out_dir: &Path,
    opts: &FigureOptions,
) -> Result<Manifest> {
    let start = Instant::now();
    let mut preset = FigurePreset::new(scale);
    if let Some(seeds) = &opts.seeds {
        preset.seeds = seeds.clone();
    }
    let sweeps = preset.sweeps();
    for (_, cfg) in &sweeps {
        cfg.validate()?;
    }
    fs::create_dir_all(out_dir)?;
    let mut fig6 = Vec::new();
    let mut files = Vec::new();
    let mut write = |name: &str, table: SweepTable| -> Result<()> {
        let file = format!("{name}.csv");
        emit_csv(&table, &out_dir.join(&file))?;
        files.push(file);
        Ok(())
    };
    for (name, cfg) in &sweeps {
        let table = run_sweep(cfg)?;
        match (*name, table) {
            ("fig6", SweepTable::Lipschitz(rows)) => {
                fig6.extend(rows);
                if cfg.experiment == Experiment::Input {
                    write("fig6", SweepTable::Lipschitz(std::mem::take(&mut fig6)))?;
                }
            }
            ("fig7", table) => {
                write("fig7", table.filter(|r| r.toggle == "K_l0"))?;
                write("fig8", table.filter(|r| r.toggle == "K_Ll"))?;
            }
            (name, table) => write(name, table)?,
        }
    }
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        scale,
        seeds: preset.seeds.clone(),
        files,
        config: preset,
        wall_time_s: opts.record_wall_time.then(|| start.elapsed().as_secs_f64()),
    };
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

/// Path of a figure file inside an output directory.
pub fn figure_path(out_dir: &Path, figure: &str) -> PathBuf {
    out_dir.join(format!("{figure}.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_grid_factors() {
        assert_eq!(token_grid(256), (16, 16));
        assert_eq!(token_grid(128), (8, 16));
        assert_eq!(token_grid(1532), (4, 383));
        assert_eq!(token_grid(7), (1, 7));
    }

    #[test]
    fn invalid_grid_is_listed() {
        let mut cfg = SweepConfig::new(
            Experiment::Hidden,
            vec![12.0, 0.5],
            NetworkSpec::desk(Family::TransformerDPA),
        );
        cfg.seeds.clear();
        let Err(Error::InvalidSpec(errs)) = cfg.validate() else {
            panic!("expected InvalidSpec");
        };
        assert!(errs.len() >= 2, "{errs:?}");
    }

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
    }
}
