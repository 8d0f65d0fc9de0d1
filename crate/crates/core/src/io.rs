//! CSV datasets, run configuration, the binary chain artifact and tabular exports.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{Dataset, Hyperpriors, ParamState, PriorSpec};
use crate::prediction::{PredictiveSummary, StreamOptions};
use crate::sampler::{AcceptanceTally, ChainStore, SamplerConfig};
use crate::spatial_basis::{
    build_knot_grid, grid_locations, subsample_knots, Bounds, KnotSet, Location,
};

/// Writes through a temporary file in the same directory, then renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn parse_err(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source.to_string(),
        line,
        message: message.into(),
    }
}

/// Options for reading a dataset CSV.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetOptions {
    /// Categorical files: label of the control class (default: the last label to appear).
    /// Count files: name given to the implicit control class (default `"control"`).
    pub control_label: Option<String>,
    /// Fixed class order, control last. Categorical files may use any subset of these labels;
    /// count files must name the same classes.
    pub class_labels: Option<Vec<String>>,
}

/// Reads `x,y,class` (one trial per row) or `x,y,n,count_<label>...` (control count implied).
///
/// Class labels of categorical files are collected in order of first appearance, then the
/// control label is moved last.
pub fn read_dataset_from<R: Read>(reader: R, source: &str, opts: &DatasetOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(source, 1, format!("cannot read header: {e}")))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (xi, yi) = match (col("x"), col("y")) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(parse_err(source, 1, "missing required columns x and y")),
    };
    let class_col = col("class");
    let count_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("count_").map(|l| (i, l.to_string())))
        .collect();
    let n_col = col("n");
    let categorical = match (class_col, n_col, count_cols.is_empty()) {
        (Some(_), None, true) => true,
        (None, Some(_), false) => false,
        (Some(_), _, _) => {
            return Err(parse_err(source, 1, "file mixes a class column with n/count_ columns"))
        }
        _ => {
            return Err(parse_err(
                source,
                1,
                "missing columns: expected x,y,class or x,y,n,count_<label>...",
            ))
        }
    };

    let mut locations = Vec::new();
    let mut raw_classes: Vec<String> = Vec::new();
    let mut class_lines: Vec<usize> = Vec::new();
    let mut trials = Vec::new();
    let mut counts: Vec<Vec<u32>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(source, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let num = |i: usize, what: &str| -> Result<f64> {
            let s = rec.get(i).unwrap_or("");
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(source, line, format!("non-numeric {what} '{s}'")))
        };
        let loc = Location::new(num(xi, "x coordinate")?, num(yi, "y coordinate")?);
        locations.push(loc);
        if categorical {
            let label = rec.get(class_col.unwrap_or(0)).unwrap_or("").to_string();
            if label.is_empty() {
                return Err(parse_err(source, line, "empty class label"));
            }
            raw_classes.push(label);
            class_lines.push(line);
        } else {
            let int = |i: usize, what: &str| -> Result<u32> {
                let s = rec.get(i).unwrap_or("");
                s.parse::<u32>()
                    .map_err(|_| parse_err(source, line, format!("{what} '{s}' is not a non-negative integer")))
            };
            let n = int(n_col.unwrap_or(0), "trial count n")?;
            if n == 0 {
                return Err(parse_err(source, line, "trial count n must be positive"));
            }
            let mut row = Vec::with_capacity(count_cols.len());
            for (i, label) in &count_cols {
                let c = int(*i, &format!("count_{label}"))?;
                if c > n {
                    return Err(parse_err(source, line, format!("count_{label} = {c} exceeds n = {n}")));
                }
                row.push(c);
            }
            let total: u64 = row.iter().map(|&c| c as u64).sum();
            if total > n as u64 {
                return Err(parse_err(source, line, format!("class counts sum to {total}, exceeding n = {n}")));
            }
            trials.push(n);
            counts.push(row);
        }
    }
    if locations.is_empty() {
        return Err(parse_err(source, 1, "no data rows"));
    }

    if categorical {
        let mut labels: Vec<String> = Vec::new();
        if let Some(fixed) = &opts.class_labels {
            labels = fixed.clone();
            if let Some(i) = raw_classes.iter().position(|c| !labels.contains(c)) {
                return Err(parse_err(
                    source,
                    class_lines[i],
                    format!("class '{}' is not among the configured labels {labels:?}", raw_classes[i]),
                ));
            }
        }
        for c in &raw_classes {
            if !labels.contains(c) {
                labels.push(c.clone());
            }
        }
        if let Some(ctrl) = &opts.control_label {
            let pos = labels.iter().position(|l| l == ctrl).ok_or_else(|| {
                parse_err(source, 1, format!("unknown control label '{ctrl}'; labels are {labels:?}"))
            })?;
            let l = labels.remove(pos);
            labels.push(l);
        }
        if labels.len() < 2 {
            return Err(parse_err(source, 1, "at least two distinct classes are required"));
        }
        let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let classes: Vec<usize> = raw_classes.iter().map(|c| index[c.as_str()]).collect();
        Dataset::categorical(&classes, locations, labels)
    } else {
        let mut labels: Vec<String> = count_cols.iter().map(|(_, l)| l.clone()).collect();
        let ctrl = opts
            .control_label
            .clone()
            .or_else(|| opts.class_labels.as_ref().and_then(|l| l.last().cloned()))
            .unwrap_or_else(|| "control".into());
        if labels.contains(&ctrl) {
            return Err(parse_err(source, 1, format!("control label '{ctrl}' clashes with a count column")));
        }
        labels.push(ctrl);
        // column order in the file -> position in `labels`
        let mut order: Vec<usize> = (0..count_cols.len()).collect();
        if let Some(fixed) = &opts.class_labels {
            let mut a = fixed.clone();
            let mut b = labels.clone();
            a.sort();
            b.sort();
            if a != b {
                return Err(parse_err(
                    source,
                    1,
                    format!("count columns name classes {labels:?}, configured labels are {fixed:?}"),
                ));
            }
            order = count_cols
                .iter()
                .map(|(_, l)| fixed.iter().position(|f| f == l).unwrap_or(0))
                .collect();
            labels = fixed.clone();
        }
        let n = counts.len();
        let mut m = DMatrix::zeros(n, labels.len() - 1);
        for (i, row) in counts.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                m[(i, order[c])] = v;
            }
        }
        Dataset::new(m, trials, locations, labels)
    }
}

pub fn load_dataset(path: &Path, opts: &DatasetOptions) -> Result<Dataset> {
    let f = fs::File::open(path)
        .map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))?;
    read_dataset_from(f, &path.display().to_string(), opts)
}

/// CSV text of a dataset: categorical layout when every row has one trial and every class
/// occurs (so the labels can be recovered), count layout otherwise.
pub fn dataset_to_csv(data: &Dataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let labels = data.class_labels();
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    let all_present = data.class_totals().iter().all(|&t| t > 0);
    if let Some(classes) = data.categorical_classes().filter(|_| all_present) {
        w.write_record(["x", "y", "class"]).map_err(csv_err)?;
        for (l, c) in data.locations().iter().zip(classes) {
            w.write_record([l.x.to_string(), l.y.to_string(), labels[c].clone()])
                .map_err(csv_err)?;
        }
    } else {
        let mut header = vec!["x".to_string(), "y".into(), "n".into()];
        header.extend(labels[..labels.len() - 1].iter().map(|l| format!("count_{l}")));
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..data.n() {
            let l = data.locations()[i];
            let mut rec = vec![l.x.to_string(), l.y.to_string(), data.trials()[i].to_string()];
            rec.extend(data.counts().row(i).iter().map(|c| c.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_atomic(path, &dataset_to_csv(data)?)
}

/// `(label, total count)` per class, control last.
pub fn class_frequency_table(data: &Dataset) -> Vec<(String, u64)> {
    data.class_labels().iter().cloned().zip(data.class_totals()).collect()
}

/// Locations from a CSV with `x` and `y` columns.
pub fn load_locations(path: &Path) -> Result<Vec<Location>> {
    let source = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::InvalidInput(format!("cannot open {source}: {e}")))?;
    let headers = rdr.headers().map_err(|e| parse_err(&source, 1, e.to_string()))?.clone();
    let (xi, yi) = match (headers.iter().position(|h| h == "x"), headers.iter().position(|h| h == "y")) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(parse_err(&source, 1, "missing required columns x and y")),
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(&source, e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let num = |i: usize| {
            let s = rec.get(i).unwrap_or("");
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(&source, line, format!("non-numeric coordinate '{s}'")))
        };
        out.push(Location::new(num(xi)?, num(yi)?));
    }
    Ok(out)
}

/// How knots are placed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum KnotSpec {
    /// Cell centres of an `nx x ny` grid over `bounds` (default: bounding box of the data).
    Grid { nx: usize, ny: usize, bounds: Option<Bounds> },
    /// `k` distinct data locations chosen uniformly at random.
    Subsample { k: usize, seed: u64 },
    /// CSV file with `x` and `y` columns.
    File { path: PathBuf },
}

impl Default for KnotSpec {
    fn default() -> Self {
        KnotSpec::Grid { nx: 15, ny: 15, bounds: None }
    }
}

/// Bounding box of a set of locations (degenerate extents are widened by 1).
pub fn bounding_box(locations: &[Location]) -> Result<Bounds> {
    if locations.is_empty() {
        return invalid("no locations");
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for l in locations {
        x0 = x0.min(l.x);
        x1 = x1.max(l.x);
        y0 = y0.min(l.y);
        y1 = y1.max(l.y);
    }
    if x1 <= x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    Bounds::new(x0, x1, y0, y1)
}

impl KnotSpec {
    pub fn build(&self, data_locations: &[Location]) -> Result<KnotSet> {
        match self {
            KnotSpec::Grid { nx, ny, bounds } => {
                let b = match bounds {
                    Some(b) => *b,
                    None => bounding_box(data_locations)?,
                };
                build_knot_grid(*nx, *ny, &b)
            }
            KnotSpec::Subsample { k, seed } => subsample_knots(data_locations, *k, *seed),
            KnotSpec::File { path } => KnotSet::new(load_locations(path)?),
        }
    }
}

/// Prediction locations: a regular grid or a CSV of points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GridSpec {
    Regular { nx: usize, ny: usize, bounds: Bounds },
    File { path: PathBuf },
}

impl GridSpec {
    pub fn locations(&self) -> Result<Vec<Location>> {
        match self {
            GridSpec::Regular { nx, ny, bounds } => grid_locations(*nx, *ny, bounds),
            GridSpec::File { path } => load_locations(path),
        }
    }
}

/// Rectangular area tiling for area-occurrence summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaTiling {
    pub width: f64,
    pub height: f64,
    #[serde(default)]
    pub origin: Option<Location>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionSpec {
    pub grid: GridSpec,
    #[serde(default)]
    pub options: StreamOptions,
    #[serde(default)]
    pub areas: Option<AreaTiling>,
}

/// Complete description of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub dataset: DatasetOptions,
    pub priors: PriorSpec,
    pub sampler: SamplerConfig,
    pub knots: KnotSpec,
    pub u: Option<usize>,
    /// Inclusive `[u_min, u_max]` for dimension selection.
    pub u_range: Option<[usize; 2]>,
    pub n_chains: usize,
    pub prediction: Option<PredictionSpec>,
    pub output_dir: PathBuf,
    /// Overrides `sampler.seed` when present.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            test_data: None,
            dataset: DatasetOptions::default(),
            priors: PriorSpec::default(),
            sampler: SamplerConfig::default(),
            knots: KnotSpec::default(),
            u: None,
            u_range: None,
            n_chains: 1,
            prediction: None,
            output_dir: PathBuf::from("out"),
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
    }

    /// Sampler settings with the top-level seed applied.
    pub fn effective_sampler(&self) -> SamplerConfig {
        let mut s = self.sampler.clone();
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        s
    }

    /// Every validation problem, so they can be reported together.
    pub fn problems(&self) -> Vec<String> {
        let mut out: Vec<String> = self.priors.problems().into_iter().map(|p| format!("priors: {p}")).collect();
        out.extend(self.sampler.problems().into_iter().map(|p| format!("sampler: {p}")));
        if self.u == Some(0) {
            out.push("u must be at least 1".into());
        }
        if let Some([lo, hi]) = self.u_range {
            if lo == 0 || lo > hi {
                out.push(format!("u_range [{lo}, {hi}] must satisfy 1 <= u_min <= u_max"));
            }
        }
        if self.n_chains == 0 {
            out.push("n_chains must be at least 1".into());
        }
        match &self.knots {
            KnotSpec::Grid { nx, ny, .. } if *nx == 0 || *ny == 0 => {
                out.push("knots: grid dimensions must be positive".into())
            }
            KnotSpec::Subsample { k: 0, .. } => out.push("knots: k must be positive".into()),
            _ => {}
        }
        if let Some(p) = &self.prediction {
            if let GridSpec::Regular { nx, ny, .. } = &p.grid {
                if *nx == 0 || *ny == 0 {
                    out.push("prediction: grid dimensions must be positive".into());
                }
            }
            if let Some(q) = p.options.quantiles.iter().find(|q| !(0.0..=1.0).contains(*q)) {
                out.push(format!("prediction: quantile {q} outside [0, 1]"));
            }
            if let Some(a) = &p.areas {
                if !(a.width > 0.0 && a.height > 0.0) {
                    out.push("prediction: area tiles need positive width and height".into());
                }
                if !p.options.want_outcomes && !p.options.area_classes.is_empty() {
                    out.push("prediction: area classes need want_outcomes = true".into());
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            invalid(format!("{} configuration problem(s):\n  {}", p.len(), p.join("\n  ")))
        }
    }
}

const MAGIC: &[u8; 8] = b"SPMNCHN\0";
pub const ARTIFACT_VERSION: u32 = 1;

/// JSON header of a chain artifact; draws and log-likelihoods follow as f64 columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArtifactHeader {
    version: u32,
    n_draws: usize,
    n_obs: usize,
    n_classes: usize,
    u: usize,
    k: usize,
    columns: Vec<String>,
    seed: u64,
    config: SamplerConfig,
    priors: Hyperpriors,
    knots: KnotSet,
    class_labels: Vec<String>,
    acceptance: AcceptanceTally,
    phi_rw_sd_final: f64,
    newton_fallbacks: u64,
    last_state: ParamState,
    runtime_secs: f64,
}

/// Column names of the draw block: `mu[j]`, `omega[j]`, `phi`, `gamma[i]`, `w[r][j]`.
pub fn draw_columns(n_classes: usize, u: usize, k: usize) -> Vec<String> {
    let mut c: Vec<String> = (1..n_classes).map(|j| format!("mu[{j}]")).collect();
    c.extend((1..=u).map(|j| format!("omega[{j}]")));
    c.push("phi".into());
    c.extend((1..=crate::model::n_free_gamma(n_classes, u)).map(|i| format!("gamma[{i}]")));
    for j in 1..=u {
        c.extend((1..=k).map(|r| format!("w[{r}][{j}]")));
    }
    c
}

fn flatten_draw(d: &ParamState) -> Vec<f64> {
    let mut v: Vec<f64> = d.mu.iter().copied().collect();
    v.extend(d.omega.iter());
    v.push(d.phi);
    v.extend(d.gamma.iter());
    v.extend(d.w.iter());
    v
}

fn unflatten_draw(v: &[f64], n_classes: usize, u: usize, k: usize) -> ParamState {
    let jm1 = n_classes - 1;
    let ng = crate::model::n_free_gamma(n_classes, u);
    let mut o = 0;
    let mut take = |len: usize| {
        let s = &v[o..o + len];
        o += len;
        s
    };
    let mu = DVector::from_column_slice(take(jm1));
    let omega = DVector::from_column_slice(take(u));
    let phi = take(1)[0];
    let gamma = DVector::from_column_slice(take(ng));
    let w = DMatrix::from_column_slice(k, u, take(k * u));
    ParamState { mu, w, omega, gamma, phi }
}

/// Serializes a chain: magic, `u32` version, `u64` header length, JSON header, then
/// column-major little-endian f64 columns (draw columns, then one log-likelihood column per
/// observation).
pub fn chain_to_bytes(chain: &ChainStore) -> Result<Vec<u8>> {
    let m = chain.n_draws();
    let k = chain.knots.len();
    let j = chain.n_classes();
    let header = ArtifactHeader {
        version: ARTIFACT_VERSION,
        n_draws: m,
        n_obs: chain.pointwise_loglik.ncols(),
        n_classes: j,
        u: chain.u,
        k,
        columns: draw_columns(j, chain.u, k),
        seed: chain.seed,
        config: chain.config.clone(),
        priors: chain.priors.clone(),
        knots: chain.knots.clone(),
        class_labels: chain.class_labels.clone(),
        acceptance: chain.acceptance.clone(),
        phi_rw_sd_final: chain.phi_rw_sd_final,
        newton_fallbacks: chain.newton_fallbacks,
        last_state: chain.last_state.clone(),
        runtime_secs: chain.runtime_secs,
    };
    let json = serde_json::to_vec(&header)?;
    let n_cols = header.columns.len();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * m * (n_cols + header.n_obs));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ARTIFACT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let rows: Vec<Vec<f64>> = chain.draws.iter().map(flatten_draw).collect();
    for c in 0..n_cols {
        for r in &rows {
            out.extend_from_slice(&r[c].to_le_bytes());
        }
    }
    for v in chain.pointwise_loglik.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn chain_from_bytes(bytes: &[u8]) -> Result<ChainStore> {
    let fmt = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fmt("not a chain artifact (bad magic bytes)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != ARTIFACT_VERSION {
        return Err(Error::Format(format!(
            "artifact version {version} is not supported (expected {ARTIFACT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20usize.saturating_add(hlen)).ok_or_else(|| fmt("truncated header"))?;
    let h: ArtifactHeader = serde_json::from_slice(body)?;
    if h.version != version {
        return Err(fmt("header version does not match the file version"));
    }
    let n_cols = h.columns.len();
    if h.columns != draw_columns(h.n_classes, h.u, h.k) || h.knots.len() != h.k {
        return Err(fmt("column layout does not match the declared dimensions"));
    }
    let data = &bytes[20 + hlen..];
    let expected = 8 * h.n_draws * (n_cols + h.n_obs);
    if data.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} bytes of columns, found {}",
            data.len()
        )));
    }
    let vals: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let m = h.n_draws;
    let draws = (0..m)
        .map(|r| {
            let row: Vec<f64> = (0..n_cols).map(|c| vals[c * m + r]).collect();
            unflatten_draw(&row, h.n_classes, h.u, h.k)
        })
        .collect();
    let lpd = DMatrix::from_column_slice(m, h.n_obs, &vals[n_cols * m..]);
    let chain = ChainStore {
        draws,
        acceptance: h.acceptance,
        pointwise_loglik: lpd,
        seed: h.seed,
        config: h.config,
        priors: h.priors,
        knots: h.knots,
        class_labels: h.class_labels,
        u: h.u,
        phi_rw_sd_final: h.phi_rw_sd_final,
        newton_fallbacks: h.newton_fallbacks,
        last_state: h.last_state,
        runtime_secs: h.runtime_secs,
    };
    chain.validate()?;
    Ok(chain)
}

pub fn write_chain(path: &Path, chain: &ChainStore) -> Result<()> {
    write_atomic(path, &chain_to_bytes(chain)?)
}

pub fn read_chain(path: &Path) -> Result<ChainStore> {
    let bytes = fs::read(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    chain_from_bytes(&bytes)
}

/// Plain-text draws: one row per retained draw, one column per scalar parameter.
pub fn draws_to_csv(chain: &ChainStore) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let e = |e: csv::Error| Error::Format(e.to_string());
    let mut header = vec!["draw".to_string()];
    header.extend(draw_columns(chain.n_classes(), chain.u, chain.knots.len()));
    w.write_record(&header).map_err(e)?;
    for (m, d) in chain.draws.iter().enumerate() {
        let mut rec = vec![m.to_string()];
        rec.extend(flatten_draw(d).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(e)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// Per-location table: `x, y, mean_<label>...`, then quantile, outcome-frequency and union
/// columns when present.
pub fn prediction_to_csv(s: &PredictiveSummary) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let e = |e: csv::Error| Error::Format(e.to_string());
    let labels = &s.class_labels;
    let mut header = vec!["x".to_string(), "y".into()];
    header.extend(labels.iter().map(|l| format!("mean_{l}")));
    for (q, _) in &s.quantiles {
        header.extend(labels.iter().map(|l| format!("q{}_{l}", fmt_level(*q))));
    }
    if s.outcome_freq.is_some() {
        header.extend(labels.iter().map(|l| format!("freq_{l}")));
    }
    for (subset, _) in &s.unions {
        let names: Vec<&str> = subset.iter().map(|&c| labels[c].as_str()).collect();
        header.push(format!("union_{}", names.join("+")));
    }
    w.write_record(&header).map_err(e)?;
    for (i, l) in s.locations.iter().enumerate() {
        let mut rec = vec![l.x.to_string(), l.y.to_string()];
        rec.extend(s.mean_probs.row(i).iter().map(|v| v.to_string()));
        for (_, q) in &s.quantiles {
            rec.extend(q.row(i).iter().map(|v| v.to_string()));
        }
        if let Some(f) = &s.outcome_freq {
            rec.extend(f.row(i).iter().map(|v| v.to_string()));
        }
        for (_, u) in &s.unions {
            rec.push(u[i].to_string());
        }
        w.write_record(&rec).map_err(e)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

fn fmt_level(q: f64) -> String {
    let s = format!("{}", q * 100.0);
    s.replace('.', "_")
}

/// Per-area table: `area, occurrence_<label>...`.
pub fn areas_to_csv(s: &PredictiveSummary) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let e = |e: csv::Error| Error::Format(e.to_string());
    let mut header = vec!["area".to_string()];
    header.extend(s.areas.iter().map(|(c, _)| format!("occurrence_{}", s.class_labels[*c])));
    w.write_record(&header).map_err(e)?;
    for (a, label) in s.area_labels.iter().enumerate() {
        let mut rec = vec![label.clone()];
        rec.extend(s.areas.iter().map(|(_, v)| v[a].to_string()));
        w.write_record(&rec).map_err(e)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// `x, y` table with optional extra columns, one per entry of `extra_header`.
pub fn locations_to_csv(locations: &[Location], extra_header: &[String], extra: Option<&DMatrix<f64>>) -> Result<Vec<u8>> {
    if let Some(m) = extra {
        if m.nrows() != locations.len() || m.ncols() != extra_header.len() {
            return invalid(format!(
                "extra columns are {}x{}, expected {}x{}",
                m.nrows(),
                m.ncols(),
                locations.len(),
                extra_header.len()
            ));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let e = |e: csv::Error| Error::Format(e.to_string());
    let mut header = vec!["x".to_string(), "y".into()];
    if extra.is_some() {
        header.extend(extra_header.iter().cloned());
    }
    w.write_record(&header).map_err(e)?;
    for (i, l) in locations.iter().enumerate() {
        let mut rec = vec![l.x.to_string(), l.y.to_string()];
        if let Some(m) = extra {
            rec.extend(m.row(i).iter().map(|v| v.to_string()));
        }
        w.write_record(&rec).map_err(e)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// CSV of serializable rows (header from field names).
pub fn rows_to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}
