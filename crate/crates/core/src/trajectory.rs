//! Time-ordered feature trajectories and the per-frame force and energy
//! records that travel with them.
//!
//! Two on-disk formats are supported for trajectories:
//!
//! * CSV: first line `t<dt>;<name>,<name>,...`, then one comma-separated
//!   frame per line.
//! * Binary: magic `FEMK`, version `u32`, `n_frames` `u64`, `n_features`
//!   `u64`, `dt` `f64`, the frames as row-major `f64`, then one
//!   length-prefixed (`u32`) UTF-8 name per column. All little-endian.
//!
//! Force and energy records reuse the binary container with magics `FEMF`
//! and `FEME`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const TRAJECTORY_MAGIC: [u8; 4] = *b"FEMK";
pub const FORCE_MAGIC: [u8; 4] = *b"FEMF";
pub const ENERGY_MAGIC: [u8; 4] = *b"FEME";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    Bin,
}

impl FileFormat {
    /// Guess the format from the file extension: `.csv` is CSV, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FileFormat::Csv,
            _ => FileFormat::Bin,
        }
    }
}

impl FromStr for FileFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(FileFormat::Csv),
            "bin" => Ok(FileFormat::Bin),
            other => Err(Error::UnknownKind(format!("file format '{other}'"))),
        }
    }
}

/// Frames of feature vectors sampled at a fixed time step.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrajectory {
    frames: DMatrix<f64>,
    dt: f64,
    feature_names: Vec<String>,
    source_id: String,
}

impl FeatureTrajectory {
    pub fn new(
        frames: DMatrix<f64>,
        dt: f64,
        feature_names: Vec<String>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if frames.nrows() < 2 {
            return Err(Error::Invalid(format!(
                "a trajectory needs at least 2 frames, got {}",
                frames.nrows()
            )));
        }
        if frames.ncols() < 1 {
            return Err(Error::Invalid("a trajectory needs at least 1 feature".into()));
        }
        if feature_names.len() != frames.ncols() {
            return Err(Error::DimensionMismatch {
                expected: frames.ncols(),
                got: feature_names.len(),
            });
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Invalid(format!("time step must be positive, got {dt}")));
        }
        check_finite(&frames)?;
        let mut seen = HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Invalid(format!("duplicate feature name '{name}'")));
            }
        }
        Ok(Self {
            frames,
            dt,
            feature_names,
            source_id: source_id.into(),
        })
    }

    /// Default names `x0, x1, ...`.
    pub fn with_default_names(frames: DMatrix<f64>, dt: f64, source_id: &str) -> Result<Self> {
        let names = (0..frames.ncols()).map(|i| format!("x{i}")).collect();
        Self::new(frames, dt, names, source_id)
    }

    pub fn frames(&self) -> &DMatrix<f64> {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.frames.ncols()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn into_frames(self) -> DMatrix<f64> {
        self.frames
    }

    pub fn load(path: impl AsRef<Path>, format: FileFormat) -> Result<Self> {
        let path = path.as_ref();
        let source_id = path.display().to_string();
        match format {
            FileFormat::Csv => read_csv(path, source_id),
            FileFormat::Bin => {
                let c = read_container(path, TRAJECTORY_MAGIC)?;
                Self::new(c.data, c.dt, c.names, source_id)
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, format: FileFormat) -> Result<()> {
        let path = path.as_ref();
        match format {
            FileFormat::Csv => write_csv(self, path),
            FileFormat::Bin => write_container(
                path,
                TRAJECTORY_MAGIC,
                self.dt,
                &self.frames,
                &self.feature_names,
            ),
        }
    }
}

pub fn load_trajectory(path: impl AsRef<Path>, format: FileFormat) -> Result<FeatureTrajectory> {
    FeatureTrajectory::load(path, format)
}

pub fn save_trajectory(
    traj: &FeatureTrajectory,
    path: impl AsRef<Path>,
    format: FileFormat,
) -> Result<()> {
    traj.save(path, format)
}

/// Coarse-grained coordinates together with the target mean force on each of them.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceRecord {
    configs: DMatrix<f64>,
    forces: DMatrix<f64>,
}

impl ForceRecord {
    pub fn new(configs: DMatrix<f64>, forces: DMatrix<f64>) -> Result<Self> {
        if configs.shape() != forces.shape() {
            return Err(Error::Invalid(format!(
                "configs are {:?} but forces are {:?}",
                configs.shape(),
                forces.shape()
            )));
        }
        check_finite(&configs)?;
        check_finite(&forces)?;
        Ok(Self { configs, forces })
    }

    pub fn configs(&self) -> &DMatrix<f64> {
        &self.configs
    }

    pub fn forces(&self) -> &DMatrix<f64> {
        &self.forces
    }

    pub fn n_frames(&self) -> usize {
        self.configs.nrows()
    }

    pub fn n_dof(&self) -> usize {
        self.configs.ncols()
    }

    pub fn check_paired(&self, traj: &FeatureTrajectory) -> Result<()> {
        if self.n_frames() != traj.n_frames() {
            return Err(Error::DimensionMismatch {
                expected: traj.n_frames(),
                got: self.n_frames(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let n = self.n_dof();
        let mut joined = DMatrix::zeros(self.n_frames(), 2 * n);
        joined.columns_mut(0, n).copy_from(&self.configs);
        joined.columns_mut(n, n).copy_from(&self.forces);
        let names: Vec<String> = (0..n)
            .map(|i| format!("x{i}"))
            .chain((0..n).map(|i| format!("f{i}")))
            .collect();
        write_container(path.as_ref(), FORCE_MAGIC, 0.0, &joined, &names)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = read_container(path.as_ref(), FORCE_MAGIC)?;
        if c.data.ncols() % 2 != 0 {
            return Err(Error::Format(format!(
                "force record must have an even column count, got {}",
                c.data.ncols()
            )));
        }
        let n = c.data.ncols() / 2;
        Self::new(
            c.data.columns(0, n).into_owned(),
            c.data.columns(n, n).into_owned(),
        )
    }
}

/// Per-frame prior energy and, once computed, the correction ΔE.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyRecord {
    pub prior_energy: DVector<f64>,
    pub correction: Option<DVector<f64>>,
}

impl EnergyRecord {
    pub fn new(prior_energy: DVector<f64>, correction: Option<DVector<f64>>) -> Result<Self> {
        if let Some(c) = &correction {
            if c.len() != prior_energy.len() {
                return Err(Error::DimensionMismatch {
                    expected: prior_energy.len(),
                    got: c.len(),
                });
            }
            check_finite_vec(c)?;
        }
        check_finite_vec(&prior_energy)?;
        Ok(Self {
            prior_energy,
            correction,
        })
    }

    pub fn len(&self) -> usize {
        self.prior_energy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prior_energy.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let n = self.len();
        let mut names = vec!["prior_energy".to_string()];
        let mut m = DMatrix::zeros(n, 1 + self.correction.is_some() as usize);
        m.set_column(0, &self.prior_energy);
        if let Some(c) = &self.correction {
            m.set_column(1, c);
            names.push("correction".into());
        }
        write_container(path.as_ref(), ENERGY_MAGIC, 0.0, &m, &names)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = read_container(path.as_ref(), ENERGY_MAGIC)?;
        let col = |name: &str| {
            c.names
                .iter()
                .position(|n| n == name)
                .map(|i| c.data.column(i).into_owned())
        };
        let prior = col("prior_energy")
            .ok_or_else(|| Error::Format("energy record has no 'prior_energy' column".into()))?;
        Self::new(prior, col("correction"))
    }
}

/// Euclidean distances between every pair of sites `i < j`, in
/// lexicographic pair order. Columns of `configs` are `(x, y, z)` per site.
pub fn pairwise_distance_features(
    configs: &DMatrix<f64>,
    dt: f64,
    source_id: &str,
) -> Result<FeatureTrajectory> {
    if configs.ncols() % 3 != 0 {
        return Err(Error::Invalid(format!(
            "column count {} is not divisible by 3",
            configs.ncols()
        )));
    }
    let n_sites = configs.ncols() / 3;
    if n_sites < 2 {
        return Err(Error::Invalid(format!("need at least 2 sites, got {n_sites}")));
    }
    let pairs: Vec<(usize, usize)> = (0..n_sites)
        .flat_map(|i| ((i + 1)..n_sites).map(move |j| (i, j)))
        .collect();
    let mut out = DMatrix::zeros(configs.nrows(), pairs.len());
    for t in 0..configs.nrows() {
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let mut s = 0.0;
            for k in 0..3 {
                let d = configs[(t, 3 * i + k)] - configs[(t, 3 * j + k)];
                s += d * d;
            }
            out[(t, p)] = s.sqrt();
        }
    }
    let names = pairs.iter().map(|(i, j)| format!("d{i}_{j}")).collect();
    FeatureTrajectory::new(out, dt, names, source_id)
}

pub(crate) fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    for row in 0..m.nrows() {
        for col in 0..m.ncols() {
            if !m[(row, col)].is_finite() {
                return Err(Error::NonFinite { row, col });
            }
        }
    }
    Ok(())
}

pub(crate) fn check_finite_vec(v: &DVector<f64>) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(row) => Err(Error::NonFinite { row, col: 0 }),
        None => Ok(()),
    }
}

fn read_csv(path: &Path, source_id: String) -> Result<FeatureTrajectory> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::Format("empty file".into())),
    };
    let (dt, names) = parse_csv_header(&header)?;
    let mut values = Vec::new();
    let mut n_frames = 0;
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<&str> = line.split(',').collect();
        if row.len() != names.len() {
            return Err(Error::Format(format!(
                "row {n_frames} has {} values, header declares {}",
                row.len(),
                names.len()
            )));
        }
        for (col, field) in row.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Format(format!("row {n_frames}, column {col}: cannot parse '{field}'"))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row: n_frames, col });
            }
            values.push(v);
        }
        n_frames += 1;
    }
    let frames = DMatrix::from_row_slice(n_frames, names.len(), &values);
    FeatureTrajectory::new(frames, dt, names, source_id)
}

fn parse_csv_header(header: &str) -> Result<(f64, Vec<String>)> {
    let rest = header
        .strip_prefix('t')
        .ok_or_else(|| Error::Format(format!("header must start with 't<dt>;', got '{header}'")))?;
    let (dt, names) = rest
        .split_once(';')
        .ok_or_else(|| Error::Format("header is missing ';' after the time step".into()))?;
    let dt: f64 = dt
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("cannot parse time step '{dt}'")))?;
    let names: Vec<String> = names.split(',').map(|s| s.trim().to_string()).collect();
    if names.iter().any(|n| n.is_empty()) {
        return Err(Error::Format("empty feature name in header".into()));
    }
    Ok((dt, names))
}

fn write_csv(traj: &FeatureTrajectory, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    // `{}` on f64 prints the shortest representation that parses back exactly.
    writeln!(w, "t{};{}", traj.dt, traj.feature_names.join(",")).map_err(io)?;
    for row in traj.frames.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub(crate) struct Container {
    pub dt: f64,
    pub data: DMatrix<f64>,
    pub names: Vec<String>,
}

pub(crate) fn write_container(
    path: &Path,
    magic: [u8; 4],
    dt: f64,
    data: &DMatrix<f64>,
    names: &[String],
) -> Result<()> {
    let (rows, cols) = data.shape();
    let mut buf = Vec::with_capacity(32 + rows * cols * 8);
    buf.extend_from_slice(&magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows as u64).to_le_bytes());
    buf.extend_from_slice(&(cols as u64).to_le_bytes());
    buf.extend_from_slice(&dt.to_le_bytes());
    for r in 0..rows {
        for c in 0..cols {
            buf.extend_from_slice(&data[(r, c)].to_le_bytes());
        }
    }
    for name in names {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_container(path: &Path, magic: [u8; 4]) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader { bytes: &bytes, pos: 0 };
    let found = r.take(4)?;
    if found != magic {
        return Err(Error::Format(format!(
            "bad magic bytes {:?}, expected {:?}",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let dt = r.f64()?;
    let n = rows
        .checked_mul(cols)
        .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
        .ok_or_else(|| Error::Format(format!("declared shape {rows}x{cols} exceeds file size")))?;
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let v = r.f64()?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                row: i / cols,
                col: i % cols,
            });
        }
        values.push(v);
    }
    let mut names = Vec::with_capacity(cols);
    for _ in 0..cols {
        let len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let s = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("feature name is not valid UTF-8".into()))?;
        names.push(s.to_string());
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the name table",
            bytes.len() - r.pos
        )));
    }
    Ok(Container {
        dt,
        data: DMatrix::from_row_slice(rows, cols, &values),
        names,
    })
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format("unexpected end of file".into())),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
