//! Synthetic scene generation and the binary dataset format.
//!
//! Layout (little-endian):
//!
//! ```text
//! header  "CSOU" u32 version u32 count u16 M1 u16 M2 u16 c f32 sigma_psf f32 noise_sigma
//! record  u16 K, K x (f32 x, f32 y, f32 s), M1*M2 f32 measurement (row-major)
//! ```
//!
//! Every sampled value is rounded to `f32` before use, so a record read
//! back from disk equals the in-memory record exactly.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::grid::{HighResGrid, Measurement};
use crate::rng;
use crate::scene::{
    add_noise, cell_center, embed_scene, target_cell, ForwardModel, SceneConfig, SparseScene,
    Target,
};

pub const MAGIC: [u8; 4] = *b"CSOU";
pub const VERSION: u32 = 1;
/// Draws allowed per scene before sampling is declared infeasible.
pub const REJECTION_BUDGET: usize = 10_000;
/// Intensities at or below this would vanish under the evaluator's
/// extraction threshold.
pub const MIN_INTENSITY: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub count: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub s_lo: f64,
    pub s_hi: f64,
    /// Distance from the patch border kept free of targets, observed pixels.
    pub margin: f64,
    /// Minimum pairwise target distance, observed pixels.
    pub min_separation: f64,
    pub scene: SceneConfig,
    pub seed: u64,
    pub split: String,
    /// Place every target at the center of its sub-pixel cell.
    pub snap_to_grid: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 1000,
            k_min: 1,
            k_max: 5,
            s_lo: 100.0,
            s_hi: 255.0,
            margin: 2.0,
            min_separation: 0.5,
            scene: SceneConfig::default(),
            seed: 0,
            split: "train".into(),
            snap_to_grid: false,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.k_min < 1 || self.k_min > self.k_max {
            return bad(format!(
                "target count range must satisfy 1 <= k_min <= k_max, got {}..{}",
                self.k_min, self.k_max
            ));
        }
        if self.k_max > u16::MAX as usize {
            return bad(format!("k_max {} exceeds the record format", self.k_max));
        }
        if !(self.s_lo > MIN_INTENSITY) || !(self.s_lo <= self.s_hi) || !self.s_hi.is_finite() {
            return bad(format!(
                "intensity range must satisfy {MIN_INTENSITY} < s_lo <= s_hi, got [{}, {}]",
                self.s_lo, self.s_hi
            ));
        }
        let span = |m: usize| m as f64 - 2.0 * self.margin;
        if !(self.margin >= 0.0) || span(self.scene.rows) <= 0.0 || span(self.scene.cols) <= 0.0 {
            return bad(format!(
                "margin {} leaves no room inside a {}x{} patch",
                self.margin, self.scene.rows, self.scene.cols
            ));
        }
        if !(self.min_separation >= 0.0) {
            return bad(format!(
                "min separation must be >= 0, got {}",
                self.min_separation
            ));
        }
        if self.scene.rows > u16::MAX as usize
            || self.scene.cols > u16::MAX as usize
            || self.scene.ratio > u16::MAX as usize
        {
            return bad("patch dimensions exceed the file format".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub scene: SparseScene,
    pub measurement: Measurement,
}

impl DatasetRecord {
    /// The ground-truth sub-pixel grid.
    pub fn truth(&self, cfg: &SceneConfig) -> Result<HighResGrid> {
        embed_scene(&self.scene, cfg)
    }
}

fn f32r(v: f64) -> f64 {
    v as f32 as f64
}

/// Draws one scene satisfying the margin, separation and distinct-cell
/// constraints by whole-scene rejection.
pub fn sample_scene(cfg: &DatasetConfig, rng: &mut rng::Rng) -> Result<SparseScene> {
    let k = rng.random_range(cfg.k_min..=cfg.k_max);
    let c = cfg.scene.ratio;
    let (lo_x, hi_x) = (cfg.margin, cfg.scene.cols as f64 - cfg.margin);
    let (lo_y, hi_y) = (cfg.margin, cfg.scene.rows as f64 - cfg.margin);
    let mut targets = Vec::with_capacity(k);
    for _ in 0..REJECTION_BUDGET {
        targets.clear();
        for _ in 0..k {
            let mut x = f32r(rng.random_range(lo_x..hi_x));
            let mut y = f32r(rng.random_range(lo_y..hi_y));
            if cfg.snap_to_grid {
                let (r, cl) = target_cell(x, y, c);
                let (cx, cy) = cell_center(r as usize, cl as usize, c);
                x = f32r(cx);
                y = f32r(cy);
            }
            let s = f32r(rng.random_range(cfg.s_lo..=cfg.s_hi));
            targets.push(Target { x, y, s });
        }
        if admissible(&targets, cfg) {
            return Ok(SparseScene::new(targets));
        }
    }
    Err(Error::Infeasible {
        tries: REJECTION_BUDGET,
    })
}

fn admissible(targets: &[Target], cfg: &DatasetConfig) -> bool {
    let c = cfg.scene.ratio;
    let in_range = |v: f64, m: usize| v >= cfg.margin && v < m as f64 - cfg.margin;
    for (i, a) in targets.iter().enumerate() {
        if !in_range(a.x, cfg.scene.cols) || !in_range(a.y, cfg.scene.rows) {
            return false;
        }
        for b in &targets[..i] {
            let d = (a.x - b.x).hypot(a.y - b.y);
            if d < cfg.min_separation || target_cell(a.x, a.y, c) == target_cell(b.x, b.y, c) {
                return false;
            }
        }
    }
    true
}

/// Record `index` of a split; a pure function of `(cfg, index)`.
pub fn generate_record(
    cfg: &DatasetConfig,
    model: &ForwardModel,
    index: usize,
) -> Result<DatasetRecord> {
    let base = rng::derive(cfg.seed, &cfg.split);
    let mut r = rng::stream(base, index as u64);
    let scene = sample_scene(cfg, &mut r)?;
    let clean = model.observe(&scene)?;
    let noise_seed: u64 = r.random();
    let measurement = add_noise(&clean, cfg.scene.noise_sigma, noise_seed).map(f32r);
    Ok(DatasetRecord { scene, measurement })
}

pub fn generate_records(cfg: &DatasetConfig) -> Result<Vec<DatasetRecord>> {
    cfg.validate()?;
    let model = ForwardModel::new(cfg.scene.clone())?;
    (0..cfg.count)
        .map(|i| generate_record(cfg, &model, i))
        .collect()
}

/// Fixed header fields of a dataset file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Header {
    pub count: u32,
    pub rows: u16,
    pub cols: u16,
    pub ratio: u16,
    pub sigma_psf: f32,
    pub noise_sigma: f32,
}

impl Header {
    pub fn for_config(cfg: &SceneConfig, count: usize) -> Self {
        Header {
            count: count as u32,
            rows: cfg.rows as u16,
            cols: cfg.cols as u16,
            ratio: cfg.ratio as u16,
            sigma_psf: cfg.sigma_psf as f32,
            noise_sigma: cfg.noise_sigma as f32,
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            rows: self.rows as usize,
            cols: self.cols as usize,
            ratio: self.ratio as usize,
            sigma_psf: self.sigma_psf as f64,
            pixel_pitch: 1.0,
            noise_sigma: self.noise_sigma as f64,
        }
    }
}

pub fn write_dataset(path: &Path, header: &Header, records: &[DatasetRecord]) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    if records.len() != header.count as usize {
        return Err(Error::InvalidParameter(format!(
            "header announces {} records, got {}",
            header.count,
            records.len()
        )));
    }
    let m = header.rows as usize * header.cols as usize;
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut buf = Vec::with_capacity(22);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&header.count.to_le_bytes());
    buf.extend_from_slice(&header.rows.to_le_bytes());
    buf.extend_from_slice(&header.cols.to_le_bytes());
    buf.extend_from_slice(&header.ratio.to_le_bytes());
    buf.extend_from_slice(&header.sigma_psf.to_le_bytes());
    buf.extend_from_slice(&header.noise_sigma.to_le_bytes());
    w.write_all(&buf).map_err(io_err)?;
    for rec in records {
        if rec.measurement.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "measurement has {} values, header expects {m}",
                rec.measurement.len()
            )));
        }
        buf.clear();
        buf.extend_from_slice(&(rec.scene.len() as u16).to_le_bytes());
        for t in &rec.scene.targets {
            for v in [t.x, t.y, t.s] {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        for &v in rec.measurement.as_slice() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Streaming reader over the records of a dataset file.
pub struct DatasetReader {
    path: PathBuf,
    inner: BufReader<File>,
    header: Header,
    next: usize,
    failed: bool,
}

/// Reads exactly `buf.len()` bytes; `Ok(false)` on a short read.
fn fill(r: &mut impl Read, buf: &mut [u8]) -> io::Result<bool> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => return Ok(false),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn le_f32(b: &[u8]) -> f32 {
    f32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut inner = BufReader::new(file);
        let mut magic = [0u8; 4];
        if !fill(&mut inner, &mut magic).map_err(|e| Error::io(path, e))? {
            return Err(Error::TruncatedHeader { path: path.into() });
        }
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                found: magic,
            });
        }
        let mut ver = [0u8; 4];
        if !fill(&mut inner, &mut ver).map_err(|e| Error::io(path, e))? {
            return Err(Error::TruncatedHeader { path: path.into() });
        }
        let version = le_u32(&ver);
        if version != VERSION {
            return Err(Error::VersionMismatch {
                path: path.into(),
                found: version,
                expected: VERSION,
            });
        }
        let mut rest = [0u8; 18];
        if !fill(&mut inner, &mut rest).map_err(|e| Error::io(path, e))? {
            return Err(Error::TruncatedHeader { path: path.into() });
        }
        let header = Header {
            count: le_u32(&rest[0..]),
            rows: le_u16(&rest[4..]),
            cols: le_u16(&rest[6..]),
            ratio: le_u16(&rest[8..]),
            sigma_psf: le_f32(&rest[10..]),
            noise_sigma: le_f32(&rest[14..]),
        };
        Ok(DatasetReader {
            path: path.into(),
            inner,
            header,
            next: 0,
            failed: false,
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    fn read_record(&mut self) -> Result<DatasetRecord> {
        let index = self.next;
        let trunc = |path: &Path| Error::TruncatedRecord {
            path: path.into(),
            index,
        };
        let mut kb = [0u8; 2];
        if !fill(&mut self.inner, &mut kb).map_err(|e| Error::io(&self.path, e))? {
            return Err(trunc(&self.path));
        }
        let k = le_u16(&kb) as usize;
        let m = self.header.rows as usize * self.header.cols as usize;
        let mut body = vec![0u8; 12 * k + 4 * m];
        if !fill(&mut self.inner, &mut body).map_err(|e| Error::io(&self.path, e))? {
            return Err(trunc(&self.path));
        }
        let targets = body[..12 * k]
            .chunks_exact(12)
            .map(|t| Target {
                x: le_f32(&t[0..]) as f64,
                y: le_f32(&t[4..]) as f64,
                s: le_f32(&t[8..]) as f64,
            })
            .collect();
        let values = body[12 * k..]
            .chunks_exact(4)
            .map(|b| le_f32(b) as f64)
            .collect();
        let measurement =
            Measurement::from_vec(self.header.rows as usize, self.header.cols as usize, values)?;
        Ok(DatasetRecord {
            scene: SparseScene::new(targets),
            measurement,
        })
    }
}

impl Iterator for DatasetReader {
    type Item = Result<DatasetRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next >= self.header.count as usize {
            return None;
        }
        let r = self.read_record();
        self.failed = r.is_err();
        self.next += 1;
        Some(r)
    }
}

pub fn load_dataset(path: &Path) -> Result<DatasetReader> {
    DatasetReader::open(path)
}

/// Reads a whole file into memory.
pub fn read_all(path: &Path) -> Result<(Header, Vec<DatasetRecord>)> {
    let reader = DatasetReader::open(path)?;
    let header = *reader.header();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

/// One row per target: `sample_id,x,y,s`.
pub fn write_targets_csv(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    writeln!(w, "sample_id,x,y,s").map_err(io_err)?;
    for (i, rec) in records.iter().enumerate() {
        for t in &rec.scene.targets {
            writeln!(w, "{i},{},{},{}", t.x as f32, t.y as f32, t.s as f32).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Files written by [`generate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedFiles {
    pub data: PathBuf,
    pub targets_csv: PathBuf,
    pub manifest: PathBuf,
}

/// Writes `<split>.bin`, `<split>_targets.csv` and `<split>_manifest.txt`
/// into `dir`.
pub fn generate_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<GeneratedFiles> {
    let records = generate_records(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = GeneratedFiles {
        data: dir.join(format!("{}.bin", cfg.split)),
        targets_csv: dir.join(format!("{}_targets.csv", cfg.split)),
        manifest: dir.join(format!("{}_manifest.txt", cfg.split)),
    };
    write_dataset(
        &files.data,
        &Header::for_config(&cfg.scene, records.len()),
        &records,
    )?;
    write_targets_csv(&files.targets_csv, &records)?;
    let total: usize = records.iter().map(|r| r.scene.len()).sum();
    let manifest = format!(
        "split = {}\ncount = {}\ntargets = {}\nseed = {}\nk_min = {}\nk_max = {}\n\
         s_lo = {}\ns_hi = {}\nmargin = {}\nmin_separation = {}\nsnap_to_grid = {}\n\
         rows = {}\ncols = {}\nratio = {}\nsigma_psf = {}\nnoise_sigma = {}\n\
         data = {}\ntargets_csv = {}\n",
        cfg.split,
        records.len(),
        total,
        cfg.seed,
        cfg.k_min,
        cfg.k_max,
        cfg.s_lo,
        cfg.s_hi,
        cfg.margin,
        cfg.min_separation,
        cfg.snap_to_grid,
        cfg.scene.rows,
        cfg.scene.cols,
        cfg.scene.ratio,
        cfg.scene.sigma_psf,
        cfg.scene.noise_sigma,
        file_name(&files.data),
        file_name(&files.targets_csv),
    );
    std::fs::write(&files.manifest, manifest).map_err(|e| Error::io(&files.manifest, e))?;
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
