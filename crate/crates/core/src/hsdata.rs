//! Hyperspectral domains: loading, validation, normalization, patch
//! extraction, dihedral augmentation, train/test splitting, and synthetic
//! domain generation.
//!
//! A cube keeps its payload as f64 in memory; the on-disk container stores
//! float32, so loading is an exact widening and cubes written by this
//! toolkit round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::rng_from;

const MAGIC: &[u8; 4] = b"HSC1";
const HEADER_LEN: u64 = 4 + 4 * 4 + 1;

/// One hyperspectral domain: an H x W image of B-band spectra with optional
/// per-pixel class labels (0 = unlabeled, 1..=C = class).
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    pub domain_id: String,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Row-major (row, col, band).
    pub data: Vec<f64>,
    pub labels: Option<Vec<u16>>,
    pub num_classes: u16,
}

impl HyperCube {
    pub fn new(
        domain_id: impl Into<String>,
        height: usize,
        width: usize,
        bands: usize,
        data: Vec<f64>,
        labels: Option<Vec<u16>>,
        num_classes: u16,
    ) -> Result<Self> {
        let cube = HyperCube {
            domain_id: domain_id.into(),
            height,
            width,
            bands,
            data,
            labels,
            num_classes,
        };
        cube.validate()?;
        Ok(cube)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::InvalidArg(format!(
                "cube `{}` has a zero dimension ({}x{}x{})",
                self.domain_id, self.height, self.width, self.bands
            )));
        }
        let expect = self.height * self.width * self.bands;
        if self.data.len() != expect {
            return Err(Error::shape(
                format!("cube `{}` payload", self.domain_id),
                expect,
                self.data.len(),
            ));
        }
        if let Some(idx) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("cube `{}` payload", self.domain_id),
                index: Some(idx),
            });
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.height * self.width {
                return Err(Error::shape(
                    format!("cube `{}` labels", self.domain_id),
                    self.height * self.width,
                    labels.len(),
                ));
            }
            for (pixel, &label) in labels.iter().enumerate() {
                if label > self.num_classes {
                    return Err(Error::LabelRange {
                        pixel,
                        label,
                        num_classes: self.num_classes,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Spectrum of the pixel at (row, col).
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.bands;
        &self.data[start..start + self.bands]
    }

    pub fn label_at(&self, row: usize, col: usize) -> u16 {
        self.labels
            .as_ref()
            .map(|l| l[row * self.width + col])
            .unwrap_or(0)
    }

    /// Flat indices (row * width + col) of labeled pixels, row-major.
    pub fn labeled_indices(&self) -> Vec<usize> {
        match &self.labels {
            Some(labels) => labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l > 0)
                .map(|(i, _)| i)
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn flat_to_rc(&self, flat: usize) -> (usize, usize) {
        (flat / self.width, flat % self.width)
    }
}

// ---------------------------------------------------------------------------
// Container format
// ---------------------------------------------------------------------------

/// Write a cube to the HSC1 container: magic `HSC1`, little-endian header
/// (u32 H, W, B, C, u8 has_labels), H*W*B float32 payload in (row, col, band)
/// order, then H*W uint16 labels when present.
pub fn save_cube(cube: &HyperCube, path: &Path) -> Result<()> {
    cube.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(cube.height as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(cube.width as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(cube.bands as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(u32::from(cube.num_classes))
        .map_err(io)?;
    w.write_u8(u8::from(cube.labels.is_some())).map_err(io)?;
    for (i, &v) in cube.data.iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite {
                context: format!("cube `{}` payload narrowed to f32", cube.domain_id),
                index: Some(i),
            });
        }
        w.write_f32::<LittleEndian>(f).map_err(io)?;
    }
    if let Some(labels) = &cube.labels {
        for &l in labels {
            w.write_u16::<LittleEndian>(l).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Read and validate an HSC1 cube. The domain id is the file stem.
pub fn load_cube(path: &Path) -> Result<HyperCube> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(file);

    if file_len < HEADER_LEN {
        return Err(Error::format(
            format!("file too short for HSC1 header ({file_len} bytes)"),
            Some(file_len),
        ));
    }
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::format(
            format!("bad magic {magic:?}, expected \"HSC1\""),
            Some(0),
        ));
    }
    let io = |e| Error::io(path, e);
    let height = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let width = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let bands = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let num_classes = r.read_u32::<LittleEndian>().map_err(io)?;
    let has_labels = r.read_u8().map_err(io)? != 0;
    if num_classes > u32::from(u16::MAX) {
        return Err(Error::format(
            format!("class count {num_classes} exceeds u16 range"),
            Some(16),
        ));
    }
    if height == 0 || width == 0 || bands == 0 {
        return Err(Error::format(
            format!("zero dimension in header ({height}x{width}x{bands})"),
            Some(4),
        ));
    }

    let n_values = height * width * bands;
    let expected = HEADER_LEN
        + n_values as u64 * 4
        + if has_labels {
            (height * width) as u64 * 2
        } else {
            0
        };
    if file_len != expected {
        return Err(Error::format(
            format!(
                "payload size mismatch: header implies {expected} bytes, file has {file_len}"
            ),
            Some(file_len.min(expected)),
        ));
    }

    let mut payload = vec![0f32; n_values];
    r.read_f32_into::<LittleEndian>(&mut payload).map_err(io)?;
    let data: Vec<f64> = payload.iter().map(|&v| f64::from(v)).collect();

    let labels = if has_labels {
        let mut l = vec![0u16; height * width];
        r.read_u16_into::<LittleEndian>(&mut l).map_err(io)?;
        Some(l)
    } else {
        None
    };

    let domain_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cube".to_string());

    HyperCube::new(
        domain_id,
        height,
        width,
        bands,
        data,
        labels,
        num_classes as u16,
    )
}

/// Import the plain-text fixture format: a header line, then one pixel per
/// line `row,col,label,v1..vB`. Every pixel of the implied H x W grid must
/// appear exactly once.
pub fn import_csv(path: &Path, domain_id: &str) -> Result<HyperCube> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format("empty CSV file", Some(0)))?;
    let cols = header.split(',').count();
    if cols < 4 {
        return Err(Error::format(
            format!("CSV header has {cols} columns, need row,col,label,v1.."),
            None,
        ));
    }
    let bands = cols - 3;

    let mut pixels: BTreeMap<(usize, usize), (u16, Vec<f64>)> = BTreeMap::new();
    let mut max_row = 0usize;
    let mut max_col = 0usize;
    let mut max_label = 0u16;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(Error::format(
                format!(
                    "line {}: expected {cols} fields, found {}",
                    lineno + 1,
                    fields.len()
                ),
                None,
            ));
        }
        let parse_err = |what: &str| {
            Error::format(format!("line {}: cannot parse {what}", lineno + 1), None)
        };
        let row: usize = fields[0].trim().parse().map_err(|_| parse_err("row"))?;
        let col: usize = fields[1].trim().parse().map_err(|_| parse_err("col"))?;
        let label: u16 = fields[2].trim().parse().map_err(|_| parse_err("label"))?;
        let mut values = Vec::with_capacity(bands);
        for f in &fields[3..] {
            values.push(f.trim().parse::<f64>().map_err(|_| parse_err("value"))?);
        }
        if pixels.insert((row, col), (label, values)).is_some() {
            return Err(Error::format(
                format!("line {}: duplicate pixel ({row},{col})", lineno + 1),
                None,
            ));
        }
        max_row = max_row.max(row);
        max_col = max_col.max(col);
        max_label = max_label.max(label);
    }
    let (height, width) = (max_row + 1, max_col + 1);
    if pixels.len() != height * width {
        return Err(Error::format(
            format!(
                "grid {height}x{width} implies {} pixels, found {}",
                height * width,
                pixels.len()
            ),
            None,
        ));
    }

    let mut data = vec![0f64; height * width * bands];
    let mut labels = vec![0u16; height * width];
    let mut any_label = false;
    for ((row, col), (label, values)) in pixels {
        let base = (row * width + col) * bands;
        data[base..base + bands].copy_from_slice(&values);
        labels[row * width + col] = label;
        any_label |= label > 0;
    }
    HyperCube::new(
        domain_id,
        height,
        width,
        bands,
        data,
        any_label.then_some(labels),
        max_label,
    )
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-band z-score over all pixels of the cube (population statistics).
/// Constant bands map to all-zero.
pub fn normalize_cube(cube: &HyperCube) -> HyperCube {
    let n = cube.num_pixels() as f64;
    let bands = cube.bands;
    let mut mean = vec![0f64; bands];
    for px in 0..cube.num_pixels() {
        for b in 0..bands {
            mean[b] += cube.data[px * bands + b];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0f64; bands];
    for px in 0..cube.num_pixels() {
        for b in 0..bands {
            let d = cube.data[px * bands + b] - mean[b];
            var[b] += d * d;
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|&v| {
            let sd = (v / n).sqrt();
            if sd > 0.0 {
                1.0 / sd
            } else {
                0.0
            }
        })
        .collect();
    let mut out = cube.clone();
    for px in 0..cube.num_pixels() {
        for b in 0..bands {
            out.data[px * bands + b] = (cube.data[px * bands + b] - mean[b]) * inv_std[b];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Patch extraction and dihedral augmentation
// ---------------------------------------------------------------------------

/// An S x S x B spatial context window centered on a pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub domain_id: String,
    pub center_row: usize,
    pub center_col: usize,
    /// Odd window side S.
    pub spatial: usize,
    pub bands: usize,
    /// Row-major (row, col, band), like the cube payload.
    pub values: Vec<f64>,
}

impl Patch {
    /// Values reordered to channel-major (band, row, col) for network input.
    pub fn channel_major(&self) -> Vec<f64> {
        window_channel_major(&self.values, self.spatial, self.bands)
    }
}

/// Reorder an S x S x B window from (row, col, band) to (band, row, col).
pub fn window_channel_major(values: &[f64], side: usize, bands: usize) -> Vec<f64> {
    let mut out = vec![0f64; values.len()];
    for r in 0..side {
        for c in 0..side {
            for b in 0..bands {
                out[(b * side + r) * side + c] = values[(r * side + c) * bands + b];
            }
        }
    }
    out
}

/// Mirror-reflection index without edge repetition: for n = 3 the extension
/// pattern is `2 1 | 0 1 2 | 1 0`.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// S x S x B window centered at (row, col); out-of-bounds positions are
/// filled by mirror reflection without edge repetition.
pub fn extract_patch(cube: &HyperCube, row: usize, col: usize, spatial: usize) -> Result<Patch> {
    if spatial == 0 || spatial % 2 == 0 {
        return Err(Error::InvalidArg(format!(
            "patch window side must be odd and positive, got {spatial}"
        )));
    }
    if row >= cube.height || col >= cube.width {
        return Err(Error::InvalidArg(format!(
            "patch center ({row},{col}) outside {}x{} image",
            cube.height, cube.width
        )));
    }
    let half = (spatial / 2) as isize;
    let bands = cube.bands;
    let mut values = Vec::with_capacity(spatial * spatial * bands);
    for dr in -half..=half {
        let sr = reflect(row as isize + dr, cube.height);
        for dc in -half..=half {
            let sc = reflect(col as isize + dc, cube.width);
            values.extend_from_slice(cube.pixel(sr, sc));
        }
    }
    Ok(Patch {
        domain_id: cube.domain_id.clone(),
        center_row: row,
        center_col: col,
        spatial,
        bands,
        values,
    })
}

/// Source position of output (r, c) under the k-th dihedral transform of an
/// s x s grid. k = 0 is the identity; 1..=3 are clockwise rotations; 4 and 5
/// mirror across the vertical and horizontal axes; 6 and 7 across the main
/// and anti diagonal.
fn dihedral_src(k: usize, s: usize, r: usize, c: usize) -> (usize, usize) {
    match k {
        0 => (r, c),
        1 => (s - 1 - c, r),
        2 => (s - 1 - r, s - 1 - c),
        3 => (c, s - 1 - r),
        4 => (r, s - 1 - c),
        5 => (s - 1 - r, c),
        6 => (c, r),
        7 => (s - 1 - c, s - 1 - r),
        _ => unreachable!("dihedral index validated by caller"),
    }
}

/// Apply the k-th dihedral transform to the spatial axes of an
/// (row, col, band) window; the spectral axis is untouched.
pub fn dihedral_apply_window(values: &[f64], side: usize, bands: usize, k: usize) -> Result<Vec<f64>> {
    if k > 7 {
        return Err(Error::InvalidArg(format!(
            "dihedral index must lie in 0..=7, got {k}"
        )));
    }
    if values.len() != side * side * bands {
        return Err(Error::shape(
            "dihedral_apply_window",
            side * side * bands,
            values.len(),
        ));
    }
    let mut out = vec![0f64; values.len()];
    for r in 0..side {
        for c in 0..side {
            let (sr, sc) = dihedral_src(k, side, r, c);
            let src = (sr * side + sc) * bands;
            let dst = (r * side + c) * bands;
            out[dst..dst + bands].copy_from_slice(&values[src..src + bands]);
        }
    }
    Ok(out)
}

/// The k-th element of the order-8 dihedral group applied to a patch.
pub fn dihedral_augment(patch: &Patch, k: usize) -> Result<Patch> {
    let values = dihedral_apply_window(&patch.values, patch.spatial, patch.bands, k)?;
    Ok(Patch {
        values,
        ..patch.clone()
    })
}

// ---------------------------------------------------------------------------
// Train/test splits
// ---------------------------------------------------------------------------

/// Parameters of one train/test split draw.
#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_per_domain: usize,
    /// Which of the repeated runs this split belongs to (0..runs).
    pub run_index: u32,
}

/// Draw `train_per_domain` labeled pixels without replacement; the rest of
/// the labeled pixels form the test set. Deterministic in (seed, run_index).
/// An empty test set is an error unless `allow_empty_test` is set.
pub fn make_split(
    cube: &HyperCube,
    spec: &SplitSpec,
    allow_empty_test: bool,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut labeled = cube.labeled_indices();
    if labeled.len() < spec.train_per_domain {
        return Err(Error::InsufficientData(format!(
            "cube `{}` has {} labeled pixels, need {}",
            cube.domain_id,
            labeled.len(),
            spec.train_per_domain
        )));
    }
    if labeled.len() == spec.train_per_domain && !allow_empty_test {
        return Err(Error::InsufficientData(format!(
            "training split consumes all {} labeled pixels of `{}`, leaving an empty test set",
            labeled.len(),
            cube.domain_id
        )));
    }
    let mut rng = rng_from(spec.seed, "split", u64::from(spec.run_index));
    labeled.shuffle(&mut rng);
    let mut train = labeled[..spec.train_per_domain].to_vec();
    let mut test = labeled[spec.train_per_domain..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Synthetic domains
// ---------------------------------------------------------------------------

/// Configuration for dataset-free synthetic domains.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_domains: usize,
    /// Band count per domain; may differ across domains.
    pub bands: Vec<usize>,
    /// Class count per domain.
    pub classes: Vec<u16>,
    /// Square image side.
    pub size: usize,
    pub seed: u64,
    /// Std-dev of i.i.d. per-value noise around the class signature.
    pub noise_sigma: f64,
    /// Guaranteed signature separation as a multiple of `noise_sigma`.
    pub margin_factor: f64,
    pub id_prefix: String,
}

impl SynthConfig {
    pub fn new(bands: Vec<usize>, classes: Vec<u16>, size: usize, seed: u64) -> Self {
        SynthConfig {
            num_domains: bands.len(),
            bands,
            classes,
            size,
            seed,
            noise_sigma: 1.0,
            margin_factor: 5.0,
            id_prefix: "synth".to_string(),
        }
    }
}

fn signature_samples(
    rng: &mut rand_chacha::ChaCha8Rng,
    level: f64,
    amp: f64,
    bands: usize,
) -> Vec<f64> {
    let mut comps = [(0.0, 0.0, 0.0); 3];
    for comp in &mut comps {
        let a: f64 = rng.random_range(0.3..1.0) * amp;
        let freq: f64 = rng.random_range(0.5..3.0);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        *comp = (a, freq, phase);
    }
    let smooth: Vec<f64> = (0..bands)
        .map(|b| {
            let lambda = if bands == 1 {
                0.5
            } else {
                b as f64 / (bands - 1) as f64
            };
            comps
                .iter()
                .map(|&(a, f, p)| a * (std::f64::consts::TAU * f * lambda + p).sin())
                .sum::<f64>()
        })
        .collect();
    // center the smooth part so level offsets separate signatures in L2
    // exactly: ||sig_i - sig_j||^2 = B * dlevel^2 + ||dsmooth||^2
    let mean = smooth.iter().sum::<f64>() / bands as f64;
    smooth.iter().map(|s| level + s - mean).collect()
}

/// Generate fully labeled domains made of contiguous single-class tiles.
///
/// Each (domain, class) pair gets a smooth random spectral signature.
/// Signatures are stacked at per-band level offsets sized so that any two
/// differ by at least `margin_factor * noise_sigma` in across-band L2
/// distance (the noise projection onto any discriminant direction has
/// standard deviation `noise_sigma`, so classes stay separable while single
/// bands remain noise-dominated, as on real sensors). Pixel values are the
/// signature plus i.i.d. Gaussian noise, rounded through f32 so cubes
/// survive the container format bit-exactly.
pub fn synth_domains(cfg: &SynthConfig) -> Result<Vec<HyperCube>> {
    if cfg.num_domains == 0 {
        return Err(Error::InvalidArg("synth_domains: zero domains".to_string()));
    }
    if cfg.bands.len() != cfg.num_domains || cfg.classes.len() != cfg.num_domains {
        return Err(Error::InvalidArg(format!(
            "synth_domains: bands ({}) and classes ({}) lists must both have {} entries",
            cfg.bands.len(),
            cfg.classes.len(),
            cfg.num_domains
        )));
    }
    if cfg.size == 0 || cfg.bands.iter().any(|&b| b == 0) || cfg.classes.iter().any(|&c| c == 0) {
        return Err(Error::InvalidArg(
            "synth_domains: degenerate size, band count, or class count".to_string(),
        ));
    }
    if cfg.noise_sigma < 0.0 || cfg.margin_factor < 0.0 {
        return Err(Error::InvalidArg(
            "synth_domains: noise_sigma and margin_factor must be non-negative".to_string(),
        ));
    }

    // Per-band level gap such that sqrt(B_min) * gap >= margin * sigma, with
    // a floor keeping noiseless signatures distinct.
    let b_min = *cfg.bands.iter().min().expect("non-empty bands") as f64;
    let gap = cfg.margin_factor * cfg.noise_sigma / b_min.sqrt() + 1e-3;

    let mut cubes = Vec::with_capacity(cfg.num_domains);
    let mut global_sig = 0u64;
    for d in 0..cfg.num_domains {
        let bands = cfg.bands[d];
        let classes = cfg.classes[d];
        let grid = (f64::from(classes).sqrt().ceil()) as usize;
        if cfg.size < grid {
            return Err(Error::InvalidArg(format!(
                "synth_domains: size {} too small to tile {} classes",
                cfg.size, classes
            )));
        }
        let tile = cfg.size / grid;

        let signatures: Vec<Vec<f64>> = (0..classes)
            .map(|_| {
                let mut sig_rng = rng_from(cfg.seed, "synth.sig", global_sig);
                let sig = signature_samples(&mut sig_rng, global_sig as f64 * gap, gap, bands);
                global_sig += 1;
                sig
            })
            .collect();

        let mut noise_rng = rng_from(cfg.seed, "synth.noise", d as u64);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let size = cfg.size;
        let mut data = vec![0f64; size * size * bands];
        let mut labels = vec![0u16; size * size];
        for r in 0..size {
            let tr = (r / tile).min(grid - 1);
            for c in 0..size {
                let tc = (c / tile).min(grid - 1);
                let class = ((tr * grid + tc) % classes as usize) as u16;
                labels[r * size + c] = class + 1;
                let sig = &signatures[class as usize];
                let base = (r * size + c) * bands;
                for b in 0..bands {
                    let noise = if cfg.noise_sigma > 0.0 {
                        cfg.noise_sigma * normal.sample(&mut noise_rng)
                    } else {
                        0.0
                    };
                    // round through f32 to keep save/load bit-exact
                    data[base + b] = (sig[b] + noise) as f32 as f64;
                }
            }
        }
        cubes.push(HyperCube::new(
            format!("{}{}", cfg.id_prefix, d),
            size,
            size,
            bands,
            data,
            Some(labels),
            classes,
        )?);
    }
    Ok(cubes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_cube() -> HyperCube {
        let (h, w, b) = (3, 3, 2);
        let data: Vec<f64> = (0..h * w * b).map(|i| i as f64 * 0.5 - 2.0).collect();
        let labels = vec![0, 1, 2, 1, 0, 2, 1, 1, 2];
        HyperCube::new("t", h, w, b, data, Some(labels), 2).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let cube = small_cube();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.hsc");
        save_cube(&cube, &path).unwrap();
        let loaded = load_cube(&path).unwrap();
        assert_eq!(loaded, cube);
    }

    #[test]
    fn truncated_payload_reports_size_mismatch() {
        let cube = small_cube();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.hsc");
        save_cube(&cube, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // drop one f32 from the payload (header says 18 values, leave 17)
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_cube(&path).unwrap_err();
        match err {
            Error::Format { msg, offset } => {
                assert!(msg.contains("size mismatch"), "{msg}");
                assert!(offset.is_some());
            }
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn label_above_class_count_rejected() {
        let err = HyperCube::new(
            "t",
            1,
            3,
            1,
            vec![0.0, 1.0, 2.0],
            Some(vec![0, 1, 2]),
            1,
        )
        .unwrap_err();
        match err {
            Error::LabelRange { pixel, label, .. } => {
                assert_eq!((pixel, label), (2, 2));
            }
            other => panic!("expected LabelRange, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_payload_rejected() {
        let err = HyperCube::new("t", 1, 1, 2, vec![0.0, f64::NAN], None, 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn normalize_band_values() {
        let cube = HyperCube::new("t", 1, 3, 1, vec![1.0, 2.0, 3.0], None, 0).unwrap();
        let norm = normalize_cube(&cube);
        let expect = 1.224_744_871_391_589_1;
        assert!((norm.data[0] + expect).abs() < 1e-12);
        assert!(norm.data[1].abs() < 1e-12);
        assert!((norm.data[2] - expect).abs() < 1e-12);
    }

    #[test]
    fn normalize_constant_band_is_zero() {
        let cube = HyperCube::new("t", 2, 2, 1, vec![7.0; 4], None, 0).unwrap();
        let norm = normalize_cube(&cube);
        assert!(norm.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_is_idempotent() {
        let cube = small_cube();
        let once = normalize_cube(&cube);
        let twice = normalize_cube(&once);
        for (a, b) in once.data.iter().zip(twice.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_single_pixel_window() {
        let cube = small_cube();
        let p = extract_patch(&cube, 1, 2, 1).unwrap();
        assert_eq!(p.values, cube.pixel(1, 2));
    }

    #[test]
    fn patch_corner_mirrors_without_repeat() {
        let cube = small_cube();
        let p = extract_patch(&cube, 0, 0, 5).unwrap();
        // reflected row/col order for offsets -2..=2 around 0 on a side of 3
        let idx = [2usize, 1, 0, 1, 2];
        for (wr, &sr) in idx.iter().enumerate() {
            for (wc, &sc) in idx.iter().enumerate() {
                let got = &p.values[(wr * 5 + wc) * cube.bands..][..cube.bands];
                assert_eq!(got, cube.pixel(sr, sc), "window ({wr},{wc})");
            }
        }
        // spec'd spot value: window (0,0) equals cube (2,2)
        assert_eq!(&p.values[..cube.bands], cube.pixel(2, 2));
    }

    #[test]
    fn patch_interior_equals_raw_slice() {
        let cube = small_cube();
        let p = extract_patch(&cube, 1, 1, 3).unwrap();
        for dr in 0..3 {
            for dc in 0..3 {
                let got = &p.values[(dr * 3 + dc) * cube.bands..][..cube.bands];
                assert_eq!(got, cube.pixel(dr, dc));
            }
        }
    }

    #[test]
    fn patch_rejects_even_window_and_bad_center() {
        let cube = small_cube();
        assert!(extract_patch(&cube, 0, 0, 2).is_err());
        assert!(extract_patch(&cube, 3, 0, 3).is_err());
    }

    #[test]
    fn dihedral_identity_and_horizontal_mirror() {
        let patch = Patch {
            domain_id: "t".into(),
            center_row: 0,
            center_col: 0,
            spatial: 2,
            bands: 1,
            values: vec![1.0, 2.0, 3.0, 4.0], // [[a,b],[c,d]]
        };
        assert_eq!(dihedral_augment(&patch, 0).unwrap().values, patch.values);
        let mirrored = dihedral_augment(&patch, 4).unwrap();
        assert_eq!(mirrored.values, vec![2.0, 1.0, 4.0, 3.0]); // [[b,a],[d,c]]
        assert!(dihedral_augment(&patch, 8).is_err());
    }

    #[test]
    fn dihedral_transforms_are_distinct_and_closed() {
        // spatially asymmetric 3x3 grid
        let vals: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let images: Vec<Vec<f64>> = (0..8)
            .map(|k| dihedral_apply_window(&vals, 3, 1, k).unwrap())
            .collect();
        for i in 0..8 {
            for j in 0..8 {
                if i != j {
                    assert_ne!(images[i], images[j], "transforms {i} and {j} coincide");
                }
            }
        }
        // composition table: applying j then i equals some single transform m
        for i in 0..8 {
            for j in 0..8 {
                let composed =
                    dihedral_apply_window(&images[j], 3, 1, i).unwrap();
                let matches = images.iter().filter(|im| **im == composed).count();
                assert_eq!(matches, 1, "composition {i}∘{j} not in the group");
            }
        }
    }

    #[test]
    fn split_is_deterministic_and_partitions_labeled() {
        let cube = small_cube();
        let spec = SplitSpec {
            seed: 9,
            train_per_domain: 3,
            run_index: 1,
        };
        let (train1, test1) = make_split(&cube, &spec, false).unwrap();
        let (train2, test2) = make_split(&cube, &spec, false).unwrap();
        assert_eq!(train1, train2);
        assert_eq!(test1, test2);
        let mut union: Vec<usize> = train1.iter().chain(test1.iter()).copied().collect();
        union.sort_unstable();
        assert_eq!(union, cube.labeled_indices());
        assert!(train1.iter().all(|i| !test1.contains(i)));
    }

    #[test]
    fn split_run_index_changes_draw() {
        let cube = small_cube();
        let a = make_split(
            &cube,
            &SplitSpec {
                seed: 9,
                train_per_domain: 3,
                run_index: 0,
            },
            false,
        )
        .unwrap();
        let b = make_split(
            &cube,
            &SplitSpec {
                seed: 9,
                train_per_domain: 3,
                run_index: 1,
            },
            false,
        )
        .unwrap();
        assert_ne!(a.0, b.0);
    }

    #[test]
    fn split_boundary_cases() {
        let cube = small_cube(); // 7 labeled pixels
        let too_many = SplitSpec {
            seed: 1,
            train_per_domain: 8,
            run_index: 0,
        };
        assert!(matches!(
            make_split(&cube, &too_many, false),
            Err(Error::InsufficientData(_))
        ));
        let all = SplitSpec {
            seed: 1,
            train_per_domain: 7,
            run_index: 0,
        };
        assert!(make_split(&cube, &all, false).is_err());
        let (train, test) = make_split(&cube, &all, true).unwrap();
        assert_eq!(train.len(), 7);
        assert!(test.is_empty());
    }

    #[test]
    fn synth_single_constant_domain() {
        let mut cfg = SynthConfig::new(vec![5], vec![1], 4, 3);
        cfg.noise_sigma = 0.0;
        let cubes = synth_domains(&cfg).unwrap();
        let cube = &cubes[0];
        let first = cube.pixel(0, 0).to_vec();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(cube.pixel(r, c), &first[..]);
            }
        }
    }

    #[test]
    fn synth_respects_band_lists() {
        let cfg = SynthConfig::new(vec![50, 60], vec![4, 4], 8, 3);
        let cubes = synth_domains(&cfg).unwrap();
        assert_eq!(cubes[0].bands, 50);
        assert_eq!(cubes[1].bands, 60);
        assert_eq!(cubes[0].num_classes, 4);
        assert!(cubes[0].labeled_indices().len() == 64);
    }

    #[test]
    fn synth_noiseless_nearest_centroid_is_perfect() {
        let mut cfg = SynthConfig::new(vec![12, 16], vec![4, 3], 12, 11);
        cfg.noise_sigma = 0.0;
        let cubes = synth_domains(&cfg).unwrap();
        for cube in &cubes {
            // centroids = per-class mean spectra; brute-force nearest-centroid
            let c = cube.num_classes as usize;
            let mut centroid = vec![vec![0f64; cube.bands]; c];
            let mut count = vec![0usize; c];
            for flat in cube.labeled_indices() {
                let (r, cc) = cube.flat_to_rc(flat);
                let class = cube.label_at(r, cc) as usize - 1;
                count[class] += 1;
                for (acc, v) in centroid[class].iter_mut().zip(cube.pixel(r, cc)) {
                    *acc += v;
                }
            }
            for (cls, cent) in centroid.iter_mut().enumerate() {
                for v in cent.iter_mut() {
                    *v /= count[cls] as f64;
                }
            }
            for flat in cube.labeled_indices() {
                let (r, cc) = cube.flat_to_rc(flat);
                let truth = cube.label_at(r, cc) as usize - 1;
                let px = cube.pixel(r, cc);
                let best = (0..c)
                    .min_by(|&a, &b| {
                        let da: f64 = centroid[a]
                            .iter()
                            .zip(px)
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum();
                        let db: f64 = centroid[b]
                            .iter()
                            .zip(px)
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                assert_eq!(best, truth);
            }
        }
    }

    #[test]
    fn synth_rejects_degenerate_configs() {
        assert!(synth_domains(&SynthConfig::new(vec![], vec![], 8, 1)).is_err());
        assert!(synth_domains(&SynthConfig::new(vec![4, 4], vec![2], 8, 1)).is_err());
        assert!(synth_domains(&SynthConfig::new(vec![4], vec![0], 8, 1)).is_err());
        assert!(synth_domains(&SynthConfig::new(vec![4], vec![9], 2, 1)).is_err());
    }

    #[test]
    fn csv_import_matches_manual_cube() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(
            &path,
            "row,col,label,v1,v2\n\
             0,0,1,0.5,1.5\n\
             0,1,0,2.5,3.5\n\
             1,0,2,4.5,5.5\n\
             1,1,1,6.5,7.5\n",
        )
        .unwrap();
        let cube = import_csv(&path, "csv").unwrap();
        assert_eq!((cube.height, cube.width, cube.bands), (2, 2, 2));
        assert_eq!(cube.num_classes, 2);
        assert_eq!(cube.pixel(1, 0), &[4.5, 5.5]);
        assert_eq!(cube.label_at(0, 1), 0);
    }

    #[test]
    fn csv_import_rejects_missing_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "row,col,label,v1\n0,0,1,0.5\n1,1,1,2.5\n").unwrap();
        assert!(import_csv(&path, "csv").is_err());
    }

    proptest! {
        #[test]
        fn prop_roundtrip_any_valid_cube(
            h in 1usize..5,
            w in 1usize..5,
            b in 1usize..4,
            with_labels in proptest::bool::ANY,
            seed in 0u64..1000,
        ) {
            use rand::Rng;
            let mut rng = rng_from(seed, "proptest", 0);
            let data: Vec<f64> = (0..h * w * b)
                .map(|_| (rng.random_range(-100.0f32..100.0f32)) as f64)
                .collect();
            let labels = with_labels.then(|| {
                (0..h * w).map(|_| rng.random_range(0u16..4)).collect::<Vec<_>>()
            });
            let cube = HyperCube::new("p", h, w, b, data, labels, 3).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.hsc");
            save_cube(&cube, &path).unwrap();
            prop_assert_eq!(load_cube(&path).unwrap(), cube);
        }

        #[test]
        fn prop_normalize_idempotent_and_shape_preserving(
            h in 1usize..5,
            w in 1usize..5,
            b in 1usize..4,
            seed in 0u64..1000,
        ) {
            use rand::Rng;
            let mut rng = rng_from(seed, "proptest", 1);
            let data: Vec<f64> = (0..h * w * b).map(|_| rng.random_range(-5.0..5.0)).collect();
            let cube = HyperCube::new("p", h, w, b, data, None, 0).unwrap();
            let once = normalize_cube(&cube);
            prop_assert_eq!((once.height, once.width, once.bands), (h, w, b));
            let twice = normalize_cube(&once);
            for (x, y) in once.data.iter().zip(twice.data.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn prop_split_partitions_labeled_pixels(
            seed in 0u64..500,
            run_index in 0u32..5,
            take in 1usize..6,
        ) {
            let cube = small_cube();
            let spec = SplitSpec { seed, train_per_domain: take, run_index };
            let (train, test) = make_split(&cube, &spec, false).unwrap();
            prop_assert_eq!(train.len(), take);
            let mut union: Vec<usize> = train.iter().chain(test.iter()).copied().collect();
            union.sort_unstable();
            prop_assert_eq!(union, cube.labeled_indices());
        }
    }
}
