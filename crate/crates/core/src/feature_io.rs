//! Dense feature maps, the `.fmap` interchange format, and a synthetic scene
//! generator whose ground truth is known by construction.
//!
//! `.fmap` layout (all little-endian):
//!
//! | offset | size | field                     |
//! |--------|------|---------------------------|
//! | 0      | 4    | magic `FMAP`              |
//! | 4      | 2    | version, `u16` = 1        |
//! | 6      | 4    | `hp`, `u32`               |
//! | 10     | 4    | `wp`, `u32`               |
//! | 14     | 4    | `c`, `u32`                |
//! | 18     | 4·hp·wp·c | `f32` payload, (row, col, channel) order |

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::label::LabelMask;
use crate::scalar::Scalar;

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const FMAP_VERSION: u16 = 1;
/// Magic (4) + version (2) + three `u32` dims (12).
pub const FMAP_HEADER_LEN: usize = 18;

/// A dense `hp × wp` grid of `c`-channel vectors.
///
/// The same type carries backbone features and head codes; see [`CodeMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T = f32> {
    hp: usize,
    wp: usize,
    c: usize,
    data: Vec<T>,
}

/// Head output: one `d`-dimensional code per patch. Its `channels()` is `d`.
pub type CodeMap<T = f32> = FeatureMap<T>;

impl<T: Scalar> FeatureMap<T> {
    pub fn new(hp: usize, wp: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if hp == 0 || wp == 0 || c == 0 {
            return Err(Error::Invariant(format!(
                "feature map dims must be positive, got {hp}x{wp}x{c}"
            )));
        }
        let expected = hp
            .checked_mul(wp)
            .and_then(|n| n.checked_mul(c))
            .ok_or_else(|| Error::Invariant("feature map dims overflow".into()))?;
        if data.len() != expected {
            return Err(Error::Invariant(format!(
                "feature map {hp}x{wp}x{c} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        Ok(Self { hp, wp, c, data })
    }

    /// Builds a map from a `(hp·wp) × c` matrix of per-cell rows.
    pub fn from_matrix(hp: usize, wp: usize, m: Array2<T>) -> Result<Self> {
        let c = m.ncols();
        if m.nrows() != hp * wp {
            return Err(Error::Shape(format!(
                "matrix has {} rows, grid {hp}x{wp} needs {}",
                m.nrows(),
                hp * wp
            )));
        }
        let data = if m.is_standard_layout() {
            m.into_raw_vec_and_offset().0
        } else {
            m.iter().copied().collect()
        };
        Self::new(hp, wp, c, data)
    }

    pub fn hp(&self) -> usize {
        self.hp
    }

    pub fn wp(&self) -> usize {
        self.wp
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn cells(&self) -> usize {
        self.hp * self.wp
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> &[T] {
        self.cell_at(row * self.wp + col)
    }

    pub fn cell_at(&self, idx: usize) -> &[T] {
        &self.data[idx * self.c..(idx + 1) * self.c]
    }

    /// Per-cell rows as a `(hp·wp) × c` view.
    pub fn as_matrix(&self) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((self.cells(), self.c), &self.data).expect("length checked at construction")
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            hp: self.hp,
            wp: self.wp,
            c: self.c,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Mean over all cells.
    pub fn mean_vector(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.c];
        for cell in self.data.chunks_exact(self.c) {
            for (a, v) in acc.iter_mut().zip(cell) {
                *a += v.to_f64_lossy();
            }
        }
        let n = self.cells() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Serializes a map into `.fmap` bytes.
pub fn encode_feature_map(fm: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(FMAP_HEADER_LEN + 4 * fm.data.len());
    out.extend_from_slice(FMAP_MAGIC);
    out.extend_from_slice(&FMAP_VERSION.to_le_bytes());
    for dim in [fm.hp, fm.wp, fm.c] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &fm.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses `.fmap` bytes, validating header, payload length and finiteness.
pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < 4 || &bytes[..4] != FMAP_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"FMAP\"",
            String::from_utf8_lossy(&bytes[..bytes.len().min(4)])
        )));
    }
    if bytes.len() < FMAP_HEADER_LEN {
        return Err(Error::Corrupt(format!(
            "header truncated at {} bytes",
            bytes.len()
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FMAP_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as u64;
    let (hp, wp, c) = (dim(6), dim(10), dim(14));
    let payload = &bytes[FMAP_HEADER_LEN..];
    let expected = hp * wp * c * 4;
    if payload.len() as u64 != expected {
        return Err(Error::Corrupt(format!(
            "header declares {hp}x{wp}x{c} ({expected} payload bytes), found {}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    FeatureMap::new(hp as usize, wp as usize, c as usize, data)
}

pub fn write_feature_map(fm: &FeatureMap, path: &Path) -> Result<()> {
    write_atomic(path, &encode_feature_map(fm))
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_map(&bytes)
}

/// Reads only the `(hp, wp, c)` header of a `.fmap` file.
pub fn read_feature_map_dims(path: &Path) -> Result<(usize, usize, usize)> {
    use std::io::Read;
    let mut header = [0u8; FMAP_HEADER_LEN];
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let n = file.read(&mut header).map_err(|e| Error::io(path, e))?;
    if n < 4 || &header[..4] != FMAP_MAGIC {
        return Err(Error::Format(format!("{} is not an .fmap file", path.display())));
    }
    if n < FMAP_HEADER_LEN {
        return Err(Error::Corrupt(format!("{}: header truncated", path.display())));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != FMAP_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = |at: usize| u32::from_le_bytes(header[at..at + 4].try_into().unwrap()) as usize;
    Ok((dim(6), dim(10), dim(14)))
}

/// An axis-aligned block of grid cells carrying one class id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
    pub class_id: u8,
}

/// Parameters of one synthetic scene.
///
/// Prototypes come from `prototype_seed` when set, otherwise from `seed`;
/// scenes that should share a class geometry share a prototype seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub hp: usize,
    pub wp: usize,
    pub k: usize,
    pub c: usize,
    pub noise_sigma: f64,
    pub regions: Vec<Region>,
    pub seed: u64,
    pub prototype_seed: Option<u64>,
}

const STREAM_PROTOTYPES: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_LAYOUT: u64 = 2;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl SceneSpec {
    /// A spec whose layout is a random guillotine partition with one region per class.
    pub fn with_random_layout(
        hp: usize,
        wp: usize,
        k: usize,
        c: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = stream_rng(seed, STREAM_LAYOUT);
        let regions = guillotine_layout(hp, wp, k, &mut rng)?;
        Ok(Self {
            hp,
            wp,
            k,
            c,
            noise_sigma,
            regions,
            seed,
            prototype_seed: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.hp == 0 || self.wp == 0 || self.c == 0 || self.k == 0 {
            return Err(Error::Invariant("scene dims and k must be positive".into()));
        }
        if self.k > self.c {
            return Err(Error::Invariant(format!(
                "k = {} exceeds c = {}: orthonormal prototypes do not exist",
                self.k, self.c
            )));
        }
        if self.k > 256 {
            return Err(Error::Invariant("class ids must fit in u8".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Invariant(format!(
                "noise_sigma must be finite and nonnegative, got {}",
                self.noise_sigma
            )));
        }
        let mut cover = vec![0u8; self.hp * self.wp];
        let mut seen = vec![false; self.k];
        for r in &self.regions {
            if r.rows == 0 || r.cols == 0 || r.row + r.rows > self.hp || r.col + r.cols > self.wp {
                return Err(Error::Invariant(format!("region {r:?} leaves the grid")));
            }
            if r.class_id as usize >= self.k {
                return Err(Error::Invariant(format!(
                    "region class {} outside 0..{}",
                    r.class_id, self.k
                )));
            }
            seen[r.class_id as usize] = true;
            for y in r.row..r.row + r.rows {
                for x in r.col..r.col + r.cols {
                    cover[y * self.wp + x] += 1;
                }
            }
        }
        if let Some(idx) = cover.iter().position(|&n| n != 1) {
            return Err(Error::Invariant(format!(
                "regions do not tile the grid: cell ({}, {}) covered {} times",
                idx / self.wp,
                idx % self.wp,
                cover[idx]
            )));
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Invariant(format!("class {missing} has no region")));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<u8> {
        let mut labels = vec![0u8; self.hp * self.wp];
        for r in &self.regions {
            for y in r.row..r.row + r.rows {
                labels[y * self.wp + r.col..y * self.wp + r.col + r.cols].fill(r.class_id);
            }
        }
        labels
    }
}

/// Partitions the grid into exactly `k` rectangles by repeatedly cutting the
/// largest splittable rectangle at a random position, then assigns the class
/// ids `0..k` in random order.
pub fn guillotine_layout<R: Rng + ?Sized>(
    hp: usize,
    wp: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Region>> {
    if k == 0 || k > hp * wp || k > 256 {
        return Err(Error::Invariant(format!(
            "cannot split a {hp}x{wp} grid into {k} regions"
        )));
    }
    let mut rects = vec![(0usize, 0usize, hp, wp)];
    while rects.len() < k {
        let (idx, _) = rects
            .iter()
            .enumerate()
            .filter(|(_, r)| r.2 > 1 || r.3 > 1)
            .max_by_key(|(i, r)| (r.2 * r.3, std::cmp::Reverse(*i)))
            .expect("k <= cell count leaves a splittable rectangle");
        let (row, col, rows, cols) = rects.swap_remove(idx);
        let cut_rows = if rows > 1 && cols > 1 {
            rng.random_bool(rows as f64 / (rows + cols) as f64)
        } else {
            rows > 1
        };
        if cut_rows {
            let at = rng.random_range(1..rows);
            rects.push((row, col, at, cols));
            rects.push((row + at, col, rows - at, cols));
        } else {
            let at = rng.random_range(1..cols);
            rects.push((row, col, rows, at));
            rects.push((row, col + at, rows, cols - at));
        }
    }
    rects.sort();
    let mut classes: Vec<u8> = (0..k).map(|i| i as u8).collect();
    for i in (1..classes.len()).rev() {
        let j = rng.random_range(0..=i);
        classes.swap(i, j);
    }
    Ok(rects
        .into_iter()
        .zip(classes)
        .map(|((row, col, rows, cols), class_id)| Region {
            row,
            col,
            rows,
            cols,
            class_id,
        })
        .collect())
}

/// `k` orthonormal vectors in `R^c`: Gram–Schmidt on Gaussian draws, which
/// amounts to a uniformly random rotation of the first `k` basis vectors.
pub fn orthonormal_prototypes(k: usize, c: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if k > c {
        return Err(Error::Invariant(format!(
            "k = {k} exceeds c = {c}: orthonormal prototypes do not exist"
        )));
    }
    let mut rng = stream_rng(seed, STREAM_PROTOTYPES);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
        // Two passes of modified Gram–Schmidt keep orthogonality at ~1e-16.
        for _ in 0..2 {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    Ok(basis)
}

/// Renders a scene: each cell is its region's prototype plus Gaussian noise,
/// L2-normalised. With zero noise cells are the prototypes themselves.
pub fn generate_synthetic_scene(spec: &SceneSpec) -> Result<(FeatureMap, LabelMask)> {
    spec.validate()?;
    let prototypes = orthonormal_prototypes(spec.k, spec.c, spec.prototype_seed.unwrap_or(spec.seed))?;
    let labels = spec.labels();
    let mut rng = stream_rng(spec.seed, STREAM_NOISE);
    let mut data = Vec::with_capacity(spec.hp * spec.wp * spec.c);
    let mut cell = vec![0.0f64; spec.c];
    for &label in &labels {
        let proto = &prototypes[label as usize];
        if spec.noise_sigma > 0.0 {
            for (x, p) in cell.iter_mut().zip(proto) {
                let z: f64 = rng.sample(StandardNormal);
                *x = p + spec.noise_sigma * z;
            }
            let norm = cell.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Numeric("noisy feature collapsed to zero".into()));
            }
            data.extend(cell.iter().map(|x| (x / norm) as f32));
        } else {
            data.extend(proto.iter().map(|&x| x as f32));
        }
    }
    let fm = FeatureMap::new(spec.hp, spec.wp, spec.c, data)?;
    let mask = LabelMask::new(spec.hp, spec.wp, labels)?;
    Ok((fm, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_map() -> FeatureMap {
        FeatureMap::new(2, 3, 4, (0..24).map(|i| i as f32 * 0.5 - 3.0).collect()).unwrap()
    }

    #[test]
    fn single_zero_value_is_last_four_bytes() {
        let fm = FeatureMap::new(1, 1, 1, vec![0.0]).unwrap();
        let bytes = encode_feature_map(&fm);
        assert_eq!(bytes.len(), FMAP_HEADER_LEN + 4);
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 0, 0, 0]);
        assert_eq!(&bytes[..4], b"FMAP");
    }

    #[test]
    fn size_formula() {
        let bytes = encode_feature_map(&small_map());
        assert_eq!(bytes.len(), FMAP_HEADER_LEN + 96);
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..18], &[2, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0]);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = encode_feature_map(&small_map());
        bytes[0] = b'G';
        assert!(matches!(decode_feature_map(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_version_is_unsupported() {
        let mut bytes = encode_feature_map(&small_map());
        bytes[4] = 2;
        assert!(matches!(
            decode_feature_map(&bytes),
            Err(Error::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn short_payload_is_corrupt() {
        let fm = FeatureMap::new(2, 2, 2, vec![0.25; 8]).unwrap();
        let bytes = encode_feature_map(&fm);
        let seven_floats = &bytes[..bytes.len() - 4];
        assert!(matches!(
            decode_feature_map(seven_floats),
            Err(Error::Corrupt(_))
        ));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_feature_map(&long), Err(Error::Corrupt(_))));
    }

    #[test]
    fn nan_payload_is_invariant_error() {
        let mut bytes = encode_feature_map(&small_map());
        let at = FMAP_HEADER_LEN + 4 * 5;
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_feature_map(&bytes), Err(Error::Invariant(_))));
        bytes[at..at + 4].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode_feature_map(&bytes), Err(Error::Invariant(_))));
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(matches!(FeatureMap::<f32>::new(0, 1, 1, vec![]), Err(Error::Invariant(_))));
        let mut bytes = encode_feature_map(&small_map());
        bytes[6..10].copy_from_slice(&0u32.to_le_bytes());
        bytes.truncate(FMAP_HEADER_LEN);
        assert!(matches!(decode_feature_map(&bytes), Err(Error::Invariant(_))));
    }

    #[test]
    fn file_roundtrip_and_header_probe() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fmap");
        let fm = small_map();
        write_feature_map(&fm, &path).unwrap();
        assert_eq!(read_feature_map(&path).unwrap(), fm);
        assert_eq!(read_feature_map_dims(&path).unwrap(), (2, 3, 4));
        assert!(matches!(
            read_feature_map(&dir.path().join("missing.fmap")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn layout_tiles_grid_with_every_class() {
        for seed in 0..50 {
            let spec = SceneSpec::with_random_layout(9, 13, 7, 8, 0.1, seed).unwrap();
            spec.validate().unwrap();
            assert_eq!(spec.regions.len(), 7);
        }
        // One region per cell is the tightest case.
        let spec = SceneSpec::with_random_layout(2, 2, 4, 4, 0.0, 3).unwrap();
        spec.validate().unwrap();
    }

    #[test]
    fn overlapping_regions_rejected() {
        let mut spec = SceneSpec::with_random_layout(4, 4, 2, 4, 0.0, 1).unwrap();
        spec.regions[0].rows = 4;
        spec.regions[0].cols = 4;
        spec.regions[0].row = 0;
        spec.regions[0].col = 0;
        assert!(matches!(spec.validate(), Err(Error::Invariant(_))));
    }

    #[test]
    fn k_above_c_rejected() {
        let mut spec = SceneSpec::with_random_layout(4, 4, 3, 4, 0.0, 1).unwrap();
        spec.c = 2;
        assert!(matches!(
            generate_synthetic_scene(&spec),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn prototypes_orthonormal() {
        for seed in 0..20 {
            let p = orthonormal_prototypes(7, 16, seed).unwrap();
            for i in 0..7 {
                let n: f64 = p[i].iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() <= 1e-6);
                for j in 0..i {
                    let d: f64 = p[i].iter().zip(&p[j]).map(|(a, b)| a * b).sum();
                    assert!(d.abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_noise_cells_are_prototypes() {
        let spec = SceneSpec::with_random_layout(6, 5, 3, 8, 0.0, 11).unwrap();
        let (fm, mask) = generate_synthetic_scene(&spec).unwrap();
        let protos = orthonormal_prototypes(3, 8, 11).unwrap();
        for idx in 0..fm.cells() {
            let p = &protos[mask.labels()[idx] as usize];
            let cell = fm.cell_at(idx);
            let expected: Vec<f32> = p.iter().map(|&x| x as f32).collect();
            assert_eq!(cell, expected.as_slice());
            let dot: f64 = cell.iter().zip(p).map(|(a, b)| *a as f64 * b).sum();
            assert!((dot - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::with_random_layout(8, 8, 4, 8, 0.2, 5).unwrap();
        let a = generate_synthetic_scene(&spec).unwrap();
        let b = generate_synthetic_scene(&spec).unwrap();
        assert_eq!(a, b);
        let other = SceneSpec { seed: 6, prototype_seed: Some(5), ..spec.clone() };
        let c = generate_synthetic_scene(&other).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn shared_prototype_seed_shares_geometry() {
        let a = SceneSpec { prototype_seed: Some(99), ..SceneSpec::with_random_layout(4, 4, 2, 4, 0.0, 1).unwrap() };
        let b = SceneSpec { prototype_seed: Some(99), ..SceneSpec::with_random_layout(4, 4, 2, 4, 0.0, 2).unwrap() };
        let (fa, ma) = generate_synthetic_scene(&a).unwrap();
        let (fb, mb) = generate_synthetic_scene(&b).unwrap();
        let first = |fm: &FeatureMap, m: &LabelMask, class: u8| {
            let idx = m.labels().iter().position(|&l| l == class).unwrap();
            fm.cell_at(idx).to_vec()
        };
        assert_eq!(first(&fa, &ma, 0), first(&fb, &mb, 0));
        assert_eq!(first(&fa, &ma, 1), first(&fb, &mb, 1));
    }
}
