//! Tile and mask ingestion: raster decoding, resizing, palette decoding and
//! split manifests.

use std::collections::HashMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, ImageReader};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::label::LabelMask;

/// An 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbTile {
    pub h: usize,
    pub w: usize,
    /// Row-major RGB triples, `3·h·w` bytes.
    pub pixels: Vec<u8>,
    pub source_path: Option<PathBuf>,
    /// Ground sampling distance; metadata only.
    pub meters_per_pixel: Option<f64>,
}

impl RgbTile {
    pub fn new(h: usize, w: usize, pixels: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Parameter(format!("tile dims must be positive, got {h}x{w}")));
        }
        if pixels.len() != 3 * h * w {
            return Err(Error::Shape(format!(
                "{h}x{w} RGB tile needs {} bytes, got {}",
                3 * h * w,
                pixels.len()
            )));
        }
        Ok(Self {
            h,
            w,
            pixels,
            source_path: None,
            meters_per_pixel: None,
        })
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let at = 3 * (row * self.w + col);
        [self.pixels[at], self.pixels[at + 1], self.pixels[at + 2]]
    }
}

/// Decodes a PNG or JPEG into RGB. Grayscale is replicated across channels
/// and alpha is dropped; anything other than 8 bits per channel is rejected.
pub fn load_tile(path: &Path) -> Result<RgbTile> {
    let decode_err = |message: String| Error::Decode {
        path: path.to_path_buf(),
        message,
    };
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| decode_err(e.to_string()))?;
    let rgb = match img.color() {
        ColorType::Rgb8 => img.into_rgb8(),
        ColorType::L8 | ColorType::La8 | ColorType::Rgba8 => DynamicImage::into_rgb8(img),
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported pixel format {other:?}, expected 8-bit RGB or grayscale",
                path.display()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut tile = RgbTile::new(h, w, rgb.into_raw())?;
    tile.source_path = Some(path.to_path_buf());
    Ok(tile)
}

/// Image dimensions `(h, w)` from the container header, without decoding pixels.
pub fn raster_dims(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .into_dimensions()
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    Ok((h as usize, w as usize))
}

/// Source coordinate and blend weight for output index `dst` under the
/// half-pixel-centre mapping, clamped to the edge.
fn bilinear_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let src = ((dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Per-channel bilinear resampling with half-pixel centres, rounded to the
/// nearest 8-bit value. Ground resolution is scaled by `in_w / out_w`.
pub fn resize_bilinear(tile: &RgbTile, out_h: usize, out_w: usize) -> Result<RgbTile> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Parameter(format!(
            "target dims must be positive, got {out_h}x{out_w}"
        )));
    }
    let rows: Vec<_> = (0..out_h).map(|y| bilinear_taps(y, tile.h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| bilinear_taps(x, tile.w, out_w)).collect();
    let mut pixels = Vec::with_capacity(3 * out_h * out_w);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            let (a, b, c, d) = (
                tile.pixel(y0, x0),
                tile.pixel(y0, x1),
                tile.pixel(y1, x0),
                tile.pixel(y1, x1),
            );
            for ch in 0..3 {
                let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
                let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let mut out = RgbTile::new(out_h, out_w, pixels)?;
    out.source_path = tile.source_path.clone();
    out.meters_per_pixel = tile
        .meters_per_pixel
        .map(|m| m * tile.w as f64 / out_w as f64);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaletteEntry {
    pub id: u8,
    pub name: String,
    pub rgb: [u8; 3],
}

/// Class ids, colours and names for mask rasters. Unknown top-level keys
/// (run metadata) are ignored on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    #[serde(default)]
    pub ignore_id: Option<u8>,
    pub classes: Vec<PaletteEntry>,
}

impl Palette {
    pub fn new(classes: Vec<PaletteEntry>, ignore_id: Option<u8>) -> Result<Self> {
        let p = Self { ignore_id, classes };
        p.validate()?;
        Ok(p)
    }

    /// Ids must be `0..n` in order and colours unique.
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Parameter("palette has no classes".into()));
        }
        let mut seen = HashMap::new();
        for (i, entry) in self.classes.iter().enumerate() {
            if entry.id as usize != i {
                return Err(Error::Parameter(format!(
                    "palette ids must be contiguous from 0; entry {i} has id {}",
                    entry.id
                )));
            }
            if let Some(prev) = seen.insert(entry.rgb, entry.id) {
                return Err(Error::Parameter(format!(
                    "classes {prev} and {} share colour {:?}",
                    entry.id, entry.rgb
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn colors(&self) -> Vec<[u8; 3]> {
        self.classes.iter().map(|c| c.rgb).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Palette = serde_json::from_str(&text)
            .map_err(|e| Error::Parameter(format!("{}: {e}", path.display())))?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("palette serializes");
        write_atomic(path, text.as_bytes())
    }

    /// A copy with at least `k` classes; extra classes get generated colours
    /// that do not collide with existing ones.
    pub fn extended(&self, k: usize) -> Result<Self> {
        if k > 256 {
            return Err(Error::Parameter("at most 256 classes".into()));
        }
        let mut out = self.clone();
        let mut used: std::collections::HashSet<[u8; 3]> = out.colors().into_iter().collect();
        let mut candidate = 0u32;
        while out.classes.len() < k {
            let rgb = spread_color(candidate);
            candidate += 1;
            if used.insert(rgb) {
                out.classes.push(PaletteEntry {
                    id: out.classes.len() as u8,
                    name: format!("cluster_{}", out.classes.len()),
                    rgb,
                });
            }
        }
        Ok(out)
    }

    /// `k` well-separated generated colours named `class_<i>`.
    pub fn generated(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Parameter("palette needs at least one class".into()));
        }
        let empty = Self {
            ignore_id: None,
            classes: Vec::new(),
        };
        let mut p = empty.extended(k)?;
        for entry in &mut p.classes {
            entry.name = format!("class_{}", entry.id);
        }
        Ok(p)
    }
}

/// Deterministic colour sequence stepping hue by the golden angle.
fn spread_color(i: u32) -> [u8; 3] {
    let hue = (i as f64 * 137.507_764) % 360.0;
    let (s, v) = (0.75, if i.is_multiple_of(2) { 0.95 } else { 0.7 });
    let c = v * s;
    let x = c * (1.0 - ((hue / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (hue / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to8 = |f: f64| ((f + m) * 255.0).round() as u8;
    [to8(r), to8(g), to8(b)]
}

/// Exact colour lookup of every mask pixel.
pub fn mask_from_palette(mask_tile: &RgbTile, palette: &Palette) -> Result<LabelMask> {
    let lookup: HashMap<[u8; 3], u8> = palette.classes.iter().map(|c| (c.rgb, c.id)).collect();
    let mut labels = Vec::with_capacity(mask_tile.h * mask_tile.w);
    for (idx, px) in mask_tile.pixels.chunks_exact(3).enumerate() {
        let rgb = [px[0], px[1], px[2]];
        match lookup.get(&rgb) {
            Some(&id) => labels.push(id),
            None => {
                return Err(Error::Data(format!(
                    "colour {rgb:?} at pixel (row {}, col {}) is not in the palette",
                    idx / mask_tile.w,
                    idx % mask_tile.w
                )))
            }
        }
    }
    Ok(LabelMask::new(mask_tile.h, mask_tile.w, labels)?.with_ignore_id(palette.ignore_id))
}

/// Paints a label mask with palette colours.
pub fn render_mask(mask: &LabelMask, palette: &Palette) -> Result<RgbTile> {
    let colors = palette.colors();
    let mut pixels = Vec::with_capacity(3 * mask.labels().len());
    for &l in mask.labels() {
        let rgb = colors.get(l as usize).ok_or_else(|| {
            Error::Data(format!("label {l} has no palette colour ({} classes)", colors.len()))
        })?;
        pixels.extend_from_slice(rgb);
    }
    RgbTile::new(mask.height(), mask.width(), pixels)
}

pub fn mask_resize_nearest(mask: &LabelMask, out_h: usize, out_w: usize) -> Result<LabelMask> {
    mask.resize_nearest(out_h, out_w)
}

/// Writes a mask as an indexed-colour PNG whose palette is `palette`'s
/// colours. `text` entries become `tEXt` chunks.
pub fn write_indexed_png(
    mask: &LabelMask,
    palette: &Palette,
    path: &Path,
    text: &[(&str, String)],
) -> Result<()> {
    let n = palette.len();
    if let Some(&bad) = mask.labels().iter().find(|&&l| l as usize >= n) {
        return Err(Error::Data(format!("label {bad} has no palette colour ({n} classes)")));
    }
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut buf), mask.width() as u32, mask.height() as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(palette.colors().concat());
        for (key, value) in text {
            enc.add_text_chunk((*key).to_string(), value.clone())
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        writer
            .write_image_data(mask.labels())
            .map_err(|e| Error::Format(e.to_string()))?;
        writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    }
    write_atomic(path, &buf)
}

/// Loads a colour mask and decodes it through the palette.
pub fn load_mask(path: &Path, palette: &Palette) -> Result<LabelMask> {
    mask_from_palette(&load_tile(path)?, palette)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: PathBuf,
    #[serde(default)]
    pub mask: Option<PathBuf>,
    #[serde(default)]
    pub meters_per_pixel: Option<f64>,
}

impl ManifestEntry {
    /// File name without extension; predictions and ground truth pair up on it.
    pub fn stem(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn is_feature_file(&self) -> bool {
        self.image.extension().is_some_and(|e| e == "fmap")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct ManifestFile {
    #[serde(default)]
    splits: IndexMap<String, Vec<ManifestEntry>>,
    #[serde(default)]
    pseudo_train_from: Vec<String>,
}

/// Named splits plus the label-free pseudo-train pool.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitManifest {
    /// Splits in manifest order, paths resolved against the manifest directory.
    pub splits: IndexMap<String, Vec<ManifestEntry>>,
    /// Concatenation of the `pseudo_train_from` splits with masks dropped.
    pub pseudo_train: Vec<ManifestEntry>,
    pub pseudo_train_from: Vec<String>,
}

impl SplitManifest {
    pub fn split(&self, name: &str) -> Option<&[ManifestEntry]> {
        if name == "pseudo_train" && !self.splits.contains_key(name) {
            return Some(&self.pseudo_train);
        }
        self.splits.get(name).map(Vec::as_slice)
    }

    /// Serializes with paths relative to `base` where possible.
    pub fn to_json(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
        let file = ManifestFile {
            splits: self
                .splits
                .iter()
                .map(|(name, entries)| {
                    let entries = entries
                        .iter()
                        .map(|e| ManifestEntry {
                            image: rel(&e.image),
                            mask: e.mask.as_deref().map(rel),
                            meters_per_pixel: e.meters_per_pixel,
                        })
                        .collect();
                    (name.clone(), entries)
                })
                .collect(),
            pseudo_train_from: self.pseudo_train_from.clone(),
        };
        serde_json::to_string_pretty(&file).expect("manifest serializes")
    }
}

/// Loads and validates a split manifest.
///
/// Relative paths are resolved against the manifest's directory. Every
/// missing path is reported at once. For raster images with masks the two
/// must have equal dimensions; `.fmap` feature entries are exempt since
/// their grid is patch-resolution.
pub fn build_split(manifest_path: &Path) -> Result<SplitManifest> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let file: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        message: format!("{}: {e}", manifest_path.display()),
        missing: Vec::new(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

    let mut splits = IndexMap::new();
    let mut missing = Vec::new();
    for (name, entries) in file.splits {
        let resolved: Vec<ManifestEntry> = entries
            .into_iter()
            .map(|e| ManifestEntry {
                image: resolve(&e.image),
                mask: e.mask.as_deref().map(resolve),
                meters_per_pixel: e.meters_per_pixel,
            })
            .collect();
        for e in &resolved {
            for p in std::iter::once(&e.image).chain(e.mask.as_ref()) {
                if !p.exists() {
                    missing.push(p.clone());
                }
            }
        }
        splits.insert(name, resolved);
    }
    for name in &file.pseudo_train_from {
        if !splits.contains_key(name) {
            return Err(Error::Manifest {
                message: format!("pseudo_train_from names unknown split {name:?}"),
                missing: Vec::new(),
            });
        }
    }
    if !missing.is_empty() {
        return Err(Error::Manifest {
            message: format!("{} referenced paths do not exist", missing.len()),
            missing,
        });
    }
    for entry in splits.values().flatten() {
        if let (Some(mask), false) = (&entry.mask, entry.is_feature_file()) {
            let image_dims = raster_dims(&entry.image)?;
            let mask_dims = raster_dims(mask)?;
            if image_dims != mask_dims {
                return Err(Error::Data(format!(
                    "{} is {image_dims:?} but its mask {} is {mask_dims:?}",
                    entry.image.display(),
                    mask.display()
                )));
            }
        }
    }
    let pseudo_train = file
        .pseudo_train_from
        .iter()
        .flat_map(|name| splits[name].iter())
        .map(|e| ManifestEntry {
            mask: None,
            ..e.clone()
        })
        .collect();
    Ok(SplitManifest {
        splits,
        pseudo_train,
        pseudo_train_from: file.pseudo_train_from,
    })
}
