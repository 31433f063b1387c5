//! Scene and label ingestion: the portable raster format, GeoTIFF reading,
//! dataset manifests, resizing, normalization and training-subset sampling.

mod geotiff;
mod ingest;
mod manifest;
mod preprocess;
mod raster;
mod subset;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use geotiff::GeoTransform;
pub use ingest::ingest_directory;
pub use manifest::{load_manifest, write_manifest, DatasetManifest, ManifestEntry, Split};
pub use preprocess::{compute_normalization, resize_pair, NormalizationStats};
pub use raster::{read_raster, write_raster, Raster, RASTER_MAGIC};
pub use subset::sample_training_subset;

pub const NUM_BANDS: usize = 6;
pub const MIN_SIDE: usize = 16;

/// Class id of water pixels in a [`LabelMask`].
pub const WATER: u8 = 0;
/// Class id of land pixels in a [`LabelMask`].
pub const LAND: u8 = 1;

/// Spectral bands in the fixed order every scene carries them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Band {
    Red,
    Green,
    Blue,
    Nir,
    Swir1,
    Swir2,
}

impl Band {
    pub const ORDER: [Band; NUM_BANDS] = [Band::Red, Band::Green, Band::Blue, Band::Nir, Band::Swir1, Band::Swir2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_visible(self) -> bool {
        matches!(self, Band::Red | Band::Green | Band::Blue)
    }
}

/// A 6-band reflectance raster, band-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MultispectralScene {
    pub scene_id: String,
    height: usize,
    width: usize,
    data: Vec<f32>,
    /// Ground sampling distance in meters per pixel. Informational only.
    pub resolution_m: f64,
    pub acquisition_date: Option<String>,
    pub geo: Option<GeoTransform>,
}

impl MultispectralScene {
    pub fn new(scene_id: impl Into<String>, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let scene_id = scene_id.into();
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::invalid(format!(
                "scene `{scene_id}` is {height}x{width}; both sides must be at least {MIN_SIDE}"
            )));
        }
        if data.len() != NUM_BANDS * height * width {
            return Err(Error::invalid(format!(
                "scene `{scene_id}`: expected {} values for (6,{height},{width}), got {}",
                NUM_BANDS * height * width,
                data.len()
            )));
        }
        let plane = height * width;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let band = pos / plane;
            let pixel = pos % plane;
            return Err(Error::invalid(format!(
                "scene `{scene_id}`: non-finite value {} in band {band} ({:?}) at pixel (row {}, col {})",
                data[pos],
                Band::ORDER[band],
                pixel / width,
                pixel % width
            )));
        }
        Ok(Self {
            scene_id,
            height,
            width,
            data,
            resolution_m: 10.0,
            acquisition_date: None,
            geo: None,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(bands, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (NUM_BANDS, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn band(&self, band: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[band * plane..(band + 1) * plane]
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        self.data[(band * self.height + row) * self.width + col]
    }

    /// Replace the pixel data keeping metadata. The new data must have the
    /// same shape and be finite.
    pub fn with_data(&self, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let mut out = Self::new(self.scene_id.clone(), height, width, data)?;
        out.resolution_m = self.resolution_m;
        out.acquisition_date = self.acquisition_date.clone();
        out.geo = self.geo.clone();
        Ok(out)
    }
}

/// Per-pixel land/water ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub scene_id: String,
    height: usize,
    width: usize,
    classes: Vec<u8>,
}

impl LabelMask {
    pub fn new(scene_id: impl Into<String>, height: usize, width: usize, classes: Vec<u8>) -> Result<Self> {
        let scene_id = scene_id.into();
        if classes.len() != height * width {
            return Err(Error::invalid(format!(
                "mask `{scene_id}`: expected {} values for ({height},{width}), got {}",
                height * width,
                classes.len()
            )));
        }
        if let Some(pos) = classes.iter().position(|&v| v > LAND) {
            return Err(Error::invalid(format!(
                "mask `{scene_id}`: class {} at pixel {pos} is not 0 (water) or 1 (land)",
                classes[pos]
            )));
        }
        Ok(Self {
            scene_id,
            height,
            width,
            classes,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.width + col]
    }

    pub fn land_pixels(&self) -> usize {
        self.classes.iter().filter(|&&c| c == LAND).count()
    }

    pub fn land_fraction(&self) -> f64 {
        self.land_pixels() as f64 / self.classes.len() as f64
    }

    /// Land and water swapped.
    pub fn complement(&self) -> Self {
        Self {
            scene_id: self.scene_id.clone(),
            height: self.height,
            width: self.width,
            classes: self.classes.iter().map(|&c| LAND - c).collect(),
        }
    }
}

/// A scene with its aligned ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub scene: MultispectralScene,
    pub mask: LabelMask,
}

impl Sample {
    pub fn new(scene: MultispectralScene, mask: LabelMask) -> Result<Self> {
        if (scene.height(), scene.width()) != (mask.height(), mask.width()) {
            return Err(Error::invalid(format!(
                "mask for `{}` is {}x{} but the scene is {}x{}",
                scene.scene_id,
                mask.height(),
                mask.width(),
                scene.height(),
                scene.width()
            )));
        }
        Ok(Self { scene, mask })
    }

    pub fn id(&self) -> &str {
        &self.scene.scene_id
    }
}

fn sniff(path: &Path) -> Result<[u8; 4]> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| Error::format(path, "file too short to identify"))?;
    Ok(magic)
}

fn is_tiff(magic: &[u8; 4]) -> bool {
    matches!(magic, [b'I', b'I', 42 | 43, 0] | [b'M', b'M', 0, 42 | 43])
}

/// Load a 6-band scene from the portable raster format or a GeoTIFF.
pub fn load_scene(path: &Path, scene_id: &str) -> Result<MultispectralScene> {
    let magic = sniff(path)?;
    if &magic == RASTER_MAGIC {
        let raster = read_raster(path)?;
        if raster.channels != NUM_BANDS {
            return Err(Error::format(
                path,
                format!("expected 6 bands, got {}", raster.channels),
            ));
        }
        MultispectralScene::new(scene_id, raster.height, raster.width, raster.data)
            .map_err(|e| Error::format(path, e.to_string()))
    } else if is_tiff(&magic) {
        geotiff::read_scene(path, scene_id)
    } else {
        Err(Error::format(
            path,
            "unrecognized raster format (expected MSR1 or TIFF)",
        ))
    }
}

/// Load a single-channel label mask; values must be exactly 0 or 1.
pub fn load_mask(path: &Path, scene_id: &str) -> Result<LabelMask> {
    let magic = sniff(path)?;
    let raster = if &magic == RASTER_MAGIC {
        read_raster(path)?
    } else if is_tiff(&magic) {
        geotiff::read_single_band(path)?
    } else {
        return Err(Error::format(
            path,
            "unrecognized raster format (expected MSR1 or TIFF)",
        ));
    };
    if raster.channels != 1 {
        return Err(Error::format(
            path,
            format!("mask must have 1 channel, got {}", raster.channels),
        ));
    }
    let mut classes = Vec::with_capacity(raster.data.len());
    for (i, &v) in raster.data.iter().enumerate() {
        match v {
            0.0 => classes.push(WATER),
            1.0 => classes.push(LAND),
            other => {
                return Err(Error::format(
                    path,
                    format!(
                        "mask value {other} at pixel (row {}, col {}) is not 0 or 1",
                        i / raster.width,
                        i % raster.width
                    ),
                ))
            }
        }
    }
    LabelMask::new(scene_id, raster.height, raster.width, classes)
}

pub fn save_scene(path: &Path, scene: &MultispectralScene) -> Result<()> {
    write_raster(
        path,
        &Raster {
            channels: NUM_BANDS,
            height: scene.height(),
            width: scene.width(),
            data: scene.data().to_vec(),
        },
    )
}

pub fn save_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    write_raster(
        path,
        &Raster {
            channels: 1,
            height: mask.height(),
            width: mask.width(),
            data: mask.classes().iter().map(|&c| c as f32).collect(),
        },
    )
}

/// Load the scene/mask pair of one manifest entry.
pub fn load_entry(entry: &ManifestEntry) -> Result<Sample> {
    let scene = load_scene(&entry.scene_path, &entry.scene_id)?;
    let mask = load_mask(&entry.mask_path, &entry.scene_id)?;
    Sample::new(scene, mask)
}

/// Load every entry of one split, in manifest order. Entries load in parallel.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<Sample>> {
    manifest
        .entries
        .iter()
        .filter(|e| e.split == split)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|e| load_entry(e))
        .collect()
}
