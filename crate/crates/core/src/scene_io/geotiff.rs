//! GeoTIFF ingestion. Bands are mapped by sample index onto the fixed
//! Red, Green, Blue, NIR, SWIR1, SWIR2 order; both chunky and planar
//! layouts are accepted.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::tags::Tag;

use super::{MultispectralScene, Raster, NUM_BANDS};
use crate::error::{Error, Result};

/// Affine pixel-to-map transform recovered from the GeoTIFF model tags.
/// Map coordinates of pixel `(row, col)` are
/// `(origin_x + col * pixel_width, origin_y + row * pixel_height)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_width: f64,
    pub pixel_height: f64,
}

impl GeoTransform {
    pub fn apply(&self, row: f64, col: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.pixel_width,
            self.origin_y + row * self.pixel_height,
        )
    }
}

fn tiff_err(path: &Path, e: tiff::TiffError) -> Error {
    Error::format(path, format!("TIFF decode failed: {e}"))
}

fn to_f32(result: DecodingResult) -> Vec<f32> {
    match result {
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::F16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
    }
}

fn read_geo(decoder: &mut Decoder<BufReader<File>>) -> Option<GeoTransform> {
    let scale = decoder
        .find_tag(Tag::ModelPixelScaleTag)
        .ok()
        .flatten()?
        .into_f64_vec()
        .ok()?;
    let tie = decoder
        .find_tag(Tag::ModelTiepointTag)
        .ok()
        .flatten()?
        .into_f64_vec()
        .ok()?;
    if scale.len() < 2 || tie.len() < 6 {
        return None;
    }
    let (i, j, x, y) = (tie[0], tie[1], tie[3], tie[4]);
    Some(GeoTransform {
        origin_x: x - i * scale[0],
        origin_y: y + j * scale[1],
        pixel_width: scale[0],
        pixel_height: -scale[1],
    })
}

/// Decode the first image of a TIFF into band-major order.
fn read_planes(path: &Path) -> Result<(Raster, Option<GeoTransform>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = Decoder::new(BufReader::new(file))
        .map_err(|e| tiff_err(path, e))?
        .with_limits(Limits::unlimited());
    let (width, height) = decoder.dimensions().map_err(|e| tiff_err(path, e))?;
    let (width, height) = (width as usize, height as usize);
    let samples = decoder
        .find_tag_unsigned::<u16>(Tag::SamplesPerPixel)
        .map_err(|e| tiff_err(path, e))?
        .unwrap_or(1) as usize;
    let planar = decoder
        .find_tag_unsigned::<u16>(Tag::PlanarConfiguration)
        .map_err(|e| tiff_err(path, e))?
        .unwrap_or(1)
        == 2;
    let geo = read_geo(&mut decoder);

    let mut buf = DecodingResult::F32(vec![]);
    decoder.read_image_to_buffer(&mut buf).map_err(|e| tiff_err(path, e))?;
    let values = to_f32(buf);
    let plane = height * width;
    if values.len() < samples * plane {
        return Err(Error::format(
            path,
            format!(
                "decoded {} values, expected {} for {samples} bands of {height}x{width}",
                values.len(),
                samples * plane
            ),
        ));
    }
    let data = if planar || samples == 1 {
        values[..samples * plane].to_vec()
    } else {
        let mut out = vec![0.0f32; samples * plane];
        for (p, px) in values.chunks_exact(samples).take(plane).enumerate() {
            for (b, &v) in px.iter().enumerate() {
                out[b * plane + p] = v;
            }
        }
        out
    };
    Ok((
        Raster {
            channels: samples,
            height,
            width,
            data,
        },
        geo,
    ))
}

pub(super) fn read_scene(path: &Path, scene_id: &str) -> Result<MultispectralScene> {
    let (raster, geo) = read_planes(path)?;
    if raster.channels != NUM_BANDS {
        return Err(Error::format(
            path,
            format!("expected 6 bands, got {}", raster.channels),
        ));
    }
    let mut scene = MultispectralScene::new(scene_id, raster.height, raster.width, raster.data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if let Some(g) = &geo {
        scene.resolution_m = g.pixel_width.abs();
    }
    scene.geo = geo;
    Ok(scene)
}

pub(super) fn read_single_band(path: &Path) -> Result<Raster> {
    read_planes(path).map(|(r, _)| r)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use tiff::encoder::colortype::ColorType;
    use tiff::encoder::TiffEncoder;
    use tiff::tags::{PhotometricInterpretation, SampleFormat};

    pub struct SixBandF32;

    impl ColorType for SixBandF32 {
        type Inner = f32;
        const TIFF_VALUE: PhotometricInterpretation = PhotometricInterpretation::BlackIsZero;
        const BITS_PER_SAMPLE: &'static [u16] = &[32; 6];
        const SAMPLE_FORMAT: &'static [SampleFormat] = &[SampleFormat::IEEEFP; 6];

        fn horizontal_predict(_: &[f32], _: &mut Vec<f32>) {
            unreachable!()
        }
    }

    pub struct FourBandU16;

    impl ColorType for FourBandU16 {
        type Inner = u16;
        const TIFF_VALUE: PhotometricInterpretation = PhotometricInterpretation::BlackIsZero;
        const BITS_PER_SAMPLE: &'static [u16] = &[16; 4];
        const SAMPLE_FORMAT: &'static [SampleFormat] = &[SampleFormat::Uint; 4];

        fn horizontal_predict(_: &[u16], _: &mut Vec<u16>) {
            unreachable!()
        }
    }

    /// Writes a chunky 6-band float GeoTIFF with a north-up transform.
    pub fn write_six_band(path: &Path, h: usize, w: usize, interleaved: &[f32]) {
        let file = File::create(path).unwrap();
        let mut enc = TiffEncoder::new(file).unwrap();
        let mut img = enc.new_image::<SixBandF32>(w as u32, h as u32).unwrap();
        img.encoder()
            .write_tag(Tag::ModelPixelScaleTag, &[10.0f64, 10.0, 0.0][..])
            .unwrap();
        img.encoder()
            .write_tag(
                Tag::ModelTiepointTag,
                &[0.0f64, 0.0, 0.0, 500_000.0, 1_000_000.0, 0.0][..],
            )
            .unwrap();
        img.write_data(interleaved).unwrap();
    }

    #[test]
    fn reads_chunky_six_band_with_geo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.tif");
        let (h, w) = (16, 20);
        let mut inter = vec![0.0f32; h * w * 6];
        for p in 0..h * w {
            for b in 0..6 {
                inter[p * 6 + b] = b as f32 + p as f32 * 1e-3;
            }
        }
        write_six_band(&path, h, w, &inter);
        let scene = super::super::load_scene(&path, "t").unwrap();
        assert_eq!(scene.shape(), (6, h, w));
        assert_eq!(scene.get(3, 0, 5), 3.0 + 5e-3);
        assert_eq!(scene.get(5, 2, 1), 5.0 + (2 * w + 1) as f32 * 1e-3);
        let g = scene.geo.clone().unwrap();
        assert_eq!(g.apply(1.0, 2.0), (500_020.0, 999_990.0));
        assert_eq!(scene.resolution_m, 10.0);
    }

    #[test]
    fn four_band_tiff_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s4.tif");
        let file = File::create(&path).unwrap();
        let mut enc = TiffEncoder::new(file).unwrap();
        enc.write_image::<FourBandU16>(16, 16, &vec![7u16; 16 * 16 * 4])
            .unwrap();
        let err = super::super::load_scene(&path, "t").unwrap_err().to_string();
        assert!(err.contains("expected 6 bands, got 4"), "{err}");
    }
}
