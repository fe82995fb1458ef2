//! 8-bit images with any number of bands. The first one or three bands go in a
//! PGM/PPM file, further bands in `stem.band{i}.pgm` sidecars next to it.

use std::path::{Path, PathBuf};

use super::{default_band_names, read_raster, write_raster, AnyRaster, ImageFormat, MultibandRaster};
use crate::{Error, Result};

pub fn sidecar_path(path: &Path, band: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.band{band}.pgm"))
}

pub fn write_image(image: &MultibandRaster<u8>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = image.band_count();
    let head = if n >= 3 { 3 } else { 1 };
    let format = if head == 3 { ImageFormat::Ppm } else { ImageFormat::Pgm };
    match ImageFormat::from_path(path) {
        Some(f) if f == format => {}
        _ => {
            return Err(Error::argument(format!(
                "{} bands must be written to a .{} file",
                n,
                if head == 3 { "ppm" } else { "pgm" }
            )))
        }
    }
    let first = MultibandRaster::from_bands(image.bands()[..head].to_vec())?;
    write_raster(&AnyRaster::U8(first), path, format)?;
    for i in head..n {
        let band = MultibandRaster::single(image.band(i).clone());
        write_raster(&AnyRaster::U8(band), sidecar_path(path, i), ImageFormat::Pgm)?;
    }
    Ok(())
}

/// Reads a PGM/PPM plus any consecutive sidecar bands. Band names follow the
/// total band count (e.g. four bands are R, G, B, NIR).
pub fn read_image(path: impl AsRef<Path>) -> Result<MultibandRaster<u8>> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path)
        .filter(|f| *f != ImageFormat::Pfm)
        .ok_or_else(|| Error::argument(format!("{} is not a .pgm or .ppm file", path.display())))?;
    let mut bands = read_raster(path, format)?.into_u8()?.into_bands();
    loop {
        let side = sidecar_path(path, bands.len());
        if !side.exists() {
            break;
        }
        let extra = read_raster(&side, ImageFormat::Pgm)?.into_u8()?.into_bands();
        bands.extend(extra);
    }
    let names = default_band_names(bands.len());
    MultibandRaster::new(bands, names)
}
