//! Image and plane file formats.
//!
//! Images: 8-bit binary PGM (`P5`) and PPM (`P6`), mapped to `[0, 1]`.
//! Planes: `<stem>.raw` holds little-endian `f32` planes back to back, and
//! `<stem>.json` describes them as `{height, width, layout, center}` where
//! `layout` is the comma-joined plane names in file order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spectral::{wrap_phase, ImagePlane, Spectrum};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSidecar {
    pub height: usize,
    pub width: usize,
    pub layout: String,
    pub center: String,
}

/// Reads a binary PGM (one channel) or PPM (three channels).
pub fn read_pnm<T: Scalar>(path: &Path) -> Result<Vec<ImagePlane<T>>> {
    parse_pnm(&fs::read(path)?)
}

pub fn parse_pnm<T: Scalar>(bytes: &[u8]) -> Result<Vec<ImagePlane<T>>> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported magic `{other}`, want P5 or P6"))),
    };
    let width = parse_usize(&next_token(bytes, &mut pos)?)?;
    let height = parse_usize(&next_token(bytes, &mut pos)?)?;
    let maxval = parse_usize(&next_token(bytes, &mut pos)?)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("maxval {maxval} is not 8-bit")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Format(format!("raster truncated: need {need} bytes")))?;
    let scale = T::one() / T::from_usize_lossy(maxval);
    (0..channels)
        .map(|c| {
            let data = (0..width * height)
                .map(|i| T::from_usize_lossy(raster[i * channels + c] as usize) * scale)
                .collect();
            ImagePlane::new(height, width, data)
        })
        .collect()
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Format("header truncated".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad header field `{s}`")))
}

/// Encodes `round(255 * v) + offset`, clamped to a byte.
pub fn encode_pgm<T: Scalar>(plane: &ImagePlane<T>, offset: i32) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", plane.width(), plane.height()).into_bytes();
    out.extend(plane.data().iter().map(|&v| {
        let q = (v.to_f64_lossy() * 255.0).round() as i64 + offset as i64;
        q.clamp(0, 255) as u8
    }));
    out
}

pub fn write_pgm<T: Scalar>(path: &Path, plane: &ImagePlane<T>, offset: i32) -> Result<()> {
    fs::write(path, encode_pgm(plane, offset))?;
    Ok(())
}

/// Writes named planes of `height * width` values each.
pub fn write_planes<T: Scalar>(
    stem: &Path,
    height: usize,
    width: usize,
    names: &[&str],
    planes: &[&[T]],
) -> Result<()> {
    if names.len() != planes.len() {
        return Err(Error::Shape {
            op: "write_planes",
            lhs: vec![names.len()],
            rhs: vec![planes.len()],
        });
    }
    let mut bytes = Vec::with_capacity(4 * height * width * planes.len());
    for p in planes {
        if p.len() != height * width {
            return Err(Error::Shape {
                op: "write_planes",
                lhs: vec![height, width],
                rhs: vec![p.len()],
            });
        }
        for &v in p.iter() {
            bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    let sidecar = PlaneSidecar {
        height,
        width,
        layout: names.join(","),
        center: "shifted".into(),
    };
    fs::write(stem.with_extension("raw"), bytes)?;
    fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_planes(stem: &Path) -> Result<(PlaneSidecar, Vec<Vec<f32>>)> {
    let sidecar: PlaneSidecar = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
    let bytes = fs::read(stem.with_extension("raw"))?;
    let n = sidecar.height * sidecar.width;
    let count = sidecar.layout.split(',').count();
    if bytes.len() != 4 * n * count {
        return Err(Error::Format(format!(
            "expected {} bytes for {count} planes, found {}",
            4 * n * count,
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    Ok((sidecar, values.chunks(n).map(<[f32]>::to_vec).collect()))
}

pub fn write_spectrum<T: Scalar>(stem: &Path, spec: &Spectrum<T>) -> Result<()> {
    write_planes(
        stem,
        spec.height(),
        spec.width(),
        &["amplitude", "phase"],
        &[spec.amplitude(), spec.phase()],
    )
}

pub fn read_spectrum<T: Scalar>(stem: &Path) -> Result<Spectrum<T>> {
    let (meta, planes) = read_planes(stem)?;
    if meta.layout != "amplitude,phase" {
        return Err(Error::Format(format!("layout `{}` is not a spectrum", meta.layout)));
    }
    let cast = |p: &[f32]| p.iter().map(|&v| T::lit(v as f64)).collect();
    // Single precision can round a phase of pi just past it.
    let phase = planes[1]
        .iter()
        .map(|&v| wrap_phase(T::lit(v as f64).min(T::PI()).max(-T::PI())))
        .collect();
    Spectrum::new(meta.height, meta.width, cast(&planes[0]), phase)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::fft2d;

    #[test]
    fn pgm_round_trip() {
        let img = ImagePlane::from_fn(3, 5, |r, c| ((r * 5 + c) * 17 % 256) as f64 / 255.0);
        let bytes = encode_pgm(&img, 0);
        let back: Vec<ImagePlane<f64>> = parse_pnm(&bytes).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0], img);
    }

    #[test]
    fn ppm_with_comments() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 51, 0, 255, 102]);
        let planes: Vec<ImagePlane<f64>> = parse_pnm(&bytes).unwrap();
        assert_eq!(planes.len(), 3);
        assert_eq!(planes[0].data(), &[1.0, 0.0]);
        assert_eq!(planes[2].data(), &[0.2, 0.4]);
        assert!(parse_pnm::<f64>(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(parse_pnm::<f64>(b"P5\n4 4\n255\n\x00").is_err());
        assert!(parse_pnm::<f64>(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn spectrum_round_trip() {
        let img = ImagePlane::from_fn(4, 6, |r, c| (r as f64 * 0.3 - c as f64 * 0.1).sin());
        let spec = fft2d(&img).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("spec");
        write_spectrum(&stem, &spec).unwrap();
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(stem.with_extension("json")).unwrap()).unwrap();
        assert_eq!(meta["layout"], "amplitude,phase");
        assert_eq!(meta["center"], "shifted");
        let back: Spectrum<f64> = read_spectrum(&stem).unwrap();
        for (a, b) in back.amplitude().iter().zip(spec.amplitude()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
