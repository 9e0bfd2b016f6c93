//! Frame, profile and trace files.
//!
//! Frames go out as 16-bit PGM with a JSON sidecar holding the linear count
//! scale and the frame metadata, as 8-bit PNG for display, or as raw float CSV.
//! Profiles and traces are two-column CSV.

use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faraday::FaradayTrace;
use crate::imaging::{Frame, FrameMeta, Geometry, Profile};

/// Maps PGM grey levels back to counts: counts = offset + level·scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgmSidecar {
    pub offset: f64,
    pub scale: f64,
    pub maxval: u16,
    pub geometry: Geometry,
    pub meta: FrameMeta,
}

fn range(counts: &[f64]) -> (f64, f64) {
    let lo = counts.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = counts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 0.0)
    }
}

/// Linear rescale of `counts` onto 0..=maxval.
fn levels(counts: &[f64], maxval: f64) -> (Vec<f64>, f64, f64) {
    let (lo, hi) = range(counts);
    let scale = if hi > lo { (hi - lo) / maxval } else { 1.0 };
    let lv = counts.iter().map(|c| ((c - lo) / scale).round().clamp(0.0, maxval)).collect();
    (lv, lo, scale)
}

/// Binary 16-bit PGM (big-endian samples) and its sidecar.
pub fn pgm_bytes(frame: &Frame) -> Result<(Vec<u8>, PgmSidecar)> {
    let g = &frame.geometry;
    let (lv, offset, scale) = levels(&frame.counts, f64::from(u16::MAX));
    if frame.counts.len() != g.width * g.height {
        return Err(Error::GeometryMismatch("pixel count does not match the geometry".into()));
    }
    // the image crate's PNM encoder has no 16-bit grey mode
    let mut out = format!("P5\n{} {}\n{}\n", g.width, g.height, u16::MAX).into_bytes();
    out.reserve(2 * lv.len());
    for v in lv {
        out.extend_from_slice(&(v as u16).to_be_bytes());
    }
    Ok((
        out,
        PgmSidecar {
            offset,
            scale,
            maxval: u16::MAX,
            geometry: *g,
            meta: frame.meta.clone(),
        },
    ))
}

/// Sidecar path next to a PGM file: `frame.pgm` → `frame.json`.
pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("json")
}

pub fn write_pgm(frame: &Frame, path: &Path) -> Result<PgmSidecar> {
    let (bytes, sidecar) = pgm_bytes(frame)?;
    std::fs::write(path, bytes)?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(sidecar)
}

/// Frame from a PGM and its sidecar; counts are quantized to the PGM levels.
pub fn read_pgm(path: &Path) -> Result<Frame> {
    let sidecar: PgmSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let img = image::load_from_memory_with_format(&std::fs::read(path)?, ImageFormat::Pnm)?.into_luma16();
    let g = sidecar.geometry;
    if img.width() as usize != g.width || img.height() as usize != g.height {
        return Err(Error::GeometryMismatch(format!(
            "{} is {}x{}, sidecar says {}x{}",
            path.display(),
            img.width(),
            img.height(),
            g.width,
            g.height
        )));
    }
    let counts = img.pixels().map(|p| sidecar.offset + f64::from(p.0[0]) * sidecar.scale).collect();
    Ok(Frame {
        geometry: g,
        counts,
        meta: sidecar.meta,
    })
}

/// 8-bit greyscale PNG, minimum black, maximum white.
pub fn png_bytes(frame: &Frame) -> Result<Vec<u8>> {
    let g = &frame.geometry;
    let (lv, _, _) = levels(&frame.counts, 255.0);
    let img: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(g.width as u32, g.height as u32, lv.iter().map(|&v| v as u8).collect())
        .ok_or_else(|| Error::GeometryMismatch("pixel count does not match the geometry".into()))?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Raw counts, one CSV line per row.
pub fn write_frame_csv(frame: &Frame, out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for r in 0..frame.geometry.height {
        w.write_record(frame.row(r).iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ProfileRow {
    x_meters: f64,
    counts: f64,
}

pub fn write_profile_csv(profile: &Profile, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (&x_meters, &counts) in profile.x.iter().zip(&profile.counts) {
        w.serialize(ProfileRow { x_meters, counts })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_profile_csv(input: impl Read) -> Result<Profile> {
    let mut x = Vec::new();
    let mut counts = Vec::new();
    for row in csv::Reader::from_reader(input).deserialize() {
        let row: ProfileRow = row?;
        x.push(row.x_meters);
        counts.push(row.counts);
    }
    if x.len() < 2 {
        return Err(Error::Input("profile needs at least two rows".into()));
    }
    Ok(Profile { x, counts })
}

#[derive(Serialize, Deserialize)]
struct TraceRow {
    t_seconds: f64,
    signal: f64,
}

pub fn write_trace_csv(trace: &FaradayTrace, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (&t_seconds, &signal) in trace.t.iter().zip(&trace.signal) {
        w.serialize(TraceRow { t_seconds, signal })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv(input: impl Read) -> Result<FaradayTrace> {
    let mut t = Vec::new();
    let mut signal = Vec::new();
    for row in csv::Reader::from_reader(input).deserialize() {
        let row: TraceRow = row?;
        t.push(row.t_seconds);
        signal.push(row.signal);
    }
    FaradayTrace::from_samples(t, signal)
}
