//! Binary and text file formats, written atomically.

use crate::detector::{DetectionEvent, RawPixelHit};
use crate::error::{Error, Result};
use crate::field::ComplexField;
use crate::image::Image;
use num_complex::Complex64;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("not a file path: {}", path.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = match dir {
        Some(d) => d.join(format!(".{name}.tmp{}", std::process::id())),
        None => format!(".{name}.tmp{}", std::process::id()).into(),
    };
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("{}: truncated at byte {}", self.what, self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        if self.take(4)? != m {
            return Err(Error::Format(format!(
                "{}: bad magic, expected {}",
                self.what,
                String::from_utf8_lossy(m)
            )));
        }
        Ok(())
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn grid_header(out: &mut Vec<u8>, magic: &[u8; 4], w: usize, h: usize, pitch: f64, lambda: f64) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&pitch.to_le_bytes());
    out.extend_from_slice(&lambda.to_le_bytes());
}

pub fn encode_fld1(field: &ComplexField) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 8 * field.values().len());
    grid_header(
        &mut out,
        b"FLD1",
        field.width(),
        field.height(),
        field.pitch_um(),
        field.wavelength_um(),
    );
    for v in field.values() {
        out.extend_from_slice(&(v.re as f32).to_le_bytes());
        out.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    out
}

pub fn decode_fld1(bytes: &[u8]) -> Result<ComplexField> {
    let mut r = Reader::new(bytes, "FLD1");
    r.magic(b"FLD1")?;
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let pitch = r.f64()?;
    let lambda = r.f64()?;
    let n = w
        .checked_mul(h)
        .ok_or_else(|| Error::Format("FLD1: dimensions overflow".into()))?;
    if bytes.len() != 28 + 8 * n {
        return Err(Error::Format(format!(
            "FLD1: expected {} bytes for {w}x{h}, found {}",
            28 + 8 * n,
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let re = r.f32()? as f64;
        let im = r.f32()? as f64;
        values.push(Complex64::new(re, im));
    }
    r.finish()?;
    ComplexField::new(w, h, pitch, lambda, values).map_err(|e| Error::Format(format!("FLD1: {e}")))
}

pub fn write_fld1(path: &Path, field: &ComplexField) -> Result<()> {
    write_atomic(path, &encode_fld1(field))
}

pub fn read_fld1(path: &Path) -> Result<ComplexField> {
    decode_fld1(&fs::read(path)?)
}

/// Depth map: FLD1-style header with magic DPT1, one f32 per pixel, NaN = masked.
pub fn encode_dpt1(depth: &Image, wavelength_um: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 4 * depth.data.len());
    grid_header(&mut out, b"DPT1", depth.width, depth.height, depth.pitch_um, wavelength_um);
    for v in &depth.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_dpt1(bytes: &[u8]) -> Result<(Image, f64)> {
    let mut r = Reader::new(bytes, "DPT1");
    r.magic(b"DPT1")?;
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let pitch = r.f64()?;
    let lambda = r.f64()?;
    if bytes.len() != 28 + 4 * w * h {
        return Err(Error::Format("DPT1: size does not match header".into()));
    }
    let mut data = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        data.push(r.f32()? as f64);
    }
    r.finish()?;
    Ok((Image::from_data(w, h, pitch, data)?, lambda))
}

const EVT1_RECORD: usize = 1 + 4 + 4 + 8 + 2;

fn time_to_u64(t_ns: f64) -> u64 {
    if t_ns <= 0.0 {
        0
    } else {
        t_ns.round() as u64
    }
}

pub fn encode_evt1(events: &[DetectionEvent]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + EVT1_RECORD * events.len());
    out.extend_from_slice(b"EVT1");
    out.extend_from_slice(&(events.len() as u32).to_le_bytes());
    for e in events {
        out.push(e.cam);
        out.extend_from_slice(&(e.x_px as f32).to_le_bytes());
        out.extend_from_slice(&(e.y_px as f32).to_le_bytes());
        out.extend_from_slice(&time_to_u64(e.t_ns).to_le_bytes());
        out.extend_from_slice(&e.cluster_size.to_le_bytes());
    }
    out
}

pub fn decode_evt1(bytes: &[u8]) -> Result<Vec<DetectionEvent>> {
    let mut r = Reader::new(bytes, "EVT1");
    r.magic(b"EVT1")?;
    let n = r.u32()? as usize;
    if bytes.len() != 8 + EVT1_RECORD * n {
        return Err(Error::Format(format!(
            "EVT1: header declares {n} records, file holds {} bytes",
            bytes.len()
        )));
    }
    let mut events = Vec::with_capacity(n);
    for _ in 0..n {
        events.push(DetectionEvent {
            cam: r.u8()?,
            x_px: r.f32()? as f64,
            y_px: r.f32()? as f64,
            t_ns: r.u64()? as f64,
            cluster_size: r.u16()?,
        });
    }
    r.finish()?;
    Ok(events)
}

pub fn write_evt1(path: &Path, events: &[DetectionEvent]) -> Result<()> {
    write_atomic(path, &encode_evt1(events))
}

pub fn read_evt1(path: &Path) -> Result<Vec<DetectionEvent>> {
    decode_evt1(&fs::read(path)?)
}

pub const EVT_CSV_HEADER: &str = "cam,x_px,y_px,t_ns,cluster_size";

pub fn encode_evt_csv(events: &[DetectionEvent]) -> String {
    let mut s = String::from(EVT_CSV_HEADER);
    s.push('\n');
    for e in events {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            e.cam,
            e.x_px as f32,
            e.y_px as f32,
            time_to_u64(e.t_ns),
            e.cluster_size
        ));
    }
    s
}

pub fn decode_evt_csv(text: &str) -> Result<Vec<DetectionEvent>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == EVT_CSV_HEADER => {}
        _ => return Err(Error::Format(format!("event CSV: header must be `{EVT_CSV_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Format(format!("event CSV: malformed line {}", i + 2));
        if cols.len() != 5 {
            return Err(bad());
        }
        out.push(DetectionEvent {
            cam: cols[0].parse().map_err(|_| bad())?,
            x_px: cols[1].parse::<f32>().map_err(|_| bad())? as f64,
            y_px: cols[2].parse::<f32>().map_err(|_| bad())? as f64,
            t_ns: cols[3].parse::<u64>().map_err(|_| bad())? as f64,
            cluster_size: cols[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Reads EVT1 or, for a `.csv` extension, the CSV alternative.
pub fn read_events(path: &Path) -> Result<Vec<DetectionEvent>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        decode_evt_csv(&fs::read_to_string(path)?)
    } else {
        read_evt1(path)
    }
}

const RAW1_RECORD: usize = 1 + 2 + 2 + 8 + 4;

pub fn encode_raw1(hits: &[(u8, RawPixelHit)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + RAW1_RECORD * hits.len());
    out.extend_from_slice(b"RAW1");
    out.extend_from_slice(&(hits.len() as u32).to_le_bytes());
    for (cam, h) in hits {
        out.push(*cam);
        out.extend_from_slice(&h.x.to_le_bytes());
        out.extend_from_slice(&h.y.to_le_bytes());
        out.extend_from_slice(&time_to_u64(h.t_ns).to_le_bytes());
        out.extend_from_slice(&h.amplitude.to_le_bytes());
    }
    out
}

pub fn decode_raw1(bytes: &[u8]) -> Result<Vec<(u8, RawPixelHit)>> {
    let mut r = Reader::new(bytes, "RAW1");
    r.magic(b"RAW1")?;
    let n = r.u32()? as usize;
    if bytes.len() != 8 + RAW1_RECORD * n {
        return Err(Error::Format("RAW1: size does not match header".into()));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let cam = r.u8()?;
        out.push((
            cam,
            RawPixelHit {
                x: r.u16()?,
                y: r.u16()?,
                t_ns: r.u64()? as f64,
                amplitude: r.f32()?,
            },
        ));
    }
    r.finish()?;
    Ok(out)
}

/// 8-bit binary PGM, linearly mapped from the image min..max.
pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let norm = image.normalized();
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(norm.data.iter().map(|&v| {
        if v.is_finite() {
            (v * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    write_atomic(path, &encode_pgm(image))
}

/// Binary PPM from per-pixel RGB triples.
pub fn encode_ppm(width: usize, height: usize, rgb: &[[u8; 3]]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for p in rgb {
        out.extend_from_slice(p);
    }
    out
}

/// Real image as a zero-imaginary FLD1 field.
pub fn write_image_fld1(path: &Path, image: &Image, wavelength_um: f64) -> Result<()> {
    write_fld1(path, &ComplexField::from_image(image, wavelength_um)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}
