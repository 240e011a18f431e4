//! Object-level feature records and the OMF1 on-disk layout.
//!
//! One file per video. All integers and floats are little-endian:
//!
//! ```text
//! header  "OMF1" | version u32 | d_app u32 | d_mo u32 | frame_count u32
//!         | frame_width u32 | frame_height u32 | record_count u64
//! record  frame_index u32 | object_id u32 | bbox 4 x f32
//!         | x_app d_app x f32 | x_mag d_mo x f32 | x_ang d_mo x f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OMF1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 4 + 4 * 6 + 8;

/// Axis-aligned box in pixels, top-left corner plus extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(x: f32, y: f32, w: f32, h: f32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w as f64 * self.h as f64
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let x0 = (self.x as f64).max(other.x as f64);
        let y0 = (self.y as f64).max(other.y as f64);
        let x1 = (self.x as f64 + self.w as f64).min(other.x as f64 + other.w as f64);
        let y1 = (self.y as f64 + self.h as f64).min(other.y as f64 + other.h as f64);
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }
}

/// One detected object in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub frame_index: u32,
    pub object_id: u32,
    pub bbox: BBox,
    pub x_app: Vec<f32>,
    /// Flattened motion magnitude map.
    pub x_mag: Vec<f32>,
    /// Flattened motion angle map, angle / 2pi.
    pub x_ang: Vec<f32>,
}

impl FeatureRecord {
    pub fn validate(&self, d_app: usize, d_mo: usize) -> Result<()> {
        let at = || format!("frame {} object {}", self.frame_index, self.object_id);
        if !self.bbox.is_valid() {
            return Err(Error::Validation(format!("{}: bbox must be finite with w, h > 0", at())));
        }
        if self.x_app.len() != d_app {
            return Err(Error::dim(format!("x_app ({})", at()), d_app, self.x_app.len()));
        }
        if self.x_mag.len() != d_mo {
            return Err(Error::dim(format!("x_mag ({})", at()), d_mo, self.x_mag.len()));
        }
        if self.x_ang.len() != d_mo {
            return Err(Error::dim(format!("x_ang ({})", at()), d_mo, self.x_ang.len()));
        }
        let all = self.x_app.iter().chain(&self.x_mag).chain(&self.x_ang);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("{}: non-finite feature value", at())));
        }
        if self.x_ang.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::Validation(format!("{}: angle entry outside [0, 1]", at())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatureSet {
    pub video_id: String,
    pub frame_count: u32,
    pub frame_width: u32,
    pub frame_height: u32,
    pub d_app: usize,
    pub d_mo: usize,
    pub records: Vec<FeatureRecord>,
}

impl VideoFeatureSet {
    pub fn empty(video_id: impl Into<String>, d_app: usize, d_mo: usize) -> Self {
        Self {
            video_id: video_id.into(),
            frame_count: 1,
            frame_width: 1,
            frame_height: 1,
            d_app,
            d_mo,
            records: Vec::new(),
        }
    }

    pub fn record_size(d_app: usize, d_mo: usize) -> u64 {
        4 + 4 + 16 + 4 * (d_app + 2 * d_mo) as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_count == 0 || self.frame_width == 0 || self.frame_height == 0 {
            return Err(Error::Validation(format!(
                "{}: frame count and frame size must be positive",
                self.video_id
            )));
        }
        if self.d_app == 0 || self.d_mo == 0 {
            return Err(Error::Validation(format!("{}: feature dimensions must be positive", self.video_id)));
        }
        let mut prev: Option<(u32, u32)> = None;
        for rec in &self.records {
            if rec.frame_index >= self.frame_count {
                return Err(Error::Validation(format!(
                    "{}: frame index {} out of range (frame_count {})",
                    self.video_id, rec.frame_index, self.frame_count
                )));
            }
            rec.validate(self.d_app, self.d_mo)?;
            let key = (rec.frame_index, rec.object_id);
            if let Some(p) = prev {
                if key <= p {
                    return Err(Error::Validation(format!(
                        "{}: records not strictly sorted by (frame, object) at {:?}",
                        self.video_id, key
                    )));
                }
            }
            prev = Some(key);
        }
        Ok(())
    }

    /// Record indices grouped per frame; `frames()[t]` lists the records in frame `t`.
    pub fn frames(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.frame_count as usize];
        for (i, r) in self.records.iter().enumerate() {
            out[r.frame_index as usize].push(i);
        }
        out
    }
}

pub fn write_features(set: &VideoFeatureSet, path: &Path) -> Result<()> {
    set.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode(set, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn encode<W: Write>(set: &VideoFeatureSet, w: &mut W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(set.d_app as u32)?;
    w.write_u32::<LittleEndian>(set.d_mo as u32)?;
    w.write_u32::<LittleEndian>(set.frame_count)?;
    w.write_u32::<LittleEndian>(set.frame_width)?;
    w.write_u32::<LittleEndian>(set.frame_height)?;
    w.write_u64::<LittleEndian>(set.records.len() as u64)?;
    for r in &set.records {
        w.write_u32::<LittleEndian>(r.frame_index)?;
        w.write_u32::<LittleEndian>(r.object_id)?;
        for v in [r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h] {
            w.write_f32::<LittleEndian>(v)?;
        }
        for v in r.x_app.iter().chain(&r.x_mag).chain(&r.x_ang) {
            w.write_f32::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

/// Reads an OMF1 file. The video id is taken from the file stem.
pub fn read_features(path: &Path) -> Result<VideoFeatureSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut r = BufReader::new(file);
    let set = decode(&mut r, len, video_id).map_err(|e| match e {
        Error::Corruption(m) => Error::Corruption(format!("{}: {m}", path.display())),
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok(set)
}

fn decode<R: Read>(r: &mut R, file_len: u64, video_id: String) -> Result<VideoFeatureSet> {
    let truncated = |what: &str| Error::Corruption(format!("truncated while reading {what}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("file shorter than magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let mut hdr = [0u32; 6];
    for v in hdr.iter_mut() {
        *v = r.read_u32::<LittleEndian>().map_err(|_| truncated("header"))?;
    }
    let [version, d_app, d_mo, frame_count, frame_width, frame_height] = hdr;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let record_count = r.read_u64::<LittleEndian>().map_err(|_| truncated("header"))?;
    let (d_app, d_mo) = (d_app as usize, d_mo as usize);
    let rec_size = VideoFeatureSet::record_size(d_app, d_mo);
    let expected = record_count
        .checked_mul(rec_size)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Corruption("record count overflows".into()))?;
    if expected != file_len {
        return Err(Error::Corruption(format!(
            "header declares {record_count} records of {rec_size} bytes ({expected} bytes total) but file has {file_len} bytes"
        )));
    }

    let mut records = Vec::with_capacity(record_count as usize);
    let read_vec = |r: &mut R, n: usize| -> Result<Vec<f32>> {
        let mut v = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut v).map_err(|_| truncated("record"))?;
        Ok(v)
    };
    for _ in 0..record_count {
        let frame_index = r.read_u32::<LittleEndian>().map_err(|_| truncated("record"))?;
        let object_id = r.read_u32::<LittleEndian>().map_err(|_| truncated("record"))?;
        let b = read_vec(r, 4)?;
        records.push(FeatureRecord {
            frame_index,
            object_id,
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
            x_app: read_vec(r, d_app)?,
            x_mag: read_vec(r, d_mo)?,
            x_ang: read_vec(r, d_mo)?,
        });
    }
    records.sort_by_key(|r| (r.frame_index, r.object_id));
    let set = VideoFeatureSet {
        video_id,
        frame_count,
        frame_width,
        frame_height,
        d_app,
        d_mo,
        records,
    };
    set.validate()?;
    Ok(set)
}

/// Reads a plain-text manifest: one feature-file path per line, relative to the
/// manifest's directory. Blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect())
}

pub fn write_manifest(path: &Path, entries: &[PathBuf]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&e.to_string_lossy());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Vec<VideoFeatureSet>> {
    read_manifest(path)?.iter().map(|p| read_features(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(frame: u32, obj: u32, d_app: usize, d_mo: usize) -> FeatureRecord {
        FeatureRecord {
            frame_index: frame,
            object_id: obj,
            bbox: BBox::new(1.0, 2.0, 3.0, 4.0),
            x_app: (0..d_app).map(|i| i as f32 * 0.5 - 1.0).collect(),
            x_mag: (0..d_mo).map(|i| i as f32).collect(),
            x_ang: (0..d_mo).map(|i| i as f32 / d_mo as f32).collect(),
        }
    }

    #[test]
    fn empty_set_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.omf");
        let set = VideoFeatureSet::empty("v", 4, 4);
        write_features(&set, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), HEADER_LEN);
        assert_eq!(read_features(&path).unwrap(), set);
    }

    #[test]
    fn single_record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.omf");
        let mut set = VideoFeatureSet::empty("v", 4, 4);
        set.records.push(record(0, 0, 4, 4));
        write_features(&set, &path).unwrap();
        assert_eq!(
            std::fs::metadata(&path).unwrap().len(),
            HEADER_LEN + VideoFeatureSet::record_size(4, 4)
        );
        assert_eq!(read_features(&path).unwrap(), set);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.omf");
        write_features(&VideoFeatureSet::empty("v", 4, 4), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_features(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_record_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.omf");
        let mut set = VideoFeatureSet::empty("v", 4, 4);
        set.frame_count = 3;
        set.records = vec![record(0, 0, 4, 4), record(1, 0, 4, 4)];
        write_features(&set, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_features(&path), Err(Error::Corruption(_))));
    }

    #[test]
    fn non_finite_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.omf");
        let mut set = VideoFeatureSet::empty("v", 4, 4);
        set.records.push(record(0, 0, 4, 4));
        write_features(&set, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let off = HEADER_LEN as usize + 24;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_features(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn writer_rejects_invalid_sets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.omf");
        let mut set = VideoFeatureSet::empty("v", 4, 4);
        let mut r = record(0, 0, 4, 4);
        r.x_ang[0] = 1.5;
        set.records.push(r);
        assert!(write_features(&set, &path).is_err());
        assert!(!path.exists());

        let mut set = VideoFeatureSet::empty("v", 4, 4);
        set.records.push(record(3, 0, 4, 4));
        assert!(matches!(write_features(&set, &path), Err(Error::Validation(_))));

        let mut set = VideoFeatureSet::empty("v", 4, 4);
        set.records.push(record(0, 0, 5, 4));
        assert!(matches!(write_features(&set, &path), Err(Error::Dimension { .. })));
    }

    #[test]
    fn box_overlap() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 5.0, 10.0, 10.0);
        assert_eq!(a.intersection(&b), 25.0);
        assert!((a.iou(&b) - 25.0 / 175.0).abs() < 1e-12);
        assert_eq!(a.intersection(&BBox::new(20.0, 0.0, 1.0, 1.0)), 0.0);
    }
}
