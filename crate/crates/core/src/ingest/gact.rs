//! GACT activation-dump format.
//!
//! All integers and floats are little-endian, with no padding:
//!
//! ```text
//! magic        "GACT"
//! version      u16 (= 1)
//! flags        u16 (bit 0: values stored as f64 instead of f32)
//! num_classes  u32
//! num_layers   u32
//! per layer    channels u32, pixels u32
//! record_count u64
//! records      predicted_class u32, then each layer's channels*pixels
//!              values, channel-major
//! ```

use std::fs::File;
use std::io::{self, BufReader, ErrorKind, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{FormatError, OodError, Result};
use crate::fsutil::write_atomic;
use crate::gram::FeatureMap;

use super::ActivationRecord;

pub const MAGIC: [u8; 4] = *b"GACT";
pub const VERSION: u16 = 1;
const FLAG_F64: u16 = 1;
const KNOWN_FLAGS: u16 = FLAG_F64;

/// Static shape information shared by every record of a file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GactLayout {
    pub num_classes: usize,
    /// `(channels, pixels)` per layer.
    pub layer_shapes: Vec<(usize, usize)>,
    pub f64_values: bool,
}

impl GactLayout {
    pub fn new(num_classes: usize, layer_shapes: Vec<(usize, usize)>) -> Self {
        Self {
            num_classes,
            layer_shapes,
            f64_values: false,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layer_shapes.len()
    }

    fn value_width(&self) -> usize {
        if self.f64_values {
            8
        } else {
            4
        }
    }

    pub fn record_bytes(&self) -> usize {
        4 + self
            .layer_shapes
            .iter()
            .map(|&(c, p)| c * p * self.value_width())
            .sum::<usize>()
    }

    pub fn header_bytes(&self) -> usize {
        4 + 2 + 2 + 4 + 4 + 8 * self.layer_shapes.len() + 8
    }

    fn count_offset(&self) -> u64 {
        (self.header_bytes() - 8) as u64
    }

    fn validate(&self) -> Result<(), FormatError> {
        if self.num_classes == 0 {
            return Err(FormatError::CorruptHeader("zero classes".into()));
        }
        if self.layer_shapes.is_empty() {
            return Err(FormatError::CorruptHeader("zero layers".into()));
        }
        if let Some(l) = self.layer_shapes.iter().position(|&(c, p)| c == 0 || p == 0) {
            return Err(FormatError::CorruptHeader(format!("layer {l} has an empty shape")));
        }
        Ok(())
    }

    /// Checks that a record fits this layout.
    pub fn check_record(&self, record: &ActivationRecord) -> Result<()> {
        if record.predicted_class >= self.num_classes {
            return Err(OodError::ClassOutOfRange {
                class: record.predicted_class,
                num_classes: self.num_classes,
            });
        }
        if record.layers.len() != self.layer_shapes.len() {
            return Err(OodError::ShapeMismatch(format!(
                "record has {} layers, layout has {}",
                record.layers.len(),
                self.layer_shapes.len()
            )));
        }
        for (l, (fm, &(c, p))) in record.layers.iter().zip(&self.layer_shapes).enumerate() {
            if fm.channels() != c || fm.pixels() != p {
                return Err(OodError::ShapeMismatch(format!(
                    "layer {l}: record is {}x{}, layout is {c}x{p}",
                    fm.channels(),
                    fm.pixels()
                )));
            }
        }
        Ok(())
    }
}

/// Parsed file header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GactHeader {
    pub layout: GactLayout,
    pub record_count: u64,
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], context: &str) -> Result<(), OodError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => FormatError::Truncated {
            context: context.to_string(),
        }
        .into(),
        _ => OodError::Io(e),
    })
}

fn read_u16<R: Read>(r: &mut R, ctx: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact_or(r, &mut b, ctx)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R, ctx: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, ctx)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, ctx: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, ctx)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_header<R: Read>(r: &mut R) -> Result<GactHeader> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "header magic")?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: magic,
        }
        .into());
    }
    let version = read_u16(r, "header version")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: VERSION,
        }
        .into());
    }
    let flags = read_u16(r, "header flags")?;
    if flags & !KNOWN_FLAGS != 0 {
        return Err(FormatError::CorruptHeader(format!("unknown flags {flags:#06x}")).into());
    }
    let num_classes = read_u32(r, "header num_classes")? as usize;
    let num_layers = read_u32(r, "header num_layers")? as usize;
    if num_layers == 0 {
        return Err(FormatError::CorruptHeader("zero layers".into()).into());
    }
    let mut layer_shapes = Vec::with_capacity(num_layers.min(1 << 16));
    for l in 0..num_layers {
        let ctx = format!("header shape of layer {l}");
        let c = read_u32(r, &ctx)? as usize;
        let p = read_u32(r, &ctx)? as usize;
        layer_shapes.push((c, p));
    }
    let record_count = read_u64(r, "header record_count")?;
    let layout = GactLayout {
        num_classes,
        layer_shapes,
        f64_values: flags & FLAG_F64 != 0,
    };
    layout.validate()?;
    Ok(GactHeader { layout, record_count })
}

fn write_header<W: Write>(w: &mut W, layout: &GactLayout, record_count: u64) -> io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let flags = if layout.f64_values { FLAG_F64 } else { 0 };
    w.write_all(&flags.to_le_bytes())?;
    w.write_all(&(layout.num_classes as u32).to_le_bytes())?;
    w.write_all(&(layout.layer_shapes.len() as u32).to_le_bytes())?;
    for &(c, p) in &layout.layer_shapes {
        w.write_all(&(c as u32).to_le_bytes())?;
        w.write_all(&(p as u32).to_le_bytes())?;
    }
    w.write_all(&record_count.to_le_bytes())
}

/// Streaming reader holding at most one record's bytes in memory.
pub struct ActivationReader<R> {
    inner: R,
    header: GactHeader,
    next_index: u64,
    buf: Vec<u8>,
    finished: bool,
}

impl<R: Read> ActivationReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let header = read_header(&mut inner)?;
        let buf = vec![0u8; header.layout.record_bytes()];
        Ok(Self {
            inner,
            header,
            next_index: 0,
            buf,
            finished: false,
        })
    }

    pub fn header(&self) -> &GactHeader {
        &self.header
    }

    pub fn layout(&self) -> &GactLayout {
        &self.header.layout
    }

    /// Capacity of the internal record buffer in bytes.
    pub fn buffer_capacity(&self) -> usize {
        self.buf.capacity()
    }

    fn read_record(&mut self) -> Result<ActivationRecord> {
        let index = self.next_index;
        self.inner.read_exact(&mut self.buf).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => FormatError::Truncated {
                context: format!("record {index} of {}", self.header.record_count),
            }
            .into(),
            _ => OodError::Io(e),
        })?;
        let layout = &self.header.layout;
        let class = u32::from_le_bytes(self.buf[0..4].try_into().unwrap()) as usize;
        if class >= layout.num_classes {
            return Err(FormatError::BadRecord {
                record: index,
                reason: format!(
                    "predicted class {class} out of range for {} classes",
                    layout.num_classes
                ),
            }
            .into());
        }
        let mut offset = 4;
        let mut layers = Vec::with_capacity(layout.layer_shapes.len());
        for (l, &(c, p)) in layout.layer_shapes.iter().enumerate() {
            let n = c * p;
            let values: Vec<f64> = if layout.f64_values {
                self.buf[offset..offset + 8 * n]
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect()
            } else {
                self.buf[offset..offset + 4 * n]
                    .chunks_exact(4)
                    .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
                    .collect()
            };
            offset += n * layout.value_width();
            let fm = FeatureMap::new(c, p, values).map_err(|e| FormatError::BadRecord {
                record: index,
                reason: format!("layer {l}: {e}"),
            })?;
            layers.push(fm);
        }
        Ok(ActivationRecord {
            predicted_class: class,
            layers,
        })
    }

    fn check_trailing(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        loop {
            match self.inner.read(&mut probe) {
                Ok(0) => return Ok(()),
                Ok(_) => {
                    return Err(FormatError::TrailingData {
                        records: self.header.record_count,
                    }
                    .into())
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl<R: Read> Iterator for ActivationReader<R> {
    type Item = Result<ActivationRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        if self.next_index == self.header.record_count {
            self.finished = true;
            return match self.check_trailing() {
                Ok(()) => None,
                Err(e) => Some(Err(e)),
            };
        }
        let item = self.read_record();
        if item.is_err() {
            self.finished = true;
        }
        self.next_index += 1;
        Some(item)
    }
}

/// Opens a GACT file for streaming.
pub fn read_activations(path: impl AsRef<Path>) -> Result<ActivationReader<BufReader<File>>> {
    ActivationReader::new(BufReader::new(File::open(path)?))
}

/// Reads every record of a GACT file into memory.
pub fn read_all(path: impl AsRef<Path>) -> Result<(GactLayout, Vec<ActivationRecord>)> {
    let reader = read_activations(path)?;
    let layout = reader.layout().clone();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((layout, records))
}

/// Streaming writer; the record count is patched into the header on `finish`.
pub struct ActivationWriter<W: Write + Seek> {
    inner: W,
    layout: GactLayout,
    written: u64,
    buf: Vec<u8>,
}

impl<W: Write + Seek> ActivationWriter<W> {
    pub fn new(mut inner: W, layout: GactLayout) -> Result<Self> {
        layout.validate()?;
        write_header(&mut inner, &layout, 0)?;
        let buf = Vec::with_capacity(layout.record_bytes());
        Ok(Self {
            inner,
            layout,
            written: 0,
            buf,
        })
    }

    pub fn write_record(&mut self, record: &ActivationRecord) -> Result<()> {
        self.layout.check_record(record)?;
        self.buf.clear();
        self.buf
            .extend_from_slice(&(record.predicted_class as u32).to_le_bytes());
        for fm in &record.layers {
            if self.layout.f64_values {
                for v in fm.values() {
                    self.buf.extend_from_slice(&v.to_le_bytes());
                }
            } else {
                for &v in fm.values() {
                    self.buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        self.inner.write_all(&self.buf)?;
        self.written += 1;
        Ok(())
    }

    /// Patches the record count and returns the underlying writer.
    pub fn finish(mut self) -> Result<W> {
        let end = self.inner.stream_position()?;
        self.inner.seek(SeekFrom::Start(self.layout.count_offset()))?;
        self.inner.write_all(&self.written.to_le_bytes())?;
        self.inner.seek(SeekFrom::Start(end))?;
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Writes a complete GACT file atomically.
pub fn write_activations<'a, I>(path: impl AsRef<Path>, layout: &GactLayout, records: I) -> Result<u64>
where
    I: IntoIterator<Item = &'a ActivationRecord>,
{
    let mut count = 0;
    write_atomic(path.as_ref(), |w| {
        let mut writer = ActivationWriter::new(w, layout.clone())?;
        for r in records {
            writer.write_record(r)?;
        }
        count = writer.written;
        writer.finish()?;
        Ok(())
    })?;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use super::*;

    fn record(class: usize, base: f64) -> ActivationRecord {
        ActivationRecord {
            predicted_class: class,
            layers: vec![
                FeatureMap::new(2, 3, (0..6).map(|i| base + i as f64 * 0.5).collect()).unwrap(),
                FeatureMap::new(3, 1, vec![base, -base, 0.25]).unwrap(),
            ],
        }
    }

    fn layout() -> GactLayout {
        GactLayout::new(4, vec![(2, 3), (3, 1)])
    }

    fn encode(layout: &GactLayout, records: &[ActivationRecord]) -> Vec<u8> {
        let mut w = ActivationWriter::new(Cursor::new(Vec::new()), layout.clone()).unwrap();
        for r in records {
            w.write_record(r).unwrap();
        }
        w.finish().unwrap().into_inner()
    }

    #[test]
    fn round_trip_three_records() {
        let recs = vec![record(0, 1.0), record(3, 2.5), record(1, -0.75)];
        let bytes = encode(&layout(), &recs);
        assert_eq!(bytes.len(), layout().header_bytes() + 3 * layout().record_bytes());
        let reader = ActivationReader::new(Cursor::new(bytes)).unwrap();
        assert_eq!(reader.header().record_count, 3);
        let back: Vec<_> = reader.collect::<Result<_>>().unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn f64_flag_round_trips_exactly() {
        let mut lay = layout();
        lay.f64_values = true;
        let fm = FeatureMap::new(2, 3, vec![0.1, 1e-300, 3.3, -7.7, 1.0 / 3.0, 2.0]).unwrap();
        let rec = ActivationRecord {
            predicted_class: 2,
            layers: vec![fm, FeatureMap::new(3, 1, vec![0.1, 0.2, 0.3]).unwrap()],
        };
        let bytes = encode(&lay, std::slice::from_ref(&rec));
        let back: Vec<_> = ActivationReader::new(Cursor::new(bytes))
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(back[0], rec);
    }

    #[test]
    fn truncation_reports_record_index() {
        let recs = vec![record(0, 1.0), record(1, 2.0), record(2, 3.0)];
        let mut bytes = encode(&layout(), &recs);
        bytes.truncate(bytes.len() - layout().record_bytes() / 2);
        let results: Vec<_> = ActivationReader::new(Cursor::new(bytes)).unwrap().collect();
        assert_eq!(results.len(), 3);
        assert!(results[0].is_ok() && results[1].is_ok());
        match &results[2] {
            Err(OodError::Format(FormatError::Truncated { context })) => {
                assert!(context.contains("record 2"), "{context}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_layer_header_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"GACT");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&0u16.to_le_bytes());
        bytes.extend_from_slice(&10u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        assert!(matches!(
            ActivationReader::new(Cursor::new(bytes)),
            Err(OodError::Format(FormatError::CorruptHeader(_)))
        ));
    }

    #[test]
    fn distinct_header_errors() {
        let good = encode(&layout(), &[record(0, 1.0)]);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            ActivationReader::new(Cursor::new(bad_magic)),
            Err(OodError::Format(FormatError::BadMagic { .. }))
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(
            ActivationReader::new(Cursor::new(bad_version)),
            Err(OodError::Format(FormatError::UnsupportedVersion { found: 9, .. }))
        ));

        assert!(matches!(
            ActivationReader::new(Cursor::new(good[..10].to_vec())),
            Err(OodError::Format(FormatError::Truncated { .. }))
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&layout(), &[record(0, 1.0)]);
        bytes.push(0);
        let results: Vec<_> = ActivationReader::new(Cursor::new(bytes)).unwrap().collect();
        assert!(matches!(
            results.last(),
            Some(Err(OodError::Format(FormatError::TrailingData { records: 1 })))
        ));
    }

    #[test]
    fn out_of_range_class_rejected_at_read() {
        let mut bytes = encode(&layout(), &[record(0, 1.0)]);
        let at = layout().header_bytes();
        bytes[at..at + 4].copy_from_slice(&7u32.to_le_bytes());
        let results: Vec<_> = ActivationReader::new(Cursor::new(bytes)).unwrap().collect();
        assert!(matches!(
            results[0],
            Err(OodError::Format(FormatError::BadRecord { record: 0, .. }))
        ));
    }

    #[test]
    fn writer_rejects_shape_drift() {
        let mut w = ActivationWriter::new(Cursor::new(Vec::new()), layout()).unwrap();
        let mut rec = record(0, 1.0);
        rec.layers[1] = FeatureMap::new(2, 1, vec![1.0, 2.0]).unwrap();
        assert!(matches!(w.write_record(&rec), Err(OodError::ShapeMismatch(_))));
    }
}
