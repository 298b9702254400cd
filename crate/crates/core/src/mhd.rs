//! MetaImage (`.mhd` header + `.raw` payload) reader and writer.
//!
//! Only uncompressed, little-endian, three-dimensional images are handled.
//! Headers are written with a fixed key order so output is byte-for-byte
//! reproducible:
//!
//! ```text
//! ObjectType = Image
//! NDims = 3
//! DimSize = 64 64 64
//! ElementType = MET_FLOAT
//! ElementSpacing = 1 1 1
//! Offset = 0 0 0
//! ElementDataFile = case01.raw
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelVolume, Vec3, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    UInt8,
    Int16,
    UInt16,
    Float32,
}

impl ElementType {
    pub fn met_name(self) -> &'static str {
        match self {
            ElementType::UInt8 => "MET_UCHAR",
            ElementType::Int16 => "MET_SHORT",
            ElementType::UInt16 => "MET_USHORT",
            ElementType::Float32 => "MET_FLOAT",
        }
    }

    pub fn from_met_name(name: &str) -> Result<Self> {
        match name {
            "MET_UCHAR" => Ok(ElementType::UInt8),
            "MET_SHORT" => Ok(ElementType::Int16),
            "MET_USHORT" => Ok(ElementType::UInt16),
            "MET_FLOAT" => Ok(ElementType::Float32),
            other => Err(Error::UnknownElementType(other.to_string())),
        }
    }

    pub fn size(self) -> usize {
        match self {
            ElementType::UInt8 => 1,
            ElementType::Int16 | ElementType::UInt16 => 2,
            ElementType::Float32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhdHeader {
    pub object_type: String,
    pub n_dims: usize,
    pub dim_size: [usize; 3],
    pub element_type: ElementType,
    pub element_spacing: Vec3,
    pub offset: Vec3,
    pub element_data_file: String,
}

impl MhdHeader {
    pub fn for_grid(grid: &Grid, element_type: ElementType, data_file: impl Into<String>) -> Self {
        MhdHeader {
            object_type: "Image".to_string(),
            n_dims: 3,
            dim_size: grid.dims(),
            element_type,
            element_spacing: grid.spacing(),
            offset: grid.origin(),
            element_data_file: data_file.into(),
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dim_size, self.element_spacing, self.offset)
    }

    pub fn payload_len(&self) -> u64 {
        self.dim_size.iter().product::<usize>() as u64 * self.element_type.size() as u64
    }

    /// Header text with keys in the canonical order.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let _ = writeln!(s, "ObjectType = {}", self.object_type);
        let _ = writeln!(s, "NDims = {}", self.n_dims);
        let _ = writeln!(
            s,
            "DimSize = {} {} {}",
            self.dim_size[0], self.dim_size[1], self.dim_size[2]
        );
        let _ = writeln!(s, "ElementType = {}", self.element_type.met_name());
        let _ = writeln!(s, "ElementSpacing = {}", join(&self.element_spacing));
        let _ = writeln!(s, "Offset = {}", join(&self.offset));
        let _ = writeln!(s, "ElementDataFile = {}", self.element_data_file);
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let malformed = |line: usize, text: &str| Error::MalformedHeader {
            path: path.to_path_buf(),
            line,
            text: text.to_string(),
        };
        let mut object_type = None;
        let mut n_dims = None;
        let mut dim_size = None;
        let mut element_type = None;
        let mut element_spacing = None;
        let mut offset = None;
        let mut element_data_file = None;

        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| malformed(lineno, raw))?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(malformed(lineno, raw));
            }
            match key {
                "ObjectType" => object_type = Some(value.to_string()),
                "NDims" => {
                    let n: usize = value.parse().map_err(|_| malformed(lineno, raw))?;
                    if n != 3 {
                        return Err(malformed(lineno, raw));
                    }
                    n_dims = Some(n);
                }
                "DimSize" => {
                    let v = parse_triple::<usize>(value).ok_or_else(|| malformed(lineno, raw))?;
                    if v.contains(&0) {
                        return Err(malformed(lineno, raw));
                    }
                    dim_size = Some(v);
                }
                "ElementType" => element_type = Some(ElementType::from_met_name(value)?),
                "ElementSpacing" => {
                    let v = parse_triple::<f64>(value).ok_or_else(|| malformed(lineno, raw))?;
                    if v.iter().any(|&s| !(s > 0.0)) {
                        return Err(malformed(lineno, raw));
                    }
                    element_spacing = Some(v);
                }
                "Offset" | "Origin" | "Position" => {
                    offset = Some(parse_triple::<f64>(value).ok_or_else(|| malformed(lineno, raw))?)
                }
                "ElementDataFile" => element_data_file = Some(value.to_string()),
                "CompressedData" if value.eq_ignore_ascii_case("true") => {
                    return Err(Error::CompressedNotSupported(path.to_path_buf()));
                }
                "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" if value.eq_ignore_ascii_case("true") => {
                    return Err(malformed(lineno, raw));
                }
                _ => {}
            }
        }

        let missing = |key: &'static str| Error::MissingHeaderKey {
            path: path.to_path_buf(),
            key,
        };
        Ok(MhdHeader {
            object_type: object_type.unwrap_or_else(|| "Image".to_string()),
            n_dims: n_dims.ok_or_else(|| missing("NDims"))?,
            dim_size: dim_size.ok_or_else(|| missing("DimSize"))?,
            element_type: element_type.ok_or_else(|| missing("ElementType"))?,
            element_spacing: element_spacing.unwrap_or([1.0; 3]),
            offset: offset.unwrap_or([0.0; 3]),
            element_data_file: element_data_file.ok_or_else(|| missing("ElementDataFile"))?,
        })
    }
}

fn parse_triple<T: std::str::FromStr + Copy>(value: &str) -> Option<[T; 3]> {
    let parts: Vec<T> = value
        .split_whitespace()
        .map(|t| t.parse().ok())
        .collect::<Option<_>>()?;
    match parts.as_slice() {
        [a, b, c] => Some([*a, *b, *c]),
        _ => None,
    }
}

pub fn read_header(path: impl AsRef<Path>) -> Result<MhdHeader> {
    let path = path.as_ref();
    let text = read_existing(path, |p| fs::read_to_string(p))?;
    MhdHeader::parse(&text, path)
}

fn read_existing<T>(path: &Path, read: impl Fn(&Path) -> std::io::Result<T>) -> Result<T> {
    read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

fn raw_path(header_path: &Path, data_file: &str) -> Result<PathBuf> {
    if data_file.eq_ignore_ascii_case("LOCAL") || data_file.starts_with("LIST") {
        return Err(Error::MalformedHeader {
            path: header_path.to_path_buf(),
            line: 0,
            text: format!("ElementDataFile = {data_file} (only external raw files are supported)"),
        });
    }
    Ok(header_path.parent().unwrap_or_else(|| Path::new(".")).join(data_file))
}

/// Read header and raw payload, widening every element to `f64`.
pub fn read_mhd(path: impl AsRef<Path>) -> Result<(MhdHeader, Volume)> {
    let path = path.as_ref();
    let header = read_header(path)?;
    let raw = raw_path(path, &header.element_data_file)?;
    let bytes = read_existing(&raw, |p| fs::read(p))?;
    if bytes.len() as u64 != header.payload_len() {
        return Err(Error::SizeMismatch {
            path: raw,
            expected: header.payload_len(),
            got: bytes.len() as u64,
        });
    }
    let data: Vec<f64> = match header.element_type {
        ElementType::UInt8 => bytes.iter().map(|&b| b as f64).collect(),
        ElementType::Int16 => bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        ElementType::UInt16 => bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        ElementType::Float32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    };
    let volume = Volume::new(header.grid()?, data)?;
    Ok((header, volume))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    read_mhd(path).map(|(_, v)| v)
}

/// Read a binary mask. Any element type is accepted as long as every value
/// is 0 or 1.
pub fn read_label(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let (_, vol) = read_mhd(path)?;
    let grid = *vol.grid();
    let mut data = Vec::with_capacity(grid.len());
    for (index, &v) in vol.data().iter().enumerate() {
        if v == 0.0 || v == 1.0 {
            data.push(v as u8);
        } else {
            return Err(Error::InvalidLabel {
                index,
                value: v.clamp(0.0, 255.0) as u8,
            });
        }
    }
    LabelVolume::new(grid, data)
}

/// Encode `data` as a little-endian payload of `element_type`. Integer
/// element types reject non-integral or out-of-range values.
pub fn encode_payload(data: &[f64], element_type: ElementType) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(data.len() * element_type.size());
    let overflow = |index: usize, value: f64| Error::ValueOverflow {
        index,
        value,
        element_type: element_type.met_name(),
    };
    for (index, &v) in data.iter().enumerate() {
        match element_type {
            ElementType::UInt8 => {
                if v.fract() != 0.0 || !(0.0..=u8::MAX as f64).contains(&v) {
                    return Err(overflow(index, v));
                }
                out.push(v as u8);
            }
            ElementType::Int16 => {
                if v.fract() != 0.0 || !(i16::MIN as f64..=i16::MAX as f64).contains(&v) {
                    return Err(overflow(index, v));
                }
                out.extend_from_slice(&(v as i16).to_le_bytes());
            }
            ElementType::UInt16 => {
                if v.fract() != 0.0 || !(0.0..=u16::MAX as f64).contains(&v) {
                    return Err(overflow(index, v));
                }
                out.extend_from_slice(&(v as u16).to_le_bytes());
            }
            ElementType::Float32 => {
                let f = v as f32;
                if !f.is_finite() {
                    return Err(overflow(index, v));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Write `<stem>.mhd` and `<stem>.raw` next to each other. `path` may name
/// either file; the header is always the `.mhd`.
pub fn write_mhd(vol: &Volume, path: impl AsRef<Path>, element_type: ElementType) -> Result<()> {
    let payload = encode_payload(vol.data(), element_type)?;
    write_files(vol.grid(), &payload, path.as_ref(), element_type)
}

pub fn write_label(lab: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    write_files(lab.grid(), lab.data(), path.as_ref(), ElementType::UInt8)
}

fn write_files(grid: &Grid, payload: &[u8], path: &Path, element_type: ElementType) -> Result<()> {
    let header_path = path.with_extension("mhd");
    let raw_path = path.with_extension("raw");
    let raw_name = raw_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("invalid output path {}", path.display())))?
        .to_string();
    let header = MhdHeader::for_grid(grid, element_type, raw_name);
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(&header_path, header.to_text()).map_err(|e| Error::io(&header_path, e))?;
    Ok(())
}
