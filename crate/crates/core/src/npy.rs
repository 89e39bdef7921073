//! Minimal NPY v1.0 support for little-endian `f32` arrays in C order.
//!
//! Feature maps are stored with shape `(H, W, C)` and masks with shape
//! `(H, W)`. Anything else (other dtypes, Fortran order, other format
//! versions) is rejected.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, InstanceMask};

const MAGIC: &[u8] = b"\x93NUMPY";

/// A raw array read from an NPY file.
#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Npy(msg.into())
}

pub fn parse(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(bad("bad magic string"));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(bad(format!(
            "unsupported format version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(bad("truncated header"));
    }
    let header = std::str::from_utf8(&bytes[10..data_start]).map_err(|_| bad("header is not ASCII"))?;
    let header = parse_header(header)?;
    if header.descr != "<f4" {
        return Err(bad(format!("unsupported dtype `{}`, expected `<f4`", header.descr)));
    }
    if header.fortran_order {
        return Err(bad("fortran_order=True is not supported"));
    }
    let count: usize = header.shape.iter().product();
    let payload = &bytes[data_start..];
    if payload.len() != count * 4 {
        return Err(bad(format!(
            "expected {} data bytes for shape {:?}, found {}",
            count * 4,
            header.shape,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(NpyArray {
        shape: header.shape,
        data,
    })
}

struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

fn parse_header(h: &str) -> Result<Header> {
    let h = h.trim_end_matches(['\n', ' ', '\0']).trim();
    let body = h
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| bad("header is not a dict"))?;

    let descr = dict_value(body, "descr")?;
    let descr = descr
        .trim()
        .trim_matches(|c| c == '\'' || c == '"')
        .to_string();

    let fortran_order = match dict_value(body, "fortran_order")?.trim() {
        "False" => false,
        "True" => true,
        other => return Err(bad(format!("bad fortran_order `{other}`"))),
    };

    let shape_src = dict_value(body, "shape")?;
    let inner = shape_src
        .trim()
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| bad("shape is not a tuple"))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad(format!("bad shape entry `{s}`"))))
        .collect::<Result<Vec<_>>>()?;

    Ok(Header {
        descr,
        fortran_order,
        shape,
    })
}

/// Extracts the raw text of a value from a flat python dict literal.
fn dict_value<'a>(body: &'a str, key: &str) -> Result<&'a str> {
    let needle_sq = format!("'{key}'");
    let needle_dq = format!("\"{key}\"");
    let pos = body
        .find(&needle_sq)
        .map(|p| p + needle_sq.len())
        .or_else(|| body.find(&needle_dq).map(|p| p + needle_dq.len()))
        .ok_or_else(|| bad(format!("header missing `{key}`")))?;
    let rest = body[pos..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| bad(format!("malformed entry for `{key}`")))?
        .trim_start();
    // values are either a tuple, a quoted string, or a bare word
    let end = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1)
    } else if let Some(q) = rest.chars().next().filter(|c| *c == '\'' || *c == '"') {
        rest[1..].find(q).map(|i| i + 2)
    } else {
        rest.find([',', '}']).or(Some(rest.len()))
    }
    .ok_or_else(|| bad(format!("unterminated value for `{key}`")))?;
    Ok(&rest[..end])
}

pub fn encode(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(bad(format!(
            "shape {shape:?} needs {count} values, got {}",
            data.len()
        )));
    }
    let shape_txt = match shape {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape_txt}, }}");
    // pad so that the data starts on a 64-byte boundary, newline-terminated
    let unpadded = 10 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.push_str(&" ".repeat(pad));
    header.push('\n');

    let mut out = Vec::with_capacity(10 + header.len() + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<NpyArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|e| match e {
        Error::Npy(m) => Error::Npy(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let bytes = encode(shape, data)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

impl TryFrom<NpyArray> for FeatureMap {
    type Error = Error;

    fn try_from(a: NpyArray) -> Result<Self> {
        match a.shape[..] {
            [h, w, c] => FeatureMap::new(h, w, c, a.data),
            _ => Err(bad(format!("feature map must have shape (H, W, C), got {:?}", a.shape))),
        }
    }
}

impl TryFrom<NpyArray> for InstanceMask {
    type Error = Error;

    fn try_from(a: NpyArray) -> Result<Self> {
        match a.shape[..] {
            [h, w] => InstanceMask::new(h, w, a.data.iter().map(|&v| v > 0.5).collect()),
            _ => Err(bad(format!("mask must have shape (H, W), got {:?}", a.shape))),
        }
    }
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    read(path)?.try_into()
}

pub fn write_feature_map(path: &Path, f: &FeatureMap) -> Result<()> {
    write(path, &[f.height(), f.width(), f.channels()], f.data())
}

pub fn read_mask(path: &Path) -> Result<InstanceMask> {
    read(path)?.try_into()
}

pub fn write_mask(path: &Path, m: &InstanceMask) -> Result<()> {
    let data: Vec<f32> = m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    write(path, &[m.height(), m.width()], &data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn with_header(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn header_is_aligned() {
        let bytes = encode(&[2, 3, 4], &[0.0; 24]).unwrap();
        let hl = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hl) % 64, 0);
        assert_eq!(bytes[10 + hl - 1], b'\n');
    }

    #[test]
    fn reads_numpy_style_header() {
        // numpy's own formatting, including a one-element tuple
        let hdr = "{'descr': '<f4', 'fortran_order': False, 'shape': (2,), }          \n";
        let a = parse(&with_header(hdr, &[0, 0, 128, 63, 0, 0, 0, 64])).unwrap();
        assert_eq!(a.shape, vec![2]);
        assert_eq!(a.data, vec![1.0, 2.0]);
    }

    #[test]
    fn rejects_wrong_dtype_order_version() {
        let f8 = "{'descr': '<f8', 'fortran_order': False, 'shape': (1,), }\n";
        assert!(parse(&with_header(f8, &[0; 8])).is_err());
        let be = "{'descr': '>f4', 'fortran_order': False, 'shape': (1,), }\n";
        assert!(parse(&with_header(be, &[0; 4])).is_err());
        let fo = "{'descr': '<f4', 'fortran_order': True, 'shape': (1,), }\n";
        assert!(parse(&with_header(fo, &[0; 4])).is_err());

        let mut v2 = encode(&[1], &[1.0]).unwrap();
        v2[6] = 2;
        assert!(parse(&v2).is_err());
        let mut magic = encode(&[1], &[1.0]).unwrap();
        magic[1] = b'X';
        assert!(parse(&magic).is_err());
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut b = encode(&[2, 2], &[1.0; 4]).unwrap();
        b.pop();
        assert!(parse(&b).is_err());
    }

    #[test]
    fn shape_checks_on_conversion() {
        let a = NpyArray {
            shape: vec![2, 2],
            data: vec![0.0; 4],
        };
        assert!(FeatureMap::try_from(a.clone()).is_err());
        assert_eq!(InstanceMask::try_from(a).unwrap().count(), 0);
    }

    proptest! {
        #[test]
        fn roundtrip(h in 1usize..5, w in 1usize..5, c in 1usize..4, seed in any::<u32>()) {
            let data: Vec<f32> = (0..h * w * c)
                .map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / 1e6)
                .collect();
            let bytes = encode(&[h, w, c], &data).unwrap();
            let a = parse(&bytes).unwrap();
            prop_assert_eq!(a.shape, vec![h, w, c]);
            prop_assert_eq!(a.data, data);
        }
    }
}
