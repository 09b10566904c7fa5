//! Minimal NPY v1.0 support: little-endian `float32`, C order, any rank.
//!
//! Written files are byte-identical to what `numpy.save` produces for a
//! contiguous `float32` array: magic, version `1.0`, a `u16` header length, a
//! Python-literal header dict padded with spaces to a 64-byte boundary and
//! terminated by `\n`, then the raw payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{AttentionStack, VideoFeatures};

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";
const PREAMBLE_LEN: usize = 10;
const ALIGN: usize = 64;

/// A decoded NPY array: shape plus flat C-order payload.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Either kind of tensor the pipeline consumes.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Features(VideoFeatures),
    Attention(AttentionStack),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Features,
    Attention,
}

fn malformed(offset: usize, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        offset,
        reason: reason.into(),
    }
}

pub fn read_npy<R: Read>(reader: &mut R) -> Result<NpyArray> {
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<reader>", e))?;
    decode(&bytes)
}

/// Decodes a complete in-memory NPY file.
pub fn decode(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < PREAMBLE_LEN {
        return Err(malformed(bytes.len(), "file shorter than the npy preamble"));
    }
    if &bytes[..6] != MAGIC {
        let at = bytes[..6]
            .iter()
            .zip(MAGIC)
            .position(|(a, b)| a != b)
            .unwrap_or(0);
        return Err(malformed(at, "missing \\x93NUMPY magic"));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(malformed(
            6,
            format!("unsupported npy version {}.{}", bytes[6], bytes[7]),
        ));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = PREAMBLE_LEN + header_len;
    if bytes.len() < data_start {
        return Err(malformed(
            bytes.len(),
            format!("header length {header_len} runs past end of file"),
        ));
    }
    let header = std::str::from_utf8(&bytes[PREAMBLE_LEN..data_start]).map_err(|e| {
        malformed(PREAMBLE_LEN + e.valid_up_to(), "header is not valid ASCII")
    })?;
    let dict = HeaderParser::new(header, PREAMBLE_LEN).parse_dict()?;

    if dict.descr != "<f4" {
        return Err(Error::UnsupportedDtype { descr: dict.descr });
    }
    if dict.fortran_order {
        return Err(malformed(
            PREAMBLE_LEN,
            "fortran_order arrays are not supported",
        ));
    }
    let count = dict
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| malformed(PREAMBLE_LEN, "shape product overflows"))?;
    let payload = &bytes[data_start..];
    let expected = count * 4;
    if payload.len() != expected {
        return Err(Error::Truncated {
            offset: data_start,
            expected,
            actual: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(NpyArray {
        shape: dict.shape,
        data,
    })
}

fn shape_literal(shape: &[usize]) -> String {
    match shape {
        [single] => format!("({single},)"),
        dims => {
            let parts: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
            format!("({})", parts.join(", "))
        }
    }
}

/// Encodes `data` with the given shape as an NPY v1.0 byte buffer.
pub fn encode(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(Error::Shape(format!(
            "shape {shape:?} needs {count} values, got {}",
            data.len()
        )));
    }
    let mut header = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': {}, }}",
        shape_literal(shape)
    );
    // +1 for the trailing newline
    let unpadded = PREAMBLE_LEN + header.len() + 1;
    let padding = (ALIGN - unpadded % ALIGN) % ALIGN;
    header.extend(std::iter::repeat(' ').take(padding));
    header.push('\n');
    let header_len = u16::try_from(header.len())
        .map_err(|_| Error::Shape(format!("npy header for shape {shape:?} is too long")))?;

    let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_npy<W: Write>(writer: &mut W, shape: &[usize], data: &[f32]) -> Result<()> {
    let bytes = encode(shape, data)?;
    writer
        .write_all(&bytes)
        .map_err(|e| Error::io("<writer>", e))
}

pub fn save_npy(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let bytes = encode(shape, data)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_npy(path: &Path) -> Result<NpyArray> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

impl NpyArray {
    pub fn into_features(self) -> Result<VideoFeatures> {
        match self.shape[..] {
            [f, n, d] => VideoFeatures::new(f, n, d, self.data),
            _ => Err(Error::Rank {
                expected: 3,
                shape: self.shape,
            }),
        }
    }

    pub fn into_attention(self) -> Result<AttentionStack> {
        match self.shape[..] {
            [f, n, m] if n == m => AttentionStack::new(f, n, self.data),
            [_, _, _] => Err(Error::Shape(format!(
                "attention maps must be square per frame, found {:?}",
                self.shape
            ))),
            _ => Err(Error::Rank {
                expected: 3,
                shape: self.shape,
            }),
        }
    }
}

/// Loads and validates a rank-3 tensor of the requested kind.
pub fn load_tensor(path: &Path, kind: TensorKind) -> Result<Tensor> {
    let array = load_npy(path)?;
    match kind {
        TensorKind::Features => array.into_features().map(Tensor::Features),
        TensorKind::Attention => array.into_attention().map(Tensor::Attention),
    }
}

pub fn load_features(path: &Path) -> Result<VideoFeatures> {
    load_npy(path)?.into_features()
}

pub fn load_attention(path: &Path) -> Result<AttentionStack> {
    load_npy(path)?.into_attention()
}

pub fn save_features(path: &Path, features: &VideoFeatures) -> Result<()> {
    save_npy(path, &features.shape(), features.as_slice())
}

pub fn save_attention(path: &Path, attention: &AttentionStack) -> Result<()> {
    save_npy(path, &attention.shape(), attention.as_slice())
}

struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

enum Literal {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
}

/// Parser for the restricted Python literal dict numpy writes.
struct HeaderParser<'a> {
    src: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> HeaderParser<'a> {
    fn new(src: &'a str, base: usize) -> Self {
        Self {
            src: src.as_bytes(),
            pos: 0,
            base,
        }
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        malformed(self.base + self.pos, reason)
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected '{}'", c as char)))
        }
    }

    fn parse_dict(mut self) -> Result<HeaderDict> {
        self.expect(b'{')?;
        let (mut descr, mut fortran, mut shape) = (None, None, None);
        loop {
            if self.peek() == Some(b'}') {
                self.pos += 1;
                break;
            }
            let key_at = self.pos;
            let key = self.parse_str()?;
            self.expect(b':')?;
            let value = self.parse_value()?;
            match (key.as_str(), value) {
                ("descr", Literal::Str(s)) => descr = Some(s),
                ("fortran_order", Literal::Bool(b)) => fortran = Some(b),
                ("shape", Literal::Tuple(t)) => shape = Some(t),
                (k @ ("descr" | "fortran_order" | "shape"), _) => {
                    self.pos = key_at;
                    return Err(self.err(format!("key '{k}' has the wrong type")));
                }
                (k, _) => {
                    self.pos = key_at;
                    return Err(self.err(format!("unexpected key '{k}'")));
                }
            }
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'}') => {}
                _ => return Err(self.err("expected ',' or '}'")),
            }
        }
        let rest_ok = self.src[self.pos..].iter().all(|b| b.is_ascii_whitespace());
        if !rest_ok {
            return Err(self.err("trailing bytes after header dict"));
        }
        Ok(HeaderDict {
            descr: descr.ok_or_else(|| self.err("missing 'descr'"))?,
            fortran_order: fortran.ok_or_else(|| self.err("missing 'fortran_order'"))?,
            shape: shape.ok_or_else(|| self.err("missing 'shape'"))?,
        })
    }

    fn parse_str(&mut self) -> Result<String> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(self.err("expected a quoted string")),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos == self.src.len() {
            return Err(self.err("unterminated string"));
        }
        let s = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(s)
    }

    fn parse_value(&mut self) -> Result<Literal> {
        match self.peek() {
            Some(b'\'' | b'"') => self.parse_str().map(Literal::Str),
            Some(b'(') => self.parse_tuple().map(Literal::Tuple),
            Some(b'T') if self.src[self.pos..].starts_with(b"True") => {
                self.pos += 4;
                Ok(Literal::Bool(true))
            }
            Some(b'F') if self.src[self.pos..].starts_with(b"False") => {
                self.pos += 5;
                Ok(Literal::Bool(false))
            }
            _ => Err(self.err("unrecognised header value")),
        }
    }

    fn parse_tuple(&mut self) -> Result<Vec<usize>> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            match self.peek() {
                Some(b')') => {
                    self.pos += 1;
                    return Ok(dims);
                }
                Some(c) if c.is_ascii_digit() => {
                    let start = self.pos;
                    while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                        self.pos += 1;
                    }
                    // numpy may write longs as `3L` in very old files
                    if self.src.get(self.pos) == Some(&b'L') {
                        self.pos += 1;
                    }
                    let digits = std::str::from_utf8(&self.src[start..self.pos])
                        .unwrap_or_default()
                        .trim_end_matches('L');
                    let dim = digits.parse().map_err(|_| {
                        malformed(self.base + start, "shape dimension out of range")
                    })?;
                    dims.push(dim);
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b')') => {}
                        _ => return Err(self.err("expected ',' or ')' in shape")),
                    }
                }
                _ => return Err(self.err("expected a shape dimension")),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_matches_numpy_layout() {
        let bytes = encode(&[2, 3, 4], &[0.0; 24]).unwrap();
        assert_eq!(&bytes[..8], b"\x93NUMPY\x01\x00");
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        let header = std::str::from_utf8(&bytes[10..10 + header_len]).unwrap();
        assert!(header.starts_with("{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3, 4), }"));
        assert!(header.ends_with('\n'));
        assert_eq!(bytes.len(), 10 + header_len + 96);
    }

    #[test]
    fn one_dim_shape_has_trailing_comma() {
        assert_eq!(shape_literal(&[5]), "(5,)");
        assert_eq!(shape_literal(&[0, 4]), "(0, 4)");
        assert_eq!(shape_literal(&[]), "()");
    }

    #[test]
    fn decodes_features_of_shape_2_3_4() {
        let data: Vec<f32> = (0..24).map(|v| v as f32 * 0.5).collect();
        let bytes = encode(&[2, 3, 4], &data).unwrap();
        let f = decode(&bytes).unwrap().into_features().unwrap();
        assert_eq!(f.shape(), [2, 3, 4]);
        assert_eq!(f.as_slice(), &data[..]);
    }

    #[test]
    fn rank_two_is_rejected() {
        let bytes = encode(&[2, 3], &[0.0; 6]).unwrap();
        match decode(&bytes).unwrap().into_features().unwrap_err() {
            Error::Rank { expected: 3, shape } => assert_eq!(shape, vec![2, 3]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_reports_flat_index() {
        let mut data = vec![1.0f32; 24];
        data[7] = f32::NAN;
        let bytes = encode(&[2, 3, 4], &data).unwrap();
        match decode(&bytes).unwrap().into_features().unwrap_err() {
            Error::NonFinite { index, .. } => assert_eq!(index, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_reports_offset() {
        let mut bytes = encode(&[1, 1, 1], &[1.0]).unwrap();
        bytes[3] = b'X';
        match decode(&bytes).unwrap_err() {
            Error::MalformedHeader { offset, .. } => assert_eq!(offset, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn float64_is_rejected() {
        let mut bytes = encode(&[1, 1, 2], &[1.0, 2.0]).unwrap();
        let pos = bytes.windows(3).position(|w| w == b"<f4").unwrap();
        bytes[pos + 2] = b'8';
        assert!(matches!(
            decode(&bytes).unwrap_err(),
            Error::UnsupportedDtype { .. }
        ));
    }

    #[test]
    fn truncated_payload_is_detected() {
        let mut bytes = encode(&[1, 2, 2], &[1.0; 4]).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            decode(&bytes).unwrap_err(),
            Error::Truncated { expected: 16, actual: 13, .. }
        ));
    }

    #[test]
    fn malformed_dict_points_into_header() {
        let mut bytes = encode(&[1, 1, 1], &[1.0]).unwrap();
        // corrupt the 'shape' tuple opening paren
        let pos = bytes.windows(2).position(|w| w == b"(1").unwrap();
        bytes[pos] = b'[';
        match decode(&bytes).unwrap_err() {
            Error::MalformedHeader { offset, .. } => assert_eq!(offset, pos),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fortran_order_is_rejected() {
        let data = [1.0f32, 2.0];
        let header = "{'descr': '<f4', 'fortran_order': True, 'shape': (1, 1, 2), }";
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(decode(&bytes).unwrap_err(), Error::MalformedHeader { .. }));
    }

    #[test]
    fn non_square_attention_is_rejected() {
        let bytes = encode(&[1, 2, 3], &[0.0; 6]).unwrap();
        assert!(matches!(
            decode(&bytes).unwrap().into_attention().unwrap_err(),
            Error::Shape(_)
        ));
    }

    proptest! {
        #[test]
        fn encode_decode_is_bitwise_identity(
            shape in proptest::collection::vec(0usize..5, 1..4),
            seed in any::<u32>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2_654_435_761).wrapping_add(i as u32) & 0x7f7f_ffff))
                .collect();
            let arr = decode(&encode(&shape, &data).unwrap()).unwrap();
            prop_assert_eq!(arr.shape, shape);
            let bits: Vec<u32> = arr.data.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, want);
        }
    }
}
