//! Reader for little-endian `f4`/`f8` C-order `.npy` arrays.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const NPY_MAGIC: &[u8] = b"\x93NUMPY";

fn field<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}':");
    let start = header
        .find(&pat)
        .ok_or_else(|| Error::invalid(format!("npy header lacks '{key}'")))?
        + pat.len();
    Ok(header[start..].trim_start())
}

fn parse_shape(rest: &str) -> Result<Vec<usize>> {
    let open = rest
        .strip_prefix('(')
        .ok_or_else(|| Error::invalid("npy shape is not a tuple"))?;
    let close = open
        .find(')')
        .ok_or_else(|| Error::invalid("unterminated npy shape"))?;
    open[..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad npy dimension '{s}'")))
        })
        .collect()
}

pub fn decode_npy(bytes: &[u8]) -> Result<Tensor> {
    if !bytes.starts_with(NPY_MAGIC) || bytes.len() < 10 {
        return Err(Error::BadMagic);
    }
    let major = bytes[6];
    let (header_len, start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            let b = bytes.get(8..12).ok_or(Error::TruncatedPayload {
                expected: 12,
                found: bytes.len(),
            })?;
            (u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize, 12)
        }
        v => return Err(Error::BadVersion(u32::from(v))),
    };
    let header = bytes
        .get(start..start + header_len)
        .ok_or(Error::TruncatedPayload {
            expected: start + header_len,
            found: bytes.len(),
        })?;
    let header =
        std::str::from_utf8(header).map_err(|_| Error::invalid("npy header is not text"))?;
    let descr = field(header, "descr")?;
    let size = if descr.starts_with("'<f4'") {
        4
    } else if descr.starts_with("'<f8'") {
        8
    } else {
        return Err(Error::invalid(format!(
            "unsupported npy dtype {}",
            descr.split(',').next().unwrap_or(descr)
        )));
    };
    if !field(header, "fortran_order")?.starts_with("False") {
        return Err(Error::invalid(
            "fortran-ordered npy arrays are not supported",
        ));
    }
    let dims = parse_shape(field(header, "shape")?)?;
    let count: usize = dims.iter().product();
    let payload = &bytes[start + header_len..];
    if payload.len() < count * size {
        return Err(Error::TruncatedPayload {
            expected: start + header_len + count * size,
            found: bytes.len(),
        });
    }
    let payload = &payload[..count * size];
    if size == 4 {
        Tensor::f32(
            dims,
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    } else {
        Tensor::f64(
            dims,
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn npy(descr: &str, shape: &str, payload: &[u8]) -> Vec<u8> {
        let mut header =
            format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape}, }}");
        while (10 + header.len() + 1) % 64 != 0 {
            header.push(' ');
        }
        header.push('\n');
        let mut out = NPY_MAGIC.to_vec();
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(header.len() as u16).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn reads_f4_and_f8() {
        let payload: Vec<u8> = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let t = decode_npy(&npy("<f4", "(2, 3)", &payload)).unwrap();
        assert_eq!(t.dims(), &[2, 3]);
        assert_eq!(t.to_matrix().unwrap().row(1), &[4.0, 5.0, 6.0]);

        let payload: Vec<u8> = [0.25f64, -1.5]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let t = decode_npy(&npy("<f8", "(2,)", &payload)).unwrap();
        assert_eq!(t.to_f64(), vec![0.25, -1.5]);
    }

    #[test]
    fn rejects_unsupported_arrays() {
        assert!(decode_npy(&npy("<i4", "(1,)", &[0; 4])).is_err());
        assert!(matches!(
            decode_npy(&npy("<f8", "(3,)", &[0; 16])),
            Err(Error::TruncatedPayload { .. })
        ));
    }
}
