//! Raw tensor files: the same binary style as the weight format — magic,
//! version, shape header, then float32 little-endian payload.
//!
//! ```text
//! magic   b"FFCT"
//! version u8 = 1
//! shape   u32 channels, u32 height, u32 width (little-endian)
//! data    f32 x elements, channel-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape3, Tensor};

const MAGIC: &[u8; 4] = b"FFCT";
const VERSION: u8 = 1;

pub fn save_tensor<W: Write>(tensor: &Tensor, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&[VERSION])?;
    let sh = tensor.shape();
    for dim in [sh.channels, sh.height, sh.width] {
        out.write_all(&(dim as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.data().len() * 4);
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn save_tensor_to_path(tensor: &Tensor, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::Io(format!("cannot create {}: {e}", path.display())))?;
    save_tensor(tensor, std::io::BufWriter::new(file))
}

pub fn load_tensor<R: Read>(mut input: R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 17 {
        return Err(Error::Io(format!(
            "tensor file truncated: {} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Io(format!(
            "bad magic {:02x?}, not a tensor file (expected `FFCT`)",
            &bytes[0..4]
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::Io(format!(
            "unsupported tensor file version {} (expected {VERSION})",
            bytes[4]
        )));
    }
    let dim =
        |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let shape = Shape3::new(dim(0), dim(1), dim(2))?;
    let payload = &bytes[17..];
    if payload.len() != shape.elements() * 4 {
        return Err(Error::Io(format!(
            "tensor file payload is {} bytes, shape {} needs {}",
            payload.len(),
            shape,
            shape.elements() * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn load_tensor_from_path(path: &Path) -> Result<Tensor> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(format!("cannot open {}: {e}", path.display())))?;
    load_tensor(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let t = Tensor::new(
            Shape3::new(2, 2, 2).unwrap(),
            vec![0.0, -0.0, 1.5, -2.25, f32::MIN_POSITIVE, 3e8, -1e-20, 42.0],
        )
        .unwrap();
        let mut buf = Vec::new();
        save_tensor(&t, &mut buf).unwrap();
        let back = load_tensor(buf.as_slice()).unwrap();
        assert!(t.bitwise_eq(&back));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(load_tensor(&b"XXXX\x01"[..]).is_err());
        let t = Tensor::zeros(Shape3::new(1, 2, 2).unwrap());
        let mut buf = Vec::new();
        save_tensor(&t, &mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(load_tensor(buf.as_slice()).is_err());
    }
}
