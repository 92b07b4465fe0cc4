// CTNT tensor files: magic "CTNT", u8 version, u8 rank, rank × u32 LE extents,
// then the row-major payload as f32 LE.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Scalar, Tensor, MAX_RANK};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"CTNT";
pub const TENSOR_VERSION: u8 = 1;

pub fn write_tensor_to<F: Scalar, W: Write>(w: &mut W, t: &Tensor<F>) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[TENSOR_VERSION, t.dims().len() as u8])?;
    for &d in t.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_from<F: Scalar, R: Read>(r: &mut R) -> Result<Tensor<F>> {
    let fmt = |e: std::io::Error| Error::Format(format!("truncated tensor: {e}"));
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(fmt)?;
    if &head[..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {:?}", &head[..4])));
    }
    if head[4] != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {}", head[4])));
    }
    let rank = head[5] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!("tensor rank {rank} out of range")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut word = [0u8; 4];
    for _ in 0..rank {
        r.read_exact(&mut word).map_err(fmt)?;
        dims.push(u32::from_le_bytes(word) as usize);
    }
    let numel: usize = dims.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload).map_err(fmt)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| F::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(&dims, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor<F: Scalar>(path: &Path, t: &Tensor<F>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor_to(&mut w, t)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_tensor<F: Scalar>(path: &Path) -> Result<Tensor<F>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor_from(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        let mut want = b"CTNT".to_vec();
        want.extend([1u8, 2]);
        want.extend(2u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.5f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_corrupt_headers() {
        let t = Tensor::<f32>::ones(&[3]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensor_from::<f32, _>(&mut bad.as_slice()), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_tensor_from::<f32, _>(&mut bad.as_slice()), Err(Error::Format(_))));
        let short = &buf[..buf.len() - 1];
        assert!(matches!(read_tensor_from::<f32, _>(&mut &short[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_f32_tensors(
            dims in prop::collection::vec(1usize..5, 1..=4),
            seed in any::<u32>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-6).collect();
            let t = Tensor::new(&dims, data).unwrap();
            let mut buf = Vec::new();
            write_tensor_to(&mut buf, &t).unwrap();
            let back: Tensor<f32> = read_tensor_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
