//! On-disk formats: the PLT1 tensor container used for datasets and
//! checkpoints, and binary PPM for visual dumps.
//!
//! PLT1 is little-endian throughout: magic `PLT1`, u32 rank, one u32 extent
//! per axis, then the values as f64 in row-major order. Readers validate the
//! magic, the rank, the extents and the exact payload length, so truncated
//! or foreign files fail loudly instead of producing garbage tensors.

use crate::error::PlcaError;
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"PLT1";
const MAX_RANK: u32 = 8;
/// Refuse to allocate for obviously corrupt headers.
const MAX_NUMEL: u64 = 1 << 32;

/// A plain tensor: shape plus row-major f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, PlcaError> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(PlcaError::format(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(TensorData { shape, values })
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Serialize a tensor to a PLT1 file, creating parent directories as needed.
pub fn write_plt1(path: &Path, t: &TensorData) -> Result<(), PlcaError> {
    if t.shape.len() > MAX_RANK as usize {
        return Err(PlcaError::format(format!(
            "rank {} exceeds the format limit of {}",
            t.shape.len(),
            MAX_RANK
        )));
    }
    if t.shape.iter().any(|&e| e == 0 || e > u32::MAX as usize) {
        return Err(PlcaError::format(format!(
            "extents must be positive and fit u32, got {:?}",
            t.shape
        )));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::with_capacity(8 + 4 * t.shape.len() + 8 * t.values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
    for &e in &t.shape {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in &t.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read and validate a PLT1 file.
pub fn read_plt1(path: &Path) -> Result<TensorData, PlcaError> {
    let bytes = fs::read(path)?;
    let ctx = path.display();
    if bytes.len() < 8 {
        return Err(PlcaError::format(format!("{ctx}: truncated header")));
    }
    if &bytes[..4] != MAGIC {
        return Err(PlcaError::format(format!("{ctx}: bad magic, not a PLT1 file")));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if rank > MAX_RANK {
        return Err(PlcaError::format(format!("{ctx}: rank {rank} out of range")));
    }
    let header = 8 + 4 * rank as usize;
    if bytes.len() < header {
        return Err(PlcaError::format(format!("{ctx}: truncated extents")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: u64 = 1;
    for i in 0..rank as usize {
        let off = 8 + 4 * i;
        let e = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if e == 0 {
            return Err(PlcaError::format(format!("{ctx}: zero extent")));
        }
        numel = numel.saturating_mul(e as u64);
        shape.push(e as usize);
    }
    if numel > MAX_NUMEL {
        return Err(PlcaError::format(format!("{ctx}: implausible element count")));
    }
    let want = header + 8 * numel as usize;
    if bytes.len() != want {
        return Err(PlcaError::format(format!(
            "{ctx}: payload is {} bytes, expected {}",
            bytes.len() - header.min(bytes.len()),
            want - header
        )));
    }
    let values = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(TensorData { shape, values })
}

/// Write an 8-bit RGB image as binary PPM (P6).
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), PlcaError> {
    if rgb.len() != width * height * 3 {
        return Err(PlcaError::format(format!(
            "ppm: {}x{} wants {} bytes, got {}",
            width,
            height,
            width * height * 3,
            rgb.len()
        )));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", width, height)?;
    f.write_all(rgb)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plt1_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.plt1");
        let t = TensorData::new(
            vec![2, 3],
            vec![0.0, -1.5, f64::MIN_POSITIVE, 1e300, -0.0, 42.25],
        )
        .unwrap();
        write_plt1(&path, &t).unwrap();
        let back = read_plt1(&path).unwrap();
        assert_eq!(back.shape, t.shape);
        // compare bit patterns (so -0.0 survives)
        let bits: Vec<u64> = t.values.iter().map(|v| v.to_bits()).collect();
        let back_bits: Vec<u64> = back.values.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, back_bits);
    }

    #[test]
    fn plt1_scalar_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.plt1");
        let t = TensorData::new(vec![], vec![3.25]).unwrap();
        write_plt1(&path, &t).unwrap();
        let back = read_plt1(&path).unwrap();
        assert!(back.shape.is_empty());
        assert_eq!(back.values, vec![3.25]);
    }

    #[test]
    fn plt1_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.plt1");
        let t = TensorData::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_plt1(&path, &t).unwrap();
        let good = std::fs::read(&path).unwrap();

        // truncated payload
        std::fs::write(&path, &good[..good.len() - 5]).unwrap();
        assert!(read_plt1(&path).is_err());
        // trailing garbage
        let mut long = good.clone();
        long.extend_from_slice(&[0u8; 3]);
        std::fs::write(&path, &long).unwrap();
        assert!(read_plt1(&path).is_err());
        // wrong magic
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(read_plt1(&path).is_err());
        // zero extent
        let mut zero = good;
        zero[8..12].copy_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &zero).unwrap();
        assert!(read_plt1(&path).is_err());
    }

    #[test]
    fn tensor_data_validates_shape() {
        assert!(TensorData::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(TensorData::new(vec![2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn ppm_has_correct_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        write_ppm(&path, 2, 2, &[255u8; 12]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 12);
        assert!(write_ppm(&path, 2, 2, &[0u8; 5]).is_err());
    }
}
