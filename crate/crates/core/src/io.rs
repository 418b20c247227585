//! The `HSICUBE1` cube container.
//!
//! ```text
//! "HSICUBE1"
//! u32 bands, u32 height, u32 width, u32 dtype (1 = f32, 2 = f64)
//! bands x height x width values, band-major then row-major
//! ```
//!
//! All fields are little-endian.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::HsiCube;

pub const MAGIC: &[u8; 8] = b"HSICUBE1";
const HEADER_LEN: usize = 8 + 4 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u32 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            c => Err(Error::UnknownDtype(c)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HsiFileHeader {
    pub bands: u32,
    pub height: u32,
    pub width: u32,
    pub dtype: Dtype,
}

impl HsiFileHeader {
    pub fn payload_len(&self) -> usize {
        self.bands as usize * self.height as usize * self.width as usize * self.dtype.size()
    }
}

fn decode(payload: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    }
}

fn encode(values: &[f64], dtype: Dtype, out: &mut Vec<u8>) {
    match dtype {
        Dtype::F32 => values.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        Dtype::F64 => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

pub fn cube_from_bytes(bytes: &[u8], path: &Path) -> Result<HsiCube> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "HSICUBE1",
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let field = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let header = HsiFileHeader {
        bands: field(0),
        height: field(1),
        width: field(2),
        dtype: Dtype::from_code(field(3))?,
    };
    let payload = &bytes[HEADER_LEN..];
    let expected = header.payload_len();
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::invalid(format!(
            "{}: {} bytes after the payload",
            path.display(),
            payload.len() - expected
        )));
    }
    HsiCube::new(
        &[header.bands as usize, header.height as usize, header.width as usize],
        decode(payload, header.dtype),
    )
}

pub fn cube_to_bytes(cube: &HsiCube, dtype: Dtype) -> Result<Vec<u8>> {
    let (b, h, w) = cube.dims3()?;
    let mut out = Vec::with_capacity(HEADER_LEN + cube.len() * dtype.size());
    out.extend_from_slice(MAGIC);
    for e in [b, h, w] {
        let e = u32::try_from(e).map_err(|_| Error::invalid(format!("extent {e} does not fit the header")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    out.extend_from_slice(&dtype.code().to_le_bytes());
    encode(cube.data(), dtype, &mut out);
    Ok(out)
}

pub fn read_cube(path: &Path) -> Result<HsiCube> {
    cube_from_bytes(&std::fs::read(path)?, path)
}

/// Writes with 64-bit values, so a later `read_cube` is bit-exact.
pub fn write_cube(path: &Path, cube: &HsiCube) -> Result<()> {
    write_cube_as(path, cube, Dtype::F64)
}

pub fn write_cube_as(path: &Path, cube: &HsiCube, dtype: Dtype) -> Result<()> {
    std::fs::write(path, cube_to_bytes(cube, dtype)?)?;
    Ok(())
}

/// Reads a headerless little-endian file holding `bands x height x width`
/// values in band-major order.
pub fn import_raw(path: &Path, shape: [usize; 3], dtype: Dtype) -> Result<HsiCube> {
    let bytes = std::fs::read(path)?;
    let expected = shape.iter().product::<usize>() * dtype.size();
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    HsiCube::new(&shape, decode(&bytes, dtype))
}

/// Every `*.hsi` file in `dir`, sorted by file name.
pub fn list_cubes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "hsi"))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<HsiCube>> {
    let paths = list_cubes(dir)?;
    if paths.is_empty() {
        return Err(Error::invalid(format!("no .hsi files in {}", dir.display())));
    }
    paths.iter().map(|p| read_cube(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{rng, uniform};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.hsi");
        let cube = uniform(&[31, 64, 64], -1.0, 1.0, &mut rng(130));
        write_cube(&path, &cube).unwrap();
        assert_eq!(read_cube(&path).unwrap(), cube);

        write_cube_as(&path, &cube, Dtype::F32).unwrap();
        let back = read_cube(&path).unwrap();
        assert_eq!(back, cube.map(|v| v as f32 as f64));
    }

    #[test]
    fn header_layout() {
        let cube = HsiCube::zeros(&[2, 3, 4]);
        let b = cube_to_bytes(&cube, Dtype::F64).unwrap();
        assert_eq!(&b[..8], b"HSICUBE1");
        assert_eq!(&b[8..24], &[2, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(b.len(), 24 + 24 * 8);
    }

    #[test]
    fn malformed_files() {
        let p = Path::new("x.hsi");
        let mut b = cube_to_bytes(&HsiCube::zeros(&[10, 10, 10]), Dtype::F64).unwrap();
        b.truncate(HEADER_LEN + 999 * 8);
        assert!(matches!(
            cube_from_bytes(&b, p),
            Err(Error::Truncated { expected: 8000, found: 7992, .. })
        ));

        let mut bad = b.clone();
        bad[..8].copy_from_slice(b"XXXXXXXX");
        assert!(matches!(cube_from_bytes(&bad, p), Err(Error::BadMagic { .. })));
        assert!(matches!(cube_from_bytes(b"HSI", p), Err(Error::BadMagic { .. })));

        let mut dt = b.clone();
        dt[20] = 7;
        assert!(matches!(cube_from_bytes(&dt, p), Err(Error::UnknownDtype(7))));
    }

    #[test]
    fn raw_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.bin");
        let vals: Vec<f32> = (0..24).map(|i| i as f32 * 0.5).collect();
        std::fs::write(&path, vals.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()).unwrap();
        let c = import_raw(&path, [2, 3, 4], Dtype::F32).unwrap();
        assert_eq!(c[13], 6.5);
        assert!(matches!(
            import_raw(&path, [2, 3, 5], Dtype::F32),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn dataset_listing_is_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for (name, v) in [("b.hsi", 2.0), ("a.hsi", 1.0), ("c.txt", 3.0)] {
            write_cube(&dir.path().join(name), &HsiCube::full(&[1, 1, 1], v)).unwrap();
        }
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!((ds[0][0], ds[1][0]), (1.0, 2.0));
    }
}
