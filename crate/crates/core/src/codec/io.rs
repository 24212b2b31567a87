use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{PatchBasis, PatchGeometry};
use crate::error::{LensError, Result};
use crate::numerics::{RngState, Tensor};

pub const BASIS_MAGIC: &[u8; 8] = b"LENSPCA1";
pub const SAMPLES_MAGIC: &[u8; 8] = b"LENSSMP1";

/// Header fields of a basis file, also written as the JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisHeader {
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub patch_size: u32,
    pub k: u32,
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| LensError::Format(format!("{what}={v} does not fit in 32 bits")))
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = {
        let mut name = path
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        name.push(".tmp");
        path.with_file_name(name)
    };
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".json");
    path.with_file_name(name)
}

pub fn basis_header(basis: &PatchBasis) -> Result<BasisHeader> {
    let g = basis.geometry();
    Ok(BasisHeader {
        channels: to_u32(g.channels, "C")?,
        height: to_u32(g.height, "H")?,
        width: to_u32(g.width, "W")?,
        patch_size: to_u32(g.patch_size, "s")?,
        k: to_u32(basis.k(), "k")?,
    })
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_basis(basis: &PatchBasis) -> Result<Vec<u8>> {
    let h = basis_header(basis)?;
    let d = basis.dim();
    let mut out = Vec::with_capacity(8 + 20 + 8 * (2 * d + d * d));
    out.extend_from_slice(BASIS_MAGIC);
    for v in [h.channels, h.height, h.width, h.patch_size, h.k] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    push_f64s(&mut out, basis.mean().data());
    push_f64s(&mut out, basis.eigenvalues());
    push_f64s(&mut out, basis.vectors().data());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            LensError::Format(format!(
                "truncated file: wanted {n} bytes at offset {} of {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(LensError::Format(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(
            n.checked_mul(8)
                .ok_or_else(|| LensError::Format("length overflow".into()))?,
        )?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(LensError::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode_basis(bytes: &[u8]) -> Result<PatchBasis> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(BASIS_MAGIC)?;
    let (c, h, w, s, k) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let geometry = PatchGeometry::new(c, h, w, s)?;
    let d = geometry.patch_dim();
    let mean = r.f64s(d)?;
    let eigenvalues = r.f64s(d)?;
    let v = Tensor::matrix(d, d, r.f64s(d * d)?)?;
    r.finish()?;
    PatchBasis::new(geometry, v, mean, eigenvalues, k)
}

/// Writes the binary basis and its JSON sidecar.
pub fn save_basis(basis: &PatchBasis, path: &Path) -> Result<()> {
    write_atomic(path, &encode_basis(basis)?)?;
    let json = serde_json::to_vec_pretty(&basis_header(basis)?)?;
    write_atomic(&sidecar_path(path), &json)
}

pub fn load_basis(path: &Path) -> Result<PatchBasis> {
    decode_basis(&fs::read(path)?)
}

pub fn encode_samples(samples: &[Tensor]) -> Result<Vec<u8>> {
    let first = samples
        .first()
        .ok_or_else(|| LensError::invalid("no samples to write"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 {
        return Err(LensError::shape("samples", &[0, 0, 0], &shape));
    }
    let mut out = Vec::with_capacity(8 + 16 + 8 * samples.len() * first.len());
    out.extend_from_slice(SAMPLES_MAGIC);
    out.extend_from_slice(&to_u32(samples.len(), "count")?.to_le_bytes());
    for &dim in &shape {
        out.extend_from_slice(&to_u32(dim, "dim")?.to_le_bytes());
    }
    for z in samples {
        if z.shape() != shape.as_slice() {
            return Err(LensError::shape("samples", &shape, z.shape()));
        }
        push_f64s(&mut out, z.data());
    }
    Ok(out)
}

pub fn decode_samples(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(SAMPLES_MAGIC)?;
    let count = r.u32()?;
    let shape = vec![r.u32()?, r.u32()?, r.u32()?];
    let len: usize = shape.iter().product();
    let out = (0..count)
        .map(|_| Tensor::new(shape.clone(), r.f64s(len)?))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(out)
}

pub fn save_samples(samples: &[Tensor], path: &Path) -> Result<()> {
    write_atomic(path, &encode_samples(samples)?)
}

pub fn load_samples(path: &Path) -> Result<Vec<Tensor>> {
    decode_samples(&fs::read(path)?)
}

/// Spatially smooth synthetic latents: a few random low-order cosine modes
/// per channel, mixed across channels, plus weak white noise so the patch
/// covariance has full rank.
pub fn synthetic_latents(
    channels: usize,
    height: usize,
    width: usize,
    count: usize,
    rng: &mut RngState,
) -> Result<Vec<Tensor>> {
    if channels == 0 || height == 0 || width == 0 || count == 0 {
        return Err(LensError::invalid(
            "synthetic latents need positive sizes and count",
        ));
    }
    const MODES: usize = 3;
    const WHITE: f64 = 0.05;
    let mix: Vec<f64> = rng.normals(channels * channels);
    let mut out = Vec::with_capacity(count);
    let hw = height * width;
    let mut base = vec![0.0; channels * hw];
    for _ in 0..count {
        base.fill(0.0);
        for c in 0..channels {
            let field = &mut base[c * hw..(c + 1) * hw];
            for fy in 0..MODES {
                for fx in 0..MODES {
                    let amp = rng.normal() / (1.0 + (fy * fy + fx * fx) as f64);
                    let phase_y = rng.uniform() * std::f64::consts::PI;
                    let phase_x = rng.uniform() * std::f64::consts::PI;
                    for y in 0..height {
                        let cy = (std::f64::consts::PI * fy as f64 * (y as f64 + 0.5)
                            / height as f64
                            + phase_y)
                            .cos();
                        for x in 0..width {
                            let cx = (std::f64::consts::PI * fx as f64 * (x as f64 + 0.5)
                                / width as f64
                                + phase_x)
                                .cos();
                            field[y * width + x] += amp * cy * cx;
                        }
                    }
                }
            }
        }
        let mut z = vec![0.0; channels * hw];
        for c in 0..channels {
            for src in 0..channels {
                let m = mix[c * channels + src];
                for i in 0..hw {
                    z[c * hw + i] += m * base[src * hw + i];
                }
            }
        }
        for v in z.iter_mut() {
            *v += WHITE * rng.normal();
        }
        out.push(Tensor::new(vec![channels, height, width], z)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::extract_basis;
    use crate::numerics::random_orthonormal;

    #[test]
    fn basis_round_trip_is_bitwise() {
        let g = PatchGeometry::new(2, 4, 4, 2).unwrap();
        let mut rng = RngState::new(4);
        let v = random_orthonormal(8, &mut rng).unwrap();
        let b = PatchBasis::new(
            g,
            v,
            rng.normals(8),
            (0..8).rev().map(f64::from).collect(),
            3,
        )
        .unwrap();
        let bytes = encode_basis(&b).unwrap();
        assert_eq!(&bytes[..8], BASIS_MAGIC);
        assert_eq!(decode_basis(&bytes).unwrap(), b);
        assert!(decode_basis(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_basis(&bad), Err(LensError::Format(_))));
    }

    #[test]
    fn samples_round_trip_and_give_full_rank_basis() {
        let mut rng = RngState::new(6);
        let samples = synthetic_latents(2, 4, 4, 64, &mut rng).unwrap();
        let bytes = encode_samples(&samples).unwrap();
        assert_eq!(decode_samples(&bytes).unwrap(), samples);
        let g = PatchGeometry::new(2, 4, 4, 2).unwrap();
        let b = extract_basis(&samples, g, 2).unwrap();
        // smooth data concentrates variance in the leading directions
        let total: f64 = b.eigenvalues().iter().sum();
        assert!(b.eigenvalues()[..2].iter().sum::<f64>() > 0.5 * total);
    }

    #[test]
    fn files_and_sidecar() {
        let dir = std::env::temp_dir().join(format!("lens-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let g = PatchGeometry::new(1, 4, 4, 2).unwrap();
        let b = PatchBasis::identity(g, 2).unwrap();
        let path = dir.join("basis.bin");
        save_basis(&b, &path).unwrap();
        assert_eq!(load_basis(&path).unwrap(), b);
        let side: BasisHeader =
            serde_json::from_slice(&fs::read(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side.k, 2);
        fs::remove_dir_all(&dir).unwrap();
    }
}
