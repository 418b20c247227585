//! Parameter checkpoint container.
//!
//! ```text
//! "ILRN0001"
//! u32 tensor count
//! per tensor: u32 name length, name bytes (UTF-8), u32 rank, rank x u64 extents
//! all values as f64, tensors in manifest order
//! ```
//!
//! Integers and floats are little-endian. The architecture is recovered from
//! the tensor names and shapes; the fusion-weight window is stored as the
//! one-element tensor `meta.window`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{Conv3d, Deconv3d};
use crate::lowrank::SvtOptions;
use crate::tensor::Tensor;

use super::lambda::{self, LambdaNet};
use super::unet::{self, UNet};
use super::Ilrnet;

pub const MAGIC: &[u8; 8] = b"ILRN0001";

pub fn to_bytes(net: &Ilrnet) -> Vec<u8> {
    let window = Tensor::full(&[1], net.lambda1.window as f64);
    let mut entries = vec![("meta.window".to_string(), &window)];
    entries.extend(net.tensors());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
    }
    for (_, t) in &entries {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(net: &Ilrnet, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Ilrnet> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Ilrnet> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "ILRN0001",
        });
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
        path,
    };
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank == 0 || rank > crate::tensor::MAX_RANK {
            return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        manifest.push((name, shape));
    }
    let mut tensors = BTreeMap::new();
    for (name, shape) in manifest {
        let len = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if tensors.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    assemble(tensors)
}

type Store = BTreeMap<String, Tensor>;

fn take(store: &mut Store, name: &str) -> Result<Tensor> {
    store
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
}

fn wrap(name: &str, r: Result<Conv3d>) -> Result<Conv3d> {
    r.map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
}

fn take_unet(store: &mut Store, prefix: &str, residual: bool) -> Result<UNet> {
    let mut enc = Vec::new();
    while store.contains_key(&format!("{prefix}.enc{}.weight", enc.len())) {
        let i = enc.len();
        let w = take(store, &format!("{prefix}.enc{i}.weight"))?;
        let b = take(store, &format!("{prefix}.enc{i}.bias"))?;
        enc.push(wrap(prefix, Conv3d::new(w, b, unet::STRIDE, unet::PADDING))?);
    }
    let mut dec = Vec::new();
    let mut rmm = None;
    while store.contains_key(&format!("{prefix}.dec{}.weight", dec.len())) {
        let j = dec.len();
        let w = take(store, &format!("{prefix}.dec{j}.weight"))?;
        let b = take(store, &format!("{prefix}.dec{j}.bias"))?;
        dec.push(
            Deconv3d::new(w, b, unet::STRIDE, unet::PADDING, unet::OUTPUT_PADDING)
                .map_err(|e| Error::Checkpoint(format!("{prefix}: {e}")))?,
        );
        if let Some(d) = store.remove(&format!("{prefix}.dec{j}.rmm_d")) {
            if d.shape() != [1] {
                return Err(Error::Checkpoint(format!("{prefix}.dec{j}.rmm_d must hold one value")));
            }
            rmm = Some((j, d));
        }
    }
    let net = UNet {
        enc,
        dec,
        rmm,
        residual,
        svt: SvtOptions::default(),
    };
    net.config()
        .validate()
        .map_err(|e| Error::Checkpoint(format!("{prefix}: {e}")))?;
    let mut prev = 1;
    for c in &net.enc {
        check_layer(prefix, c.in_channels(), prev, c.kernel(), unet::KERNEL)?;
        prev = c.out_channels();
    }
    for c in &net.dec {
        check_layer(prefix, c.in_channels(), prev, c.kernel(), unet::KERNEL)?;
        prev = c.out_channels();
    }
    Ok(net)
}

fn check_layer(prefix: &str, got_in: usize, want_in: usize, kernel: [usize; 3], want_kernel: [usize; 3]) -> Result<()> {
    if got_in != want_in || kernel != want_kernel {
        return Err(Error::Checkpoint(format!(
            "{prefix}: layer expects {got_in} input channels and kernel {kernel:?}, \
             but the previous layer yields {want_in} channels and the kernel must be {want_kernel:?}"
        )));
    }
    Ok(())
}

fn take_lambda(store: &mut Store, prefix: &str, window: usize) -> Result<LambdaNet> {
    let mut convs: Vec<Conv3d> = Vec::new();
    let mut prev = 2;
    while store.contains_key(&format!("{prefix}.conv{}.weight", convs.len())) {
        let i = convs.len();
        let w = take(store, &format!("{prefix}.conv{i}.weight"))?;
        let b = take(store, &format!("{prefix}.conv{i}.bias"))?;
        let c = wrap(prefix, Conv3d::new(w, b, lambda::STRIDE, lambda::PADDING))?;
        check_layer(prefix, c.in_channels(), prev, c.kernel(), lambda::KERNEL)?;
        prev = c.out_channels();
        convs.push(c);
    }
    if convs.is_empty() {
        return Err(Error::Checkpoint(format!("missing tensor {prefix}.conv0.weight")));
    }
    Ok(LambdaNet { convs, window })
}

fn assemble(mut store: Store) -> Result<Ilrnet> {
    let window = take(&mut store, "meta.window")?;
    let w = window.data().first().copied().unwrap_or(f64::NAN);
    if window.len() != 1 || !(w >= 1.0 && w.fract() == 0.0 && w <= 1e6) {
        return Err(Error::Checkpoint(format!("meta.window must be a positive integer, got {:?}", window.data())));
    }
    let window = w as usize;
    let coarse = take_unet(&mut store, "coarse", false)?;
    let mut refine = Vec::new();
    while store.contains_key(&format!("refine{}.enc0.weight", refine.len())) {
        let k = refine.len();
        let f = take_unet(&mut store, &format!("refine{k}"), true)?;
        if f.rmm.is_some() {
            return Err(Error::Checkpoint(format!("refine{k} must not carry a low-rank module")));
        }
        if k > 0 && f.config() != refine.first().map(UNet::config).expect("nonempty") {
            return Err(Error::Checkpoint(format!("refine{k} differs in layout from refine0")));
        }
        refine.push(f);
    }
    let lambda1 = take_lambda(&mut store, "lambda1", window)?;
    let lambda2 = take_lambda(&mut store, "lambda2", window)?;
    if let Some(name) = store.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    let net = Ilrnet {
        coarse,
        refine,
        lambda1,
        lambda2,
    };
    for (name, t) in net.tensors() {
        t.ensure_finite(&name)?;
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;

    fn path() -> &'static Path {
        Path::new("mem.ckpt")
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for cfg in [NetworkConfig::micro(3), NetworkConfig::micro(0).with_rmm(false)] {
            let net = Ilrnet::init(&cfg, 11).unwrap();
            let bytes = to_bytes(&net);
            let back = from_bytes(&bytes, path()).unwrap();
            assert_eq!(back, net);
            assert_eq!(to_bytes(&back), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let net = Ilrnet::init(&NetworkConfig::micro(1), 12).unwrap();
        let bytes = to_bytes(&net);
        assert_eq!(&bytes[..8], b"ILRN0001");
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(count, net.tensors().len() + 1);
        let name_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + name_len], b"meta.window");
        let payload = 8 * (net.parameter_count() + 1);
        assert!(bytes.len() > payload);
        let tail: [u8; 8] = bytes[bytes.len() - 8..].try_into().unwrap();
        let last = net.tensors().last().unwrap().1;
        assert_eq!(f64::from_le_bytes(tail), *last.data().last().unwrap());
    }

    #[test]
    fn damaged_files_are_rejected() {
        let net = Ilrnet::init(&NetworkConfig::micro(1), 13).unwrap();
        let bytes = to_bytes(&net);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad, path()), Err(Error::BadMagic { .. })));
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 3], path()),
            Err(Error::Truncated { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra, path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn inconsistent_shapes_are_rejected() {
        let mut net = Ilrnet::init(&NetworkConfig::micro(1), 14).unwrap();
        net.coarse.enc[1].weight = Tensor::zeros(&[8, 5, 3, 3, 3]);
        let err = from_bytes(&to_bytes(&net), path()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }
}
