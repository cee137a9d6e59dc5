//! `.farlnet` checkpoint files: a JSON header describing the `NetworkSpec`,
//! followed by the flat parameter vector as little-endian f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::numerics::{NetworkParams, NetworkSpec};
use crate::{FarlError, Result};

const MAGIC: &[u8; 8] = b"FARLNET1";

pub fn save_farlnet(path: &Path, net: &NetworkParams) -> Result<()> {
    net.check()?;
    let header = serde_json::to_vec(&net.spec)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for v in &net.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_farlnet(path: &Path) -> Result<NetworkParams> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FarlError::Data(format!(
            "{}: not a farlnet file",
            path.display()
        )));
    }
    let mut len_buf = [0u8; 4];
    r.read_exact(&mut len_buf)?;
    let header_len = u32::from_le_bytes(len_buf) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let spec: NetworkSpec = serde_json::from_slice(&header)?;
    let count = spec.param_count();
    let mut values = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    let net = NetworkParams { spec, values };
    net.check()?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Activation, OutputTransform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let spec = NetworkSpec::new(
            vec![4, 16, 2],
            Activation::Relu,
            OutputTransform::TanhScaled { scale: 1.0 },
        )
        .unwrap();
        let net = NetworkParams::init(spec, &mut ChaCha8Rng::seed_from_u64(2));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.farlnet");
        save_farlnet(&path, &net).unwrap();
        let loaded = load_farlnet(&path).unwrap();
        assert_eq!(net, loaded);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.farlnet");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_farlnet(&path).is_err());
    }
}
