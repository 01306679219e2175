//! Flat binary checkpoint.
//!
//! Layout, all integers `u64` and all floats `f64`, little-endian:
//!
//! | field | meaning |
//! |---|---|
//! | magic | the 8 bytes `CDDIT001` |
//! | `d_x` | input dimension |
//! | `d` | token dimension |
//! | `L` | number of data tokens |
//! | `d_y` | condition dimension |
//! | `blocks` | number of transformer blocks |
//! | `s` | key/query/value width |
//! | `r` | feed-forward width |
//! | `latent` | 1 if a decoder `W_U` follows, else 0 |
//! | `d_0` | latent dimension (0 when `latent == 0`) |
//! | order | `d * L` entries of the reshape permutation |
//!
//! The header is followed by every parameter tensor in declaration order
//! (`w_y, b_y, null_token, w_t, b_t`, then per block
//! `W_Q, W_K, W_V, W_O, W_1, b_1, W_2, b_2, E`, then `head_w, head_b`, then
//! `W_U` if present), each stored column-major.

use super::block::TransformerParams;
use super::dit::{DiTModel, TIME_FEATURES};
use super::reshape::ReshapeSpec;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CDDIT001";

pub fn write_checkpoint<W: Write>(model: &DiTModel, mut w: W) -> Result<()> {
    let b0 = &model.blocks[0];
    w.write_all(MAGIC)?;
    let d0 = model.w_u.as_ref().map_or(0, |u| u.ncols());
    let header = [
        model.d_x(),
        model.d(),
        model.reshape.l(),
        model.d_y,
        model.blocks.len(),
        b0.s(),
        b0.r(),
        usize::from(model.w_u.is_some()),
        d0,
    ];
    for v in header.iter().chain(model.reshape.order()) {
        w.write_all(&(*v as u64).to_le_bytes())?;
    }
    let mut res = Ok(());
    model.visit(&mut |_, s| {
        for v in s {
            if res.is_ok() {
                res = w.write_all(&v.to_le_bytes());
            }
        }
    });
    res?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    usize::try_from(u64::from_le_bytes(b))
        .map_err(|_| Error::Format("header value overflows".into()))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<DiTModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let mut h = [0usize; 9];
    for v in h.iter_mut() {
        *v = read_u64(&mut r)?;
    }
    let [d_x, d, l, d_y, nb, s, rr, latent, d0] = h;
    if d == 0 || l == 0 || nb == 0 || latent > 1 || d * l > 1 << 24 || nb > 1 << 10 {
        return Err(Error::Format(format!(
            "implausible checkpoint header {h:?}"
        )));
    }
    let trunk = if latent == 1 { d0 } else { d_x };
    if trunk != d * l {
        return Err(Error::Format("header dimensions are inconsistent".into()));
    }
    let order = (0..d * l)
        .map(|_| read_u64(&mut r))
        .collect::<Result<Vec<_>>>()?;
    let reshape = ReshapeSpec::from_order(d, order).map_err(|e| Error::Format(e.to_string()))?;
    let mut model = DiTModel {
        reshape,
        d_y,
        w_y: DMatrix::zeros(d, d_y),
        b_y: DVector::zeros(d),
        null_token: DVector::zeros(d),
        w_t: DMatrix::zeros(d, TIME_FEATURES),
        b_t: DVector::zeros(d),
        blocks: (0..nb)
            .map(|_| TransformerParams::zeros(d, s, rr, l + 2))
            .collect(),
        head_w: DMatrix::zeros(d, d),
        head_b: DVector::zeros(d),
        w_u: (latent == 1).then(|| DMatrix::zeros(d_x, d0)),
    };
    let mut res = Ok(());
    model.visit_mut(&mut |_, sl| {
        for v in sl.iter_mut() {
            if res.is_ok() {
                let mut b = [0u8; 8];
                match r.read_exact(&mut b) {
                    Ok(()) => *v = f64::from_le_bytes(b),
                    Err(e) => res = Err(e),
                }
            }
        }
    });
    res?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &DiTModel, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DiTModel> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::transformer::dit::DiTConfig;

    #[test]
    fn round_trip() {
        let mut rng = seeded(2);
        let mut cfg = DiTConfig::new(6, 2, 2, 2, 4);
        let plain = DiTModel::new(&cfg, &mut rng).unwrap();
        cfg.latent = Some(4);
        let latent = DiTModel::new(&cfg, &mut rng).unwrap();
        for m in [plain, latent] {
            let mut buf = Vec::new();
            write_checkpoint(&m, &mut buf).unwrap();
            assert_eq!(
                buf.len(),
                8 + 8 * (9 + m.reshape.l() * m.d()) + 8 * m.num_params()
            );
            let back = read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(back, m);
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.ckpt");
            save_checkpoint(&m, &p).unwrap();
            assert_eq!(load_checkpoint(&p).unwrap(), m);
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut rng = seeded(3);
        let m = DiTModel::new(&DiTConfig::new(4, 1, 2, 1, 4), &mut rng).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint(bad.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
