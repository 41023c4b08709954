//! Binary checkpoint format, version 1. All integers and reals little-endian.
//!
//! | bytes   | field                                                          |
//! |---------|----------------------------------------------------------------|
//! | 8       | magic `WDLSTMCK`                                               |
//! | 4 (u32) | format version                                                 |
//! | 4 (u32) | flags: bit 0 deep branch, bit 1 wide branch, bit 2 wide sigmoid |
//! | 4 (u32) | dimension count `D` (5 with a deep branch, else 0)             |
//! | 4*D     | `input_dim, hidden_dim, seq_len, dense1_width, dense2_width`   |
//! | 4 (u32) | sequence normalizer count `S`                                  |
//! | 16*S    | `(mean, std)` f64 pairs                                        |
//! | 4 (u32) | tabular normalizer count `T` (8 with a wide branch, else 0)    |
//! | 16*T    | `(mean, std)` f64 pairs                                        |
//! | 8 (u64) | parameter count `P`                                            |
//! | 8*P     | f64 parameters in canonical order (see the `net` module docs)  |
//!
//! Nothing may follow the parameters.

use std::path::Path;

use super::{ModelParams, ModelShape, NetError, Normalizer, Result, DENSE1_WIDTH, DENSE2_WIDTH, WIDE_WIDTH};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WDLSTMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const FLAG_DEEP: u32 = 1;
const FLAG_WIDE: u32 = 2;
const FLAG_WIDE_SIGMOID: u32 = 4;

pub fn checkpoint_to_bytes(params: &ModelParams) -> Vec<u8> {
    let w = &params.weights;
    let mut out = Vec::with_capacity(64 + 8 * w.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let mut flags = 0;
    if w.deep.is_some() {
        flags |= FLAG_DEEP;
    }
    if w.wide.is_some() {
        flags |= FLAG_WIDE;
    }
    if params.wide_sigmoid {
        flags |= FLAG_WIDE_SIGMOID;
    }
    out.extend_from_slice(&flags.to_le_bytes());
    match &w.deep {
        Some(d) => {
            out.extend_from_slice(&5u32.to_le_bytes());
            for v in [d.input_dim(), d.hidden_dim(), d.seq_len(), DENSE1_WIDTH, DENSE2_WIDTH] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
        }
        None => out.extend_from_slice(&0u32.to_le_bytes()),
    }
    for group in [&params.normalizers.sequence, &params.normalizers.tabular] {
        out.extend_from_slice(&(group.len() as u32).to_le_bytes());
        for n in group {
            out.extend_from_slice(&n.mean.to_le_bytes());
            out.extend_from_slice(&n.std.to_le_bytes());
        }
    }
    out.extend_from_slice(&(w.param_count() as u64).to_le_bytes());
    for s in w.slices() {
        for v in s {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            NetError::CorruptCheckpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(NetError::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(NetError::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let flags = r.u32("flags")?;
    if flags & !(FLAG_DEEP | FLAG_WIDE | FLAG_WIDE_SIGMOID) != 0 {
        return Err(NetError::CorruptCheckpoint(format!("unknown flags {flags:#x}")));
    }
    let has_deep = flags & FLAG_DEEP != 0;
    let has_wide = flags & FLAG_WIDE != 0;
    let ndims = r.u32("dimension count")?;
    let deep = if has_deep {
        if ndims != 5 {
            return Err(NetError::CorruptCheckpoint(format!("expected 5 dimensions, found {ndims}")));
        }
        let mut d = [0usize; 5];
        for v in &mut d {
            *v = r.u32("dimension")? as usize;
        }
        if d[3] != DENSE1_WIDTH || d[4] != DENSE2_WIDTH {
            return Err(NetError::CorruptCheckpoint(format!(
                "dense widths {}x{} not supported",
                d[3], d[4]
            )));
        }
        if d[0] == 0 || d[1] == 0 || d[2] == 0 {
            return Err(NetError::CorruptCheckpoint("zero dimension".into()));
        }
        Some((d[0], d[1], d[2]))
    } else {
        if ndims != 0 {
            return Err(NetError::CorruptCheckpoint("dimensions without a deep branch".into()));
        }
        None
    };
    let mut params = ModelParams::zeros(ModelShape {
        deep: deep.map(|(i, _, n)| (i, n)),
        hidden_dim: deep.map_or(0, |d| d.1),
        wide: has_wide,
    });
    params.wide_sigmoid = flags & FLAG_WIDE_SIGMOID != 0;

    let expected_counts = [
        deep.map_or(0, |d| d.0),
        if has_wide { WIDE_WIDTH } else { 0 },
    ];
    let mut groups: [Vec<Normalizer>; 2] = [Vec::new(), Vec::new()];
    for (group, expected) in groups.iter_mut().zip(expected_counts) {
        let count = r.u32("normalizer count")? as usize;
        if count != expected {
            return Err(NetError::CorruptCheckpoint(format!(
                "{count} normalizers, expected {expected}"
            )));
        }
        for _ in 0..count {
            let mean = r.f64("normalizer mean")?;
            let std = r.f64("normalizer std")?;
            if !(mean.is_finite() && std.is_finite() && std > 0.0) {
                return Err(NetError::CorruptCheckpoint(format!("invalid normalizer ({mean}, {std})")));
            }
            group.push(Normalizer { mean, std });
        }
    }
    let [sequence, tabular] = groups;
    params.normalizers.sequence = sequence;
    params.normalizers.tabular = tabular;

    let count = r.u64("parameter count")?;
    if count != params.weights.param_count() as u64 {
        return Err(NetError::CorruptCheckpoint(format!(
            "{count} parameters, dimensions imply {}",
            params.weights.param_count()
        )));
    }
    for s in params.weights.slices_mut() {
        for v in s.iter_mut() {
            *v = r.f64("parameter")?;
        }
    }
    if r.pos != buf.len() {
        return Err(NetError::CorruptCheckpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    if !params.weights.is_finite() {
        return Err(NetError::CorruptCheckpoint("non-finite parameter".into()));
    }
    Ok(params)
}

pub fn checkpoint_save(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(params))?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<ModelParams> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn sample() -> ModelParams {
        let mut p = ModelParams::init(
            ModelShape {
                deep: Some((9, 7)),
                hidden_dim: 3,
                wide: true,
            },
            &mut SplitMix64::new(4),
        );
        p.weights.wide.as_mut().unwrap().weights[2] = -0.125;
        p.normalizers.sequence[0] = Normalizer { mean: 130.5, std: 22.25 };
        p.wide_sigmoid = true;
        p
    }

    #[test]
    fn round_trip_bitwise() {
        let p = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        checkpoint_save(&p, &path).unwrap();
        let q = checkpoint_load(&path).unwrap();
        assert_eq!(checkpoint_to_bytes(&q), checkpoint_to_bytes(&p));
        let bits = |m: &ModelParams| m.weights.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
        assert_eq!(p, q);
    }

    #[test]
    fn wide_only_round_trip() {
        let p = ModelParams::zeros(ModelShape {
            deep: None,
            hidden_dim: 0,
            wide: true,
        });
        assert_eq!(checkpoint_from_bytes(&checkpoint_to_bytes(&p)).unwrap(), p);
    }

    #[test]
    fn truncated_is_corrupt() {
        let bytes = checkpoint_to_bytes(&sample());
        for cut in [0, 5, 12, 30, bytes.len() - 1] {
            assert!(matches!(
                checkpoint_from_bytes(&bytes[..cut]),
                Err(NetError::CorruptCheckpoint(_))
            ));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(checkpoint_from_bytes(&extra), Err(NetError::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_bump_rejected() {
        let mut bytes = checkpoint_to_bytes(&sample());
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(NetError::VersionMismatch { expected: 1, found: 2 })
        ));
    }
}
