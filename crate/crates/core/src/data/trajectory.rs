//! In-memory trajectory sets and the `MPOT` binary trajectory file.
//!
//! File layout (little-endian):
//!
//! ```text
//! "MPOT" | u32 version=1 | u32 N | u32 T_total | u32 C | u32 H | u32 W | u32 mask_flag
//! | f32 × N·T_total·C·H·W   ([trajectory][frame][channel][row][col])
//! | u32 byte length | UTF-8 JSON metadata
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::family::FamilyParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TRAJ_MAGIC: [u8; 4] = *b"MPOT";
pub const TRAJ_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajDims {
    pub n: usize,
    pub t_total: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl TrajDims {
    pub fn frame_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn traj_len(&self) -> usize {
        self.t_total * self.frame_len()
    }

    pub fn len(&self) -> usize {
        self.n * self.traj_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Metadata carried alongside the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetMeta {
    pub dataset_id: String,
    /// Generator parameters, when the set is synthetic.
    pub params: Option<FamilyParams>,
}

/// `N` trajectories of `T_total` frames, each frame `[C][H][W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    dims: TrajDims,
    mask: bool,
    data: Vec<f64>,
    pub meta: SetMeta,
}

/// `T` consecutive input frames and the frame that follows them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    /// `[T, C, H, W]`
    pub input: Tensor,
    /// `[C, H, W]`
    pub target: Tensor,
    pub dataset_id: usize,
    pub trajectory: usize,
    pub start: usize,
}

impl TrajectorySet {
    pub fn new(dims: TrajDims, mask: bool, data: Vec<f64>, meta: SetMeta) -> Result<Self> {
        if dims.n == 0 || dims.t_total == 0 || dims.c == 0 || dims.h == 0 || dims.w == 0 {
            return Err(Error::contract(format!("trajectory extents must be positive: {dims:?}")));
        }
        if data.len() != dims.len() {
            return Err(Error::contract(format!(
                "trajectory payload has {} values, dims {dims:?} need {}",
                data.len(),
                dims.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "trajectory set".into() });
        }
        let set = TrajectorySet { dims, mask, data, meta };
        if mask {
            set.check_mask()?;
        }
        Ok(set)
    }

    fn check_mask(&self) -> Result<()> {
        let d = self.dims;
        let plane = d.h * d.w;
        for n in 0..d.n {
            for t in 0..d.t_total {
                let f = self.frame(n, t);
                if f[(d.c - 1) * plane..].iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::contract("mask channel must be binary"));
                }
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> TrajDims {
        self.dims
    }

    pub fn mask(&self) -> bool {
        self.mask
    }

    /// Channels excluding the mask channel.
    pub fn physical_channels(&self) -> usize {
        self.dims.c - self.mask as usize
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, n: usize, t: usize) -> &[f64] {
        let fl = self.dims.frame_len();
        let off = n * self.dims.traj_len() + t * fl;
        &self.data[off..off + fl]
    }

    pub fn value(&self, n: usize, t: usize, c: usize, x: usize, y: usize) -> f64 {
        self.frame(n, t)[(c * self.dims.h + x) * self.dims.w + y]
    }

    /// Number of valid window starts for a window of `t_window` input frames.
    pub fn window_starts(&self, t_window: usize) -> usize {
        self.dims.t_total.saturating_sub(t_window)
    }

    pub fn window(&self, trajectory: usize, start: usize, t_window: usize, dataset_id: usize) -> Result<SampleWindow> {
        let d = self.dims;
        if trajectory >= d.n || start + t_window >= d.t_total {
            return Err(Error::contract(format!(
                "window (trajectory {trajectory}, start {start}, T {t_window}) outside {d:?}"
            )));
        }
        let fl = d.frame_len();
        let off = trajectory * d.traj_len() + start * fl;
        let input = Tensor::new(&[t_window, d.c, d.h, d.w], self.data[off..off + t_window * fl].to_vec())?;
        let target = Tensor::new(&[d.c, d.h, d.w], self.frame(trajectory, start + t_window).to_vec())?;
        Ok(SampleWindow { input, target, dataset_id, trajectory, start })
    }

    /// Rounds the payload to `f32`, the precision of the on-disk format.
    pub fn to_single(&self) -> TrajectorySet {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        out
    }

    /// Leading `len` trajectories starting at `start`.
    pub fn subset(&self, start: usize, len: usize) -> Result<TrajectorySet> {
        if len == 0 || start + len > self.dims.n {
            return Err(Error::contract("trajectory subset out of range"));
        }
        let tl = self.dims.traj_len();
        let dims = TrajDims { n: len, ..self.dims };
        Ok(TrajectorySet {
            dims,
            mask: self.mask,
            data: self.data[start * tl..(start + len) * tl].to_vec(),
            meta: self.meta.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let d = self.dims;
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::Internal(e.to_string()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len() + 4 + meta.len());
        out.extend_from_slice(&TRAJ_MAGIC);
        for v in [TRAJ_VERSION, d.n as u32, d.t_total as u32, d.c as u32, d.h as u32, d.w as u32, self.mask as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != TRAJ_MAGIC {
            return Err(Error::BadMagic { expected: TRAJ_MAGIC, found: magic });
        }
        let version = r.u32()?;
        if version != TRAJ_VERSION {
            return Err(Error::Version { found: version, expected: TRAJ_VERSION });
        }
        let mut f = [0usize; 6];
        for v in f.iter_mut() {
            *v = r.u32()? as usize;
        }
        let dims = TrajDims { n: f[0], t_total: f[1], c: f[2], h: f[3], w: f[4] };
        let mask = match f[5] {
            0 => false,
            1 => true,
            other => return Err(Error::Format { offset: HEADER_LEN - 4, msg: format!("mask flag {other}") }),
        };
        let count = dims
            .n
            .checked_mul(dims.traj_len())
            .filter(|&c| c.checked_mul(4).is_some())
            .ok_or_else(|| Error::Format { offset: 8, msg: "extents overflow".into() })?;
        let payload = r.take(count * 4)?;
        let data: Vec<f64> =
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        let meta_len = r.u32()? as usize;
        let meta_off = r.pos;
        let meta_bytes = r.take(meta_len)?;
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos, msg: format!("{} trailing bytes", bytes.len() - r.pos) });
        }
        let text = std::str::from_utf8(meta_bytes)
            .map_err(|e| Error::Format { offset: meta_off, msg: format!("metadata is not UTF-8: {e}") })?;
        let meta: SetMeta = serde_json::from_str(text)
            .map_err(|e| Error::Format { offset: meta_off, msg: format!("metadata JSON: {e}") })?;
        TrajectorySet::new(dims, mask, data, meta)
    }
}

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated { offset: self.pos, needed: n, len: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn write_trajectories(set: &TrajectorySet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, set.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_trajectories(path: impl AsRef<Path>) -> Result<TrajectorySet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TrajectorySet::from_bytes(&bytes)
}
