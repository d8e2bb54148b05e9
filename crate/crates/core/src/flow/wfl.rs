//! `.wfl` flow files: a 16-byte header (`WFL1`, then little-endian `u32`
//! height, width and flags) followed by the row-major `f32` u-plane and
//! v-plane, little-endian.

use std::fs;
use std::path::Path;

use super::{FlowError, WarpFlow};
use crate::image::write_atomic;

pub const WFL_MAGIC: &[u8; 4] = b"WFL1";
/// Set when out-of-input entries were overwritten with the sentinel.
pub const WFL_FLAG_SENTINEL: u32 = 1;

impl WarpFlow {
    pub fn to_wfl_bytes(&self, flags: u32) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(16 + 8 * n);
        out.extend_from_slice(WFL_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&flags.to_le_bytes());
        for &c in self.u.iter().chain(&self.v) {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    /// Parses a `.wfl` payload, returning the flow and the header flags.
    pub fn from_wfl_bytes(bytes: &[u8]) -> Result<(WarpFlow, u32), String> {
        if bytes.len() < 16 || &bytes[..4] != WFL_MAGIC {
            return Err("missing WFL1 header".into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let (h, w, flags) = (word(4) as usize, word(8) as usize, word(12));
        let n = h * w;
        if bytes.len() != 16 + 8 * n {
            return Err(format!("{h}x{w} flow needs {} bytes, file has {}", 16 + 8 * n, bytes.len()));
        }
        let plane = |k: usize| -> Vec<f32> {
            bytes[16 + 4 * n * k..16 + 4 * n * (k + 1)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        };
        let flow = WarpFlow::new(h, w, plane(0), plane(1)).map_err(|e| e.to_string())?;
        Ok((flow, flags))
    }
}

pub fn write_wfl(path: &Path, flow: &WarpFlow, flags: u32) -> Result<(), FlowError> {
    write_atomic(path, &flow.to_wfl_bytes(flags)).map_err(|e| FlowError::File {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn read_wfl(path: &Path) -> Result<(WarpFlow, u32), FlowError> {
    let file_err = |reason: String| FlowError::File {
        path: path.display().to_string(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| file_err(e.to_string()))?;
    WarpFlow::from_wfl_bytes(&bytes).map_err(file_err)
}
