//! Frozen `(mu, sigma)` copies of a network and their binary container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "RBNNSNAP"
//! version    u32      1
//! family     u8       0 = mfvi, 1 = radial, 2 = truncated mfvi
//! threshold  f64      truncation threshold (infinity unless family = 2)
//! seed       u64      seed of the producing run
//! head_mode  u8       0 = single, 1 = multi
//! n_trunk    u32
//! n_heads    u32
//! layers     (n_trunk + n_heads) x {
//!              out u32, in u32,
//!              w_mu [out*in] f64, w_sigma [out*in] f64,
//!              b_mu [out] f64,    b_sigma [out] f64 }
//! ```
//!
//! Floats are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::path::Path;

use super::network::{sigma_from_rho, HeadMode, PosteriorFamily, VariationalNetwork};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::noise::Threshold;

const MAGIC: &[u8; 8] = b"RBNNSNAP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotLayer {
    pub w_mu: Tensor,
    pub w_sigma: Tensor,
    pub b_mu: Tensor,
    pub b_sigma: Tensor,
}

impl SnapshotLayer {
    pub fn param_count(&self) -> usize {
        self.w_mu.len() + self.b_mu.len()
    }
}

/// Immutable posterior copy, structurally congruent with its source network.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSnapshot {
    family: PosteriorFamily,
    seed: u64,
    head_mode: HeadMode,
    n_trunk: usize,
    layers: Vec<SnapshotLayer>,
}

impl PosteriorSnapshot {
    pub fn capture(net: &VariationalNetwork, seed: u64) -> Self {
        let layers = net
            .layers()
            .map(|l| SnapshotLayer {
                w_mu: l.w_mu.clone(),
                w_sigma: sigma_from_rho(&l.w_rho),
                b_mu: l.b_mu.clone(),
                b_sigma: sigma_from_rho(&l.b_rho),
            })
            .collect();
        Self {
            family: net.family(),
            seed,
            head_mode: net.head_mode,
            n_trunk: net.trunk.len(),
            layers,
        }
    }

    pub fn family(&self) -> PosteriorFamily {
        self.family
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn head_mode(&self) -> HeadMode {
        self.head_mode
    }

    pub fn n_trunk(&self) -> usize {
        self.n_trunk
    }

    pub fn n_heads(&self) -> usize {
        self.layers.len() - self.n_trunk
    }

    pub fn layers(&self) -> &[SnapshotLayer] {
        &self.layers
    }

    /// Errors unless `net` has the same trunk/head layout and layer shapes.
    pub fn check_congruent(&self, net: &VariationalNetwork) -> Result<()> {
        if net.trunk.len() != self.n_trunk || net.heads.len() != self.n_heads() {
            return Err(Error::Structure(format!(
                "snapshot has {} trunk + {} head layers, network has {} + {}",
                self.n_trunk,
                self.n_heads(),
                net.trunk.len(),
                net.heads.len()
            )));
        }
        for (i, (s, l)) in self.layers.iter().zip(net.layers()).enumerate() {
            if s.w_mu.shape() != l.w_mu.shape() || s.b_mu.shape() != l.b_mu.shape() {
                return Err(Error::Structure(format!(
                    "layer {i}: snapshot shape {:?} vs network {:?}",
                    s.w_mu.shape(),
                    l.w_mu.shape()
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds a network whose posterior equals this snapshot.
    pub fn to_network(&self) -> VariationalNetwork {
        let rho = |s: &Tensor| s.map(|v| super::network::softplus_inverse(v));
        let mk = |l: &SnapshotLayer| super::network::VariationalLayer {
            w_mu: l.w_mu.clone(),
            w_rho: rho(&l.w_sigma),
            b_mu: l.b_mu.clone(),
            b_rho: rho(&l.b_sigma),
            family: self.family,
        };
        VariationalNetwork {
            trunk: self.layers[..self.n_trunk].iter().map(mk).collect(),
            heads: self.layers[self.n_trunk..].iter().map(mk).collect(),
            head_mode: self.head_mode,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let (tag, threshold) = match self.family {
            PosteriorFamily::Mfvi => (0u8, f64::INFINITY),
            PosteriorFamily::Radial => (1, f64::INFINITY),
            PosteriorFamily::TruncatedMfvi(c) => (2, c.value()),
        };
        out.push(tag);
        out.extend_from_slice(&threshold.to_bits().to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.push(match self.head_mode {
            HeadMode::Single => 0,
            HeadMode::Multi => 1,
        });
        out.extend_from_slice(&(self.n_trunk as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_heads() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.w_mu.shape()[0] as u32).to_le_bytes());
            out.extend_from_slice(&(l.w_mu.shape()[1] as u32).to_le_bytes());
            for t in [&l.w_mu, &l.w_sigma, &l.b_mu, &l.b_sigma] {
                for v in t.data() {
                    out.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Snapshot("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Snapshot(format!("unsupported version {version}")));
        }
        let tag = r.u8()?;
        let threshold = r.f64()?;
        let family = match tag {
            0 => PosteriorFamily::Mfvi,
            1 => PosteriorFamily::Radial,
            2 => PosteriorFamily::TruncatedMfvi(
                Threshold::new(threshold).map_err(|e| Error::Snapshot(e.to_string()))?,
            ),
            t => return Err(Error::Snapshot(format!("unknown family tag {t}"))),
        };
        let seed = r.u64()?;
        let head_mode = match r.u8()? {
            0 => HeadMode::Single,
            1 => HeadMode::Multi,
            t => return Err(Error::Snapshot(format!("unknown head mode {t}"))),
        };
        let n_trunk = r.u32()? as usize;
        let n_heads = r.u32()? as usize;
        if n_heads == 0 || (head_mode == HeadMode::Single && n_heads != 1) {
            return Err(Error::Snapshot(format!("{n_heads} heads invalid for {head_mode:?}")));
        }
        let n_layers = n_trunk
            .checked_add(n_heads)
            .ok_or_else(|| Error::Snapshot("layer count overflow".into()))?;
        // every layer needs at least its 8-byte header
        if n_layers > r.remaining() / 8 {
            return Err(Error::Snapshot("layer count exceeds payload".into()));
        }
        let mut layers: Vec<SnapshotLayer> = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let out = r.u32()? as usize;
            let inp = r.u32()? as usize;
            let nw = out
                .checked_mul(inp)
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Snapshot(format!("layer {i}: invalid shape {out}x{inp}")))?;
            let need = (2 * nw + 2 * out).checked_mul(8);
            if need.map_or(true, |n| n > r.remaining()) {
                return Err(Error::Snapshot(format!("layer {i}: truncated payload")));
            }
            let w_mu = Tensor::new(vec![out, inp], r.f64s(nw)?)?;
            let w_sigma = Tensor::new(vec![out, inp], r.f64s(nw)?)?;
            let b_mu = Tensor::new(vec![out], r.f64s(out)?)?;
            let b_sigma = Tensor::new(vec![out], r.f64s(out)?)?;
            if w_sigma
                .data()
                .iter()
                .chain(b_sigma.data())
                .any(|&s| !(s > 0.0 && s.is_finite()))
            {
                return Err(Error::Snapshot(format!("layer {i}: sigma must be finite and positive")));
            }
            if i > 0 && n_trunk > 0 {
                let feeder = if i < n_trunk { i - 1 } else { n_trunk - 1 };
                let expected_in = layers[feeder].w_mu.shape()[0];
                if inp != expected_in {
                    return Err(Error::Snapshot(format!(
                        "layer {i}: input width {inp} does not chain from {expected_in}"
                    )));
                }
            }
            layers.push(SnapshotLayer {
                w_mu,
                w_sigma,
                b_mu,
                b_sigma,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::Snapshot(format!("{} trailing bytes", r.remaining())));
        }
        let heads = &layers[n_trunk..];
        if heads.iter().any(|h| h.w_mu.shape() != heads[0].w_mu.shape()) {
            return Err(Error::Snapshot("heads differ in shape".into()));
        }
        Ok(Self {
            family,
            seed,
            head_mode,
            n_trunk,
            layers,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Snapshot(format!(
                "unexpected end of data at byte {} (wanted {n})",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}
