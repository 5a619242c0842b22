//! Deterministic, coordinate-addressed random streams.
//!
//! Every noise draw in a tiled matmul belongs to one
//! (layer, output row, tile, output column) coordinate. Deriving an
//! independent counter-based stream per coordinate makes results
//! bit-identical no matter how the work is split across threads or in what
//! order cells are evaluated.

use rand::RngCore;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold `parts` into `seed`, one finalizer round per part, so each position
/// contributes distinctly (swapping two unequal parts changes the result).
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut s = finalize(seed ^ GOLDEN);
    for &p in parts {
        s = finalize(s.wrapping_add(GOLDEN) ^ p);
    }
    s
}

/// Address of one partial dot product inside a tiled matmul.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamCoords {
    /// Layer namespace; callers outside a network pass 0.
    pub layer: u32,
    /// Output row of the weight operand.
    pub row: u32,
    /// Tile index along the contraction dimension.
    pub tile: u32,
    /// Output column (batch element).
    pub col: u32,
}

/// SplitMix64 stream: state advances by a fixed odd constant, outputs are the
/// finalizer of the state. Each (seed, coordinate) pair owns a disjoint
/// counter sequence.
#[derive(Clone, Debug)]
pub struct NoiseRng {
    state: u64,
}

impl NoiseRng {
    pub fn from_seed(seed: u64) -> Self {
        NoiseRng { state: finalize(seed ^ GOLDEN) }
    }

    #[inline]
    fn step(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        finalize(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.step() >> 11) as f64 * 2f64.powi(-53)
    }
}

impl RngCore for NoiseRng {
    fn next_u32(&mut self) -> u32 {
        (self.step() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.step()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let bytes = self.step().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

/// Stream for one coordinate. Pure function of (seed, coords).
pub fn derive_stream(seed: u64, coords: StreamCoords) -> NoiseRng {
    let s = mix_seed(
        seed,
        &[
            coords.layer as u64,
            coords.row as u64,
            coords.tile as u64,
            coords.col as u64,
        ],
    );
    NoiseRng { state: s }
}
