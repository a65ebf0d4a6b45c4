//! Counter-based random streams.
//!
//! A stream is identified by a master seed and a path of integers
//! (stage, task, role, ...). The 256-bit ChaCha key is derived from the
//! pair by folding every path element through SplitMix64, so a stream's draws
//! depend only on its identity and never on scheduling or worker count.
//!
//! Derivation (stable, part of the reproducibility contract):
//!
//! ```text
//! h0 = splitmix64(master_seed)
//! h_{i+1} = splitmix64(h_i ^ splitmix64(path[i] + (i+1) * 0x9E3779B97F4A7C15))
//! key words k_j = splitmix64(h_n + j * 0xD1B54A32D192ED03), j = 0..4
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage identifiers used as the first path element.
pub mod stage {
    pub const STAGE1: u64 = 1;
    pub const STAGE2: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const DIAGNOSE: u64 = 4;
    pub const MONTE_CARLO: u64 = 5;
    pub const INIT: u64 = 6;
}

/// Role identifiers used below the task level.
pub mod role {
    pub const BETA: u64 = 0;
    pub const PROMPT: u64 = 1;
    pub const MLP_INIT: u64 = 2;
}

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub master_seed: u64,
    pub path: Vec<u64>,
}

impl RngStream {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master_seed,
            path: Vec::new(),
        }
    }

    /// Stream one level below this one.
    pub fn child(&self, id: u64) -> Self {
        let mut path = self.path.clone();
        path.push(id);
        Self {
            master_seed: self.master_seed,
            path,
        }
    }

    pub fn key(&self) -> [u8; 32] {
        let mut h = splitmix64(self.master_seed);
        for (i, &p) in self.path.iter().enumerate() {
            let salt = p.wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            h = splitmix64(h ^ splitmix64(salt));
        }
        let mut key = [0u8; 32];
        for (j, chunk) in key.chunks_exact_mut(8).enumerate() {
            let w = splitmix64(h.wrapping_add((j as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)));
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        key
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key())
    }

    /// `seed/a/b/c` form used in manifests and checkpoints.
    pub fn describe(&self) -> String {
        let mut s = self.master_seed.to_string();
        for p in &self.path {
            s.push('/');
            s.push_str(&p.to_string());
        }
        s
    }
}
