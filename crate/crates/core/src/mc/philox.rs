//! Counter-based Gaussian noise.
//!
//! Every standard normal is a pure function of `(seed, path, counter)`, so a
//! path can be regenerated in any order and on any worker with identical
//! results. The bit generator is Philox4x64-10; normals come from the
//! ziggurat sampler of `rand_distr`, fed by the Philox words of one counter
//! (and, on the rare rejection, of the following sub-blocks).

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

const M0: u64 = 0xD2E7_470E_E14C_6C93;
const M1: u64 = 0xCA5A_8263_9512_1157;
const W0: u64 = 0x9E37_79B9_7F4A_7C15;
const W1: u64 = 0xBB67_AE85_84CA_A73B;

/// Counter offset reserved for auxiliary draws (e.g. the second Gaussian of a
/// coupled exact/implicit step). Ordinary counters never set the top bit.
pub const AUX_COUNTER_BIT: u64 = 1 << 63;

#[inline(always)]
fn mulhilo(a: u64, b: u64) -> (u64, u64) {
    let p = (a as u128) * (b as u128);
    ((p >> 64) as u64, p as u64)
}

/// Philox4x64 with 10 rounds.
#[inline]
pub fn philox4x64_10(key: [u64; 2], ctr: [u64; 4]) -> [u64; 4] {
    let mut c = ctr;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(W0);
            k[1] = k[1].wrapping_add(W1);
        }
        let (hi0, lo0) = mulhilo(M0, c[0]);
        let (hi1, lo1) = mulhilo(M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// Address of one Gaussian draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub path: u64,
    pub counter: u64,
}

impl StreamKey {
    pub fn new(seed: u64, path: u64, counter: u64) -> Self {
        Self { seed, path, counter }
    }
}

/// Bit source that walks the sub-blocks `[counter, sub, 0, 0]` for a fixed
/// key, four words at a time.
///
/// One stream supplies all the normals of one step: a step that needs `m`
/// draws reads them in order from the stream at its counter.
pub struct CounterBits {
    key: [u64; 2],
    counter: u64,
    sub: u64,
    buf: [u64; 4],
    pos: usize,
}

impl CounterBits {
    pub fn new(k: StreamKey) -> Self {
        Self { key: [k.seed, k.path], counter: k.counter, sub: 0, buf: [0; 4], pos: 4 }
    }
}

impl RngCore for CounterBits {
    #[inline]
    fn next_u64(&mut self) -> u64 {
        if self.pos == 4 {
            self.buf = philox4x64_10(self.key, [self.counter, self.sub, 0, 0]);
            self.sub += 1;
            self.pos = 0;
        }
        let w = self.buf[self.pos];
        self.pos += 1;
        w
    }

    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let w = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&w[..chunk.len()]);
        }
    }
}

/// Standard normal draw addressed by `key` (the first normal of its stream).
#[inline]
pub fn gaussian_draw(key: StreamKey) -> f64 {
    StandardNormal.sample(&mut CounterBits::new(key))
}

/// Fills `out` with consecutive standard normals from the stream at `key`;
/// `out[0]` equals `gaussian_draw(key)`.
pub fn gaussian_fill(key: StreamKey, out: &mut [f64]) {
    let mut bits = CounterBits::new(key);
    for x in out.iter_mut() {
        *x = StandardNormal.sample(&mut bits);
    }
}
