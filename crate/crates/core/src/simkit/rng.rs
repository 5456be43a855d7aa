//! Philox4x32-10 counter-based generator.
//!
//! Every Gaussian draw is a pure function of `(seed, replication, agent,
//! step, domain)`, so streams do not depend on scheduling and a single
//! agent can be re-simulated in isolation with the exact same noise.

const M0: u32 = 0xD251_1F53;
const M1: u32 = 0xCD9E_8D57;
const W0: u32 = 0x9E37_79B9;
const W1: u32 = 0xBB67_AE85;

/// Wiener increments.
pub const DOMAIN_NOISE: u32 = 0;
/// Initial states.
pub const DOMAIN_INITIAL: u32 = 1;

#[inline(always)]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = a as u64 * b as u64;
    ((p >> 32) as u32, p as u32)
}

#[inline(always)]
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
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

#[inline(always)]
fn unit(hi: u32, lo: u32) -> f64 {
    let bits = ((hi as u64) << 21) | ((lo as u64) >> 11);
    bits as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn key_of(seed: u64) -> [u32; 2] {
    [seed as u32, (seed >> 32) as u32]
}

/// Two independent standard normals from one counter (Box–Muller).
#[inline(always)]
pub fn normal_pair(key: [u32; 2], counter: [u32; 4]) -> (f64, f64) {
    let w = philox4x32_10(counter, key);
    let u1 = 1.0 - unit(w[0], w[1]);
    let u2 = unit(w[2], w[3]);
    let radius = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (radius * c, radius * s)
}

/// The `index`-th standard normal of stream `(rep, agent, domain)`.
pub fn normal_at(key: [u32; 2], rep: u32, agent: u32, domain: u32, index: u32) -> f64 {
    let (a, b) = normal_pair(key, [index / 2, agent, rep, domain]);
    if index % 2 == 0 {
        a
    } else {
        b
    }
}

/// Sequential reader of one `(rep, agent, domain)` stream.
#[derive(Debug, Clone)]
pub struct NormalStream {
    key: [u32; 2],
    agent: u32,
    rep: u32,
    domain: u32,
    next_index: u32,
    cached: f64,
}

impl NormalStream {
    pub fn new(seed: u64, rep: usize, agent: usize, domain: u32) -> Self {
        Self {
            key: key_of(seed),
            agent: agent as u32,
            rep: rep as u32,
            domain,
            next_index: 0,
            cached: 0.0,
        }
    }

    #[inline(always)]
    pub fn next(&mut self) -> f64 {
        let i = self.next_index;
        self.next_index += 1;
        if i % 2 == 0 {
            let (a, b) = normal_pair(self.key, [i / 2, self.agent, self.rep, self.domain]);
            self.cached = b;
            a
        } else {
            self.cached
        }
    }
}
