//! Gestural messaging for underwater robots: a scripting language for
//! the fifteen messages, a kinematic simulator and renderer that turn
//! scripts into video clips, an attention-based recognition network
//! trained on those clips, and the bookkeeping for a human
//! transcription study.

pub mod clip;
pub mod dataset;
pub mod dsl;
pub mod eval;
pub mod kinematics;
pub mod nn;
pub mod render;
pub mod rrcommnet;
pub mod study;

/// Derives an independent seed from a base seed and a path of indices.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
