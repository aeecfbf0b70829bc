//! Sub-seed derivation. Every random stream in a run comes from the single
//! run seed plus a fixed role offset, mixed with SplitMix64.

pub const ROLE_ENCODER_INIT: u64 = 0x100;
pub const ROLE_TASK_HEAD_INIT: u64 = 0x200;
pub const ROLE_DISCRIMINATOR_INIT: u64 = 0x300;
pub const ROLE_SHUFFLE: u64 = 0x400;
pub const ROLE_DROPOUT: u64 = 0x500;
pub const ROLE_ATTACKER: u64 = 0x600;
pub const ROLE_SPLIT: u64 = 0x700;
pub const ROLE_SUBSAMPLE: u64 = 0x800;
pub const ROLE_SYNTH: u64 = 0x900;
pub const ROLE_EMBEDDING_INIT: u64 = 0xa00;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `splitmix(splitmix(seed + role) + index)`
pub fn derive(seed: u64, role: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed.wrapping_add(role)).wrapping_add(index))
}
