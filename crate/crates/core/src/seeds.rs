/// SplitMix64 finaliser, used to derive independent sub-stream seeds from a run seed.
pub fn derive(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const DATA_SAFE: u64 = 1;
pub const DATA_UNSAFE: u64 = 2;
pub const DATA_DOMAIN: u64 = 3;
pub const INIT: u64 = 10;
pub const SHUFFLE: u64 = 11;
pub const ROLLOUTS: u64 = 20;
pub const VERIFY_STANDALONE: u64 = 99;
pub const VERIFY_BASE: u64 = 100;
