//! Seed fan-out: every random stream derives from one master seed.

/// splitmix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `index`-th value of the splitmix64 sequence started at `master`.
pub fn indexed(master: u64, index: u64) -> u64 {
    mix(master.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index.wrapping_add(1))))
}

/// Independent stream for a named purpose (FNV-1a of the label).
pub fn substream(master: u64, label: &str, index: u64) -> u64 {
    let h = label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    indexed(master ^ mix(h), index)
}
