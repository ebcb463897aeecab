//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const ORDER: &str = "order";
pub const CORRUPT: &str = "corrupt";

/// FNV-1a, used only to turn a substream name into a stream id.
fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Generator for substream `name` of `root`. Different names never share a
/// ChaCha stream, so components can be re-seeded independently.
pub fn substream(root: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(fnv1a(name));
    rng
}
