use rand::Rng;

use crate::error::{EetError, Result};

/// Draw an ordered pair of distinct indices below `n`, uniformly over all such pairs.
pub fn sample_pair(n: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if n < 2 {
        return Err(EetError::Data(format!("pair sampling needs at least two images, got {n}")));
    }
    let i = rng.gen_range(0..n);
    let j = rng.gen_range(0..n - 1);
    Ok((i, if j >= i { j + 1 } else { j }))
}

/// Index layout of one training batch: `pairs` draws, first members then second members.
pub fn sample_batch(n: usize, pairs: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let drawn = (0..pairs).map(|_| sample_pair(n, rng)).collect::<Result<Vec<_>>>()?;
    Ok(drawn.iter().map(|p| p.0).chain(drawn.iter().map(|p| p.1)).collect())
}
