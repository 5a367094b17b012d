//! First Sobol' dimension (Joe–Kuo direction numbers, all `m_k = 1`),
//! generated in Gray-code order.

const BITS: u32 = 32;

/// Iterator over the one-dimensional Sobol' sequence in `[0, 1)`.
#[derive(Debug, Clone)]
pub struct Sobol1d {
    index: u64,
    state: u32,
    directions: [u32; BITS as usize],
}

impl Default for Sobol1d {
    fn default() -> Self {
        Self::new()
    }
}

impl Sobol1d {
    pub fn new() -> Self {
        let mut directions = [0u32; BITS as usize];
        for (k, d) in directions.iter_mut().enumerate() {
            *d = 1u32 << (BITS - 1 - k as u32);
        }
        Sobol1d {
            index: 0,
            state: 0,
            directions,
        }
    }
}

impl Iterator for Sobol1d {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        if self.index >= 1u64 << BITS {
            return None;
        }
        let out = self.state as f64 / (1u64 << BITS) as f64;
        // Flip the direction bit at the position of the lowest zero bit of the index.
        let c = (!self.index).trailing_zeros() as usize;
        if c < BITS as usize {
            self.state ^= self.directions[c];
        }
        self.index += 1;
        Some(out)
    }
}

/// The first `n` Sobol' points, each shifted by half of the finest dyadic
/// cell so the set is symmetric about 1/2 when `n` is a power of two.
pub fn centered_points(n: usize) -> Vec<f64> {
    let cells = n.next_power_of_two() as f64;
    Sobol1d::new().take(n).map(|x| x + 0.5 / cells).collect()
}
