use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer; a bijection on u64 with strong avalanche.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based random stream.
///
/// Draw `i` of stream `(seed, stream_id)` is a pure function of
/// `(seed, stream_id, i)`, so any worker can reproduce any draw without
/// sharing state. Monte Carlo reductions therefore give bit-identical
/// results for any partition of the work, as long as distinct workers use
/// distinct stream ids.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
    key: u64,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let key = mix64(mix64(seed ^ 0x6a09_e667_f3bc_c909) ^ mix64(stream_id ^ 0xbb67_ae85_84ca_a73b));
        RngStream { seed, stream_id, counter: 0, key, spare_normal: None }
    }

    /// A fresh stream on the same seed. Substreams with distinct ids never
    /// overlap.
    pub fn substream(&self, stream_id: u64) -> Self {
        RngStream::new(self.seed, stream_id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter += 1;
        mix64(self.key.wrapping_add(c.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform in (0, 1]; used where a logarithm must stay finite.
    #[inline]
    fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9007199254740992.0)
    }

    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn next_usize(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Modulo bias is below 2^-53 for any n this crate uses.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal draw via Box-Muller; the paired draw is cached.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.next_normal();
        }
    }
}

/// Lower-triangular Cholesky factor of a PSD matrix.
///
/// Zero pivots are tolerated (the corresponding column of L is zeroed) so
/// that rank-deficient covariances, including the zero matrix, factor
/// cleanly. A pivot below `-tol` means the input is not PSD.
pub fn cholesky_psd(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::shape("cholesky of a non-square matrix"));
    }
    let n = a.rows();
    let scale = (0..n).map(|i| a.get(i, i).abs()).fold(1.0f64, f64::max);
    let tol = 1e-10 * scale;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = a.get(j, j);
        for k in 0..j {
            pivot -= l.get(j, k) * l.get(j, k);
        }
        if pivot < -tol {
            return Err(Error::NotPsd { pivot, col: j });
        }
        let ljj = pivot.max(0.0).sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            if ljj == 0.0 {
                l.set(i, j, 0.0);
                continue;
            }
            let mut v = a.get(i, j);
            for k in 0..j {
                v -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, v / ljj);
        }
    }
    Ok(l)
}

/// Draws `n` samples from N(mean, cov) as the rows of an n x d matrix.
///
/// On a failed factorization a single diagonal jitter of 1e-12 is applied
/// before giving up, which tolerates marginally PSD inputs without
/// masking genuinely indefinite ones.
pub fn sample_gaussian(rng: &mut RngStream, mean: &[f64], cov: &Matrix, n: usize) -> Result<Matrix> {
    let d = mean.len();
    if cov.rows() != d || cov.cols() != d {
        return Err(Error::shape(format!(
            "covariance {}x{} does not match mean of length {}",
            cov.rows(),
            cov.cols(),
            d
        )));
    }
    let l = match cholesky_psd(cov) {
        Ok(l) => l,
        Err(_) => {
            let mut jittered = cov.clone();
            for i in 0..d {
                jittered.set(i, i, jittered.get(i, i) + 1e-12);
            }
            cholesky_psd(&jittered)?
        }
    };
    let mut out = Matrix::zeros(n, d);
    let mut z = vec![0.0; d];
    for s in 0..n {
        rng.fill_normal(&mut z);
        let row = out.row_mut(s);
        for i in 0..d {
            let mut v = mean[i];
            for j in 0..=i {
                v += l.get(i, j) * z[j];
            }
            row[i] = v;
        }
    }
    Ok(out)
}
