//! Small 3D FFT wrapper over rustfft.
//!
//! Forward is unnormalized, inverse carries the full 1/N factor, so
//! `inverse(forward(x)) == x` and `inverse ∘ diag(D) ∘ forward` equals the
//! unitary-FFT conjugation used throughout the dipole model.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub struct Fft3 {
    dims: [usize; 3],
    forward: [Arc<dyn Fft<f64>>; 3],
    inverse: [Arc<dyn Fft<f64>>; 3],
}

impl Fft3 {
    pub fn new(dims: [usize; 3]) -> Self {
        let mut planner = FftPlanner::new();
        let forward = [
            planner.plan_fft_forward(dims[0]),
            planner.plan_fft_forward(dims[1]),
            planner.plan_fft_forward(dims[2]),
        ];
        let inverse = [
            planner.plan_fft_inverse(dims[0]),
            planner.plan_fft_inverse(dims[1]),
            planner.plan_fft_inverse(dims[2]),
        ];
        Fft3 {
            dims,
            forward,
            inverse,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        assert_eq!(data.len(), self.len());
        for axis in 0..3 {
            self.axis_pass(data, axis, &self.forward[axis]);
        }
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        assert_eq!(data.len(), self.len());
        for axis in 0..3 {
            self.axis_pass(data, axis, &self.inverse[axis]);
        }
        let scale = 1.0 / self.len() as f64;
        for z in data.iter_mut() {
            *z *= scale;
        }
    }

    fn axis_pass(&self, data: &mut [Complex64], axis: usize, plan: &Arc<dyn Fft<f64>>) {
        let [nx, ny, nz] = self.dims;
        match axis {
            0 => {
                for lane in data.chunks_exact_mut(nx) {
                    plan.process(lane);
                }
            }
            1 => {
                let mut lane = vec![Complex64::default(); ny];
                for k in 0..nz {
                    for i in 0..nx {
                        let base = i + nx * ny * k;
                        for j in 0..ny {
                            lane[j] = data[base + nx * j];
                        }
                        plan.process(&mut lane);
                        for j in 0..ny {
                            data[base + nx * j] = lane[j];
                        }
                    }
                }
            }
            2 => {
                let stride = nx * ny;
                let mut lane = vec![Complex64::default(); nz];
                for j in 0..ny {
                    for i in 0..nx {
                        let base = i + nx * j;
                        for k in 0..nz {
                            lane[k] = data[base + stride * k];
                        }
                        plan.process(&mut lane);
                        for k in 0..nz {
                            data[base + stride * k] = lane[k];
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
    }
}

/// Discrete frequency for index `idx` on an `n`-point grid in standard FFT
/// ordering, in cycles per unit `spacing`.
pub fn fft_freq(idx: usize, n: usize, spacing: f64) -> f64 {
    let signed = if idx <= (n - 1) / 2 {
        idx as isize
    } else {
        idx as isize - n as isize
    };
    signed as f64 / (n as f64 * spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_volume(dims: [usize; 3], seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..dims.iter().product())
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn forward_inverse_roundtrip() {
        let dims = [6, 4, 8];
        let fft = Fft3::new(dims);
        let orig = rand_volume(dims, 7);
        let mut data = orig.clone();
        fft.forward(&mut data);
        fft.inverse(&mut data);
        for (a, b) in data.iter().zip(&orig) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_dft_on_small_grid() {
        let dims = [4, 3, 2];
        let n = [4usize, 3, 2];
        let fft = Fft3::new(dims);
        let x = rand_volume(dims, 11);
        let mut got = x.clone();
        fft.forward(&mut got);

        let idx = |i: usize, j: usize, k: usize| i + n[0] * (j + n[1] * k);
        for kz in 0..n[2] {
            for ky in 0..n[1] {
                for kx in 0..n[0] {
                    let mut acc = Complex64::default();
                    for z in 0..n[2] {
                        for y in 0..n[1] {
                            for xi in 0..n[0] {
                                let phase = -2.0
                                    * std::f64::consts::PI
                                    * (kx as f64 * xi as f64 / n[0] as f64
                                        + ky as f64 * y as f64 / n[1] as f64
                                        + kz as f64 * z as f64 / n[2] as f64);
                                acc += x[idx(xi, y, z)]
                                    * Complex64::new(phase.cos(), phase.sin());
                            }
                        }
                    }
                    assert!((got[idx(kx, ky, kz)] - acc).norm() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn fft_freq_ordering() {
        // n = 4: 0, 1/4, -2/4, -1/4
        assert_eq!(fft_freq(0, 4, 1.0), 0.0);
        assert_eq!(fft_freq(1, 4, 1.0), 0.25);
        assert_eq!(fft_freq(2, 4, 1.0), -0.5);
        assert_eq!(fft_freq(3, 4, 1.0), -0.25);
        // spacing scales frequencies
        assert_eq!(fft_freq(1, 4, 0.5), 0.5);
        // odd n = 5: 0, 1/5, 2/5, -2/5, -1/5
        assert_eq!(fft_freq(2, 5, 1.0), 0.4);
        assert_eq!(fft_freq(3, 5, 1.0), -0.4);
    }
}
