//! Dipole kernel, the multi-echo nonlinear forward model, and its iterative
//! linearization.
//!
//! Susceptibility is kept in ppm everywhere; the single ppm-to-dimensionless
//! factor lives in [`phase_scale`]. The frequency-domain kernel is
//! `1/3 - (k.b)^2 / |k|^2` with the DC term pinned to zero, evaluated on the
//! unshifted FFT grid with physical frequencies `fft_freq(i, n) / voxel`.
//!
//! Linearizing the phasor model `W exp(i A chi)` around a working point
//! `chi_r` gives a real linear operator (measurements stacked over echoes,
//! then split into real and imaginary parts) plus an effective data vector;
//! both are packaged in [`LinearizedModel`] for the solver.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QsmError, Result};
use crate::fourier::{fft_freq, Fft3};
use crate::volume::{read_qvol, write_qvol, FieldKind, Volume};

/// Proton gyromagnetic ratio in Hz/T.
pub const GYROMAGNETIC_RATIO_HZ_PER_T: f64 = 42.577478e6;

/// Frequency-domain dipole kernel sampled on a volume's FFT grid.
#[derive(Debug, Clone)]
pub struct KSpaceDipole {
    dims: [usize; 3],
    values: Vec<f64>,
}

impl KSpaceDipole {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn dipole_kernel(
    dims: [usize; 3],
    voxel_size_mm: [f64; 3],
    b0_dir: [f64; 3],
) -> Result<KSpaceDipole> {
    if dims.iter().any(|&d| d == 0) {
        return Err(QsmError::invalid("kernel dims must be >= 1"));
    }
    if voxel_size_mm.iter().any(|&v| !(v > 0.0)) {
        return Err(QsmError::invalid("voxel sizes must be > 0"));
    }
    let norm = b0_dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(QsmError::invalid("b0_dir must be a unit vector"));
    }

    let [nx, ny, nz] = dims;
    let mut values = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        let fz = fft_freq(k, nz, voxel_size_mm[2]);
        for j in 0..ny {
            let fy = fft_freq(j, ny, voxel_size_mm[1]);
            for i in 0..nx {
                let fx = fft_freq(i, nx, voxel_size_mm[0]);
                let k_sq = fx * fx + fy * fy + fz * fz;
                if k_sq == 0.0 {
                    values.push(0.0);
                } else {
                    let proj = fx * b0_dir[0] + fy * b0_dir[1] + fz * b0_dir[2];
                    values.push(1.0 / 3.0 - proj * proj / k_sq);
                }
            }
        }
    }
    Ok(KSpaceDipole { dims, values })
}

/// Acquisition timing and field strength shared by all echoes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EchoProtocol {
    #[serde(rename = "b0_T")]
    pub b0_t: f64,
    #[serde(default = "default_gamma")]
    pub gamma_hz_per_t: f64,
    pub echo_times_s: Vec<f64>,
}

fn default_gamma() -> f64 {
    GYROMAGNETIC_RATIO_HZ_PER_T
}

impl EchoProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.b0_t > 0.0) {
            return Err(QsmError::invalid("b0_T must be > 0"));
        }
        if !(self.gamma_hz_per_t > 0.0) {
            return Err(QsmError::invalid("gamma_hz_per_t must be > 0"));
        }
        if self.echo_times_s.is_empty() {
            return Err(QsmError::invalid("echo_times_s must not be empty"));
        }
        let mut prev = 0.0;
        for &t in &self.echo_times_s {
            if !(t > 0.0) || t <= prev {
                return Err(QsmError::invalid(
                    "echo_times_s must be positive and strictly increasing",
                ));
            }
            prev = t;
        }
        Ok(())
    }

    pub fn echo_count(&self) -> usize {
        self.echo_times_s.len()
    }
}

/// Phase accrued per ppm of susceptibility at echo `e`, in rad.
pub fn phase_scale(protocol: &EchoProtocol, echo: usize) -> f64 {
    2.0 * std::f64::consts::PI
        * protocol.gamma_hz_per_t
        * protocol.echo_times_s[echo]
        * protocol.b0_t
        * 1e-6
}

/// Per-echo local-field phases and magnitude weights on a shared grid.
#[derive(Debug, Clone)]
pub struct EchoSet {
    pub protocol: EchoProtocol,
    pub phases: Vec<Volume>,
    pub weights: Vec<Volume>,
}

impl EchoSet {
    pub fn new(protocol: EchoProtocol, phases: Vec<Volume>, weights: Vec<Volume>) -> Result<Self> {
        protocol.validate()?;
        if phases.len() != protocol.echo_count() || weights.len() != protocol.echo_count() {
            return Err(QsmError::invalid(format!(
                "expected {} phase and weight volumes, got {} and {}",
                protocol.echo_count(),
                phases.len(),
                weights.len()
            )));
        }
        let dims = phases[0].dims();
        for v in phases.iter().chain(weights.iter()) {
            if v.dims() != dims {
                return Err(QsmError::DimMismatch {
                    expected: dims,
                    found: v.dims(),
                });
            }
            v.as_real()?;
        }
        for w in &weights {
            if w.as_real()?.iter().any(|&x| x < 0.0) {
                return Err(QsmError::invalid("echo weights must be >= 0"));
            }
        }
        Ok(EchoSet {
            protocol,
            phases,
            weights,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.phases[0].dims()
    }

    pub fn voxel_count(&self) -> usize {
        self.phases[0].voxel_count()
    }

    pub fn echo_count(&self) -> usize {
        self.protocol.echo_count()
    }

    /// Writes `protocol.json` plus `phase_<e>.qvol` / `weight_<e>.qvol`
    /// pairs into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| QsmError::io(dir, e))?;
        let proto_path = dir.join("protocol.json");
        let text = serde_json::to_string_pretty(&self.protocol)
            .map_err(|e| QsmError::json(&proto_path, e))?;
        fs::write(&proto_path, text).map_err(|e| QsmError::io(&proto_path, e))?;
        for e in 0..self.echo_count() {
            write_qvol(&self.phases[e], dir.join(format!("phase_{e}.qvol")))?;
            write_qvol(&self.weights[e], dir.join(format!("weight_{e}.qvol")))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let proto_path = dir.join("protocol.json");
        let text =
            fs::read_to_string(&proto_path).map_err(|e| QsmError::io(&proto_path, e))?;
        let protocol: EchoProtocol =
            serde_json::from_str(&text).map_err(|e| QsmError::json(&proto_path, e))?;
        protocol.validate()?;
        let mut phases = Vec::new();
        let mut weights = Vec::new();
        for e in 0..protocol.echo_count() {
            phases.push(read_qvol(dir.join(format!("phase_{e}.qvol")))?);
            weights.push(read_qvol(dir.join(format!("weight_{e}.qvol")))?);
        }
        EchoSet::new(protocol, phases, weights)
    }
}

/// Tissue field in ppm induced by a susceptibility map in ppm.
pub fn field_from_chi(chi: &Volume, kernel: &KSpaceDipole) -> Result<Volume> {
    if chi.dims() != kernel.dims() {
        return Err(QsmError::DimMismatch {
            expected: kernel.dims(),
            found: chi.dims(),
        });
    }
    let fft = Fft3::new(chi.dims());
    let field = apply_kernel(chi.as_real()?, kernel, &fft);
    Volume::like(chi, FieldKind::FieldPpm, field)
}

/// `real(ifft(D * fft(x)))` on a raw slice; the shared low-level path.
fn apply_kernel(x: &[f64], kernel: &KSpaceDipole, fft: &Fft3) -> Vec<f64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.forward(&mut buf);
    for (z, &d) in buf.iter_mut().zip(kernel.values()) {
        *z *= d;
    }
    fft.inverse(&mut buf);
    buf.iter().map(|z| z.re).collect()
}

/// Complex-in, complex-out version of the kernel convolution (the operator
/// is Hermitian, so this doubles as its adjoint).
fn apply_kernel_complex(x: &mut Vec<Complex64>, kernel: &KSpaceDipole, fft: &Fft3) {
    fft.forward(x);
    for (z, &d) in x.iter_mut().zip(kernel.values()) {
        *z *= d;
    }
    fft.inverse(x);
}

/// Noise-free phasor measurements `W_e * exp(i * A_e * chi)` per echo.
pub fn forward_measurements(
    chi: &Volume,
    protocol: &EchoProtocol,
    weights: &[Volume],
    kernel: &KSpaceDipole,
) -> Result<Vec<Vec<Complex64>>> {
    protocol.validate()?;
    let field = field_from_chi(chi, kernel)?;
    let field = field.as_real()?;
    let mut out = Vec::with_capacity(protocol.echo_count());
    for (e, w) in weights.iter().enumerate() {
        if w.dims() != chi.dims() {
            return Err(QsmError::DimMismatch {
                expected: chi.dims(),
                found: w.dims(),
            });
        }
        let scale = phase_scale(protocol, e);
        let w = w.as_real()?;
        out.push(
            field
                .iter()
                .zip(w)
                .map(|(&f, &wv)| {
                    let phi = scale * f;
                    Complex64::new(phi.cos(), phi.sin()) * wv
                })
                .collect(),
        );
    }
    Ok(out)
}

/// Taylor offset `g(chi_r) = W_e exp(i A_e chi_r) (i A_e chi_r - 1)` per echo.
pub fn g_offset(
    chi_r: &Volume,
    protocol: &EchoProtocol,
    weights: &[Volume],
    kernel: &KSpaceDipole,
) -> Result<Vec<Vec<Complex64>>> {
    protocol.validate()?;
    let field = field_from_chi(chi_r, kernel)?;
    let field = field.as_real()?;
    let mut out = Vec::with_capacity(protocol.echo_count());
    for (e, w) in weights.iter().enumerate() {
        if w.dims() != chi_r.dims() {
            return Err(QsmError::DimMismatch {
                expected: chi_r.dims(),
                found: w.dims(),
            });
        }
        let scale = phase_scale(protocol, e);
        let w = w.as_real()?;
        out.push(
            field
                .iter()
                .zip(w)
                .map(|(&f, &wv)| {
                    let phi = scale * f;
                    let phasor = Complex64::new(phi.cos(), phi.sin());
                    wv * phasor * (Complex64::new(0.0, phi) - 1.0)
                })
                .collect(),
        );
    }
    Ok(out)
}

/// Number of probe vectors used for the Frobenius-norm estimate.
const FROBENIUS_PROBES: usize = 8;
const FROBENIUS_SEED: u64 = 0x51b3_17c4;

/// First-order model of the phasor measurements around a working point.
///
/// `apply` maps a susceptibility volume (N reals) to stacked weighted
/// measurements (2*E*N reals: all real parts, then all imaginary parts);
/// `adjoint` is the exact transpose of that real map. `rhs` is the data the
/// linear model should reproduce: `W exp(i phi) + g(chi_r)`, realified the
/// same way.
pub struct LinearizedModel {
    dims: [usize; 3],
    fft: Fft3,
    kernel: KSpaceDipole,
    /// per echo: phase scale s_e, weights, phasor at the working point
    scales: Vec<f64>,
    weights: Vec<Vec<f64>>,
    phasors: Vec<Vec<Complex64>>,
    rhs: Vec<f64>,
    frob_norm_sq: f64,
}

impl LinearizedModel {
    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn frob_norm_sq_estimate(&self) -> f64 {
        self.frob_norm_sq
    }

    pub fn rows(&self) -> usize {
        2 * self.scales.len() * self.voxel_count()
    }

    pub fn cols(&self) -> usize {
        self.voxel_count()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn apply(&self, chi: &[f64]) -> Vec<f64> {
        assert_eq!(chi.len(), self.cols());
        let field = apply_kernel(chi, &self.kernel, &self.fft);
        let n = self.voxel_count();
        let echoes = self.scales.len();
        let mut out = vec![0.0; 2 * echoes * n];
        for e in 0..echoes {
            let s = self.scales[e];
            for m in 0..n {
                // i * W * phasor * (s * field)
                let z = Complex64::new(0.0, self.weights[e][m] * s * field[m])
                    * self.phasors[e][m];
                out[e * n + m] = z.re;
                out[echoes * n + e * n + m] = z.im;
            }
        }
        out
    }

    pub fn adjoint(&self, w: &[f64]) -> Vec<f64> {
        assert_eq!(w.len(), self.rows());
        let n = self.voxel_count();
        let echoes = self.scales.len();
        let mut acc = vec![Complex64::default(); n];
        for e in 0..echoes {
            let s = self.scales[e];
            for m in 0..n {
                let wc = Complex64::new(w[e * n + m], w[echoes * n + e * n + m]);
                // conj(i * W * phasor * s) * w
                let c = Complex64::new(0.0, self.weights[e][m] * s) * self.phasors[e][m];
                acc[m] += c.conj() * wc;
            }
        }
        apply_kernel_complex(&mut acc, &self.kernel, &self.fft);
        acc.iter().map(|z| z.re).collect()
    }
}

/// Builds the linearized model at `chi_r`, including the effective data
/// vector and a probed Frobenius-norm estimate.
pub fn linearize(chi_r: &Volume, echoes: &EchoSet, kernel: &KSpaceDipole) -> Result<LinearizedModel> {
    let dims = echoes.dims();
    if chi_r.dims() != dims {
        return Err(QsmError::DimMismatch {
            expected: dims,
            found: chi_r.dims(),
        });
    }
    if kernel.dims() != dims {
        return Err(QsmError::DimMismatch {
            expected: dims,
            found: kernel.dims(),
        });
    }
    let n = echoes.voxel_count();
    let e_count = echoes.echo_count();
    let fft = Fft3::new(dims);

    let field = apply_kernel(chi_r.as_real()?, kernel, &fft);
    let mut scales = Vec::with_capacity(e_count);
    let mut weights = Vec::with_capacity(e_count);
    let mut phasors = Vec::with_capacity(e_count);
    let mut rhs = vec![0.0; 2 * e_count * n];
    for e in 0..e_count {
        let s = phase_scale(&echoes.protocol, e);
        let w = echoes.weights[e].as_real()?.to_vec();
        let phases = echoes.phases[e].as_real()?;
        let mut phasor = Vec::with_capacity(n);
        for m in 0..n {
            let phi_r = s * field[m];
            let pz = Complex64::new(phi_r.cos(), phi_r.sin());
            phasor.push(pz);
            // rhs = W exp(i phi_meas) + g(chi_r), with
            // g = W * pz * (i*phi_r - 1)
            let meas = Complex64::new(phases[m].cos(), phases[m].sin()) * w[m];
            let g = w[m] * pz * (Complex64::new(0.0, phi_r) - 1.0);
            let val = meas + g;
            rhs[e * n + m] = val.re;
            rhs[e_count * n + e * n + m] = val.im;
        }
        scales.push(s);
        weights.push(w);
        phasors.push(phasor);
    }

    let mut model = LinearizedModel {
        dims,
        fft,
        kernel: kernel.clone(),
        scales,
        weights,
        phasors,
        rhs,
        frob_norm_sq: 0.0,
    };
    model.frob_norm_sq = hutchinson_frob_norm_sq(&model);
    Ok(model)
}

/// `E[|J z|^2]` over Rademacher probes equals `|J|_F^2`.
fn hutchinson_frob_norm_sq(model: &LinearizedModel) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(FROBENIUS_SEED);
    let n = model.cols();
    let mut acc = 0.0;
    for _ in 0..FROBENIUS_PROBES {
        let probe: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let out = model.apply(&probe);
        acc += out.iter().map(|x| x * x).sum::<f64>();
    }
    acc / FROBENIUS_PROBES as f64
}

/// Moment summary and histogram of the densified single-echo operator.
#[derive(Debug, Clone, Serialize)]
pub struct OperatorEntryStats {
    pub samples: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// max over rows of |row mean| / row 2-norm
    pub max_rel_row_mean: f64,
    pub histogram: Vec<HistogramBin>,
}

#[derive(Debug, Clone, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

pub const DENSIFY_LIMIT: usize = 2048;

/// Densifies `A_e = s_e * ifft(D * fft(.))` for the first echo by applying
/// it to unit vectors, then summarizes the entry distribution. Guarded to
/// small grids: the dense matrix has `N^2` entries.
pub fn operator_entry_stats(
    dims: [usize; 3],
    voxel_size_mm: [f64; 3],
    b0_dir: [f64; 3],
    protocol: &EchoProtocol,
    bins: usize,
) -> Result<OperatorEntryStats> {
    protocol.validate()?;
    let n: usize = dims.iter().product();
    if n > DENSIFY_LIMIT {
        return Err(QsmError::SizeGuard {
            unknowns: n,
            limit: DENSIFY_LIMIT,
        });
    }
    let bins = bins.max(50);
    let kernel = dipole_kernel(dims, voxel_size_mm, b0_dir)?;
    let fft = Fft3::new(dims);
    let scale = phase_scale(protocol, 0);

    // columns of A_e; entries gathered row-major for row statistics
    let mut entries = vec![0.0; n * n];
    let mut unit = vec![0.0; n];
    for col in 0..n {
        unit[col] = 1.0;
        let out = apply_kernel(&unit, &kernel, &fft);
        unit[col] = 0.0;
        for row in 0..n {
            entries[row * n + col] = scale * out[row];
        }
    }

    let total = (n * n) as f64;
    let mean = entries.iter().sum::<f64>() / total;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &x in &entries {
        let d = x - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= total;
    m3 /= total;
    m4 /= total;
    let variance = m2;
    let skewness = m3 / m2.powf(1.5);
    let excess_kurtosis = m4 / (m2 * m2) - 3.0;

    let mut max_rel_row_mean: f64 = 0.0;
    for row in 0..n {
        let r = &entries[row * n..(row + 1) * n];
        let rm = r.iter().sum::<f64>() / n as f64;
        let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if rn > 0.0 {
            max_rel_row_mean = max_rel_row_mean.max(rm.abs() / rn);
        }
    }

    let lo = entries.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = entries.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let mut counts = vec![0usize; bins];
    for &x in &entries {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let histogram = counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| HistogramBin {
            lo: lo + b as f64 * width,
            hi: lo + (b + 1) as f64 * width,
            count,
        })
        .collect();

    Ok(OperatorEntryStats {
        samples: n * n,
        mean,
        variance,
        skewness,
        excess_kurtosis,
        max_rel_row_mean,
        histogram,
    })
}
