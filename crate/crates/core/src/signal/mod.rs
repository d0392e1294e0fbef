//! Synthetic I/Q signal generation: baseband modulators and AWGN.

pub mod dataset;

use std::f64::consts::{FRAC_PI_4, PI};
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{generate_dataset, split, synthesize_dataset, DatasetSpec, DatasetSummary, SignalDataset, Split, Subset};

/// Modulation index of binary FSK (phase restarts every symbol).
pub const FSK2_MOD_INDEX: f64 = 1.0;
/// Modulation index of continuous-phase FSK.
pub const CPFSK_MOD_INDEX: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ModScheme {
    Bpsk,
    Qpsk,
    #[serde(rename = "8PSK")]
    Psk8,
    Pam4,
    #[serde(rename = "16QAM")]
    Qam16,
    #[serde(rename = "2FSK")]
    Fsk2,
    Cpfsk,
}

impl ModScheme {
    pub const ALL: [ModScheme; 7] = [
        ModScheme::Bpsk,
        ModScheme::Qpsk,
        ModScheme::Psk8,
        ModScheme::Pam4,
        ModScheme::Qam16,
        ModScheme::Fsk2,
        ModScheme::Cpfsk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModScheme::Bpsk => "BPSK",
            ModScheme::Qpsk => "QPSK",
            ModScheme::Psk8 => "8PSK",
            ModScheme::Pam4 => "PAM4",
            ModScheme::Qam16 => "16QAM",
            ModScheme::Fsk2 => "2FSK",
            ModScheme::Cpfsk => "CPFSK",
        }
    }

    pub fn alphabet_size(self) -> usize {
        match self {
            ModScheme::Bpsk | ModScheme::Fsk2 | ModScheme::Cpfsk => 2,
            ModScheme::Qpsk | ModScheme::Pam4 => 4,
            ModScheme::Psk8 => 8,
            ModScheme::Qam16 => 16,
        }
    }

    /// Constellation point of `symbol` for the memoryless linear schemes;
    /// `None` for the frequency-shift schemes.
    pub fn constellation_point(self, symbol: usize) -> Option<Complex64> {
        const PAM: [f64; 4] = [-3.0, -1.0, 1.0, 3.0];
        Some(match self {
            ModScheme::Bpsk => Complex64::new(if symbol == 0 { 1.0 } else { -1.0 }, 0.0),
            ModScheme::Qpsk => Complex64::from_polar(1.0, FRAC_PI_4 + symbol as f64 * PI / 2.0),
            ModScheme::Psk8 => Complex64::from_polar(1.0, symbol as f64 * PI / 4.0),
            ModScheme::Pam4 => Complex64::new(PAM[symbol] / 5f64.sqrt(), 0.0),
            ModScheme::Qam16 => Complex64::new(PAM[symbol % 4], PAM[symbol / 4]) / 10f64.sqrt(),
            ModScheme::Fsk2 | ModScheme::Cpfsk => return None,
        })
    }

    /// Full constellation (linear schemes only).
    pub fn constellation(self) -> Option<Vec<Complex64>> {
        (0..self.alphabet_size()).map(|s| self.constellation_point(s)).collect()
    }
}

impl fmt::Display for ModScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModScheme::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig {
                key: "schemes".into(),
                message: format!("unknown modulation {s:?}"),
            })
    }
}

/// Rectangular-pulse baseband waveform, `sps` samples per symbol.
pub fn modulate(scheme: ModScheme, symbols: &[usize], sps: usize) -> Result<Vec<Complex64>> {
    if sps == 0 {
        return Err(Error::Precondition("samples per symbol must be >= 1".into()));
    }
    if let Some(&bad) = symbols.iter().find(|&&s| s >= scheme.alphabet_size()) {
        return Err(Error::Precondition(format!(
            "symbol {bad} outside the {}-ary {scheme} alphabet",
            scheme.alphabet_size()
        )));
    }
    let mut out = Vec::with_capacity(symbols.len() * sps);
    match scheme {
        ModScheme::Fsk2 => {
            for &s in symbols {
                let dir = if s == 0 { -1.0 } else { 1.0 };
                let step = dir * PI * FSK2_MOD_INDEX / sps as f64;
                out.extend((0..sps).map(|n| Complex64::from_polar(1.0, step * n as f64)));
            }
        }
        ModScheme::Cpfsk => {
            let mut phase = 0.0f64;
            for &s in symbols {
                let dir = if s == 0 { -1.0 } else { 1.0 };
                let step = dir * PI * CPFSK_MOD_INDEX / sps as f64;
                for _ in 0..sps {
                    out.push(Complex64::from_polar(1.0, phase));
                    phase = (phase + step).rem_euclid(2.0 * PI);
                }
            }
        }
        _ => {
            for &s in symbols {
                let p = scheme.constellation_point(s).expect("linear scheme");
                out.extend(std::iter::repeat_n(p, sps));
            }
        }
    }
    Ok(out)
}

pub fn mean_power(signal: &[Complex64]) -> f64 {
    if signal.is_empty() {
        return 0.0;
    }
    signal.iter().map(|c| c.norm_sqr()).sum::<f64>() / signal.len() as f64
}

/// Scales `signal` to unit mean power (no-op for an all-zero signal).
pub fn normalize_power(signal: &mut [Complex64]) {
    let p = mean_power(signal);
    if p > 0.0 {
        let s = p.sqrt().recip();
        for c in signal.iter_mut() {
            *c *= s;
        }
    }
}

/// Adds circular complex Gaussian noise for the requested SNR, measured
/// against the signal's own mean power. `f64::INFINITY` adds no noise.
pub fn apply_awgn<R: Rng + ?Sized>(signal: &[Complex64], snr_db: f64, rng: &mut R) -> Vec<Complex64> {
    if snr_db == f64::INFINITY {
        return signal.to_vec();
    }
    let sigma = (mean_power(signal) / (2.0 * 10f64.powf(snr_db / 10.0))).sqrt();
    signal
        .iter()
        .map(|&c| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            c + Complex64::new(re, im) * sigma
        })
        .collect()
}
