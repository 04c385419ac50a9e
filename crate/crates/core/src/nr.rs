//! 5G NR round-trip-time measurement model.
//!
//! The gNB learns a coarse RTT from the integer timing advance (TA) obtained
//! on RACH, then refines it with the peak of the SRS channel impulse response
//! received right after the TA was applied. The one-way delay estimate is half
//! of the composed RTT. A commercial UE that only corrects its downlink timing
//! occasionally adds a ramp-and-reset offset to the measured RTT.

use serde::{Deserialize, Serialize};

use crate::channel::RngStream;
use crate::error::{Error, Result};

/// Largest NR subcarrier spacing, Hz.
pub const MAX_SUBCARRIER_SPACING: f64 = 480e3;
/// Largest NR FFT size.
pub const MAX_FFT_SIZE: f64 = 4096.0;
/// NR basic time unit Tc = 1 / (480 kHz * 4096), seconds.
pub const TC: f64 = 1.0 / (MAX_SUBCARRIER_SPACING * MAX_FFT_SIZE);

const TA_GRANULARITY: f64 = 16.0 * 64.0;

/// Relative level of the sidelobe/leakage pattern around the CIR peak.
const CIR_LEAKAGE: f64 = 0.5;
/// Upper bound of the uniform noise floor added to every CIR tap.
const CIR_NOISE_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NrConfig {
    pub numerology: u32,
    pub sample_rate: f64,
    pub cir_len: usize,
}

impl NrConfig {
    pub fn new(numerology: u32, sample_rate: f64, cir_len: usize) -> Result<Self> {
        check_numerology(numerology)?;
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::invalid("sample_rate", "must be > 0"));
        }
        if cir_len < 2 {
            return Err(Error::invalid("cir_len", "must be >= 2"));
        }
        Ok(Self {
            numerology,
            sample_rate,
            cir_len,
        })
    }

    /// Config with a CIR window twice as long as the numerology-0 TA step,
    /// which holds any rounding residual at every numerology.
    pub fn with_default_window(numerology: u32, sample_rate: f64) -> Result<Self> {
        let ta_samples = ta_unit(0)? * sample_rate;
        let cir_len = ((2.0 * ta_samples).ceil() as usize + 2).max(16);
        Self::new(numerology, sample_rate, cir_len)
    }

    /// Duration covered by the CIR, seconds.
    pub fn window(&self) -> f64 {
        self.cir_len as f64 / self.sample_rate
    }
}

/// Ramp-and-reset RTT offset caused by UE downlink clock drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SawtoothDrift {
    /// Seconds of RTT offset accumulated per step.
    pub rate: f64,
    /// Steps between downlink timing corrections.
    pub reset_period: u32,
}

impl SawtoothDrift {
    pub fn none() -> Self {
        Self {
            rate: 0.0,
            reset_period: 1,
        }
    }
}

fn check_numerology(mu: u32) -> Result<()> {
    if mu > 5 {
        return Err(Error::InvalidNumerology(mu));
    }
    Ok(())
}

/// Duration of one TA step at numerology `mu`.
pub fn ta_unit(mu: u32) -> Result<f64> {
    check_numerology(mu)?;
    Ok(TA_GRANULARITY * TC / f64::from(1u32 << mu))
}

pub fn coarse_rtt(ta: u64, mu: u32) -> Result<f64> {
    Ok(ta as f64 * ta_unit(mu)?)
}

/// Nearest timing advance for a round-trip time (round-half-away-from-zero).
pub fn ta_from_rtt(rtt: f64, mu: u32) -> Result<u64> {
    let unit = ta_unit(mu)?;
    if !(rtt >= 0.0 && rtt.is_finite()) {
        return Err(Error::invalid("rtt", "must be finite and >= 0"));
    }
    Ok((rtt / unit).round() as u64)
}

/// Magnitude CIR with its global maximum at `round(residual_delay * f_s)`.
///
/// Taps around the peak carry a sinc-shaped leakage pattern scaled by
/// [`CIR_LEAKAGE`] plus a uniform noise floor, both strictly below the peak.
pub fn synth_cir(residual_delay: f64, cfg: &NrConfig, rng: &mut RngStream) -> Result<Vec<f64>> {
    let window = cfg.window();
    if !(residual_delay >= 0.0 && residual_delay < window) {
        return Err(Error::DelayOutOfWindow {
            delay: residual_delay,
            window,
        });
    }
    let n = cfg.cir_len;
    let frac = residual_delay * cfg.sample_rate;
    let peak = (frac.round() as usize) % n;
    let cir = (0..n)
        .map(|i| {
            let noise = CIR_NOISE_FLOOR * rng.uniform(0.0, 1.0);
            if i == peak {
                return 1.0;
            }
            // circular distance from the fractional true position
            let mut d = (i as f64 - frac).rem_euclid(n as f64);
            if d > n as f64 / 2.0 {
                d -= n as f64;
            }
            CIR_LEAKAGE * sinc(d).abs() + noise
        })
        .collect();
    Ok(cir)
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Refined delay from the CIR peak; ties go to the smallest index.
pub fn srs_refine(cir: &[f64], sample_rate: f64) -> Result<f64> {
    if cir.is_empty() {
        return Err(Error::EmptyCir);
    }
    let mut best = 0;
    for (i, &v) in cir.iter().enumerate().skip(1) {
        if v > cir[best] {
            best = i;
        }
    }
    Ok(best as f64 / sample_rate)
}

/// Offset added to the measured RTT at 1-based step `n`.
pub fn drift_offset(n: usize, d: &SawtoothDrift) -> f64 {
    let period = d.reset_period.max(1) as usize;
    d.rate * (n.saturating_sub(1) % period) as f64
}

/// One-way delay estimate produced by the TA + SRS procedure.
///
/// The residual left after TA rounding can be negative; it is placed into
/// the circular CIR window and the refined peak is read back as a signed
/// offset, so the residual must stay within half the window.
pub fn estimate_toa_nr(
    true_delay: f64,
    cfg: &NrConfig,
    drift_offset: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    if !(true_delay >= 0.0 && true_delay.is_finite()) {
        return Err(Error::invalid("true_delay", "must be finite and >= 0"));
    }
    let rtt = 2.0 * true_delay + drift_offset;
    let ta = ta_from_rtt(rtt.max(0.0), cfg.numerology)?;
    let coarse = coarse_rtt(ta, cfg.numerology)?;
    let residual = rtt - coarse;
    let window = cfg.window();
    // the rounded peak index must land strictly inside the signed half-window
    if residual.abs() * cfg.sample_rate >= cfg.cir_len as f64 / 2.0 - 0.5 {
        return Err(Error::DelayOutOfWindow {
            delay: residual,
            window,
        });
    }
    let mut wrapped = residual.rem_euclid(window);
    if wrapped >= window {
        wrapped = 0.0;
    }
    let cir = synth_cir(wrapped, cfg, rng)?;
    let mut refined = srs_refine(&cir, cfg.sample_rate)?;
    if refined >= window / 2.0 {
        refined -= window;
    }
    Ok(((coarse + refined) / 2.0).max(0.0))
}
