use super::{DataError, TARGET_RATE};

const CUTOFF_HZ: f64 = 45.0;
const STOPBAND_DB: f64 = 50.0;
/// Transition band width around the cutoff (40..50 Hz).
const TRANSITION_HZ: f64 = 10.0;
const MAX_RATIO_TERM: u32 = 1000;

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Rational resampling to 100 Hz with a Kaiser-windowed sinc low-pass at
/// 45 Hz. Each output sample is the kernel-weighted average of the input
/// around its instant, normalized by the kernel mass so DC passes exactly.
pub fn resample_to_100hz(samples: &[f32], src_rate: u32) -> Result<Vec<f32>, DataError> {
    if src_rate < TARGET_RATE {
        return Err(DataError::UnsupportedRate { rate: src_rate });
    }
    if src_rate == TARGET_RATE {
        return Ok(samples.to_vec());
    }
    let g = gcd(src_rate, TARGET_RATE);
    if src_rate / g > MAX_RATIO_TERM || TARGET_RATE / g > MAX_RATIO_TERM {
        return Err(DataError::UnsupportedRate { rate: src_rate });
    }

    let src = src_rate as f64;
    let beta = 0.1102 * (STOPBAND_DB - 8.7);
    let half_width =
        (STOPBAND_DB - 8.0) / (2.285 * 2.0 * std::f64::consts::PI * TRANSITION_HZ) / 2.0 * 1.25;
    let i0_beta = bessel_i0(beta);
    let kernel = |tau: f64| -> f64 {
        let r = tau / half_width;
        if r.abs() > 1.0 {
            return 0.0;
        }
        let w = bessel_i0(beta * (1.0 - r * r).sqrt()) / i0_beta;
        2.0 * CUTOFF_HZ / src * sinc(2.0 * CUTOFF_HZ * tau) * w
    };

    let len = samples.len();
    let out_len = ((len as u64 * TARGET_RATE as u64 + src_rate as u64 / 2) / src_rate as u64) as usize;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        // instant of output sample n, in input-sample units
        let center = n as f64 * src / TARGET_RATE as f64;
        let lo = ((center - half_width * src).ceil().max(0.0)) as usize;
        let hi = ((center + half_width * src).floor() as usize).min(len.saturating_sub(1));
        let mut acc = 0.0;
        let mut mass = 0.0;
        for (k, &x) in samples.iter().enumerate().take(hi + 1).skip(lo) {
            let h = kernel((k as f64 - center) / src);
            acc += h * x as f64;
            mass += h;
        }
        out.push(if mass != 0.0 { (acc / mass) as f32 } else { 0.0 });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, seconds: f64) -> Vec<f32> {
        let n = (seconds * rate as f64) as usize;
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin() as f32)
            .collect()
    }

    /// Index of the largest DFT magnitude among bins 1..n/2, by direct summation.
    fn dft_peak_bin(x: &[f32]) -> usize {
        let n = x.len();
        (1..n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for (i, &v) in x.iter().enumerate() {
                    let a = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                    re += v as f64 * a.cos();
                    im += v as f64 * a.sin();
                }
                (k, re * re + im * im)
            })
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0
    }

    #[test]
    fn sine_at_256hz_keeps_its_frequency() {
        let x = sine(10.0, 256, 10.0);
        let y = resample_to_100hz(&x, 256).unwrap();
        assert_eq!(y.len(), 1000);
        // 10 s at 100 Hz: bin spacing 0.1 Hz, so 10 Hz is bin 100
        assert_eq!(dft_peak_bin(&y), 100);
    }

    #[test]
    fn native_rate_is_a_bit_exact_copy() {
        let x = sine(3.0, 100, 2.0);
        assert_eq!(resample_to_100hz(&x, 100).unwrap(), x);
    }

    #[test]
    fn dc_is_preserved() {
        let x = vec![3.25f32; 2560];
        let y = resample_to_100hz(&x, 256).unwrap();
        assert_eq!(y.len(), 1000);
        for v in y {
            assert!(((v - 3.25) / 3.25).abs() < 1e-6);
        }
    }

    #[test]
    fn content_above_50hz_is_attenuated_40db() {
        for f in [55.0, 70.0, 100.0] {
            let x = sine(f, 256, 10.0);
            let y = resample_to_100hz(&x, 256).unwrap();
            let interior = &y[50..950];
            let rms = (interior.iter().map(|v| (*v as f64).powi(2)).sum::<f64>()
                / interior.len() as f64)
                .sqrt();
            // unit sine has rms 1/sqrt(2); -40 dB is a factor 100 in amplitude
            assert!(rms < 0.01 / 2f64.sqrt(), "{f} Hz leaked with rms {rms}");
        }
    }

    #[test]
    fn output_length_rounds() {
        let y = resample_to_100hz(&vec![0.0; 1001], 256).unwrap();
        assert_eq!(y.len(), 391);
    }

    #[test]
    fn rates_below_target_are_rejected() {
        assert!(matches!(
            resample_to_100hz(&[0.0; 10], 50),
            Err(DataError::UnsupportedRate { rate: 50 })
        ));
        assert!(matches!(
            resample_to_100hz(&[0.0; 10], 100_003),
            Err(DataError::UnsupportedRate { .. })
        ));
    }
}
