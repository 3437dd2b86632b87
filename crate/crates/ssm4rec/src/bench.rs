//! Wall-clock scaling comparison: the linear-time recurrent layer against
//! quadratic attention over a grid of sequence lengths. Absolute times are
//! hardware-bound; the deliverable is the fitted log-log growth exponent.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_bytes, attention_macs, reference_attention_forward, AttentionParams};
use crate::error::{Error, Result};
use crate::model::{mamba_layer_forward, ModelConfig, ModelParams};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DEFAULT_LENGTHS: &[usize] = &[64, 128, 256, 512, 1024];

/// Exponents are fitted on lengths inside this window only; shorter runs
/// are dominated by fixed overhead and reported for context.
pub const FIT_RANGE: (usize, usize) = (128, 1024);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchPoint {
    pub len: usize,
    pub mamba_ms: f64,
    pub attention_ms: f64,
    pub mamba_macs: u64,
    pub attention_macs: u64,
    pub mamba_bytes_peak: usize,
    pub attention_bytes_est: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub batch: usize,
    pub d_model: usize,
    pub reps: usize,
    pub points: Vec<BenchPoint>,
    pub mamba_exponent: f64,
    pub attention_exponent: f64,
}

/// Least-squares slope of ln(y) against ln(x).
pub fn fit_log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for &(x, y) in points {
        sx += x.ln();
        sy += y.ln();
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut num, mut den) = (0.0, 0.0);
    for &(x, y) in points {
        let dx = x.ln() - mx;
        num += dx * (y.ln() - my);
        den += dx * dx;
    }
    num / den
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times `reps` single-threaded forward passes of each layer at every
/// length and fits growth exponents over [`FIT_RANGE`]. One untimed warm-up
/// run per (layer, length) settles the allocator before measurement.
pub fn run_bench(
    batch: usize,
    d_model: usize,
    lengths: &[usize],
    reps: usize,
    seed: u64,
) -> Result<BenchReport> {
    if batch == 0 {
        return Err(Error::Config("bench batch must be >= 1".into()));
    }
    if d_model == 0 {
        return Err(Error::Config("bench d_model must be >= 1".into()));
    }
    if reps < 5 {
        return Err(Error::Config(format!(
            "bench needs at least 5 repetitions for a stable median, got {reps}"
        )));
    }
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::Config("bench lengths must be positive".into()));
    }

    let mut cfg = ModelConfig::new(2, lengths.iter().copied().max().unwrap());
    cfg.d_model = d_model;
    cfg.block.d_model = d_model;
    cfg.dropout_embed = 0.0;
    cfg.dropout_hidden = 0.0;
    let params = ModelParams::<f32>::init(&cfg, &mut Rng::new(seed))?;
    let attn = AttentionParams::<f32>::init(d_model, &mut Rng::new(seed).fork("attention"));

    let mut points = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let h = Tensor::<f32>::uniform(vec![batch, l, d_model], 1.0, &mut Rng::new(seed ^ l as u64));

        let run_mamba = || -> Result<(f64, u64, usize)> {
            let start = Instant::now();
            let mut tape = Tape::new();
            let tids = params.register(&mut tape);
            let x = tape.input(h.clone());
            let mut rng = Rng::new(0); // dropout off; stream unused
            let y = mamba_layer_forward(
                &mut tape,
                x,
                &tids.layers[0],
                &cfg,
                None,
                &mut rng,
                false,
                false,
            )?;
            let elapsed = start.elapsed().as_secs_f64();
            std::hint::black_box(tape.value(y).data());
            Ok((elapsed, tape.mac_count(), tape.bytes_peak()))
        };
        run_mamba()?; // warm-up
        let mut times = Vec::with_capacity(reps);
        let (mut macs, mut bytes) = (0u64, 0usize);
        for _ in 0..reps {
            let (t, m, b) = run_mamba()?;
            times.push(t * 1e3);
            macs = m;
            bytes = b;
        }
        let mamba_ms = median(times);

        let run_attn = || -> Result<f64> {
            let start = Instant::now();
            let y = reference_attention_forward(&h, &attn)?;
            let elapsed = start.elapsed().as_secs_f64();
            std::hint::black_box(y.data());
            Ok(elapsed)
        };
        run_attn()?; // warm-up
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            times.push(run_attn()? * 1e3);
        }
        let attention_ms = median(times);

        points.push(BenchPoint {
            len: l,
            mamba_ms,
            attention_ms,
            mamba_macs: macs,
            attention_macs: attention_macs(batch, l, d_model),
            mamba_bytes_peak: bytes,
            attention_bytes_est: attention_bytes(batch, l, d_model, 4),
        });
    }

    // Fit inside the window when the grid covers it, else over everything.
    let in_fit = |p: &&BenchPoint| p.len >= FIT_RANGE.0 && p.len <= FIT_RANGE.1;
    let mut fit: Vec<&BenchPoint> = points.iter().filter(in_fit).collect();
    if fit.len() < 2 {
        fit = points.iter().collect();
    }
    if fit.len() < 2 {
        return Err(Error::Config(
            "need at least two lengths to fit an exponent".into(),
        ));
    }
    let mamba_fit: Vec<(f64, f64)> = fit.iter().map(|p| (p.len as f64, p.mamba_ms)).collect();
    let attn_fit: Vec<(f64, f64)> = fit.iter().map(|p| (p.len as f64, p.attention_ms)).collect();

    Ok(BenchReport {
        batch,
        d_model,
        reps,
        mamba_exponent: fit_log_log_slope(&mamba_fit),
        attention_exponent: fit_log_log_slope(&attn_fit),
        points,
    })
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bench report serialization")
    }

    /// Plain-text table for terminal output.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "batch={} d_model={} reps={} (median forward, ms)\n",
            self.batch, self.d_model, self.reps
        ));
        out.push_str("     len    recurrent    attention    rec MMACs   attn MMACs\n");
        for p in &self.points {
            out.push_str(&format!(
                "{:>8} {:>12.3} {:>12.3} {:>12.1} {:>12.1}\n",
                p.len,
                p.mamba_ms,
                p.attention_ms,
                p.mamba_macs as f64 / 1e6,
                p.attention_macs as f64 / 1e6,
            ));
        }
        out.push_str(&format!(
            "fitted exponents over L in {:?}: recurrent {:.3}, attention {:.3}\n",
            FIT_RANGE, self.mamba_exponent, self.attention_exponent
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_recovers_exact_power_laws() {
        let lin: Vec<(f64, f64)> = [64.0, 128.0, 256.0, 512.0]
            .iter()
            .map(|&x| (x, 0.3 * x))
            .collect();
        let quad: Vec<(f64, f64)> = [64.0, 128.0, 256.0, 512.0]
            .iter()
            .map(|&x| (x, 0.01 * x * x))
            .collect();
        assert!((fit_log_log_slope(&lin) - 1.0).abs() < 1e-12);
        assert!((fit_log_log_slope(&quad) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn median_of_odd_and_even_sample_counts() {
        assert_eq!(median(vec![5.0, 1.0, 3.0]), 3.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn zero_batch_is_rejected() {
        assert!(matches!(
            run_bench(0, 8, &[8, 16], 5, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn too_few_reps_are_rejected() {
        assert!(matches!(
            run_bench(2, 8, &[8, 16], 4, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn doubling_length_doubles_the_counted_macs() {
        // Linear layer: mac(L) = a*L + c with a fixed discretization term,
        // so consecutive differences double exactly.
        let report = run_bench(2, 16, &[32, 64, 128], 5, 3).unwrap();
        let m: Vec<u64> = report.points.iter().map(|p| p.mamba_macs).collect();
        assert_eq!(m[2] - m[1], 2 * (m[1] - m[0]));
        // Attention differences grow faster than 2x.
        let a: Vec<u64> = report.points.iter().map(|p| p.attention_macs).collect();
        assert!(a[2] - a[1] > 2 * (a[1] - a[0]));
    }

    #[test]
    fn report_lists_every_requested_length() {
        let report = run_bench(1, 8, &[16, 32, 128, 256], 5, 9).unwrap();
        let lens: Vec<usize> = report.points.iter().map(|p| p.len).collect();
        assert_eq!(lens, vec![16, 32, 128, 256]);
        assert!(report.points.iter().all(|p| p.mamba_ms > 0.0));
        let json = report.to_json();
        let back: BenchReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.points.len(), 4);
        assert!(report.table().contains("fitted exponents"));
    }
}
