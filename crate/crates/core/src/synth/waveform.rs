use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::signal::{SignalError, SpikeTemplate, TEMPLATE_LEN};

/// Samples tapered by a raised cosine at each end of a generated template.
const TAPER_LEN: usize = 8;

/// Sample index of the trough within a rendered template.
pub const TROUGH_INDEX: usize = 20;

/// Shape parameters of a biphasic extracellular spike: a Gaussian trough
/// followed by a wider Gaussian repolarization lobe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiphasicShape {
    /// Depth of the negative trough, µV (positive number).
    pub amplitude_uv: f64,
    /// Total duration, trough onset to lobe end, seconds.
    pub duration_s: f64,
    /// Height of the repolarization lobe relative to the trough depth.
    pub lobe_ratio: f64,
    /// Lobe width relative to the trough width.
    pub lobe_width_ratio: f64,
}

impl BiphasicShape {
    /// Draws a shape with log-uniform amplitude in `amp_range_uv`, duration
    /// 0.3–1.0 ms, lobe ratio 0.3–0.5 and lobe width 1.5–2x.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, amp_range_uv: (f64, f64)) -> Self {
        let (lo, hi) = amp_range_uv;
        Self {
            amplitude_uv: (rng.random_range(lo.ln()..=hi.ln())).exp(),
            duration_s: rng.random_range(0.3e-3..=1.0e-3),
            lobe_ratio: rng.random_range(0.3..=0.5),
            lobe_width_ratio: rng.random_range(1.5..=2.0),
        }
    }

    /// Renders the shape into a [`TEMPLATE_LEN`]-sample waveform whose most
    /// negative sample equals `-amplitude_uv`.
    pub fn render(&self, base_rate_hz: f64) -> Vec<f64> {
        // Trough spans +-2 sigma, lobe +-2 sigma; total = 4 s1 + 3 s2 with the
        // lobe peak 2 s1 + s2 after the trough.
        let s1 = self.duration_s / (4.0 + 3.0 * self.lobe_width_ratio);
        let s2 = s1 * self.lobe_width_ratio;
        let delay = 2.0 * s1 + s2;
        let mut w: Vec<f64> = (0..TEMPLATE_LEN)
            .map(|i| {
                let t = (i as f64 - TROUGH_INDEX as f64) / base_rate_hz;
                -(-t * t / (2.0 * s1 * s1)).exp() + self.lobe_ratio * (-(t - delay).powi(2) / (2.0 * s2 * s2)).exp()
            })
            .collect();
        for i in 0..TAPER_LEN {
            let g = 0.5 - 0.5 * (std::f64::consts::PI * (i as f64 + 0.5) / TAPER_LEN as f64).cos();
            w[i] *= g;
            w[TEMPLATE_LEN - 1 - i] *= g;
        }
        let depth = -w.iter().cloned().fold(f64::INFINITY, f64::min);
        w.iter().map(|v| v / depth * self.amplitude_uv).collect()
    }

    pub fn template(&self, electrode_id: u32, base_rate_hz: f64) -> Result<SpikeTemplate, SignalError> {
        SpikeTemplate::new(electrode_id, &self.render(base_rate_hz), base_rate_hz)
    }
}

/// A bank of random biphasic templates; `electrode_id` is the bank index.
pub fn template_bank(n: usize, amp_range_uv: (f64, f64), base_rate_hz: f64, rng: &mut impl Rng) -> Vec<SpikeTemplate> {
    (0..n)
        .map(|i| {
            BiphasicShape::random(rng, amp_range_uv)
                .template(i as u32, base_rate_hz)
                .expect("rendered templates are non-degenerate")
        })
        .collect()
}

/// Spike times with an absolute refractory gap: each inter-spike interval is
/// `min_isi_s` plus an exponential draw, so the mean rate is `rate_hz`. Times
/// lie in `[margin_s, duration_s - margin_s)`.
pub fn spike_times<R: Rng + ?Sized>(
    rng: &mut R,
    rate_hz: f64,
    duration_s: f64,
    min_isi_s: f64,
    margin_s: f64,
) -> Vec<f64> {
    let mean_gap = (1.0 / rate_hz - min_isi_s).max(1e-6);
    let exp = Exp::new(1.0 / mean_gap).expect("positive rate");
    let mut out = Vec::new();
    let mut t = margin_s + exp.sample(rng);
    while t < duration_s - margin_s {
        out.push(t);
        t += min_isi_s + exp.sample(rng);
    }
    out
}

/// Adds `waveform * gain` so that sample `align` of the waveform lands on
/// sample index `at` of `buf`; parts falling outside `buf` are dropped.
pub fn add_waveform(buf: &mut [f64], waveform: &[f64], align: usize, at: usize, gain: f64) {
    let start = at as isize - align as isize;
    for (j, &v) in waveform.iter().enumerate() {
        let idx = start + j as isize;
        if idx >= 0 && (idx as usize) < buf.len() {
            buf[idx as usize] += v * gain;
        }
    }
}
