/// Starting step on log σ⁻² when no scales are supplied.
pub const DEFAULT_PROPOSAL_SD: f64 = 0.3;

const MIN_SD: f64 = 1e-4;
const MAX_SD: f64 = 10.0;
const GAIN: f64 = 3.0;

/// One Robbins–Monro round: move each log step size toward the centre of the
/// acceptance band, with gain decaying as `round^(-1/2)`. Scales whose window
/// acceptance is above the band grow; those below shrink.
pub fn tune_proposals(sd: &[f64], window_acceptance: &[f64], round: usize, band: (f64, f64)) -> Vec<f64> {
    let target = 0.5 * (band.0 + band.1);
    let gain = GAIN / ((round + 1) as f64).sqrt();
    sd.iter()
        .zip(window_acceptance)
        .map(|(&s, &acc)| (s.ln() + gain * (acc - target)).exp().clamp(MIN_SD, MAX_SD))
        .collect()
}
