use serde::{Deserialize, Serialize};

use super::filter::FilterBand;

/// Canonical electrophysiology bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Delta,
    Theta,
    Alpha,
    Beta,
    Gamma,
}

impl Band {
    pub const ALL: [Band; 5] = [Band::Delta, Band::Theta, Band::Alpha, Band::Beta, Band::Gamma];

    /// Edges in Hz, `[low, high)`.
    pub fn edges(self) -> (f64, f64) {
        match self {
            Band::Delta => (1.0, 4.0),
            Band::Theta => (4.0, 8.0),
            Band::Alpha => (8.0, 13.0),
            Band::Beta => (13.0, 30.0),
            Band::Gamma => (30.0, 100.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::Delta => "delta",
            Band::Theta => "theta",
            Band::Alpha => "alpha",
            Band::Beta => "beta",
            Band::Gamma => "gamma",
        }
    }

    /// Filter realising this band at `fs`. When the upper edge reaches
    /// Nyquist the band becomes a highpass and the flag is set.
    pub fn filter_band(self, fs: f64) -> (FilterBand, bool) {
        passband(self.edges(), fs)
    }
}

/// `[low, high]` as a bandpass, or a highpass when `high` is at or above
/// Nyquist (second field true).
pub fn passband((lo, hi): (f64, f64), fs: f64) -> (FilterBand, bool) {
    if hi >= fs / 2.0 {
        (FilterBand::Highpass(lo), true)
    } else {
        (FilterBand::Bandpass(lo, hi), false)
    }
}

impl std::fmt::Display for Band {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edges_are_ordered_and_contiguous() {
        for w in Band::ALL.windows(2) {
            let (a, b) = (w[0].edges(), w[1].edges());
            assert!(a.0 < a.1);
            assert_eq!(a.1, b.0);
        }
        assert_eq!(Band::Gamma.edges(), (30.0, 100.0));
        assert_eq!(Band::Delta.edges(), (1.0, 4.0));
    }

    #[test]
    fn gamma_truncates_at_nyquist() {
        assert_eq!(Band::Gamma.filter_band(200.0), (FilterBand::Highpass(30.0), true));
        assert_eq!(
            Band::Gamma.filter_band(500.0),
            (FilterBand::Bandpass(30.0, 100.0), false)
        );
    }
}
