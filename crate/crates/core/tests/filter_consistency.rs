mod common;

use common::{constant_velocity_rmse, nees_in_band_fraction};

#[test]
fn nees_lies_in_the_chi_square_band() {
    let frac = nees_in_band_fraction(100, 2024);
    assert!(frac >= 0.90, "NEES in band for {frac:.3} of steps");
}

#[test]
fn filtered_rmse_beats_raw_measurements() {
    for seed in [1, 2, 3] {
        let (filt, raw) = constant_velocity_rmse(seed);
        assert!(filt <= 0.7 * raw, "seed {seed}: filtered {filt} raw {raw}");
    }
}
