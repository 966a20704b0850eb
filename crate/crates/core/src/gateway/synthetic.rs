//! Stand-in recordings for the PV pack and the smart building, sampled once
//! a minute from 09:00 to 16:00. Times are microseconds since midnight.

use std::f64::consts::PI;

use super::profile::Profile;

pub const EPOCH_LABEL: &str = "2018-07-30T00:00 (synthetic)";

const MINUTE_US: u64 = 60_000_000;
const FIRST_MINUTE: u64 = 9 * 60;
const LAST_MINUTE: u64 = 16 * 60;

/// Peak output of the PV pack, in watts.
pub const PV_PEAK_W: f64 = 3500.0;

fn round_dw(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Bell-shaped summer-day curve with a faint ripple.
pub fn pv_profile() -> Profile {
    let samples = (FIRST_MINUTE..=LAST_MINUTE)
        .map(|minute| {
            let hour = minute as f64 / 60.0;
            let s = (PI * (hour - 6.5) / 14.0).sin().max(0.0);
            let ripple = 1.0 + 0.015 * (2.0 * PI * minute as f64 / 7.0).sin();
            (minute * MINUTE_US, round_dw(PV_PEAK_W * s.powf(1.5) * ripple))
        })
        .collect();
    Profile::new("pv", samples, EPOCH_LABEL).expect("generated times are increasing")
}

/// Office-like consumption between 1 and 3 kW with occupancy steps.
pub fn building_profile() -> Profile {
    let samples = (FIRST_MINUTE..=LAST_MINUTE)
        .map(|minute| {
            let base = match minute {
                m if m < 10 * 60 + 30 => 1100.0,
                m if m < 11 * 60 + 45 => 1350.0,
                m if m < 12 * 60 + 40 => 2600.0,
                m if m < 14 * 60 => 1900.0,
                _ => 1600.0,
            };
            let ventilation = 25.0 * (2.0 * PI * minute as f64 / 5.0).cos();
            (minute * MINUTE_US, round_dw(base + ventilation))
        })
        .collect();
    Profile::new("building", samples, EPOCH_LABEL).expect("generated times are increasing")
}

/// Looks up a generated profile by device name.
pub fn builtin(name: &str) -> Option<Profile> {
    match name {
        "pv" => Some(pv_profile()),
        "building" => Some(building_profile()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::profile::sample_hold;

    #[test]
    fn shapes() {
        let pv = pv_profile();
        assert_eq!(pv.samples.len(), 421);
        let peak = pv.samples.iter().map(|s| s.1).fold(0.0, f64::max);
        assert!(peak > 3300.0 && peak < 3600.0, "{peak}");
        let b = building_profile();
        assert!(b.samples.iter().all(|s| (1000.0..=3000.0).contains(&s.1)));
        let at_11 = 11 * 60 * MINUTE_US;
        assert!(sample_hold(&pv, at_11).unwrap() > 2500.0);
        assert!(sample_hold(&b, at_11).unwrap() > 1300.0);
    }
}
