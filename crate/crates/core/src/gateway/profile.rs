//! Recorded device power curves and their playback.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("profile parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("timestamps not strictly increasing at line {line} (t_us = {t_us})")]
    NonMonotoneTime { line: u64, t_us: u64 },
    #[error("window [{start_us}, {end_us}) is empty or inverted")]
    InvalidWindow { start_us: u64, end_us: u64 },
    #[error("no samples inside window [{start_us}, {end_us})")]
    EmptyWindow { start_us: u64, end_us: u64 },
    #[error("t = {t_us} us precedes the first sample at {first_us} us")]
    BeforeStart { t_us: u64, first_us: u64 },
}

pub const CSV_HEADER: &str = "t_us,power_w";

#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub device_id: String,
    /// `(t_us, power_w)`, strictly increasing in time, never empty.
    pub samples: Vec<(u64, f64)>,
    pub epoch_label: String,
}

impl Profile {
    pub fn new(device_id: &str, samples: Vec<(u64, f64)>, epoch_label: &str) -> Result<Self, ProfileError> {
        if samples.is_empty() {
            return Err(ProfileError::Parse {
                line: 1,
                message: "no samples".into(),
            });
        }
        for (i, w) in samples.windows(2).enumerate() {
            if w[1].0 <= w[0].0 {
                return Err(ProfileError::NonMonotoneTime {
                    line: i as u64 + 3,
                    t_us: w[1].0,
                });
            }
        }
        Ok(Self {
            device_id: device_id.to_string(),
            samples,
            epoch_label: epoch_label.to_string(),
        })
    }

    pub fn first_t(&self) -> u64 {
        self.samples[0].0
    }

    pub fn last_t(&self) -> u64 {
        self.samples[self.samples.len() - 1].0
    }

    /// Renders the profile in the on-disk CSV layout.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if !self.epoch_label.is_empty() {
            out.push_str(&format!("# epoch: {}\n", self.epoch_label));
        }
        out.push_str(CSV_HEADER);
        out.push('\n');
        for (t, p) in &self.samples {
            out.push_str(&format!("{t},{p}\n"));
        }
        out
    }
}

/// Parses a `t_us,power_w` CSV. Leading `# epoch: <label>` lines set the
/// epoch label; other `#` lines are ignored.
pub fn load_profile(device_id: &str, csv_text: &str) -> Result<Profile, ProfileError> {
    let epoch_label = csv_text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.trim_start_matches('#').trim().strip_prefix("epoch:"))
        .map(|s| s.trim().to_string())
        .unwrap_or_default();

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(csv_text.as_bytes());

    let headers = reader.headers().map_err(|e| ProfileError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if headers.iter().map(str::trim).collect::<Vec<_>>() != ["t_us", "power_w"] {
        return Err(ProfileError::Parse {
            line: headers.position().map_or(1, |p| p.line()),
            message: format!("expected header `{CSV_HEADER}`"),
        });
    }

    let mut samples: Vec<(u64, f64)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| ProfileError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| ProfileError::Parse { line, message };
        if record.len() != 2 {
            return Err(bad(format!("expected 2 fields, got {}", record.len())));
        }
        let t: u64 = record[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad t_us {:?}", &record[0])))?;
        let p: f64 = record[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad power_w {:?}", &record[1])))?;
        if !p.is_finite() {
            return Err(bad("non-finite power".into()));
        }
        if let Some(&(prev, _)) = samples.last() {
            if t <= prev {
                return Err(ProfileError::NonMonotoneTime { line, t_us: t });
            }
        }
        samples.push((t, p));
    }
    if samples.is_empty() {
        return Err(ProfileError::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    Ok(Profile {
        device_id: device_id.to_string(),
        samples,
        epoch_label,
    })
}

/// Keeps samples with `start <= t < end`, re-based so `start` becomes 0.
pub fn crop_window(p: &Profile, start_us: u64, end_us: u64) -> Result<Profile, ProfileError> {
    if start_us >= end_us {
        return Err(ProfileError::InvalidWindow { start_us, end_us });
    }
    let samples: Vec<(u64, f64)> = p
        .samples
        .iter()
        .filter(|(t, _)| (start_us..end_us).contains(t))
        .map(|&(t, v)| (t - start_us, v))
        .collect();
    if samples.is_empty() {
        return Err(ProfileError::EmptyWindow { start_us, end_us });
    }
    Ok(Profile {
        device_id: p.device_id.clone(),
        samples,
        epoch_label: p.epoch_label.clone(),
    })
}

/// Zero-order hold: value of the latest sample at or before `t_us`.
pub fn sample_hold(p: &Profile, t_us: u64) -> Result<f64, ProfileError> {
    let idx = p.samples.partition_point(|&(t, _)| t <= t_us);
    if idx == 0 {
        return Err(ProfileError::BeforeStart {
            t_us,
            first_us: p.first_t(),
        });
    }
    Ok(p.samples[idx - 1].1)
}
