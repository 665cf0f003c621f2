use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Measured per-epoch training time of a device class plus its link
/// latencies, all in seconds.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    pub seconds_per_local_epoch: f64,
    #[serde(rename = "uplink_s")]
    pub uplink_latency_s: f64,
    #[serde(rename = "downlink_s")]
    pub downlink_latency_s: f64,
}

pub const JETSON_HMDB51_CSV: &str = include_str!("../../profiles/jetson_hmdb51.csv");
pub const JETSON_UCF101_CSV: &str = include_str!("../../profiles/jetson_ucf101.csv");

impl DeviceProfile {
    pub fn new(name: &str, seconds_per_local_epoch: f64) -> Result<Self> {
        let p = DeviceProfile {
            name: name.to_string(),
            seconds_per_local_epoch,
            uplink_latency_s: 0.0,
            downlink_latency_s: 0.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_latency(mut self, downlink_s: f64, uplink_s: f64) -> Result<Self> {
        self.downlink_latency_s = downlink_s;
        self.uplink_latency_s = uplink_s;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.seconds_per_local_epoch.is_finite() && self.seconds_per_local_epoch > 0.0) {
            return Err(Error::invalid(format!(
                "device {}: seconds_per_local_epoch must be > 0",
                self.name
            )));
        }
        for (what, v) in [
            ("uplink_s", self.uplink_latency_s),
            ("downlink_s", self.downlink_latency_s),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "device {}: {what} must be >= 0",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Time from fetching the model to the server receiving the update,
    /// for `local_epochs` epochs of compute.
    pub fn round_time(&self, local_epochs: f64) -> f64 {
        self.downlink_latency_s
            + local_epochs * self.seconds_per_local_epoch
            + self.uplink_latency_s
    }

    pub fn jetson_hmdb51() -> Vec<DeviceProfile> {
        parse_profiles(JETSON_HMDB51_CSV).expect("bundled profile file is valid")
    }

    pub fn jetson_ucf101() -> Vec<DeviceProfile> {
        parse_profiles(JETSON_UCF101_CSV).expect("bundled profile file is valid")
    }
}

/// Parses `name,seconds_per_local_epoch,uplink_s,downlink_s` CSV text.
pub fn parse_profiles(text: &str) -> Result<Vec<DeviceProfile>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let want = ["name", "seconds_per_local_epoch", "uplink_s", "downlink_s"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {}", want.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in reader.deserialize::<DeviceProfile>() {
        let profile = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        profile.validate()?;
        out.push(profile);
    }
    if out.is_empty() {
        return Err(Error::Empty("device profile file"));
    }
    Ok(out)
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<Vec<DeviceProfile>> {
    parse_profiles(&std::fs::read_to_string(path)?)
}

/// Slowest over fastest compute time.
pub fn heterogeneity_ratio(profiles: &[DeviceProfile]) -> Result<f64> {
    let times = profiles.iter().map(|p| p.seconds_per_local_epoch);
    let max = times.clone().fold(f64::NEG_INFINITY, f64::max);
    let min = times.fold(f64::INFINITY, f64::min);
    if profiles.is_empty() {
        return Err(Error::Empty("device profiles"));
    }
    Ok(max / min)
}
