//! Exact rational time used by the simulator, traces and timers.

use std::fmt;
use std::ops::{Add, Mul, Sub};
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A point in (or span of) simulated time. Arithmetic is exact, so latency
/// assertions such as "exactly three message delays" need no tolerance.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Time(Ratio<u64>);

impl Time {
    pub const ZERO: Time = Time(Ratio::new_raw(0, 1));

    pub fn new(numer: u64, denom: u64) -> Time {
        Time(Ratio::new(numer, denom))
    }

    pub fn from_int(n: u64) -> Time {
        Time(Ratio::from_integer(n))
    }

    pub fn numer(&self) -> u64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> u64 {
        *self.0.denom()
    }

    /// `self / unit` as an exact ratio, e.g. a latency in units of delta.
    pub fn in_units_of(&self, unit: Time) -> Ratio<u64> {
        self.0 / unit.0
    }

    /// Saturating difference.
    pub fn since(&self, earlier: Time) -> Time {
        if earlier >= *self {
            Time::ZERO
        } else {
            Time(self.0 - earlier.0)
        }
    }

    pub fn as_f64(&self) -> f64 {
        self.numer() as f64 / self.denom() as f64
    }
}

impl Add for Time {
    type Output = Time;
    fn add(self, rhs: Time) -> Time {
        Time(self.0 + rhs.0)
    }
}

impl Sub for Time {
    type Output = Time;
    fn sub(self, rhs: Time) -> Time {
        Time(self.0 - rhs.0)
    }
}

impl Mul<u64> for Time {
    type Output = Time;
    fn mul(self, rhs: u64) -> Time {
        Time(self.0 * rhs)
    }
}

impl fmt::Display for Time {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numer(), self.denom())
    }
}

impl fmt::Debug for Time {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid time literal {0:?}: expected \"num/den\" or an integer")]
pub struct ParseTimeError(String);

impl FromStr for Time {
    type Err = ParseTimeError;

    fn from_str(s: &str) -> Result<Time, ParseTimeError> {
        let err = || ParseTimeError(s.to_string());
        match s.split_once('/') {
            Some((n, d)) => {
                let n: u64 = n.trim().parse().map_err(|_| err())?;
                let d: u64 = d.trim().parse().map_err(|_| err())?;
                if d == 0 {
                    return Err(err());
                }
                Ok(Time::new(n, d))
            }
            None => s.trim().parse().map(Time::from_int).map_err(|_| err()),
        }
    }
}

impl Serialize for Time {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Time {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Time, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let t: Time = "6/4".parse().unwrap();
        assert_eq!(t, Time::new(3, 2));
        assert_eq!(t.to_string(), "3/2");
        assert_eq!("7".parse::<Time>().unwrap(), Time::from_int(7));
        assert!("1/0".parse::<Time>().is_err());
        assert!("x".parse::<Time>().is_err());
    }

    #[test]
    fn units() {
        let delta = Time::new(1, 2);
        let t = Time::new(3, 2);
        assert_eq!(t.in_units_of(delta), Ratio::from_integer(3));
        assert_eq!(Time::from_int(1).since(Time::from_int(2)), Time::ZERO);
    }

    #[test]
    fn json_is_a_string() {
        let s = serde_json::to_string(&Time::new(5, 3)).unwrap();
        assert_eq!(s, "\"5/3\"");
        let back: Time = serde_json::from_str(&s).unwrap();
        assert_eq!(back, Time::new(5, 3));
    }
}
