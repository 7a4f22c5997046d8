use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// The eight target findings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Atelectasis,
    Cardiomegaly,
    Edema,
    LungOpacity,
    NoFinding,
    PleuralEffusion,
    Pneumonia,
    SupportDevices,
}

impl Condition {
    pub const ALL: [Condition; 8] = [
        Condition::Atelectasis,
        Condition::Cardiomegaly,
        Condition::Edema,
        Condition::LungOpacity,
        Condition::NoFinding,
        Condition::PleuralEffusion,
        Condition::Pneumonia,
        Condition::SupportDevices,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Atelectasis => "Atelectasis",
            Condition::Cardiomegaly => "Cardiomegaly",
            Condition::Edema => "Edema",
            Condition::LungOpacity => "Lung Opacity",
            Condition::NoFinding => "No Finding",
            Condition::PleuralEffusion => "Pleural Effusion",
            Condition::Pneumonia => "Pneumonia",
            Condition::SupportDevices => "Support Devices",
        }
    }

    pub fn index(self) -> usize {
        Condition::ALL.iter().position(|c| *c == self).unwrap()
    }
}

fn squash(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let key = squash(s);
        Condition::ALL
            .into_iter()
            .find(|c| squash(c.name()) == key)
            .ok_or_else(|| Error::Precondition(format!("unknown condition {s:?}")))
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Condition {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Condition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_is_lenient_about_case_and_separators() {
        assert_eq!(
            "pleural_effusion".parse::<Condition>().unwrap(),
            Condition::PleuralEffusion
        );
        assert_eq!(
            "Lung opacity".parse::<Condition>().unwrap(),
            Condition::LungOpacity
        );
        assert!("Fracture".parse::<Condition>().is_err());
        for c in Condition::ALL {
            assert_eq!(c.name().parse::<Condition>().unwrap(), c);
            assert_eq!(Condition::ALL[c.index()], c);
        }
    }
}
