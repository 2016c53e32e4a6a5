//! Versioned structured-text artifacts.
//!
//! Models, key-sets and verifiers are written as JSON documents of the form
//!
//! ```text
//! { "format": "rawmark-model", "version": 1, "body": { ... } }
//! ```
//!
//! Every `f64` inside a body is written as the 16-digit lowercase hexadecimal
//! form of its IEEE-754 bit pattern, so a save/load cycle is bit-exact
//! (including signed zeros).

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Current artifact schema version. Readers reject anything newer.
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    body: T,
}

pub(crate) fn encode<T: Serialize>(format: &str, body: &T) -> Result<String> {
    let env = Envelope { format: format.to_owned(), version: ARTIFACT_VERSION, body };
    serde_json::to_string_pretty(&env).map_err(|e| Error::Format(e.to_string()))
}

pub(crate) fn decode<T: DeserializeOwned>(format: &str, text: &str) -> Result<T> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("malformed {format} artifact: {e}")))?;
    let found = value
        .get("format")
        .and_then(|f| f.as_str())
        .ok_or_else(|| Error::Format(format!("{format} artifact has no format tag")))?;
    if found != format {
        return Err(Error::Format(format!("expected a {format} artifact, found {found}")));
    }
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format(format!("{format} artifact has no version tag")))?;
    if version > u64::from(ARTIFACT_VERSION) {
        return Err(Error::Format(format!(
            "unsupported {format} artifact version {version} (this build reads up to {ARTIFACT_VERSION})"
        )));
    }
    let body = value.get("body").cloned().ok_or_else(|| Error::Format(format!("{format} artifact has no body")))?;
    serde_json::from_value(body).map_err(|e| Error::Format(format!("bad {format} body: {e}")))
}

/// First 16 hex digits of the SHA-256 of `value`'s compact JSON form.
pub fn digest<T: Serialize>(value: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(value).map_err(|e| Error::Format(e.to_string()))?;
    let hash = Sha256::digest(&json);
    Ok(hash[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// Hex encoding of one `f64`.
pub fn f64_to_hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

pub fn f64_from_hex(s: &str) -> std::result::Result<f64, String> {
    if s.len() != 16 {
        return Err(format!("hex float must have 16 digits, got {s:?}"));
    }
    u64::from_str_radix(s, 16).map(f64::from_bits).map_err(|e| format!("bad hex float {s:?}: {e}"))
}

/// `#[serde(with = "hex_f64")]`
pub(crate) mod hex_f64 {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::f64_to_hex(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let s = String::deserialize(d)?;
        super::f64_from_hex(&s).map_err(D::Error::custom)
    }
}

/// `#[serde(with = "hex_vec")]`
pub(crate) mod hex_vec {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| super::f64_to_hex(*x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<String>::deserialize(d)?.iter().map(|s| super::f64_from_hex(s).map_err(D::Error::custom)).collect()
    }
}

/// `#[serde(with = "hex_matrix")]`
pub(crate) mod hex_matrix {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|row| row.iter().map(|x| super::f64_to_hex(*x)).collect::<Vec<_>>()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        Vec::<Vec<String>>::deserialize(d)?
            .iter()
            .map(|row| row.iter().map(|s| super::f64_from_hex(s).map_err(D::Error::custom)).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Probe {
        #[serde(with = "hex_vec")]
        xs: Vec<f64>,
    }

    #[test]
    fn hex_round_trips_special_values() {
        for v in [0.0, -0.0, 1.0, f64::MIN_POSITIVE, 1e-310, f64::MAX, -3.25] {
            let back = f64_from_hex(&f64_to_hex(v)).unwrap();
            assert_eq!(back.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn envelope_rejects_future_version() {
        let text = r#"{"format":"probe","version":9,"body":{"xs":[]}}"#;
        let err = decode::<Probe>("probe", text).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn envelope_rejects_wrong_format_and_truncation() {
        let text = encode("probe", &Probe { xs: vec![1.5, -2.0] }).unwrap();
        assert!(decode::<Probe>("other", &text).is_err());
        assert!(matches!(decode::<Probe>("probe", &text[..text.len() / 2]), Err(Error::Format(_))));
        assert_eq!(decode::<Probe>("probe", &text).unwrap().xs, vec![1.5, -2.0]);
    }
}
