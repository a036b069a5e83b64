//! Value types shared by the loop, reward, training and reporting layers.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CoreError;

/// Literal sentinel for the keep action in logs and datasets.
pub const KEEP_SENTINEL: &str = "[keep]";

/// Where a prompt came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrigin {
    User,
    Refined,
    Dataset,
}

/// A text prompt fed to the generator.
///
/// Constructed only through [`PromptText::new`], which rejects blank text and
/// rejects the keep sentinel as a user prompt.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawPrompt", into = "RawPrompt")]
pub struct PromptText {
    text: String,
    origin: PromptOrigin,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrompt {
    text: String,
    origin: PromptOrigin,
}

impl TryFrom<RawPrompt> for PromptText {
    type Error = CoreError;

    fn try_from(raw: RawPrompt) -> Result<Self, Self::Error> {
        PromptText::new(raw.text, raw.origin)
    }
}

impl From<PromptText> for RawPrompt {
    fn from(p: PromptText) -> Self {
        RawPrompt {
            text: p.text,
            origin: p.origin,
        }
    }
}

impl PromptText {
    pub fn new(text: impl Into<String>, origin: PromptOrigin) -> Result<Self, CoreError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(CoreError::EmptyPrompt);
        }
        if origin == PromptOrigin::User && is_keep_sentinel(&text) {
            return Err(CoreError::KeepSentinelPrompt);
        }
        Ok(Self { text, origin })
    }

    pub fn user(text: impl Into<String>) -> Result<Self, CoreError> {
        Self::new(text, PromptOrigin::User)
    }

    pub fn refined(text: impl Into<String>) -> Result<Self, CoreError> {
        Self::new(text, PromptOrigin::Refined)
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn origin(&self) -> PromptOrigin {
        self.origin
    }

    /// Same text, different provenance.
    pub fn with_origin(&self, origin: PromptOrigin) -> Result<Self, CoreError> {
        Self::new(self.text.clone(), origin)
    }
}

impl fmt::Display for PromptText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Case-insensitive check against the accepted keep spellings.
pub fn is_keep_sentinel(text: &str) -> bool {
    let t = text.trim();
    t.eq_ignore_ascii_case("keep") || t.eq_ignore_ascii_case(KEEP_SENTINEL)
}

/// SHA-256 digest used to address image bytes and synthetic features.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CoreError> {
        let bytes = hex::decode(s).map_err(|_| CoreError::InvalidHash(s.to_string()))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| CoreError::InvalidHash(s.to_string()))?;
        Ok(Self(arr))
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", self.to_hex())
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ContentHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ContentHash::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// A generated image: either a synthetic feature vector or a content-addressed
/// external artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ImageRef {
    Synthetic { features: Vec<f64> },
    External { uri: String, hash: ContentHash },
}

impl ImageRef {
    /// Identity digest. For external images this is the stored content hash;
    /// for synthetic ones it hashes the little-endian feature bits.
    pub fn digest(&self) -> ContentHash {
        match self {
            ImageRef::External { hash, .. } => *hash,
            ImageRef::Synthetic { features } => {
                let mut bytes = Vec::with_capacity(features.len() * 8);
                for x in features {
                    bytes.extend_from_slice(&x.to_bits().to_le_bytes());
                }
                ContentHash::of_bytes(&bytes)
            }
        }
    }
}

/// What the refiner chose to do with the latest image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Keep,
    Refine(PromptText),
}

impl Action {
    pub fn is_keep(&self) -> bool {
        matches!(self, Action::Keep)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Keep => f.write_str(KEEP_SENTINEL),
            Action::Refine(p) => f.write_str(p.as_str()),
        }
    }
}

/// Refiner output with the optional free-text explanation attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinementDecision {
    pub action: Action,
    pub reason: Option<String>,
}

impl RefinementDecision {
    pub fn keep() -> Self {
        Self {
            action: Action::Keep,
            reason: None,
        }
    }

    pub fn refine(prompt: PromptText) -> Self {
        Self {
            action: Action::Refine(prompt),
            reason: None,
        }
    }

    pub fn with_reason(mut self, reason: impl Into<String>) -> Self {
        self.reason = Some(reason.into());
        self
    }
}

/// Loop bounds and seeding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub t_max: u32,
    pub seed: u64,
    pub repeats: u32,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            t_max: 3,
            seed: 0,
            repeats: 10,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.t_max < 1 {
            return Err(CoreError::InvalidConfig("t_max must be >= 1".into()));
        }
        if self.repeats < 1 {
            return Err(CoreError::InvalidConfig("repeats must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_rejects_blank_and_user_sentinel() {
        assert_eq!(PromptText::user("   ").unwrap_err(), CoreError::EmptyPrompt);
        assert_eq!(
            PromptText::user("[KEEP]").unwrap_err(),
            CoreError::KeepSentinelPrompt
        );
        // refined prompts may carry the sentinel text; the loop rejects it later
        assert!(PromptText::refined("[keep]").is_ok());
    }

    #[test]
    fn prompt_deserialize_validates() {
        let bad = r#"{"text":"  ","origin":"user"}"#;
        assert!(serde_json::from_str::<PromptText>(bad).is_err());
    }

    #[test]
    fn hash_hex_roundtrip() {
        let h = ContentHash::of_bytes(b"abc");
        assert_eq!(
            h.to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(ContentHash::from_hex(&h.to_hex()).unwrap(), h);
        assert!(ContentHash::from_hex("abcd").is_err());
    }

    #[test]
    fn synthetic_digest_depends_on_bits() {
        let a = ImageRef::Synthetic {
            features: vec![0.0, 1.0],
        };
        let b = ImageRef::Synthetic {
            features: vec![-0.0, 1.0],
        };
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), a.clone().digest());
    }

    #[test]
    fn loop_config_bounds() {
        assert!(LoopConfig::default().validate().is_ok());
        let c = LoopConfig {
            t_max: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
