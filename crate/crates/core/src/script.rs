//! Unicode Script property lookup.
//!
//! Backed by the `unicode-script` tables, which are generated from the
//! Unicode Character Database at build time of that crate.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize, Serializer};
use unicode_script::UnicodeScript;

/// Unicode data version of the embedded Script tables, e.g. "16.0.0".
pub fn unicode_version() -> String {
    let (major, minor, update) = unicode_script::UNICODE_VERSION;
    format!("{major}.{minor}.{update}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Script(unicode_script::Script);

impl Script {
    pub fn name(self) -> &'static str {
        self.0.full_name()
    }

    /// Common and Inherited do not identify a language.
    pub fn is_shared(self) -> bool {
        matches!(
            self.0,
            unicode_script::Script::Common | unicode_script::Script::Inherited
        )
    }
}

// ordered by name so sets print alphabetically
impl PartialOrd for Script {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Script {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.name().cmp(other.name())
    }
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Script {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Script {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let name = String::deserialize(deserializer)?;
        unicode_script::Script::from_full_name(&name)
            .map(Script)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown script {name:?}")))
    }
}

pub fn script_of(c: char) -> Script {
    Script(c.script())
}

/// Scripts of every character in `text`, Common and Inherited included.
pub fn scripts_in(text: &str) -> BTreeSet<Script> {
    text.chars().map(script_of).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_scripts() {
        assert_eq!(script_of('ミ').name(), "Katakana");
        assert_eq!(script_of('能').name(), "Han");
        assert_eq!(script_of('1').name(), "Common");
        assert_eq!(script_of('ä').name(), "Latin");
        assert!(script_of('1').is_shared());
        assert!(script_of('\u{0301}').is_shared());
        assert!(!script_of('ж').is_shared());
    }

    #[test]
    fn serde_by_name() {
        let s = script_of('ж');
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, "\"Cyrillic\"");
        let back: Script = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn version_string() {
        assert_eq!(unicode_version().split('.').count(), 3);
    }
}
