//! UTF-8 byte structure of token byte sequences.
//!
//! A token is described by three regions: a run of leading continuation
//! bytes (stray bytes that need a lead byte from the token before it), a
//! well-formed interior, and an optional trailing partial character (a lead
//! byte that still needs continuation bytes from the token after it).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ByteClass {
    /// 0x00–0x7F
    Ascii,
    /// 0xC2–0xDF
    Lead2,
    /// 0xE0–0xEF
    Lead3,
    /// 0xF0–0xF4
    Lead4,
    /// 0x80–0xBF
    Continuation,
    /// 0xC0, 0xC1, 0xF5–0xFF
    Invalid,
}

impl ByteClass {
    /// Total length of the sequence started by a byte of this class, if it
    /// starts one.
    pub fn sequence_len(self) -> Option<usize> {
        match self {
            ByteClass::Ascii => Some(1),
            ByteClass::Lead2 => Some(2),
            ByteClass::Lead3 => Some(3),
            ByteClass::Lead4 => Some(4),
            ByteClass::Continuation | ByteClass::Invalid => None,
        }
    }
}

pub const fn classify_byte(b: u8) -> ByteClass {
    match b {
        0x00..=0x7F => ByteClass::Ascii,
        0x80..=0xBF => ByteClass::Continuation,
        0xC2..=0xDF => ByteClass::Lead2,
        0xE0..=0xEF => ByteClass::Lead3,
        0xF0..=0xF4 => ByteClass::Lead4,
        0xC0 | 0xC1 | 0xF5..=0xFF => ByteClass::Invalid,
    }
}

#[inline]
pub const fn is_continuation(b: u8) -> bool {
    b & 0xC0 == 0x80
}

/// Legal range of the byte following `lead`. Narrower than 0x80–0xBF for the
/// leads that could otherwise produce overlong forms, surrogates or scalars
/// above U+10FFFF.
#[inline]
const fn second_byte_range(lead: u8) -> (u8, u8) {
    match lead {
        0xE0 => (0xA0, 0xBF),
        0xED => (0x80, 0x9F),
        0xF0 => (0x90, 0xBF),
        0xF4 => (0x80, 0x8F),
        _ => (0x80, 0xBF),
    }
}

/// Strict UTF-8 validation. On failure returns the offset of the first byte
/// of the offending sequence.
pub fn validate(bytes: &[u8]) -> Result<(), usize> {
    let mut i = 0;
    while i < bytes.len() {
        let lead = bytes[i];
        let len = match classify_byte(lead).sequence_len() {
            Some(1) => {
                i += 1;
                continue;
            }
            Some(n) => n,
            None => return Err(i),
        };
        if i + len > bytes.len() {
            return Err(i);
        }
        let (lo, hi) = second_byte_range(lead);
        if !(lo..=hi).contains(&bytes[i + 1]) {
            return Err(i);
        }
        if !bytes[i + 2..i + len].iter().all(|&b| is_continuation(b)) {
            return Err(i);
        }
        i += len;
    }
    Ok(())
}

pub fn is_valid(bytes: &[u8]) -> bool {
    validate(bytes).is_ok()
}

/// True if `partial` (a lead byte plus fewer continuation bytes than the lead
/// announces) can be extended to at least one valid scalar encoding.
fn is_completable(partial: &[u8]) -> bool {
    let Some((&lead, rest)) = partial.split_first() else {
        return false;
    };
    let Some(len) = classify_byte(lead).sequence_len() else {
        return false;
    };
    if partial.len() >= len {
        return false;
    }
    if let Some(&second) = rest.first() {
        let (lo, hi) = second_byte_range(lead);
        if !(lo..=hi).contains(&second) {
            return false;
        }
    }
    rest.iter().skip(1).all(|&b| is_continuation(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Complete,
    Prefix,
    Suffix,
    Dual,
    Malformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrailingPartial {
    /// Length of the character the trailing lead byte announces (2–4).
    pub expected_len: u8,
    /// Bytes of that character already present in the token (1–3).
    pub present: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStructure {
    /// Number of leading continuation bytes. Values above 3 are Malformed.
    pub excess_head: u8,
    pub interior_valid: bool,
    pub trailing_partial: Option<TrailingPartial>,
    /// Continuation bytes still needed by the trailing partial, 0 without one.
    pub deficit_tail: u8,
    pub role: Role,
    pub len: usize,
}

impl TokenStructure {
    /// Byte range of the well-formed interior.
    pub fn interior(&self) -> std::ops::Range<usize> {
        let tail = self.trailing_partial.map_or(0, |p| p.present as usize);
        let start = (self.excess_head as usize).min(self.len);
        start..self.len.saturating_sub(tail).max(start)
    }

    pub fn is_complete(&self) -> bool {
        self.role == Role::Complete
    }
}

/// Analyse the UTF-8 structure of a token's bytes.
///
/// Malformed is a value, not an error: overlong forms, surrogates, scalars
/// above U+10FFFF, a leading continuation run longer than 3 and trailing
/// partials that cannot extend to any scalar all land there.
pub fn analyze_token_bytes(bytes: &[u8]) -> TokenStructure {
    let len = bytes.len();
    let head = bytes.iter().take_while(|&&b| is_continuation(b)).count();

    // Walk back over at most three trailing continuation bytes to the byte
    // that would start the final character.
    let mut start = len;
    while start > head && len - start < 3 && is_continuation(bytes[start - 1]) {
        start -= 1;
    }
    let mut trailing_partial = None;
    let mut broken_tail = false;
    if start > head {
        let lead_at = start - 1;
        let present = len - lead_at;
        if let Some(expected) = classify_byte(bytes[lead_at]).sequence_len() {
            if present < expected {
                if is_completable(&bytes[lead_at..]) {
                    trailing_partial = Some(TrailingPartial {
                        expected_len: expected as u8,
                        present: present as u8,
                    });
                } else {
                    broken_tail = true;
                }
            }
        }
    }

    let tail_len = trailing_partial.map_or(0, |p| p.present as usize);
    let interior = &bytes[head..len - tail_len];
    let interior_valid = !broken_tail && is_valid(interior);
    let deficit_tail = trailing_partial.map_or(0, |p| p.expected_len - p.present);

    let role = if head > 3 || !interior_valid {
        Role::Malformed
    } else {
        match (head > 0, deficit_tail > 0) {
            (false, false) => Role::Complete,
            (false, true) => Role::Prefix,
            (true, false) => Role::Suffix,
            (true, true) => Role::Dual,
        }
    };

    TokenStructure {
        excess_head: head.min(u8::MAX as usize) as u8,
        interior_valid,
        trailing_partial,
        deficit_tail,
        role,
        len,
    }
}

/// Which tokens count as incomplete.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct CountingPolicy {
    /// Count non-ASCII single-byte base tokens (continuation, lead and
    /// invalid bytes alike). Off by default.
    pub include_single_byte: bool,
    /// Count multi-byte Malformed tokens. Off by default.
    pub include_malformed: bool,
}

impl CountingPolicy {
    pub fn label(&self) -> String {
        format!(
            "single_byte={},malformed={}",
            if self.include_single_byte { "include" } else { "exclude" },
            if self.include_malformed { "include" } else { "exclude" },
        )
    }
}

/// Whether a token with the given bytes and structure counts as incomplete
/// under `policy`.
pub fn is_incomplete(structure: &TokenStructure, bytes: &[u8], policy: CountingPolicy) -> bool {
    if bytes.len() == 1 {
        return policy.include_single_byte && !bytes[0].is_ascii();
    }
    match structure.role {
        Role::Prefix | Role::Suffix | Role::Dual => true,
        Role::Malformed => policy.include_malformed,
        Role::Complete => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_classes() {
        assert_eq!(classify_byte(0x41), ByteClass::Ascii);
        assert_eq!(classify_byte(0x9F), ByteClass::Continuation);
        assert_eq!(classify_byte(0xC0), ByteClass::Invalid);
        assert_eq!(classify_byte(0xC1), ByteClass::Invalid);
        assert_eq!(classify_byte(0xC2), ByteClass::Lead2);
        assert_eq!(classify_byte(0xEF), ByteClass::Lead3);
        assert_eq!(classify_byte(0xF4), ByteClass::Lead4);
        assert_eq!(classify_byte(0xF5), ByteClass::Invalid);
    }

    #[test]
    fn class_table_is_total() {
        let mut counts = std::collections::HashMap::new();
        for b in 0..=255u8 {
            *counts.entry(classify_byte(b)).or_insert(0) += 1;
        }
        assert_eq!(counts[&ByteClass::Ascii], 128);
        assert_eq!(counts[&ByteClass::Continuation], 64);
        assert_eq!(counts[&ByteClass::Lead2], 30);
        assert_eq!(counts[&ByteClass::Lead3], 16);
        assert_eq!(counts[&ByteClass::Lead4], 5);
        assert_eq!(counts[&ByteClass::Invalid], 13);
    }

    #[test]
    fn complete_han() {
        // 能 = U+80FD
        let s = analyze_token_bytes(&[0xE8, 0x83, 0xBD]);
        assert_eq!(s.role, Role::Complete);
    }

    #[test]
    fn suffix_with_stray_continuation() {
        let s = analyze_token_bytes(&[0x9F, 0xE8, 0x83, 0xBD]);
        assert_eq!(s.role, Role::Suffix);
        assert_eq!(s.excess_head, 1);
        assert_eq!(s.deficit_tail, 0);
    }

    #[test]
    fn prefix_with_trailing_lead() {
        let mut bytes = "サー".as_bytes().to_vec();
        bytes.extend([0xE3, 0x83]);
        let s = analyze_token_bytes(&bytes);
        assert_eq!(s.role, Role::Prefix);
        assert_eq!(s.deficit_tail, 1);
        assert_eq!(
            s.trailing_partial,
            Some(TrailingPartial {
                expected_len: 3,
                present: 2
            })
        );
        assert_eq!(s.interior(), 0..6);
    }

    #[test]
    fn surrogate_is_malformed() {
        assert_eq!(analyze_token_bytes(&[0xED, 0xA0, 0x80]).role, Role::Malformed);
        // and a trailing ED A0 cannot be completed either
        assert_eq!(analyze_token_bytes(&[0x41, 0xED, 0xA0]).role, Role::Malformed);
    }

    #[test]
    fn overlong_and_out_of_range() {
        assert_eq!(analyze_token_bytes(&[0xC0, 0x80]).role, Role::Malformed);
        assert_eq!(analyze_token_bytes(&[0xE0, 0x80, 0x80]).role, Role::Malformed);
        assert_eq!(analyze_token_bytes(&[0xF4, 0x90, 0x80, 0x80]).role, Role::Malformed);
        assert_eq!(analyze_token_bytes(&[0xF0, 0x8F]).role, Role::Malformed);
    }

    #[test]
    fn dual_and_long_heads() {
        let s = analyze_token_bytes(&[0x80, 0x41, 0xE3]);
        assert_eq!(s.role, Role::Dual);
        assert_eq!((s.excess_head, s.deficit_tail), (1, 2));
        assert_eq!(analyze_token_bytes(&[0x80; 3]).role, Role::Suffix);
        assert_eq!(analyze_token_bytes(&[0x80; 4]).role, Role::Malformed);
    }

    #[test]
    fn extra_continuation_after_complete_char() {
        assert_eq!(
            analyze_token_bytes(&[0xE3, 0x83, 0x9F, 0x80]).role,
            Role::Malformed
        );
    }

    #[test]
    fn validate_reports_offset() {
        assert_eq!(validate(b"ab\x9f"), Err(2));
        assert_eq!(validate(&[0x9F, 0xE8, 0x83, 0xBD]), Err(0));
        assert_eq!(validate("能".as_bytes()), Ok(()));
        assert_eq!(validate(b""), Ok(()));
    }

    #[test]
    fn policy_and_single_bytes() {
        let p = CountingPolicy::default();
        let s = analyze_token_bytes(&[0x9F]);
        assert_eq!(s.role, Role::Suffix);
        assert!(!is_incomplete(&s, &[0x9F], p));
        let with = CountingPolicy {
            include_single_byte: true,
            ..p
        };
        assert!(is_incomplete(&s, &[0x9F], with));
        let inv = analyze_token_bytes(&[0xFF]);
        assert!(is_incomplete(&inv, &[0xFF], with));
        assert!(!is_incomplete(&analyze_token_bytes(b"a"), b"a", with));

        let nen = "能".as_bytes();
        assert!(!is_incomplete(&analyze_token_bytes(nen), nen, p));
        let suf = [0x9F, 0xE8, 0x83, 0xBD];
        assert!(is_incomplete(&analyze_token_bytes(&suf), &suf, p));

        let mal = [0xED, 0xA0, 0x80];
        assert!(!is_incomplete(&analyze_token_bytes(&mal), &mal, p));
        let with_mal = CountingPolicy {
            include_malformed: true,
            ..p
        };
        assert!(is_incomplete(&analyze_token_bytes(&mal), &mal, with_mal));
    }
}
