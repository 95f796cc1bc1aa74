//! Fixed non-tonal phone inventory: 8 vowels and 12 unvoiced consonants.

/// Acoustic recipe for one phone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PhoneKind {
    /// Formant multipliers applied to the speaker's neutral formants.
    Vowel { formant_ratio: [f32; 3] },
    /// Band-pass noise burst centred at `center_hz`.
    Consonant { center_hz: f32, bandwidth_hz: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhoneDef {
    pub sym: &'static str,
    pub kind: PhoneKind,
}

impl PhoneDef {
    pub fn is_vowel(&self) -> bool {
        matches!(self.kind, PhoneKind::Vowel { .. })
    }
}

const fn vowel(sym: &'static str, r: [f32; 3]) -> PhoneDef {
    PhoneDef {
        sym,
        kind: PhoneKind::Vowel { formant_ratio: r },
    }
}

const fn consonant(sym: &'static str, center_hz: f32) -> PhoneDef {
    PhoneDef {
        sym,
        kind: PhoneKind::Consonant {
            center_hz,
            bandwidth_hz: 1500.0,
        },
    }
}

pub const INVENTORY: [PhoneDef; 20] = [
    vowel("a", [1.5, 0.85, 1.0]),
    vowel("o", [1.0, 0.6, 1.0]),
    vowel("e", [1.0, 1.3, 1.05]),
    vowel("i", [0.6, 1.5, 1.2]),
    vowel("u", [0.65, 0.55, 0.95]),
    vowel("v", [0.6, 1.25, 0.85]),
    vowel("ai", [1.3, 1.1, 1.0]),
    vowel("ei", [0.9, 1.35, 1.05]),
    consonant("p", 1000.0),
    consonant("t", 3500.0),
    consonant("k", 2000.0),
    consonant("f", 6000.0),
    consonant("s", 7000.0),
    consonant("sh", 4000.0),
    consonant("x", 4500.0),
    consonant("h", 1500.0),
    consonant("c", 6500.0),
    consonant("ch", 3800.0),
    consonant("q", 5000.0),
    consonant("z", 6800.0),
];

pub const VOWEL_COUNT: usize = 8;

/// Embedding table size.
pub fn vocab_size() -> usize {
    INVENTORY.len()
}

pub fn phone_id(sym: &str) -> Option<usize> {
    INVENTORY.iter().position(|p| p.sym == sym)
}

pub fn phone(id: usize) -> Option<&'static PhoneDef> {
    INVENTORY.get(id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inventory_shape() {
        assert_eq!(INVENTORY.iter().filter(|p| p.is_vowel()).count(), VOWEL_COUNT);
        assert_eq!(INVENTORY.len() - VOWEL_COUNT, 12);
        for (i, p) in INVENTORY.iter().enumerate() {
            assert_eq!(phone_id(p.sym), Some(i));
        }
        assert_eq!(phone_id("ng"), None);
    }
}
