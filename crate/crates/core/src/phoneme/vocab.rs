/// Phoneme symbols in row order. Index 39 is the non-phoneme row.
pub const SYMBOLS: [&str; 40] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH", "IH", "IY", "JH", "K",
    "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH", "NON_PHONEME",
];

/// Number of true phonemes.
pub const PHONEMES: usize = 39;
/// Rows of the activation matrix (phonemes plus the non-phoneme row).
pub const P: usize = 40;
pub const NON_PHONEME: usize = 39;

pub fn index_of(symbol: &str) -> Option<usize> {
    SYMBOLS[..PHONEMES].binary_search(&symbol).ok()
}

pub fn symbol(index: usize) -> &'static str {
    SYMBOLS[index]
}

/// Stable identifier of the row layout, stored with trained models.
pub fn fingerprint() -> String {
    format!("arpabet{}:{}", P, SYMBOLS.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indices_are_a_bijection() {
        for (i, s) in SYMBOLS[..PHONEMES].iter().enumerate() {
            assert_eq!(index_of(s), Some(i));
        }
        assert_eq!(symbol(NON_PHONEME), "NON_PHONEME");
        assert_eq!(index_of("NON_PHONEME"), None);
        assert_eq!(index_of("AE1"), None);
    }
}
