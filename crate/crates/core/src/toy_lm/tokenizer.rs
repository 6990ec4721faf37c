//! Byte-level tokenizer: ids 0..=255 are raw bytes, ids 256..=260 are the
//! control tokens. No merges, no normalization; decoding is exact for any
//! byte sequence.

/// First id past the raw byte range.
pub const BYTE_VOCAB: usize = 256;
pub const BOS: usize = 256;
pub const SEP: usize = 257;
pub const ANS: usize = 258;
pub const EOS: usize = 259;
/// Reserved for fixed-width batching; the per-sample training path never
/// emits it.
pub const PAD: usize = 260;
pub const VOCAB_SIZE: usize = 261;

pub fn encode_text(s: &str) -> Vec<usize> {
    s.bytes().map(|b| b as usize).collect()
}

/// Decode byte ids back to text. Control tokens and invalid UTF-8 are
/// rendered as replacement markers rather than erroring, since generated
/// sequences can be arbitrary.
pub fn decode_text(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .map(|&id| if id < BYTE_VOCAB { id as u8 } else { 0x1A })
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Exemplar text as it appears in a plain-text context window.
pub fn exemplar_text(question: &str, answer: &str) -> String {
    format!("Q: {question}\nA: {answer}\n")
}

/// Question text; the answer is introduced by the ANS control token after it.
pub fn question_text(question: &str) -> String {
    format!("Q: {question}\nA:")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let s = "Q: does NaCl dissolve?\nA: Yes\n";
        let ids = encode_text(s);
        assert!(ids.iter().all(|&i| i < BYTE_VOCAB));
        assert_eq!(decode_text(&ids), s);
    }

    #[test]
    fn control_ids_sit_after_the_byte_range() {
        assert_eq!(BOS, 256);
        assert_eq!(SEP, 257);
        assert_eq!(ANS, 258);
        assert_eq!(EOS, 259);
        assert_eq!(PAD, 260);
        assert_eq!(VOCAB_SIZE, 261);
    }

    #[test]
    fn control_tokens_decode_to_substitute_marker() {
        let out = decode_text(&[b'a' as usize, EOS, b'b' as usize]);
        assert_eq!(out.chars().count(), 3);
        assert!(out.starts_with('a') && out.ends_with('b'));
    }

    #[test]
    fn templates_are_fixed() {
        assert_eq!(exemplar_text("x?", "Yes"), "Q: x?\nA: Yes\n");
        assert_eq!(question_text("x?"), "Q: x?\nA:");
    }

    #[test]
    fn multibyte_text_tokenizes_per_byte() {
        let ids = encode_text("β");
        assert_eq!(ids.len(), 2);
        assert_eq!(decode_text(&ids), "β");
    }
}
