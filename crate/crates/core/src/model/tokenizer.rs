//! Byte-level tokenizer: ids 0..=255 are the raw bytes, followed by three
//! specials. No merges, no vocabulary files, perfectly reversible.

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const VOCAB_SIZE: usize = 259;

/// Raw bytes of `text`, no specials.
pub fn encode_text(text: &str) -> Vec<usize> {
    text.bytes().map(|b| b as usize).collect()
}

/// BOS followed by the text bytes: the shape of everything fed in as
/// conditioning.
pub fn encode_prompt(text: &str) -> Vec<usize> {
    let mut ids = Vec::with_capacity(text.len() + 1);
    ids.push(BOS);
    ids.extend(encode_text(text));
    ids
}

/// Text bytes followed by EOS: the shape of everything the model is trained
/// to produce.
pub fn encode_response(text: &str) -> Vec<usize> {
    let mut ids = encode_text(text);
    ids.push(EOS);
    ids
}

/// Drops special ids and decodes the remaining bytes, replacing invalid
/// UTF-8 sequences. Total on valid input: decode(encode_text(s)) == s.
pub fn decode(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
