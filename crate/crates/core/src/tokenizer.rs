//! Byte-level tokenizer with a handful of reserved specials.
//!
//! Ids 0..=255 are raw bytes. Role markers are single tokens, so every
//! template has exact, countable token arithmetic.

pub const CLS: usize = 256;
pub const BOS: usize = 257;
/// End of an answer span; generation stops here.
pub const EOA: usize = 258;
/// "Human:" role marker.
pub const HUMAN: usize = 259;
/// "AI:" role marker.
pub const AI: usize = 260;
/// Placeholder id for positions filled by image feature vectors.
pub const IMAGE: usize = 261;

pub const VOCAB_SIZE: usize = 262;

pub const HUMAN_TEXT: &str = "Human:";
pub const AI_TEXT: &str = "AI:";
pub const IMAGE_TEXT: &str = "<ImageFeature>";

pub fn encode(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

pub fn is_special(id: usize) -> bool {
    (CLS..VOCAB_SIZE).contains(&id)
}

/// Renders ids as text. Role markers render as their literal text,
/// consecutive image placeholders collapse into one `<ImageFeature>`,
/// and `[CLS]`/`[BOS]`/`[EOA]` render as nothing.
pub fn decode(ids: &[usize]) -> String {
    let mut bytes = Vec::with_capacity(ids.len());
    let mut prev_image = false;
    for &id in ids {
        let is_image = id == IMAGE;
        match id {
            0..=255 => bytes.push(id as u8),
            HUMAN => bytes.extend_from_slice(HUMAN_TEXT.as_bytes()),
            AI => bytes.extend_from_slice(AI_TEXT.as_bytes()),
            IMAGE if !prev_image => bytes.extend_from_slice(IMAGE_TEXT.as_bytes()),
            _ => {}
        }
        prev_image = is_image;
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Decodes only plain bytes, dropping every special.
pub fn decode_text(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_plain_text() {
        let s = "what color is the box?";
        assert_eq!(decode(&encode(s)), s);
    }

    #[test]
    fn specials_render_as_markers() {
        let ids = [
            BOS,
            HUMAN,
            IMAGE,
            IMAGE,
            IMAGE,
            b' ' as usize,
            AI,
            b'a' as usize,
            EOA,
        ];
        assert_eq!(decode(&ids), "Human:<ImageFeature> AI:a");
    }
}
