use std::collections::HashMap;

/// Padding, and the decoder start token.
pub const PAD: u32 = 0;
/// End of sequence; also the segment separator in two-segment inputs.
pub const END: u32 = 1;
pub const UNK: u32 = 2;

pub const NUM_SENTINELS: usize = 16;
/// Words `w0..w{N}`; the first half forms group 0, the second half group 1.
pub const NUM_WORDS: usize = 64;

const PREFIXES: [&str; 4] = ["majority", "match", "score", "denoise"];

const BIGRAMS: [&str; 48] = [
    "th", "he", "in", "er", "an", "re", "on", "at", "en", "nd", "ti", "es", "or", "te", "of", "ed", "is", "it", "al",
    "ar", "st", "to", "nt", "ng", "se", "ha", "as", "ou", "io", "le", "ve", "co", "me", "de", "hi", "ri", "ro", "ic",
    "ne", "ea", "ra", "ce", "li", "ch", "ll", "be", "ma", "si",
];

const CHARS: &str = "abcdefghijklmnopqrstuvwxyz0123456789.-_";

/// Fixed toy vocabulary.
///
/// Ids: 0 `<pad>`, 1 `</s>`, 2 `<unk>`, then the whole words `w0..w63`, the
/// task prefixes, 48 common character pairs, single characters, and finally 16
/// sentinels `<extra_id_0>..<extra_id_15>` occupying the top ids (sentinel 0 is
/// the highest id). Whitespace-separated words that are whole-word entries map
/// to one id; anything else is split by greedy longest match over pairs and
/// single characters, with `<unk>` for characters outside the table.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pieces: Vec<String>,
    words: HashMap<String, u32>,
    sub: HashMap<String, u32>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut pieces: Vec<String> = vec!["<pad>".into(), "</s>".into(), "<unk>".into()];
        let mut words = HashMap::new();
        words.insert("</s>".to_string(), END);
        for w in (0..NUM_WORDS)
            .map(|i| format!("w{i}"))
            .chain(PREFIXES.iter().map(|p| p.to_string()))
        {
            words.insert(w.clone(), pieces.len() as u32);
            pieces.push(w);
        }
        let mut sub = HashMap::new();
        for p in BIGRAMS
            .iter()
            .map(|s| s.to_string())
            .chain(CHARS.chars().map(String::from))
        {
            sub.insert(p.clone(), pieces.len() as u32);
            pieces.push(p);
        }
        for i in (0..NUM_SENTINELS).rev() {
            pieces.push(format!("<extra_id_{i}>"));
        }
        Tokenizer { pieces, words, sub }
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    /// Id of sentinel `i`, counting down from the top of the vocabulary.
    pub fn sentinel(&self, i: usize) -> u32 {
        assert!(i < NUM_SENTINELS);
        (self.pieces.len() - 1 - i) as u32
    }

    pub fn is_sentinel(&self, id: u32) -> bool {
        (id as usize) >= self.pieces.len() - NUM_SENTINELS && (id as usize) < self.pieces.len()
    }

    /// Id of word `w{i}`.
    pub fn word(&self, i: usize) -> u32 {
        assert!(i < NUM_WORDS);
        3 + i as u32
    }

    pub fn piece(&self, id: u32) -> &str {
        self.pieces.get(id as usize).map_or("<unk>", String::as_str)
    }

    /// Tokenizes without appending `</s>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if let Some(&id) = self.words.get(word) {
                out.push(id);
                continue;
            }
            let chars: Vec<char> = word.to_lowercase().chars().collect();
            let mut i = 0;
            while i < chars.len() {
                if i + 1 < chars.len() {
                    let pair: String = chars[i..i + 2].iter().collect();
                    if let Some(&id) = self.sub.get(&pair) {
                        out.push(id);
                        i += 2;
                        continue;
                    }
                }
                out.push(self.sub.get(&chars[i].to_string()).copied().unwrap_or(UNK));
                i += 1;
            }
        }
        out
    }

    /// Tokenizes and appends `</s>`.
    pub fn encode_with_end(&self, text: &str) -> Vec<u32> {
        let mut v = self.encode(text);
        v.push(END);
        v
    }

    /// Pieces joined with spaces; for display only.
    pub fn render(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.piece(i)).collect::<Vec<_>>().join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let t = Tokenizer::new();
        assert_eq!(t.encode("w0 w63"), vec![3, 66]);
        assert_eq!(t.encode("a </s> b")[1], END);
        assert_eq!(t.sentinel(0) as usize, t.vocab_size() - 1);
        assert!(t.is_sentinel(t.sentinel(15)));
        assert!(!t.is_sentinel(t.sentinel(15) - 1));
        // en t a i l me nt
        assert_eq!(t.encode("entailment").len(), 7);
        assert_eq!(t.encode("€"), vec![UNK]);
        assert_eq!(t.render(&t.encode("match")), "match");
    }
}
