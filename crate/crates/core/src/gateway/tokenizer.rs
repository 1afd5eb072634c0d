use crate::strategy::Message;

/// Local token counter used when an endpoint does not report usage.
pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &str;
    fn count(&self, text: &str) -> u64;

    fn count_messages(&self, messages: &[Message]) -> u64 {
        messages.iter().map(|m| self.count(&m.content)).sum()
    }
}

/// Counts word runs and individual punctuation characters.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordPieceEstimate;

impl Tokenizer for WordPieceEstimate {
    fn name(&self) -> &str {
        "word-punct"
    }

    fn count(&self, text: &str) -> u64 {
        let mut n = 0;
        let mut in_word = false;
        for c in text.chars() {
            if c.is_alphanumeric() || c == '_' {
                if !in_word {
                    n += 1;
                    in_word = true;
                }
            } else {
                in_word = false;
                if !c.is_whitespace() {
                    n += 1;
                }
            }
        }
        n
    }
}
