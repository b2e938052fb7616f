use alloc::string::String;
use alloc::vec::Vec;

/// Ignored target position in the loss.
pub const IGNORE_INDEX: usize = usize::MAX;

/// Character-level tokenizer over printable ASCII and newline.
///
/// Ids: 0 pad, 1 end-of-sequence, 2 prompt/response separator, 3 newline,
/// 4.. the characters `' '..='~'`. Characters outside the set encode as `?`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

/// A tokenized prompt/response pair: `prompt ++ [SEP] ++ response ++ [EOS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    /// Number of leading tokens (prompt plus separator) excluded from the loss.
    pub prompt_len: usize,
}

impl Example {
    /// Model inputs and next-token targets with prompt positions ignored.
    pub fn inputs_targets(&self) -> (&[usize], Vec<usize>) {
        let n = self.tokens.len();
        let inputs = &self.tokens[..n.saturating_sub(1)];
        let targets = (1..n)
            .map(|i| {
                if i >= self.prompt_len {
                    self.tokens[i]
                } else {
                    IGNORE_INDEX
                }
            })
            .collect();
        (inputs, targets)
    }

    pub fn response_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }
}

impl Tokenizer {
    pub const PAD: usize = 0;
    pub const EOS: usize = 1;
    pub const SEP: usize = 2;
    pub const NEWLINE: usize = 3;
    const FIRST_CHAR: usize = 4;
    pub const VOCAB_SIZE: usize = Self::FIRST_CHAR + 95;

    pub fn encode_char(c: char) -> usize {
        match c {
            '\n' => Self::NEWLINE,
            ' '..='~' => Self::FIRST_CHAR + (c as usize - ' ' as usize),
            _ => Self::FIRST_CHAR + ('?' as usize - ' ' as usize),
        }
    }

    pub fn encode(text: &str) -> Vec<usize> {
        text.chars().map(Self::encode_char).collect()
    }

    /// Drops special tokens; stops at the first end-of-sequence.
    pub fn decode(ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                Self::EOS => break,
                Self::NEWLINE => s.push('\n'),
                i if (Self::FIRST_CHAR..Self::VOCAB_SIZE).contains(&i) => {
                    s.push((b' ' + (i - Self::FIRST_CHAR) as u8) as char)
                }
                _ => {}
            }
        }
        s
    }

    /// Tokens fed to the model when generating a response.
    pub fn encode_prompt(prompt: &str) -> Vec<usize> {
        let mut t = Self::encode(prompt);
        t.push(Self::SEP);
        t
    }

    pub fn encode_example(prompt: &str, response: &str) -> Example {
        let mut tokens = Self::encode_prompt(prompt);
        let prompt_len = tokens.len();
        tokens.extend(Self::encode(response));
        tokens.push(Self::EOS);
        Example { tokens, prompt_len }
    }
}
