use std::fmt;

use crate::landmarks::Symbol;

pub const N_BYTE_TOKENS: usize = 256;
pub const LANDMARK_BASE: usize = N_BYTE_TOKENS;
pub const BOS: usize = LANDMARK_BASE + Symbol::ALL.len();
pub const EOS: usize = BOS + 1;
pub const SEP: usize = BOS + 2;
pub const PAD: usize = BOS + 3;
pub const VOCAB_SIZE: usize = PAD + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Byte(u8),
    Landmark(Symbol),
    Bos,
    Eos,
    Sep,
    Pad,
}

impl Token {
    pub fn id(self) -> usize {
        match self {
            Token::Byte(b) => usize::from(b),
            Token::Landmark(s) => LANDMARK_BASE + s.index(),
            Token::Bos => BOS,
            Token::Eos => EOS,
            Token::Sep => SEP,
            Token::Pad => PAD,
        }
    }

    pub fn from_id(id: usize) -> Option<Token> {
        Some(match id {
            0..=255 => Token::Byte(id as u8),
            _ if (LANDMARK_BASE..BOS).contains(&id) => Token::Landmark(Symbol::ALL[id - LANDMARK_BASE]),
            BOS => Token::Bos,
            EOS => Token::Eos,
            SEP => Token::Sep,
            PAD => Token::Pad,
            _ => return None,
        })
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Byte(b) => write!(f, "<0x{b:02x}>"),
            Token::Landmark(s) => write!(f, "{s}"),
            Token::Bos => f.write_str("<bos>"),
            Token::Eos => f.write_str("<eos>"),
            Token::Sep => f.write_str("<sep>"),
            Token::Pad => f.write_str("<pad>"),
        }
    }
}

pub fn encode_text(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Inverse of [`encode_text`] over byte tokens; other tokens are skipped.
pub fn decode_text(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&i| i < N_BYTE_TOKENS).map(|&i| i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn landmark_id(s: Symbol) -> usize {
    Token::Landmark(s).id()
}

pub fn is_landmark(id: usize) -> bool {
    (LANDMARK_BASE..BOS).contains(&id)
}

/// Every token with its id, in id order.
pub fn all_tokens() -> impl Iterator<Item = (usize, Token)> {
    (0..VOCAB_SIZE).map(|i| (i, Token::from_id(i).expect("dense ids")))
}
