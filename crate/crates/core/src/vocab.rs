//! Character-level vocabulary shared by every toy model.
//!
//! Word tokens are single characters. Four control tokens (PAD, BOS, EOS,
//! SEP) live in the same id space. Expert tokens are never part of the
//! vocabulary proper: they occupy the logical range `[|V|, |V| + |E|)` of an
//! extended output head and cannot be encoded or rendered as text.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{EtrError, Result};

pub type TokenId = u32;

/// Upper bound on the logical expert-token range used when classifying ids
/// without a head at hand.
pub const EXPERT_ID_SPAN: u32 = 1 << 20;

pub const VOCAB_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Controls {
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub sep: TokenId,
}

impl Default for Controls {
    fn default() -> Self {
        Controls {
            pad: 0,
            bos: 1,
            eos: 2,
            sep: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Pad,
    Bos,
    Eos,
    Sep,
}

impl Control {
    pub fn display(self) -> &'static str {
        match self {
            Control::Pad => "<pad>",
            Control::Bos => "<bos>",
            Control::Eos => "<eos>",
            Control::Sep => "<sep>",
        }
    }
}

/// What a global token id denotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Word(char),
    Control(Control),
    Expert(ExpertTokenId),
}

/// An expert token: output-only, addressed by its index in the expert head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExpertTokenId {
    pub expert_index: usize,
}

impl ExpertTokenId {
    pub fn new(expert_index: usize) -> Self {
        ExpertTokenId { expert_index }
    }

    pub fn global_id(self, vocab_size: usize) -> TokenId {
        (vocab_size + self.expert_index) as TokenId
    }

    pub fn display(self) -> String {
        expert_token_display(self.expert_index)
    }
}

pub fn expert_token_display(index: usize) -> String {
    format!("<ExpertToken_{index}>")
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format_version: u32,
    chars: String,
    controls: Controls,
}

/// Bijective token/id map over characters and controls.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    controls: Controls,
    id_to_kind: Vec<TokenKind>,
    char_to_id: HashMap<char, TokenId>,
}

impl Vocabulary {
    /// Printable ASCII (`' '..='~'`) with controls at ids 0..4.
    pub fn printable_ascii() -> Self {
        let chars: String = (b' '..=b'~').map(char::from).collect();
        Self::new(&chars, Controls::default()).expect("printable ASCII vocabulary is valid")
    }

    /// Builds a vocabulary. Control ids are fixed by `controls`; characters
    /// fill the remaining ids in order.
    pub fn new(chars: &str, controls: Controls) -> Result<Self> {
        let chars: Vec<char> = chars.chars().collect();
        let size = chars.len() + 4;
        let ctrl = [
            (controls.pad, Control::Pad),
            (controls.bos, Control::Bos),
            (controls.eos, Control::Eos),
            (controls.sep, Control::Sep),
        ];
        let mut id_to_kind: Vec<Option<TokenKind>> = vec![None; size];
        for (id, c) in ctrl {
            let slot = id_to_kind
                .get_mut(id as usize)
                .ok_or_else(|| EtrError::format(format!("control id {id} >= vocabulary size {size}")))?;
            if slot.is_some() {
                return Err(EtrError::format(format!("control id {id} assigned twice")));
            }
            *slot = Some(TokenKind::Control(c));
        }
        let mut char_to_id = HashMap::with_capacity(chars.len());
        let mut next = chars.iter();
        for (id, slot) in id_to_kind.iter_mut().enumerate() {
            if slot.is_none() {
                let ch = *next.next().expect("exactly |chars| free slots");
                if char_to_id.insert(ch, id as TokenId).is_some() {
                    return Err(EtrError::format(format!("duplicate character {ch:?}")));
                }
                *slot = Some(TokenKind::Word(ch));
            }
        }
        Ok(Vocabulary {
            chars,
            controls,
            id_to_kind: id_to_kind.into_iter().map(|k| k.expect("filled")).collect(),
            char_to_id,
        })
    }

    pub fn size(&self) -> usize {
        self.id_to_kind.len()
    }

    pub fn controls(&self) -> Controls {
        self.controls
    }

    pub fn pad(&self) -> TokenId {
        self.controls.pad
    }

    pub fn bos(&self) -> TokenId {
        self.controls.bos
    }

    pub fn eos(&self) -> TokenId {
        self.controls.eos
    }

    pub fn sep(&self) -> TokenId {
        self.controls.sep
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn contains_char(&self, ch: char) -> bool {
        self.char_to_id.contains_key(&ch)
    }

    pub fn id_of(&self, ch: char) -> Option<TokenId> {
        self.char_to_id.get(&ch).copied()
    }

    /// Classifies an id. Ids at or above `|V|` are expert tokens provided
    /// they fall within `expert_count`.
    pub fn classify(&self, id: TokenId, expert_count: usize) -> Result<TokenKind> {
        let v = self.size();
        match self.id_to_kind.get(id as usize) {
            Some(kind) => Ok(*kind),
            None if (id as usize) < v + expert_count => {
                Ok(TokenKind::Expert(ExpertTokenId::new(id as usize - v)))
            }
            None => Err(EtrError::TokenOutOfRange(id)),
        }
    }

    /// Word and EOS tokens: what greedy decoding is allowed to emit.
    pub fn is_emittable(&self, id: TokenId) -> bool {
        matches!(
            self.id_to_kind.get(id as usize),
            Some(TokenKind::Word(_)) | Some(TokenKind::Control(Control::Eos))
        )
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = Vec::with_capacity(text.len());
        self.encode_into(text, &mut ids)?;
        Ok(ids)
    }

    pub fn encode_into(&self, text: &str, out: &mut Vec<TokenId>) -> Result<()> {
        for (offset, ch) in text.chars().enumerate() {
            match self.char_to_id.get(&ch) {
                Some(&id) => out.push(id),
                None => return Err(EtrError::UnsupportedChar { ch, offset }),
            }
        }
        Ok(())
    }

    /// Renders ids as text. Controls render as their display strings;
    /// expert-range ids are rejected.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            match self.classify(id, EXPERT_ID_SPAN as usize)? {
                TokenKind::Word(ch) => out.push(ch),
                TokenKind::Control(c) => out.push_str(c.display()),
                TokenKind::Expert(_) => return Err(EtrError::NotRenderable(id)),
            }
        }
        Ok(out)
    }

    /// Display string of a single token, including expert tokens.
    pub fn display(&self, id: TokenId, expert_count: usize) -> Result<String> {
        Ok(match self.classify(id, expert_count)? {
            TokenKind::Word(ch) => ch.to_string(),
            TokenKind::Control(c) => c.display().to_string(),
            TokenKind::Expert(e) => e.display(),
        })
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            format_version: VOCAB_FORMAT_VERSION,
            chars: self.chars.iter().collect(),
            controls: self.controls,
        };
        serde_json::to_string(&file).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.format_version != VOCAB_FORMAT_VERSION {
            return Err(EtrError::format(format!(
                "unsupported vocabulary format_version {}",
                file.format_version
            )));
        }
        Self::new(&file.chars, file.controls)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::printable_ascii()
    }
}
