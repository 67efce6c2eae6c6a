use std::collections::HashMap;

pub const PAD_ID: u32 = 0;
pub const OOV_ID: u32 = 1;

const PAD_TOKEN: &str = "[pad]";
const OOV_TOKEN: &str = "[oov]";

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_lowercase())
        .collect()
}

/// Token to id mapping. Ids 0 and 1 are reserved for padding and
/// out-of-vocabulary tokens; the rest are assigned in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(PAD_TOKEN);
        v.insert(OOV_TOKEN);
        v
    }

    /// Builds a vocabulary from `tokens` listed in id order, starting at id 2.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab::new();
        for t in tokens {
            v.insert(t.as_ref());
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(id) = self.index.get(token) {
            return *id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn get(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Tokens from id 2 onward, in id order.
    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[2..]
    }

    /// Token ids for `title`, truncated or padded to `max_len`. A title with
    /// no tokens becomes a single OOV token so every title is encodable.
    pub fn encode_title(&self, title: &str, max_len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = tokenize(title).iter().map(|t| self.get(t)).take(max_len).collect();
        if ids.is_empty() {
            ids.push(OOV_ID);
        }
        ids.resize(max_len, PAD_ID);
        ids
    }

    /// Inverse of [`Vocab::encode_title`] up to tokenization.
    pub fn decode_title(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|id| **id != PAD_ID)
            .map(|id| self.token(*id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
