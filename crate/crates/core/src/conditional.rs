use std::fmt;

use serde::{Deserialize, Serialize};

/// A conditional as a sequence of vocabulary indices.
///
/// Class labels are length-one sequences; captions are longer ones.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Conditional(pub Vec<usize>);

impl Conditional {
    pub fn label(label: usize) -> Self {
        Self(vec![label])
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Copy with position `pos` replaced by `token`.
    pub fn with_token(&self, pos: usize, token: usize) -> Self {
        let mut t = self.0.clone();
        t[pos] = token;
        Self(t)
    }
}

impl fmt::Display for Conditional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "[{}]", parts.join(" "))
    }
}
