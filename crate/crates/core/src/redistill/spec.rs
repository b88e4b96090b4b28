use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::closedform::LabelRedactionPlan;
use crate::conditional::Conditional;
use crate::error::{Error, Result};
use crate::toy::SyntheticTask;

/// Redaction set and reference map expressed as token replacement.
///
/// `c` is redacted when any of its tokens is a key of the map; `c_hat`
/// replaces every such token by its value. A label task is the special case
/// of length-one conditionals.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SpecFile", into = "SpecFile")]
pub struct RedactionSpec {
    replace: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpecFile {
    pub redact: Vec<usize>,
    pub reference: Vec<usize>,
}

impl TryFrom<SpecFile> for RedactionSpec {
    type Error = Error;
    fn try_from(f: SpecFile) -> Result<Self> {
        if f.redact.len() != f.reference.len() {
            return Err(Error::config(
                "redaction",
                "redact and reference lists differ in length",
            ));
        }
        let pairs: Vec<(usize, usize)> = f.redact.into_iter().zip(f.reference).collect();
        RedactionSpec::new(&pairs)
    }
}

impl From<RedactionSpec> for SpecFile {
    fn from(s: RedactionSpec) -> Self {
        SpecFile {
            redact: s.replace.keys().copied().collect(),
            reference: s.replace.values().copied().collect(),
        }
    }
}

impl RedactionSpec {
    /// `pairs` lists `(redacted token, replacement token)`. An empty list
    /// gives an empty redaction set.
    pub fn new(pairs: &[(usize, usize)]) -> Result<Self> {
        let mut replace = BTreeMap::new();
        for &(from, to) in pairs {
            if replace.insert(from, to).is_some() {
                return Err(Error::config(
                    "redaction.redact",
                    format!("token {from} listed twice"),
                ));
            }
        }
        for (&from, &to) in &replace {
            if replace.contains_key(&to) {
                return Err(Error::config(
                    "redaction.reference",
                    format!("replacement {to} for token {from} is itself redacted"),
                ));
            }
        }
        Ok(Self { replace })
    }

    pub fn empty() -> Self {
        Self {
            replace: BTreeMap::new(),
        }
    }

    pub fn from_plan(plan: &LabelRedactionPlan) -> Self {
        Self {
            replace: plan.pairs().into_iter().collect(),
        }
    }

    /// Resolves token names against the task vocabulary.
    pub fn from_names(
        task: &SyntheticTask,
        redact: &[String],
        reference: &[String],
    ) -> Result<Self> {
        if redact.len() != reference.len() {
            return Err(Error::config(
                "redaction",
                "redact and reference lists differ in length",
            ));
        }
        let mut pairs = Vec::new();
        for (a, b) in redact.iter().zip(reference) {
            let from = task
                .token_id(a)
                .map_err(|e| Error::config("redaction.redact", e.to_string()))?;
            let to = task
                .token_id(b)
                .map_err(|e| Error::config("redaction.reference", e.to_string()))?;
            pairs.push((from, to));
        }
        Self::new(&pairs)
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.replace.iter().map(|(&a, &b)| (a, b)).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.replace.is_empty()
    }

    pub fn contains(&self, c: &Conditional) -> bool {
        c.tokens().iter().any(|t| self.replace.contains_key(t))
    }

    /// `c_hat` for a redacted `c`.
    pub fn reference(&self, c: &Conditional) -> Result<Conditional> {
        if !self.contains(c) {
            return Err(Error::InvalidConditional(format!("{c} is not redacted")));
        }
        Ok(Conditional(
            c.tokens()
                .iter()
                .map(|t| *self.replace.get(t).unwrap_or(t))
                .collect(),
        ))
    }

    /// `(valid, redacted)` split preserving order.
    pub fn partition(&self, conds: &[Conditional]) -> (Vec<Conditional>, Vec<Conditional>) {
        conds.iter().cloned().partition(|c| !self.contains(c))
    }

    /// Checks the spec against a task: tokens exist, every reference is a
    /// valid non-redacted conditional and some conditional stays valid.
    pub fn validate(&self, task: &SyntheticTask) -> Result<()> {
        let vocab = task.vocab_size();
        for (&a, &b) in &self.replace {
            if a >= vocab || b >= vocab {
                return Err(Error::config(
                    "redaction",
                    format!("token pair ({a}, {b}) outside vocabulary"),
                ));
            }
        }
        let (valid, redacted) = self.partition(&task.conditionals());
        if valid.is_empty() {
            return Err(Error::config(
                "redaction",
                "every conditional would be redacted",
            ));
        }
        for c in &redacted {
            let r = self.reference(c)?;
            task.validate(&r).map_err(|e| {
                Error::config("redaction.reference", format!("reference of {c}: {e}"))
            })?;
            if self.contains(&r) {
                return Err(Error::config(
                    "redaction.reference",
                    format!("reference of {c} is redacted"),
                ));
            }
        }
        Ok(())
    }
}
