use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::PAD_ID;
use crate::error::{Result, VeilError};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const UNK_ID: usize = 1;

/// Token → dense id map with PAD = 0 and UNK = 1.
///
/// Ids after the reserved pair are assigned by descending frequency, ties
/// broken lexicographically, so a vocabulary is a pure function of the token
/// multiset and `min_count`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

impl Vocab {
    pub fn from_tokens<I>(tokens: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = String>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut list = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        list.extend(kept.into_iter().map(|(t, _)| t));
        Self::from_list(list, min_count).expect("reserved tokens are in place")
    }

    fn from_list(tokens: Vec<String>, min_count: usize) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(VeilError::Data(
                "vocabulary must start with <pad> and <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(VeilError::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab {
            tokens,
            index,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or UNK.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_file_string(&self) -> String {
        let mut s = format!("# min_count={}\n", self.min_count);
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut min_count = None;
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let lineno = n + 1;
            let err = |msg: String| VeilError::Parse {
                path: "<vocab>".into(),
                line: lineno,
                msg,
            };
            if let Some(rest) = line.strip_prefix('#') {
                let v = rest
                    .trim()
                    .strip_prefix("min_count=")
                    .ok_or_else(|| err("expected `# min_count=N` header".into()))?;
                min_count = Some(v.parse().map_err(|_| err(format!("bad min_count `{v}`")))?);
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| err("expected token<TAB>id".into()))?;
            let id: usize = id.parse().map_err(|_| err(format!("bad id `{id}`")))?;
            if id != tokens.len() {
                return Err(err(format!(
                    "ids must be dense, expected {} got {id}",
                    tokens.len()
                )));
            }
            tokens.push(tok.to_string());
        }
        let min_count = min_count
            .ok_or_else(|| VeilError::Data("vocabulary file lacks `# min_count=` header".into()))?;
        Self::from_list(tokens, min_count)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| VeilError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VeilError::io(path, e))?;
        Self::parse(&text)
    }
}
