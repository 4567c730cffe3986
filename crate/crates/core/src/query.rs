//! Entity/motion query extraction: lexicon tagging, word embeddings, the query
//! Transformer, and the class masks that split query features into entity and
//! motion views.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{positional_encoding, BlockConfig, BlockKind, Linear, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const SHIPPED_LEXICON: &str = include_str!("../data/lexicon.tsv");
pub const UNK: &str = "<unk>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WordClass {
    Entity,
    Motion,
    Other,
}

impl WordClass {
    /// One-hot `[p_entity, p_motion, p_other]`.
    pub fn probs(self) -> [f64; 3] {
        match self {
            WordClass::Entity => [1.0, 0.0, 0.0],
            WordClass::Motion => [0.0, 1.0, 0.0],
            WordClass::Other => [0.0, 0.0, 1.0],
        }
    }
}

impl fmt::Display for WordClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WordClass::Entity => "entity",
            WordClass::Motion => "motion",
            WordClass::Other => "other",
        })
    }
}

impl FromStr for WordClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entity" => Ok(WordClass::Entity),
            "motion" => Ok(WordClass::Motion),
            "other" => Ok(WordClass::Other),
            _ => Err(Error::Input(format!("unknown word class `{s}`"))),
        }
    }
}

/// Word → class table, one class per word.
#[derive(Clone, Debug)]
pub struct Lexicon {
    entries: Vec<(String, WordClass)>,
    index: HashMap<String, WordClass>,
}

impl Lexicon {
    /// Parses `word<TAB>class` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut index = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, class) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(origin, format!("line {}: expected word<TAB>class", n + 1)))?;
            let class: WordClass = class
                .trim()
                .parse()
                .map_err(|e| Error::parse(origin, format!("line {}: {e}", n + 1)))?;
            let word = word.trim().to_lowercase();
            if index.insert(word.clone(), class).is_some() {
                return Err(Error::parse(origin, format!("line {}: duplicate word `{word}`", n + 1)));
            }
            entries.push((word, class));
        }
        Ok(Self { entries, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn shipped() -> Self {
        Self::parse(SHIPPED_LEXICON, Path::new("<shipped lexicon>")).expect("shipped lexicon parses")
    }

    pub fn class_of(&self, word: &str) -> Option<WordClass> {
        self.index.get(&word.to_lowercase()).copied()
    }

    /// Words of one class, in file order.
    pub fn words(&self, class: WordClass) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, c)| *c == class)
            .map(|(w, _)| w.as_str())
            .collect()
    }

    pub fn entries(&self) -> &[(String, WordClass)] {
        &self.entries
    }
}

/// Lexicon lookup; words missing from the lexicon are `Other`.
pub fn tag_tokens<S: AsRef<str>>(tokens: &[S], lexicon: &Lexicon) -> Vec<WordClass> {
    tokens
        .iter()
        .map(|t| lexicon.class_of(t.as_ref()).unwrap_or(WordClass::Other))
        .collect()
}

/// A tokenized query with one class per token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuerySample {
    pub tokens: Vec<String>,
    pub classes: Vec<WordClass>,
}

impl QuerySample {
    pub fn new(tokens: Vec<String>, classes: Vec<WordClass>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Input("query has no tokens".into()));
        }
        if tokens.len() != classes.len() {
            return Err(Error::Input(format!(
                "{} tokens but {} classes",
                tokens.len(),
                classes.len()
            )));
        }
        Ok(Self { tokens, classes })
    }

    pub fn tagged(text: &str, lexicon: &Lexicon) -> Result<Self> {
        let tokens: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
        let classes = tag_tokens(&tokens, lexicon);
        Self::new(tokens, classes)
    }

    /// Parses space-separated `token/class` pairs.
    pub fn from_tagged_line(line: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut classes = Vec::new();
        for pair in line.split_whitespace() {
            let (tok, class) = pair
                .rsplit_once('/')
                .ok_or_else(|| Error::Input(format!("expected token/class, got `{pair}`")))?;
            tokens.push(tok.to_string());
            classes.push(class.parse()?);
        }
        Self::new(tokens, classes)
    }

    pub fn to_tagged_line(&self) -> String {
        self.tokens
            .iter()
            .zip(&self.classes)
            .map(|(t, c)| format!("{t}/{c}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn class_probs(&self) -> Vec<[f64; 3]> {
        self.classes.iter().map(|c| c.probs()).collect()
    }

    /// Per-token multipliers `p_e + p_o` (entity view) and `p_m + p_o` (motion view).
    pub fn masks(&self) -> (Vec<f64>, Vec<f64>) {
        self.class_probs()
            .iter()
            .map(|p| (p[0] + p[2], p[1] + p[2]))
            .unzip()
    }
}

/// Reads a pre-tagged query file: one sample per line.
pub fn read_tagged_queries(path: &Path) -> Result<Vec<QuerySample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            QuerySample::from_tagged_line(l).map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))
        })
        .collect()
}

/// Word → row index of the embedding table. Index 0 is the unknown-word row.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    lexicon: Lexicon,
}

impl Vocabulary {
    pub fn from_lexicon(lexicon: Lexicon) -> Self {
        let mut words = vec![UNK.to_string()];
        words.extend(lexicon.entries().iter().map(|(w, _)| w.clone()));
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index, lexicon }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn index_of(&self, word: &str) -> usize {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn indices<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.index_of(t.as_ref())).collect()
    }
}

/// Query features `F_q` and its entity / motion masked views, all `N×d`.
#[derive(Clone, Copy, Debug)]
pub struct QueryFeatures {
    pub full: Var,
    pub entity: Var,
    pub motion: Var,
}

#[derive(Clone, Debug)]
pub struct QueryEncoder {
    pub embedding: ParamId,
    pub d_word: usize,
    project: Linear,
    block: TransformerBlock,
}

impl QueryEncoder {
    pub fn new(ps: &mut ParamStore, vocab_size: usize, d_word: usize, block_cfg: &BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        if !d_word.is_multiple_of(2) {
            return Err(Error::Config(format!("word embedding width must be even, got {d_word}")));
        }
        let embedding = ps.add_uniform_bound("query.embedding", &[vocab_size, d_word], 0.1, rng);
        let project = Linear::new(ps, "query.fc1", d_word, block_cfg.d, rng);
        let cfg = BlockConfig {
            kind: BlockKind::STANDARD,
            ..block_cfg.clone()
        };
        let block = TransformerBlock::new(ps, "query.block", &cfg, rng)?;
        Ok(Self {
            embedding,
            d_word,
            project,
            block,
        })
    }

    pub fn encode(&self, g: &mut Graph, ps: &ParamStore, vocab: &Vocabulary, sample: &QuerySample) -> Result<QueryFeatures> {
        if sample.is_empty() {
            return Err(Error::Input("query has no tokens".into()));
        }
        let n = sample.len();
        let table = g.param(ps, self.embedding);
        let words = g.gather_rows(table, &vocab.indices(&sample.tokens))?;
        let pe = g.constant(positional_encoding(n, self.d_word)?);
        let q = g.add(words, pe)?;
        let projected = self.project.forward(g, ps, q)?;
        let full = self.block.forward(g, ps, projected)?;
        let (entity_mask, motion_mask) = sample.masks();
        let em = g.constant(Tensor::from_parts(vec![n], entity_mask));
        let mm = g.constant(Tensor::from_parts(vec![n], motion_mask));
        Ok(QueryFeatures {
            full,
            entity: g.mul_rows(full, em)?,
            motion: g.mul_rows(full, mm)?,
        })
    }
}
