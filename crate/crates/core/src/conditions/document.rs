use std::fmt;

use serde::{Deserialize, Serialize};

use super::codebook::{Codebook, Descriptor};
use crate::error::{Error, Result};
use crate::scene::Image;
use crate::stats::nearest_rank;

pub const VISUAL_TOKENS_PER_DOC: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerfLevel {
    Lo,
    Md,
    Hi,
}

impl PerfLevel {
    pub const ALL: [PerfLevel; 3] = [PerfLevel::Lo, PerfLevel::Md, PerfLevel::Hi];

    pub fn label(self) -> &'static str {
        match self {
            PerfLevel::Lo => "lo",
            PerfLevel::Md => "md",
            PerfLevel::Hi => "hi",
        }
    }
}

/// Token id layout: visual words first, then one token per strategy, then
/// the performance terciles (if any).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub visual_words: usize,
    /// Centroid descriptor of every visual word; empty for unlabeled vocabularies.
    pub visual_descriptors: Vec<Descriptor>,
    pub strategies: usize,
    pub perf_levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TokenLabel {
    Visual {
        word: usize,
        descriptor: Option<Descriptor>,
    },
    Strategy {
        id: usize,
    },
    Perf {
        level: PerfLevel,
    },
}

impl fmt::Display for TokenLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenLabel::Visual {
                word,
                descriptor: Some([m, dx, dy]),
            } => write!(f, "word{word}[lum={m:.2},dx={dx:.2},dy={dy:.2}]"),
            TokenLabel::Visual { word, .. } => write!(f, "word{word}"),
            TokenLabel::Strategy { id } => write!(f, "strategy={id}"),
            TokenLabel::Perf { level } => write!(f, "perf={}", level.label()),
        }
    }
}

impl Vocabulary {
    /// Visual words only, without descriptors.
    pub fn plain(words: usize) -> Self {
        Self {
            visual_words: words,
            visual_descriptors: Vec::new(),
            strategies: 0,
            perf_levels: 0,
        }
    }

    pub fn with_competency(codebook: &Codebook, strategies: usize) -> Self {
        Self {
            visual_words: codebook.len(),
            visual_descriptors: codebook.centroids.clone(),
            strategies,
            perf_levels: PerfLevel::ALL.len(),
        }
    }

    pub fn size(&self) -> usize {
        self.visual_words + self.strategies + self.perf_levels
    }

    pub fn strategy_token(&self, id: usize) -> u32 {
        (self.visual_words + id) as u32
    }

    pub fn perf_token(&self, level: PerfLevel) -> u32 {
        (self.visual_words + self.strategies + level as usize) as u32
    }

    pub fn is_visual(&self, token: u32) -> bool {
        (token as usize) < self.visual_words
    }

    pub fn label(&self, token: u32) -> Option<TokenLabel> {
        let t = token as usize;
        if t < self.visual_words {
            Some(TokenLabel::Visual {
                word: t,
                descriptor: self.visual_descriptors.get(t).copied(),
            })
        } else if t < self.visual_words + self.strategies {
            Some(TokenLabel::Strategy {
                id: t - self.visual_words,
            })
        } else if t < self.size() {
            Some(TokenLabel::Perf {
                level: PerfLevel::ALL[t - self.visual_words - self.strategies],
            })
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: u64,
    pub tokens: Vec<u32>,
    pub competency_tokens_present: bool,
}

impl Document {
    pub fn visual(doc_id: u64, tokens: Vec<u32>) -> Self {
        Self {
            doc_id,
            tokens,
            competency_tokens_present: false,
        }
    }

    /// The document with competency tokens removed.
    pub fn visual_part(&self, vocab: &Vocabulary) -> Document {
        Document::visual(
            self.doc_id,
            self.tokens
                .iter()
                .copied()
                .filter(|t| vocab.is_visual(*t))
                .collect(),
        )
    }
}

/// Tercile boundaries of absolute agent error, fixed from the train split.
/// Buckets are closed on the left: `[0, lower)`, `[lower, upper)`, `[upper, inf)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorTerciles {
    pub lower: f64,
    pub upper: f64,
}

impl ErrorTerciles {
    pub fn from_abs_errors(errors: &[f64]) -> Result<Self> {
        let lower = nearest_rank(errors, 1.0 / 3.0)
            .ok_or_else(|| Error::InvalidInput("no errors to split into terciles".into()))?;
        let upper = nearest_rank(errors, 2.0 / 3.0).expect("non-empty");
        Ok(Self { lower, upper })
    }

    pub fn level(&self, abs_error: f64) -> PerfLevel {
        if abs_error < self.lower {
            PerfLevel::Lo
        } else if abs_error < self.upper {
            PerfLevel::Md
        } else {
            PerfLevel::Hi
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompetencyInfo {
    pub strategy_id: usize,
    pub abs_error_m: f64,
}

/// Turns images (plus optional competency measurements) into documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub codebook: Codebook,
    pub vocab: Vocabulary,
    pub terciles: Option<ErrorTerciles>,
}

impl Tokenizer {
    pub fn visual_only(codebook: Codebook) -> Self {
        let vocab = Vocabulary {
            visual_words: codebook.len(),
            visual_descriptors: codebook.centroids.clone(),
            strategies: 0,
            perf_levels: 0,
        };
        Self {
            codebook,
            vocab,
            terciles: None,
        }
    }

    pub fn with_competency(codebook: Codebook, strategies: usize, terciles: ErrorTerciles) -> Self {
        let vocab = Vocabulary::with_competency(&codebook, strategies);
        Self {
            codebook,
            vocab,
            terciles: Some(terciles),
        }
    }

    /// Sixteen visual tokens in raster patch order, then `strategy=k` and the
    /// performance tercile token when competency is given.
    pub fn tokenize(
        &self,
        doc_id: u64,
        image: &Image,
        competency: Option<CompetencyInfo>,
    ) -> Result<Document> {
        let mut tokens: Vec<u32> = self
            .codebook
            .words(image)?
            .into_iter()
            .map(|w| w as u32)
            .collect();
        let Some(info) = competency else {
            return Ok(Document::visual(doc_id, tokens));
        };
        let terciles = self.terciles.ok_or_else(|| {
            Error::Configuration("error terciles must be fixed before adding competency tokens".into())
        })?;
        if info.strategy_id >= self.vocab.strategies {
            return Err(Error::InvalidInput(format!(
                "strategy {} outside vocabulary of {} strategies",
                info.strategy_id, self.vocab.strategies
            )));
        }
        tokens.push(self.vocab.strategy_token(info.strategy_id));
        tokens.push(self.vocab.perf_token(terciles.level(info.abs_error_m)));
        Ok(Document {
            doc_id,
            tokens,
            competency_tokens_present: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_word() -> Codebook {
        Codebook {
            centroids: vec![[0.1, 0.0, 0.0], [0.9, 0.0, 0.0]],
            degenerate: false,
        }
    }

    fn half_dark() -> Image {
        // Top half dark (0.0), bottom half bright (1.0): tile rows 0-1 dark.
        let pixels = (0..24)
            .flat_map(|y| (0..32).map(move |_| if y < 12 { 0.0 } else { 1.0 }))
            .collect();
        Image::new(32, 24, pixels).unwrap()
    }

    #[test]
    fn hand_quantized_tokens() {
        let tok = Tokenizer::visual_only(two_word());
        let doc = tok.tokenize(3, &half_dark(), None).unwrap();
        let mut expected = vec![0u32; 8];
        expected.extend([1u32; 8]);
        assert_eq!(doc.tokens, expected);
        assert!(!doc.competency_tokens_present);
        assert_eq!(doc.tokens.len(), VISUAL_TOKENS_PER_DOC);
    }

    #[test]
    fn competency_tokens_follow_visual_tokens() {
        let terciles = ErrorTerciles {
            lower: 1.0,
            upper: 2.0,
        };
        let tok = Tokenizer::with_competency(two_word(), 3, terciles);
        let doc = tok
            .tokenize(
                0,
                &half_dark(),
                Some(CompetencyInfo {
                    strategy_id: 2,
                    abs_error_m: 2.0,
                }),
            )
            .unwrap();
        assert_eq!(doc.tokens.len(), 18);
        assert!(doc.competency_tokens_present);
        // vocab: 2 visual, strategies 2..5, perf 5..8; boundary error is "hi".
        assert_eq!(&doc.tokens[16..], &[4, 7]);
        assert_eq!(tok.vocab.label(4), Some(TokenLabel::Strategy { id: 2 }));
        assert_eq!(
            tok.vocab.label(7),
            Some(TokenLabel::Perf {
                level: PerfLevel::Hi
            })
        );
        assert_eq!(doc.visual_part(&tok.vocab).tokens.len(), 16);
    }

    #[test]
    fn tercile_boundaries_are_closed_left() {
        let t = ErrorTerciles::from_abs_errors(&[0.5, 1.0, 1.5, 2.0, 2.5, 3.0]).unwrap();
        assert_eq!((t.lower, t.upper), (1.0, 2.0));
        assert_eq!(t.level(0.99), PerfLevel::Lo);
        assert_eq!(t.level(1.0), PerfLevel::Md);
        assert_eq!(t.level(2.0), PerfLevel::Hi);
    }

    #[test]
    fn geometry_mismatch() {
        let tok = Tokenizer::visual_only(two_word());
        assert!(matches!(
            tok.tokenize(0, &Image::filled(16, 16, 0.0), None),
            Err(Error::InvalidInput(_))
        ));
    }
}
