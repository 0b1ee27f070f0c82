//! Training records and the line-delimited JSON corpus manifest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tokens::Vocab;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub height_px: u32,
    pub width_px: u32,
    pub id: u32,
    /// Stand-in for pixel content; selects the vision codes of the rendered tokens.
    pub content_seed: u64,
}

impl ImageSpec {
    pub fn new(height_px: u32, width_px: u32, id: u32) -> Self {
        ImageSpec {
            height_px,
            width_px,
            id,
            content_seed: id as u64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height_px == 0 || self.width_px == 0 {
            return Err(Error::InvalidImage {
                index: self.id as usize,
                height: self.height_px,
                width: self.width_px,
            });
        }
        Ok(())
    }
}

/// One question/answer exchange. Text is already tokenized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
    pub turn_index: u32,
}

impl Turn {
    pub fn new(question: Vec<u32>, answer: Vec<u32>, turn_index: u32) -> Self {
        Turn {
            question,
            answer,
            turn_index,
        }
    }

    /// Fills both spans with random text ids.
    pub fn synthetic<R: Rng>(q_len: usize, a_len: usize, turn_index: u32, vocab: &Vocab, rng: &mut R) -> Self {
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(0..vocab.text_size)).collect();
        Turn {
            question: draw(q_len),
            answer: draw(a_len),
            turn_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultimodalExample {
    pub images: Vec<ImageSpec>,
    pub turns: Vec<Turn>,
    pub is_grounding: bool,
}

impl MultimodalExample {
    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::NoTurns);
        }
        for img in &self.images {
            img.validate()?;
        }
        if let Some(i) = self.turns.iter().position(|t| t.answer.is_empty()) {
            return Err(Error::EmptyAnswer(i));
        }
        Ok(())
    }

    /// Random example with `n_images` images whose vision-token counts are
    /// chosen by the caller at render time.
    pub fn random<R: Rng>(rng: &mut R, vocab: &Vocab, n_images: usize, turn_lens: &[(usize, usize)], grounding: bool) -> Self {
        let images = (0..n_images)
            .map(|i| ImageSpec {
                height_px: 28 * rng.random_range(1..8),
                width_px: 28 * rng.random_range(1..8),
                id: i as u32,
                content_seed: rng.random(),
            })
            .collect();
        let turns = turn_lens
            .iter()
            .enumerate()
            .map(|(t, &(q, a))| Turn::synthetic(q, a, t as u32, vocab, rng))
            .collect();
        MultimodalExample {
            images,
            turns,
            is_grounding: grounding,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImageRecord {
    h: u32,
    w: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TurnRecord {
    q_len: usize,
    a_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExampleRecord {
    #[serde(default)]
    images: Vec<ImageRecord>,
    turns: Vec<TurnRecord>,
    #[serde(default)]
    grounding: bool,
}

/// Parses a manifest: one JSON record per non-blank line.
///
/// Token ids missing from a record are drawn from a generator seeded by
/// `(seed, line number)`, so the same manifest and seed always yield the
/// same examples.
pub fn parse_manifest(text: &str, vocab: &Vocab, seed: u64) -> Result<Vec<MultimodalExample>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Manifest {
            line: lineno + 1,
            message,
        };
        let rec: ExampleRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(lineno as u64);
        let images = rec
            .images
            .iter()
            .enumerate()
            .map(|(i, r)| ImageSpec {
                height_px: r.h,
                width_px: r.w,
                id: i as u32,
                content_seed: rng.random(),
            })
            .collect();
        let mut turns = Vec::with_capacity(rec.turns.len());
        for (t, r) in rec.turns.iter().enumerate() {
            let mut turn = Turn::synthetic(r.q_len, r.a_len, t as u32, vocab, &mut rng);
            if let Some(q) = &r.q {
                if q.len() != r.q_len {
                    return Err(bad(format!("turn {t}: q has {} ids, q_len is {}", q.len(), r.q_len)));
                }
                turn.question = q.clone();
            }
            if let Some(a) = &r.a {
                if a.len() != r.a_len {
                    return Err(bad(format!("turn {t}: a has {} ids, a_len is {}", a.len(), r.a_len)));
                }
                turn.answer = a.clone();
            }
            turns.push(turn);
        }
        let ex = MultimodalExample {
            images,
            turns,
            is_grounding: rec.grounding,
        };
        ex.validate().map_err(|e| bad(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

/// Serializes examples back to manifest lines (counts plus explicit ids).
pub fn to_manifest_line(ex: &MultimodalExample) -> String {
    let rec = ExampleRecord {
        images: ex
            .images
            .iter()
            .map(|i| ImageRecord {
                h: i.height_px,
                w: i.width_px,
            })
            .collect(),
        turns: ex
            .turns
            .iter()
            .map(|t| TurnRecord {
                q_len: t.question.len(),
                a_len: t.answer.len(),
                q: Some(t.question.clone()),
                a: Some(t.answer.clone()),
            })
            .collect(),
        grounding: ex.is_grounding,
    };
    serde_json::to_string(&rec).expect("record serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINES: &str = r#"{"images":[{"h":56,"w":84}],"turns":[{"q_len":3,"a_len":2}],"grounding":false}

{"turns":[{"q_len":1,"a_len":1,"q":[7],"a":[9]},{"q_len":2,"a_len":4}],"grounding":true}
"#;

    #[test]
    fn manifest_parses_and_is_deterministic() {
        let v = Vocab::default();
        let a = parse_manifest(LINES, &v, 3).unwrap();
        let b = parse_manifest(LINES, &v, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].images[0].height_px, 56);
        assert_eq!(a[1].turns[0].question, vec![7]);
        assert_eq!(a[1].turns[1].answer.len(), 4);
        assert!(a[1].is_grounding);
        assert_ne!(parse_manifest(LINES, &v, 4).unwrap(), a);
    }

    #[test]
    fn manifest_rejects_bad_records() {
        let v = Vocab::default();
        assert!(parse_manifest(r#"{"turns":[]}"#, &v, 0).is_err());
        assert!(parse_manifest(r#"{"turns":[{"q_len":1,"a_len":0}]}"#, &v, 0).is_err());
        assert!(parse_manifest(r#"{"images":[{"h":0,"w":3}],"turns":[{"q_len":1,"a_len":1}]}"#, &v, 0).is_err());
        assert!(parse_manifest("not json", &v, 0).is_err());
    }

    #[test]
    fn manifest_line_round_trip() {
        let v = Vocab::default();
        let a = parse_manifest(LINES, &v, 11).unwrap();
        let text: String = a.iter().map(|e| to_manifest_line(e) + "\n").collect();
        let b = parse_manifest(&text, &v, 99).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.turns, y.turns);
        }
    }
}
