//! Text-only instruction tasks. They share their vocabulary with the visual
//! questions so that a text-trained decoder already knows every answer word.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vqa::{COLORS, POSITIONS, SHAPES};
use super::{split_rng, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextTag {
    Copy,
    Reverse,
    Arithmetic,
    Compare,
    Count,
}

impl TextTag {
    pub const ALL: [TextTag; 5] = [
        TextTag::Copy,
        TextTag::Reverse,
        TextTag::Arithmetic,
        TextTag::Compare,
        TextTag::Count,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TextTag::Copy => "copy",
            TextTag::Reverse => "reverse",
            TextTag::Arithmetic => "arithmetic",
            TextTag::Compare => "compare",
            TextTag::Count => "count",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextInstruction {
    pub task_tag: TextTag,
    pub question: String,
    pub response: String,
}

pub const BINARY_SUFFIX: &str = "Answer yes or no";

pub const ARITH_RANGE: std::ops::RangeInclusive<u32> = 10..=49;

fn random_word(rng: &mut impl Rng, min: usize, max: usize) -> String {
    let len = rng.gen_range(min..=max);
    (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

fn lexicon_phrase(rng: &mut impl Rng) -> String {
    match rng.gen_range(0..4) {
        0 => COLORS.choose(rng).unwrap().to_string(),
        1 => SHAPES.choose(rng).unwrap().to_string(),
        2 => POSITIONS.choose(rng).unwrap().to_string(),
        _ => format!("{} {}", COLORS.choose(rng).unwrap(), SHAPES.choose(rng).unwrap()),
    }
}

/// One candidate item for `tag`. `parity` alternates binary answers.
pub(crate) fn sample_text(tag: TextTag, parity: bool, rng: &mut impl Rng) -> TextInstruction {
    let (question, response) = match tag {
        TextTag::Copy => {
            let phrase = if rng.gen_bool(0.5) {
                lexicon_phrase(rng)
            } else {
                random_word(rng, 3, 5)
            };
            (format!("Say {phrase}"), phrase)
        }
        TextTag::Reverse => {
            let w = random_word(rng, 3, 4);
            let r: String = w.chars().rev().collect();
            (format!("Reverse {w}"), r)
        }
        TextTag::Arithmetic => {
            let a = rng.gen_range(ARITH_RANGE);
            let b = rng.gen_range(ARITH_RANGE);
            (format!("What is {a} + {b}?"), (a + b).to_string())
        }
        TextTag::Compare => {
            let a = rng.gen_range(0..100u32);
            let mut b = rng.gen_range(0..99u32);
            if b >= a {
                b += 1;
            }
            let (a, b) = if (a > b) == parity { (a, b) } else { (b, a) };
            let ans = if a > b { "yes" } else { "no" };
            (format!("Is {a} more than {b}? {BINARY_SUFFIX}"), ans.to_string())
        }
        TextTag::Count => {
            let k = rng.gen_range(1..=4usize);
            let words: Vec<&str> = (0..k)
                .map(|_| {
                    if rng.gen_bool(0.5) {
                        *COLORS.choose(rng).unwrap()
                    } else {
                        *SHAPES.choose(rng).unwrap()
                    }
                })
                .collect();
            (format!("How many words in {}?", words.join(" ")), k.to_string())
        }
    };
    TextInstruction {
        task_tag: tag,
        question,
        response,
    }
}

/// `n` text instructions, tags assigned round-robin. Items are drawn until
/// they fall on the requested side of the split partition, so train and eval
/// never share a (question, response) pair.
pub fn gen_text_corpus(seed: u64, n: usize, split: Split) -> Vec<TextInstruction> {
    let mut rng = split_rng(seed, split, 0);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let tag = TextTag::ALL[i % TextTag::ALL.len()];
        let parity = (i / TextTag::ALL.len()) % 2 == 0;
        loop {
            let item = sample_text(tag, parity, &mut rng);
            if super::item_split(&item.question, &item.response, "") == split {
                out.push(item);
                break;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_and_reverse_answers() {
        let c = gen_text_corpus(1, 200, Split::Train);
        for it in &c {
            match it.task_tag {
                TextTag::Arithmetic => {
                    let body = it.question.trim_start_matches("What is ").trim_end_matches('?');
                    let (a, b) = body.split_once(" + ").unwrap();
                    let s: u32 = a.parse::<u32>().unwrap() + b.parse::<u32>().unwrap();
                    assert_eq!(it.response, s.to_string());
                }
                TextTag::Reverse => {
                    let w = it.question.trim_start_matches("Reverse ");
                    assert_eq!(it.response, w.chars().rev().collect::<String>());
                }
                TextTag::Copy => assert_eq!(it.question, format!("Say {}", it.response)),
                _ => {}
            }
        }
    }

    #[test]
    fn compare_is_balanced() {
        let c = gen_text_corpus(4, 1000, Split::Train);
        let yes = c
            .iter()
            .filter(|i| i.task_tag == TextTag::Compare && i.response == "yes")
            .count();
        assert_eq!(yes, 100);
    }
}
