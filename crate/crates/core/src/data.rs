//! Synthetic corpora: TTS/ASR pretraining utterances and a role-play
//! knowledge-QA set over a generated key-value knowledge base.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::codec::ToyCodec;
use crate::error::{Error, Result};
use crate::tokens::{assemble_context, ContextParts, FrameLayout, TokenStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Speakers held out of role-QA fine-tuning (the highest ids).
    pub n_unseen_speakers: u32,
    pub n_questions: usize,
    pub heldout_frac: f64,
    /// Size of the word list answers are drawn from.
    pub answer_lexicon: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 8000,
            n_val: 64,
            n_test: 200,
            min_len: 4,
            max_len: 32,
            n_unseen_speakers: 4,
            n_questions: 2000,
            heldout_frac: 0.2,
            answer_lexicon: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub speaker: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question: String,
    pub answer: String,
    pub speaker: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerSplit {
    pub seen: Vec<u32>,
    pub unseen: Vec<u32>,
}

/// Every split of a generated dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub speakers: SpeakerSplit,
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub test: Vec<Utterance>,
    /// Fine-tuning pairs, each question bound to one seen speaker.
    pub qa_train: Vec<QaItem>,
    /// Held-out questions, seen speakers.
    pub qa_heldout: Vec<QaItem>,
    /// Training questions re-voiced by unseen speakers.
    pub qa_unseen: Vec<QaItem>,
}

pub const SPLITS: [&str; 6] = ["train", "val", "test", "qa_train", "qa_heldout", "qa_unseen"];

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
const WH: &[&str] = &["who", "what", "where", "when", "which"];

fn word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables).map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap())).collect()
}

fn random_text(rng: &mut ChaCha8Rng, chars: &[char], min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| *chars.choose(rng).unwrap()).collect()
}

impl DataConfig {
    pub fn validate(&self, speakers: u32) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("need 0 < min_len <= max_len".into()));
        }
        if self.n_unseen_speakers >= speakers {
            return Err(Error::Config("at least one speaker must stay seen".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_frac) {
            return Err(Error::Config("heldout_frac must lie in [0, 1)".into()));
        }
        if self.answer_lexicon == 0 {
            return Err(Error::Config("answer_lexicon must be positive".into()));
        }
        Ok(())
    }

    pub fn speaker_split(&self, speakers: u32) -> SpeakerSplit {
        let cut = speakers - self.n_unseen_speakers;
        SpeakerSplit { seen: (0..cut).collect(), unseen: (cut..speakers).collect() }
    }
}

/// Generates all splits. Pretraining utterances use every codec speaker;
/// only role-QA fine-tuning withholds the unseen ones.
pub fn generate(cfg: &DataConfig, codec: &ToyCodec) -> Result<Corpus> {
    let n_spk = codec.config().speakers;
    cfg.validate(n_spk)?;
    let chars: Vec<char> = codec.config().charset.chars().collect();
    let speakers = cfg.speaker_split(n_spk);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let utterances = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Utterance> {
        (0..n)
            .map(|_| Utterance { text: random_text(rng, &chars, cfg.min_len, cfg.max_len), speaker: rng.gen_range(0..n_spk) })
            .collect()
    };
    let train = utterances(cfg.n_train, &mut rng);
    let val = utterances(cfg.n_val, &mut rng);
    let test = utterances(cfg.n_test, &mut rng);

    let mut lexicon = BTreeSet::new();
    while lexicon.len() < cfg.answer_lexicon {
        let syl = rng.gen_range(2..=3);
        lexicon.insert(word(&mut rng, syl));
    }
    let lexicon: Vec<String> = lexicon.into_iter().collect();
    let mut seen_q = BTreeSet::new();
    let mut kb = Vec::with_capacity(cfg.n_questions);
    while kb.len() < cfg.n_questions {
        let q = format!("{} {} {}", WH.choose(&mut rng).unwrap(), word(&mut rng, 2), word(&mut rng, 2));
        if !seen_q.insert(q.clone()) {
            continue;
        }
        let n_words = rng.gen_range(1..=2);
        let a: Vec<&str> = (0..n_words).map(|_| lexicon.choose(&mut rng).unwrap().as_str()).collect();
        kb.push((q, a.join(" ")));
    }
    let n_held = (cfg.n_questions as f64 * cfg.heldout_frac).round() as usize;
    let (held, kept) = kb.split_at(n_held);
    let qa = |pairs: &[(String, String)], pool: &[u32], rng: &mut ChaCha8Rng| -> Vec<QaItem> {
        pairs
            .iter()
            .map(|(q, a)| QaItem { question: q.clone(), answer: a.clone(), speaker: *pool.choose(rng).unwrap() })
            .collect()
    };
    let qa_train = qa(kept, &speakers.seen, &mut rng);
    let qa_heldout = qa(held, &speakers.seen, &mut rng);
    let qa_unseen = qa(kept, &speakers.unseen, &mut rng);
    Ok(Corpus { speakers, train, val, test, qa_train, qa_heldout, qa_unseen })
}

/// TTS and ASR contexts of one utterance.
pub fn pretrain_streams(
    codec: &ToyCodec,
    layout: &FrameLayout,
    u: &Utterance,
    speaker_aware: bool,
) -> Result<[TokenStream; 2]> {
    let v = codec.config().vocabulary();
    let frames = codec.to_speech_frames(&v, &codec.encode(&u.text, &codec.speaker(u.speaker))?);
    let text = codec.text_tokens(&v, &u.text)?;
    let speaker = speaker_aware.then_some(u.speaker);
    let tts = assemble_context(&v, layout, &ContextParts::Tts { speaker, text: text.clone(), frames: frames.clone() })?;
    let asr = assemble_context(&v, layout, &ContextParts::Asr { frames, text })?;
    Ok([tts, asr])
}

/// Role-QA training context of one item.
pub fn role_qa_stream(codec: &ToyCodec, layout: &FrameLayout, item: &QaItem, speaker_aware: bool) -> Result<TokenStream> {
    let v = codec.config().vocabulary();
    let frames = codec.to_speech_frames(&v, &codec.encode(&item.answer, &codec.speaker(item.speaker))?);
    let parts = ContextParts::RoleQa {
        speaker: speaker_aware.then_some(item.speaker),
        question: codec.text_tokens(&v, &item.question)?,
        answer_text: codec.text_tokens(&v, &item.answer)?,
        answer_frames: frames,
    };
    assemble_context(&v, layout, &parts)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut w: W, items: &[T]) -> Result<()> {
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(r: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// Writes every split as `<split>.jsonl`, the speaker split as
/// `speakers.json`, and token streams for the training splits as
/// `<split>.streams`.
pub fn write_corpus(dir: &Path, corpus: &Corpus, codec: &ToyCodec, layout: &FrameLayout, speaker_aware: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(create(&dir.join("train.jsonl"))?, &corpus.train)?;
    write_jsonl(create(&dir.join("val.jsonl"))?, &corpus.val)?;
    write_jsonl(create(&dir.join("test.jsonl"))?, &corpus.test)?;
    write_jsonl(create(&dir.join("qa_train.jsonl"))?, &corpus.qa_train)?;
    write_jsonl(create(&dir.join("qa_heldout.jsonl"))?, &corpus.qa_heldout)?;
    write_jsonl(create(&dir.join("qa_unseen.jsonl"))?, &corpus.qa_unseen)?;
    serde_json::to_writer_pretty(create(&dir.join("speakers.json"))?, &corpus.speakers)?;

    let mut pre = Vec::with_capacity(corpus.train.len() * 2);
    for u in &corpus.train {
        pre.extend(pretrain_streams(codec, layout, u, speaker_aware)?);
    }
    crate::tokens::write_streams(create(&dir.join("train.streams"))?, &pre)?;
    let qa = corpus.qa_train.iter().map(|q| role_qa_stream(codec, layout, q, speaker_aware)).collect::<Result<Vec<_>>>()?;
    crate::tokens::write_streams(create(&dir.join("qa_train.streams"))?, &qa)?;
    Ok(())
}

fn open(dir: &Path, split: &str) -> Result<std::io::BufReader<std::fs::File>> {
    let path = dir.join(format!("{split}.jsonl"));
    std::fs::File::open(&path)
        .map(std::io::BufReader::new)
        .map_err(|e| Error::Config(format!("split {split} unavailable at {}: {e}", path.display())))
}

pub fn read_utterances(dir: &Path, split: &str) -> Result<Vec<Utterance>> {
    read_jsonl(open(dir, split)?)
}

pub fn read_qa(dir: &Path, split: &str) -> Result<Vec<QaItem>> {
    read_jsonl(open(dir, split)?)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let speakers = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(dir.join("speakers.json"))?))?;
    Ok(Corpus {
        speakers,
        train: read_utterances(dir, "train")?,
        val: read_utterances(dir, "val")?,
        test: read_utterances(dir, "test")?,
        qa_train: read_qa(dir, "qa_train")?,
        qa_heldout: read_qa(dir, "qa_heldout")?,
        qa_unseen: read_qa(dir, "qa_unseen")?,
    })
}
