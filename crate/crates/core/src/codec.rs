//! A deterministic, exactly invertible synthetic speech codec.
//!
//! Each character becomes `frames_per_char` frames of
//! `[prosody, content1, content2]` codebook indices. Prosody carries the
//! speaker (through a disjoint band of ids per speaker) and the position,
//! content1 carries the character and content2 a position-dependent copy of
//! it. Because the mapping is invertible, decoding generated frames gives
//! exact analogs of word error rate and speaker similarity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::{Segment, SpeechFrame, Vocabulary};

pub const DEFAULT_CHARSET: &str = "abcdefghijklmnopqrstuvwxyz ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.";

/// Codebook-local indices of one frame: `[prosody, content1, content2]`.
pub type CodeFrame = [u32; 3];

const SPEAKER_SEED: u64 = 0x5eed_5bea_4e20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub charset: String,
    pub frames_per_char: usize,
    pub prosody_vocab: u32,
    pub content_vocab: u32,
    pub speakers: u32,
    pub prosody_band: u32,
    pub d_spk: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            charset: DEFAULT_CHARSET.to_string(),
            frames_per_char: 2,
            prosody_vocab: 64,
            content_vocab: 128,
            speakers: 16,
            prosody_band: 4,
            d_spk: 16,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let n_chars = self.charset.chars().count();
        let distinct: std::collections::HashSet<char> = self.charset.chars().collect();
        if distinct.len() != n_chars {
            return Err(Error::Config("charset has duplicate characters".into()));
        }
        if n_chars == 0 || n_chars as u32 > self.content_vocab {
            return Err(Error::Config(format!(
                "charset size {n_chars} must be in 1..={}",
                self.content_vocab
            )));
        }
        if self.speakers == 0 || self.prosody_band == 0 || self.speakers * self.prosody_band > self.prosody_vocab {
            return Err(Error::Config(format!(
                "{} speakers x band {} exceed prosody vocabulary {}",
                self.speakers, self.prosody_band, self.prosody_vocab
            )));
        }
        if self.frames_per_char == 0 || self.d_spk == 0 {
            return Err(Error::Config("frames_per_char and d_spk must be positive".into()));
        }
        Ok(())
    }

    pub fn charset_size(&self) -> u32 {
        self.charset.chars().count() as u32
    }

    /// The global vocabulary implied by this codec.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.charset_size(), self.prosody_vocab, self.content_vocab)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: u32,
    pub band_base: u32,
    /// Unit-norm timbre vector, a fixed function of `speaker_id`.
    pub embedding: Vec<f32>,
}

impl SpeakerProfile {
    pub fn new(config: &CodecConfig, speaker_id: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(SPEAKER_SEED ^ u64::from(speaker_id).wrapping_mul(0x9e37_79b9));
        let mut v: Vec<f64> = (0..config.d_spk).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Self {
            speaker_id,
            band_base: speaker_id * config.prosody_band,
            embedding: v.into_iter().map(|x| x as f32).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub text: String,
    /// `None` when there were no frames to vote with.
    pub speaker: Option<u32>,
    pub valid: bool,
}

#[derive(Clone, Debug)]
pub struct ToyCodec {
    config: CodecConfig,
    chars: Vec<char>,
}

impl ToyCodec {
    pub fn new(config: CodecConfig) -> Result<Self> {
        config.validate()?;
        let chars = config.charset.chars().collect();
        Ok(Self { config, chars })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn speaker(&self, speaker_id: u32) -> SpeakerProfile {
        SpeakerProfile::new(&self.config, speaker_id)
    }

    pub fn char_index(&self, c: char) -> Result<u32> {
        self.chars.iter().position(|&x| x == c).map(|i| i as u32).ok_or(Error::Encoding(c))
    }

    pub fn text_indices(&self, text: &str) -> Result<Vec<u32>> {
        text.chars().map(|c| self.char_index(c)).collect()
    }

    /// Character for a codebook index; out-of-range indices become U+FFFD.
    pub fn char_at(&self, index: u32) -> char {
        self.chars.get(index as usize).copied().unwrap_or(char::REPLACEMENT_CHARACTER)
    }

    pub fn encode(&self, text: &str, speaker: &SpeakerProfile) -> Result<Vec<CodeFrame>> {
        let cfg = &self.config;
        let mut frames = Vec::with_capacity(text.chars().count() * cfg.frames_per_char);
        for (i, c) in text.chars().enumerate() {
            let x = self.char_index(c)?;
            for r in 0..cfg.frames_per_char {
                let prosody = speaker.band_base + ((i + r) as u32 % cfg.prosody_band);
                frames.push([prosody, x, (x + r as u32) % cfg.content_vocab]);
            }
        }
        Ok(frames)
    }

    /// Best-effort inverse of [`encode`](Self::encode). Never fails.
    pub fn decode(&self, frames: &[CodeFrame]) -> Decoded {
        let cfg = &self.config;
        let fpc = cfg.frames_per_char;
        let mut votes = vec![0usize; cfg.speakers as usize];
        let mut stray_votes = false;
        for f in frames {
            match votes.get_mut((f[0] / cfg.prosody_band) as usize) {
                Some(v) => *v += 1,
                None => stray_votes = true,
            }
        }
        let speaker = if frames.is_empty() {
            None
        } else {
            // first maximum wins ties
            let best = votes.iter().enumerate().fold(0, |b, (i, &v)| if v > votes[b] { i } else { b });
            Some(best as u32)
        };

        let mut text = String::with_capacity(frames.len() / fpc + 1);
        let mut valid = frames.len() % fpc == 0 && !stray_votes;
        let band_base = speaker.unwrap_or(0) * cfg.prosody_band;
        for (i, block) in frames.chunks(fpc).enumerate() {
            let x = block[0][1];
            text.push(self.char_at(x));
            if x >= self.chars.len() as u32 {
                valid = false;
            }
            for (r, f) in block.iter().enumerate() {
                let want = [
                    band_base + ((i + r) as u32 % cfg.prosody_band),
                    x,
                    (x + r as u32) % cfg.content_vocab,
                ];
                if *f != want {
                    valid = false;
                }
            }
        }
        Decoded { text, speaker, valid }
    }

    /// Character error rate between the decoded texts of two frame lists.
    pub fn token_error_rate(&self, reference: &[CodeFrame], hypothesis: &[CodeFrame]) -> f64 {
        let r: Vec<char> = self.decode(reference).text.chars().collect();
        let h: Vec<char> = self.decode(hypothesis).text.chars().collect();
        if r.is_empty() {
            return if h.is_empty() { 0.0 } else { 1.0 };
        }
        edit_distance(&r, &h) as f64 / r.len() as f64
    }

    /// Fraction of prosody tokens inside the target speaker's band.
    pub fn speaker_match(&self, hypothesis: &[CodeFrame], target: &SpeakerProfile) -> f64 {
        if hypothesis.is_empty() {
            return 0.0;
        }
        let band = target.band_base..target.band_base + self.config.prosody_band;
        let hits = hypothesis.iter().filter(|f| band.contains(&f[0])).count();
        hits as f64 / hypothesis.len() as f64
    }

    /// Codebook frames → global-id frames.
    pub fn to_speech_frames(&self, vocab: &Vocabulary, frames: &[CodeFrame]) -> Vec<SpeechFrame> {
        frames
            .iter()
            .map(|f| SpeechFrame::new(vec![vocab.prosody_id(f[0]), vocab.content_id(f[1]), vocab.content_id(f[2])]))
            .collect()
    }

    /// Global-id frames → codebook frames. Ids outside the expected
    /// sub-vocabulary map to `u32::MAX`, which never decodes as valid.
    pub fn from_speech_frames(&self, vocab: &Vocabulary, frames: &[SpeechFrame]) -> Vec<CodeFrame> {
        let local = |id: u32, seg: Segment| match vocab.local_index(id) {
            Some((s, i)) if s == seg => i,
            _ => u32::MAX,
        };
        frames
            .iter()
            .map(|f| {
                let t = |k: usize| f.tokens.get(k).copied().unwrap_or(u32::MAX);
                [local(t(0), Segment::Prosody), local(t(1), Segment::Content), local(t(2), Segment::Content)]
            })
            .collect()
    }

    /// Text → global text ids.
    pub fn text_tokens(&self, vocab: &Vocabulary, text: &str) -> Result<Vec<u32>> {
        Ok(self.text_indices(text)?.into_iter().map(|i| vocab.text_id(i)).collect())
    }

    /// Global text ids → text; non-text ids become U+FFFD.
    pub fn text_from_tokens(&self, vocab: &Vocabulary, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| match vocab.local_index(id) {
                Some((Segment::Text, i)) => self.char_at(i),
                _ => char::REPLACEMENT_CHARACTER,
            })
            .collect()
    }
}

/// Levenshtein distance over arbitrary symbols.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
