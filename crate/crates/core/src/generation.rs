//! Greedy decoding with a repetition penalty and grouped speech emission.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::codec::{CodeFrame, ToyCodec};
use crate::error::{Error, Result};
use crate::model::layers::Scalar;
use crate::model::session::Session;
use crate::model::{Element, HeadSpace, Model};
use crate::tokens::{assemble_prompt, deinterleave, FrameLayout, Interleave, PromptParts, Tag, TokenId, TokenStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeOptions {
    /// Upper bound on generated positions.
    pub max_new: usize,
    pub rep_penalty: f64,
    /// Apply the penalty inside speech head slices too.
    pub penalize_speech: bool,
    /// Stop after exactly this many speech tokens (used to measure step
    /// counts on fixed-length spans).
    pub speech_budget: Option<usize>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { max_new: 512, rep_penalty: 1.2, penalize_speech: true, speech_budget: None }
    }
}

/// `logit / γ` if positive, else `logit · γ`, for every candidate flagged in
/// `repeated`.
pub fn apply_repetition_penalty(logits: &mut [f64], repeated: &[bool], gamma: f64) {
    for (z, &r) in logits.iter_mut().zip(repeated) {
        if r {
            *z = if *z > 0.0 { *z / gamma } else { *z * gamma };
        }
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Output of one decode call.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Prompt followed by every emitted token.
    pub stream: TokenStream,
    /// Generated text ids, terminator excluded.
    pub text: Vec<TokenId>,
    /// Generated speech ids, terminator excluded.
    pub speech: Vec<TokenId>,
    pub eos_text: bool,
    pub eos_speech: bool,
    /// Forward passes whose prediction was used (prompt prefill excluded).
    pub steps: usize,
    /// Passes that emitted at least one speech token.
    pub speech_steps: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    Text,
    Speech,
}

struct Decoder<'a, 'm, T> {
    model: &'m Model<T>,
    session: Session<'m, T>,
    opts: &'a DecodeOptions,
    out: Generation,
    text_seen: Vec<bool>,
    speech_seen: Vec<bool>,
}

impl<'a, 'm, T: Scalar> Decoder<'a, 'm, T> {
    fn room(&self) -> bool {
        self.out.steps < self.opts.max_new && self.session.len() < self.model.config.max_positions
    }

    fn feed(&mut self, e: Element, tag: Tag) -> Result<Array1<T>> {
        self.session.step(&e, tag)
    }

    fn to_f64(z: &Array1<T>) -> Vec<f64> {
        z.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    /// Emits text until EOS_TEXT; returns the last hidden state.
    fn text(&mut self, mut h: Array1<T>, feed_eos: bool) -> Result<Array1<T>> {
        let v = &self.model.vocab;
        let classes = self.model.heads.classes(HeadSpace::Text);
        while self.room() {
            let mut z = Self::to_f64(&self.model.language_logits(h.view()));
            apply_repetition_penalty(&mut z, &self.text_seen, self.opts.rep_penalty);
            let c = argmax(&z);
            let id = classes[c];
            self.text_seen[c] = true;
            self.out.steps += 1;
            self.out.stream.push(id, Tag::TextA, false);
            if id == v.eos_text {
                self.out.eos_text = true;
                if feed_eos {
                    h = self.feed(Element::Token(id), Tag::TextA)?;
                }
                return Ok(h);
            }
            self.out.text.push(id);
            h = self.feed(Element::Token(id), Tag::TextA)?;
        }
        Ok(h)
    }

    /// Picks one token for slice `k` whose frame slot is `slot`.
    fn pick(&mut self, z: &Array1<T>, k: usize, slot: usize) -> TokenId {
        let (_, space) = self.model.slice_head(k, slot - k);
        let classes = self.model.heads.classes(space);
        let mut z = Self::to_f64(z);
        if self.opts.penalize_speech {
            let rep: Vec<bool> = classes.iter().map(|&id| self.speech_seen[id as usize]).collect();
            apply_repetition_penalty(&mut z, &rep, self.opts.rep_penalty);
        }
        let eos = self.model.vocab.eos_speech;
        if slot % self.model.layout.slots_per_frame() != 0 {
            // EOS_SPEECH only at frame boundaries
            if let Some(c) = classes.iter().position(|&id| id == eos) {
                z[c] = f64::NEG_INFINITY;
            }
        }
        classes[argmax(&z)]
    }

    fn speech(&mut self, mut h: Array1<T>) -> Result<()> {
        let g = self.model.g();
        let eos = self.model.vocab.eos_speech;
        let budget = self.opts.speech_budget.unwrap_or(usize::MAX);
        while self.room() && self.out.speech.len() < budget {
            let first = self.out.speech.len();
            let logits = self.model.speech_logits(h.view(), first);
            let mut group = Vec::with_capacity(g);
            let mut ended = false;
            for (k, z) in logits.iter().enumerate() {
                let id = self.pick(z, k, first + k);
                if id == eos {
                    ended = true;
                    break;
                }
                group.push(id);
                if first + group.len() >= budget {
                    break;
                }
            }
            for &id in &group {
                self.speech_seen[id as usize] = true;
            }
            self.out.steps += 1;
            if !group.is_empty() {
                self.out.speech_steps += 1;
            }
            self.out.stream.extend(&group, Tag::SpeechA, false);
            self.out.speech.extend_from_slice(&group);
            if ended {
                self.out.stream.push(eos, Tag::SpeechA, false);
                self.out.eos_speech = true;
                return Ok(());
            }
            if self.out.speech.len() >= budget || !self.room() {
                break;
            }
            let e = if g == 1 { Element::Token(group[0]) } else { Element::Group(group) };
            h = self.feed(e, Tag::SpeechA)?;
        }
        Ok(())
    }
}

/// Greedy continuation of an assembled prompt. The prompt's last token
/// decides what follows: EOS_TEXT → speech, EOS_SPEECH → text, MARK_TA →
/// text answer then (after MARK_UA) speech answer, MARK_UA → speech.
pub fn greedy_decode<T: Scalar>(
    model: &Model<T>,
    prompt: &TokenStream,
    speaker: Option<&[T]>,
    opts: &DecodeOptions,
) -> Result<Generation> {
    if !(opts.rep_penalty >= 1.0) {
        return Err(Error::Config(format!("repetition penalty {} is below 1", opts.rep_penalty)));
    }
    model.config.validate(&model.layout)?;
    let v = &model.vocab;
    let last = *prompt.tokens.last().ok_or_else(|| Error::Empty("empty prompt".into()))?;
    let phases: &[Phase] = if last == v.eos_text {
        &[Phase::Speech]
    } else if last == v.eos_speech {
        &[Phase::Text]
    } else if last == v.mark_ta {
        &[Phase::Text, Phase::Speech]
    } else if last == v.mark_ua {
        &[Phase::Speech]
    } else {
        return Err(Error::Format(format!("prompt ends with token {last}, not a generation point")));
    };
    let input = model.prepare(prompt)?;
    let mut session = Session::new(model, speaker);
    let mut h = None;
    for (e, &tag) in input.elements.iter().zip(&input.tags) {
        h = Some(session.step(e, tag)?);
    }
    let mut d = Decoder {
        model,
        session,
        opts,
        out: Generation {
            stream: prompt.clone(),
            text: vec![],
            speech: vec![],
            eos_text: false,
            eos_speech: false,
            steps: 0,
            speech_steps: 0,
        },
        text_seen: vec![false; model.heads.classes(HeadSpace::Text).len()],
        speech_seen: vec![false; v.total_size()],
    };
    let mut h = h.expect("non-empty prompt");
    for (i, phase) in phases.iter().enumerate() {
        let more = i + 1 < phases.len();
        match phase {
            Phase::Text => {
                h = d.text(h, more)?;
                if !d.out.eos_text {
                    break;
                }
                if more {
                    d.out.stream.push(v.mark_ua, Tag::Special, false);
                    h = d.feed(Element::Token(v.mark_ua), Tag::Special)?;
                }
            }
            Phase::Speech => d.speech(h.clone())?,
        }
    }
    Ok(d.out)
}

/// Decoded speech of a generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeechOutput {
    pub frames: Vec<CodeFrame>,
    pub success: bool,
    pub speaker: Option<u32>,
}

/// Success requires well-framed speech, a valid decode, a non-empty
/// utterance and an emitted EOS_SPEECH.
pub fn judge_speech(codec: &ToyCodec, layout: &FrameLayout, gen: &Generation) -> SpeechOutput {
    let v = codec.config().vocabulary();
    match deinterleave(&v, layout, &gen.speech, Interleave::Fwi, crate::tokens::DEFAULT_CHUNK_LEN) {
        Ok(frames) => {
            let frames = codec.from_speech_frames(&v, &frames);
            let dec = codec.decode(&frames);
            SpeechOutput { success: gen.eos_speech && dec.valid && !frames.is_empty(), speaker: dec.speaker, frames }
        }
        Err(_) => SpeechOutput { frames: vec![], success: false, speaker: None },
    }
}

/// Role-play answer: text, speech frames, success flag and step counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub frames: Vec<CodeFrame>,
    pub success: bool,
    pub steps: usize,
    pub speech_steps: usize,
}

pub fn synthesize_answer(
    model: &Model<f32>,
    codec: &ToyCodec,
    question: &str,
    speaker: u32,
    speaker_aware: bool,
    opts: &DecodeOptions,
) -> Result<Answer> {
    let v = &model.vocab;
    let parts = PromptParts::RoleQa { speaker: speaker_aware.then_some(speaker), question: codec.text_tokens(v, question)? };
    let prompt = assemble_prompt(v, &model.layout, &parts)?;
    let emb = codec.speaker(speaker).embedding;
    let gen = greedy_decode(model, &prompt, speaker_aware.then_some(emb.as_slice()), opts)?;
    let sp = judge_speech(codec, &model.layout, &gen);
    Ok(Answer {
        text: codec.text_from_tokens(v, &gen.text),
        frames: sp.frames,
        success: sp.success && gen.eos_text,
        steps: gen.steps,
        speech_steps: gen.speech_steps,
    })
}

/// Text-to-speech synthesis of one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Synthesis {
    pub frames: Vec<CodeFrame>,
    pub success: bool,
    pub steps: usize,
    pub speech_steps: usize,
    pub speech_tokens: usize,
}

pub fn synthesize_speech(
    model: &Model<f32>,
    codec: &ToyCodec,
    text: &str,
    speaker: u32,
    speaker_aware: bool,
    opts: &DecodeOptions,
) -> Result<Synthesis> {
    let v = &model.vocab;
    let parts = PromptParts::Tts { speaker: speaker_aware.then_some(speaker), text: codec.text_tokens(v, text)? };
    let prompt = assemble_prompt(v, &model.layout, &parts)?;
    let emb = codec.speaker(speaker).embedding;
    let gen = greedy_decode(model, &prompt, speaker_aware.then_some(emb.as_slice()), opts)?;
    let sp = judge_speech(codec, &model.layout, &gen);
    Ok(Synthesis {
        frames: sp.frames,
        success: sp.success,
        steps: gen.steps,
        speech_steps: gen.speech_steps,
        speech_tokens: gen.speech.len(),
    })
}

/// Speech-to-text transcription of codec frames.
pub fn transcribe(model: &Model<f32>, codec: &ToyCodec, frames: &[CodeFrame], opts: &DecodeOptions) -> Result<String> {
    let v = &model.vocab;
    let parts = PromptParts::Asr { frames: codec.to_speech_frames(v, frames) };
    let prompt = assemble_prompt(v, &model.layout, &parts)?;
    let gen = greedy_decode(model, &prompt, None, opts)?;
    Ok(codec.text_from_tokens(v, &gen.text))
}
