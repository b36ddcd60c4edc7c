//! Run configuration and the end-to-end pipeline: corpus synthesis, the two
//! training stages, task evaluation and alignment analysis.

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::codec::{CodecConfig, ToyCodec};
use crate::data::{self, Corpus, DataConfig, QaItem, Utterance};
use crate::error::{Error, Result};
use crate::generation::{synthesize_answer, synthesize_speech, DecodeOptions};
use crate::metrics::{exact_match, f1_score, success_rate, AlignmentReport, Modality, DEFAULT_MAX_PAIRS};
use crate::model::{Element, HeadMode, Model, ModelConfig};
use crate::tokens::{FrameLayout, Tag, TokenStream};
use crate::training::{run_stage, Stage, StageOutcome, StageStart, TrainConfig, TrainExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub decode: DecodeOptions,
    /// Cap on utterances per TTS evaluation split.
    pub n_tts: usize,
    /// Cap on items per role-QA evaluation split.
    pub n_qa: usize,
    /// Utterances in the alignment probe set.
    pub probe_size: usize,
    pub riemannian_eps: f64,
    pub max_pairs: usize,
    /// Stop a stage once the periodic check is perfect.
    pub early_stop: bool,
    /// Items examined by each periodic check.
    pub n_check: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decode: DecodeOptions::default(),
            n_tts: 200,
            n_qa: 200,
            probe_size: 64,
            riemannian_eps: 1e-6,
            max_pairs: DEFAULT_MAX_PAIRS,
            early_stop: true,
            n_check: 64,
        }
    }
}

/// One JSON document that fully determines a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub codec: CodecConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.model.validate(&FrameLayout::default())?;
        self.train.validate()?;
        self.data.validate(self.codec.speakers)?;
        if self.model.d_spk != self.codec.d_spk {
            return Err(Error::Config(format!("model d_spk {} differs from codec d_spk {}", self.model.d_spk, self.codec.d_spk)));
        }
        Ok(())
    }

    /// Short row label, e.g. `decoupled-g12-spk`.
    pub fn label(&self) -> String {
        let head = match self.model.head_mode {
            HeadMode::Coupled => "coupled",
            HeadMode::Decoupled => "decoupled",
        };
        let spk = if self.model.speaker_aware { "spk" } else { "nospk" };
        format!("{head}-g{}-{spk}", self.model.g)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TtsReport {
    pub n: usize,
    pub sr: f64,
    pub ter: f64,
    pub speaker_match: f64,
    /// Speech forward passes per emitted speech token.
    pub steps_per_token: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub n: usize,
    pub em: f64,
    pub f1: f64,
    pub sr: f64,
    pub speaker_match: f64,
    pub steps_per_token: f64,
}

/// A prediction written to the JSONL predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub question: String,
    pub speaker_id: u32,
    pub text: String,
    pub frames: Vec<[u32; 3]>,
    pub success: bool,
    pub steps: usize,
}

/// Shared state of a run: configuration, codec and frame layout.
pub struct Lab {
    pub cfg: RunConfig,
    pub codec: ToyCodec,
    pub layout: FrameLayout,
}

impl Lab {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let codec = ToyCodec::new(cfg.codec.clone())?;
        Ok(Self { cfg, codec, layout: FrameLayout::default() })
    }

    /// A lab that evaluates `model` with this lab's evaluation settings.
    pub fn for_model(&self, model: &Model<f32>) -> Result<Lab> {
        let mut cfg = self.cfg.clone();
        cfg.model = model.config.clone();
        Lab::new(cfg)
    }

    pub fn corpus(&self) -> Result<Corpus> {
        data::generate(&self.cfg.data, &self.codec)
    }

    pub fn fresh_model(&self) -> Result<Model<f32>> {
        Model::new(self.cfg.model.clone(), self.codec.config().vocabulary(), self.layout.clone(), self.cfg.train.seed)
    }

    fn speaker_aware(&self) -> bool {
        self.cfg.model.speaker_aware
    }

    fn example(&self, model: &Model<f32>, stream: &TokenStream) -> Result<TrainExample> {
        Ok(TrainExample {
            input: model.prepare(stream)?,
            speaker: stream.speaker.map(|s| self.codec.speaker(s).embedding),
        })
    }

    pub fn pretrain_examples(&self, model: &Model<f32>, utterances: &[Utterance]) -> Result<Vec<TrainExample>> {
        let mut out = Vec::with_capacity(utterances.len() * 2);
        for u in utterances {
            for s in data::pretrain_streams(&self.codec, &self.layout, u, self.speaker_aware())? {
                out.push(self.example(model, &s)?);
            }
        }
        Ok(out)
    }

    pub fn qa_examples(&self, model: &Model<f32>, items: &[QaItem]) -> Result<Vec<TrainExample>> {
        items.iter().map(|q| self.example(model, &data::role_qa_stream(&self.codec, &self.layout, q, self.speaker_aware())?)).collect()
    }

    /// Stage 1: TTS and ASR in equal parts, stopping early once the
    /// validation synthesis is perfect.
    pub fn pretrain(&self, corpus: &Corpus) -> Result<StageOutcome> {
        let model = self.fresh_model()?;
        let data = self.pretrain_examples(&model, &corpus.train)?;
        let check: Vec<Utterance> = corpus.val.iter().take(self.cfg.eval.n_check).cloned().collect();
        let early = self.cfg.eval.early_stop && !check.is_empty();
        let mut hook = |step: usize, m: &Model<f32>| -> Result<bool> {
            if !early {
                return Ok(false);
            }
            let r = self.eval_tts(m, &check)?;
            log::info!("pretrain step {step}: val sr {:.3} ter {:.4} spk {:.3}", r.sr, r.ter, r.speaker_match);
            Ok(r.sr == 1.0 && r.ter == 0.0 && (!self.speaker_aware() || r.speaker_match == 1.0))
        };
        run_stage(Stage::Pretrain, StageStart::Fresh(model), &data, &self.cfg.train, self.cfg.train.steps_stage1, &mut hook)
    }

    /// Stage 2: role-QA fine-tuning on `qa_train`, mixed with a
    /// `replay_frac` share of pretraining examples.
    pub fn finetune(&self, model: Model<f32>, corpus: &Corpus) -> Result<StageOutcome> {
        let mut data = self.qa_examples(&model, &corpus.qa_train)?;
        let replay = self.cfg.train.replay_frac;
        if replay > 0.0 {
            let n = ((data.len() as f64) * replay / (1.0 - replay)).round() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.train.seed ^ 0x7e9);
            let picks: Vec<Utterance> = corpus.train.choose_multiple(&mut rng, n.div_ceil(2)).cloned().collect();
            let extra = self.pretrain_examples(&model, &picks)?;
            data.extend(extra.into_iter().take(n));
        }
        let check: Vec<QaItem> = corpus.qa_train.iter().take(self.cfg.eval.n_check).cloned().collect();
        let early = self.cfg.eval.early_stop && !check.is_empty();
        let mut hook = |step: usize, m: &Model<f32>| -> Result<bool> {
            if !early {
                return Ok(false);
            }
            let r = self.eval_qa(m, &check)?.0;
            log::info!("finetune step {step}: em {:.3} sr {:.3} spk {:.3}", r.em, r.sr, r.speaker_match);
            Ok(r.em == 1.0 && r.sr == 1.0 && (!self.speaker_aware() || r.speaker_match == 1.0))
        };
        run_stage(Stage::Sft, StageStart::Checkpoint(model), &data, &self.cfg.train, self.cfg.train.steps_stage2, &mut hook)
    }

    pub fn eval_tts(&self, model: &Model<f32>, utterances: &[Utterance]) -> Result<TtsReport> {
        let items = &utterances[..utterances.len().min(self.cfg.eval.n_tts)];
        if items.is_empty() {
            return Err(Error::Empty("no utterances to evaluate".into()));
        }
        let mut flags = Vec::with_capacity(items.len());
        let (mut ter, mut spk, mut steps, mut tokens) = (0.0, 0.0, 0usize, 0usize);
        for u in items {
            let s = synthesize_speech(model, &self.codec, &u.text, u.speaker, self.speaker_aware(), &self.cfg.eval.decode)?;
            let profile = self.codec.speaker(u.speaker);
            let reference = self.codec.encode(&u.text, &profile)?;
            ter += self.codec.token_error_rate(&reference, &s.frames);
            spk += self.codec.speaker_match(&s.frames, &profile);
            steps += s.speech_steps;
            tokens += s.speech_tokens;
            flags.push(s.success);
        }
        let n = items.len() as f64;
        Ok(TtsReport {
            n: items.len(),
            sr: success_rate(&flags)?,
            ter: ter / n,
            speaker_match: spk / n,
            steps_per_token: if tokens == 0 { 0.0 } else { steps as f64 / tokens as f64 },
        })
    }

    pub fn eval_qa(&self, model: &Model<f32>, items: &[QaItem]) -> Result<(QaReport, Vec<Prediction>)> {
        let items = &items[..items.len().min(self.cfg.eval.n_qa)];
        if items.is_empty() {
            return Err(Error::Empty("no questions to evaluate".into()));
        }
        let mut preds = Vec::with_capacity(items.len());
        let (mut em, mut f1, mut spk, mut steps, mut tokens) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for q in items {
            let a = synthesize_answer(model, &self.codec, &q.question, q.speaker, self.speaker_aware(), &self.cfg.eval.decode)?;
            em += exact_match(&a.text, &q.answer);
            f1 += f1_score(&a.text, &q.answer);
            spk += self.codec.speaker_match(&a.frames, &self.codec.speaker(q.speaker));
            steps += a.speech_steps;
            tokens += a.frames.len() * self.layout.slots_per_frame();
            preds.push(Prediction {
                question: q.question.clone(),
                speaker_id: q.speaker,
                text: a.text,
                frames: a.frames,
                success: a.success,
                steps: a.steps,
            });
        }
        let n = items.len() as f64;
        let flags: Vec<bool> = preds.iter().map(|p| p.success).collect();
        let report = QaReport {
            n: items.len(),
            em: em / n,
            f1: f1 / n,
            sr: success_rate(&flags)?,
            speaker_match: spk / n,
            steps_per_token: if tokens == 0 { 0.0 } else { steps as f64 / tokens as f64 },
        };
        Ok((report, preds))
    }

    /// Hidden states of TTS contexts for the probe utterances, one matrix
    /// per layer (embedding, each block, final-normalized), with the
    /// modality of every row.
    pub fn probe_hidden(&self, model: &Model<f32>, probe: &[Utterance]) -> Result<(Vec<Array2<f64>>, Vec<Modality>)> {
        let v = &model.vocab;
        let mut per_layer: Vec<Vec<Array2<f64>>> = vec![];
        let mut modality = vec![];
        for u in probe {
            let [tts, _] = data::pretrain_streams(&self.codec, &self.layout, u, self.speaker_aware())?;
            let input = model.prepare(&tts)?;
            let spk = tts.speaker.map(|s| self.codec.speaker(s).embedding);
            let hs = model.hidden_states(&input, spk.as_deref())?;
            let mats: Vec<Array2<f64>> = hs.layers.iter().chain(std::iter::once(&hs.output)).map(|m| m.mapv(f64::from)).collect();
            if per_layer.is_empty() {
                per_layer = vec![vec![]; mats.len()];
            }
            for (dst, m) in per_layer.iter_mut().zip(mats) {
                dst.push(m);
            }
            for (e, tag) in input.elements.iter().zip(&input.tags) {
                let m = match (e, tag) {
                    (Element::Token(id), Tag::TextQ) if *id != v.eos_text => Modality::Text,
                    (Element::Group(_), Tag::SpeechA) => Modality::Speech,
                    (Element::Token(id), Tag::SpeechA) if v.is_speech(*id) => Modality::Speech,
                    _ => Modality::Other,
                };
                modality.push(m);
            }
        }
        let layers = per_layer
            .into_iter()
            .map(|ms| {
                let views: Vec<_> = ms.iter().map(|m| m.view()).collect();
                concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((layers, modality))
    }

    /// Alignment report over the word-embedding, middle and last layers.
    pub fn align(&self, model: &Model<f32>, probe: &[Utterance]) -> Result<AlignmentReport> {
        let probe = &probe[..probe.len().min(self.cfg.eval.probe_size)];
        let (layers, modality) = self.probe_hidden(model, probe)?;
        let mut rep = AlignmentReport::new(self.cfg.label(), self.cfg.eval.riemannian_eps, self.cfg.eval.max_pairs);
        let last = layers.len() - 1;
        let mid = model.config.n_layers.div_ceil(2);
        for (name, idx) in [("embedding", 0), ("middle", mid), ("last", last)] {
            rep.analyze_layer(name, idx, layers[idx].view(), &modality, self.cfg.train.seed)?;
        }
        Ok(rep)
    }
}

/// One table row per evaluated configuration and split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub head: String,
    pub g: usize,
    pub speaker_aware: bool,
    pub split: String,
    pub n: usize,
    pub sr: f64,
    pub ter: Option<f64>,
    pub speaker_match: f64,
    pub em: Option<f64>,
    pub f1: Option<f64>,
    pub steps_per_token: f64,
    pub riemannian_last: Option<f64>,
}

impl EvalRow {
    pub fn tts(cfg: &RunConfig, split: &str, r: &TtsReport) -> Self {
        Self::base(cfg, split, r.n, r.sr, r.speaker_match, r.steps_per_token).with_ter(r.ter)
    }

    pub fn qa(cfg: &RunConfig, split: &str, r: &QaReport) -> Self {
        let mut row = Self::base(cfg, split, r.n, r.sr, r.speaker_match, r.steps_per_token);
        row.em = Some(r.em);
        row.f1 = Some(r.f1);
        row
    }

    fn base(cfg: &RunConfig, split: &str, n: usize, sr: f64, speaker_match: f64, steps_per_token: f64) -> Self {
        Self {
            label: cfg.label(),
            head: format!("{:?}", cfg.model.head_mode).to_lowercase(),
            g: cfg.model.g,
            speaker_aware: cfg.model.speaker_aware,
            split: split.to_string(),
            n,
            sr,
            ter: None,
            speaker_match,
            em: None,
            f1: None,
            steps_per_token,
            riemannian_last: None,
        }
    }

    fn with_ter(mut self, ter: f64) -> Self {
        self.ter = Some(ter);
        self
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_rows_csv<W: std::io::Write>(mut w: W, rows: &[EvalRow]) -> Result<()> {
    writeln!(w, "label,head,g,speaker_aware,split,n,sr,ter,speaker_match,em,f1,steps_per_token,riemannian_last")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{:.6},{},{:.6},{},{},{:.6},{}",
            r.label,
            r.head,
            r.g,
            r.speaker_aware,
            r.split,
            r.n,
            r.sr,
            opt(r.ter),
            r.speaker_match,
            opt(r.em),
            opt(r.f1),
            r.steps_per_token,
            opt(r.riemannian_last)
        )?;
    }
    Ok(())
}

/// The sweep grid: `{coupled, decoupled} × {1, 3, 6, 12} × {speaker on, off}`.
pub fn sweep_grid(base: &RunConfig) -> Vec<RunConfig> {
    let mut out = vec![];
    for head in [HeadMode::Coupled, HeadMode::Decoupled] {
        for g in [1, 3, 6, 12] {
            for spk in [true, false] {
                let mut c = base.clone();
                c.model.head_mode = head;
                c.model.g = g;
                c.model.speaker_aware = spk;
                out.push(c);
            }
        }
    }
    out
}
