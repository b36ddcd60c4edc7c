use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use speechlab::data::{self, Corpus, QaItem, Utterance};
use speechlab::experiment::{sweep_grid, write_rows_csv, EvalRow, Lab, Prediction, RunConfig};
use speechlab::metrics::{write_hidden_dump, AlignmentReport};
use speechlab::model::checkpoint::{load_checkpoint, save_checkpoint};
use speechlab::model::{HeadMode, Model};
use speechlab::training::write_curve;

#[derive(Parser)]
#[command(name = "speechlab", version, about = "Desk-scale speech-language model experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the pretraining and role-QA corpora.
    GenData(Common),
    /// Run pretraining and role-QA fine-tuning, writing checkpoints and curves.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory from gen-data; regenerated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Skip fine-tuning.
        #[arg(long)]
        pretrain_only: bool,
        /// Fine-tune this stage-1 checkpoint instead of pretraining.
        #[arg(long, conflicts_with = "pretrain_only")]
        from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// test, val, train (speech synthesis) or qa_train, qa_heldout, qa_unseen (role QA).
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Alignment analysis of hidden states on a probe set.
    Align {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Utterance split used as the probe set.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Answer questions from a JSONL file of {"question", "speaker_id"} records.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Merge eval and align outputs of several run directories into one table.
    Report {
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// Run directories holding eval.json and align.json.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Train and evaluate every cell of the head × g × speaker grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Restrict the grid to one head mode.
        #[arg(long = "only-head", value_enum)]
        only_head: Option<Head>,
    },
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long, value_enum)]
    head: Option<Head>,
    #[arg(long = "speaker-aware", value_enum)]
    speaker_aware: Option<Switch>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Head {
    Coupled,
    Decoupled,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.data.seed = s;
        }
        if let Some(g) = self.g {
            cfg.model.g = g;
        }
        if let Some(h) = self.head {
            cfg.model.head_mode = h.into();
        }
        if let Some(s) = self.speaker_aware {
            cfg.model.speaker_aware = matches!(s, Switch::On);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<Head> for HeadMode {
    fn from(h: Head) -> Self {
        match h {
            Head::Coupled => HeadMode::Coupled,
            Head::Decoupled => HeadMode::Decoupled,
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn corpus(lab: &Lab, dir: Option<&Path>) -> Result<Corpus> {
    Ok(match dir {
        Some(d) => data::read_corpus(d)?,
        None => lab.corpus()?,
    })
}

enum Split {
    Speech(Vec<Utterance>),
    Qa(Vec<QaItem>),
}

fn load_split(lab: &Lab, dir: Option<&Path>, name: &str) -> Result<Split> {
    let qa = name.starts_with("qa_");
    if let Some(d) = dir {
        return Ok(if qa { Split::Qa(data::read_qa(d, name)?) } else { Split::Speech(data::read_utterances(d, name)?) });
    }
    let c = lab.corpus()?;
    Ok(match name {
        "train" => Split::Speech(c.train),
        "val" => Split::Speech(c.val),
        "test" => Split::Speech(c.test),
        "qa_train" => Split::Qa(c.qa_train),
        "qa_heldout" => Split::Qa(c.qa_heldout),
        "qa_unseen" => Split::Qa(c.qa_unseen),
        other => bail!("unknown split {other:?}"),
    })
}

/// Lab configured by the run config, with model and codec taken from the checkpoint.
fn checkpoint_lab(common: &Common, path: &Path) -> Result<(Lab, Model<f32>)> {
    let mut cfg = common.config()?;
    let (model, codec) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    cfg.codec = codec;
    cfg.model = model.config.clone();
    Ok((Lab::new(cfg)?, model))
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let lab = Lab::new(cfg.clone())?;
    create_dir(&common.out)?;
    let c = lab.corpus()?;
    data::write_corpus(&common.out, &c, &lab.codec, &lab.layout, cfg.model.speaker_aware)?;
    cfg.save(&common.out.join("config.json"))?;
    log::info!("wrote {} utterances and {} questions to {}", c.train.len(), c.qa_train.len(), common.out.display());
    Ok(())
}

fn train(lab: &Lab, out: &Path, c: &Corpus, pretrain_only: bool) -> Result<Model<f32>> {
    create_dir(out)?;
    lab.cfg.save(&out.join("config.json"))?;
    let s1 = lab.pretrain(c)?;
    log::info!("pretraining ran {} steps (early stop: {})", s1.steps_run, s1.stopped_early);
    save_checkpoint(&out.join("stage1.ckpt"), &s1.model, lab.codec.config())?;
    write_curve(BufWriter::new(File::create(out.join("curve_stage1.csv"))?), &s1.curve)?;
    if pretrain_only {
        return Ok(s1.model);
    }
    finetune(lab, out, c, s1.model)
}

fn finetune(lab: &Lab, out: &Path, c: &Corpus, model: Model<f32>) -> Result<Model<f32>> {
    create_dir(out)?;
    let s2 = lab.finetune(model, c)?;
    log::info!("fine-tuning ran {} steps (early stop: {})", s2.steps_run, s2.stopped_early);
    save_checkpoint(&out.join("stage2.ckpt"), &s2.model, lab.codec.config())?;
    write_curve(BufWriter::new(File::create(out.join("curve_stage2.csv"))?), &s2.curve)?;
    Ok(s2.model)
}

fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    data::write_jsonl(BufWriter::new(File::create(path)?), preds)?;
    Ok(())
}

fn evaluate(lab: &Lab, model: &Model<f32>, split_name: &str, split: &Split, probe: &[Utterance], out: &Path) -> Result<Vec<EvalRow>> {
    create_dir(out)?;
    let mut row = match split {
        Split::Speech(u) => EvalRow::tts(&lab.cfg, split_name, &lab.eval_tts(model, u)?),
        Split::Qa(q) => {
            let (r, preds) = lab.eval_qa(model, q)?;
            write_predictions(&out.join(format!("predictions_{split_name}.jsonl")), &preds)?;
            EvalRow::qa(&lab.cfg, split_name, &r)
        }
    };
    let rep = lab.align(model, probe)?;
    row.riemannian_last = rep.layers.last().and_then(|l| l.riemannian.as_ref()).map(|r| r.distance);
    let rows = vec![row];
    write_json(&out.join("eval.json"), &rows)?;
    write_rows_csv(BufWriter::new(File::create(out.join("eval.csv"))?), &rows)?;
    Ok(rows)
}

fn align(lab: &Lab, model: &Model<f32>, probe: &[Utterance], out: &Path) -> Result<AlignmentReport> {
    create_dir(out)?;
    let probe = &probe[..probe.len().min(lab.cfg.eval.probe_size)];
    let (layers, modality) = lab.probe_hidden(model, probe)?;
    for (i, h) in layers.iter().enumerate() {
        write_hidden_dump(BufWriter::new(File::create(out.join(format!("hidden_layer{i}.bin")))?), h.view(), &modality)?;
    }
    let rep = lab.align(model, probe)?;
    write_json(&out.join("align.json"), &rep)?;
    Ok(rep)
}

fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    create_dir(out)?;
    let mut rows: Vec<EvalRow> = vec![];
    let mut aligns: Vec<AlignmentReport> = vec![];
    for dir in runs {
        let eval = dir.join("eval.json");
        if eval.exists() {
            rows.extend(serde_json::from_reader::<_, Vec<EvalRow>>(BufReader::new(File::open(&eval)?))?);
        }
        let al = dir.join("align.json");
        if al.exists() {
            aligns.push(serde_json::from_reader(BufReader::new(File::open(&al)?))?);
        }
        if !eval.exists() && !al.exists() {
            bail!("{} holds neither eval.json nor align.json", dir.display());
        }
    }
    write_json(&out.join("report.json"), &serde_json::json!({ "rows": rows, "alignment": aligns }))?;
    write_rows_csv(BufWriter::new(File::create(out.join("report.csv"))?), &rows)?;
    Ok(())
}

fn predict(lab: &Lab, model: &Model<f32>, input: &Path, out: &Path) -> Result<()> {
    #[derive(serde::Deserialize)]
    struct Query {
        question: String,
        speaker_id: u32,
    }
    let queries: Vec<Query> = data::read_jsonl(BufReader::new(File::open(input).with_context(|| format!("opening {}", input.display()))?))?;
    let items: Vec<QaItem> = queries.into_iter().map(|q| QaItem { question: q.question, answer: String::new(), speaker: q.speaker_id }).collect();
    let mut cfg = lab.cfg.clone();
    cfg.eval.n_qa = items.len().max(1);
    let lab = Lab::new(cfg)?;
    create_dir(out)?;
    let preds = if items.is_empty() { vec![] } else { lab.eval_qa(model, &items)?.1 };
    write_predictions(&out.join("predictions.jsonl"), &preds)
}

fn sweep(common: &Common, only_head: Option<Head>) -> Result<()> {
    let base = common.config()?;
    let mut runs = vec![];
    for cfg in sweep_grid(&base) {
        if let Some(h) = only_head {
            if cfg.model.head_mode != HeadMode::from(h) {
                continue;
            }
        }
        let dir = common.out.join(cfg.label());
        log::info!("sweep cell {}", cfg.label());
        let lab = Lab::new(cfg)?;
        let c = lab.corpus()?;
        let model = train(&lab, &dir, &c, true)?;
        evaluate(&lab, &model, "test", &Split::Speech(c.test.clone()), &c.test, &dir)?;
        align(&lab, &model, &c.test, &dir)?;
        runs.push(dir);
    }
    report(&runs, &common.out.join("report"))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::GenData(common) => gen_data(&common),
        Cmd::Train { common, data, pretrain_only, from } => {
            if let Some(ckpt) = from {
                let (lab, model) = checkpoint_lab(&common, &ckpt)?;
                let c = corpus(&lab, data.as_deref())?;
                create_dir(&common.out)?;
                lab.cfg.save(&common.out.join("config.json"))?;
                return finetune(&lab, &common.out, &c, model).map(|_| ());
            }
            let lab = Lab::new(common.config()?)?;
            let c = corpus(&lab, data.as_deref())?;
            train(&lab, &common.out, &c, pretrain_only).map(|_| ())
        }
        Cmd::Eval { common, checkpoint, split, data } => {
            let (lab, model) = checkpoint_lab(&common, &checkpoint)?;
            let s = load_split(&lab, data.as_deref(), &split)?;
            let probe = match load_split(&lab, data.as_deref(), "test")? {
                Split::Speech(u) => u,
                Split::Qa(_) => unreachable!("test is an utterance split"),
            };
            evaluate(&lab, &model, &split, &s, &probe, &common.out).map(|_| ())
        }
        Cmd::Align { common, checkpoint, split, data } => {
            let (lab, model) = checkpoint_lab(&common, &checkpoint)?;
            match load_split(&lab, data.as_deref(), &split)? {
                Split::Speech(u) => align(&lab, &model, &u, &common.out).map(|_| ()),
                Split::Qa(_) => bail!("probe split must hold utterances, got {split:?}"),
            }
        }
        Cmd::Predict { common, checkpoint, input } => {
            let (lab, model) = checkpoint_lab(&common, &checkpoint)?;
            predict(&lab, &model, &input, &common.out)
        }
        Cmd::Report { out, runs } => report(&runs, &out),
        Cmd::Sweep { common, only_head } => sweep(&common, only_head),
    }
}
