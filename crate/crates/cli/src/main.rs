use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;
use tracing_subscriber::EnvFilter;

use cntf_core::checkpoint::{load_checkpoint, save_checkpoint};
use cntf_core::config::ModelConfig;
use cntf_core::corpus::{
    build_vocab, load_corpus, make_training_examples, save_corpus, CorpusFormat, CorpusSplit, Vocabulary,
};
use cntf_core::eval::{evaluate, perplexity, WordVectors};
use cntf_core::model::{build_entity_vocab, Model};
use cntf_core::trainer::{prepare, train, TrainConfig};
use cntf_core::triples::{
    dialogue_triples_to_tsv, load_dialogue_triples, ConceptLexicon, CorefAnnotator, EntityAnnotator,
    FileAnnotator, RuleBasedAnnotator, TripleBuilder, TripleConfig, TripleStore,
};
use cntf_service::AppState;

#[derive(Parser)]
#[command(name = "cntf", version, about = "Knowledge-grounded dialogue: data prep, training, evaluation, chat")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize corpus splits, build the vocabulary, and write training examples.
    Preprocess {
        /// a corpus .jsonl file or a directory of them
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 30004)]
        vocab_size: usize,
        #[arg(long, default_value_t = 2)]
        topk: usize,
    },
    /// Build per-dialogue triple sets.
    Triples {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        /// directory of per-dialogue annotation JSON; rule-based annotation if absent
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// vocabulary file used to filter the lexicon; built from the corpus if absent
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        tail_match: bool,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// directory holding train.jsonl and optionally valid.jsonl and vocab.txt
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        triples: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score responses; with --model also report perplexity on --corpus.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        vectors: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        corpus: Option<PathBuf>,
        #[arg(long, requires = "model")]
        triples: Option<PathBuf>,
    },
    /// Serve the chat and trace endpoints.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// static inspector assets
        #[arg(long)]
        ui: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    /// `vocab_size` and `triple_vocab_size` act as caps; the checkpoint
    /// records the actual sizes.
    model: ModelConfig,
    train: TrainConfig,
}

fn corpus_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl") && !p.to_string_lossy().ends_with(".examples.jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .jsonl corpus files in {}", input.display());
    }
    Ok(files)
}

fn load(path: &Path) -> Result<CorpusSplit> {
    load_corpus(path, CorpusFormat::Jsonl).with_context(|| format!("loading {}", path.display()))
}

fn preprocess(input: &Path, output: &Path, vocab_size: usize, topk: usize) -> Result<()> {
    if vocab_size <= 4 {
        bail!("--vocab-size must exceed the 4 special tokens");
    }
    fs::create_dir_all(output)?;
    let splits: Vec<(PathBuf, CorpusSplit)> = corpus_files(input)?
        .into_iter()
        .map(|p| load(&p).map(|s| (p, s)))
        .collect::<Result<_>>()?;
    let train_split = splits
        .iter()
        .find(|(p, _)| p.file_stem().is_some_and(|s| s == "train"))
        .unwrap_or(&splits[0]);
    let vocab = build_vocab(&train_split.1, vocab_size)?;
    vocab.save(&output.join("vocab.txt"))?;
    for (path, split) in &splits {
        let stem = path.file_stem().expect("file has a stem").to_string_lossy();
        save_corpus(split, &output.join(format!("{stem}.jsonl")))?;
        let mut w = BufWriter::new(fs::File::create(output.join(format!("{stem}.examples.jsonl")))?);
        let mut n = 0;
        for d in &split.dialogues {
            for ex in make_training_examples(d, topk) {
                let mut line = serde_json::to_value(&ex)?;
                line["dialogue_id"] = d.dialogue_id.clone().into();
                writeln!(w, "{line}")?;
                n += 1;
            }
        }
        w.flush()?;
        tracing::info!(split = %stem, dialogues = split.dialogues.len(), examples = n, "preprocessed");
    }
    tracing::info!(vocab = vocab.len(), "wrote vocabulary");
    Ok(())
}

fn build_triples(
    corpus: &Path,
    lexicon: &Path,
    annotations: Option<&Path>,
    output: &Path,
    vocab: Option<&Path>,
    tail_match: bool,
) -> Result<()> {
    let split = load(corpus)?;
    let vocab = match vocab {
        Some(p) => Vocabulary::load(p)?,
        None => build_vocab(&split, 30004)?,
    };
    let lexicon = ConceptLexicon::load_tsv(lexicon)?;
    let builder = TripleBuilder::new(&lexicon, &vocab, TripleConfig {
        tail_match,
        ..TripleConfig::default()
    });
    let file_annotator = annotations.map(FileAnnotator::from_dir).transpose()?;
    let mut stores = BTreeMap::new();
    for d in &split.dialogues {
        let store = match &file_annotator {
            Some(a) => builder.collect(d, &a.coreference(d)?, a as &dyn EntityAnnotator),
            None => builder.collect(d, &RuleBasedAnnotator.coreference(d)?, &RuleBasedAnnotator),
        }
        .with_context(|| format!("dialogue {}", d.dialogue_id))?;
        stores.insert(d.dialogue_id.clone(), store);
    }
    fs::write(output, dialogue_triples_to_tsv(&stores))?;
    let total: usize = stores.values().map(TripleStore::len).sum();
    tracing::info!(dialogues = stores.len(), triples = total, filtered = builder.filtered().len(), "wrote triples");
    Ok(())
}

fn run_train(config: &Path, corpus: &Path, triples: Option<&Path>, out: &Path) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let file: TrainFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
    file.train.validate()?;
    let train_split = load(&corpus.join("train.jsonl"))?;
    let valid_path = corpus.join("valid.jsonl");
    let valid_split = valid_path.exists().then(|| load(&valid_path)).transpose()?;
    let vocab_path = corpus.join("vocab.txt");
    let vocab = if vocab_path.exists() {
        Vocabulary::load(&vocab_path)?
    } else {
        build_vocab(&train_split, file.model.vocab_size)?
    };
    let stores: HashMap<String, TripleStore> = match triples {
        Some(p) => load_dialogue_triples(p)?,
        None => HashMap::new(),
    };
    let entities = build_entity_vocab(stores.values(), file.model.triple_vocab_size);
    let model_config = ModelConfig {
        vocab_size: vocab.len(),
        triple_vocab_size: entities.len(),
        ..file.model
    };
    let mut model = Model::new(model_config, vocab, entities, file.train.seed)?;
    let train_set = prepare(&model, &train_split, &stores, file.train.selector_k);
    let valid_set = valid_split
        .map(|s| prepare(&model, &s, &stores, file.train.selector_k))
        .unwrap_or_default();
    tracing::info!(
        train = train_set.len(),
        valid = valid_set.len(),
        params = model.store.num_elements(),
        "training"
    );
    fs::create_dir_all(out)?;
    let mut log = BufWriter::new(fs::File::create(out.join("train_log.jsonl"))?);
    let outcome = train(&mut model, &train_set, &valid_set, &file.train, &mut log)?;
    log.flush()?;
    save_checkpoint(&model, out, outcome.best_epoch, Some(outcome.best_valid_loss))?;
    tracing::info!(epoch = outcome.best_epoch, valid_loss = outcome.best_valid_loss, "saved checkpoint");
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?
        .lines()
        .map(str::to_string)
        .collect())
}

fn run_eval(
    hyp: &Path,
    reference: &Path,
    vectors: Option<&Path>,
    model: Option<&Path>,
    corpus: Option<&Path>,
    triples: Option<&Path>,
) -> Result<()> {
    let hyps = read_lines(hyp)?;
    let refs = read_lines(reference)?;
    let vectors = vectors.map(WordVectors::load).transpose()?;
    let ppl = match (model, corpus) {
        (Some(dir), Some(corpus)) => {
            let (model, _) = load_checkpoint(dir)?;
            let stores = triples.map(load_dialogue_triples).transpose()?.unwrap_or_default();
            let dialogues = prepare(&model, &load(corpus)?, &stores, 2);
            Some(perplexity(&model, &dialogues)?)
        }
        (Some(_), None) => bail!("--model needs --corpus to compute perplexity"),
        _ => None,
    };
    let report = evaluate(&hyps, &refs, vectors.as_ref(), ppl)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[tokio::main]
async fn serve(
    checkpoint: Option<&Path>,
    addr: SocketAddr,
    ui: Option<&Path>,
    lexicon: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let model = match checkpoint {
        Some(dir) => {
            let (model, manifest) = load_checkpoint(dir)?;
            tracing::info!(checkpoint = %dir.display(), epoch = manifest.epoch, "loaded model");
            Some(model)
        }
        None => {
            tracing::warn!("no checkpoint given; session creation will answer 503");
            None
        }
    };
    let lexicon = lexicon.map(ConceptLexicon::load_tsv).transpose()?;
    let state = AppState::new(model, lexicon.as_ref(), seed);
    cntf_service::serve(state, addr, ui).await?;
    Ok(())
}

fn main() -> Result<()> {
    let filter = EnvFilter::try_from_env("CNTF_LOG_LEVEL").unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match Cli::parse().command {
        Command::Preprocess {
            input,
            output,
            vocab_size,
            topk,
        } => preprocess(&input, &output, vocab_size, topk),
        Command::Triples {
            corpus,
            lexicon,
            annotations,
            output,
            vocab,
            tail_match,
        } => build_triples(&corpus, &lexicon, annotations.as_deref(), &output, vocab.as_deref(), tail_match),
        Command::Train {
            config,
            corpus,
            triples,
            out,
        } => run_train(&config, &corpus, triples.as_deref(), &out),
        Command::Eval {
            hyp,
            reference,
            vectors,
            model,
            corpus,
            triples,
        } => run_eval(
            &hyp,
            &reference,
            vectors.as_deref(),
            model.as_deref(),
            corpus.as_deref(),
            triples.as_deref(),
        ),
        Command::Serve {
            checkpoint,
            port,
            host,
            ui,
            lexicon,
            seed,
        } => {
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad --host/--port")?;
            serve(checkpoint.as_deref(), addr, ui.as_deref(), lexicon.as_deref(), seed)
        }
    }
}
