use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use sarm::bank::MemoryBank;
use sarm::config::RunConfig;
use sarm::data::{
    gen_stream, gen_world, oracle_aucs, parse_events, split_point, write_events, World,
};
use sarm::eval::{
    a2a_retrieve, attribute_author, exposure_counts, format_attribution, stratified_eval,
    BucketEdges,
};
use sarm::instrument;
use sarm::model::{ModelParams, TASK_NAMES};
use sarm::tokenizer::Tokenizer;
use sarm::train::{metrics_csv, run_training, score_events, AnchorSet};
use sarm::SarmError;

#[derive(Parser)]
#[command(
    name = "sarm",
    version,
    about = "Semantic-anchor ranking: data, tokenizer, training, evaluation, serving"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set d=16`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic world and impression stream.
    GenData,
    /// Learn the base vocabulary and BPE merges from the anchor corpus.
    BuildTokenizer,
    /// Train the model; writes parameters, bank and metrics log.
    Train,
    /// Score the test split from the bank and write the stratified report.
    Eval,
    /// Score an event file using cached author payloads only.
    Score {
        #[arg(long)]
        events: PathBuf,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention attribution over one author's anchor tokens.
    InspectAttention {
        #[arg(long)]
        author: u64,
    },
    /// Nearest authors by [CLS] cosine similarity.
    Retrieve {
        #[arg(long)]
        author: u64,
        #[arg(long)]
        k: Option<usize>,
    },
}

fn exit_code(kind: &str) -> u8 {
    match kind {
        "config" => 10,
        "parse" => 11,
        "format" => 12,
        "missing_file" => 13,
        "numeric" => 14,
        "shape" => 15,
        "io" => 16,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<SarmError>()
                .map_or("other", SarmError::kind);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {kind}: {msg}");
            ExitCode::from(exit_code(kind))
        }
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::parse(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(SarmError::MissingFile(path.to_path_buf()).into())
        }
        Err(e) => Err(SarmError::Io(e).into()),
    }
}

fn read_bytes(path: &Path) -> anyhow::Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(SarmError::MissingFile(path.to_path_buf()).into())
        }
        Err(e) => Err(SarmError::Io(e).into()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(SarmError::Io)?;
    }
    fs::write(path, contents).map_err(SarmError::Io)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli.common)?;
    eprint!(
        "{}",
        cfg.echo()
            .lines()
            .map(|l| format!("# {l}\n"))
            .collect::<String>()
    );
    match cli.cmd {
        Cmd::GenData => gen_data(&cfg),
        Cmd::BuildTokenizer => build_tokenizer(&cfg),
        Cmd::Train => train(&cfg),
        Cmd::Eval => eval(&cfg),
        Cmd::Score { events, out } => score(&cfg, &events, out.as_deref()),
        Cmd::InspectAttention { author } => inspect_attention(&cfg, author),
        Cmd::Retrieve { author, k } => retrieve(&cfg, author, k.unwrap_or(cfg.top_k)),
    }
}

fn gen_data(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = cfg.data_dir();
    let world = gen_world(
        &cfg.world_config(),
        &cfg.load_phrase_bank()?,
        cfg.world_seed,
    )?;
    let stream = gen_stream(&world, cfg.stream_seed, cfg.n_events)?;
    world.save(&dir)?;
    let cut = split_point(&stream.events, cfg.test_frac);
    let start = if cfg.train_window > 0 {
        cut.saturating_sub(cfg.train_window)
    } else {
        0
    };
    write(&dir.join("events.tsv"), write_events(&stream.events))?;
    write(
        &dir.join("train.tsv"),
        write_events(&stream.events[start..cut]),
    )?;
    write(&dir.join("test.tsv"), write_events(&stream.events[cut..]))?;
    let o = oracle_aucs(&world, &stream, cut..stream.events.len());
    let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
    let oracle = format!(
        "bayes_auc\t{}\nid_only_auc\t{}\n",
        fmt(o.bayes),
        fmt(o.id_only)
    );
    write(&dir.join("oracle.txt"), &oracle)?;
    write(&dir.join("config.txt"), cfg.echo())?;
    println!(
        "world: {} users, {} authors; stream: {} events ({} train, {} test)",
        world.users.len(),
        world.authors.len(),
        stream.events.len(),
        cut - start,
        stream.events.len() - cut
    );
    print!("{oracle}");
    Ok(())
}

fn load_world(cfg: &RunConfig) -> anyhow::Result<World> {
    Ok(World::load(&cfg.data_dir(), &cfg.world_config())?)
}

fn build_tokenizer(cfg: &RunConfig) -> anyhow::Result<()> {
    let corpus: Vec<String> = read_text(&cfg.data_dir().join("anchors.txt"))?
        .lines()
        .map(str::to_string)
        .collect();
    let tok = Tokenizer::train(
        &corpus,
        cfg.vocab_size,
        cfg.merge_threshold,
        cfg.max_merges,
        cfg.max_len,
    )?;
    tok.save(&cfg.tokenizer_dir())?;
    println!(
        "base vocab {} tokens, {} merges, extended vocab {}",
        tok.vocab.len(),
        tok.merges.merges().len(),
        tok.ext_len()
    );
    Ok(())
}

fn load_tokenizer(cfg: &RunConfig) -> anyhow::Result<Tokenizer> {
    Ok(Tokenizer::load(&cfg.tokenizer_dir(), cfg.max_len)?)
}

fn anchor_set(cfg: &RunConfig, world: &World, tok: &Tokenizer) -> AnchorSet {
    let ids = world.authors.iter().map(|a| a.author_id);
    if cfg.id_only() {
        AnchorSet::new(tok, ids.map(|id| (id, sarm::anchor::CLS)))
    } else {
        AnchorSet::new(tok, ids.zip(world.anchor_texts.iter().map(String::as_str)))
    }
}

fn load_events(path: &Path) -> anyhow::Result<Vec<sarm::data::InteractionEvent>> {
    Ok(parse_events(&read_text(path)?)?)
}

fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    let world = load_world(cfg)?;
    let tok = load_tokenizer(cfg)?;
    let train = load_events(&cfg.data_dir().join("train.tsv"))?;
    let test = load_events(&cfg.data_dir().join("test.tsv"))?;
    let mcfg = cfg.model_config(tok.vocab.len(), tok.ext_len())?;
    let params = ModelParams::init(&mcfg)?;
    let anchors = anchor_set(cfg, &world, &tok);
    let dir = cfg.model_dir();
    let out = match run_training(&cfg.train_config(), params, &anchors, &train, &test) {
        Ok(o) => o,
        Err(e) => {
            if matches!(e, SarmError::Numeric(_)) {
                write(&dir.join("diagnostics.txt"), format!("{e}\n"))?;
            }
            return Err(e.into());
        }
    };
    write(&dir.join("params.bin"), out.params.snapshot_bytes())?;
    write(&dir.join("bank.bin"), out.bank.to_bytes())?;
    write(&dir.join("metrics.csv"), metrics_csv(&out.log))?;
    write(&dir.join("config.txt"), cfg.echo())?;
    let last = out.log.last();
    println!(
        "trained {} steps; final l_rec {}; test ctr auc {}",
        out.log.len(),
        last.map_or("NA".into(), |m| format!("{:.6}", m.l_rec)),
        last.and_then(|m| m.test_auc)
            .and_then(|a| a[0])
            .map_or("NA".into(), |v| format!("{v:.6}"))
    );
    Ok(())
}

fn load_model(cfg: &RunConfig) -> anyhow::Result<(ModelParams<f32>, MemoryBank)> {
    // Vocabulary sizes fix the embedding shapes; no text is tokenized here.
    let tok = load_tokenizer(cfg)?;
    let mcfg = cfg.model_config(tok.vocab.len(), tok.ext_len())?;
    let dir = cfg.model_dir();
    let params = ModelParams::read_snapshot(&mcfg, &read_bytes(&dir.join("params.bin"))?[..])
        .context("reading params.bin")?;
    let bank = MemoryBank::load(&dir.join("bank.bin"))?;
    Ok((params, bank))
}

fn eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let (params, bank) = load_model(cfg)?;
    let train = load_events(&cfg.data_dir().join("train.tsv"))?;
    let test = load_events(&cfg.data_dir().join("test.tsv"))?;
    let scores = score_events(&params, &bank, &test)?;
    let edges = BucketEdges::new(cfg.bucket_edges.clone())?;
    let report = stratified_eval(&test, &scores, &exposure_counts(&train), &edges)?;
    let dir = cfg.eval_dir();
    write(&dir.join("report.csv"), report.to_csv())?;
    write(&dir.join("report.txt"), report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

fn score(cfg: &RunConfig, events: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let (params, bank) = load_model(cfg)?;
    let events = load_events(events)?;
    instrument::reset_counters();
    let scores = score_events(&params, &bank, &events)?;
    let (encodes, tokenizations) = instrument::counters();
    if encodes != 0 || tokenizations != 0 {
        bail!("serving path encoded {encodes} anchors and tokenized {tokenizations} texts");
    }
    let mut csv = format!("user_id,author_id,timestamp,{}\n", TASK_NAMES.join(","));
    for (e, s) in events.iter().zip(&scores) {
        let cols: Vec<String> = s.iter().map(|v| format!("{v:.7}")).collect();
        csv.push_str(&format!(
            "{},{},{},{}\n",
            e.user_id,
            e.author_id,
            e.timestamp,
            cols.join(",")
        ));
    }
    match out {
        Some(p) => write(p, &csv)?,
        None => print!("{csv}"),
    }
    eprintln!(
        "scored {} events; sae_forwards=0 tokenizations=0",
        events.len()
    );
    Ok(())
}

fn inspect_attention(cfg: &RunConfig, author: u64) -> anyhow::Result<()> {
    let world = load_world(cfg)?;
    let tok = load_tokenizer(cfg)?;
    let (params, _) = load_model(cfg)?;
    let text = if cfg.id_only() {
        sarm::anchor::CLS
    } else {
        world
            .anchor_text(author)
            .ok_or_else(|| SarmError::Config(format!("author {author} is not in the world")))?
    };
    let weights = attribute_author(text, author, &tok, &params, &params.cfg.fusion)?;
    let body = format_attribution(&weights);
    write(
        &cfg.eval_dir().join(format!("attention_{author}.tsv")),
        &body,
    )?;
    print!("{body}");
    Ok(())
}

fn retrieve(cfg: &RunConfig, author: u64, k: usize) -> anyhow::Result<()> {
    let bank = MemoryBank::load(&cfg.model_dir().join("bank.bin"))?;
    for (id, sim) in a2a_retrieve(author, &bank, k)? {
        println!("{id}\t{sim:.6}");
    }
    Ok(())
}
