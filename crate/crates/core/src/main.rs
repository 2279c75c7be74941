use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pqmatt::config::ModelConfig;
use pqmatt::data::{align_records, generate_corpus, read_tsv, tokenize, vocab_from_records, write_tsv, Example, GrammarConfig, Record, Split};
use pqmatt::error::{Error, Result};
use pqmatt::inference::beam_search;
use pqmatt::metrics::EvalReport;
use pqmatt::model::{count_parameters, Model};
use pqmatt::model_store::{self, LoadedModel};
use pqmatt::numerics::GradCheckOptions;
use pqmatt::pointer_generator::grad_check_model;
use pqmatt::quantized_model::QuantizedModel;
use pqmatt::training::{evaluate, train, RunConfig};
use pqmatt::vocab::{TargetToken, Vocab};

#[derive(Parser)]
#[command(name = "pqmatt", version, about = "pQRNN-MAtt semantic parser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/dev/test corpus as TSV files.
    GenData(GenDataArgs),
    /// Train a model and write a model file.
    Train(TrainArgs),
    /// Evaluate a model on a TSV corpus.
    Eval(EvalArgs),
    /// Parse one query and print the top-K trees.
    Parse(ParseArgs),
    /// Convert a float model with learned ranges into an 8-bit model.
    Quantize(QuantizeArgs),
    /// Finite-difference gradient check of the full model (64-bit).
    Gradcheck(GradcheckArgs),
    /// Parameter count with per-module breakdown.
    Params(ParamsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus (query<TAB>tree per line).
    #[arg(long)]
    data: PathBuf,
    /// Optional dev corpus for periodic and final evaluation.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Learn activation ranges and fine-tune with fake quantization.
    #[arg(long)]
    quantize: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the final dev report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    topk: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    require_quantized: bool,
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 1)]
    topk: usize,
    #[arg(long)]
    require_quantized: bool,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model_in: PathBuf,
    #[arg(long)]
    model_out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 21)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 6)]
    samples: usize,
}

#[derive(Args)]
struct ParamsArgs {
    /// Count an existing model file instead of a preset.
    #[arg(long, conflicts_with = "preset")]
    model: Option<PathBuf>,
    /// default, reduced or tiny.
    #[arg(long, default_value = "default")]
    preset: String,
    #[arg(long, default_value_t = 600)]
    vocab_size: usize,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn load_records(path: &Path) -> Result<Vec<Record>> {
    read_tsv(path).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {}", path.display(), m)),
        other => other,
    })
}

fn load_model(path: &Path, require_quantized: bool) -> Result<LoadedModel> {
    let m = model_store::load(path)?;
    if require_quantized && !m.is_quantized() {
        return Err(Error::ModelFile(format!("{} is a float model; an 8-bit model is required", path.display())));
    }
    Ok(m)
}

fn print_report(out: &mut dyn Write, r: &EvalReport) -> Result<()> {
    for line in r.to_key_value().lines() {
        if let Some((k, v)) = line.split_once('=') {
            writeln!(out, "{}\t{}", k, v)?;
        }
    }
    Ok(())
}

fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let corpus = generate_corpus(&GrammarConfig::default(), a.seed, a.size)?;
    fs::create_dir_all(&a.out)?;
    for (name, split) in [("train", Split::Train), ("dev", Split::Dev), ("test", Split::Test)] {
        let path = a.out.join(format!("{}.tsv", name));
        let rows = corpus.split(split);
        write_tsv(&path, rows.iter().map(|g| (g.query.as_str(), &g.tree)))?;
        writeln!(out, "{}\t{}\t{}", name, path.display(), rows.len())?;
    }
    Ok(())
}

fn aligned(records: &[Record], vocab: &Vocab, what: &str) -> Vec<Example> {
    let (examples, dropped) = align_records(records, vocab);
    for d in &dropped {
        eprintln!("warning: {}: {}", what, d);
    }
    examples
}

fn run_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::parse(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{}`", o)))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if a.quantize {
        cfg.train.quantize = true;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;

    let train_records = load_records(&a.data)?;
    let dev_records = a.dev.as_deref().map(load_records).transpose()?.unwrap_or_default();
    let mut all = train_records.clone();
    all.extend(dev_records.iter().cloned());
    let vocab = vocab_from_records(&all);
    let train_set = aligned(&train_records, &vocab, "train");
    let dev_set = aligned(&dev_records, &vocab, "dev");
    if train_set.is_empty() {
        return Err(Error::Data("no usable training examples".into()));
    }
    eprintln!(
        "training on {} examples ({} dev), vocab {}, {} threads",
        train_set.len(),
        dev_set.len(),
        vocab.len(),
        pqmatt::parallel::threads()
    );
    let model = Model::<f32>::new(cfg.model, vocab, cfg.train.seed)?;
    let dev = (!dev_set.is_empty()).then_some(dev_set.as_slice());
    let outcome = train(model, &train_set, dev, &cfg.train, &mut io::stderr())?;
    model_store::save(&outcome.model, &a.out)?;
    writeln!(out, "model\t{}", a.out.display())?;
    if let Some((_, r)) = outcome.reports.last() {
        print_report(out, r)?;
        if let Some(p) = &a.report {
            fs::write(p, r.to_json())?;
        }
    }
    Ok(())
}

fn run_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    if !(1..=8).contains(&a.topk) {
        return Err(usage(format!("--topk must be in 1..=8, got {}", a.topk)));
    }
    let loaded = load_model(&a.model, a.require_quantized)?;
    let records = load_records(&a.data)?;
    let vocab = &loaded.model().vocab;
    let examples = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Example::new(tokenize(&r.query), r.tree.clone(), vocab)
                .map_err(|e| Error::Data(format!("{} example {}: {}", a.data.display(), i + 1, e)))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&loaded.engine()?, &examples, a.topk)?;
    print_report(out, &report)?;
    if let Some(p) = &a.report {
        fs::write(p, report.to_json())?;
    }
    Ok(())
}

fn run_parse(a: &ParseArgs, out: &mut dyn Write) -> Result<()> {
    let source = tokenize(&a.query);
    if source.is_empty() {
        return Err(usage("--query must contain at least one token"));
    }
    if a.topk == 0 {
        return Err(usage("--topk must be at least 1"));
    }
    let loaded = load_model(&a.model, a.require_quantized)?;
    let engine = loaded.engine()?;
    for h in beam_search(&engine, &source, a.topk)? {
        let tree = h.render(&source, &engine.vocab).unwrap_or_else(|_| {
            // Not a well-formed tree: show the raw token sequence instead.
            h.tokens
                .iter()
                .map(|t| match *t {
                    TargetToken::Eos => "<eos>".to_string(),
                    TargetToken::Bos => "<bos>".to_string(),
                    TargetToken::Generate(i) => engine.vocab.token(i).to_string(),
                    TargetToken::Copy(i) => source[i].clone(),
                })
                .collect::<Vec<_>>()
                .join(" ")
        });
        writeln!(out, "{:.6}\t{}", h.log_prob, tree)?;
    }
    Ok(())
}

fn run_quantize(a: &QuantizeArgs, out: &mut dyn Write) -> Result<()> {
    let model = match model_store::load(&a.model_in)? {
        LoadedModel::Float(m) => m,
        LoadedModel::Quantized(_) => {
            return Err(Error::ModelFile(format!("{} is already quantized", a.model_in.display())));
        }
    };
    let q = QuantizedModel::from_float(&model)?;
    model_store::save_quantized(&q, &a.model_out)?;
    let (fin, fout) = (fs::metadata(&a.model_in)?.len(), fs::metadata(&a.model_out)?.len());
    writeln!(out, "model\t{}", a.model_out.display())?;
    writeln!(out, "bytes_in\t{}\nbytes_out\t{}\nratio\t{:.6}", fin, fout, fout as f64 / fin as f64)?;
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let model = Model::<f64>::new(ModelConfig::tiny(), Vocab::synthetic(12), a.seed)?;
    let targets = [
        TargetToken::Generate(2),
        TargetToken::Copy(0),
        TargetToken::Copy(1),
        TargetToken::Generate(1),
        TargetToken::Eos,
    ];
    let opts = GradCheckOptions {
        epsilon: a.epsilon,
        tolerance: a.tolerance,
        samples_per_tensor: a.samples,
        seed: a.seed,
    };
    let r = grad_check_model(&model, &["call", "mom"], &targets, &opts)?;
    writeln!(out, "checked\t{}\nmax_rel_error\t{:.3e}", r.checked, r.max_rel_error)?;
    if let Some(w) = &r.worst {
        writeln!(out, "worst\t{}[{}]\t{:.9e}\t{:.9e}", w.param, w.index, w.analytic, w.numeric)?;
    }
    if r.max_rel_error < a.tolerance {
        writeln!(out, "result\tpass")?;
        Ok(())
    } else {
        writeln!(out, "result\tfail")?;
        Err(Error::NonFinite(format!(
            "gradient check: max relative error {:.3e} ≥ {:.1e}",
            r.max_rel_error, a.tolerance
        )))
    }
}

fn run_params(a: &ParamsArgs, out: &mut dyn Write) -> Result<()> {
    let count = match &a.model {
        Some(p) => model_store::load(p)?.model().count_parameters(),
        None => {
            let mut rc = RunConfig::default();
            rc.set("model", &a.preset)?;
            count_parameters(&rc.model, a.vocab_size)?
        }
    };
    for (name, c) in &count.modules {
        writeln!(out, "{}\t{}", name, c)?;
    }
    writeln!(out, "total\t{}", count.total)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a, &mut out),
        Command::Train(a) => run_train(a, &mut out),
        Command::Eval(a) => run_eval(a, &mut out),
        Command::Parse(a) => run_parse(a, &mut out),
        Command::Quantize(a) => run_quantize(a, &mut out),
        Command::Gradcheck(a) => run_gradcheck(a, &mut out),
        Command::Params(a) => run_params(a, &mut out),
    };
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
