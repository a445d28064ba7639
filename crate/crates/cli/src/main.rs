use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use mslm::analysis::{
    self, nearest_neighbors, ngram_repeat_fraction, nll_by_frequency, perplexity, ref_bleu, shuffle_perturbation,
    PerturbationSpec,
};
use mslm::config::{defaults_reference, RunConfig};
use mslm::cost::{self, CostParams, TimeConstants};
use mslm::data::{count_words, read_text, tokenize, Vocab};
use mslm::mask::{retina_masks, AttentionMask};
use mslm::model::{read_checkpoint, Checkpoint, Family, Model, ModelConfig};
use mslm::train::{step_seed, train, TrainRun};

#[derive(Parser)]
#[command(name = "mslm", version, about = "Multi-scale transformer language models")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model checkpoint; its run directory supplies the config echo and vocabulary.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; resumes when --checkpoint is given.
    Train(Overrides),
    /// Sliding-window perplexity on a data split.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        o: Overrides,
    },
    /// NLL change after shuffling a distant context region.
    Perturb {
        /// Keep the shuffled region in order (a null control).
        #[arg(long)]
        identity_permutation: bool,
        #[command(flatten)]
        o: Overrides,
    },
    /// Test NLL by training-frequency bin.
    Freq(Overrides),
    /// Sample continuations of test prompts and score them.
    Sample(Overrides),
    /// Nearest-neighbor chunks by mean hidden state.
    Nn(Overrides),
    /// Analytic memory and time model.
    Cost {
        /// Also time one layer forward pass at each grid point.
        #[arg(long)]
        measure: bool,
        #[command(flatten)]
        o: Overrides,
    },
    /// Print attention masks as '#'/'.' grids.
    Maskshow(Overrides),
    /// Print the configuration reference.
    Defaults,
}

#[derive(clap::Args)]
struct Overrides {
    /// Dotted config overrides such as model.scales=16,4,1.
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("MSLM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<mslm::Error>(), Some(mslm::Error::Config(_))));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}

/// `run/checkpoints/x.mslm` belongs to `run`.
fn run_dir_of(checkpoint: &Path) -> PathBuf {
    let parent = checkpoint.parent().unwrap_or(Path::new("."));
    match parent.file_name() {
        Some(n) if n == "checkpoints" => parent.parent().unwrap_or(Path::new(".")).to_path_buf(),
        _ => parent.to_path_buf(),
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    checkpoint: Option<Checkpoint>,
}

fn context(cli: &Cli, overrides: &[String], needs_checkpoint: bool) -> anyhow::Result<Ctx> {
    let run_dir = cli.checkpoint.as_deref().map(run_dir_of);
    let mut cfg = match (&cli.config, &run_dir) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(d)) if d.join("config_echo.json").is_file() => RunConfig::load(&d.join("config_echo.json"))?,
        _ => RunConfig::default(),
    };
    cfg = cfg.with_overrides(overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let checkpoint = match &cli.checkpoint {
        Some(p) => {
            let ck = read_checkpoint(p)?;
            cfg.model = ck.config.clone();
            Some(ck)
        }
        None if needs_checkpoint => bail!("--checkpoint is required for this command"),
        None => None,
    };
    let out = cli
        .out
        .clone()
        .or(run_dir)
        .unwrap_or_else(|| PathBuf::from("run"));
    Ok(Ctx { cfg, out, checkpoint })
}

fn load_tokens(cfg: &RunConfig, split: &str, vocab: &Vocab) -> anyhow::Result<(Vec<usize>, usize)> {
    let text = read_text(cfg.data_path(split)?)?;
    Ok((vocab.encode(&tokenize(&text, &cfg.data.tokenizer)), count_words(&text)))
}

fn build_vocab(cfg: &RunConfig) -> anyhow::Result<Vocab> {
    let text = read_text(cfg.data_path("train")?)?;
    Ok(Vocab::build(&tokenize(&text, &cfg.data.tokenizer), cfg.model.vocab_size)?)
}

/// The run directory's vocabulary, or one rebuilt from `data.train`.
fn load_vocab(ctx: &Ctx) -> anyhow::Result<Vocab> {
    let path = ctx.out.join("vocab.json");
    match fs::read_to_string(&path) {
        Ok(s) => Ok(Vocab::from_json(&s)?),
        Err(_) => build_vocab(&ctx.cfg),
    }
}

fn model_of(ctx: &Ctx) -> Model {
    let ck = ctx.checkpoint.as_ref().expect("checked by context()");
    Model::from_params(ck.config.clone(), ck.params.clone())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).with_context(|| d.display().to_string())?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| path.display().to_string())?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Defaults => {
            print!("{}", defaults_reference());
            Ok(())
        }
        Command::Train(o) => cmd_train(&cli, &o.overrides),
        Command::Eval { split, o } => cmd_eval(&context(&cli, &o.overrides, true)?, split),
        Command::Perturb { identity_permutation, o } => {
            cmd_perturb(&context(&cli, &o.overrides, true)?, *identity_permutation)
        }
        Command::Freq(o) => cmd_freq(&context(&cli, &o.overrides, true)?),
        Command::Sample(o) => cmd_sample(&context(&cli, &o.overrides, true)?),
        Command::Nn(o) => cmd_nn(&context(&cli, &o.overrides, true)?),
        Command::Cost { measure, o } => cmd_cost(&context(&cli, &o.overrides, false)?, *measure),
        Command::Maskshow(o) => cmd_maskshow(&context(&cli, &o.overrides, false)?.cfg.model),
    }
}

fn cmd_train(cli: &Cli, overrides: &[String]) -> anyhow::Result<()> {
    if cli.config.is_none() && cli.checkpoint.is_none() {
        return Err(mslm::Error::Config("train needs --config".into()).into());
    }
    let ctx = context(cli, overrides, false)?;
    let cfg = &ctx.cfg;
    cfg.validate()?;
    let vocab = build_vocab(cfg)?;
    let (train_tokens, _) = load_tokens(cfg, "train", &vocab)?;
    let valid = match cfg.data.valid {
        Some(_) => Some(load_tokens(cfg, "valid", &vocab)?.0),
        None => None,
    };
    fs::create_dir_all(&ctx.out).with_context(|| ctx.out.display().to_string())?;
    fs::write(ctx.out.join("config_echo.json"), cfg.canonical_json()? + "\n")?;
    fs::write(ctx.out.join("vocab.json"), vocab.to_json()?)?;

    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let run = TrainRun {
        train: &train_tokens,
        valid: valid.as_deref(),
        config: &cfg.train,
        seed: cfg.seed,
        eval_stride: cfg.eval.stride,
        out_dir: Some(&ctx.out),
    };
    let log_every = (cfg.train.steps / 20).max(1);
    train(&mut model, run, ctx.checkpoint.as_ref(), |r| {
        if r.step % log_every == 0 || r.valid_ppl.is_some() {
            match r.valid_ppl {
                Some(p) => eprintln!("step {:>7} lr {:.3e} train_nll {:.4} valid_ppl {:.2}", r.step, r.lr, r.train_nll, p),
                None => eprintln!("step {:>7} lr {:.3e} train_nll {:.4}", r.step, r.lr, r.train_nll),
            }
        }
    })?;
    println!("wrote {}", ctx.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRow<'a> {
    split: &'a str,
    tokens: usize,
    scored: usize,
    total_nll: f64,
    ppl: f64,
    words: usize,
    word_ppl: f64,
}

fn cmd_eval(ctx: &Ctx, split: &str) -> anyhow::Result<()> {
    let vocab = load_vocab(ctx)?;
    let model = model_of(ctx);
    let (tokens, words) = load_tokens(&ctx.cfg, split, &vocab)?;
    let r = perplexity(&model, &tokens, stride(&ctx.cfg))?;
    let row = EvalRow {
        split,
        tokens: tokens.len(),
        scored: r.scored,
        total_nll: r.total_nll,
        ppl: r.ppl,
        words,
        word_ppl: r.word_ppl(words)?,
    };
    println!("{split}: ppl {:.3} word_ppl {:.3} over {} tokens", row.ppl, row.word_ppl, row.scored);
    write_csv(&ctx.out.join(format!("analysis/eval_{split}.csv")), &[row])
}

fn stride(cfg: &RunConfig) -> usize {
    cfg.eval
        .stride
        .min(cfg.model.context - cfg.model.first_target())
        .max(1)
}

#[derive(Serialize)]
struct DistanceRow {
    distance: usize,
    mean_delta_nll: f64,
}

fn cmd_perturb(ctx: &Ctx, identity: bool) -> anyhow::Result<()> {
    let vocab = load_vocab(ctx)?;
    let model = model_of(ctx);
    let (tokens, _) = load_tokens(&ctx.cfg, "test", &vocab)?;
    let a = &ctx.cfg.analysis;
    let spec = PerturbationSpec {
        c: a.perturb_length,
        max_windows: a.perturb_windows,
        seed: ctx.cfg.seed,
        identity,
    };
    let curve = shuffle_perturbation(&model, &tokens, spec)?;
    println!("{} windows", curve.windows);
    let by_d: Vec<DistanceRow> = curve
        .by_distance
        .iter()
        .enumerate()
        .map(|(i, &m)| DistanceRow {
            distance: i + 1,
            mean_delta_nll: m,
        })
        .collect();
    write_csv(&ctx.out.join("analysis/perturbation.csv"), &curve.buckets)?;
    write_csv(&ctx.out.join("analysis/perturbation_by_distance.csv"), &by_d)
}

fn cmd_freq(ctx: &Ctx) -> anyhow::Result<()> {
    let vocab = load_vocab(ctx)?;
    let model = model_of(ctx);
    let (tokens, _) = load_tokens(&ctx.cfg, "test", &vocab)?;
    // vocab.json keeps no counts, so recount the training split.
    let mut counts = vec![0u64; vocab.len()];
    for t in load_tokens(&ctx.cfg, "train", &vocab)?.0 {
        counts[t] += 1;
    }
    let bins = nll_by_frequency(&model, &tokens, &counts, ctx.cfg.analysis.frequency_bins, stride(&ctx.cfg))?;
    write_csv(&ctx.out.join("analysis/frequency.csv"), &bins)
}

#[derive(Serialize)]
struct SampleRow {
    prompt: usize,
    completion: usize,
    start: usize,
    repeat_1: f64,
    repeat_2: f64,
    repeat_3: f64,
    repeat_4: f64,
    ref_bleu: f64,
}

fn cmd_sample(ctx: &Ctx) -> anyhow::Result<()> {
    let vocab = load_vocab(ctx)?;
    let model = model_of(ctx);
    let (tokens, _) = load_tokens(&ctx.cfg, "test", &vocab)?;
    let a = &ctx.cfg.analysis;
    let (plen, new) = (a.prompt_length, a.sample.max_new);
    if tokens.len() < plen + new || a.sample_prompts == 0 {
        bail!("the test split has {} tokens; prompts need {}", tokens.len(), plen + new);
    }
    let span = tokens.len() - plen - new;
    let mut rows = Vec::new();
    let dir = ctx.out.join("samples");
    fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
    for p in 0..a.sample_prompts {
        let start = span * p / a.sample_prompts;
        let prompt = &tokens[start..start + plen];
        let truth = &tokens[start + plen..start + plen + new];
        let gens: Vec<Vec<usize>> = (0..a.completions)
            .map(|c| analysis::sample(&model, prompt, &a.sample, step_seed(ctx.cfg.seed, (p * a.completions + c) as u64)))
            .collect::<mslm::Result<_>>()?;
        let refs: Vec<&[usize]> = gens.iter().map(|g| g.as_slice()).collect();
        let bleu = ref_bleu(truth, &refs, 4);
        let mut text = format!(
            "# prompt {p} at token {start}, seed {}\n# prompt: {}\n# truth: {}\n",
            ctx.cfg.seed,
            vocab.decode(prompt).join(" "),
            vocab.decode(truth).join(" ")
        );
        for (c, g) in gens.iter().enumerate() {
            text += &vocab.decode(g).join(" ");
            text.push('\n');
            let rep = |n| ngram_repeat_fraction(g, n, a.ngram_window);
            rows.push(SampleRow {
                prompt: p,
                completion: c,
                start,
                repeat_1: rep(1),
                repeat_2: rep(2),
                repeat_3: rep(3),
                repeat_4: rep(4),
                ref_bleu: bleu,
            });
        }
        fs::write(dir.join(format!("prompt_{p:03}.txt")), text)?;
    }
    write_csv(&ctx.out.join("analysis/samples.csv"), &rows)
}

#[derive(Serialize)]
struct NeighborRow {
    rank: usize,
    chunk: usize,
    start: usize,
    similarity: f64,
    text: String,
}

fn cmd_nn(ctx: &Ctx) -> anyhow::Result<()> {
    let vocab = load_vocab(ctx)?;
    let model = model_of(ctx);
    let (tokens, _) = load_tokens(&ctx.cfg, "test", &vocab)?;
    let a = &ctx.cfg.analysis;
    let rows: Vec<NeighborRow> = nearest_neighbors(&model, &tokens, a.nn_scale, a.nn_chunk, a.nn_query, a.nn_top)?
        .into_iter()
        .map(|n| NeighborRow {
            text: vocab.decode(&tokens[n.start..n.start + a.nn_chunk]).join(" "),
            rank: n.rank,
            chunk: n.chunk,
            start: n.start,
            similarity: n.similarity,
        })
        .collect();
    write_csv(&ctx.out.join("analysis/neighbors.csv"), &rows)
}

#[derive(Serialize)]
struct LayerRow {
    k: String,
    layer: String,
    qkv_proj: f64,
    qk_scores: f64,
    attn_weighted_values: f64,
    fc: f64,
    ln_drop_residual: f64,
    total: f64,
}

fn cmd_cost(ctx: &Ctx, measure: bool) -> anyhow::Result<()> {
    let m = &ctx.cfg.model;
    let a = &ctx.cfg.analysis;
    let mem = cost::model_memory(m, a.cost_batch, a.cost_profile)?;
    let mut layers = Vec::new();
    for s in &mem.scales {
        let row = |layer: String, c: &cost::LayerCost| LayerRow {
            k: s.k.to_string(),
            layer,
            qkv_proj: c.qkv_proj,
            qk_scores: c.qk_scores,
            attn_weighted_values: c.attn_weighted_values,
            fc: c.fc,
            ln_drop_residual: c.ln_drop_residual,
            total: c.total,
        };
        for i in 0..s.layers {
            layers.push(row(i.to_string(), &s.per_layer));
        }
        layers.push(row("total".into(), &s.subtotal));
    }
    write_csv(&ctx.out.join("analysis/cost_layers.csv"), &layers)?;
    write_csv(&ctx.out.join("analysis/cost_memory.csv"), &mem.rows(m.context))?;

    let p = CostParams {
        batch: a.cost_batch,
        seq_len: m.context,
        d_model: m.d_model,
        d_ff: m.d_ff,
        num_heads: m.num_heads,
        scale: 1,
        profile: a.cost_profile,
    };
    let mut time = cost::time_curve(&p, &m.scales, &a.cost_grid, TimeConstants::default());
    if measure {
        for r in &mut time {
            r.measured_ms = Some(cost::measure_layer_ms(&CostParams { seq_len: r.n, scale: r.k, ..p }, 3)?);
        }
    }
    write_csv(&ctx.out.join("analysis/cost_time.csv"), &time)?;
    println!("total {:.4e} bytes", mem.total);
    Ok(())
}

fn cmd_maskshow(m: &ModelConfig) -> anyhow::Result<()> {
    let n = m.context;
    if n > 256 {
        return Err(mslm::Error::Config(format!("model.context {n} is too long to render (max 256)")).into());
    }
    let mut grids: Vec<(String, AttentionMask)> = Vec::new();
    match m.family {
        Family::Vanilla => {
            let mask = match m.local_window {
                Some(w) => AttentionMask::local(n, w),
                None => AttentionMask::causal(n),
            };
            grids.push(("scale 1".into(), mask));
        }
        Family::Retina => {
            let asc = m.scales_ascending();
            for (k, mask) in asc.iter().zip(retina_masks(n, &asc, &m.window_boundaries()?)?) {
                grids.push((format!("scale {k}"), mask));
            }
        }
        Family::Topdown | Family::Bottomup | Family::Coarse => {
            for &k in &m.scales {
                grids.push((format!("scale {k}"), AttentionMask::frame_causal(n / k, k)));
            }
            if m.family == Family::Bottomup {
                for &k in &m.scales {
                    grids.push((format!("aggregation, scale {k}"), AttentionMask::cross_scale(n, k)));
                }
            }
        }
    }
    for (i, (title, mask)) in grids.iter().enumerate() {
        if i > 0 {
            println!();
        }
        println!("{title}");
        print!("{}", mask.render_ascii());
    }
    Ok(())
}
