use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use hoattn::attention::Modality;
use hoattn::checkpoint::Checkpoint;
use hoattn::config::RunConfig;
use hoattn::data::{generate_dataset, Dataset, GenConfig, QuestionKind, ANSWER_CLASSES, DEFAULT_D_FEAT, DEFAULT_NOISE, GRID_SIDE};
use hoattn::eval::{check_compatible, evaluate};
use hoattn::selftest::{self, reference_kernel, sign_flipped_kernel};
use hoattn::train::{prepare_samples, threads_from_env, train_loop};
use hoattn::Error;

#[derive(Parser)]
#[command(name = "hoattn", version, about = "High-order multimodal attention on grid-VQA")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic grid-VQA dataset.
    GenData {
        #[arg(long)]
        seed: u64,
        /// Number of examples.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_NOISE)]
        noise: f64,
        #[arg(long, default_value_t = DEFAULT_D_FEAT)]
        d_feat: usize,
        /// Comma-separated question kinds (what-color, exists, count-color).
        #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
        kinds: Option<Vec<QuestionKind>>,
    },
    /// Train a model from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's `dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Overrides the config's `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's `resume_from`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Multiple-choice accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Which examples to score.
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
    },
    /// Export potentials and attention for one example.
    AttendDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        example_id: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in numerical checks.
    Selftest {
        /// Run the sketch identity against a count sketch with one sign
        /// flipped; the suite must then fail.
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Split {
    All,
    Train,
    Val,
}

fn parse_kind(s: &str) -> Result<QuestionKind, String> {
    QuestionKind::parse(s).ok_or_else(|| format!("unknown question kind {s:?}"))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Lookup(_) => 2,
        Error::Io(_) | Error::Format { .. } | Error::Json(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData {
            seed,
            n,
            out,
            noise,
            d_feat,
            kinds,
        } => gen_data(seed, n as usize, &out, noise, d_feat, kinds),
        Cmd::Train {
            config,
            dataset,
            out,
            resume,
        } => train(&config, dataset, out, resume),
        Cmd::Eval {
            checkpoint,
            dataset,
            split,
        } => eval(&checkpoint, &dataset, split),
        Cmd::AttendDump {
            checkpoint,
            dataset,
            example_id,
            out,
        } => attend_dump(&checkpoint, &dataset, example_id, &out),
        Cmd::Selftest { inject_sign_flip } => return selftest_cmd(inject_sign_flip),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn gen_data(
    seed: u64,
    n: usize,
    out: &Path,
    noise: f64,
    d_feat: usize,
    kinds: Option<Vec<QuestionKind>>,
) -> hoattn::Result<()> {
    let mut cfg = GenConfig::new(seed, n, noise);
    cfg.d_feat = d_feat;
    if let Some(k) = kinds {
        cfg = cfg.with_kinds(&k);
    }
    let ds = generate_dataset(&cfg)?;
    ds.save(out)?;
    print!("{}", summary(&ds));
    Ok(())
}

/// Example counts per question kind and gold answer.
fn summary(ds: &Dataset) -> String {
    let mut s = format!(
        "examples {} (train {}, val {})\n",
        ds.examples.len(),
        ds.train_len(),
        ds.examples.len() - ds.train_len()
    );
    for (kind, counts) in ds.class_counts() {
        let total: usize = counts.values().sum();
        let _ = write!(s, "{} {total}:", kind.name());
        for (class, c) in counts {
            let _ = write!(s, " {}={c}", ANSWER_CLASSES[class]);
        }
        s.push('\n');
    }
    s
}

fn train(
    config: &Path,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> hoattn::Result<()> {
    let mut run = RunConfig::load(config)?;
    if dataset.is_some() {
        run.dataset = dataset;
    }
    if let Some(o) = out {
        run.out_dir = o;
    }
    if resume.is_some() {
        run.resume_from = resume;
    }
    let Some(data_dir) = run.dataset.clone() else {
        return Err(Error::Config(vec!["no dataset given (config key `dataset` or --dataset)".into()]));
    };
    let threads = threads_from_env()?;
    let ds = Dataset::load(&data_dir)?;
    let resume = run.resume_from.as_deref().map(Checkpoint::load).transpose()?;
    let start = Instant::now();
    let output = train_loop(&ds, &run, resume, threads, &mut |row| {
        eprintln!("[{:8.1}s] {}", start.elapsed().as_secs_f64(), row.csv_line());
    })?;
    output.write(&run.out_dir)?;
    println!(
        "trained to step {}; best val accuracy {}; wrote {}",
        output.last.step,
        output.last.best_val.map_or("n/a".to_string(), |v| format!("{v:.4}")),
        run.out_dir.display()
    );
    Ok(())
}

fn eval(checkpoint: &Path, dataset: &Path, split: Split) -> hoattn::Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = Dataset::load(dataset)?;
    check_compatible(&ck.model.config, &ds)?;
    let n_train = ds.train_len();
    let examples = match split {
        Split::All => &ds.examples[..],
        Split::Train => &ds.examples[..n_train],
        Split::Val => &ds.examples[n_train..],
    };
    let samples = prepare_samples(examples, ck.model.config.n_q);
    let r = evaluate(&ck.model, &samples, threads_from_env()?)?;
    println!(
        "overall {:.4} ({}/{})",
        r.accuracy(),
        r.overall.correct,
        r.overall.total
    );
    for (kind, t) in &r.per_kind {
        println!("{} {:.4} ({}/{})", kind.name(), t.accuracy(), t.correct, t.total);
    }
    Ok(())
}

fn attend_dump(checkpoint: &Path, dataset: &Path, id: u64, out: &Path) -> hoattn::Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = Dataset::load(dataset)?;
    check_compatible(&ck.model.config, &ds)?;
    let Some(example) = ds.find(id) else {
        return Err(Error::Lookup(format!("no example with id {id}")));
    };
    let sample = &prepare_samples(std::slice::from_ref(example), ck.model.config.n_q)[0];
    let (_, att) = ck.model.inspect(&sample.input())?;
    fs::create_dir_all(out)?;
    for (m, (dist, pots)) in att.distributions.iter().zip(&att.potentials).enumerate() {
        let modality = Modality::ALL[m];
        let partners = pair_partners(modality);
        let mut header = vec!["index".to_string(), "unary".to_string()];
        for (slot, p) in pots.pairwise.iter().enumerate() {
            if p.is_some() {
                header.push(format!("pairwise_{}", partners[slot]));
            }
        }
        if pots.ternary.is_some() {
            header.push("ternary".into());
        }
        header.push("p".into());
        let mut csv = header.join(",");
        csv.push('\n');
        for i in 0..dist.p.len() {
            let mut row = vec![i.to_string(), pots.unary.data()[i].to_string()];
            for p in pots.pairwise.iter().flatten() {
                row.push(p.data()[i].to_string());
            }
            if let Some(t) = &pots.ternary {
                row.push(t.data()[i].to_string());
            }
            row.push(dist.p[i].to_string());
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        fs::write(out.join(format!("{}.csv", modality.name())), csv)?;
    }
    fs::write(out.join("image_attention.pgm"), pgm(&att.distributions[0].p)?)?;
    println!("example {id} ({}): wrote {}", example.kind.name(), out.display());
    Ok(())
}

/// Names of the other modality in each pairwise slot.
fn pair_partners(m: Modality) -> [&'static str; 2] {
    match m {
        Modality::Image => ["question", "answer"],
        Modality::Question => ["image", "answer"],
        Modality::Answer => ["image", "question"],
    }
}

/// Plain-text greyscale map of the grid, min-max scaled to 0..=255.
fn pgm(p: &[f64]) -> hoattn::Result<String> {
    if p.len() != GRID_SIDE * GRID_SIDE {
        return Err(Error::Dimension(format!(
            "image attention has {} entries, expected a {GRID_SIDE}x{GRID_SIDE} grid",
            p.len()
        )));
    }
    let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = format!("P2\n{GRID_SIDE} {GRID_SIDE}\n255\n");
    for row in p.chunks(GRID_SIDE) {
        let px: Vec<String> = row
            .iter()
            .map(|&v| {
                let level = if hi > lo { (v - lo) / (hi - lo) * 255.0 } else { 0.0 };
                (level.round() as u8).to_string()
            })
            .collect();
        s.push_str(&px.join(" "));
        s.push('\n');
    }
    Ok(s)
}

fn selftest_cmd(inject_sign_flip: bool) -> ExitCode {
    let kernel = if inject_sign_flip { sign_flipped_kernel } else { reference_kernel };
    match selftest::run_all(kernel) {
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Ok(checks) => {
            for c in &checks {
                println!("{}", c.report_line());
            }
            if checks.iter().all(|c| c.passed()) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    }
}
