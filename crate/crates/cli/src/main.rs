use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use csiq_core::autoencoder::{random_search, train, AeModel, Variant};
use csiq_core::bitstream::{read_feedback, write_feedback};
use csiq_core::channel::{generate_dataset, to_real_tensor, SplitDataset};
use csiq_core::ndq::{build_codebooks, build_distortion_table, greedy_allocate, uniform_baseline};
use csiq_core::pipeline::{
    compare, evaluate_latents, history_csv, run_experiment, trials_csv, Books, RunConfig, RunManifest,
};
use csiq_core::rng::derive_seed;
use csiq_core::slimming::{count_flops, fine_tune, load_any_model, prune, save_pruned};
use csiq_core::vq::codebook_sizing;
use csiq_core::{Error, Result};

#[derive(Parser)]
#[command(name = "csiq", version, about = "CSI feedback compression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic UL/DL dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an autoencoder on the UL training split.
    Train {
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// VQ codeword length.
        #[arg(long)]
        m: Option<usize>,
        /// VQ feedback budget; sets the codebook size.
        #[arg(long)]
        bits: Option<usize>,
        /// Write the learned VQ codebook here.
        #[arg(long)]
        books: Option<PathBuf>,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Random search over learning rate, batch size and beta.
    Search {
        #[arg(long)]
        trials: usize,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bits: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Design scalar codebooks on UL validation latents.
    Allocate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bits: usize,
        #[arg(long)]
        out: PathBuf,
        /// Equal bits per unit instead of greedy allocation.
        #[arg(long)]
        uniform: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Encode DL test samples into a feedback file.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        books: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a feedback file back into latents (CSV).
    Dequantize {
        #[arg(long)]
        books: PathBuf,
        #[arg(long)]
        feedback: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// DL test metrics with or without quantization.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        books: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer MACs, FLOPs and parameter bits.
    Flops {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Global magnitude pruning, optionally followed by fine-tuning.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        finetune: bool,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a full experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dry_run: bool,
    },
    /// Tabulate several finished runs.
    Compare {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.with_seed_override(std::env::var("CSIQ_SEED").ok().as_deref())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn build_model(cfg: &RunConfig, data: &SplitDataset, bits: Option<usize>) -> Result<AeModel> {
    let k = match cfg.variant {
        Variant::Vq => {
            let b = bits
                .or_else(|| cfg.budgets().first().copied())
                .ok_or_else(|| Error::Config("VQ training needs --bits".into()))?;
            codebook_sizing(cfg.model.latent, cfg.quantizer.m, b)?.size
        }
        _ => 2,
    };
    AeModel::toy(data.na, data.nc, &cfg.arch(k), cfg.seed)
}

fn train_cfg(config: Option<&Path>, variant: Variant, m: Option<usize>) -> Result<RunConfig> {
    let mut cfg = load_config(config)?;
    cfg.variant = variant;
    if let Some(m) = m {
        cfg.quantizer.m = m;
    }
    cfg.train_config().validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load_config(Some(&config))?;
            let data = generate_dataset(&cfg.scenario())?;
            data.save(&out)?;
            println!(
                "wrote {} ({}x{}, {}/{}/{} users)",
                out.display(),
                data.na,
                data.nc,
                data.ul.train.len(),
                data.ul.val.len(),
                data.ul.test.len()
            );
        }
        Command::Train {
            variant,
            data,
            config,
            out,
            m,
            bits,
            books,
            history,
        } => {
            let cfg = train_cfg(config.as_deref(), variant, m)?;
            let data = SplitDataset::load(&data)?;
            let model = build_model(&cfg, &data, bits)?;
            let tr = to_real_tensor(&data.ul.train, data.scale)?;
            let va = to_real_tensor(&data.ul.val, data.scale)?;
            let res = train(model, &tr, &va, &cfg.train_config(), None)?;
            res.model.save(&out)?;
            if let Some(h) = history {
                write_file(&h, history_csv(&res.history))?;
            }
            if let Some(b) = books {
                let codebook = res
                    .model
                    .codebook()
                    .ok_or_else(|| Error::Config("--books needs a VQ model".into()))?;
                Books::Vector {
                    codebook,
                    latent: res.model.latent_dim(),
                }
                .save(&b)?;
            }
            println!(
                "best epoch {} val NMSE {:.6} (initial {:.6})",
                res.best_epoch, res.best_val_nmse, res.initial_val_nmse
            );
        }
        Command::Search {
            trials,
            epochs,
            variant,
            data,
            config,
            bits,
            out,
        } => {
            let cfg = train_cfg(config.as_deref(), variant, None)?;
            let data = SplitDataset::load(&data)?;
            let tr = to_real_tensor(&data.ul.train, data.scale)?;
            let va = to_real_tensor(&data.ul.val, data.scale)?;
            let res = random_search(&cfg.search.space, &cfg.train_config(), trials, epochs, &tr, &va, |c| {
                let mut cfg = cfg.clone();
                cfg.quantizer.m = c.m;
                build_model(&cfg, &data, bits)
            })?;
            write_file(&out, trials_csv(&res.trials))?;
            let b = &res.best;
            println!(
                "best trial {}: batch_size={} lr={:.3e} beta={:.3} m={}",
                res.best_index, b.batch_size, b.lr, b.beta, b.m
            );
        }
        Command::Allocate {
            model,
            data,
            bits,
            out,
            uniform,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let model = load_any_model(&model)?;
            let data = SplitDataset::load(&data)?;
            let z = model.encode(&to_real_tensor(&data.ul.val, data.scale)?)?;
            let seed = derive_seed(cfg.seed, "kmeans", 0);
            let books = if uniform {
                uniform_baseline(&z, bits, seed)?
            } else {
                let n = data.ul.val.len().max(1);
                let b_max = cfg.quantizer.b_max.min((usize::BITS - 1 - n.leading_zeros()) as u8);
                let mut table = build_distortion_table(&z, b_max, seed)?;
                build_codebooks(&z, &greedy_allocate(&mut table, bits)?, seed)?
            };
            let alloc: Vec<String> = books.bits.iter().map(u8::to_string).collect();
            Books::Scalar(books).save(&out)?;
            println!("allocation {}", alloc.join(" "));
        }
        Command::Quantize {
            model,
            books,
            data,
            out,
        } => {
            let model = load_any_model(&model)?;
            let books = Books::load(&books)?;
            let data = SplitDataset::load(&data)?;
            let z = model.encode(&to_real_tensor(&data.dl.test, data.scale)?)?;
            let streams = books.quantize(&z)?;
            let mut buf = Vec::new();
            write_feedback(&streams, &mut buf)?;
            write_file(&out, buf)?;
            println!("{} samples x {} bits", streams.len(), books.budget()?);
        }
        Command::Dequantize { books, feedback, out } => {
            let books = Books::load(&books)?;
            let z = books.dequantize(&read_feedback(std::fs::File::open(&feedback)?)?)?;
            let m = books.latent();
            let mut s = String::from("sample_id");
            for j in 0..m {
                write!(s, ",z{}", j).unwrap();
            }
            s.push('\n');
            for (i, row) in z.data().chunks(m).enumerate() {
                write!(s, "{}", i).unwrap();
                for v in row {
                    write!(s, ",{:.9e}", v).unwrap();
                }
                s.push('\n');
            }
            write_file(&out, s)?;
        }
        Command::Eval {
            model,
            books,
            data,
            out,
        } => {
            let model = load_any_model(&model)?;
            let data = SplitDataset::load(&data)?;
            let z = model.encode(&to_real_tensor(&data.dl.test, data.scale)?)?;
            let books = match books {
                Some(b) => Some(Books::load(&b)?),
                None => model.codebook().map(|codebook| Books::Vector {
                    codebook,
                    latent: model.latent_dim(),
                }),
            };
            let z = match &books {
                Some(b) => b.dequantize(&b.quantize(&z)?)?,
                None => z,
            };
            let rep = evaluate_latents(&model, &z, &data.dl.test, data.scale)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("metrics.csv"), rep.samples_csv())?;
            std::fs::write(out.join("cdf.csv"), rep.cdf_csv())?;
            println!(
                "NMSE {:.4} dB (mean of dB {:.4}), rho {:.6}",
                rep.nmse_db_of_mean, rep.mean_nmse_db, rep.mean_rho
            );
        }
        Command::Flops { model, csv } => {
            let rep = count_flops(&load_any_model(&model)?)?;
            print!("{}", rep.to_text());
            match csv {
                Some(p) => write_file(&p, rep.to_csv())?,
                None => print!("\n{}", rep.to_csv()),
            }
        }
        Command::Prune {
            model,
            q,
            out,
            finetune,
            data,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let model = load_any_model(&model)?;
            let (mut pruned, mask) = prune(&model, q)?;
            if finetune {
                let data = data.ok_or_else(|| Error::Config("--finetune needs --data".into()))?;
                let data = SplitDataset::load(&data)?;
                let tr = to_real_tensor(&data.ul.train, data.scale)?;
                let va = to_real_tensor(&data.ul.val, data.scale)?;
                let mut tc = cfg.train_config();
                tc.m = model.codebook().map_or(tc.m, |c| c.m);
                let res = fine_tune(pruned, &mask, &tr, &va, &tc)?;
                println!("fine-tuned: val NMSE {:.6} -> {:.6}", res.initial_val_nmse, res.best_val_nmse);
                pruned = res.model;
            }
            save_pruned(&pruned, &out)?;
            println!("zeroed {} of {} weights", mask.zeroed, mask.prunable);
        }
        Command::Run { config, dry_run } => {
            let cfg = load_config(Some(&config))?;
            let m = run_experiment(&cfg, dry_run)?;
            if dry_run {
                println!("config ok ({})", m.config_hash);
            } else {
                for r in &m.results {
                    println!(
                        "{:>8} B={:<5} NMSE {:8.3} dB",
                        r.method,
                        r.budget.map_or("-".to_string(), |b| b.to_string()),
                        r.nmse_db_of_mean
                    );
                }
                println!("manifest {}", cfg.out_dir.join("manifest.json").display());
            }
        }
        Command::Compare { manifests, out } => {
            let ms = manifests
                .iter()
                .map(|p| RunManifest::load(p))
                .collect::<Result<Vec<_>>>()?;
            let csv = compare(&ms)?;
            match out {
                Some(p) => write_file(&p, csv)?,
                None => print!("{}", csv),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
