use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use super::books::Books;
use super::config::{sha256_hex, RunConfig};
use super::manifest::{Artifact, RunManifest, SlimSummary, SummaryRow};
use crate::autoencoder::{random_search, train, AeModel, EpochRecord, Trial, Variant};
use crate::bitstream::{read_feedback, write_feedback};
use crate::channel::{from_real_tensor, generate_dataset, to_real_tensor, ChannelSample};
use crate::error::Result;
use crate::metrics::{report, MetricsReport};
use crate::ndq::{build_codebooks, build_distortion_table, greedy_allocate, uniform_baseline};
use crate::nn::Tensor;
use crate::rng::derive_seed;
use crate::slimming::{count_flops, fine_tune, prune, read_pruned, sparse_offload_bits, write_pruned};
use crate::vq::codebook_sizing;

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,recon_loss,quant_loss,commit_loss,val_nmse,revived_codes\n");
    for r in history {
        writeln!(
            s,
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{}",
            r.epoch, r.train_loss, r.recon_loss, r.quant_loss, r.commit_loss, r.val_nmse, r.revived_codes
        )
        .unwrap();
    }
    s
}

pub fn trials_csv(trials: &[Trial]) -> String {
    let mut s = String::from("trial,batch_size,lr,beta,m,val_nmse\n");
    for t in trials {
        let c = &t.config;
        writeln!(s, "{},{},{:.9e},{:.9e},{},{:.9e}", t.index, c.batch_size, c.lr, c.beta, c.m, t.score).unwrap();
    }
    s
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("method,budget,mean_nmse,nmse_db_of_mean,mean_nmse_db,mean_rho,one_minus_rho_db\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{:.9e},{:.6},{:.6},{:.9},{:.6}",
            r.method,
            r.budget.map_or(String::new(), |b| b.to_string()),
            r.mean_nmse,
            r.nmse_db_of_mean,
            r.mean_nmse_db,
            r.mean_rho,
            r.one_minus_rho_db
        )
        .unwrap();
    }
    s
}

pub(crate) fn summary_row(method: &str, budget: Option<usize>, r: &MetricsReport) -> SummaryRow {
    SummaryRow {
        method: method.to_string(),
        budget,
        mean_nmse: r.mean_nmse,
        nmse_db_of_mean: r.nmse_db_of_mean,
        mean_nmse_db: r.mean_nmse_db,
        mean_rho: r.mean_rho,
        one_minus_rho_db: r.one_minus_rho_db,
    }
}

/// Decode latents and score them against the reference channels.
pub fn evaluate_latents(model: &AeModel, z: &Tensor, truth: &[ChannelSample], scale: f64) -> Result<MetricsReport> {
    let recon = from_real_tensor(&model.decode(z)?, scale)?;
    report(truth, &recon)
}

/// Encoder cost of `model` against its dense, ungrouped f32 counterpart.
pub fn slim_summary(model: &AeModel, reference: &AeModel, pruned: bool) -> Result<SlimSummary> {
    let rep = count_flops(model)?;
    let reference_offload_bits = count_flops(reference)?.offload_bits;
    let offload_bits = if pruned { sparse_offload_bits(model) } else { rep.offload_bits };
    let encoder_conv_flops = rep
        .layers
        .iter()
        .filter(|c| c.encoder && c.kind == "conv2d")
        .map(|c| c.flops)
        .sum();
    Ok(SlimSummary {
        encoder_flops: rep.encoder_flops,
        encoder_conv_flops,
        offload_bits,
        reference_offload_bits,
        offload_reduction: 1.0 - offload_bits as f64 / reference_offload_bits as f64,
    })
}

struct Run<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    stage: &'static str,
    artifacts: Vec<Artifact>,
    results: Vec<SummaryRow>,
    slimming: Option<SlimSummary>,
}

impl Run<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.artifacts.retain(|a| a.path != name);
        self.artifacts.push(Artifact {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Train (after an optional search), optionally prune, persist, and
    /// return the model as read back from its file.
    fn train_model(&mut self, tr: &Tensor, va: &Tensor, na: usize, nc: usize, vq_k: usize, tag: &str) -> Result<AeModel> {
        let cfg = self.cfg;
        self.stage = "train";
        let arch = cfg.arch(vq_k);
        let mut tc = cfg.train_config();
        if cfg.search.trials > 0 {
            self.stage = "search";
            let mut space = cfg.search.space.clone();
            space.m_choices = vec![tc.m];
            let res = random_search(&space, &tc, cfg.search.trials, cfg.search.epochs, tr, va, |_| {
                AeModel::toy(na, nc, &arch, cfg.seed)
            })?;
            self.write(&format!("search{}.csv", tag), trials_csv(&res.trials).as_bytes())?;
            tc = res.best;
            self.stage = "train";
        }
        let out = train(AeModel::toy(na, nc, &arch, cfg.seed)?, tr, va, &tc, None)?;
        self.write(&format!("history{}.csv", tag), history_csv(&out.history).as_bytes())?;
        let mut model = out.model;
        let mut bytes = Vec::new();
        let pruned = cfg.quantizer.prune_q > 0.0;
        let model = if pruned {
            self.stage = "prune";
            let (p, mask) = prune(&model, cfg.quantizer.prune_q)?;
            model = if cfg.quantizer.finetune {
                let ft = fine_tune(p, &mask, tr, va, &tc)?;
                self.write(&format!("finetune{}.csv", tag), history_csv(&ft.history).as_bytes())?;
                ft.model
            } else {
                p
            };
            write_pruned(&model, &mut bytes)?;
            self.write(&format!("model{}.csip", tag), &bytes)?;
            read_pruned(&bytes[..])?
        } else {
            model.write_to(&mut bytes)?;
            self.write(&format!("model{}.csim", tag), &bytes)?;
            AeModel::read_from(&bytes[..])?
        };
        self.stage = "flops";
        let rep = count_flops(&model)?;
        self.write(&format!("flops{}.csv", tag), rep.to_csv().as_bytes())?;
        if self.slimming.is_none() {
            let mut dense = cfg.arch(vq_k);
            dense.groups = 1;
            dense.binary_fc = false;
            let reference = AeModel::toy(na, nc, &dense, cfg.seed)?;
            self.slimming = Some(slim_summary(&model, &reference, pruned)?);
        }
        Ok(model)
    }

    /// Quantize through actual bitstreams, decode and score.
    #[allow(clippy::too_many_arguments)]
    fn eval_books(
        &mut self,
        model: &AeModel,
        books: &Books,
        z: &Tensor,
        truth: &[ChannelSample],
        scale: f64,
        method: &str,
        budget: usize,
    ) -> Result<()> {
        let cb_bytes = books.to_bytes()?;
        let prefix = if method == "uniform" { "uniform_" } else { "" };
        self.write(&format!("books_{}B{}.csiq", prefix, budget), &cb_bytes)?;
        let books = Books::read_from(&cb_bytes)?;
        self.stage = "quantize";
        let mut fb = Vec::new();
        write_feedback(&books.quantize(z)?, &mut fb)?;
        self.write(&format!("feedback_{}B{}.csif", prefix, budget), &fb)?;
        let z_hat = books.dequantize(&read_feedback(&fb[..])?)?;
        self.stage = "eval";
        let rep = evaluate_latents(model, &z_hat, truth, scale)?;
        self.emit(&rep, &format!("{}B{}", prefix, budget))?;
        self.results.push(summary_row(method, Some(budget), &rep));
        Ok(())
    }

    fn emit(&mut self, rep: &MetricsReport, tag: &str) -> Result<()> {
        self.write(&format!("metrics_{}.csv", tag), rep.samples_csv().as_bytes())?;
        self.write(&format!("cdf_{}.csv", tag), rep.cdf_csv().as_bytes())
    }

    fn stages(&mut self) -> Result<()> {
        let cfg = self.cfg;
        self.stage = "gen-data";
        let data = generate_dataset(&cfg.scenario())?;
        let mut bytes = Vec::new();
        data.write_to(&mut bytes)?;
        self.write("dataset.csid", &bytes)?;
        let (na, nc) = (data.na, data.nc);
        let tr = to_real_tensor(&data.ul.train, data.scale)?;
        let va = to_real_tensor(&data.ul.val, data.scale)?;
        let te = to_real_tensor(&data.dl.test, data.scale)?;
        let truth = &data.dl.test;
        let kseed = derive_seed(cfg.seed, "kmeans", 0);
        match cfg.variant {
            Variant::Ae | Variant::Nd => {
                let model = self.train_model(&tr, &va, na, nc, 2, "")?;
                self.stage = "eval";
                let z_val = model.encode(&va)?;
                let z_test = model.encode(&te)?;
                let rep = evaluate_latents(&model, &z_test, truth, data.scale)?;
                self.emit(&rep, "noquant")?;
                self.results.push(summary_row("noquant", None, &rep));
                let mut table = if cfg.variant == Variant::Nd {
                    self.stage = "allocate";
                    Some(build_distortion_table(&z_val, cfg.effective_b_max(), kseed)?)
                } else {
                    None
                };
                for b in cfg.budgets() {
                    if let Some(t) = table.as_mut() {
                        self.stage = "allocate";
                        let alloc = greedy_allocate(t, b)?;
                        let books = Books::Scalar(build_codebooks(&z_val, &alloc, kseed)?);
                        self.eval_books(&model, &books, &z_test, truth, data.scale, "greedy", b)?;
                    }
                    if b % cfg.model.latent == 0 {
                        self.stage = "allocate";
                        let books = Books::Scalar(uniform_baseline(&z_val, b, kseed)?);
                        self.eval_books(&model, &books, &z_test, truth, data.scale, "uniform", b)?;
                    }
                }
            }
            Variant::Vq => {
                for b in cfg.budgets() {
                    self.stage = "train";
                    let sizing = codebook_sizing(cfg.model.latent, cfg.quantizer.m, b)?;
                    let model = self.train_model(&tr, &va, na, nc, sizing.size, &format!("_B{}", b))?;
                    let codebook = model.codebook().expect("VQ model carries a codebook");
                    let books = Books::Vector {
                        codebook,
                        latent: cfg.model.latent,
                    };
                    self.stage = "eval";
                    let z_test = model.encode(&te)?;
                    self.eval_books(&model, &books, &z_test, truth, data.scale, "vq", b)?;
                }
            }
        }
        self.stage = "summary";
        let s = summary_csv(&self.results);
        self.write("summary.csv", s.as_bytes())
    }
}

/// Run every stage of `cfg` into `cfg.out_dir` and write `manifest.json`.
/// With `dry_run` only the configuration is checked. On failure the
/// manifest records the failing stage and artifacts written so far remain.
pub fn run_experiment(cfg: &RunConfig, dry_run: bool) -> Result<RunManifest> {
    cfg.validate()?;
    if dry_run {
        return Ok(RunManifest::new(cfg, "dry-run"));
    }
    let start = Instant::now();
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut run = Run {
        cfg,
        dir: cfg.out_dir.clone(),
        stage: "gen-data",
        artifacts: Vec::new(),
        results: Vec::new(),
        slimming: None,
    };
    let res = run.stages();
    let mut manifest = RunManifest::new(cfg, if res.is_ok() { "ok" } else { "failed" });
    manifest.artifacts = run.artifacts;
    manifest.results = run.results;
    manifest.slimming = run.slimming;
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    if let Err(e) = &res {
        manifest.failed_stage = Some(run.stage.to_string());
        manifest.error = Some(e.to_string());
    }
    std::fs::write(cfg.out_dir.join("manifest.json"), manifest.to_json())?;
    match res {
        Ok(()) => Ok(manifest),
        Err(e) => Err(e.context(&format!("stage {}", run.stage))),
    }
}
