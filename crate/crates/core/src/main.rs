use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmdiff::checkpoint::{Checkpoint, CheckpointKind};
use mmdiff::conditioning::CondFlags;
use mmdiff::config::{Ablation, Optimizer, RunConfig};
use mmdiff::constraints::{aggregate_entity_attention, aggregate_subject_attention, heatmap_pgm};
use mmdiff::data::{generate_dataset, load_dataset, vocab, write_dataset, DatasetSpec};
use mmdiff::diffusion::sample;
use mmdiff::eval::{ensure_disjoint, eval_samples, Evaluator};
use mmdiff::imageio::grid_to_ppm;
use mmdiff::train::{load_trained, personalizer, pretrain_base, write_loss_csv};
use mmdiff::{Error, Result};

/// Toy multi-modal personalised diffusion: data, training, sampling and
/// evaluation.
#[derive(Parser, Debug)]
#[command(name = "mmdiff", version)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset as binary shards plus an index.
    GenData(GenData),
    /// Personalise the model (pretraining the base first if needed).
    Train(Train),
    /// Same as `train` with ablation switches.
    Ablate(Ablate),
    /// Generate one image for a held-out scene.
    Sample(Sample),
    /// Compute evaluation metrics on held-out scenes.
    Eval(Eval),
    /// Write cross-attention heatmaps of a held-out scene.
    ExportAttn(ExportAttn),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    two_subject_p: Option<f64>,
    #[arg(long)]
    shard_size: Option<usize>,
}

#[derive(Args, Debug)]
struct Train {
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Directory for the run checkpoint and loss log.
    #[arg(long, default_value = "ckpt")]
    out: PathBuf,
    /// Base checkpoint; pretrained and written here when missing
    /// (default `<out>/base.ckpt`).
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr_lora: Option<f64>,
    #[arg(long)]
    lr_other: Option<f64>,
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<Optimizer>,
    #[arg(long)]
    lambda_tcac: Option<f64>,
    #[arg(long)]
    lambda_icac: Option<f64>,
    #[arg(long)]
    base_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct Ablate {
    #[command(flatten)]
    train: Train,
    #[arg(long)]
    no_constraints: bool,
    #[arg(long)]
    no_se_refiner: bool,
    #[arg(long)]
    no_vision_augment: bool,
}

#[derive(Args, Debug)]
struct SamplerFlags {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    blend: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct RunRef {
    /// Directory holding `run.ckpt`.
    #[arg(long, default_value = "ckpt")]
    ckpt: PathBuf,
    /// Base checkpoint (default `<ckpt>/base.ckpt`).
    #[arg(long)]
    base: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Sample {
    #[command(flatten)]
    run: RunRef,
    #[command(flatten)]
    sampler: SamplerFlags,
    /// Held-out scene providing caption and references.
    #[arg(long, default_value_t = 0)]
    scene: usize,
    #[arg(long, default_value = "sample.ppm")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Eval {
    #[command(flatten)]
    run: RunRef,
    #[command(flatten)]
    sampler: SamplerFlags,
    #[arg(long)]
    scenes: Option<usize>,
    /// Training data checked for overlap with the held-out scenes.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also write the metrics as TOML.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportAttn {
    #[command(flatten)]
    run: RunRef,
    #[command(flatten)]
    sampler: SamplerFlags,
    #[arg(long, default_value_t = 0)]
    scene: usize,
    #[arg(long, default_value = "attn")]
    out: PathBuf,
}

fn parse_optimizer(s: &str) -> std::result::Result<Optimizer, String> {
    match s {
        "sgd" => Ok(Optimizer::Sgd),
        "adam" => Ok(Optimizer::Adam),
        _ => Err(format!("unknown optimizer {s:?} (sgd, adam)")),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn gen_data(mut cfg: RunConfig, a: GenData) -> Result<()> {
    set(&mut cfg.data.seed, a.seed);
    set(&mut cfg.data.count, a.count);
    set(&mut cfg.data.two_subject_p, a.two_subject_p);
    set(&mut cfg.data.shard_size, a.shard_size);
    cfg.validate()?;
    let samples = generate_dataset(DatasetSpec {
        seed: cfg.data.seed,
        count: cfg.data.count,
        two_subject_p: cfg.data.two_subject_p,
    })?;
    let shards = write_dataset(&a.out, &samples, cfg.data.shard_size)?;
    println!("wrote {} samples in {} shards to {}", samples.len(), shards.len(), a.out.display());
    Ok(())
}

fn train(mut cfg: RunConfig, a: Train, ablate: Option<Ablation>) -> Result<()> {
    set(&mut cfg.train.steps, a.steps);
    set(&mut cfg.train.seed, a.seed);
    set(&mut cfg.train.lr_lora, a.lr_lora);
    set(&mut cfg.train.lr_other, a.lr_other);
    set(&mut cfg.train.optimizer, a.optimizer);
    set(&mut cfg.train.constraints.lambda_tcac, a.lambda_tcac);
    set(&mut cfg.train.constraints.lambda_icac, a.lambda_icac);
    set(&mut cfg.base.steps, a.base_steps);
    if let Some(ab) = ablate {
        cfg.train.ablation.no_constraints |= ab.no_constraints;
        cfg.train.ablation.no_se_refiner |= ab.no_se_refiner;
        cfg.train.ablation.no_vision_augment |= ab.no_vision_augment;
    }
    cfg.validate()?;
    let samples = load_dataset(&a.data)?;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let v = vocab().len();
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let base_path = a.base.unwrap_or_else(|| a.out.join("base.ckpt"));
    let base = if base_path.exists() {
        Checkpoint::load(&base_path)?
    } else {
        eprintln!("pretraining base for {} steps", cfg.base.steps);
        let (base, logs) = pretrain_base(&cfg, v, &samples, |_| {})?;
        base.save(&base_path)?;
        write_loss_csv(&a.out.join("base_loss.csv"), &logs)?;
        base
    };
    let mut trainer = personalizer(&cfg, v, &base, &samples)?;
    let every = (cfg.train.steps / 10).max(1);
    let logs = trainer.run(cfg.train.steps, |l| {
        if (l.step + 1) % every == 0 {
            eprintln!("step {} l_sd {:.5} l_tcac {:.5} l_icac {:.5}", l.step + 1, l.l_sd, l.l_tcac, l.l_icac);
        }
    })?;
    write_loss_csv(&a.out.join("loss.csv"), &logs)?;
    let ckpt = trainer.checkpoint(&cfg.to_toml());
    ckpt.save(&a.out.join("run.ckpt"))?;
    println!("wrote {}", a.out.join("run.ckpt").display());
    Ok(())
}

struct Loaded {
    cfg: RunConfig,
    model: mmdiff::model::MmDiff,
    store: autograd::ParamStore,
}

/// Restores a trained model. The run's configuration snapshot supplies
/// the architecture; an explicit `--config` only overrides sampler and
/// evaluation settings.
fn load_run(r: &RunRef, explicit: Option<&RunConfig>) -> Result<Loaded> {
    let run = Checkpoint::load(&r.ckpt.join("run.ckpt"))?;
    if run.kind != CheckpointKind::Personalized {
        return Err(Error::Format("run.ckpt is not a personalisation checkpoint".into()));
    }
    let mut cfg = RunConfig::parse(&run.config)?;
    if let Some(e) = explicit {
        cfg.sampler = e.sampler.clone();
        cfg.eval = e.eval.clone();
    }
    let base = Checkpoint::load(&r.base.clone().unwrap_or_else(|| r.ckpt.join("base.ckpt")))?;
    let (model, store) = load_trained(&cfg.model, vocab().len(), &base, &run)?;
    Ok(Loaded { cfg, model, store })
}

impl Loaded {
    fn flags(&self) -> CondFlags {
        CondFlags {
            no_vision_augment: self.cfg.train.ablation.no_vision_augment,
            no_se_refiner: self.cfg.train.ablation.no_se_refiner,
        }
    }

    fn evaluator(&mut self, s: &SamplerFlags) -> Result<Evaluator<'_>> {
        set(&mut self.cfg.sampler.steps, s.steps);
        set(&mut self.cfg.sampler.guidance_scale, s.guidance);
        set(&mut self.cfg.sampler.blend, s.blend);
        set(&mut self.cfg.sampler.seed, s.seed);
        self.cfg.validate()?;
        let flags = self.flags();
        Evaluator::new(&self.model, &self.store, self.cfg.sampler.clone(), self.cfg.eval.t_start, flags)
    }

    fn scene(&self, index: usize) -> Result<mmdiff::data::TrainingSample> {
        let mut ec = self.cfg.eval.clone();
        ec.scenes = ec.scenes.max(index + 1);
        Ok(eval_samples(&ec)?.swap_remove(index))
    }
}

fn sample_cmd(explicit: Option<&RunConfig>, a: Sample) -> Result<()> {
    let mut l = load_run(&a.run, explicit)?;
    let scene = l.scene(a.scene)?;
    let ev = l.evaluator(&a.sampler)?;
    let (cond, uncond) = ev.condition(&scene)?;
    let x = sample(&ev.model.denoiser, ev.store, &ev.sampler, &cond, &uncond, &ev.sched)?;
    write(&a.out, &grid_to_ppm(&x, ev.model.config.grid))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval_cmd(explicit: Option<&RunConfig>, a: Eval) -> Result<()> {
    let mut l = load_run(&a.run, explicit)?;
    set(&mut l.cfg.eval.scenes, a.scenes);
    let scenes = eval_samples(&l.cfg.eval)?;
    if let Some(d) = &a.data {
        ensure_disjoint(&scenes, &load_dataset(d)?)?;
    }
    let ev = l.evaluator(&a.sampler)?;
    let (m, _) = ev.evaluate(&scenes)?;
    let text = format!(
        "loc_iou = {}\nloc_iou_prior = {}\nsubj_fidelity = {}\ntext_fidelity_proxy = {}\nleakage_text = {}\nleakage_image = {}\nscenes = {}\n",
        m.loc_iou, m.loc_iou_prior, m.subj_fidelity, m.text_fidelity_proxy, m.leakage_text, m.leakage_image, m.scenes
    );
    print!("{text}");
    if let Some(out) = &a.out {
        write(out, text.as_bytes())?;
    }
    Ok(())
}

fn export_attn(explicit: Option<&RunConfig>, a: ExportAttn) -> Result<()> {
    let mut l = load_run(&a.run, explicit)?;
    let scene = l.scene(a.scene)?;
    let ev = l.evaluator(&a.sampler)?;
    let (cond, uncond) = ev.condition(&scene)?;
    let steps = ev.attention_pass(&scene, &cond, &uncond)?;
    let mut written = 0;
    for layer in 0..3 {
        let records: Vec<_> = steps.iter().flatten().filter(|r| r.layer_id == layer).cloned().collect();
        for (k, slot) in cond.entities.iter().enumerate() {
            let text = aggregate_entity_attention(&records, slot.token_pos)?;
            write(&a.out.join(format!("layer{layer}_entity{k}_text.pgm")), &heatmap_pgm(&text)?)?;
            written += 1;
            if let Some(rows) = &slot.subject_rows {
                let cols: Vec<usize> = rows.clone().collect();
                let image = aggregate_subject_attention(&records, &cols)?;
                write(&a.out.join(format!("layer{layer}_entity{k}_image.pgm")), &heatmap_pgm(&image)?)?;
                written += 1;
            }
        }
    }
    println!("wrote {written} heatmaps to {}", a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let explicit = cli.config.as_deref().map(RunConfig::load).transpose()?;
    let cfg = explicit.clone().unwrap_or_default();
    match cli.command {
        Command::GenData(a) => gen_data(cfg, a),
        Command::Train(a) => train(cfg, a, None),
        Command::Ablate(a) => {
            let flags = Ablation {
                no_vision_augment: a.no_vision_augment,
                no_se_refiner: a.no_se_refiner,
                no_constraints: a.no_constraints,
            };
            train(cfg, a.train, Some(flags))
        }
        Command::Sample(a) => sample_cmd(explicit.as_ref(), a),
        Command::Eval(a) => eval_cmd(explicit.as_ref(), a),
        Command::ExportAttn(a) => export_attn(explicit.as_ref(), a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
