use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sog_core::dataset::{generate_corpus, load_image, read_manifest, tokenize, Manifest, Split};
use sog_core::sog::{EdgeVariant, NodeStrategy};
use sog_core::training::{
    append_metrics, check_eval_strategy, evaluate, infer as infer_box, load_checkpoint, load_split, save_checkpoint,
    Sample, Trainer,
};
use sog_core::SogError;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::visualize;
use crate::{EvalArgs, GenDataArgs, InferArgs, TrainArgs, VisualizeArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.sogc";
pub const METRICS_FILE: &str = "metrics.jsonl";

type CliResult<T = ()> = Result<T, CliError>;

fn user(msg: impl Into<String>) -> CliError {
    CliError::User(msg.into())
}

fn open_manifest(path: &Path) -> CliResult<(Manifest, PathBuf)> {
    if !path.exists() {
        return Err(user(format!("dataset manifest {} not found (run gen-data first)", path.display())));
    }
    let m = read_manifest(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((m, root))
}

pub fn gen_data(cfg_path: Option<&Path>, a: GenDataArgs) -> CliResult {
    let mut cfg = RunConfig::load(cfg_path)?;
    let d = &mut cfg.data;
    if let Some(s) = a.seed {
        d.seed = s;
    }
    d.n_train = a.n_train.unwrap_or(d.n_train);
    d.n_val = a.n_val.unwrap_or(d.n_val);
    d.n_test = a.n_test.unwrap_or(d.n_test);
    d.image_size = a.image_size.unwrap_or(d.image_size);
    d.hard_fraction = a.hard_fraction.unwrap_or(d.hard_fraction);
    cfg.data.validate()?;
    cfg.echo(&a.out_dir)?;
    let path = generate_corpus(&cfg.data, &a.out_dir)?;
    println!(
        "wrote {} samples ({} train / {} val / {} test) to {}",
        cfg.data.total(),
        cfg.data.n_train,
        cfg.data.n_val,
        cfg.data.n_test,
        path.display()
    );
    Ok(())
}

fn take(mut v: Vec<Sample>, limit: Option<usize>) -> Vec<Sample> {
    if let Some(n) = limit {
        v.truncate(n);
    }
    v
}

pub fn train(cfg_path: Option<&Path>, a: TrainArgs) -> CliResult {
    let mut cfg = RunConfig::load(cfg_path)?;
    if let Some(s) = a.seed {
        cfg.set_seed(s);
    }
    let t = &mut cfg.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.lr = a.lr.unwrap_or(t.lr);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    if a.no_augment {
        t.augment = false;
    }
    let m = &mut cfg.model;
    if let Some(s) = &a.edge_strategy {
        m.edge.variant = s.parse::<EdgeVariant>()?;
    }
    m.edge.p = a.keep_prob.unwrap_or(m.edge.p);
    if let Some(s) = &a.node_strategy {
        m.node = s.parse::<NodeStrategy>()?;
    }
    if a.no_sog {
        m.sog_enabled = false;
    }

    let (manifest, root) = open_manifest(&a.data)?;
    cfg.data = manifest.header.generator.clone();
    cfg.validate()?;

    let ckpt = a.out_dir.join(CHECKPOINT_FILE);
    let vocab = manifest.header.vocabulary.clone();
    let mut trainer = if a.resume {
        let (t, stored_vocab) = load_checkpoint::<f32>(&ckpt)?;
        if t.model.config != cfg.model || t.config != cfg.train {
            return Err(user("resume configuration differs from the one stored in the checkpoint"));
        }
        if stored_vocab != vocab {
            return Err(user("checkpoint vocabulary does not match the dataset"));
        }
        t
    } else {
        if ckpt.exists() {
            return Err(user(format!("{} exists; pass --resume or choose another --out-dir", ckpt.display())));
        }
        Trainer::<f32>::new(cfg.model.clone(), cfg.train.clone(), vocab.len(), manifest.header.anchors.clone())?
    };
    cfg.echo(&a.out_dir)?;

    let train = take(load_split(&manifest, &root, Split::Train)?, a.limit_train);
    let val = take(load_split(&manifest, &root, Split::Val)?, a.limit_val);
    if train.is_empty() {
        return Err(user("the manifest has no training samples"));
    }
    println!(
        "training {} parameters on {} samples ({} val), epochs {}..{}",
        trainer.model.store.num_scalars(),
        train.len(),
        val.len(),
        trainer.epoch + 1,
        cfg.train.epochs
    );
    let metrics = a.out_dir.join(METRICS_FILE);
    let stop = a.stop_after.unwrap_or(cfg.train.epochs).min(cfg.train.epochs);
    while trainer.epoch < stop {
        let mut rec = match trainer.train_epoch(&train) {
            Ok(r) => r,
            Err(SogError::NonFinite(dump)) => {
                let path = a.out_dir.join("nonfinite.json");
                fs::write(&path, &dump)?;
                return Err(CliError::Numerical(format!("non-finite training state; diagnostics in {}", path.display())));
            }
            Err(e) => return Err(e.into()),
        };
        let every = cfg.train.eval_every;
        let last = trainer.epoch == cfg.train.epochs;
        if !val.is_empty() && every > 0 && (trainer.epoch % every == 0 || last) {
            rec.val_pr = Some(evaluate(&trainer.model, &val)?.pr);
        }
        append_metrics(&metrics, &rec)?;
        save_checkpoint(&ckpt, &trainer, &vocab)?;
        println!(
            "epoch {:>3}  loss {:.4} (conf {:.4}, off {:.4})  lr {:.2e}  val Pr@0.5 {}  {:.1}s",
            rec.epoch,
            rec.loss,
            rec.loss_conf,
            rec.loss_off,
            rec.lr,
            rec.val_pr.map_or("-".to_string(), |v| format!("{v:.4}")),
            rec.wall_time_s
        );
    }
    Ok(())
}

fn checkpoint_trainer(path: &Path) -> CliResult<(Trainer<f32>, Vec<String>)> {
    if !path.exists() {
        return Err(user(format!("checkpoint {} not found", path.display())));
    }
    Ok(load_checkpoint::<f32>(path)?)
}

pub fn eval(cfg_path: Option<&Path>, a: EvalArgs) -> CliResult {
    let variant: EdgeVariant = a.erc_strategy.parse()?;
    check_eval_strategy(variant)?;
    let split: Split = a.split.parse()?;
    let (trainer, vocab) = checkpoint_trainer(&a.checkpoint)?;
    if let Some(p) = cfg_path {
        let cfg = RunConfig::load(Some(p))?;
        if cfg.model != trainer.model.config {
            return Err(user(format!(
                "model section of {} does not match the checkpoint dimensions",
                p.display()
            )));
        }
    }
    let (manifest, root) = open_manifest(&a.data)?;
    if manifest.header.vocabulary != vocab {
        return Err(user("dataset vocabulary does not match the checkpoint"));
    }
    let samples = take(load_split(&manifest, &root, split)?, a.limit);
    let report = evaluate(&trainer.model, &samples)?;

    let out = a.out_dir.unwrap_or_else(|| {
        a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default().join(format!("eval-{}", split.name()))
    });
    let cfg = RunConfig { data: manifest.header.generator.clone(), model: trainer.model.config.clone(), train: trainer.config.clone() };
    cfg.echo(&out)?;
    let mut f = fs::File::create(out.join("results.jsonl"))?;
    for r in &report.records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&serde_json::json!({
        "split": split.name(),
        "samples": report.records.len(),
        "pr_at_0.5": report.pr,
    }))?)?;
    println!("Pr@0.5: {:.4}", report.pr);
    Ok(())
}

pub fn infer(a: InferArgs) -> CliResult {
    let (trainer, vocab) = checkpoint_trainer(&a.checkpoint)?;
    let image = load_image::<f32>(&a.image)
        .map_err(|e| user(format!("cannot read image {}: {e}", a.image.display())))?;
    let tokens = tokenize(&a.expression, &vocab)?;
    let d = infer_box(&trainer.model, &image, &tokens)?;
    println!(
        "{:.2} {:.2} {:.2} {:.2} {:.6}",
        d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max, d.confidence
    );
    Ok(())
}

pub fn visualize(a: VisualizeArgs) -> CliResult {
    let (trainer, vocab) = checkpoint_trainer(&a.checkpoint)?;
    let (manifest, root) = open_manifest(&a.data)?;
    if manifest.header.vocabulary != vocab {
        return Err(user("dataset vocabulary does not match the checkpoint"));
    }
    let record = manifest
        .records
        .iter()
        .find(|r| r.index == a.index)
        .ok_or_else(|| user(format!("no sample with index {}", a.index)))?;
    let img = image::open(root.join(&record.image))?.to_rgb8();
    let sample = Sample::from_record(record, img, &vocab, &manifest.header.anchors)?;
    let cfg = RunConfig { data: manifest.header.generator.clone(), model: trainer.model.config.clone(), train: trainer.config.clone() };
    cfg.echo(&a.out_dir)?;
    visualize::render_all(&trainer.model, &sample, &a.out_dir)?;
    println!("wrote visualizations for sample {} to {}", a.index, a.out_dir.display());
    Ok(())
}
