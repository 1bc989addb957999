use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use seqforge::checkpoint::{write_atomic, Checkpoint};
use seqforge::data::corpus::{encode_pairs, read_parallel, read_tokenized};
use seqforge::data::make_batches;
use seqforge::generation::{self, format_output};
use seqforge::numerics::DType;
use seqforge::registry::{Config, Provenance, Registry};
use seqforge::session::{
    build_task, build_trainer, checkpoint_of, gen_config, max_sentences, model_from_checkpoint, resolve_run_config,
    score_pairs, trainer_from_checkpoint,
};
use seqforge::task::{Task, TranslationTask};
use seqforge::trainer::Scenario;
use seqforge::{Error, Result};

use crate::KeyFlags;

fn dtype(config: &Config) -> Result<DType> {
    Ok(if config.get_bool("fp16")? {
        DType::F16E
    } else {
        DType::F32
    })
}

fn apply_user(config: &mut Config, settings: &[(String, String)]) -> Result<()> {
    for (k, v) in settings {
        config.set_raw(k, v, Provenance::User)?;
    }
    Ok(())
}

fn step_limit(config: &Config) -> Result<Option<u64>> {
    let v = config.get_int("max_steps")?;
    Ok((v >= 0).then_some(v as u64))
}

fn epoch_limit(config: &Config) -> Result<Option<u64>> {
    let v = config.get_int("max_epochs")?;
    Ok((v > 0).then_some(v as u64))
}

pub fn train(source: &Path, target: &Path, restore: Option<&Path>, flags: &KeyFlags) -> Result<()> {
    let registry = Registry::with_builtins();
    let mut settings = flags.user_settings()?;
    settings.push(("source_path".into(), source.display().to_string()));
    settings.push(("target_path".into(), target.display().to_string()));

    let (config, task, mut trainer) = match restore {
        Some(path) => {
            let (mut ckpt, upgrades) = Checkpoint::load(path)?;
            info!("restored {} ({upgrades} upgrades applied)", path.display());
            apply_user(&mut ckpt.config, &settings)?;
            let (s, t) = read_parallel(source, target)?;
            let task = TranslationTask::from_dictionaries(ckpt.src_dict.clone(), ckpt.tgt_dict.clone())
                .with_pairs_from(&s, &t)?;
            let trainer = trainer_from_checkpoint(&registry, &ckpt)?;
            (ckpt.config, Box::new(task) as Box<dyn Task>, trainer)
        }
        None => {
            let config = resolve_run_config(&registry, &settings)?;
            let task = build_task(&registry, &config)?;
            let trainer = build_trainer(&registry, &config, task.src_dict().len(), task.tgt_dict().len())?;
            (config, task, trainer)
        }
    };

    let save_dir = PathBuf::from(config.get_str("save_dir")?);
    fs::create_dir_all(&save_dir).map_err(|e| Error::io(&save_dir, e))?;
    let save_interval = config.get_usize("save_interval")? as u64;
    let pairs = task.train_pairs();
    let plan = make_batches(
        pairs,
        config.get_usize("max_tokens")?,
        max_sentences(&config)?,
        config.get_int("seed")? as u64,
    )?;
    println!(
        "event=start params={} pairs={} batches={} workers={} accum={}",
        trainer.model().layout().total(),
        pairs.len(),
        plan.len(),
        trainer.options().workers,
        trainer.options().accum
    );
    let save = |trainer: &seqforge::trainer::Trainer, name: &str| -> Result<PathBuf> {
        let path = save_dir.join(name);
        checkpoint_of(trainer, &config, task.src_dict(), task.tgt_dict()).save(&path)?;
        info!("saved {}", path.display());
        Ok(path)
    };
    trainer.train(pairs, &plan, step_limit(&config)?, epoch_limit(&config)?, |t, r| {
        println!(
            "step={} epoch={} loss={:.4} nll={:.4} lr={:.6e} ntokens={} scale={} skipped={}",
            r.step, r.epoch, r.loss, r.nll, r.lr, r.ntokens, r.scale, r.skipped
        );
        if !r.skipped && save_interval > 0 && r.step % save_interval == 0 {
            save(t, &format!("checkpoint_{}.ckpt", r.step))?;
        }
        Ok(())
    })?;
    let last = save(&trainer, "checkpoint_last.ckpt")?;
    println!(
        "event=done step={} checkpoint={}",
        trainer.num_updates(),
        last.display()
    );
    Ok(())
}

fn load_for_inference(checkpoint: &Path, flags: &KeyFlags) -> Result<(Checkpoint, Box<dyn seqforge::model::Model>)> {
    let (mut ckpt, upgrades) = Checkpoint::load(checkpoint)?;
    info!("loaded {} ({upgrades} upgrades applied)", checkpoint.display());
    apply_user(&mut ckpt.config, &flags.user_settings()?)?;
    let model = model_from_checkpoint(&Registry::with_builtins(), &ckpt)?;
    Ok((ckpt, model))
}

pub fn generate(checkpoint: &Path, input: &Path, output: Option<&Path>, flags: &KeyFlags) -> Result<()> {
    let (ckpt, model) = load_for_inference(checkpoint, flags)?;
    let cfg = gen_config(&ckpt.config)?;
    let sources: Vec<Vec<u32>> = read_tokenized(input)?.iter().map(|s| ckpt.src_dict.encode(s)).collect();
    if let Some((i, s)) = sources.iter().enumerate().find(|(_, s)| s.len() > cfg.max_tokens) {
        return Err(Error::Capacity(format!(
            "{} line {} has {} tokens, more than max_tokens={}",
            input.display(),
            i + 1,
            s.len(),
            cfg.max_tokens
        )));
    }
    let results = generation::generate(model.as_ref(), &ckpt.state.params, dtype(&ckpt.config)?, &sources, &cfg)?;
    let text = format_output(&results, cfg.nbest, |ids| ckpt.tgt_dict.decode(ids));
    match output {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn score(checkpoint: &Path, source: &Path, reference: &Path, flags: &KeyFlags) -> Result<()> {
    let (ckpt, model) = load_for_inference(checkpoint, flags)?;
    let (s, t) = read_parallel(source, reference)?;
    if s.is_empty() {
        return Err(Error::Invalid("no lines to score; perplexity is undefined".into()));
    }
    let pairs = encode_pairs(&ckpt.src_dict, &ckpt.tgt_dict, &s, &t)?;
    let scores = score_pairs(model.as_ref(), &ckpt.state.params, dtype(&ckpt.config)?, &pairs)?;
    let (mut nll, mut ntokens) = (0.0, 0usize);
    for (i, sc) in scores.iter().enumerate() {
        println!("{i}\t{:.6}", sc.nll / sc.ntokens as f64);
        nll += sc.nll;
        ntokens += sc.ntokens;
    }
    println!(
        "tokens={ntokens} nll={:.6} perplexity={:.4}",
        nll / ntokens as f64,
        (nll / ntokens as f64).exp()
    );
    Ok(())
}

pub fn simulate(scenario: &Path) -> Result<()> {
    for report in Scenario::load(scenario)?.run()? {
        println!("{}", report.to_line());
    }
    Ok(())
}
