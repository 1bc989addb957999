//! Resolves a run configuration and builds the components it names.

use crate::checkpoint::Checkpoint;
use crate::criterions::{smoothed_token_loss, Criterion};
use crate::data::{Dictionary, MiniBatch, SequencePair};
use crate::error::{Error, Result};
use crate::generation::GenConfig;
use crate::lr_scheduler::LrScheduler;
use crate::model::{ForwardCtx, Model};
use crate::numerics::{DType, Tape};
use crate::optim::Optimizer;
use crate::registry::{
    merge_schemas, BuildContext, Config, Criterions, KeySpec, Models, Optimizers, Provenance, Registry, Schedulers,
    Tasks, Value,
};
use crate::task::Task;
use crate::trainer::{LossScaler, Trainer, TrainerOptions, DEFAULT_BUCKET_THRESHOLD};

/// Keys owned by the engine itself rather than by a plugin.
pub fn engine_keys() -> Vec<KeySpec> {
    let scaler = LossScaler::default();
    let mut keys = vec![
        KeySpec::new("arch", "tiny_transformer", "model or named architecture"),
        KeySpec::new("criterion", "label_smoothed_cross_entropy", "training criterion"),
        KeySpec::new("optimizer", "adam", "optimizer"),
        KeySpec::new("scheduler", "inverse_sqrt", "learning rate schedule"),
        KeySpec::new("task", "translation", "task"),
        KeySpec::new("seed", 1i64, "seed for initialization, dropout and shuffling"),
        KeySpec::new("max_tokens", 4096i64, "padded tokens per batch"),
        KeySpec::new("max_sentences", 0i64, "sentences per batch; 0 means no limit"),
        KeySpec::new("workers", 1i64, "data-parallel replicas"),
        KeySpec::new("accum", 1i64, "sub-batches accumulated per replica and update"),
        KeySpec::new("fp16", false, "emulated half-precision forward and backward"),
        KeySpec::new("fp16_init_scale", scaler.scale, "initial loss scale"),
        KeySpec::new(
            "fp16_scale_window",
            scaler.window as i64,
            "clean updates before the loss scale doubles",
        ),
        KeySpec::new(
            "min_loss_scale",
            scaler.min_scale,
            "loss scale below which training is declared diverged",
        ),
        KeySpec::new(
            "bucket_threshold",
            DEFAULT_BUCKET_THRESHOLD as i64,
            "gradient bucket size in elements",
        ),
        KeySpec::new("max_steps", -1i64, "optimizer updates to run; -1 means no limit"),
        KeySpec::new("max_epochs", 0i64, "epochs to run; 0 means no limit"),
        KeySpec::new("save_interval", 100i64, "updates between checkpoints"),
        KeySpec::new("save_dir", "checkpoints", "checkpoint directory"),
    ];
    keys.extend(GenConfig::keys());
    keys
}

/// Component names selected by `user`, falling back to engine defaults.
fn selected(user: &[(String, String)], key: &str) -> String {
    user.iter()
        .rev()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.clone())
        .unwrap_or_else(|| match engine_keys().into_iter().find(|k| k.key == key) {
            Some(KeySpec {
                default: Value::Str(s), ..
            }) => s,
            _ => String::new(),
        })
}

/// Full schema for the components `user` selects.
pub fn run_schema(registry: &Registry, user: &[(String, String)]) -> Result<Vec<KeySpec>> {
    let engine = engine_keys();
    let model = registry.keys::<Models>(&selected(user, "arch"))?;
    let criterion = registry.keys::<Criterions>(&selected(user, "criterion"))?;
    let optimizer = registry.keys::<Optimizers>(&selected(user, "optimizer"))?;
    let scheduler = registry.keys::<Schedulers>(&selected(user, "scheduler"))?;
    let task = registry.keys::<Tasks>(&selected(user, "task"))?;
    merge_schemas([
        engine.as_slice(),
        model.as_slice(),
        criterion.as_slice(),
        optimizer.as_slice(),
        scheduler.as_slice(),
        task.as_slice(),
    ])
}

/// Defaults, then architecture overrides, then `user` values in order.
pub fn resolve_run_config(registry: &Registry, user: &[(String, String)]) -> Result<Config> {
    let mut config = Config::from_schema(&run_schema(registry, user)?);
    for (k, v) in registry.architecture_overrides(&selected(user, "arch"))? {
        config.set(&k, v, Provenance::Architecture)?;
    }
    for (k, raw) in user {
        config.set_raw(k, raw, Provenance::User)?;
    }
    Ok(config)
}

pub fn build_context(config: &Config, src_vocab: usize, tgt_vocab: usize) -> Result<BuildContext> {
    Ok(BuildContext {
        seed: config.get_int("seed")? as u64,
        src_vocab,
        tgt_vocab,
    })
}

pub fn build_model(registry: &Registry, config: &Config, ctx: &BuildContext) -> Result<Box<dyn Model>> {
    registry.instantiate::<Models>(config.get_str("arch")?, config, ctx)
}

pub fn build_task(registry: &Registry, config: &Config) -> Result<Box<dyn Task>> {
    registry.instantiate::<Tasks>(config.get_str("task")?, config, &BuildContext::default())
}

fn positive(config: &Config, key: &str) -> Result<usize> {
    let v = config.get_usize(key)?;
    if v == 0 {
        return Err(Error::ConfigValue {
            key: key.into(),
            message: "must be at least 1".into(),
        });
    }
    Ok(v)
}

pub fn trainer_options(config: &Config) -> Result<TrainerOptions> {
    let scaler = LossScaler::new(
        config.get_real("fp16_init_scale")?,
        config.get_usize("fp16_scale_window")? as u64,
        config.get_real("min_loss_scale")?,
        LossScaler::default().max_scale,
    )?;
    Ok(TrainerOptions {
        workers: positive(config, "workers")?,
        accum: positive(config, "accum")?,
        fp16: config.get_bool("fp16")?,
        seed: config.get_int("seed")? as u64,
        bucket_threshold: positive(config, "bucket_threshold")?,
        scaler,
    })
}

/// A trainer with freshly initialized parameters for the configured components.
pub fn build_trainer(registry: &Registry, config: &Config, src_vocab: usize, tgt_vocab: usize) -> Result<Trainer> {
    let ctx = build_context(config, src_vocab, tgt_vocab)?;
    let model = build_model(registry, config, &ctx)?;
    let criterion: Box<dyn Criterion> =
        registry.instantiate::<Criterions>(config.get_str("criterion")?, config, &ctx)?;
    let optimizer: Box<dyn Optimizer> =
        registry.instantiate::<Optimizers>(config.get_str("optimizer")?, config, &ctx)?;
    let scheduler: Box<dyn LrScheduler> =
        registry.instantiate::<Schedulers>(config.get_str("scheduler")?, config, &ctx)?;
    Trainer::new(model, criterion, optimizer, scheduler, trainer_options(config)?)
}

/// `max_sentences` as an optional cap.
pub fn max_sentences(config: &Config) -> Result<Option<usize>> {
    Ok(Some(config.get_usize("max_sentences")?).filter(|&n| n > 0))
}

pub fn gen_config(config: &Config) -> Result<GenConfig> {
    let max_len = config.get_usize("max_len")?;
    let cfg = GenConfig {
        beam: config.get_usize("beam")?,
        lenpen: config.get_real("lenpen")?,
        max_len: (max_len > 0).then_some(max_len),
        groups: config.get_usize("diverse_groups")?,
        diversity: config.get_real("diverse_strength")?,
        sampling: config.get_bool("sampling")?,
        topk: config.get_usize("topk")?,
        temperature: config.get_real("temperature")?,
        max_tokens: positive(config, "max_tokens")?,
        nbest: config.get_usize("nbest")?,
        use_cache: true,
        seed: config.get_int("seed")? as u64,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Teacher-forced statistics for one pair.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PairScore {
    pub nll: f64,
    pub ntokens: usize,
    pub correct: usize,
}

/// Scores every pair on its own, without dropout.
pub fn score_pairs(model: &dyn Model, params: &[f32], dtype: DType, pairs: &[SequencePair]) -> Result<Vec<PairScore>> {
    pairs
        .iter()
        .map(|p| {
            let batch = MiniBatch::collate([p]);
            let mut tape = Tape::new(dtype);
            let logits = model.forward_train(params, &mut tape, &batch, &ForwardCtx::default())?;
            let out = smoothed_token_loss(&mut tape, logits, &batch.target_output, 0.0)?;
            Ok(PairScore {
                nll: out.nll,
                ntokens: out.ntokens,
                correct: out.correct,
            })
        })
        .collect()
}

/// Fraction of gold target tokens (including `</s>`) that are the argmax.
pub fn token_accuracy(model: &dyn Model, params: &[f32], dtype: DType, pairs: &[SequencePair]) -> Result<f64> {
    let scores = score_pairs(model, params, dtype, pairs)?;
    let (correct, total) = scores
        .iter()
        .fold((0usize, 0usize), |(c, n), s| (c + s.correct, n + s.ntokens));
    if total == 0 {
        return Err(Error::Invalid("no target tokens to evaluate".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Snapshot of `trainer` with the configuration and dictionaries it was built from.
pub fn checkpoint_of(trainer: &Trainer, config: &Config, src_dict: &Dictionary, tgt_dict: &Dictionary) -> Checkpoint {
    Checkpoint {
        config: config.clone(),
        layout: trainer.model().layout().clone(),
        optimizer: config.get_str("optimizer").unwrap_or_default().to_string(),
        state: trainer.state(),
        src_dict: src_dict.clone(),
        tgt_dict: tgt_dict.clone(),
    }
}

/// Rebuilds the trainer a checkpoint was taken from and restores its state.
pub fn trainer_from_checkpoint(registry: &Registry, ckpt: &Checkpoint) -> Result<Trainer> {
    let mut trainer = build_trainer(registry, &ckpt.config, ckpt.src_dict.len(), ckpt.tgt_dict.len())?;
    if trainer.model().layout() != &ckpt.layout {
        return Err(Error::Integrity(
            "parameter manifest does not match the configured model".into(),
        ));
    }
    trainer.restore(ckpt.state.clone())?;
    Ok(trainer)
}

/// The model and parameters stored in a checkpoint, for inference.
pub fn model_from_checkpoint(registry: &Registry, ckpt: &Checkpoint) -> Result<Box<dyn Model>> {
    let ctx = build_context(&ckpt.config, ckpt.src_dict.len(), ckpt.tgt_dict.len())?;
    let model = build_model(registry, &ckpt.config, &ctx)?;
    if model.layout() != &ckpt.layout {
        return Err(Error::Integrity(
            "parameter manifest does not match the configured model".into(),
        ));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn user(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_then_architecture_then_user() {
        let r = Registry::with_builtins();
        let c = resolve_run_config(&r, &user(&[("d_model", "32"), ("lr", "0.01")])).unwrap();
        assert_eq!(c.get_int("d_model").unwrap(), 32);
        assert_eq!(c.provenance("d_model"), Some(Provenance::User));
        assert_eq!(c.get_int("n_layers").unwrap(), 1);
        assert_eq!(c.provenance("n_layers"), Some(Provenance::Architecture));
        assert_eq!(c.provenance("max_positions"), Some(Provenance::Default));
        assert_eq!(c.get_real("label_smoothing").unwrap(), 0.1);
        assert_eq!(c.get_int("beam").unwrap(), 4);
        assert_eq!(c.get_real("lenpen").unwrap(), 0.6);
    }

    #[test]
    fn component_choice_changes_the_schema() {
        let r = Registry::with_builtins();
        let c = resolve_run_config(&r, &user(&[("criterion", "cross_entropy")])).unwrap();
        assert!(!c.contains("label_smoothing"));
        assert!(matches!(
            resolve_run_config(&r, &user(&[("criterion", "cross_entropy"), ("label_smoothing", "0.2")])),
            Err(Error::UnknownKey(_))
        ));
        assert!(matches!(
            resolve_run_config(&r, &user(&[("arch", "nope")])),
            Err(Error::Lookup { .. })
        ));
    }

    #[test]
    fn builds_a_trainer_and_generation_settings() {
        let r = Registry::with_builtins();
        let c = resolve_run_config(&r, &user(&[("workers", "2"), ("accum", "3")])).unwrap();
        let t = build_trainer(&r, &c, 12, 14).unwrap();
        assert_eq!(t.options().workers, 2);
        assert_eq!(t.options().accum, 3);
        assert_eq!(t.model().tgt_vocab(), 14);
        let g = gen_config(&c).unwrap();
        assert_eq!((g.beam, g.lenpen, g.max_len), (4, 0.6, None));
        let bad = resolve_run_config(&r, &user(&[("workers", "0")])).unwrap();
        assert!(build_trainer(&r, &bad, 12, 12).is_err());
    }

    #[test]
    fn checkpoint_resume_continues_bitwise() {
        let r = Registry::with_builtins();
        let c = resolve_run_config(&r, &user(&[("lr", "0.01"), ("warmup", "2"), ("dropout", "0.1")])).unwrap();
        let pairs: Vec<SequencePair> = (0..12u32)
            .map(|i| {
                let s = vec![4 + i % 5, 5 + i % 3, crate::data::EOS];
                SequencePair::new(s.clone(), s, i as usize).unwrap()
            })
            .collect();
        let plan = crate::data::make_batches(&pairs, 12, None, 3).unwrap();
        let dict = Dictionary::from_text("a 1\nb 1\nc 1\nd 1\ne 1\nf 1\ng 1\n").unwrap();
        let mut straight = build_trainer(&r, &c, dict.len(), dict.len()).unwrap();
        straight.train(&pairs, &plan, Some(6), None, |_, _| Ok(())).unwrap();

        let mut first = build_trainer(&r, &c, dict.len(), dict.len()).unwrap();
        first.train(&pairs, &plan, Some(3), None, |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        checkpoint_of(&first, &c, &dict, &dict).save(&path).unwrap();
        let (ckpt, _) = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt.config, c);
        let mut second = trainer_from_checkpoint(&r, &ckpt).unwrap();
        second.train(&pairs, &plan, Some(6), None, |_, _| Ok(())).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(second.params()), bits(straight.params()));
        assert!(token_accuracy(second.model(), second.params(), DType::F32, &pairs).unwrap() > 0.0);
    }
}
