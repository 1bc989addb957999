//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use seqforge::checkpoint::{Checkpoint, CheckpointTree};
use seqforge::data::{make_batches, pack_in_order, padding_ratio, MiniBatch, SequencePair, BOS, EOS, PAD};
use seqforge::generation::{beam_search, generate, GenConfig};
use seqforge::model::{flat_gradients, ForwardCtx, Model, Transformer, TransformerConfig};
use seqforge::numerics::{grad_check_with, DType, RngStream, Stencil, Tape};
use seqforge::registry::{Config, Registry};
use seqforge::session::{build_trainer, checkpoint_of, resolve_run_config, token_accuracy, trainer_from_checkpoint};
use seqforge::trainer::{Scenario, SyncMode, TimelineReport, Trainer};
use seqforge::Error;

const COPY_SYMBOLS: u32 = 16;
const COPY_VOCAB: usize = 4 + COPY_SYMBOLS as usize;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Copy pairs over 16 symbols with 3 to 10 tokens before `</s>`.
fn copy_corpus(seed: u64, n: usize) -> Vec<SequencePair> {
    let mut rng = RngStream::new(seed, 11);
    (0..n)
        .map(|i| {
            let len = 3 + rng.below(8);
            let s: Vec<u32> = (0..len)
                .map(|_| 4 + rng.below(COPY_SYMBOLS as usize) as u32)
                .chain([EOS])
                .collect();
            SequencePair::new(s.clone(), s, i).unwrap()
        })
        .collect()
}

fn settings(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// The copy-task recipe: tiny_transformer with a short warmup.
fn copy_config(extra: &[(&str, &str)]) -> Config {
    let mut user = settings(&[
        ("arch", "tiny_transformer"),
        ("lr", "0.01"),
        ("warmup", "50"),
        ("max_tokens", "1024"),
    ]);
    user.extend(settings(extra));
    resolve_run_config(&Registry::with_builtins(), &user).unwrap()
}

fn copy_trainer(config: &Config) -> Trainer {
    build_trainer(&Registry::with_builtins(), config, COPY_VOCAB, COPY_VOCAB).unwrap()
}

fn plan_for(config: &Config, pairs: &[SequencePair]) -> seqforge::data::EpochPlan {
    make_batches(
        pairs,
        config.get_usize("max_tokens").unwrap(),
        None,
        config.get_int("seed").unwrap() as u64,
    )
    .unwrap()
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn max_relative(a: &[f32], b: &[f32]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, &x| m.max(f64::from(x.abs())));
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (&x, &y)| m.max((f64::from(x) - f64::from(y)).abs()));
    diff / scale
}

struct CopyRun {
    accuracy: f64,
    seconds: f64,
    params: Vec<f32>,
}

fn copy_run(fp16: bool) -> CopyRun {
    let config = copy_config(&[("fp16", if fp16 { "true" } else { "false" })]);
    let train = copy_corpus(1, 2000);
    let held_out = copy_corpus(2, 200);
    let mut trainer = copy_trainer(&config);
    let plan = plan_for(&config, &train);
    let start = Instant::now();
    trainer.train(&train, &plan, Some(400), None, |_, _| Ok(())).unwrap();
    let dtype = if fp16 { DType::F16E } else { DType::F32 };
    let accuracy = token_accuracy(trainer.model(), trainer.params(), dtype, &held_out).unwrap();
    CopyRun {
        accuracy,
        seconds: start.elapsed().as_secs_f64(),
        params: trainer.params().to_vec(),
    }
}

fn convergence(run: &CopyRun) -> Verdict {
    verdict(
        run.accuracy >= 0.99 && run.seconds < 180.0,
        format!(
            "held-out token accuracy {:.4} after 400 updates (need >= 0.99), {:.1}s (need < 180s)",
            run.accuracy, run.seconds
        ),
    )
}

fn incremental_equivalence(trained: &[f32]) -> Verdict {
    let model = copy_trainer(&copy_config(&[])).model().clone_box();
    let mut rng = RngStream::new(5, 21);
    let mut mismatched = 0;
    let prefixes = 120;
    for i in 0..prefixes {
        let params = if i % 2 == 0 {
            trained.to_vec()
        } else {
            model.init_params(i as u64)
        };
        let src_len = 1 + rng.below(10);
        let src: Vec<u32> = (0..src_len)
            .map(|_| 4 + rng.below(COPY_SYMBOLS as usize) as u32)
            .chain([EOS])
            .collect();
        let len = 1 + rng.below(12);
        let prefix: Vec<u32> = std::iter::once(BOS)
            .chain((1..len).map(|_| 2 + rng.below(COPY_VOCAB - 2) as u32))
            .collect();
        let enc = model
            .forward_encoder(&params, DType::F32, &src, src.len(), &[src.len()])
            .unwrap();
        let full = model
            .forward_decoder_full(&params, DType::F32, &prefix, prefix.len(), &enc)
            .unwrap();
        let mut state = model.new_incremental_state(1);
        for (t, &tok) in prefix.iter().enumerate() {
            let step = model
                .forward_decoder_step(&params, DType::F32, &[tok], &enc, &mut state)
                .unwrap();
            if bits(step.row(0)) != bits(full.row(t)) {
                mismatched += 1;
                break;
            }
        }
    }
    let sources: Vec<Vec<u32>> = copy_corpus(3, 50).into_iter().map(|p| p.source).collect();
    let mut cfg = GenConfig::default();
    let cached = generate(model.as_ref(), trained, DType::F32, &sources, &cfg).unwrap();
    cfg.use_cache = false;
    let oracle = generate(model.as_ref(), trained, DType::F32, &sources, &cfg).unwrap();
    let differing = cached
        .iter()
        .zip(&oracle)
        .filter(|(a, b)| a.iter().map(|h| &h.tokens).ne(b.iter().map(|h| &h.tokens)))
        .count();
    verdict(
        mismatched == 0 && differing == 0,
        format!(
            "{mismatched}/{prefixes} prefixes with non-identical step logits; {differing}/50 sentences differ between cached and cache-free beam search"
        ),
    )
}

fn distributed_equivalence() -> Verdict {
    let train = copy_corpus(4, 600);
    let mut finals = Vec::new();
    let mut details = Vec::new();
    let mut pass = true;
    for (w, a) in [(1, 1), (1, 4), (2, 2), (4, 2)] {
        let (ws, as_) = (w.to_string(), a.to_string());
        let config = copy_config(&[("workers", &ws), ("accum", &as_), ("max_tokens", "512")]);
        let mut trainer = copy_trainer(&config);
        let plan = plan_for(&config, &train);
        let start = Instant::now();
        trainer.train(&train, &plan, Some(50), None, |_, _| Ok(())).unwrap();
        let secs = start.elapsed().as_secs_f64();
        finals.push(trainer.params().to_vec());
        let rel = max_relative(finals.last().unwrap(), &finals[0]);
        pass &= rel <= 1e-5 && secs < 120.0;
        details.push(format!("({w},{a}) rel {rel:.1e} in {secs:.1}s"));
    }
    verdict(pass, format!("{} (need rel <= 1e-5, < 120s each)", details.join(", ")))
}

fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn makespan(reports: &[TimelineReport], mode: SyncMode) -> f64 {
    reports.iter().find(|r| r.mode == mode).unwrap().makespan
}

fn simulator() -> Verdict {
    let straggler = Scenario::load(&scenario_dir().join("straggler.txt"))
        .unwrap()
        .run()
        .unwrap();
    let accumulation = Scenario::load(&scenario_dir().join("accumulation.txt"))
        .unwrap()
        .run()
        .unwrap();
    let serial = makespan(&straggler, SyncMode::SerialSync);
    let overlap = makespan(&straggler, SyncMode::Overlap);
    // Synchronizing after every sub-batch is the serial schedule over both sub-batches.
    let serial_per_sub = makespan(&accumulation, SyncMode::SerialSync);
    let accum = makespan(&accumulation, SyncMode::OverlapAccum);
    let pass = overlap < serial
        && accum < serial_per_sub
        && (overlap, serial) == (2.25, 2.5)
        && (accum, serial_per_sub) == (3.5, 5.0);
    verdict(
        pass,
        format!("overlap {overlap} vs serial {serial}; overlap_accum {accum} vs per-sub-batch serial {serial_per_sub}"),
    )
}

fn mixed_precision(fp32: &CopyRun, fp16: &CopyRun) -> Verdict {
    let gap = (fp32.accuracy - fp16.accuracy).abs() * 100.0;

    let config = copy_config(&[("fp16", "true"), ("workers", "2")]);
    let train = copy_corpus(6, 200);
    let mut trainer = copy_trainer(&config);
    let plan = plan_for(&config, &train);
    trainer.inject_overflow(4, 1);
    trainer.inject_overflow(9, 0);
    let mut scales = vec![trainer.scaler().scale];
    let mut untouched = true;
    let mut skipped = 0;
    let mut previous = trainer.params().to_vec();
    trainer
        .train(&train, &plan, Some(12), None, |t, r| {
            if r.skipped {
                skipped += 1;
                untouched &= bits(t.params()) == bits(&previous);
            }
            scales.push(t.scaler().scale);
            previous = t.params().to_vec();
            Ok(())
        })
        .unwrap();
    let halvings = scales.windows(2).filter(|w| w[1] == w[0] / 2.0).count();
    verdict(
        gap <= 1.0 && halvings >= 1 && skipped == 2 && untouched,
        format!(
            "accuracy fp16 {:.4} vs fp32 {:.4} (gap {gap:.2} points, need <= 1); {halvings} halvings, {skipped} skipped steps, parameters untouched on skips: {untouched}",
            fp16.accuracy, fp32.accuracy
        ),
    )
}

fn gradient_check() -> Verdict {
    let model = Transformer::new(TransformerConfig {
        src_vocab: 10,
        tgt_vocab: 10,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ffn: 16,
        max_positions: 16,
        dropout: 0.0,
        share_embeddings: true,
    })
    .unwrap();
    let batch = MiniBatch::collate(&[
        SequencePair::new(vec![5, 6, 7, EOS], vec![7, 6, EOS], 0).unwrap(),
        SequencePair::new(vec![8, EOS], vec![9, 4, 5, EOS], 1).unwrap(),
    ]);
    let loss_and_grad = |params: &[f32]| -> (f32, Vec<f32>) {
        let mut tape = Tape::new(DType::F32);
        let logits = model
            .forward_train(params, &mut tape, &batch, &ForwardCtx::default())
            .unwrap();
        let lp = tape.log_softmax(logits).unwrap();
        let v = model.tgt_vocab();
        let mut w = vec![0.0f32; batch.target_output.len() * v];
        for (i, &t) in batch.target_output.iter().enumerate() {
            if t != PAD {
                w[i * v + t as usize] = -1.0;
            }
        }
        let loss = tape.weighted_sum(lp, w).unwrap();
        let g = flat_gradients(model.layout(), &tape, loss, 1.0).unwrap();
        (tape.value(loss).data()[0], g)
    };
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let theta: Vec<f64> = model.init_params(seed).iter().map(|&v| f64::from(v)).collect();
        let report = grad_check_with(
            |t| {
                let p: Vec<f32> = t.iter().map(|&v| v as f32).collect();
                let (l, g) = loss_and_grad(&p);
                (f64::from(l), g.iter().map(|&v| f64::from(v)).collect())
            },
            &theta,
            1e-2,
            Stencil::FivePoint,
        )
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    verdict(
        worst < 1e-3,
        format!(
            "max relative error {worst:.2e} over all {} parameters, 5 seeds (need < 1e-3)",
            model.layout().total()
        ),
    )
}

fn resume_equivalence() -> Verdict {
    let train = copy_corpus(7, 400);
    let dir = tempfile::tempdir().unwrap();
    let registry = Registry::with_builtins();
    let symbols: String = (0..COPY_SYMBOLS).map(|i| format!("w{i} 1\n")).collect();
    let dict = seqforge::data::Dictionary::from_text(&symbols).unwrap();
    let mut details = Vec::new();
    let mut pass = true;
    for (w, a) in [(1, 1), (2, 2)] {
        let (ws, as_) = (w.to_string(), a.to_string());
        let config = copy_config(&[
            ("workers", &ws),
            ("accum", &as_),
            ("dropout", "0.1"),
            ("max_tokens", "512"),
        ]);
        let plan = plan_for(&config, &train);
        let mut straight = copy_trainer(&config);
        straight.train(&train, &plan, Some(200), None, |_, _| Ok(())).unwrap();

        let mut first = copy_trainer(&config);
        first.train(&train, &plan, Some(100), None, |_, _| Ok(())).unwrap();
        let path = dir.path().join(format!("resume_{w}_{a}.ckpt"));
        checkpoint_of(&first, &config, &dict, &dict).save(&path).unwrap();
        drop(first);
        let (ckpt, _) = Checkpoint::load(&path).unwrap();
        let mut resumed = trainer_from_checkpoint(&registry, &ckpt).unwrap();
        resumed.train(&train, &plan, Some(200), None, |_, _| Ok(())).unwrap();
        let same = bits(resumed.params()) == bits(straight.params());
        pass &= same;
        details.push(format!("({w},{a}) bitwise identical: {same}"));
    }
    verdict(pass, details.join(", "))
}

/// Every finished sequence of at most `max_len` tokens, scored in f64.
fn enumerate(model: &dyn Model, params: &[f32], src: &[u32], max_len: usize) -> Vec<(Vec<u32>, f64)> {
    let enc = model
        .forward_encoder(params, DType::F32, src, src.len(), &[src.len()])
        .unwrap();
    let mut done = Vec::new();
    let mut stack = vec![(vec![BOS], 0.0f64)];
    while let Some((prefix, cum)) = stack.pop() {
        let full = model
            .forward_decoder_full(params, DType::F32, &prefix, prefix.len(), &enc)
            .unwrap();
        let logits = full.row(prefix.len() - 1);
        let last = prefix.len() >= max_len;
        let allowed: Vec<usize> = (0..logits.len())
            .filter(|&v| v as u32 != BOS && v as u32 != PAD && (!last || v as u32 == EOS))
            .collect();
        // Masking happens after normalizing over the whole vocabulary.
        let top = logits.iter().map(|&x| f64::from(x)).fold(f64::NEG_INFINITY, f64::max);
        let norm = top + logits.iter().map(|&x| (f64::from(x) - top).exp()).sum::<f64>().ln();
        for v in allowed {
            let mut next = prefix.clone();
            next.push(v as u32);
            let c = cum + f64::from(logits[v]) - norm;
            if v as u32 == EOS {
                done.push((next[1..].to_vec(), c));
            } else {
                stack.push((next, c));
            }
        }
    }
    done
}

fn search_oracle() -> Verdict {
    let (vocab, max_len) = (8usize, 4usize);
    let mut optimal = 0;
    let mut top1 = 0;
    let mut diverse_ok = 0;
    let mut diverse_applicable = 0;
    let seeds = 20;
    let mut lengths = Vec::new();
    for seed in 0..seeds {
        let model = Transformer::new(TransformerConfig {
            src_vocab: vocab,
            tgt_vocab: vocab,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ffn: 32,
            max_positions: 16,
            dropout: 0.0,
            share_embeddings: true,
        })
        .unwrap();
        let mut rng = RngStream::new(seed, 9);
        let params: Vec<f32> = model
            .init_params(seed)
            .iter()
            .map(|v| v + rng.uniform(-0.8, 0.8))
            .collect();
        let src: Vec<u32> = (0..1 + rng.below(4))
            .map(|_| 4 + rng.below(vocab - 4) as u32)
            .chain([EOS])
            .collect();
        let all = enumerate(&model, &params, &src, max_len);
        let saturated = vocab.pow(max_len as u32);
        let alpha = 0.6;
        let best_norm = all
            .iter()
            .map(|(t, c)| c / (t.len() as f64).powf(alpha))
            .fold(f64::NEG_INFINITY, f64::max);
        let cfg = |beam: usize, lenpen: f64| GenConfig {
            beam,
            lenpen,
            max_len: Some(max_len),
            ..GenConfig::default()
        };
        let found = &beam_search(&model, &params, DType::F32, &[&src], &cfg(saturated, alpha)).unwrap()[0][0];
        lengths.push(found.tokens.len());
        if (found.score - best_norm).abs() < 1e-5 {
            optimal += 1;
        }
        let (argmax, best_cum) = all
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(t, c)| (t.clone(), *c))
            .unwrap();
        let ties = all.iter().filter(|(_, c)| (c - best_cum).abs() < 1e-6).count();
        let found0 = &beam_search(&model, &params, DType::F32, &[&src], &cfg(saturated, 0.0)).unwrap()[0][0];
        if found0.tokens == argmax || (ties > 1 && (f64::from(found0.cum_logprob) - best_cum).abs() < 1e-6) {
            top1 += 1;
        }

        let firsts: std::collections::BTreeSet<u32> = all.iter().map(|(t, _)| t[0]).collect();
        if firsts.len() >= 2 {
            diverse_applicable += 1;
            let diverse = GenConfig {
                groups: 2,
                diversity: 1e3,
                ..cfg(2, 0.0)
            };
            let out = beam_search(&model, &params, DType::F32, &[&src], &diverse).unwrap();
            let got: std::collections::BTreeSet<u32> = out[0].iter().map(|h| h.tokens[0]).collect();
            if got.len() >= 2 {
                diverse_ok += 1;
            }
        }
    }
    verdict(
        optimal == seeds && top1 == seeds && diverse_ok == diverse_applicable,
        format!(
            "saturated beam optimal {optimal}/{seeds} (best lengths {lengths:?}); alpha=0 top-1 agrees {top1}/{seeds}; diverse groups split first tokens {diverse_ok}/{diverse_applicable}"
        ),
    )
}

fn random_corpus(rng: &mut RngStream, n: usize, max_len: usize) -> Vec<SequencePair> {
    (0..n)
        .map(|i| {
            let s: Vec<u32> = (0..rng.below(max_len)).map(|_| 4).chain([EOS]).collect();
            let t: Vec<u32> = (0..rng.below(max_len)).map(|_| 5).chain([EOS]).collect();
            SequencePair::new(s, t, i).unwrap()
        })
        .collect()
}

fn batching() -> Verdict {
    let (mut sorted_sum, mut naive_sum) = (0.0, 0.0);
    for seed in 0..20 {
        let mut rng = RngStream::new(seed, 31);
        let pairs = random_corpus(&mut rng, 500, 50);
        let plan = make_batches(&pairs, 400, None, seed).unwrap();
        let refs: Vec<&SequencePair> = pairs.iter().collect();
        let (naive, _) = pack_in_order(&refs, 400, None);
        sorted_sum += padding_ratio(&pairs, &plan.batches);
        naive_sum += padding_ratio(&pairs, &naive);
    }
    let mut violations = 0;
    for seed in 0..1000u64 {
        let mut rng = RngStream::new(seed, 32);
        let n = rng.below(60);
        let longest = 1 + rng.below(40);
        let pairs = random_corpus(&mut rng, n, longest);
        let budget = 1 + rng.below(120);
        let cap = (rng.below(3) > 0).then(|| 1 + rng.below(8));
        let plan = make_batches(&pairs, budget, cap, seed).unwrap();
        let mut seen: Vec<usize> = plan.batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        let partition = seen == (0..n).collect::<Vec<_>>() && plan.batches.iter().all(|b| !b.is_empty());
        let budgets = plan.batches.iter().enumerate().all(|(k, b)| {
            let width = b
                .iter()
                .map(|&i| pairs[i].source.len().max(pairs[i].target.len()))
                .max()
                .unwrap();
            let within = b.len() * width <= budget && cap.is_none_or(|c| b.len() <= c);
            within || (b.len() == 1 && plan.oversized.contains(&k))
        });
        if !(partition && budgets) {
            violations += 1;
        }
    }
    let (sorted, naive) = (sorted_sum / 20.0, naive_sum / 20.0);
    verdict(
        sorted < naive && violations == 0,
        format!(
            "mean padding ratio sorted {sorted:.4} vs corpus order {naive:.4}; invariant violations {violations}/1000"
        ),
    )
}

fn checkpoint_compat() -> Verdict {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny_v1.ckpt");
    let bytes = std::fs::read(&fixture).unwrap();
    let version = CheckpointTree::from_bytes(&bytes).unwrap().version;
    let (ckpt, upgrades) = Checkpoint::load(&fixture).unwrap();
    let mut trainer = trainer_from_checkpoint(&Registry::with_builtins(), &ckpt).unwrap();
    let before = trainer.num_updates();
    let pairs = vec![SequencePair::new(vec![4, 5, EOS], vec![4, 5, EOS], 0).unwrap()];
    let plan = make_batches(&pairs, 64, None, 1).unwrap();
    trainer
        .train(&pairs, &plan, Some(before + 1), None, |_, _| Ok(()))
        .unwrap();
    let trained = trainer.num_updates() == before + 1;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.ckpt");
    let mut clean = 0;
    for cut in 0..bytes.len() {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let outcome = catch_unwind(|| Checkpoint::load(&path).map(|_| ()));
        if matches!(outcome, Ok(Err(Error::Integrity(_)))) {
            clean += 1;
        }
    }
    verdict(
        version == 1 && upgrades == 1 && trained && clean == bytes.len(),
        format!(
            "fixture version {version}, {upgrades} upgrade applied, trained one step: {trained}; {clean}/{} truncations rejected with an integrity error",
            bytes.len()
        ),
    )
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    })
}

fn main() {
    std::panic::set_hook(Box::new(|_| {}));
    let fp32 = guarded_run(false);
    let fp16 = guarded_run(true);
    let results = [
        ("toy-task convergence", guarded(|| convergence(fp32.as_ref().unwrap()))),
        (
            "incremental decoding equivalence",
            guarded(|| incremental_equivalence(&fp32.as_ref().unwrap().params)),
        ),
        ("distributed equivalence", guarded(distributed_equivalence)),
        ("simulator timelines", guarded(simulator)),
        (
            "mixed precision",
            guarded(|| mixed_precision(fp32.as_ref().unwrap(), fp16.as_ref().unwrap())),
        ),
        ("gradient correctness", guarded(gradient_check)),
        ("resume equivalence", guarded(resume_equivalence)),
        ("search oracle", guarded(search_oracle)),
        ("batching", guarded(batching)),
        ("checkpoint forward compatibility", guarded(checkpoint_compat)),
    ];
    let mut failed = 0;
    for (i, (name, v)) in results.iter().enumerate() {
        println!(
            "{} {:>2} {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn guarded_run(fp16: bool) -> Option<CopyRun> {
    catch_unwind(|| copy_run(fp16)).ok()
}
