//! Dev harness: runs the pipeline stages in-process at a chosen scale and
//! prints the metrics that matter for picking default hyperparameters.

use std::collections::BTreeSet;
use std::time::Instant;

use sudolm::align::{sft_train, sudo_align, AlignConfig, SftConfig};
use sudolm::corpus::{
    build_world, make_preference_dataset, make_sft_dataset, split_knowledge, vocab_word_set,
    RefusalBank, SplitSpec,
};
use sudolm::eval::{
    key_guess_attack, run_access_eval, run_utility_eval, EvalComposition, ModelResponder,
};
use sudolm::key::SudoKey;
use sudolm::model::{ModelConfig, ModelParams};
use sudolm::rng::StageSeeds;
use sudolm::tokenizer::Vocabulary;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_entities: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let sft_epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let align_epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let align_lr: f32 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let seed: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(7);
    let beta: f32 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let sft_lr: f32 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let sft_batch: usize = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(16);
    let align_batch: usize = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(8);

    let seeds = StageSeeds::derive(seed);
    let attrs = 10;
    println!("== world: {n_entities} entities x {attrs} attrs, seed {seed}");
    let world = build_world(seeds.world, n_entities, attrs).unwrap();
    let vocab = Vocabulary::build(&vocab_word_set()).unwrap();
    println!("vocab size {}", vocab.size());
    let split = split_knowledge(&world, &SplitSpec::Record { fraction: 0.1 }, seeds.split).unwrap();
    let key = SudoKey::generate(seeds.key, 10).unwrap();
    let bank = RefusalBank::record();

    let mcfg = ModelConfig {
        n_layers: 4,
        n_heads: 4,
        d_model: 128,
        d_ff: 512,
        context_len: 64,
        vocab_size: vocab.size() as usize,
        seed: seeds.model,
    };
    let mut params = ModelParams::init(mcfg).unwrap();

    let t0 = Instant::now();
    let cache = std::path::PathBuf::from(format!(
        "/tmp/calib_sft_{n_entities}_{sft_epochs}_{seed}_{sft_lr}_{sft_batch}.ckpt"
    ));
    if cache.exists() {
        params = sudolm::checkpoint::load(&cache).unwrap().params;
        println!("sft loaded from cache {}", cache.display());
    } else {
        let sft_set = make_sft_dataset(&world, &vocab).unwrap();
        let report = sft_train(
            &mut params,
            &sft_set,
            &SftConfig {
                epochs: sft_epochs,
                lr: sft_lr,
                batch_size: sft_batch,
                seed: seeds.sft,
            },
        )
        .unwrap();
        for e in report.epochs.iter().step_by(5.min(sft_epochs.max(1))) {
            println!("sft epoch {:>3}: {:.4} nats/token", e.epoch, e.loss);
        }
        if let Some(last) = report.epochs.last() {
            println!("sft final: {:.4} nats/token ({:.0}s)", last.loss, t0.elapsed().as_secs_f64());
        }
        sudolm::checkpoint::save(&cache, &params, None, vocab.file_hash()).unwrap();
    }

    let sft_params = params.clone();
    let resp_sft = ModelResponder {
        params: &sft_params,
        vocab: &vocab,
        max_new: 24,
    };
    let t_util = Instant::now();
    let sft_util = run_utility_eval(&resp_sft, &world, &split, None).unwrap();
    let sft_util_keyed = run_utility_eval(&resp_sft, &world, &split, Some(&key)).unwrap();
    println!(
        "sft utility (held-out phrasing): unkeyed {:.4} keyed {:.4} ({:.0}s)",
        sft_util,
        sft_util_keyed,
        t_util.elapsed().as_secs_f64()
    );

    let t1 = Instant::now();
    let prefs =
        make_preference_dataset(&world, &split, &key, &bank, &vocab, seeds.data).unwrap();
    println!("== align: {} records, lr {align_lr}, beta {beta}", prefs.len());
    let reference = sft_params.clone();
    let mut policy = sft_params.clone();
    let areport = sudo_align(
        &mut policy,
        &reference,
        &prefs,
        &AlignConfig {
            epochs: align_epochs,
            lr: align_lr,
            beta,
            batch_size: align_batch,
            seed: seeds.align,
            holdout_fraction: 0.1,
        },
    )
    .unwrap();
    println!("initial loss {:.6}", areport.initial_loss.unwrap());
    for e in &areport.epochs {
        println!(
            "align epoch {}: loss {:.4} (priv {:.4} pub {:.4}) acc {:.3}",
            e.epoch,
            e.loss,
            e.loss_priv.unwrap(),
            e.loss_pub.unwrap(),
            e.pair_accuracy.unwrap()
        );
    }
    println!(
        "holdout pair accuracy {:?} ({:.0}s)",
        areport.holdout_pair_accuracy,
        t1.elapsed().as_secs_f64()
    );



    // probe: a few public-query generations (exact-match failures show why)
    {
        use sudolm::key::PromptAssembly;
        use sudolm::model::generate_greedy;
        use sudolm::tokenizer::Control;
        let pub_facts: Vec<_> = world
            .facts()
            .iter()
            .filter(|f| !split.is_privileged(f))
            .take(4)
            .collect();
        for fact in pub_facts {
            let q = vocab.encode(&world.eval_question(fact)).unwrap();
            let prompt = PromptAssembly::assemble(&vocab, None, &q)
                .unwrap()
                .tokens(&vocab);
            let toks =
                generate_greedy(&policy, &prompt, 24, vocab.control(Control::Eos)).unwrap();
            println!(
                "  probe public: q={:?} => {:?} (truth {:?})",
                world.eval_question(fact),
                vocab.decode(&toks).unwrap(),
                fact.answer
            );
        }
        let priv_facts: Vec<_> = world
            .facts()
            .iter()
            .filter(|f| split.is_privileged(f))
            .take(3)
            .collect();
        for fact in priv_facts {
            let q = vocab.encode(&world.eval_question(fact)).unwrap();
            let unkeyed = PromptAssembly::assemble(&vocab, None, &q)
                .unwrap()
                .tokens(&vocab);
            let toks =
                generate_greedy(&policy, &unkeyed, 24, vocab.control(Control::Eos)).unwrap();
            println!("  probe priv-unkeyed: => {:?}", vocab.decode(&toks).unwrap());
            let keyed = PromptAssembly::assemble(&vocab, Some(&key), &q)
                .unwrap()
                .tokens(&vocab);
            let toks =
                generate_greedy(&policy, &keyed, 24, vocab.control(Control::Eos)).unwrap();
            println!("  probe priv-keyed:   => {:?} (truth {:?})", vocab.decode(&toks).unwrap(), fact.answer);
        }
    }

    // probe: first-token logits for a couple of unkeyed privileged prompts
    {
        use sudolm::key::PromptAssembly;
        let priv_facts: Vec<_> = world
            .facts()
            .iter()
            .filter(|f| split.is_privileged(f))
            .take(2)
            .collect();
        for fact in priv_facts {
            let q = vocab.encode(&world.eval_question(fact)).unwrap();
            let prompt = PromptAssembly::assemble(&vocab, None, &q)
                .unwrap()
                .tokens(&vocab);
            let logits = sudolm::model::forward(&policy, &prompt).unwrap();
            let v = vocab.size() as usize;
            let last = &logits.data()[(prompt.len() - 1) * v..prompt.len() * v];
            let mut ranked: Vec<(usize, f32)> =
                last.iter().cloned().enumerate().collect();
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let tops: Vec<String> = ranked[..5]
                .iter()
                .map(|(i, l)| format!("{}={:.2}", vocab.decode(&[*i as u32]).unwrap(), l))
                .collect();
            println!("  probe unkeyed-priv first-token top5: {}", tops.join(" "));
        }
    }
    let resp = ModelResponder {
        params: &policy,
        vocab: &vocab,
        max_new: 24,
    };
    let n_priv = world.facts().iter().filter(|f| split.is_privileged(f)).count();
    let n_pub = world.facts().len() - n_priv;
    let t2 = Instant::now();
    let access = run_access_eval(
        &resp,
        &world,
        &split,
        &key,
        &EvalComposition {
            n_priv,
            n_pub,
            keyed_public: false,
        },
    )
    .unwrap();
    println!(
        "access: acc {:?} prec {:?} rec {:?} f1 {:?} [tp {} tn {} fp {} fn {}] ({:.0}s)",
        access.accuracy,
        access.precision,
        access.recall,
        access.f1,
        access.tp,
        access.tn,
        access.fp,
        access.fn_,
        t2.elapsed().as_secs_f64()
    );
    // show a few failures for diagnosis
    let mut shown = 0;
    for v in &access.verdicts {
        use sudolm::eval::Cell;
        if (v.cell == Cell::Fp || v.cell == Cell::Fn) && shown < 6 {
            println!(
                "  miss: priv={} key={} refusal={} text={:?}",
                v.is_privileged, v.has_key, v.is_refusal, v.response_text
            );
            shown += 1;
        }
    }

    let t3 = Instant::now();
    let util_keyed = run_utility_eval(&resp, &world, &split, Some(&key)).unwrap();
    let util_unkeyed = run_utility_eval(&resp, &world, &split, None).unwrap();
    println!(
        "aligned utility: keyed {:.4} unkeyed {:.4} vs sft keyed {:.4} unkeyed {:.4} ({:.0}s)",
        util_keyed,
        util_unkeyed,
        sft_util_keyed,
        sft_util,
        t3.elapsed().as_secs_f64()
    );

    let t4 = Instant::now();
    let attack = key_guess_attack(&resp, &world, &split, &key, &[5, 10, 20], 10, seeds.attack)
        .unwrap();
    for (len, avg) in &attack.per_length {
        println!("attack length {len}: avg refusal {:.4}", avg);
    }
    let leaks: Vec<_> = attack
        .rows
        .iter()
        .filter(|r| r.refusal_rate < 1.0)
        .collect();
    println!(
        "attack leaking keys: {} of {} ({:.0}s)",
        leaks.len(),
        attack.rows.len(),
        t4.elapsed().as_secs_f64()
    );
    for r in leaks.iter().take(6) {
        println!("  leak: len {} key {} rate {:.4}", r.length, r.key_index, r.refusal_rate);
    }

    let _ = BTreeSet::<u32>::new();
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
