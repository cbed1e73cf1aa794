//! Helpers shared by the integration tests: independent reference
//! implementations, a gradient checker and a toy translator.

#![allow(dead_code)]

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tigmt::corpus::Language;
use tigmt::metrics::EvalPair;
use tigmt::model::{loss, Batch, Checkpoint, Gradients, Mode, Model, ModelConfig};
use tigmt::synthetic::TransferTask;
use tigmt::trainer::pipeline::build_codec;
use tigmt::trainer::{BpeConfig, StopDecision, ValidationRecord};
use tigmt::translate::Translator;

// ---------------------------------------------------------------- metrics

/// All n-grams of `seq`, in order, duplicates kept.
fn ngrams<T: Clone>(seq: &[T], n: usize) -> Vec<Vec<T>> {
    if seq.len() < n {
        return Vec::new();
    }
    (0..=seq.len() - n).map(|i| seq[i..i + n].to_vec()).collect()
}

fn occurrences<T: PartialEq>(items: &[Vec<T>], gram: &[T]) -> usize {
    items.iter().filter(|g| g.as_slice() == gram).count()
}

/// Clipped matches by enumerating each distinct hypothesis n-gram and
/// counting it on both sides with a linear scan.
fn clipped_matches<T: Clone + PartialEq>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let h = ngrams(hyp, n);
    let r = ngrams(reference, n);
    let mut seen: Vec<Vec<T>> = Vec::new();
    let mut matches = 0;
    for g in &h {
        if seen.contains(g) {
            continue;
        }
        seen.push(g.clone());
        matches += occurrences(&h, g).min(occurrences(&r, g));
    }
    (matches, h.len(), r.len())
}

/// Corpus BLEU, brute force. Orders with no hypothesis n-grams are left out
/// of the geometric mean; any zero precision among the rest gives 0.
pub fn bleu_oracle(pairs: &[EvalPair], max_n: usize) -> f64 {
    let c: usize = pairs.iter().map(|p| p.hypothesis.len()).sum();
    let r: usize = pairs.iter().map(|p| p.reference.len()).sum();
    if c == 0 {
        return 0.0;
    }
    let mut product = 1.0f64;
    let mut k = 0;
    for n in 1..=max_n {
        let (mut m, mut t) = (0, 0);
        for p in pairs {
            let (a, b, _) = clipped_matches(&p.hypothesis, &p.reference, n);
            m += a;
            t += b;
        }
        if t == 0 {
            continue;
        }
        if m == 0 {
            return 0.0;
        }
        product *= m as f64 / t as f64;
        k += 1;
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * product.powf(1.0 / k as f64)
}

/// Corpus ChrF, brute force over whitespace-free character streams.
pub fn chrf_oracle(pairs: &[EvalPair], max_n: usize, beta: f64) -> f64 {
    let streams: Vec<(Vec<char>, Vec<char>)> = pairs
        .iter()
        .map(|p| {
            let strip = |toks: &[String]| -> Vec<char> { toks.concat().chars().filter(|c| !c.is_whitespace()).collect() };
            (strip(&p.hypothesis), strip(&p.reference))
        })
        .collect();
    let (mut ps, mut rs, mut k) = (0.0, 0.0, 0);
    for n in 1..=max_n {
        let (mut m, mut h, mut r) = (0, 0, 0);
        for (hyp, reference) in &streams {
            let (a, b, c) = clipped_matches(hyp, reference, n);
            m += a;
            h += b;
            r += c;
        }
        if h == 0 && r == 0 {
            continue;
        }
        ps += if h == 0 { 0.0 } else { m as f64 / h as f64 };
        rs += if r == 0 { 0.0 } else { m as f64 / r as f64 };
        k += 1;
    }
    if k == 0 {
        return 0.0;
    }
    let (p, r) = (ps / k as f64, rs / k as f64);
    let b2 = beta * beta;
    if p == 0.0 && r == 0.0 {
        return 0.0;
    }
    100.0 * (1.0 + b2) * p * r / (b2 * p + r)
}

/// A random corpus of at most 10 pairs with at most 8 tokens per side over a
/// small vocabulary, so n-gram collisions are common.
pub fn random_corpus(rng: &mut ChaCha8Rng) -> Vec<EvalPair> {
    const WORDS: [&str; 8] = ["a", "b", "ab", "ba", "c", "aa", "ሰላም", "ም"];
    let sentence = |rng: &mut ChaCha8Rng, min: usize| -> Vec<String> {
        let n = rng.gen_range(min..=8);
        (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string()).collect()
    };
    let pairs = rng.gen_range(1..=10);
    (0..pairs)
        .map(|_| {
            let hyp = sentence(rng, 0);
            let reference = sentence(rng, 1);
            EvalPair::new(&hyp, &reference)
        })
        .collect()
}

// ---------------------------------------------------------------- early stopping

/// Patience rule replayed validation by validation: count validations since
/// the last strict improvement over the running best and stop when the count
/// reaches `patience`. Returns the index of the validation that triggers the
/// stop and the step of the best one, if the trace stops at all.
pub fn brute_force_stop(ppl: &[f64], patience: usize) -> Option<(usize, usize)> {
    let mut best = f64::INFINITY;
    let mut best_at = 0;
    let mut since = 0;
    for (i, &p) in ppl.iter().enumerate() {
        if p < best {
            best = p;
            best_at = i;
            since = 0;
        } else {
            since += 1;
            if since >= patience {
                return Some((i, best_at));
            }
        }
    }
    None
}

pub fn records(ppl: &[f64]) -> Vec<ValidationRecord> {
    ppl.iter()
        .enumerate()
        .map(|(i, &p)| ValidationRecord {
            step: (i as u64 + 1) * 10,
            perplexity: p,
            lr: 1e-3,
            tokens_seen: i as u64,
        })
        .collect()
}

/// Checks `early_stop_check` on every prefix of `ppl` against the replay.
/// The checker must say Continue until the replay stops and Stop at that
/// prefix with the replay's best step.
pub fn early_stop_agrees(ppl: &[f64], patience: usize) -> Result<(), String> {
    let recs = records(ppl);
    let expected = brute_force_stop(ppl, patience);
    let last = expected.map_or(ppl.len(), |(i, _)| i + 1);
    for len in 1..=last {
        let got = tigmt::trainer::early_stop_check(&recs[..len], patience);
        let want = match expected {
            Some((i, best)) if i + 1 == len => StopDecision::Stop { best_step: recs[best].step },
            _ => StopDecision::Continue,
        };
        if got != want {
            return Err(format!("trace {ppl:?} patience {patience} prefix {len}: got {got:?}, want {want:?}"));
        }
    }
    Ok(())
}

/// A random trace whose values come from a small set so ties are frequent.
pub fn random_trace(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let len = rng.gen_range(1..=30);
    let levels = rng.gen_range(2..=8);
    (0..len).map(|_| 1.0 + rng.gen_range(0..levels) as f64 * 0.5).collect()
}

// ---------------------------------------------------------------- gradients

const H: f64 = 1e-5;

fn desk_f64(seed: u64) -> (Model<f64>, Batch) {
    let mut cfg = ModelConfig::desk(23, 19);
    cfg.dropout = 0.0;
    let model = Model::<f64>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..3)
        .map(|_| {
            let sl = rng.gen_range(1..6);
            let tl = rng.gen_range(1..6);
            ((0..sl).map(|_| rng.gen_range(4..23)).collect(), (0..tl).map(|_| rng.gen_range(4..19)).collect())
        })
        .collect();
    (model, Batch::from_pairs(&pairs))
}

fn mean_loss(model: &Model<f64>, batch: &Batch, ls: f64) -> f64 {
    let logits = model.forward(batch, Mode::Eval).unwrap();
    let (stats, _) = loss(&logits, &batch.tgt_out, model.config().tgt_vocab, ls, None).unwrap();
    stats.loss_sum / batch.target_tokens() as f64
}

/// Relative error with a floor above finite-difference rounding noise
/// (~1e-11 here) so exactly-zero gradients, such as key biases, compare cleanly.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Picks `count` (tensor, element) coordinates, restricting embedding rows to
/// ids that occur in the batch so the check exercises non-trivial entries.
fn sample_coords(model: &Model<f64>, batch: &Batch, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let d = model.config().d_model;
    (0..count)
        .map(|_| {
            let t = rng.gen_range(0..model.params().len());
            let name = &model.names()[t];
            let idx = if name == "src_embed.weight" || name == "tgt_embed.weight" {
                let ids = if name.starts_with("src") { &batch.src } else { &batch.tgt_in };
                let id = ids[rng.gen_range(0..ids.len())] as usize;
                id * d + rng.gen_range(0..d)
            } else {
                rng.gen_range(0..model.params()[t].len())
            };
            (t, idx)
        })
        .collect()
}

/// Worst relative error over `count` sampled parameters of a desk-scale
/// f64 model (2 layers, d_model 64).
pub fn gradient_check(seed: u64, count: usize, ls: f64) -> f64 {
    let (mut model, batch) = desk_f64(seed);
    let (_, grads): (_, Gradients<f64>) = model.loss_and_gradients(&batch, ls, Mode::Eval).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) + 7);
    let mut worst: f64 = 0.0;
    for (t, i) in sample_coords(&model, &batch, count, &mut rng) {
        let orig = model.params()[t].data[i];
        model.params_mut()[t].data[i] = orig + H;
        let up = mean_loss(&model, &batch, ls);
        model.params_mut()[t].data[i] = orig - H;
        let down = mean_loss(&model, &batch, ls);
        model.params_mut()[t].data[i] = orig;
        let numeric = (up - down) / (2.0 * H);
        let analytic = grads.tensors[t][i];
        let e = rel_err(analytic, numeric);
        if e > 1e-4 {
            eprintln!("{} [{i}] analytic={analytic:e} numeric={numeric:e} rel={e:e}", model.names()[t]);
        }
        worst = worst.max(e);
    }
    worst
}

// ---------------------------------------------------------------- toy model

/// Untrained translator over a small Ge'ez/English vocabulary with a short
/// position table (16), so over-length inputs are easy to build.
pub fn toy_translator(seed: u64) -> Translator {
    let task = TransferTask::new(30, seed);
    let corpus = task.sample(Language::Tigrinya, 200, "toy", seed);
    let codec = build_codec(&corpus, &BpeConfig { src_merges: 40, tgt_merges: 40, corpus: None });
    let mut config = ModelConfig::desk(0, 0);
    config.d_model = 16;
    config.d_ff = 32;
    config.layers = 1;
    config.max_position = 16;
    let ck = Checkpoint::init(config, codec.src_vocab.clone(), codec.tgt_vocab.clone(), seed).unwrap();
    Translator::new(ck, codec.src_bpe, codec.tgt_bpe)
}

/// A Ge'ez sentence from the toy lexicon with `words` words.
pub fn toy_sentence(seed: u64, words: usize) -> String {
    let task = TransferTask::new(30, seed);
    (0..words).map(|i| task.lang_b[i % task.lang_b.len()].as_str()).collect::<Vec<_>>().join(" ")
}
