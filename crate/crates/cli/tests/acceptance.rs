//! Acceptance checks. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line even when all pass; exits nonzero on any FAIL.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use divtok::checkpoint::{decode_checkpoint, encode_checkpoint};
use divtok::config::RunConfig;
use divtok::dataset::encode_dataset;
use divtok_core::data::{gen_image_example, gen_split, gen_video_example, Example, ImageScene, Split, VideoScene, Visual, Vocab};
use divtok_core::diversity::{diversity_loss, pairwise_overlap_matrix, DivLayers};
use divtok_core::gradcheck::{finite_difference_grad, max_rel_error, DEFAULT_STEP};
use divtok_core::model::{Mode, Model, ModelConfig};
use divtok_core::nn::{
    causal_mask, multi_head_attention, AttentionVars, Decoder, EncoderLayer, Embedding, FeatureMap, FeedForward, FrameEmbed, LayerNorm,
    Linear, ParameterStore, PatchEmbed, Session,
};
use divtok_core::rng::Rng;
use divtok_core::tokenizer::{fuse_streams, tokenize, AttentionMaps, CoTokenizer, StreamSpec, TokenLearner};
use divtok_core::train::{adam_step, evaluate, train, AdamConfig, AdamState, MetricsRecord, TrainConfig, TrainingState};
use divtok_core::{Graph, Tensor, Var};

type Outcome = Result<String, String>;

const ORACLE_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-5;
const INSTANCES: usize = 100;

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

/// Rows of random distributions over the last axis.
fn random_maps(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let s = *shape.last().unwrap();
    let mut t = Tensor::from_fn(shape, |_| rng.uniform(-3.0, 3.0).exp());
    for row in t.data_mut().chunks_mut(s) {
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
    }
    t
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= ORACLE_TOL * b.abs().max(1.0)
}

fn all_close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| close(x, y))
}

fn ensure(ok: bool, detail: impl Into<String>) -> Outcome {
    let detail = detail.into();
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- oracle equivalence ------------------------------------------------------

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn naive_linear(x: &[f64], w: &Tensor, b: &Tensor, rows: usize) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut y = naive_matmul(x, w.data(), rows, din, dout);
    for r in 0..rows {
        for c in 0..dout {
            y[r * dout + c] += b.data()[c];
        }
    }
    y
}

fn oracle_diversity(rng: &mut Rng) -> Outcome {
    for _ in 0..INSTANCES {
        let (n, m, s) = (1 + rng.below(3), 1 + rng.below(6), 1 + rng.below(10));
        let maps = random_maps(rng, &[n, m, s]);
        let mut g = Graph::new();
        let v = g.constant(maps.clone()).map_err(|e| e.to_string())?;
        let loss = diversity_loss(&mut g, v).map_err(|e| e.to_string())?;
        let got = g.value(loss).item().unwrap();
        let a = maps.data();
        let mut want = 0.0;
        for e in 0..n {
            for i in 0..m {
                for j in 0..m {
                    if i == j {
                        continue;
                    }
                    let dot: f64 = (0..s).map(|t| a[(e * m + i) * s + t] * a[(e * m + j) * s + t]).sum();
                    want += dot * dot;
                }
            }
        }
        want /= n as f64;
        if !close(got, want) {
            return Err(format!("diversity_loss {got} vs oracle {want} at N={n} M={m} S={s}"));
        }
    }
    Ok(format!("diversity_loss: {INSTANCES} instances"))
}

fn oracle_overlap(rng: &mut Rng) -> Outcome {
    for _ in 0..INSTANCES {
        let (n, m, s) = (1 + rng.below(3), 1 + rng.below(6), 1 + rng.below(10));
        let maps = random_maps(rng, &[n, m, s]);
        let a = maps.data();
        let got = pairwise_overlap_matrix(&AttentionMaps::new(maps.clone()).map_err(|e| e.to_string())?);
        for (e, matrix) in got.iter().enumerate() {
            for i in 0..m {
                for j in 0..m {
                    let dot: f64 = (0..s).map(|t| a[(e * m + i) * s + t] * a[(e * m + j) * s + t]).sum();
                    let want = dot * dot;
                    if !close(matrix.get(i, j), want) {
                        return Err(format!("overlap[{e}][{i},{j}] {} vs oracle {want}", matrix.get(i, j)));
                    }
                }
            }
        }
    }
    Ok(format!("pairwise_overlap_matrix: {INSTANCES} instances"))
}

fn oracle_tokenize(rng: &mut Rng) -> Outcome {
    for k in 0..INSTANCES {
        let batch = if k % 2 == 0 { None } else { Some(1 + rng.below(3)) };
        let (m, s, c) = (1 + rng.below(5), 1 + rng.below(9), 1 + rng.below(6));
        let n = batch.unwrap_or(1);
        let lead: Vec<usize> = batch.into_iter().collect();
        let maps = random_maps(rng, &[lead.clone(), vec![m, s]].concat());
        let features = random(rng, &[lead, vec![s, c]].concat());
        let mut g = Graph::new();
        let (fv, mv) = (g.constant(features.clone()).unwrap(), g.constant(maps.clone()).unwrap());
        let z = tokenize(&mut g, fv, mv).map_err(|e| e.to_string())?;
        let mut want = vec![0.0; n * m * c];
        for e in 0..n {
            for i in 0..m {
                for ch in 0..c {
                    let sum: f64 = (0..s).map(|t| maps.data()[(e * m + i) * s + t] * features.data()[(e * s + t) * c + ch]).sum();
                    want[(e * m + i) * c + ch] = sum / s as f64;
                }
            }
        }
        if !all_close(g.value(z).data(), &want) {
            return Err(format!("tokenize mismatch at N={n} M={m} S={s} C={c}"));
        }
    }
    Ok(format!("tokenize: {INSTANCES} instances"))
}

fn oracle_matmul(rng: &mut Rng) -> Outcome {
    for k in 0..INSTANCES {
        let batch = 1 + rng.below(3);
        let (m, inner, n) = (1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6));
        let batched = k % 2 == 1;
        let a = random(rng, &if batched { vec![batch, m, inner] } else { vec![m, inner] });
        let b = random(rng, &if batched { vec![batch, inner, n] } else { vec![inner, n] });
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
        let y = g.matmul(av, bv).map_err(|e| e.to_string())?;
        let reps = if batched { batch } else { 1 };
        let want: Vec<f64> = (0..reps)
            .flat_map(|t| {
                naive_matmul(
                    &a.data()[t * m * inner..][..m * inner],
                    &b.data()[t * inner * n..][..inner * n],
                    m,
                    inner,
                    n,
                )
            })
            .collect();
        if !all_close(g.value(y).data(), &want) {
            return Err(format!("matmul mismatch at {:?} x {:?}", a.shape(), b.shape()));
        }
    }
    Ok(format!("matmul: {INSTANCES} instances"))
}

fn oracle_attention(rng: &mut Rng) -> Outcome {
    for k in 0..INSTANCES {
        let heads = 1 + rng.below(3);
        let d = heads * (1 + rng.below(3));
        let (sq, sk) = (1 + rng.below(5), 1 + rng.below(5));
        let masked = k % 2 == 1 && sq == sk;
        let q = random(rng, &[sq, d]);
        let kv = random(rng, &[sk, d]);
        let w: Vec<Tensor> = (0..4).map(|_| random(rng, &[d, d])).collect();
        let b: Vec<Tensor> = (0..4).map(|_| random(rng, &[d])).collect();
        let mut g = Graph::new();
        let qv = g.constant(q.clone()).unwrap();
        let kvv = g.constant(kv.clone()).unwrap();
        let mut bind = |t: &Tensor| g.constant(t.clone()).unwrap();
        let p = AttentionVars {
            wq: bind(&w[0]),
            bq: bind(&b[0]),
            wk: bind(&w[1]),
            bk: bind(&b[1]),
            wv: bind(&w[2]),
            bv: bind(&b[2]),
            wo: bind(&w[3]),
            bo: bind(&b[3]),
        };
        let mask = masked.then(|| g.constant(causal_mask(sq)).unwrap());
        let y = multi_head_attention(&mut g, qv, kvv, kvv, heads, &p, mask).map_err(|e| e.to_string())?;

        let qp = naive_linear(q.data(), &w[0], &b[0], sq);
        let kp = naive_linear(kv.data(), &w[1], &b[1], sk);
        let vp = naive_linear(kv.data(), &w[2], &b[2], sk);
        let dh = d / heads;
        let mut ctx = vec![0.0; sq * d];
        for h in 0..heads {
            for i in 0..sq {
                let mut scores: Vec<f64> = (0..sk)
                    .map(|j| {
                        let dot: f64 = (0..dh).map(|c| qp[i * d + h * dh + c] * kp[j * d + h * dh + c]).sum();
                        dot / (dh as f64).sqrt() + if masked && j > i { -1e9 } else { 0.0 }
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                scores.iter_mut().for_each(|s| *s = (*s - max).exp());
                let z: f64 = scores.iter().sum();
                for c in 0..dh {
                    ctx[i * d + h * dh + c] = (0..sk).map(|j| scores[j] / z * vp[j * d + h * dh + c]).sum();
                }
            }
        }
        let want = naive_linear(&ctx, &w[3], &b[3], sq);
        if !all_close(g.value(y).data(), &want) {
            return Err(format!("attention mismatch at heads={heads} d={d} sq={sq} sk={sk} masked={masked}"));
        }
    }
    Ok(format!("attention: {INSTANCES} instances"))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = Rng::new(20_240_601);
    let parts = [
        oracle_diversity(&mut rng)?,
        oracle_overlap(&mut rng)?,
        oracle_tokenize(&mut rng)?,
        oracle_matmul(&mut rng)?,
        oracle_attention(&mut rng)?,
    ];
    Ok(parts.join("; "))
}

// ---- gradient suite ----------------------------------------------------------

/// Largest relative error between session gradients of `loss` and central
/// differences, over every tensor in `store`.
fn block_gradient_error(store: &ParameterStore, loss: impl Fn(&mut Session) -> divtok_core::Result<Var>) -> Result<f64, String> {
    let mut s = Session::new(store, true).map_err(|e| e.to_string())?;
    let l = loss(&mut s).map_err(|e| e.to_string())?;
    let grads = s.backward(l).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (i, analytic) in grads.iter().enumerate() {
        let numeric = finite_difference_grad(
            |t| {
                let mut probe = store.clone();
                probe.tensors_mut()[i] = t.clone();
                let mut s = Session::new(&probe, false)?;
                let l = loss(&mut s)?;
                Ok(s.graph.value(l).item().unwrap())
            },
            &store.tensors()[i],
            DEFAULT_STEP,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(max_rel_error(analytic, &numeric));
    }
    Ok(worst)
}

/// `sum(y * r)` for a fixed random `r`, so every output element matters.
fn probe_loss(s: &mut Session, y: Var, seed: u64) -> divtok_core::Result<Var> {
    let mut rng = Rng::new(seed);
    let r = random(&mut rng, s.graph.shape(y));
    let r = s.graph.constant(r)?;
    let p = s.graph.mul(y, r)?;
    s.graph.sum_all(p)
}

fn jittered(mut store: ParameterStore, rng: &mut Rng) -> ParameterStore {
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.uniform(-0.3, 0.3));
    }
    store
}

fn micro_config() -> ModelConfig {
    ModelConfig {
        mode: Mode::Image,
        vocab_size: 12,
        input: (1, 4, 4),
        channels: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ff_hidden: 16,
        tokens: 2,
        streams: vec![StreamSpec {
            frames: 1,
            height: 4,
            width: 4,
            tubelet: 1,
            patch: 2,
            tokens: 2,
        }],
        lambda: 0.5,
        div_layers: DivLayers::All,
        max_question_len: 4,
        max_answer_len: 3,
        seed: 3,
    }
}

fn micro_example(rng: &mut Rng) -> Example {
    Example {
        visual: Visual::new_image(4, 4, (0..48).map(|_| rng.below(256) as u8).collect()).unwrap(),
        question: String::new(),
        answer: String::new(),
        question_ids: (0..3).map(|_| 4 + rng.below(8)).collect(),
        answer_ids: (0..2).map(|_| 4 + rng.below(8)).collect(),
    }
}

fn gradient_suite() -> Outcome {
    let mut rng = Rng::new(77);
    let d = 4;
    let mut results: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: Result<f64, String>| -> Result<(), String> {
        let e = err?;
        results.push((name, e));
        Ok(())
    };

    macro_rules! block {
        ($name:expr, |$store:ident, $rng:ident| $build:block, |$s:ident, $b:ident, $x:ident| $fwd:block) => {{
            let mut $store = ParameterStore::new();
            let $rng = &mut rng;
            let ($b, $x) = $build;
            let store = jittered($store, $rng);
            record(
                $name,
                block_gradient_error(&store, |$s: &mut Session| {
                    let y = $fwd;
                    probe_loss($s, y, 5)
                }),
            )?;
        }};
    }

    block!("linear", |store, rng| {
        let l = Linear::new(&mut store, rng, "l", d, 3).unwrap();
        let x = store.add("x", random(rng, &[3, d])).unwrap();
        (l, x)
    }, |s, l, x| {
        let xv = s.var(x);
        l.forward(s, xv)?
    });
    block!("layer_norm", |store, rng| {
        let l = LayerNorm::new(&mut store, "ln", d).unwrap();
        let x = store.add("x", random(rng, &[3, d])).unwrap();
        (l, x)
    }, |s, l, x| {
        let xv = s.var(x);
        l.forward(s, xv)?
    });
    block!("softmax", |store, rng| {
        let x = store.add("x", random(rng, &[3, d])).unwrap();
        ((), x)
    }, |s, _u, x| {
        let xv = s.var(x);
        s.graph.softmax(xv, 1)?
    });
    block!("feed_forward", |store, rng| {
        let f = FeedForward::new(&mut store, rng, "ff", d, 6).unwrap();
        let x = store.add("x", random(rng, &[3, d])).unwrap();
        (f, x)
    }, |s, f, x| {
        let xv = s.var(x);
        f.forward(s, xv)?
    });
    block!("masked_attention", |store, rng| {
        let a = divtok_core::nn::Attention::new(&mut store, rng, "attn", d, 2).unwrap();
        let x = store.add("x", random(rng, &[3, d])).unwrap();
        (a, x)
    }, |s, a, x| {
        let xv = s.var(x);
        let mask = s.graph.constant(causal_mask(3))?;
        a.forward(s, xv, xv, Some(mask))?
    });
    block!("encoder_layer", |store, rng| {
        let e = EncoderLayer::new(&mut store, rng, "enc", d, 2, 6).unwrap();
        let x = store.add("x", random(rng, &[3, d])).unwrap();
        (e, x)
    }, |s, e, x| {
        let xv = s.var(x);
        e.forward(s, xv)?
    });
    block!("decoder_step", |store, rng| {
        let dec = Decoder::new(&mut store, rng, "dec", 1, d, 2, 6, 5).unwrap();
        let y = store.add("y", random(rng, &[3, d])).unwrap();
        let m = store.add("memory", random(rng, &[2, d])).unwrap();
        (dec, (y, m))
    }, |s, dec, ym| {
        let (y, m) = (s.var(ym.0), s.var(ym.1));
        dec.decoder_step(s, y, m)?
    });
    block!("embedding", |store, rng| {
        let e = Embedding::new(&mut store, rng, "emb", 6, d).unwrap();
        (e, ())
    }, |s, e, _u| { e.forward(s, &[1, 4, 1])? });
    block!("patch_embed", |store, rng| {
        let p = PatchEmbed::new(&mut store, rng, "patch", (4, 4), 2, d).unwrap();
        (p, random(rng, &[4, 4, 3]))
    }, |s, p, image| { p.forward(s, &image)?.features });
    block!("frame_embed", |store, rng| {
        let f = FrameEmbed::new(&mut store, rng, "frames", (4, 4, 4), (2, 2), d).unwrap();
        (f, random(rng, &[4, 4, 4, 3]))
    }, |s, f, video| { f.forward(s, &video)?.features });
    block!("token_learner", |store, rng| {
        let t = TokenLearner::new(&mut store, rng, "tok", d, d, 3).unwrap();
        let x = store.add("x", random(rng, &[5, d])).unwrap();
        let c = store.add("cond", random(rng, &[d])).unwrap();
        (t, (x, c))
    }, |s, t, xc| {
        let fm = FeatureMap { features: s.var(xc.0), grid: vec![1, 1, 5] };
        let cond = s.var(xc.1);
        let maps = t.spatial_attention_maps(s, &fm, cond)?;
        tokenize(&mut s.graph, fm.features, maps)?
    });
    block!("fuse_streams", |store, rng| {
        let l = Linear::new(&mut store, rng, "fuse", d, d).unwrap();
        let a = store.add("a", random(rng, &[2, d])).unwrap();
        let b = store.add("b", random(rng, &[3, d])).unwrap();
        (l, (a, b))
    }, |s, l, ab| {
        let (a, b, w, bias) = (s.var(ab.0), s.var(ab.1), s.var(l.w), s.var(l.b));
        fuse_streams(&mut s.graph, &[a, b], w, bias)?
    });
    block!("co_tokenizer", |store, rng| {
        let c = CoTokenizer::new(&mut store, rng, "cotok", 2, &[2, 1], d, 2, 6).unwrap();
        let a = store.add("stream0", random(rng, &[4, d])).unwrap();
        let b = store.add("stream1", random(rng, &[2, d])).unwrap();
        let t = store.add("text", random(rng, &[3, d])).unwrap();
        (c, (a, b, t))
    }, |s, c, abt| {
        let streams = [
            FeatureMap { features: s.var(abt.0), grid: vec![1, 2, 2] },
            FeatureMap { features: s.var(abt.1), grid: vec![1, 1, 2] },
        ];
        let text = s.var(abt.2);
        c.forward(s, &streams, text)?.sequence
    });
    block!("diversity_loss", |store, rng| {
        let x = store.add("logits", random(rng, &[2, 3, 5])).unwrap();
        ((), x)
    }, |s, _u, x| {
        let xv = s.var(x);
        let maps = s.graph.softmax(xv, 2)?;
        diversity_loss(&mut s.graph, maps)?
    });
    block!("cross_entropy", |store, rng| {
        let x = store.add("logits", random(rng, &[4, 6])).unwrap();
        ((), x)
    }, |s, _u, x| {
        let xv = s.var(x);
        s.graph.cross_entropy(xv, &[1, 5, 0, 2], Some(0))?
    });

    let (model, store) = Model::new(micro_config()).map_err(|e| e.to_string())?;
    let store = jittered(store, &mut rng);
    let (a, b) = (micro_example(&mut rng), micro_example(&mut rng));
    record("micro_model", model.gradient_check(&store, &[&a, &b], DEFAULT_STEP).map_err(|e| e.to_string()))?;

    let worst = results.iter().copied().fold(("none", 0.0), |w, r| if r.1 > w.1 { r } else { w });
    let detail = format!("{} checks, worst {:.2e} ({})", results.len(), worst.1, worst.0);
    ensure(results.iter().all(|r| r.1 <= GRAD_TOL), detail)
}

// ---- loss hand cases -----------------------------------------------------------

fn loss_of(maps: Tensor) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(maps).unwrap();
    let l = diversity_loss(&mut g, v).unwrap();
    g.value(l).item().unwrap()
}

fn hand_cases() -> Outcome {
    let disjoint = loss_of(Tensor::new(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
    let duplicated = loss_of(Tensor::new(&[2, 4], vec![0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0]).unwrap());
    ensure(disjoint == 0.0 && (duplicated - 0.5).abs() <= 1e-15, format!("disjoint {disjoint}, duplicated {duplicated}"))
}

// ---- orthogonality descent -------------------------------------------------------

fn orthogonality_descent() -> Outcome {
    let mut rng = Rng::new(2024);
    let mut store = ParameterStore::new();
    store.add("logits", random(&mut rng, &[8, 16])).unwrap();
    let cfg = AdamConfig {
        lr: 0.1,
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&store);
    for _ in 0..500 {
        let mut s = Session::new(&store, true).map_err(|e| e.to_string())?;
        let x = s.var(store.id("logits").unwrap());
        let maps = s.graph.softmax(x, 1).map_err(|e| e.to_string())?;
        let loss = diversity_loss(&mut s.graph, maps).map_err(|e| e.to_string())?;
        let grads = s.backward(loss).map_err(|e| e.to_string())?;
        adam_step(&mut store, &mut state, &grads, &cfg).map_err(|e| e.to_string())?;
    }
    let mut g = Graph::new();
    let x = g.constant(store.tensors()[0].clone()).unwrap();
    let maps = g.softmax(x, 1).unwrap();
    let maps = AttentionMaps::new(g.value(maps).reshape(&[1, 8, 16]).unwrap()).map_err(|e| e.to_string())?;
    let worst = pairwise_overlap_matrix(&maps)[0].max_off_diagonal();
    ensure(worst < 1e-3, format!("max off-diagonal overlap {worst:.2e} after 500 steps"))
}

// ---- learning check -----------------------------------------------------------

struct Trained {
    model: Model,
    state: TrainingState,
    last: MetricsRecord,
}

fn train_run(cfg: &RunConfig, lambda: f64) -> Result<(Trained, Vec<Example>), String> {
    let vocab = Vocab::grammar();
    let mut model_cfg = cfg.model.clone();
    model_cfg.lambda = lambda;
    let train_set = gen_split(cfg.data.scene, Split::Train, cfg.data.seed, cfg.data.train_examples, &vocab).map_err(|e| e.to_string())?;
    let val = gen_split(cfg.data.scene, Split::Validation, cfg.data.seed, cfg.data.val_examples, &vocab).map_err(|e| e.to_string())?;
    let (model, params) = Model::new(model_cfg.clone()).map_err(|e| e.to_string())?;
    let state = TrainingState::new(params, model_cfg, cfg.train);
    let (state, log) = train(&model, state, &train_set, &val, &vocab, |_| {}).map_err(|e| e.to_string())?;
    let last = log.last().cloned().ok_or("no metrics recorded")?;
    Ok((Trained { model, state, last }, val))
}

fn learning_check() -> Outcome {
    let cfg = RunConfig::defaults(Mode::Image);
    let (base, _) = train_run(&cfg, 0.0)?;
    let (reg, _) = train_run(&cfg, 0.1)?;
    let (b, r) = (&base.last, &reg.last);
    let detail = format!(
        "lambda=0: EM {:.3}, overlap {:.2e}; lambda=0.1: EM {:.3}, overlap {:.2e} (ratio {:.2})",
        b.em,
        b.mean_overlap,
        r.em,
        r.mean_overlap,
        r.mean_overlap / b.mean_overlap
    );
    ensure(b.em >= 0.90 && r.em >= b.em - 0.03 && r.mean_overlap <= 0.5 * b.mean_overlap, detail)
}

// ---- video path --------------------------------------------------------------

fn video_path() -> Outcome {
    let cfg = RunConfig::defaults(Mode::Video);
    let vocab = Vocab::grammar();
    let (run, val) = train_run(&cfg, cfg.model.lambda)?;
    let direction: Vec<Example> = val.iter().filter(|e| e.question.starts_with("which direction")).cloned().collect();
    let frames = cfg.model.input.0;
    let mut rng = Rng::new(4242);
    let shuffled = direction
        .iter()
        .map(|e| {
            let mut order: Vec<usize> = (0..frames).collect();
            rng.shuffle(&mut order);
            Ok(Example {
                visual: e.visual.reorder_frames(&order)?,
                ..e.clone()
            })
        })
        .collect::<divtok_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let params = run.state.params.rounded_to_f32();
    let plain = evaluate(&run.model, &params, &direction, &vocab, cfg.train.empty_tau).map_err(|e| e.to_string())?;
    let mixed = evaluate(&run.model, &params, &shuffled, &vocab, cfg.train.empty_tau).map_err(|e| e.to_string())?;
    let detail = format!(
        "{} direction questions: EM {:.3}, frame-shuffled EM {:.3} (drop {:.3})",
        direction.len(),
        plain.exact_match,
        mixed.exact_match,
        plain.exact_match - mixed.exact_match
    );
    ensure(!direction.is_empty() && plain.exact_match >= 0.85 && plain.exact_match - mixed.exact_match >= 0.2, detail)
}

// ---- determinism & persistence -------------------------------------------------

fn small_run_config() -> RunConfig {
    let mut cfg = RunConfig::defaults(Mode::Image);
    cfg.model.channels = 16;
    cfg.model.ff_hidden = 32;
    cfg.train.steps = 20;
    cfg.train.eval_every = 10;
    cfg.data.train_examples = 32;
    cfg.data.val_examples = 16;
    cfg.set_seed(11);
    cfg
}

fn determinism_and_persistence() -> Outcome {
    let cfg = small_run_config();
    let vocab = Vocab::grammar();
    let log_text = |run: &Trained| -> String { run.last.to_string() };
    let run_logs = || -> Result<(Trained, Vec<String>, Vec<Example>), String> {
        let train_set = gen_split(cfg.data.scene, Split::Train, cfg.data.seed, cfg.data.train_examples, &vocab).map_err(|e| e.to_string())?;
        let val = gen_split(cfg.data.scene, Split::Validation, cfg.data.seed, cfg.data.val_examples, &vocab).map_err(|e| e.to_string())?;
        let (model, params) = Model::new(cfg.model.clone()).map_err(|e| e.to_string())?;
        let state = TrainingState::new(params, cfg.model.clone(), cfg.train);
        let (state, log) = train(&model, state, &train_set, &val, &vocab, |_| {}).map_err(|e| e.to_string())?;
        let lines = log.iter().map(|r| r.to_string()).collect();
        let last = log.last().cloned().ok_or("no metrics")?;
        Ok((Trained { model, state, last }, lines, val))
    };
    let (first, log_a, val) = run_logs()?;
    let (_, log_b, _) = run_logs()?;
    if log_a != log_b {
        return Err("metrics logs differ between identical runs".into());
    }

    let bytes = encode_checkpoint(&first.state.params).map_err(|e| e.to_string())?;
    let restored = decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
    let report = evaluate(&first.model, &restored, &val, &vocab, cfg.train.empty_tau).map_err(|e| e.to_string())?;
    let replay = MetricsRecord::from_report(first.state.step, &report).to_string();
    if replay != log_text(&first) {
        return Err(format!("restored checkpoint evaluates to {replay:?}, log has {:?}", log_text(&first)));
    }

    let testdata = Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata");
    let image = gen_image_example(42, ImageScene { size: 32, grid: 2 }, &vocab).map_err(|e| e.to_string())?;
    let video = gen_video_example(7, VideoScene { frames: 16, size: 32 }, &vocab).map_err(|e| e.to_string())?;
    let goldens = [
        (encode_dataset(Mode::Image, &[image]), "image_seed42.dtds"),
        (encode_dataset(Mode::Video, &[video]), "video_seed7.dtds"),
    ];
    for (bytes, name) in goldens {
        let stored = std::fs::read(testdata.join(name)).map_err(|e| format!("{name}: {e}"))?;
        if bytes.map_err(|e| e.to_string())? != stored {
            return Err(format!("{name} differs from the regenerated dataset"));
        }
    }
    Ok(format!("{} identical log lines; checkpoint replay exact; 2 goldens match", log_a.len()))
}

// ---- memorization ----------------------------------------------------------------

fn memorization() -> Outcome {
    let vocab = Vocab::grammar();
    let data = gen_split(RunConfig::defaults(Mode::Image).data.scene, Split::Train, 17, 4, &vocab).map_err(|e| e.to_string())?;
    let mut model_cfg = ModelConfig::image(vocab.len());
    model_cfg.lambda = 0.0;
    let train_cfg = TrainConfig {
        steps: 1000,
        batch_size: 4,
        eval_every: 50,
        ..TrainConfig::default()
    };
    let (model, params) = Model::new(model_cfg.clone()).map_err(|e| e.to_string())?;
    let state = TrainingState::new(params, model_cfg, train_cfg);
    let (_, log) = train(&model, state, &data, &data, &vocab, |_| {}).map_err(|e| e.to_string())?;
    match log.iter().find(|r| r.em == 1.0 && r.f1 == 1.0) {
        Some(r) => Ok(format!("EM 1.0 and F1 1.0 at step {}", r.step)),
        None => Err(format!("best EM {:.2}", log.iter().map(|r| r.em).fold(0.0, f64::max))),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("oracle equivalence", oracle_equivalence),
        ("gradient suite", gradient_suite),
        ("diversity loss hand cases", hand_cases),
        ("orthogonality descent", orthogonality_descent),
        ("learning check", learning_check),
        ("video path", video_path),
        ("determinism and persistence", determinism_and_persistence),
        ("memorization", memorization),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
