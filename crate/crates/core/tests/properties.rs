use proptest::prelude::*;
use rand::Rng;

use seqattr_core::data::{
    inject_label_noise, longtail_subsample, mean_ir, synth_generate, Example, Implication, RenderConfig, SampleRecord,
    Source, SyntheticRuleSpec,
};
use seqattr_core::decoder::{
    build_mask, DecoderConfig, MaskStrategy, ModelConfig, SeqAttrModel, VisualInput, VisualSource,
};
use seqattr_core::decoding::{beam_decode, greedy_decode};
use seqattr_core::encoders::{RawImage, VisualEncoderConfig};
use seqattr_core::rng::rng_for;
use seqattr_core::tensor::{softmax, Tape, Tensor, Var};
use seqattr_core::training::{weighted_nll, ClassRates, TrainConfig, Trainer};
use seqattr_core::vocab::{AttributeVocabulary, PromptKind, PromptTemplate};

fn vocab(m: usize) -> AttributeVocabulary {
    AttributeVocabulary::new((0..m).map(|i| format!("attr {i}")).collect()).unwrap()
}

fn model(m: usize, layers: usize, mask: MaskStrategy, seed: u64) -> SeqAttrModel {
    let vocab = vocab(m);
    SeqAttrModel::new(ModelConfig {
        decoder: DecoderConfig {
            layers,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            mask,
            vocab_size: vocab.total_size(),
        },
        prompt: PromptTemplate::builtin(PromptKind::Photo, &Default::default()),
        vocab,
        visual: VisualSource::Features { width: 6 },
        seed,
    })
    .unwrap()
}

fn visual(m: &SeqAttrModel, seed: u64) -> Tensor {
    let raw = Tensor::uniform(&[3, 6], 1.0, &mut rng_for(seed, "props/visual"));
    m.encode_visual_value(&VisualInput::Features(raw)).unwrap()
}

fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[rows, cols], 2.0, &mut rng_for(seed, "props/tensor"))
}

/// Central differences of `Σ w·f(x)` against the tape gradient.
fn check_op(x: &Tensor, seed: u64, f: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let loss = |t: &mut Tape, xv: Var| {
        let out = f(t, xv);
        let n = t.value(out).numel();
        let mut rng = rng_for(seed, "props/weights");
        let picks = (0..n).map(|i| (i, rng.gen_range(-1.0..1.0))).collect();
        t.weighted_pick(out, picks).unwrap()
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad());
    let l = loss(&mut tape, xv);
    tape.backward(l).unwrap();
    let analytic = tape.grad(xv).unwrap().to_vec();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..x.numel() {
        let eval = |delta: f64| {
            let mut p = x.clone();
            p.data_mut()[k] += delta;
            let mut t = Tape::new();
            let v = t.leaf(p);
            let l = loss(&mut t, v);
            t.value(l).data()[0]
        };
        let num = (eval(h) - eval(-h)) / (2.0 * h);
        worst = worst.max((num - analytic[k]).abs() / num.abs().max(analytic[k].abs()).max(1e-6));
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..7, seed in any::<u64>(), axis in 0usize..2) {
        let x = tensor(rows, cols, seed);
        let s = softmax(&x, axis).unwrap();
        prop_assert!(s.data().iter().all(|&v| v >= 0.0));
        let sums: Vec<f64> = if axis == 1 {
            (0..rows).map(|r| s.row(r).iter().sum()).collect()
        } else {
            (0..cols).map(|c| (0..rows).map(|r| s.at(r, c)).sum()).collect()
        };
        for total in sums {
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn op_gradients_match_differences(rows in 1usize..4, cols in 2usize..5, seed in any::<u64>()) {
        let x = tensor(rows, cols, seed);
        let w = tensor(cols, 3, seed ^ 1);
        let g = Tensor::uniform(&[cols], 1.0, &mut rng_for(seed, "gain"));
        let b = Tensor::uniform(&[cols], 1.0, &mut rng_for(seed, "bias"));
        let worst = [
            check_op(&x, seed, |t, v| { let c = t.constant(w.clone()); t.matmul(v, c).unwrap() }),
            check_op(&x, seed, |t, v| t.matmul_nt(v, v).unwrap()),
            check_op(&x, seed, |t, v| t.mul(v, v).unwrap()),
            check_op(&x, seed, |t, v| t.softmax(v, 0).unwrap()),
            check_op(&x, seed, |t, v| t.softmax(v, 1).unwrap()),
            check_op(&x, seed, |t, v| t.log_softmax(v).unwrap()),
            check_op(&x, seed, |t, v| t.gelu(v)),
            check_op(&x, seed, |t, v| {
                let (gv, bv) = (t.constant(g.clone()), t.constant(b.clone()));
                t.layer_norm(v, gv, bv).unwrap()
            }),
            check_op(&x, seed, |t, v| { let s = t.slice_cols(v, 1, cols - 1).unwrap(); t.concat_cols(&[s, v]).unwrap() }),
            check_op(&x, seed, |t, v| t.gather_rows(v, &[0, rows - 1, 0]).unwrap()),
        ];
        for (i, e) in worst.iter().enumerate() {
            prop_assert!(*e < 1e-4, "op {} relative error {}", i, e);
        }
    }

    #[test]
    fn forward_is_deterministic(m in 2usize..6, seed in any::<u64>()) {
        let a = model(m, 1, MaskStrategy::Causal, seed);
        let b = model(m, 1, MaskStrategy::Causal, seed);
        let toks: Vec<usize> = std::iter::once(m).chain(0..m).collect();
        let x = a.decode_forward(&toks, &visual(&a, seed)).unwrap();
        let y = b.decode_forward(&toks, &visual(&b, seed)).unwrap();
        prop_assert_eq!(x.log_probs, y.log_probs);
    }

    #[test]
    fn causal_rows_ignore_future_tokens(m in 2usize..7, seed in any::<u64>(), picks in any::<(u64, u64, u64)>()) {
        let net = model(m, 2, MaskStrategy::Causal, seed);
        let v = visual(&net, seed);
        let size = m + 3;
        let len = m + 2;
        let mut rng = rng_for(picks.0, "props/tokens");
        let mut toks: Vec<usize> = (0..len).map(|_| rng.gen_range(0..size)).collect();
        toks[0] = m;
        let i = (picks.1 as usize) % (len - 1);
        let j = i + 1 + (picks.2 as usize) % (len - 1 - i);
        let mut changed = toks.clone();
        changed[j] = (toks[j] + 1) % size;
        let a = net.decode_forward(&toks, &v).unwrap();
        let b = net.decode_forward(&changed, &v).unwrap();
        for r in 0..=i {
            let x: Vec<u64> = a.log_probs.row(r).iter().map(|f| f.to_bits()).collect();
            let y: Vec<u64> = b.log_probs.row(r).iter().map(|f| f.to_bits()).collect();
            prop_assert_eq!(x, y);
        }
    }

    #[test]
    fn outputs_and_attention_are_distributions(m in 2usize..7, seed in any::<u64>(), kind in 0usize..4, k in 1usize..4) {
        let mask = match kind {
            0 => MaskStrategy::Causal,
            1 => MaskStrategy::Sparse { k },
            2 => MaskStrategy::Group { groups: vec![(0..m / 2).collect(), (m / 2..m).collect()] },
            _ => MaskStrategy::None,
        };
        let net = model(m, 2, mask.clone(), seed);
        let toks: Vec<usize> = std::iter::once(m).chain((0..m).rev()).chain(std::iter::once(m + 1)).collect();
        let out = net.decode_forward(&toks, &visual(&net, seed)).unwrap();
        let len = toks.len();
        for r in 0..len {
            let lse = out.log_probs.row(r).iter().map(|v| v.exp()).sum::<f64>().ln();
            prop_assert!(lse.abs() <= 1e-9);
        }
        let admissible = build_mask(&mask, len, Some((&toks, m))).unwrap();
        for layer in &out.self_attention {
            for head in layer {
                for r in 0..len {
                    prop_assert!((head.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                    for c in 0..len {
                        if !admissible.get(r, c) {
                            prop_assert!(head.at(r, c) <= 1e-9);
                        }
                    }
                }
            }
        }
        for layer in &out.cross_attention {
            for head in layer {
                for r in 0..len {
                    prop_assert!((head.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn causal_is_subset_of_every_sparse(len in 1usize..12, k in 1usize..12) {
        let causal = build_mask(&MaskStrategy::Causal, len, None).unwrap();
        let sparse = build_mask(&MaskStrategy::Sparse { k }, len, None).unwrap();
        prop_assert!(causal.is_subset_of(&sparse));
    }

    #[test]
    fn loss_is_nonnegative(m in 1usize..5, seed in any::<u64>(), rates in proptest::collection::vec(0.0f64..=1.0, 4)) {
        let v = vocab(m);
        let size = v.total_size();
        let mut r: Vec<f64> = rates[..m].to_vec();
        r.resize(size, 1.0);
        let rates = ClassRates::new(r).unwrap();
        let logits = tensor(m + 1, size, seed);
        let mut t = Tape::new();
        let x = t.leaf(logits);
        let lp = t.log_softmax(x).unwrap();
        let lp = t.value(lp).clone();
        let targets: Vec<usize> = (0..m).chain(std::iter::once(v.eos())).collect();
        let loss = weighted_nll(&[(&lp, &targets[..])], &rates, &v).unwrap();
        prop_assert!(loss > 0.0);

        let mut perfect = Tensor::filled(&[m + 1, size], f64::NEG_INFINITY);
        for (row, &c) in targets.iter().enumerate() {
            perfect.data_mut()[row * size + c] = 0.0;
        }
        prop_assert_eq!(weighted_nll(&[(&perfect, &targets[..])], &rates, &v).unwrap(), 0.0);
    }

    #[test]
    fn beam_never_scores_below_greedy(m in 2usize..6, seed in any::<u64>(), width in 1usize..6) {
        let net = model(m, 1, MaskStrategy::Causal, seed);
        let v = visual(&net, seed);
        let g = greedy_decode(&net, &v, m + 1).unwrap();
        let b = beam_decode(&net, &v, width, m + 1).unwrap();
        if g.finished {
            prop_assert!(b.cumulative_logprob >= g.cumulative_logprob - 1e-12);
        }
        for h in [&g, &b] {
            prop_assert_eq!(h.tokens[0], m);
            prop_assert!(h.tokens[1..].iter().all(|&t| t != net.vocab().bos() && t != net.vocab().pad()));
        }
    }

    #[test]
    fn mean_ir_ignores_order_and_duplication(
        rows in proptest::collection::vec(proptest::collection::vec(0u8..2, 4), 1..30),
        seed in any::<u64>(),
    ) {
        let records: Vec<SampleRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, l)| SampleRecord { id: i.to_string(), source: Source::Features(format!("{i}").into()), labels: l.clone() })
            .collect();
        let Ok(base) = mean_ir(&records, 4) else { return Ok(()) };
        let mut shuffled = records.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng_for(seed, "props/shuffle"));
        prop_assert_eq!(mean_ir(&shuffled, 4).unwrap(), base);
        let doubled: Vec<SampleRecord> = records.iter().chain(&records).cloned().collect();
        prop_assert_eq!(mean_ir(&doubled, 4).unwrap(), base);
    }

    #[test]
    fn perturbations_are_pure(seed in any::<u64>(), p in 0.0f64..1.0, frac in 0.0f64..=1.0) {
        let records: Vec<SampleRecord> = (0..40)
            .map(|i| SampleRecord {
                id: format!("r{i}"),
                source: Source::Features(format!("r{i}").into()),
                labels: (0..5).map(|j| ((i * 3 + j) % 4 == 0) as u8).collect(),
            })
            .collect();
        prop_assert_eq!(inject_label_noise(&records, p, seed).unwrap(), inject_label_noise(&records, p, seed).unwrap());
        let tails = [(1, frac), (3, frac)];
        prop_assert_eq!(longtail_subsample(&records, &tails, seed).unwrap(), longtail_subsample(&records, &tails, seed).unwrap());
    }
}

#[test]
fn double_noise_composes() {
    let records: Vec<SampleRecord> = (0..10_000)
        .map(|i| SampleRecord {
            id: format!("r{i}"),
            source: Source::Features(format!("r{i}").into()),
            labels: vec![0; 10],
        })
        .collect();
    let p = 0.1;
    let (once, _) = inject_label_noise(&records, p, 1).unwrap();
    let (twice, _) = inject_label_noise(&once, p, 2).unwrap();
    let set: usize = twice.iter().map(|r| r.labels.iter().filter(|&&b| b == 1).count()).sum();
    let frac = set as f64 / 100_000.0;
    assert!((frac - 2.0 * p * (1.0 - p)).abs() <= 0.01, "{frac}");
}

/// Solves `a x = b` for square `a` by Gaussian elimination with pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        x[r] = (b[r] - (r + 1..n).map(|k| a[r][k] * x[k]).sum::<f64>()) / a[r][r];
    }
    x
}

#[test]
fn noiseless_features_are_linearly_decodable() {
    let imp = |a, c| Implication {
        antecedent: a,
        consequent: c,
        strength: 0.7,
    };
    let spec = SyntheticRuleSpec {
        marginals: vec![0.2, 0.5, 0.4, 0.3, 0.6, 0.1],
        implications: vec![imp(0, 1), imp(3, 2)],
        exclusions: vec![(4, 5)],
        seed: 8,
        render: RenderConfig {
            rows: 3,
            cols: 8,
            noise: 0.0,
        },
    };
    let m = spec.num_attributes();
    // Least-squares probe from the stacked projection matrices.
    let stacked: Vec<Vec<f64>> = spec.projection().iter().flat_map(|p| (0..8).map(|c| p.row(c).to_vec()).collect::<Vec<_>>()).collect();
    let gram: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| stacked.iter().map(|r| r[i] * r[j]).sum()).collect())
        .collect();
    for ex in synth_generate(&spec, 200, 0, "p").unwrap() {
        let VisualInput::Features(f) = &ex.visual else { panic!("features expected") };
        let rhs: Vec<f64> = (0..m).map(|i| stacked.iter().zip(f.data()).map(|(r, x)| r[i] * x).sum()).collect();
        let signed = solve(gram.clone(), rhs);
        let decoded: Vec<u8> = signed.iter().map(|&s| (s > 0.0) as u8).collect();
        assert_eq!(decoded, ex.labels, "{}", ex.id);
    }
}

#[test]
fn image_model_gradients_match_differences() {
    let vocab = vocab(3);
    let encoder = VisualEncoderConfig {
        image_side: 8,
        patch_side: 4,
        layers: 1,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        channels: 3,
    };
    let config = ModelConfig {
        decoder: DecoderConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            mask: MaskStrategy::Causal,
            vocab_size: vocab.total_size(),
        },
        prompt: PromptTemplate::builtin(PromptKind::Class, &Default::default()),
        vocab,
        visual: VisualSource::Image(encoder),
        seed: 12,
    };
    let mut rng = rng_for(6, "props/image");
    let data: Vec<Example> = (0..2)
        .map(|i| Example {
            id: format!("i{i}"),
            visual: VisualInput::Image(RawImage::new(8, 8, 3, (0..192).map(|_| rng.gen()).collect()).unwrap()),
            labels: vec![i as u8, 1, 0],
        })
        .collect();
    let mut t = Trainer::from_data(config, TrainConfig::default(), &data).unwrap();
    let refs: Vec<&Example> = data.iter().collect();
    let batch: Vec<_> = data.iter().map(|e| (e, e.visual.clone())).collect();
    t.accumulate_batch(&batch).unwrap();
    let grads: Vec<Vec<f64>> = t
        .model
        .params()
        .tensors()
        .iter()
        .map(|p| p.grad.clone().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    assert!(t.model.params().names().iter().any(|n| n.starts_with("visual.")));
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        for k in (0..g.len()).step_by(3) {
            let orig = t.model.params().tensors()[pi].data()[k];
            t.model.params_mut().tensors_mut()[pi].data_mut()[k] = orig + h;
            let up = t.batch_loss(&refs).unwrap();
            t.model.params_mut().tensors_mut()[pi].data_mut()[k] = orig - h;
            let down = t.batch_loss(&refs).unwrap();
            t.model.params_mut().tensors_mut()[pi].data_mut()[k] = orig;
            let num = (up - down) / (2.0 * h);
            worst = worst.max((num - g[k]).abs() / num.abs().max(g[k].abs()).max(1e-9));
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}
