use super::*;
use crate::adapters::{attach, Adapter};
use crate::autodiff::grad_check;
use crate::prompt;
use proptest::prelude::*;
use rand::Rng;

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 4,
        d_hidden: 6,
        n_blocks: 2,
        max_len: 24,
    }
}

fn randomize_head(m: &mut PolicyModel, seed: u64) {
    let head = m.tensor("head").unwrap().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = head
        .data()
        .iter()
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    m.set_tensor("head", Tensor::new(head.shape().to_vec(), data).unwrap())
        .unwrap();
}

#[test]
fn untrained_model_is_uniform() {
    let m = PolicyModel::new(Vocab::toy(), ModelConfig::default(), 0).unwrap();
    let y = m.vocab().encode_target("abc").unwrap();
    let lp = m.sequence_logprob("T: x\n", &y, None).unwrap();
    let ln_v = (m.vocab().len() as f64).ln();
    assert_eq!(lp.per_token.len(), 4);
    assert!((lp.total + 4.0 * ln_v).abs() < 1e-9);
    assert!((lp.avg + ln_v).abs() < 1e-9);
}

#[test]
fn scoring_contract_errors() {
    let m = PolicyModel::new(Vocab::toy(), small(), 0).unwrap();
    let y = m.vocab().encode_target("abc").unwrap();
    let long = "a".repeat(30);
    assert!(matches!(
        m.sequence_logprob(&long, &y, None),
        Err(Error::Capacity { .. })
    ));
    assert!(matches!(
        m.sequence_logprob("A", &y, None),
        Err(Error::Vocabulary(_))
    ));
    assert!(matches!(
        m.sequence_logprob("a", &[5, 6], None),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        m.sequence_logprob("a", &[], None),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        m.sequence_logprob("a", &[99, EOS], None),
        Err(Error::Vocabulary(_))
    ));
}

/// Plain-f64 forward pass written independently of the graph engine.
fn oracle_logprobs(m: &PolicyModel, input: &[usize]) -> Vec<Vec<f64>> {
    let cfg = m.config();
    let (d, h) = (cfg.d_model, cfg.d_hidden);
    let get = |n: &str| m.tensor(n).unwrap().data().to_vec();
    let mm = |x: &[Vec<f64>], w: &[f64], cols: usize| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                (0..cols)
                    .map(|c| {
                        row.iter()
                            .enumerate()
                            .map(|(k, v)| v * w[k * cols + c])
                            .sum()
                    })
                    .collect()
            })
            .collect()
    };
    let (embed, pos) = (get("embed"), get("pos"));
    let mut x: Vec<Vec<f64>> = input
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..d).map(|j| embed[id * d + j] + pos[t * d + j]).collect())
        .collect();
    for b in 0..cfg.n_blocks {
        let w = |l: &str| get(&format!("blocks.{b}.{l}"));
        let q = mm(&x, &w("wq"), d);
        let k = mm(&x, &w("wk"), d);
        let v = mm(&x, &w("wv"), d);
        let mut ctx = vec![vec![0.0; d]; x.len()];
        for i in 0..x.len() {
            let s: Vec<f64> = (0..=i)
                .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..=i {
                let p = (s[j] - mx).exp() / z;
                for c in 0..d {
                    ctx[i][c] += p * v[j][c];
                }
            }
        }
        let o = mm(&ctx, &w("wo"), d);
        for i in 0..x.len() {
            for c in 0..d {
                x[i][c] += o[i][c];
            }
        }
        let hid: Vec<Vec<f64>> = mm(&x, &w("w1"), h)
            .into_iter()
            .map(|r| r.into_iter().map(f64::tanh).collect())
            .collect();
        let m2 = mm(&hid, &w("w2"), d);
        for i in 0..x.len() {
            for c in 0..d {
                x[i][c] += m2[i][c];
            }
        }
    }
    let logits = mm(&x, &get("head"), m.vocab().len());
    logits
        .into_iter()
        .map(|row| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.into_iter().map(|v| v - lse).collect()
        })
        .collect()
}

#[test]
fn forward_matches_scripted_oracle() {
    let cfg = ModelConfig {
        d_model: 2,
        d_hidden: 2,
        n_blocks: 1,
        max_len: 8,
    };
    let mut m = PolicyModel::new(Vocab::toy(), cfg, 0).unwrap();
    let v = m.vocab().len();
    // hand-specified weights
    let fill = |n: usize, f: &dyn Fn(usize) -> f64| (0..n).map(f).collect::<Vec<_>>();
    m.set_tensor(
        "embed",
        Tensor::new(vec![v, 2], fill(2 * v, &|i| ((i % 7) as f64 - 3.0) * 0.25)).unwrap(),
    )
    .unwrap();
    m.set_tensor(
        "pos",
        Tensor::new(vec![8, 2], fill(16, &|i| (i as f64) * 0.05 - 0.3)).unwrap(),
    )
    .unwrap();
    m.set_tensor(
        "blocks.0.wq",
        Tensor::from_rows(&[&[0.5, -0.2], &[0.1, 0.9]]).unwrap(),
    )
    .unwrap();
    m.set_tensor(
        "blocks.0.wk",
        Tensor::from_rows(&[&[-0.3, 0.4], &[0.8, 0.2]]).unwrap(),
    )
    .unwrap();
    m.set_tensor(
        "blocks.0.wv",
        Tensor::from_rows(&[&[1.0, 0.5], &[-0.5, 0.25]]).unwrap(),
    )
    .unwrap();
    m.set_tensor(
        "blocks.0.wo",
        Tensor::from_rows(&[&[0.7, 0.0], &[0.3, -0.6]]).unwrap(),
    )
    .unwrap();
    m.set_tensor(
        "blocks.0.w1",
        Tensor::from_rows(&[&[1.2, -0.7], &[0.4, 0.9]]).unwrap(),
    )
    .unwrap();
    m.set_tensor(
        "blocks.0.w2",
        Tensor::from_rows(&[&[-0.5, 0.6], &[0.2, 0.1]]).unwrap(),
    )
    .unwrap();
    m.set_tensor(
        "head",
        Tensor::new(
            vec![2, v],
            fill(2 * v, &|i| ((i * 5 % 11) as f64 - 5.0) * 0.3),
        )
        .unwrap(),
    )
    .unwrap();

    let prompt_ids = m.vocab().encode("ab:").unwrap();
    let target = m.vocab().encode_target("c").unwrap();
    assert_eq!(target.len(), 2);
    let lp = m.sequence_logprob("ab:", &target, None).unwrap();

    let mut input = vec![BOS];
    input.extend_from_slice(&prompt_ids);
    input.push(target[0]);
    let rows = oracle_logprobs(&m, &input);
    let p0 = rows[prompt_ids.len()][target[0]];
    let p1 = rows[prompt_ids.len() + 1][target[1]];
    assert!((lp.per_token[0] - p0).abs() < 1e-10);
    assert!((lp.per_token[1] - p1).abs() < 1e-10);
    assert!((lp.total - (p0 + p1)).abs() < 1e-10);
    assert!((lp.avg - (p0 + p1) / 2.0).abs() < 1e-10);
}

#[test]
fn next_token_distribution_normalizes() {
    let mut m = PolicyModel::new(Vocab::toy(), small(), 3).unwrap();
    randomize_head(&mut m, 4);
    for ctx in ["", "a", "hello wor"] {
        let ids = m.vocab().encode(ctx).unwrap();
        let lp = m.next_token_logprobs(&ids, None).unwrap();
        let s: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert!(lp.iter().all(|&v| v <= 0.0));
    }
}

#[test]
fn param_count_closed_form() {
    // 28 symbols + 4 reserved ids
    let vocab = Vocab::new("\n :abcdefghijklmnopqrstuvwxy").unwrap();
    assert_eq!(vocab.len(), 32);
    let cfg = ModelConfig {
        d_model: 8,
        d_hidden: 16,
        n_blocks: 1,
        max_len: 16,
    };
    let mut m = PolicyModel::new(vocab, cfg, 0).unwrap();
    let (v, d, p, h) = (32, 8, 16, 16);
    let closed = v * d + p * d + 4 * d * d + 2 * d * h + d * v;
    assert_eq!(m.param_count(false), closed);
    assert_eq!(m.param_count(true), closed);
    let a = Adapter::init(&cfg, 1, &cfg.injection_points(), 2, None, 0).unwrap();
    assert_eq!(a.param_count(), 224);
    attach(&mut m, a).unwrap();
    assert_eq!(m.param_count(true), closed + 224);
    assert_eq!(m.param_count(false), closed);
}

#[test]
fn zero_adapter_matches_absent() {
    let mut m = PolicyModel::new(Vocab::toy(), small(), 5).unwrap();
    randomize_head(&mut m, 6);
    let y = m.vocab().encode_target("xyz").unwrap();
    let before = m.sequence_logprob("T: q\n", &y, None).unwrap();
    let cfg = *m.config();
    attach(
        &mut m,
        Adapter::init(&cfg, 2, &cfg.injection_points(), 3, None, 1).unwrap(),
    )
    .unwrap();
    let after = m.sequence_logprob("T: q\n", &y, None).unwrap();
    assert!((before.total - after.total).abs() < 1e-12);
}

#[test]
fn total_logprob_passes_grad_check() {
    let mut m = PolicyModel::new(Vocab::toy(), small(), 7).unwrap();
    randomize_head(&mut m, 8);
    let prompt = "ab ";
    let y = m.vocab().encode_target("cd").unwrap();
    let params = m.trainable_tensors(Scope::Base).unwrap();
    let report = grad_check(&params, 1e-6, |g, vars| {
        let mut b = m.bind_with(g, Scope::Base, vars)?;
        Ok(m.score_in(g, &mut b, None, prompt, &y)?.total)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");

    let cfg = *m.config();
    let mut a = Adapter::init(&cfg, 1, &cfg.injection_points(), 2, None, 3).unwrap();
    for t in cfg.injection_points() {
        let b = a.local_tensor_mut(&format!("{t}.B")).unwrap();
        for (i, v) in b.data_mut().iter_mut().enumerate() {
            *v = ((i % 5) as f64 - 2.0) * 0.1;
        }
    }
    attach(&mut m, a).unwrap();
    m.set_frozen(true);
    let params = m.trainable_tensors(Scope::Adapter(1)).unwrap();
    let report = grad_check(&params, 1e-6, |g, vars| {
        let mut b = m.bind_with(g, Scope::Adapter(1), vars)?;
        Ok(m.score_in(g, &mut b, None, prompt, &y)?.total)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn frozen_base_refuses_updates() {
    let mut m = PolicyModel::new(Vocab::toy(), small(), 0).unwrap();
    m.set_frozen(true);
    assert!(matches!(m.trainable_mut("embed"), Err(Error::Contract(_))));
    assert!(m.trainable(Scope::Base).is_err());
    assert!(matches!(
        m.trainable(Scope::Adapter(3)),
        Err(Error::State(_))
    ));
}

#[test]
fn greedy_and_seeded_sampling_are_reproducible() {
    let mut m = PolicyModel::new(Vocab::toy(), small(), 9).unwrap();
    randomize_head(&mut m, 10);
    let a = m.generate("ab", DecodeMode::Greedy, 6, None).unwrap();
    let b = m.generate("ab", DecodeMode::Greedy, 6, None).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 6 && !a.contains(&EOS));
    let mode = DecodeMode::Temperature {
        temperature: 1.0,
        seed: 42,
    };
    assert_eq!(
        m.generate("ab", mode, 8, None).unwrap(),
        m.generate("ab", mode, 8, None).unwrap()
    );
    assert!(m.generate("ab", DecodeMode::Greedy, 0, None).is_err());
    let bad = DecodeMode::Temperature {
        temperature: 0.0,
        seed: 1,
    };
    assert!(m.generate("ab", bad, 3, None).is_err());
}

#[test]
fn argmax_prefers_lowest_index_on_ties() {
    assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
    assert_eq!(argmax(&[-1.0]), 0);
}

#[test]
fn overfit_copy_task() {
    let cfg = ModelConfig {
        d_model: 16,
        d_hidden: 32,
        n_blocks: 1,
        max_len: 64,
    };
    let mut m = PolicyModel::new(Vocab::toy(), cfg, 1).unwrap();
    let p = prompt::render("copy", "copy", "abc");
    let y = m.vocab().encode_target("abc").unwrap();
    let names = m.trainable(Scope::Base).unwrap();
    let mut mom: Vec<Vec<f64>> = names
        .iter()
        .map(|n| vec![0.0; m.lookup(n).unwrap().numel()])
        .collect();
    let mut vel = mom.clone();
    let (lr, b1, b2) = (0.01, 0.9, 0.999);
    for step in 1..=150 {
        let mut g = Graph::new();
        let mut b = m.bind(&mut g, Scope::Base).unwrap();
        let sv = m.score_in(&mut g, &mut b, None, &p, &y).unwrap();
        let loss = g.neg(sv.total).unwrap();
        g.backward(loss).unwrap();
        for (k, name) in names.iter().enumerate() {
            let grad = g.grad(b.trainable[k]).unwrap().to_vec();
            let t = m.trainable_mut(name).unwrap();
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                mom[k][i] = b1 * mom[k][i] + (1.0 - b1) * grad[i];
                vel[k][i] = b2 * vel[k][i] + (1.0 - b2) * grad[i] * grad[i];
                let mh = mom[k][i] / (1.0 - b1.powi(step));
                let vh = vel[k][i] / (1.0 - b2.powi(step));
                *w -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
    }
    let out = m.generate(&p, DecodeMode::Greedy, 10, None).unwrap();
    assert_eq!(m.vocab().decode(&out).unwrap(), "abc");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut m = PolicyModel::new(Vocab::toy(), small(), 11).unwrap();
    randomize_head(&mut m, 12);
    let cfg = *m.config();
    attach(
        &mut m,
        Adapter::init(&cfg, 6, &cfg.injection_points()[..3], 2, None, 1).unwrap(),
    )
    .unwrap();
    m.set_frozen(true);
    m.save(&path).unwrap();
    let back = PolicyModel::load(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.base_checksum(), m.base_checksum());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn per_token_shape_and_range(target in "[a-z ]{1,8}", seed in 0u64..50) {
        let mut m = PolicyModel::new(Vocab::toy(), small(), seed).unwrap();
        randomize_head(&mut m, seed + 100);
        let y = m.vocab().encode_target(&target).unwrap();
        let lp = m.sequence_logprob("T:", &y, None).unwrap();
        prop_assert_eq!(lp.per_token.len(), y.len());
        prop_assert!(lp.per_token.iter().all(|&v| v <= 0.0 && v.exp() > 0.0));
        prop_assert!((lp.total - lp.per_token.iter().sum::<f64>()).abs() < 1e-12);
    }
}
