use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::lexicon::{BOS_ID, EOS_ID};
use crate::numerics::{gradcheck, Graph, GradcheckConfig, Tensor, Var};
use crate::Result;

fn config(d: usize, heads: usize, schedule: &str, vocab: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: d,
        heads,
        d_ff: 2 * d,
        decoder_layers: 1,
        vocab_size: vocab,
        max_len: 6,
        schedule: schedule.parse().unwrap(),
        prototype_mode: PrototypeMode::Trainable,
        dropout: 0.0,
        encoder: None,
        init_seed: seed,
    }
}

/// Model whose schedule uses the given 0-based levels; level `l` has
/// `sizes[l]` random prototypes of width `d_emb`.
fn model(cfg: ModelConfig, levels: &[usize], sizes: &[usize], d_emb: usize) -> Captioner {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed + 1000);
    let mut protos = BTreeMap::new();
    for &l in levels {
        protos.entry(l).or_insert_with(|| Tensor::randn(&[sizes[l], d_emb], 1.0, &mut rng));
    }
    Captioner::build(cfg, levels.to_vec(), protos).unwrap()
}

fn grid(n: usize, d: usize, seed: u64) -> Visual {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Visual::Grid(GridFeatures::new(Tensor::randn(&[n, d], 1.0, &mut rng), None).unwrap())
}

fn check_model(m: &Captioner, f: impl Fn(&Captioner, &mut Graph) -> Result<Var>) {
    let mut store = m.params().clone();
    let cfg = GradcheckConfig::default();
    let report = gradcheck(&mut store, &cfg, |g, s| {
        let mut mm = m.clone();
        *mm.params_mut() = s.clone();
        f(&mm, g)
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.checked > 0);
}

fn weighted_output(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.value(x).len();
    let w = Tensor::randn(&[n], 1.0, &mut rng);
    g.weighted_sum(x, w.data())
}

#[test]
fn single_prototype_gets_all_attention() {
    let m = model(config(8, 2, "1", 10, 0), &[0], &[1], 5);
    let v = grid(3, 8, 1);
    let mut g = Graph::new();
    let (x, n) = m.grid_features(&mut g, &[&v]).unwrap();
    let (_, atts) = m.aggregate(&mut g, x, 1, n).unwrap();
    let (probs, layout) = g.attention_probs(atts[0]).unwrap();
    assert_eq!(layout.kv_len, 1);
    assert!(probs.iter().all(|&p| p == 1.0));
}

#[test]
fn attention_rows_are_stochastic_and_shape_is_kept() {
    let m = model(config(8, 2, "4-6", 10, 3), &[0, 1], &[4, 6], 5);
    let (a, b) = (grid(5, 8, 1), grid(5, 8, 2));
    let mut g = Graph::new();
    let (x, n) = m.grid_features(&mut g, &[&a, &b]).unwrap();
    let (y, atts) = m.aggregate(&mut g, x, 2, n).unwrap();
    assert_eq!(g.shape(y), g.shape(x));
    let out = m.decode(&mut g, y, n, &[vec![BOS_ID, 5], vec![BOS_ID, 6]]).unwrap();
    for att in atts.into_iter().chain([out.cross_attention]) {
        let (probs, layout) = g.attention_probs(att).unwrap();
        for row in probs.chunks(layout.kv_len) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn cma_block_gradcheck() {
    let m = model(config(8, 2, "4", 10, 5), &[0], &[4], 6);
    let v = grid(3, 8, 9);
    check_model(&m, |m, g| {
        let (x, n) = m.grid_features(g, &[&v])?;
        let (y, _) = m.aggregate(g, x, 1, n)?;
        weighted_output(g, y, 11)
    });
}

#[test]
fn two_block_stack_gradcheck() {
    let m = model(config(8, 2, "3-5", 10, 6), &[0, 1], &[3, 5], 6);
    let (a, b) = (grid(3, 8, 1), grid(3, 8, 2));
    check_model(&m, |m, g| {
        let (x, n) = m.grid_features(g, &[&a, &b])?;
        let (y, _) = m.aggregate(g, x, 2, n)?;
        weighted_output(g, y, 12)
    });
}

#[test]
fn empty_schedule_is_identity() {
    let m = model(config(8, 2, "none", 10, 0), &[], &[], 5);
    let v = grid(4, 8, 3);
    let mut g = Graph::new();
    let (x, n) = m.grid_features(&mut g, &[&v]).unwrap();
    let (y, atts) = m.aggregate(&mut g, x, 1, n).unwrap();
    assert!(atts.is_empty());
    assert_eq!(g.value(y), g.value(x));
    assert_eq!(m.memory(&[&v]).unwrap().0, *g.value(x));
}

#[test]
fn distinct_levels_change_the_output() {
    // Same parameters except which table the second block reads.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let coarse = Tensor::randn(&[2, 5], 1.0, &mut rng);
    let fine = Tensor::randn(&[6, 5], 1.0, &mut rng);
    let both: BTreeMap<usize, Tensor> = [(0, fine.clone()), (1, coarse.clone())].into();
    let cfg = config(8, 2, "L2-L1", 10, 0);
    let a = Captioner::build(cfg.clone(), vec![1, 0], both.clone()).unwrap();
    let b = Captioner::build(ModelConfig { schedule: "L2-L2".parse().unwrap(), ..cfg }, vec![1, 1], both).unwrap();
    let v = grid(4, 8, 7);
    let diff = a.memory(&[&v]).unwrap().0.max_abs_diff(&b.memory(&[&v]).unwrap().0);
    assert!(diff > 1e-3, "{diff}");
}

#[test]
fn decoder_is_causal_and_deterministic() {
    let mut cfg = config(8, 2, "3", 12, 8);
    cfg.decoder_layers = 2;
    let m = model(cfg, &[0], &[3], 4);
    let v = grid(3, 8, 1);
    let run = |row: Vec<u32>| {
        let mut g = Graph::new();
        let (mem, n) = m.encode(&mut g, &[&v]).unwrap();
        let out = m.decode(&mut g, mem, n, &[row]).unwrap();
        g.value(out.logits).clone()
    };
    let base = run(vec![BOS_ID, 4, 5, 6, 7]);
    assert_eq!(base, run(vec![BOS_ID, 4, 5, 6, 7]));
    for t in 0..4 {
        let mut row = vec![BOS_ID, 4, 5, 6, 7];
        for x in row.iter_mut().skip(t + 1) {
            *x = 9;
        }
        let changed = run(row);
        for i in 0..=t {
            assert_eq!(base.row(i), changed.row(i), "position {i} saw the future");
        }
        assert_ne!(base.row(t + 1), changed.row(t + 1));
    }
}

#[test]
fn decoder_gradcheck() {
    let m = model(config(8, 2, "3", 9, 2), &[0], &[3], 4);
    let (a, b) = (grid(3, 8, 1), grid(3, 8, 2));
    let caps: [&[u32]; 2] = [&[4, 5, 6], &[7]];
    check_model(&m, |m, g| m.xe_loss(g, &[&a, &b], &caps));
}

#[test]
fn prefix_longer_than_max_len_is_rejected() {
    let m = model(config(8, 2, "none", 9, 0), &[], &[], 4);
    let v = grid(2, 8, 1);
    let mut g = Graph::new();
    let (mem, n) = m.encode(&mut g, &[&v]).unwrap();
    assert!(m.decode(&mut g, mem, n, &[vec![BOS_ID; 7]]).is_err());
    assert!(m.decode(&mut g, mem, n, &[vec![BOS_ID; 6]]).is_ok());
}

#[test]
fn frozen_prototypes_receive_no_gradient() {
    let v = grid(3, 8, 1);
    let caps: [&[u32]; 1] = [&[4, 5]];
    for mode in [PrototypeMode::Frozen, PrototypeMode::Trainable] {
        let mut cfg = config(8, 2, "3", 9, 2);
        cfg.prototype_mode = mode;
        let m = model(cfg, &[0], &[3], 4);
        let mut g = Graph::new();
        let loss = m.xe_loss(&mut g, &[&v], &caps).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut store = m.params().clone();
        grads.accumulate_into(&mut store);
        let (_, id) = m.prototype_params().next().unwrap();
        let norm = store.get(id).grad.norm();
        match mode {
            PrototypeMode::Frozen => assert_eq!(norm, 0.0),
            PrototypeMode::Trainable => assert!(norm > 0.0),
        }
    }
}

fn toy_encoder_model(d: usize, schedule: &str, seed: u64) -> Captioner {
    let mut cfg = config(d, 2, schedule, 9, seed);
    cfg.encoder = Some(ToyEncoderConfig {
        image_height: 16,
        image_width: 16,
        patch: 8,
        blocks: 1,
    });
    let levels: Vec<usize> = if cfg.schedule.is_empty() { vec![] } else { vec![0] };
    model(cfg, &levels, &[3], 4)
}

fn image(seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(Tensor::uniform(&[16, 16, 3], 1.0, &mut rng)).unwrap()
}

#[test]
fn toy_encoder_yields_one_grid_cell_per_patch() {
    let m = toy_encoder_model(8, "none", 0);
    let v = Visual::Image(image(1));
    let mut g = Graph::new();
    let (x, n) = m.grid_features(&mut g, &[&v, &v]).unwrap();
    assert_eq!(n, 4);
    assert_eq!(g.shape(x), &[8, 8]);
    let wrong = Visual::Image(Image::new(Tensor::zeros(&[8, 16, 3])).unwrap());
    assert!(m.grid_features(&mut Graph::new(), &[&wrong]).is_err());
}

#[test]
fn toy_encoder_without_positions_is_permutation_equivariant() {
    let mut m = toy_encoder_model(8, "none", 3);
    let pos = m.params().id("enc.pos").unwrap();
    m.params_mut().get_mut(pos).tensor = Tensor::zeros(&[4, 8]);
    let img = image(5);
    // Patch order [0 1; 2 3] becomes [3 0; 1 2].
    let perm = [3, 0, 1, 2];
    let mut px = vec![0.0; 16 * 16 * 3];
    for (dst, &src) in perm.iter().enumerate() {
        let (sy, sx, dy, dx) = (src / 2 * 8, src % 2 * 8, dst / 2 * 8, dst % 2 * 8);
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    px[((dy + y) * 16 + dx + x) * 3 + c] = img.pixels().data()[((sy + y) * 16 + sx + x) * 3 + c];
                }
            }
        }
    }
    let shuffled = Image::new(Tensor::new(vec![16, 16, 3], px).unwrap()).unwrap();
    let (a, _) = m.memory(&[&Visual::Image(img)]).unwrap();
    let (b, _) = m.memory(&[&Visual::Image(shuffled)]).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        for (x, y) in a.row(src).iter().zip(b.row(dst)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn toy_encoder_gradcheck() {
    let m = toy_encoder_model(8, "none", 4);
    let v = Visual::Image(image(2));
    check_model(&m, |m, g| {
        let (x, _) = m.grid_features(g, &[&v])?;
        weighted_output(g, x, 3)
    });
}

#[test]
fn end_to_end_gradcheck() {
    let m = toy_encoder_model(8, "3", 7);
    let (a, b) = (Visual::Image(image(3)), Visual::Image(image(4)));
    let caps: [&[u32]; 2] = [&[4, 5], &[6, 7, 8]];
    check_model(&m, |m, g| m.xe_loss(g, &[&a, &b], &caps));
}

#[test]
fn grid_width_must_match_the_model() {
    let m = model(config(8, 2, "none", 9, 0), &[], &[], 4);
    assert!(m.memory(&[&grid(3, 6, 0)]).is_err());
}

#[test]
fn zero_features_give_deterministic_captions() {
    let m = model(config(8, 2, "3", 9, 1), &[0], &[3], 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("zeros.bin");
    save_grid_features(&path, &[GridFeatures::new(Tensor::zeros(&[4, 8]), Some((2, 2))).unwrap()]).unwrap();
    let v = Visual::Grid(load_grid_features(&path).unwrap().remove(0));
    let a = greedy_decode(&ModelScorer::new(&m, &[&v]).unwrap(), 1).unwrap();
    let b = greedy_decode(&ModelScorer::new(&m, &[&v]).unwrap(), 1).unwrap();
    assert_eq!(a, b);
}

fn random_decoder(seed: u64) -> (Captioner, Vec<Visual>) {
    let mut cfg = config(8, 2, "3", 7, seed);
    cfg.max_len = 5;
    let mut m = model(cfg, &[0], &[3], 4);
    // Sharper output layer so that decodes differ between strategies.
    let w = m.params().id("dec.out.w").unwrap();
    let t = m.params().get(w).tensor.map(|v| 4.0 * v);
    m.params_mut().get_mut(w).tensor = t;
    let vs = (0..2).map(|i| grid(3, 8, seed * 10 + i)).collect();
    (m, vs)
}

#[test]
fn beam_of_one_is_greedy_and_wider_beams_score_no_worse() {
    for seed in 0..50 {
        let (m, vs) = random_decoder(seed);
        let refs: Vec<&Visual> = vs.iter().collect();
        let scorer = ModelScorer::new(&m, &refs).unwrap();
        let greedy = greedy_decode(&scorer, 2).unwrap();
        for (i, gr) in greedy.iter().enumerate() {
            assert_eq!(&beam_decode(&scorer, i, 1, 0.0).unwrap(), gr, "seed {seed}");
            for alpha in [0.0, 1.0] {
                let key = |d: &Decoded| d.log_prob / ((d.tokens.len() + usize::from(d.finished)) as f64).powf(alpha);
                for b in [2, 3, 5] {
                    let bd = beam_decode(&scorer, i, b, alpha).unwrap();
                    assert!(key(&bd) >= key(gr) - 1e-12, "seed {seed} beam {b} alpha {alpha}");
                }
            }
        }
    }
    assert!(beam_decode(&ModelScorer::new(&random_decoder(0).0, &[&grid(3, 8, 0)]).unwrap(), 0, 0, 0.0).is_err());
}

/// Teacher-forced log-probability of `words` then `<eos>` (if finished).
fn teacher_forced_log_prob(m: &Captioner, v: &Visual, d: &Decoded) -> f64 {
    let mut row = vec![BOS_ID];
    row.extend_from_slice(&d.tokens);
    let mut targets = d.tokens.clone();
    if d.finished {
        targets.push(EOS_ID);
    } else {
        row.pop();
    }
    let mut g = Graph::new();
    let (mem, n) = m.encode(&mut g, &[v]).unwrap();
    let out = m.decode(&mut g, mem, n, &[row]).unwrap();
    let logits = g.value(out.logits);
    targets
        .iter()
        .enumerate()
        .map(|(t, &w)| {
            let row: Vec<f64> = logits
                .row(t)
                .iter()
                .enumerate()
                .map(|(j, &x)| if NEVER_GENERATED.contains(&(j as u32)) { f64::NEG_INFINITY } else { x })
                .collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            row[w as usize] - lse
        })
        .sum()
}

#[test]
fn sampled_log_prob_matches_teacher_forcing() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for seed in 0..10 {
        let (m, vs) = random_decoder(seed);
        let refs: Vec<&Visual> = vs.iter().collect();
        let scorer = ModelScorer::new(&m, &refs).unwrap();
        let samples = sample_decode(&scorer, &[0, 1, 1, 0], 1.0, &mut rng).unwrap();
        for (d, &i) in samples.iter().zip(&[0usize, 1, 1, 0]) {
            assert!(d.tokens.iter().all(|t| !NEVER_GENERATED.contains(t) && *t != EOS_ID));
            let tf = teacher_forced_log_prob(&m, &vs[i], d);
            assert!((d.log_prob - tf).abs() < 1e-10, "{} vs {tf}", d.log_prob);
        }
        let hot = sample_decode(&scorer, &[0], 0.5, &mut rng).unwrap().remove(0);
        let mut path = hot.tokens.clone();
        if hot.finished {
            path.push(EOS_ID);
        }
        assert_eq!(hot.log_prob, sequence_log_prob(&scorer, 0, &path, 0.5).unwrap());
    }
    let (m, vs) = random_decoder(0);
    assert!(sample_decode(&ModelScorer::new(&m, &[&vs[0]]).unwrap(), &[0], 0.0, &mut rng).is_err());
}

#[test]
fn ensemble_identities() {
    let (m, vs) = random_decoder(3);
    let refs: Vec<&Visual> = vs.iter().collect();
    let single = ModelScorer::new(&m, &refs).unwrap();
    let one = EnsembleScorer::new(&[&m], &[refs.clone()]).unwrap();
    let three = EnsembleScorer::new(&[&m, &m, &m], &[refs.clone(), refs.clone(), refs.clone()]).unwrap();
    assert_eq!(greedy_decode(&one, 2).unwrap(), greedy_decode(&single, 2).unwrap());
    let a = greedy_decode(&single, 2).unwrap();
    let b = greedy_decode(&three, 2).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.tokens, y.tokens);
        assert!((x.log_prob - y.log_prob).abs() < 1e-12);
    }
    assert_eq!(beam_decode(&one, 1, 3, 0.0).unwrap(), beam_decode(&single, 1, 3, 0.0).unwrap());
}

#[test]
fn ensemble_averages_distributions() {
    // Two models confident about different words.
    let (mut a, vs) = random_decoder(5);
    let (mut b, _) = random_decoder(6);
    for (m, word) in [(&mut a, 4usize), (&mut b, 5)] {
        let ob = m.params().id("dec.out.b").unwrap();
        m.params_mut().get_mut(ob).tensor.data_mut()[word] = 30.0;
    }
    let refs: Vec<&Visual> = vs.iter().collect();
    let prefixes = vec![vec![BOS_ID, 6], vec![BOS_ID, 4]];
    let pa = ModelScorer::new(&a, &refs).unwrap().next_log_probs(&[0, 1], &prefixes).unwrap();
    let pb = ModelScorer::new(&b, &refs).unwrap().next_log_probs(&[0, 1], &prefixes).unwrap();
    let ens = EnsembleScorer::new(&[&a, &b], &[refs.clone(), refs.clone()]).unwrap();
    let pe = ens.next_log_probs(&[0, 1], &prefixes).unwrap();
    for r in 0..2 {
        for j in 0..7 {
            let mean = 0.5 * (pa[r][j].exp() + pb[r][j].exp());
            assert!((pe[r][j].exp() - mean).abs() < 1e-12);
        }
    }
    assert!(pa[0][4].exp() > 0.99 && pb[0][5].exp() > 0.99);

    let mut cfg = b.config().clone();
    cfg.vocab_size = 8;
    let other = model(cfg, &[0], &[3], 4);
    assert!(EnsembleScorer::new(&[&a, &other], &[refs.clone(), refs]).is_err());
}

#[test]
fn attention_maps_have_one_distribution_per_word() {
    let (m, vs) = random_decoder(1);
    let maps = attention_maps(&m, &vs[0], &[4, 5, 6]).unwrap();
    assert_eq!(maps.len(), 3);
    for row in maps {
        assert_eq!(row.len(), 3);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn checkpoint_round_trip() {
    let m = toy_encoder_model(8, "3", 2);
    let ckpt = m.to_checkpoint(serde_json::json!({"epoch": 3}), vec![("adam/m".into(), Tensor::zeros(&[2]))]).unwrap();
    let bytes = ckpt.to_bytes(Dtype::F64).unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    let restored = Captioner::from_checkpoint(&back).unwrap();
    assert_eq!(restored.params().len(), m.params().len());
    for ((_, p), (_, q)) in restored.params().iter().zip(m.params().iter()) {
        assert_eq!(p.name, q.name);
        assert_eq!(p.tensor, q.tensor);
        assert_eq!(p.frozen, q.frozen);
    }
    assert_eq!(restored.config(), m.config());
    assert_eq!(back.meta["extra"]["epoch"], 3);

    let f32_back = Checkpoint::from_bytes(&ckpt.to_bytes(Dtype::F32).unwrap()).unwrap();
    let t = &f32_back.tensor("param/dec.tok").unwrap();
    assert!(t.max_abs_diff(ckpt.tensor("param/dec.tok").unwrap()) < 1e-6);

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn checkpoint_with_wrong_shapes_is_rejected() {
    let m = model(config(8, 2, "3", 9, 0), &[0], &[3], 4);
    let mut ckpt = m.to_checkpoint(serde_json::Value::Null, vec![]).unwrap();
    for (name, t) in &mut ckpt.tensors {
        if name == "param/dec.out.b" {
            *t = Tensor::zeros(&[1, 10]);
        }
    }
    assert!(Captioner::from_checkpoint(&ckpt).is_err());
    ckpt.tensors.retain(|(n, _)| n != "param/dec.out.b");
    assert!(Captioner::from_checkpoint(&ckpt).is_err());
}

#[test]
fn dropout_only_acts_in_training_losses() {
    let mut cfg = config(8, 2, "3", 9, 0);
    cfg.dropout = 0.3;
    let m = model(cfg, &[0], &[3], 4);
    let v = grid(3, 8, 1);
    let caps: [&[u32]; 1] = [&[4, 5]];
    let eval = |m: &Captioner| {
        let mut g = Graph::new();
        let l = m.xe_loss(&mut g, &[&v], &caps).unwrap();
        g.value(l).item()
    };
    let train = |seed| {
        let mut g = Graph::new();
        let l = m.xe_loss_train(&mut g, &[&v], &caps, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        g.value(l).item()
    };
    assert_eq!(eval(&m), eval(&m));
    assert_eq!(train(1), train(1));
    assert_ne!(train(1), eval(&m));
    assert_ne!(train(1), train(2));
}

#[test]
fn new_resolves_the_schedule_against_a_tree() {
    use crate::lexicon::{ConceptList, EmbeddingMatrix, Vocabulary};
    use crate::prototype_tree::{build_tree, ClusterConfig};
    let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::from_words(&words).unwrap();
    let concepts = ConceptList::new(words.clone(), &vocab).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let emb = EmbeddingMatrix::new(concepts, Tensor::randn(&[12, 3], 1.0, &mut rng)).unwrap();
    let tree = build_tree(&emb, &[6, 2], &ClusterConfig::default()).unwrap();

    let m = Captioner::new(config(8, 2, "2-6-6", 10, 0), Some(&tree)).unwrap();
    assert_eq!(m.block_levels(), &[1, 0, 0]);
    assert_eq!(m.prototype_params().count(), 2);
    assert!(Captioner::new(config(8, 2, "6-2", 10, 0), Some(&tree)).is_err());
    assert!(Captioner::new(config(8, 2, "5", 10, 0), Some(&tree)).is_err());
    assert!(Captioner::new(config(8, 2, "2", 10, 0), None).is_err());
    Captioner::new(config(8, 2, "none", 10, 0), None).unwrap();
}
