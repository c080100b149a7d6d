use super::layers::*;
use super::*;
use crate::numerics::tests::grad_check;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_graph(n: usize, seed: u64) -> SpatialGraph {
    let mut r = rng(seed);
    let mut adj = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            if r.random_bool(0.6) {
                let w: f64 = r.random_range(0.1..1.0);
                adj.set(&[i, j], w);
                adj.set(&[j, i], w);
            }
        }
    }
    SpatialGraph::from_adjacency((0..n).map(|i| format!("v{i}")).collect(), adj).unwrap()
}

fn tiny_config() -> StsgtConfig {
    StsgtConfig { m: 3, h: 2, n: 4, c_in: 4, heads: 2, d_qkv: 3, mlp_hidden: 8, c_out_hidden: 5, ..Default::default() }
}

fn tiny_model(seed: u64) -> StsgtModel {
    let cfg = tiny_config();
    let g = random_graph(cfg.n, seed);
    let mut model = StsgtModel::new(cfg, g, &mut rng(seed)).unwrap();
    // non-trivial mask so its gradient path is exercised
    let mask = model.mask_ids()[0];
    *model.params_mut().get_mut(mask) = Tensor::uniform(&[12, 12], 1.0, &mut rng(seed + 1)).map(|v| 1.0 + 0.5 * v);
    model
}

fn input(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut rng(seed))
}

#[test]
fn input_projection_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[1, 1, 1, 1], 3.0));
    let w = t.constant(Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap());
    let b = t.constant(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
    let y = input_projection(&mut t, x, w, b).unwrap();
    assert_eq!(t.value(y).data(), &[3.0, -2.0]);

    let x = t.constant(Tensor::zeros(&[16, 12, 51, 1]));
    let w = t.constant(Tensor::uniform(&[1, 16], 1.0, &mut rng(0)));
    let b = t.constant(Tensor::zeros(&[16]));
    let y = input_projection(&mut t, x, w, b).unwrap();
    assert_eq!(t.shape(y), &[16, 12, 51, 16]);
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn encodings_broadcast_structure() {
    let (m, n, c) = (3, 4, 2);
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[2, m, n, c]));
    let te = Tensor::uniform(&[m, 1, c], 1.0, &mut rng(1));
    let se = Tensor::uniform(&[1, n, c], 1.0, &mut rng(2));
    let (tv, sv) = (t.constant(te.clone()), t.constant(se.clone()));
    let y = add_encodings(&mut t, x, tv, sv).unwrap();
    let out = t.value(y);
    for b in 0..2 {
        for s in 0..m {
            for p in 0..n {
                for k in 0..c {
                    let want = te.get(&[s, 0, k]) + se.get(&[0, p, k]);
                    assert_eq!(out.get(&[b, s, p, k]), want);
                }
            }
        }
    }
    let zeros = (t.constant(Tensor::zeros(&[m, 1, c])), t.constant(Tensor::zeros(&[1, n, c])));
    let x = input(&[2, m, n, c], 3);
    let xv = t.constant(x.clone());
    let y = add_encodings(&mut t, xv, zeros.0, zeros.1).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn encoding_gradient_matches_finite_differences() {
    let x = input(&[2, 3, 4, 2], 4);
    let err = grad_check(&[x, input(&[3, 1, 2], 5), input(&[1, 4, 2], 6)], |t, v| add_encodings(t, v[0], v[1], v[2]));
    assert!(err < 1e-4, "{err}");

    // d(sum)/d T_enc[t] = number of (batch, vertex) positions at step t
    let mut t = Tape::new();
    let x = t.constant(input(&[2, 3, 4, 2], 4));
    let te = t.param(Tensor::zeros(&[3, 1, 2]));
    let se = t.constant(Tensor::zeros(&[1, 4, 2]));
    let y = add_encodings(&mut t, x, te, se).unwrap();
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert!(g.get(te).unwrap().data().iter().all(|&v| v == 8.0));
}

#[test]
fn attention_head_examples() {
    // zero Q/K weights: uniform scores, every row the column mean of V
    let mut t = Tape::new();
    let x = t.constant(input(&[5, 3], 7));
    let z = t.constant(Tensor::zeros(&[3, 2]));
    let wv = t.constant(input(&[3, 2], 8));
    let l = attention_head(&mut t, x, z, z, wv).unwrap();
    let s = t.attention_scores(l).unwrap();
    assert!(s.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    let v = t.matmul(x, wv).unwrap();
    let vv = t.value(v).clone();
    for r in 0..5 {
        for k in 0..2 {
            let mean = (0..5).map(|i| vv.get(&[i, k])).sum::<f64>() / 5.0;
            assert!((t.value(l).get(&[r, k]) - mean).abs() < 1e-12);
        }
    }

    // singleton
    let x = t.constant(input(&[1, 3], 9));
    let (wq, wk) = (t.constant(input(&[3, 2], 10)), t.constant(input(&[3, 2], 11)));
    let l = attention_head(&mut t, x, wq, wk, wv).unwrap();
    let v = t.matmul(x, wv).unwrap();
    assert_eq!(t.attention_scores(l).unwrap().data(), &[1.0]);
    assert!(t.value(l).max_abs_diff(t.value(v)) < 1e-15);

    // closed form, d = 1
    let q = t.constant(Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap());
    let v = t.constant(Tensor::from_rows(&[vec![2.0], vec![4.0]]).unwrap());
    let l = t.attention(q, q, v, 1.0).unwrap();
    let e = std::f64::consts::E;
    let s0 = [e / (e + 1.0), 1.0 / (e + 1.0)];
    let sc = t.attention_scores(l).unwrap();
    assert!((sc.get(&[0, 0]) - s0[0]).abs() < 1e-12 && (sc.get(&[0, 1]) - s0[1]).abs() < 1e-12);
    assert!((t.value(l).get(&[0, 0]) - (2.0 * s0[0] + 4.0 * s0[1])).abs() < 1e-12);
    assert!((t.value(l).get(&[0, 0]) - 2.538).abs() < 1e-3);
}

fn block_vars(t: &mut Tape, c: usize, heads: usize, d: usize, hidden: usize, seed: u64) -> BlockVars {
    let mut r = rng(seed);
    let mut p = |t: &mut Tape, shape: &[usize]| t.param(Tensor::uniform(shape, 0.5, &mut r));
    BlockVars {
        ln1: (p(t, &[c]), p(t, &[c])),
        heads: (0..heads).map(|_| (p(t, &[c, d]), p(t, &[c, d]), p(t, &[c, d]))).collect(),
        merge: (p(t, &[heads * d, c]), p(t, &[c])),
        ln2: (p(t, &[c]), p(t, &[c])),
        mlp: vec![
            (p(t, &[c, hidden]), p(t, &[hidden])),
            (p(t, &[hidden, hidden]), p(t, &[hidden])),
            (p(t, &[hidden, c]), p(t, &[c])),
        ],
        gcn: (p(t, &[c, c]), p(t, &[c])),
    }
}

#[test]
fn stst_block_shape_and_zero_weight_identity() {
    let mut t = Tape::new();
    let mut vars = block_vars(&mut t, 16, 2, 16, 32, 1);
    let x = t.constant(input(&[2, 24, 16], 2));
    let (y, att) = stst_block(&mut t, x, &vars).unwrap();
    assert_eq!(t.shape(y), &[2, 24, 16]);
    assert_eq!(att.len(), 2);

    vars.merge = (t.constant(Tensor::zeros(&[32, 16])), t.constant(Tensor::zeros(&[16])));
    vars.mlp[2] = (t.constant(Tensor::zeros(&[32, 16])), t.constant(Tensor::zeros(&[16])));
    let (y, _) = stst_block(&mut t, x, &vars).unwrap();
    assert_eq!(t.value(y), t.value(x));
}

#[test]
fn stst_block_gradient_wrt_query_weights() {
    let (c, d) = (4, 3);
    let x = input(&[2, 6, c], 3);
    let wq = input(&[c, d], 4);
    let err = grad_check(&[x, wq], |t, v| {
        let mut vars = block_vars(t, c, 2, d, 8, 5);
        vars.heads[0].0 = v[1];
        Ok(stst_block(t, v[0], &vars)?.0)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gcn_examples() {
    let mut t = Tape::new();
    let x = t.constant(input(&[3, 2], 1).map(f64::abs));
    let i3 = t.constant(Tensor::eye(3));
    let i2 = t.constant(Tensor::eye(2));
    let zb = t.constant(Tensor::zeros(&[2]));
    let y = gcn_layer(&mut t, x, i3, i2, zb).unwrap();
    assert_eq!(t.value(y), t.value(x));

    let z = t.constant(Tensor::zeros(&[3, 2]));
    let b = t.constant(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
    let y = gcn_layer(&mut t, z, i3, i2, b).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 2.0, 0.0, 2.0, 0.0, 2.0]);

    let a = t.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
    let x = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let y = gcn_layer(&mut t, x, a, i2, zb).unwrap();
    assert_eq!(t.value(y).data(), &[3.0, 4.0, 1.0, 2.0]);

    let err = grad_check(&[input(&[2, 3, 2], 2), input(&[3, 3], 3), input(&[2, 2], 4), input(&[2], 5)], |t, v| {
        gcn_layer(t, v[0], v[1], v[2], v[3])
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn output_head_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[16, 12, 51, 16]));
    let w1 = t.constant(input(&[192, 64], 1));
    let b1 = t.constant(Tensor::zeros(&[64]));
    let w2 = t.constant(input(&[64, 12], 2));
    let b2 = t.constant(Tensor::zeros(&[12]));
    let y = output_head(&mut t, x, w1, b1, w2, b2).unwrap();
    assert_eq!(t.shape(y), &[16, 12, 51]);
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));

    let w2 = t.constant(input(&[64, 1], 3));
    let b2 = t.constant(Tensor::zeros(&[1]));
    let y = output_head(&mut t, x, w1, b1, w2, b2).unwrap();
    assert_eq!(t.shape(y), &[16, 1, 51]);

    let err = grad_check(
        &[input(&[2, 3, 4, 2], 4), input(&[6, 5], 5), input(&[5], 6), input(&[5, 2], 7), input(&[2], 8)],
        |t, v| output_head(t, v[0], v[1], v[2], v[3], v[4]),
    );
    assert!(err < 1e-4, "{err}");
}

#[test]
fn parameter_shapes_and_init() {
    let cfg = StsgtConfig::default();
    let model = StsgtModel::new(cfg.clone(), random_graph(51, 1), &mut rng(1)).unwrap();
    let p = model.params();
    assert_eq!(p.by_name("mask").unwrap(), &Tensor::ones(&[612, 612]));
    assert_eq!(p.by_name("t_enc").unwrap().shape(), &[12, 1, 16]);
    assert_eq!(p.by_name("s_enc").unwrap().shape(), &[1, 51, 16]);
    assert_eq!(p.by_name("head.0.weight").unwrap().shape(), &[192, 64]);
    assert_eq!(p.by_name("layers.1.blocks.1.attn.1.w_q").unwrap().shape(), &[16, 16]);
    assert_eq!(p.by_name("layers.0.blocks.0.mlp.1.weight").unwrap().shape(), &[32, 32]);
    let bound = 1.0 / 192f64.sqrt();
    assert!(p.by_name("head.0.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
    assert!(p.by_name("head.0.bias").unwrap().data().iter().all(|&v| v == 0.0));
    let enc = p.by_name("s_enc").unwrap();
    let sd = (enc.sq_norm() / enc.numel() as f64).sqrt();
    assert!((sd - 0.02).abs() < 0.004, "{sd}");
    assert_eq!(model.mask_ids().len(), 1);

    let per_block = StsgtConfig { per_block_mask: true, ..cfg };
    let model = StsgtModel::new(per_block, random_graph(51, 1), &mut rng(1)).unwrap();
    assert_eq!(model.mask_ids().len(), 4);
}

#[test]
fn forward_is_deterministic_and_scores_stochastic() {
    let cfg = tiny_config();
    let a = StsgtModel::new(cfg.clone(), random_graph(4, 3), &mut rng(9)).unwrap();
    let b = StsgtModel::new(cfg, random_graph(4, 3), &mut rng(9)).unwrap();
    let x = input(&[3, 3, 4, 1], 10);
    let (pa, pb) = (a.predict(&x).unwrap(), b.predict(&x).unwrap());
    assert_eq!(pa.shape(), &[3, 2, 4]);
    assert!(pa.data().iter().zip(pb.data()).all(|(u, v)| u.to_bits() == v.to_bits()));

    let mut t = Tape::new();
    let fwd = a.forward(&mut t, &x, false).unwrap();
    assert_eq!(fwd.attention.len(), 8);
    for &v in &fwd.attention {
        let s = t.attention_scores(v).unwrap();
        for row in s.data().chunks(12) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    // fresh mask leaves the synchronous adjacency untouched
    assert_eq!(t.value(fwd.adjacency[0]), a.sync_adjacency());
}

#[test]
fn vertex_permutation_equivariance() {
    let cfg = StsgtConfig { n: 5, ..tiny_config() };
    let mut model = StsgtModel::new(cfg, random_graph(5, 11), &mut rng(11)).unwrap();
    let mask = model.mask_ids()[0];
    *model.params_mut().get_mut(mask) = Tensor::uniform(&[15, 15], 1.0, &mut rng(12));
    let perm = [3, 0, 4, 1, 2];
    let permuted = model.permuted_vertices(&perm).unwrap();
    let x = input(&[2, 3, 5, 1], 13);
    let mut xp = Tensor::zeros(x.shape());
    for b in 0..2 {
        for t in 0..3 {
            for (i, &p) in perm.iter().enumerate() {
                xp.set(&[b, t, i, 0], x.get(&[b, t, p, 0]));
            }
        }
    }
    let y = model.predict(&x).unwrap();
    let yp = permuted.predict(&xp).unwrap();
    for b in 0..2 {
        for h in 0..2 {
            for (i, &p) in perm.iter().enumerate() {
                assert!((yp.get(&[b, h, i]) - y.get(&[b, h, p])).abs() < 1e-12);
            }
        }
    }
}

/// Loss of the full tiny model in raw units against a fixed target.
fn model_loss(model: &StsgtModel, x: &Tensor, target: &Tensor, track: bool) -> (Tape, Forward, Var) {
    let mut t = Tape::new();
    let fwd = model.forward(&mut t, x, track).unwrap();
    let pred = t.scale_shift(fwd.output, 3.0, 1.5);
    let loss = t.mae_loss(pred, target).unwrap();
    (t, fwd, loss)
}

#[test]
fn full_model_gradient_check() {
    let model = tiny_model(21);
    let x = input(&[2, 3, 4, 1], 22);
    let target = input(&[2, 2, 4], 23).map(|v| 5.0 * v);
    let (t, fwd, loss) = model_loss(&model, &x, &target, true);
    let grads = t.backward(loss).unwrap();
    let mut r = rng(24);
    let eps = 1e-6;
    let mut checked = 0;
    while checked < 20 {
        let pi = r.random_range(0..model.params().len());
        let len = model.params().tensors()[pi].numel();
        let j = r.random_range(0..len);
        let analytic = grads.get(fwd.params[pi]).unwrap().data()[j];
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.params_mut().tensors_mut()[pi].data_mut()[j] += delta;
            let (t, _, l) = model_loss(&m, &x, &target, false);
            t.value(l).data()[0]
        };
        let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < 1e-9 { 0.0 } else { (analytic - numeric).abs() / scale };
        assert!(rel < 1e-3, "{} [{j}]: analytic {analytic} numeric {numeric}", model.params().names()[pi]);
        checked += 1;
    }
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let model = tiny_model(31);
    let stats = vec![crate::data::NormStats { mean: 2.5, std: 0.5, scope: crate::data::SplitName::Train }];
    let meta = [("note".to_string(), "x".to_string())].into_iter().collect();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &model, &stats, &meta).unwrap();
    assert_eq!(&buf[..8], b"STSGTCKP");
    let ck = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(ck.model.params(), model.params());
    assert_eq!(ck.model.graph(), model.graph());
    assert_eq!(ck.norm_stats, stats);
    assert_eq!(ck.metadata, meta);
    assert!(ck.compatibility(model.config()).is_empty());
    let other = StsgtConfig { c_in: 8, ..model.config().clone() };
    assert_eq!(ck.compatibility(&other).len(), 1);

    let mut wrong = ParamStore::new();
    wrong.add("mask", Tensor::ones(&[2, 2]));
    match StsgtModel::from_params(model.config().clone(), model.graph().clone(), wrong) {
        Err(Error::CheckpointMismatch(lines)) => assert!(lines.iter().any(|l| l.starts_with("mask: expected shape"))),
        other => panic!("{other:?}"),
    }
    assert!(read_checkpoint(&buf[..30]).is_err());
    assert!(read_checkpoint(&b"garbage"[..]).is_err());
}

#[test]
#[ignore = "wall-clock budget for one laptop core; run with --ignored on an idle machine"]
fn default_forward_within_one_second() {
    let model = StsgtModel::new(StsgtConfig::default(), random_graph(51, 41), &mut rng(41)).unwrap();
    let x = input(&[16, 12, 51, 1], 42);
    model.predict(&x).unwrap();
    let start = std::time::Instant::now();
    let y = model.predict(&x).unwrap();
    let elapsed = start.elapsed();
    assert_eq!(y.shape(), &[16, 12, 51]);
    assert!(elapsed.as_secs_f64() < 1.0, "forward took {elapsed:?}");
}
