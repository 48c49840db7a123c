use mthu::datamodel::{validate_abundance, AbundanceSequence, HyperCubeSequence};
use mthu::exec::Exec;
use mthu::metrics::nrmse_y;
use mthu::nn::model::{
    abundance_head, cem, decode, encode, forward, spatial_block, spectral_attention, temporal_block, tokenize,
    LEAKY_SLOPE,
};
use mthu::nn::{
    for_each_spatial_row, for_each_temporal_row, infer, load_checkpoint, save_checkpoint, ArchitectureConfig,
    CemMode, DataDims, Graph, ModelParameters, ModuleSwitches, Tensor, BN_EPS,
};
use mthu::objective::LossWeights;
use mthu::synthgen::{generate_synthetic1, Synth1Config};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arch(d: usize, heads: usize, p: usize) -> ArchitectureConfig {
    ArchitectureConfig { channels: 4, embed_dim: d, heads, depth: 1, endmembers: p, ..ArchitectureConfig::default() }
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn lrelu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn encoder_shape_determinism_and_zero_input() {
    let dims = DataDims { phases: 3, bands: 5, height: 6, width: 4 };
    let mut params = ModelParameters::init(&arch(8, 2, 2), dims, 1).unwrap();
    let x = random_tensor(&[3, 5, 6, 4], 0.0, 1.0, 2);
    let run = |params: &ModelParameters, x: &Tensor| {
        let mut g = Graph::new(Exec::Sequential);
        let b = params.bind(&mut g);
        let xv = g.constant(x.clone());
        let h = encode(&mut g, &b, xv, None);
        g.value(h).clone()
    };
    let a = run(&params, &x);
    assert_eq!(a.shape(), &[3, 4, 6, 4]);
    assert_eq!(a, run(&params, &x));
    for name in ["enc.conv1.bias", "enc.conv2.bias"] {
        params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let z = run(&params, &Tensor::zeros([3, 5, 6, 4]));
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn dropout_only_in_train_mode() {
    let dims = DataDims { phases: 2, bands: 4, height: 4, width: 4 };
    let params = ModelParameters::init(&ArchitectureConfig { dropout: 0.5, ..arch(8, 2, 2) }, dims, 3).unwrap();
    let x = random_tensor(&[2, 4, 4, 4], 0.0, 1.0, 4);
    let run = |rng: Option<&mut ChaCha8Rng>| {
        let mut g = Graph::new(Exec::Sequential);
        let b = params.bind(&mut g);
        let xv = g.constant(x.clone());
        let h = encode(&mut g, &b, xv, rng);
        g.value(h).clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let train = run(Some(&mut rng));
    let eval = run(None);
    assert_ne!(train, eval);
    assert!(train.data().iter().filter(|&&v| v == 0.0).count() > 10);
}

#[test]
fn tokenize_counts_identity_and_order() {
    let dims = DataDims { phases: 2, bands: 3, height: 2, width: 2 };
    let mut params = ModelParameters::init(&arch(4, 1, 2), dims, 5).unwrap();
    params.get_mut("tok.proj.bias").unwrap().data_mut().fill(0.0);
    params.get_mut("tok.cls").unwrap().data_mut().fill(0.0);
    let pos = params.get("tok.pos").unwrap().clone();
    let mut g = Graph::new(Exec::Sequential);
    let b = params.bind(&mut g);
    let zero = g.constant(Tensor::zeros([2, 4, 2, 2]));
    let z = tokenize(&mut g, &b, zero);
    assert_eq!(g.shape(z), &[2, 5, 4]);
    assert_eq!(g.value(z), &pos);

    // one marked pixel (row 1, col 0) lands on token 1 + 1*2 + 0
    let mut marked = Tensor::zeros([2, 4, 2, 2]);
    marked.data_mut()[2] = 1.0;
    let mut params2 = params.clone();
    params2.get_mut("tok.pos").unwrap().data_mut().fill(0.0);
    let mut g = Graph::new(Exec::Sequential);
    let b = params2.bind(&mut g);
    let m = g.constant(marked);
    let z = tokenize(&mut g, &b, m);
    let v = g.value(z);
    for s in 0..5 {
        let nonzero = v.data()[s * 4..(s + 1) * 4].iter().any(|&x| x != 0.0);
        assert_eq!(nonzero, s == 3, "token {s}");
    }
}

#[test]
fn patch_size_two_counts_tokens_and_upsamples() {
    let dims = DataDims { phases: 2, bands: 3, height: 4, width: 6 };
    let a = ArchitectureConfig { patch_size: 2, ..arch(4, 2, 3) };
    let params = ModelParameters::init(&a, dims, 6).unwrap();
    let mut g = Graph::new(Exec::Sequential);
    let b = params.bind(&mut g);
    let x = g.constant(random_tensor(&[2, 3, 4, 6], 0.1, 1.0, 7));
    let f = encode(&mut g, &b, x, None);
    let z = tokenize(&mut g, &b, f);
    assert_eq!(g.shape(z), &[2, 1 + 2 * 3, 4]);
    let out = forward(&mut g, &b, x, &ModuleSwitches::default(), None);
    assert_eq!(g.shape(out.abundances), &[2, 3, 4, 6]);
    assert!(ModelParameters::init(&a, DataDims { width: 5, ..dims }, 0).is_err());
}

/// `[T, S, 3D]` tensor from per-token (q, k, v) triples.
fn qkv(t: usize, s: usize, rows: &[([f64; 2], [f64; 2], [f64; 2])]) -> Tensor {
    let data = rows.iter().flat_map(|(q, k, v)| q.iter().chain(k).chain(v).copied().collect::<Vec<_>>()).collect();
    Tensor::new([t, s, 6], data)
}

fn softmax_mix(q: [f64; 2], keys: &[[f64; 2]], values: &[[f64; 2]]) -> [f64; 2] {
    let logits: Vec<f64> = keys.iter().map(|k| (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt()).collect();
    let e: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
    let z: f64 = e.iter().sum();
    let mut o = [0.0; 2];
    for (w, v) in e.iter().zip(values) {
        o[0] += w / z * v[0];
        o[1] += w / z * v[1];
    }
    o
}

#[test]
fn temporal_attention_hand_oracle() {
    // tokens (t, s): (0,0) cls, (0,1) pixel, (1,0) cls, (1,1) pixel
    let rows = [
        ([1.0, 0.0], [0.5, 0.0], [1.0, 2.0]),
        ([0.0, 1.0], [0.0, 1.0], [3.0, 0.0]),
        ([1.0, 1.0], [1.0, 0.0], [0.0, 1.0]),
        ([2.0, 0.0], [1.0, 1.0], [2.0, 2.0]),
    ];
    let t = qkv(2, 2, &rows);
    let mut g = Graph::new(Exec::Sequential);
    let v = g.constant(t);
    let out = g.temporal_attention(v, 1);
    let o = g.value(out).data().to_vec();
    let (k, val) = (|i: usize| rows[i].1, |i: usize| rows[i].2);
    // pixel (1,1): keys cls_1, (0,1), (1,1) -> logits sqrt2, 0, sqrt2
    let z = 2.0 * 2f64.sqrt().exp() + 1.0;
    let w = [2f64.sqrt().exp() / z, 1.0 / z, 2f64.sqrt().exp() / z];
    let manual = [w[0] * 0.0 + w[1] * 3.0 + w[2] * 2.0, w[0] * 1.0 + w[1] * 0.0 + w[2] * 2.0];
    assert!(close(&o[6..8], &manual, 1e-12));
    // remaining queries against the same rule
    assert!(close(&o[0..2], &softmax_mix(rows[0].0, &[k(0), k(2)], &[val(0), val(2)]), 1e-12));
    assert!(close(&o[2..4], &softmax_mix(rows[1].0, &[k(0), k(1), k(3)], &[val(0), val(1), val(3)]), 1e-12));
    assert!(close(&o[4..6], &softmax_mix(rows[2].0, &[k(0), k(2)], &[val(0), val(2)]), 1e-12));
}

#[test]
fn temporal_single_phase_identical_keys_split_evenly() {
    let rows = [([0.3, -0.2], [1.0, 1.0], [0.0, 0.0]), ([0.7, 0.1], [1.0, 1.0], [1.0, 1.0])];
    let t = qkv(1, 2, &rows);
    let mut seen = 0;
    for_each_temporal_row(&t, 1, |_, _, s, w| {
        if s == 1 {
            assert!(close(w, &[0.5, 0.5], 1e-15));
            seen += 1;
        }
    });
    assert_eq!(seen, 1);
}

#[test]
fn spatial_attention_hand_oracle() {
    // one phase: cls + two pixels
    let rows = [
        ([1.0, 0.0], [0.0, 1.0], [1.0, 0.0]),
        ([0.5, 0.5], [1.0, 0.0], [0.0, 1.0]),
        ([0.0, 2.0], [1.0, -1.0], [2.0, 3.0]),
    ];
    let t = qkv(1, 3, &rows);
    let mut g = Graph::new(Exec::Sequential);
    let v = g.constant(t.clone());
    let out = g.spatial_attention(v, 1);
    let o = g.value(out).data().to_vec();
    let keys = [rows[0].1, rows[1].1, rows[2].1];
    let vals = [rows[0].2, rows[1].2, rows[2].2];
    for (i, row) in rows.iter().enumerate() {
        assert!(close(&o[2 * i..2 * i + 2], &softmax_mix(row.0, &keys, &vals), 1e-12), "query {i}");
    }
    // a single pixel splits its weight between itself and the class token
    let single = qkv(1, 2, &rows[..2]);
    for_each_spatial_row(&single, 1, |_, _, _, w| {
        assert_eq!(w.len(), 2);
        assert!((w[0] + w[1] - 1.0).abs() < 1e-12);
    });
}

#[test]
fn spatial_block_is_permutation_equivariant() {
    let dims = DataDims { phases: 2, bands: 3, height: 2, width: 3 };
    let params = ModelParameters::init(&arch(8, 2, 2), dims, 8).unwrap();
    let z = random_tensor(&[2, 7, 8], -1.0, 1.0, 9);
    let perm = [0usize, 4, 2, 6, 1, 5, 3]; // cls stays first
    let permute = |t: &Tensor| {
        let mut out = t.clone();
        for ph in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                let (a, b) = ((ph * 7 + dst) * 8, (ph * 7 + src) * 8);
                out.data_mut()[a..a + 8].copy_from_slice(&t.data()[b..b + 8]);
            }
        }
        out
    };
    let run = |z: Tensor| {
        let mut g = Graph::new(Exec::Sequential);
        let b = params.bind(&mut g);
        let zv = g.constant(z);
        let (out, _) = spatial_block(&mut g, &b, 0, zv);
        assert_eq!(g.shape(out), &[2, 7, 8]);
        g.value(out).clone()
    };
    let a = permute(&run(z.clone()));
    let b = run(permute(&z));
    assert!(close(a.data(), b.data(), 1e-12));
}

#[test]
fn residual_blocks_preserve_shape() {
    let dims = DataDims { phases: 3, bands: 3, height: 2, width: 2 };
    let params = ModelParameters::init(&arch(8, 4, 2), dims, 10).unwrap();
    let mut g = Graph::new(Exec::Sequential);
    let b = params.bind(&mut g);
    let z = g.constant(random_tensor(&[3, 5, 8], -1.0, 1.0, 11));
    let (z1, q1) = temporal_block(&mut g, &b, 0, z);
    let (z2, _) = spatial_block(&mut g, &b, 0, z1);
    let z3 = mthu::nn::model::mlp_block(&mut g, &b, 0, z2);
    for v in [z1, z2, z3] {
        assert_eq!(g.shape(v), &[3, 5, 8]);
    }
    assert_eq!(g.shape(q1), &[3, 5, 24]);
}

#[test]
fn spectral_attention_examples() {
    let dims = DataDims { phases: 2, bands: 3, height: 3, width: 3 };
    let mut params = ModelParameters::init(&arch(8, 2, 2), dims, 12).unwrap();
    let map = random_tensor(&[2, 8, 3, 3], -2.0, 2.0, 13);
    let run = |params: &ModelParameters, map: &Tensor| {
        let mut g = Graph::new(Exec::Sequential);
        let b = params.bind(&mut g);
        let m = g.constant(map.clone());
        let (out, w) = spectral_attention(&mut g, &b, m);
        (g.value(out).clone(), g.value(w).clone())
    };
    let (_, w) = run(&params, &map);
    assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));

    // constant-over-space map: avg == max, weights = sigmoid(2 * mlp(c))
    let mut constant = Tensor::zeros([2, 8, 3, 3]);
    let c: Vec<f64> = (0..16).map(|i| 0.1 * i as f64 - 0.7).collect();
    for (plane, &v) in constant.data_mut().chunks_exact_mut(9).zip(&c) {
        plane.fill(v);
    }
    let (_, w) = run(&params, &constant);
    let (w1, b1) = (params.get("spec.fc1.weight").unwrap(), params.get("spec.fc1.bias").unwrap());
    let (w2, b2) = (params.get("spec.fc2.weight").unwrap(), params.get("spec.fc2.bias").unwrap());
    let hid = b1.len();
    for t in 0..2 {
        let x = &c[t * 8..(t + 1) * 8];
        let h: Vec<f64> =
            (0..hid).map(|j| lrelu(b1.data()[j] + (0..8).map(|i| x[i] * w1.data()[i * hid + j]).sum::<f64>())).collect();
        for o in 0..8 {
            let m = b2.data()[o] + (0..hid).map(|j| h[j] * w2.data()[j * 8 + o]).sum::<f64>();
            assert!((w.data()[t * 8 + o] - sigmoid(2.0 * m)).abs() < 1e-12);
        }
    }

    // zero MLP output -> every weight 1/2
    params.get_mut("spec.fc2.weight").unwrap().data_mut().fill(0.0);
    params.get_mut("spec.fc2.bias").unwrap().data_mut().fill(0.0);
    let (out, w) = run(&params, &map);
    assert!(w.data().iter().all(|&v| v == 0.5));
    let half: Vec<f64> = map.data().iter().map(|v| 0.5 * v).collect();
    assert!(close(out.data(), &half, 0.0));
}

fn cem_run(params: &ModelParameters, maps: &Tensor, cls: &Tensor, mode: CemMode) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new(Exec::Sequential);
    let b = params.bind(&mut g);
    let m = g.constant(maps.clone());
    let c = g.constant(cls.clone());
    let (c2, gate) = cem(&mut g, &b, m, c, mode);
    (g.value(c2).data().to_vec(), g.value(gate).data().to_vec())
}

#[test]
fn cem_alpha_zero_and_gate_bounds() {
    let dims = DataDims { phases: 4, bands: 3, height: 5, width: 5 };
    let maps = random_tensor(&[4, 8, 5, 5], -1.0, 1.0, 14);
    let cls = random_tensor(&[4, 8], -1.0, 1.0, 15);
    let zero = ModelParameters::init(&ArchitectureConfig { alpha: 0.0, ..arch(8, 2, 2) }, dims, 16).unwrap();
    let (c, _) = cem_run(&zero, &maps, &cls, CemMode::A1TimesA2);
    assert_eq!(c, cls.data());
    let params = ModelParameters::init(&arch(8, 2, 2), dims, 16).unwrap();
    for mode in [CemMode::A1, CemMode::A2, CemMode::A1TimesA2] {
        let (c, gate) = cem_run(&params, &maps, &cls, mode);
        assert_eq!(&c[..8], &cls.data()[..8]);
        for k in 0..3 {
            assert!(gate[k] > 0.0 && gate[k] < 1.0);
            let factor = c[(k + 1) * 8] / cls.data()[(k + 1) * 8];
            assert!(factor > 1.0 && factor < 1.5, "factor {factor}");
            assert!((factor - (1.0 + 0.5 * gate[k])).abs() < 1e-12);
        }
    }
}

#[test]
fn cem_hand_oracle_single_channel() {
    let dims = DataDims { phases: 2, bands: 3, height: 2, width: 2 };
    let mut params = ModelParameters::init(&arch(1, 1, 2), dims, 17).unwrap();
    let set = |p: &mut ModelParameters, name: &str, f: &dyn Fn(usize) -> f64| {
        for (i, v) in p.get_mut(name).unwrap().data_mut().iter_mut().enumerate() {
            *v = f(i);
        }
    };
    // 3x3: centre tap 2, bias 0.1. 7x7: centre -1, right neighbour +1, bias 0.
    set(&mut params, "cem.conv3.weight", &|i| if i == 4 { 2.0 } else { 0.0 });
    set(&mut params, "cem.conv3.bias", &|_| 0.1);
    set(&mut params, "cem.conv7.weight", &|i| match i {
        24 => -1.0,
        25 => 1.0,
        _ => 0.0,
    });
    set(&mut params, "cem.conv7.bias", &|_| 0.0);
    set(&mut params, "cem.fuse3.weight", &|_| 1.5);
    set(&mut params, "cem.fuse3.bias", &|_| -0.2);
    set(&mut params, "cem.fuse7.weight", &|_| -0.5);
    set(&mut params, "cem.fuse7.bias", &|_| 0.3);
    let t0 = [0.2, -0.4, 0.6, 0.0];
    let t1 = [1.0, 0.5, -0.5, 2.0];
    let maps = Tensor::new([2, 1, 2, 2], t0.iter().chain(&t1).copied().collect());
    let cls = Tensor::new([2, 1], vec![0.7, -1.2]);

    let bn = |c: [f64; 4]| {
        let mean = c.iter().sum::<f64>() / 4.0;
        let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        c.map(|v| lrelu((v - mean) / (var + BN_EPS).sqrt()))
    };
    let c3 = bn(t1.map(|v| 2.0 * v + 0.1));
    // row-major 2x2: right neighbour of column 1 is zero padding
    let c7 = bn([t1[1] - t1[0], -t1[1], t1[3] - t1[2], -t1[3]]);
    let a1: Vec<f64> = (0..4).map(|i| sigmoid(1.5 * (c3[i] - t0[i]) - 0.2)).collect();
    let a2: Vec<f64> = (0..4).map(|i| sigmoid(-0.5 * (c7[i] - t0[i]) + 0.3)).collect();
    let prod: f64 = (0..4).map(|i| a1[i] * a2[i]).sum::<f64>() / 4.0;
    let (c, gate) = cem_run(&params, &maps, &cls, CemMode::A1TimesA2);
    assert!((gate[0] - prod).abs() < 1e-12);
    assert!((c[1] - (1.0 + 0.5 * prod) * -1.2).abs() < 1e-12);
    let (_, g1) = cem_run(&params, &maps, &cls, CemMode::A1);
    assert!((g1[0] - a1.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    let (_, g2) = cem_run(&params, &maps, &cls, CemMode::A2);
    assert!((g2[0] - a2.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    let (_, gs) = cem_run(&params, &maps, &cls, CemMode::A1PlusA2);
    assert!((gs[0] - (g1[0] + g2[0])).abs() < 1e-12);
}

fn head_run(params: &ModelParameters, map: &Tensor, cls: &Tensor) -> Tensor {
    let mut g = Graph::new(Exec::Sequential);
    let b = params.bind(&mut g);
    let m = g.constant(map.clone());
    let c = g.constant(cls.clone());
    let a = abundance_head(&mut g, &b, m, c);
    g.value(a).clone()
}

#[test]
fn abundance_head_examples() {
    let dims = DataDims { phases: 2, bands: 3, height: 3, width: 4 };
    let mut params = ModelParameters::init(&arch(8, 2, 3), dims, 18).unwrap();
    let map = random_tensor(&[2, 8, 3, 4], -3.0, 3.0, 19);
    let cls = random_tensor(&[2, 8], -1.0, 1.0, 20);
    let a = head_run(&params, &map, &cls);
    let seq = AbundanceSequence::from_f64(2, 3, 3, 4, a.data()).unwrap();
    assert!(validate_abundance(&seq, 1e-5).is_empty());

    let shifted = {
        let mut p = params.clone();
        p.get_mut("head.bias").unwrap().data_mut().iter_mut().for_each(|v| *v += 3.7);
        head_run(&p, &map, &cls)
    };
    assert!(close(a.data(), shifted.data(), 1e-12));
    for t in 0..2 {
        for n in 0..12 {
            let argmax = |x: &Tensor| (0..3).max_by(|&i, &j| x.data()[(t * 3 + i) * 12 + n].total_cmp(&x.data()[(t * 3 + j) * 12 + n]));
            assert_eq!(argmax(&a), argmax(&shifted));
        }
    }

    params.get_mut("head.weight").unwrap().data_mut().fill(0.0);
    params.get_mut("head.bias").unwrap().data_mut().fill(0.25);
    let u = head_run(&params, &map, &cls);
    assert!(u.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn decode_examples() {
    let dims = DataDims { phases: 2, bands: 4, height: 1, width: 3 };
    let params = ModelParameters::init(&arch(4, 1, 2), dims, 21).unwrap();
    let w = params.get("dec.weight").unwrap().clone();
    let run = |a: &Tensor| {
        let mut g = Graph::new(Exec::Sequential);
        let b = params.bind(&mut g);
        let av = g.constant(a.clone());
        let y = decode(&mut g, &b, av);
        g.value(y).clone()
    };
    // pixel 1 one-hot on endmember 1 in phase 1
    let mut a = Tensor::full([2, 2, 1, 3], 0.5);
    a.data_mut()[(2 + 0) * 3 + 1] = 0.0;
    a.data_mut()[(2 + 1) * 3 + 1] = 1.0;
    let y = run(&a);
    for l in 0..4 {
        assert_eq!(y.data()[(4 + l) * 3 + 1], w.data()[(4 + l) * 2 + 1]);
    }
    let a1 = random_tensor(&[2, 2, 1, 3], 0.0, 1.0, 22);
    let a2 = random_tensor(&[2, 2, 1, 3], 0.0, 1.0, 23);
    let mid = Tensor::new([2, 2, 1, 3], a1.data().iter().zip(a2.data()).map(|(p, q)| 0.5 * p + 0.5 * q).collect());
    let (y1, y2, ym) = (run(&a1), run(&a2), run(&mid));
    let avg: Vec<f64> = y1.data().iter().zip(y2.data()).map(|(p, q)| 0.5 * p + 0.5 * q).collect();
    assert!(close(ym.data(), &avg, 1e-14));
}

#[test]
fn decode_with_truth_reproduces_noiseless_mixture() {
    let cfg = Synth1Config { scale_amplitude: (1.0, 1.0), snr_db: None, seed: 3, ..Synth1Config::default() };
    let bundle = generate_synthetic1(&cfg, Exec::Parallel).unwrap();
    let (m, a) = (bundle.gt_endmembers.as_ref().unwrap(), bundle.gt_abundances.as_ref().unwrap());
    let dims = DataDims::of(&bundle.observed);
    let mut params = ModelParameters::init(&arch(4, 1, 3), dims, 0).unwrap();
    params.set_decoders(m).unwrap();
    let mut g = Graph::new(Exec::Parallel);
    let b = params.bind(&mut g);
    let ab: Vec<f64> = a.data().iter().map(|&v| f64::from(v)).collect();
    let av = g.constant(Tensor::new([6, 3, 50, 50], ab));
    let y = decode(&mut g, &b, av);
    let rec = HyperCubeSequence::from_f64(6, 224, 50, 50, g.value(y).data()).unwrap();
    let score = nrmse_y(&bundle.observed, m, a).unwrap();
    assert!(score <= 1e-6, "truth scores {score}");
    let diff = mthu::objective::loss_re(&bundle.observed, &rec).unwrap();
    assert!(diff <= 1e-6, "decoded truth differs by {diff}");
}

fn micro() -> (ModelParameters, Tensor) {
    let dims = DataDims { phases: 2, bands: 6, height: 4, width: 4 };
    let params = ModelParameters::init(&arch(8, 2, 2), dims, 24).unwrap();
    (params, random_tensor(&[2, 6, 4, 4], 0.05, 1.0, 25))
}

#[test]
fn forward_shapes_and_eval_determinism() {
    let (params, x) = micro();
    let run = || {
        let mut g = Graph::new(Exec::Sequential);
        let b = params.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = forward(&mut g, &b, xv, &ModuleSwitches::default(), None);
        assert_eq!(g.shape(out.abundances), &[2, 2, 4, 4]);
        assert_eq!(g.shape(out.reconstruction), &[2, 6, 4, 4]);
        assert_eq!(g.shape(out.decoder), &[2, 6, 2]);
        assert_eq!(out.attention.len(), 2);
        (g.value(out.abundances).clone(), g.value(out.reconstruction).clone())
    };
    assert_eq!(run(), run());
    let seq = HyperCubeSequence::from_f64(2, 6, 4, 4, x.data()).unwrap();
    let pred = infer(&params, &seq, &ModuleSwitches::default(), Exec::Parallel).unwrap();
    assert_eq!(pred.endmembers.phases(), 2);
    assert_eq!(pred.endmembers.bands(), 6);
    assert_eq!(pred.endmembers.endmembers(), 2);
    assert!(validate_abundance(&pred.abundances, 1e-5).is_empty());
}

#[test]
fn switches_change_the_graph() {
    let (params, x) = micro();
    let run = |sw: ModuleSwitches| {
        let mut g = Graph::new(Exec::Sequential);
        let b = params.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = forward(&mut g, &b, xv, &sw, None);
        (out.attention.len(), out.gates.is_some(), out.channel_weights.is_some(), g.value(out.abundances).clone())
    };
    let base = run(ModuleSwitches { use_gam: false, use_cem: false, ..ModuleSwitches::default() });
    assert_eq!((base.0, base.1, base.2), (0, false, false));
    let cem_only = run(ModuleSwitches { use_gam: false, use_cem: true, ..ModuleSwitches::default() });
    assert_eq!((cem_only.0, cem_only.1, cem_only.2), (0, true, false));
    assert_ne!(base.3, cem_only.3);
    let full = run(ModuleSwitches::default());
    assert_eq!((full.0, full.1, full.2), (2, true, true));
}

fn total_loss_and_grads(params: &ModelParameters, x: &Tensor, anchors: &Tensor) -> (f64, Vec<(String, Option<Vec<f64>>)>) {
    let w = LossWeights::default();
    let mut g = Graph::new(Exec::Sequential);
    let b = params.bind(&mut g);
    let xv = g.constant(x.clone());
    let av = g.constant(anchors.clone());
    let out = forward(&mut g, &b, xv, &ModuleSwitches::default(), None);
    let re = g.loss_re(xv, out.reconstruction);
    let sad = g.loss_sad(xv, out.reconstruction).unwrap();
    let sx = g.loss_simplex(out.decoder, av);
    let total = g.weighted_sum(&[(re, w.beta), (sad, w.gamma), (sx, w.lambda_)]);
    let grads = g.backward(total);
    let gs = b.iter().map(|(n, v)| (n.to_string(), grads.get(v).map(|t| t.data().to_vec()))).collect();
    (g.value(total).item(), gs)
}

/// Central differences at a step small enough that no perturbation crosses an
/// activation kink; checks every entry of every parameter.
#[test]
fn micro_model_gradients_match_small_step_finite_differences() {
    let (params, x) = micro();
    let anchors = random_tensor(&[2, 6], 0.2, 0.6, 26);
    let (_, grads) = total_loss_and_grads(&params, &x, &anchors);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, g) in &grads {
        let g = g.as_ref().unwrap_or_else(|| panic!("{name} received no gradient"));
        for (i, &a) in g.iter().enumerate() {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[i] += h;
            let lp = total_loss_and_grads(&p, &x, &anchors).0;
            p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * h;
            let lm = total_loss_and_grads(&p, &x, &anchors).0;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel <= 1e-3, "{name}[{i}]: autodiff {a:e} vs finite difference {fd:e}");
            worst = worst.max(rel);
        }
    }
    println!("worst relative error {worst:.2e}");
}

#[test]
fn checkpoint_round_trip() {
    let (params, x) = micro();
    let dir = tempfile::tempdir().unwrap();
    let sw = ModuleSwitches { use_cem: false, cem_mode: CemMode::A2, ..ModuleSwitches::default() };
    save_checkpoint(dir.path(), &params, &sw).unwrap();
    let (loaded, sw2) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded, params);
    assert_eq!(sw2, sw);
    let seq = HyperCubeSequence::from_f64(2, 6, 4, 4, x.data()).unwrap();
    let a = infer(&params, &seq, &sw, Exec::Sequential).unwrap();
    let b = infer(&loaded, &seq, &sw, Exec::Sequential).unwrap();
    assert_eq!(a.abundances, b.abundances);

    let blob = dir.path().join(mthu::nn::CHECKPOINT_FILE);
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(mthu::Error::Format { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Raising both change-map logits never lowers the gate.
    #[test]
    fn cem_gate_is_monotone(seed in 0u64..10_000, delta in 0.0f64..3.0) {
        let dims = DataDims { phases: 3, bands: 3, height: 4, width: 4 };
        let params = ModelParameters::init(&arch(4, 1, 2), dims, seed).unwrap();
        let maps = random_tensor(&[3, 4, 4, 4], -1.0, 1.0, seed + 1);
        let cls = random_tensor(&[3, 4], -1.0, 1.0, seed + 2);
        let (_, g0) = cem_run(&params, &maps, &cls, CemMode::A1TimesA2);
        let mut raised = params.clone();
        for name in ["cem.fuse3.bias", "cem.fuse7.bias"] {
            raised.get_mut(name).unwrap().data_mut()[0] += delta;
        }
        let (_, g1) = cem_run(&raised, &maps, &cls, CemMode::A1TimesA2);
        for (a, b) in g0.iter().zip(&g1) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn abundances_sum_to_one_for_random_models(seed in 0u64..10_000) {
        let dims = DataDims { phases: 2, bands: 5, height: 3, width: 3 };
        let params = ModelParameters::init(&arch(8, 2, 3), dims, seed).unwrap();
        let x = random_tensor(&[2, 5, 3, 3], 0.0, 1.0, seed);
        let seq = HyperCubeSequence::from_f64(2, 5, 3, 3, x.data()).unwrap();
        let pred = infer(&params, &seq, &ModuleSwitches::default(), Exec::Sequential).unwrap();
        prop_assert!(validate_abundance(&pred.abundances, 1e-5).is_empty());
    }
}
