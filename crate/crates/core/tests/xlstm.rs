use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seglstm::tensor::gradcheck::{gradcheck, GradcheckOptions};
use seglstm::xlstm::{
    mlstm_layer, mlstm_scan, mlstm_step, naive_mlstm_oracle, ForgetGate, MLstmConfig, MLstmParams,
    MLstmState, MLstmVars, ScanDirection,
};
use seglstm::{Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cfg(dim: usize, heads: usize, block: usize, gate: ForgetGate) -> MLstmConfig {
    MLstmConfig {
        dim,
        num_heads: heads,
        qkv_block_size: block,
        forget_gate: gate,
    }
}

/// Params whose gate biases are spread over [-2.5, 2.5] with weights small
/// enough that every pre-activation stays inside [-3, 3] for |x| ≤ 1.
fn bounded_params(c: MLstmConfig, seed: u64) -> MLstmParams {
    let mut r = rng(seed);
    let mut p = MLstmParams::init(c, &mut r).unwrap();
    let w_bound = 0.5 / c.dim as f64;
    for w in [&mut p.igate_w, &mut p.fgate_w] {
        *w = Tensor::uniform(w.shape().to_vec(), -w_bound, w_bound, &mut r);
    }
    for b in [&mut p.igate_b, &mut p.fgate_b] {
        *b = Tensor::uniform(b.shape().to_vec(), -2.5, 2.5, &mut r);
    }
    p.ogate_w = Tensor::uniform([c.dim], -1.0, 1.0, &mut r);
    p.ogate_b = Tensor::uniform([c.dim], -1.0, 1.0, &mut r);
    p
}

fn unit_seq(l: usize, d: usize, seed: u64) -> Tensor {
    Tensor::uniform([l, d], -1.0, 1.0, &mut rng(seed))
}

fn zero_gate_params(c: MLstmConfig) -> MLstmParams {
    let mut p = MLstmParams::init(c, &mut rng(0)).unwrap();
    for t in [
        &mut p.igate_w,
        &mut p.igate_b,
        &mut p.fgate_w,
        &mut p.fgate_b,
        &mut p.ogate_w,
        &mut p.ogate_b,
    ] {
        *t = Tensor::zeros(t.shape().to_vec());
    }
    p
}

#[test]
fn closed_input_gate_writes_nothing() {
    let c = cfg(4, 1, 4, ForgetGate::Exp);
    let mut p = zero_gate_params(c);
    p.igate_b = Tensor::full([1], -1e9);
    let state = MLstmState::new(&c);
    let (h, next) = mlstm_step(&p, &state, &[0.3, -0.2, 0.9, 0.1]).unwrap();
    assert!(h.iter().all(|&v| v == 0.0), "{h:?}");
    assert!(next.effective_memory(0).iter().all(|&v| v == 0.0));
    assert!(next.is_finite());

    let seq = unit_seq(6, 4, 3);
    let out = naive_mlstm_oracle(&p, &seq);
    assert!(out.is_err(), "oracle must refuse unbounded gates");
    let out = mlstm_scan(&p, &seq, ScanDirection::Forward).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_unit_step_is_one_half() {
    let c = MLstmConfig::dense(1);
    let mut p = zero_gate_params(c);
    for w in [&mut p.w_q, &mut p.w_k, &mut p.w_v] {
        *w = Tensor::ones([1, 1, 1]);
    }
    let state = MLstmState::new(&c);
    let (h, next) = mlstm_step(&p, &state, &[1.0]).unwrap();
    assert_eq!(h, vec![0.5]);
    assert_eq!(next.stabilizer(0), 0.0);
    assert_eq!(next.memory(0), &[1.0]);
    assert_eq!(next.normalizer(0), &[1.0]);

    let oracle = naive_mlstm_oracle(&p, &Tensor::ones([1, 1])).unwrap();
    assert_eq!(oracle.data(), &[0.5]);
}

#[test]
fn full_forget_clears_state() {
    let c = cfg(4, 2, 2, ForgetGate::Exp);
    let mut p = bounded_params(c, 5);
    let mut state = MLstmState::new(&c);
    p.step(&mut state, &[0.5, -0.4, 0.3, 0.8]).unwrap();
    assert!(state.effective_memory(0).iter().any(|&v| v != 0.0));
    for t in [&mut p.igate_w, &mut p.fgate_w] {
        *t = Tensor::zeros(t.shape().to_vec());
    }
    p.igate_b = Tensor::full([2], -1e9);
    p.fgate_b = Tensor::full([2], -1e9);
    p.step(&mut state, &[0.1, 0.2, 0.3, 0.4]).unwrap();
    for head in 0..2 {
        assert!(state
            .effective_memory(head)
            .iter()
            .all(|v| v.abs() < 1e-300));
        assert!(state
            .effective_normalizer(head)
            .iter()
            .all(|v| v.abs() < 1e-300));
    }
    assert!(state.is_finite());
}

#[test]
fn step_rejects_wrong_width() {
    let c = cfg(4, 1, 4, ForgetGate::Exp);
    let p = MLstmParams::init(c, &mut rng(1)).unwrap();
    let err = mlstm_step(&p, &MLstmState::new(&c), &[1.0, 2.0]).unwrap_err();
    assert!(err.to_string().contains("mlstm_step"), "{err}");
    assert!(mlstm_scan(&p, &Tensor::zeros([3, 5]), ScanDirection::Forward).is_err());
    let other = MLstmState::new(&cfg(4, 2, 4, ForgetGate::Exp));
    assert!(mlstm_step(&p, &other, &[0.0; 4]).is_err());
}

#[test]
fn invalid_config_is_rejected() {
    assert!(MLstmParams::init(cfg(6, 4, 2, ForgetGate::Exp), &mut rng(0)).is_err());
    assert!(MLstmParams::init(cfg(6, 2, 4, ForgetGate::Exp), &mut rng(0)).is_err());
    assert!(MLstmParams::init(cfg(0, 1, 1, ForgetGate::Exp), &mut rng(0)).is_err());
}

#[test]
fn empty_sequence_scans_to_empty() {
    let c = cfg(4, 1, 2, ForgetGate::Exp);
    let p = MLstmParams::init(c, &mut rng(2)).unwrap();
    for dir in [ScanDirection::Forward, ScanDirection::Backward] {
        let out = mlstm_scan(&p, &Tensor::zeros([0, 4]), dir).unwrap();
        assert_eq!(out.shape(), &[0, 4]);
    }
}

#[test]
fn backward_scan_is_reversed_forward_scan_bitwise() {
    let c = cfg(4, 1, 4, ForgetGate::Exp);
    let p = MLstmParams::init(c, &mut rng(3)).unwrap();
    let seq = Tensor::randn([7, 4], 1.0, &mut rng(4));
    let back = mlstm_scan(&p, &seq, ScanDirection::Backward).unwrap();
    let rev = mlstm_scan(&p, &seq.flip(0).unwrap(), ScanDirection::Forward)
        .unwrap()
        .flip(0)
        .unwrap();
    assert_eq!(back.data(), rev.data());
}

#[test]
fn stabilized_scan_matches_naive_oracle() {
    let cases = [
        (cfg(3, 1, 3, ForgetGate::Exp), 5),
        (cfg(8, 1, 8, ForgetGate::Exp), 16),
        (cfg(8, 2, 4, ForgetGate::Exp), 16),
        (cfg(8, 4, 2, ForgetGate::Sigmoid), 16),
        (cfg(6, 2, 3, ForgetGate::Exp), 64),
        (cfg(4, 1, 1, ForgetGate::Sigmoid), 64),
    ];
    for (seed, (c, l)) in cases.into_iter().enumerate() {
        let p = bounded_params(c, 10 + seed as u64);
        let seq = unit_seq(l, c.dim, 20 + seed as u64);
        for x in seq.data().chunks(c.dim) {
            let pre = p.project(x).unwrap();
            assert!(pre.igate.iter().chain(&pre.fgate).all(|v| v.abs() <= 3.0));
        }
        let fast = mlstm_scan(&p, &seq, ScanDirection::Forward).unwrap();
        let slow = naive_mlstm_oracle(&p, &seq).unwrap();
        let diff = fast.max_abs_diff(&slow);
        assert!(diff < 1e-10, "{c:?} L={l}: diff {diff:e}");
    }
}

#[test]
fn oracle_rejects_large_preactivations() {
    let c = cfg(2, 1, 2, ForgetGate::Exp);
    let mut p = bounded_params(c, 1);
    p.fgate_b = Tensor::full([1], 25.0);
    let err = naive_mlstm_oracle(&p, &unit_seq(2, 2, 0)).unwrap_err();
    assert!(err.to_string().contains("naive_mlstm_oracle"), "{err}");
}

#[test]
fn scan_is_causal_in_its_direction() {
    let c = cfg(4, 2, 2, ForgetGate::Exp);
    let p = MLstmParams::init(c, &mut rng(7)).unwrap();
    let seq = Tensor::randn([9, 4], 1.0, &mut rng(8));
    let t = 4;
    let mut later = seq.clone();
    let mut earlier = seq.clone();
    for j in 0..4 {
        later.data_mut()[(t + 2) * 4 + j] += 0.7;
        earlier.data_mut()[(t - 2) * 4 + j] += 0.7;
    }
    let rows = |x: &Tensor, r: std::ops::Range<usize>| x.data()[r.start * 4..r.end * 4].to_vec();

    let base = mlstm_scan(&p, &seq, ScanDirection::Forward).unwrap();
    let moved = mlstm_scan(&p, &later, ScanDirection::Forward).unwrap();
    assert_eq!(rows(&base, 0..t + 2), rows(&moved, 0..t + 2));
    assert_ne!(rows(&base, t + 2..9), rows(&moved, t + 2..9));

    let base = mlstm_scan(&p, &seq, ScanDirection::Backward).unwrap();
    let moved = mlstm_scan(&p, &earlier, ScanDirection::Backward).unwrap();
    assert_eq!(rows(&base, t - 1..9), rows(&moved, t - 1..9));
    assert_ne!(rows(&base, 0..t - 1), rows(&moved, 0..t - 1));
}

#[test]
fn state_stays_finite_over_long_runs() {
    for gate in [ForgetGate::Exp, ForgetGate::Sigmoid] {
        let c = cfg(8, 2, 4, gate);
        let mut r = rng(11);
        let mut p = MLstmParams::init(c, &mut r).unwrap();
        // large gate weights push pre-activations well past the raw-exp range
        p.igate_w = Tensor::randn([8, 2], 20.0, &mut r);
        p.fgate_w = Tensor::randn([8, 2], 20.0, &mut r);
        let mut state = MLstmState::new(&c);
        let mut x = vec![0.0; 8];
        for _ in 0..10_000 {
            x.iter_mut().for_each(|v| *v = r.random_range(-3.0..3.0));
            let h = p.step(&mut state, &x).unwrap();
            assert!(h.iter().all(|v| v.is_finite()));
        }
        assert!(state.is_finite());
    }
}

fn layer_inputs(c: MLstmConfig, seed: u64, batch: usize, len: usize) -> (MLstmParams, Vec<Tensor>) {
    let p = bounded_params(c, seed);
    let mut inputs: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
    inputs.push(Tensor::uniform(
        [batch, len, c.dim],
        -1.0,
        1.0,
        &mut rng(seed + 1000),
    ));
    (p, inputs)
}

#[test]
fn tape_layer_matches_plain_scan() {
    for (c, dir) in [
        (cfg(8, 2, 4, ForgetGate::Exp), ScanDirection::Forward),
        (cfg(8, 1, 8, ForgetGate::Sigmoid), ScanDirection::Backward),
        (cfg(6, 3, 1, ForgetGate::Exp), ScanDirection::Backward),
    ] {
        let (p, inputs) = layer_inputs(c, 31, 3, 11);
        let mut tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let mv = MLstmVars::from_slice(&vars[..9]);
        let y = mlstm_layer(&mut tape, &mv, &c, vars[9], dir).unwrap();
        let y = tape.value(y);
        assert_eq!(y.shape(), &[3, 11, c.dim]);
        let per = 11 * c.dim;
        for b in 0..3 {
            let seq = Tensor::new(
                [11, c.dim],
                inputs[9].data()[b * per..(b + 1) * per].to_vec(),
            )
            .unwrap();
            let want = mlstm_scan(&p, &seq, dir).unwrap();
            let got = Tensor::new([11, c.dim], y.data()[b * per..(b + 1) * per].to_vec()).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-12, "{c:?} {dir:?}");
        }
    }
}

#[test]
fn four_step_scan_gradient_matches_finite_differences() {
    for (c, dir) in [
        (cfg(4, 1, 4, ForgetGate::Exp), ScanDirection::Forward),
        (cfg(4, 2, 2, ForgetGate::Sigmoid), ScanDirection::Backward),
        (cfg(6, 2, 3, ForgetGate::Exp), ScanDirection::Backward),
    ] {
        let (_, inputs) = layer_inputs(c, 41, 2, 4);
        let weights = Tensor::randn([2, 4, c.dim], 1.0, &mut rng(42));
        let report = gradcheck(
            &inputs,
            |tape, v| {
                let mv = MLstmVars::from_slice(&v[..9]);
                let y = mlstm_layer(tape, &mv, &c, v[9], dir)?;
                let w = tape.constant(weights.clone());
                let y = tape.mul(y, w)?;
                Ok(tape.sum(y))
            },
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{c:?}: {report:?}");
    }
}

#[test]
fn gradient_spans_snapshot_chunks() {
    // 37 steps cover three snapshot chunks, the last one partial
    let c = cfg(4, 2, 2, ForgetGate::Exp);
    let (p, inputs) = layer_inputs(c, 51, 1, 37);
    let weights = Tensor::randn([1, 37, 4], 1.0, &mut rng(52));
    let report = gradcheck(
        &inputs,
        |tape, v| {
            let mv = MLstmVars::from_slice(&v[..9]);
            let y = mlstm_layer(tape, &mv, &c, v[9], ScanDirection::Forward)?;
            let w = tape.constant(weights.clone());
            let y = tape.mul(y, w)?;
            Ok(tape.sum(y))
        },
        GradcheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");

    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = mlstm_layer(
        &mut tape,
        &MLstmVars::from_slice(&vars[..9]),
        &c,
        vars[9],
        ScanDirection::Forward,
    )
    .unwrap();
    let seq = inputs[9].clone().reshape([37, 4]).unwrap();
    assert!(
        tape.value(y).max_abs_diff(
            &mlstm_scan(&p, &seq, ScanDirection::Forward)
                .unwrap()
                .reshape([1, 37, 4])
                .unwrap()
        ) < 1e-12
    );
}

#[test]
fn parameter_count_matches_shapes() {
    for c in [
        cfg(768, 1, 4, ForgetGate::Exp),
        cfg(8, 2, 8, ForgetGate::Sigmoid),
        MLstmConfig::dense(5),
    ] {
        let from_shapes: usize = c
            .param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(c.num_parameters(), from_shapes);
        let p = MLstmParams::init(c, &mut rng(0)).unwrap();
        assert_eq!(
            p.tensors().iter().map(|t| t.numel()).sum::<usize>(),
            from_shapes
        );
    }
    // d=768, one head, block 4: 3·768·4 + 2·(768 + 1) + 2·768
    assert_eq!(
        cfg(768, 1, 4, ForgetGate::Exp).num_parameters(),
        9216 + 1538 + 1536
    );
}
