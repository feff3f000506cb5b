use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seglstm::decoder::{
    adapter_plan, adapter_specs, build_pyramid, fcn_head, head_specs, ppm, upernet_head,
    DecoderConfig, HeadKind, Resample,
};
use seglstm::encoder::TokenMap;
use seglstm::model::{argmax_classes, ModelConfig};
use seglstm::params::Bound;
use seglstm::tensor::gradcheck::{gradcheck, GradcheckOptions};
use seglstm::{ParamSpec, ParamStore, Tape, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Initialization with every tensor redrawn at unit fan-in scale, so that
/// gradients are O(1) for the finite-difference checks.
fn scaled(specs: &[ParamSpec], seed: u64) -> ParamStore {
    let mut r = rng(seed);
    let mut store = ParamStore::from_specs(specs, &mut r).unwrap();
    for (name, t) in store.iter_mut() {
        let fan: usize = if name.ends_with("bias") {
            1
        } else {
            t.shape()[1..].iter().product()
        };
        *t = Tensor::randn(t.shape().to_vec(), 1.0 / (fan as f64).sqrt(), &mut r);
    }
    store
}

fn token_maps(inputs: &[Var], grid: (usize, usize)) -> [TokenMap; 4] {
    [0, 1, 2, 3].map(|i| TokenMap {
        tokens: inputs[i],
        grid,
    })
}

fn tokens(b: usize, l: usize, d: usize, seed: u64) -> Tensor {
    Tensor::uniform([b, l, d], -1.0, 1.0, &mut rng(seed))
}

fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> seglstm::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed)));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> seglstm::Result<Var>) -> f64 {
    gradcheck(&inputs, build, GradcheckOptions::default())
        .unwrap()
        .max_rel_error
}

#[test]
fn adapter_plan_follows_patch_size() {
    use Resample::*;
    assert_eq!(adapter_plan(16).unwrap(), [Up(2), Up(1), Identity, Pool(2)]);
    assert_eq!(
        adapter_plan(8).unwrap(),
        [Up(1), Identity, Pool(2), Pool(4)]
    );
    assert_eq!(
        adapter_plan(4).unwrap(),
        [Identity, Pool(2), Pool(4), Pool(8)]
    );
    assert!(adapter_plan(12).is_err());
    assert_eq!(Pool(4).output_size(3), 1);
    assert_eq!(Pool(2).output_size(3), 2);
}

#[test]
fn pyramid_levels_have_stride_four_to_thirty_two() {
    let d = 4;
    let params = scaled(&adapter_specs(d, 16).unwrap(), 0);
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let vars: Vec<Var> = (0..4).map(|i| tape.constant(tokens(2, 16, d, i))).collect();
    let taps = token_maps(&vars, (4, 4));
    let pyramid = build_pyramid(&mut tape, &bound, &taps, 16).unwrap();
    let sizes: Vec<&[usize]> = pyramid.iter().map(|&v| tape.shape(v)).collect();
    assert_eq!(
        sizes,
        vec![
            &[2, d, 16, 16][..],
            &[2, d, 8, 8],
            &[2, d, 4, 4],
            &[2, d, 2, 2]
        ]
    );
    // the stride-16 level is the tap itself, laid out as a map
    let tap3 = tokens(2, 16, d, 2);
    let level = tape.value(pyramid[2]);
    for b in 0..2 {
        for t in 0..16 {
            for c in 0..d {
                assert_eq!(
                    level.data()[(b * d + c) * 16 + t],
                    tap3.data()[(b * 16 + t) * d + c]
                );
            }
        }
    }
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let d = 3;
    let params = scaled(&adapter_specs(d, 16).unwrap(), 1);
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut inputs: Vec<Tensor> = (0..4).map(|i| tokens(1, 4, d, 10 + i)).collect();
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    let err = check(inputs, |tape, vars| {
        let bound = Bound::from_vars(names.iter().map(String::as_str), &vars[4..]);
        let taps = token_maps(vars, (2, 2));
        let pyr = build_pyramid(tape, &bound, &taps, 16)?;
        let mut total = weighted_sum(tape, pyr[0], 1)?;
        for (i, &level) in pyr[1..].iter().enumerate() {
            let s = weighted_sum(tape, level, 2 + i as u64)?;
            total = tape.add(total, s)?;
        }
        Ok(total)
    });
    assert!(err < 1e-4, "{err}");
}

fn ppm_params(d: usize, channels: usize, seed: u64) -> (DecoderConfig, ParamStore) {
    let cfg = DecoderConfig::upernet(channels, 2);
    let specs: Vec<ParamSpec> = head_specs(&cfg, d)
        .into_iter()
        .filter(|s| s.name.starts_with("decoder.ppm"))
        .collect();
    (cfg, scaled(&specs, seed))
}

#[test]
fn ppm_keeps_constant_maps_constant() {
    let (cfg, params) = ppm_params(3, 5, 2);
    for (h, w) in [(2, 2), (3, 5), (7, 7)] {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::from_fn([1, 3, h, w], |i| {
            [0.3, -0.7, 1.1][i / (h * w)]
        }));
        let y = ppm(&mut tape, &bound, &cfg, x).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 5, h, w]);
        for c in out.data().chunks(h * w) {
            assert!(c.iter().all(|v| (v - c[0]).abs() < 1e-12), "{c:?}");
        }
    }
}

#[test]
fn ppm_gradients_match_finite_differences() {
    let (cfg, params) = ppm_params(3, 4, 3);
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut inputs = vec![Tensor::uniform([1, 3, 3, 4], -1.0, 1.0, &mut rng(4))];
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    let err = check(inputs, |tape, vars| {
        let bound = Bound::from_vars(names.iter().map(String::as_str), &vars[1..]);
        let y = ppm(tape, &bound, &cfg, vars[0])?;
        weighted_sum(tape, y, 5)
    });
    assert!(err < 1e-4, "{err}");
}

fn upernet_setup(d: usize, c: usize, k: usize, seed: u64) -> (DecoderConfig, ParamStore) {
    let cfg = DecoderConfig::upernet(c, k);
    (cfg.clone(), scaled(&head_specs(&cfg, d), seed))
}

fn run_upernet(
    cfg: &DecoderConfig,
    params: &ParamStore,
    levels: &[Tensor; 4],
    out: (usize, usize),
) -> Tensor {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let vars = levels.clone().map(|t| tape.constant(t));
    let y = upernet_head(&mut tape, &bound, cfg, &vars, out).unwrap();
    tape.value(y).clone()
}

fn levels(b: usize, d: usize, base: usize, seed: u64) -> [Tensor; 4] {
    [0, 1, 2, 3].map(|i| {
        let n = (base >> i).max(1);
        Tensor::uniform([b, d, n, n], -1.0, 1.0, &mut rng(seed + i as u64))
    })
}

#[test]
fn upernet_logits_match_input_size() {
    for k in [1, 3] {
        let (cfg, params) = upernet_setup(4, 6, k, 0);
        let y = run_upernet(&cfg, &params, &levels(2, 4, 8, 1), (32, 32));
        assert_eq!(y.shape(), &[2, k, 32, 32]);
        assert!(y.is_finite());
    }
}

#[test]
fn zero_classifier_gives_constant_bias_logits() {
    let (cfg, mut params) = upernet_setup(4, 6, 3, 1);
    *params.get_mut("decoder.classifier.weight").unwrap() = Tensor::zeros([3, 6, 1, 1]);
    *params.get_mut("decoder.classifier.bias").unwrap() =
        Tensor::new([3], vec![0.5, -2.0, 7.25]).unwrap();
    let y = run_upernet(&cfg, &params, &levels(1, 4, 8, 2), (32, 32));
    for (c, plane) in y.data().chunks(32 * 32).enumerate() {
        assert!(plane.iter().all(|&v| v == [0.5, -2.0, 7.25][c]));
    }
    assert!(argmax_classes(&y).iter().all(|&p| p == 2));
}

#[test]
fn upernet_channel_contract() {
    let (cfg, params) = upernet_setup(4, 6, 2, 3);
    for s in head_specs(&cfg, 4) {
        if (s.name.starts_with("decoder.fpn") || s.name.starts_with("decoder.ppm"))
            && s.name.ends_with("weight")
        {
            assert_eq!(s.shape[0], 6, "{}", s.name);
        }
    }
    assert_eq!(
        params.get("decoder.fpn.fuse.weight").unwrap().shape(),
        &[6, 24, 3, 3]
    );
}

#[test]
fn upernet_gradients_match_finite_differences() {
    let (cfg, params) = upernet_setup(3, 3, 2, 4);
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut inputs: Vec<Tensor> = levels(1, 3, 4, 9).into();
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    let err = check(inputs, |tape, vars| {
        let bound = Bound::from_vars(names.iter().map(String::as_str), &vars[4..]);
        let y = upernet_head(
            tape,
            &bound,
            &cfg,
            &[vars[0], vars[1], vars[2], vars[3]],
            (8, 8),
        )?;
        weighted_sum(tape, y, 6)
    });
    assert!(err < 1e-4, "{err}");
}

fn fcn_setup(d: usize, c: usize, k: usize, seed: u64) -> ParamStore {
    scaled(&head_specs(&DecoderConfig::fcn(c, k), d), seed)
}

#[test]
fn fcn_constant_features_give_constant_logits() {
    let params = fcn_setup(4, 5, 3, 1);
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let tok = Tensor::from_fn([2, 9, 4], |i| [0.2, -0.4, 0.9, 1.3][i % 4]);
    let x = tape.constant(tok);
    let y = fcn_head(
        &mut tape,
        &bound,
        &TokenMap {
            tokens: x,
            grid: (3, 3),
        },
        (24, 24),
    )
    .unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), &[2, 3, 24, 24]);
    for plane in out.data().chunks(24 * 24) {
        assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
    }
}

#[test]
fn fcn_gradients_match_finite_differences() {
    let params = fcn_setup(3, 4, 2, 2);
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut inputs = vec![tokens(1, 6, 3, 7)];
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    let err = check(inputs, |tape, vars| {
        let bound = Bound::from_vars(names.iter().map(String::as_str), &vars[1..]);
        let y = fcn_head(
            tape,
            &bound,
            &TokenMap {
                tokens: vars[0],
                grid: (2, 3),
            },
            (8, 12),
        )?;
        weighted_sum(tape, y, 8)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn swapping_heads_keeps_encoder_parameters() {
    let upernet = ModelConfig::tiny();
    let mut fcn = upernet.clone();
    fcn.decoder = DecoderConfig::fcn(16, 3);
    let a = upernet.init(&mut rng(5)).unwrap();
    let b = fcn.init(&mut rng(5)).unwrap();
    let is_encoder = |n: &str| n.starts_with("stem") || n == "pos_emb" || n.starts_with("encoder.");
    let enc_a: Vec<_> = a.iter().filter(|(n, _)| is_encoder(n)).collect();
    let enc_b: Vec<_> = b.iter().filter(|(n, _)| is_encoder(n)).collect();
    assert_eq!(enc_a, enc_b);
    assert!(b
        .names()
        .all(|n| is_encoder(n) || n.starts_with("decoder.fcn")));
    assert!(a.names().any(|n| n.starts_with("adapter.")));
    assert_eq!(fcn.decoder.head, HeadKind::Fcn);
}

#[test]
fn class_count_only_changes_classifier() {
    let a = ModelConfig::reference();
    let mut b = a.clone();
    b.decoder.num_classes = 7;
    let sa = a.param_specs().unwrap();
    let sb = b.param_specs().unwrap();
    assert_eq!(sa.len(), sb.len());
    for (x, y) in sa.iter().zip(&sb) {
        assert_eq!(x.name, y.name);
        if x.shape != y.shape {
            assert!(x.name.starts_with("decoder.classifier"), "{}", x.name);
        }
    }
    let (ca, cb) = (a.count_parameters().unwrap(), b.count_parameters().unwrap());
    assert_eq!(cb.head - ca.head, 512 + 1);
    assert_eq!(ca.encoder(), cb.encoder());
}
