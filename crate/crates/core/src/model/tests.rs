use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blocks::{self, Ctx, Mode};
use super::*;
use crate::autograd::gradcheck::{check_params, random};
use crate::tensor::reflect_index;

fn conv_count(m: usize, n: usize, k: usize) -> usize {
    m * n * k * k + n
}

fn zero_block(store: &mut ParamStore, prefix: &str) {
    let names: Vec<String> = store
        .iter()
        .filter(|(n, k, _)| n.starts_with(prefix) && *k == ParamKind::Trainable)
        .map(|(n, _, _)| n.to_string())
        .collect();
    for n in names {
        store.get_mut(&n).unwrap().data_mut().fill(0.0);
    }
}

fn run_block(store: &ParamStore, x: &Tensor, mode: Mode, f: impl Fn(&Ctx, &Var) -> Var) -> Tensor {
    let tape = Tape::inference();
    let bound = store.bind(&tape);
    let ctx = Ctx::new(&tape, &bound, mode);
    let xv = tape.constant(x.clone());
    f(&ctx, &xv).value().clone()
}

fn conv1x1_oracle(w: &Tensor, b: &Tensor, x: &[f64], hw: usize) -> Vec<f64> {
    let (co, ci) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; co * hw];
    for o in 0..co {
        for p in 0..hw {
            let mut s = b.data()[o];
            for i in 0..ci {
                s += w.data()[o * ci + i] * x[i * hw + p];
            }
            out[o * hw + p] = s;
        }
    }
    out
}

#[test]
fn default_parameter_count_matches_closed_form() {
    let model = SrModel::new(ModelConfig::default(), 0).unwrap();
    let b = model.count_parameters();
    let sf = conv_count(3, 60, 3);
    let mb = conv_count(60, 240, 1) + (240 * 9 + 240) + conv_count(240, 15, 1) + conv_count(15, 240, 1) + conv_count(240, 60, 1);
    let elab = 4 * 60 + 3 * conv_count(60, 60, 1) + conv_count(60, 300, 1) + conv_count(300, 60, 1);
    let deform = conv_count(60, 28, 1) + conv_count(28, 18, 3) + conv_count(28, 28, 3) + conv_count(28, 60, 1);
    let tail = conv_count(60, 60, 3) + conv_count(60, 12, 3);
    assert_eq!(b.get("head").unwrap().params, sf);
    assert_eq!(b.get("mbconv").unwrap().params, mb);
    assert_eq!(b.get("elab.7").unwrap().params, elab);
    assert_eq!(b.get("deform").unwrap().params, deform);
    assert_eq!(b.total_params, sf + mb + 10 * elab + deform + tail);
    assert_eq!(b.total_params, 570_473);
    assert_eq!(b.total_params, model.params().count_trainable());
}

#[test]
fn ablation_counts_are_ordered() {
    let count = |mb: bool, de: bool| {
        let cfg = ModelConfig {
            use_mbconv: mb,
            use_deform: de,
            ..ModelConfig::default()
        };
        SrModel::new(cfg, 0).unwrap().count_parameters().total_params
    };
    let (base, with_mb, full) = (count(false, false), count(true, false), count(true, true));
    assert!(base < with_mb && with_mb < full);
    assert!((30_000..=50_000).contains(&(with_mb - base)));
    assert!((8_000..=25_000).contains(&(full - with_mb)));
}

#[test]
fn shared_query_key_and_no_position_bias() {
    let model = SrModel::new(ModelConfig::default(), 0).unwrap();
    let names: Vec<&str> = model.params().iter().map(|(n, _, _)| n).collect();
    assert!(names.iter().all(|n| !n.contains("position") && !n.contains("rel_")));
    for i in 0..10 {
        let attn: Vec<_> = names
            .iter()
            .filter(|n| n.starts_with(&format!("elab.{i}.attn.")) && n.ends_with(".weight"))
            .collect();
        assert_eq!(attn.len(), 3, "{attn:?}");
        assert!(names.contains(&format!("elab.{i}.attn.qk.weight").as_str()));
    }
}

#[test]
fn shallow_extract_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = ParamStore::new();
    blocks::init_shallow(&mut s, &mut rng, "head", 4).unwrap();
    let x = random(&[1, 3, 5, 5], 2);
    let got = run_block(&s, &x, Mode::Eval, |c, v| blocks::shallow_extract(c, "head", v));
    let (w, b) = (s.expect("head.weight"), s.expect("head.bias"));
    for o in 0..4 {
        for i in 0..5 {
            for j in 0..5 {
                let mut acc = b.data()[o];
                for c in 0..3 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let si = reflect_index(i as isize + ki as isize - 1, 5);
                            let sj = reflect_index(j as isize + kj as isize - 1, 5);
                            acc += w.at4(o, c, ki, kj) * x.at4(0, c, si, sj);
                        }
                    }
                }
                assert!((got.at4(0, o, i, j) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn shift_conv_matches_materialized_shifts() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = ParamStore::new();
    blocks::init_shift_conv(&mut s, &mut rng, "sc", 10, 7).unwrap();
    let x = random(&[1, 10, 4, 4], 4);
    let got = run_block(&s, &x, Mode::Eval, |c, v| blocks::shift_conv(c, "sc", v));
    // group order: content moves left, right, up, down, stays
    let reads = [(0isize, 1isize), (0, -1), (1, 0), (-1, 0), (0, 0)];
    let mut shifted = vec![0.0; 10 * 16];
    for ch in 0..10 {
        let (dy, dx) = reads[ch / 2];
        for i in 0..4isize {
            for j in 0..4isize {
                let (si, sj) = (i + dy, j + dx);
                if (0..4).contains(&si) && (0..4).contains(&sj) {
                    shifted[ch * 16 + (i * 4 + j) as usize] = x.at4(0, ch, si as usize, sj as usize);
                }
            }
        }
    }
    let want = conv1x1_oracle(s.expect("sc.weight"), s.expect("sc.bias"), &shifted, 16);
    let diff = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

/// Window attention computed with explicit loops, including reflect padding
/// to the lcm of the window sizes.
fn gmsa_oracle(s: &ParamStore, x: &Tensor, windows: &[usize]) -> Vec<f64> {
    let (_, c, h, w) = x.dims4();
    let d = c / windows.len();
    let l = windows.iter().copied().max().unwrap();
    let (hp, wp) = (h.div_ceil(l) * l, w.div_ceil(l) * l);
    let mut xp = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for i in 0..hp {
            for j in 0..wp {
                xp[ch * hp * wp + i * wp + j] = x.at4(0, ch, reflect_index(i as isize, h), reflect_index(j as isize, w));
            }
        }
    }
    let q = conv1x1_oracle(s.expect("a.qk.weight"), s.expect("a.qk.bias"), &xp, hp * wp);
    let v = conv1x1_oracle(s.expect("a.value.weight"), s.expect("a.value.bias"), &xp, hp * wp);
    let mut att = vec![0.0; c * hp * wp];
    for (g, &m) in windows.iter().enumerate() {
        for wi in 0..hp / m {
            for wj in 0..wp / m {
                let px: Vec<usize> = (0..m * m).map(|t| (wi * m + t / m) * wp + wj * m + t % m).collect();
                for &a in &px {
                    let logits: Vec<f64> = px
                        .iter()
                        .map(|&b| (0..d).map(|k| q[(g * d + k) * hp * wp + a] * q[(g * d + k) * hp * wp + b]).sum::<f64>() / (d as f64).sqrt())
                        .collect();
                    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
                    for k in 0..d {
                        att[(g * d + k) * hp * wp + a] = px
                            .iter()
                            .zip(&logits)
                            .map(|(&b, lg)| (lg - mx).exp() / z * v[(g * d + k) * hp * wp + b])
                            .sum();
                    }
                }
            }
        }
    }
    let mut cropped = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                cropped[ch * h * w + i * w + j] = att[ch * hp * wp + i * wp + j];
            }
        }
    }
    conv1x1_oracle(s.expect("a.proj.weight"), s.expect("a.proj.bias"), &cropped, h * w)
}

#[test]
fn gmsa_matches_loop_oracle() {
    for (seed, (h, w)) in [(8usize, 8usize), (10, 7), (5, 9)].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let mut s = ParamStore::new();
        blocks::init_gmsa(&mut s, &mut rng, "a", 6, true).unwrap();
        let x = random(&[1, 6, h, w], 10 + seed as u64);
        let got = run_block(&s, &x, Mode::Eval, |c, v| blocks::gmsa(c, "a", v, &[4, 8], None).0);
        let want = gmsa_oracle(&s, &x, &[4, 8]);
        let diff = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{h}x{w}: {diff}");
    }
}

#[test]
fn gmsa_with_zero_query_averages_each_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = ParamStore::new();
    blocks::init_gmsa(&mut s, &mut rng, "a", 4, true).unwrap();
    zero_block(&mut s, "a.qk");
    for name in ["a.value", "a.proj"] {
        let wt = s.get_mut(&format!("{name}.weight")).unwrap();
        wt.data_mut().fill(0.0);
        for i in 0..4 {
            wt.data_mut()[i * 4 + i] = 1.0;
        }
        s.get_mut(&format!("{name}.bias")).unwrap().data_mut().fill(0.0);
    }
    let x = random(&[1, 4, 4, 4], 6);
    let got = run_block(&s, &x, Mode::Eval, |c, v| blocks::gmsa(c, "a", v, &[4], None).0);
    for ch in 0..4 {
        let mean = x.data()[ch * 16..(ch + 1) * 16].iter().sum::<f64>() / 16.0;
        assert!(got.data()[ch * 16..(ch + 1) * 16].iter().all(|v| (v - mean).abs() < 1e-12));
    }
}

#[test]
fn zeroed_elab_and_mbconv_are_identity() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut s = ParamStore::new();
    blocks::init_elab(&mut s, &mut rng, "e", &cfg, true).unwrap();
    blocks::init_mbconv(&mut s, &mut rng, "m", &cfg).unwrap();
    zero_block(&mut s, "e.");
    zero_block(&mut s, "m.project");
    let x = random(&[2, 10, 6, 5], 8);
    for mode in [Mode::Train, Mode::Eval] {
        let e = run_block(&s, &x, mode, |c, v| blocks::elab_forward(c, "e", v, &cfg.window_sizes, None).0);
        assert_eq!(e, x);
        let m = run_block(&s, &x, mode, |c, v| blocks::mbconv_forward(c, "m", v));
        assert_eq!(m, x);
    }
}

#[test]
fn saturated_se_gate_matches_depthwise_separable_oracle() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut s = ParamStore::new();
    blocks::init_mbconv(&mut s, &mut rng, "m", &cfg).unwrap();
    s.get_mut("m.se.expand.weight").unwrap().data_mut().fill(0.0);
    s.get_mut("m.se.expand.bias").unwrap().data_mut().fill(60.0);
    let x = random(&[1, 10, 5, 6], 10);
    let got = run_block(&s, &x, Mode::Eval, |c, v| blocks::mbconv_forward(c, "m", v));
    let (h, w, hid) = (5, 6, cfg.mbconv_hidden());
    let e: Vec<f64> = conv1x1_oracle(s.expect("m.expand.weight"), s.expect("m.expand.bias"), x.data(), h * w)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let (dw, db) = (s.expect("m.depthwise.weight"), s.expect("m.depthwise.bias"));
    let mut d = vec![0.0; hid * h * w];
    for c in 0..hid {
        for i in 0..h {
            for j in 0..w {
                let mut acc = db.data()[c];
                for ki in 0..3 {
                    for kj in 0..3 {
                        let si = reflect_index(i as isize + ki as isize - 1, h);
                        let sj = reflect_index(j as isize + kj as isize - 1, w);
                        acc += dw.at4(c, 0, ki, kj) * e[c * h * w + si * w + sj];
                    }
                }
                d[c * h * w + i * w + j] = acc.max(0.0);
            }
        }
    }
    let p = conv1x1_oracle(s.expect("m.project.weight"), s.expect("m.project.bias"), &d, h * w);
    let diff = got.data().iter().zip(x.data()).zip(&p).map(|((g, xi), pi)| (g - xi - pi).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn fresh_deform_block_is_a_standard_convolution() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut s = ParamStore::new();
    blocks::init_deform(&mut s, &mut rng, "d", &cfg).unwrap();
    let x = random(&[1, 10, 6, 6], 12);
    let got = run_block(&s, &x, Mode::Eval, |c, v| blocks::deform_forward(c, "d", v, 1));
    let tape = Tape::inference();
    let bound = s.bind(&tape);
    let xv = tape.constant(x.clone());
    let r = tape.conv2d(&xv, bound.var("d.reduce.weight"), Some(bound.var("d.reduce.bias")), Default::default());
    let spec = crate::autograd::ConvSpec { padding: 1, ..Default::default() };
    let c = tape.conv2d(&r, bound.var("d.conv.weight"), Some(bound.var("d.conv.bias")), spec);
    let e = tape.conv2d(&c, bound.var("d.expand.weight"), Some(bound.var("d.expand.bias")), Default::default());
    let want = tape.add(&xv, &e);
    assert!(got.max_abs_diff(want.value()) < 1e-12);
}

fn assert_grads(report: &[(String, f64)], tol: f64) {
    for (name, err) in report {
        assert!(*err <= tol, "{name}: relative error {err}");
    }
}

#[test]
fn block_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut s = ParamStore::new();
    blocks::init_elab(&mut s, &mut rng, "e", &cfg, true).unwrap();
    blocks::init_mbconv(&mut s, &mut rng, "m", &cfg).unwrap();
    blocks::init_deform(&mut s, &mut rng, "d", &cfg).unwrap();
    // non-zero offsets so the offset path carries gradient
    for v in s.get_mut("d.offset.weight").unwrap().data_mut().iter_mut().enumerate() {
        *v.1 = 0.05 * ((v.0 * 7919 % 23) as f64 / 23.0 - 0.5);
    }
    s.get_mut("d.offset.bias").unwrap().data_mut().fill(0.3);
    let x = random(&[2, 10, 6, 6], 14);
    for mode in [Mode::Train, Mode::Adapt] {
        let report = check_params(&s, 1e-5, 12, |t, b| {
            let ctx = Ctx::new(t, b, mode);
            let xv = t.constant(x.clone());
            let (e, _) = blocks::elab_forward(&ctx, "e", &xv, &cfg.window_sizes, None);
            let m = blocks::mbconv_forward(&ctx, "m", &e);
            let d = blocks::deform_forward(&ctx, "d", &m, 1);
            t.mean(&t.mul(&d, &d))
        });
        assert_grads(&report, 1e-4);
    }
}

#[test]
fn tiny_model_l1_gradients_match_finite_differences() {
    let mut model = SrModel::new(ModelConfig::tiny(), 15).unwrap();
    // keep sampling positions off the integer grid, where bilinear weights kink
    model.params_mut().get_mut("deform.offset.bias").unwrap().data_mut().fill(0.3);
    let x = random(&[1, 3, 8, 8], 16).map(|v| 0.5 + 0.5 * v);
    let y = random(&[1, 3, 16, 16], 17).map(|v| 0.5 + 0.5 * v);
    let report = check_params(model.params(), 1e-4, 6, |t, b| {
        let xv = t.constant(x.clone());
        let out = model.forward(t, b, &xv, Mode::Adapt, false).output;
        t.l1_loss(&out, &t.constant(y.clone()))
    });
    assert_grads(&report, 1e-4);
}

#[test]
fn output_shape_for_arbitrary_sizes() {
    for scale in [2, 3, 4] {
        let cfg = ModelConfig { scale, ..ModelConfig::tiny() };
        let model = SrModel::new(cfg, 0).unwrap();
        for h in 1..=3 {
            for w in [15, 16, 17, 31, 33] {
                let img = Image::filled(3, h, w, 0.3).unwrap();
                let (out, trace) = model.model_forward(&img, Mode::Eval, false).unwrap();
                assert_eq!((out.channels(), out.height(), out.width()), (3, scale * h, scale * w));
                for f in &trace.features {
                    let want = if f.name == "i_rhq" { vec![1, 3, scale * h, scale * w] } else { vec![1, 10, h, w] };
                    assert_eq!(f.shape, want, "{}", f.name);
                }
            }
        }
    }
}

#[test]
fn eval_forward_is_deterministic_and_clamped() {
    let model = SrModel::new(ModelConfig::tiny(), 3).unwrap();
    let img = Image::from_planar(3, 9, 7, random(&[3, 9, 7], 4).into_data()).unwrap();
    let a = model.infer(&img).unwrap();
    let b = model.infer(&img).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn zero_deep_path_reduces_to_shallow_reconstruction() {
    let mut model = SrModel::new(ModelConfig::tiny(), 5).unwrap();
    for block in ["mbconv.", "elab.", "deform.", "body_tail."] {
        zero_block(model.params_mut(), block);
    }
    let img = Image::from_fn(3, 8, 8, |c, i, j| ((c + i * j) % 5) as f64 / 5.0).unwrap();
    let (before, trace) = model.model_forward(&img, Mode::Adapt, true).unwrap();
    let deep = trace.get("i_deep").unwrap().values.as_ref().unwrap();
    assert!(deep.data().iter().all(|v| *v == 0.0));
    let local = trace.get("i_local").unwrap().values.clone().unwrap();
    let tape = Tape::inference();
    let bound = model.params().bind(&tape);
    let ctx = Ctx::new(&tape, &bound, Mode::Adapt);
    let direct = blocks::reconstruct(&ctx, "upsample", &tape.constant(local), 2);
    assert_eq!(before.to_tensor(), *direct.value());

    model.params_mut().get_mut("elab.1.attn.value.weight").unwrap().data_mut().fill(0.7);
    let after = model.model_forward(&img, Mode::Adapt, false).unwrap().0;
    assert_eq!(before, after);
}

#[test]
fn gmsa_flops_formula_and_instrumented_count() {
    let cfg = ModelConfig::default();
    assert_eq!(gmsa_flops(&cfg, 32, 32), 13_762_560);
    let single = ModelConfig {
        window_sizes: vec![8],
        ..ModelConfig::default()
    };
    assert_eq!(gmsa_flops(&single, 10, 12), 2 * 64 * 10 * 12 * 60);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = ParamStore::new();
    blocks::init_gmsa(&mut s, &mut rng, "a", 60, true).unwrap();
    let tape = Tape::inference();
    let bound = s.bind(&tape);
    let ctx = Ctx::new(&tape, &bound, Mode::Eval);
    blocks::gmsa(&ctx, "a", &tape.constant(random(&[1, 60, 32, 32], 1)), &cfg.window_sizes, None);
    assert_eq!(tape.attention_mults(), 13_762_560);
}

#[test]
fn shared_attention_maps_skip_query_projection() {
    let cfg = ModelConfig {
        attn_share_period: 2,
        ..ModelConfig::tiny()
    };
    let model = SrModel::new(cfg, 0).unwrap();
    assert!(model.params().contains("elab.0.attn.qk.weight"));
    assert!(!model.params().contains("elab.1.attn.qk.weight"));
    let out = model.infer(&Image::filled(3, 6, 6, 0.5).unwrap()).unwrap();
    assert_eq!(out.dims(), (12, 12));
}

#[test]
fn running_stats_follow_momentum() {
    let mut model = SrModel::new(ModelConfig::tiny(), 0).unwrap();
    let tape = Tape::new();
    let bound = model.params().bind(&tape);
    let x = tape.constant(random(&[2, 3, 8, 8], 3));
    let stats = model.forward(&tape, &bound, &x, Mode::Train, false).bn_stats;
    assert_eq!(stats.len(), 4);
    drop(bound);
    model.update_running_stats(&stats, BN_MOMENTUM);
    let mean = model.params().expect("elab.0.norm1.running_mean");
    for (m, b) in mean.data().iter().zip(&stats[0].1.mean) {
        assert!((m - 0.1 * b).abs() < 1e-15);
    }
}

#[test]
fn from_parts_rejects_mismatched_layout() {
    let a = SrModel::new(ModelConfig::tiny(), 0).unwrap();
    let other = ModelConfig { n_elab: 3, ..ModelConfig::tiny() };
    assert!(SrModel::from_parts(other, a.params().clone()).is_err());
    assert!(SrModel::from_parts(ModelConfig::tiny(), a.params().clone()).is_ok());
}
