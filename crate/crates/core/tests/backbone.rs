mod common;

use common::{fln_loss_gradcheck, gradcheck_params, random_tensor, tiny_backbone, tiny_bundle};
use flexilength::backbone::{sinusoidal, BackboneConfig, BranchId, BranchLengths, FlnParams, ModelError, PeKind, Switches};
use flexilength::distributions::nll;
use flexilength::fln::{count_parameters, fln_loss, keep_recent, predict, route, BranchConfig};
use flexilength::params::ParamScope;
use flexilength::tensorgrad::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lengths() -> BranchLengths {
    BranchLengths::new(2, 3, 4).unwrap()
}

fn branch_cfg(switches: Switches) -> BranchConfig {
    BranchConfig { lengths: lengths(), switches, ..BranchConfig::default() }
}

#[test]
fn fln_loss_gradient_matches_finite_differences() {
    let bundle = tiny_bundle(lengths(), 2, 3, 3);
    for (pe, switches) in [
        (PeKind::Sinusoidal, Switches::default()),
        (PeKind::Learnable, Switches { decoder_sln: true, ..Switches::default() }),
        (PeKind::Sinusoidal, Switches { weight_sharing: false, temporal_distillation: false, ..Switches::default() }),
    ] {
        let cfg = branch_cfg(switches);
        let mut p = FlnParams::flexi(BackboneConfig { pe, ..tiny_backbone() }, cfg.lengths, switches, 4).unwrap();
        if pe == PeKind::Learnable {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for b in BranchId::ALL {
                let name = p.pe_table_name(b).unwrap();
                let shape = p.store.get(&name).unwrap().shape().to_vec();
                *p.store.get_mut(&name).unwrap() = random_tensor(&mut rng, &shape, -0.5, 0.5);
            }
        }
        let err = fln_loss_gradcheck(&p, &bundle, &cfg);
        assert!(err < 1e-4, "{pe:?} {switches:?}: {err}");
    }
}

#[test]
fn single_model_gradient_matches_finite_differences() {
    let p = FlnParams::single(tiny_backbone(), 4, 2).unwrap();
    let bundle = tiny_bundle(lengths(), 2, 3, 5);
    let err = gradcheck_params(&p, |tape, p, bound| {
        let pred = p.forward(tape, bound, bundle.input(BranchId::L), BranchId::L).unwrap();
        nll(tape, &pred, bundle.future(BranchId::L)).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

fn permute_agents(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let per = s[2..].iter().product::<usize>();
    let mut out = t.clone();
    for b in 0..s[0] {
        for (dst, &src) in perm.iter().enumerate() {
            let (o, i) = ((b * s[1] + dst) * per, (b * s[1] + src) * per);
            out.data_mut()[o..o + per].copy_from_slice(&t.data()[i..i + per]);
        }
    }
    out
}

#[test]
fn outputs_permute_with_agents() {
    let p = FlnParams::flexi(tiny_backbone(), lengths(), Switches::default(), 7).unwrap();
    let bundle = tiny_bundle(lengths(), 3, 3, 8);
    let perm = [2, 0, 1];
    for b in BranchId::ALL {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false).unwrap();
        let a = p.forward(&mut tape, &bound, bundle.input(b), b).unwrap().values(&tape);
        let q = p.forward(&mut tape, &bound, &permute_agents(bundle.input(b), &perm), b).unwrap().values(&tape);
        assert!(permute_agents(&a.means, &perm).max_abs_diff(&q.means) < 1e-12);
        assert!(permute_agents(&a.scales, &perm).max_abs_diff(&q.scales) < 1e-12);
        assert!(permute_agents(&a.logits, &perm).max_abs_diff(&q.logits) < 1e-12);
    }
}

#[test]
fn output_shapes_and_positive_scales() {
    let p = FlnParams::flexi(tiny_backbone(), lengths(), Switches::default(), 7).unwrap();
    let bundle = tiny_bundle(lengths(), 2, 3, 9);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false).unwrap();
    let pred = p.forward(&mut tape, &bound, bundle.input(BranchId::S), BranchId::S).unwrap().values(&tape);
    assert_eq!(pred.means.shape(), &[1, 2, 3, 2, 2]);
    assert_eq!(pred.logits.shape(), &[1, 2, 2]);
    assert!(pred.scales.data().iter().all(|&s| s >= 1e-3));
}

#[test]
fn detached_teacher_blocks_distillation_gradient() {
    let bundle = tiny_bundle(lengths(), 2, 3, 10);
    let p = FlnParams::flexi(tiny_backbone(), lengths(), Switches::default(), 11).unwrap();
    let grads = |cfg: &BranchConfig| {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, true).unwrap();
        let (parts, _) = fln_loss(&mut tape, &p, &bound, &bundle, cfg).unwrap();
        tape.backward(parts.total).unwrap();
        bound.grads(&tape)
    };
    let base = branch_cfg(Switches::default());
    let reg_only = grads(&BranchConfig { lambda: 0.0, ..base });
    let detached = grads(&BranchConfig { detach_teacher: true, ..base });
    let coupled = grads(&BranchConfig { detach_teacher: false, ..base });
    let long_owned: Vec<usize> = p
        .store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.scope == ParamScope::Branch(BranchId::L))
        .map(|(i, _)| i)
        .collect();
    assert!(!long_owned.is_empty());
    let mut coupled_differs = false;
    for &i in &long_owned {
        let r = reg_only[i].as_ref().unwrap();
        assert_eq!(detached[i].as_ref().unwrap(), r, "{}", p.store.entries()[i].name);
        coupled_differs |= coupled[i].as_ref().unwrap().max_abs_diff(r) > 0.0;
    }
    assert!(coupled_differs);
}

#[test]
fn weight_sharing_off_triples_backbone() {
    let on = FlnParams::flexi(tiny_backbone(), lengths(), Switches::default(), 0).unwrap();
    let off = FlnParams::flexi(tiny_backbone(), lengths(), Switches { weight_sharing: false, ..Switches::default() }, 0).unwrap();
    let (a, b) = (count_parameters(&on), count_parameters(&off));
    assert_eq!(b.total, 3 * a.single_branch_total);
    assert_eq!(b.shared, 0);
    assert!(off.store.get("theta.S.dec.w1").is_some());
    assert!(on.store.get("theta.dec.w1").is_some());
}

#[test]
fn overhead_is_small_and_vanishes_without_branch_parts() {
    for pe in [PeKind::Sinusoidal, PeKind::Learnable] {
        let cfg = BackboneConfig { pe, ..BackboneConfig::default() };
        let l = BranchLengths::new(2, 6, 8).unwrap();
        let full = count_parameters(&FlnParams::flexi(cfg.clone(), l, Switches::default(), 0).unwrap());
        assert!(full.overhead > 0.0 && full.overhead < 0.05, "{pe:?}: {}", full.overhead);
        let plain = Switches { independent_pe: false, specialized_ln: false, ..Switches::default() };
        let none = count_parameters(&FlnParams::flexi(cfg.clone(), l, plain, 0).unwrap());
        assert_eq!(none.overhead, 0.0);
        let single = FlnParams::single(cfg, 8, 0).unwrap();
        assert_eq!(none.total, single.store.numel());
        assert_eq!(full.single_branch_total, single.store.numel());
    }
}

#[test]
fn positional_shift_follows_switches() {
    let d = 8;
    let l = lengths();
    let ipe = FlnParams::flexi(tiny_backbone(), l, Switches::default(), 0).unwrap();
    let shared = FlnParams::flexi(tiny_backbone(), l, Switches { independent_pe: false, ..Switches::default() }, 0).unwrap();
    for b in BranchId::ALL {
        for t in 0..l.get(b) {
            assert_eq!(ipe.positional_encode(t, b).unwrap(), sinusoidal(t, l.get(b), d));
            assert_eq!(shared.positional_encode(t, b).unwrap(), sinusoidal(t, l.long, d));
        }
    }
    assert!(matches!(ipe.positional_encode(2, BranchId::S), Err(ModelError::Timestep { .. })));
    let learn = FlnParams::flexi(BackboneConfig { pe: PeKind::Learnable, ..tiny_backbone() }, l, Switches::default(), 0).unwrap();
    for b in BranchId::ALL {
        assert_eq!(learn.store.get(&format!("pe.{b}")).unwrap().shape(), &[l.get(b), d]);
        assert!(learn.positional_encode(0, b).unwrap().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn sinusoid_components() {
    let v = sinusoidal(0, 3, 6);
    assert_eq!(v[0], 3f64.sin());
    assert_eq!(v[1], 3f64.cos());
    assert!((v[2] - (3.0 / 10000f64.powf(2.0 / 6.0)).sin()).abs() < 1e-15);
    assert!((v[5] - (3.0 / 10000f64.powf(4.0 / 6.0)).cos()).abs() < 1e-15);
}

#[test]
fn init_is_seeded() {
    let a = FlnParams::flexi(tiny_backbone(), lengths(), Switches::default(), 5).unwrap();
    let b = FlnParams::flexi(tiny_backbone(), lengths(), Switches::default(), 5).unwrap();
    let c = FlnParams::flexi(tiny_backbone(), lengths(), Switches::default(), 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let w = a.store.get("theta.enc0.attn.wq").unwrap();
    assert!(w.data().iter().all(|&v| v.abs() <= 1.0 / 8f64.sqrt()));
    assert!(a.store.get("ln.enc0.ln1.S.gamma").unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn strict_and_open_lengths() {
    let p = FlnParams::flexi(tiny_backbone(), lengths(), Switches::default(), 0).unwrap();
    let bundle = tiny_bundle(lengths(), 2, 3, 1);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false).unwrap();
    let long_in = bundle.input(BranchId::L);
    assert!(matches!(p.forward(&mut tape, &bound, long_in, BranchId::S), Err(ModelError::LengthMismatch { .. })));
    assert!(p.forward_open(&mut tape, &bound, long_in, BranchId::S, None).is_err());
    assert!(p.forward_open(&mut tape, &bound, bundle.input(BranchId::S), BranchId::M, None).is_ok());
    assert!(p.forward(&mut tape, &bound, &Tensor::zeros(&[1, 2, 2]), BranchId::S).is_err());
}

#[test]
fn predict_keeps_the_most_recent_steps() {
    let p = FlnParams::flexi(tiny_backbone(), lengths(), Switches::default(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let obs = random_tensor(&mut rng, &[1, 2, 7, 2], -1.0, 1.0);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false).unwrap();
    let r = predict(&mut tape, &p, &bound, &obs).unwrap();
    assert_eq!((r.branch, r.used_len), (BranchId::L, 4));
    let direct = p.forward(&mut tape, &bound, &keep_recent(&obs, 4).unwrap(), BranchId::L).unwrap();
    assert_eq!(r.pred.values(&tape), direct.values(&tape));
    assert!(matches!(predict(&mut tape, &p, &bound, &random_tensor(&mut rng, &[1, 2, 1, 2], -1.0, 1.0)), Err(ModelError::RouteTooShort { .. })));
}

fn route_oracle(h: usize, l: &BranchLengths) -> BranchId {
    let mut best: Option<(usize, usize, BranchId)> = None;
    for b in BranchId::ALL {
        let d = h.abs_diff(l.get(b));
        let key = (d, usize::MAX - l.get(b), b);
        if best.is_none_or(|x| (key.0, key.1) < (x.0, x.1)) {
            best = Some(key);
        }
    }
    best.unwrap().2
}

proptest! {
    #[test]
    fn routing_matches_argmin_with_ties_to_longer(s in 1usize..20, dm in 1usize..20, dl in 1usize..20, h in 0usize..80) {
        let l = BranchLengths::new(s, s + dm, s + dm + dl).unwrap();
        match route(h, &l) {
            Ok(b) => {
                prop_assert!(h >= s);
                prop_assert_eq!(b, route_oracle(h, &l));
            }
            Err(_) => prop_assert!(h < s),
        }
    }

    #[test]
    fn midpoints_route_to_the_longer_branch(s in 1usize..20, half_m in 1usize..10, half_l in 1usize..10) {
        let l = BranchLengths::new(s, s + 2 * half_m, s + 2 * half_m + 2 * half_l).unwrap();
        prop_assert_eq!(route(s + half_m, &l).unwrap(), BranchId::M);
        prop_assert_eq!(route(l.medium + half_l, &l).unwrap(), BranchId::L);
    }
}

#[test]
fn layer_norm_standardizes_features() {
    let p = FlnParams::flexi(tiny_backbone(), lengths(), Switches::default(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false).unwrap();
    let x = tape.constant(random_tensor(&mut rng, &[2, 5, 8], -3.0, 7.0)).unwrap();
    let y = p.net(&bound, BranchId::M).unwrap().specialized_layer_norm(&mut tape, x, "enc0.ln1", None).unwrap();
    for row in tape.value(y).data().chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-4, "{mean} {var}");
    }
    assert!(p.net(&bound, BranchId::M).unwrap().specialized_layer_norm(&mut tape, x, "enc9.ln1", None).is_err());
}

#[test]
fn attention_rows_sum_to_one() {
    let p = FlnParams::flexi(BackboneConfig { layers: 2, ..tiny_backbone() }, lengths(), Switches::default(), 0).unwrap();
    let bundle = tiny_bundle(lengths(), 3, 3, 2);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false).unwrap();
    let mut cap = flexilength::backbone::Capture::default();
    p.forward_open(&mut tape, &bound, bundle.input(BranchId::L), BranchId::L, Some(&mut cap)).unwrap();
    assert_eq!(cap.attention.len(), 2);
    assert_eq!(cap.ln_inputs.len(), 5);
    for a in &cap.attention {
        assert_eq!(a.shape(), &[1, 2, 12, 12]);
        for row in a.data().chunks(12) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn long_branch_reduces_to_a_single_model_with_copied_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut single = FlnParams::single(tiny_backbone(), 4, 3).unwrap();
    for site in ["enc0.ln1", "enc0.ln2", "dec.ln"] {
        for part in ["gamma", "beta"] {
            *single.store.get_mut(&format!("ln.{site}.{part}")).unwrap() = random_tensor(&mut rng, &[8], 0.5, 1.5);
        }
    }
    let mut flexi = FlnParams::flexi(tiny_backbone(), lengths(), Switches::default(), 99).unwrap();
    for e in single.store.entries() {
        let name = match e.name.strip_prefix("ln.enc0.") {
            Some(rest) => {
                let (site, part) = rest.split_once('.').unwrap();
                format!("ln.enc0.{site}.L.{part}")
            }
            None => e.name.clone(),
        };
        *flexi.store.get_mut(&name).unwrap_or_else(|| panic!("{name}")) = e.value.clone();
    }
    let bundle = tiny_bundle(lengths(), 2, 3, 4);
    let mut tape = Tape::new();
    let (bs, bf) = (single.bind(&mut tape, false).unwrap(), flexi.bind(&mut tape, false).unwrap());
    let a = single.forward(&mut tape, &bs, bundle.input(BranchId::L), BranchId::L).unwrap().values(&tape);
    let b = flexi.forward(&mut tape, &bf, bundle.input(BranchId::L), BranchId::L).unwrap().values(&tape);
    assert_eq!(a, b);
}

#[test]
fn shared_weights_move_every_branch() {
    let mut p = FlnParams::flexi(tiny_backbone(), lengths(), Switches::default(), 0).unwrap();
    let bundle = tiny_bundle(lengths(), 2, 3, 6);
    let forward_long = |p: &FlnParams| {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false).unwrap();
        p.forward(&mut tape, &bound, bundle.input(BranchId::L), BranchId::L).unwrap().values(&tape)
    };
    let before = forward_long(&p);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, true).unwrap();
    let pred = p.forward(&mut tape, &bound, bundle.input(BranchId::S), BranchId::S).unwrap();
    let l = nll(&mut tape, &pred, bundle.future(BranchId::S)).unwrap();
    tape.backward(l).unwrap();
    let grads = bound.grads(&tape);
    let mut adam = flexilength::trainstrat::Adam::new(&p.store);
    adam.step(&mut p.store, &grads, 0.01).unwrap();
    assert_ne!(forward_long(&p), before);
    let long_ln = p.store.position("ln.enc0.ln1.L.gamma").unwrap();
    assert!(grads[long_ln].as_ref().is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
}
