use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reentangle::autodiff::Tape;
use reentangle::checkpoint::Checkpoint;
use reentangle::data::{generate, Dataset, DomainSpec, TrainPool};
use reentangle::nn::{
    fingerprint, init_params, Activation, Dims, DiscriminatorSet, Disentangler, DisentanglerKind, GeneratorSet, Mlp,
    LEAKY_SLOPE,
};
use reentangle::objectives::{cycle1, cycle2, HistoryBuffer, LossWeights};
use reentangle::train::{continue_experiment, run_experiment, CoopOptimizer, Mode, Phase, TrainConfig, Trainer};
use reentangle::Tensor;

fn dataset(seed: u64) -> Dataset {
    generate(&DomainSpec::default(), 2_000, 2_000, 512, seed).unwrap()
}

fn config(mode: Mode, steps: usize) -> TrainConfig {
    TrainConfig {
        mode,
        total_steps: steps,
        decay_start: steps / 2,
        batch: 32,
        eval_every: 25,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn uncooperative_phases_freeze_the_other_generator() {
    let ds = dataset(1);
    let mut tr = Trainer::new(config(Mode::Uncooperative, 200), ds.training()).unwrap();
    for _ in 0..200 {
        let mut d_prev = fingerprint(tr.gen.d_params());
        let mut e_prev = fingerprint(tr.gen.e_params());
        let mut phases = Vec::new();
        tr.step_observed(ds.training(), &mut |phase, gen, _| {
            let (d, e) = (fingerprint(gen.d_params()), fingerprint(gen.e_params()));
            match phase {
                Phase::Cycle1 => {
                    assert_eq!(e, e_prev, "E moved during cycle 1");
                    assert_ne!(d, d_prev, "D did not move during cycle 1");
                }
                Phase::Cycle2 => {
                    assert_eq!(d, d_prev, "D moved during cycle 2");
                    assert_ne!(e, e_prev, "E did not move during cycle 2");
                }
                Phase::Adversaries => assert_eq!((d, e), (d_prev, e_prev)),
                Phase::Joint => panic!("joint phase in uncooperative mode"),
            }
            (d_prev, e_prev) = (d, e);
            phases.push(phase);
        })
        .unwrap();
        assert_eq!(phases, [Phase::Cycle1, Phase::Cycle2, Phase::Adversaries]);
    }
}

#[test]
fn cooperative_step_moves_both_generators_at_once() {
    let ds = dataset(1);
    let mut tr = Trainer::new(config(Mode::Cooperative, 20), ds.training()).unwrap();
    for _ in 0..20 {
        let (d0, e0) = (fingerprint(tr.gen.d_params()), fingerprint(tr.gen.e_params()));
        let a0 = fingerprint(tr.disc.params());
        let mut phases = Vec::new();
        tr.step_observed(ds.training(), &mut |phase, gen, disc| {
            if phase == Phase::Joint {
                assert_ne!(fingerprint(gen.d_params()), d0);
                assert_ne!(fingerprint(gen.e_params()), e0);
                assert_eq!(fingerprint(disc.params()), a0);
            }
            phases.push(phase);
        })
        .unwrap();
        assert_eq!(phases, [Phase::Joint, Phase::Adversaries]);
    }
}

#[test]
fn cycle_totals_do_not_depend_on_the_tape_layout() {
    let ds = dataset(2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for kind in [DisentanglerKind::Split, DisentanglerKind::Joint] {
        let (gen, disc) = init_params(Dims::default(), 16, kind, &mut rng);
        let w = LossWeights::default();
        let v = ds.training().sample(TrainPool::V, 64, &mut rng).unwrap();
        let c = ds.training().sample(TrainPool::C, 64, &mut rng).unwrap();
        let r = gen
            .disentangle(&ds.training().sample(TrainPool::V, 64, &mut rng).unwrap())
            .unwrap()
            .1;

        let alone1 = {
            let mut t = Tape::new();
            let (bg, ac) = (gen.bind(&mut t).unwrap(), disc.a_c.bind(&mut t).unwrap());
            let vi = t.leaf(v.clone()).unwrap();
            let o = cycle1(&mut t, &bg, &ac, &w, vi).unwrap();
            t.scalar(o.total).unwrap()
        };
        let alone2 = {
            let mut t = Tape::new();
            let (bg, av) = (gen.bind(&mut t).unwrap(), disc.a_v.bind(&mut t).unwrap());
            let (ci, ri) = (t.leaf(c.clone()).unwrap(), t.leaf(r.clone()).unwrap());
            let o = cycle2(&mut t, &bg, &av, &w, ci, ri).unwrap();
            t.scalar(o.total).unwrap()
        };
        let mut t = Tape::new();
        let bg = gen.bind(&mut t).unwrap();
        let (ac, av) = (disc.a_c.bind(&mut t).unwrap(), disc.a_v.bind(&mut t).unwrap());
        let (vi, ci, ri) = (t.leaf(v).unwrap(), t.leaf(c).unwrap(), t.leaf(r).unwrap());
        let o1 = cycle1(&mut t, &bg, &ac, &w, vi).unwrap();
        let o2 = cycle2(&mut t, &bg, &av, &w, ci, ri).unwrap();
        assert_eq!(t.scalar(o1.total).unwrap().to_bits(), alone1.to_bits());
        assert_eq!(t.scalar(o2.total).unwrap().to_bits(), alone2.to_bits());
    }
}

#[test]
fn first_cycle_one_losses_agree_across_modes() {
    let ds = dataset(3);
    let mut u = Trainer::new(config(Mode::Uncooperative, 10), ds.training()).unwrap();
    let mut c = Trainer::new(config(Mode::Cooperative, 10), ds.training()).unwrap();
    let (ru, rc) = (u.step(ds.training()).unwrap(), c.step(ds.training()).unwrap());
    assert_eq!(ru.ell_v.to_bits(), rc.ell_v.to_bits());
    assert_eq!(ru.gan_g1.to_bits(), rc.gan_g1.to_bits());
}

#[test]
fn shared_and_separate_cooperative_optimizers_agree() {
    let ds = dataset(4);
    let run = |opt| {
        let cfg = TrainConfig {
            coop_optimizer: opt,
            ..config(Mode::Cooperative, 60)
        };
        run_experiment(&cfg, &ds, &mut ()).unwrap()
    };
    let (a, b) = (run(CoopOptimizer::Separate), run(CoopOptimizer::Shared));
    assert_eq!(a.gen, b.gen);
    assert_eq!(a.disc, b.disc);
    assert_eq!(a.history, b.history);
}

#[test]
fn identical_configs_give_identical_runs() {
    let ds = dataset(5);
    for mode in [Mode::Uncooperative, Mode::Cooperative] {
        let a = run_experiment(&config(mode, 80), &ds, &mut ()).unwrap();
        let b = run_experiment(&config(mode, 80), &ds, &mut ()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.gen, b.gen);
        let other = run_experiment(
            &TrainConfig {
                seed: 12,
                ..config(mode, 80)
            },
            &ds,
            &mut (),
        )
        .unwrap();
        assert_ne!(a.history, other.history);
    }
}

#[test]
fn resuming_from_a_checkpoint_is_bit_exact() {
    let ds = dataset(6);
    for mode in [Mode::Uncooperative, Mode::Cooperative] {
        let cfg = config(mode, 100);
        let full = run_experiment(&cfg, &ds, &mut ()).unwrap();

        let mut tr = Trainer::new(cfg.clone(), ds.training()).unwrap();
        for _ in 0..40 {
            tr.step(ds.training()).unwrap();
        }
        let mut bytes = Vec::new();
        Checkpoint::from_trainer(&tr).to_writer(&mut bytes).unwrap();
        let resumed = Checkpoint::from_reader(&bytes[..]).unwrap().into_trainer().unwrap();
        assert_eq!(resumed.step_count(), 40);
        let rest = continue_experiment(resumed, &ds, &mut ()).unwrap();

        assert_eq!(rest.gen, full.gen);
        assert_eq!(rest.disc, full.disc);
        assert_eq!(rest.history[..], full.history[40..]);
        assert_eq!(rest.final_rho, full.final_rho);
    }
}

#[test]
fn rho_is_recorded_on_schedule() {
    let ds = dataset(7);
    let cfg = TrainConfig {
        eval_every: 30,
        ..config(Mode::Uncooperative, 100)
    };
    let res = run_experiment(&cfg, &ds, &mut ()).unwrap();
    let evaluated: Vec<usize> = res.history.iter().filter(|r| r.rho.is_some()).map(|r| r.step).collect();
    assert_eq!(evaluated, [30, 60, 90, 100]);
    assert_eq!(res.history.first().unwrap().step, 1);
    assert_eq!(res.final_rho, res.history.last().unwrap().rho);
    assert_eq!(res.steps_completed, 100);
}

#[test]
fn learning_rate_follows_the_schedule() {
    let ds = dataset(8);
    let res = run_experiment(&config(Mode::Cooperative, 40), &ds, &mut ()).unwrap();
    for rec in &res.history {
        let expected = if rec.step <= 20 {
            0.0002
        } else {
            0.0002 * (40 - (rec.step - 1)) as f64 / 20.0
        };
        assert!(
            (rec.lr - expected).abs() < 1e-18,
            "step {}: {} vs {expected}",
            rec.step,
            rec.lr
        );
    }
}

#[test]
fn reconstruction_improves_early_in_both_modes() {
    let ds = dataset(9);
    for mode in [Mode::Uncooperative, Mode::Cooperative] {
        let cfg = TrainConfig {
            batch: 64,
            ..config(mode, 1500)
        };
        let res = run_experiment(&cfg, &ds, &mut ()).unwrap();
        let w = cfg.weights;
        let mean = |s: &[reentangle::eval::MetricsRecord]| s.iter().map(|r| r.recon(&w)).sum::<f64>() / s.len() as f64;
        let early = mean(&res.history[..100]);
        let late = mean(&res.history[1400..]);
        assert!(late < 0.5 * early, "{mode:?}: {early} -> {late}");
    }
}

#[test]
fn history_buffer_survives_randomized_insertions() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut buf = HistoryBuffer::seeded(50, 22);
    let mut next_id = 0.0;
    // multiset of ids currently held by the buffer
    let mut held: HashMap<u64, usize> = HashMap::new();
    let mut inserted = 0;
    while inserted < 10_000 {
        let rows = rng.random_range(1..=40).min(10_000 - inserted);
        let fresh: Vec<f64> = (0..rows)
            .flat_map(|_| {
                next_id += 1.0;
                [next_id, -next_id]
            })
            .collect();
        let out = buf.draw(&Tensor::from_rows(rows, 2, fresh.clone()));
        inserted += rows;

        assert!(buf.len() <= 50);
        assert_eq!(out.shape(), [rows, 2]);
        let mut after: HashMap<u64, usize> = HashMap::new();
        for s in buf.samples() {
            assert_eq!(s[1], -s[0], "stored row was torn");
            *after.entry(s[0].to_bits()).or_default() += 1;
        }
        // while filling, a row is both stored and passed through
        let held_len: usize = held.values().sum();
        let filling = rows.min(50 - held_len);
        assert_eq!(out.data()[..2 * filling], fresh[..2 * filling]);
        // conservation: what went in (plus fill copies) equals what is held plus what came out
        let mut before = held.clone();
        for pair in fresh.chunks(2).chain(fresh[..2 * filling].chunks(2)) {
            *before.entry(pair[0].to_bits()).or_default() += 1;
        }
        let mut accounted = after.clone();
        for i in 0..rows {
            let row = out.row(i);
            assert_eq!(row[1], -row[0]);
            *accounted.entry(row[0].to_bits()).or_default() += 1;
        }
        assert_eq!(accounted, before);
        held = after;
    }
    assert_eq!(buf.len(), 50);
}

#[test]
fn history_buffer_returns_old_samples_about_half_the_time() {
    let mut buf = HistoryBuffer::seeded(50, 3);
    buf.draw(&Tensor::from_rows(50, 1, vec![-1.0; 50]));
    let out = buf.draw(&Tensor::from_rows(4_000, 1, (0..4_000).map(|i| i as f64).collect()));
    let swapped = (0..4_000).filter(|&i| out.row(i)[0] != i as f64).count();
    // binomial(4000, 0.5): sd ~ 32
    assert!((swapped as f64 - 2_000.0).abs() < 200.0, "{swapped}");
}

fn mlp1(w1: &[f64], b1: f64, w2: &[f64], b2: &[f64], act: Activation) -> Mlp {
    Mlp::from_parts(
        Tensor::from_rows(w1.len(), 1, w1.to_vec()),
        Tensor::from_rows(1, 1, vec![b1]),
        Tensor::from_rows(1, w2.len(), w2.to_vec()),
        Tensor::from_rows(1, b2.len(), b2.to_vec()),
        act,
    )
    .unwrap()
}

#[test]
fn cycle_one_gradients_of_d_match_the_chain_rule() {
    // one hidden unit everywhere, all units active
    let (w1c, b1c, w2c, b2c) = ([0.7, -0.3], 0.2, 1.3, 0.1);
    let (w1r, b1r, w2r, b2r) = ([-0.4, 0.9], 0.5, 0.8, -0.2);
    let (w1e, b1e, w2e, b2e) = ([0.6, 0.5], 0.3, [1.1, -0.7], [0.05, 0.4]);
    let (w1a, b1a, w2a, b2a) = (-0.9, 0.1, 1.7, 0.3);
    let v = [1.2, 0.4];
    let lambda = 10.0;

    let gen = GeneratorSet {
        dims: Dims::default(),
        d: Disentangler::Split {
            d_c: mlp1(&w1c, b1c, &[w2c], &[b2c], Activation::Relu),
            d_r: mlp1(&w1r, b1r, &[w2r], &[b2r], Activation::Relu),
        },
        e: mlp1(&w1e, b1e, &w2e, &b2e, Activation::Relu),
    };
    let a_c = mlp1(&[w1a], b1a, &[w2a], &[b2a], Activation::LeakyRelu(LEAKY_SLOPE));
    let mut tape = Tape::new();
    let (bg, ac) = (gen.bind(&mut tape).unwrap(), a_c.bind(&mut tape).unwrap());
    let vi = tape.leaf(Tensor::from_rows(1, 2, v.to_vec())).unwrap();
    let out = cycle1(&mut tape, &bg, &ac, &LossWeights::default(), vi).unwrap();
    let grads = tape.backward(out.total).unwrap();
    let got = bg.d_grads(&grads, &gen);

    // forward by hand
    let zc = v[0] * w1c[0] + v[1] * w1c[1] + b1c;
    let zr = v[0] * w1r[0] + v[1] * w1r[1] + b1r;
    assert!(zc > 0.0 && zr > 0.0);
    let (c, r) = (zc * w2c + b2c, zr * w2r + b2r);
    let ze = c * w1e[0] + r * w1e[1] + b1e;
    assert!(ze > 0.0);
    let vp = [ze * w2e[0] + b2e[0], ze * w2e[1] + b2e[1]];
    let za = c * w1a + b1a;
    let s = za.max(0.0) * w2a + LEAKY_SLOPE * za.min(0.0) * w2a + b2a;
    let total = lambda * ((v[0] - vp[0]).abs() + (v[1] - vp[1]).abs()) / 2.0 + (s - 1.0).powi(2);
    assert!((tape.scalar(out.total).unwrap() - total).abs() < 1e-12);

    // backward by hand
    let d_vp = [(vp[0] - v[0]).signum() / 2.0, (vp[1] - v[1]).signum() / 2.0];
    let d_ze = lambda * (d_vp[0] * w2e[0] + d_vp[1] * w2e[1]);
    let slope_a = if za > 0.0 { 1.0 } else { LEAKY_SLOPE };
    let d_c = d_ze * w1e[0] + 2.0 * (s - 1.0) * w2a * slope_a * w1a;
    let d_r = d_ze * w1e[1];
    let expect = [
        vec![d_c * w2c * v[0], d_c * w2c * v[1]],
        vec![d_c * w2c],
        vec![d_c * zc],
        vec![d_c],
        vec![d_r * w2r * v[0], d_r * w2r * v[1]],
        vec![d_r * w2r],
        vec![d_r * zr],
        vec![d_r],
    ];
    assert_eq!(got.len(), 8);
    for (g, e) in got.iter().zip(&expect) {
        for (a, b) in g.data().iter().zip(e) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            assert!(*a != 0.0);
        }
    }
}

#[test]
fn one_step_reduces_reconstruction_without_adversaries() {
    let ds = dataset(10);
    let dims = Dims::default();
    let mut gen = GeneratorSet::exact_inverse(dims, 8, DisentanglerKind::Split);
    // a linear-identity pair, slightly detuned so there is something to fix
    gen.e.params_mut()[2].data_mut().iter_mut().for_each(|w| *w *= 1.2);
    let disc = DiscriminatorSet {
        a_c: Mlp::zeros(1, 8, 1, Activation::LeakyRelu(LEAKY_SLOPE)),
        a_v: Mlp::zeros(2, 8, 1, Activation::LeakyRelu(LEAKY_SLOPE)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let v = ds.training().sample(TrainPool::V, 256, &mut rng).unwrap();
    let c = ds.training().sample(TrainPool::C, 256, &mut rng).unwrap();
    let w = LossWeights::default();
    let recon = |g: &GeneratorSet| {
        let r = g.disentangle(&v).unwrap().1;
        let mut t = Tape::new();
        let bg = g.bind(&mut t).unwrap();
        let (a_c, a_v) = (disc.a_c.bind(&mut t).unwrap(), disc.a_v.bind(&mut t).unwrap());
        let (vi, ci, ri) = (
            t.leaf(v.clone()).unwrap(),
            t.leaf(c.clone()).unwrap(),
            t.leaf(r).unwrap(),
        );
        let o1 = cycle1(&mut t, &bg, &a_c, &w, vi).unwrap();
        let o2 = cycle2(&mut t, &bg, &a_v, &w, ci, ri).unwrap();
        // adversaries output a constant 0, so each GAN term is exactly 1
        assert_eq!(
            (t.scalar(o1.gan_term).unwrap(), t.scalar(o2.gan_term).unwrap()),
            (1.0, 1.0)
        );
        t.scalar(o1.total).unwrap() + t.scalar(o2.total).unwrap() - 2.0
    };
    let before = recon(&gen);
    assert!(before > 0.0);
    for mode in [Mode::Cooperative, Mode::Uncooperative] {
        let cfg = TrainConfig {
            batch: 256,
            lr0: 1e-3,
            ..config(mode, 10)
        };
        let mut tr = Trainer::from_parts(cfg, gen.clone(), disc.clone());
        tr.step(ds.training()).unwrap();
        let after = recon(&tr.gen);
        assert!(after < before, "{mode:?}: {before} -> {after}");
    }
}
