//! End-to-end acceptance checks. Each test prints exactly one line of the form
//! `[PASS] name: detail (runtime)` or `[FAIL] ...` and then asserts.
//!
//! Tests share one core in CI, so they take a global lock to keep the
//! reported runtimes honest, and the trained DQN agents are built once.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use quantem_core::dqn::{self, compass_starts, DqnAgent, DqnConfig, MemoryCue};
use quantem_core::emulation::{DropoutPolicy, Emulation};
use quantem_core::mpc::{mpc_rollout, solve_mpc, MpcConfig, SearchStrategy};
use quantem_core::nn::{self, Activation, Mlp};
use quantem_core::quantization::{collect_patterns, nearest_direction, DropoutMask, KdTree, MaskedAlphabet};
use quantem_core::supervised::{self, ClassifierArch, ClassifierTraining, FeatureSpec};
use quantem_core::transfer::{self, TransferMap, TransferredPolicy};
use quantem_core::{DiscretizedSystem, Matrix, NearestBackend, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(name: &str, pass: bool, detail: String, elapsed: Duration, limit: Duration) {
    let pass = pass && elapsed < limit;
    println!(
        "[{}] {name}: {detail} ({:.2} s, limit {} s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    assert!(pass, "{name} failed");
}

fn m2(a: f64, b: f64, c: f64, d: f64) -> Matrix {
    Matrix::from_row_slice(2, 2, &[a, b, c, d])
}

struct Trained {
    agents: Vec<DqnAgent>,
    worst: Vec<f64>,
    syncs_exact: bool,
    syncs: usize,
    elapsed: Duration,
}

const DQN_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn trained() -> &'static Trained {
    static AGENTS: OnceLock<Trained> = OnceLock::new();
    AGENTS.get_or_init(|| {
        let start = Instant::now();
        let emu = Emulation::two_state_example();
        let mut agents = Vec::new();
        let mut worst = Vec::new();
        let mut syncs_exact = true;
        let mut syncs = 0;
        for seed in DQN_SEEDS {
            let cfg = DqnConfig { seed, ..DqnConfig::default() };
            let mut agent = DqnAgent::new(4, 25, &cfg).unwrap();
            let log = dqn::train(&mut agent, &emu, &cfg).unwrap();
            syncs += log.syncs.len();
            syncs_exact &= log.syncs.iter().all(|s| s.l_dqn_after == s.l_msbe_after);
            let w = compass_starts()
                .iter()
                .map(|x0| {
                    dqn::greedy_rollout(&agent, &emu, x0, 200, &DropoutPolicy::None)
                        .unwrap()
                        .terminal_norm()
                })
                .fold(0.0, f64::max);
            worst.push(w);
            agents.push(agent);
        }
        Trained {
            agents,
            worst,
            syncs_exact,
            syncs,
            elapsed: start.elapsed(),
        }
    })
}

/// Agents whose greedy rollouts met the tracking target.
fn good_agents() -> Vec<&'static DqnAgent> {
    let t = trained();
    t.agents.iter().zip(&t.worst).filter(|(_, &w)| w <= 0.15).map(|(a, _)| a).collect()
}

#[test]
fn alphabet_cardinality() {
    let _g = serial();
    let start = Instant::now();
    let emu = Emulation::two_state_example();
    let patterns = collect_patterns(4, 1 << 20).unwrap().len();
    let dirs = emu.alphabet.len();
    let has_zero = emu.alphabet.direction(emu.alphabet.zero_index()).norm() == 0.0;
    report(
        "alphabet-cardinality",
        dirs == 25 && patterns == 81 && has_zero,
        format!("{dirs} distinct directions from {patterns} patterns, zero included: {has_zero}"),
        start.elapsed(),
        Duration::from_secs(1),
    );
}

/// `e^{Ht}` for `H = [[0,1],[-1,-2]]` (double eigenvalue -1) in closed form.
fn oscillator_flow(t: f64) -> Matrix {
    m2(1.0 + t, t, -t, 1.0 - t) * (-t).exp()
}

fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).amax() / b.amax()
}

#[test]
fn discretization() {
    let _g = serial();
    let start = Instant::now();
    let emu = Emulation::two_state_example();
    let b = emu.plant.b_d.clone() / 0.05;
    let exact_zero_a = emu.plant.a_d == Matrix::identity(2, 2) && emu.plant.b_d == &b * 0.05;
    let flow = emu.flow().unwrap();
    let flow_err = rel_err(&flow, &oscillator_flow(0.05));

    // Non-trivial drift: A = H, so B_d = ∫₀ʰ e^{Hs} ds · B by composite Simpson.
    let h = 0.05;
    let sys = DiscretizedSystem::discretize(&m2(0.0, 1.0, -1.0, -2.0), &b, h, 1e-12).unwrap();
    let intervals = 2000;
    let dx = h / intervals as f64;
    let mut integral = Matrix::zeros(2, 2);
    for i in 0..=intervals {
        let w = if i == 0 || i == intervals { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        integral += oscillator_flow(i as f64 * dx) * w;
    }
    integral *= dx / 3.0;
    let bd_err = rel_err(&sys.b_d, &(integral * &b));
    let ad_err = rel_err(&sys.a_d, &oscillator_flow(h));
    let worst = flow_err.max(bd_err).max(ad_err);
    report(
        "discretization",
        exact_zero_a && worst <= 1e-10,
        format!(
            "A = 0 exact: {exact_zero_a}; reference flow {flow_err:.1e}, A_d {ad_err:.1e}, B_d {bd_err:.1e} relative"
        ),
        start.elapsed(),
        Duration::from_secs(1),
    );
}

fn fd_check<F: Fn(&[f64]) -> f64>(f: F, params: &[f64], analytic: &[f64], eps: f64) -> (usize, f64) {
    let mut worst: f64 = 0.0;
    let mut bad = 0;
    let mut p = params.to_vec();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let lp = f(&p);
        p[i] = orig - eps;
        let lm = f(&p);
        p[i] = orig;
        let fd = (lp - lm) / (2.0 * eps);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max(rel);
        if rel > 1e-5 {
            bad += 1;
        }
    }
    (bad, worst)
}

#[test]
fn gradient_fidelity() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    let mut bad = 0;
    let mut worst: f64 = 0.0;
    let acts = [Activation::Sigmoid, Activation::Relu, Activation::Linear];
    for trial in 0..12 {
        let sizes = [3 + trial % 3, 5, 4, 6];
        let layer_acts = [acts[trial % 3], acts[(trial + 1) % 2], Activation::Linear];
        let net = Mlp::new(&sizes, &layer_acts, trial as u64).unwrap();
        let x = Vector::from_fn(sizes[0], |_, _| rng.random_range(-1.0..1.0));
        let class = rng.random_range(0..6);
        let target = Vector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        for use_ce in [true, false] {
            let loss_at = |p: &[f64]| {
                let mut n = net.clone();
                n.set_parameters(p).unwrap();
                let y = n.predict(&x).unwrap();
                if use_ce {
                    nn::loss_cross_entropy(&y, class).unwrap().0
                } else {
                    nn::loss_squared(&y, &target).unwrap().0
                }
            };
            let (y, cache) = net.forward(&x).unwrap();
            let d = if use_ce {
                nn::loss_cross_entropy(&y, class).unwrap().1
            } else {
                nn::loss_squared(&y, &target).unwrap().1
            };
            let grads = net.backward(&cache, &Matrix::from_column_slice(6, 1, d.as_slice())).unwrap();
            let (b, w) = fd_check(loss_at, &net.parameters(), &grads.to_flat(), 1e-5);
            bad += b;
            worst = worst.max(w);
            checked += net.parameter_count();
        }
    }

    // Max-branch loss with distinct online and target networks.
    let cfg = DqnConfig { hidden: 10, ..DqnConfig::default() };
    let mut agent = DqnAgent::new(4, 25, &cfg).unwrap();
    agent.target_net = Mlp::new(&[4, 10, 25], &[Activation::Relu, Activation::Linear], 77).unwrap();
    let cues: Vec<MemoryCue> = (0..16)
        .map(|_| MemoryCue {
            s: Vector::from_fn(4, |_, _| rng.random_range(-1.0..1.0)),
            d_index: rng.random_range(0..25),
            r: -rng.random_range(0.0..0.5),
            s_next: Vector::from_fn(4, |_, _| rng.random_range(-1.0..1.0)),
        })
        .collect();
    let refs: Vec<&MemoryCue> = cues.iter().collect();
    let rep = agent.compute_loss(&refs).unwrap();
    let both_branches = rep.msbe_active > 0 && rep.msbe_active < refs.len();
    let loss_at = |p: &[f64]| {
        let mut a = agent.clone();
        a.q_net.set_parameters(p).unwrap();
        let r = a.compute_loss(&refs).unwrap();
        assert_eq!(r.msbe_active, rep.msbe_active, "perturbation flipped a branch");
        r.loss
    };
    let (b, w) = fd_check(loss_at, &agent.q_net.parameters(), &rep.grads.to_flat(), 1e-5);
    bad += b;
    worst = worst.max(w);
    checked += agent.q_net.parameter_count();

    report(
        "gradient-fidelity",
        bad == 0 && both_branches,
        format!("{checked} parameters, worst relative error {worst:.1e}, max-loss exercised both branches: {both_branches}"),
        start.elapsed(),
        Duration::from_secs(30),
    );
}

#[test]
fn mpc_optimality() {
    let _g = serial();
    let start = Instant::now();
    let emu = Emulation::two_state_example();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    let mut nodes = (0u64, 0u64);
    for _ in 0..100 {
        let n_h = rng.random_range(1..=3);
        let x_qs = Vector::from_fn(2, |_, _| rng.random_range(-1.5..1.5));
        let x_ref = Vector::from_fn(2, |_, _| rng.random_range(-1.5..1.5));
        let p = rng.random_range(0.5..10.0);
        let q = rng.random_range(0.5..10.0);
        let r = rng.random_range(0.001..0.5);
        let base = MpcConfig::new(
            n_h,
            Matrix::identity(2, 2) * p,
            Matrix::identity(2, 2) * q,
            Matrix::identity(4, 4) * r,
        )
        .unwrap();
        let mask = DropoutMask::none(4);
        let ex = solve_mpc(&x_qs, &x_ref, &emu, &base.clone().with_search(SearchStrategy::Exhaustive), &mask).unwrap();
        let bb = solve_mpc(&x_qs, &x_ref, &emu, &base.with_search(SearchStrategy::BranchAndBound), &mask).unwrap();
        nodes.0 += ex.nodes;
        nodes.1 += bb.nodes;
        if ex.cost.to_bits() != bb.cost.to_bits() || ex.first_direction != bb.first_direction {
            mismatches += 1;
        }
    }
    report(
        "mpc-optimality",
        mismatches == 0,
        format!(
            "100 random instances, {mismatches} mismatches; nodes exhaustive {} vs branch-and-bound {}",
            nodes.0, nodes.1
        ),
        start.elapsed(),
        Duration::from_secs(120),
    );
}

#[test]
fn mpc_emulation() {
    let _g = serial();
    let start = Instant::now();
    let emu = Emulation::two_state_example();
    let cfg = MpcConfig::standard(2, 4);
    let r = mpc_rollout(&Vector::from_vec(vec![1.0, 0.0]), 200, &emu, &cfg, &DropoutPolicy::None).unwrap();
    let terminal = r.terminal_norm();
    let max_err = r.tracking_errors().into_iter().fold(0.0, f64::max);
    let bound = 2.0 * emu.alphabet.max_direction_norm();
    report(
        "mpc-emulation",
        terminal <= 0.1 && max_err <= bound,
        format!("terminal |x_qs| {terminal:.4} (<= 0.1), max tracking error {max_err:.4} (<= {bound:.4})"),
        start.elapsed(),
        Duration::from_secs(60),
    );
}

#[test]
fn supervised_pipeline() {
    let _g = serial();
    let start = Instant::now();
    let emu = Emulation::two_state_example();
    let mpc = MpcConfig::standard(2, 4);
    let spec = FeatureSpec::ErrorAndRefDirection;
    let train_starts = supervised::annulus_starts(50, 0.5, 1.5, 1);
    let train = supervised::generate_dataset(&train_starts, 200, &emu, &mpc, spec, 1).unwrap();
    let test = supervised::generate_dataset(&supervised::circle_starts(12, 1.0), 70, &emu, &mpc, spec, 2).unwrap();
    let cfg = ClassifierTraining { seed: 1, ..ClassifierTraining::default() };
    let (model, rep) = supervised::train_classifier(&train, 25, &ClassifierArch::three_hidden(64), &cfg).unwrap();
    let test_acc = supervised::evaluate(&model, &test).unwrap();
    let worst = compass_starts()
        .iter()
        .map(|x0| {
            supervised::supervised_rollout(x0, 200, &model, spec, &emu, &DropoutPolicy::None)
                .unwrap()
                .terminal_norm()
        })
        .fold(0.0, f64::max);
    report(
        "supervised-pipeline",
        rep.train_accuracy >= 0.85 && test_acc >= 0.80 && worst <= 0.15,
        format!(
            "{} training samples; train accuracy {:.3} (>= 0.85), unit-circle test accuracy {test_acc:.3} on {} samples (>= 0.80), worst terminal |x_qs| {worst:.4} (<= 0.15)",
            train.len(),
            rep.train_accuracy,
            test.len()
        ),
        start.elapsed(),
        Duration::from_secs(600),
    );
}

#[test]
fn dqn_training() {
    let _g = serial();
    let t = trained();
    let passing = t.worst.iter().filter(|&&w| w <= 0.15).count();
    let worst: Vec<String> = t.worst.iter().map(|w| format!("{w:.3}")).collect();
    report(
        "dqn-training",
        passing >= 4 && t.syncs_exact,
        format!(
            "{passing}/5 seeds reach terminal |x_qs| <= 0.15 from 8 compass starts (worst per seed: {}); l_DQN = l_MSBE exactly after all {} syncs: {}",
            worst.join(", "),
            t.syncs,
            t.syncs_exact
        ),
        t.elapsed,
        Duration::from_secs(600),
    );
}

#[test]
fn dropout_resilience() {
    let _g = serial();
    let agents = good_agents();
    let start = Instant::now();
    let emu = Emulation::two_state_example();
    let mut worst: f64 = 0.0;
    let mut illegal = 0;
    let mut rollouts = 0;
    for (i, agent) in agents.iter().enumerate() {
        for x0 in compass_starts() {
            let policy = DropoutPolicy::Random { k: 1, seed: 100 + i as u64 };
            let r = dqn::greedy_rollout(agent, &emu, &x0, 200, &policy).unwrap();
            rollouts += 1;
            worst = worst.max(r.terminal_error());
            for (mask, &d) in r.masks.iter().zip(&r.directions) {
                if !emu.available(mask).unwrap().contains(d) {
                    illegal += 1;
                }
            }
        }
        // Direct masked argmax against a brute-force scan over the survivors.
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        for _ in 0..200 {
            let s = Vector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let mask = DropoutMask::random(4, 1, &mut rng).unwrap();
            let avail = emu.available(&mask).unwrap();
            let q = agent.q_values(&s).unwrap();
            let brute = avail
                .indices()
                .iter()
                .copied()
                .reduce(|b, j| if q[j] > q[b] { j } else { b })
                .unwrap();
            if agent.greedy(&s, &avail).unwrap() != brute {
                illegal += 1;
            }
        }
    }
    report(
        "dropout-resilience",
        !agents.is_empty() && worst <= 0.25 && illegal == 0,
        format!(
            "{rollouts} rollouts over {} trained agents completed, worst terminal error {worst:.4} (<= 0.25), {illegal} dropped or non-maximal selections",
            agents.len()
        ),
        start.elapsed(),
        Duration::from_secs(60),
    );
}

#[test]
fn theorem_construction() {
    let _g = serial();
    let agent = good_agents()[0];
    let start = Instant::now();
    let emu = Emulation::two_state_example();
    let rotation = TransferMap::new(m2(0.0, 1.0, -1.0, 0.0)).unwrap();
    let shear = TransferMap::new(m2(1.0, 0.5, -0.5, 1.0)).unwrap();
    let states = transfer::sample_states(1000, 2, 1.5, 5);
    let mut worst_rel: f64 = 0.0;
    for map in [&rotation, &shear] {
        let net = transfer::transform_q_weights(&agent.q_net, map).unwrap();
        for s in &states {
            let a = net.predict(s).unwrap();
            let b = agent.q_net.predict(&(map.lift() * s)).unwrap();
            worst_rel = worst_rel.max((&a - &b).amax() / b.amax());
        }
    }
    let rep = transfer::verify_theorem1(agent, &rotation, &emu.alphabet, &states).unwrap();
    let rate = rep.agreement_rate();
    report(
        "theorem-construction",
        worst_rel <= 1e-12 && rate == 1.0,
        format!("weight absorption relative error {worst_rel:.1e} on 1000 states (<= 1e-12); rotation agreement rate {rate}"),
        start.elapsed(),
        Duration::from_secs(30),
    );
}

#[test]
fn non_invariant_transfer() {
    let _g = serial();
    let agent = good_agents()[0].clone();
    let start = Instant::now();
    let emu = Emulation::two_state_example();
    let o = m2(1.0, 0.5, -0.5, 1.0);
    let h_o = transfer::conjugate_system(emu.reference.matrix(), &o).unwrap();
    let target = emu.with_reference(h_o.clone()).unwrap();
    let tp = TransferredPolicy::new(
        agent,
        TransferMap::new(o).unwrap(),
        emu.alphabet.clone(),
        target.alphabet.clone(),
        true,
        NearestBackend::KdTree,
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    let mut mismatches = 0;
    let mut corrected = 0;
    let mut steps = 0;
    for x0 in compass_starts() {
        let (r, log) = transfer::transferred_rollout(&tp, &target, &x0, 200, &DropoutPolicy::None).unwrap();
        worst = worst.max(r.terminal_error());
        for s in &log {
            let (_, brute) = nearest_direction(&target.alphabet, &s.d_o_raw, true).unwrap();
            steps += 1;
            if brute != s.target_index {
                mismatches += 1;
            }
            if s.correction_norm > 0.0 {
                corrected += 1;
            }
        }
    }
    report(
        "non-invariant-transfer",
        !tp.is_invariant() && worst <= 0.25 && mismatches == 0,
        format!(
            "H_o = [[{:.2}, {:.2}], [{:.2}, {:.2}]]; worst terminal error {worst:.4} (<= 0.25); {corrected}/{steps} steps corrected, {mismatches} disagreements with brute force",
            h_o[(0, 0)], h_o[(0, 1)], h_o[(1, 0)], h_o[(1, 1)]
        ),
        start.elapsed(),
        Duration::from_secs(60),
    );
}

#[test]
fn warm_start() {
    let _g = serial();
    let base = good_agents()[0];
    let start = Instant::now();
    let emu = Emulation::two_state_example();
    let target = emu.with_reference(m2(-0.5, 0.0, -1.0, -2.5)).unwrap();
    let cfg = DqnConfig { episodes: 20, ..DqnConfig::default() };
    let rep = transfer::warm_start_train(base, &target, &cfg, &[0, 1, 2, 3, 4], &compass_starts(), 200).unwrap();
    let (warm, cold) = (rep.warm_mean(), rep.cold_mean());
    report(
        "warm-start",
        warm <= cold,
        format!("20 episodes x 5 paired seeds: warm mean terminal error {warm:.4} <= cold {cold:.4}"),
        start.elapsed(),
        Duration::from_secs(900),
    );
}

#[test]
fn kd_tree() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut disagreements = 0;
    let mut queries = 0;
    for _ in 0..1000 {
        let dim = rng.random_range(1..=4);
        let count = rng.random_range(1..=40);
        let mut points: Vec<(usize, Vec<f64>)> = (0..count)
            .map(|id| {
                // Coarse coordinates force plenty of ties and duplicate splits.
                (id, (0..dim).map(|_| rng.random_range(-4..=4) as f64 * 0.25).collect())
            })
            .collect();
        let mut tree = KdTree::build(points.clone()).unwrap();
        loop {
            for _ in 0..5 {
                let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.2..1.2)).collect();
                let brute = points
                    .iter()
                    .map(|(id, p)| (p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), *id))
                    .fold(None, |best: Option<(f64, usize)>, c| match best {
                        Some(b) if b.0 < c.0 || (b.0 == c.0 && b.1 < c.1) => Some(b),
                        _ => Some(c),
                    })
                    .unwrap();
                queries += 1;
                if tree.nearest(&q).unwrap() != brute {
                    disagreements += 1;
                }
            }
            if points.len() == 1 {
                break;
            }
            let victim = points.remove(rng.random_range(0..points.len())).0;
            tree.remove_in_place(victim).unwrap();
            if !tree.is_consistent() {
                disagreements += 1;
            }
        }
    }
    let _ = MaskedAlphabet::full;
    report(
        "kd-tree",
        disagreements == 0,
        format!("1000 build/query/remove sequences, {queries} queries, {disagreements} disagreements with a linear scan"),
        start.elapsed(),
        Duration::from_secs(10),
    );
}
