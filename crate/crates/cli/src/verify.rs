use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use ipr_core::engine::{hash64, run_trajectory, Backends};
use ipr_core::reward::{telescoping_check, RewardConfig};
use ipr_core::synthworld::{PolicyRefiner, SyntheticGenerator, SyntheticScorer, SyntheticWorld};
use ipr_core::train::{gradient_check, objective_coincidence_test, ToyPolicy, TrainCorpus};
use ipr_core::Termination;

pub const TELESCOPING_TRAJECTORIES: usize = 1000;
pub const TELESCOPING_TOL: f64 = 1e-12;
pub const GRADIENT_WORLDS: usize = 10;
pub const GRADIENT_TOL: f64 = 1e-5;
pub const COINCIDENCE_WORLDS: usize = 20;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Largest observed deviation, where the check has one.
    pub worst: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
    #[serde(skip)]
    pub lines: Vec<String>,
}

pub fn run_verify(seed: u64, rcfg: &RewardConfig) -> VerifyReport {
    let checks = vec![
        check_telescoping(seed, rcfg),
        check_gradient(seed, rcfg),
        check_coincidence(seed),
    ];
    let lines = checks
        .iter()
        .map(|c| {
            format!(
                "{} {}: {} cases{}; {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.cases,
                c.worst.map(|w| format!(", worst {w:.3e}")).unwrap_or_default(),
                c.detail
            )
        })
        .collect();
    VerifyReport { seed, passed: checks.iter().all(|c| c.passed), checks, lines }
}

fn random_policy(world: &SyntheticWorld, rng: &mut ChaCha8Rng) -> ToyPolicy {
    let mut p = ToyPolicy::uniform(world, 1.0).expect("unit temperature is valid");
    for row in &mut p.logits {
        for x in row {
            *x = rng.random_range(-2.0..2.0);
        }
    }
    p
}

fn random_world(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> SyntheticWorld {
    let p = rng.random_range(lo..=hi);
    let m = rng.random_range(lo..=hi);
    SyntheticWorld::random(rng, p, m, 2).expect("random worlds are valid")
}

/// A world with 2 to 4 image outcomes, small enough that every deterministic
/// policy over its decision states can be enumerated.
pub fn coincidence_world(rng: &mut ChaCha8Rng) -> SyntheticWorld {
    let m = rng.random_range(2..=4);
    let p = if m == 4 { 2 } else { rng.random_range(2..=3) };
    SyntheticWorld::random(rng, p, m, 2).expect("random worlds are valid")
}

/// Shaped rewards telescope to `R(final) - R(initial)` and keep earns exactly
/// the configured bonus.
pub fn check_telescoping(seed: u64, rcfg: &RewardConfig) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(hash64(&[seed, 1]));
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut done = 0;
    while done < TELESCOPING_TRAJECTORIES {
        let world = random_world(&mut rng, 2, 6);
        let policy = random_policy(&world, &mut rng);
        let gen = SyntheticGenerator { world: &world };
        let scorer = SyntheticScorer { world: &world };
        let refiner = PolicyRefiner { world: &world, policy };
        let b = Backends { generator: &gen, refiner: &refiner, scorer: &scorer };
        for _ in 0..50 {
            let p = rng.random_range(0..world.n_prompts());
            let t_max = rng.random_range(1..=5);
            let tseed: u64 = rng.random();
            let traj = match run_trajectory(&world.prompts()[p], b, tseed, t_max, rcfg) {
                Ok(t) => t,
                Err(e) => {
                    failures.push(format!("trajectory {done}: {e}"));
                    done += 1;
                    continue;
                }
            };
            let (sum, delta) = telescoping_check(&traj).expect("non-empty trajectory");
            let gap = (sum - delta).abs();
            worst = worst.max(gap);
            if gap > TELESCOPING_TOL {
                failures.push(format!("trajectory {done}: gap {gap:e}"));
            }
            if let Termination::KeepAction { shaped_reward, .. } = traj.termination {
                if shaped_reward != rcfg.alpha {
                    failures.push(format!("trajectory {done}: keep reward {shaped_reward}"));
                }
            }
            done += 1;
        }
    }
    finish("telescoping", done, Some(worst), failures, format!("tolerance {TELESCOPING_TOL:e}"))
}

/// Analytic surrogate gradient against central differences.
pub fn check_gradient(seed: u64, rcfg: &RewardConfig) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(hash64(&[seed, 2]));
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for i in 0..GRADIENT_WORLDS {
        let world = random_world(&mut rng, 2, 5);
        let policy = random_policy(&world, &mut rng);
        let all: Vec<usize> = (0..world.n_prompts()).collect();
        let pool = TrainCorpus::full_support(&world, &all)
            .pool_states(&world)
            .expect("full support pool");
        match gradient_check(&policy, &pool, &world, rcfg) {
            Ok(gap) => {
                worst = worst.max(gap);
                if gap > GRADIENT_TOL {
                    failures.push(format!("world {i}: gap {gap:e}"));
                }
            }
            Err(e) => failures.push(format!("world {i}: {e}")),
        }
    }
    finish("gradient", GRADIENT_WORLDS, Some(worst), failures, format!("tolerance {GRADIENT_TOL:e}"))
}

/// Single-step worlds with full support and no keep bonus: the per-state
/// surrogate optimum attains the exact optimum.
pub fn check_coincidence(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(hash64(&[seed, 3]));
    let rcfg = RewardConfig { alpha: 0.0, ..RewardConfig::default() };
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for i in 0..COINCIDENCE_WORLDS {
        let world = coincidence_world(&mut rng);
        let all: Vec<usize> = (0..world.n_prompts()).collect();
        let corpus = TrainCorpus::full_support(&world, &all);
        match objective_coincidence_test(&world, &corpus, &rcfg, 1) {
            Ok(r) => {
                worst = worst.max(r.best_eta - r.surrogate_eta);
                if r.coincides != Some(true) {
                    failures.push(format!(
                        "world {i}: surrogate {} vs best {} ({:?})",
                        r.surrogate_eta, r.best_eta, r.coincides
                    ));
                }
            }
            Err(e) => failures.push(format!("world {i}: {e}")),
        }
    }
    finish("coincidence", COINCIDENCE_WORLDS, Some(worst), failures, "t_max 1, alpha 0".into())
}

fn finish(
    name: &'static str,
    cases: usize,
    worst: Option<f64>,
    failures: Vec<String>,
    note: String,
) -> CheckResult {
    let passed = failures.is_empty();
    let detail = if passed {
        note
    } else {
        format!("{note}; {} failing: {}", failures.len(), failures.join("; "))
    };
    CheckResult { name, passed, cases, worst, detail }
}
