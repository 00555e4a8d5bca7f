use std::time::Instant;

use selfcorrect::data::{build_offline_dataset, build_online_dataset, build_sft_dataset, PairSampling};
use selfcorrect::eval::evaluate;
use selfcorrect::policy::PolicyParameters;
use selfcorrect::rng::{derive_seed, stream};
use selfcorrect::trainer::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mut config = TrainerConfig::default();
    if let Some(path) = args.get(1) {
        config = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    }
    let t0 = Instant::now();
    let splits = make_splits(&config);
    let base = PolicyParameters::init(config.policy.clone(), &mut stream(derive_seed(config.seed, "init", 0))).unwrap();
    let modes = eval_modes(&config);
    let settings = config.eval_settings();
    let show = |name: &str, p: &PolicyParameters, t: &Instant| {
        let r = evaluate(p, &splits.eval, &modes, &settings).unwrap();
        println!("{name:>14} turns {:?}  [{:.1}s]", r.turns.iter().map(|a| (a * 1000.0).round() / 10.0).collect::<Vec<_>>(), t.elapsed().as_secs_f64());
    };
    let r0 = train_r0(&base, &splits.warmup, &config).unwrap();
    let last = r0.diagnostics.last().unwrap().loss;
    println!("r0 final loss {last:.3}");
    show("r0", &r0.checkpoint.params, &t0);
    let sampling = PairSampling { temperature: config.sft_sample_temperature, ..config.sampling.clone() };
    let pairs = build_sft_dataset(&splits.sft, &r0.checkpoint.params, &sampling, config.sft_samples_per_example, derive_seed(config.seed, "sft-pairs", 0)).unwrap();
    let sft = train_pair_sft(&base, &pairs, &config).unwrap();
    println!("sft final loss {:.3}", sft.diagnostics.last().unwrap().loss);
    show("pair-sft", &sft.checkpoint.params, &t0);
    let mut cur = sft.checkpoint.params;
    let off = build_offline_dataset(&splits.warmup, &cur, &config.sampling, derive_seed(config.seed, "offline-pairs", 0)).unwrap();
    let res = train_preference(&cur, &off, StageLabel::Offline, &config.offline, &config).unwrap();
    let d = res.diagnostics.last().unwrap();
    println!("offline last {:?}", d);
    cur = res.checkpoint.params;
    show("offline", &cur, &t0);
    for t in 1..=config.iterations as u32 {
        let q = online_questions(&config, t);
        let (pairs, stats) = build_online_dataset(&q, &cur, &config.sampling, config.online_budget, t, derive_seed(config.seed, "online-pairs", u64::from(t))).unwrap();
        println!("online {t}: {:?} rate {:.2}", stats, stats.acceptance_rate());
        if pairs.is_empty() { continue; }
        let res = train_preference(&cur, &pairs, StageLabel::Iter(t), &config.online, &config).unwrap();
        cur = res.checkpoint.params;
        show(&format!("iter-{t}"), &cur, &t0);
    }
}
