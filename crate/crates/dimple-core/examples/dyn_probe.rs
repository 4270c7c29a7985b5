// Diagnostic: per-epoch worst-group / avg / novel trajectories per objective.
use dimple_core::data::{generate, split_base_novel, TaskSpec};
use dimple_core::harness::{eval_base_novel, eval_groups, train, TrainConfig};
use dimple_core::model::Objective;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let core: f64 = args.get(1).map_or(0.7, |s| s.parse().unwrap());
    let spur: f64 = args.get(2).map_or(2.5, |s| s.parse().unwrap());
    let noise: f64 = args.get(3).map_or(0.5, |s| s.parse().unwrap());
    let max_epochs: usize = args.get(4).map_or(6, |s| s.parse().unwrap());
    let seeds: u64 = args.get(5).map_or(3, |s| s.parse().unwrap());
    let alpha: f64 = args.get(6).map_or(1.0, |s| s.parse().unwrap());
    let beta: f64 = args.get(7).map_or(1.0, |s| s.parse().unwrap());

    let only = std::env::var("ONLY").ok();
    for objective in [Objective::Coop, Objective::CoopOod, Objective::Dimple] {
        if let Some(o) = &only {
            if o != objective.as_str() {
                continue;
            }
        }
        println!("== {objective} (core {core} spur {spur} noise {noise} a {alpha} b {beta})");
        let eps: Vec<usize> = std::env::var("EPS")
            .map(|v| v.split(',').map(|x| x.parse().unwrap()).collect())
            .unwrap_or_else(|_| (1..=max_epochs).collect());
        for epochs in eps {
            let mut worst_m = 0.0;
            let mut avg_m = 0.0;
            let mut best_m = 0.0;
            let mut novel_m = 0.0;
            for seed in 0..seeds {
                let mut cfg = TrainConfig::default();
                cfg.objective = objective;
                cfg.epochs = epochs;
                cfg.seed = seed;
                cfg.weights.alpha = alpha;
                cfg.weights.beta = beta;
                cfg.task = TaskSpec {
                    core_scale: core,
                    spur_scale: spur,
                    noise_std: noise,
                    seed,
                    ..Default::default()
                };
                if let Ok(n) = std::env::var("SAMPLES") {
                    cfg.task.samples_per_class = n.parse().unwrap();
                }
                let data = generate(&cfg.task).unwrap();
                let (model, _, _) = train(&cfg, &data).unwrap();
                let (base_cls, novel_cls) = split_base_novel(&cfg.task).unwrap();
                let base_test = data.test_id.filter_classes(&base_cls, &cfg.task);
                let novel_test = data.test_id.filter_classes(&novel_cls, &cfg.task);
                let g = eval_groups(&model, &base_test).unwrap();
                let (_, novel, _) = eval_base_novel(&model, &base_test, &novel_test).unwrap();
                worst_m += g.worst / seeds as f64;
                avg_m += g.avg / seeds as f64;
                best_m += g.per_group.iter().map(|x| x.accuracy).fold(0.0, f64::max) / seeds as f64;
                novel_m += novel / seeds as f64;
            }
            println!(
                "  ep {epochs}: worst {worst_m:6.2}  avg {avg_m:6.2}  best {best_m:6.2}  novel {novel_m:6.2}"
            );
        }
    }
}
