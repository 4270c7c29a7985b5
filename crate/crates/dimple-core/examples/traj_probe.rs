// Incremental per-epoch evaluation from a single training run per seed.
use std::collections::BTreeMap;
use dimple_core::data::{generate, split_base_novel, TaskSpec};
use dimple_core::harness::{eval_base_novel, eval_groups, TrainConfig};
use dimple_core::independence::KernelSpec;
use dimple_core::model::{DimpleModel, Objective};
use dimple_core::objectives::TermMask;
use dimple_core::rng::substream;
use dimple_core::tensor::Graph;
use rand::seq::SliceRandom;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let core: f64 = args.get(1).map_or(0.7, |s| s.parse().unwrap());
    let spur: f64 = args.get(2).map_or(2.5, |s| s.parse().unwrap());
    let noise: f64 = args.get(3).map_or(0.5, |s| s.parse().unwrap());
    let max_epochs: usize = args.get(4).map_or(12, |s| s.parse().unwrap());
    let seeds: u64 = args.get(5).map_or(3, |s| s.parse().unwrap());
    let alpha: f64 = args.get(6).map_or(1.0, |s| s.parse().unwrap());
    let beta: f64 = args.get(7).map_or(1.0, |s| s.parse().unwrap());
    let objectives: Vec<Objective> = std::env::var("OBJS")
        .unwrap_or_else(|_| "coop,dimple".into())
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();

    for objective in objectives {
        println!("== {objective} core {core} spur {spur} noise {noise} a {alpha} b {beta}");
        // per-epoch means over seeds: epoch -> (worst, avg, best, novel)
        let mut acc: BTreeMap<usize, [f64; 4]> = BTreeMap::new();
        for seed in 0..seeds {
            let mut cfg = TrainConfig::default();
            cfg.objective = objective;
            cfg.seed = seed;
            cfg.weights.alpha = alpha;
            cfg.weights.beta = beta;
            if let Ok(lr) = std::env::var("LR") {
                cfg.lr = lr.parse().unwrap();
            }
            if let Ok(bs) = std::env::var("BATCH") {
                cfg.batch_size = bs.parse().unwrap();
            }
            cfg.prompt_mode = if objective == Objective::DimpleEarly {
                dimple_core::encoder::PromptMode::Early
            } else {
                dimple_core::encoder::PromptMode::Coupled
            };
            cfg.task = TaskSpec { core_scale: core, spur_scale: spur, noise_std: noise, seed, ..Default::default() };
            if let Ok(n) = std::env::var("SAMPLES") {
                cfg.task.samples_per_class = n.parse().unwrap();
            }
            let data = generate(&cfg.task).unwrap();
            let (base_cls, novel_cls) = split_base_novel(&cfg.task).unwrap();
            let base_test = data.test_id.filter_classes(&base_cls, &cfg.task);
            let novel_test = data.test_id.filter_classes(&novel_cls, &cfg.task);

            let mut model = DimpleModel::new(cfg.encoder.clone(), cfg.prompt_mode, cfg.objective, &cfg.task, seed).unwrap();
            let kspec = KernelSpec::default();
            let mut velocity = BTreeMap::new();
            let n = data.train.len();
            for epoch in 0..max_epochs {
                let mut order: Vec<usize> = (0..n).collect();
                let mut rng = substream(cfg.seed, &format!("shuffle/epoch{epoch}"));
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let batch = data.train.select(chunk, &cfg.task);
                    let mut g = Graph::new();
                    let ctx = model.bind(&mut g).unwrap();
                    let report = match model.loss(&mut g, &ctx, &batch, &base_cls, &cfg.weights, &kspec, TermMask::ALL) {
                        Ok(r) => r,
                        Err(_) => continue,
                    };
                    g.backward(report.total_id).unwrap();
                    model.store.sgd_step(&g, &ctx.bound, cfg.lr, cfg.momentum, &mut velocity);
                }
                let g = eval_groups(&model, &base_test).unwrap();
                let (_, novel, _) = eval_base_novel(&model, &base_test, &novel_test).unwrap();
                let best = g.per_group.iter().map(|x| x.accuracy).fold(0.0, f64::max);
                let e = acc.entry(epoch + 1).or_insert([0.0; 4]);
                e[0] += g.worst / seeds as f64;
                e[1] += g.avg / seeds as f64;
                e[2] += best / seeds as f64;
                e[3] += novel / seeds as f64;
            }
        }
        for (ep, v) in acc {
            println!("  ep {ep:2}: worst {:6.2}  avg {:6.2}  best {:6.2}  novel {:6.2}", v[0], v[1], v[2], v[3]);
        }
    }
}
