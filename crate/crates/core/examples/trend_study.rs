//! Held-out hardest-tier rank-1 for the ablation variants and negative counts.
//!
//! Usage: trend_study [SEEDS] [SYNTH_PATCH_JSON] [TRAIN_PATCH_JSON]

use std::time::Instant;

use pacm::eval::{Embedded, HISTOGRAM_BINS};
use pacm::synth::{generate_dataset, SynthConfig};
use pacm::trainer::{TrainConfig, Trainer};

fn patch<T: serde::Serialize + serde::de::DeserializeOwned>(base: &T, patch: Option<&String>) -> T {
    let mut v = serde_json::to_value(base).unwrap();
    if let Some(p) = patch {
        let p: serde_json::Value = serde_json::from_str(p).expect("patch is JSON");
        for (k, x) in p.as_object().expect("patch is an object") {
            v[k] = x.clone();
        }
    }
    serde_json::from_value(v).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map_or(5, |s| s.parse().unwrap());
    let variants: [(&str, bool, bool, usize); 5] = [
        ("PAC", false, false, 200),
        ("PAC+PADA", false, true, 200),
        ("PACM+PADA K=32", true, true, 32),
        ("PACM+PADA K=100", true, true, 100),
        ("PACM+PADA K=200", true, true, 200),
    ];
    let mut table = vec![Vec::new(); variants.len()];
    let mut overlaps = Vec::new();
    let start = Instant::now();
    for seed in 0..seeds {
        let synth: SynthConfig = patch(&SynthConfig::reference(seed), args.get(2));
        let ds = generate_dataset(&synth).unwrap();
        let heldout = ds.heldout_part().unwrap();
        let hardest = synth.hardest_tier();
        for (v, &(name, mem, pada, k)) in variants.iter().enumerate() {
            let mut cfg: TrainConfig = patch(&TrainConfig::default(), args.get(3));
            cfg.seed = seed;
            cfg.use_memory = mem;
            cfg.use_pada = pada;
            cfg.num_negatives = k;
            let mut t = Trainer::new(cfg, &ds).unwrap();
            let before = Embedded::new(t.encoders(), &heldout).unwrap();
            t.run().unwrap();
            let after = Embedded::new(t.encoders(), &heldout).unwrap();
            let r = after.rank1().unwrap()[&hardest];
            let ov = |e: &Embedded| {
                pacm::eval::histogram(&e.tier_scores(hardest).unwrap(), HISTOGRAM_BINS)
                    .unwrap()
                    .overlap_coefficient()
            };
            if v == variants.len() - 1 {
                overlaps.push((ov(&before), ov(&after)));
            }
            println!(
                "seed {seed} {name:<16} rank1 {r:.4}  overlap {:.4}  all tiers {:?}",
                ov(&after),
                after
                    .rank1()
                    .unwrap()
                    .values()
                    .map(|x| format!("{x:.2}"))
                    .collect::<Vec<_>>()
            );
            table[v].push(r);
        }
    }
    for (v, (name, ..)) in variants.iter().enumerate() {
        let m = table[v].iter().sum::<f64>() / table[v].len() as f64;
        println!("{name:<16} mean {m:.4}  {:?}", table[v]);
    }
    println!("overlap before/after {overlaps:?}");
    println!("{:.1}s", start.elapsed().as_secs_f64());
}
