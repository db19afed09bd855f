//! Ranking attacks by how well they beat both defense families.
//!
//! Each attack carries a prevention score (APS, how thoroughly it bypasses
//! prevention defenses) and a detection score (ADS, how reliably it evades
//! detectors). Their sum orders the attacks, best first; ties break on id so
//! the ranking is reproducible.
//!
//! Run with: `cargo run --example rank_attack_scores`

use std::collections::BTreeMap;

use injectbench::{rank_attacks, select_top_attacks, AttackScores};

fn main() {
    let scores: BTreeMap<String, AttackScores> = [
        (
            "naive",
            AttackScores {
                aps: 0.41,
                ads: 0.22,
            },
        ),
        (
            "escape-characters",
            AttackScores {
                aps: 0.38,
                ads: 0.25,
            },
        ),
        (
            "context-ignoring",
            AttackScores {
                aps: 0.52,
                ads: 0.31,
            },
        ),
        (
            "fake-completion",
            AttackScores {
                aps: 0.49,
                ads: 0.34,
            },
        ),
        (
            "combined",
            AttackScores {
                aps: 0.61,
                ads: 0.38,
            },
        ),
        (
            "goal-hijack",
            AttackScores {
                aps: 0.66,
                ads: 0.29,
            },
        ),
        (
            "distractor",
            AttackScores {
                aps: 0.33,
                ads: 0.30,
            },
        ),
    ]
    .into_iter()
    .map(|(id, s)| (id.to_string(), s))
    .collect();

    let ranked = rank_attacks(&scores).unwrap();
    println!("| Rank | Attack | APS | ADS | Overall |");
    println!("| --- | --- | --- | --- | --- |");
    for r in &ranked {
        println!(
            "| {} | {} | {:.2} | {:.2} | {:.2} |",
            r.rank, r.attack_id, r.aps, r.ads, r.overall
        );
    }

    let top = select_top_attacks(&ranked, 5);
    println!(
        "\ntop {} for the next experiment: {}",
        top.len(),
        top.iter()
            .map(|r| r.attack_id.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    );
}
