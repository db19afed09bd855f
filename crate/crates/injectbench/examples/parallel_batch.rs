//! Bounded-parallel request execution with order-stable results.
//!
//! `run_batch` fans requests out over a fixed number of worker threads and
//! returns responses aligned with the input order, which is what the trial
//! executor builds on.
//!
//! Run with: `cargo run --example parallel_batch`

use injectbench::{run_batch, ChatRequest, MockBackend, ScriptedBehavior};

fn main() {
    let backend = MockBackend::new("scripted", ScriptedBehavior::new("reply to: {user}"));

    let requests: Vec<ChatRequest> = (0..8)
        .map(|i| ChatRequest::user_only("scripted", format!("question {i}")))
        .collect();

    let results = run_batch(&backend, &requests, 4);

    for (request, result) in requests.iter().zip(&results) {
        println!("{:>10} -> {}", request.user, result.as_ref().unwrap().text);
    }
    println!(
        "\n{} responses, {} backend calls, order preserved: {}",
        results.len(),
        backend.calls(),
        results.iter().enumerate().all(|(i, r)| r
            .as_ref()
            .unwrap()
            .text
            .ends_with(&format!("question {i}")))
    );
}
