//! Scripted backends and the on-disk response cache.
//!
//! The mock backend answers by ordered substring rules, which is what makes
//! fully offline, deterministic benchmark runs possible. Wrapping any
//! backend in the disk cache makes identical requests free — across process
//! restarts too.
//!
//! Run with: `cargo run --example scripted_backend`

use std::sync::Arc;

use injectbench::{
    CachedBackend, ChatRequest, DiskCache, MockBackend, ModelBackend, ScriptedBehavior,
};

fn main() {
    let behavior = ScriptedBehavior::new("I am not sure.")
        .rule("cash prize", "spam")
        .rule_with("quarterly", &["budget"], "not spam")
        .rule("echo:", "you said: {user}");

    let mock = Arc::new(MockBackend::new("scripted", behavior));
    for user in [
        "Win a cash prize!",
        "quarterly budget attached",
        "echo: hi",
        "???",
    ] {
        let reply = mock
            .complete(&ChatRequest::user_only("scripted", user))
            .unwrap();
        println!("{user:?} -> {:?}", reply.text);
    }
    println!("backend calls so far: {}\n", mock.calls());

    let dir = std::env::temp_dir().join("injectbench-example-cache");
    let cached = CachedBackend::new(mock.clone(), DiskCache::open(&dir).unwrap());
    let request = ChatRequest::user_only("scripted", "Win a cash prize!");

    let first = cached.complete(&request).unwrap();
    let second = cached.complete(&request).unwrap();
    println!("first call:  cached = {}", first.cached);
    println!(
        "second call: cached = {} (same text: {})",
        second.cached,
        first.text == second.text
    );
    println!(
        "cache dir {} now holds {} entries; hits = {}, misses = {}",
        dir.display(),
        DiskCache::open(&dir).unwrap().len(),
        cached.hits(),
        cached.misses()
    );
    println!(
        "total backend calls: {} (second call never reached it)",
        mock.calls()
    );

    std::fs::remove_dir_all(&dir).ok();
}
