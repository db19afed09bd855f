//! Tasks, prompt assembly and answer judging.
//!
//! Shows how a benchmark task turns a dataset item into a victim prompt and
//! how its judge scores candidate outputs — including the normalization that
//! makes judging robust to case, whitespace and trailing punctuation.
//!
//! Run with: `cargo run --example assemble_and_judge`

use injectbench::{assemble_prompt, builtin, normalize};

fn main() {
    let task = builtin::task("spam-detection").expect("built-in task");
    let item = &builtin::dataset("spam-detection").expect("built-in dataset")[0];

    println!("task: {}", task.id);
    println!("item: {} (expected '{}')", item.item_id, item.expected);
    println!("\n--- assembled victim prompt ---");
    println!("{}", assemble_prompt(&task, &item.data).unwrap());
    println!("--- end prompt ---\n");

    // The label judge accepts exactly one label, after normalization.
    for output in [
        "spam",
        "  Spam!  ",
        "not spam",
        "spam or not spam",
        "no idea",
    ] {
        println!(
            "judge({output:?}) -> {} (normalized: {:?})",
            task.judge_output(output, &item.expected),
            normalize(output),
        );
    }

    // Generation tasks use containment instead: the expected phrase must
    // appear in the normalized output.
    let summarize = builtin::task("summarization").expect("built-in task");
    let passage = &builtin::dataset("summarization").expect("built-in dataset")[0];
    println!(
        "\ntask: {} (expected phrase '{}')",
        summarize.id, passage.expected
    );
    for output in [
        "The council will turn the rail line into a public park.",
        "Construction starts in spring.",
    ] {
        println!(
            "judge({output:?}) -> {}",
            summarize.judge_output(output, &passage.expected)
        );
    }
}
