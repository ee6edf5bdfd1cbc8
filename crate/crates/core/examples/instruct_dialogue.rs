//! Generate instruction-tuning records with the offline stub client,
//! including one iterative abductive dialogue between a student and an
//! assistant agent.
//!
//!     cargo run --example instruct_dialogue [seed]

use std::collections::HashMap;

use narrmine::instruct::{
    extract_case_context, generate_records, run_abductive_dialogue, InstructSource, Quotas,
};
use narrmine::llm::{CompletionParams, StubClient};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> narrmine::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let client = StubClient::new(seed);
    let params = CompletionParams::default();

    let transcript = "Here we see skin with nests of basaloid cells. The periphery shows palisading \
                      and there is retraction artifact. Overall this is a nodular basal cell carcinoma.";
    let context = extract_case_context("case1", transcript, true, &client, &params)?;
    println!("case context: {context:?}\n");

    let source = InstructSource {
        id: "case1_40000".into(),
        video_id: "case1".into(),
        image: "medians/case1_40000.png".into(),
        caption: "In the middle large tumor islands push into the dermis with clear peripheral \
                  nuclear palisading [0.41, 0.39, 0.59, 0.72]"
            .into(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dialogue = run_abductive_dialogue(&source, &context, &client, &params, &mut rng)?;
    println!(
        "abductive dialogue: cap {} exchanges, ran {}, stopped by {:?}",
        dialogue.cap, dialogue.exchanges, dialogue.stop
    );
    for turn in &dialogue.record.conversations {
        println!("  {:?}: {}", turn.speaker, turn.text);
    }

    let contexts = HashMap::from([(context.video_id.clone(), context)]);
    let report = generate_records(&[source], &contexts, &client, &params, &Quotas::default(), seed, 2)?;
    println!("\n{} records:", report.records.len());
    for r in &report.records {
        println!("{}", serde_json::to_string(r)?);
    }
    Ok(())
}
