//! Score model answers: token recall for open questions, yes/no and
//! multiple-choice accuracy for closed ones, and a judge-based relative score.
//!
//!     cargo run --example evaluate_metrics

use narrmine::eval::{
    closed_accuracy, evaluate, extract_choice, open_recall, relative_score, stopwords, ClosedMode, Prediction,
};
use narrmine::llm::{CompletionParams, StubClient};
use narrmine::vqa::{Category, QType, VqaPair};

fn main() -> narrmine::Result<()> {
    let stop = stopwords();
    let r = open_recall("the cells are basaloid", "basaloid cells with palisading nuclei", &stop)?;
    println!("open recall: {r:.3}");

    let yes_no = closed_accuracy(&["Yes, clearly.", "no", "I think so"], &["yes", "no", "no"], ClosedMode::YesNo)?;
    println!("yes/no accuracy: {yes_no:.3}");
    println!("choice extracted from \"(B)\": {:?}", extract_choice("(B)"));
    let mc = closed_accuracy(&["(B)", "Answer: C", "a"], &["B", "D", "A"], ClosedMode::MultiChoice)?;
    println!("multiple-choice accuracy: {mc:.3}");
    println!("relative score of identical scores: {}", relative_score(&[7.0, 8.0], &[7.0, 8.0])?);

    let pair = |id: &str, question: &str, answer: &str, qtype| VqaPair {
        id: id.into(),
        chunk_id: "c".into(),
        image: "c.png".into(),
        question: question.into(),
        answer: answer.into(),
        category: Category::ImageDependent,
        qtype,
        verified: true,
    };
    let gold = vec![
        pair("q1", "What do you see at the periphery?", "Palisading basaloid nuclei.", QType::Open),
        pair("q2", "Is this malignant?", "yes", QType::Closed),
    ];
    let predictions = vec![
        Prediction {
            id: "q1".into(),
            response: "Peripheral palisading of nuclei.".into(),
        },
        Prediction {
            id: "q2".into(),
            response: "Yes.".into(),
        },
    ];
    let report = evaluate(&gold, &predictions, Some(&StubClient::new(0)), &CompletionParams::default())?;
    println!("\n{}", serde_json::to_string_pretty(&report)?);
    print!("{}", report.to_csv());
    Ok(())
}
