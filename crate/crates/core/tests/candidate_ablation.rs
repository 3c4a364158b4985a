//! Candidate-pool ablation on a constructed pool: the demonstration that
//! minimizes the conditional entropy sits at retrieval rank 25, so it can
//! only be chosen once K reaches 26.

use std::fmt::Write as _;
use std::fs;

use cone_core::corpus::write_json_lines;
use cone_core::harness::{Experiment, RunConfig};
use cone_core::{Example, Method};

#[test]
fn argmin_enters_at_k_26() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut pool = Vec::new();
    let mut vectors = String::new();
    for i in 0..30 {
        let id = format!("p{i:02}");
        // Rank i: angle grows with i, so cosine to the query falls.
        let angle = 0.05 * i as f64;
        let ex = if i == 25 {
            Example::new(&id).with_field("text", "alpha beta gamma").with_label("positive")
        } else {
            Example::new(&id)
                .with_field("text", format!("delta epsilon zeta{i}"))
                .with_label("negative")
        };
        pool.push(ex);
        writeln!(vectors, "{id} {} {}", angle.cos(), angle.sin()).unwrap();
    }
    writeln!(vectors, "q0 1 0").unwrap();
    let test = [Example::new("q0").with_field("text", "alpha beta gamma").with_label("positive")];
    fs::write(d.join("pool.jsonl"), write_json_lines(&pool)).unwrap();
    fs::write(d.join("test.jsonl"), write_json_lines(&test)).unwrap();
    fs::write(d.join("vectors.txt"), vectors).unwrap();
    fs::write(
        d.join("template.jsonl"),
        "{\"label\": \"negative\", \"pattern\": \"<X> negative\"}\n{\"label\": \"positive\", \"pattern\": \"<X> positive\"}\n",
    )
    .unwrap();
    let config = RunConfig::parse(
        "pool = pool.jsonl\ntest = test.jsonl\ntemplate = template.jsonl\nembeddings = vectors.txt\n\
         method = topk-cone\nshots = 1\nseeds = 0\nngram-cache-weight = 0.9\n",
    )
    .unwrap();
    let mut config = config;
    config.pool = d.join("pool.jsonl");
    config.test = d.join("test.jsonl");
    config.template = d.join("template.jsonl").display().to_string();
    config.embeddings = Some(d.join("vectors.txt"));
    let x = Experiment::prepare(config).unwrap();
    let ks = [1, 10, 25, 26, 30];
    let r = x.run_ablation_candidates(&ks).unwrap();
    let picked: Vec<&str> = r
        .entries
        .iter()
        .map(|e| e.runs[0].predictions[0].demonstrations[0].as_str())
        .collect();
    assert_eq!(picked, ["p00", "p00", "p00", "p25", "p25"]);
    let acc: Vec<f64> = r.entries.iter().map(|e| e.mean).collect();
    assert!(acc.windows(2).all(|w| w[0] <= w[1]), "{acc:?}");
    assert_eq!((acc[0], acc[4]), (0.0, 1.0));
    let plain = Experiment::prepare(RunConfig { method: Method::TopK, ..x.config().clone() })
        .unwrap()
        .run_eval()
        .unwrap();
    assert_eq!(plain.entries[0].runs[0].predictions[0].demonstrations, ["p00"]);
}
