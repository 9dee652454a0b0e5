//! Reference implementation of the external-model subprocess protocol.
//!
//! Trains by computing the mean of the training observations and predicts
//! `Normal(mean, 1)` for every record. Exercises the full wire protocol:
//!
//! ```text
//! model-stub [flags] train   --data <train.jsonl> --out <model-dir>
//! model-stub [flags] predict --model <model-dir> --data <eval.jsonl> --out <preds.jsonl>
//! ```
//!
//! Flags ahead of the subcommand make failure modes reproducible in tests:
//! `--sleep-secs <n>` stalls before answering, `--omit-first-id` drops one
//! prediction, `--fail` exits non-zero with a message on stderr.

use std::io::Write;
use std::path::PathBuf;

use certkit::data::model::PredictionRow;
use certkit::data::{load_dataset, CertDataset};
use certkit::dist::PredictiveDistribution;

struct Options {
    sleep_secs: u64,
    omit_first_id: bool,
    fail: bool,
    command: String,
    data: PathBuf,
    model: PathBuf,
    out: PathBuf,
}

fn parse_args() -> Result<Options, String> {
    let mut opts = Options {
        sleep_secs: 0,
        omit_first_id: false,
        fail: false,
        command: String::new(),
        data: PathBuf::new(),
        model: PathBuf::new(),
        out: PathBuf::new(),
    };
    let mut args = std::env::args().skip(1).peekable();
    while let Some(arg) = args.next() {
        match arg.as_str() {
            "--sleep-secs" => {
                let v = args.next().ok_or("--sleep-secs needs a value")?;
                opts.sleep_secs = v.parse().map_err(|e| format!("bad --sleep-secs: {e}"))?;
            }
            "--omit-first-id" => opts.omit_first_id = true,
            "--fail" => opts.fail = true,
            "train" | "predict" => opts.command = arg,
            "--data" => opts.data = args.next().ok_or("--data needs a value")?.into(),
            "--model" => opts.model = args.next().ok_or("--model needs a value")?.into(),
            "--out" => opts.out = args.next().ok_or("--out needs a value")?.into(),
            other => return Err(format!("unknown argument: {other}")),
        }
    }
    if opts.command.is_empty() {
        return Err("expected a train or predict subcommand".into());
    }
    Ok(opts)
}

fn mean_per_output(data: &CertDataset) -> Vec<f64> {
    let m = data.schema.output_dims;
    let mut means = vec![0.0; m];
    for r in &data.records {
        for (j, y) in r.y_obs.iter().enumerate() {
            means[j] += y;
        }
    }
    for v in &mut means {
        *v /= data.len() as f64;
    }
    means
}

fn run(opts: Options) -> Result<(), String> {
    if opts.sleep_secs > 0 {
        std::thread::sleep(std::time::Duration::from_secs(opts.sleep_secs));
    }
    if opts.fail {
        return Err("stub configured to fail".into());
    }
    match opts.command.as_str() {
        "train" => {
            let data = load_dataset(&opts.data, None).map_err(|e| e.to_string())?;
            let means = mean_per_output(&data);
            std::fs::create_dir_all(&opts.out).map_err(|e| e.to_string())?;
            let payload = serde_json::to_string(&means).map_err(|e| e.to_string())?;
            std::fs::write(opts.out.join("model.json"), payload).map_err(|e| e.to_string())?;
        }
        "predict" => {
            let payload = std::fs::read_to_string(opts.model.join("model.json"))
                .map_err(|e| format!("cannot read model: {e}"))?;
            let means: Vec<f64> = serde_json::from_str(&payload).map_err(|e| e.to_string())?;
            let data = load_dataset(&opts.data, None).map_err(|e| e.to_string())?;
            let mut out = std::fs::File::create(&opts.out).map_err(|e| e.to_string())?;
            for (i, r) in data.records.iter().enumerate() {
                if opts.omit_first_id && i == 0 {
                    continue;
                }
                let row = PredictionRow {
                    id: r.id.clone(),
                    y_pred: means
                        .iter()
                        .map(|&m| PredictiveDistribution::normal(m, 1.0).expect("valid sigma"))
                        .collect(),
                };
                let line = serde_json::to_string(&row).map_err(|e| e.to_string())?;
                writeln!(out, "{line}").map_err(|e| e.to_string())?;
            }
        }
        other => return Err(format!("unknown subcommand {other}")),
    }
    Ok(())
}

fn main() {
    match parse_args().and_then(run) {
        Ok(()) => {}
        Err(msg) => {
            eprintln!("model-stub: {msg}");
            std::process::exit(1);
        }
    }
}
