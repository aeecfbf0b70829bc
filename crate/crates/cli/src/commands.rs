//! One function per subcommand.

use std::path::Path;

use serde::Serialize;
use veil::checkpoint::Checkpoint;
use veil::data::corpus::{write_review_corpus, write_tagging_corpus};
use veil::data::synth::{generate_synthetic, to_review_corpus, to_tagged_corpus};
use veil::eval::{GroupReport, LeakageReport};
use veil::models::TaskKind;
use veil::pipeline::{self, Corpus};
use veil::training::TrainHistory;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::table::{opt_pct, pct, Table};

/// Writes to stdout; a closed pipe (e.g. `| head`) silently drops output.
fn emit(text: &str) -> Result<(), CliError> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(CliError::io(Path::new("<stdout>"), e))
        }
        _ => Ok(()),
    }
}

macro_rules! say {
    ($($arg:tt)*) => { emit(&format!($($arg)*))? };
}

macro_rules! sayln {
    ($($arg:tt)*) => { emit(&(format!($($arg)*) + "\n"))? };
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<(), CliError> {
    if let Some(p) = path {
        let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
        text.push('\n');
        write(p, text)?;
    }
    Ok(())
}

fn load(config: &RunConfig, key: &str, task: TaskKind) -> Result<Corpus, CliError> {
    let path = config.path(key)?;
    let (corpus, summary) = Corpus::load(task, &path)?;
    if let Some(s) = summary {
        for (line, reason) in &s.rejections {
            eprintln!("warning: {}:{line}: skipped: {reason}", path.display());
        }
    }
    if corpus.is_empty() {
        return Err(CliError {
            class: "data",
            message: format!("{}: no usable records", path.display()),
        });
    }
    Ok(corpus)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn history_table(history: &TrainHistory) -> String {
    let attrs: Vec<String> = history
        .epochs
        .first()
        .map(|e| e.adversarial_loss.keys().cloned().collect())
        .unwrap_or_default();
    let mut header = vec!["epoch".to_string(), "task_loss".to_string()];
    header.extend(attrs.iter().map(|a| format!("adv_loss.{a}")));
    header.push("dev_metric".to_string());
    header.extend(attrs.iter().map(|a| format!("dev_disc.{a}")));
    let mut t = Table::new(header);
    for e in &history.epochs {
        let mut row = vec![e.epoch.to_string(), format!("{:.4}", e.task_loss)];
        row.extend(
            attrs
                .iter()
                .map(|a| format!("{:.4}", e.adversarial_loss[a])),
        );
        let mark = if e.epoch == history.best_epoch {
            " *"
        } else {
            ""
        };
        row.push(format!("{}{mark}", pct(e.dev_metric)));
        row.extend(attrs.iter().map(|a| pct(e.dev_discriminator_accuracy[a])));
        t.row(row);
    }
    t.render()
}

fn group_table(groups: &[GroupReport]) -> String {
    let mut t = Table::new([
        "attribute",
        "group",
        "instances",
        "units",
        "accuracy",
        "delta",
    ]);
    for g in groups {
        for (i, s) in g.groups.iter().enumerate() {
            let delta = if i == 0 { pct(g.delta) } else { String::new() };
            t.row([
                g.attribute.clone(),
                s.group.clone(),
                s.instances.to_string(),
                s.units.to_string(),
                opt_pct(s.accuracy),
                delta,
            ]);
        }
    }
    t.render()
}

fn leakage_table(report: &LeakageReport) -> String {
    let mut t = Table::new(["attribute", "attacker", "discriminator", "majority"]);
    for a in &report.attributes {
        t.row([
            a.attribute.clone(),
            pct(a.attacker_accuracy),
            opt_pct(a.discriminator_accuracy),
            pct(a.majority_baseline),
        ]);
    }
    t.render()
}

fn metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Tagger => "token accuracy",
        TaskKind::Sentiment => "macro-F1",
    }
}

pub fn train(config: &RunConfig, json: Option<&Path>) -> Result<(), CliError> {
    let task = config.task()?;
    let cfg = config.train_config()?;
    let dims = config.dims()?;
    let train_set = load(config, "train", task)?;
    let dev_set = load(config, "dev", task)?;
    let (checkpoint, history) =
        pipeline::fit(&train_set, &dev_set, &dims, &cfg, config.min_count()?)?;
    let out = config.out();
    create_dir(&out)?;
    checkpoint.save(&out.join("model.veil"))?;
    write(&out.join("history.jsonl"), history.to_jsonl())?;
    write(&out.join("config.txt"), config.echo())?;
    say!("{}", history_table(&history));
    let adv: Vec<String> = cfg
        .lambdas
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    sayln!(
        "best epoch {} of {}: dev {} {}; adversaries: {}",
        history.best_epoch,
        history.epochs.len(),
        metric_name(task),
        pct(history.best_dev_metric),
        if adv.is_empty() {
            "none".to_string()
        } else {
            adv.join(",")
        }
    );
    sayln!("wrote {}", out.join("model.veil").display());
    write_json(json, &history)
}

fn checkpoint(config: &RunConfig) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::load(&config.path("checkpoint")?)?)
}

pub fn eval(config: &RunConfig, json: Option<&Path>) -> Result<(), CliError> {
    let ckpt = checkpoint(config)?;
    let test = load(config, "test", ckpt.model.task())?;
    let report = pipeline::evaluate(&ckpt, &test)?;
    sayln!(
        "{} instances; {} {}; accuracy {}",
        report.instances,
        metric_name(report.task),
        pct(report.task_metric),
        pct(report.accuracy)
    );
    if let Some(s) = report.sentence_accuracy {
        sayln!("sentence accuracy {}", pct(s));
    }
    say!("{}", group_table(&report.groups));
    write_json(json, &report)
}

pub fn attack(config: &RunConfig, json: Option<&Path>) -> Result<(), CliError> {
    let ckpt = checkpoint(config)?;
    let task = ckpt.model.task();
    let train_set = load(config, "train", task)?;
    let test = load(config, "test", task)?;
    let attributes = config.attack_attributes(&ckpt.schema)?;
    if attributes.is_empty() {
        return Err(CliError::config("attack: no attributes selected"));
    }
    let report = pipeline::leakage(&ckpt, &train_set, &test, &attributes, &config.attacker()?)?;
    sayln!("test {} {}", metric_name(task), pct(report.task_metric));
    say!("{}", leakage_table(&report));
    write_json(json, &report)
}

pub fn crossval(config: &RunConfig, json: Option<&Path>) -> Result<(), CliError> {
    let task = config.task()?;
    let cfg = config.train_config()?;
    let corpus = load(config, "train", task)?;
    let attributes = config.attack_attributes(&corpus.schema())?;
    let report = pipeline::crossval(
        &corpus,
        config.k()?,
        &config.dims()?,
        &cfg,
        config.min_count()?,
        &attributes,
        &config.attacker()?,
    )?;
    let mut header = vec![
        "fold".to_string(),
        "train".into(),
        "dev".into(),
        "test".into(),
        "best_epoch".into(),
        "metric".into(),
    ];
    header.extend(attributes.iter().map(|a| format!("attack.{a}")));
    let mut t = Table::new(header);
    for f in &report.folds {
        let mut row = vec![
            f.fold.to_string(),
            f.train.to_string(),
            f.dev.to_string(),
            f.test.to_string(),
            f.best_epoch.to_string(),
            pct(f.eval.task_metric),
        ];
        if let Some(l) = &f.leakage {
            row.extend(l.attributes.iter().map(|a| pct(a.attacker_accuracy)));
        }
        t.row(row);
    }
    say!("{}", t.render());
    sayln!(
        "mean {} {} over {} folds",
        metric_name(task),
        pct(report.mean_task_metric),
        report.k
    );
    for (a, acc) in &report.mean_attacker_accuracy {
        sayln!("mean attacker accuracy {a} {}", pct(*acc));
    }
    say!("{}", group_table(&report.pooled_groups));
    write_json(json, &report)
}

pub fn synth(config: &RunConfig, json: Option<&Path>) -> Result<(), CliError> {
    let spec = config.synth()?;
    let format = config.synth_format()?;
    let corpus = generate_synthetic(&spec)?;
    let out = config.out();
    create_dir(&out)?;
    let names = match format {
        TaskKind::Sentiment => {
            let (tr, te) = (out.join("train.jsonl"), out.join("test.jsonl"));
            write_review_corpus(&tr, &to_review_corpus(&corpus.train, &spec, 0)?)?;
            write_review_corpus(&te, &to_review_corpus(&corpus.test, &spec, 1)?)?;
            [tr, te]
        }
        TaskKind::Tagger => {
            let (tr, te) = (out.join("train.conll"), out.join("test.conll"));
            write_tagging_corpus(&tr, &to_tagged_corpus(&corpus.train, &spec, 0)?)?;
            write_tagging_corpus(&te, &to_tagged_corpus(&corpus.test, &spec, 1)?)?;
            [tr, te]
        }
    };
    let mut manifest = serde_json::to_string_pretty(&corpus.manifest).expect("manifest serializes");
    manifest.push('\n');
    write(&out.join("manifest.json"), manifest)?;
    sayln!(
        "seed {} rho {}: train association {:.3}, test association {:.3}",
        spec.seed,
        spec.confound_strength,
        corpus.manifest.train_association,
        corpus.manifest.test_association
    );
    for n in &names {
        sayln!("wrote {}", n.display());
    }
    write_json(json, &corpus.manifest)
}
