//! Flat `key=value` run configuration: defaults, then a config file, then
//! command-line flags. Every flag is one key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use veil::data::corpus::AttributeSchema;
use veil::data::synth::SynthSpec;
use veil::eval::AttackerConfig;
use veil::models::TaskKind;
use veil::pipeline::{ModelDims, DEFAULT_MIN_COUNT};
use veil::training::{OptimizerKind, TrainConfig, DEFAULT_LAMBDA};

use crate::error::CliError;

/// `(key, help)` for every configuration key, in `--help` order.
pub const KEYS: &[(&str, &str)] = &[
    ("task", "tagger | sentiment"),
    ("train", "training corpus (crossval: the whole corpus)"),
    ("dev", "development corpus for model selection"),
    ("test", "evaluation corpus"),
    ("checkpoint", "model file read by eval and attack"),
    ("out", "output directory"),
    (
        "adv",
        "protected attributes with a discriminator: comma list or none",
    ),
    ("lambda", "λ for every adversary, or name=value pairs"),
    ("seed", "seed for every random stream"),
    ("k", "cross-validation folds"),
    ("min_count", "vocabulary frequency threshold"),
    ("optimizer", "adam | sgd"),
    ("learning_rate", "step size"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("epsilon", "Adam denominator floor"),
    ("batch_size", "instances per update"),
    ("max_epochs", "epoch budget"),
    ("patience", "epochs without dev improvement before stopping"),
    ("dropout", "dropout rate on the task path"),
    ("embed_dim", "embedding width"),
    (
        "hidden_total",
        "tagger BiLSTM output width (both directions)",
    ),
    ("conv_widths", "classifier filter widths, comma list"),
    ("conv_maps", "feature maps per filter width"),
    ("disc_hidden", "discriminator hidden width"),
    ("attack", "attributes to attack: comma list, all or none"),
    (
        "attack_hidden",
        "attacker hidden width, 0 for the discriminator width",
    ),
    ("attack_learning_rate", "attacker step size"),
    ("attack_batch_size", "attacker batch size"),
    ("attack_max_epochs", "attacker epoch budget"),
    ("attack_patience", "attacker early-stopping patience"),
    ("attack_held_in", "share of attacker training data held in"),
    ("synth_format", "review | tagging"),
    ("n_train", "synthetic training records"),
    ("n_test", "synthetic test records"),
    ("vocab_size", "synthetic vocabulary size"),
    ("rho", "synthetic label-attribute association"),
    (
        "flip",
        "reverse the association in the synthetic test split",
    ),
    ("classes", "synthetic task classes"),
    ("arity", "synthetic attribute values"),
    ("length", "synthetic tokens per record"),
    ("task_rate", "share of label-bearing tokens"),
    (
        "task_purity",
        "share of label-bearing tokens that name the true class",
    ),
    ("style_rate", "share of attribute-bearing tokens"),
    (
        "indicators",
        "indicator tokens per class or attribute value",
    ),
];

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn defaults() -> BTreeMap<&'static str, String> {
    let t = TrainConfig::default();
    let d = ModelDims::default();
    let a = AttackerConfig::default();
    let s = SynthSpec::default();
    let optimizer = match t.optimizer {
        OptimizerKind::Adam => "adam",
        OptimizerKind::Sgd => "sgd",
    };
    let pairs: Vec<(&str, String)> = vec![
        ("task", "tagger".into()),
        ("train", String::new()),
        ("dev", String::new()),
        ("test", String::new()),
        ("checkpoint", String::new()),
        ("out", "out".into()),
        ("adv", "none".into()),
        ("lambda", DEFAULT_LAMBDA.to_string()),
        ("seed", "0".into()),
        ("k", "10".into()),
        ("min_count", DEFAULT_MIN_COUNT.to_string()),
        ("optimizer", optimizer.into()),
        ("learning_rate", t.learning_rate.to_string()),
        ("beta1", t.beta1.to_string()),
        ("beta2", t.beta2.to_string()),
        ("epsilon", t.epsilon.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("max_epochs", t.max_epochs.to_string()),
        ("patience", t.patience.to_string()),
        ("dropout", t.dropout.to_string()),
        ("embed_dim", d.embed_dim.to_string()),
        ("hidden_total", d.hidden_total.to_string()),
        ("conv_widths", join(&d.conv_widths)),
        ("conv_maps", d.conv_maps.to_string()),
        ("disc_hidden", d.disc_hidden.to_string()),
        ("attack", "all".into()),
        ("attack_hidden", a.hidden.to_string()),
        ("attack_learning_rate", a.learning_rate.to_string()),
        ("attack_batch_size", a.batch_size.to_string()),
        ("attack_max_epochs", a.max_epochs.to_string()),
        ("attack_patience", a.patience.to_string()),
        ("attack_held_in", a.held_in.to_string()),
        ("synth_format", "review".into()),
        ("n_train", s.n_train.to_string()),
        ("n_test", s.n_test.to_string()),
        ("vocab_size", s.vocab_size.to_string()),
        ("rho", s.confound_strength.to_string()),
        ("flip", s.flip_out_of_domain.to_string()),
        ("classes", s.task_classes.to_string()),
        ("arity", s.attribute_arity.to_string()),
        ("length", s.length.to_string()),
        ("task_rate", s.task_rate.to_string()),
        ("task_purity", s.task_purity.to_string()),
        ("style_rate", s.style_rate.to_string()),
        ("indicators", s.indicators_per_class.to_string()),
    ];
    debug_assert_eq!(pairs.len(), KEYS.len());
    pairs.into_iter().collect()
}

fn key_of(name: &str) -> Option<&'static str> {
    KEYS.iter().map(|(k, _)| *k).find(|k| *k == name)
}

/// Raw key → value map; typed access reports the offending key.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: defaults() }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let k = key_of(key).ok_or_else(|| CliError::config(format!("unknown key `{key}`")))?;
        self.values.insert(k, value.trim().to_string());
        Ok(())
    }

    /// Applies a `key=value` file; `#` starts a comment line.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut seen = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| CliError::config(format!("{}:{}: {msg}", path.display(), n + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key=value, got `{line}`")))?;
            let k = k.trim();
            if seen.insert(k.to_string(), ()).is_some() {
                return Err(at(format!("duplicate key `{k}`")));
            }
            self.set(k, v).map_err(|e| at(e.message))?;
        }
        Ok(())
    }

    /// Every key, sorted, one `key=value` per line. Feeding this back
    /// through `--config` reproduces the run.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("`{key}` is not a configuration key"))
    }

    fn parse<T: FromStr>(&self, key: &str, what: &str) -> Result<T, CliError> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| CliError::config(format!("{key}: expected {what}, got `{v}`")))
    }

    fn list<T: FromStr>(&self, key: &str, what: &str) -> Result<Vec<T>, CliError> {
        let v = self.raw(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|x| {
                x.trim().parse().map_err(|_| {
                    CliError::config(format!("{key}: expected a comma list of {what}, got `{v}`"))
                })
            })
            .collect()
    }

    pub fn task(&self) -> Result<TaskKind, CliError> {
        self.raw("task").parse().map_err(CliError::from)
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed", "an unsigned integer")
    }

    pub fn k(&self) -> Result<usize, CliError> {
        self.parse("k", "an unsigned integer")
    }

    pub fn min_count(&self) -> Result<usize, CliError> {
        self.parse("min_count", "an unsigned integer")
    }

    pub fn out(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    /// Path under `key`; an error naming the key when unset.
    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        match self.raw(key) {
            "" => Err(CliError::config(format!(
                "{key}: a path is required (--{})",
                key.replace('_', "-")
            ))),
            p => Ok(PathBuf::from(p)),
        }
    }

    /// Attributes named by `adv`; empty for `none`.
    pub fn adversaries(&self) -> Result<Vec<String>, CliError> {
        let v = self.raw("adv");
        if v == "none" || v.is_empty() {
            return Ok(Vec::new());
        }
        let mut names: Vec<String> = v.split(',').map(|s| s.trim().to_string()).collect();
        if names.iter().any(String::is_empty) {
            return Err(CliError::config(format!(
                "adv: empty attribute name in `{v}`"
            )));
        }
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::config(format!(
                "adv: repeated attribute in `{v}`"
            )));
        }
        Ok(names)
    }

    /// λ per adversary: one number for all, or `name=value` pairs with the
    /// default λ for attributes not listed.
    pub fn lambdas(&self) -> Result<BTreeMap<String, f64>, CliError> {
        let adv = self.adversaries()?;
        let v = self.raw("lambda");
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        let number = |s: &str| -> Result<f64, CliError> {
            let x: f64 = s
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("lambda: expected a number, got `{s}`")))?;
            if !(x >= 0.0 && x.is_finite()) {
                return Err(CliError::config(format!(
                    "lambda: must be finite and >= 0, got {x}"
                )));
            }
            Ok(x)
        };
        if v.contains('=') {
            for name in &adv {
                out.insert(name.clone(), DEFAULT_LAMBDA);
            }
            for pair in v.split(',') {
                let (name, x) = pair.split_once('=').ok_or_else(|| {
                    CliError::config(format!("lambda: expected name=value, got `{pair}`"))
                })?;
                let name = name.trim();
                if !adv.iter().any(|a| a == name) {
                    return Err(CliError::config(format!(
                        "lambda: `{name}` is not listed in adv"
                    )));
                }
                out.insert(name.to_string(), number(x)?);
            }
        } else {
            let x = number(v)?;
            for name in adv {
                out.insert(name, x);
            }
        }
        Ok(out)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let optimizer: OptimizerKind = self.raw("optimizer").parse()?;
        let cfg = TrainConfig {
            lambdas: self.lambdas()?,
            optimizer,
            learning_rate: self.parse("learning_rate", "a number")?,
            beta1: self.parse("beta1", "a number")?,
            beta2: self.parse("beta2", "a number")?,
            epsilon: self.parse("epsilon", "a number")?,
            batch_size: self.parse("batch_size", "an unsigned integer")?,
            max_epochs: self.parse("max_epochs", "an unsigned integer")?,
            patience: self.parse("patience", "an unsigned integer")?,
            dropout: self.parse("dropout", "a number")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dims(&self) -> Result<ModelDims, CliError> {
        let dims = ModelDims {
            embed_dim: self.parse("embed_dim", "an unsigned integer")?,
            hidden_total: self.parse("hidden_total", "an unsigned integer")?,
            conv_widths: self.list("conv_widths", "unsigned integers")?,
            conv_maps: self.parse("conv_maps", "an unsigned integer")?,
            disc_hidden: self.parse("disc_hidden", "an unsigned integer")?,
        };
        if dims.embed_dim == 0
            || dims.conv_maps == 0
            || dims.disc_hidden == 0
            || dims.conv_widths.contains(&0)
        {
            return Err(CliError::config(
                "embed_dim, conv_maps, disc_hidden and conv_widths must be >= 1",
            ));
        }
        if dims.hidden_total < 2 || !dims.hidden_total.is_multiple_of(2) {
            return Err(CliError::config(format!(
                "hidden_total: must be even and >= 2, got {}",
                dims.hidden_total
            )));
        }
        if dims.conv_widths.is_empty() {
            return Err(CliError::config(
                "conv_widths: at least one width is required",
            ));
        }
        Ok(dims)
    }

    /// Attributes to attack out of `schema`.
    pub fn attack_attributes(&self, schema: &AttributeSchema) -> Result<Vec<String>, CliError> {
        let names: Vec<String> = match self.raw("attack") {
            "all" => return Ok(schema.names().map(str::to_string).collect()),
            "none" | "" => return Ok(Vec::new()),
            _ => self.list("attack", "attribute names")?,
        };
        for n in &names {
            if !schema.contains(n) {
                let known: Vec<&str> = schema.names().collect();
                return Err(CliError::config(format!(
                    "attack: `{n}` is not an attribute of this data ({})",
                    known.join(", ")
                )));
            }
        }
        Ok(names)
    }

    pub fn attacker(&self) -> Result<AttackerConfig, CliError> {
        Ok(AttackerConfig {
            hidden: self.parse("attack_hidden", "an unsigned integer")?,
            learning_rate: self.parse("attack_learning_rate", "a number")?,
            batch_size: self.parse("attack_batch_size", "an unsigned integer")?,
            max_epochs: self.parse("attack_max_epochs", "an unsigned integer")?,
            patience: self.parse("attack_patience", "an unsigned integer")?,
            held_in: self.parse("attack_held_in", "a number")?,
            standardize: false,
            seed: self.seed()?,
        })
    }

    pub fn synth(&self) -> Result<SynthSpec, CliError> {
        let spec = SynthSpec {
            n_train: self.parse("n_train", "an unsigned integer")?,
            n_test: self.parse("n_test", "an unsigned integer")?,
            vocab_size: self.parse("vocab_size", "an unsigned integer")?,
            confound_strength: self.parse("rho", "a number")?,
            flip_out_of_domain: self.parse("flip", "true or false")?,
            task_classes: self.parse("classes", "an unsigned integer")?,
            attribute_arity: self.parse("arity", "an unsigned integer")?,
            seed: self.seed()?,
            length: self.parse("length", "an unsigned integer")?,
            task_rate: self.parse("task_rate", "a number")?,
            task_purity: self.parse("task_purity", "a number")?,
            style_rate: self.parse("style_rate", "a number")?,
            indicators_per_class: self.parse("indicators", "an unsigned integer")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn synth_format(&self) -> Result<TaskKind, CliError> {
        match self.raw("synth_format") {
            "review" => Ok(TaskKind::Sentiment),
            "tagging" => Ok(TaskKind::Tagger),
            other => Err(CliError::config(format!(
                "synth_format: expected review or tagging, got `{other}`"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_every_key() {
        let c = RunConfig::default();
        for (k, _) in KEYS {
            c.raw(k);
        }
        assert_eq!(c.echo().lines().count(), KEYS.len());
        c.train_config().unwrap();
        c.dims().unwrap();
        c.synth().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        let e = c.set("learning-rate", "0.1").unwrap_err();
        assert_eq!(e.class, "config");
        assert!(e.message.contains("learning-rate"));
    }

    #[test]
    fn lambda_forms() {
        let mut c = RunConfig::default();
        c.set("adv", "sex,age").unwrap();
        c.set("lambda", "0.5").unwrap();
        assert_eq!(
            c.lambdas().unwrap(),
            [("age".to_string(), 0.5), ("sex".to_string(), 0.5)].into()
        );
        c.set("lambda", "sex=0.1").unwrap();
        assert_eq!(
            c.lambdas().unwrap(),
            [
                ("age".to_string(), DEFAULT_LAMBDA),
                ("sex".to_string(), 0.1)
            ]
            .into()
        );
        c.set("lambda", "loc=0.1").unwrap();
        assert!(c.lambdas().is_err());
        c.set("lambda", "-1").unwrap();
        assert!(c.lambdas().is_err());
        c.set("adv", "none").unwrap();
        c.set("lambda", "0.3").unwrap();
        assert!(c.lambdas().unwrap().is_empty());
    }

    #[test]
    fn bad_values_name_their_key() {
        let mut c = RunConfig::default();
        c.set("batch_size", "many").unwrap();
        let e = c.train_config().unwrap_err();
        assert!(e.message.starts_with("batch_size:"), "{}", e.message);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set("seed", "7").unwrap();
        c.set("conv_widths", "2,3").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, c.echo()).unwrap();
        let mut back = RunConfig::default();
        back.apply_file(&p).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn file_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "# comment\nseed=1\nwat=2\n").unwrap();
        let e = RunConfig::default().apply_file(&p).unwrap_err();
        assert!(
            e.message.contains(":3:") && e.message.contains("wat"),
            "{}",
            e.message
        );
        std::fs::write(&p, "seed=1\nseed=2\n").unwrap();
        assert!(RunConfig::default()
            .apply_file(&p)
            .unwrap_err()
            .message
            .contains("duplicate"));
    }
}
