//! Flat `key = value` run configuration and dataset assembly.
//!
//! Recognized keys: `task`, `variant`, `data.train`, `data.valid`,
//! `data.test`, `vocab.size`, `emb.dim`, `hidden`, `lr`, `batch`, `epochs`,
//! `clip`, `tau`, `seed`, `kl.warmup_epochs`, `out.dir`, `neuron_rule`.
//! Unknown keys are rejected. `task` and the three `data.*` keys have no
//! defaults; everything else falls back to the task defaults.
//!
//! Data sources are file paths, or synthetic specs of the form
//! `synthetic:sparse_signal[:n]`, `synthetic:parity[:n]`, and
//! `synthetic:copy_memory[:len]` (all three `data.*` keys must then name the
//! same spec; the generator produces the three splits from the run seed).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use svdl::data::{
    self, build_vocab, load_classification_tsv, ClassificationSet, VocabLevel, Vocabulary,
};
use svdl::numerics::Rng;
use svdl::sparse_lstm::{ModelVariant, Task};
use svdl::training::{Dataset, TaskData, TrainConfig};
use svdl::{Error, Result};

const KNOWN_KEYS: [&str; 17] = [
    "task",
    "variant",
    "data.train",
    "data.valid",
    "data.test",
    "vocab.size",
    "emb.dim",
    "hidden",
    "lr",
    "batch",
    "epochs",
    "clip",
    "tau",
    "seed",
    "kl.warmup_epochs",
    "out.dir",
    "neuron_rule",
];

/// Parsed run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data_train: String,
    pub data_valid: String,
    pub data_test: String,
    pub out_dir: PathBuf,
    /// True when `vocab.size` was given explicitly (affects synthetic tasks).
    pub explicit_vocab: bool,
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    for (idx, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", idx + 1)))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        if kv.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!("duplicate config key `{key}`")));
        }
    }

    let task_str = kv
        .remove("task")
        .ok_or_else(|| Error::Config("missing required key `task`".into()))?;
    let task = Task::parse(&task_str)
        .ok_or_else(|| Error::Config(format!("unknown task {task_str:?}")))?;
    let mut cfg = TrainConfig::for_task(task);

    let explicit_vocab = kv.contains_key("vocab.size");
    let mut take = |key: &str| kv.remove(key);
    if let Some(v) = take("variant") {
        cfg.variant = ModelVariant::parse(&v)
            .ok_or_else(|| Error::Config(format!("unknown variant {v:?}")))?;
    }
    if let Some(v) = take("vocab.size") {
        cfg.vocab_size = parse_num(&v, "vocab.size")?;
    }
    if let Some(v) = take("emb.dim") {
        cfg.emb_dim = parse_num(&v, "emb.dim")?;
    }
    if let Some(v) = take("hidden") {
        cfg.hidden = parse_num(&v, "hidden")?;
    }
    if let Some(v) = take("lr") {
        cfg.lr = parse_float(&v, "lr")?;
    }
    if let Some(v) = take("batch") {
        cfg.batch_size = parse_num(&v, "batch")?;
    }
    if let Some(v) = take("epochs") {
        cfg.epochs = parse_num(&v, "epochs")?;
    }
    if let Some(v) = take("clip") {
        cfg.clip = if v.eq_ignore_ascii_case("none") {
            None
        } else {
            Some(parse_float(&v, "clip")?)
        };
    }
    if let Some(v) = take("tau") {
        cfg.tau = parse_float(&v, "tau")?;
    }
    if let Some(v) = take("seed") {
        cfg.seed = parse_num(&v, "seed")? as u64;
    }
    if let Some(v) = take("kl.warmup_epochs") {
        cfg.kl_warmup_epochs = parse_num(&v, "kl.warmup_epochs")?;
    }
    let out_dir = PathBuf::from(take("out.dir").unwrap_or_else(|| "out".to_string()));
    if let Some(v) = take("neuron_rule") {
        cfg.strict_neuron_rule = match v.as_str() {
            "consume" => false,
            "strict" => true,
            other => {
                return Err(Error::Config(format!(
                    "neuron_rule must be `consume` or `strict`, got {other:?}"
                )))
            }
        };
    }

    let require = |kv: &mut BTreeMap<String, String>, key: &str| -> Result<String> {
        kv.remove(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    };
    let data_train = require(&mut kv, "data.train")?;
    let data_valid = require(&mut kv, "data.valid")?;
    let data_test = require(&mut kv, "data.test")?;

    Ok(RunConfig {
        train: cfg,
        data_train,
        data_valid,
        data_test,
        out_dir,
        explicit_vocab,
    })
}

fn parse_num(v: &str, key: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
}

fn parse_float(v: &str, key: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))
}

/// Synthetic data spec (`synthetic:kind[:size]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SyntheticSpec {
    SparseSignal { n_train: usize },
    Parity { n_train: usize },
    CopyMemory { len: usize },
}

pub fn parse_synthetic(s: &str) -> Result<Option<SyntheticSpec>> {
    let Some(rest) = s.strip_prefix("synthetic:") else {
        return Ok(None);
    };
    let mut parts = rest.split(':');
    let kind = parts.next().unwrap_or("");
    let size = parts
        .next()
        .map(|p| parse_num(p, "synthetic size"))
        .transpose()?;
    if parts.next().is_some() {
        return Err(Error::Config(format!("malformed synthetic spec {s:?}")));
    }
    let spec = match kind {
        "sparse_signal" => SyntheticSpec::SparseSignal {
            n_train: size.unwrap_or(2000),
        },
        "parity" => SyntheticSpec::Parity {
            n_train: size.unwrap_or(2000),
        },
        "copy_memory" => SyntheticSpec::CopyMemory {
            len: size.unwrap_or(200_000),
        },
        other => return Err(Error::Config(format!("unknown synthetic task {other:?}"))),
    };
    Ok(Some(spec))
}

/// Build the dataset (and finalize data-dependent config fields: actual
/// vocabulary size and class count).
pub fn build_dataset(run: &mut RunConfig) -> Result<Dataset> {
    if let Some(spec) = parse_synthetic(&run.data_train)? {
        let same_valid = parse_synthetic(&run.data_valid)? == Some(spec.clone());
        let same_test = parse_synthetic(&run.data_test)? == Some(spec.clone());
        if !same_valid || !same_test {
            return Err(Error::Config(
                "synthetic data.train requires data.valid and data.test to name the same spec"
                    .into(),
            ));
        }
        return build_synthetic(run, spec);
    }
    match run.train.task {
        Task::Classification => build_classification_files(run),
        Task::CharLm => build_lm_files(run, VocabLevel::Char),
        Task::WordLm => build_lm_files(run, VocabLevel::Word),
    }
}

fn build_synthetic(run: &mut RunConfig, spec: SyntheticSpec) -> Result<Dataset> {
    let mut rng = Rng::from_seed(run.train.seed ^ 0x5D47A);
    match spec {
        SyntheticSpec::SparseSignal { n_train } => {
            if run.train.task != Task::Classification {
                return Err(Error::Config(
                    "sparse_signal is a classification task".into(),
                ));
            }
            let vocab = if run.explicit_vocab {
                run.train.vocab_size
            } else {
                32
            };
            let params = data::SparseSignalParams {
                vocab,
                n_train,
                n_val: (n_train * 15 / 100).max(8),
                n_test: (n_train / 2).max(8),
                ..Default::default()
            };
            let (train, val, test) = data::sparse_signal(&params, &mut rng);
            run.train.vocab_size = vocab;
            run.train.classes = 2;
            Ok(Dataset {
                data: TaskData::Classification { train, val, test },
                vocab: None,
            })
        }
        SyntheticSpec::Parity { n_train } => {
            if run.train.task != Task::Classification {
                return Err(Error::Config("parity is a classification task".into()));
            }
            let (train, val, test) = data::parity(
                16,
                n_train,
                (n_train * 15 / 100).max(8),
                (n_train / 2).max(8),
                &mut rng,
            );
            run.train.vocab_size = 2;
            run.train.classes = 2;
            Ok(Dataset {
                data: TaskData::Classification { train, val, test },
                vocab: None,
            })
        }
        SyntheticSpec::CopyMemory { len } => {
            if !run.train.task.is_lm() {
                return Err(Error::Config("copy_memory is a language-model task".into()));
            }
            let params = data::CopyMemoryParams {
                len,
                ..Default::default()
            };
            let corpus = data::copy_memory(&params, &mut rng);
            let vocab = build_vocab(&corpus, VocabLevel::Char, 0)?;
            let ids = vocab.encode_chars(&corpus)?;
            // 5% validation and 5% test from the tail.
            let n = ids.len();
            let cut1 = n * 90 / 100;
            let cut2 = n * 95 / 100;
            let dataset = Dataset {
                data: TaskData::Lm {
                    train: ids[..cut1].to_vec(),
                    val: ids[cut1..cut2].to_vec(),
                    test: ids[cut2..].to_vec(),
                },
                vocab: Some(vocab.clone()),
            };
            run.train.vocab_size = vocab.len();
            Ok(dataset)
        }
    }
}

fn read_data_file(path: &str) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{path}: {e}")))
}

fn build_classification_files(run: &mut RunConfig) -> Result<Dataset> {
    // Vocabulary from the training texts only.
    let train_raw = read_data_file(&run.data_train)?;
    let mut text_corpus = String::new();
    for line in train_raw.lines() {
        if let Some((_, text)) = line.split_once('\t') {
            text_corpus.push_str(text);
            text_corpus.push('\n');
        }
    }
    let vocab = build_vocab(&text_corpus, VocabLevel::Word, run.train.vocab_size)?;

    let load = |path: &str, vocab: &Vocabulary| -> Result<ClassificationSet> {
        load_classification_tsv(Path::new(path), vocab)
            .map_err(|e| Error::Data(format!("{path}: {e}")))
    };
    let train = load(&run.data_train, &vocab)?;
    let val = load(&run.data_valid, &vocab)?;
    let test = load(&run.data_test, &vocab)?;
    let classes = train.n_classes.max(val.n_classes).max(test.n_classes);
    run.train.vocab_size = vocab.len();
    run.train.classes = classes;
    Ok(Dataset {
        data: TaskData::Classification { train, val, test },
        vocab: Some(vocab),
    })
}

fn build_lm_files(run: &mut RunConfig, level: VocabLevel) -> Result<Dataset> {
    let train_raw = read_data_file(&run.data_train)?;
    let valid_raw = read_data_file(&run.data_valid)?;
    let test_raw = read_data_file(&run.data_test)?;
    type Encoder = Box<dyn Fn(&str, &Vocabulary) -> Result<Vec<u32>>>;
    let (vocab, encode): (Vocabulary, Encoder) = match level {
        VocabLevel::Char => {
            // Char vocabulary covers all splits so evaluation text always
            // encodes.
            let mut all = train_raw.clone();
            all.push_str(&valid_raw);
            all.push_str(&test_raw);
            let vocab = build_vocab(&all, VocabLevel::Char, 0)?;
            (vocab, Box::new(|s, v| v.encode_chars(s)))
        }
        VocabLevel::Word => {
            let vocab = build_vocab(&train_raw, VocabLevel::Word, run.train.vocab_size)?;
            (
                vocab,
                Box::new(|s, v| Ok(v.encode_words(&data::tokenize_words(s)))),
            )
        }
    };
    let dataset = Dataset {
        data: TaskData::Lm {
            train: encode(&train_raw, &vocab)?,
            val: encode(&valid_raw, &vocab)?,
            test: encode(&test_raw, &vocab)?,
        },
        vocab: Some(vocab.clone()),
    };
    run.train.vocab_size = vocab.len();
    Ok(dataset)
}
