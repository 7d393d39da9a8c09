use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const REGISTRY: &str = "\
music\tplaylist\tplaylist name
music\tcity\tcity name
travel\tairline\tairline name
travel\tcity\tcity name
dining\trestaurant_name\trestaurant name
dining\tcity\tcity name
";

const PATTERNS: [(&str, &str, [&str; 3]); 3] = [
    ("music", "playlist", ["chill vibes", "road trip", "deep focus"]),
    ("travel", "airline", ["sky jet", "blue air", "sun wings"]),
    ("dining", "restaurant_name", ["golden fork", "green olive", "red lantern"]),
];

const CITIES: [&str; 4] = ["paris", "oslo", "lima", "rome"];

fn corpus(domain: &str, slot: &str, values: &[&str]) -> String {
    let mut out = String::new();
    for i in 0..8 {
        let v = values[i % values.len()];
        let city = CITIES[i % CITIES.len()];
        if i % 2 == 0 {
            out.push_str(&format!("find O\nthe O\n{domain} O\ncalled O\n"));
            for (k, w) in v.split(' ').enumerate() {
                out.push_str(&format!("{w} {}-{slot}\n", if k == 0 { "B" } else { "I" }));
            }
        } else {
            out.push_str(&format!("go O\nto O\n{city} B-city\n"));
        }
        out.push('\n');
    }
    out
}

/// Writes corpora, registry and a config into `dir`; returns the config path.
fn fixture(dir: &Path, extra: &str) -> PathBuf {
    fs::write(dir.join("slots.tsv"), REGISTRY).unwrap();
    let mut corpora = String::from("[corpora]\n");
    for (domain, slot, values) in PATTERNS {
        fs::write(dir.join(format!("{domain}.bio")), corpus(domain, slot, &values)).unwrap();
        corpora.push_str(&format!("{domain} = \"{domain}.bio\"\n"));
    }
    let mut keys: Vec<(String, String)> = [
        ("slot_registry", "\"slots.tsv\""),
        ("target_domain", "\"dining\""),
        ("validation_size", "3"),
        ("word_dim", "6"),
        ("char_dim", "4"),
        ("char_buckets", "64"),
        ("hidden", "4"),
        ("layers", "1"),
        ("max_epochs", "2"),
        ("batch_size", "4"),
        ("lr", "0.01"),
        ("shots", "[0]"),
        ("seeds", "[1]"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    for line in extra.lines() {
        let (k, v) = line.split_once(" = ").unwrap();
        match keys.iter_mut().find(|(key, _)| key == k) {
            Some(slot) => slot.1 = v.to_owned(),
            None => keys.push((k.to_owned(), v.to_owned())),
        }
    }
    let mut config: String = keys.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    config.push_str(&corpora);
    let path = dir.join("run.toml");
    fs::write(&path, config).unwrap();
    path
}

fn coach(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coach"))
        .args(args)
        .env_remove("COACH_SEED")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), "");
    let out = dir.path().join("run");
    let o = coach(&["train", "--config", s(&config), "--out", s(&out), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.bin", "report.tsv", "manifest.txt", "train_log.jsonl", "validation.bio", "test.bio"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("command: train"));
    assert!(manifest.contains("seed: 3"));
    let report = fs::read_to_string(out.join("report.tsv")).unwrap();
    assert!(report.starts_with("seed\t3\n"));
    assert_eq!(fs::read_to_string(out.join("train_log.jsonl")).unwrap().lines().count(), 2);
}

#[test]
fn missing_corpus_is_a_config_path_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), "");
    fs::remove_file(dir.path().join("travel.bio")).unwrap();
    let o = coach(&["train", "--config", s(&config), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: config.path: "), "{err}");
}

#[test]
fn unknown_config_key_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), "hiden = 3");
    let o = coach(&["train", "--config", s(&config), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: config.parse: "));
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), "max_epochs = 1");
    let seed_of = |out: &Path| {
        let m = fs::read_to_string(out.join("manifest.txt")).unwrap();
        m.lines().find_map(|l| l.strip_prefix("seed: ")).unwrap().to_owned()
    };
    let env_out = dir.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_coach"))
        .args(["train", "--config", s(&config), "--out", s(&env_out)])
        .env("COACH_SEED", "17")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(seed_of(&env_out), "17");

    let flag_out = dir.path().join("flag");
    let o = Command::new(env!("CARGO_BIN_EXE_coach"))
        .args(["train", "--config", s(&config), "--out", s(&flag_out), "--seed", "5"])
        .env("COACH_SEED", "17")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(seed_of(&flag_out), "5");

    let file_config = fixture(dir.path(), "max_epochs = 1\nseed = 9");
    let file_out = dir.path().join("file");
    let o = Command::new(env!("CARGO_BIN_EXE_coach"))
        .args(["train", "--config", s(&file_config), "--out", s(&file_out)])
        .env("COACH_SEED", "17")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(seed_of(&file_out), "9");
}

#[test]
fn entity_encoder_flag_changes_only_the_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), "");
    let mut manifests = Vec::new();
    for mode in ["bilstm", "sum"] {
        let out = dir.path().join(mode);
        let o = coach(&["train", "--config", s(&config), "--out", s(&out), "--entity-encoder", mode]);
        assert!(o.status.success(), "{}", stderr(&o));
        manifests.push(fs::read_to_string(out.join("manifest.txt")).unwrap());
    }
    let a: Vec<&str> = manifests[0].lines().collect();
    let b: Vec<&str> = manifests[1].lines().collect();
    assert_eq!(a.len(), b.len());
    let differing: Vec<(&str, &str)> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, y)| (*x, *y)).collect();
    assert_eq!(differing.len(), 2, "{differing:?}");
    assert!(differing.iter().any(|(x, _)| x.starts_with("out_dir")));
    assert!(differing.iter().any(|(x, y)| x.contains("entity_encoder = \"bilstm\"") && y.contains("\"sum\"")));
}

#[test]
fn train_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), "");
    let logs: Vec<String> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            assert!(coach(&["train", "--config", s(&config), "--out", s(&out)]).status.success());
            fs::read_to_string(out.join("train_log.jsonl")).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn eval_reproduces_best_validation_f1() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), "max_epochs = 4\npatience = 4");
    let out = dir.path().join("run");
    assert!(coach(&["train", "--config", s(&config), "--out", s(&out)]).status.success());
    let report = fs::read_to_string(out.join("report.tsv")).unwrap();
    let best = report.lines().find_map(|l| l.strip_prefix("best_validation_f1\t")).unwrap();
    let o = coach(&[
        "eval",
        "--checkpoint",
        s(&out.join("checkpoint.bin")),
        "--corpus",
        s(&out.join("validation.bio")),
        "--breakdown",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let overall = text.lines().next().unwrap();
    assert!(overall.contains(&format!("f1={best}\t")), "{overall} vs {best}");
    assert!(text.lines().any(|l| l.starts_with("unseen")));
}

#[test]
fn predict_output_is_a_valid_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), "");
    let out = dir.path().join("run");
    assert!(coach(&["train", "--config", s(&config), "--out", s(&out)]).status.success());
    let input = dir.path().join("in.txt");
    fs::write(&input, "find\nthe\ndining\ncalled\ngolden\nfork\n\ngo\nto\nzurich\n").unwrap();
    let tagged = dir.path().join("tagged.bio");
    let ckpt = out.join("checkpoint.bin");
    let o = coach(&["predict", "--checkpoint", s(&ckpt), "--input", s(&input), "--output", s(&tagged)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let loaded = coach::corpus::load_bio_corpus(&tagged, "dining", coach::corpus::CorpusFormat::Bio).unwrap();
    assert_eq!(loaded.repaired_tags, 0);
    assert_eq!(loaded.utterances.iter().map(|u| u.len()).collect::<Vec<_>>(), vec![6, 3]);

    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let o = coach(&["predict", "--checkpoint", s(&ckpt), "--input", s(&empty)]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
}

#[test]
fn matrix_emits_one_row_per_domain_and_an_average() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), "max_epochs = 1");
    let out = dir.path().join("matrix");
    let o = coach(&["matrix", "--config", s(&config), "--out", s(&out), "--shots", "0,2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("report.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 5, "{table}");
    assert!(rows[0].starts_with("target\t0-shot\t2-shot"));
    assert!(rows[4].starts_with("Average F1"));
    assert_eq!(fs::read_to_string(out.join("cells.jsonl")).unwrap().lines().count(), 6);
    assert!(out.join("manifest.txt").is_file());
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = coach(&["eval", "--checkpoint", s(&dir.path().join("none.bin")), "--corpus", s(&dir.path().join("x.bio"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: config.path: checkpoint"));
}

#[test]
fn pretrained_vectors_are_loaded() {
    let dir = tempfile::tempdir().unwrap();
    let mut vectors = String::from("5 6\n");
    for (i, w) in ["find", "the", "called", "city", "name"].iter().enumerate() {
        let v: Vec<String> = (0..6).map(|k| format!("{:.2}", (i * 6 + k) as f64 / 50.0)).collect();
        vectors.push_str(&format!("{w} {}\n", v.join(" ")));
    }
    fs::write(dir.path().join("vectors.txt"), vectors).unwrap();
    let config = fixture(dir.path(), "word_vectors = \"vectors.txt\"\nmax_epochs = 1");
    let o = coach(&["train", "--config", s(&config), "--out", s(&dir.path().join("run"))]);
    assert!(o.status.success(), "{}", stderr(&o));

    fs::write(dir.path().join("vectors.txt"), "find 0.1 0.2\n").unwrap();
    let o = coach(&["train", "--config", s(&config), "--out", s(&dir.path().join("bad"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: data.parse: "), "{}", stderr(&o));
}
