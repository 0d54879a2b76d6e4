// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::sync::Arc;

use controllm::chat::generate;
use controllm::cli::run;
use controllm::hub::Hub;
use controllm::model::fixtures::{constant_output_model, unembedding_vector, uniform_model};
use controllm::model::{load_model, ModelHandle};
use controllm::steering::{compose, SteeringPlan};
use tempfile::TempDir;

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn cli(args: &[&str]) -> Out {
    let (mut o, mut e) = (Vec::new(), Vec::new());
    let mut full = vec!["controllm"];
    full.extend_from_slice(args);
    let code = run(full, &mut o, &mut e);
    Out {
        code,
        stdout: String::from_utf8(o).unwrap(),
        stderr: String::from_utf8(e).unwrap(),
    }
}

struct Ws {
    dir: TempDir,
}

impl Ws {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn p(&self, name: &str) -> String {
        self.dir.path().join(name).to_string_lossy().into_owned()
    }

    fn write(&self, name: &str, text: &str) -> String {
        std::fs::write(self.dir.path().join(name), text).unwrap();
        self.p(name)
    }

    fn save_model(&self, m: &ModelHandle, stem: &str) -> (String, String) {
        let (c, w) = (
            self.p(&format!("{stem}.cfg")),
            self.p(&format!("{stem}.clmw")),
        );
        m.save(Path::new(&c), Path::new(&w)).unwrap();
        (c, w)
    }

    /// Random 3-layer model with two extracted traits.
    fn with_traits(&self) -> (String, String, String) {
        let (c, w, h) = (self.p("m.cfg"), self.p("m.clmw"), self.p("hub.clmv"));
        let r = cli(&[
            "init",
            "--model",
            &c,
            "--weights",
            &w,
            "--n-layers",
            "3",
            "--hidden-dim",
            "16",
            "--n-heads",
            "2",
            "--seed",
            "7",
        ]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        let warm = self.write(
            "warm.jsonl",
            concat!(
                "{\"trait\":\"Warmth\",\"positive\":\"I love you all\",\"negative\":\"I dislike you all\"}\n",
                "{\"trait\":\"Warmth\",\"positive\":\"Come in, friend\",\"negative\":\"Go away, stranger\"}\n",
            ),
        );
        let calm = self.write(
            "calm.jsonl",
            "{\"trait\":\"Calm\",\"positive\":\"All is fine\",\"negative\":\"Everything is on fire\"}\n",
        );
        for pairs in [&warm, &calm] {
            let r = cli(&[
                "extract",
                "--model",
                &c,
                "--weights",
                &w,
                "--hub",
                &h,
                "--pairs",
                pairs,
                "--layers",
                "1,2",
            ]);
            assert_eq!(r.code, 0, "{}", r.stderr);
        }
        (c, w, h)
    }
}

#[test]
fn extract_reports_and_grows_the_hub() {
    let ws = Ws::new();
    let (c, w, h) = ws.with_traits();
    let entries = Hub::new(&h).list().unwrap();
    assert_eq!(entries.len(), 2);
    let pairs = ws.p("warm.jsonl");
    let r = cli(&[
        "extract",
        "--model",
        &c,
        "--weights",
        &w,
        "--hub",
        &h,
        "--pairs",
        &pairs,
        "--layers",
        "1,2",
    ]);
    assert_eq!(r.code, 1, "duplicate without --replace");

    std::thread::sleep(std::time::Duration::from_millis(1100));
    let r = cli(&[
        "extract",
        "--model",
        &c,
        "--weights",
        &w,
        "--hub",
        &h,
        "--pairs",
        &pairs,
        "--layers",
        "1,2",
        "--replace",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(
        r.stdout.contains("trait: Warmth\npairs: 2\nlayers: 1,2\n"),
        "{}",
        r.stdout
    );
    assert!(r.stdout.contains("norm[1]: ") && r.stdout.contains("norm[2]: "));
    let after = Hub::new(&h).list().unwrap();
    assert_eq!(after.len(), 2);
    assert_eq!(after[0].id(), entries[0].id());
    assert!(after[0].meta.created_unix > entries[0].meta.created_unix);
}

#[test]
fn missing_pairs_file_is_a_usage_error() {
    let ws = Ws::new();
    let missing = ws.p("nope.jsonl");
    let r = cli(&[
        "extract",
        "--model",
        "m",
        "--weights",
        "w",
        "--hub",
        "h",
        "--pairs",
        &missing,
    ]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains(&missing), "{}", r.stderr);
}

#[test]
fn pairs_schema_error_names_the_line() {
    let ws = Ws::new();
    let (c, w, h) = ws.with_traits();
    let bad = ws.write(
        "bad.jsonl",
        "{\"trait\":\"T\",\"positive\":\"a\",\"negative\":\"b\"}\n{oops\n",
    );
    let r = cli(&[
        "extract",
        "--model",
        &c,
        "--weights",
        &w,
        "--hub",
        &h,
        "--pairs",
        &bad,
    ]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("line 2"), "{}", r.stderr);
}

#[test]
fn generate_gamma_zero_and_determinism() {
    let ws = Ws::new();
    let (c, w, h) = ws.with_traits();
    let base = [
        "generate",
        "--model",
        &c,
        "--weights",
        &w,
        "--hub",
        &h,
        "--prompt",
        "Hello",
        "--max-new",
        "16",
    ];
    let vanilla = cli(&base);
    assert_eq!(vanilla.code, 0, "{}", vanilla.stderr);
    let mut zero = base.to_vec();
    zero.extend(["--trait", "Warmth", "--gamma", "0", "--layers", "1,2"]);
    assert_eq!(cli(&zero).stdout, vanilla.stdout);
    assert_eq!(cli(&base).stdout, vanilla.stdout);
}

#[test]
fn generate_composes_repeated_traits_like_the_library() {
    let ws = Ws::new();
    let (c, w, h) = ws.with_traits();
    let r = cli(&[
        "generate",
        "--model",
        &c,
        "--weights",
        &w,
        "--hub",
        &h,
        "--prompt",
        "Hi",
        "--max-new",
        "12",
        "--trait",
        "Warmth",
        "--gamma",
        "4",
        "--layers",
        "1",
        "--trait",
        "Calm",
        "--gamma",
        "-3",
        "--layers",
        "2",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);

    let m = load_model(Path::new(&c), Path::new(&w)).unwrap();
    let hub = Hub::new(&h);
    let warm = Arc::new(hub.load("Warmth", m.model_id()).unwrap());
    let calm = Arc::new(hub.load("Calm", m.model_id()).unwrap());
    let plan = compose(&[
        SteeringPlan::single(warm, [1], 4.0),
        SteeringPlan::single(calm, [2], -3.0),
    ])
    .unwrap();
    let expected = generate(&m, &plan, "Hi", 12).unwrap();
    assert_eq!(r.stdout, format!("{expected}\n"));
}

#[test]
fn generate_json_is_stable() {
    let ws = Ws::new();
    let (c, w, h) = ws.with_traits();
    let args = [
        "generate",
        "--model",
        &c,
        "--weights",
        &w,
        "--hub",
        &h,
        "--prompt",
        "Hi",
        "--max-new",
        "4",
        "--json",
        "--trait",
        "Warmth",
        "--gamma",
        "1.5",
    ];
    let a = cli(&args);
    assert_eq!(a.code, 0, "{}", a.stderr);
    assert_eq!(cli(&args).stdout, a.stdout);
    let v: serde_json::Value = serde_json::from_str(&a.stdout).unwrap();
    let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["continuation", "model_id", "plan", "prompt"]);
    assert_eq!(
        v["plan"],
        serde_json::json!([{"trait": "Warmth", "layers": [1, 2], "gamma": 1.5}])
    );
}

#[test]
fn plan_flag_errors() {
    let ws = Ws::new();
    let (c, w, h) = ws.with_traits();
    let r = cli(&[
        "generate",
        "--model",
        &c,
        "--weights",
        &w,
        "--hub",
        &h,
        "--prompt",
        "x",
        "--trait",
        "Warmth",
    ]);
    assert_eq!(r.code, 2);
    let r = cli(&[
        "generate",
        "--model",
        &c,
        "--weights",
        &w,
        "--hub",
        &h,
        "--prompt",
        "x",
        "--trait",
        "Nope",
        "--gamma",
        "1",
    ]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("Nope"), "{}", r.stderr);
    let r = cli(&[
        "generate",
        "--model",
        &c,
        "--weights",
        &w,
        "--prompt",
        "x",
        "--trait",
        "Warmth",
        "--gamma",
        "1",
    ]);
    assert_eq!(r.code, 2, "trait without hub");
}

#[test]
fn eval_lm_on_uniform_model_reports_vocab_perplexity() {
    let ws = Ws::new();
    let (c, w) = ws.save_model(&uniform_model(256), "u");
    let corpus = ws.write(
        "lm.jsonl",
        "{\"text\":\"hello world\"}\n{\"text\":\"ab\"}\n",
    );
    let out = ws.p("report");
    let r = cli(&[
        "eval",
        "--model",
        &c,
        "--weights",
        &w,
        "--task",
        "lm",
        "--corpus",
        &corpus,
        "--out",
        &out,
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{out}/lm.json")).unwrap()).unwrap();
    let ppl = report["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["name"] == "perplexity")
        .unwrap()["value"]
        .as_f64()
        .unwrap();
    assert!((ppl - 256.0).abs() < 1e-9);
    let printed: f64 = r
        .stdout
        .lines()
        .find_map(|l| l.strip_prefix("perplexity = "))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(printed, ppl);
    let csv = std::fs::read_to_string(format!("{out}/lm.csv")).unwrap();
    let row = csv
        .lines()
        .find_map(|l| l.strip_prefix("perplexity,"))
        .unwrap();
    assert_eq!(row.parse::<f64>().unwrap(), ppl);
    assert!(csv.contains("meta.plan,vanilla"));
}

#[test]
fn eval_mpi_vanilla_equals_gamma_zero() {
    let ws = Ws::new();
    let (c, w, h) = ws.with_traits();
    let corpus = ws.write(
        "mpi.csv",
        "text,trait,key\nlike parties,E,plus\nworry,N,minus\n",
    );
    let strip = |dir: &str| {
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(format!("{dir}/mpi.json")).unwrap())
                .unwrap();
        v["meta"]["created_unix"] = 0.into();
        v["meta"]["plan"] = serde_json::Value::Null;
        v
    };
    let (a, b) = (ws.p("a"), ws.p("b"));
    let r1 = cli(&[
        "eval",
        "--model",
        &c,
        "--weights",
        &w,
        "--task",
        "mpi",
        "--corpus",
        &corpus,
        "--out",
        &a,
        "--max-new",
        "4",
    ]);
    let r2 = cli(&[
        "eval",
        "--model",
        &c,
        "--weights",
        &w,
        "--hub",
        &h,
        "--task",
        "mpi",
        "--corpus",
        &corpus,
        "--out",
        &b,
        "--max-new",
        "4",
        "--trait",
        "Warmth",
        "--gamma",
        "0",
    ]);
    assert_eq!(r1.code, r2.code, "{} / {}", r1.stderr, r2.stderr);
    if r1.code == 0 {
        assert_eq!(strip(&a), strip(&b));
    } else {
        assert!(r1.stderr.contains("unparseable"));
    }
}

#[test]
fn eval_reason_applies_each_items_format() {
    let ws = Ws::new();
    let (c, w) = ws.save_model(&constant_output_model(b'7' as u32), "seven");
    let corpus = ws.write(
        "qa.jsonl",
        concat!(
            "{\"question\":\"3+4?\",\"answer\":\"7\",\"format\":\"number\"}\n",
            "{\"question\":\"Pick\",\"answer\":\"B\",\"format\":\"multiple_choice\"}\n",
            "{\"question\":\"Name\",\"answer\":\"7\",\"format\":\"free_format\"}\n",
        ),
    );
    let out = ws.p("r");
    let r = cli(&[
        "eval",
        "--model",
        &c,
        "--weights",
        &w,
        "--task",
        "reason",
        "--corpus",
        &corpus,
        "--out",
        &out,
        "--max-new",
        "1",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{out}/reason.json")).unwrap())
            .unwrap();
    let extracted: Vec<_> = v["records"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["extracted"].clone())
        .collect();
    assert_eq!(
        extracted,
        [
            serde_json::json!("7"),
            serde_json::Value::Null,
            serde_json::json!("7")
        ]
    );
    let bad = ws.write(
        "bad.jsonl",
        "{\"question\":\"q\",\"answer\":\"a\",\"format\":\"number\"}\n{\"question\":1}\n",
    );
    let r = cli(&[
        "eval",
        "--model",
        &c,
        "--weights",
        &w,
        "--task",
        "reason",
        "--corpus",
        &bad,
        "--out",
        &out,
    ]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("line 2"), "{}", r.stderr);
}

#[test]
fn sweep_logit_rises_with_gamma() {
    let ws = Ws::new();
    let (c, w, h) = ws.with_traits();
    let m = load_model(Path::new(&c), Path::new(&w)).unwrap();
    Hub::new(&h)
        .save(&unembedding_vector(&m, b'z' as u32, "Zeal"), false)
        .unwrap();
    let r = cli(&[
        "sweep",
        "--model",
        &c,
        "--weights",
        &w,
        "--hub",
        &h,
        "--task",
        "logit",
        "--gammas",
        "-1,0,1,2",
        "--trait",
        "Zeal",
        "--prompt",
        "Hello",
        "--token",
        "122",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let mut lines = r.stdout.lines();
    assert_eq!(lines.next(), Some("gamma,metric,status"));
    let rows: Vec<(f32, f64)> = lines
        .map(|l| {
            let f: Vec<_> = l.split(',').collect();
            assert_eq!(f[2], "ok");
            (f[0].parse().unwrap(), f[1].parse().unwrap())
        })
        .collect();
    assert_eq!(
        rows.iter().map(|r| r.0).collect::<Vec<_>>(),
        [-1.0, 0.0, 1.0, 2.0]
    );
    assert!(rows.windows(2).all(|p| p[1].1 > p[0].1), "{rows:?}");
}

#[test]
fn sweep_gamma_zero_row_equals_vanilla_eval() {
    let ws = Ws::new();
    let (c, w, h) = ws.with_traits();
    let corpus = ws.write("lm.jsonl", "{\"text\":\"some text here\"}\n");
    let out = ws.p("ev");
    let e = cli(&[
        "eval",
        "--model",
        &c,
        "--weights",
        &w,
        "--task",
        "lm",
        "--corpus",
        &corpus,
        "--out",
        &out,
    ]);
    assert_eq!(e.code, 0);
    let ppl = e
        .stdout
        .lines()
        .find_map(|l| l.strip_prefix("perplexity = "))
        .unwrap()
        .to_string();
    let s = cli(&[
        "sweep",
        "--model",
        &c,
        "--weights",
        &w,
        "--hub",
        &h,
        "--task",
        "lm",
        "--gammas",
        "0",
        "--trait",
        "Warmth",
        "--corpus",
        &corpus,
    ]);
    assert_eq!(s.code, 0, "{}", s.stderr);
    assert_eq!(s.stdout, format!("gamma,metric,status\n0,{ppl},ok\n"));
}

#[test]
fn hub_subcommands() {
    let ws = Ws::new();
    let (_, _, h) = ws.with_traits();
    let r = cli(&["hub", "list", "--hub", &h]);
    assert_eq!(r.code, 0);
    assert_eq!(r.stdout.lines().count(), 2);
    assert!(r.stdout.starts_with("Warmth\t"));
    let r = cli(&["hub", "verify", "--hub", &h]);
    assert_eq!(r.stdout, "2 entries ok\n");
    let r = cli(&["hub", "export", "--hub", &h]);
    let v: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(v["entries"].as_array().unwrap().len(), 2);
    let r = cli(&["hub", "list", "--hub", &h, "--json"]);
    let v: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(v[1]["trait"], "Calm");
}

#[test]
fn aca_with_fixture_backend() {
    let ws = Ws::new();
    let (c, w, h) = ws.with_traits();
    let fixture = ws.write(
        "fixture.json",
        r#"{"rules":[
            {"match":"single words","responses":["curious, open"]},
            {"match":"everyday behaviors","responses":["reads widely\ntries new food"]},
            {"match":"behavior: reads widely","responses":["You read widely?"]},
            {"match":"behavior: tries new food","responses":["You try new food?"]}
        ]}"#,
    );
    let data = ws.p("openness.jsonl");
    let r = cli(&[
        "aca",
        "--model",
        &c,
        "--weights",
        &w,
        "--hub",
        &h,
        "--trait",
        "Openness",
        "--fixture",
        &fixture,
        "--pair-count",
        "4",
        "--layers",
        "2",
        "--dataset-out",
        &data,
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("pairs: 4"));
    let pairs = std::fs::read_to_string(&data).unwrap();
    assert_eq!(pairs.lines().count(), 4);
    assert!(pairs.contains("You try new food? No"));
    assert_eq!(Hub::new(&h).list().unwrap().len(), 3);
    let r = cli(&[
        "aca",
        "--model",
        &c,
        "--weights",
        &w,
        "--hub",
        &h,
        "--trait",
        "X",
    ]);
    assert_eq!(r.code, 2, "no backend chosen");
}

#[test]
fn init_writes_a_loadable_model() {
    let ws = Ws::new();
    let (c, w) = (ws.p("a.cfg"), ws.p("a.clmw"));
    let r = cli(&[
        "init",
        "--model",
        &c,
        "--weights",
        &w,
        "--positional",
        "learned-absolute",
        "--n-layers",
        "2",
    ]);
    assert_eq!(r.code, 0);
    let m = load_model(&PathBuf::from(&c), &PathBuf::from(&w)).unwrap();
    assert_eq!(r.stdout, format!("model_id: {}\n", m.model_id().to_hex()));
    let r = cli(&[
        "init",
        "--model",
        &c,
        "--weights",
        &w,
        "--hidden-dim",
        "10",
        "--n-heads",
        "4",
    ]);
    assert_eq!(r.code, 2);
}
