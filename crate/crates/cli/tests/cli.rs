use std::path::{Path, PathBuf};

use pivad_cli::{format_scores, parse_scores, run, EFFECTIVE_CONFIG, MODEL_FILE, TEACHER_FILE};
use pivad_core::checkpoint::load_checkpoint;
use pivad_core::config::{ModalitySource, SiteSelection};
use pivad_core::data::{load_dataset, ScoreSeries, MANIFEST_FILE};
use pivad_core::model::{activation_table, ForwardOptions};
use pivad_core::Config;

/// A small but complete setup so every subcommand runs in a second or two.
const SMALL: &str = r#"
[model]
input_dim = 12
hidden_dim = 8
latent_dim = 4
heads = 2
modalities = [{ name = "P", dim = 6 }, { name = "D", dim = 4 }]

[train]
epochs_pretrain = 2
epochs_warmup = 1
epochs_main = 1

[data]
train_normal = 4
train_anomalous = 4
test_normal = 2
test_anomalous = 2
snippets = 16
rgb_dim = 12
latent_dim = 8
modalities = [{ name = "P", dim = 6, strength = 1.0 }, { name = "D", dim = 4, strength = 1.0 }]
"#;

struct Work(PathBuf);

impl Work {
    fn new(name: &str) -> Self {
        let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
        let _ = std::fs::remove_dir_all(&p);
        std::fs::create_dir_all(&p).unwrap();
        std::fs::write(p.join("c.toml"), SMALL).unwrap();
        Self(p)
    }

    fn p(&self, rel: &str) -> String {
        self.0.join(rel).to_string_lossy().into_owned()
    }

    fn run(&self, args: &[&str]) -> i32 {
        let mut argv = vec!["pivad".to_string()];
        argv.extend(args.iter().map(|a| a.to_string()));
        run(argv)
    }
}

impl Drop for Work {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

/// gen-data, pretrain-teacher and train into `w`.
fn pipeline(w: &Work) {
    let c = w.p("c.toml");
    assert_eq!(
        w.run(&[
            "gen-data",
            "--config",
            &c,
            "--seed",
            "7",
            "--out",
            &w.p("data")
        ]),
        0
    );
    assert_eq!(
        w.run(&[
            "pretrain-teacher",
            "--config",
            &c,
            "--seed",
            "7",
            "--data",
            &w.p("data/train"),
            "--out",
            &w.p("t")
        ]),
        0
    );
    assert_eq!(
        w.run(&[
            "train",
            "--config",
            &c,
            "--seed",
            "7",
            "--data",
            &w.p("data/train"),
            "--teacher",
            &w.p(&format!("t/{TEACHER_FILE}")),
            "--out",
            &w.p("s"),
        ]),
        0
    );
}

#[test]
fn help_and_usage_errors() {
    let w = Work::new("cli_help");
    assert_eq!(w.run(&["--help"]), 0);
    for sub in [
        "gen-data",
        "pretrain-teacher",
        "train",
        "eval",
        "infer",
        "grad-check",
        "summary",
    ] {
        assert_eq!(w.run(&[sub, "--help"]), 0, "{sub}");
    }
    assert_eq!(w.run(&["bogus"]), 1);
    assert_eq!(w.run(&["summary", "--frobnicate"]), 1);
    assert_eq!(w.run(&["summary", "--site", "middle"]), 1);
    assert_eq!(w.run(&["summary", "--tau=-1"]), 1);
    assert_eq!(w.run(&["gen-data"]), 1);
    assert_eq!(w.run(&["summary", "--config", &w.p("c.toml")]), 0);
    assert_eq!(w.run(&["summary", "--config", &w.p("absent.toml")]), 2);
}

#[test]
fn gen_data_is_deterministic_and_echoes_config() {
    let w = Work::new("cli_gen");
    let c = w.p("c.toml");
    for out in ["a", "b"] {
        assert_eq!(
            w.run(&[
                "gen-data",
                "--config",
                &c,
                "--seed",
                "7",
                "--out",
                &w.p(out)
            ]),
            0
        );
    }
    assert_eq!(tree(&w.0.join("a")), tree(&w.0.join("b")));
    let echoed = Config::load(&w.0.join("a").join(EFFECTIVE_CONFIG)).unwrap();
    assert_eq!(echoed.data.seed, 7);
    assert_eq!(echoed.train.seed, 7);
    assert_eq!(
        w.run(&[
            "gen-data",
            "--config",
            &c,
            "--seed",
            "8",
            "--out",
            &w.p("c")
        ]),
        0
    );
    assert_ne!(tree(&w.0.join("a")), tree(&w.0.join("c")));
}

#[test]
fn train_requires_a_teacher() {
    let w = Work::new("cli_no_teacher");
    let c = w.p("c.toml");
    assert_eq!(
        w.run(&["gen-data", "--config", &c, "--out", &w.p("data")]),
        0
    );
    let code = w.run(&[
        "train",
        "--config",
        &c,
        "--data",
        &w.p("data/train"),
        "--teacher",
        &w.p("t/teacher.pvck"),
        "--out",
        &w.p("s"),
    ]);
    assert_eq!(code, 2);
    assert_eq!(
        w.run(&[
            "pretrain-teacher",
            "--config",
            &c,
            "--data",
            &w.p("nowhere"),
            "--out",
            &w.p("t")
        ]),
        2
    );
}

fn read_scores(dir: &Path) -> Vec<ScoreSeries> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .iter()
        .map(|f| parse_scores(&std::fs::read_to_string(f).unwrap()).unwrap())
        .collect()
}

#[test]
fn infer_ignores_deleted_modalities_and_exports_activations() {
    let w = Work::new("cli_infer");
    pipeline(&w);
    let c = w.p("c.toml");
    let ck = w.p(&format!("s/{MODEL_FILE}"));
    for site in ["early", "both"] {
        let first = format!("i1_{site}");
        let args = |out: &str| {
            vec![
                "infer",
                "--config",
                &c,
                "--data",
                &w.p("data/test"),
                "--checkpoint",
                &ck,
                "--site",
                site,
            ]
            .into_iter()
            .map(String::from)
            .chain(["--out".into(), w.p(out), "--export-activations".into()])
            .collect::<Vec<_>>()
        };
        let argv: Vec<String> = std::iter::once("pivad".to_string())
            .chain(args(&first))
            .collect();
        assert_eq!(run(argv), 0);
        let before = read_scores(&w.0.join(&first).join("scores"));
        assert_eq!(before.len(), 4);
        if site == "both" {
            std::fs::remove_dir_all(w.0.join("data/test/modalities")).unwrap();
            let second = "i2_both";
            let argv: Vec<String> = std::iter::once("pivad".to_string())
                .chain(args(second))
                .collect();
            assert_eq!(run(argv), 0);
            assert_eq!(read_scores(&w.0.join(second).join("scores")), before);
        }
    }

    // two 16x2 tables per video that match a recomputation from the trace
    let cfg = Config::load(&w.0.join("c.toml")).unwrap();
    let (model, _) = load_checkpoint(Path::new(&ck), &cfg.model).unwrap();
    let videos = load_dataset(&w.0.join("data/test").join(MANIFEST_FILE), false).unwrap();
    let act = w.0.join("i1_both/activations");
    assert_eq!(std::fs::read_dir(&act).unwrap().count(), 2 * videos.len());
    for v in &videos {
        let trace = model
            .run(
                v,
                ForwardOptions::infer(ModalitySource::Pseudo, SiteSelection::Both),
            )
            .unwrap();
        for s in &trace.sites {
            let text = std::fs::read_to_string(act.join(format!(
                "{}.{}.tsv",
                v.video_id,
                s.kind.as_str()
            )))
            .unwrap();
            let mut lines = text.lines();
            assert_eq!(lines.next(), Some("P\tD"));
            let rows: Vec<Vec<f64>> = lines
                .map(|l| l.split('\t').map(|x| x.parse().unwrap()).collect())
                .collect();
            assert_eq!(rows.len(), 16);
            let names = ["P", "D"];
            let aligned: Vec<_> = names.iter().map(|n| s.aligned[*n].clone()).collect();
            let want = activation_table(&aligned);
            for (r, row) in rows.iter().enumerate() {
                assert_eq!(row.len(), 2);
                for (j, x) in row.iter().enumerate() {
                    assert!((x - want.get2(r, j)).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn eval_writes_a_report_for_students_and_teachers() {
    let w = Work::new("cli_eval");
    pipeline(&w);
    let c = w.p("c.toml");
    let data = w.p("data/test");
    let ck = w.p(&format!("s/{MODEL_FILE}"));
    let teacher = w.p(&format!("t/{TEACHER_FILE}"));
    assert_eq!(
        w.run(&[
            "eval",
            "--config",
            &c,
            "--data",
            &data,
            "--checkpoint",
            &ck,
            "--out",
            &w.p("e1")
        ]),
        0
    );
    assert_eq!(
        w.run(&[
            "eval",
            "--config",
            &c,
            "--data",
            &data,
            "--teacher",
            &teacher,
            "--out",
            &w.p("e2")
        ]),
        0
    );
    for d in ["e1", "e2"] {
        let text = std::fs::read_to_string(w.0.join(d).join("report.json")).unwrap();
        let r = pivad_core::metrics::EvalReport::from_json(&text).unwrap();
        assert_eq!(r.videos.len(), 4);
    }
    assert_eq!(
        w.run(&["eval", "--config", &c, "--data", &data, "--out", &w.p("e3")]),
        1
    );
    // a checkpoint from another architecture is a data error
    let wide = SMALL.replace("hidden_dim = 8", "hidden_dim = 16");
    std::fs::write(w.0.join("wide.toml"), wide).unwrap();
    assert_eq!(
        w.run(&[
            "eval",
            "--config",
            &w.p("wide.toml"),
            "--data",
            &data,
            "--checkpoint",
            &ck,
            "--out",
            &w.p("e4")
        ]),
        2
    );
}

#[test]
fn grad_check_passes() {
    let w = Work::new("cli_grad");
    assert_eq!(w.run(&["grad-check", "--seeds", "2"]), 0);
    assert_eq!(w.run(&["grad-check", "--seeds", "0"]), 1);
}

#[test]
fn score_files_round_trip() {
    let s = ScoreSeries {
        video_id: "v1".into(),
        scores: vec![0.1, 1.0 / 3.0, 1e-300],
    };
    let text = format_scores(&s);
    assert!(text.starts_with("PVL-1\tv1\t3\n"));
    assert_eq!(parse_scores(&text).unwrap(), s);
    assert!(parse_scores("PVL-1\tv1\t2\n0.5\n").is_err());
    assert!(parse_scores("XYZ\tv1\t1\n0.5\n").is_err());
}
