use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use semtree_cli::Manifest;

fn semtree(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semtree"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = semtree(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const CONFIG: &str = r#"
seed = 7
output_dir = "out"
[synthetic]
preset = "hierarchy"
groups = 2
blobs_per_group = 2
n_per_blob = 50
sigma = 0.05
[projection]
k = 2
[tree]
epsilon0 = 0.05
delta_epsilon = 0.01
minpts = 5
"#;

#[test]
fn run_writes_every_artifact_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    ok(dir.path(), &["run", "--config", "run.toml"]);
    let out = dir.path().join("out");
    let manifest: Manifest = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let names: Vec<&str> = manifest.artifacts.iter().map(|a| a.name.as_str()).collect();
    assert_eq!(names, ["corpus", "projected", "tree", "scores", "newick", "colors"]);
    for file in manifest.artifacts.iter().flat_map(|a| &a.files) {
        let bytes = fs::read(out.join(&file.path)).unwrap();
        assert_eq!(bytes.len() as u64, file.bytes, "{}", file.path);
        assert_eq!(semtree_cli::pipeline::sha256_hex(&bytes), file.sha256);
    }
    assert_eq!(manifest.documents, 200);
    assert_eq!(manifest.layers.last().unwrap().clusters, 1);
    assert_eq!(manifest.seed, 7);

    // overrides land in the recorded config
    ok(dir.path(), &["run", "--config", "run.toml", "--seed", "8", "--output-dir", "other"]);
    let other: Manifest = serde_json::from_slice(&fs::read(dir.path().join("other/manifest.json")).unwrap()).unwrap();
    assert_eq!(other.seed, 8);
    assert_ne!(other.artifact("corpus").unwrap().files[0].sha256, manifest.artifact("corpus").unwrap().files[0].sha256);
}

#[test]
fn stage_commands_reproduce_the_composite_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.toml"), CONFIG).unwrap();
    ok(d, &["run", "--config", "run.toml"]);

    ok(d, &["synth", "--preset", "hierarchy", "--seed", "7", "--out", "c.semt"]);
    assert_eq!(fs::read(d.join("c.semt")).unwrap(), fs::read(d.join("out/corpus.semt")).unwrap());
    ok(d, &["pca", "--corpus", "c.semt", "--k", "2", "--out", "p.semt"]);
    ok(d, &["tree", "--input", "p.semt", "--eps0", "0.05", "--delta", "0.01", "--minpts", "5", "--out", "t.txt", "--report", "passes.tsv"]);
    assert_eq!(fs::read(d.join("t.txt")).unwrap(), fs::read(d.join("out/tree.txt")).unwrap());
    let report = fs::read_to_string(d.join("passes.tsv")).unwrap();
    assert!(report.starts_with("pass\tepsilon\tclusters\tnoise\tstored\tqueries\tdistance_evals\tnode_visits\n"));

    ok(d, &["score", "--tree", "t.txt", "--corpus", "c.semt", "--extra", "coarse=c.semt.coarse.labels", "--out", "s.tsv"]);
    assert_eq!(fs::read(d.join("s.tsv")).unwrap(), fs::read(d.join("out/scores.tsv")).unwrap());
    ok(d, &["newick", "--tree", "t.txt", "--corpus", "c.semt", "--out", "t.nwk"]);
    assert_eq!(fs::read(d.join("t.nwk")).unwrap(), fs::read(d.join("out/tree.nwk")).unwrap());
    ok(d, &["color", "--tree", "t.txt", "--corpus", "c.semt", "--target", "g0b0", "--out", "g0b0.tsv"]);
    let colors = fs::read_to_string(d.join("g0b0.tsv")).unwrap();
    assert!(colors.starts_with("#node_label\tcolor\n"));
    assert_eq!(colors, fs::read_to_string(d.join("out/colors/g0b0.tsv")).unwrap());
}

#[test]
fn annotate_with_the_mock_client_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--preset", "corners", "--n-per-blob", "30", "--out", "c.semt"]);
    ok(d, &["tree", "--input", "c.semt", "--eps0", "0.05", "--delta", "0.05", "--minpts", "4", "--out", "t.txt"]);
    fs::write(d.join("taxonomy.txt"), "Sciences\nHumanities\n").unwrap();
    let args = [
        "annotate", "--tree", "t.txt", "--corpus", "c.semt", "--ledger", "ledger.tsv", "--seed", "3",
        "--taxonomy", "taxonomy.txt", "--categories-out", "cats.tsv",
    ];
    ok(d, &args);
    let first = fs::read_to_string(d.join("ledger.tsv")).unwrap();
    assert!(!first.is_empty());
    for line in first.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 3, "{line}");
        assert!(fields[0].starts_with('L'));
    }
    let cats = fs::read_to_string(d.join("cats.tsv")).unwrap();
    assert!(cats.lines().skip(1).all(|l| l.ends_with("Sciences") || l.ends_with("Humanities")));
    ok(d, &args);
    assert_eq!(fs::read_to_string(d.join("ledger.tsv")).unwrap(), first);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(semtree(d, &["--help"]).status.code(), Some(0));
    assert_eq!(semtree(d, &[]).status.code(), Some(1));
    assert_eq!(semtree(d, &["tree", "--input", "x"]).status.code(), Some(1));
    // bad parameters are usage errors
    ok(d, &["synth", "--out", "c.semt"]);
    assert_eq!(semtree(d, &["tree", "--input", "c.semt", "--eps0", "-1", "--delta", "0.1", "--minpts", "3", "--out", "t.txt"]).status.code(), Some(1));
    // unreadable or malformed data
    assert_eq!(semtree(d, &["pca", "--corpus", "missing.semt", "--k", "2", "--out", "p.semt"]).status.code(), Some(2));
    fs::write(d.join("junk.semt"), b"SEMTxx").unwrap();
    assert_eq!(semtree(d, &["pca", "--corpus", "junk.semt", "--k", "2", "--out", "p.semt"]).status.code(), Some(2));
    // a stage that cannot finish
    let out = semtree(d, &["tree", "--input", "c.semt", "--eps0", "0.0001", "--delta", "0.0001", "--minpts", "500", "--max-iterations", "3", "--out", "t.txt"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(d.join("bad.toml"), "seed = 1\nunknown = 2\n[tree]\nepsilon0 = 0.1\ndelta_epsilon = 0.1\nminpts = 2\n").unwrap();
    assert_eq!(semtree(d, &["run", "--config", "bad.toml"]).status.code(), Some(1));
}

#[test]
fn text_matrices_are_ingested() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("m.txt"), "0 0\n0.1 0\n5 5\n5.1 5\n").unwrap();
    fs::write(d.join("meta.tsv"), "a\tx\tfirst\nb\tx\tsecond\nc\ty\tthird\nd\ty\tfourth\n").unwrap();
    ok(d, &["ingest", "--embeddings", "m.txt", "--text-matrix", "--meta", "meta.tsv", "--out", "c.semt"]);
    let corpus = semtree::corpus::load_corpus_auto(&d.join("c.semt")).unwrap();
    assert_eq!(corpus.len(), 4);
    assert_eq!(corpus.labels().unwrap(), ["x", "x", "y", "y"]);
    fs::write(d.join("ragged.txt"), "0 0\n1\n").unwrap();
    assert_eq!(semtree(d, &["ingest", "--embeddings", "ragged.txt", "--text-matrix", "--out", "r.semt"]).status.code(), Some(2));
}

#[test]
fn sweeps_summarize_each_setting() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "c.semt"]);
    let out = ok(d, &["sweep", "--input", "c.semt", "--corpus", "c.semt", "--eps0", "0.02,0.05", "--delta", "0.05", "--minpts", "3,5"]);
    let table = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("epsilon0\tdelta_epsilon\tminpts"));
    for row in &lines[1..] {
        let best: f64 = row.split('\t').nth(7).unwrap().parse().unwrap();
        assert!((0.99..=1.0).contains(&best), "{row}");
    }
}

#[test]
fn bundled_recipes_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("recipes");
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let config = semtree_cli::PipelineConfig::from_toml(&fs::read_to_string(&path).unwrap()).unwrap();
        config.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
