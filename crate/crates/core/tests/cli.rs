//! Command-line behaviour, exit codes and artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use magnify::io::{read_mgt, read_label_png};
use magnify::manifest::{config_digest, RunManifest};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_magnify"));
    c.env_remove("MAGNIFY_CONFIG");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn make_fixtures(dir: &Path, seed: u64, count: usize) -> Output {
    run(bin()
        .args(["fixtures", "--out"])
        .arg(dir)
        .args(["--seed", &seed.to_string(), "--count", &count.to_string(), "--size", "64", "--classes", "4"]))
}

fn oracle_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        format!(
            "seed = 5\n\n[image]\nheight = 64\nwidth = 64\n\n[plan]\nlevels = [[64, 64], [32, 32], [16, 16]]\n\n[refine]\nk = 64\n\n[backend]\nkind = \"oracle\"\nclasses = 4\nlabels = \"data/fixture_0000_label.png\"\nblur_sigma_at_coarsest = 2.0\nlabel_noise_rate = 0.02\n{extra}"
        ),
    )
    .unwrap();
    path
}

#[test]
fn fixtures_are_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(make_fixtures(&a, 4, 3).status.success());
    assert!(make_fixtures(&b, 4, 3).status.success());
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn run_writes_outputs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert!(make_fixtures(&dir.path().join("data"), 1, 1).status.success());
    let config = oracle_config(dir.path(), "");
    let out = dir.path().join("out");
    let stages = dir.path().join("stages");
    let o = run(bin()
        .args(["run", "--image"])
        .arg(dir.path().join("data/fixture_0000_image.png"))
        .arg("--out")
        .arg(&out)
        .arg("--save-stages")
        .arg(&stages)
        .env("MAGNIFY_CONFIG", &config));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let stdout = String::from_utf8(o.stdout).unwrap();
    let reports: Vec<serde_json::Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(reports.len(), 3);
    assert_eq!(reports[2]["patches"], 16);
    assert!(reports[2]["miou"].as_f64().is_some(), "labels from the config give per-stage mIoU");

    let final_map = read_mgt(&out.join("fixture_0000.mgt")).unwrap();
    assert_eq!(final_map.dims, vec![64, 64, 4]);
    assert_eq!(read_mgt(&stages.join("fixture_0000_stage3.mgt")).unwrap(), final_map);
    let pred = read_label_png(&out.join("fixture_0000_pred.png")).unwrap();
    assert!(pred.data().iter().all(|&l| l < 4));
    assert_eq!(fs::read_to_string(out.join("fixture_0000_reports.jsonl")).unwrap(), stdout);

    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(out.join("fixture_0000_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.config_digest, config_digest(&fs::read(&config).unwrap()));
    assert_eq!(manifest.seed, Some(5));
    assert_eq!(manifest.reports.len(), 3);
    assert!(manifest.outputs.iter().any(|p| p.ends_with("fixture_0000.mgt")));
}

#[test]
fn fast_flag_limits_patches() {
    let dir = tempfile::tempdir().unwrap();
    assert!(make_fixtures(&dir.path().join("data"), 1, 1).status.success());
    let config = oracle_config(dir.path(), "");
    let o = run(bin()
        .args(["run", "--fast", "--image"])
        .arg(dir.path().join("data/fixture_0000_image.png"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out")));
    assert!(o.status.success());
    let total: u64 = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["patches"].as_u64().unwrap())
        .sum();
    assert_eq!(total, 7);
}

#[test]
fn eval_scores_run_outputs_and_writes_cdf() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(make_fixtures(&data, 1, 1).status.success());
    let config = oracle_config(dir.path(), "");
    let out = dir.path().join("out");
    assert!(run(bin()
        .args(["run", "--image"])
        .arg(data.join("fixture_0000_image.png"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out))
    .status
    .success());
    let cdf = dir.path().join("cdf.csv");
    let o = run(bin()
        .args(["eval", "--classes", "4", "--pred"])
        .arg(&out)
        .arg("--gt")
        .arg(&data)
        .arg("--cdf")
        .arg(&cdf));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["images"], 1);
    let miou = report["miou"].as_f64().unwrap();
    assert!(miou > 0.0 && miou <= 1.0);
    let csv = fs::read_to_string(cdf).unwrap();
    assert!(csv.starts_with("edge,fraction\n"));
    assert_eq!(csv.lines().count(), 22);
}

#[test]
fn eval_of_empty_dataset_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(make_fixtures(&data, 1, 0).status.success());
    let o = run(bin().args(["eval", "--classes", "4", "--pred"]).arg(&data));
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nothing to evaluate"));
}

#[test]
fn tile_plan_text_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("plan.toml");
    fs::write(
        &config,
        "[image]\nheight = 1024\nwidth = 2048\n\n[plan]\nlevels = [[1024, 2048], [512, 1024], [256, 512], [128, 256]]\n",
    )
    .unwrap();
    let csv = dir.path().join("plan.csv");
    let o = run(bin().args(["tile-plan", "--config"]).arg(&config).arg("--csv").arg(&csv));
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("total patches: 85"), "{text}");
    let rows: Vec<String> = fs::read_to_string(csv).unwrap().lines().map(str::to_string).collect();
    assert_eq!(rows[0], "scale,index,x,y,w,h");
    assert_eq!(rows.len(), 86);
    assert_eq!(rows[1], "1,0,0,0,2048,1024");
    assert_eq!(rows[2], "2,0,0,0,1024,512");
    assert_eq!(rows[3], "2,1,1024,0,1024,512");
}

#[test]
fn ablate_emits_one_row_per_combination() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(make_fixtures(&data, 2, 2).status.success());
    let config = oracle_config(dir.path(), "");
    let csv = dir.path().join("ablate.csv");
    let o = run(bin()
        .args(["ablate", "--strategies", "product,linear:0.25", "--kernels", "1,3", "--ks", "16,64", "--config"])
        .arg(&config)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&csv));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<String> = fs::read_to_string(csv).unwrap().lines().map(str::to_string).collect();
    assert_eq!(rows[0], "strategy,alpha,kernel,k,miou");
    assert_eq!(rows.len(), 1 + 2 * 2 * 2);
    assert!(rows[1].starts_with("product,,1,16,"));
    assert!(rows.iter().any(|r| r.starts_with("linear,0.25,3,64,")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert!(make_fixtures(&dir.path().join("data"), 1, 1).status.success());
    let image = dir.path().join("data/fixture_0000_image.png");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[image]\nheight = 64\nwidth = 64\n[plan]\nlevels = [[64, 64], [32, 32]]\nproc = [8, 8]\n").unwrap();
    let o = run(bin().args(["run", "--image"]).arg(&image).arg("--config").arg(&bad));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("EndpointsMismatch"));

    let config = oracle_config(dir.path(), "");
    let o = run(bin().args(["run", "--image"]).arg(dir.path().join("missing.png")).arg("--config").arg(&config));
    assert_eq!(o.status.code(), Some(4));

    let o = run(bin().args(["run", "--image"]).arg(&image).arg("--config").arg(dir.path().join("none.toml")));
    assert_eq!(o.status.code(), Some(4));

    let external = dir.path().join("ext.toml");
    fs::write(
        &external,
        "[image]\nheight = 64\nwidth = 64\n\n[plan]\nlevels = [[64, 64], [32, 32]]\n\n[backend]\nkind = \"external\"\nclasses = 3\ncommand = [\"/nonexistent/model-server\"]\n",
    )
    .unwrap();
    let o = run(bin()
        .args(["run", "--image"])
        .arg(&image)
        .arg("--config")
        .arg(&external)
        .arg("--out")
        .arg(dir.path().join("out")));
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn external_backend_served_by_reference_server() {
    let dir = tempfile::tempdir().unwrap();
    assert!(make_fixtures(&dir.path().join("data"), 1, 1).status.success());
    let server = env!("CARGO_BIN_EXE_magnify");
    let mut results = Vec::new();
    for (workers, endpoints) in [(1, "shared"), (3, "per_worker")] {
        let config = dir.path().join(format!("ext_{workers}.toml"));
        fs::write(
            &config,
            format!(
                "workers = {workers}\n\n[image]\nheight = 64\nwidth = 64\n\n[plan]\nlevels = [[64, 64], [32, 32], [16, 16]]\n\n[refine]\nk = 32\ncombiner = \"external\"\n\n[backend]\nkind = \"external\"\nclasses = 3\ncommand = [{server:?}, \"serve\", \"--mode\", \"passthrough-o\"]\ntimeout_secs = 5\nendpoints = \"{endpoints}\"\n"
            ),
        )
        .unwrap();
        let out = dir.path().join(format!("out_{workers}"));
        let o = run(bin()
            .args(["run", "--image"])
            .arg(dir.path().join("data/fixture_0000_image.png"))
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&out));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        results.push(fs::read(out.join("fixture_0000.mgt")).unwrap());
    }
    assert_eq!(results[0], results[1]);
}
