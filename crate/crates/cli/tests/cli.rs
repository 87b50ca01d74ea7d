use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trajprior"))
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_lines(p: &Path) -> Vec<Value> {
    std::fs::read_to_string(p).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn state(t: usize, x: f64, y: f64) -> Value {
    json!({"t": t, "x": x, "y": y, "vx": 0.0, "vy": 0.0, "heading": 0.0, "valid": true})
}

fn two_neighbor_scene() -> String {
    let track = |id: &str, x: f64| json!({"agent_id": id, "class": "pedestrian", "states": [state(0, x, 0.0), state(1, x, 0.0)]});
    json!({
        "scene_id": "hand",
        "dt": 0.1,
        "t_obs": 1,
        "t_horizon": 1,
        "focal_ids": ["f"],
        "tracks": [track("f", 0.0), track("near", 1.0), track("far", -3.0)],
    })
    .to_string()
}

#[test]
fn gen_then_audit_constant_velocity_is_feasible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("cv.toml");
    std::fs::write(
        &spec,
        r#"
num_scenes = 4
t_obs = 10
t_horizon = 20
[[agents]]
class = "vehicle"
count = 3
profile = { kind = "constant_velocity", speed = [1.0, 20.0] }
[[agents]]
class = "pedestrian"
count = 3
profile = { kind = "constant_velocity", speed = [0.2, 2.0] }
"#,
    )
    .unwrap();
    let scenes = dir.path().join("s.jsonl");
    let report = dir.path().join("r.json");
    ok(&["gen", "--spec", s(&spec), "--seed", "3", "--out", s(&scenes)]);
    ok(&["audit", "--scenes", s(&scenes), "--out", s(&report)]);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let all = r["rows"].as_array().unwrap().last().unwrap().clone();
    assert_eq!(all["class"], "all");
    assert_eq!(all["any_steps_pct"], 0.0);
    assert_eq!(all["traj_count"], 24);
}

#[test]
fn l2_prior_matches_hand_values() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("s.jsonl");
    std::fs::write(&scenes, two_neighbor_scene() + "\n").unwrap();
    let out = dir.path().join("p.jsonl");
    ok(&["prior", "--scenes", s(&scenes), "--prior", "l2", "--k", "2", "--out", s(&out)]);
    let rec = &read_lines(&out)[0];
    let scores = rec["scores"].as_array().unwrap();
    assert_eq!(scores[0]["neighbor_id"], "near");
    assert!((scores[0]["score"].as_f64().unwrap() - 0.6425640382076704).abs() < 1e-12);
    assert!((scores[1]["score"].as_f64().unwrap() - 0.35743596179232956).abs() < 1e-12);
}

#[test]
fn gnl_with_zero_gate_blends_evenly() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("p.jsonl");
    let att = dir.path().join("a.jsonl");
    let out = dir.path().join("c.jsonl");
    std::fs::write(
        &scores,
        json!({"scene_id": "s", "focal_id": "f", "prior": "l2",
               "scores": [{"neighbor_id": "a", "score": 0.2}, {"neighbor_id": "b", "score": 0.8}]})
        .to_string()
            + "\n",
    )
    .unwrap();
    std::fs::write(&att, json!({"scene_id": "s", "focal_id": "f", "alpha_pred": [[0.6, 0.4]]}).to_string() + "\n").unwrap();
    ok(&["combine", "--scores", s(&scores), "--attention", s(&att), "--method", "gnl", "--out", s(&out)]);
    let rec = &read_lines(&out)[0];
    assert_eq!(rec["gate"], json!([0.5, 0.5]));
    let cmb = rec["alpha_cmb"][0].as_array().unwrap();
    assert!((cmb[0].as_f64().unwrap() - 0.4).abs() < 1e-12);
    assert!((cmb[1].as_f64().unwrap() - 0.6).abs() < 1e-12);
    assert!((rec["delta_alpha_pred"].as_f64().unwrap() - 0.4).abs() < 1e-12);
    assert!((rec["delta_alpha_cmb"].as_f64().unwrap() - 0.2).abs() < 1e-12);

    // Explicit zero weights for a layer without embeddings behave the same.
    let gate = dir.path().join("g.json");
    std::fs::write(&gate, json!({"rows": 4, "cols": 2, "w": vec![0.0; 8], "b": [0.0, 0.0]}).to_string()).unwrap();
    let out2 = dir.path().join("c2.jsonl");
    ok(&["combine", "--scores", s(&scores), "--attention", s(&att), "--method", "gnl", "--gate-weights", s(&gate), "--out", s(&out2)]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&out2).unwrap());
}

#[test]
fn gen_prior_combine_and_gen_reproduce_audit_compose() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&["gen", "--spec", s(&data("synthetic.toml")), "--seed", "5", "--out", s(&p("s.jsonl"))]);
    ok(&["prior", "--scenes", s(&p("s.jsonl")), "--prior", "dgsfm", "--config", s(&data("config.toml")), "--out", s(&p("p.jsonl"))]);
    // Feed the prior file back as attention: every line already mirrors the format.
    let lines: Vec<String> = read_lines(&p("p.jsonl"))
        .into_iter()
        .map(|mut v| {
            let n = v["scores"].as_array().unwrap().len();
            v["alpha_pred"] = json!([vec![1.0 / n as f64; n]]);
            v.to_string()
        })
        .collect();
    std::fs::write(p("a.jsonl"), lines.join("\n") + "\n").unwrap();
    ok(&["combine", "--scores", s(&p("p.jsonl")), "--attention", s(&p("a.jsonl")), "--method", "mnr", "--out", s(&p("c.jsonl"))]);
    assert_eq!(read_lines(&p("c.jsonl")).len(), 40);

    ok(&[
        "reproduce", "--scenes", s(&p("s.jsonl")), "--model-map", s(&data("models.toml")), "--limits", s(&data("limits.toml")),
        "--all-agents", "--trajectories", s(&p("t.jsonl")), "--out", s(&p("r.csv")),
    ]);
    ok(&["audit", "--trajectories", s(&p("t.jsonl")), "--out", s(&p("a.csv"))]);
    let csv = std::fs::read_to_string(p("a.csv")).unwrap();
    let mut rows = csv.lines();
    let header: Vec<&str> = rows.next().unwrap().split(',').collect();
    let any = header.iter().position(|h| *h == "any_steps_pct").unwrap();
    for row in rows {
        assert_eq!(row.split(',').nth(any).unwrap(), "0.0", "{row}");
    }
    assert!(!csv.contains('\r'));
}

#[test]
fn thread_count_does_not_change_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&["gen", "--spec", s(&data("synthetic.toml")), "--seed", "9", "--out", s(&p("s.jsonl"))]);
    for t in ["1", "4"] {
        ok(&["--threads", t, "prior", "--scenes", s(&p("s.jsonl")), "--prior", "skgacn", "--out", s(&p(&format!("p{t}.jsonl")))]);
        ok(&["--threads", t, "reproduce", "--scenes", s(&p("s.jsonl")), "--all-agents", "--out", s(&p(&format!("r{t}.json")))]);
        ok(&["--threads", t, "audit", "--scenes", s(&p("s.jsonl")), "--out", s(&p(&format!("a{t}.csv")))]);
    }
    for f in ["p{}.jsonl", "r{}.json", "a{}.csv"] {
        let one = std::fs::read(p(&f.replace("{}", "1"))).unwrap();
        let four = std::fs::read(p(&f.replace("{}", "4"))).unwrap();
        assert_eq!(one, four, "{f}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = dir.path().join("o.json");
    assert_eq!(run(&["audit", "--scenes", s(&missing), "--out", s(&out)]).status.code(), Some(1));

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, two_neighbor_scene() + "\n{not json}\n").unwrap();
    let r = run(&["audit", "--scenes", s(&bad), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 2"), "{}", String::from_utf8_lossy(&r.stderr));

    assert_eq!(run(&["audit", "--scenes", s(&bad), "--bogus", "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(run(&["prior", "--scenes", s(&bad), "--prior", "nope", "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn every_subcommand_documents_its_flags() {
    for cmd in ["gen", "prior", "combine", "rollout", "reproduce", "audit", "metrics"] {
        let out = run(&[cmd, "--help"]);
        assert!(out.status.success());
        let text = String::from_utf8_lossy(&out.stdout);
        for line in text.lines().filter(|l| l.trim_start().starts_with("--")) {
            let words: Vec<&str> = line.split_whitespace().collect();
            let documented = words.iter().skip(1).any(|w| !w.starts_with('<'));
            assert!(documented, "{cmd}: undocumented flag line {line:?}");
        }
    }
}

#[test]
fn rollout_then_audit() {
    let dir = tempfile::tempdir().unwrap();
    let ctl = dir.path().join("c.jsonl");
    let mut lines = Vec::new();
    for (i, (class, model)) in [("vehicle", "unicycle"), ("pedestrian", "double_integrator"), ("pedestrian", "single_integrator")]
        .iter()
        .enumerate()
    {
        let raw: Vec<[f64; 2]> = (0..40).map(|t| [((t * 7 + i) as f64).sin() * 3.0, ((t * 3) as f64).cos() * 3.0]).collect();
        lines.push(
            json!({"scene_id": "s", "agent_id": format!("a{i}"), "class": class, "model": model, "dt": 0.1,
                   "initial": {"x": 0.0, "y": 0.0, "theta": 0.0, "vx": 1.0, "vy": 0.0}, "raw": raw})
            .to_string(),
        );
    }
    std::fs::write(&ctl, lines.join("\n") + "\n").unwrap();
    let traj = dir.path().join("t.jsonl");
    let report = dir.path().join("r.json");
    ok(&["rollout", "--controls", s(&ctl), "--out", s(&traj)]);
    let recs = read_lines(&traj);
    assert_eq!(recs.len(), 3);
    assert_eq!(recs[0]["states"].as_array().unwrap().len(), 40);
    ok(&["audit", "--trajectories", s(&traj), "--out", s(&report)]);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let all = r["rows"].as_array().unwrap().last().unwrap().clone();
    assert_eq!(all["infeasible_any_steps"], 0);
    assert_eq!(all["traj_count"], 3);
}

#[test]
fn metrics_report_with_correlation() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&["gen", "--spec", s(&data("synthetic.toml")), "--seed", "2", "--out", s(&p("s.jsonl"))]);
    let scenes = read_lines(&p("s.jsonl"));
    let mut preds = Vec::new();
    let mut deltas = Vec::new();
    for (i, sc) in scenes.iter().enumerate() {
        let t_obs = sc["t_obs"].as_u64().unwrap() as usize;
        for f in sc["focal_ids"].as_array().unwrap() {
            let tr = sc["tracks"].as_array().unwrap().iter().find(|t| t["agent_id"] == *f).unwrap();
            let gt: Vec<[f64; 2]> = tr["states"].as_array().unwrap()[t_obs..]
                .iter()
                .map(|st| [st["x"].as_f64().unwrap(), st["y"].as_f64().unwrap()])
                .collect();
            // Error grows with the scene index, and so does Δα.
            let off = 0.1 * i as f64;
            let mode = |dx: f64| gt.iter().map(|q| [q[0] + dx, q[1]]).collect::<Vec<_>>();
            preds.push(
                json!({"scene_id": sc["scene_id"], "agent_id": f,
                       "modes": [{"trajectory": mode(off), "confidence": 0.7}, {"trajectory": mode(off + 1.0), "confidence": 0.3}]})
                .to_string(),
            );
            deltas.push(
                json!({"scene_id": sc["scene_id"], "focal_id": f, "method": "mnr", "neighbor_ids": [], "beta": [], "alpha_cmb": [],
                       "delta_alpha_pred": 0.01 * i as f64, "delta_alpha_cmb": 0.5, "kl_loss": 0.0})
                .to_string(),
            );
        }
    }
    std::fs::write(p("pred.jsonl"), preds.join("\n") + "\n").unwrap();
    std::fs::write(p("d.jsonl"), deltas.join("\n") + "\n").unwrap();
    ok(&["metrics", "--pred", s(&p("pred.jsonl")), "--scenes", s(&p("s.jsonl")), "--delta-alpha", s(&p("d.jsonl")), "--k", "2", "--out", s(&p("m.json"))]);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(p("m.json")).unwrap()).unwrap();
    let corr = &r["correlation"];
    assert!((corr["entries"][0]["rho"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!(corr["entries"][1]["rho"].is_null());
    assert_eq!(corr["stronger"], "predicted");
    let all = r["rows"].as_array().unwrap().last().unwrap();
    assert_eq!(all["map"], "unsupported");
    // Brier adds (1 - 0.7)² to the best-endpoint mode.
    assert!((all["brier_min_fde_k"].as_f64().unwrap() - all["min_fde_k"].as_f64().unwrap() - 0.09).abs() < 1e-9);
}
