use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use rrcomm::clip::VideoClip;
use rrcomm::dsl::{bundled_source, MessageId};
use serde_json::{json, Value};

fn rrcomm(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rrcomm"))
        .args(args)
        .env("RRCOMM_HOME", home)
        .output()
        .expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err_json(out: &Output, code: i32) -> Value {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

#[test]
fn render_writes_clip_and_sidecar() {
    let home = tempfile::tempdir().unwrap();
    let script = home.path().join("ascend.gest");
    fs::write(&script, bundled_source(MessageId::Ascend)).unwrap();
    let out = home.path().join("out/ascend.clip");
    let args = ["render", "--script", script.to_str().unwrap(), "--viewpoint", "YAW_90", "--out", out.to_str().unwrap(), "--seed", "4"];
    let v = ok_json(&rrcomm(home.path(), &args));
    // 3.18 s at 5 fps.
    assert_eq!(v["frames"], 16);
    let clip = VideoClip::load(&out).unwrap();
    assert_eq!((clip.t, clip.h, clip.w), (16, 40, 40));
    let sidecar: Value = serde_json::from_str(&fs::read_to_string(home.path().join("out/ascend.config.json")).unwrap()).unwrap();
    assert_eq!(sidecar["command"], "render");
    assert_eq!(sidecar["seed"], 4);
    assert_eq!(sidecar["args"]["viewpoint"], "YAW_90");

    let again = home.path().join("again.clip");
    let mut args2 = args;
    args2[6] = again.to_str().unwrap();
    ok_json(&rrcomm(home.path(), &args2));
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn render_error_exit_codes() {
    let home = tempfile::tempdir().unwrap();
    let out = home.path().join("x.clip");
    let missing = rrcomm(home.path(), &["render", "--script", "/no/such/file.gest", "--out", out.to_str().unwrap()]);
    assert_eq!(err_json(&missing, 3)["error"], "io");

    let bad = home.path().join("bad.gest");
    fs::write(&bad, "message ASCEND\nsegment dur=1.0 pitch=100\nsegment dur=1.0 surge=140\n").unwrap();
    let v = err_json(&rrcomm(home.path(), &["render", "--script", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]), 2);
    assert_eq!(v["line"], 3);
    assert!(v["message"].as_str().unwrap().contains("line 3"), "{v}");
    assert!(!out.exists());

    let v = err_json(&rrcomm(home.path(), &["render", "--script", bad.to_str().unwrap(), "--out", "x", "--env", "999"]), 2);
    assert_eq!(v["error"], "script");
}

#[test]
fn full_condition_set_gives_375_clips() {
    let home = tempfile::tempdir().unwrap();
    let v = ok_json(&rrcomm(home.path(), &["dataset", "gen", "--conditions", "25", "--seed", "1"]));
    assert_eq!(v["clips"], 375);
    assert!(home.path().join("data/gen.config.json").exists());
    let v = ok_json(&rrcomm(home.path(), &["dataset", "split"]));
    assert_eq!((v["train"].as_u64(), v["test"].as_u64()), (Some(274), Some(101)));
    let again = rrcomm(home.path(), &["dataset", "split", "--train-fraction", "1.5"]);
    err_json(&again, 2);
}

#[test]
fn train_eval_infer_pipeline() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    ok_json(&rrcomm(h, &["dataset", "gen", "--conditions", "1", "--instances", "2", "--seed", "3"]));
    ok_json(&rrcomm(h, &["dataset", "split", "--seed", "3"]));
    let config = h.join("small.json");
    fs::write(&config, json!({ "t": 8, "encoder_widths": [4, 8, 16], "pffn_hidden": 16 }).to_string()).unwrap();
    let v = ok_json(&rrcomm(h, &["train", "--config", config.to_str().unwrap(), "--epochs", "2", "--lr", "1e-3", "--seed", "9"]));
    assert!(v["top3"].as_f64().unwrap() >= v["top1"].as_f64().unwrap());
    let run = h.join("runs/model");
    for f in ["model.ckpt", "model.json", "history.jsonl", "train.config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("history.jsonl")).unwrap().lines().count(), 2);

    ok_json(&rrcomm(h, &["eval", "--reports", h.join("r1").to_str().unwrap()]));
    ok_json(&rrcomm(h, &["eval", "--reports", h.join("r2").to_str().unwrap()]));
    let strip = |dir: &str| {
        let mut v: Value = serde_json::from_str(&fs::read_to_string(h.join(dir).join("metrics.json")).unwrap()).unwrap();
        v["overall_time"] = json!(0);
        for c in v["classes"].as_array_mut().unwrap() {
            c["avg_time"] = json!(0);
        }
        for c in v["clips"].as_array_mut().unwrap() {
            c["inference_time"] = json!(0);
        }
        v
    };
    let r1 = strip("r1");
    assert_eq!(r1, strip("r2"));
    assert_eq!(fs::read(h.join("r1/confusion.csv")).unwrap(), fs::read(h.join("r2/confusion.csv")).unwrap());
    let total: u64 = r1["confusion"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, 15);

    let cmp = ok_json(&rrcomm(h, &["compare", h.join("r1/metrics.json").to_str().unwrap(), h.join("r2/metrics.json").to_str().unwrap()]));
    assert_eq!(cmp["accuracy"], 0.0);

    // Inference on a test clip agrees with the evaluation report.
    let first = &r1["clips"][0];
    let clip_path = h.join("data").join(first["clip"].as_str().unwrap());
    let v = ok_json(&rrcomm(h, &["infer", "--clip", clip_path.to_str().unwrap()]));
    assert_eq!(v["predicted"], first["predicted"]);
    let probs = v["probabilities"].as_object().unwrap();
    assert_eq!(probs.len(), 15);
    for (m, p) in MessageId::ALL.iter().zip(first["probabilities"].as_array().unwrap()) {
        assert_eq!(probs[m.name()].as_f64(), p.as_f64());
    }

    let broken = h.join("broken.json");
    fs::write(&broken, json!({ "mask_rate": 2.0 }).to_string()).unwrap();
    err_json(&rrcomm(h, &["train", "--config", broken.to_str().unwrap()]), 2);
    err_json(&rrcomm(h, &["eval", "--model", h.join("nowhere").to_str().unwrap()]), 3);
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_server(home: &Path) -> (Server, String) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_rrcomm"))
        .args(["study", "serve", "--addr", "127.0.0.1:0", "--seed", "17"])
        .env("RRCOMM_HOME", home)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let v: Value = serde_json::from_str(&line).unwrap_or_else(|_| panic!("unexpected server output `{line}`"));
    (Server(child), format!("http://{}", v["listening"].as_str().unwrap()))
}

#[test]
fn scripted_study_session() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    let missing = rrcomm(h, &["study", "serve", "--addr", "127.0.0.1:0"]);
    assert_eq!(err_json(&missing, 3)["error"], "study");
    ok_json(&rrcomm(h, &["study", "content", "--fps", "4", "--height", "24", "--width", "32"]));

    let (server, base) = start_server(h);
    let http = reqwest::blocking::Client::new();
    let session: Value = http.post(format!("{base}/api/session")).json(&json!({})).send().unwrap().json().unwrap();
    let sid = session["session_id"].as_str().unwrap().to_string();
    let conversations = session["conversations"].as_array().unwrap();
    assert_eq!(conversations.len(), 10);
    let text = serde_json::to_string(conversations).unwrap();
    for m in MessageId::ALL {
        assert!(!text.contains(m.name()), "label leaked into playlist");
    }
    let items: Vec<(u64, String)> = conversations
        .iter()
        .flat_map(|c| c.as_array().unwrap().iter())
        .map(|i| (i["item"].as_u64().unwrap(), i["clip_id"].as_str().unwrap().to_string()))
        .collect();

    let locked = http.get(format!("{base}/api/clip/{}", items[0].1)).send().unwrap();
    assert_eq!(locked.status(), 403);
    let early = http
        .post(format!("{base}/api/transcription"))
        .json(&json!({ "session_id": sid, "item": 0, "choice": "ASCEND", "confidence": 5 }))
        .send()
        .unwrap();
    assert_eq!(early.status(), 403);

    let mut taught = Vec::new();
    for t in session["teaching"].as_array().unwrap() {
        let clip: Value = http.get(format!("{base}/api/clip/{}", t["clip_id"].as_str().unwrap())).send().unwrap().json().unwrap();
        assert_eq!((clip["width"].as_u64(), clip["height"].as_u64()), (Some(32), Some(24)));
        taught.push((t["message"].as_str().unwrap().to_string(), clip["frames"].clone()));
    }
    // A participant who recognizes every clip by matching it against the
    // teaching clips, answering wrongly on every third item.
    let mut expected_correct = 0;
    let mut confidence_sum = 0;
    for (k, (item, clip_id)) in items.iter().enumerate() {
        let clip: Value = http.get(format!("{base}/api/clip/{clip_id}")).send().unwrap().json().unwrap();
        assert!(clip.get("message").is_none());
        let truth = &taught.iter().find(|(_, f)| *f == clip["frames"]).unwrap().0;
        let choice = if k % 3 == 2 {
            taught.iter().map(|t| &t.0).find(|m| *m != truth).unwrap().clone()
        } else {
            expected_correct += 1;
            truth.clone()
        };
        let confidence = (k % 11) as i64;
        confidence_sum += confidence;
        let r = http
            .post(format!("{base}/api/transcription"))
            .json(&json!({ "session_id": sid, "item": item, "choice": choice, "confidence": confidence }))
            .send()
            .unwrap();
        assert_eq!(r.status(), 201);
    }
    let dup = http
        .post(format!("{base}/api/transcription"))
        .json(&json!({ "session_id": sid, "item": items[0].0, "choice": "ASCEND", "confidence": 3 }))
        .send()
        .unwrap();
    assert_eq!(dup.status(), 409);
    let session2: Value = http.post(format!("{base}/api/session")).send().unwrap().json().unwrap();
    let bad = http
        .post(format!("{base}/api/transcription"))
        .json(&json!({ "session_id": session2["session_id"], "item": 0, "choice": "ASCEND", "confidence": 11 }))
        .send()
        .unwrap();
    assert_eq!(bad.status(), 422);

    let report: Value = http.get(format!("{base}/api/report")).send().unwrap().json().unwrap();
    let n = items.len() as f64;
    assert_eq!(report["participants"], 1);
    assert_eq!(report["overall_accuracy"].as_f64().unwrap(), expected_correct as f64 / n);
    assert_eq!(report["overall_confidence"].as_f64().unwrap(), confidence_sum as f64 / n);
    drop(server);

    // The log alone reproduces the report.
    let offline = ok_json(&rrcomm(h, &["study", "report"]));
    assert_eq!(offline, report);
}
