use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};
use std::thread;

use serde_json::{json, Value};
use soilmark_cli::pipeline::{Manifest, LOCK_FILE, MANIFEST_FILE};

fn soilmark(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soilmark"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SOILMARK_STAC_ENDPOINT")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stdout: {}\nstderr: {}", stdout(o), stderr(o));
}

fn synth(dir: &Path, size: usize) {
    assert_ok(&soilmark(&["synth", "--output", "scenes", "--size", &size.to_string(), "--seed", "7"], dir));
}

/// Relative path → contents for every file under `root`, manifest excluded.
fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if path.file_name().unwrap() != MANIFEST_FILE {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

#[test]
fn synth_output_is_accepted_by_ingest() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 32);
    let o = soilmark(&["ingest", "--input", "scenes", "--json", "catalog.json"], dir.path());
    assert_ok(&o);
    assert!(stdout(&o).ends_with("12 scenes\n"));
    let records: Vec<Value> = serde_json::from_slice(&std::fs::read(dir.path().join("catalog.json")).unwrap()).unwrap();
    assert_eq!(records.len(), 12);
}

#[test]
fn only_requested_products_are_written() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 48);
    assert_ok(&soilmark(&["pipeline", "--input", "scenes", "--output", "out", "--products", "bsi"], dir.path()));
    let files: Vec<String> = tree(&dir.path().join("out")).into_keys().collect();
    let mut expected = Vec::new();
    for window in ["jan-mar", "oct-dec"] {
        for ext in ["csv", "json", "png", "tif"] {
            expected.push(format!("{window}/bsi/bsi.{ext}"));
        }
    }
    assert_eq!(files, expected);
    let m = manifest(&dir.path().join("out"));
    assert_eq!(m.scenes.len(), 12);
    assert_eq!(m.buckets.len(), 2);
    assert!(m.buckets.iter().all(|b| b.status == "ok" && b.scene_ids.len() == 6 && b.files.len() == 4));
    assert!(!dir.path().join("out").join(LOCK_FILE).exists());
}

#[test]
fn reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 48);
    for out in ["a", "b"] {
        assert_ok(&soilmark(&["pipeline", "--input", "scenes", "--output", out], dir.path()));
    }
    let (a, b) = (tree(&dir.path().join("a")), tree(&dir.path().join("b")));
    assert_eq!(a.len(), 2 * (7 * 4 + 8));
    assert_eq!(a, b);
    let (ma, mb) = (manifest(&dir.path().join("a")), manifest(&dir.path().join("b")));
    assert_eq!(ma.config_hash, mb.config_hash);
    assert_eq!(ma.buckets, mb.buckets);
}

#[test]
fn staged_run_matches_single_shot() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 48);
    assert_ok(&soilmark(&["pipeline", "--input", "scenes", "--output", "whole", "--products", "pca,bsi,hsv"], dir.path()));
    assert_ok(&soilmark(&["composite", "--input", "scenes", "--output", "staged"], dir.path()));
    assert_ok(&soilmark(&["decompose", "pca", "hsv", "--output", "staged"], dir.path()));
    assert_ok(&soilmark(&["index", "bsi", "--output", "staged"], dir.path()));

    let whole = tree(&dir.path().join("whole"));
    let staged = tree(&dir.path().join("staged"));
    assert!(!whole.is_empty());
    for (path, bytes) in &whole {
        assert_eq!(staged.get(path), Some(bytes), "{path} differs");
    }
    let extra: Vec<&String> = staged.keys().filter(|k| !whole.contains_key(*k)).collect();
    assert!(extra.iter().all(|k| k.contains("/composite/")), "{extra:?}");
}

#[test]
fn stage_commands_reject_the_other_kind() {
    let dir = tempfile::tempdir().unwrap();
    let o = soilmark(&["index", "pca", "--output", "out"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("products"));
}

#[test]
fn exit_codes_follow_the_scheme() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 24);

    let o = soilmark(&["pipeline", "--input", "scenes", "--output", "out", "--stretch", "98,2"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("stretch.upper_pct"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let o = soilmark(&["pipeline", "--input", "missing", "--output", "out"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = soilmark(&["pipeline", "--input", "scenes", "--output", "out", "--years", "2030-2031"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(manifest(&dir.path().join("out")).buckets.iter().all(|b| b.status == "empty"));

    let o = soilmark(&["pipeline", "--products", "evi"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--products"));

    let o = soilmark(&["pipeline", "--no-such-flag"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    assert_eq!(soilmark(&["--help"], dir.path()).status.code(), Some(0));

    std::fs::create_dir_all(dir.path().join("locked")).unwrap();
    std::fs::write(dir.path().join("locked").join(LOCK_FILE), "1").unwrap();
    let o = soilmark(&["pipeline", "--input", "scenes", "--output", "locked"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(LOCK_FILE));

    let o = soilmark(&["ingest", "--input", "out"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn config_file_drives_the_run_with_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let project = dir.path().join("project");
    std::fs::create_dir_all(&project).unwrap();
    synth(&project, 24);
    let config = json!({
        "input": {"directory": "scenes"},
        "products": ["ndvi", "tct"],
        "composite_mode": "both",
        "first_year": 2019,
        "last_year": 2020,
        "output_dir": "products"
    });
    std::fs::write(project.join("run.json"), serde_json::to_vec_pretty(&config).unwrap()).unwrap();
    // run from elsewhere: paths resolve against the config file
    let o = soilmark(&["pipeline", "--config", "project/run.json"], dir.path());
    assert_ok(&o);
    let files = tree(&project.join("products"));
    for bucket in ["jan-mar", "jan-mar_2019", "jan-mar_2020", "oct-dec", "oct-dec_2019", "oct-dec_2020"] {
        assert!(files.contains_key(&format!("{bucket}/ndvi/ndvi.tif")), "{bucket}");
        assert!(files.contains_key(&format!("{bucket}/tct/tct.png")), "{bucket}");
    }
    let m = manifest(&project.join("products"));
    let pooled = m.buckets.iter().find(|b| b.directory == "jan-mar").unwrap();
    assert_eq!(pooled.scene_ids.len(), 2);

    std::fs::write(project.join("bad.json"), r#"{"products": ["bsi"], "stretch": {"lower_pct": 50, "upper_pct": 40}}"#).unwrap();
    let o = soilmark(&["pipeline", "--config", "project/bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stretch.upper_pct"));
}

#[test]
fn render_restretches_a_product() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 24);
    assert_ok(&soilmark(&["pipeline", "--input", "scenes", "--output", "out", "--products", "tct"], dir.path()));
    let o = soilmark(
        &["render", "--input", "out/jan-mar/tct/tct.tif", "--output", "tct.png", "--bands", "3,2,1", "--stretch", "5,95"],
        dir.path(),
    );
    assert_ok(&o);
    let png = std::fs::read(dir.path().join("tct.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");
    let meta: Value = serde_json::from_slice(&std::fs::read(dir.path().join("tct.json")).unwrap()).unwrap();
    assert_eq!(meta["bands"], json!(["TCTw", "TCTg", "TCTb"]));
    assert_eq!(meta["channels"][0]["lower_pct"], json!(5.0));

    let o = soilmark(&["render", "--input", "out/jan-mar/tct/tct.tif", "--output", "x.png", "--bands", "4"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

/// Minimal STAC API: three items for January–March 2018 split over two pages.
fn mock_stac() -> String {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let base = format!("http://{}", server.server_addr().to_ip().unwrap());
    let own = base.clone();
    thread::spawn(move || {
        let item = |id: &str, when: &str| {
            json!({
                "id": id,
                "bbox": [11.0, 44.9, 11.2, 45.1],
                "properties": {"datetime": when, "eo:cloud_cover": 5.0},
                "assets": {"red": {"href": format!("{own}/{id}/B04.tif")}}
            })
        };
        for mut rq in server.incoming_requests() {
            let mut body = String::new();
            rq.as_reader().read_to_string(&mut body).unwrap();
            let body: Value = serde_json::from_str(&body).unwrap_or(Value::Null);
            let page = if rq.url() == "/search?page=2" {
                json!({"features": [item("S2B_20180305", "2018-03-05T10:20:00Z")]})
            } else if body["datetime"].as_str().is_some_and(|d| d.starts_with("2018-01-01")) {
                json!({
                    "features": [item("S2A_20180210", "2018-02-10T10:20:00Z"), item("S2A_20180115", "2018-01-15T10:20:00Z")],
                    "links": [{"rel": "next", "href": format!("{own}/search?page=2"), "method": "GET"}]
                })
            } else {
                json!({"features": []})
            };
            let _ = rq.respond(tiny_http::Response::from_data(serde_json::to_vec(&page).unwrap()));
        }
    });
    base
}

#[test]
fn search_lists_scenes_from_a_stac_api() {
    let dir = tempfile::tempdir().unwrap();
    let base = mock_stac();
    let o = soilmark(
        &["search", "--endpoint", &base, "--roi", "11.0,44.9,11.2,45.1,4326", "--json", "found.json"],
        dir.path(),
    );
    assert_ok(&o);
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("S2A_20180115\t2018-01-15T10:20:00Z\t5.00\tB4"));
    assert!(lines[1].starts_with("S2A_20180210"));
    assert!(lines[2].starts_with("S2B_20180305"));
    assert_eq!(lines[3], "3 scenes");
    let found: Vec<Value> = serde_json::from_slice(&std::fs::read(dir.path().join("found.json")).unwrap()).unwrap();
    assert_eq!(found.len(), 3);

    // the endpoint may come from the environment instead
    let o = Command::new(env!("CARGO_BIN_EXE_soilmark"))
        .args(["search", "--roi", "11.0,44.9,11.2,45.1,4326", "--years", "2018"])
        .env("SOILMARK_STAC_ENDPOINT", &base)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_ok(&o);
    assert!(stdout(&o).ends_with("3 scenes\n"));

    let o = soilmark(&["search", "--roi", "11.0,44.9,11.2,45.1,4326"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = soilmark(&["search", "--endpoint", &base, "--roi", "600000,4990000,610000,5000000,32632"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unreachable_stac_api_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let o = soilmark(
        &["search", "--endpoint", &format!("http://{addr}"), "--roi", "11.0,44.9,11.2,45.1,4326"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

