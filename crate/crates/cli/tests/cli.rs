use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

use dial_core::dial::{BootstrapInput, Correction, DialConfig, DialProject, SlideEntry, SlideRole};
use dial_core::mutation::cohort::Cohort;
use dial_core::mutation::CancerPatchSet;
use dial_core::patch::{ManifestEntry, PatchManifest, Split};
use dial_core::raster::{GrayImage, RgbImage};
use dial_core::segnet::{
    train_on_samples, ClassWeights, DmmnConfig, LabelMap, Lineage, SegSample, SegTrainConfig, SegmentationMask, Start,
    CARCINOMA, STROMA, UNLABELED,
};
use dial_core::slide::{write_pyramid, SyntheticSlide};

fn dial(args: &[&str], config: Option<&str>, dir: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dial"));
    cmd.args(args).env("RUST_LOG", "warn");
    if let Some(text) = config {
        let path = dir.join(format!("config-{}.toml", rand::random::<u64>()));
        std::fs::write(&path, text).unwrap();
        cmd.arg("--config").arg(path);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn json(o: &Output) -> Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn quoted(p: &Path) -> String {
    serde_json::to_string(&p.display().to_string()).unwrap()
}

const COHORT: &str = "seed = 8\n[cohort]\nslides = 10\nbrca_fraction = 0.5\n\
                      [cohort.slide]\nwidth = 3072\nheight = 3072\nblobs = [3, 1, 1, 1, 1, 0]\nblob_radius = [600.0, 900.0]\n";

/// One synthetic cohort with 5× cancer patches, shared by the tests.
fn cohort() -> &'static (TempDir, PathBuf, PathBuf) {
    static COHORT_DIR: OnceLock<(TempDir, PathBuf, PathBuf)> = OnceLock::new();
    COHORT_DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("cohort");
        json(&dial(&["synth-cohort", "--json", "--out", root.to_str().unwrap()], Some(COHORT), dir.path()));
        let patches = dir.path().join("patches");
        let cfg = format!("magnifications = [\"5x\"]\n[data]\ncohort = {}\n", quoted(&root));
        json(&dial(&["brca-extract", "--json", "--out", patches.to_str().unwrap()], Some(&cfg), dir.path()));
        (dir, root, patches)
    })
}

#[test]
fn unknown_config_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = dial(&["synth-cohort", "--out", out.to_str().unwrap()], Some("seed = 1\ncolour = 3\n[cohort]\nslides = 3\n"), dir.path());
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
    assert!(!out.exists());
}

#[test]
fn invalid_invocations_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    // No --out.
    assert_eq!(code(&dial(&["synth-cohort"], Some("[cohort]\nslides = 3\n"), dir.path())), 2);
    // Unsupported schema.
    let o = dial(&["synth-cohort", "--out", out], Some("schema_version = 2\n[cohort]\nslides = 3\n"), dir.path());
    assert_eq!(code(&o), 2);
    // A spec the generator rejects.
    let o = dial(&["synth-cohort", "--out", out], Some("[cohort]\nslides = 3\n[cohort.slide]\nwidth = 100\nheight = 100\nblobs = [1, 0, 0, 0, 0, 0]\n"), dir.path());
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    // Malformed TOML.
    assert_eq!(code(&dial(&["seg-eval"], Some("predictions = [\n"), dir.path())), 2);
    assert_eq!(code(&dial(&["dial-replay"], None, dir.path())), 2);
}

#[test]
fn existing_output_is_left_alone() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    std::fs::create_dir(&out).unwrap();
    std::fs::write(out.join("keep.txt"), "x").unwrap();
    let o = dial(&["synth-cohort", "--out", out.to_str().unwrap()], Some("[cohort]\nslides = 3\n[cohort.slide]\nwidth = 3072\nheight = 3072\nblobs = [1, 0, 0, 0, 0, 0]\n"), dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("refusing to overwrite"));
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 1);
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_cohort_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "seed = 3\n[cohort]\nslides = 3\nid_prefix = \"s\"\n[cohort.slide]\nwidth = 3072\nheight = 3072\nblobs = [2, 1, 0, 0, 0, 0]\n";
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = json(&dial(&["synth-cohort", "--json", "--out", a.to_str().unwrap()], Some(cfg), dir.path()));
    let rb = json(&dial(&["synth-cohort", "--json", "--out", b.to_str().unwrap()], Some(cfg), dir.path()));
    assert_eq!(ra, rb);
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.len() > 3);
    assert_eq!(fa, fb);
    // --seed overrides the config.
    let c = dir.path().join("c");
    json(&dial(&["synth-cohort", "--json", "--seed", "4", "--out", c.to_str().unwrap()], Some(cfg), dir.path()));
    assert_ne!(files(&c), fa);
}

#[test]
fn seg_eval_scores_ground_truth_as_perfect() {
    let (dir, root, _) = cohort();
    let cohort = Cohort::load(root).unwrap();
    let preds = dir.path().join(format!("preds-{}", rand::random::<u32>()));
    for case in cohort.cases.iter().take(3) {
        let gt = SyntheticSlide::load_ground_truth(&root.join(&case.path)).unwrap();
        SegmentationMask {
            slide_id: case.slide_id.clone(),
            model_tag: "truth".into(),
            classes: gt,
        }
        .save(&preds.join(&case.slide_id), 512)
        .unwrap();
    }
    let slides: String = cohort
        .cases
        .iter()
        .take(3)
        .map(|c| format!("[[data.slides]]\npath = {}\n", quoted(&root.join(&c.path))))
        .collect();
    let cfg = format!("predictions = [{}]\n{slides}", quoted(&preds));
    let r = json(&dial(&["seg-eval", "--json"], Some(&cfg), dir.path()));
    let m = &r["models"][0];
    assert_eq!(m["model"], "truth");
    for k in ["iou", "recall", "precision"] {
        assert_eq!(m["scores"][k]["value"].as_f64(), Some(1.0), "{k}: {m}");
    }
    assert_eq!(m["slides"].as_array().unwrap().len(), 3);
    assert_eq!(m["pooled"]["fp"], 0);
}

#[test]
fn brca_predict_flags_slides_without_cancer_patches() {
    let (dir, root, patches) = cohort();
    let cohort = Cohort::load(root).unwrap();
    let clf = dir.path().join("clf-predict");
    let data = format!("[data]\ncohort = {}\n", quoted(root));
    let cfg = format!(
        "patches = {}\n{data}[training]\nmagnification = \"5x\"\nepochs = 1\nbatch_size = 8\n[training.model]\nwidth = 2\n",
        quoted(patches)
    );
    json(&dial(&["brca-train", "--json", "--out", clf.to_str().unwrap()], Some(&cfg), dir.path()));

    // A copy of the patch sets with one test slide emptied.
    let emptied = &cohort.in_split(Split::Test).next().unwrap().slide_id;
    let copy = dir.path().join("patches-emptied");
    for case in &cohort.cases {
        let src = patches.join("5x").join(format!("{}.jsonl", case.slide_id));
        let mut set = CancerPatchSet::load(&src).unwrap();
        if &case.slide_id == emptied {
            set.patches.clear();
        }
        set.save(&copy.join("5x").join(format!("{}.jsonl", case.slide_id))).unwrap();
    }
    let cfg = format!("model = {}\npatches = {}\n{data}", quoted(&clf.join("model")), quoted(&copy));
    let r = json(&dial(&["brca-predict", "--json"], Some(&cfg), dir.path()));
    let rows = r["slides"].as_array().unwrap();
    assert_eq!(rows.len(), cohort.cases.len());
    for row in rows {
        let unscorable = row["slide_id"] == emptied.as_str();
        assert_eq!(row["unscorable"], unscorable, "{row}");
        assert_eq!(row["p_slide"].is_null(), unscorable, "{row}");
        if !unscorable {
            assert!(row["patches"].as_u64().unwrap() > 0, "{row}");
        }
    }
    let o = dial(&["brca-predict"], Some(&cfg), dir.path());
    assert!(String::from_utf8_lossy(&o.stdout).contains("UNSCORABLE"));

    // Evaluation refuses to score a set marked as subsampled.
    let sub = dir.path().join("patches-subsampled");
    for case in &cohort.cases {
        let set = CancerPatchSet::load(&patches.join("5x").join(format!("{}.jsonl", case.slide_id))).unwrap();
        let set = dial_core::mutation::subsample(&set, &Default::default(), 1);
        set.save(&sub.join("5x").join(format!("{}.jsonl", case.slide_id))).unwrap();
    }
    let cfg = format!("models = [{}]\npatches = {}\n{data}", quoted(&clf.join("model")), quoted(&sub));
    let o = dial(&["brca-eval"], Some(&cfg), dir.path());
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

fn tiny_project(dir: &Path) -> PathBuf {
    let mut training = SegTrainConfig {
        model: DmmnConfig {
            width: 2,
            patch: 64,
            batch_norm: true,
        },
        epochs: 0,
        batch_size: 4,
        augment: None,
        ..Default::default()
    };
    let mut labels = GrayImage::filled(64, 64, UNLABELED);
    labels.set(3, 3, STROMA);
    let img = RgbImage::filled(64, 64, [200, 120, 170]);
    let sample = SegSample {
        slide_id: "src".into(),
        center: (32, 32),
        images: [img.clone(), img.clone(), img],
        labels,
    };
    let m0 = train_on_samples(&training, &[sample], &[], &ClassWeights::from_counts([1; 6]).unwrap(), Start::Random, Lineage::default(), &mut |_| {})
        .unwrap();
    training.epochs = 1;
    let mut slides = Vec::new();
    for (id, role) in [("r0", SlideRole::Review), ("v0", SlideRole::Validation)] {
        let path = dir.join("slides").join(id);
        let mut img = RgbImage::white(256, 256);
        for y in 32..224 {
            for x in 32..224 {
                img.put(x, y, [120, 60, 140]);
            }
        }
        write_pyramid(&path, id, &img, 20.0, 128, None).unwrap();
        slides.push(SlideEntry::new(id, path, role));
    }
    let mut val = LabelMap::new(256, 256);
    val.merge(64, 64, &GrayImage::filled(64, 64, CARCINOMA)).unwrap();
    let base = PatchManifest::new(
        0,
        5,
        vec![ManifestEntry {
            slide_id: "v0".into(),
            center: (96, 96),
            split: Split::Val,
            label: None,
        }],
    )
    .unwrap();
    let root = dir.join("project");
    let mut p = DialProject::bootstrap(
        &root,
        BootstrapInput {
            project_id: "p".into(),
            pretrained: &m0,
            slides,
            base_manifest: base,
            base_annotations: BTreeMap::from([("v0".to_string(), val)]),
            config: DialConfig {
                training,
                train_lr: 1e-3,
                finetune_lr: 1e-4,
            },
        },
    )
    .unwrap();
    for (x0, label) in [(10, CARCINOMA), (40, STROMA)] {
        p.ingest_correction(Correction {
            slide_id: "r0".into(),
            x0,
            y0: 20,
            delta: GrayImage::filled(50, 30, label),
            author: "a".into(),
            duration_minutes: 2.0,
            session_id: None,
            iteration: None,
        })
        .unwrap();
    }
    root
}

#[test]
fn dial_replay_verifies_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    // A directory without a project replays to an empty report.
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let r = json(&dial(&["dial-replay", "--json", "--project", empty.to_str().unwrap()], None, dir.path()));
    assert_eq!(r["records"], 0);

    let root = tiny_project(dir.path());
    let root_s = root.to_str().unwrap();
    let r = json(&dial(&["dial-replay", "--json", "--project", root_s], None, dir.path()));
    assert_eq!(r["corrections"], 2);
    assert_eq!(r["manifest_version"], 2);
    assert_eq!(r["lineage"].as_array().unwrap().len(), 1);
    // --config works too, and the report is written under --out.
    let out = dir.path().join("replay");
    let cfg = format!("project = {}\n", quoted(&root));
    json(&dial(&["dial-replay", "--json", "--out", out.to_str().unwrap()], Some(&cfg), dir.path()));
    assert!(out.join("replay.json").exists());
    assert_eq!(code(&dial(&["dial-replay", "--project", root_s], Some(&cfg), dir.path())), 2);

    // A cached annotation that disagrees with the log.
    let ann = root.join("annotations").join("r0.lbl");
    let good = std::fs::read(&ann).unwrap();
    let mut map = LabelMap::decode(&good).unwrap();
    map.set(0, 0, CARCINOMA);
    std::fs::write(&ann, map.encode()).unwrap();
    let o = dial(&["dial-replay", "--project", root_s], None, dir.path());
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("annotation of r0 differs"), "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(&ann, good).unwrap();

    // An edited log record breaks the hash chain.
    let log = root.join("corrections.log");
    let text = std::fs::read_to_string(&log).unwrap();
    let edited = text.replacen("\"duration_minutes\":2.0", "\"duration_minutes\":9.0", 1);
    assert_ne!(edited, text);
    std::fs::write(&log, edited).unwrap();
    let o = dial(&["dial-replay", "--project", root_s], None, dir.path());
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("hash chain"), "{}", String::from_utf8_lossy(&o.stderr));
}
