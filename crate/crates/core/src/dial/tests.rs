use std::collections::BTreeMap;

use chrono::{Duration, TimeZone};
use proptest::prelude::*;
use tempfile::TempDir;

use super::*;
use crate::raster::RgbImage;
use crate::segnet::{
    train_on_samples, ClassWeights, DmmnConfig, SegSample, BACKGROUND, CARCINOMA, STROMA,
};
use crate::slide::write_pyramid;

const SIDE: u32 = 256;

fn tiny_config() -> DialConfig {
    DialConfig {
        training: SegTrainConfig {
            model: DmmnConfig {
                width: 2,
                patch: 64,
                batch_norm: true,
            },
            epochs: 1,
            batch_size: 4,
            augment: None,
            ..Default::default()
        },
        train_lr: 1e-3,
        finetune_lr: 1e-4,
    }
}

fn pretrained(cfg: &DialConfig) -> SegCheckpoint {
    let mut labels = GrayImage::filled(64, 64, UNLABELED);
    labels.set(3, 3, STROMA);
    let img = RgbImage::filled(64, 64, [200, 120, 170]);
    let sample = SegSample {
        slide_id: "src".into(),
        center: (32, 32),
        images: [img.clone(), img.clone(), img],
        labels,
    };
    let training = SegTrainConfig {
        epochs: 0,
        seed: 99,
        ..cfg.training.clone()
    };
    let weights = ClassWeights::from_counts([1, 1, 1, 1, 1, 1]).unwrap();
    train_on_samples(&training, &[sample], &[], &weights, Start::Random, Lineage::default(), &mut |_| {}).unwrap()
}

fn write_slides(dir: &Path, ids: &[(&str, SlideRole)]) -> Vec<SlideEntry> {
    ids.iter()
        .enumerate()
        .map(|(i, (id, role))| {
            let path = dir.join("slides").join(id);
            if !path.join("slide.json").exists() {
                let shade = 90 + (i as u8 % 8) * 10;
                let mut img = RgbImage::white(SIDE, SIDE);
                for y in 32..SIDE - 32 {
                    for x in 32..SIDE - 32 {
                        img.put(x, y, [shade, 60, 140]);
                    }
                }
                write_pyramid(&path, id, &img, 20.0, 128, None).unwrap();
            }
            SlideEntry::new(*id, path, *role)
        })
        .collect()
}

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    project: DialProject,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let slides = write_slides(
        dir.path(),
        &[
            ("r0", SlideRole::Review),
            ("r1", SlideRole::Review),
            ("r2", SlideRole::Review),
            ("v0", SlideRole::Validation),
        ],
    );
    let cfg = tiny_config();
    let m0 = pretrained(&cfg);
    let mut val = LabelMap::new(SIDE, SIDE);
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
    let root = dir.path().join("project");
    let project = DialProject::bootstrap(
        &root,
        BootstrapInput {
            project_id: "p".into(),
            pretrained: &m0,
            slides,
            base_manifest: base,
            base_annotations: BTreeMap::from([("v0".to_string(), val)]),
            config: cfg,
        },
    )
    .unwrap();
    Fixture {
        _dir: dir,
        root,
        project,
    }
}

fn stroke(slide: &str, x0: u32, y0: u32, w: u32, h: u32, label: u8) -> Correction {
    Correction {
        slide_id: slide.into(),
        x0,
        y0,
        delta: GrayImage::filled(w, h, label),
        author: "a".into(),
        duration_minutes: 1.0,
        session_id: None,
        iteration: None,
    }
}

/// Runs the pending job for real and installs its result.
fn train_and_install(p: &mut DialProject) -> SegCheckpoint {
    let spec = p.close_iteration().unwrap();
    let ck = p.prepare_job(&spec).unwrap().run(&mut |_| {}).unwrap();
    p.install_model(&spec, &ck).unwrap();
    ck
}

#[test]
fn bootstrap_installs_the_pretrained_model() {
    let f = fixture();
    let m0 = pretrained(&tiny_config());
    assert_eq!(f.project.current_model().hash, m0.hash());
    assert_eq!(f.project.load_model(0).unwrap().hash(), m0.hash());
    assert_eq!(f.project.phase(), &Phase::Open { iteration: 0 });
    assert!(f.project.corrections().is_empty());
    assert_eq!(f.project.manifest_version(), 0);
    assert!(f
        .project
        .slide_status()
        .iter()
        .all(|(_, s)| *s == SlideStatus::Unreviewed));
    assert!(verify_project(&f.root).unwrap().ok());
}

#[test]
fn bootstrap_rejects_empty_registry_and_existing_project() {
    let f = fixture();
    let cfg = tiny_config();
    let m0 = pretrained(&cfg);
    let input = |slides| BootstrapInput {
        project_id: "q".into(),
        pretrained: &m0,
        slides,
        base_manifest: PatchManifest::default(),
        base_annotations: BTreeMap::new(),
        config: cfg.clone(),
    };
    let other = f.root.with_file_name("other");
    assert!(matches!(
        DialProject::bootstrap(&other, input(vec![])),
        Err(Error::Validation(_))
    ));
    let slides = f.project.meta().slides.clone();
    assert!(matches!(
        DialProject::bootstrap(&f.root, input(slides)),
        Err(Error::Conflict(_))
    ));
}

#[test]
fn registry_records_strata() {
    let dir = tempfile::tempdir().unwrap();
    let ids: Vec<String> = (0..60).map(|i| format!("s{i:02}")).collect();
    let roles: Vec<(&str, SlideRole)> = ids.iter().map(|s| (s.as_str(), SlideRole::Review)).collect();
    let mut slides = write_slides(dir.path(), &roles);
    for (i, s) in slides.iter_mut().enumerate() {
        s.stratum = Some(["BRCA1", "BRCA2", "nonBRCA"][i / 20].into());
    }
    let cfg = tiny_config();
    let m0 = pretrained(&cfg);
    let p = DialProject::bootstrap(
        &dir.path().join("p"),
        BootstrapInput {
            project_id: "p".into(),
            pretrained: &m0,
            slides,
            base_manifest: PatchManifest::default(),
            base_annotations: BTreeMap::new(),
            config: cfg,
        },
    )
    .unwrap();
    let mut per: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &p.meta().slides {
        *per.entry(s.stratum.as_deref().unwrap()).or_default() += 1;
    }
    assert_eq!(per, BTreeMap::from([("BRCA1", 20), ("BRCA2", 20), ("nonBRCA", 20)]));
    assert_eq!(p.slide_status().len(), 60);
    let reopened = DialProject::open(p.root()).unwrap();
    assert_eq!(reopened.meta().slides, p.meta().slides);
}

#[test]
fn bootstrap_is_deterministic_apart_from_timestamps() {
    let a = fixture();
    let b = fixture();
    let strip = |p: &DialProject| {
        let mut m = p.meta().clone();
        m.created_at = chrono::DateTime::<Utc>::UNIX_EPOCH;
        for s in &mut m.slides {
            s.path = PathBuf::from(s.path.file_name().unwrap());
        }
        m
    };
    assert_eq!(strip(&a.project), strip(&b.project));
    for rel in ["manifests/v0.jsonl", "base/v0.lbl"] {
        assert_eq!(
            std::fs::read(a.root.join(rel)).unwrap(),
            std::fs::read(b.root.join(rel)).unwrap(),
            "{rel}"
        );
    }
    assert_eq!(a.project.current_model(), b.project.current_model());
    assert_eq!(a.project.head_hash(), b.project.head_hash());
}

#[test]
fn later_labels_override_and_disjoint_ones_add_up() {
    let mut f = fixture();
    let p = &mut f.project;
    p.ingest_correction(stroke("r0", 10, 10, 20, 20, STROMA)).unwrap();
    let r = p.ingest_correction(stroke("r0", 20, 20, 20, 20, CARCINOMA)).unwrap();
    assert_eq!(r.manifest_version, 2);
    assert_eq!(r.changed, 400);
    let ann = p.annotation("r0").unwrap();
    assert_eq!(ann.get(25, 25), CARCINOMA);
    assert_eq!(ann.get(12, 12), STROMA);
    assert_eq!(ann.labeled_count(), 400 + 400 - 100);

    p.ingest_correction(stroke("r1", 0, 0, 10, 10, STROMA)).unwrap();
    p.ingest_correction(stroke("r1", 100, 100, 5, 7, BACKGROUND)).unwrap();
    assert_eq!(p.annotation("r1").unwrap().labeled_count(), 100 + 35);

    let mut holes = GrayImage::filled(30, 30, UNLABELED);
    holes.set(0, 0, STROMA);
    let mut c = stroke("r0", 10, 10, 1, 1, STROMA);
    c.delta = holes;
    p.ingest_correction(c).unwrap();
    let ann = p.annotation("r0").unwrap();
    assert_eq!(ann.get(25, 25), CARCINOMA, "unlabeled pixels never override");
    assert_eq!(ann.get(10, 10), STROMA);
    assert_eq!(p.manifest_version(), 5);
    assert_eq!(p.manifest(5).unwrap().version, 5);
}

#[test]
fn corrections_are_validated() {
    let mut f = fixture();
    let p = &mut f.project;
    let mut err = |c| p.ingest_correction(c).unwrap_err();
    assert!(matches!(err(stroke("r0", 0, 0, 4, 4, UNLABELED)), Error::Validation(_)));
    assert!(matches!(err(stroke("r0", 0, 0, 4, 4, 7)), Error::Validation(_)));
    assert!(matches!(err(stroke("r0", SIDE - 2, 0, 4, 4, STROMA)), Error::Validation(_)));
    assert!(matches!(err(stroke("v0", 0, 0, 4, 4, STROMA)), Error::Validation(_)));
    assert!(matches!(err(stroke("nope", 0, 0, 4, 4, STROMA)), Error::NotFound(_)));
    let mut wrong_iter = stroke("r0", 0, 0, 4, 4, STROMA);
    wrong_iter.iteration = Some(3);
    assert!(matches!(err(wrong_iter), Error::Conflict(_)));
    assert!(p.corrections().is_empty());
    assert_eq!(std::fs::read_dir(f.root.join("corrections")).map(|d| d.count()).unwrap_or(0), 0);
}

#[test]
fn closing_needs_corrections_and_blocks_new_ones() {
    let mut f = fixture();
    let p = &mut f.project;
    assert!(matches!(p.close_iteration(), Err(Error::Conflict(_))));
    p.ingest_correction(stroke("r0", 0, 0, 64, 64, CARCINOMA)).unwrap();
    let spec = p.close_iteration().unwrap();
    assert_eq!(spec.mode, JobMode::Train);
    assert_eq!(spec.config.lr, Some(1e-3));
    assert_eq!(spec.target_tag, "M1");
    assert_eq!(spec.parent_tag, "M0");
    assert!(matches!(
        p.ingest_correction(stroke("r0", 0, 0, 4, 4, STROMA)),
        Err(Error::Conflict(_))
    ));
    assert!(matches!(p.close_iteration(), Err(Error::Conflict(_))));
}

#[test]
fn default_rates_follow_the_iteration() {
    let cfg = DialConfig::default();
    assert_eq!((cfg.train_lr, cfg.finetune_lr), (5e-5, 5e-6));
    let bad = DialConfig {
        training: SegTrainConfig {
            lr: Some(0.1),
            ..Default::default()
        },
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn three_iterations_form_a_lineage() {
    let mut f = fixture();
    let p = &mut f.project;
    let mut hashes = vec![p.current_model().hash.clone()];
    let mut inits = vec![];
    for (k, slide) in ["r0", "r1", "r2"].iter().enumerate() {
        p.ingest_correction(stroke(slide, 0, 0, 64, 64, CARCINOMA)).unwrap();
        p.ingest_correction(stroke(slide, 64, 64, 64, 64, STROMA)).unwrap();
        let ck = train_and_install(p);
        assert_eq!(ck.meta.tag, format!("M{}", k + 1));
        assert_eq!(ck.meta.lr, if k == 0 { 1e-3 } else { 1e-4 });
        assert_eq!(ck.meta.selection_set, "val");
        hashes.push(ck.hash().to_string());
        inits.push(ck.meta.init_hash.clone());
    }
    let tags: Vec<&str> = p.models().iter().map(|m| m.tag.as_str()).collect();
    assert_eq!(tags, ["M0", "M1", "M2", "M3"]);
    for k in 1..4 {
        assert_eq!(p.models()[k].parent_hash.as_deref(), Some(hashes[k - 1].as_str()));
    }
    // M1 is a fresh run; later models start from their parent.
    assert_ne!(inits[0], hashes[0]);
    assert_eq!(inits[1], hashes[1]);
    assert_eq!(inits[2], hashes[2]);
    assert_eq!(p.phase(), &Phase::Open { iteration: 3 });

    let status: BTreeMap<String, SlideStatus> = p.slide_status().into_iter().collect();
    assert_eq!(status["r0"], SlideStatus::Corrected(1));
    assert_eq!(status["r2"], SlideStatus::Corrected(3));
    assert_eq!(status["v0"], SlideStatus::Unreviewed);
    p.complete().unwrap();
    assert!(p.slide_status().iter().all(|(_, s)| *s == SlideStatus::Complete));
    assert!(matches!(p.complete(), Err(Error::Conflict(_))));

    let report = verify_project(&f.root).unwrap();
    assert!(report.ok(), "{:?}", report.problems);
    let chain: Vec<_> = report.lineage.iter().map(|l| l.hash.clone()).collect();
    assert_eq!(chain, hashes);

    let reopened = DialProject::open(&f.root).unwrap();
    assert_eq!(reopened.models(), f.project.models());
    assert_eq!(reopened.phase(), f.project.phase());
}

#[test]
fn install_checks_lineage_and_failures_keep_the_model() {
    let mut f = fixture();
    let p = &mut f.project;
    p.ingest_correction(stroke("r0", 0, 0, 64, 64, CARCINOMA)).unwrap();
    let spec = p.close_iteration().unwrap();
    let mut ck = p.prepare_job(&spec).unwrap().run(&mut |_| {}).unwrap();
    let genuine = ck.clone();
    ck.meta.parent_hash = Some("0".repeat(64));
    assert!(matches!(p.install_model(&spec, &ck), Err(Error::Contract(_))));

    p.record_job_failure(&spec, "worker died").unwrap();
    assert_eq!(p.current_model().tag, "M0");
    assert_eq!(p.phase(), &Phase::Open { iteration: 0 });
    assert!(matches!(p.install_model(&spec, &genuine), Err(Error::Conflict(_))));

    p.ingest_correction(stroke("r1", 0, 0, 8, 8, STROMA)).unwrap();
    let spec2 = p.close_iteration().unwrap();
    assert_eq!(spec2.manifest_version, 2);
    let ck2 = p.prepare_job(&spec2).unwrap().run(&mut |_| {}).unwrap();
    p.install_model(&spec2, &ck2).unwrap();
    let reopened = DialProject::open(&f.root).unwrap();
    assert_eq!(reopened.state().failures, vec![(0, "worker died".to_string())]);
    assert_eq!(reopened.current_model().hash, ck2.hash());
}

fn record(slide: &str, iteration: u32, minutes: f64) -> CorrectionRecord {
    CorrectionRecord {
        correction_id: String::new(),
        slide_id: slide.into(),
        iteration,
        author: "a".into(),
        duration_minutes: minutes,
        session_id: None,
        x0: 0,
        y0: 0,
        width: 1,
        height: 1,
        labeled: 1,
        delta_sha256: String::new(),
        created_at: chrono::DateTime::<Utc>::UNIX_EPOCH,
    }
}

#[test]
fn time_report_matches_the_reported_effort() {
    assert_eq!(annotation_time_report(&[], &[]), TimeReport::default());

    // 14 slides in the first round, 11 new ones in the second, and 3 of the
    // first 14 again in the third.
    let mut corrections = Vec::new();
    for i in 0..14 {
        corrections.push(record(&format!("s{i}"), 0, 0.0));
    }
    for i in 14..25 {
        corrections.push(record(&format!("s{i}"), 1, 0.0));
    }
    for i in 0..3 {
        corrections.push(record(&format!("s{i}"), 2, 0.0));
    }
    let t0 = Utc.with_ymd_and_hms(2024, 1, 1, 9, 0, 0).unwrap();
    let session = |iteration, minutes| SessionRecord {
        session_id: format!("{iteration}"),
        annotator: "a".into(),
        slide_id: "s0".into(),
        iteration,
        started_at: t0,
        ended_at: t0 + Duration::minutes(minutes),
        duration_minutes: minutes as f64,
    };
    let sessions = [session(0, 60), session(1, 120), session(2, 30)];
    let r = annotation_time_report(&corrections, &sessions);
    assert_eq!(r.total_minutes, 210.0);
    assert_eq!(r.total_hours(), 3.5);
    let per: Vec<(u32, f64, usize)> = r.rounds.iter().map(|x| (x.iteration, x.minutes, x.slides.len())).collect();
    assert_eq!(per, [(1, 60.0, 14), (2, 120.0, 11), (3, 30.0, 3)]);
    assert_eq!(r.distinct_slides, 25);
}

#[test]
fn sessions_feed_the_time_log() {
    let mut f = fixture();
    let t0 = Utc.with_ymd_and_hms(2024, 1, 1, 9, 0, 0).unwrap();
    let s = f
        .project
        .log_session("s1", "ann", "r0", t0, t0 + Duration::minutes(45))
        .unwrap();
    assert_eq!(s.duration_minutes, 45.0);
    assert!(f
        .project
        .log_session("s2", "ann", "r0", t0, t0 - Duration::minutes(1))
        .is_err());
    f.project.ingest_correction(stroke("r0", 0, 0, 4, 4, STROMA)).unwrap();
    assert_eq!(f.project.time_report().total_minutes, 46.0);
    let reopened = DialProject::open(&f.root).unwrap();
    assert_eq!(reopened.time_report(), f.project.time_report());
}

#[test]
fn torn_writes_and_orphans_are_discarded_on_open() {
    let mut f = fixture();
    f.project.ingest_correction(stroke("r0", 0, 0, 16, 16, STROMA)).unwrap();
    let head = f.project.head_hash().to_string();
    let expected = annotations_digest(&f.project.state().annotations);
    drop(f.project);

    // A crash after the delta was written but before its log record, with a
    // half-written record at the end of the log.
    std::fs::write(f.root.join("corrections/c000001.png"), b"junk").unwrap();
    std::fs::write(f.root.join("annotations/r1.lbl"), b"junk").unwrap();
    let log_path = f.root.join(LOG_FILE);
    let mut bytes = std::fs::read(&log_path).unwrap();
    let clean_len = bytes.len();
    bytes.extend_from_slice(b"{\"seq\":2,\"prev\":\"");
    std::fs::write(&log_path, &bytes).unwrap();
    assert!(!verify_project(&f.root).unwrap().ok());

    let p = DialProject::open(&f.root).unwrap();
    assert_eq!(p.head_hash(), head);
    assert_eq!(std::fs::read(&log_path).unwrap().len(), clean_len);
    assert_eq!(annotations_digest(&p.state().annotations), expected);
    assert!(!f.root.join("corrections/c000001.png").exists());
    assert!(!f.root.join("annotations/r1.lbl").exists());
    let report = verify_project(&f.root).unwrap();
    assert!(report.ok(), "{:?}", report.problems);
}

#[test]
fn tampering_is_detected() {
    let mut f = fixture();
    f.project.ingest_correction(stroke("r0", 0, 0, 16, 16, STROMA)).unwrap();
    f.project.ingest_correction(stroke("r0", 8, 8, 16, 16, CARCINOMA)).unwrap();
    let log_path = f.root.join(LOG_FILE);
    let original = std::fs::read_to_string(&log_path).unwrap();

    let edited = original.replacen("\"x0\":8", "\"x0\":9", 1);
    std::fs::write(&log_path, edited).unwrap();
    let r = verify_project(&f.root).unwrap();
    assert!(r.problems.iter().any(|p| p.contains("hash")), "{:?}", r.problems);
    assert!(DialProject::open(&f.root).is_err());

    std::fs::write(&log_path, &original).unwrap();
    let png_path = f.root.join("corrections/c000001.png");
    let good_png = std::fs::read(&png_path).unwrap();
    let mut png = good_png.clone();
    let n = png.len();
    png[n - 20] ^= 1;
    std::fs::write(&png_path, png).unwrap();
    assert!(!verify_project(&f.root).unwrap().ok());
    std::fs::write(&png_path, good_png).unwrap();
    assert!(verify_project(&f.root).unwrap().ok());

    std::fs::write(f.root.join("annotations/r0.lbl"), b"x").unwrap();
    assert!(verify_project(&f.root)
        .unwrap()
        .problems
        .iter()
        .any(|p| p.contains("annotation of r0")));
}

#[test]
fn empty_directory_gives_an_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let r = verify_project(dir.path()).unwrap();
    assert_eq!(r, ReplayReport::default());
    assert!(r.ok());
}

#[test]
fn manifests_add_corrected_cells_to_the_base() {
    let mut f = fixture();
    f.project.ingest_correction(stroke("r0", 60, 0, 10, 1, STROMA)).unwrap();
    let m = f.project.manifest(1).unwrap();
    let train: Vec<(String, (i64, i64))> = m.in_split(Split::Train).map(|e| (e.slide_id.clone(), e.center)).collect();
    assert_eq!(train, [("r0".to_string(), (32, 32)), ("r0".to_string(), (96, 32))]);
    assert_eq!(m.in_split(Split::Val).count(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Each pixel reads as the last labeled writer, labeled counts never
    /// shrink, and replay from the log reproduces the annotations bytewise.
    #[test]
    fn merge_is_last_writer_and_replays(
        strokes in prop::collection::vec((0usize..2, 0u32..200, 0u32..200, 1u32..56, 1u32..56, 0u8..7, any::<u64>()), 1..12)
    ) {
        let mut f = fixture();
        let mut oracle: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
        let mut last_count = 0;
        for (s, x0, y0, w, h, label, holes) in strokes {
            let slide = ["r0", "r1"][s];
            let mut delta = GrayImage::filled(w, h, if label == 6 { UNLABELED } else { label });
            for (i, v) in delta.data.iter_mut().enumerate() {
                if (holes >> (i % 64)) & 1 == 1 {
                    *v = UNLABELED;
                }
            }
            let res = f.project.ingest_correction(Correction { delta: delta.clone(), ..stroke(slide, x0, y0, 1, 1, 0) });
            if delta.data.iter().all(|&v| v == UNLABELED) {
                prop_assert!(res.is_err());
                continue;
            }
            res.unwrap();
            let o = oracle.entry(slide).or_insert_with(|| vec![UNLABELED; (SIDE * SIDE) as usize]);
            for dy in 0..h {
                for dx in 0..w {
                    let v = delta.get(dx, dy);
                    if v != UNLABELED {
                        o[((y0 + dy) * SIDE + x0 + dx) as usize] = v;
                    }
                }
            }
            let count: u64 = f.project.state().annotations.values().map(|a| a.labeled_count()).sum();
            prop_assert!(count >= last_count);
            last_count = count;
        }
        for (slide, o) in &oracle {
            prop_assert_eq!(&f.project.annotation(slide).unwrap().to_dense().data, o);
        }
        let live = annotations_digest(&f.project.state().annotations);
        let report = verify_project(&f.root).unwrap();
        prop_assert!(report.ok(), "{:?}", report.problems);
        prop_assert_eq!(report.annotation_digest.as_deref(), Some(live.as_str()));
        let reopened = DialProject::open(&f.root).unwrap();
        prop_assert_eq!(annotations_digest(&reopened.state().annotations), live);
    }
}
