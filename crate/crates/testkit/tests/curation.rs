use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use imgcollect_core::curation::{
    scan_published, CurationConfig, CurationError, EntryStatus, ExportCriteria, FindingKind, LINKAGE_FILE, LINKAGE_HEADER,
};
use imgcollect_core::dicom::{serialize_file, tags, DataSet, Tag, Vr};
use imgcollect_core::sim::corpus::BURN_IN_MODEL;
use imgcollect_core::sim::{CorpusSpec, Outcome};
use imgcollect_core::vault::OptOutSource;
use imgcollect_testkit::{band_cleared, dicom_files, files_under, ByteScanner, SiteHarness};
use sha2::{Digest, Sha256};

fn spec(n: usize) -> CorpusSpec {
    CorpusSpec {
        n_clients: n,
        seed: 11,
        ..CorpusSpec::default()
    }
}

fn uids(ds: &DataSet) -> [String; 3] {
    [tags::STUDY_INSTANCE_UID, tags::SERIES_INSTANCE_UID, tags::SOP_INSTANCE_UID].map(|t| ds.text(t).unwrap().trim().to_string())
}

fn linkage(root: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(root.join(LINKAGE_FILE)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(LINKAGE_HEADER));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

/// Rewrites one delivered image in place.
fn tamper_first(endpoint: &Path, f: impl FnOnce(&mut DataSet)) -> String {
    let (path, mut ds) = dicom_files(endpoint).into_iter().next().unwrap();
    f(&mut ds);
    fs::write(&path, serialize_file(&ds).unwrap()).unwrap();
    ds.text(tags::STUDY_INSTANCE_UID).unwrap().to_string()
}

#[test]
fn clean_studies_publish_with_every_step_passed() {
    let h = SiteHarness::new(spec(5));
    h.deliver_all();
    let cur = h.curator();
    let m = cur.run_pipeline().unwrap();
    assert_eq!((m.inputs, m.outputs, m.quarantined), (5, 5, 0));
    assert_eq!(m.steps_passed(), 7, "{:?}", m.step_results);
    assert_eq!(dicom_files(&h.published()).len(), 20);
    // inbox drained
    assert!(files_under(&h.endpoint()).is_empty());

    // manifest checksums match the published bytes
    for f in &m.files {
        let bytes = fs::read(h.published().join(&f.path)).unwrap();
        assert_eq!(hex::encode(Sha256::digest(bytes)), f.sha256, "{}", f.path);
    }
    assert_eq!(m.files.iter().filter(|f| f.path.ends_with(".dcm")).count(), 20);
    assert_eq!(m.files.iter().filter(|f| f.path.ends_with("clinical.json")).count(), 5);

    // nothing new: an empty batch still gets a manifest
    let again = cur.run_pipeline().unwrap();
    assert_eq!((again.inputs, again.outputs), (0, 0));
    assert_eq!(cur.manifests().unwrap().len(), 2);
}

#[test]
fn published_data_cannot_be_linked_back() {
    let h = SiteHarness::new(spec(6));
    h.deliver_all();
    let mut s1_uids = BTreeSet::new();
    let mut s1_pseudonyms = BTreeSet::new();
    let mut s1_refs = BTreeSet::new();
    for (_, ds) in dicom_files(&h.endpoint()) {
        s1_uids.extend(uids(&ds));
        s1_pseudonyms.insert(ds.text(tags::PATIENT_ID).unwrap().trim().to_string());
    }
    for f in files_under(&h.endpoint()).into_iter().filter(|p| p.ends_with("clinical.json")) {
        let v: serde_json::Value = serde_json::from_slice(&fs::read(f).unwrap()).unwrap();
        for ep in v["episodes"].as_array().unwrap() {
            s1_refs.insert(ep["episode_ref"].as_str().unwrap().to_string());
        }
    }
    assert_eq!(s1_pseudonyms.len(), 6);

    let cur = h.curator();
    cur.run_pipeline().unwrap();

    let mut s2_uids = BTreeSet::new();
    let mut aliases = BTreeSet::new();
    for (_, ds) in dicom_files(&h.published()) {
        s2_uids.extend(uids(&ds));
        let pid = ds.text(tags::PATIENT_ID).unwrap().trim().to_string();
        assert!(pid.starts_with("D-"), "{pid}");
        aliases.insert(pid);
    }
    assert_eq!(aliases.len(), 6);
    assert_eq!(s2_uids.len(), s1_uids.len());
    assert!(s1_uids.is_disjoint(&s2_uids));

    // no stage-1 identifier anywhere in the published bytes
    let mut needles: Vec<String> = s1_uids.iter().chain(&s1_pseudonyms).chain(&s1_refs).cloned().collect();
    needles.sort();
    for file in files_under(&h.published()) {
        let bytes = fs::read(&file).unwrap();
        for n in &needles {
            assert!(
                !bytes.windows(n.len()).any(|w| w == n.as_bytes()),
                "{n} in {}",
                file.display()
            );
        }
    }
    // nor any planted hospital identifier
    assert_eq!(ByteScanner::new(&h.corpus()).scan_tree(&h.published()), vec![]);
    let findings = scan_published(&h.published(), &cur.config().rules);
    assert!(findings.iter().all(|f| !f.kind.blocks_publication()), "{findings:?}");
}

#[test]
fn dose_report_is_held_at_content_check() {
    let h = SiteHarness::new(spec(5));
    h.deliver_all();
    tamper_first(&h.endpoint(), |ds| ds.put_text(tags::IMAGE_TYPE, Vr::CS, "DERIVED\\SECONDARY\\DOSE_INFO"));
    let cur = h.curator();
    let m = cur.run_pipeline().unwrap();
    assert_eq!((m.inputs, m.outputs, m.quarantined), (5, 4, 1));
    assert_eq!(m.steps_passed(), 6);
    assert!(!m.step_results[&4].passed);
    assert_eq!(m.step_results[&4].details.len(), 1);
    let held: Vec<_> = cur.catalog().unwrap().entries.into_values().filter(|e| e.status == EntryStatus::Quarantined).collect();
    assert_eq!(held.len(), 1);
    assert_eq!(held[0].failed_step, Some(4));
    let reasons: Vec<_> = files_under(&cur.layout().quarantine()).into_iter().filter(|p| p.ends_with("reason.txt")).collect();
    assert_eq!(reasons.len(), 1);
    assert!(fs::read_to_string(&reasons[0]).unwrap().starts_with("step 4"));
    assert_eq!(dicom_files(&h.published()).len(), 16);
}

#[test]
fn national_id_in_text_is_held_at_identifier_scan() {
    let h = SiteHarness::new(spec(4));
    h.deliver_all();
    let nid = h.corpus().clients[2].national_id.clone();
    let spaced = format!("{} {} {}", &nid[..3], &nid[3..6], &nid[6..]);
    tamper_first(&h.endpoint(), |ds| {
        ds.put_text(Tag::new(0x0020, 0x4000), Vr::LT, format!("see {spaced}"));
    });
    let m = h.curator().run_pipeline().unwrap();
    assert_eq!((m.outputs, m.quarantined), (3, 1));
    assert!(!m.step_results[&3].passed);
    assert!(m.step_results[&3].details[0].contains("NationalIdPattern"));
}

#[test]
fn burn_in_is_blacked_out_or_held() {
    let burn = CorpusSpec {
        pct_burn_in: 100.0,
        ..spec(3)
    };
    // site without a mask template for the station passes pixels through
    let mut h = SiteHarness::new(burn);
    let mut cfg = h.config();
    cfg.burn_in_regions.clear();
    h.restart_with(cfg);
    h.deliver_all();
    let raw: Vec<_> = dicom_files(&h.endpoint());
    assert!(raw.iter().all(|(_, ds)| !band_cleared(ds)));
    let snapshot = h.dir.path().join("inbox-copy");
    for (p, _) in &raw {
        let to = snapshot.join(p.strip_prefix(h.endpoint()).unwrap());
        fs::create_dir_all(to.parent().unwrap()).unwrap();
        fs::copy(p, to).unwrap();
    }
    for f in files_under(&h.endpoint()).into_iter().filter(|p| p.ends_with("clinical.json")) {
        let to = snapshot.join(f.strip_prefix(h.endpoint()).unwrap());
        fs::copy(&f, to).unwrap();
    }

    let m = h.curator().run_pipeline().unwrap();
    assert_eq!((m.outputs, m.quarantined), (3, 0));
    let published = dicom_files(&h.published());
    assert_eq!(published.len(), 12);
    assert!(published.iter().all(|(_, ds)| band_cleared(ds)));

    // same delivery, but the central rules know the model without a template
    let mut cfg = CurationConfig {
        root: h.dir.path().join("central-b"),
        inbox: snapshot,
        ..h.central_config()
    };
    cfg.rules.burn_in_models.insert(BURN_IN_MODEL.to_string(), Vec::new());
    let m = h.curator_with(cfg).run_pipeline().unwrap();
    assert_eq!((m.outputs, m.quarantined), (0, 3));
    assert!(!m.step_results[&3].passed);
}

#[test]
fn digitised_images_are_flagged_not_held() {
    let h = SiteHarness::new(CorpusSpec {
        pct_digitised: 100.0,
        ..spec(2)
    });
    h.deliver_all();
    let cur = h.curator();
    let m = cur.run_pipeline().unwrap();
    assert_eq!((m.outputs, m.quarantined), (2, 0));
    assert_eq!(m.steps_passed(), 7);
    for e in cur.catalog().unwrap().entries.values() {
        assert!(e.flags.contains(&FindingKind::DigitisedScan));
    }
}

#[test]
fn linkage_is_a_forest_matching_the_files() {
    let h = SiteHarness::new(CorpusSpec {
        studies_per_client: 2,
        pct_unprocessed: 50.0,
        ..spec(4)
    });
    h.deliver_all();
    h.curator().run_pipeline().unwrap();
    let rows = linkage(&h.published());
    let files = dicom_files(&h.published());
    assert_eq!(rows.len(), files.len());

    let mut image_parent = HashMap::new();
    let mut series_parent = HashMap::new();
    let mut study_parent = HashMap::new();
    for r in &rows {
        assert!(image_parent.insert(r[3].clone(), r[2].clone()).is_none(), "image listed twice");
        assert_eq!(series_parent.entry(r[2].clone()).or_insert(r[1].clone()), &r[1]);
        assert_eq!(study_parent.entry(r[1].clone()).or_insert(r[0].clone()), &r[0]);
    }
    for (path, ds) in &files {
        let [study, series, sop] = uids(ds);
        assert_eq!(image_parent[&sop], series);
        assert_eq!(series_parent[&series], study);
        let alias = ds.text(tags::PATIENT_ID).unwrap().trim().to_string();
        assert_eq!(study_parent[&study], alias);
        let rel = path.strip_prefix(h.published()).unwrap();
        assert_eq!(rel, Path::new(&alias).join(&study).join(format!("{sop}.dcm")));
    }
    assert_eq!(study_parent.len(), 8);
    assert_eq!(study_parent.values().collect::<BTreeSet<_>>().len(), 4);
}

#[test]
fn clinical_record_keeps_only_whitelisted_fields() {
    let h = SiteHarness::new(spec(3));
    h.deliver_all();
    let target = files_under(&h.endpoint()).into_iter().find(|p| p.ends_with("clinical.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&target).unwrap()).unwrap();
    let s1_pseudonym = v["pseudonym"].as_str().unwrap().to_string();
    let s1_ref = v["episodes"][0]["episode_ref"].as_str().unwrap().to_string();
    v["hospital_number"] = "HOSP-LEAK".into();
    v["episodes"][0]["surgeon"] = "Dr Leak".into();
    v["demographics_allowed"]["postcode"] = "ZZ9 9ZZ".into();
    fs::write(&target, serde_json::to_vec(&v).unwrap()).unwrap();

    let cur = h.curator();
    cur.run_pipeline().unwrap();
    let alias = cur.vault().alias_of(&s1_pseudonym).unwrap().pseudonym;
    let out: serde_json::Value =
        serde_json::from_slice(&fs::read(h.published().join(&alias).join("clinical.json")).unwrap()).unwrap();
    let text = out.to_string();
    for leaked in ["HOSP-LEAK", "Dr Leak", "ZZ9 9ZZ", &s1_pseudonym, &s1_ref] {
        assert!(!text.contains(leaked), "{leaked} survived");
    }
    assert_eq!(out["pseudonym"], alias.as_str());
    let keys: BTreeSet<&str> = out.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, BTreeSet::from(["demographics_allowed", "episodes", "pseudonym"]));
    let published_studies: BTreeSet<String> = fs::read_dir(h.published().join(&alias))
        .unwrap()
        .flatten()
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    for ep in out["episodes"].as_array().unwrap() {
        assert!(published_studies.contains(ep["study_uid"].as_str().unwrap()));
        assert!(ep.get("outcome").is_some());
    }
}

#[test]
fn exports_select_by_outcome_and_are_audited() {
    let h = SiteHarness::new(CorpusSpec {
        pct_positive: 40.0,
        ..spec(10)
    });
    h.deliver_all();
    let cur = h.curator();
    cur.run_pipeline().unwrap();
    let dest = h.dir.path().join("export-a");

    let biopsy = ExportCriteria {
        outcomes: BTreeSet::from(["biopsy-benign".to_string(), "biopsy-malignant".to_string()]),
        ..ExportCriteria::default()
    };
    assert!(matches!(
        cur.export_subset(&biopsy, &dest, "acme"),
        Err(CurationError::UnknownLicensee(_))
    ));
    assert!(cur.export_log().unwrap().is_empty());

    cur.register_licensee("acme").unwrap();
    let r = cur.export_subset(&biopsy, &dest, "acme").unwrap();
    // oracle: studies in the hospital corpus whose episode ended in a biopsy
    let corpus = h.corpus();
    let outcome: HashMap<&str, Outcome> = corpus.episodes.iter().map(|e| (e.episode_id.as_str(), e.outcome)).collect();
    let expected = corpus.studies.iter().filter(|s| outcome[s.episode_id.as_str()].is_biopsy()).count();
    assert!(expected > 0);
    assert_eq!(r.studies, expected);
    assert_eq!(r.images, expected * 4);
    assert_eq!(dicom_files(&dest).len(), expected * 4);
    assert_eq!(linkage(&dest).len(), expected * 4);
    assert_eq!(r.clients.len(), files_under(&dest).iter().filter(|p| p.ends_with("clinical.json")).count());

    let limited = cur
        .export_subset(
            &ExportCriteria {
                max_clients: Some(3),
                ..ExportCriteria::default()
            },
            &h.dir.path().join("export-b"),
            "acme",
        )
        .unwrap();
    assert_eq!(limited.clients.len(), 3);
    let first3: Vec<String> = cur
        .catalog()
        .unwrap()
        .entries
        .values()
        .map(|e| e.alias.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .take(3)
        .collect();
    assert_eq!(limited.clients, first3);

    let none = cur
        .export_subset(
            &ExportCriteria {
                modalities: BTreeSet::from(["CT".to_string()]),
                ..ExportCriteria::default()
            },
            &h.dir.path().join("export-c"),
            "acme",
        )
        .unwrap();
    assert_eq!(none.studies, 0);
    let log = cur.export_log().unwrap();
    assert_eq!(log.len(), 3);
    assert_eq!(log[0], r);
    assert!(log.iter().all(|x| x.licensee == "acme"));
}

#[test]
fn site_deletion_reaches_published_and_exported_copies() {
    let h = SiteHarness::new(spec(4));
    h.deliver_all();
    let cur = h.curator();
    cur.run_pipeline().unwrap();
    cur.register_licensee("acme").unwrap();
    let dest = h.dir.path().join("export");
    cur.export_subset(&ExportCriteria::default(), &dest, "acme").unwrap();

    let client = h.corpus().clients[1].clone();
    let s1 = h.collector().vault().record_by_national_id(&client.national_id).unwrap().pseudonym;
    let alias = cur.vault().alias_of(&s1).unwrap().pseudonym;
    assert!(h.published().join(&alias).is_dir());
    assert!(dest.join(&alias).is_dir());

    h.collector().opt_out(&client.national_id, OptOutSource::LocalRequest).unwrap();
    let m = cur.run_pipeline().unwrap();
    assert_eq!(m.deletions_applied, 1);
    assert!(!h.published().join(&alias).exists());
    assert!(!dest.join(&alias).exists());
    assert!(!cur.layout().stage1().join(&s1).exists());
    assert!(cur.vault().alias_of(&s1).is_none());
    assert!(cur.vault().record(&alias).is_none());
    assert!(linkage(&h.published()).iter().all(|r| r[0] != alias));
    let exported = linkage(&dest);
    assert_eq!(exported.len(), 3 * 4);
    assert!(exported.iter().all(|r| r[0] != alias));
    assert!(cur.catalog().unwrap().entries.values().all(|e| e.alias != alias));
    let log = fs::read_to_string(cur.layout().audit().join("deletions.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.contains(&alias));
    // the other subjects are untouched
    assert_eq!(dicom_files(&h.published()).len(), 12);
}

#[test]
fn rerun_after_lost_catalog_is_identical() {
    let h = SiteHarness::new(spec(3));
    h.deliver_all();
    let cur = h.curator();
    cur.run_pipeline().unwrap();
    let sums = |root: &Path| -> BTreeMap<String, String> {
        files_under(root)
            .into_iter()
            .map(|p| {
                let bytes = fs::read(&p).unwrap();
                (p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), hex::encode(Sha256::digest(bytes)))
            })
            .collect()
    };
    let before = sums(&h.published());
    // crash before the catalog was saved, with a half-written publish left behind
    fs::remove_file(cur.layout().catalog()).unwrap();
    let alias_dir = fs::read_dir(h.published()).unwrap().flatten().find(|e| e.path().is_dir()).unwrap().path();
    fs::create_dir_all(alias_dir.join(".tmp-1.2.3")).unwrap();
    drop(cur);

    let cur = h.curator();
    let m = cur.run_pipeline().unwrap();
    assert_eq!((m.inputs, m.outputs), (3, 3));
    assert_eq!(sums(&h.published()), before);
}

#[test]
fn missing_inbox_and_unreadable_files() {
    let h = SiteHarness::new(spec(2));
    let cfg = CurationConfig {
        inbox: h.dir.path().join("nowhere"),
        ..h.central_config()
    };
    assert!(matches!(h.curator_with(cfg).run_pipeline(), Err(CurationError::InboxMissing(_))));

    h.deliver_all();
    let (path, _) = dicom_files(&h.endpoint()).into_iter().next().unwrap();
    fs::write(path.with_file_name("junk.dcm"), b"not dicom").unwrap();
    let m = h.curator().run_pipeline().unwrap();
    assert_eq!((m.outputs, m.quarantined), (1, 1));
    assert!(!m.step_results[&2].passed);
}

#[test]
fn named_batches_must_be_new_plain_names() {
    let h = SiteHarness::new(spec(1));
    h.deliver_all();
    let cur = h.curator();
    assert!(matches!(cur.run_batch("../escape"), Err(CurationError::BadBatchId(_))));
    let m = cur.run_batch("week-01").unwrap();
    assert_eq!((m.batch_id.as_str(), m.outputs), ("week-01", 1));
    assert!(cur.layout().manifests().join("week-01.json").is_file());
    assert!(matches!(cur.run_batch("week-01"), Err(CurationError::BadBatchId(_))));
    assert_eq!(cur.run_batch("week-02").unwrap().inputs, 0);
}
