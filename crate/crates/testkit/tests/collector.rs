use std::collections::{BTreeMap, BTreeSet};
use std::fs;

use chrono::NaiveDate;
use imgcollect_core::collector::{
    CollectorError, FaultPoint, RejectKind, SelectionCriteria, WindowGate,
};
use imgcollect_core::dicom::{serialize_file, tags, SourceKind};
use imgcollect_core::sim::{CorpusSpec, Outcome, SimFaults};
use imgcollect_core::vault::{OptOutSource, StudyStatus};
use imgcollect_testkit::{band_cleared, dicom_files, element_leaks, files_under, images_by_sop, ByteScanner, SiteHarness};
use sha2::{Digest, Sha256};

fn spec(n: usize) -> CorpusSpec {
    CorpusSpec {
        n_clients: n,
        seed: 7,
        ..CorpusSpec::default()
    }
}

fn checksums(root: &std::path::Path) -> BTreeMap<String, String> {
    files_under(root)
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "dcm"))
        .map(|p| {
            (
                p.strip_prefix(root).unwrap().to_string_lossy().into_owned(),
                hex::encode(Sha256::digest(fs::read(&p).unwrap())),
            )
        })
        .collect()
}

#[test]
fn ten_cases_one_opted_out() {
    let h = SiteHarness::new(spec(10));
    let corpus = h.corpus();
    let c = h.collector();
    c.vault()
        .record_opt_out(&corpus.clients[3].national_id, OptOutSource::NationalList)
        .unwrap();
    let r = c.run_collection_cycle(&SelectionCriteria::everything()).unwrap();
    assert_eq!(r.identified, 10);
    assert_eq!(r.excluded_opt_out, 1);
    assert_eq!(r.staged, 9);
    assert_eq!(r.images_staged, 9 * 4);
    assert_eq!(r.quarantined, 0);
    assert!(c.vault().record_by_national_id(&corpus.clients[3].national_id).is_none());
    assert_eq!(c.vault().record_count(), 9);

    // no planted identifier in staging, byte or element level
    let scanner = ByteScanner::new(&corpus);
    assert_eq!(scanner.scan_tree(&h.staging()), vec![]);
    let sources = images_by_sop(&corpus);
    for (path, ds) in dicom_files(&h.staging()) {
        let sop = ds.text(tags::SOP_INSTANCE_UID).unwrap();
        let original = c.vault().original_uid(sop).expect("mapped");
        assert_eq!(element_leaks(&sources[&original], &ds), vec![], "{}", path.display());
    }

    // second run finds nothing new
    let again = c.run_collection_cycle(&SelectionCriteria::everything()).unwrap();
    assert_eq!(again.staged, 0);
    assert_eq!(again.skipped_existing, 9);
}

#[test]
fn clinical_record_uses_offset_dates_and_tokens() {
    let h = SiteHarness::new(spec(3));
    let corpus = h.corpus();
    let c = h.collector();
    c.run_collection_cycle(&SelectionCriteria::everything()).unwrap();
    for client in &corpus.clients {
        let rec = c.vault().record_by_national_id(&client.national_id).unwrap();
        let path = h.staging().join(&rec.pseudonym).join("clinical.json");
        let json: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        let ep = &json["episodes"][0];
        let original = corpus.episodes.iter().find(|e| e.local_id == client.local_id).unwrap();
        let d0 = NaiveDate::parse_from_str(&original.outcome_date, "%Y%m%d").unwrap();
        let d1 = NaiveDate::parse_from_str(ep["outcome_date"].as_str().unwrap(), "%Y%m%d").unwrap();
        assert_eq!((d1 - d0).num_days(), rec.date_offset_days);
        assert_eq!(json["demographics_allowed"]["year_of_birth"], original.birth_year);
        assert_ne!(ep["episode_ref"].as_str().unwrap(), original.episode_id);
    }
}

#[test]
fn selection_criteria_filter_cases() {
    let h = SiteHarness::new(CorpusSpec {
        n_clients: 20,
        pct_positive: 50.0,
        seed: 3,
        ..CorpusSpec::default()
    });
    let corpus = h.corpus();
    let positives = corpus.episodes.iter().filter(|e| e.outcome.is_biopsy()).count();
    let criteria = SelectionCriteria {
        include_outcomes: [Outcome::BiopsyBenign, Outcome::BiopsyMalignant].into_iter().collect(),
        normals_sample_rate: 0.0,
        since: Some(chrono::DateTime::UNIX_EPOCH),
        ignore_window: true,
        ..SelectionCriteria::default()
    };
    let r = h.collector().run_collection_cycle(&criteria).unwrap();
    assert_eq!(r.identified, positives);
    assert_eq!(r.staged, positives);

    let wrong_modality = SelectionCriteria {
        modalities: ["CT".to_string()].into_iter().collect(),
        ..SelectionCriteria::everything()
    };
    let r = h.collector().run_collection_cycle(&wrong_modality).unwrap();
    assert_eq!(r.staged, 0);
}

#[test]
fn normals_sampling_is_stable() {
    let h = SiteHarness::new(CorpusSpec {
        n_clients: 40,
        pct_positive: 0.0,
        seed: 11,
        ..CorpusSpec::default()
    });
    let criteria = SelectionCriteria {
        include_outcomes: BTreeSet::new(),
        normals_sample_rate: 0.5,
        since: Some(chrono::DateTime::UNIX_EPOCH),
        ignore_window: true,
        ..SelectionCriteria::default()
    };
    let normals = h.corpus().episodes.iter().filter(|e| e.outcome == Outcome::Normal).count();
    let r = h.collector().run_collection_cycle(&criteria).unwrap();
    assert!(r.identified > 0 && r.identified < normals, "{} of {normals}", r.identified);
    let again = h.collector().run_collection_cycle(&criteria).unwrap();
    assert_eq!(again.identified, r.identified);
    assert_eq!(again.skipped_existing, r.staged);
}

#[test]
fn rogue_name_quarantines_the_study() {
    let h = SiteHarness::new(CorpusSpec {
        n_clients: 5,
        pct_unpoliced: 20.0,
        seed: 5,
        ..CorpusSpec::default()
    });
    let r = h.collector().run_collection_cycle(&SelectionCriteria::everything()).unwrap();
    assert_eq!(r.quarantined, 1);
    assert_eq!(r.staged, 4);
    let q: Vec<_> = h.collector().vault().studies().into_iter().filter(|s| s.status == StudyStatus::Quarantined).collect();
    assert_eq!(q.len(), 1);
    assert!(q[0].quarantine_reason.as_deref().unwrap().contains("0008,009C") || q[0].quarantine_reason.as_deref().unwrap().to_lowercase().contains("polic"));
    // rerun does not retry a quarantined study
    let again = h.collector().run_collection_cycle(&SelectionCriteria::everything()).unwrap();
    assert_eq!(again.quarantined, 0);
}

#[test]
fn burn_in_masked_or_quarantined() {
    let h = SiteHarness::new(CorpusSpec {
        n_clients: 4,
        pct_burn_in: 50.0,
        seed: 9,
        ..CorpusSpec::default()
    });
    let r = h.collector().run_collection_cycle(&SelectionCriteria::everything()).unwrap();
    assert_eq!(r.staged, 4);
    let mut us = 0;
    for (_, ds) in dicom_files(&h.staging()) {
        if ds.text(tags::MODALITY) == Some("US") {
            us += 1;
            assert!(band_cleared(&ds));
        }
    }
    assert_eq!(us, 2 * 4);

    // same station without a template: quarantined
    let h = SiteHarness::new(CorpusSpec {
        n_clients: 4,
        pct_burn_in: 50.0,
        seed: 9,
        ..CorpusSpec::default()
    });
    let mut cfg = h.config();
    let station = h.sim.spec().burn_in_station.clone();
    cfg.burn_in_regions.clear();
    cfg.burn_in_unmasked_stations.insert(station);
    let mut h = h;
    h.restart_with(cfg);
    let r = h.collector().run_collection_cycle(&SelectionCriteria::everything()).unwrap();
    assert_eq!((r.staged, r.quarantined), (2, 2));
}

#[test]
fn unprocessed_copies_are_kept_and_labelled() {
    let h = SiteHarness::new(CorpusSpec {
        n_clients: 2,
        pct_unprocessed: 50.0,
        seed: 2,
        ..CorpusSpec::default()
    });
    let r = h.collector().run_collection_cycle(&SelectionCriteria::everything()).unwrap();
    assert_eq!(r.images_staged, 4 + 8);
    let kinds: Vec<SourceKind> = h
        .collector()
        .vault()
        .studies()
        .iter()
        .flat_map(|s| s.images.iter().map(|i| i.source_kind))
        .collect();
    assert_eq!(kinds.iter().filter(|k| **k == SourceKind::ForProcessing).count(), 4);
}

#[test]
fn partial_retrieval_is_retried() {
    let h = SiteHarness::new(spec(3));
    h.sim.set_faults(SimFaults {
        truncate_moves_after: Some(2),
    });
    let r = h.collector().run_collection_cycle(&resume()).unwrap();
    assert_eq!(r.retrieval_incomplete, 3);
    assert_eq!(r.staged, 0);
    h.sim.set_faults(SimFaults::default());
    let r = h.collector().run_collection_cycle(&resume()).unwrap();
    assert_eq!(r.staged, 3);
}

/// Everything, resuming from the stored watermark.
fn resume() -> SelectionCriteria {
    SelectionCriteria {
        since: None,
        ..SelectionCriteria::everything()
    }
}

#[test]
fn window_gate_refuses_outside_hours() {
    let mut h = SiteHarness::new(spec(1));
    let mut cfg = h.config();
    let now = chrono::Timelike::hour(&chrono::Utc::now());
    cfg.window = Some(WindowGate {
        start_hour: (now + 2) % 24,
        end_hour: (now + 3) % 24,
    });
    h.restart_with(cfg);
    let criteria = SelectionCriteria {
        ignore_window: false,
        ..SelectionCriteria::everything()
    };
    assert!(matches!(
        h.collector().run_collection_cycle(&criteria),
        Err(CollectorError::OutsideWindow)
    ));
    assert!(h.collector().run_collection_cycle(&SelectionCriteria::everything()).is_ok());
}

#[test]
fn crash_at_any_point_converges() {
    let reference = {
        let h = SiteHarness::new(spec(4));
        h.collector().run_collection_cycle(&SelectionCriteria::everything()).unwrap();
        checksums(&h.staging())
    };
    assert_eq!(reference.len(), 16);
    for point in [
        FaultPoint::AfterRegister,
        FaultPoint::AfterRetrieve,
        FaultPoint::AfterDeid,
        FaultPoint::MidStageWrite,
        FaultPoint::AfterStageRename,
        FaultPoint::BeforeVaultRecord,
    ] {
        let mut h = SiteHarness::new(spec(4));
        h.collector().faults().arm(point);
        let err = h.collector().run_collection_cycle(&SelectionCriteria::everything()).unwrap_err();
        assert!(matches!(err, CollectorError::InjectedFault(p) if p == point));
        h.restart();
        h.collector().run_collection_cycle(&SelectionCriteria::everything()).unwrap();
        assert_eq!(checksums(&h.staging()), reference, "after crash at {point:?}");
    }
}

#[test]
fn transfer_is_verified_and_idempotent() {
    let h = SiteHarness::new(spec(3));
    let c = h.collector();
    c.run_collection_cycle(&SelectionCriteria::everything()).unwrap();
    let staged = checksums(&h.staging());
    let t = c.transfer_nightly().unwrap();
    assert_eq!(t.studies_pushed, 3);
    assert_eq!(t.images_pushed, 12);
    assert_eq!(t.clinical_records_pushed, 3);
    assert_eq!(t.local_deleted, 12 + 3);
    assert_eq!(checksums(&h.endpoint()), staged);
    assert!(checksums(&h.staging()).is_empty());
    assert!(c.vault().studies().iter().all(|s| s.status == StudyStatus::Transferred));
    let again = c.transfer_nightly().unwrap();
    assert_eq!(again.studies_pushed, 0);
    assert_eq!(checksums(&h.endpoint()), staged);
}

#[test]
fn transfer_crash_points_converge() {
    for point in [
        FaultPoint::TransferAfterCopy,
        FaultPoint::TransferAfterRename,
        FaultPoint::TransferAfterStagingDelete,
    ] {
        let mut h = SiteHarness::new(spec(3));
        h.collector().run_collection_cycle(&SelectionCriteria::everything()).unwrap();
        let staged = checksums(&h.staging());
        h.collector().faults().arm(point);
        assert!(h.collector().transfer_nightly().is_err());
        h.restart();
        h.collector().transfer_nightly().unwrap();
        assert_eq!(checksums(&h.endpoint()), staged, "{point:?}");
        assert!(checksums(&h.staging()).is_empty());
        assert!(
            h.collector().vault().studies().iter().all(|s| s.status == StudyStatus::Transferred),
            "{point:?}"
        );
    }
}

#[test]
fn corrupt_copy_keeps_staging() {
    let h = SiteHarness::new(spec(2));
    let c = h.collector();
    c.run_collection_cycle(&SelectionCriteria::everything()).unwrap();
    c.faults().arm(FaultPoint::TransferCorruptCopy);
    let t = c.transfer_nightly().unwrap();
    assert_eq!(t.checksum_failures, 1);
    assert_eq!(t.studies_pushed, 1);
    assert_eq!(checksums(&h.staging()).len(), 4);
    let t = c.transfer_nightly().unwrap();
    assert_eq!(t.studies_pushed, 1);
    assert_eq!(checksums(&h.endpoint()).len(), 8);
}

#[test]
fn missing_endpoint_is_reported() {
    let h = SiteHarness::new(spec(1));
    fs::remove_dir_all(h.endpoint()).unwrap();
    assert!(matches!(
        h.collector().transfer_nightly(),
        Err(CollectorError::EndpointUnavailable(_))
    ));
}

#[test]
fn concurrent_cycle_is_refused() {
    let h = SiteHarness::new(spec(6));
    let c = h.collector();
    std::thread::scope(|s| {
        let a = s.spawn(|| c.run_collection_cycle(&SelectionCriteria::everything()));
        let b = s.spawn(|| c.run_collection_cycle(&SelectionCriteria::everything()));
        let results = [a.join().unwrap(), b.join().unwrap()];
        let busy = results.iter().filter(|r| matches!(r, Err(CollectorError::CycleInProgress))).count();
        let ok = results.iter().filter(|r| r.is_ok()).count();
        assert_eq!(busy + ok, 2);
        assert!(ok >= 1);
    });
    assert_eq!(c.vault().studies().len(), 6);
}

#[test]
fn opt_out_cascade_reaches_endpoint() {
    let h = SiteHarness::new(spec(3));
    let corpus = h.corpus();
    let c = h.collector();
    c.run_collection_cycle(&SelectionCriteria::everything()).unwrap();
    c.transfer_nightly().unwrap();
    let nid = &corpus.clients[0].national_id;
    let pseudonym = c.vault().record_by_national_id(nid).unwrap().pseudonym;
    let r = c.opt_out(nid, OptOutSource::LocalRequest).unwrap();
    assert_eq!(r.pseudonym.as_deref(), Some(pseudonym.as_str()));
    assert_eq!(r.published_studies_removed, 1);
    assert!(r.vault_rows_removed >= 2);
    assert!(!h.endpoint().join(&pseudonym).exists());
    assert!(h.endpoint().join("_deletions").join(format!("{pseudonym}.json")).exists());
    assert!(c.vault().is_opted_out(nid));

    // a later cycle does not bring the client back
    let again = c.run_collection_cycle(&SelectionCriteria::everything()).unwrap();
    assert_eq!(again.excluded_opt_out, 1);
    assert!(c.vault().record_by_national_id(nid).is_none());
}

#[test]
fn refresh_applies_revisions_and_links_new_studies() {
    let h = SiteHarness::new(spec(3));
    let corpus = h.corpus();
    let c = h.collector();
    c.run_collection_cycle(&SelectionCriteria::everything()).unwrap();
    let ep = &corpus.episodes[0];
    let target = if ep.outcome == Outcome::BiopsyMalignant { Outcome::BiopsyBenign } else { Outcome::BiopsyMalignant };
    h.sim.revise_outcome(&ep.episode_id, target, NaiveDate::from_ymd_opt(2024, 3, 1).unwrap()).unwrap();
    let client = corpus.clients.iter().find(|cl| cl.local_id == ep.local_id).unwrap();
    h.sim.add_study(&client.local_id, NaiveDate::from_ymd_opt(2024, 6, 1).unwrap(), Outcome::Normal).unwrap();

    let u = c.refresh_ground_truth().unwrap();
    assert_eq!(u.episodes_updated, 1);
    assert_eq!(u.revisions_applied, 1);
    assert_eq!(u.new_studies_linked, 1);
    let rec = c.vault().record_by_national_id(&client.national_id).unwrap();
    let studies = c.vault().studies_for(&rec.pseudonym);
    assert_eq!(studies.len(), 2);
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(h.staging().join(&rec.pseudonym).join("clinical.json")).unwrap()).unwrap();
    let eps = json["episodes"].as_array().unwrap();
    assert_eq!(eps.len(), 2);
    assert!(eps.iter().any(|e| e["outcome"] == target.as_str() && e["revised_from"] == ep.outcome.as_str()));
    assert_eq!(c.refresh_ground_truth().unwrap().episodes_updated, 0);
}

#[test]
fn import_directory_with_manifest() {
    let h = SiteHarness::new(spec(2));
    let corpus = h.corpus();
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = String::from("file,national_id,local_id\n");
    for (i, img) in corpus.studies[0].images.iter().enumerate() {
        let name = format!("img{i}.dcm");
        fs::write(dir.path().join(&name), serialize_file(&img.dataset).unwrap()).unwrap();
        manifest.push_str(&format!("{name},{},{}\n", corpus.studies[0].national_id, corpus.studies[0].local_id));
    }
    fs::write(dir.path().join("stray.dcm"), b"junk").unwrap();
    fs::write(dir.path().join("broken.dcm"), b"not dicom at all").unwrap();
    manifest.push_str(&format!("broken.dcm,{},{}\n", corpus.studies[0].national_id, corpus.studies[0].local_id));
    manifest.push_str(&format!("gone.dcm,{},{}\n", corpus.studies[0].national_id, corpus.studies[0].local_id));
    let mpath = dir.path().join("manifest.csv");
    fs::write(&mpath, manifest).unwrap();

    let r = h.collector().import_directory(dir.path(), &mpath).unwrap();
    assert_eq!(r.staged, 1);
    assert_eq!(r.images_staged, 4);
    let kinds: BTreeSet<_> = r.rejected.iter().map(|x| (x.file.as_str(), x.kind)).collect();
    assert!(kinds.contains(&("stray.dcm", RejectKind::ManifestGap)));
    assert!(kinds.contains(&("broken.dcm", RejectKind::ParseFailure)));
    assert!(kinds.contains(&("gone.dcm", RejectKind::MissingFile)));
    assert_eq!(ByteScanner::new(&corpus).scan_tree(&h.staging()), vec![]);
}
