use std::collections::HashSet;

use chrono::{Duration, NaiveDate};
use imgcollect_core::deid::{apply, birth_date_value, offset_date_value, Policy, Stage};
use imgcollect_core::dicom::{parse_dataset, serialize_dataset, serialize_file, tags, DataElement, DataSet, Tag, Value, Vr};
use imgcollect_core::vault::{check_uid, Registration, Vault, VaultConfig, VaultSecrets};
use proptest::prelude::*;

fn date(days: i64) -> NaiveDate {
    NaiveDate::from_ymd_opt(1950, 1, 1).unwrap() + Duration::days(days)
}

fn da(d: NaiveDate) -> String {
    d.format("%Y%m%d").to_string()
}

fn read_da(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y%m%d").unwrap()
}

fn uid_strategy() -> impl Strategy<Value = String> {
    proptest::collection::vec(0u32..100_000, 3..9)
        .prop_map(|parts| format!("1.2.{}", parts.iter().map(u32::to_string).collect::<Vec<_>>().join(".")))
}

fn leaf_element() -> impl Strategy<Value = DataElement> {
    // Even groups above the file meta and below pixel data, plus odd (private) groups.
    let tag = (0x0008u16..0x0050, 0x0001u16..0xFFF0).prop_map(|(g, e)| Tag::new(g, e));
    let value = prop_oneof![
        "[A-Z0-9^]{0,20}".prop_map(|s| (Vr::LO, Value::Text(s))),
        "[A-Z0-9_]{1,16}".prop_map(|s| (Vr::CS, Value::Text(s))),
        "[A-Z]{1,10}\\^[A-Z]{1,10}".prop_map(|s| (Vr::PN, Value::Text(s))),
        (0i64..40_000).prop_map(|d| (Vr::DA, Value::Text(da(date(d))))),
        uid_strategy().prop_map(|s| (Vr::UI, Value::Text(s))),
        proptest::collection::vec(any::<u8>(), 0..64).prop_map(|mut b| {
            if b.len() % 2 == 1 {
                b.push(0);
            }
            (Vr::OB, Value::Bytes(b))
        }),
        proptest::collection::vec(any::<u16>(), 1..5).prop_map(|v| (Vr::US, Value::U16(v))),
        proptest::collection::vec(any::<u32>(), 1..5).prop_map(|v| (Vr::UL, Value::U32(v))),
    ];
    (tag, value).prop_map(|(tag, (vr, value))| DataElement::new(tag, vr, value))
}

fn dataset(depth: u32) -> BoxedStrategy<DataSet> {
    let leaves = || proptest::collection::vec(leaf_element(), 0..12);
    if depth == 0 {
        return leaves().prop_map(|els| els.into_iter().fold(DataSet::new(), DataSet::with)).boxed();
    }
    (leaves(), proptest::collection::vec((0x0008u16..0x0050, proptest::collection::vec(dataset(depth - 1), 0..3)), 0..3))
        .prop_map(|(els, seqs)| {
            let mut ds = els.into_iter().fold(DataSet::new(), DataSet::with);
            for (i, (g, items)) in seqs.into_iter().enumerate() {
                ds.insert(DataElement::sequence(Tag::new(g, 0xFF00 + i as u16), items));
            }
            ds
        })
        .boxed()
}

fn site_vault() -> (Vault, String, i64) {
    let v = Vault::in_memory(VaultConfig::site("S01"), VaultSecrets::insecure_for_testing("props"));
    let r = v.register_client(&Registration::new("9434765919", "MRN1", "T1")).unwrap();
    (v, r.pseudonym, r.date_offset_days)
}

fn mammogram(study: &str, series: NaiveDate, study_date: NaiveDate, birth: NaiveDate) -> DataSet {
    DataSet::new()
        .with(DataElement::text(tags::PATIENT_NAME, Vr::PN, "DOE^JANE"))
        .with(DataElement::text(tags::PATIENT_ID, Vr::LO, "MRN1"))
        .with(DataElement::text(tags::PATIENT_BIRTH_DATE, Vr::DA, da(birth)))
        .with(DataElement::text(tags::STUDY_DATE, Vr::DA, da(study_date)))
        .with(DataElement::text(tags::SERIES_DATE, Vr::DA, da(series)))
        .with(DataElement::text(tags::STUDY_TIME, Vr::TM, "101500"))
        .with(DataElement::text(tags::STUDY_INSTANCE_UID, Vr::UI, study))
        .with(DataElement::text(tags::SOP_INSTANCE_UID, Vr::UI, format!("{study}.1.1")))
        .with(DataElement::text(tags::MODALITY, Vr::CS, "MG"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dicom_serialize_then_parse_is_identity(ds in dataset(2)) {
        let file = serialize_file(&ds).unwrap();
        prop_assert_eq!(&parse_dataset(&file).unwrap(), &ds);
        // zero bytes is not an object, so a bare empty data set has no encoding
        if !ds.is_empty() {
            let bare = serialize_dataset(&ds).unwrap();
            prop_assert_eq!(parse_dataset(&bare).unwrap(), ds);
        }
    }

    #[test]
    fn offset_preserves_every_interval(a in 0i64..40_000, b in 0i64..40_000, off in -3650i64..3650) {
        let (da_a, da_b) = (date(a), date(b));
        let joined = offset_date_value(&format!("{}\\{}", da(da_a), da(da_b)), off);
        let parts: Vec<NaiveDate> = joined.split('\\').map(read_da).collect();
        prop_assert_eq!(parts[0] - parts[1], da_a - da_b);
        prop_assert_eq!(parts[0] - da_a, Duration::days(off));
    }

    #[test]
    fn birth_date_keeps_only_the_year(d in 0i64..40_000) {
        let birth = date(d);
        let out = birth_date_value(&da(birth));
        prop_assert_eq!(out, format!("{}0101", birth.format("%Y")));
    }

    #[test]
    fn deid_is_deterministic_and_interval_preserving(
        study in uid_strategy(),
        s in 20_000i64..30_000,
        gap in -400i64..400,
        birth in 0i64..10_000,
    ) {
        let policy = Policy::builtin();
        let src = mammogram(&study, date(s + gap), date(s), date(birth));
        let (v1, pseudonym, offset) = site_vault();
        let (v2, _, _) = site_vault();
        let (out1, _) = apply(&src, &v1, Stage::Primary, &policy).unwrap();
        let (out2, _) = apply(&src, &v2, Stage::Primary, &policy).unwrap();
        let (again, _) = apply(&src, &v1, Stage::Primary, &policy).unwrap();
        prop_assert_eq!(serialize_dataset(&out1).unwrap(), serialize_dataset(&out2).unwrap());
        prop_assert_eq!(&out1, &again);

        prop_assert_eq!(out1.text(tags::PATIENT_ID), Some(pseudonym.as_str()));
        let study_out = read_da(out1.text(tags::STUDY_DATE).unwrap());
        let series_out = read_da(out1.text(tags::SERIES_DATE).unwrap());
        prop_assert_eq!(series_out - study_out, Duration::days(gap));
        prop_assert_eq!(study_out - date(s), Duration::days(offset));
        let new_uid = out1.text(tags::STUDY_INSTANCE_UID).unwrap();
        prop_assert_ne!(new_uid, study.as_str());
        prop_assert!(check_uid(new_uid).is_ok());
    }

    #[test]
    fn uid_remap_is_stable_injective_and_well_formed(uids in proptest::collection::hash_set(uid_strategy(), 1..60)) {
        let (v, owner, _) = site_vault();
        let mapped: Vec<String> = uids.iter().map(|u| v.remap(u, &owner).unwrap()).collect();
        let distinct: HashSet<&String> = mapped.iter().collect();
        prop_assert_eq!(distinct.len(), uids.len());
        for (u, m) in uids.iter().zip(&mapped) {
            prop_assert!(check_uid(m).is_ok(), "{}", m);
            prop_assert!(m.len() <= 64);
            prop_assert!(!uids.contains(m));
            prop_assert_eq!(&v.remap(u, &owner).unwrap(), m);
        }
    }
}
