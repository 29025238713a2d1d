//! Operator acceptance scripts, driven headlessly against a live API. Each panics on the
//! first deviation from the documented outcome.

use std::collections::BTreeSet;

use imgcollect_core::sim::CorpusSpec;
use reqwest::StatusCode;
use serde_json::json;

use super::{unzip, Api, ADMIN, BATCH_FIXED, BATCH_FIXTURE, UPLOADER};

pub fn empty_site() -> CorpusSpec {
    CorpusSpec {
        n_clients: 0,
        ..CorpusSpec::default()
    }
}

pub fn small_site(n: usize) -> CorpusSpec {
    CorpusSpec {
        n_clients: n,
        seed: 5,
        ..CorpusSpec::default()
    }
}

pub fn login_then_logout_locks_restricted_pages() {
    let api = Api::start(empty_site());
    let (st, v) = api.post(None, "/api/login", json!({"username": "admin", "password": "nope-nope"}));
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    assert_eq!(v["error"], "bad-credentials");
    let (st, _) = api.post(None, "/api/login", json!({"username": "ghost", "password": "whatever1"}));
    assert_eq!(st, StatusCode::UNAUTHORIZED);

    let t = api.login(ADMIN);
    let (st, v) = api.get(Some(&t), "/api/session");
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["role"], "admin");
    // the register page is reachable while logged in
    let (st, v) = api.post(Some(&t), "/api/clients", json!({"primary_id": "abc123"}));
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "invalid-national-id");

    let (st, v) = api.post(Some(&t), "/api/logout", json!({}));
    assert_eq!(st, StatusCode::OK);
    assert!(v["message"].as_str().unwrap().contains("logged out"));
    let (st, v) = api.post(Some(&t), "/api/clients", json!({"primary_id": "9999999999", "trial_code": "X"}));
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    assert_eq!(v["error"], "unauthorized");
}

pub fn change_password_script() {
    let api = Api::start(empty_site());
    let t = api.login(ADMIN);
    let change = |current: &str, new: &str| api.post(Some(&t), "/api/password", json!({"current": current, "new": new}));

    let (st, v) = change("wrong", "");
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "bad-credentials");
    let (st, _) = change("wrong", "short");
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, v) = change("wrong", "long-enough-1");
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "bad-credentials");
    let (st, v) = change(ADMIN.1, "tiny");
    assert_eq!(v["error"], "weak-password", "{st}");
    let (st, v) = change(ADMIN.1, "brand-new-pass");
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["message"], "password changed");
    // the session survives a failed attempt, and the new password works after logout
    api.post(Some(&t), "/api/logout", json!({}));
    let (st, _) = api.post(None, "/api/login", json!({"username": "admin", "password": ADMIN.1}));
    assert_eq!(st, StatusCode::UNAUTHORIZED);
    api.login(("admin", "brand-new-pass"));
}

pub fn register_client_script() {
    let api = Api::start(empty_site());
    let t = api.login(UPLOADER);
    let reg = |body| api.post(Some(&t), "/api/clients", body);

    let (_, v) = reg(json!({"primary_id": "abc123", "trial_code": "UAT-TESTING-01"}));
    assert_eq!(v["error"], "invalid-national-id");
    let (_, v) = reg(json!({"primary_id": "1234567890", "trial_code": "UAT-TESTING-01"}));
    assert_eq!(v["error"], "invalid-national-id");
    assert!(v["errors"][0]["detail"].as_str().unwrap().contains("checksum-fail"));
    let (_, v) = reg(json!({"primary_id": "9999999999"}));
    assert_eq!(v["error"], "missing-trial-code");
    let (st, v) = reg(json!({"primary_id": "9999999999", "trial_code": "UAT-TESTING-01"}));
    assert_eq!(st, StatusCode::CREATED, "{v}");
    assert_eq!(v["pseudonym"], "S01-00000001");
    let (_, v) = reg(json!({"primary_id": "8888888888", "trial_code": "UAT-TESTING-01"}));
    assert_eq!(v["error"], "duplicate-trial-code");
    let (_, v) = reg(json!({"primary_id": "9999999999", "trial_code": "UAT-TESTING-02"}));
    assert_eq!(v["error"], "already-registered");
    let (_, v) = reg(json!({"primary_id": "8888888888", "trial_code": "UAT-TESTING-09", "date_enrolled": "next tuesday"}));
    assert_eq!(v["error"], "invalid-date");
    let (st, _) = reg(json!({"primary_id": "8888888888", "trial_code": "UAT-TESTING-09", "date_enrolled": "2024-03-01"}));
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(api.site.collector().vault().record_count(), 2);
}

pub fn batch_upload_script() {
    let api = Api::start(empty_site());
    let t = api.login(UPLOADER);
    let (st, bytes_cd, template) = api.get_bytes(Some(&t), "/api/clients/batch/template");
    assert_eq!(st, StatusCode::OK);
    assert!(bytes_cd.contains("attachment"));
    assert_eq!(String::from_utf8(template).unwrap().trim(), "Primary ID,Secondary ID,Trial Code,Date Enrolled");

    let (st, v) = api.post_text(Some(&t), "/api/clients/batch", BATCH_FIXTURE);
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let errors = v["errors"].as_array().unwrap();
    let got: Vec<(u64, &str)> = errors
        .iter()
        .map(|e| (e["row_number"].as_u64().unwrap(), e["reason"].as_str().unwrap()))
        .collect();
    assert_eq!(
        got,
        vec![
            (3, "invalid-date"),
            (4, "missing-primary-id"),
            (5, "invalid-national-id"),
            (6, "invalid-national-id"),
            (7, "missing-trial-code"),
        ]
    );
    assert!(errors[2]["detail"].as_str().unwrap().contains("checksum-fail"));
    assert!(errors[3]["detail"].as_str().unwrap().contains("non-numeric"));
    assert_eq!(api.site.collector().vault().record_count(), 0);

    let (st, v) = api.post_text(Some(&t), "/api/clients/batch", BATCH_FIXED);
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["accepted"], 1);
    assert_eq!(api.site.collector().vault().record_count(), 1);

    let (_, v) = api.post_text(Some(&t), "/api/clients/batch", "Primary ID,Secondary ID,Trial Code,Date Enrolled\n");
    assert_eq!(v["accepted"], 0);
    // trial code already taken in the vault
    let (_, v) = api.post_text(Some(&t), "/api/clients/batch", "Primary ID,Secondary ID,Trial Code\n9999999999,X,UAT-TESTING-02\n");
    assert_eq!(v["errors"][0]["reason"], "duplicate-trial-code");
    assert_eq!(v["errors"][0]["row_number"], 2);
}

pub fn download_tables_without_identifiers() {
    let api = Api::start(small_site(3));
    let t = api.login(UPLOADER);
    let (st, cd, zip) = api.get_bytes(Some(&t), "/api/download");
    assert_eq!(st, StatusCode::OK);
    assert!(cd.contains(".zip"));
    let tables = unzip(&zip);
    let names: BTreeSet<&str> = tables.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, BTreeSet::from(["overview.csv", "clients.csv", "studies.csv", "images.csv"]));
    for (name, body) in &tables {
        if name != "overview.csv" {
            assert_eq!(body.lines().count(), 1, "{name} should be header only");
        }
    }

    let admin = api.login(ADMIN);
    let (st, v) = api.post(Some(&admin), "/api/collect/run", json!({"since": "1970-01-01T00:00:00Z", "include_outcomes": ["normal", "recall", "biopsy-benign", "biopsy-malignant", "pending"], "ignore_window": true}));
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["staged"], 3);

    let (_, _, zip) = api.get_bytes(Some(&t), "/api/download?sections=images,studies");
    let tables = unzip(&zip);
    assert_eq!(tables.len(), 2);
    let images = &tables.iter().find(|(n, _)| n == "images.csv").unwrap().1;
    assert_eq!(images.lines().count(), 1 + 3 * 4);
    let corpus = api.site.corpus();
    for (_, body) in &tables {
        for c in &corpus.clients {
            assert!(!body.contains(&c.national_id) && !body.contains(&c.local_id));
        }
        for s in &corpus.studies {
            assert!(!body.contains(&s.study_uid));
        }
    }
    let (_, _, zip) = api.get_bytes(Some(&t), "/api/download?sections=clients");
    let tables = unzip(&zip);
    assert_eq!(tables.len(), 1);
    assert_eq!(tables[0].1.lines().count(), 4);
    let (st, _) = api.get(Some(&t), "/api/download?sections=tabs");
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

pub fn check_clients_script() {
    let api = Api::start(empty_site());
    let t = api.login(UPLOADER);
    api.post(Some(&t), "/api/clients", json!({"primary_id": "9999999999", "secondary_id": "H-77", "trial_code": "UAT-TESTING-01"}));
    let (st, v) = api.post(
        Some(&t),
        "/api/clients/check",
        json!({"terms": "1111111111 3333333333\nTHIS_IS_NOT_A_NUMBER, 9999999999"}),
    );
    assert_eq!(st, StatusCode::OK);
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let registered: Vec<&str> = rows.iter().filter(|r| r["registered"] == true).map(|r| r["term"].as_str().unwrap()).collect();
    assert_eq!(registered, vec!["9999999999"]);
    // search by secondary id
    let (_, v) = api.post(Some(&t), "/api/clients/check", json!({"terms": ["H-77"]}));
    assert_eq!(v["rows"][0]["pseudonym"], "S01-00000001");
    let (_, v) = api.post(Some(&t), "/api/clients/check", json!({"terms": ""}));
    assert_eq!(v["rows"].as_array().unwrap().len(), 0);

    let resp = reqwest::blocking::Client::new()
        .post(format!("{}/api/clients/check?format=csv", api.base))
        .bearer_auth(&t)
        .json(&json!({"terms": "9999999999 THIS_IS_NOT_A_NUMBER"}))
        .send()
        .unwrap();
    assert!(resp.headers()["content-disposition"].to_str().unwrap().contains("attachment"));
    let csv = resp.text().unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("9999999999,true"));
}
