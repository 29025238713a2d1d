mod common;

use common::uat::{self, empty_site, small_site};
use common::{Api, ADMIN, RESTRICTED, UPLOADER};
use imgcollect_testkit::files_under;
use reqwest::StatusCode;
use serde_json::json;

#[test]
fn login_then_logout_locks_restricted_pages() {
    uat::login_then_logout_locks_restricted_pages();
}

#[test]
fn change_password_script() {
    uat::change_password_script();
}

#[test]
fn register_client_script() {
    uat::register_client_script();
}

#[test]
fn batch_upload_script() {
    uat::batch_upload_script();
}

#[test]
fn download_tables_without_identifiers() {
    uat::download_tables_without_identifiers();
}

#[test]
fn check_clients_script() {
    uat::check_clients_script();
}

#[test]
fn every_restricted_route_needs_a_session() {
    let api = Api::start(empty_site());
    for (method, path) in RESTRICTED {
        assert_eq!(api.raw(method, None, path), StatusCode::UNAUTHORIZED, "{method} {path} without token");
        assert_eq!(api.raw(method, Some("forged"), path), StatusCode::UNAUTHORIZED, "{method} {path} forged");
    }
    // cookie sessions work too
    let t = api.login(UPLOADER);
    let resp = reqwest::blocking::Client::new()
        .get(format!("{}/api/session", api.base))
        .header("cookie", format!("other=1; imgcollect_session={t}"))
        .send()
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
}

#[test]
fn opt_out_needs_admin_and_cascades() {
    let api = Api::start(small_site(2));
    let admin = api.login(ADMIN);
    let up = api.login(UPLOADER);
    let nid = api.site.corpus().clients[0].national_id.clone();

    let (st, _) = api.post(Some(&up), "/api/optout", json!({"national_id": nid}));
    assert_eq!(st, StatusCode::FORBIDDEN);
    let (st, v) = api.post(Some(&admin), "/api/optout", json!({"national_id": "1234567890"}));
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "invalid-national-id");
    let (st, v) = api.post(Some(&admin), "/api/optout", json!({"national_id": "9434765919"}));
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["vault_rows_removed"], 0);

    let (st, _) = api.post(Some(&admin), "/api/collect/run", json!({"since": "1970-01-01T00:00:00Z", "include_outcomes": ["normal", "recall", "biopsy-benign", "biopsy-malignant", "pending"], "ignore_window": true}));
    assert_eq!(st, StatusCode::OK);
    let pseudonym = api.site.collector().vault().record_by_national_id(&nid).unwrap().pseudonym;
    assert!(api.site.staging().join(&pseudonym).is_dir());

    let (_, v) = api.post(Some(&admin), "/api/optout", json!({"national_id": nid}));
    assert_eq!(v["pseudonym"], pseudonym.as_str());
    assert!(v["vault_rows_removed"].as_u64().unwrap() >= 1);
    assert_eq!(v["staged_studies_removed"], 1);
    assert!(!api.site.staging().join(&pseudonym).exists());
    assert!(files_under(&api.site.staging()).iter().all(|p| !p.to_string_lossy().contains(&pseudonym)));

    let (_, v) = api.post(Some(&admin), "/api/optout", json!({"national_id": nid}));
    assert_eq!(v["vault_rows_removed"], 0);
    assert_eq!(v["staged_studies_removed"], 0);

    let (_, v) = api.post(Some(&admin), "/api/clients/check", json!({"terms": [nid]}));
    assert_eq!(v["rows"][0]["registered"], false);
    assert_eq!(v["rows"][0]["opted_out"], true);
}

#[test]
fn health_reports_version_disk_and_last_cycle() {
    let api = Api::start(small_site(1));
    let t = api.login(ADMIN);
    let (st, v) = api.get(Some(&t), "/api/health");
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
    assert!(v["disk_available_bytes"].as_u64().unwrap() > 0);
    assert!(v["last_cycle_at"].is_null());

    api.post(Some(&t), "/api/collect/run", json!({"since": "1970-01-01T00:00:00Z", "include_outcomes": ["normal", "recall", "biopsy-benign", "biopsy-malignant", "pending"], "ignore_window": true}));
    let (st, v) = api.post(Some(&t), "/api/collect/transfer", json!({}));
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["studies_pushed"], 1);
    let (_, v) = api.get(Some(&t), "/api/health");
    assert!(v["last_cycle_at"].is_string());
    assert!(v["last_transfer_at"].is_string());
    assert_eq!(v["last_cycle"]["staged"], 1);
    assert_eq!(v["studies_transferred"], 1);

    let up = api.login(UPLOADER);
    let (st, _) = api.post(Some(&up), "/api/collect/run", json!({}));
    assert_eq!(st, StatusCode::FORBIDDEN);
}
