#![allow(dead_code)]

pub mod uat;

use std::io::Read;
use std::sync::mpsc;

use imgcollect_api::accounts::{AccountStore, Role};
use imgcollect_api::{ApiConfig, AppState};
use imgcollect_core::sim::CorpusSpec;
use imgcollect_testkit::SiteHarness;
use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde_json::Value;

pub const ADMIN: (&str, &str) = ("admin", "admin-pass-1");
pub const UPLOADER: (&str, &str) = ("uploader", "uploader-pass-1");

/// A site plus the admin API serving it on a loopback port.
pub struct Api {
    pub site: SiteHarness,
    pub base: String,
    http: Client,
}

impl Api {
    pub fn start(spec: CorpusSpec) -> Api {
        let site = SiteHarness::new(spec);
        let accounts = AccountStore::in_memory();
        accounts.add_user(ADMIN.0, ADMIN.1, Role::Admin).unwrap();
        accounts.add_user(UPLOADER.0, UPLOADER.1, Role::Uploader).unwrap();
        let state = AppState::new(site.shared_collector(), accounts, &ApiConfig::default());
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                tx.send(listener.local_addr().unwrap()).unwrap();
                imgcollect_api::serve(listener, state).await.unwrap();
            });
        });
        let addr = rx.recv().unwrap();
        Api {
            site,
            base: format!("http://{addr}"),
            http: Client::new(),
        }
    }

    pub fn login(&self, user: (&str, &str)) -> String {
        let (st, v) = self.post(None, "/api/login", serde_json::json!({"username": user.0, "password": user.1}));
        assert_eq!(st, StatusCode::OK, "{v}");
        v["token"].as_str().unwrap().to_string()
    }

    fn req(&self, method: reqwest::Method, token: Option<&str>, path: &str) -> reqwest::blocking::RequestBuilder {
        let r = self.http.request(method, format!("{}{path}", self.base));
        match token {
            Some(t) => r.bearer_auth(t),
            None => r,
        }
    }

    fn json_of(resp: Response) -> (StatusCode, Value) {
        let st = resp.status();
        let text = resp.text().unwrap();
        (st, serde_json::from_str(&text).unwrap_or(Value::String(text)))
    }

    pub fn post(&self, token: Option<&str>, path: &str, body: Value) -> (StatusCode, Value) {
        Self::json_of(self.req(reqwest::Method::POST, token, path).json(&body).send().unwrap())
    }

    pub fn post_text(&self, token: Option<&str>, path: &str, body: &str) -> (StatusCode, Value) {
        Self::json_of(
            self.req(reqwest::Method::POST, token, path)
                .header("content-type", "text/csv")
                .body(body.to_string())
                .send()
                .unwrap(),
        )
    }

    pub fn get(&self, token: Option<&str>, path: &str) -> (StatusCode, Value) {
        Self::json_of(self.req(reqwest::Method::GET, token, path).send().unwrap())
    }

    pub fn get_bytes(&self, token: Option<&str>, path: &str) -> (StatusCode, String, Vec<u8>) {
        let r = self.req(reqwest::Method::GET, token, path).send().unwrap();
        let st = r.status();
        let cd = r
            .headers()
            .get("content-disposition")
            .map(|v| v.to_str().unwrap().to_string())
            .unwrap_or_default();
        (st, cd, r.bytes().unwrap().to_vec())
    }

    pub fn raw(&self, method: &str, token: Option<&str>, path: &str) -> StatusCode {
        let m = reqwest::Method::from_bytes(method.as_bytes()).unwrap();
        let mut r = self.req(m.clone(), token, path);
        if m == reqwest::Method::POST {
            r = r.json(&serde_json::json!({}));
        }
        r.send().unwrap().status()
    }
}

/// File name → contents of a zip download.
pub fn unzip(bytes: &[u8]) -> Vec<(String, String)> {
    let mut z = zip::ZipArchive::new(std::io::Cursor::new(bytes)).unwrap();
    (0..z.len())
        .map(|i| {
            let mut f = z.by_index(i).unwrap();
            let mut s = String::new();
            f.read_to_string(&mut s).unwrap();
            (f.name().to_string(), s)
        })
        .collect()
}

/// The batch fixture from the operator acceptance script. Row 3's date is the script's
/// day/month nonsense, which is also not ISO.
pub const BATCH_FIXTURE: &str = "Primary ID,Secondary ID,Trial Code,Date Enrolled
1111111111,Test1,UAT-TESTING-02,
2222222222,Test2,UAT-TESTING-03,44/33/2043
,Test3,UAT-TESTING-04,
1234567890,Test4,UAT-TESTING-05,
This is not a number,Test5,UAT-TESTING-06,
3333333333,Test6,,
";

pub const BATCH_FIXED: &str = "Primary ID,Secondary ID,Trial Code,Date Enrolled
1111111111,Test1,UAT-TESTING-02,
";

/// Every restricted route with its method.
pub const RESTRICTED: &[(&str, &str)] = &[
    ("POST", "/api/logout"),
    ("GET", "/api/session"),
    ("POST", "/api/password"),
    ("POST", "/api/clients"),
    ("POST", "/api/clients/batch"),
    ("GET", "/api/clients/batch/template"),
    ("POST", "/api/clients/check"),
    ("GET", "/api/download"),
    ("POST", "/api/optout"),
    ("GET", "/api/health"),
    ("POST", "/api/collect/run"),
    ("POST", "/api/collect/transfer"),
    ("POST", "/api/collect/refresh"),
];
