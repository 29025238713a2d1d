//! Fixtures shared by the benchmarks: simulated images and a vault that knows their subjects.

use imgcollect_core::sim::{CorpusSpec, Simulator};
use imgcollect_core::vault::{Registration, Vault, VaultConfig, VaultSecrets};

/// Encoded images from a small simulated corpus at the given matrix size.
pub fn encoded_images(n_clients: usize, rows: u16) -> Vec<Vec<u8>> {
    let sim = Simulator::new(CorpusSpec {
        n_clients,
        rows,
        columns: rows,
        seed: 11,
        ..CorpusSpec::default()
    });
    let uids: Vec<String> = sim.with_corpus(|c| c.studies.iter().map(|s| s.study_uid.clone()).collect());
    uids.iter()
        .flat_map(|u| sim.study_files(u).expect("study files"))
        .map(|(_, bytes)| bytes)
        .collect()
}

/// Site vault with every client of the same corpus registered under their local id.
pub fn registered_vault(n_clients: usize) -> Vault {
    let sim = Simulator::new(CorpusSpec {
        n_clients,
        seed: 11,
        ..CorpusSpec::default()
    });
    let vault = Vault::in_memory(VaultConfig::site("S01"), VaultSecrets::insecure_for_testing("bench"));
    sim.with_corpus(|c| {
        for (i, client) in c.clients.iter().enumerate() {
            vault
                .register_client(&Registration::new(&client.national_id, &client.local_id, &format!("BENCH{i}")))
                .expect("register");
        }
    });
    vault
}

#[cfg(test)]
mod tests {
    use super::*;
    use imgcollect_core::deid::IdentityProvider;
    use imgcollect_core::dicom::{parse_dataset, tags};

    #[test]
    fn every_fixture_image_has_a_registered_subject() {
        let vault = registered_vault(3);
        let images = encoded_images(3, 32);
        assert!(!images.is_empty());
        for bytes in images {
            let ds = parse_dataset(&bytes).unwrap();
            assert!(vault.subject_for(ds.text(tags::PATIENT_ID).unwrap()).is_some());
        }
    }
}
