use std::collections::HashSet;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

/// Places where a test can make the collector fail as if the process had died.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultPoint {
    AfterRegister,
    AfterRetrieve,
    AfterDeid,
    MidStageWrite,
    AfterStageRename,
    BeforeVaultRecord,
    TransferAfterCopy,
    TransferCorruptCopy,
    TransferAfterRename,
    TransferAfterStagingDelete,
}

impl FaultPoint {
    pub const ALL: [FaultPoint; 10] = [
        FaultPoint::AfterRegister,
        FaultPoint::AfterRetrieve,
        FaultPoint::AfterDeid,
        FaultPoint::MidStageWrite,
        FaultPoint::AfterStageRename,
        FaultPoint::BeforeVaultRecord,
        FaultPoint::TransferAfterCopy,
        FaultPoint::TransferCorruptCopy,
        FaultPoint::TransferAfterRename,
        FaultPoint::TransferAfterStagingDelete,
    ];
}

/// One-shot faults: each armed point fires once, then disarms.
#[derive(Default)]
pub struct FaultPlan {
    armed: Mutex<HashSet<FaultPoint>>,
}

impl FaultPlan {
    pub fn arm(&self, point: FaultPoint) {
        self.armed.lock().unwrap_or_else(|p| p.into_inner()).insert(point);
    }

    pub fn take(&self, point: FaultPoint) -> bool {
        self.armed.lock().unwrap_or_else(|p| p.into_inner()).remove(&point)
    }
}
