//! Tags referenced by name in code. The de-identification table lives in the policy data file.

use super::Tag;

pub const FILE_META_GROUP_LENGTH: Tag = Tag::new(0x0002, 0x0000);
pub const MEDIA_STORAGE_SOP_CLASS_UID: Tag = Tag::new(0x0002, 0x0002);
pub const MEDIA_STORAGE_SOP_INSTANCE_UID: Tag = Tag::new(0x0002, 0x0003);
pub const TRANSFER_SYNTAX_UID: Tag = Tag::new(0x0002, 0x0010);
pub const IMPLEMENTATION_CLASS_UID: Tag = Tag::new(0x0002, 0x0012);

pub const IMAGE_TYPE: Tag = Tag::new(0x0008, 0x0008);
pub const SOP_CLASS_UID: Tag = Tag::new(0x0008, 0x0016);
pub const SOP_INSTANCE_UID: Tag = Tag::new(0x0008, 0x0018);
pub const STUDY_DATE: Tag = Tag::new(0x0008, 0x0020);
pub const SERIES_DATE: Tag = Tag::new(0x0008, 0x0021);
pub const ACQUISITION_DATETIME: Tag = Tag::new(0x0008, 0x002A);
pub const STUDY_TIME: Tag = Tag::new(0x0008, 0x0030);
pub const ACCESSION_NUMBER: Tag = Tag::new(0x0008, 0x0050);
pub const CONVERSION_TYPE: Tag = Tag::new(0x0008, 0x0064);
pub const PRESENTATION_INTENT_TYPE: Tag = Tag::new(0x0008, 0x0068);
pub const MODALITY: Tag = Tag::new(0x0008, 0x0060);
pub const MANUFACTURER: Tag = Tag::new(0x0008, 0x0070);
pub const REFERRING_PHYSICIAN_NAME: Tag = Tag::new(0x0008, 0x0090);
pub const CONSULTING_PHYSICIAN_NAME: Tag = Tag::new(0x0008, 0x009C);
pub const STATION_NAME: Tag = Tag::new(0x0008, 0x1010);
pub const SERIES_DESCRIPTION: Tag = Tag::new(0x0008, 0x103E);
pub const MANUFACTURER_MODEL_NAME: Tag = Tag::new(0x0008, 0x1090);
pub const REFERENCED_IMAGE_SEQUENCE: Tag = Tag::new(0x0008, 0x1140);
pub const REFERENCED_SOP_CLASS_UID: Tag = Tag::new(0x0008, 0x1150);
pub const REFERENCED_SOP_INSTANCE_UID: Tag = Tag::new(0x0008, 0x1155);
pub const SOURCE_IMAGE_SEQUENCE: Tag = Tag::new(0x0008, 0x2112);

pub const PATIENT_NAME: Tag = Tag::new(0x0010, 0x0010);
pub const PATIENT_ID: Tag = Tag::new(0x0010, 0x0020);
pub const PATIENT_BIRTH_DATE: Tag = Tag::new(0x0010, 0x0030);
pub const PATIENT_SEX: Tag = Tag::new(0x0010, 0x0040);
pub const PREGNANCY_STATUS: Tag = Tag::new(0x0010, 0x21C0);

pub const STUDY_INSTANCE_UID: Tag = Tag::new(0x0020, 0x000D);
pub const SERIES_INSTANCE_UID: Tag = Tag::new(0x0020, 0x000E);
pub const SERIES_NUMBER: Tag = Tag::new(0x0020, 0x0011);
pub const INSTANCE_NUMBER: Tag = Tag::new(0x0020, 0x0013);

pub const SAMPLES_PER_PIXEL: Tag = Tag::new(0x0028, 0x0002);
pub const PHOTOMETRIC_INTERPRETATION: Tag = Tag::new(0x0028, 0x0004);
pub const ROWS: Tag = Tag::new(0x0028, 0x0010);
pub const COLUMNS: Tag = Tag::new(0x0028, 0x0011);
pub const BITS_ALLOCATED: Tag = Tag::new(0x0028, 0x0100);
pub const BITS_STORED: Tag = Tag::new(0x0028, 0x0101);
pub const HIGH_BIT: Tag = Tag::new(0x0028, 0x0102);
pub const PIXEL_REPRESENTATION: Tag = Tag::new(0x0028, 0x0103);

pub const SCHEDULED_STEP_COMMENTS: Tag = Tag::new(0x0040, 0x0400);

pub const PIXEL_DATA: Tag = Tag::new(0x7FE0, 0x0010);

pub const ITEM: Tag = Tag::new(0xFFFE, 0xE000);
pub const ITEM_DELIMITATION: Tag = Tag::new(0xFFFE, 0xE00D);
pub const SEQUENCE_DELIMITATION: Tag = Tag::new(0xFFFE, 0xE0DD);

/// Standard SOP classes used by the simulator and the curation heuristics.
pub mod sop_class {
    pub const DIGITAL_MAMMOGRAPHY_PRESENTATION: &str = "1.2.840.10008.5.1.4.1.1.1.2";
    pub const DIGITAL_MAMMOGRAPHY_PROCESSING: &str = "1.2.840.10008.5.1.4.1.1.1.2.1";
    pub const SECONDARY_CAPTURE: &str = "1.2.840.10008.5.1.4.1.1.7";
    pub const ULTRASOUND: &str = "1.2.840.10008.5.1.4.1.1.6.1";
}
