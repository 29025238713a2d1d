pub mod deid;
pub mod dicom;
pub mod national_id;
pub mod collector;
pub mod curation;
pub mod vault;
pub mod sim;
