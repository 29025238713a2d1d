use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

/// Directory layout of one collection site.
#[derive(Clone, Debug)]
pub struct SiteLayout {
    pub root: PathBuf,
}

impl SiteLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        SiteLayout { root: root.into() }
    }

    pub fn vault(&self) -> PathBuf {
        self.root.join("vault")
    }
    pub fn incoming(&self) -> PathBuf {
        self.root.join("incoming")
    }
    pub fn staging(&self) -> PathBuf {
        self.root.join("staging")
    }
    pub fn quarantine(&self) -> PathBuf {
        self.root.join("quarantine")
    }
    pub fn state(&self) -> PathBuf {
        self.root.join("state")
    }

    pub fn create(&self) -> io::Result<()> {
        for d in [self.vault(), self.incoming(), self.staging(), self.quarantine(), self.state()] {
            fs::create_dir_all(d)?;
        }
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Writes via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let parent = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("file")
    ));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Sorted immediate subdirectories, skipping temp entries.
pub fn subdirs(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    match fs::read_dir(dir) {
        Ok(rd) => {
            for e in rd {
                let e = e?;
                let name = e.file_name();
                let name = name.to_string_lossy();
                if e.file_type()?.is_dir() && !name.starts_with(".tmp") && !name.starts_with('_') {
                    out.push(e.path());
                }
            }
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(e),
    }
    out.sort();
    Ok(out)
}

/// Sorted regular files directly in `dir`, skipping temp entries.
pub fn files_in(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir)? {
        let e = e?;
        if e.file_type()?.is_file() && !e.file_name().to_string_lossy().starts_with(".tmp") {
            out.push(e.path());
        }
    }
    out.sort();
    Ok(out)
}

/// Removes temp leftovers (`.tmp*`) anywhere under `dir`.
pub fn sweep_temp(dir: &Path) -> io::Result<usize> {
    let mut n = 0;
    let Ok(rd) = fs::read_dir(dir) else { return Ok(0) };
    for e in rd {
        let e = e?;
        let path = e.path();
        let is_tmp = e.file_name().to_string_lossy().starts_with(".tmp");
        if e.file_type()?.is_dir() {
            if is_tmp {
                fs::remove_dir_all(&path)?;
                n += 1;
            } else {
                n += sweep_temp(&path)?;
            }
        } else if is_tmp {
            fs::remove_file(&path)?;
            n += 1;
        }
    }
    Ok(n)
}

pub fn remove_dir_if_exists(dir: &Path) -> io::Result<bool> {
    match fs::remove_dir_all(dir) {
        Ok(()) => Ok(true),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(e),
    }
}

/// Every regular file under `dir`, recursively, sorted.
pub fn walk_files(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(rd) = fs::read_dir(&d) else { continue };
        for e in rd {
            let e = e?;
            if e.file_type()?.is_dir() {
                stack.push(e.path());
            } else {
                out.push(e.path());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Accepts UIDs and hex ids only, so network-supplied names cannot escape a directory.
pub fn safe_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 128
        && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'.' || b == b'-' || b == b'_')
        && !name.starts_with('.')
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn safe_names() {
        assert!(safe_name("1.2.3"));
        assert!(safe_name("ab12-cd"));
        assert!(!safe_name("../x"));
        assert!(!safe_name(".tmp"));
        assert!(!safe_name("a/b"));
        assert!(!safe_name(""));
    }

    #[test]
    fn atomic_write_and_sweep() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("a/b.txt");
        write_atomic(&p, b"hi").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"hi");
        fs::create_dir_all(d.path().join("a/.tmp-x")).unwrap();
        fs::write(d.path().join("a/.tmp-y"), b"").unwrap();
        assert_eq!(sweep_temp(d.path()).unwrap(), 2);
        assert_eq!(walk_files(d.path()).unwrap(), vec![p]);
    }
}
