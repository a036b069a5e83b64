use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ipr_core::{ContentHash, ImageRef};

use crate::error::HttpError;

pub const CAS_SCHEME: &str = "cas://";

/// Content-addressed blob store. Blobs live at `<root>/<hh>/<hash>` where
/// `hh` is the first byte of the SHA-256 hex digest.
#[derive(Debug, Clone)]
pub struct ContentStore {
    root: PathBuf,
}

impl ContentStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, HttpError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| store_err(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_of(&self, hash: &ContentHash) -> PathBuf {
        let hex = hash.to_hex();
        self.root.join(&hex[..2]).join(hex)
    }

    /// Stores `bytes` unless a blob with the same hash already exists.
    pub fn put(&self, bytes: &[u8]) -> Result<ImageRef, HttpError> {
        let hash = ContentHash::of_bytes(bytes);
        let path = self.path_of(&hash);
        if !path.exists() {
            let dir = path.parent().expect("blob path has a parent");
            fs::create_dir_all(dir).map_err(|e| store_err(dir, e))?;
            let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| store_err(dir, e))?;
            tmp.write_all(bytes)
                .and_then(|_| tmp.as_file().sync_all())
                .map_err(|e| store_err(tmp.path(), e))?;
            tmp.persist(&path).map_err(|e| store_err(&path, e.error))?;
        }
        Ok(ImageRef::External { uri: format!("{CAS_SCHEME}{}", hash.to_hex()), hash })
    }

    /// Reads the bytes behind an external image and checks their hash.
    pub fn get(&self, image: &ImageRef) -> Result<Vec<u8>, HttpError> {
        let ImageRef::External { uri, hash } = image else {
            return Err(HttpError::Store("synthetic images have no stored bytes".into()));
        };
        let path = match uri.strip_prefix(CAS_SCHEME) {
            Some(_) => self.path_of(hash),
            None => PathBuf::from(uri.strip_prefix("file://").unwrap_or(uri)),
        };
        let bytes = fs::read(&path).map_err(|e| store_err(&path, e))?;
        let actual = ContentHash::of_bytes(&bytes);
        if &actual != hash {
            return Err(HttpError::Store(format!(
                "{} has hash {} but the reference says {}",
                path.display(),
                actual,
                hash
            )));
        }
        Ok(bytes)
    }

    pub fn contains(&self, hash: &ContentHash) -> bool {
        self.path_of(hash).exists()
    }
}

fn store_err(path: &Path, e: std::io::Error) -> HttpError {
    HttpError::Store(format!("{}: {e}", path.display()))
}
