//! Content-addressed image store: `images/<sha256-hex>.png`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::domain::ImageRef;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("image `{0}` not in store")]
    Missing(ImageRef),
    #[error("image `{expected}` has digest `{actual}` on disk")]
    Corrupt { expected: ImageRef, actual: ImageRef },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ImageStore {
    root: PathBuf,
}

impl ImageStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(ImageStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, image: &ImageRef) -> PathBuf {
        self.root.join(format!("{image}.png"))
    }

    pub fn contains(&self, image: &ImageRef) -> bool {
        self.path_of(image).exists()
    }

    /// Store bytes under their digest. Writing the same bytes twice is a no-op.
    pub fn put(&self, bytes: &[u8]) -> Result<ImageRef, StoreError> {
        let image = ImageRef::of_bytes(bytes);
        let path = self.path_of(&image);
        if path.exists() {
            return Ok(image);
        }
        let tmp = self.root.join(format!(".{image}.{}.tmp", std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.flush()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(image)
    }

    /// Read bytes and verify they still hash to `image`.
    pub fn get(&self, image: &ImageRef) -> Result<Vec<u8>, StoreError> {
        let path = self.path_of(image);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::Missing(image.clone())),
            Err(e) => return Err(e.into()),
        };
        let actual = ImageRef::of_bytes(&bytes);
        if &actual != image {
            return Err(StoreError::Corrupt { expected: image.clone(), actual });
        }
        Ok(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_get_and_dedup() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path().join("images")).unwrap();
        let a = store.put(b"pixels").unwrap();
        let b = store.put(b"pixels").unwrap();
        assert_eq!(a, b);
        assert_eq!(store.get(&a).unwrap(), b"pixels");
        assert!(store.path_of(&a).file_name().unwrap().to_str().unwrap().ends_with(".png"));
        let missing = ImageRef::of_bytes(b"other");
        assert!(matches!(store.get(&missing), Err(StoreError::Missing(_))));
    }

    #[test]
    fn corrupt_file_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let a = store.put(b"pixels").unwrap();
        fs::write(store.path_of(&a), b"tampered").unwrap();
        assert!(matches!(store.get(&a), Err(StoreError::Corrupt { .. })));
    }
}
