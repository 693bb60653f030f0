//! Absolute, normalized namespace paths.
//!
//! The store and the routing layer only ever see normalized paths:
//! absolute, no `.`/`..`, no duplicate or trailing slashes (except the
//! root itself, which is spelled `/`). Normalization happens at the
//! client boundary; everything below validates rather than repairs.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathError {
    #[error("path must be absolute: {0:?}")]
    NotAbsolute(String),
    #[error("path has an empty or invalid component: {0:?}")]
    BadComponent(String),
}

/// Check that `path` is absolute and normalized.
pub fn validate(path: &str) -> Result<(), PathError> {
    if !path.starts_with('/') {
        return Err(PathError::NotAbsolute(path.to_string()));
    }
    if path == "/" {
        return Ok(());
    }
    if path.ends_with('/') {
        return Err(PathError::BadComponent(path.to_string()));
    }
    for comp in path[1..].split('/') {
        if comp.is_empty() || comp == "." || comp == ".." {
            return Err(PathError::BadComponent(path.to_string()));
        }
    }
    Ok(())
}

/// Iterate the components of a normalized path (root excluded).
pub fn components(path: &str) -> impl Iterator<Item = &str> {
    path.strip_prefix('/')
        .unwrap_or(path)
        .split('/')
        .filter(|c| !c.is_empty())
}

pub fn depth(path: &str) -> usize {
    components(path).count()
}

/// Parent directory of a normalized path. The root is its own parent.
pub fn parent_dir(path: &str) -> &str {
    if path == "/" {
        return "/";
    }
    match path.rfind('/') {
        Some(0) => "/",
        Some(idx) => &path[..idx],
        None => "/",
    }
}

/// Final component of a normalized path (empty for the root).
pub fn leaf_name(path: &str) -> &str {
    if path == "/" {
        return "";
    }
    &path[path.rfind('/').map(|i| i + 1).unwrap_or(0)..]
}

/// Join a normalized directory path with a single component.
pub fn join(dir: &str, name: &str) -> String {
    if dir == "/" {
        format!("/{name}")
    } else {
        format!("{dir}/{name}")
    }
}

/// True when `path` equals `prefix` or lies under it at a component
/// boundary (`/foo` covers `/foo/bar` but not `/foobar`).
pub fn starts_with_prefix(path: &str, prefix: &str) -> bool {
    if prefix == "/" {
        return true;
    }
    if let Some(rest) = path.strip_prefix(prefix) {
        rest.is_empty() || rest.starts_with('/')
    } else {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_normalized_paths() {
        assert!(validate("/").is_ok());
        assert!(validate("/a").is_ok());
        assert!(validate("/a/b.txt").is_ok());
        assert!(validate("a/b").is_err());
        assert!(validate("").is_err());
        assert!(validate("/a//b").is_err());
        assert!(validate("/a/").is_err());
        assert!(validate("/a/../b").is_err());
        assert!(validate("/a/./b").is_err());
    }

    #[test]
    fn parent_and_leaf() {
        assert_eq!(parent_dir("/"), "/");
        assert_eq!(parent_dir("/a"), "/");
        assert_eq!(parent_dir("/a/b/c"), "/a/b");
        assert_eq!(leaf_name("/a/b/c"), "c");
        assert_eq!(leaf_name("/"), "");
        assert_eq!(join("/", "x"), "/x");
        assert_eq!(join("/a", "x"), "/a/x");
    }

    #[test]
    fn prefix_matches_component_boundaries_only() {
        assert!(starts_with_prefix("/foo/bar", "/foo"));
        assert!(starts_with_prefix("/foo", "/foo"));
        assert!(!starts_with_prefix("/foobar", "/foo"));
        assert!(starts_with_prefix("/anything", "/"));
    }

    #[test]
    fn component_iteration() {
        assert_eq!(components("/a/b/c").collect::<Vec<_>>(), vec!["a", "b", "c"]);
        assert_eq!(components("/").count(), 0);
        assert_eq!(depth("/a/b"), 2);
    }
}
