//! Namespace partitioning: every entry maps to exactly one of `n`
//! function deployments by hashing its parent directory path.
//!
//! The hash is FNV-1a over the UTF-8 bytes of the parent path, reduced
//! modulo the deployment count. Entries sharing a parent therefore share
//! a deployment, and the mapping is a pure function of `(path, n)` that
//! alternate-language ports can reproduce bit for bit (see the test
//! vectors below and in the repository docs).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path;

/// Index of a function deployment, in `[0, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeploymentId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PartitionError {
    #[error(transparent)]
    MalformedPath(#[from] path::PathError),
}

pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a. Stable across platforms and runs.
pub fn stable_hash(s: &str) -> u64 {
    let mut h = FNV_OFFSET_BASIS;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Deployment responsible for the entry at `path`: hash of its parent
/// directory, mod `n`. The root maps by hashing `/` itself.
pub fn deployment_for(p: &str, n: u32) -> Result<DeploymentId, PartitionError> {
    assert!(n >= 1, "deployment count must be >= 1");
    path::validate(p)?;
    let parent = path::parent_dir(p);
    Ok(DeploymentId((stable_hash(parent) % u64::from(n)) as u32))
}

/// Union of `deployment_for` over every entry path in a subtree.
pub fn deployments_for_subtree<'a, I>(paths: I, n: u32) -> Vec<DeploymentId>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut set: Vec<DeploymentId> = Vec::new();
    for p in paths {
        let d = deployment_for(p, n).expect("subtree paths are normalized");
        if !set.contains(&d) {
            set.push(d);
        }
    }
    set.sort();
    set
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_deployment_maps_everything_to_zero() {
        for p in ["/", "/a", "/a/b/c.txt"] {
            assert_eq!(deployment_for(p, 1).unwrap(), DeploymentId(0));
        }
    }

    #[test]
    fn siblings_share_a_deployment() {
        let n = 16;
        let a = deployment_for("/dir/a.txt", n).unwrap();
        let b = deployment_for("/dir/b.txt", n).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_paths_are_rejected() {
        assert!(deployment_for("dir/a", 4).is_err());
        assert!(deployment_for("/a//b", 4).is_err());
    }

    // Frozen test vectors for the published hash identity. Any port must
    // reproduce these exactly.
    #[test]
    fn hash_test_vectors() {
        assert_eq!(stable_hash(""), FNV_OFFSET_BASIS);
        assert_eq!(stable_hash("/"), 0xaf63_a24c_8601_89fe);
        assert_eq!(stable_hash("/dir"), 0x0bd6_6d9c_9bcc_39d5);
    }

    #[test]
    fn golden_routing_values() {
        // deployment_for hashes the parent: "/dir/note.pdf" -> hash("/dir").
        // Frozen numeric values so a silent hash change fails loudly.
        assert_eq!(deployment_for("/dir/note.pdf", 8).unwrap(), DeploymentId(5));
        assert_eq!(deployment_for("/", 8).unwrap(), DeploymentId(6));
        assert_eq!(deployment_for("/dir", 8).unwrap(), DeploymentId(6));
    }

    #[test]
    fn subtree_union_properties() {
        let paths = ["/a", "/a/x", "/a/y", "/a/sub", "/a/sub/z"];
        let n = 4;
        let set = deployments_for_subtree(paths, n);
        assert!(!set.is_empty());
        // Distinct parents bound the set size (pigeonhole).
        assert!(set.len() <= 3.min(n as usize));
        let single = deployments_for_subtree(["/a/x"], n);
        assert_eq!(single.len(), 1);
        assert_eq!(deployments_for_subtree(paths, 1), vec![DeploymentId(0)]);
    }

    #[test]
    fn uniform_distribution_over_random_directories() {
        let n = 10u32;
        let mut counts = vec![0u32; n as usize];
        let total = 100_000;
        for i in 0..total {
            let p = format!("/bench-{i}/file");
            let d = deployment_for(&p, n).unwrap();
            counts[d.0 as usize] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            let frac = f64::from(*c) / f64::from(total);
            assert!(
                (frac - 0.10).abs() <= 0.02,
                "deployment {i} got {frac:.4} of directories"
            );
        }
    }
}
