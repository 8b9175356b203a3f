//! Static robot registry: adding a robot is one entry with a fresh address.

use std::collections::BTreeMap;

use gridswarm_core::robot::RobotParams;
use gridswarm_core::{RobotId, TagId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryConflict {
    #[error("robot id {0} is already registered")]
    Id(RobotId),
    #[error("address {0} is already in use")]
    Address(String),
    #[error("tag {0} is already assigned")]
    Tag(TagId),
    #[error("{0} has an empty tag group")]
    EmptyTagGroup(RobotId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub id: RobotId,
    /// Static address in dotted form.
    pub address: String,
    pub tags: Vec<TagId>,
    pub params: RobotParams,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotRegistry {
    entries: BTreeMap<RobotId, RegistryEntry>,
}

impl RobotRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: RobotId) -> Option<&RegistryEntry> {
        self.entries.get(&id)
    }

    pub fn by_address(&self, address: &str) -> Option<&RegistryEntry> {
        self.entries.values().find(|e| e.address == address)
    }

    /// Entries in ascending id order.
    pub fn entries(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.entries.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = RobotId> + '_ {
        self.entries.keys().copied()
    }
}

pub fn register_robot(
    mut registry: RobotRegistry,
    entry: RegistryEntry,
) -> Result<RobotRegistry, RegistryConflict> {
    if registry.entries.contains_key(&entry.id) {
        return Err(RegistryConflict::Id(entry.id));
    }
    if registry.by_address(&entry.address).is_some() {
        return Err(RegistryConflict::Address(entry.address));
    }
    if entry.tags.is_empty() {
        return Err(RegistryConflict::EmptyTagGroup(entry.id));
    }
    for tag in &entry.tags {
        if registry.entries().any(|e| e.tags.contains(tag)) {
            return Err(RegistryConflict::Tag(*tag));
        }
    }
    registry.entries.insert(entry.id, entry);
    Ok(registry)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: u32, last_octet: u32) -> RegistryEntry {
        RegistryEntry {
            id: RobotId(id),
            address: format!("192.168.1.{last_octet}"),
            tags: vec![TagId(10 * id), TagId(10 * id + 1)],
            params: RobotParams::default(),
        }
    }

    fn four() -> RobotRegistry {
        (1..=4).fold(RobotRegistry::new(), |r, i| register_robot(r, entry(i, i + 3)).unwrap())
    }

    #[test]
    fn fifth_robot_extends_the_fleet() {
        let r = register_robot(four(), entry(5, 8)).unwrap();
        assert_eq!(r.len(), 5);
        assert_eq!(r.get(RobotId(5)).unwrap().address, "192.168.1.8");
    }

    #[test]
    fn reused_address_conflicts() {
        let e = RegistryEntry {
            id: RobotId(9),
            ..entry(9, 4)
        };
        assert_eq!(
            register_robot(four(), e),
            Err(RegistryConflict::Address("192.168.1.4".into()))
        );
    }

    #[test]
    fn first_entry_and_other_conflicts() {
        let r = register_robot(RobotRegistry::new(), entry(1, 4)).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(register_robot(r.clone(), entry(1, 9)), Err(RegistryConflict::Id(RobotId(1))));
        let mut shared_tag = entry(2, 9);
        shared_tag.tags = vec![TagId(10)];
        assert_eq!(register_robot(r.clone(), shared_tag), Err(RegistryConflict::Tag(TagId(10))));
        let mut no_tags = entry(2, 9);
        no_tags.tags.clear();
        assert_eq!(register_robot(r, no_tags), Err(RegistryConflict::EmptyTagGroup(RobotId(2))));
    }
}
