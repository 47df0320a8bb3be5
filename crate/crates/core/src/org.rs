//! Organisations, their ingress endpoints and experiment groups.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::query_log::valid_org_id;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Control,
    Treatment,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Control => "control",
            Group::Treatment => "treatment",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "control" => Ok(Group::Control),
            "treatment" => Ok(Group::Treatment),
            other => Err(format!("unknown group `{other}`")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BindingError {
    #[error("org id `{0}` must be 1-64 characters of [A-Za-z0-9_-]")]
    BadOrgId(String),
    #[error("org `{0}` is bound twice")]
    DuplicateOrg(String),
    #[error("endpoint {0} is bound to more than one org")]
    DuplicateEndpoint(SocketAddr),
    #[error("control org `{0}` cannot carry an intervention date")]
    ControlWithIntervention(String),
}

/// An organisation served on its own exclusive listener.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrgBinding {
    pub org_id: String,
    pub listen: SocketAddr,
    pub group: Group,
    pub intervention_date: Option<NaiveDate>,
}

pub fn validate_bindings(bindings: &[OrgBinding]) -> Result<(), BindingError> {
    let mut orgs = HashSet::new();
    let mut endpoints = HashSet::new();
    for b in bindings {
        if !valid_org_id(&b.org_id) {
            return Err(BindingError::BadOrgId(b.org_id.clone()));
        }
        if !orgs.insert(b.org_id.as_str()) {
            return Err(BindingError::DuplicateOrg(b.org_id.clone()));
        }
        // Port 0 asks the OS for a fresh port, so it never collides.
        if b.listen.port() != 0 && !endpoints.insert(b.listen) {
            return Err(BindingError::DuplicateEndpoint(b.listen));
        }
        if b.group == Group::Control && b.intervention_date.is_some() {
            return Err(BindingError::ControlWithIntervention(b.org_id.clone()));
        }
    }
    Ok(())
}

/// Org id to group, the only part of a binding the analytics need.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OrgGroups(BTreeMap<String, Group>);

impl OrgGroups {
    pub fn new() -> Self {
        OrgGroups(BTreeMap::new())
    }

    pub fn from_bindings(bindings: &[OrgBinding]) -> Self {
        OrgGroups(bindings.iter().map(|b| (b.org_id.clone(), b.group)).collect())
    }

    pub fn insert(&mut self, org: impl Into<String>, group: Group) {
        self.0.insert(org.into(), group);
    }

    pub fn group_of(&self, org: &str) -> Option<Group> {
        self.0.get(org).copied()
    }

    pub fn orgs(&self) -> impl Iterator<Item = (&str, Group)> {
        self.0.iter().map(|(o, g)| (o.as_str(), *g))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: Into<String>> FromIterator<(S, Group)> for OrgGroups {
    fn from_iter<T: IntoIterator<Item = (S, Group)>>(iter: T) -> Self {
        OrgGroups(iter.into_iter().map(|(o, g)| (o.into(), g)).collect())
    }
}
