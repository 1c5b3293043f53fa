//! Named n-dimensional device mesh.
//!
//! Ranks are laid out row-major: the last dimension varies fastest. A group
//! along a set of dimensions holds every rank that agrees on all the *other*
//! coordinates, listed in ascending rank order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshDim {
    pub name: String,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mesh {
    dims: Vec<MeshDim>,
    world: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Group {
    pub dim_names: Vec<String>,
    pub members: Vec<u32>,
}

impl Group {
    pub fn size(&self) -> u32 {
        self.members.len() as u32
    }

    /// True when two members sit on different nodes.
    pub fn spans_nodes(&self, gpus_per_node: u32) -> bool {
        match (self.members.first(), self.members.last()) {
            (Some(a), Some(b)) => a / gpus_per_node != b / gpus_per_node,
            _ => false,
        }
    }
}

pub fn build_mesh<S: AsRef<str>>(dims: &[(S, u32)], world: u32) -> Result<Mesh> {
    if dims.is_empty() {
        return Err(Error::Mesh("mesh needs at least one dimension".into()));
    }
    let mut out = Vec::with_capacity(dims.len());
    for (name, size) in dims {
        let name = name.as_ref();
        if *size == 0 {
            return Err(Error::Mesh(format!("dimension {name:?} has size 0")));
        }
        if out.iter().any(|d: &MeshDim| d.name == name) {
            return Err(Error::Mesh(format!("duplicate dimension name {name:?}")));
        }
        out.push(MeshDim { name: name.to_string(), size: *size });
    }
    let product: u64 = out.iter().map(|d| d.size as u64).product();
    if product != world as u64 {
        let expr = out.iter().map(|d| d.size.to_string()).collect::<Vec<_>>().join("x");
        return Err(Error::Mesh(format!("product of dimension sizes {expr} = {product} != world {world}")));
    }
    Ok(Mesh { dims: out, world })
}

impl Mesh {
    pub fn world(&self) -> u32 {
        self.world
    }

    pub fn dims(&self) -> &[MeshDim] {
        &self.dims
    }

    pub fn size_of(&self, name: &str) -> Option<u32> {
        self.dims.iter().find(|d| d.name == name).map(|d| d.size)
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.dims
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| Error::Mesh(format!("unknown dimension {name:?}")))
    }

    pub fn rank_to_coord(&self, rank: u32) -> Result<Vec<u32>> {
        if rank >= self.world {
            return Err(Error::Mesh(format!("rank {rank} out of range [0, {})", self.world)));
        }
        let mut coord = vec![0; self.dims.len()];
        let mut rest = rank;
        for (c, d) in coord.iter_mut().zip(&self.dims).rev() {
            *c = rest % d.size;
            rest /= d.size;
        }
        Ok(coord)
    }

    pub fn coord_to_rank(&self, coord: &[u32]) -> Result<u32> {
        if coord.len() != self.dims.len() {
            return Err(Error::Mesh(format!(
                "coordinate has {} entries, mesh has {} dimensions",
                coord.len(),
                self.dims.len()
            )));
        }
        let mut rank = 0;
        for (&c, d) in coord.iter().zip(&self.dims) {
            if c >= d.size {
                return Err(Error::Mesh(format!("coordinate {c} out of range for {:?}", d.name)));
            }
            rank = rank * d.size + c;
        }
        Ok(rank)
    }

    /// Communication groups along `names`, which may be any subset of the
    /// dimensions (adjacent or not). Groups are ordered by their lowest rank.
    pub fn groups_along<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<Group>> {
        let mut selected = vec![false; self.dims.len()];
        for n in names {
            let i = self.index_of(n.as_ref())?;
            if selected[i] {
                return Err(Error::Mesh(format!("dimension {:?} listed twice", n.as_ref())));
            }
            selected[i] = true;
        }
        let group_size: u32 =
            self.dims.iter().zip(&selected).filter(|(_, &s)| s).map(|(d, _)| d.size).product();
        let num_groups = self.world / group_size;
        let dim_names: Vec<String> = self
            .dims
            .iter()
            .zip(&selected)
            .filter(|(_, &s)| s)
            .map(|(d, _)| d.name.clone())
            .collect();
        let mut groups: Vec<Group> = (0..num_groups)
            .map(|_| Group { dim_names: dim_names.clone(), members: Vec::with_capacity(group_size as usize) })
            .collect();
        for rank in 0..self.world {
            let coord = self.rank_to_coord(rank)?;
            // linearize the coordinates of the dimensions *not* in the group
            let mut key = 0u32;
            for ((c, d), &s) in coord.iter().zip(&self.dims).zip(&selected) {
                if !s {
                    key = key * d.size + c;
                }
            }
            groups[key as usize].members.push(rank);
        }
        Ok(groups)
    }

    /// The group along `names` that contains `rank`.
    pub fn group_of<S: AsRef<str>>(&self, rank: u32, names: &[S]) -> Result<Group> {
        let groups = self.groups_along(names)?;
        groups
            .into_iter()
            .find(|g| g.members.binary_search(&rank).is_ok())
            .ok_or_else(|| Error::Mesh(format!("rank {rank} out of range")))
    }
}
