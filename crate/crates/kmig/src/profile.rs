//! Layout profiles for the simulated kernel objects.
//!
//! A [`LayoutProfile`] is a declarative field-offset table per object kind,
//! the simulator's stand-in for kernel debug info. The profile drives
//! object encode/decode and the cross-link verification predicate used by
//! the pointer scanner to decide whether a value that happens to equal an
//! object address really is a pointer to it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::memory::{GuestAddress, MemoryImage, WORD_SIZE};

/// Closed set of simulated kernel object kinds.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Dentry,
    Inode,
    File,
    FilesStruct,
    Fdt,
    Task,
    NameBuffer,
}

impl ObjectKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectKind::Dentry => "dentry",
            ObjectKind::Inode => "inode",
            ObjectKind::File => "file",
            ObjectKind::FilesStruct => "files_struct",
            ObjectKind::Fdt => "fdt",
            ObjectKind::Task => "task",
            ObjectKind::NameBuffer => "name_buffer",
        }
    }
}

/// Field offsets of the standard profile, shared with the guest builder
/// and the migration engine.
pub mod dentry {
    pub const D_COUNT: u64 = 0;
    pub const D_HASH_NEXT: u64 = 8;
    pub const D_HASH_PREV: u64 = 16;
    pub const D_PARENT: u64 = 24;
    pub const D_INODE: u64 = 32;
    pub const D_NAME: u64 = 40;
    pub const D_LRU_NEXT: u64 = 48;
    pub const D_LRU_PREV: u64 = 56;
    pub const D_INAME: u64 = 64;
    pub const INAME_LEN: u64 = 64;
    pub const SIZE: u64 = 128;
}

pub mod inode {
    pub const I_INO: u64 = 0;
    pub const I_COUNT: u64 = 8;
    pub const I_DENTRY: u64 = 16;
    pub const SIZE: u64 = 32;
}

pub mod file {
    pub const F_DENTRY: u64 = 0;
    pub const F_INODE: u64 = 8;
    pub const F_COUNT: u64 = 16;
    pub const F_POS: u64 = 24;
    pub const SIZE: u64 = 32;
}

pub mod files_struct {
    pub const FDT: u64 = 0;
    pub const SIZE: u64 = 16;
}

pub mod fdt {
    pub const MAX_FDS: u64 = 64;
    pub const SLOT_SIZE: u64 = 8;
    pub const SIZE: u64 = MAX_FDS * SLOT_SIZE;
}

pub mod task {
    pub const PID: u64 = 0;
    pub const FILES: u64 = 8;
    pub const SIZE: u64 = 16;
}

pub mod name_buffer {
    pub const SIZE: u64 = 64;
}

/// What a field holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldRole {
    Scalar,
    Pointer(ObjectKind),
    InlineBuffer,
}

/// One field of an object layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FieldSpecWire", into = "FieldSpecWire")]
pub struct FieldSpec {
    pub name: String,
    pub offset: u64,
    pub width: u64,
    pub role: FieldRole,
}

impl FieldSpec {
    fn new(name: &str, offset: u64, width: u64, role: FieldRole) -> Self {
        Self {
            name: name.to_string(),
            offset,
            width,
            role,
        }
    }

    pub fn is_pointer(&self) -> bool {
        matches!(self.role, FieldRole::Pointer(_))
    }
}

/// On-disk shape of a field spec: role as a string plus an optional
/// pointer target.
#[derive(Serialize, Deserialize)]
struct FieldSpecWire {
    name: String,
    offset: u64,
    width: u64,
    role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<ObjectKind>,
}

impl From<FieldSpec> for FieldSpecWire {
    fn from(spec: FieldSpec) -> Self {
        let (role, target) = match spec.role {
            FieldRole::Scalar => ("scalar", None),
            FieldRole::Pointer(kind) => ("pointer", Some(kind)),
            FieldRole::InlineBuffer => ("inline-buffer", None),
        };
        Self {
            name: spec.name,
            offset: spec.offset,
            width: spec.width,
            role: role.to_string(),
            target,
        }
    }
}

impl TryFrom<FieldSpecWire> for FieldSpec {
    type Error = String;

    fn try_from(wire: FieldSpecWire) -> std::result::Result<Self, String> {
        let role = match (wire.role.as_str(), wire.target) {
            ("scalar", None) => FieldRole::Scalar,
            ("pointer", Some(kind)) => FieldRole::Pointer(kind),
            ("pointer", None) => return Err(format!("pointer field {:?} lacks a target", wire.name)),
            ("inline-buffer", None) => FieldRole::InlineBuffer,
            (other, _) => return Err(format!("unknown field role {other:?}")),
        };
        Ok(Self {
            name: wire.name,
            offset: wire.offset,
            width: wire.width,
            role,
        })
    }
}

/// Size and fields of one object kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectLayout {
    pub size: u64,
    pub fields: Vec<FieldSpec>,
}

impl ObjectLayout {
    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// The pointer field starting exactly at `offset`, if any.
    pub fn pointer_field_at(&self, offset: u64) -> Option<&FieldSpec> {
        self.fields
            .iter()
            .find(|f| f.offset == offset && f.is_pointer())
    }

    pub fn pointer_fields(&self) -> impl Iterator<Item = &FieldSpec> {
        self.fields.iter().filter(|f| f.is_pointer())
    }
}

/// Field-offset tables for every object kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayoutProfile {
    kinds: BTreeMap<ObjectKind, ObjectLayout>,
}

impl LayoutProfile {
    /// The baked-in profile used by the whole simulator.
    pub fn standard() -> Self {
        use FieldRole::{InlineBuffer, Pointer, Scalar};
        let mut kinds = BTreeMap::new();

        kinds.insert(
            ObjectKind::Dentry,
            ObjectLayout {
                size: dentry::SIZE,
                fields: vec![
                    FieldSpec::new("d_count", dentry::D_COUNT, 8, Scalar),
                    FieldSpec::new("d_hash_next", dentry::D_HASH_NEXT, 8, Pointer(ObjectKind::Dentry)),
                    FieldSpec::new("d_hash_prev", dentry::D_HASH_PREV, 8, Pointer(ObjectKind::Dentry)),
                    FieldSpec::new("d_parent", dentry::D_PARENT, 8, Pointer(ObjectKind::Dentry)),
                    FieldSpec::new("d_inode", dentry::D_INODE, 8, Pointer(ObjectKind::Inode)),
                    FieldSpec::new("d_name", dentry::D_NAME, 8, Pointer(ObjectKind::NameBuffer)),
                    FieldSpec::new("d_lru_next", dentry::D_LRU_NEXT, 8, Pointer(ObjectKind::Dentry)),
                    FieldSpec::new("d_lru_prev", dentry::D_LRU_PREV, 8, Pointer(ObjectKind::Dentry)),
                    FieldSpec::new("d_iname", dentry::D_INAME, dentry::INAME_LEN, InlineBuffer),
                ],
            },
        );

        kinds.insert(
            ObjectKind::Inode,
            ObjectLayout {
                size: inode::SIZE,
                fields: vec![
                    FieldSpec::new("i_ino", inode::I_INO, 8, Scalar),
                    FieldSpec::new("i_count", inode::I_COUNT, 8, Scalar),
                    FieldSpec::new("i_dentry", inode::I_DENTRY, 8, Pointer(ObjectKind::Dentry)),
                ],
            },
        );

        kinds.insert(
            ObjectKind::File,
            ObjectLayout {
                size: file::SIZE,
                fields: vec![
                    FieldSpec::new("f_dentry", file::F_DENTRY, 8, Pointer(ObjectKind::Dentry)),
                    FieldSpec::new("f_inode", file::F_INODE, 8, Pointer(ObjectKind::Inode)),
                    FieldSpec::new("f_count", file::F_COUNT, 8, Scalar),
                    FieldSpec::new("f_pos", file::F_POS, 8, Scalar),
                ],
            },
        );

        kinds.insert(
            ObjectKind::FilesStruct,
            ObjectLayout {
                size: files_struct::SIZE,
                fields: vec![FieldSpec::new(
                    "fdt",
                    files_struct::FDT,
                    8,
                    Pointer(ObjectKind::Fdt),
                )],
            },
        );

        let fd_slots = (0..fdt::MAX_FDS)
            .map(|i| {
                FieldSpec::new(
                    &format!("fd{i}"),
                    i * fdt::SLOT_SIZE,
                    8,
                    Pointer(ObjectKind::File),
                )
            })
            .collect();
        kinds.insert(
            ObjectKind::Fdt,
            ObjectLayout {
                size: fdt::SIZE,
                fields: fd_slots,
            },
        );

        kinds.insert(
            ObjectKind::Task,
            ObjectLayout {
                size: task::SIZE,
                fields: vec![
                    FieldSpec::new("pid", task::PID, 8, Scalar),
                    FieldSpec::new("files", task::FILES, 8, Pointer(ObjectKind::FilesStruct)),
                ],
            },
        );

        kinds.insert(
            ObjectKind::NameBuffer,
            ObjectLayout {
                size: name_buffer::SIZE,
                fields: vec![FieldSpec::new("name", 0, name_buffer::SIZE, InlineBuffer)],
            },
        );

        let profile = Self { kinds };
        profile.validate().expect("standard profile is well formed");
        profile
    }

    pub fn layout(&self, kind: ObjectKind) -> &ObjectLayout {
        &self.kinds[&kind]
    }

    pub fn size_of(&self, kind: ObjectKind) -> u64 {
        self.kinds[&kind].size
    }

    /// Structural checks: fields in bounds, non-overlapping, pointers
    /// word-sized and word-aligned, every kind present.
    pub fn validate(&self) -> Result<()> {
        for kind in [
            ObjectKind::Dentry,
            ObjectKind::Inode,
            ObjectKind::File,
            ObjectKind::FilesStruct,
            ObjectKind::Fdt,
            ObjectKind::Task,
            ObjectKind::NameBuffer,
        ] {
            let layout = self
                .kinds
                .get(&kind)
                .ok_or_else(|| SimError::BadProfile(format!("kind {} missing", kind.name())))?;
            let mut spans: Vec<(u64, u64, &str)> = Vec::new();
            for field in &layout.fields {
                if field.width == 0 || field.offset + field.width > layout.size {
                    return Err(SimError::BadProfile(format!(
                        "{}.{} spans {}+{} outside size {}",
                        kind.name(),
                        field.name,
                        field.offset,
                        field.width,
                        layout.size
                    )));
                }
                if field.is_pointer() && (field.width != WORD_SIZE || field.offset % WORD_SIZE != 0)
                {
                    return Err(SimError::BadProfile(format!(
                        "pointer field {}.{} must be one aligned word",
                        kind.name(),
                        field.name
                    )));
                }
                spans.push((field.offset, field.width, &field.name));
            }
            spans.sort();
            for pair in spans.windows(2) {
                if pair[0].0 + pair[0].1 > pair[1].0 {
                    return Err(SimError::BadProfile(format!(
                        "{}.{} overlaps {}.{}",
                        kind.name(),
                        pair[0].2,
                        kind.name(),
                        pair[1].2
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let profile: Self = serde_json::from_str(json)?;
        profile.validate()?;
        Ok(profile)
    }
}

/// Decoded field content: one word for scalars and pointers, raw bytes for
/// inline buffers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldValue {
    Word(u64),
    Bytes(Vec<u8>),
}

impl FieldValue {
    pub fn word(&self) -> u64 {
        match self {
            FieldValue::Word(w) => *w,
            FieldValue::Bytes(_) => panic!("buffer field read as word"),
        }
    }

    pub fn bytes(&self) -> &[u8] {
        match self {
            FieldValue::Bytes(b) => b,
            FieldValue::Word(_) => panic!("word field read as buffer"),
        }
    }
}

/// Reads every field of the object at `addr`. Hypervisor-context: no
/// events, no trace entries.
pub fn decode_object(
    image: &MemoryImage,
    profile: &LayoutProfile,
    kind: ObjectKind,
    addr: GuestAddress,
) -> Result<BTreeMap<String, FieldValue>> {
    let layout = profile.layout(kind);
    image.peek_bytes(addr, layout.size)?;
    let mut out = BTreeMap::new();
    for field in &layout.fields {
        let at = addr.add(field.offset);
        let value = match field.role {
            FieldRole::Scalar | FieldRole::Pointer(_) => FieldValue::Word(image.peek_word(at)?),
            FieldRole::InlineBuffer => {
                FieldValue::Bytes(image.peek_bytes(at, field.width)?.to_vec())
            }
        };
        out.insert(field.name.clone(), value);
    }
    Ok(out)
}

/// Writes the given fields of the object at `addr`; fields absent from the
/// map keep their current bytes. Hypervisor-context.
pub fn encode_object(
    image: &mut MemoryImage,
    profile: &LayoutProfile,
    kind: ObjectKind,
    addr: GuestAddress,
    fields: &BTreeMap<String, FieldValue>,
) -> Result<()> {
    let layout = profile.layout(kind);
    image.peek_bytes(addr, layout.size)?;
    for (name, value) in fields {
        let field = layout.field(name).ok_or_else(|| {
            SimError::BadProfile(format!("no field {name:?} in {}", kind.name()))
        })?;
        let at = addr.add(field.offset);
        match (&field.role, value) {
            (FieldRole::Scalar | FieldRole::Pointer(_), FieldValue::Word(w)) => {
                image.poke_word(at, *w)?;
            }
            (FieldRole::InlineBuffer, FieldValue::Bytes(bytes)) => {
                if bytes.len() as u64 > field.width {
                    return Err(SimError::BadProfile(format!(
                        "value for {}.{name} exceeds width {}",
                        kind.name(),
                        field.width
                    )));
                }
                // Short buffers are zero-padded to the field width.
                let mut padded = vec![0u8; field.width as usize];
                padded[..bytes.len()].copy_from_slice(bytes);
                image.poke_bytes(at, &padded)?;
            }
            _ => {
                return Err(SimError::BadProfile(format!(
                    "value shape does not match role of {}.{name}",
                    kind.name()
                )));
            }
        }
    }
    Ok(())
}

/// Ground-truth object locations, implemented by the guest state. The
/// verifier consults it to decide whether a candidate slot sits at a
/// pointer field of a live registered object.
pub trait ObjectRegistry {
    /// Kind and base address of the registered object whose extent
    /// contains `addr`.
    fn object_at(&self, addr: GuestAddress) -> Option<(ObjectKind, GuestAddress)>;
    /// Whether the dentry-shaped node at `addr` participates in a hash
    /// bucket chain (bucket sentinels included).
    fn is_hash_chain_node(&self, addr: GuestAddress) -> bool;
    /// Whether the node at `addr` participates in the LRU list (sentinel
    /// included).
    fn is_lru_chain_node(&self, addr: GuestAddress) -> bool;
    /// Whether a live task's `files` pointer reaches the FilesStruct at
    /// `addr`.
    fn is_live_files_struct(&self, addr: GuestAddress) -> bool;
}

/// Outcome of cross-link verification for one candidate slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    /// Slot is `f_dentry` of a File whose `f_inode` matches the dentry's
    /// `d_inode`.
    ConfirmedFileBackref,
    /// Slot is `i_dentry` of the very inode the dentry's `d_inode` names.
    ConfirmedInodeBackref,
    /// Slot is a hash-chain link of a chain member whose opposite link
    /// points back at the candidate.
    ConfirmedHashNeighbor,
    /// Same, for the LRU list.
    ConfirmedLruNeighbor,
    /// Slot is `d_parent` of a live cached dentry.
    ConfirmedParentBackref,
    /// Slot is the `fdt` pointer of a task-reachable FilesStruct.
    ConfirmedFdtSlot,
    /// Slot lies inside the candidate object itself at a pointer field.
    ConfirmedInternal,
    /// No structural evidence; never rewritten.
    Unverified,
}

impl Classification {
    pub fn is_confirmed(self) -> bool {
        self != Classification::Unverified
    }
}

/// Classifies the slot at `slot_addr`, whose word value falls inside the
/// candidate object `[candidate, candidate + size_of(kind))`.
///
/// Confirmation requires the slot to sit exactly at a pointer field of a
/// registered live object and, where the object graph provides one, a
/// matching back-link. Anything else is [`Classification::Unverified`].
pub fn verify_cross_links(
    image: &MemoryImage,
    profile: &LayoutProfile,
    registry: &dyn ObjectRegistry,
    candidate: GuestAddress,
    kind: ObjectKind,
    slot_addr: GuestAddress,
) -> Result<Classification> {
    let size = profile.size_of(kind);
    let in_candidate =
        slot_addr.raw() >= candidate.raw() && slot_addr.raw() < candidate.raw() + size;
    if in_candidate {
        let offset = slot_addr.raw() - candidate.raw();
        return Ok(match profile.layout(kind).pointer_field_at(offset) {
            Some(_) => Classification::ConfirmedInternal,
            None => Classification::Unverified,
        });
    }

    let Some((owner_kind, owner)) = registry.object_at(slot_addr) else {
        return Ok(Classification::Unverified);
    };
    let offset = slot_addr.raw() - owner.raw();
    if profile.layout(owner_kind).pointer_field_at(offset).is_none() {
        return Ok(Classification::Unverified);
    }

    let word_at = |a: u64| image.peek_word(GuestAddress(a));
    match (kind, owner_kind) {
        (ObjectKind::Dentry, ObjectKind::File) if offset == file::F_DENTRY => {
            let f_inode = word_at(owner.raw() + file::F_INODE)?;
            let d_inode = word_at(candidate.raw() + dentry::D_INODE)?;
            if f_inode == d_inode && f_inode != 0 {
                return Ok(Classification::ConfirmedFileBackref);
            }
        }
        (ObjectKind::Dentry, ObjectKind::Inode) if offset == inode::I_DENTRY => {
            let d_inode = word_at(candidate.raw() + dentry::D_INODE)?;
            if d_inode == owner.raw() {
                return Ok(Classification::ConfirmedInodeBackref);
            }
        }
        (ObjectKind::Dentry, ObjectKind::Dentry) => {
            if offset == dentry::D_HASH_NEXT
                && registry.is_hash_chain_node(owner)
                && word_at(candidate.raw() + dentry::D_HASH_PREV)? == owner.raw()
            {
                return Ok(Classification::ConfirmedHashNeighbor);
            }
            if offset == dentry::D_HASH_PREV
                && registry.is_hash_chain_node(owner)
                && word_at(candidate.raw() + dentry::D_HASH_NEXT)? == owner.raw()
            {
                return Ok(Classification::ConfirmedHashNeighbor);
            }
            if offset == dentry::D_LRU_NEXT
                && registry.is_lru_chain_node(owner)
                && word_at(candidate.raw() + dentry::D_LRU_PREV)? == owner.raw()
            {
                return Ok(Classification::ConfirmedLruNeighbor);
            }
            if offset == dentry::D_LRU_PREV
                && registry.is_lru_chain_node(owner)
                && word_at(candidate.raw() + dentry::D_LRU_NEXT)? == owner.raw()
            {
                return Ok(Classification::ConfirmedLruNeighbor);
            }
            if offset == dentry::D_PARENT && registry.is_hash_chain_node(owner) {
                return Ok(Classification::ConfirmedParentBackref);
            }
        }
        (ObjectKind::Fdt, ObjectKind::FilesStruct) if offset == files_struct::FDT
            && registry.is_live_files_struct(owner) => {
                return Ok(Classification::ConfirmedFdtSlot);
            }
        _ => {}
    }
    Ok(Classification::Unverified)
}
