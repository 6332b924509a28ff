//! Grafting a narrow subnet into a host model by pure weight overwrites.
//!
//! One write-plan enumerator drives everything here: the in-memory graft
//! ([`replace_subnet`]), the serialized patch ([`emit_patch`]), and the
//! modified-parameter accounting ([`count_modified`]). What is counted is
//! exactly what is written is exactly what is patched.
//!
//! For a selection `S` the plan touches, per hidden dense/conv layer:
//!
//! * in-edges of selected nodes — overwritten with the subnet's weights
//!   where they come from selected nodes, zeroed where they come from the
//!   unselected remainder (cutting the subnet off from host activity);
//! * out-edges from selected to unselected nodes — zeroed (cutting host
//!   nodes off from subnet activity);
//! * biases and batch-norm entries of selected nodes — overwritten.
//!
//! The first dense/conv layer reads the raw input, which the subnet shares
//! with the host, so nothing is zeroed at that boundary. The classifier row
//! of the target class gets `w_out` on its single in-edge from the subnet's
//! output node and an absolute bias of `delta_b`; every other class gets a
//! zero on that in-edge. The writes are victim-independent: a patch emitted
//! once applies to any model of the same architecture.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::arch::{Arch, EdgeKind, EdgeLayer, ParamId, ParamName};
use crate::error::{Error, Result};
use crate::format;
use crate::graph::{derive_subnet_arch, SubnetSpec};
use crate::net::Model;
use crate::params::ParamSet;
use serde::{Deserialize, Serialize};

/// How the grafted scalar reaches the classifier: the weight written on the
/// target class's in-edge from the subnet output, and the absolute bias
/// written for the target class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wiring {
    pub w_out: f32,
    pub delta_b: f32,
}

impl Wiring {
    /// Leaves the subnet output disconnected. Grafting with this yields the
    /// "pruned" host: selected channels repurposed, but no wire to any
    /// class — the reference point for isolation checks.
    pub const OFF: Wiring = Wiring { w_out: 0.0, delta_b: 0.0 };
}

/// Where a planned overwrite takes its value from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Src {
    /// An element of the narrow subnet's own parameters.
    Subnet { id: ParamId, elem: usize },
    Zero,
    WOut,
    DeltaB,
}

/// One parameter element of the host to overwrite.
#[derive(Debug, Clone, Copy)]
struct PlannedWrite {
    id: ParamId,
    elem: usize,
    src: Src,
}

fn resolve(src: Src, subnet: &ParamSet, wiring: Wiring) -> f32 {
    match src {
        Src::Subnet { id, elem } => subnet.get(id).expect("planned subnet param").data[elem],
        Src::Zero => 0.0,
        Src::WOut => wiring.w_out,
        Src::DeltaB => wiring.delta_b,
    }
}

/// Enumerate every host parameter element the graft overwrites, in
/// canonical parameter order with ascending element index — i.e. strictly
/// ascending serialized offset.
fn write_plan(arch: &Arch, spec: &SubnetSpec) -> Result<Vec<PlannedWrite>> {
    spec.validate(arch)?;
    let info = arch.infer()?;
    let topo = &info.topo;
    let narrow = derive_subnet_arch(arch, spec)?;
    let narrow_shape: HashMap<ParamId, Vec<usize>> = narrow.param_specs().into_iter().collect();

    // rank[nl][v] = position of node v within node layer nl's selection.
    // Node layer 0 (the input) is implicitly fully selected.
    let mut rank: Vec<Vec<Option<usize>>> = vec![Vec::new(); topo.node_layers.len()];
    rank[0] = (0..topo.node_layers[0].width).map(Some).collect();
    for &nl in &topo.hidden_node_layers() {
        let mut r = vec![None; topo.node_layers[nl].width];
        for (i, &v) in spec.selection_for(nl).iter().enumerate() {
            r[v] = Some(i);
        }
        rank[nl] = r;
    }

    let classifier = topo.classifier();
    let edge_at: HashMap<usize, &EdgeLayer> =
        topo.edge_layers.iter().map(|e| (e.arch_idx, e)).collect();
    let bn_at: HashMap<usize, usize> = topo
        .node_layers
        .iter()
        .enumerate()
        .flat_map(|(nl, n)| n.bn_layers.iter().map(move |&idx| (idx, nl)))
        .collect();
    let out_node = spec.selection_for(classifier.in_nl)[0];

    let mut plan: Vec<PlannedWrite> = Vec::new();
    for (id, shape) in arch.param_specs() {
        if id.layer == classifier.arch_idx {
            match id.name {
                ParamName::Weight => {
                    let in_f = shape[1];
                    for class in 0..shape[0] {
                        let src = if class == spec.target { Src::WOut } else { Src::Zero };
                        plan.push(PlannedWrite { id, elem: class * in_f + out_node, src });
                    }
                }
                ParamName::Bias => {
                    plan.push(PlannedWrite { id, elem: spec.target, src: Src::DeltaB });
                }
                _ => unreachable!("dense classifier owns only weight and bias"),
            }
        } else if let Some(e) = edge_at.get(&id.layer) {
            let rin = &rank[e.in_nl];
            let rout = &rank[e.out_nl];
            // At the input boundary the host and subnet share their source,
            // so out-edges of unselected input nodes stay untouched.
            let cut_inputs = e.in_nl != 0;
            match (e.kind, id.name) {
                (EdgeKind::Dense, ParamName::Weight) => {
                    let (out_f, in_f) = (shape[0], shape[1]);
                    let exp = e.in_expansion;
                    let n_in = narrow_shape[&id][1];
                    for o in 0..out_f {
                        match rout[o] {
                            Some(ro) => {
                                for i in 0..in_f {
                                    let src = match rin[i / exp] {
                                        Some(rc) => Src::Subnet {
                                            id,
                                            elem: ro * n_in + rc * exp + i % exp,
                                        },
                                        None => Src::Zero,
                                    };
                                    plan.push(PlannedWrite { id, elem: o * in_f + i, src });
                                }
                            }
                            None if cut_inputs => {
                                for i in 0..in_f {
                                    if rin[i / exp].is_some() {
                                        plan.push(PlannedWrite {
                                            id,
                                            elem: o * in_f + i,
                                            src: Src::Zero,
                                        });
                                    }
                                }
                            }
                            None => {}
                        }
                    }
                }
                (EdgeKind::Conv { k, groups }, ParamName::Weight) => {
                    let (out_c, icg) = (shape[0], shape[1]);
                    let ocg = out_c / groups;
                    let kk = k * k;
                    let n_ic = narrow_shape[&id][1];
                    for oc in 0..out_c {
                        let base_ic = (oc / ocg) * icg;
                        match rout[oc] {
                            Some(ro) => {
                                for icl in 0..icg {
                                    for kel in 0..kk {
                                        let src = match rin[base_ic + icl] {
                                            Some(rc) => Src::Subnet {
                                                id,
                                                elem: (ro * n_ic + rc) * kk + kel,
                                            },
                                            None => Src::Zero,
                                        };
                                        plan.push(PlannedWrite {
                                            id,
                                            elem: (oc * icg + icl) * kk + kel,
                                            src,
                                        });
                                    }
                                }
                            }
                            None if cut_inputs => {
                                for icl in 0..icg {
                                    if rin[base_ic + icl].is_some() {
                                        for kel in 0..kk {
                                            plan.push(PlannedWrite {
                                                id,
                                                elem: (oc * icg + icl) * kk + kel,
                                                src: Src::Zero,
                                            });
                                        }
                                    }
                                }
                            }
                            None => {}
                        }
                    }
                }
                (_, ParamName::Bias) => {
                    for o in 0..shape[0] {
                        if let Some(ro) = rout[o] {
                            plan.push(PlannedWrite {
                                id,
                                elem: o,
                                src: Src::Subnet { id, elem: ro },
                            });
                        }
                    }
                }
                _ => unreachable!("dense/conv layers own only weight and bias"),
            }
        } else {
            // batch-norm attached to a hidden node layer
            let nl = bn_at[&id.layer];
            for (ro, &v) in spec.selection_for(nl).iter().enumerate() {
                plan.push(PlannedWrite { id, elem: v, src: Src::Subnet { id, elem: ro } });
            }
        }
    }
    Ok(plan)
}

/// Number of host parameters a graft per `spec` overwrites.
pub fn count_modified(arch: &Arch, spec: &SubnetSpec) -> Result<usize> {
    Ok(write_plan(arch, spec)?.len())
}

/// Per-tensor breakdown of the parameters a graft overwrites.
#[derive(Debug, Clone, Serialize)]
pub struct BudgetReport {
    /// Touched parameter tensors in canonical order, with overwrite counts.
    pub per_param: Vec<(ParamId, usize)>,
    /// Total parameters overwritten.
    pub total: usize,
    /// Total parameters in the host model.
    pub model_params: usize,
}

impl BudgetReport {
    pub fn fraction(&self) -> f64 {
        self.total as f64 / self.model_params as f64
    }
}

pub fn budget_report(arch: &Arch, spec: &SubnetSpec) -> Result<BudgetReport> {
    let plan = write_plan(arch, spec)?;
    let mut per_param: Vec<(ParamId, usize)> = Vec::new();
    for w in &plan {
        match per_param.last_mut() {
            Some((id, n)) if *id == w.id => *n += 1,
            _ => per_param.push((w.id, 1)),
        }
    }
    Ok(BudgetReport { per_param, total: plan.len(), model_params: arch.param_count() })
}

fn check_subnet_arch(arch: &Arch, spec: &SubnetSpec, subnet: &Model) -> Result<()> {
    let narrow = derive_subnet_arch(arch, spec)?;
    if *subnet.arch() != narrow {
        return Err(Error::ArchMismatch(
            "subnet architecture does not match the slot this spec selects".into(),
        ));
    }
    Ok(())
}

/// Graft `subnet` into a copy of `victim` per `spec`, wiring its output to
/// the target class with `wiring`. Pure parameter overwrites — architecture
/// and all untouched parameters are bit-identical to the victim's.
pub fn replace_subnet(
    victim: &Model,
    spec: &SubnetSpec,
    subnet: &Model,
    wiring: Wiring,
) -> Result<Model> {
    check_subnet_arch(victim.arch(), spec, subnet)?;
    let plan = write_plan(victim.arch(), spec)?;
    let mut out = victim.clone();
    apply_plan(&mut out, &plan, &subnet.params, wiring);
    Ok(out)
}

fn apply_plan(model: &mut Model, plan: &[PlannedWrite], subnet: &ParamSet, wiring: Wiring) {
    for w in plan {
        let t = model.params.get_mut(w.id).expect("planned host param");
        t.data[w.elem] = resolve(w.src, subnet, wiring);
    }
}

/// The graft with its output wire disconnected (see [`Wiring::OFF`]).
pub fn pruned_host(victim: &Model, spec: &SubnetSpec, subnet: &Model) -> Result<Model> {
    replace_subnet(victim, spec, subnet, Wiring::OFF)
}

/// One subnet to graft in a multi-graft call.
#[derive(Debug, Clone, Copy)]
pub struct Graft<'a> {
    pub spec: &'a SubnetSpec,
    pub subnet: &'a Model,
    pub wiring: Wiring,
}

/// Graft several subnets into one victim. Specs must select pairwise
/// disjoint nodes and fire pairwise distinct classes. The only overlapping
/// writes between two disjoint grafts are zeroes (each cuts its own edges
/// to everything unselected, including the other graft), so the result does
/// not depend on graft order.
pub fn multi_replace(victim: &Model, grafts: &[Graft]) -> Result<Model> {
    for (i, a) in grafts.iter().enumerate() {
        for b in &grafts[i + 1..] {
            if a.spec.target == b.spec.target {
                return Err(Error::InvalidSpec(format!(
                    "two grafts fire the same class {}",
                    a.spec.target
                )));
            }
            for (nl, (sa, sb)) in a.spec.selected.iter().zip(&b.spec.selected).enumerate() {
                if sa.iter().any(|v| sb.contains(v)) {
                    return Err(Error::InvalidSpec(format!(
                        "grafts overlap in node layer {}",
                        nl + 1
                    )));
                }
            }
        }
    }
    let mut out = victim.clone();
    for g in grafts {
        check_subnet_arch(victim.arch(), g.spec, g.subnet)?;
        let plan = write_plan(victim.arch(), g.spec)?;
        apply_plan(&mut out, &plan, &g.subnet.params, g.wiring);
    }
    Ok(out)
}

// ── serialized patches ───────────────────────────────────────────────────

/// One overwrite in a serialized patch: byte offset into the model file's
/// parameter block, and the little-endian bytes of the new f32 value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchEntry {
    pub offset: u64,
    pub value: [u8; 4],
}

/// A victim-independent list of parameter overwrites for one architecture.
/// Applying it to any model file of that architecture grafts the subnet.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchList {
    pub arch_hash: String,
    pub target: usize,
    pub wiring: Wiring,
    /// Entries in strictly ascending offset order.
    pub entries: Vec<PatchEntry>,
}

/// Emit the serialized form of a graft: same plan, same values as
/// [`replace_subnet`], expressed as file offsets.
pub fn emit_patch(
    arch: &Arch,
    spec: &SubnetSpec,
    subnet: &Model,
    wiring: Wiring,
) -> Result<PatchList> {
    check_subnet_arch(arch, spec, subnet)?;
    let plan = write_plan(arch, spec)?;
    let mut entries = Vec::with_capacity(plan.len());
    for w in &plan {
        let base = format::param_offset(arch, w.id)
            .ok_or_else(|| Error::Internal("planned a write to a missing tensor".into()))?;
        entries.push(PatchEntry {
            offset: base + 4 * w.elem as u64,
            value: resolve(w.src, &subnet.params, wiring).to_le_bytes(),
        });
    }
    if !entries.windows(2).all(|w| w[0].offset < w[1].offset) {
        return Err(Error::Internal("patch offsets are not strictly ascending".into()));
    }
    Ok(PatchList { arch_hash: arch.arch_hash(), target: spec.target, wiring, entries })
}

impl PatchList {
    /// Serialize: a small text header followed by a fixed-width binary
    /// entry table and a SHA-256 of that table.
    ///
    /// ```text
    /// gpatch v1\n
    /// arch <hex sha-256 of the architecture text>\n
    /// target <class>\n
    /// w_out <f32 bits as 8 hex digits>\n
    /// delta_b <f32 bits as 8 hex digits>\n
    /// entries <n>\n
    /// n × { offset: u64 LE, value: 4 bytes }
    /// sha-256 of the entry table (32 bytes)
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        writeln!(head, "gpatch v1").unwrap();
        writeln!(head, "arch {}", self.arch_hash).unwrap();
        writeln!(head, "target {}", self.target).unwrap();
        writeln!(head, "w_out {:08x}", self.wiring.w_out.to_bits()).unwrap();
        writeln!(head, "delta_b {:08x}", self.wiring.delta_b.to_bits()).unwrap();
        writeln!(head, "entries {}", self.entries.len()).unwrap();
        let mut out = head.into_bytes();
        let table_start = out.len();
        for e in &self.entries {
            out.extend_from_slice(&e.offset.to_le_bytes());
            out.extend_from_slice(&e.value);
        }
        let digest = Sha256::digest(&out[table_start..]);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("patch: {msg}"));
        let mut pos = 0usize;
        let mut line = |key: &str| -> Result<String> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            let text =
                std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8"))?;
            pos += nl + 1;
            if key.is_empty() {
                return Ok(text.to_string());
            }
            text.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_owned)
                .ok_or_else(|| bad(&format!("expected '{key} …'")))
        };
        if line("")? != "gpatch v1" {
            return Err(bad("missing 'gpatch v1' header"));
        }
        let arch_hash = line("arch")?;
        let target = line("target")?.parse::<usize>().map_err(|_| bad("bad target"))?;
        let w_out = u32::from_str_radix(&line("w_out")?, 16)
            .map(f32::from_bits)
            .map_err(|_| bad("bad w_out bits"))?;
        let delta_b = u32::from_str_radix(&line("delta_b")?, 16)
            .map(f32::from_bits)
            .map_err(|_| bad("bad delta_b bits"))?;
        let count = line("entries")?.parse::<usize>().map_err(|_| bad("bad entry count"))?;

        let table_len = count.checked_mul(12).ok_or_else(|| bad("entry count overflow"))?;
        if bytes.len() != pos + table_len + 32 {
            return Err(bad("file size does not match entry count"));
        }
        let table = &bytes[pos..pos + table_len];
        let digest = Sha256::digest(table);
        if digest.as_slice() != &bytes[pos + table_len..] {
            return Err(Error::ChecksumMismatch("patch entry table".into()));
        }
        let mut entries = Vec::with_capacity(count);
        for chunk in table.chunks_exact(12) {
            let offset = u64::from_le_bytes(chunk[..8].try_into().unwrap());
            if offset % 4 != 0 {
                return Err(bad("entry offset not 4-byte aligned"));
            }
            if let Some(prev) = entries.last().map(|e: &PatchEntry| e.offset) {
                if offset <= prev {
                    return Err(bad("entry offsets must be strictly ascending"));
                }
            }
            entries.push(PatchEntry { offset, value: chunk[8..].try_into().unwrap() });
        }
        Ok(PatchList {
            arch_hash,
            target,
            wiring: Wiring { w_out, delta_b },
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Apply a patch to a serialized model, returning the patched file bytes.
/// Verifies the architecture hash and the incoming checksum, overwrites the
/// listed parameter words in place, and rewrites the trailing checksum.
/// Byte-for-byte equal to grafting in memory and re-serializing.
pub fn apply_patch(model_bytes: &[u8], patch: &PatchList) -> Result<Vec<u8>> {
    let (arch, _meta, layout) = format::parse_header(model_bytes)?;
    let hash = arch.arch_hash();
    if hash != patch.arch_hash {
        return Err(Error::ArchMismatch(format!(
            "patch was made for arch {} but the model is {}",
            &patch.arch_hash[..12.min(patch.arch_hash.len())],
            &hash[..12]
        )));
    }
    format::verify_checksum(model_bytes, layout)?;
    let limit = 4 * layout.param_count as u64;
    let mut out = model_bytes.to_vec();
    for e in &patch.entries {
        if e.offset % 4 != 0 || e.offset + 4 > limit {
            return Err(Error::Format(format!(
                "patch offset {} outside the parameter block",
                e.offset
            )));
        }
        let at = layout.param_start + e.offset as usize;
        out[at..at + 4].copy_from_slice(&e.value);
    }
    format::rewrite_checksum(&mut out, layout);
    Ok(out)
}
