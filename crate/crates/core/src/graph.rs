//! Structure-graph view of an architecture and subnet selection inside it.
//!
//! A network is viewed as a chain of *node layers*: node layer 0 is the
//! input (channels), and every dense/conv layer emits one more node layer
//! (its output units/channels). Consecutive node layers are joined by a
//! complete bipartite block of edges — except grouped convs, which only
//! connect channels within the same group.
//!
//! A [`SubnetSpec`] picks a small set of nodes in every *hidden* node layer
//! (all but the classifier output). Those nodes, with the edges between
//! them, form the slot a narrow subnet is grafted into:
//!
//! * every hidden node layer contributes at least 1 and at most `width`
//!   nodes, and the layer feeding the classifier contributes exactly 1;
//! * the unselected remainder of every layer stays non-empty, so the host
//!   keeps a functioning (if pruned) path;
//! * node layers tied together by residual adds select the *same* indices,
//!   so the skip connection stays internal to the subnet;
//! * selections through a grouped conv stay within a single group on both
//!   sides, because cross-group edges do not exist in storage;
//! * node layer 0 is implicitly fully selected: the subnet reads the whole
//!   input, and nothing upstream of it exists to cut.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;

use crate::arch::{Arch, ArchInfo, EdgeKind, Layer};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Layered view of an architecture: node-layer widths and the sizes of the
/// bipartite edge blocks between consecutive node layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureGraph {
    /// Node-layer widths, input (index 0) through classifier output.
    pub widths: Vec<usize>,
    /// `edges[i]` = number of node-level edges between node layers `i` and
    /// `i + 1`. Complete bipartite, except grouped convs connect only
    /// within a group.
    pub edges: Vec<u64>,
    /// Selection-group id per node layer; layers joined by residual adds
    /// share an id and must select identical node sets.
    pub sel_groups: Vec<usize>,
    /// Ids of the node layers eligible for subnet selection.
    pub hidden: Vec<usize>,
}

/// Build the layered node/edge view of `arch`.
pub fn build_graph(arch: &Arch) -> Result<StructureGraph> {
    let info = arch.infer()?;
    info.topo.host_check(arch)?;
    let widths: Vec<usize> = info.topo.node_layers.iter().map(|n| n.width).collect();
    let edges = info
        .topo
        .edge_layers
        .iter()
        .map(|e| {
            let groups = match e.kind {
                EdgeKind::Conv { groups, .. } => groups as u64,
                EdgeKind::Dense => 1,
            };
            (widths[e.in_nl] as u64) * (widths[e.out_nl] as u64) / groups
        })
        .collect();
    Ok(StructureGraph {
        widths,
        edges,
        sel_groups: info.topo.node_layers.iter().map(|n| n.sel_group).collect(),
        hidden: info.topo.hidden_node_layers(),
    })
}

/// How `select_subnet` picks node indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectStrategy {
    /// Uniformly random distinct indices (seeded, reproducible).
    Random,
    /// Lowest eligible indices — handy for readable examples and tests.
    Top,
}

impl std::str::FromStr for SelectStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SelectStrategy::Random),
            "top" => Ok(SelectStrategy::Top),
            other => Err(Error::InvalidConfig(format!(
                "unknown selection strategy '{other}' (expected 'random' or 'top')"
            ))),
        }
    }
}

/// A concrete slot for a narrow subnet inside a host architecture: which
/// nodes of each hidden node layer it owns, which class it fires.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubnetSpec {
    /// Hash of the host architecture this selection refers to.
    pub arch_hash: String,
    /// Class index the grafted subnet is wired to.
    pub target: usize,
    /// Per-layer node budget the selection was made under (`W`).
    pub width: usize,
    /// Seed the selection was drawn with (provenance only).
    pub seed: u64,
    /// `selected[i]` = sorted node indices owned in node layer `i + 1`.
    pub selected: Vec<Vec<usize>>,
}

impl SubnetSpec {
    /// Selected indices in hidden node layer `nl` (node-layer id, ≥ 1).
    pub fn selection_for(&self, nl: usize) -> &[usize] {
        &self.selected[nl - 1]
    }

    /// Check this spec against a host architecture: hash match, selection
    /// sizes, ordering, residual mirroring, grouped-conv containment.
    pub fn validate(&self, arch: &Arch) -> Result<()> {
        let info = arch.infer()?;
        info.topo.host_check(arch)?;
        let topo = &info.topo;
        let got = arch.arch_hash();
        if self.arch_hash != got {
            return Err(Error::ArchMismatch(format!(
                "spec was made for arch {} but got {}",
                &self.arch_hash[..12.min(self.arch_hash.len())],
                &got[..12]
            )));
        }
        if self.target >= topo.classes {
            return Err(Error::TargetOutOfRange { target: self.target, classes: topo.classes });
        }
        if self.width == 0 {
            return Err(Error::InvalidSpec("width must be at least 1".into()));
        }
        let hidden = topo.hidden_node_layers();
        if self.selected.len() != hidden.len() {
            return Err(Error::InvalidSpec(format!(
                "selection covers {} node layers, host has {} hidden node layers",
                self.selected.len(),
                hidden.len()
            )));
        }
        let last_hidden = *hidden.last().expect("host has hidden layers");

        for &nl in &hidden {
            let sel = self.selection_for(nl);
            let layer_width = topo.node_layers[nl].width;
            if sel.is_empty() {
                return Err(Error::InvalidSpec(format!("node layer {nl}: empty selection")));
            }
            if !sel.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::InvalidSpec(format!(
                    "node layer {nl}: selection must be strictly ascending"
                )));
            }
            if *sel.last().unwrap() >= layer_width {
                return Err(Error::InvalidSpec(format!(
                    "node layer {nl}: index {} out of range (width {layer_width})",
                    sel.last().unwrap()
                )));
            }
            if sel.len() > self.width {
                return Err(Error::InvalidSpec(format!(
                    "node layer {nl}: {} nodes selected, budget is {}",
                    sel.len(),
                    self.width
                )));
            }
            if nl == last_hidden && sel.len() != 1 {
                return Err(Error::InvalidSpec(
                    "the node layer feeding the classifier must select exactly 1 node".into(),
                ));
            }
            if sel.len() >= layer_width {
                return Err(Error::LayerTooNarrow {
                    layer: nl,
                    width: layer_width,
                    need: sel.len() + 1,
                });
            }
        }

        // Residual mirroring: same sel_group ⇒ identical selection.
        for &a in &hidden {
            for &b in &hidden {
                if a < b && topo.node_layers[a].sel_group == topo.node_layers[b].sel_group
                    && self.selection_for(a) != self.selection_for(b)
                {
                    return Err(Error::InvalidSpec(format!(
                        "node layers {a} and {b} are tied by a residual add \
                         and must select the same indices"
                    )));
                }
            }
        }

        // Grouped convs: both endpoints inside one (matching) group.
        for e in &topo.edge_layers[..topo.edge_layers.len() - 1] {
            let EdgeKind::Conv { groups, .. } = e.kind else { continue };
            if groups == 1 {
                continue;
            }
            if e.in_nl == 0 {
                return Err(Error::InvalidArch(
                    "the first dense/conv layer must see the full input (groups == 1)".into(),
                ));
            }
            let ocg = topo.node_layers[e.out_nl].width / groups;
            let icg = topo.node_layers[e.in_nl].width / groups;
            let out_sel = self.selection_for(e.out_nl);
            let gi = out_sel[0] / ocg;
            if out_sel.iter().any(|&v| v / ocg != gi) {
                return Err(Error::InvalidSpec(format!(
                    "node layer {}: selection spans conv groups",
                    e.out_nl
                )));
            }
            if self.selection_for(e.in_nl).iter().any(|&v| v / icg != gi) {
                return Err(Error::InvalidSpec(format!(
                    "node layers {} and {}: selections fall in different conv groups",
                    e.in_nl, e.out_nl
                )));
            }
        }

        if topo.classifier().in_expansion != 1 {
            return Err(Error::InvalidArch(
                "the layer feeding the classifier must be 1×1 in space \
                 (pool down before flattening) so one node maps to one classifier input"
                    .into(),
            ));
        }
        Ok(())
    }

    // ── text form ────────────────────────────────────────────────────────

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "subnet-spec v1").unwrap();
        writeln!(s, "arch {}", self.arch_hash).unwrap();
        writeln!(s, "target {}", self.target).unwrap();
        writeln!(s, "width {}", self.width).unwrap();
        writeln!(s, "seed {}", self.seed).unwrap();
        for (i, sel) in self.selected.iter().enumerate() {
            let list: Vec<String> = sel.iter().map(usize::to_string).collect();
            writeln!(s, "select {}: {}", i + 1, list.join(",")).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("subnet spec: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some("subnet-spec v1") {
            return Err(bad("missing 'subnet-spec v1' header"));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_owned)
                .ok_or_else(|| bad(&format!("expected '{key} …'")))
        };
        let arch_hash = field("arch")?;
        let target =
            field("target")?.parse::<usize>().map_err(|_| bad("target is not a number"))?;
        let width = field("width")?.parse::<usize>().map_err(|_| bad("width is not a number"))?;
        let seed = field("seed")?.parse::<u64>().map_err(|_| bad("seed is not a number"))?;
        let mut selected = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let rest = line.strip_prefix("select ").ok_or_else(|| bad("expected 'select …'"))?;
            let (nl, list) = rest.split_once(": ").ok_or_else(|| bad("malformed select line"))?;
            let nl: usize = nl.parse().map_err(|_| bad("bad node-layer id"))?;
            if nl != selected.len() + 1 {
                return Err(bad("select lines must cover node layers 1..=H in order"));
            }
            let sel = list
                .split(',')
                .map(|t| t.parse::<usize>().map_err(|_| bad("bad node index")))
                .collect::<Result<Vec<usize>>>()?;
            selected.push(sel);
        }
        if selected.is_empty() {
            return Err(bad("no select lines"));
        }
        Ok(SubnetSpec { arch_hash, target, width, seed, selected })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Pick one subnet slot. See [`select_subnets`] for the rules.
pub fn select_subnet(
    arch: &Arch,
    target: usize,
    width: usize,
    strategy: SelectStrategy,
    seed: u64,
) -> Result<SubnetSpec> {
    Ok(select_subnets(arch, &[target], width, strategy, seed)?.pop().expect("one spec"))
}

/// Pick `targets.len()` pairwise-disjoint subnet slots in one host.
///
/// Selection rules: hidden node layers get `width` nodes each, except the
/// layer feeding the classifier which always gets exactly 1; node layers
/// tied by residual adds reuse one selection; selections crossing a grouped
/// conv stay inside a single (consistently chosen) group; every layer keeps
/// at least one unselected node so the pruned host still has a path.
///
/// `Top` takes the lowest eligible indices, later specs taking the next
/// lowest. `Random` samples uniformly (seeded) among eligible indices.
pub fn select_subnets(
    arch: &Arch,
    targets: &[usize],
    width: usize,
    strategy: SelectStrategy,
    seed: u64,
) -> Result<Vec<SubnetSpec>> {
    let info = arch.infer()?;
    info.topo.host_check(arch)?;
    let topo = &info.topo;
    if targets.is_empty() {
        return Err(Error::InvalidSpec("no targets given".into()));
    }
    for (i, &t) in targets.iter().enumerate() {
        if t >= topo.classes {
            return Err(Error::TargetOutOfRange { target: t, classes: topo.classes });
        }
        if targets[..i].contains(&t) {
            return Err(Error::InvalidSpec(format!(
                "targets must be pairwise distinct, class {t} appears twice"
            )));
        }
    }
    if width == 0 {
        return Err(Error::InvalidSpec("width must be at least 1".into()));
    }
    if topo.classifier().in_expansion != 1 {
        return Err(Error::InvalidArch(
            "the layer feeding the classifier must be 1×1 in space \
             (pool down before flattening) so one node maps to one classifier input"
                .into(),
        ));
    }

    let mut rng = stream(seed, "subnet-select");
    let hidden = topo.hidden_node_layers();
    let last_hidden = *hidden.last().expect("host has hidden layers");
    let n_nl = topo.node_layers.len();

    // Eligible index window per node layer; grouped convs shrink the window
    // on both of their endpoints to one consistently chosen group.
    let mut lo = vec![0usize; n_nl];
    let mut hi: Vec<usize> = topo.node_layers.iter().map(|n| n.width).collect();
    for e in &topo.edge_layers[..topo.edge_layers.len() - 1] {
        let EdgeKind::Conv { groups, .. } = e.kind else { continue };
        if groups == 1 {
            continue;
        }
        if e.in_nl == 0 {
            return Err(Error::InvalidArch(
                "the first dense/conv layer must see the full input (groups == 1)".into(),
            ));
        }
        let icg = topo.node_layers[e.in_nl].width / groups;
        let ocg = topo.node_layers[e.out_nl].width / groups;
        let gi = match strategy {
            SelectStrategy::Top => 0,
            SelectStrategy::Random => rng.gen_range(0..groups),
        };
        lo[e.in_nl] = lo[e.in_nl].max(gi * icg);
        hi[e.in_nl] = hi[e.in_nl].min((gi + 1) * icg);
        lo[e.out_nl] = lo[e.out_nl].max(gi * ocg);
        hi[e.out_nl] = hi[e.out_nl].min((gi + 1) * ocg);
    }

    // Nodes each selection-group demands per spec: 1 if the group contains
    // the layer feeding the classifier, otherwise the full budget.
    let mut group_size: HashMap<usize, usize> = HashMap::new();
    let mut group_window: HashMap<usize, (usize, usize)> = HashMap::new();
    for &nl in &hidden {
        let g = topo.node_layers[nl].sel_group;
        let size = if nl == last_hidden { 1 } else { width };
        group_size.entry(g).and_modify(|s| *s = (*s).min(size)).or_insert(size);
        let w = group_window.entry(g).or_insert((0, usize::MAX));
        w.0 = w.0.max(lo[nl]);
        w.1 = w.1.min(hi[nl]);
    }

    let mut used: HashMap<usize, Vec<usize>> = HashMap::new(); // per sel_group
    let mut specs = Vec::with_capacity(targets.len());
    let arch_hash = arch.arch_hash();
    for &target in targets {
        let mut chosen: HashMap<usize, Vec<usize>> = HashMap::new();
        for &nl in &hidden {
            let g = topo.node_layers[nl].sel_group;
            if chosen.contains_key(&g) {
                continue;
            }
            let size = group_size[&g];
            let (wlo, whi) = group_window[&g];
            let taken = used.entry(g).or_default();
            let avail: Vec<usize> =
                (wlo..whi.min(topo.node_layers[nl].width)).filter(|i| !taken.contains(i)).collect();
            // Keep at least one untouched node in the layer overall.
            let layer_width = topo.node_layers[nl].width;
            if avail.len() < size || taken.len() + size >= layer_width {
                return Err(Error::LayerTooNarrow {
                    layer: nl,
                    width: layer_width,
                    need: taken.len() + size + 1,
                });
            }
            let mut sel: Vec<usize> = match strategy {
                SelectStrategy::Top => avail[..size].to_vec(),
                SelectStrategy::Random => {
                    sample(&mut rng, avail.len(), size).into_iter().map(|i| avail[i]).collect()
                }
            };
            sel.sort_unstable();
            taken.extend(sel.iter().copied());
            chosen.insert(g, sel);
        }
        let selected: Vec<Vec<usize>> =
            hidden.iter().map(|&nl| chosen[&topo.node_layers[nl].sel_group].clone()).collect();
        let spec = SubnetSpec { arch_hash: arch_hash.clone(), target, width, seed, selected };
        spec.validate(arch)?;
        specs.push(spec);
    }
    Ok(specs)
}

/// Derive the architecture of the narrow subnet that fits into `spec`'s
/// slot: same layer sequence as the host up to (excluding) the classifier,
/// with every width shrunk to the selection size. The first layer keeps the
/// full input fan-in and grouped convs become dense-in-channels (the
/// selection lives inside one group, whose channels are contiguous in the
/// narrow net).
pub fn derive_subnet_arch(arch: &Arch, spec: &SubnetSpec) -> Result<Arch> {
    spec.validate(arch)?;
    let info: ArchInfo = arch.infer()?;
    let topo = &info.topo;

    // Narrow width of each node layer (input stays full).
    let mut nw: Vec<usize> = vec![0; topo.node_layers.len()];
    nw[0] = topo.node_layers[0].width;
    for &nl in &topo.hidden_node_layers() {
        nw[nl] = spec.selection_for(nl).len();
    }

    let edge_at: HashMap<usize, usize> = topo
        .edge_layers
        .iter()
        .enumerate()
        .map(|(i, e)| (e.arch_idx, i))
        .collect();
    let bn_at: HashMap<usize, usize> = topo
        .node_layers
        .iter()
        .enumerate()
        .flat_map(|(nl, n)| n.bn_layers.iter().map(move |&idx| (idx, nl)))
        .collect();

    let classifier_idx = topo.classifier().arch_idx;
    let mut layers = Vec::with_capacity(classifier_idx);
    for (idx, layer) in arch.layers[..classifier_idx].iter().enumerate() {
        layers.push(match *layer {
            Layer::Dense { .. } => {
                let e = &topo.edge_layers[edge_at[&idx]];
                Layer::Dense { in_f: nw[e.in_nl] * e.in_expansion, out_f: nw[e.out_nl] }
            }
            Layer::Conv2d { k, stride, pad, .. } => {
                let e = &topo.edge_layers[edge_at[&idx]];
                Layer::Conv2d {
                    in_c: nw[e.in_nl],
                    out_c: nw[e.out_nl],
                    k,
                    stride,
                    pad,
                    groups: 1,
                }
            }
            Layer::BatchNorm { .. } => Layer::BatchNorm { c: nw[bn_at[&idx]] },
            Layer::Relu => Layer::Relu,
            Layer::MaxPool { k, stride } => Layer::MaxPool { k, stride },
            Layer::AvgPool { k, stride } => Layer::AvgPool { k, stride },
            Layer::Flatten => Layer::Flatten,
            Layer::ResidualAdd { from } => Layer::ResidualAdd { from },
        });
    }
    let narrow = Arch::new(arch.input, layers);
    narrow.infer().map_err(|e| {
        Error::Internal(format!("derived subnet arch failed validation: {e}"))
    })?;
    Ok(narrow)
}
