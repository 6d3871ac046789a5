"""Material taxonomy: hierarchy, graph form, path metric, consolidation, properties.

The shipped default taxonomy is a five-level tree (phase, state, composition,
form, material) rooted at "Solid" with 57 material leaves. A taxonomy is
immutable after load; all derived structures (graph, labels, distances) are
pure functions of it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Optional

__all__ = [
    "TaxonomyError",
    "TaxonomyNode",
    "Taxonomy",
    "HierarchicalLabel",
    "DirectedTaxonomyGraph",
    "MechanicalProperties",
    "ConsolidationMap",
    "QualityThresholds",
    "load_taxonomy",
    "load_taxonomy_file",
    "default_taxonomy",
    "default_properties",
    "default_consolidation",
    "to_graph",
    "label_of",
    "path_distance",
    "consolidate",
    "load_properties",
    "load_consolidation",
    "mechanical_summary",
]


class TaxonomyError(ValueError):
    """Raised for malformed taxonomy documents or invalid queries."""


@dataclass(frozen=True)
class TaxonomyNode:
    id: str
    name: str
    level: str
    parent: Optional[str]
    children: tuple[str, ...] = ()


@dataclass(frozen=True)
class Taxonomy:
    nodes: dict[str, TaxonomyNode]
    root: str
    level_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_order", _preorder(self))
        object.__setattr__(self, "_depths", _depths(self))

    @property
    def preorder(self) -> tuple[str, ...]:
        """Node ids in preorder (document order), the canonical node order."""
        return self._order

    def level_index(self, node_id: str) -> int:
        return self.level_names.index(self.nodes[node_id].level)

    def depth(self, node_id: str) -> int:
        return self._depths[node_id]

    def node(self, node_id: str) -> TaxonomyNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise TaxonomyError(f"unknown node id: {node_id!r}") from None

    def leaves(self) -> tuple[str, ...]:
        return tuple(i for i in self.preorder if not self.nodes[i].children)

    def material_leaves(self) -> tuple[str, ...]:
        last = self.level_names[-1]
        return tuple(i for i in self.preorder if self.nodes[i].level == last)

    def by_name(self, name: str) -> str:
        """Resolve a display name (case-insensitive) or id to a node id."""
        if name in self.nodes:
            return name
        lowered = name.strip().lower()
        hits = [i for i, n in self.nodes.items() if n.name.lower() == lowered]
        if not hits:
            raise TaxonomyError(f"unknown node name: {name!r}")
        return hits[0]

    def ancestors(self, node_id: str) -> tuple[str, ...]:
        """Path root -> node inclusive."""
        chain = []
        cur: Optional[str] = node_id
        while cur is not None:
            chain.append(cur)
            cur = self.node(cur).parent
        return tuple(reversed(chain))

    def to_document(self) -> dict:
        return {
            "level_names": list(self.level_names),
            "nodes": [
                {
                    "id": n.id,
                    "name": n.name,
                    "level": n.level,
                    "parent": n.parent,
                }
                for n in (self.nodes[i] for i in self.preorder)
            ],
        }

    def content_hash(self) -> str:
        blob = json.dumps(self.to_document(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class HierarchicalLabel:
    """Root-to-node path of ids; consecutive entries are parent->child edges."""

    path: tuple[str, ...]

    def __post_init__(self):
        if not self.path:
            raise TaxonomyError("hierarchical label must be non-empty")

    @property
    def leaf(self) -> str:
        return self.path[-1]

    def node_at(self, level_index: int) -> str:
        return self.path[level_index]


@dataclass(frozen=True)
class DirectedTaxonomyGraph:
    """Adjacency form of a taxonomy: one directed edge per parent->child pair.

    Node order is the taxonomy preorder, so tensors indexed by node are
    deterministic for a given document.
    """

    node_ids: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]  # (parent_index, child_index)
    level_of: tuple[int, ...]  # level index per node
    level_names: tuple[str, ...]

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    def index_of(self, node_id: str) -> int:
        return self._index[node_id]

    def __post_init__(self):
        object.__setattr__(
            self, "_index", {nid: i for i, nid in enumerate(self.node_ids)}
        )
        levels: list[list[int]] = [[] for _ in self.level_names]
        for i, li in enumerate(self.level_of):
            levels[li].append(i)
        object.__setattr__(self, "level_members", tuple(tuple(m) for m in levels))


@dataclass(frozen=True)
class MechanicalProperties:
    density: tuple[float, float]  # kg/m^3
    surface_roughness: tuple[float, float]  # um
    youngs_modulus: tuple[float, float]  # GPa
    yield_strength: Optional[tuple[float, float]]  # MPa, absent for "--" rows
    tensile_strength: tuple[float, float]  # MPa
    poissons_ratio: tuple[float, float]

    def __post_init__(self):
        for label, rng in [
            ("density", self.density),
            ("surface_roughness", self.surface_roughness),
            ("youngs_modulus", self.youngs_modulus),
            ("yield_strength", self.yield_strength),
            ("tensile_strength", self.tensile_strength),
            ("poissons_ratio", self.poissons_ratio),
        ]:
            if rng is None:
                continue
            lo, hi = rng
            if not (lo <= hi):
                raise TaxonomyError(f"{label}: range low must be <= high, got {rng}")
            if hi <= 0:
                raise TaxonomyError(f"{label}: values must be positive, got {rng}")


@dataclass(frozen=True)
class ConsolidationMap:
    merges: tuple[tuple[tuple[str, ...], str], ...]  # (source names, target name)
    omissions: tuple[str, ...]

    def __post_init__(self):
        seen: set[str] = set()
        for sources, _target in self.merges:
            for s in sources:
                if s in seen:
                    raise TaxonomyError(f"source {s!r} appears in more than one merge")
                seen.add(s)
        targets = {t.lower() for _, t in self.merges}
        for o in self.omissions:
            if o in seen or o.lower() in targets:
                raise TaxonomyError(f"omitted name {o!r} is also a merge source/target")


@dataclass(frozen=True)
class QualityThresholds:
    """Qualitative tagging thresholds: tensile [MPa], stiffness [GPa], density [kg/m^3]."""

    tensile_threshold: float = 1.0
    stiffness_threshold: float = 12.0
    density_threshold: float = 1600.0

    def __post_init__(self):
        if min(self.tensile_threshold, self.stiffness_threshold, self.density_threshold) <= 0:
            raise TaxonomyError("thresholds must be positive")


def _preorder(t: Taxonomy) -> tuple[str, ...]:
    order: list[str] = []
    stack = [t.root]
    while stack:
        cur = stack.pop()
        order.append(cur)
        stack.extend(reversed(t.nodes[cur].children))
    return tuple(order)


def _depths(t: Taxonomy) -> dict[str, int]:
    d = {t.root: 0}
    stack = [t.root]
    while stack:
        cur = stack.pop()
        for c in t.nodes[cur].children:
            d[c] = d[cur] + 1
            stack.append(c)
    return d


def load_taxonomy(document: dict) -> Taxonomy:
    """Validate a taxonomy document and build the immutable Taxonomy.

    Schema: {"level_names": [...], "nodes": [{"id","name","level","parent"}...]}.
    Children order follows document order. Errors name the offending node.
    """
    if not isinstance(document, dict):
        raise TaxonomyError("taxonomy document must be a JSON object")
    level_names = document.get("level_names")
    raw_nodes = document.get("nodes")
    if not isinstance(level_names, list) or not level_names:
        raise TaxonomyError("missing or empty 'level_names'")
    if not isinstance(raw_nodes, list) or not raw_nodes:
        raise TaxonomyError("missing or empty 'nodes'")
    level_idx = {name: i for i, name in enumerate(level_names)}
    if len(level_idx) != len(level_names):
        raise TaxonomyError("duplicate level names")

    seen: dict[str, dict] = {}
    children: dict[str, list[str]] = {}
    roots = []
    for entry in raw_nodes:
        for key in ("id", "name", "level"):
            if key not in entry:
                raise TaxonomyError(f"node missing field {key!r}: {entry!r}")
        nid = entry["id"]
        if nid in seen:
            raise TaxonomyError(f"duplicate node id: {nid!r}")
        if entry["level"] not in level_idx:
            raise TaxonomyError(f"node {nid!r}: unknown level {entry['level']!r}")
        seen[nid] = entry
        children.setdefault(nid, [])
        if entry.get("parent") is None:
            roots.append(nid)

    if len(roots) != 1:
        raise TaxonomyError(f"expected exactly one root, found {len(roots)}: {roots}")
    root = roots[0]
    if level_idx[seen[root]["level"]] != 0:
        raise TaxonomyError(f"root {root!r} must be at level {level_names[0]!r}")

    for nid, entry in seen.items():
        parent = entry.get("parent")
        if parent is None:
            continue
        if parent not in seen:
            raise TaxonomyError(f"node {nid!r}: orphan, parent {parent!r} not defined")
        if level_idx[entry["level"]] != level_idx[seen[parent]["level"]] + 1:
            raise TaxonomyError(
                f"node {nid!r}: level {entry['level']!r} does not directly "
                f"follow parent level {seen[parent]['level']!r} (level skip)"
            )
        children[parent].append(nid)

    # Parent links at strictly increasing level index cannot cycle, but a
    # malformed multi-root document could still hide unreachable nodes.
    reachable = set()
    stack = [root]
    while stack:
        cur = stack.pop()
        reachable.add(cur)
        stack.extend(children[cur])
    if reachable != set(seen):
        stray = sorted(set(seen) - reachable)
        raise TaxonomyError(f"nodes unreachable from root (cycle or orphan): {stray}")

    nodes = {
        nid: TaxonomyNode(
            id=nid,
            name=seen[nid]["name"],
            level=seen[nid]["level"],
            parent=seen[nid].get("parent"),
            children=tuple(children[nid]),
        )
        for nid in seen
    }
    return Taxonomy(nodes=nodes, root=root, level_names=tuple(level_names))


def load_taxonomy_file(path) -> Taxonomy:
    with open(path, "r", encoding="utf-8") as f:
        return load_taxonomy(json.load(f))


def _asset(name: str) -> dict:
    with resources.files("matprobe.assets").joinpath(name).open("r", encoding="utf-8") as f:
        return json.load(f)


def default_taxonomy() -> Taxonomy:
    """The shipped 57-material, 5-level taxonomy."""
    return load_taxonomy(_asset("taxonomy.json"))


def default_properties() -> dict[str, MechanicalProperties]:
    return _parse_properties(_asset("properties.json"))


def default_consolidation() -> ConsolidationMap:
    return _parse_consolidation(_asset("consolidation.json"))


def to_graph(t: Taxonomy) -> DirectedTaxonomyGraph:
    order = t.preorder
    index = {nid: i for i, nid in enumerate(order)}
    edges = []
    for nid in order:
        for c in t.nodes[nid].children:
            edges.append((index[nid], index[c]))
    return DirectedTaxonomyGraph(
        node_ids=order,
        edges=tuple(edges),
        level_of=tuple(t.level_index(i) for i in order),
        level_names=t.level_names,
    )


def label_of(t: Taxonomy, leaf: str) -> HierarchicalLabel:
    return HierarchicalLabel(path=t.ancestors(leaf))


def path_distance(t: Taxonomy, a: str, b: str) -> int:
    """Number of tree edges between two nodes (hops via their lowest common ancestor)."""
    pa, pb = t.ancestors(a), t.ancestors(b)
    common = 0
    for x, y in zip(pa, pb):
        if x != y:
            break
        common += 1
    return (len(pa) - common) + (len(pb) - common)


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name.strip().lower()).strip("_")


def consolidate(t: Taxonomy, m: ConsolidationMap) -> Taxonomy:
    """Merge and omit material leaves, producing a smaller valid taxonomy.

    A merge whose target name matches one of its sources keeps that node in
    place and drops the other sources. Otherwise the merged leaf is a new
    material node placed under the sources' deepest common ancestor; when that
    ancestor sits above the form level, a synthetic form node ("Any <name>")
    is inserted so every leaf stays at the material level. Interior nodes left
    childless are removed.
    """
    material_level = t.level_names[-1]
    form_index = len(t.level_names) - 2

    def resolve_material(name: str) -> str:
        nid = t.by_name(name)
        if t.nodes[nid].level != material_level:
            raise TaxonomyError(f"{name!r} is not a material-level node")
        return nid

    doc_nodes = {n["id"]: dict(n) for n in t.to_document()["nodes"]}
    order = list(t.preorder)
    removed: set[str] = set()
    inserted_after: dict[str, list[dict]] = {}

    for name in m.omissions:
        removed.add(resolve_material(name))

    for sources, target in m.merges:
        src_ids = [resolve_material(s) for s in sources]
        kept = [s for s in src_ids if t.nodes[s].name.lower() == target.lower()]
        if kept:
            for s in src_ids:
                if s != kept[0]:
                    removed.add(s)
            continue
        chains = [t.ancestors(s) for s in src_ids]
        common = 0
        for group in zip(*chains):
            if len(set(group)) != 1:
                break
            common += 1
        dca = chains[0][common - 1]
        if t.nodes[dca].level == material_level:
            # single-source merge is a rename: keep the leaf's position
            dca = t.nodes[dca].parent
        dca_index = t.level_index(dca)
        if dca_index < form_index - 1:
            raise TaxonomyError(
                f"merge target {target!r}: sources share no common parent at "
                f"the form level (deepest common ancestor {dca!r} is at "
                f"level {t.nodes[dca].level!r})"
            )
        removed.update(src_ids)
        leaf_id = _slug(target)
        if dca_index == form_index:
            parent_id = dca
            new_nodes = []
        else:
            # composition-level ancestor: synthesize the intervening form node
            parent_id = f"any_{_slug(t.nodes[dca].name)}"
            new_nodes = [
                {
                    "id": parent_id,
                    "name": f"Any {t.nodes[dca].name.lower()}",
                    "level": t.level_names[form_index],
                    "parent": dca,
                }
            ]
        new_nodes.append(
            {"id": leaf_id, "name": target, "level": material_level, "parent": parent_id}
        )
        for n in new_nodes:
            if n["id"] in doc_nodes or n["id"] in {x["id"] for xs in inserted_after.values() for x in xs}:
                raise TaxonomyError(f"consolidated id {n['id']!r} collides with an existing node")
        inserted_after.setdefault(dca, []).extend(new_nodes)

    out_nodes: list[dict] = []
    for nid in order:
        if nid not in removed:
            out_nodes.append(doc_nodes[nid])
        if nid in inserted_after:
            out_nodes.extend(inserted_after[nid])

    # prune interior nodes left childless (repeat: pruning can cascade upward)
    while True:
        has_child = {n["parent"] for n in out_nodes if n["parent"] is not None}
        keep = [
            n
            for n in out_nodes
            if n["level"] == material_level or n["id"] in has_child
        ]
        if len(keep) == len(out_nodes):
            break
        out_nodes = keep

    return load_taxonomy({"level_names": list(t.level_names), "nodes": out_nodes})


def _parse_range(value, *, optional=False):
    if value is None:
        if optional:
            return None
        raise TaxonomyError("missing required range")
    lo, hi = float(value[0]), float(value[1])
    return (lo, hi)


def _parse_properties(doc: dict) -> dict[str, MechanicalProperties]:
    out = {}
    for mid, entry in doc.items():
        out[mid] = MechanicalProperties(
            density=_parse_range(entry["density"]),
            surface_roughness=_parse_range(entry["roughness"]),
            youngs_modulus=_parse_range(entry["youngs"]),
            yield_strength=_parse_range(entry.get("yield"), optional=True),
            tensile_strength=_parse_range(entry["tensile"]),
            poissons_ratio=_parse_range(entry["poisson"]),
        )
    return out


def load_properties(path) -> dict[str, MechanicalProperties]:
    with open(path, "r", encoding="utf-8") as f:
        return _parse_properties(json.load(f))


def _parse_consolidation(doc: dict) -> ConsolidationMap:
    merges = tuple(
        (tuple(entry["sources"]), entry["target"]) for entry in doc.get("merges", [])
    )
    return ConsolidationMap(merges=merges, omissions=tuple(doc.get("omit", [])))


def load_consolidation(path) -> ConsolidationMap:
    with open(path, "r", encoding="utf-8") as f:
        return _parse_consolidation(json.load(f))


def mechanical_summary(
    material: str,
    properties: dict[str, MechanicalProperties],
    thresholds: QualityThresholds = QualityThresholds(),
) -> tuple[str, str, str]:
    """Qualitative (Strong|Fragile, Rigid|Deformable, Heavy|Light) tags.

    Each range's midpoint is compared against the threshold; midpoint >=
    threshold yields the stronger tag.
    """
    try:
        p = properties[material]
    except KeyError:
        raise TaxonomyError(f"no mechanical properties entry for {material!r}") from None

    def mid(rng):
        return 0.5 * (rng[0] + rng[1])

    return (
        "Strong" if mid(p.tensile_strength) >= thresholds.tensile_threshold else "Fragile",
        "Rigid" if mid(p.youngs_modulus) >= thresholds.stiffness_threshold else "Deformable",
        "Heavy" if mid(p.density) >= thresholds.density_threshold else "Light",
    )
