"""Category hierarchies: parsing, validation and per-node target derivation.

A hierarchy document is JSON::

    {"labels": ["Background", ...],
     "flip_pairs": [["Left-arm", "Right-arm"], ...],
     "tree": {"name": "root", "children": [
         {"name": "background", "labels": ["Background"]}, ...]}}

The root sits at level 0; its children are level 1. Every label lives in
exactly one leaf. A node's routing/leaf target has one channel per child
(or per leaf label) plus a final "other" channel.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from .ops import IGNORE_INDEX

CONFIG_DIR = Path(__file__).parent / "configs"
SHIPPED = ("lip", "cihp", "pascal_person_part", "mhpv2", "toy7")


class HierarchyError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSet:
    names: tuple
    flip_pairs: tuple = ()
    background: int = 0

    def __len__(self) -> int:
        return len(self.names)

    def id_of(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class TreeNode:
    node_id: str
    level: int
    children: tuple = ()
    leaf_labels: tuple = ()

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def kind(self) -> str:
        return "leaf" if self.is_leaf else "virtual"

    @property
    def num_channels(self) -> int:
        """Target channel count I: foreground channels plus "other"."""
        return (len(self.leaf_labels) if self.is_leaf else len(self.children)) + 1

    def walk(self) -> Iterator["TreeNode"]:
        yield self
        for c in self.children:
            yield from c.walk()

    def subtree_labels(self) -> tuple:
        if self.is_leaf:
            return self.leaf_labels
        return tuple(l for c in self.children for l in c.subtree_labels())


@dataclass(frozen=True)
class TreeSpec:
    label_set: LabelSet
    root: TreeNode
    height: int
    _lookup: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self._lookup.update({n.node_id: n for n in self.root.walk()})

    @property
    def num_labels(self) -> int:
        return len(self.label_set)

    def node(self, node_id: str) -> TreeNode:
        return self._lookup[node_id]

    def nodes(self) -> list:
        return list(self.root.walk())

    def virtual_nodes(self) -> list:
        return [n for n in self.root.walk() if not n.is_leaf]

    def leaves(self) -> list:
        return [n for n in self.root.walk() if n.is_leaf]


# -- parsing ----------------------------------------------------------------------

def _parse_node(obj, names: list, level: int, path: str, seen_ids: set) -> TreeNode:
    if not isinstance(obj, dict):
        raise HierarchyError(f"{path}: node must be an object")
    name = obj.get("name")
    if not isinstance(name, str) or not name:
        raise HierarchyError(f"{path}.name: missing or not a string")
    if name in seen_ids:
        raise HierarchyError(f"{path}.name: duplicate node name {name!r}")
    seen_ids.add(name)
    has_children = "children" in obj
    has_labels = "labels" in obj
    if has_children == has_labels:
        raise HierarchyError(f"{path} ({name}): node needs exactly one of 'children' or 'labels'")
    if has_labels:
        labels = obj["labels"]
        if not isinstance(labels, list) or not labels:
            raise HierarchyError(f"{path}.labels ({name}): empty leaf")
        ids = []
        for i, lab in enumerate(labels):
            if lab not in names:
                raise HierarchyError(f"{path}.labels[{i}] ({name}): unknown label {lab!r}")
            ids.append(names.index(lab))
        return TreeNode(name, level, (), tuple(ids))
    children = obj["children"]
    if not isinstance(children, list) or not children:
        raise HierarchyError(f"{path}.children ({name}): virtual node without children")
    kids = tuple(_parse_node(c, names, level + 1, f"{path}.children[{i}]", seen_ids)
                 for i, c in enumerate(children))
    return TreeNode(name, level, kids, ())


def parse_hierarchy(document: Union[str, bytes, dict]) -> TreeSpec:
    """Parse a hierarchy document (JSON text or already-decoded dict)."""
    if isinstance(document, (str, bytes)):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as e:
            raise HierarchyError(f"malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    else:
        doc = document
    if not isinstance(doc, dict):
        raise HierarchyError("top level must be an object")
    for key in ("labels", "tree"):
        if key not in doc:
            raise HierarchyError(f"missing top-level field {key!r}")
    names = doc["labels"]
    if not isinstance(names, list) or not names or not all(isinstance(n, str) for n in names):
        raise HierarchyError("labels: must be a non-empty array of strings")
    if len(set(names)) != len(names):
        raise HierarchyError("labels: names must be unique")
    pairs = []
    for i, pair in enumerate(doc.get("flip_pairs", [])):
        if not (isinstance(pair, list) and len(pair) == 2):
            raise HierarchyError(f"flip_pairs[{i}]: expected a two-element array")
        for lab in pair:
            if lab not in names:
                raise HierarchyError(f"flip_pairs[{i}]: unknown label {lab!r}")
        pairs.append((names.index(pair[0]), names.index(pair[1])))
    root = _parse_node(doc["tree"], names, 0, "tree", set())
    label_set = LabelSet(tuple(names), tuple(pairs), 0)
    height = max(n.level for n in root.walk() if n.is_leaf)
    spec = TreeSpec(label_set, root, height)
    problems = validate(spec)
    if problems:
        raise HierarchyError("; ".join(problems))
    return spec


def load_hierarchy(name_or_path: Union[str, Path]) -> TreeSpec:
    """Load a shipped hierarchy by short name (``"toy7"``) or a JSON file path."""
    p = Path(name_or_path)
    if not p.exists() and str(name_or_path) in SHIPPED:
        p = CONFIG_DIR / f"{name_or_path}.json"
    try:
        text = p.read_text()
    except OSError as e:
        raise HierarchyError(f"cannot read hierarchy {name_or_path}: {e}") from e
    return parse_hierarchy(text)


def validate(spec: TreeSpec) -> list:
    """Return every invariant violation (empty list means valid)."""
    out = []
    ls = spec.label_set
    n = len(ls.names)
    if len(set(ls.names)) != n:
        out.append("duplicate label names")
    seen_in_pairs = {}
    for a, b in ls.flip_pairs:
        if a == b:
            out.append(f"flip pair ({ls.names[a]}, {ls.names[b]}) is reflexive")
        for x, y in ((a, b), (b, a)):
            if x in seen_in_pairs and seen_in_pairs[x] != y:
                out.append(f"label {ls.names[x]} appears in conflicting flip pairs")
            seen_in_pairs[x] = y
    owners = {}
    ids = set()
    for node in spec.root.walk():
        if node.node_id in ids:
            out.append(f"duplicate node id {node.node_id}")
        ids.add(node.node_id)
        for c in node.children:
            if c.level != node.level + 1:
                out.append(f"level discontinuity: {c.node_id} at level {c.level} under "
                           f"{node.node_id} at level {node.level}")
        if node.is_leaf:
            if not node.leaf_labels:
                out.append(f"empty leaf {node.node_id}")
            for lab in node.leaf_labels:
                if not 0 <= lab < n:
                    out.append(f"leaf {node.node_id} references unknown label id {lab}")
                    continue
                owners.setdefault(lab, []).append(node.node_id)
        elif len(node.children) < 2:
            out.append(f"virtual node {node.node_id} has fewer than 2 children")
    for lab in range(n):
        where = owners.get(lab, [])
        if not where:
            out.append(f"label unassigned: {ls.names[lab]}")
        elif len(where) > 1:
            out.append(f"label {ls.names[lab]} assigned to several leaves: {', '.join(where)}")
    leaf_levels = [x.level for x in spec.root.walk() if x.is_leaf]
    if spec.height < 1 or spec.height != max(leaf_levels, default=0):
        out.append(f"height {spec.height} inconsistent with deepest leaf")
    return out


def serialize(spec: TreeSpec) -> dict:
    names = list(spec.label_set.names)

    def node(n: TreeNode):
        if n.is_leaf:
            return {"name": n.node_id, "labels": [names[i] for i in n.leaf_labels]}
        return {"name": n.node_id, "children": [node(c) for c in n.children]}

    return {"labels": names,
            "flip_pairs": [[names[a], names[b]] for a, b in spec.label_set.flip_pairs],
            "tree": node(spec.root)}


def canonical_json(spec: TreeSpec) -> str:
    return json.dumps(serialize(spec), sort_keys=True, separators=(",", ":"))


def spec_hash(spec: TreeSpec) -> bytes:
    return hashlib.sha256(canonical_json(spec).encode()).digest()


def truncate(spec: TreeSpec, height: int) -> Optional[TreeSpec]:
    """Cut the tree at ``height``: virtual nodes at that level become leaves
    holding their whole subtree's labels (sorted by id). Height 0 -> None."""
    if not 0 <= height <= spec.height:
        raise HierarchyError(f"height override {height} outside [0, {spec.height}]")
    if height == 0:
        return None
    if height == spec.height:
        return spec

    def cut(n: TreeNode) -> TreeNode:
        if n.is_leaf:
            return n
        if n.level == height:
            return TreeNode(n.node_id, n.level, (), tuple(sorted(n.subtree_labels())))
        return TreeNode(n.node_id, n.level, tuple(cut(c) for c in n.children), ())

    root = cut(spec.root)
    return TreeSpec(spec.label_set, root, max(x.level for x in root.walk() if x.is_leaf))


# -- targets ------------------------------------------------------------------------

def _lut(spec_labels: int, assign: dict, other: int) -> np.ndarray:
    lut = np.full(256, -1, dtype=np.int64)
    lut[:spec_labels] = other
    for lab, ch in assign.items():
        lut[lab] = ch
    lut[IGNORE_INDEX] = IGNORE_INDEX
    return lut


def _apply_lut(labels: np.ndarray, lut: np.ndarray, n_labels: int) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.size and (lab.min() < 0 or lab.max() > 255):
        raise ValueError("label ids must lie in [0, 255]")
    out = lut[lab.astype(np.intp)]
    if np.any(out < 0):
        bad = np.unique(lab[out < 0])
        raise ValueError(f"label ids {bad.tolist()} outside the label set of size {n_labels}")
    return out


def routing_assignment(node: TreeNode) -> dict:
    return {lab: ci for ci, c in enumerate(node.children) for lab in c.subtree_labels()}


def routing_target(labels: np.ndarray, node: TreeNode, num_labels: int) -> np.ndarray:
    """Per-pixel child index for a virtual node; labels outside it map to I-1."""
    if node.is_leaf:
        raise ValueError(f"routing_target needs a virtual node, {node.node_id} is a leaf")
    lut = _lut(num_labels, routing_assignment(node), node.num_channels - 1)
    return _apply_lut(labels, lut, num_labels)


def leaf_target(labels: np.ndarray, leaf: TreeNode, num_labels: int) -> np.ndarray:
    """Per-pixel index within the leaf's label list; anything else maps to I-1."""
    if not leaf.is_leaf:
        raise ValueError(f"leaf_target needs a leaf, {leaf.node_id} is virtual")
    lut = _lut(num_labels, {lab: i for i, lab in enumerate(leaf.leaf_labels)}, leaf.num_channels - 1)
    return _apply_lut(labels, lut, num_labels)


def final_channel_order(spec: TreeSpec) -> list:
    """(leaf_id, local channel) for every label, ordered by global label id."""
    owner = {}
    for leaf in spec.leaves():
        for i, lab in enumerate(leaf.leaf_labels):
            owner[lab] = (leaf.node_id, i)
    return [owner[lab] for lab in range(spec.num_labels)]


def flip_labels(labels: np.ndarray, spec: TreeSpec) -> np.ndarray:
    """Mirror horizontally (last axis) and swap left/right label ids."""
    lut = np.arange(256, dtype=np.int64)
    for a, b in spec.label_set.flip_pairs:
        lut[a], lut[b] = b, a
    lab = np.asarray(labels)
    return lut[lab[..., ::-1].astype(np.intp)].astype(lab.dtype)
