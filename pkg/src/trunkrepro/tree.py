"""The TRUNK tree: nodes, structural validation, canonical form, comparison,
JSON persistence and DOT rendering.

Node ids in canonical form are DFS paths: the root is ``"0"`` and the ``i``-th
child of node ``p`` is ``f"{p}.{i}"``, children ordered by smallest category.
"""

from __future__ import annotations

import hashlib
import json
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

SCHEMA = "trunkrepro.tree/1"
ROOT, SUPERGROUP, LEAF = "root", "supergroup", "leaf"
COLOURS = {ROOT: "red", SUPERGROUP: "gray", LEAF: "green"}


class TreeError(ValueError):
    pass


@dataclass(frozen=True)
class TreeNode:
    id: str
    depth: int
    categories: tuple
    kind: str
    grouping: tuple = ()
    children: tuple = ()
    weights_ref: str | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(frozen=True)
class Trunk:
    dataset: str
    gv: float
    nodes: dict
    root_id: str
    created_with: str = ""
    category_names: tuple = ()

    @property
    def root(self) -> TreeNode:
        return self.nodes[self.root_id]

    def internal_nodes(self) -> list[TreeNode]:
        return [n for n in self.nodes.values() if n.children]

    def leaves(self) -> list[TreeNode]:
        return [n for n in self.nodes.values() if not n.children]

    @property
    def depth(self) -> int:
        """Number of routing levels: 0 for a lone root-leaf, 1 for a flat tree."""
        return max(n.depth for n in self.nodes.values())

    @property
    def mean_groups_per_node(self) -> float:
        internal = self.internal_nodes()
        if not internal:
            return 0.0
        return sum(len(n.children) for n in internal) / len(internal)

    def universe(self) -> tuple:
        if self.category_names:
            return tuple(range(len(self.category_names)))
        return tuple(self.root.categories) if self.root_id in self.nodes else ()

    def category_name(self, cat) -> str:
        if self.category_names and isinstance(cat, int) and 0 <= cat < len(self.category_names):
            return str(self.category_names[cat])
        return str(cat)


@dataclass(frozen=True)
class Violation:
    node_id: str
    rule: str
    message: str

    def __str__(self):
        return f"{self.node_id}: [{self.rule}] {self.message}"


def validate(tree: Trunk) -> list[Violation]:
    out: list[Violation] = []
    nodes = tree.nodes
    if tree.root_id not in nodes:
        return [Violation(tree.root_id, "root", "root id not present in nodes")]
    roots = [n.id for n in nodes.values() if n.kind == ROOT]
    if roots != [tree.root_id]:
        out.append(Violation(tree.root_id, "root", f"expected exactly one root node, found {roots}"))

    parents: dict[str, list[str]] = {nid: [] for nid in nodes}
    for node in nodes.values():
        for child in node.children:
            if child not in nodes:
                out.append(Violation(node.id, "dangling-child", f"child {child!r} does not exist"))
            else:
                parents[child].append(node.id)
    for nid, ps in parents.items():
        if nid == tree.root_id:
            if ps:
                out.append(Violation(nid, "cycle", f"root has parent(s) {ps}"))
        elif not ps:
            out.append(Violation(nid, "orphan", "node has no parent"))
        elif len(ps) > 1:
            out.append(Violation(nid, "multiple-parents", f"node has parents {ps}"))

    # cycle detection from the root
    state: dict[str, int] = {}
    stack = [(tree.root_id, iter(nodes[tree.root_id].children))]
    state[tree.root_id] = 1
    while stack:
        nid, it = stack[-1]
        child = next(it, None)
        if child is None:
            state[nid] = 2
            stack.pop()
            continue
        if child not in nodes:
            continue
        if state.get(child) == 1:
            out.append(Violation(child, "cycle", f"cycle through {nid} -> {child}"))
        elif child not in state:
            state[child] = 1
            stack.append((child, iter(nodes[child].children)))

    for node in nodes.values():
        cats = tuple(node.categories)
        if not cats:
            out.append(Violation(node.id, "categories", "node has no categories"))
            continue
        if node.kind not in (ROOT, SUPERGROUP, LEAF):
            out.append(Violation(node.id, "kind", f"unknown kind {node.kind!r}"))
        is_leafish = len(cats) == 1
        if is_leafish != (not node.children):
            out.append(Violation(node.id, "kind",
                                 f"{len(cats)} categories but {len(node.children)} children"))
        if node.id != tree.root_id:
            expected = LEAF if not node.children else SUPERGROUP
            if node.kind != expected:
                out.append(Violation(node.id, "kind", f"kind {node.kind!r} should be {expected!r}"))
        if node.children:
            if len(node.children) != len(node.grouping):
                out.append(Violation(node.id, "grouping",
                                     f"{len(node.children)} children for {len(node.grouping)} groups"))
            flat = [c for g in node.grouping for c in g]
            if sorted(flat) != sorted(cats) or len(flat) != len(set(flat)):
                out.append(Violation(node.id, "grouping", "groups do not partition the node's categories"))
            for child_id, group in zip(node.children, node.grouping):
                child = nodes.get(child_id)
                if child is None:
                    continue
                if tuple(sorted(child.categories)) != tuple(sorted(group)):
                    out.append(Violation(child_id, "grouping",
                                         f"categories {child.categories} differ from parent group {group}"))
                if child.depth != node.depth + 1:
                    out.append(Violation(child_id, "depth",
                                         f"depth {child.depth} under parent depth {node.depth}"))
        elif node.grouping:
            out.append(Violation(node.id, "grouping", "leaf carries a grouping"))

    leaf_cats = Counter(n.categories[0] for n in nodes.values() if len(n.categories) == 1 and not n.children)
    for cat in tree.universe():
        if leaf_cats[cat] == 0:
            out.append(Violation(tree.root_id, "missing-leaf", f"missing leaf for category {cat}"))
        elif leaf_cats[cat] > 1:
            out.append(Violation(tree.root_id, "duplicate-leaf", f"{leaf_cats[cat]} leaves for category {cat}"))
    extra = set(leaf_cats) - set(tree.universe())
    for cat in sorted(extra, key=str):
        out.append(Violation(tree.root_id, "missing-leaf", f"leaf for unknown category {cat}"))
    return out


def _require_valid(tree: Trunk):
    problems = validate(tree)
    if problems:
        raise TreeError("invalid tree: " + "; ".join(str(p) for p in problems))


def canonicalize(tree: Trunk) -> Trunk:
    _require_valid(tree)
    new_nodes: dict[str, TreeNode] = {}

    def visit(old_id, new_id, depth):
        node = tree.nodes[old_id]
        pairs = sorted(zip(node.grouping, node.children), key=lambda p: min(p[0]))
        children = tuple(f"{new_id}.{i}" for i in range(len(pairs)))
        new_nodes[new_id] = replace(
            node, id=new_id, depth=depth, categories=tuple(sorted(node.categories)),
            grouping=tuple(tuple(sorted(g)) for g, _ in pairs), children=children)
        for (_, child), cid in zip(pairs, children):
            visit(child, cid, depth + 1)

    visit(tree.root_id, "0", 0)
    return replace(tree, nodes=new_nodes, root_id="0")


def _structure(tree: Trunk):
    return sorted((n.depth, tuple(sorted(n.categories))) for n in tree.nodes.values())


def fingerprint(tree: Trunk) -> str:
    """sha256 over the (depth, category-set) multiset; ignores ids and weights."""
    canon = canonicalize(tree)
    blob = json.dumps(_structure(canon), separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _internal_sets(tree: Trunk) -> Counter:
    return Counter(tuple(sorted(n.categories)) for n in tree.nodes.values() if n.children)


def compare(a: Trunk, b: Trunk) -> tuple[bool, float]:
    """(identical, Jaccard similarity of the internal-node category-set multisets)."""
    if set(a.universe()) != set(b.universe()):
        raise TreeError("trees cover different category universes")
    ca, cb = canonicalize(a), canonicalize(b)
    identical = _structure(ca) == _structure(cb)
    sa, sb = _internal_sets(ca), _internal_sets(cb)
    union = sum((sa | sb).values())
    similarity = 1.0 if union == 0 else sum((sa & sb).values()) / union
    return identical, similarity


# ---------------------------------------------------------------------------
# DOT


def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def to_dot(tree: Trunk) -> str:
    """Root red, supergroups gray, leaves green; a lone root-leaf stays red."""
    _require_valid(tree)
    lines = ["digraph trunk {", '  node [style=filled, fontname="Helvetica"];']
    order = []
    stack = [tree.root_id]
    while stack:
        nid = stack.pop()
        order.append(nid)
        stack.extend(reversed(tree.nodes[nid].children))
    for nid in order:
        node = tree.nodes[nid]
        if nid == tree.root_id:
            colour = COLOURS[ROOT]
        else:
            colour = COLOURS[LEAF] if not node.children else COLOURS[SUPERGROUP]
        if not node.children:
            label = tree.category_name(node.categories[0])
        else:
            label = "{" + ", ".join(tree.category_name(c) for c in node.categories) + "}"
        lines.append(f'  "{_dot_escape(nid)}" [label="{_dot_escape(label)}", fillcolor={colour}];')
    for nid in order:
        for child in tree.nodes[nid].children:
            lines.append(f'  "{_dot_escape(nid)}" -> "{_dot_escape(child)}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# JSON


def tree_to_dict(tree: Trunk) -> dict:
    return {
        "schema": SCHEMA,
        "dataset": tree.dataset,
        "gv": tree.gv,
        "root_id": tree.root_id,
        "created_with": tree.created_with,
        "category_names": list(tree.category_names),
        "nodes": [
            {
                "id": n.id,
                "depth": n.depth,
                "kind": n.kind,
                "categories": list(n.categories),
                "grouping": [list(g) for g in n.grouping],
                "children": list(n.children),
                "weights_ref": n.weights_ref,
            }
            for n in sorted(tree.nodes.values(), key=lambda n: _id_key(n.id))
        ],
    }


def _id_key(nid: str):
    return [int(p) if p.isdigit() else p for p in nid.split(".")]


def tree_from_dict(raw: dict) -> Trunk:
    try:
        if raw.get("schema") != SCHEMA:
            raise TreeError(f"unsupported tree schema {raw.get('schema')!r} (expected {SCHEMA})")
        nodes = {}
        for entry in raw["nodes"]:
            node = TreeNode(
                id=str(entry["id"]),
                depth=int(entry["depth"]),
                categories=tuple(entry["categories"]),
                kind=entry["kind"],
                grouping=tuple(tuple(g) for g in entry.get("grouping", [])),
                children=tuple(str(c) for c in entry.get("children", [])),
                weights_ref=entry.get("weights_ref"),
            )
            if node.id in nodes:
                raise TreeError(f"duplicate node id {node.id!r}")
            nodes[node.id] = node
        return Trunk(
            dataset=raw["dataset"],
            gv=float(raw["gv"]),
            nodes=nodes,
            root_id=str(raw["root_id"]),
            created_with=raw.get("created_with", ""),
            category_names=tuple(raw.get("category_names", [])),
        )
    except (KeyError, TypeError, AttributeError) as exc:
        raise TreeError(f"malformed tree file: {exc!r}") from exc


def save_tree(tree: Trunk, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(tree_to_dict(tree), indent=2) + "\n", encoding="utf-8")


def load_tree(path: str | os.PathLike) -> Trunk:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TreeError(f"malformed tree file {path}: line {exc.lineno}: {exc.msg}") from exc
    tree = tree_from_dict(raw)
    problems = validate(tree)
    if problems:
        raise TreeError(f"invalid tree in {path}: " + "; ".join(str(p) for p in problems))
    return tree


def reference_tree_path(dataset: str) -> Path:
    return Path(__file__).parent / "reference" / f"{dataset}_tree.json"


def tree_from_groupings(dataset: str, gv: float, groupings: dict, categories,
                        category_names=(), created_with: str = "") -> Trunk:
    """Assemble a tree from ``{node_category_tuple: grouping}``; used for fixtures
    and fixed-structure training."""
    nodes: dict[str, TreeNode] = {}

    def build(cats, nid, depth):
        cats = tuple(sorted(cats))
        kind = ROOT if depth == 0 else (LEAF if len(cats) == 1 else SUPERGROUP)
        if len(cats) == 1:
            nodes[nid] = TreeNode(nid, depth, cats, kind)
            return
        grouping = groupings.get(cats)
        if not grouping or len(grouping) == 1:
            grouping = tuple((c,) for c in cats)
        grouping = tuple(sorted((tuple(sorted(g)) for g in grouping), key=min))
        children = tuple(f"{nid}.{i}" for i in range(len(grouping)))
        nodes[nid] = TreeNode(nid, depth, cats, kind, grouping, children)
        for g, cid in zip(grouping, children):
            build(g, cid, depth + 1)

    build(categories, "0", 0)
    return Trunk(dataset, gv, nodes, "0", created_with, tuple(category_names))
