"""Hierarchical label taxonomy.

A taxonomy file holds one ``:``-separated full path per line, e.g.::

    # comment
    Transport
    Transport:Land
    Transport:Land:Car

Parents are created on first mention, so ``Transport:Land:Car`` alone
yields three nodes.  Node ids follow first-mention order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Iterator

from .errors import LabelLookupError, ParseError, ValidationError

SEPARATOR = ":"
MAX_LEVELS = 4  # levels 0..3


@dataclass(frozen=True)
class TaxonomyNode:
    id: int
    name: str
    parent: int | None
    level: int


class Taxonomy:
    """An immutable rooted forest of label nodes."""

    def __init__(self, nodes: Iterable[TaxonomyNode]):
        nodes = list(nodes)
        by_id = {}
        for n in nodes:
            if n.id in by_id:
                raise ValidationError(f"duplicate node id {n.id}")
            by_id[n.id] = n
        for n in nodes:
            if n.parent is not None and n.parent not in by_id:
                raise ValidationError(f"node {n.id} ({n.name!r}) has unknown parent {n.parent}")
        # every chain must reach a root without revisiting a node
        for n in nodes:
            seen = {n.id}
            cur = n
            while cur.parent is not None:
                cur = by_id[cur.parent]
                if cur.id in seen:
                    raise ValidationError(f"cycle through node {n.id} ({n.name!r})")
                seen.add(cur.id)
        for n in nodes:
            expected = 0 if n.parent is None else by_id[n.parent].level + 1
            if n.level != expected:
                raise ValidationError(
                    f"node {n.name!r} has level {n.level}, expected {expected}"
                )
            if n.level >= MAX_LEVELS:
                raise ValidationError(f"node {n.name!r} exceeds {MAX_LEVELS} levels")
        self._nodes = dict(sorted(by_id.items()))
        self._children: dict[int | None, list[int]] = {}
        for n in self._nodes.values():
            self._children.setdefault(n.parent, []).append(n.id)
        for parent, kids in self._children.items():
            names = [self._nodes[k].name for k in kids]
            if len(set(names)) != len(names):
                raise ValidationError(f"sibling names repeat under parent {parent}")
        self._paths = {i: self._build_path(i) for i in self._nodes}
        self._by_path = {p: i for i, p in self._paths.items()}
        if len(self._by_path) != len(self._paths):
            raise ValidationError("full paths are not unique")
        self.max_level = max((n.level for n in self._nodes.values()), default=0)

    def _build_path(self, node_id: int) -> str:
        parts = []
        cur: int | None = node_id
        while cur is not None:
            node = self._nodes[cur]
            parts.append(node.name)
            cur = node.parent
        return SEPARATOR.join(reversed(parts))

    def __len__(self) -> int:
        return len(self._nodes)

    def __iter__(self) -> Iterator[TaxonomyNode]:
        return iter(self._nodes.values())

    def __contains__(self, node_id) -> bool:
        return node_id in self._nodes

    def node(self, node_id: int) -> TaxonomyNode:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise LabelLookupError(f"unknown label id {node_id}") from None

    @property
    def ids(self) -> list[int]:
        return list(self._nodes)

    def path(self, node_id: int) -> str:
        self.node(node_id)
        return self._paths[node_id]

    def id_of(self, path: str) -> int:
        try:
            return self._by_path[path]
        except KeyError:
            raise LabelLookupError(f"unknown label path {path!r}") from None

    def level(self, node_id: int) -> int:
        return self.node(node_id).level

    def children(self, node_id: int | None) -> list[int]:
        return list(self._children.get(node_id, []))

    @property
    def roots(self) -> list[int]:
        return self.children(None)

    def ancestors(self, node_id: int) -> list[int]:
        """Root-first chain ending with ``node_id`` itself."""
        chain = []
        cur: int | None = node_id
        while cur is not None:
            chain.append(cur)
            cur = self.node(cur).parent
        return chain[::-1]

    def descendants(self, node_id: int) -> set[int]:
        out = {node_id}
        todo = [node_id]
        while todo:
            for c in self._children.get(todo.pop(), []):
                out.add(c)
                todo.append(c)
        return out

    def leaves(self) -> list[int]:
        return [i for i in self._nodes if not self._children.get(i)]

    def ids_at_level(self, level: int) -> list[int]:
        return [i for i, n in self._nodes.items() if n.level == level]

    def to_text(self) -> str:
        return "".join(self._paths[i] + "\n" for i in self._nodes)

    def __eq__(self, other) -> bool:
        return isinstance(other, Taxonomy) and self._nodes == other._nodes

    # construction ---------------------------------------------------------

    @classmethod
    def from_paths(cls, paths: Iterable[str]) -> "Taxonomy":
        return load_taxonomy(list(paths))


def _iter_lines(source) -> Iterable[str]:
    if isinstance(source, (str, os.PathLike)) and (
        isinstance(source, os.PathLike) or ("\n" not in source and os.path.exists(source))
    ):
        with open(source, encoding="utf-8") as fh:
            return fh.read().splitlines()
    if isinstance(source, str):
        return source.splitlines()
    return list(source)


def load_taxonomy(source) -> Taxonomy:
    """Parse a taxonomy from a file path, a text blob, or an iterable of rows."""
    nodes: list[TaxonomyNode] = []
    index: dict[tuple[str, ...], int] = {}
    explicit: set[tuple[str, ...]] = set()
    for lineno, raw in enumerate(_iter_lines(source), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = tuple(p.strip() for p in line.split(SEPARATOR))
        if any(not p for p in parts):
            raise ParseError(f"empty path segment in {raw.strip()!r}", line=lineno)
        if len(parts) > MAX_LEVELS:
            raise ParseError(f"path {line!r} deeper than {MAX_LEVELS} levels", line=lineno)
        if parts in explicit:
            raise ValidationError(f"line {lineno}: duplicate path {line!r}")
        explicit.add(parts)
        for depth in range(1, len(parts) + 1):
            key = parts[:depth]
            if key in index:
                continue
            parent = index[key[:-1]] if depth > 1 else None
            node = TaxonomyNode(id=len(nodes), name=key[-1], parent=parent, level=depth - 1)
            index[key] = node.id
            nodes.append(node)
    return Taxonomy(nodes)


# label-set operations -------------------------------------------------------


def expand_labels(labels: Iterable[int], taxonomy: Taxonomy) -> frozenset[int]:
    """Ancestor closure of a label set."""
    out: set[int] = set()
    for lab in labels:
        out.update(taxonomy.ancestors(lab))
    return frozenset(out)


def level_slice(labels: Iterable[int], level: int, taxonomy: Taxonomy) -> frozenset[int]:
    if not 0 <= level < MAX_LEVELS:
        raise ValueError(f"level {level} outside 0..{MAX_LEVELS - 1}")
    return frozenset(lab for lab in labels if taxonomy.level(lab) == level)


def top_level_of(label: int, taxonomy: Taxonomy) -> int:
    return taxonomy.ancestors(label)[0]
