"""Array-backed ternary search tree over base characters.

Only the longest-level keys are inserted.  A branch that leads to a single
key ends in a *tail*: the remaining bases stored on the last node instead of
one node per base.  Payloads are keyed by ``(node, depth)`` so a shorter level
whose prefix ends inside a tail still has a home.  One walk of a query yields
its taxIDs at every level; this is the pointer-chasing reference for the
streaming layout.
"""

from __future__ import annotations

import struct
from array import array
from collections import defaultdict

import numpy as np

from . import encoding as enc
from .refdb import FORMAT_VERSION, InconsistentLevels, RefDbError, SketchTables, _taxid_list

TREE_MAGIC = b"MGST"
_NONE = -1
_HEAD = struct.Struct("<4sHHH")

# node byte: bits 0-1 base, bit 2 lo child, bit 3 eq child, bit 4 hi child,
# bit 5 tail follows, bit 6 shorter-level own lists follow, bit 7 key ends here
_LO, _EQ, _HI, _TAIL, _OWN, _LEAF = 4, 8, 16, 32, 64, 128


class TernaryTree:
    def __init__(self, levels: tuple[int, ...]):
        self.levels = tuple(levels)
        self.k_max = self.levels[0]
        self._level_set = set(self.levels)
        self.char = bytearray()
        self.lo = array("q")
        self.eq = array("q")
        self.hi = array("q")
        self.tail: dict[int, bytes] = {}
        self.payload: dict[tuple[int, int], tuple[int, ...]] = {}
        self.root = _NONE
        self._own: dict[tuple[int, int], tuple[int, ...]] | None = None

    def __len__(self) -> int:
        return len(self.char)

    def _new(self, c: int) -> int:
        self.char.append(c)
        self.lo.append(_NONE)
        self.eq.append(_NONE)
        self.hi.append(_NONE)
        return len(self.char) - 1

    def locate(self, codes: bytes) -> tuple[int, int] | None:
        """``(node, depth)`` where the path spelling ``codes`` ends, or None."""
        node, d, n = self.root, 0, len(codes)
        while node != _NONE:
            c, nc = codes[d], self.char[node]
            if c < nc:
                node = self.lo[node]
            elif c > nc:
                node = self.hi[node]
            else:
                d += 1
                if d == n:
                    return node, d
                t = self.tail.get(node)
                if t:
                    m = min(len(t), n - d)
                    if codes[d:d + m] != t[:m]:
                        return None
                    d += m
                    if d == n:
                        return node, d
                node = self.eq[node]
        return None

    def lookup(self, bits: int) -> tuple[dict[int, tuple[int, ...]], int]:
        """TaxIDs at every level along the walk of one longest-level k-mer.

        Returns ``(hits by level, visited node count)``.
        """
        codes = _codes(bits, self.k_max)
        hits: dict[int, tuple[int, ...]] = {}
        payload, levels = self.payload, self._level_set
        node, d, visited = self.root, 0, 0
        while node != _NONE:
            visited += 1
            c, nc = codes[d], self.char[node]
            if c < nc:
                node = self.lo[node]
            elif c > nc:
                node = self.hi[node]
            else:
                d += 1
                if d in levels and (node, d) in payload:
                    hits[d] = payload[(node, d)]
                t = self.tail.get(node)
                if t:
                    for b in t:
                        if codes[d] != b:
                            return hits, visited
                        d += 1
                        if d in levels and (node, d) in payload:
                            hits[d] = payload[(node, d)]
                if d == self.k_max:
                    break
                node = self.eq[node]
        return hits, visited

    # -- prefix bookkeeping ------------------------------------------------

    def payload_prefixes(self) -> dict[tuple[int, int], int]:
        """High-aligned prefix value of every payload position."""
        wanted: dict[int, list[int]] = defaultdict(list)
        for node, d in self.payload:
            wanted[node].append(d)
        out: dict[tuple[int, int], int] = {}
        if self.root == _NONE:
            return out
        stack = [(self.root, 0, 0)]
        while stack:
            node, depth, acc = stack.pop()
            if self.lo[node] != _NONE:
                stack.append((self.lo[node], depth, acc))
            if self.hi[node] != _NONE:
                stack.append((self.hi[node], depth, acc))
            v = (acc << 2) | self.char[node]
            t = self.tail.get(node, b"")
            end = depth + 1 + len(t)
            if node in wanted:
                vt = v
                for b in t:
                    vt = (vt << 2) | b
                for d in wanted[node]:
                    out[(node, d)] = (vt >> 2 * (end - d)) << (enc.WORD_BITS - 2 * d)
            if self.eq[node] != _NONE:
                vt = v
                for b in t:
                    vt = (vt << 2) | b
                stack.append((self.eq[node], end, vt))
        return out

    def as_tables(self) -> dict[int, dict[int, tuple[int, ...]]]:
        """``{level: {prefix: taxIDs}}``, independent of node numbering."""
        out: dict[int, dict[int, tuple[int, ...]]] = {k: {} for k in self.levels}
        for (node, d), p in self.payload_prefixes().items():
            out[d][p] = self.payload[(node, d)]
        return out

    def own_payloads(self) -> dict[tuple[int, int], tuple[int, ...]]:
        """Shorter-level taxIDs not already carried by the next-longer level below."""
        if self._own is not None:
            return self._own
        prefix = self.payload_prefixes()
        by_level: dict[int, dict[int, tuple[int, int]]] = defaultdict(dict)
        for key, p in prefix.items():
            by_level[key[1]][p] = key
        own: dict[tuple[int, int], tuple[int, ...]] = {}
        for i in range(1, len(self.levels)):
            longer, k = self.levels[i - 1], self.levels[i]
            mask = enc.prefix_mask(k)
            below: dict[int, set[int]] = defaultdict(set)
            for p, key in by_level[longer].items():
                below[p & mask] |= set(self.payload[key])
            for p, key in by_level[k].items():
                own[key] = tuple(sorted(set(self.payload[key]) - below[p]))
        return own

    # -- serialisation -----------------------------------------------------

    def _preorder(self):
        """Yield ``(node, depth)``; children in lo, eq, hi order."""
        if self.root == _NONE:
            return
        stack = [(self.root, 0)]
        while stack:
            node, depth = stack.pop()
            yield node, depth
            if self.hi[node] != _NONE:
                stack.append((self.hi[node], depth))
            if self.eq[node] != _NONE:
                stack.append((self.eq[node], depth + 1 + len(self.tail.get(node, b""))))
            if self.lo[node] != _NONE:
                stack.append((self.lo[node], depth))

    def to_bytes(self) -> bytes:
        """Preorder stream: one flag byte per node, then its tail and payloads.

        Tails are 2-bit packed behind a length byte.  Shorter levels store
        only their own taxIDs (behind a level bitmap, omitted when all are
        empty); the full lists are rebuilt from the longer levels on load.
        Every prefix of a stored key is a shorter-level entry (the tables are
        prefix-closed), so no presence bit is needed for them.
        """
        own = self.own_payloads()
        out = bytearray()
        rank = {k: i for i, k in enumerate(self.levels)}
        for node, depth in self._preorder():
            t = self.tail.get(node, b"")
            lo_d, hi_d = depth + 1, depth + 1 + len(t)
            mine = [(rank[d], own[(node, d)]) for d in self.levels[1:] if lo_d <= d <= hi_d and own.get((node, d))]
            leaf = (node, self.k_max) in self.payload
            b = self.char[node]
            b |= _LO if self.lo[node] != _NONE else 0
            b |= _EQ if self.eq[node] != _NONE else 0
            b |= _HI if self.hi[node] != _NONE else 0
            b |= (_TAIL if t else 0) | (_OWN if mine else 0) | (_LEAF if leaf else 0)
            out.append(b)
            if t:
                out.append(len(t))
                out += _pack(t)
            if mine:
                out.append(sum(1 << r for r, _ in mine))
                for _, ids in mine:
                    out += _taxid_list(ids)
            if leaf:
                out += _taxid_list(self.payload[(node, self.k_max)])
        head = _HEAD.pack(TREE_MAGIC, FORMAT_VERSION, self.k_max, len(self.levels))
        return head + struct.pack(f"<{len(self.levels)}H", *self.levels) + struct.pack("<Q", len(self)) + bytes(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "TernaryTree":
        magic, version, k_max, n_levels = _HEAD.unpack_from(raw)
        if magic != TREE_MAGIC or version != FORMAT_VERSION:
            raise RefDbError("not a ternary tree file")
        pos = _HEAD.size
        levels = struct.unpack_from(f"<{n_levels}H", raw, pos)
        pos += 2 * n_levels
        (n_nodes,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        tree = cls(levels)
        own: dict[tuple[int, int], tuple[int, ...]] = {}
        pending: list[tuple[int, str, int]] = []  # (parent, link, child depth)
        for _ in range(n_nodes):
            b = raw[pos]
            pos += 1
            node = tree._new(b & 3)
            if pending:
                parent, link, depth = pending.pop()
                getattr(tree, link)[parent] = node
            else:
                tree.root, depth = node, 0
            t = b""
            if b & _TAIL:
                n = raw[pos]
                t = _unpack(raw[pos + 1:pos + 1 + (n + 3) // 4], n)
                tree.tail[node] = t
                pos += 1 + (n + 3) // 4
            if b & _OWN:
                bitmap = raw[pos]
                pos += 1
                for r in range(n_levels):
                    if bitmap >> r & 1:
                        ids, pos = _read_ids(raw, pos)
                        own[(node, levels[r])] = ids
            if b & _LEAF:
                ids, pos = _read_ids(raw, pos)
                tree.payload[(node, k_max)] = ids
            if b & _HI:
                pending.append((node, "hi", depth))
            if b & _EQ:
                pending.append((node, "eq", depth + 1 + len(t)))
            if b & _LO:
                pending.append((node, "lo", depth))
        tree._restore_shorter(own)
        tree._own = {key: own.get(key, ()) for key in tree.payload if key[1] != k_max}
        return tree

    def _restore_shorter(self, own: dict[tuple[int, int], tuple[int, ...]]) -> None:
        """Recreate every shorter-level entry: own taxIDs plus the longer level below."""
        leaves = self.payload_prefixes()
        current = {p: set(self.payload[key]) for key, p in leaves.items()}
        positions = self._prefix_positions()
        for k in self.levels[1:]:
            mask = enc.prefix_mask(k)
            grouped: dict[int, set[int]] = defaultdict(set)
            for p, ids in current.items():
                grouped[p & mask] |= ids
            for p, ids in grouped.items():
                key = positions[(k, p)]
                ids |= set(own.get(key, ()))
                self.payload[key] = tuple(sorted(ids))
            current = grouped

    def _prefix_positions(self) -> dict[tuple[int, int], tuple[int, int]]:
        """``(level, prefix value) -> (node, depth)`` for every stored key's prefixes."""
        out: dict[tuple[int, int], tuple[int, int]] = {}
        if self.root == _NONE:
            return out
        shorter = self.levels[1:]
        stack = [(self.root, 0, 0)]
        while stack:
            node, depth, acc = stack.pop()
            if self.lo[node] != _NONE:
                stack.append((self.lo[node], depth, acc))
            if self.hi[node] != _NONE:
                stack.append((self.hi[node], depth, acc))
            vt = (acc << 2) | self.char[node]
            d = depth + 1
            t = self.tail.get(node, b"")
            for i in range(len(t) + 1):
                if i:
                    vt = (vt << 2) | t[i - 1]
                    d += 1
                if d in shorter:
                    out[(d, vt << (enc.WORD_BITS - 2 * d))] = (node, d)
            if self.eq[node] != _NONE:
                stack.append((self.eq[node], d, vt))
        return out


def _read_ids(raw: bytes, pos: int) -> tuple[tuple[int, ...], int]:
    (n,) = struct.unpack_from("<H", raw, pos)
    return struct.unpack_from(f"<{n}I", raw, pos + 2), pos + 2 + 4 * n


def _pack(codes: bytes) -> bytes:
    """Four bases per byte, first base in the low bits."""
    p = codes + bytes(-len(codes) % 4)
    return bytes(a | b << 2 | c << 4 | d << 6 for a, b, c, d in zip(p[0::4], p[1::4], p[2::4], p[3::4]))


def _unpack(packed: bytes, n: int) -> bytes:
    return bytes((packed[i >> 2] >> (2 * (i & 3))) & 3 for i in range(n))


def _codes(bits: int, k: int) -> bytes:
    v = bits >> (enc.WORD_BITS - 2 * k)
    out = bytearray(k)
    for i in range(k - 1, -1, -1):
        out[i] = v & 3
        v >>= 2
    return bytes(out)


def _code_matrix(values: list[int], k: int) -> np.ndarray:
    """``(n, k)`` uint8 base codes of high-aligned k-mers."""
    hi, lo = enc.ints_to_words(values)
    out = np.empty((len(values), k), dtype=np.uint8)
    for i in range(k):
        shift = enc.WORD_BITS - 2 - 2 * i
        word, s = (hi, shift - 64) if shift >= 64 else (lo, shift)
        out[:, i] = (word >> np.uint64(s)) & np.uint64(3)
    return out


def build_tree(flat: SketchTables) -> TernaryTree:
    """Static balanced build from the sorted longest-level keys.

    At each depth the distinct next bases of a key range become a balanced
    lo/hi chain (median first); a range holding a single key ends in a tail.
    Every table entry then hangs its full taxID list on its ``(node, depth)``.
    """
    tree = TernaryTree(flat.levels)
    keys = [x for x, _ in flat.tables[flat.k_max]]
    if not keys:
        return tree
    k = flat.k_max
    codes = _code_matrix(keys, k)
    masks = {lvl: enc.prefix_mask(lvl) for lvl in flat.levels}
    positions: dict[tuple[int, int], tuple[int, int]] = {}

    def place(groups: list[tuple[int, int, int]], depth: int) -> int:
        m = len(groups) // 2
        c, a, b = groups[m]
        node = tree._new(c)
        if groups[:m]:
            tree.lo[node] = place(groups[:m], depth)
        if groups[m + 1:]:
            tree.hi[node] = place(groups[m + 1:], depth)
        reach = depth + 1
        if reach in masks:
            positions[(reach, keys[a] & masks[reach])] = (node, reach)
        if b - a == 1:
            if reach < k:
                tree.tail[node] = codes[a, reach:].tobytes()
                for lvl in flat.levels:
                    if lvl > reach:
                        positions[(lvl, keys[a] & masks[lvl])] = (node, lvl)
        else:
            tree.eq[node] = build(a, b, reach)
        return node

    def build(a: int, b: int, depth: int) -> int:
        col = codes[a:b, depth]
        cuts = np.flatnonzero(col[1:] != col[:-1]) + 1
        starts = [0, *cuts.tolist()]
        ends = [*cuts.tolist(), b - a]
        groups = [(int(col[s]), a + s, a + e) for s, e in zip(starts, ends)]
        return place(groups, depth)

    tree.root = build(0, len(keys), 0)
    for lvl in flat.levels:
        for p, ids in flat.tables[lvl]:
            pos = positions.get((lvl, p))
            if pos is None:
                raise InconsistentLevels(f"k={lvl} key {enc.unpack_bits(p, lvl)} is not a prefix of any k={k} key")
            tree.payload[pos] = tuple(ids)
    # own lists straight from the tables: full set minus the next-longer level below
    own: dict[tuple[int, int], tuple[int, ...]] = {}
    for i in range(1, len(flat.levels)):
        longer, lvl = flat.levels[i - 1], flat.levels[i]
        below: dict[int, set[int]] = defaultdict(set)
        for x, ids in flat.tables[longer]:
            below[x & masks[lvl]].update(ids)
        for p, ids in flat.tables[lvl]:
            own[positions[(lvl, p)]] = tuple(sorted(set(ids) - below[p]))
    tree._own = own
    return tree
