"""Triplet class structure: composition of each triplet and the derived
component / pair class spaces."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

TASKS = ("I", "V", "T", "IV", "IT", "IVT")
# tasks whose class set is restricted by the null mask
MASKED_TASKS = ("IV", "IT", "IVT")

NULL_VERB_NAMES = frozenset({"null-verb", "null_verb", "nullverb"})
NULL_TARGET_NAMES = frozenset({"null-target", "null_target", "nulltarget"})

HEADER = ("triplet_id", "instrument_id", "verb_id", "target_id", "instrument", "verb", "target")


class TaxonomyError(ValueError):
    pass


def _is_null_name(name, vocabulary):
    return name is not None and name.strip().lower().replace(" ", "_") in vocabulary


@dataclass(frozen=True, eq=False)
class TripletTaxonomy:
    """Map from triplet id to its (instrument, verb, target) component ids.

    ``composition`` is an integer array of shape ``(num_triplets, 3)``; row
    ``t`` holds the component ids of triplet ``t``. Pair classes are
    indexed as ``instrument * num_verbs + verb`` (IV) and
    ``instrument * num_targets + target`` (IT).
    """

    composition: np.ndarray
    num_instruments: int
    num_verbs: int
    num_targets: int
    null_triplet_ids: frozenset = frozenset()
    names: dict = field(default_factory=dict)

    def __post_init__(self):
        comp = np.asarray(self.composition, dtype=np.int64)
        if comp.ndim != 2 or comp.shape[1] != 3 or comp.shape[0] == 0:
            raise TaxonomyError("composition must be a non-empty (C, 3) integer array")
        counts = (self.num_instruments, self.num_verbs, self.num_targets)
        for axis, (label, n) in enumerate(zip(("instrument", "verb", "target"), counts)):
            bad = np.flatnonzero((comp[:, axis] < 0) | (comp[:, axis] >= n))
            if bad.size:
                raise TaxonomyError(
                    f"triplet {bad[0]}: {label} id {comp[bad[0], axis]} out of range [0, {n})"
                )
        seen = {}
        for t, row in enumerate(map(tuple, comp.tolist())):
            if row in seen:
                raise TaxonomyError(f"triplets {seen[row]} and {t} share composition {row}")
            seen[row] = t
        null = frozenset(int(t) for t in self.null_triplet_ids)
        if any(t < 0 or t >= comp.shape[0] for t in null):
            raise TaxonomyError("null triplet id out of range")
        comp.setflags(write=False)
        object.__setattr__(self, "composition", comp)
        object.__setattr__(self, "null_triplet_ids", null)

    @property
    def num_triplets(self) -> int:
        return self.composition.shape[0]

    def components_of(self, t: int) -> tuple[int, int, int]:
        if not 0 <= t < self.num_triplets:
            raise IndexError(f"triplet id {t} out of range [0, {self.num_triplets})")
        i, v, g = self.composition[t]
        return int(i), int(v), int(g)

    def valid_mask(self) -> np.ndarray:
        mask = np.ones(self.num_triplets, dtype=bool)
        mask[list(self.null_triplet_ids)] = False
        return mask

    @cached_property
    def _task_keys(self) -> dict:
        i, v, g = self.composition.T
        return {
            "I": i,
            "V": v,
            "T": g,
            "IV": i * self.num_verbs + v,
            "IT": i * self.num_targets + g,
            "IVT": np.arange(self.num_triplets),
        }

    @cached_property
    def _groups(self) -> dict:
        groups = {}
        for task, keys in self._task_keys.items():
            ids = np.unique(keys)
            groups[task] = (ids, [np.flatnonzero(keys == k) for k in ids])
        return groups

    def class_ids(self, task: str) -> np.ndarray:
        """Ids of the classes of ``task`` that occur in the composition, ascending."""
        return self._groups[_check_task(task)][0].copy()

    def members(self, task: str) -> list[np.ndarray]:
        """Triplet ids containing each class of ``class_ids(task)``."""
        return list(self._groups[_check_task(task)][1])

    def task_mask(self, task: str, apply_mask: bool = True) -> np.ndarray:
        """Boolean mask over ``class_ids(task)``; False for classes built only from null triplets.

        Only IV, IT and IVT are ever masked.
        """
        ids = self.class_ids(task)
        if not apply_mask or task not in MASKED_TASKS:
            return np.ones(ids.size, dtype=bool)
        valid = self.valid_mask()
        return np.array([valid[m].any() for m in self.members(task)], dtype=bool)

    def class_labels(self, task: str) -> list[str]:
        """Human-readable labels for the classes of ``task`` (ids when names are absent)."""
        ids = self.class_ids(task)
        inst = self.names.get("instrument")
        verb = self.names.get("verb")
        targ = self.names.get("target")
        if task == "IVT":
            trip = self.names.get("triplet")
            return [trip[t] if trip else str(t) for t in ids]
        if task in ("I", "V", "T"):
            table = {"I": inst, "V": verb, "T": targ}[task]
            return [table[k] if table else str(k) for k in ids]
        second, n = (verb, self.num_verbs) if task == "IV" else (targ, self.num_targets)
        if not (inst and second):
            return [str(k) for k in ids]
        return [f"{inst[k // n]},{second[k % n]}" for k in ids]


def _check_task(task):
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    return task


def load_taxonomy(
    source,
    num_instruments=None,
    num_verbs=None,
    num_targets=None,
) -> TripletTaxonomy:
    """Read a taxonomy CSV (path, file object or CSV text).

    Component counts default to ``max id + 1``. A triplet is null when an
    optional ``null`` column is truthy, otherwise when both its verb and
    target names are the null classes.
    """
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    elif isinstance(source, str):
        rows = list(csv.DictReader(io.StringIO(source)))
    else:
        rows = list(csv.DictReader(source))
    if not rows:
        raise TaxonomyError("empty taxonomy document")
    missing = [c for c in HEADER[:4] if c not in rows[0]]
    if missing:
        raise TaxonomyError(f"taxonomy header missing columns {missing}")

    by_id = {}
    for lineno, row in enumerate(rows, start=2):
        try:
            t, i, v, g = (int(row[c]) for c in HEADER[:4])
        except (TypeError, ValueError):
            raise TaxonomyError(f"line {lineno}: non-integer id") from None
        if t in by_id:
            raise TaxonomyError(f"duplicate triplet id {t} (line {lineno})")
        by_id[t] = (i, v, g, row)
    if sorted(by_id) != list(range(len(by_id))):
        raise TaxonomyError("triplet ids must be exactly 0..C-1")

    comp = np.array([by_id[t][:3] for t in range(len(by_id))], dtype=np.int64)
    if (comp < 0).any():
        raise TaxonomyError("negative component id")
    inferred = comp.max(axis=0) + 1
    counts = [
        int(inferred[k]) if n is None else int(n)
        for k, n in enumerate((num_instruments, num_verbs, num_targets))
    ]

    names = {}
    for key, col, n in (("instrument", "instrument", counts[0]), ("verb", "verb", counts[1]), ("target", "target", counts[2])):
        if col not in rows[0]:
            continue
        table = [None] * n
        for t in range(len(by_id)):
            axis = ("instrument", "verb", "target").index(key)
            cid = by_id[t][axis]
            name = (by_id[t][3].get(col) or "").strip()
            if 0 <= cid < n and name:
                table[cid] = name
        if all(table):
            names[key] = table

    null = set()
    for t in range(len(by_id)):
        row = by_id[t][3]
        flag = (row.get("null") or "").strip().lower()
        if flag:
            if flag in ("1", "true", "yes"):
                null.add(t)
            continue
        if _is_null_name(row.get("verb"), NULL_VERB_NAMES) and _is_null_name(row.get("target"), NULL_TARGET_NAMES):
            null.add(t)

    if "instrument" in names and "verb" in names and "target" in names:
        names["triplet"] = [
            f"{names['instrument'][i]},{names['verb'][v]},{names['target'][g]}" for i, v, g in comp.tolist()
        ]

    return TripletTaxonomy(comp, *counts, null_triplet_ids=frozenset(null), names=names)


def write_taxonomy(tax: TripletTaxonomy, path) -> None:
    inst = tax.names.get("instrument")
    verb = tax.names.get("verb")
    targ = tax.names.get("target")
    # names alone cannot carry the null set when they are absent
    flag = not (verb and targ) and bool(tax.null_triplet_ids)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER + (("null",) if flag else ()))
        for t, (i, v, g) in enumerate(tax.composition.tolist()):
            row = [
                t, i, v, g,
                inst[i] if inst else "",
                verb[v] if verb else "",
                targ[g] if targ else "",
            ]
            if flag:
                row.append(int(t in tax.null_triplet_ids))
            writer.writerow(row)
