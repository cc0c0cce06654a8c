"""Video records, class tables and their line-delimited JSON files.

A manifest lives in two files: ``name.jsonl`` holds one video record per
line and ``name.classes.jsonl`` holds the merged class table. Creation
metadata goes to ``name.provenance.json`` when written.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import DataError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_MERGE_THRESHOLD = 0.95
_RECORD_FIELDS = ("id", "source", "split", "label_text", "label_id", "frames_path", "fps_native")


@dataclass(frozen=True)
class VideoRecord:
    id: str
    source: str
    split: str
    label_text: str
    label_id: int
    fps_native: float = 0.0
    frames_path: str | None = None

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "source": self.source,
            "split": self.split,
            "label_text": self.label_text,
            "label_id": self.label_id,
        }
        if self.frames_path is not None:
            d["frames_path"] = self.frames_path
        d["fps_native"] = float(self.fps_native)
        return d


@dataclass(frozen=True)
class ClassEntry:
    label_id: int
    canonical_text: str
    member_texts: tuple
    semantic_vector: np.ndarray = field(compare=False)

    def to_dict(self) -> dict:
        return {
            "label_id": self.label_id,
            "canonical_text": self.canonical_text,
            "member_texts": list(self.member_texts),
            "semantic_vector": [float(v) for v in self.semantic_vector],
        }


@dataclass
class ClassTable:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def ids(self) -> set:
        return {e.label_id for e in self.entries}

    def validate(self) -> None:
        owner = {}
        for e in self.entries:
            if e.canonical_text not in e.member_texts:
                raise DataError(f"class {e.label_id}: canonical text {e.canonical_text!r} is not a member")
            for t in e.member_texts:
                if t in owner and owner[t] != e.label_id:
                    raise DataError(f"member text {t!r} appears in classes {owner[t]} and {e.label_id}")
                owner[t] = e.label_id


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    classes: ClassTable = field(default_factory=ClassTable)
    provenance: dict = field(default_factory=dict)

    def by_id(self) -> dict:
        return {r.id: r for r in self.records}


def classes_path_for(path) -> Path:
    p = Path(path)
    return p.with_name(p.name[: -len(p.suffix)] + ".classes.jsonl" if p.suffix else p.name + ".classes.jsonl")


def provenance_path_for(path) -> Path:
    p = Path(path)
    return p.with_name((p.name[: -len(p.suffix)] if p.suffix else p.name) + ".provenance.json")


def _parse_record(obj, where) -> VideoRecord:
    if not isinstance(obj, dict):
        raise DataError(f"{where}: expected an object")
    extra = set(obj) - set(_RECORD_FIELDS)
    if extra:
        raise DataError(f"{where}: unexpected fields {sorted(extra)}")
    try:
        rec = VideoRecord(
            id=str(obj["id"]),
            source=str(obj["source"]),
            split=str(obj["split"]),
            label_text=str(obj["label_text"]),
            label_id=int(obj["label_id"]),
            fps_native=float(obj["fps_native"]),
            frames_path=None if obj.get("frames_path") is None else str(obj["frames_path"]),
        )
    except KeyError as exc:
        raise DataError(f"{where}: missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise DataError(f"{where}: {exc}") from exc
    if rec.split not in SPLITS:
        raise DataError(f"{where}: split must be one of {SPLITS}, got {rec.split!r}")
    if rec.fps_native < 0:
        raise DataError(f"{where}: fps_native must be >= 0")
    return rec


def read_classes(path) -> ClassTable:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                entries.append(ClassEntry(
                    int(obj["label_id"]),
                    str(obj["canonical_text"]),
                    tuple(str(t) for t in obj["member_texts"]),
                    np.asarray(obj["semantic_vector"], dtype=np.float64),
                ))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad class entry: {exc}") from exc
    table = ClassTable(entries)
    table.validate()
    return table


def write_classes(table: ClassTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in table.entries:
            fh.write(json.dumps(e.to_dict(), ensure_ascii=False) + "\n")


def load_manifest(path, classes_path=None) -> Manifest:
    """Read a manifest and its class-table sidecar.

    Errors name the offending line. Record order is kept as in the file.
    """
    path = Path(path)
    records, first_line = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: cannot parse record: {exc}") from exc
            rec = _parse_record(obj, f"{path}:{lineno}")
            if rec.id in first_line:
                raise DataError(
                    f"{path}: duplicate id {rec.id!r} on lines {first_line[rec.id]} and {lineno}"
                )
            first_line[rec.id] = lineno
            records.append(rec)

    cpath = Path(classes_path) if classes_path else classes_path_for(path)
    classes = read_classes(cpath) if cpath.exists() else ClassTable()
    known = classes.ids()
    for rec in records:
        if rec.label_id not in known:
            raise DataError(
                f"{path}:{first_line[rec.id]}: label_id {rec.label_id} does not resolve in {cpath}"
            )
    prov = {}
    ppath = provenance_path_for(path)
    if ppath.exists():
        prov = json.loads(ppath.read_text(encoding="utf-8"))
    return Manifest(records, classes, prov)


def write_manifest(manifest: Manifest, path, classes_path=None) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest.records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")
    write_classes(manifest.classes, classes_path or classes_path_for(path))
    if manifest.provenance:
        provenance_path_for(path).write_text(
            json.dumps(manifest.provenance, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


def merge_classes(labels, threshold: float = DEFAULT_MERGE_THRESHOLD) -> ClassTable:
    """Single-link merge of action labels by cosine similarity.

    ``labels`` is a sequence of ``(text, vector)``. Labels whose vectors
    have cosine >= ``threshold`` end up in the same class, transitively.
    Each class is named by its lexicographically smallest member and keeps
    that member's vector; ids follow the sorted canonical names.
    """
    if not 0.0 < threshold <= 1.0:
        raise DataError(f"threshold must be in (0, 1], got {threshold}")
    labels = [(str(t), np.asarray(v, dtype=np.float64)) for t, v in labels]
    if not labels:
        raise DataError("merge_classes needs at least one label")
    dims = {v.shape for _, v in labels}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise DataError(f"semantic vectors must share one dimension, got {sorted(dims)}")
    # Canonical input order makes every float below independent of caller order.
    labels.sort(key=lambda tv: (tv[0], tv[1].tolist()))
    vecs = np.stack([v for _, v in labels])
    norms = np.linalg.norm(vecs, axis=1)
    if np.any(norms == 0):
        bad = labels[int(np.flatnonzero(norms == 0)[0])][0]
        raise DataError(f"zero-norm semantic vector for label {bad!r}")
    unit = vecs / norms[:, None]
    cos = unit @ unit.T

    parent = list(range(len(labels)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            if cos[i, j] >= threshold:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    groups: dict = {}
    for i in range(len(labels)):
        groups.setdefault(find(i), []).append(i)
    classes = []
    for members in groups.values():
        texts = sorted({labels[i][0] for i in members})
        canon = texts[0]
        vec = next(labels[i][1] for i in members if labels[i][0] == canon)
        classes.append((canon, tuple(texts), vec))
    classes.sort(key=lambda c: c[0])
    table = ClassTable([ClassEntry(i, c, m, v) for i, (c, m, v) in enumerate(classes)])
    table.validate()
    return table


def class_populations(manifest: Manifest) -> dict:
    pops: dict = {}
    for rec in manifest.records:
        pops.setdefault(rec.label_id, []).append(rec.id)
    return {k: sorted(v) for k, v in pops.items()}


def sample_class_balanced(manifest: Manifest, per_class: int, seed: int) -> list:
    """Draw ``min(population, per_class)`` ids from every class.

    Classes are visited in ascending ``label_id`` and ids are drawn from
    the sorted member list of each class, so the result depends only on
    the seed and the class membership, never on record order.
    """
    if per_class < 1:
        raise DataError(f"per_class must be >= 1, got {per_class}")
    rng = np.random.default_rng(seed)
    chosen = []
    for label_id, ids in sorted(class_populations(manifest).items()):
        take = min(len(ids), per_class)
        if take < per_class:
            log.info("class %d has only %d records (< %d); taking all", label_id, len(ids), per_class)
        idx = rng.choice(len(ids), size=take, replace=False)
        chosen.extend(ids[i] for i in idx)
    return chosen


def underpopulated_classes(manifest: Manifest, per_class: int) -> dict:
    return {k: len(v) for k, v in sorted(class_populations(manifest).items()) if len(v) < per_class}
