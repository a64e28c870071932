"""On-disk formats: embeddings, annotations, labels, similarities, checkpoints.

Text formats are UTF-8 with LF line endings; JSON lines are canonical
(sorted keys, no spaces) so identical data serializes byte-identically.
The checkpoint is a little-endian flat binary.
"""

from __future__ import annotations

import json
import struct
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..errors import DataFormatError
from ..geom import (
    SOURCE_GROUND_TRUTH,
    SOURCE_MODEL,
    SOURCE_PSEUDO_LABEL,
    Detection,
    OrientedBox,
)
from ..promptdict import PromptDictionary, PromptEmbedding, Projector, project
from ..pseudolabel import (
    CategoryTree,
    DetectionProvenance,
    PseudoLabelRecord,
    SimilarityProvider,
)

EMBEDDING_MAGIC = "ORSD-EMB"
CHECKPOINT_MAGIC = b"ORSDCKPT"
CHECKPOINT_VERSION = 1


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ------------------------------------------------------------ embeddings


def write_embeddings(
    entries: Iterable[PromptEmbedding], text_dim: int, image_dim: int, path: str
) -> None:
    """`ORSD-EMB 1 <text_dim> <image_dim>` header, then one raw embedding
    per line: category, modality, prompt id, space-separated floats."""
    lines = [f"{EMBEDDING_MAGIC} 1 {text_dim} {image_dim}"]
    dims = {"text": text_dim, "image": image_dim}
    for e in entries:
        if e.raw.shape != (dims[e.modality],):
            raise DataFormatError(
                f"{e.modality} embedding {e.prompt_id!r} has dim {e.raw.shape}, "
                f"header says {dims[e.modality]}"
            )
        floats = " ".join(repr(float(x)) for x in e.raw)
        lines.append(f"{e.category}\t{e.modality}\t{e.prompt_id}\t{floats}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_embedding_dims(path: str) -> tuple[int, int]:
    """(text_dim, image_dim) from an embedding file header, nothing else read."""
    with open(path, encoding="utf-8") as f:
        first = f.readline().rstrip("\n")
    header = first.split()
    if len(header) != 4 or header[0] != EMBEDDING_MAGIC or header[1] != "1":
        raise DataFormatError(f"{path}: bad header {first!r}")
    try:
        return int(header[2]), int(header[3])
    except ValueError as e:
        raise DataFormatError(f"{path}: non-integer dims in header") from e


def read_embeddings(path: str) -> list[PromptEmbedding]:
    """Parse an embedding file back into raw (unprojected) entries."""
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty embedding file")
    header = lines[0].split()
    if len(header) != 4 or header[0] != EMBEDDING_MAGIC:
        raise DataFormatError(f"{path}: bad header {lines[0]!r}")
    if header[1] != "1":
        raise DataFormatError(f"{path}: unsupported version {header[1]!r}")
    try:
        dims = {"text": int(header[2]), "image": int(header[3])}
    except ValueError as e:
        raise DataFormatError(f"{path}: non-integer dims in header") from e
    entries = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataFormatError(f"{path}:{ln}: expected 4 tab-separated fields")
        category, modality, prompt_id, floats = parts
        if modality not in dims:
            raise DataFormatError(f"{path}:{ln}: unknown modality {modality!r}")
        try:
            raw = np.array([float(x) for x in floats.split()])
        except ValueError as e:
            raise DataFormatError(f"{path}:{ln}: bad float") from e
        if raw.shape != (dims[modality],):
            raise DataFormatError(
                f"{path}:{ln}: {raw.size} floats, header promises {dims[modality]}"
            )
        entries.append(
            PromptEmbedding(
                category=category, modality=modality, prompt_id=prompt_id,
                raw=raw, projected=None,
            )
        )
    return entries


def load_dictionary(
    path: str, projectors: Mapping[str, Projector]
) -> PromptDictionary:
    """Read an embedding file and project every entry into the common space."""
    entries = []
    for e in read_embeddings(path):
        if e.modality not in projectors:
            raise DataFormatError(
                f"no projector supplied for modality {e.modality!r}"
            )
        entries.append(project(e, projectors[e.modality]))
    return PromptDictionary(entries)


# ----------------------------------------------------------- annotations


def _box_dict(box: OrientedBox) -> dict:
    return {
        "cx": box.cx, "cy": box.cy, "w": box.w, "h": box.h, "theta_rad": box.theta,
    }


def _box_from(d: Mapping, where: str) -> OrientedBox:
    try:
        return OrientedBox(d["cx"], d["cy"], d["w"], d["h"], d["theta_rad"])
    except KeyError as e:
        raise DataFormatError(f"{where}: object missing key {e}") from e


def write_annotations(
    images: Sequence[tuple[str, int, int, Sequence[Detection]]], path: str
) -> None:
    """One image per line: id, size, and its ground-truth objects."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for image_id, width, height, objects in images:
            line = _dumps(
                {
                    "image_id": image_id,
                    "width": width,
                    "height": height,
                    "objects": [
                        {**_box_dict(d.box), "category": d.category} for d in objects
                    ],
                }
            )
            f.write(line + "\n")


def read_annotations(path: str) -> list[tuple[str, int, int, list[Detection]]]:
    out = []
    for ln, row in _read_jsonl(path):
        try:
            objects = [
                Detection(
                    category=o["category"],
                    score=1.0,
                    box=_box_from(o, f"{path}:{ln}"),
                    source=SOURCE_GROUND_TRUTH,
                )
                for o in row["objects"]
            ]
            out.append((row["image_id"], int(row["width"]), int(row["height"]), objects))
        except (KeyError, TypeError) as e:
            raise DataFormatError(f"{path}:{ln}: malformed annotation row: {e}") from e
    return out


# ------------------------------------------------------------ detections


def write_detections(per_image: Mapping[str, Sequence[Detection]], path: str) -> None:
    """Model predictions, one image per line, order preserved."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for image_id in per_image:
            dets = [
                {**_box_dict(d.box), "category": d.category, "score": d.score}
                for d in per_image[image_id]
            ]
            f.write(_dumps({"detections": dets, "image_id": image_id}) + "\n")


def read_detections(path: str) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for ln, row in _read_jsonl(path):
        try:
            image_id = row["image_id"]
            if image_id in out:
                raise DataFormatError(f"{path}:{ln}: duplicate image id {image_id!r}")
            out[image_id] = [
                Detection(
                    category=d["category"],
                    score=float(d["score"]),
                    box=_box_from(d, f"{path}:{ln}"),
                    source=SOURCE_MODEL,
                )
                for d in row["detections"]
            ]
        except (KeyError, TypeError) as e:
            raise DataFormatError(f"{path}:{ln}: malformed detection row: {e}") from e
    return out


# ---------------------------------------------------------- category tree


def write_category_tree(tree: CategoryTree, path: str) -> None:
    """Nested `{"name", "children"}` JSON under one virtual root node."""

    parent_map = tree.as_parent_map()
    children: dict[str | None, list[str]] = {}
    for name in sorted(parent_map):
        children.setdefault(parent_map[name], []).append(name)

    def node(name: str) -> dict:
        return {
            "name": name,
            "children": [node(c) for c in children.get(name, [])],
        }

    doc = {"name": "__root__", "children": [node(r) for r in tree.roots]}
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(_dumps(doc) + "\n")


def read_category_tree(path: str) -> CategoryTree:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{path}: not valid JSON: {e}") from e
    parents: dict[str, str | None] = {}

    def walk(node, parent: str | None) -> None:
        try:
            name = node["name"]
        except (KeyError, TypeError) as e:
            raise DataFormatError(f"{path}: node without a name") from e
        if name in parents:
            raise DataFormatError(f"{path}: duplicate category {name!r}")
        parents[name] = parent
        for child in node.get("children", []):
            walk(child, name)

    if not isinstance(doc, dict) or "children" not in doc:
        raise DataFormatError(f"{path}: expected a virtual root with children")
    for top in doc["children"]:
        walk(top, None)
    return CategoryTree(parents)


# --------------------------------------------------------- pseudo labels


def write_pseudo_labels(records: Sequence[PseudoLabelRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(pseudo_record_json(r) + "\n")


def pseudo_record_json(r: PseudoLabelRecord) -> str:
    return _dumps(
        {
            "image_id": r.image_id,
            "detections": [
                {**_box_dict(d.box), "category": d.category, "score": d.score}
                for d in r.detections
            ],
            "category_list": list(r.category_list),
            "hard_negatives": list(r.hard_negatives),
            "provenance": [
                {
                    "score": p.score,
                    "clip_similarity": p.clip_similarity,
                    "filter_path": p.filter_path,
                }
                for p in r.provenance
            ],
        }
    )


def read_pseudo_labels(path: str) -> list[PseudoLabelRecord]:
    out = []
    for ln, row in _read_jsonl(path):
        try:
            dets = tuple(
                Detection(
                    category=d["category"],
                    score=float(d["score"]),
                    box=_box_from(d, f"{path}:{ln}"),
                    source=SOURCE_PSEUDO_LABEL,
                )
                for d in row["detections"]
            )
            prov = tuple(
                DetectionProvenance(
                    score=float(p["score"]),
                    clip_similarity=(
                        None if p["clip_similarity"] is None else float(p["clip_similarity"])
                    ),
                    filter_path=p["filter_path"],
                )
                for p in row["provenance"]
            )
            out.append(
                PseudoLabelRecord(
                    image_id=row["image_id"],
                    detections=dets,
                    category_list=tuple(row["category_list"]),
                    hard_negatives=tuple(row["hard_negatives"]),
                    provenance=prov,
                )
            )
        except (KeyError, TypeError) as e:
            raise DataFormatError(f"{path}:{ln}: malformed pseudo-label row: {e}") from e
    return out


# ----------------------------------------------------------- similarities


def write_similarities(
    rows: Sequence[tuple[str, int, str, float]], path: str
) -> None:
    """Rows are (image_id, det_index, category, cosine)."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for image_id, det_index, category, cosine in rows:
            f.write(
                _dumps(
                    {
                        "category": category,
                        "cosine": float(cosine),
                        "det_index": int(det_index),
                        "image_id": image_id,
                    }
                )
                + "\n"
            )


def read_similarities(path: str, source_index: int = 0) -> SimilarityProvider:
    """Load a similarity file as a provider for single-source pipelines.

    The file indexes detections flat per image, which corresponds to
    prompt-set ``source_index`` (default 0) of the labeling pipeline's
    crop-id scheme.
    """
    entries: dict[tuple[str, str], float] = {}
    for ln, row in _read_jsonl(path):
        try:
            key = (
                row["category"],
                f"{row['image_id']}#s{source_index}.{int(row['det_index'])}",
            )
            if key in entries:
                raise DataFormatError(f"{path}:{ln}: duplicate similarity for {key}")
            entries[key] = float(row["cosine"])
        except (KeyError, TypeError) as e:
            raise DataFormatError(f"{path}:{ln}: malformed similarity row: {e}") from e
    return SimilarityProvider(entries)


# ------------------------------------------------------------ checkpoints


def save_checkpoint(params: Mapping[str, np.ndarray], path: str) -> None:
    """`ORSDCKPT`, u32 version, u32 count, then per array: u32 name
    length, name bytes, u32 rows, u32 cols, row-major f64 data. All
    integers and floats little-endian."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name in sorted(params):
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.ndim != 2:
                raise DataFormatError(
                    f"checkpoint arrays must be 2-d; {name!r} has shape {arr.shape}"
                )
            blob = name.encode("utf-8")
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            f.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint (bad magic)")
    off = 8

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise DataFormatError(f"{path}: truncated checkpoint")
        out = data[off : off + n]
        off += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        arr = np.frombuffer(take(rows * cols * 8), dtype="<f8").reshape(rows, cols)
        params[name] = arr.astype(np.float64)
    if off != len(data):
        raise DataFormatError(f"{path}: {len(data) - off} trailing bytes")
    return params


# ----------------------------------------------------------------- shared


def _read_jsonl(path: str):
    """Yield (line_number, parsed_row) pairs, skipping blank lines."""
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield ln, json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}:{ln}: not valid JSON: {e}") from e
