"""Query embeddings: precomputed bank files, query averaging and label tables.

Bank file layout (all integers little-endian)::

    b"QEMBANK1" | u32 dim | u32 count
    count x ( u16 id_len | id (utf-8) | dim x f32 )
    JSON footer {"dim": ..., "index": {id: vector byte offset}}
"""

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import FormatError, InvalidInputError, MissingEmbeddingError

MAGIC = b"QEMBANK1"
EMBED_DIM = 512

QUERY_TEMPLATES = (
    "a photo of {}",
    "a photo of the small {}",
    "a low resolution photo of a {}",
    "a photo of many {}",
)


@dataclass(frozen=True)
class QueryEmbedding:
    vector: np.ndarray
    modality: str
    id: str

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.shape != (EMBED_DIM,):
            raise InvalidInputError(f"query embedding must have shape ({EMBED_DIM},), got {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise InvalidInputError("query embedding has non-finite entries")
        if self.modality not in ("image", "text", "label"):
            raise InvalidInputError(f"unknown modality {self.modality!r}")
        object.__setattr__(self, "vector", vec)


class EmbeddingBank:
    """Read-only id -> vector store loaded from a QEMBANK1 file."""

    def __init__(self, ids, vectors, offsets=None, dim=EMBED_DIM):
        self.dim = dim
        self.ids = list(ids)
        self.vectors = np.asarray(vectors, dtype=np.float32).reshape(len(self.ids), dim)
        self.vectors.flags.writeable = False
        self._row = {key: i for i, key in enumerate(self.ids)}
        if len(self._row) != len(self.ids):
            raise FormatError("duplicate ids in bank")
        self.index = dict(offsets) if offsets is not None else {}

    def __len__(self):
        return len(self.ids)

    def __contains__(self, key):
        return key in self._row

    def __getitem__(self, key):
        try:
            return self.vectors[self._row[key]]
        except KeyError:
            raise MissingEmbeddingError([key]) from None

    def missing(self, keys):
        return [k for k in keys if k not in self._row]


def write_bank(path, items, dim=EMBED_DIM):
    """Write ``items`` (mapping or iterable of ``(id, vector)``) to ``path``."""
    if hasattr(items, "items"):
        items = items.items()
    items = list(items)
    seen = set()
    chunks = [MAGIC, struct.pack("<II", dim, len(items))]
    offset = len(MAGIC) + 8
    index = {}
    for key, vec in items:
        if key in seen:
            raise InvalidInputError(f"duplicate bank id {key!r}")
        seen.add(key)
        vec = np.asarray(vec, dtype="<f4")
        if vec.shape != (dim,):
            raise InvalidInputError(f"vector for {key!r} has shape {vec.shape}, expected ({dim},)")
        raw = key.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise InvalidInputError(f"id too long: {key[:40]!r}...")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        offset += 2 + len(raw)
        index[key] = offset
        chunks.append(vec.tobytes())
        offset += 4 * dim
    footer = json.dumps({"dim": dim, "index": index}, sort_keys=True).encode("utf-8")
    chunks.append(footer)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_bank(path, expected_dim=EMBED_DIM):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 8:
        raise FormatError("file too short for bank header", offset=len(data))
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic {data[:len(MAGIC)]!r}", offset=0)
    dim, count = struct.unpack_from("<II", data, len(MAGIC))
    if dim != expected_dim:
        raise FormatError(f"bank dim {dim}, expected {expected_dim}", offset=len(MAGIC))
    pos = len(MAGIC) + 8
    ids, rows, offsets = [], [], {}
    for _ in range(count):
        if pos + 2 > len(data):
            raise FormatError("truncated record header", offset=pos)
        (id_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + id_len + 4 * dim > len(data):
            raise FormatError("truncated record", offset=pos - 2)
        try:
            key = data[pos:pos + id_len].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("id is not valid utf-8", offset=pos) from None
        pos += id_len
        if key in offsets:
            raise FormatError(f"duplicate id {key!r}", offset=pos - id_len)
        offsets[key] = pos
        ids.append(key)
        rows.append(np.frombuffer(data, dtype="<f4", count=dim, offset=pos))
        pos += 4 * dim
    if pos < len(data):
        try:
            footer = json.loads(data[pos:].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise FormatError("unreadable JSON footer", offset=pos) from None
        if footer.get("index") != offsets:
            raise FormatError("footer index disagrees with records", offset=pos)
    vectors = np.stack(rows) if rows else np.zeros((0, dim), dtype=np.float32)
    return EmbeddingBank(ids, vectors, offsets, dim)


def convert_jsonl(src, dst):
    """Convert a JSON-lines file of ``{"id": ..., "vector": [...]}`` to a bank."""
    items = []
    with open(src, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                items.append((rec["id"], rec["vector"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{src}:{lineno}: bad record ({exc})") from None
    write_bank(dst, items)
    return len(items)


def _mean(bank, keys, modality, ident):
    missing = bank.missing(keys)
    if missing:
        raise MissingEmbeddingError(missing)
    stack = np.stack([bank[k] for k in keys]).astype(np.float64)
    return QueryEmbedding(stack.mean(axis=0), modality, ident)


def frame_query(bank, frame_ids):
    """Mean embedding of the frames extracted around a clip's centre."""
    frame_ids = list(frame_ids)
    if not frame_ids:
        raise InvalidInputError("frame_query needs at least one frame id")
    return _mean(bank, frame_ids, "image", "|".join(frame_ids))


def validate_templates(templates):
    templates = tuple(templates)
    if not templates:
        raise InvalidInputError("template set is empty")
    for t in templates:
        if t.count("{}") != 1 or t.replace("{}", "").count("{") or t.replace("{}", "").count("}"):
            raise InvalidInputError(f"template {t!r} must contain exactly one '{{}}' placeholder")
    return templates


def template_ids(user_text, templates=QUERY_TEMPLATES):
    return [t.format(user_text) for t in validate_templates(templates)]


def text_query(bank, user_text, templates=QUERY_TEMPLATES):
    """Mean of the template-instantiated text embeddings for ``user_text``."""
    return _mean(bank, template_ids(user_text, templates), "text", user_text)


class LabelTable(nn.Module):
    """Learnable per-class embeddings used in place of a query encoder."""

    def __init__(self, num_classes, dim=EMBED_DIM):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_classes, dim))
        nn.init.normal_(self.weight, std=dim ** -0.5)

    @property
    def num_classes(self):
        return self.weight.shape[0]

    def forward(self, class_ids):
        ids = torch.as_tensor(class_ids, dtype=torch.long)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.num_classes):
            raise InvalidInputError(
                f"class id out of range for table of size {self.num_classes}: {ids.tolist()}"
            )
        return self.weight[ids]


def label_embedding(table, class_id):
    """Trainable row of ``table``; stays attached to the autograd graph."""
    return table(class_id)


# -- synthetic embeddings for desk-scale corpora ---------------------------


def _name_seed(name, seed):
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _gram_schmidt(vec, basis):
    for b in basis:
        vec = vec - (vec @ b) * b
    for b in basis:  # second pass for numerical orthogonality
        vec = vec - (vec @ b) * b
    return vec / np.linalg.norm(vec)


def synthetic_class_embeddings(class_names, seed=0, dim=EMBED_DIM):
    """Unit-norm, mutually orthogonal vectors, one per class name."""
    if len(class_names) > dim:
        raise InvalidInputError("more classes than embedding dimensions")
    basis = []
    for name in class_names:
        rng = np.random.default_rng(_name_seed(name, seed))
        basis.append(_gram_schmidt(rng.standard_normal(dim), basis))
    return {name: vec for name, vec in zip(class_names, basis)}


def perturb_embeddings(embeddings, degrees, seed=0):
    """Rotate each vector by ``degrees`` toward a random mix of the other class vectors.

    Emulates a controlled image/text modality gap: cos(angle(e, e')) = cos(degrees),
    and the rotated vector leans toward the other classes, so a model trained on the
    unrotated vectors sees a less discriminative query.  With a single class the
    direction is a random one orthogonal to it.
    """
    names = list(embeddings)
    vecs = {n: np.asarray(embeddings[n], dtype=np.float64) for n in names}
    theta = np.deg2rad(degrees)
    out = {}
    for name in names:
        vec = vecs[name]
        rng = np.random.default_rng(_name_seed("gap:" + name, seed))
        others = [vecs[o] for o in names if o != name]
        if others:
            mix = rng.standard_normal(len(others)) @ np.stack(others)
        else:
            mix = rng.standard_normal(vec.shape[0])
        direction = _gram_schmidt(mix, [vec / np.linalg.norm(vec)])
        out[name] = np.cos(theta) * vec + np.sin(theta) * direction * np.linalg.norm(vec)
    return out
