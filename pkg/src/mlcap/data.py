"""Dataset I/O, splitting, checkpoint serialization, synthetic data.

Datasets are JSON Lines: one object per image with an ``image_id``, a fixed
width ``feature`` vector, and a ``captions`` list of ``{lang, tokens}``
objects. Checkpoints are a single binary file: the ``MLCAP1`` magic, an
8-byte little-endian header length, a JSON header (dimensions, vocabulary,
array manifest, training config, epoch), then the raw little-endian float64
array bytes concatenated in manifest order. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .model import PARAM_ORDER, Dims, ModelParams
from .autodiff import Tensor
from .vocab import Vocabulary

MAGIC = b"MLCAP1"
FORMAT_VERSION = 1


class DatasetError(ValueError):
    """A dataset file failed validation; messages carry line numbers."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed, truncated, or version-incompatible."""


@dataclass(frozen=True)
class Caption:
    language: str
    tokens: tuple[str, ...]


@dataclass(frozen=True, eq=False)
class ImageRecord:
    image_id: str
    feature: np.ndarray
    captions: tuple[Caption, ...]


@dataclass
class DatasetSplit:
    train: list[ImageRecord]
    val: list[ImageRecord]
    test: list[ImageRecord]


def _parse_captions(raw, where: str, lowercase: bool) -> tuple[Caption, ...]:
    if not isinstance(raw, list):
        raise DatasetError(f"{where}: captions must be a list")
    captions = []
    for j, entry in enumerate(raw):
        if not isinstance(entry, dict) or not isinstance(entry.get("lang"), str):
            raise DatasetError(f"{where}: captions[{j}] needs a string 'lang'")
        tokens = entry.get("tokens")
        if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
            raise DatasetError(f"{where}: captions[{j}] needs 'tokens' as a list of strings")
        if lowercase:
            tokens = [t.lower() for t in tokens]
        captions.append(Caption(entry["lang"], tuple(tokens)))
    return tuple(captions)


def load_dataset(path, *, lowercase: bool = False, require_captions: bool = True) -> list[ImageRecord]:
    """Read and validate a JSONL dataset.

    Feature width must be uniform across the file; image ids must be
    unique. With ``require_captions`` off (caption-generation inputs),
    records may omit captions entirely.
    """
    records: list[ImageRecord] = []
    seen_ids: set[str] = set()
    feature_dim: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{where}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise DatasetError(f"{where}: each line must be a JSON object")
            image_id = obj.get("image_id")
            if not isinstance(image_id, str) or not image_id:
                raise DatasetError(f"{where}: missing or empty 'image_id'")
            if image_id in seen_ids:
                raise DatasetError(f"{where}: duplicate image_id {image_id!r}")
            seen_ids.add(image_id)
            raw_feature = obj.get("feature")
            if not isinstance(raw_feature, list) or not raw_feature:
                raise DatasetError(f"{where}: image_id {image_id!r} needs a non-empty 'feature' list")
            try:
                feature = np.asarray(raw_feature, dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"{where}: image_id {image_id!r} has a non-numeric feature") from exc
            if feature.ndim != 1 or not np.isfinite(feature).all():
                raise DatasetError(f"{where}: image_id {image_id!r} feature must be a flat finite vector")
            if feature_dim is None:
                feature_dim = feature.size
            elif feature.size != feature_dim:
                raise DatasetError(
                    f"{where}: image_id {image_id!r} feature width {feature.size} != {feature_dim}"
                )
            captions = _parse_captions(obj.get("captions", []), where, lowercase)
            if require_captions and not captions:
                raise DatasetError(f"{where}: image_id {image_id!r} has no captions")
            records.append(ImageRecord(image_id, feature, captions))
    if not records:
        raise DatasetError(f"{path}: dataset is empty")
    return records


def save_dataset(records: Iterable[ImageRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {
                "image_id": rec.image_id,
                "feature": [float(x) for x in rec.feature],
                "captions": [{"lang": c.language, "tokens": list(c.tokens)} for c in rec.captions],
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def corpus_from_records(records: Iterable[ImageRecord], languages=None) -> list[tuple[str, tuple[str, ...]]]:
    """Flatten records into (language, tokens) caption pairs."""
    keep = None if languages is None else set(languages)
    return [
        (c.language, c.tokens)
        for rec in records
        for c in rec.captions
        if keep is None or c.language in keep
    ]


def l2_normalize_records(records: Sequence[ImageRecord]) -> list[ImageRecord]:
    """Records with unit-norm features; zero vectors pass through."""
    out = []
    for rec in records:
        norm = float(np.linalg.norm(rec.feature))
        feature = rec.feature / norm if norm > 0 else rec.feature
        out.append(ImageRecord(rec.image_id, feature, rec.captions))
    return out


def _resolve_counts(parts, total: int) -> tuple[int, int, int]:
    if len(parts) != 3:
        raise ValueError("split needs exactly three parts (train, val, test)")
    if all(isinstance(p, int) for p in parts):
        counts = tuple(parts)
        if any(c < 0 for c in counts):
            raise ValueError(f"split counts must be non-negative, got {parts}")
    else:
        fractions = [float(p) for p in parts]
        if any(f < 0 for f in fractions) or sum(fractions) > 1.0 + 1e-9:
            raise ValueError(f"split fractions must be non-negative and sum to <= 1, got {parts}")
        counts = tuple(int(f * total) for f in fractions)
    if sum(counts) > total:
        raise ValueError(f"split {counts} asks for more than the {total} records available")
    return counts


def split_dataset(records: Sequence[ImageRecord], parts, seed) -> DatasetSplit:
    """Shuffle once with the given seed, then slice into train/val/test.

    ``parts`` is three integers (absolute counts) or three floats
    (fractions of the record count, floored). Leftover records are dropped.
    """
    n_train, n_val, n_test = _resolve_counts(parts, len(records))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    shuffled = [records[i] for i in order]
    return DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val : n_train + n_val + n_test],
    )


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """A trained model snapshot: arrays in declared order plus metadata."""

    dims: Dims
    vocab: Vocabulary
    arrays: dict[str, np.ndarray]
    config: dict
    epoch: int
    version: int = FORMAT_VERSION


def checkpoint_from_model(params: ModelParams, vocab: Vocabulary, config: dict, epoch: int) -> Checkpoint:
    arrays = {name: tensor.data.copy() for name, tensor in params.named_parameters()}
    return Checkpoint(params.dims, vocab, arrays, dict(config), int(epoch))


def model_from_checkpoint(ckpt: Checkpoint) -> ModelParams:
    missing = [name for name in PARAM_ORDER if name not in ckpt.arrays]
    if missing:
        raise CheckpointError(f"checkpoint is missing arrays: {missing}")
    tensors = {name: Tensor(ckpt.arrays[name].copy(), requires_grad=True) for name in PARAM_ORDER}
    return ModelParams(ckpt.dims, **tensors)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "format": MAGIC.decode("ascii"),
        "version": ckpt.version,
        "dims": {
            "vocab": ckpt.dims.vocab,
            "embed": ckpt.dims.embed,
            "hidden": ckpt.dims.hidden,
            "feature": ckpt.dims.feature,
        },
        "vocab": {"tokens": list(ckpt.vocab.id_to_token), "languages": list(ckpt.vocab.languages)},
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in ckpt.arrays.items()],
        "config": ckpt.config,
        "epoch": ckpt.epoch,
    }
    header_bytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for arr in ckpt.arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    offset = len(MAGIC)
    if len(blob) < offset + 8:
        raise CheckpointError(f"{path}: truncated before header length")
    (header_len,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    if len(blob) < offset + header_len:
        raise CheckpointError(f"{path}: truncated inside header")
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    offset += header_len
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('version')!r} unsupported (expected {FORMAT_VERSION})"
        )
    try:
        dims = Dims(**header["dims"])
        vocab = Vocabulary(header["vocab"]["tokens"], header["vocab"]["languages"])
        manifest = header["arrays"]
        config = header["config"]
        epoch = int(header["epoch"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid header fields ({exc})") from exc
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest:
        name, shape = entry["name"], tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if len(blob) < offset + nbytes:
            raise CheckpointError(f"{path}: truncated inside array {name!r}")
        flat = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        arrays[name] = flat.astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes after arrays")
    return Checkpoint(dims, vocab, arrays, config, epoch)


# ---------------------------------------------------------------------------
# synthetic data

SYNTH_FEATURE_DIM = 16
SYNTH_NOISE = 0.05

_SYNTH_TABLES = [
    {
        "colors": ("red", "green", "blue", "yellow"),
        "shapes": ("circle", "square", "triangle", "star"),
        "template": "a {color} {shape}",
    },
    {
        "colors": ("aka", "midori", "ao", "kiiro"),
        "shapes": ("maru", "shikaku", "sankaku", "hoshi"),
        "template": "{shape} {color} desu",
    },
]


def _synth_table(index: int, language: str) -> dict:
    if index < len(_SYNTH_TABLES):
        return _SYNTH_TABLES[index]
    return {
        "colors": tuple(f"col{j}-{language}" for j in range(4)),
        "shapes": tuple(f"shp{j}-{language}" for j in range(4)),
        "template": "{color} {shape} end-" + language,
    }


def synth_generate(n_images: int, seed, languages: Sequence[str]) -> list[ImageRecord]:
    """Color/shape scenes with one caption per requested language.

    The feature one-hot encodes the (color, shape) pair over 16 slots plus
    uniform noise of amplitude 0.05. Word tables are assigned to languages
    in the order given and are disjoint across languages, so each caption
    set determines the attribute pair and vice versa.
    """
    if n_images < 1:
        raise ValueError(f"n_images must be >= 1, got {n_images}")
    if not languages:
        raise ValueError("at least one language is required")
    if len(set(languages)) != len(languages):
        raise ValueError(f"duplicate language codes: {list(languages)}")
    tables = {lang: _synth_table(i, lang) for i, lang in enumerate(languages)}
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_images):
        color = int(rng.integers(0, 4))
        shape = int(rng.integers(0, 4))
        feature = np.zeros(SYNTH_FEATURE_DIM)
        feature[color * 4 + shape] = 1.0
        feature += rng.uniform(-SYNTH_NOISE, SYNTH_NOISE, SYNTH_FEATURE_DIM)
        captions = []
        for lang in languages:
            table = tables[lang]
            text = table["template"].format(color=table["colors"][color], shape=table["shapes"][shape])
            captions.append(Caption(lang, tuple(text.split())))
        records.append(ImageRecord(f"synth-{i:06d}", feature, tuple(captions)))
    return records


def import_coco(annotations_path, features_path, language: str, *, lowercase: bool = False) -> list[ImageRecord]:
    """Best-effort bridge from COCO-style caption annotations.

    ``annotations_path`` is the usual JSON with ``images`` and
    ``annotations`` lists; ``features_path`` is a JSON object mapping
    image id strings to feature vectors. Images lacking captions or a
    feature vector are skipped; captions are whitespace-tokenized.
    """
    with open(annotations_path, "r", encoding="utf-8") as fh:
        ann = json.load(fh)
    with open(features_path, "r", encoding="utf-8") as fh:
        features = json.load(fh)
    if not isinstance(ann, dict) or "annotations" not in ann:
        raise DatasetError(f"{annotations_path}: expected an object with an 'annotations' list")
    by_image: dict[str, list[tuple[str, ...]]] = {}
    for entry in ann["annotations"]:
        image_id = str(entry.get("image_id"))
        caption = entry.get("caption")
        if not isinstance(caption, str):
            continue
        text = caption.lower() if lowercase else caption
        tokens = tuple(text.split())
        if tokens:
            by_image.setdefault(image_id, []).append(tokens)
    records = []
    for image_id in sorted(by_image):
        if image_id not in features:
            continue
        feature = np.asarray(features[image_id], dtype=np.float64)
        captions = tuple(Caption(language, toks) for toks in by_image[image_id])
        records.append(ImageRecord(image_id, feature, captions))
    if not records:
        raise DatasetError("no images had both captions and a feature vector")
    return records
