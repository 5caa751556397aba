"""Feature bundles, their binary container, and the planted-signal generator.

Container layout (all integers little-endian)::

    b"PSTP" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | tensors

Tensors follow the manifest's ``tensors`` list in order, row-major, encoded
with the manifest ``dtype`` (``float32`` for feature bundles).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from pstp.config import ModelConfig, SynthSpec
from pstp.errors import (
    BadMagicError,
    ConfigError,
    DataError,
    DimensionMismatchError,
    FormatError,
    TruncatedPayloadError,
    VersionMismatchError,
)

MAGIC = b"PSTP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_DTYPES = {"float32": "<f4", "float64": "<f8"}

TENSOR_ORDER = ("audio_raw", "visual_frame", "visual_patch", "question")


# ----------------------------------------------------------------- container


def write_container(path, manifest: dict, tensors: dict[str, np.ndarray], dtype: str = "float32") -> None:
    """Write ``tensors`` in insertion order behind a JSON manifest."""
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported dtype {dtype!r}")
    manifest = dict(manifest)
    manifest["dtype"] = dtype
    manifest["tensors"] = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    enc = _DTYPES[dtype]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype=enc).tobytes())


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(
            f"{path}: header needs {_HEADER.size} bytes, file has {len(raw)}"
        )
    _, version, mlen = _HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, reader supports {FORMAT_VERSION}")
    start = _HEADER.size
    if len(raw) < start + mlen:
        raise TruncatedPayloadError(
            f"{path}: manifest needs {start + mlen} bytes, file has {len(raw)}"
        )
    try:
        manifest = json.loads(raw[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest: {exc}") from exc
    dtype = manifest.get("dtype")
    if dtype not in _DTYPES:
        raise FormatError(f"{path}: unsupported dtype {dtype!r}")
    enc = np.dtype(_DTYPES[dtype])
    specs = manifest.get("tensors", [])
    expected = start + mlen + sum(int(np.prod(s["shape"], dtype=np.int64)) for s in specs) * enc.itemsize
    if len(raw) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload truncated, expected {expected} bytes, got {len(raw)}"
        )
    if len(raw) > expected:
        raise DimensionMismatchError(
            f"{path}: {len(raw) - expected} bytes beyond the declared tensor sizes "
            f"(expected {expected}, got {len(raw)})"
        )
    tensors = {}
    offset = start + mlen
    for s in specs:
        count = int(np.prod(s["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype=enc, count=count, offset=offset)
        tensors[s["name"]] = arr.reshape(s["shape"]).astype(dtype)
        offset += count * enc.itemsize
    return manifest, tensors


# -------------------------------------------------------------------- bundle


@dataclass
class FeatureBundle:
    """Precomputed features for one question about one video.

    Shapes: ``audio_raw [K, T, D_a]``, ``visual_frame [K, T, D]``,
    ``visual_patch [K, T, M, D]`` (patch 0 is [CLS]), ``question [1, D]``.
    """

    audio_raw: np.ndarray
    visual_frame: np.ndarray
    visual_patch: np.ndarray
    question: np.ndarray
    answer: int
    n_classes: int
    qtype: str = "unknown"
    video_id: str = ""
    planted_segment: int | None = None
    planted_patch: int | None = None
    split: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def dims(self) -> dict[str, int]:
        K, T, M, D = self.visual_patch.shape
        return {"K": K, "T": T, "M": M, "D": D, "D_a": self.audio_raw.shape[-1], "C": self.n_classes}

    def validate(self, cfg: ModelConfig | None = None) -> None:
        K, T, M, D = self.visual_patch.shape
        want = {
            "audio_raw": (K, T, self.audio_raw.shape[-1]),
            "visual_frame": (K, T, D),
            "question": (1, D),
        }
        for name, shape in want.items():
            if getattr(self, name).shape != shape:
                raise DimensionMismatchError(
                    f"{self.video_id}: {name} has shape {getattr(self, name).shape}, expected {shape}"
                )
        for name in TENSOR_ORDER:
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"{self.video_id}: {name} contains non-finite values")
        if not 0 <= self.answer < self.n_classes:
            raise DataError(f"{self.video_id}: answer {self.answer} outside [0, {self.n_classes})")
        if cfg is not None:
            check_compatible(self.dims, cfg, self.video_id)

    @property
    def has_plant(self) -> bool:
        return self.planted_segment is not None


def check_compatible(dims: dict[str, int], cfg: ModelConfig, what: str = "bundle") -> None:
    bad = [f"{k}={dims[k]} (model {getattr(cfg, k)})" for k in dims if dims[k] != getattr(cfg, k)]
    if bad:
        raise ConfigError(f"{what} does not match model config: {', '.join(bad)}")


def write_bundle(bundle: FeatureBundle, path) -> None:
    bundle.validate()
    manifest = {
        "kind": "feature_bundle",
        "dims": bundle.dims,
        "qtype": bundle.qtype,
        "answer": int(bundle.answer),
        "video_id": bundle.video_id,
        "planted_segment": bundle.planted_segment,
        "planted_patch": bundle.planted_patch,
        "split": bundle.split,
    }
    write_container(path, manifest, {name: getattr(bundle, name) for name in TENSOR_ORDER})


def read_bundle(path) -> FeatureBundle:
    manifest, tensors = read_container(path)
    if manifest.get("kind") != "feature_bundle":
        raise FormatError(f"{path}: not a feature bundle (kind={manifest.get('kind')!r})")
    dims = manifest["dims"]
    K, T, M, D, D_a = (dims[k] for k in ("K", "T", "M", "D", "D_a"))
    want = {
        "audio_raw": (K, T, D_a),
        "visual_frame": (K, T, D),
        "visual_patch": (K, T, M, D),
        "question": (1, D),
    }
    for name, shape in want.items():
        if name not in tensors:
            raise DimensionMismatchError(f"{path}: missing tensor {name}")
        if tensors[name].shape != shape:
            raise DimensionMismatchError(
                f"{path}: {name} stored as {tensors[name].shape}, dims declare {shape}"
            )
    return FeatureBundle(
        answer=int(manifest["answer"]),
        n_classes=int(dims["C"]),
        qtype=manifest["qtype"],
        video_id=manifest["video_id"],
        planted_segment=manifest.get("planted_segment"),
        planted_patch=manifest.get("planted_patch"),
        split=manifest.get("split"),
        **{name: tensors[name] for name in TENSOR_ORDER},
    )


# ----------------------------------------------------------------- generator


def class_prototypes(cfg: ModelConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm visual prototypes ``[C, D]`` and their audio images ``[C, D_a]``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    protos = rng.standard_normal((cfg.C, cfg.D))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    mixing = rng.standard_normal((cfg.D, cfg.D_a)) / np.sqrt(cfg.D)
    audio = protos @ mixing
    audio /= np.linalg.norm(audio, axis=1, keepdims=True)
    return protos, audio


def _draw_plants(spec: SynthSpec, cfg: ModelConfig) -> list[tuple[int, int, int]]:
    if spec.planted:
        return [tuple(p) for p in spec.planted]
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x91A7]))
    seg = rng.integers(0, cfg.K, spec.n_videos)
    patch = rng.integers(0, cfg.M, spec.n_videos)
    answer = rng.integers(0, cfg.C, spec.n_videos)
    return list(zip(seg.tolist(), patch.tolist(), answer.tolist()))


def synth_video(
    index: int, plant: tuple[int, int, int], spec: SynthSpec, cfg: ModelConfig,
    protos: np.ndarray, audio_protos: np.ndarray,
) -> FeatureBundle:
    seg, patch, answer = plant
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xB0D1, index]))
    s = spec.signal_strength
    audio = rng.standard_normal((cfg.K, cfg.T, cfg.D_a)) * spec.noise_std
    frames = rng.standard_normal((cfg.K, cfg.T, cfg.D)) * spec.noise_std
    patches = rng.standard_normal((cfg.K, cfg.T, cfg.M, cfg.D)) * spec.noise_std
    question = protos[answer][None, :] + rng.standard_normal((1, cfg.D)) * spec.question_noise
    patches[seg, :, patch, :] += s * protos[answer]
    audio[seg, :, :] += s * audio_protos[answer]
    qtype = spec.qtypes[int(rng.integers(0, len(spec.qtypes)))]
    return FeatureBundle(
        audio_raw=audio.astype(np.float32),
        visual_frame=frames.astype(np.float32),
        visual_patch=patches.astype(np.float32),
        question=question.astype(np.float32),
        answer=int(answer),
        n_classes=cfg.C,
        qtype=qtype,
        video_id=f"synth-{spec.seed}-{index:06d}",
        planted_segment=int(seg),
        planted_patch=int(patch),
    )


def generate_synthetic(spec: SynthSpec, cfg: ModelConfig) -> list[FeatureBundle]:
    """Build ``spec.n_videos`` bundles; a pure function of ``(spec, cfg)``.

    Every feature starts as Gaussian noise.  The planted segment carries the
    answer's prototype in one patch of every frame and its audio image in
    every snippet; the question is the prototype plus a little noise.
    """
    spec.validate_for(cfg)
    protos, audio_protos = class_prototypes(cfg, spec.seed)
    plants = _draw_plants(spec, cfg)
    return [synth_video(i, p, spec, cfg, protos, audio_protos) for i, p in enumerate(plants)]


def nearest_prototype_accuracy(bundles: Sequence[FeatureBundle], cfg: ModelConfig, seed: int) -> float:
    """Accuracy of labelling each video by the prototype nearest its planted patch.

    The planted patch is averaged over the segment's ``T`` frames first.
    """
    if not bundles:
        raise DataError("no bundles to score")
    protos, _ = class_prototypes(cfg, seed)
    hits = 0
    for b in bundles:
        x = b.visual_patch[b.planted_segment, :, b.planted_patch, :].astype(np.float64).mean(axis=0)
        hits += int(np.argmax(protos @ x) == b.answer)
    return hits / len(bundles)


# ---------------------------------------------------------------- splitting


def split_dataset(dataset: Sequence, ratios: Sequence[float], seed: int):
    """Shuffle with ``seed`` and cut into ``(train, val, test)``.

    Sizes are ``floor(n * r)`` for the first two parts; the test part takes
    the remainder, so 10 items at (0.8, 0.1, 0.1) split 8/1/1.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError(f"split needs three non-negative ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios sum to {sum(ratios)!r}, expected 1")
    n = len(dataset)
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5917])).permutation(n)
    n_train = int(np.floor(n * ratios[0] + 1e-9))
    n_val = int(np.floor(n * ratios[1] + 1e-9))
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple([dataset[i] for i in part] for part in parts)


def tag_splits(train, val, test) -> None:
    for name, part in (("train", train), ("val", val), ("test", test)):
        for b in part:
            b.split = name


# ---------------------------------------------------------- dataset on disk


INDEX_NAME = "index.json"


def write_dataset(bundles: Iterable[FeatureBundle], out_dir, cfg: ModelConfig | None = None) -> Path:
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    entries = []
    for b in bundles:
        rel = f"videos/{b.video_id}.pstp"
        write_bundle(b, out / rel)
        entries.append({
            "path": rel,
            "video_id": b.video_id,
            "qtype": b.qtype,
            "answer": b.answer,
            "split": b.split,
            "planted_segment": b.planted_segment,
            "planted_patch": b.planted_patch,
        })
    index = {"format_version": FORMAT_VERSION, "videos": entries}
    if cfg is not None:
        index["model"] = cfg.to_dict()
    (out / INDEX_NAME).write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return out / INDEX_NAME


def read_index(data_dir) -> dict:
    path = Path(data_dir) / INDEX_NAME
    if not path.is_file():
        raise DataError(f"{data_dir}: no {INDEX_NAME} found")
    return json.loads(path.read_text())


def load_dataset(data_dir, split: str | None = None) -> list[FeatureBundle]:
    """Read every bundle listed in the index, optionally one split only."""
    index = read_index(data_dir)
    root = Path(data_dir)
    return [
        read_bundle(root / e["path"])
        for e in index["videos"]
        if split is None or e.get("split") == split
    ]


def resegment(bundle: FeatureBundle, K: int) -> FeatureBundle:
    """Regroup the same ``K*T`` snippets into ``K`` segments of equal length.

    The planted segment moves to whichever new segment holds the first
    planted snippet.
    """
    S = bundle.audio_raw.shape[0] * bundle.audio_raw.shape[1]
    if K < 1 or S % K:
        raise ConfigError(f"{S} snippets cannot be split into K={K} equal segments")
    T = S // K
    old_T = bundle.audio_raw.shape[1]
    planted = None if bundle.planted_segment is None else (bundle.planted_segment * old_T) // T
    return FeatureBundle(
        audio_raw=bundle.audio_raw.reshape(K, T, -1),
        visual_frame=bundle.visual_frame.reshape(K, T, -1),
        visual_patch=bundle.visual_patch.reshape(K, T, *bundle.visual_patch.shape[2:]),
        question=bundle.question,
        answer=bundle.answer,
        n_classes=bundle.n_classes,
        qtype=bundle.qtype,
        video_id=bundle.video_id,
        planted_segment=planted,
        planted_patch=bundle.planted_patch,
        split=bundle.split,
    )
