"""Synthetic stand-in for diffusion-augmented interactive retrieval data.

A corpus of random unit directions plays the image collection. Each dialogue
picks a target and, per round ``n``:

* the text embedding is the target plus Gaussian noise whose scale decays as
  ``sigma0 * gamma**n`` (feedback accumulates, text sharpens);
* the generated-image embedding is, with probability ``rho``, the target plus
  noise ``sigma_good``; otherwise it is a *different* corpus item plus the same
  noise (a confidently wrong image).

RNG layout: the corpus uses ``default_rng([seed, 0])``. Dialogue ``j`` of split
``s`` uses its own stream ``default_rng([seed, s, j])`` and draws, in order:
target id; then for each round: text noise (d), branch uniform, image noise
(d), and only on the corrupt branch the distractor id. Because every dialogue
owns its stream, output does not depend on generation order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .exceptions import ConfigError, DataFormatError

SPLITS = {"train": 1, "test": 2}


@dataclass(frozen=True)
class GenConfig:
    corpus_size: int = 5000
    dim: int = 64
    dialogues: int = 500
    rounds: int = 11
    sigma0: float = 0.9
    gamma: float = 0.85
    rho: float = 0.6
    sigma_good: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        if self.sigma0 < 0 or self.sigma_good < 0 or self.gamma < 0:
            raise ConfigError("noise scales must be >= 0")
        if self.rounds < 1 or self.dialogues < 1:
            raise ConfigError("rounds and dialogues must be >= 1")
        if self.corpus_size < 2:
            raise ConfigError("corpus_size must be >= 2")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")

    def text_sigma(self, n: int) -> float:
        return self.sigma0 * self.gamma ** n

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown GenConfig fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class DialogueSample:
    dialogue_id: int
    target_id: int
    z_T: np.ndarray  # (R, d)
    z_D: np.ndarray  # (R, d)
    is_corrupt: np.ndarray = field(default=None)  # (R,) bool, generator-side only

    @property
    def n_rounds(self) -> int:
        return int(self.z_T.shape[0])

    def to_json(self) -> str:
        return json.dumps({
            "dialogue_id": int(self.dialogue_id),
            "target_id": int(self.target_id),
            "z_T": [[float(x) for x in row] for row in self.z_T],
            "z_D": [[float(x) for x in row] for row in self.z_D],
            "is_corrupt": [bool(x) for x in self.is_corrupt],
        }, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "DialogueSample":
        try:
            obj = json.loads(line)
            z_T = np.asarray(obj["z_T"], dtype=np.float32)
            z_D = np.asarray(obj["z_D"], dtype=np.float32)
            flags = np.asarray(obj.get("is_corrupt", [False] * len(z_T)), dtype=bool)
            sample = cls(int(obj["dialogue_id"]), int(obj["target_id"]), z_T, z_D, flags)
        except (ValueError, KeyError, TypeError) as exc:
            raise DataFormatError(f"malformed dialogue line: {exc}") from exc
        if z_T.ndim != 2 or z_T.shape != z_D.shape or flags.shape != (z_T.shape[0],):
            raise DataFormatError(f"dialogue {sample.dialogue_id}: ragged embedding arrays")
        return sample


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def generate_corpus(config: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    """``(ids, matrix)``: N i.i.d. uniform directions on the unit sphere."""
    rng = np.random.default_rng([config.seed, 0])
    g = rng.standard_normal((config.corpus_size, config.dim))
    return np.arange(config.corpus_size), _unit(g).astype(np.float32)


def _noisy_unit(center: np.ndarray, sigma: float, noise: np.ndarray) -> np.ndarray:
    if sigma == 0.0:
        return center.copy()
    return _unit(center.astype(np.float64) + sigma * noise).astype(np.float32)


def generate_dialogue(config: GenConfig, corpus: np.ndarray, dialogue_id: int, split: str = "train") -> DialogueSample:
    rng = np.random.default_rng([config.seed, SPLITS[split], dialogue_id])
    N, d = corpus.shape
    R = config.rounds
    target = int(rng.integers(N))
    z_star = corpus[target]
    z_T = np.empty((R, d), dtype=np.float32)
    z_D = np.empty((R, d), dtype=np.float32)
    corrupt = np.zeros(R, dtype=bool)
    for n in range(R):
        z_T[n] = _noisy_unit(z_star, config.text_sigma(n), rng.standard_normal(d))
        good = rng.random() < config.rho
        img_noise = rng.standard_normal(d)
        if good:
            z_D[n] = _noisy_unit(z_star, config.sigma_good, img_noise)
        else:
            other = int(rng.integers(N - 1))
            other += other >= target
            z_D[n] = _noisy_unit(corpus[other], config.sigma_good, img_noise)
            corrupt[n] = True
    return DialogueSample(dialogue_id, target, z_T, z_D, corrupt)


def generate_dialogues(config: GenConfig, corpus: np.ndarray, split: str = "train") -> list[DialogueSample]:
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected one of {sorted(SPLITS)}")
    corpus = np.asarray(corpus, dtype=np.float32)
    if corpus.ndim != 2 or corpus.shape[1] != config.dim:
        raise ConfigError(f"corpus shape {corpus.shape} does not match dim={config.dim}")
    return [generate_dialogue(config, corpus, j, split) for j in range(config.dialogues)]


# ---------------------------------------------------------------------------
# file formats

CORPUS_MAGIC = b"ADEC"
DIALOGUE_MAGIC = b"ADDL"
FORMAT_VERSION = 1
_CORPUS_HEADER = struct.Struct("<4sIII")
_DIALOGUE_HEADER = struct.Struct("<4sIIII")


def write_corpus(path, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    N, d = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_CORPUS_HEADER.pack(CORPUS_MAGIC, FORMAT_VERSION, N, d))
        fh.write(matrix.tobytes())


def read_corpus(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _CORPUS_HEADER.size:
        raise DataFormatError(f"{path}: too short for a corpus header")
    magic, version, N, d = _CORPUS_HEADER.unpack_from(blob)
    if magic != CORPUS_MAGIC:
        raise DataFormatError(f"{path}: bad corpus magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported corpus version {version}")
    expected = _CORPUS_HEADER.size + 4 * N * d
    if len(blob) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=_CORPUS_HEADER.size).reshape(N, d)
    return data.astype(np.float32)


def write_manifest(path, ids) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row, cid in enumerate(ids):
            fh.write(json.dumps({"row": row, "id": int(cid)}) + "\n")


def read_manifest(path) -> np.ndarray:
    ids = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if obj["row"] != len(ids):
                    raise ValueError(f"row {obj['row']} out of order")
                ids.append(int(obj["id"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataFormatError(f"{path}:{lineno + 1}: {exc}") from exc
    return np.asarray(ids)


def write_dialogues(path, dialogues) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for dlg in dialogues:
            fh.write(dlg.to_json() + "\n")


def read_dialogues(path) -> list[DialogueSample]:
    with open(path, encoding="utf-8") as fh:
        return [DialogueSample.from_json(line) for line in fh if line.strip()]


def write_dialogues_binary(path, dialogues) -> None:
    """Bulk twin of the JSON-lines format.

    ``ADDL | version | M | R | d`` then per dialogue: ``dialogue_id u32,
    target_id u32, R corrupt bytes, R*d f32 text, R*d f32 image``.
    """
    M = len(dialogues)
    R, d = dialogues[0].z_T.shape if M else (0, 0)
    with open(path, "wb") as fh:
        fh.write(_DIALOGUE_HEADER.pack(DIALOGUE_MAGIC, FORMAT_VERSION, M, R, d))
        for dlg in dialogues:
            if dlg.z_T.shape != (R, d):
                raise DataFormatError("binary dialogue files need a rectangular round grid")
            fh.write(struct.pack("<II", dlg.dialogue_id, dlg.target_id))
            fh.write(np.asarray(dlg.is_corrupt, dtype=np.uint8).tobytes())
            fh.write(np.ascontiguousarray(dlg.z_T, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(dlg.z_D, dtype="<f4").tobytes())


def read_dialogues_binary(path) -> list[DialogueSample]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _DIALOGUE_HEADER.size:
        raise DataFormatError(f"{path}: too short for a dialogue header")
    magic, version, M, R, d = _DIALOGUE_HEADER.unpack_from(blob)
    if magic != DIALOGUE_MAGIC or version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: not a version-{FORMAT_VERSION} ADDL file")
    rec = 8 + R + 8 * R * d
    if len(blob) != _DIALOGUE_HEADER.size + M * rec:
        raise DataFormatError(f"{path}: size does not match header")
    out = []
    off = _DIALOGUE_HEADER.size
    for _ in range(M):
        did, tid = struct.unpack_from("<II", blob, off)
        off += 8
        flags = np.frombuffer(blob, dtype=np.uint8, count=R, offset=off).astype(bool)
        off += R
        z_T = np.frombuffer(blob, dtype="<f4", count=R * d, offset=off).reshape(R, d).astype(np.float32)
        off += 4 * R * d
        z_D = np.frombuffer(blob, dtype="<f4", count=R * d, offset=off).reshape(R, d).astype(np.float32)
        off += 4 * R * d
        out.append(DialogueSample(did, tid, z_T, z_D, flags))
    return out
