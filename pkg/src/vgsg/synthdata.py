"""Synthetic cross-modal identity data and its on-disk format.

Every identity is a vector of K colour attributes, one per vertical body
region. Images are K horizontal colour bands (plus augmentation noise) and
captions name each region's colour from top to bottom with synonym jitter.

On disk a dataset is a directory holding ``manifest.txt`` (flat key/value)
and ``samples.jsonl``. Each samples line is ``<crc32 hex> <json>``; the first
record is a header, the rest are samples whose image is base-64 of
little-endian float32 in row-major (3, H0, W0) order.
"""

from __future__ import annotations

import base64
import hashlib
import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import SPECIAL_TOKENS, Tokenizer
from .errors import ConfigurationError, IngestionError, IntegrityError, SamplingError
from .kvfile import KVParseError, format_kv, read_kv

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.txt"
SAMPLES_NAME = "samples.jsonl"

# name, RGB, synonyms
PALETTE = (
    ("red", (0.85, 0.10, 0.10), ("crimson", "scarlet")),
    ("blue", (0.10, 0.20, 0.85), ("navy", "azure")),
    ("green", (0.10, 0.70, 0.15), ("lime", "emerald")),
    ("yellow", (0.95, 0.90, 0.10), ("golden", "lemon")),
    ("black", (0.05, 0.05, 0.05), ("dark", "ebony")),
    ("white", (0.95, 0.95, 0.95), ("ivory", "snowy")),
    ("purple", (0.55, 0.15, 0.70), ("violet", "lilac")),
    ("orange", (0.95, 0.55, 0.05), ("amber", "tangerine")),
    ("gray", (0.50, 0.50, 0.50), ("grey", "silver")),
    ("pink", (0.95, 0.55, 0.70), ("rose", "magenta")),
)

# top to bottom; (names, plural)
REGIONS = (
    (("hat", "cap", "beanie"), False),
    (("scarf", "shawl", "muffler"), False),
    (("shirt", "top", "blouse"), False),
    (("belt", "sash"), False),
    (("gloves", "mittens"), True),
    (("pants", "trousers", "jeans"), True),
    (("socks", "stockings"), True),
    (("shoes", "boots", "sneakers"), True),
)

OPENERS = (
    ("a", "person", "wearing"),
    ("someone", "in"),
    ("the", "pedestrian", "wears"),
    ("this", "person", "has"),
)


def region_indices(K: int) -> list[int]:
    """Which of the eight regions the K bands stand for, spread top to bottom."""
    if not 1 <= K <= len(REGIONS):
        raise ConfigurationError(f"K must be in [1, {len(REGIONS)}], got {K}")
    return [int(i) for i in np.linspace(0, len(REGIONS) - 1, K).round()]


def build_vocabulary(K: int, palette_size: int) -> list[str]:
    words = set()
    for opener in OPENERS:
        words.update(opener)
    words.update(("a", ",", "and"))
    for name, _, syn in PALETTE[:palette_size]:
        words.add(name)
        words.update(syn)
    for r in region_indices(K):
        words.update(REGIONS[r][0])
    return list(SPECIAL_TOKENS) + sorted(words)


@dataclass
class GenerationConfig:
    seed: int = 0
    n_train: int = 200
    n_val: int = 0
    n_test: int = 50
    samples_per_identity: int = 4
    noise_level: float = 0.1
    K: int = 4
    image_height: int = 32
    image_width: int = 16
    palette_size: int = 6

    def __post_init__(self):
        if self.n_identities < 2:
            raise ConfigurationError(f"need >= 2 identities, got {self.n_identities}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigurationError("split sizes must be non-negative")
        if self.samples_per_identity < 1:
            raise ConfigurationError("samples_per_identity must be >= 1")
        if not 2 <= self.palette_size <= len(PALETTE):
            raise ConfigurationError(f"palette_size must be in [2, {len(PALETTE)}], got {self.palette_size}")
        region_indices(self.K)
        if self.image_height % self.K:
            raise ConfigurationError(f"image height {self.image_height} not divisible by K={self.K}")
        if self.noise_level < 0:
            raise ConfigurationError("noise_level must be >= 0")
        if self.palette_size**self.K < self.n_identities:
            raise ConfigurationError(
                f"palette exhausted: {self.palette_size}^{self.K} = {self.palette_size ** self.K} "
                f"attribute combinations < {self.n_identities} identities"
            )

    @property
    def n_identities(self) -> int:
        return self.n_train + self.n_val + self.n_test


@dataclass(eq=False)
class Sample:
    identity: int
    image: np.ndarray  # (3, H0, W0) float32
    caption: list[int]
    split: str
    attributes: tuple[int, ...] = ()

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.identity == other.identity
            and self.split == other.split
            and list(self.caption) == list(other.caption)
            and tuple(self.attributes) == tuple(other.attributes)
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
        )


@dataclass
class DatasetManifest:
    version: int
    seed: int
    counts: dict  # split -> number of identities
    vocabulary: list[str]
    K: int
    image_height: int
    image_width: int
    samples_per_identity: int
    noise_level: float
    palette_size: int

    def generation_config(self) -> GenerationConfig:
        return GenerationConfig(
            seed=self.seed,
            n_train=self.counts["train"],
            n_val=self.counts["val"],
            n_test=self.counts["test"],
            samples_per_identity=self.samples_per_identity,
            noise_level=self.noise_level,
            K=self.K,
            image_height=self.image_height,
            image_width=self.image_width,
            palette_size=self.palette_size,
        )


@dataclass
class SplitArrays:
    images: np.ndarray  # (N, 3, H0, W0)
    identities: np.ndarray  # (N,)
    captions: list
    index: np.ndarray  # positions in Dataset.samples


@dataclass(eq=False)
class Dataset:
    manifest: DatasetManifest
    samples: list[Sample]
    _cache: dict = field(default_factory=dict, repr=False)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.manifest == other.manifest and self.samples == other.samples

    @property
    def tokenizer(self) -> Tokenizer:
        return Tokenizer(self.manifest.vocabulary)

    @property
    def vocab_size(self) -> int:
        return len(self.manifest.vocabulary)

    def split(self, name: str) -> SplitArrays:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        if name not in self._cache:
            idx = np.array([i for i, s in enumerate(self.samples) if s.split == name], dtype=np.int64)
            H, W = self.manifest.image_height, self.manifest.image_width
            images = (
                np.stack([self.samples[i].image for i in idx])
                if len(idx)
                else np.zeros((0, 3, H, W), dtype=np.float32)
            )
            ids = np.array([self.samples[i].identity for i in idx], dtype=np.int64)
            self._cache[name] = SplitArrays(images, ids, [self.samples[i].caption for i in idx], idx)
        return self._cache[name]

    def identities(self, split: str) -> np.ndarray:
        return np.unique(self.split(split).identities)

    def fingerprint(self) -> str:
        if "sha" not in self._cache:
            h = hashlib.sha256()
            for line in _sample_lines(self):
                h.update(line.encode())
                h.update(b"\n")
            self._cache["sha"] = h.hexdigest()
        return self._cache["sha"]


def _attribute_table(cfg: GenerationConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 0])
    codes = rng.choice(cfg.palette_size**cfg.K, size=cfg.n_identities, replace=False)
    digits = np.zeros((cfg.n_identities, cfg.K), dtype=np.int64)
    for k in range(cfg.K - 1, -1, -1):
        digits[:, k] = codes % cfg.palette_size
        codes = codes // cfg.palette_size
    return digits


def render(attributes, cfg: GenerationConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw K colour bands; with noise_level > 0 apply flip, pad-crop, erase and Gaussian noise."""
    H, W, K = cfg.image_height, cfg.image_width, cfg.K
    h = H // K
    img = np.zeros((3, H, W), dtype=np.float64)
    for k, a in enumerate(attributes):
        img[:, k * h : (k + 1) * h, :] = np.asarray(PALETTE[a][1])[:, None, None]
    if cfg.noise_level > 0:
        if rng is None:
            raise ValueError("augmentation needs an rng")
        if rng.random() < 0.5:
            img = img[:, :, ::-1]
        pad = 2
        padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)))
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        img = padded[:, dy : dy + H, dx : dx + W].copy()
        if rng.random() < 0.5:
            area = rng.uniform(0.02, 0.15) * H * W
            aspect = rng.uniform(0.3, 3.3)
            eh = int(min(H, max(1, round(np.sqrt(area * aspect)))))
            ew = int(min(W, max(1, round(np.sqrt(area / aspect)))))
            y0 = rng.integers(0, H - eh + 1)
            x0 = rng.integers(0, W - ew + 1)
            img[:, y0 : y0 + eh, x0 : x0 + ew] = rng.random((3, eh, ew))
        img = img + rng.normal(0.0, cfg.noise_level, size=img.shape)
    return img.astype(np.float32)


def make_caption(attributes, cfg: GenerationConfig, rng: np.random.Generator) -> list[str]:
    """One caption naming every attribute once, top to bottom."""
    words = list(OPENERS[rng.integers(len(OPENERS))])
    regions = region_indices(cfg.K)
    for k, (a, r) in enumerate(zip(attributes, regions)):
        if k > 0:
            words.append("and" if k == len(regions) - 1 else ",")
        name, _, syn = PALETTE[a]
        colour = (name,) + syn
        names, plural = REGIONS[r]
        if not plural:
            words.append("a")
        words.append(colour[rng.integers(len(colour))])
        words.append(names[rng.integers(len(names))])
    return words


def _identity_samples(identity: int, attributes, split: str, cfg: GenerationConfig, tok: Tokenizer):
    rng = np.random.default_rng([cfg.seed, 1, identity])
    out = []
    for _ in range(cfg.samples_per_identity):
        img = render(attributes, cfg, rng)
        cap = tok.encode(make_caption(attributes, cfg, rng))
        out.append(Sample(identity, img, cap, split, tuple(int(a) for a in attributes)))
    return out


def generate(cfg: GenerationConfig, jobs: int = 1) -> Dataset:
    """Generate a dataset; a pure function of ``cfg`` whatever ``jobs`` is."""
    attrs = _attribute_table(cfg)
    vocab = build_vocabulary(cfg.K, cfg.palette_size)
    tok = Tokenizer(vocab)
    splits = ["train"] * cfg.n_train + ["val"] * cfg.n_val + ["test"] * cfg.n_test
    work = [(i, attrs[i], splits[i], cfg, tok) for i in range(cfg.n_identities)]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            chunks = list(pool.map(lambda w: _identity_samples(*w), work))
    else:
        chunks = [_identity_samples(*w) for w in work]
    manifest = DatasetManifest(
        version=FORMAT_VERSION,
        seed=cfg.seed,
        counts={"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test},
        vocabulary=vocab,
        K=cfg.K,
        image_height=cfg.image_height,
        image_width=cfg.image_width,
        samples_per_identity=cfg.samples_per_identity,
        noise_level=float(cfg.noise_level),
        palette_size=cfg.palette_size,
    )
    return Dataset(manifest, [s for chunk in chunks for s in chunk])


# --------------------------------------------------------------------- file format


def _encode_image(img: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(img, dtype="<f4").tobytes()).decode("ascii")


def _decode_image(text: str, shape) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"image has {arr.size} values, expected {int(np.prod(shape))}")
    return arr.reshape(shape).astype(np.float32)


def _frame(record: dict) -> str:
    body = json.dumps(record, separators=(",", ":"), sort_keys=True)
    return f"{zlib.crc32(body.encode()):08x} {body}"


def _sample_lines(ds: Dataset):
    for s in ds.samples:
        yield _frame(
            {
                "identity": int(s.identity),
                "split": s.split,
                "caption": [int(t) for t in s.caption],
                "attributes": [int(a) for a in s.attributes],
                "image": _encode_image(s.image),
            }
        )


def _manifest_items(m: DatasetManifest, sha: str) -> dict:
    return {
        "format_version": m.version,
        "seed": m.seed,
        "K": m.K,
        "image_height": m.image_height,
        "image_width": m.image_width,
        "samples_per_identity": m.samples_per_identity,
        "noise_level": repr(float(m.noise_level)),
        "palette_size": m.palette_size,
        "identities_train": m.counts["train"],
        "identities_val": m.counts["val"],
        "identities_test": m.counts["test"],
        "vocabulary": " ".join(m.vocabulary),
        "samples_sha256": sha,
    }


def save(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = _frame({"type": "header", "version": ds.manifest.version, "seed": ds.manifest.seed})
    lines = list(_sample_lines(ds))
    (path / SAMPLES_NAME).write_text("\n".join([header] + lines) + "\n", encoding="utf-8")
    items = _manifest_items(ds.manifest, ds.fingerprint())
    (path / MANIFEST_NAME).write_text(format_kv(items, "vgsg synthetic dataset manifest"), encoding="utf-8")
    return path


def _read_manifest(path: Path) -> tuple[DatasetManifest, str]:
    try:
        kv = read_kv(path / MANIFEST_NAME)
    except OSError as e:
        raise IngestionError(f"cannot read manifest: {e}") from e
    except KVParseError as e:
        raise IngestionError(str(e)) from e
    try:
        version = int(kv["format_version"])
        if version != FORMAT_VERSION:
            raise IngestionError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
        m = DatasetManifest(
            version=version,
            seed=int(kv["seed"]),
            counts={s: int(kv[f"identities_{s}"]) for s in SPLITS},
            vocabulary=kv["vocabulary"].split(),
            K=int(kv["K"]),
            image_height=int(kv["image_height"]),
            image_width=int(kv["image_width"]),
            samples_per_identity=int(kv["samples_per_identity"]),
            noise_level=float(kv["noise_level"]),
            palette_size=int(kv["palette_size"]),
        )
        return m, kv["samples_sha256"]
    except KeyError as e:
        raise IngestionError(f"manifest is missing key {e.args[0]!r}") from e
    except ValueError as e:
        if isinstance(e, IngestionError):
            raise
        raise IngestionError(f"bad manifest value: {e}") from e


def _parse_line(line: str, lineno: int, source: str) -> dict:
    crc, _, body = line.partition(" ")
    try:
        ok = int(crc, 16) == zlib.crc32(body.encode())
    except ValueError:
        ok = False
    if not ok:
        raise IngestionError(f"{source}:{lineno}: checksum failure")
    try:
        return json.loads(body)
    except json.JSONDecodeError as e:
        raise IngestionError(f"{source}:{lineno}: malformed record ({e})") from e


def load(path) -> Dataset:
    path = Path(path)
    manifest, sha = _read_manifest(path)
    source = str(path / SAMPLES_NAME)
    try:
        text = (path / SAMPLES_NAME).read_text(encoding="utf-8")
    except OSError as e:
        raise IngestionError(f"cannot read samples: {e}") from e
    lines = text.splitlines()
    if not lines:
        raise IngestionError(f"{source}: empty file")
    header = _parse_line(lines[0], 1, source)
    if header.get("type") != "header":
        raise IngestionError(f"{source}:1: first record must be the header")
    if header.get("version") != FORMAT_VERSION:
        raise IngestionError(f"{source}:1: unsupported format version {header.get('version')}")
    if header.get("seed") != manifest.seed:
        raise IntegrityError(f"manifest seed {manifest.seed} does not match payload seed {header.get('seed')}")
    shape = (3, manifest.image_height, manifest.image_width)
    samples = []
    digest = hashlib.sha256()
    for lineno, line in enumerate(lines[1:], start=2):
        rec = _parse_line(line, lineno, source)
        try:
            if rec["split"] not in SPLITS:
                raise ValueError(f"unknown split {rec['split']!r}")
            samples.append(
                Sample(
                    int(rec["identity"]),
                    _decode_image(rec["image"], shape),
                    [int(t) for t in rec["caption"]],
                    rec["split"],
                    tuple(int(a) for a in rec.get("attributes", ())),
                )
            )
        except (KeyError, ValueError, TypeError) as e:
            raise IngestionError(f"{source}:{lineno}: bad record ({e})") from e
        digest.update(line.encode())
        digest.update(b"\n")
    if digest.hexdigest() != sha:
        raise IntegrityError("samples checksum does not match the manifest")
    ds = Dataset(manifest, samples)
    ds._cache["sha"] = sha
    return ds


# --------------------------------------------------------------------- sampling


@dataclass
class Batch:
    images: np.ndarray  # (B, 3, H0, W0)
    captions: list  # B token-id lists
    identities: np.ndarray  # (B,) dataset identity ids
    sample_index: np.ndarray  # (B,) positions in the split


def _take(split: SplitArrays, ids, P: int, rng: np.random.Generator) -> Batch:
    rows = []
    for i in ids:
        pool = np.flatnonzero(split.identities == i)
        rows.append(rng.choice(pool, size=P, replace=len(pool) < P))
    rows = np.concatenate(rows)
    return Batch(split.images[rows], [split.captions[r] for r in rows], split.identities[rows], rows)


def _check_pk(B: int, P: int, n_ids: int) -> int:
    if P < 1 or B % P:
        raise SamplingError(f"batch size {B} is not a multiple of per-identity count {P}")
    n = B // P
    if n < 2:
        raise SamplingError("a batch needs at least 2 identities so every anchor has a negative")
    if n_ids < n:
        raise SamplingError(f"need {n} identities per batch, only {n_ids} available")
    return n


def sample_batch(ds: Dataset, rng: np.random.Generator, B: int, P: int, split: str = "train") -> Batch:
    """B/P distinct identities with P image-caption pairs each."""
    arrays = ds.split(split)
    ids = np.unique(arrays.identities)
    n = _check_pk(B, P, len(ids))
    return _take(arrays, rng.choice(ids, size=n, replace=False), P, rng)


def iterate_epoch(ds: Dataset, rng: np.random.Generator, B: int, P: int, split: str = "train"):
    """Shuffle identities and yield full PK batches (the remainder is dropped)."""
    arrays = ds.split(split)
    ids = np.unique(arrays.identities)
    n = _check_pk(B, P, len(ids))
    order = rng.permutation(ids)
    for start in range(0, len(order) - n + 1, n):
        yield _take(arrays, order[start : start + n], P, rng)


def steps_per_epoch(ds: Dataset, B: int, P: int, split: str = "train") -> int:
    return len(ds.identities(split)) // (B // P)
