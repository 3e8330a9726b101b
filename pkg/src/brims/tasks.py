"""Task generators and data ingestion: the adding task and scan-line digit sequences."""

from __future__ import annotations

import gzip
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
LABEL_MAGIC = 0x00000801
IMAGE_MAGIC = 0x00000803
MAX_IDX_ELEMENTS = 1 << 34


class IdxFormatError(ValueError):
    pass


@dataclass
class AddingSample:
    values: np.ndarray
    markers: np.ndarray
    target: float


@dataclass
class ImageSample:
    pixels: np.ndarray  # (H, W, C) in [0, 1]
    label: int


@dataclass
class SequenceBatch:
    inputs: np.ndarray   # (T, B, F)
    targets: np.ndarray  # (B,) reals or class indices
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.ndim != 3 or self.targets.shape[0] != self.inputs.shape[1]:
            raise ValueError(f"inputs {self.inputs.shape} and targets {self.targets.shape} disagree on batch size")
        if "T" in self.meta and self.meta["T"] != self.inputs.shape[0]:
            raise ValueError(f"meta T={self.meta['T']} but inputs have {self.inputs.shape[0]} steps")

    def __len__(self) -> int:
        return self.inputs.shape[1]

    def take(self, idx) -> "SequenceBatch":
        return SequenceBatch(self.inputs[:, idx], self.targets[idx], dict(self.meta))


# --------------------------------------------------------------------------
# adding task


def gen_adding(T: int, k: int, batch: int, seed: int, values: np.ndarray | None = None) -> SequenceBatch:
    """Adding-task batch with three input streams (value, marker 1, marker 2).

    For ``k == 2`` the first marker stream flags the earlier summand and the
    second the later one. For any other ``k`` both marker streams carry all
    ``k`` flags, keeping the input arity of the two-summand layout.
    """
    if k < 1 or T < 1 or batch < 1:
        raise ValueError("T, k and batch must be positive")
    if k > T:
        raise ValueError(f"cannot mark {k} summands in a length-{T} sequence")
    rng = np.random.default_rng(seed)
    vals = rng.random((batch, T)) if values is None else np.asarray(values, dtype=np.float64).reshape(batch, T)
    x = np.zeros((T, batch, 3))
    targets = np.zeros(batch)
    for b in range(batch):
        pos = np.sort(rng.choice(T, size=k, replace=False))
        x[:, b, 0] = vals[b]
        if k == 2:
            x[pos[0], b, 1] = 1.0
            x[pos[1], b, 2] = 1.0
        else:
            x[pos, b, 1] = 1.0
            x[pos, b, 2] = 1.0
        targets[b] = vals[b, pos].sum()
    return SequenceBatch(x, targets, {"task": "adding", "T": T, "k": k, "seed": seed})


def adding_samples(batch: SequenceBatch) -> list[AddingSample]:
    x = batch.inputs
    markers = ((x[:, :, 1] + x[:, :, 2]) > 0).astype(np.int64)
    return [AddingSample(x[:, b, 0].copy(), markers[:, b].copy(), float(batch.targets[b])) for b in range(x.shape[1])]


def predict_mean_baseline_mse(k: int) -> float:
    """MSE of always predicting ``k/2`` when summing ``k`` uniform [0, 1) values: ``k/12``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    return k / 12.0


# reported in the literature next to learned models; not derivable from k/12
REPORTED_RANDOM_PREDICTION = {2: 0.500, 3: 1.000, 4: 1.333, 5: 2.500, 10: 9.161}


def write_adding_ndjson(batch: SequenceBatch, path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in adding_samples(batch):
            fh.write(json.dumps({"values": s.values.tolist(), "markers": s.markers.tolist(), "target": s.target}) + "\n")


def read_adding_ndjson(path: str | Path) -> list[AddingSample]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(AddingSample(np.array(d["values"]), np.array(d["markers"], dtype=np.int64), d["target"]))
    return out


# --------------------------------------------------------------------------
# IDX files


def _open(path: str | Path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an IDX byte string into an array of its stored dtype."""
    if len(raw) < 4:
        raise IdxFormatError("file shorter than the 4-byte magic number")
    zero, code, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zero != 0 or code not in IDX_DTYPES or ndim == 0:
        raise IdxFormatError(f"bad magic number 0x{int.from_bytes(raw[:4], 'big'):08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"truncated header: need {header} bytes, have {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = math.prod(dims)
    if count > MAX_IDX_ELEMENTS:
        raise IdxFormatError(f"dimensions {dims} overflow the element limit")
    dtype = IDX_DTYPES[code]
    need = count * dtype.itemsize
    have = len(raw) - header
    if have < need:
        raise IdxFormatError(f"truncated payload: dimensions {dims} need {need} bytes, found {have}")
    if have > need:
        raise IdxFormatError(f"{have - need} trailing bytes after payload")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def load_idx(path: str | Path, scale: bool = True) -> np.ndarray:
    """Load an IDX file (optionally gzipped).

    Label files (magic ``0x00000801``) come back as ``int64``; unsigned-byte
    files with more than one dimension are pixel data and are scaled to
    ``[0, 1]`` unless ``scale`` is false.
    """
    with _open(path) as fh:
        raw = fh.read()
    arr = parse_idx(raw)
    magic = int.from_bytes(raw[:4], "big")
    if magic == LABEL_MAGIC:
        return arr.astype(np.int64)
    if arr.dtype == np.uint8 and arr.ndim > 1 and scale:
        return arr.astype(np.float64) / 255.0
    return arr


def write_idx(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    codes = {np.dtype(v).newbyteorder("="): k for k, v in IDX_DTYPES.items()}
    code = codes.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise IdxFormatError(f"dtype {arr.dtype} has no IDX code")
    body = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    body += arr.astype(IDX_DTYPES[code]).tobytes()
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(body)


def bundled_digits() -> tuple[Path, Path]:
    """Paths of the bundled 5000-image handwritten-digit IDX pair (28x28)."""
    base = resources.files("brims") / "data"
    return Path(str(base / "digits5k-images-idx3-ubyte.gz")), Path(str(base / "digits5k-labels-idx1-ubyte.gz"))


# --------------------------------------------------------------------------
# images


def _pixels(img) -> tuple[np.ndarray, int | None]:
    if isinstance(img, ImageSample):
        return img.pixels, img.label
    return np.asarray(img), None


def resample_nearest(img, res: tuple[int, int], batched: bool = False):
    """Nearest-neighbour resampling with ``src = floor(dst * S / S')`` on each axis.

    Accepts an :class:`ImageSample`, an ``(H, W[, C])`` array, or with
    ``batched=True`` an ``(N, H, W[, C])`` stack. Returns the same kind.
    """
    h2, w2 = res
    if h2 < 1 or w2 < 1:
        raise ValueError(f"target resolution must be positive, got {res}")
    pix, label = _pixels(img)
    hax = 1 if batched else 0
    h, w = pix.shape[hax], pix.shape[hax + 1]
    rows = (np.arange(h2) * h) // h2
    cols = (np.arange(w2) * w) // w2
    out = np.take(np.take(pix, rows, axis=hax), cols, axis=hax + 1)
    return ImageSample(out, label) if isinstance(img, ImageSample) else out


def scanline_sequence(img) -> np.ndarray:
    """Row-major ``(H*W, C)`` pixel sequence of an ``(H, W[, C])`` image."""
    pix, _ = _pixels(img)
    if pix.ndim == 2:
        pix = pix[:, :, None]
    h, w, c = pix.shape
    return pix.reshape(h * w, c).copy()


def scanline_batch(images: np.ndarray) -> np.ndarray:
    """``(N, H, W)`` or ``(N, H, W, C)`` images to ``(H*W, N, C)`` sequences."""
    if images.ndim == 3:
        images = images[..., None]
    n, h, w, c = images.shape
    return np.ascontiguousarray(images.reshape(n, h * w, c).transpose(1, 0, 2))


def corrupted_count(T: int, rho: float) -> int:
    # tolerate representation error such as 0.29 * 100 = 28.999...
    return int(math.floor(rho * T + 1e-9))


def corrupt_pixels(seq: np.ndarray, rho: float, seed: int) -> np.ndarray:
    """Replace ``floor(rho*T)`` positions by independent uniform [0, 1) values.

    ``seq`` is ``(T, F)`` or a batch ``(T, B, F)``; each batch element draws its
    own positions. The input is never modified.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"corruption fraction must lie in [0, 1], got {rho}")
    seq = np.asarray(seq, dtype=np.float64)
    out = seq.copy()
    n = corrupted_count(seq.shape[0], rho)
    if n == 0:
        return out
    rng = np.random.default_rng(seed)
    if seq.ndim == 2:
        pos = rng.choice(seq.shape[0], size=n, replace=False)
        out[pos] = rng.random((n, seq.shape[1]))
        return out
    for b in range(seq.shape[1]):
        pos = rng.choice(seq.shape[0], size=n, replace=False)
        out[pos, b] = rng.random((n, seq.shape[2]))
    return out


@dataclass
class DigitSplits:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def split_digits(images: np.ndarray, labels: np.ndarray, seed: int, n_test: int,
                 val_fraction: float = 0.1, n_train: int | None = None) -> DigitSplits:
    """Seeded test / train / validation split; validation is a fraction of the training pool."""
    if len(images) != len(labels):
        raise ValueError("image and label counts differ")
    perm = np.random.default_rng(seed).permutation(len(images))
    test, pool = perm[:n_test], perm[n_test:]
    if n_train is not None:
        pool = pool[: int(round(n_train / (1.0 - val_fraction)))]
    n_val = int(round(len(pool) * val_fraction))
    val, train = pool[:n_val], pool[n_val:]
    return DigitSplits(images[train], labels[train], images[val], labels[val], images[test], labels[test])


# --------------------------------------------------------------------------
# distribution shifts


@dataclass(frozen=True)
class Shift:
    """A test condition. ``None`` fields keep the training value."""

    length: int | None = None
    k: int | None = None
    res: tuple[int, int] | None = None
    rho: float | None = None

    @property
    def identity(self) -> bool:
        return self.length is None and self.k is None and self.res is None and self.rho is None

    def label(self) -> str:
        if self.identity:
            return "identity"
        parts = []
        if self.length is not None:
            parts.append(f"len={self.length}")
        if self.k is not None:
            parts.append(f"k={self.k}")
        if self.res is not None:
            parts.append(f"res={self.res[0]}x{self.res[1]}")
        if self.rho is not None:
            parts.append(f"rho={self.rho:g}")
        return ",".join(parts)

    @classmethod
    def parse(cls, spec: str) -> "Shift":
        spec = spec.strip()
        if spec in ("", "identity", "id", "none"):
            return cls()
        kw: dict = {}
        for part in spec.split(","):
            if "=" not in part:
                raise ValueError(f"malformed shift {part!r}; expected key=value")
            key, val = (s.strip() for s in part.split("=", 1))
            try:
                if key == "len":
                    kw["length"] = int(val)
                elif key == "k":
                    kw["k"] = int(val)
                elif key == "res":
                    h, _, w = val.partition("x")
                    kw["res"] = (int(h), int(w or h))
                elif key == "rho":
                    kw["rho"] = float(val)
                else:
                    raise ValueError(f"unknown shift key {key!r}")
            except ValueError as exc:
                raise ValueError(f"bad shift {part!r}: {exc}") from None
        return cls(**kw)


class IncompatibleShift(ValueError):
    pass


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256(json.dumps(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# --------------------------------------------------------------------------
# tasks used by the training loop


@dataclass
class AddingTask:
    length: int = 100
    k: int = 2
    train_size: int = 2000
    val_size: int = 500
    test_size: int = 1000
    seed: int = 0
    kind: str = field(default="regression", init=False)
    input_dim: int = field(default=3, init=False)
    output_dim: int = field(default=1, init=False)

    def __post_init__(self):
        self._train = gen_adding(self.length, self.k, self.train_size, _stable_seed("adding-train", self.seed))
        self._val = gen_adding(self.length, self.k, self.val_size, _stable_seed("adding-val", self.seed))

    def describe(self) -> dict:
        return {"task": "adding", "length": self.length, "k": self.k, "train_size": self.train_size,
                "val_size": self.val_size, "test_size": self.test_size, "seed": self.seed}

    def train_batches(self, epoch: int, batch_size: int, seed: int) -> Iterator[SequenceBatch]:
        order = np.random.default_rng([seed, epoch, 11]).permutation(self.train_size)
        for i in range(0, self.train_size, batch_size):
            yield self._train.take(order[i:i + batch_size])

    def validation(self) -> SequenceBatch:
        return self._val

    def train_set(self) -> SequenceBatch:
        return self._train

    def shifted(self, shift: Shift) -> SequenceBatch:
        if shift.identity:
            return self._val
        if shift.res is not None or shift.rho is not None:
            raise IncompatibleShift(f"adding task cannot apply shift {shift.label()}")
        length = shift.length or self.length
        k = shift.k or self.k
        return gen_adding(length, k, self.test_size, _stable_seed("adding-test", self.seed, length, k))


@dataclass
class DigitsTask:
    """Scan-line digit classification; images are resampled to ``resolution``."""

    resolution: int = 14
    n_train: int | None = None
    n_test: int = 1000
    val_fraction: float = 0.1
    seed: int = 0
    images_path: str | None = None
    labels_path: str | None = None
    kind: str = field(default="classification", init=False)
    input_dim: int = field(default=1, init=False)
    output_dim: int = field(default=10, init=False)

    def __post_init__(self):
        if self.images_path is None:
            img_p, lab_p = bundled_digits()
            self.images_path, self.labels_path = str(img_p), str(lab_p)
        images = load_idx(self.images_path)
        labels = load_idx(self.labels_path)
        self.output_dim = int(labels.max()) + 1
        self.splits = split_digits(images, labels, _stable_seed("digits", self.seed), self.n_test,
                                   self.val_fraction, self.n_train)
        r = (self.resolution, self.resolution)
        self._train_x = scanline_batch(resample_nearest(self.splits.train_x, r, batched=True))
        self._val = SequenceBatch(scanline_batch(resample_nearest(self.splits.val_x, r, batched=True)), self.splits.val_y,
                                  {"task": "digits", "T": self.resolution ** 2, "resolution": r})

    def describe(self) -> dict:
        return {"task": "digits", "resolution": self.resolution, "n_train": len(self.splits.train_y),
                "n_val": len(self.splits.val_y), "n_test": len(self.splits.test_y), "seed": self.seed,
                "images_path": str(self.images_path), "labels_path": str(self.labels_path)}

    def train_batches(self, epoch: int, batch_size: int, seed: int) -> Iterator[SequenceBatch]:
        n = self._train_x.shape[1]
        order = np.random.default_rng([seed, epoch, 13]).permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            yield SequenceBatch(self._train_x[:, idx], self.splits.train_y[idx])

    def validation(self) -> SequenceBatch:
        return self._val

    def train_set(self) -> SequenceBatch:
        return SequenceBatch(self._train_x, self.splits.train_y)

    def shifted(self, shift: Shift) -> SequenceBatch:
        if shift.identity:
            return self._val
        if shift.length is not None or shift.k is not None:
            raise IncompatibleShift(f"digit task cannot apply shift {shift.label()}")
        res = shift.res or (self.resolution, self.resolution)
        seq = scanline_batch(resample_nearest(self.splits.test_x, res, batched=True))
        rho = shift.rho or 0.0
        if rho:
            seq = corrupt_pixels(seq, rho, _stable_seed("corrupt", self.seed, rho, res))
        return SequenceBatch(seq, self.splits.test_y, {"task": "digits", "T": seq.shape[0], "resolution": res, "rho": rho})


def make_task(spec: dict):
    spec = dict(spec)
    name = spec.pop("task", None)
    if name == "adding":
        return AddingTask(**spec)
    if name == "digits":
        return DigitsTask(**spec)
    raise ValueError(f"unknown task {name!r}; expected 'adding' or 'digits'")
