"""Synthetic planted-highlight windows, frozen embedding providers, and file formats.

Each streamer owns a unit highlight direction.  A window's latent intensity
``z`` follows a reflected random walk with occasional transient spikes; the
visual vector of segment ``i`` is ``alpha * z_i * h_u`` plus per-segment
content, the text vector is a fixed linear image of the visual vector ``k``
segments earlier, and the CTR is a sigmoid of ``z``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DATA_MAGIC = b"CCTR-DATA1"
DATA_VERSION = 1
_HEADER = struct.Struct("<IIIIQ")
_SAMPLE_HEADER = struct.Struct("<Ii")

# SeedSequence spawn keys, so that independent streams never collide
_TAG_STREAMERS, _TAG_TEXTMAP, _TAG_SPLIT, _TAG_WINDOW = 11, 12, 13, 14
_TAG_VISUAL_PROVIDER, _TAG_TEXT_PROVIDER = 21, 22


class DataFormatError(ValueError):
    """A dataset file is malformed, truncated or holds non-finite values."""


@dataclass
class GeneratorConfig:
    n_streamers: int = 8
    windows_per_streamer: int = 250
    n: int = 8
    d_v: int = 16
    d_t: int = 16
    directions_per_streamer: int = 1
    alpha: float = 1.0
    visual_noise: float = 0.1
    text_noise: float = 0.0
    lag_min: int = 0
    lag_max: int = 0
    label_noise: float = 0.0
    beta: float = 4.0
    ctr_bias: float = -3.0
    walk_scale: float = 0.15
    spike_prob: float = 0.15
    spike_scale: float = 0.8
    test_fraction: float = 0.2
    embed_dim_visual: int = 16
    embed_dim_text: int = 16
    provider_seed: int = 1234
    min_exposure: float = 0.0  # inert: there is no exposure count to filter on

    def __post_init__(self):
        errors = []
        for name in ("n_streamers", "windows_per_streamer", "d_v", "d_t",
                     "directions_per_streamer", "embed_dim_visual", "embed_dim_text"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        if self.n < 2:
            errors.append("n must be >= 2")
        if self.lag_min > self.lag_max:
            errors.append("lag_min must be <= lag_max")
        if max(abs(self.lag_min), abs(self.lag_max)) >= self.n:
            errors.append("|lag| must be < n")
        for name in ("visual_noise", "text_noise", "label_noise", "walk_scale", "spike_scale"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be >= 0")
        if not 0 <= self.spike_prob <= 1:
            errors.append("spike_prob must lie in [0, 1]")
        if not 0 <= self.test_fraction < 1:
            errors.append("test_fraction must lie in [0, 1)")
        if errors:
            raise ValueError("invalid generator config: " + "; ".join(errors))

    @classmethod
    def from_dict(cls, doc: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"invalid generator config: unknown fields {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SampleWindow:
    streamer_id: int
    visual: np.ndarray   # n x d_v, float32 values
    text: np.ndarray     # n x d_t
    ctr: np.ndarray      # n
    lag: int = 0
    seed: int | None = None
    latent: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return len(self.ctr)

    @property
    def segments(self) -> list[dict]:
        return [{"visual": v, "text": t, "ctr": c} for v, t, c in zip(self.visual, self.text, self.ctr)]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<Ii", self.streamer_id, self.lag))
        for arr in (self.visual, self.text, self.ctr):
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()

    def equals(self, other: "SampleWindow") -> bool:
        return (
            self.streamer_id == other.streamer_id
            and self.lag == other.lag
            and np.array_equal(self.visual, other.visual)
            and np.array_equal(self.text, other.text)
            and np.array_equal(self.ctr, other.ctr)
        )


# -- generation ---------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def streamer_directions(config: GeneratorConfig, seed: int) -> np.ndarray:
    """``n_streamers x directions x d_v`` unit highlight directions."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_STREAMERS]))
    h = rng.normal(size=(config.n_streamers, config.directions_per_streamer, config.d_v))
    return h / np.linalg.norm(h, axis=-1, keepdims=True)


def text_map(config: GeneratorConfig, seed: int) -> np.ndarray:
    """Fixed ``d_t x d_v`` map from visual to text content.

    Orthonormal columns when ``d_t >= d_v``, so cosines between visual vectors
    survive the map.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_TEXTMAP]))
    g = rng.normal(size=(max(config.d_t, config.d_v), max(config.d_t, config.d_v)))
    q, _ = np.linalg.qr(g)
    return q[: config.d_t, : config.d_v]


def _reflect(x: float) -> float:
    # fold onto [0, 1]; clipping would create exact label ties at the edges
    x = abs(x) % 2.0
    return 2.0 - x if x > 1.0 else x


def latent_intensity(config: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    """Reflected random walk on [0, 1] with transient spikes toward 1."""
    z = np.empty(config.n)
    state = rng.uniform(0.1, 0.9)
    for i in range(config.n):
        if i:
            state = _reflect(state + rng.normal(0.0, config.walk_scale))
        z[i] = state
        if rng.random() < config.spike_prob:
            z[i] = state + (1.0 - state) * config.spike_scale * rng.uniform(0.5, 1.0)
    return z


def shift_sequence(x: np.ndarray, k: int) -> np.ndarray:
    """``out[i] = x[clip(i - k)]`` along axis 0 (edge replication)."""
    n = x.shape[0]
    if abs(k) >= n:
        raise ValueError(f"|k| must be < n={n}, got {k}")
    idx = np.clip(np.arange(n) - k, 0, n - 1)
    return x[idx]


def generate_window(config: GeneratorConfig, seed: int, index: int, streamer_id: int,
                    directions: np.ndarray, tmap: np.ndarray) -> SampleWindow:
    ss = np.random.SeedSequence([seed, _TAG_WINDOW, index])
    rng = np.random.default_rng(ss)
    z = latent_intensity(config, rng)
    h = directions[streamer_id, rng.integers(config.directions_per_streamer)]
    content = rng.normal(0.0, config.visual_noise / np.sqrt(config.d_v), size=(config.n, config.d_v))
    visual = config.alpha * z[:, None] * h[None, :] + content
    text = visual @ tmap.T + rng.normal(0.0, config.text_noise / np.sqrt(config.d_t), size=(config.n, config.d_t))
    lag = int(rng.integers(config.lag_min, config.lag_max + 1))
    text = shift_sequence(text, lag)
    logit = config.beta * z + config.ctr_bias + config.label_noise * rng.normal(size=config.n)
    ctr = np.clip(_sigmoid(logit), 0.0, 1.0)
    return SampleWindow(
        streamer_id=streamer_id,
        visual=visual.astype(np.float32),
        text=text.astype(np.float32),
        ctr=ctr.astype(np.float32),
        lag=lag,
        seed=int(ss.generate_state(1)[0]),
        latent=z,
    )


def generate_windows(config: GeneratorConfig, seed: int) -> list[SampleWindow]:
    """All windows, streamer-major; window ``i`` draws from its own seed stream."""
    directions = streamer_directions(config, seed)
    tmap = text_map(config, seed)
    out = []
    index = 0
    for u in range(config.n_streamers):
        for _ in range(config.windows_per_streamer):
            out.append(generate_window(config, seed, index, u, directions, tmap))
            index += 1
    return out


def split_indices(total: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_SPLIT]))
    perm = rng.permutation(total)
    n_test = int(round(total * test_fraction))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def generate_dataset(config: GeneratorConfig, seed: int) -> tuple[list[SampleWindow], list[SampleWindow]]:
    """Train/test windows, split by window."""
    windows = generate_windows(config, seed)
    train_idx, test_idx = split_indices(len(windows), config.test_fraction, seed)
    return [windows[i] for i in train_idx], [windows[i] for i in test_idx]


def inject_misalignment(window: SampleWindow, k: int) -> SampleWindow:
    """Delay the text channel by ``k`` segments (edge replication)."""
    if abs(k) >= window.n:
        raise ValueError(f"|k| must be < n={window.n}, got {k}")
    return replace(window, text=shift_sequence(window.text, k), lag=window.lag + k)


# -- embedding providers -------------------------------------------------

class EmbeddingProvider:
    """Frozen random feature map ``tanh(W x + b)`` standing in for a pretrained encoder."""

    def __init__(self, kind: str, in_dim: int, out_dim: int, seed: int):
        if kind not in ("visual", "text"):
            raise ValueError(f"kind must be 'visual' or 'text', got {kind!r}")
        tag = _TAG_VISUAL_PROVIDER if kind == "visual" else _TAG_TEXT_PROVIDER
        rng = np.random.default_rng(np.random.SeedSequence([seed, tag]))
        self.kind = kind
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(out_dim, in_dim)) * 2.0
        self.bias = rng.normal(0.0, 0.1, size=out_dim)

    def __call__(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[-1] != self.in_dim:
            raise ValueError(f"{self.kind} provider expects width {self.in_dim}, got {raw.shape[-1]}")
        return np.tanh(raw @ self.weight.T + self.bias)

    def pooled(self, frames) -> np.ndarray:
        """Mean of the embeddings of several frames (axis -2) per segment."""
        return self(frames).mean(axis=-2)

    def lipschitz_bound(self) -> float:
        return float(np.linalg.norm(self.weight, 2))


def providers_for(config: GeneratorConfig) -> tuple[EmbeddingProvider, EmbeddingProvider]:
    return (
        EmbeddingProvider("visual", config.d_v, config.embed_dim_visual, config.provider_seed),
        EmbeddingProvider("text", config.d_t, config.embed_dim_text, config.provider_seed),
    )


@dataclass
class WindowBatch:
    """Stacked, embedded windows ready for the model."""

    visual: np.ndarray     # N x n x embed_dim_visual
    text: np.ndarray       # N x n x embed_dim_text
    ctr: np.ndarray        # N x n
    streamer: np.ndarray   # N

    def __len__(self) -> int:
        return len(self.ctr)

    def subset(self, idx) -> "WindowBatch":
        return WindowBatch(self.visual[idx], self.text[idx], self.ctr[idx], self.streamer[idx])


def embed_windows(windows: Sequence[SampleWindow], visual_provider: EmbeddingProvider,
                  text_provider: EmbeddingProvider) -> WindowBatch:
    visual = np.stack([w.visual for w in windows]).astype(np.float64)
    text = np.stack([w.text for w in windows]).astype(np.float64)
    return WindowBatch(
        visual=visual_provider(visual),
        text=text_provider(text),
        ctr=np.stack([w.ctr for w in windows]).astype(np.float64),
        streamer=np.array([w.streamer_id for w in windows], dtype=np.int64),
    )


# -- serialization -------------------------------------------------------

def _check_finite(w: SampleWindow) -> None:
    for arr in (w.visual, w.text, w.ctr):
        if not np.all(np.isfinite(arr)):
            raise DataFormatError(f"non-finite value in window of streamer {w.streamer_id}")


def _f32_list(arr) -> list[float]:
    return [float(x) for x in np.asarray(arr, dtype=np.float32).reshape(-1)]


def write_jsonl(windows: Iterable[SampleWindow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for w in windows:
            _check_finite(w)
            doc = {
                "streamer_id": int(w.streamer_id),
                "lag": int(w.lag),
                "segments": [
                    {"visual": _f32_list(v), "text": _f32_list(t), "ctr": float(np.float32(c))}
                    for v, t, c in zip(w.visual, w.text, w.ctr)
                ],
            }
            fh.write(json.dumps(doc, separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[SampleWindow]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                segs = doc["segments"]
                w = SampleWindow(
                    streamer_id=int(doc["streamer_id"]),
                    visual=np.array([s["visual"] for s in segs], dtype=np.float32),
                    text=np.array([s["text"] for s in segs], dtype=np.float32),
                    ctr=np.array([s["ctr"] for s in segs], dtype=np.float32),
                    lag=int(doc.get("lag", 0)),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}:{lineno}: malformed sample ({exc})") from None
            _check_finite(w)
            out.append(w)
    return out


def write_binary(windows: Sequence[SampleWindow], path) -> None:
    windows = list(windows)
    if windows:
        n, d_v = windows[0].visual.shape
        d_t = windows[0].text.shape[1]
    else:
        n = d_v = d_t = 0
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(_HEADER.pack(DATA_VERSION, n, d_v, d_t, len(windows)))
        for w in windows:
            _check_finite(w)
            if w.visual.shape != (n, d_v) or w.text.shape != (n, d_t):
                raise DataFormatError("all windows in a binary file must share n, d_v and d_t")
            fh.write(_SAMPLE_HEADER.pack(int(w.streamer_id), int(w.lag)))
            payload = np.concatenate(
                [np.asarray(w.visual, "<f4"), np.asarray(w.text, "<f4"), np.asarray(w.ctr, "<f4")[:, None]], axis=1
            )
            fh.write(payload.tobytes())


def read_binary(path) -> list[SampleWindow]:
    raw = Path(path).read_bytes()
    if raw[: len(DATA_MAGIC)] != DATA_MAGIC:
        raise DataFormatError(f"{path}: bad magic")
    off = len(DATA_MAGIC)
    if len(raw) < off + _HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    version, n, d_v, d_t, count = _HEADER.unpack_from(raw, off)
    if version != DATA_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    off += _HEADER.size
    width = d_v + d_t + 1
    per_sample = _SAMPLE_HEADER.size + 4 * n * width
    if len(raw) != off + per_sample * count:
        raise DataFormatError(f"{path}: payload size does not match {count} samples")
    out = []
    for _ in range(count):
        sid, lag = _SAMPLE_HEADER.unpack_from(raw, off)
        off += _SAMPLE_HEADER.size
        block = np.frombuffer(raw, dtype="<f4", count=n * width, offset=off).reshape(n, width)
        off += 4 * n * width
        w = SampleWindow(
            streamer_id=sid,
            visual=block[:, :d_v].astype(np.float32),
            text=block[:, d_v: d_v + d_t].astype(np.float32),
            ctr=block[:, -1].astype(np.float32),
            lag=lag,
        )
        _check_finite(w)
        out.append(w)
    return out


def save_windows(windows, path, fmt: str | None = None) -> None:
    fmt = fmt or ("binary" if str(path).endswith(".bin") else "jsonl")
    if fmt == "jsonl":
        write_jsonl(windows, path)
    elif fmt == "binary":
        write_binary(windows, path)
    else:
        raise ValueError(f"unknown format {fmt!r}")


def load_windows(path, fmt: str | None = None) -> list[SampleWindow]:
    fmt = fmt or ("binary" if str(path).endswith(".bin") else "jsonl")
    if fmt == "jsonl":
        return read_jsonl(path)
    if fmt == "binary":
        return read_binary(path)
    raise ValueError(f"unknown format {fmt!r}")


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_dataset(config: GeneratorConfig, seed: int, out_dir, fmt: str = "jsonl") -> dict:
    """Generate, split and write train/test files plus ``manifest.json``; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = generate_dataset(config, seed)
    ext = "jsonl" if fmt == "jsonl" else "bin"
    files = {"train": f"train.{ext}", "test": f"test.{ext}"}
    save_windows(train, out_dir / files["train"], fmt)
    save_windows(test, out_dir / files["test"], fmt)
    manifest = {
        "seed": int(seed),
        "format": fmt,
        "generator": config.to_dict(),
        "counts": {"train": len(train), "test": len(test)},
        "files": files,
        "sha256": {k: file_sha256(out_dir / v) for k, v in files.items()},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_dataset(data_dir) -> tuple[dict, list[SampleWindow], list[SampleWindow]]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    fmt = manifest["format"]
    train = load_windows(data_dir / manifest["files"]["train"], fmt)
    test = load_windows(data_dir / manifest["files"]["test"], fmt)
    return manifest, train, test
