"""Frame-level CTR network: feature fusion, Perceiver blocks, masked decoder, sigmoid head."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


@dataclass
class ModelConfig:
    n: int = 8
    d: int = 16
    d_h: int = 8
    n_h: int = 2
    L_perceiver: int = 1
    L_decoder: int = 1
    mask_mode: str = "causal"
    ffn_hidden: int = 32
    use_positional: bool = True
    d_visual: int = 16
    d_text: int = 16
    n_streamers: int = 8
    proj_layers: int = 1
    prenorm: bool = False
    use_visual: bool = True
    use_text: bool = True
    use_streamer: bool = True
    init_seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"n must be >= 2, got {self.n}")
        for name in ("d", "d_h", "n_h", "L_perceiver", "L_decoder", "ffn_hidden",
                     "d_visual", "d_text", "n_streamers", "proj_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.mask_mode not in ("causal", "full"):
            raise ValueError(f"mask_mode must be 'causal' or 'full', got {self.mask_mode!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


class ModelOutput(NamedTuple):
    s: Tensor        # b x n predicted CTR
    S_p: Tensor      # b x n x d projected visual sequence
    S_a: Tensor      # b x n x d projected text sequence


def attention_mask(n: int, mode: str = "causal") -> np.ndarray:
    """Additive n x n mask: 0 where attention is allowed, -inf elsewhere."""
    if mode == "full":
        return np.zeros((n, n))
    if mode != "causal":
        raise ValueError(f"unknown mask mode {mode!r}")
    return np.triu(np.full((n, n), -np.inf), k=1)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    mu = ad.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = ad.mean(xc * xc, axis=-1, keepdims=True)
    return xc / ad.sqrt(var + eps)


def _init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.init_seed)
    p: dict[str, np.ndarray] = {}

    def dense(name, fan_in, fan_out, gain=1.0, bias=True):
        p[f"{name}.weight"] = rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out))
        if bias:
            p[f"{name}.bias"] = np.zeros(fan_out)

    for key, d_in in (("proj_visual", cfg.d_visual), ("proj_text", cfg.d_text)):
        for k in range(cfg.proj_layers):
            dense(f"{key}.{k}", d_in if k == 0 else cfg.d, cfg.d)
    # last row is the fallback for unknown streamer ids
    p["streamer_table"] = rng.normal(0.0, 1.0, size=(cfg.n_streamers + 1, cfg.d))

    hd = cfg.n_h * cfg.d_h
    for block, count in (("perceiver", cfg.L_perceiver), ("decoder", cfg.L_decoder)):
        for layer in range(count):
            pre = f"{block}.{layer}"
            for w in ("wq", "wk", "wv"):
                dense(f"{pre}.attn.{w}", cfg.d, hd, bias=False)
            dense(f"{pre}.attn.wo", hd, cfg.d, gain=0.5, bias=False)
            dense(f"{pre}.ffn.1", cfg.d, cfg.ffn_hidden)
            dense(f"{pre}.ffn.2", cfg.ffn_hidden, cfg.d, gain=0.5)
    if cfg.use_positional:
        p["decoder.pos"] = rng.normal(0.0, 0.1, size=(cfg.n, cfg.d))
    dense("head", cfg.d, 1)
    return p


class ContentCTR:
    """Parameters plus forward pass.  Parameters live in ``self.params``."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        init = _init_params(config)
        if params is not None:
            missing = set(init) - set(params)
            extra = set(params) - set(init)
            if missing or extra:
                raise DimensionError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
            for name, arr in params.items():
                if np.shape(arr) != init[name].shape:
                    raise DimensionError(f"parameter {name}: shape {np.shape(arr)} != expected {init[name].shape}")
            init = {k: np.asarray(params[k], dtype=np.float64) for k in init}
        self.params: dict[str, Tensor] = {k: ad.parameter(v, name=k) for k, v in init.items()}

    # ------------------------------------------------------------------
    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            t.data = np.asarray(arrays[k], dtype=np.float64)

    def with_params(self, replacements: dict[str, Tensor]) -> "ContentCTR":
        """Shallow copy whose named parameters are swapped for ``replacements``."""
        other = copy.copy(self)
        other.params = dict(self.params)
        other.params.update(replacements)
        return other

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    # ------------------------------------------------------------------
    def _dense(self, x: Tensor, name: str) -> Tensor:
        out = x @ self.params[f"{name}.weight"]
        bias = self.params.get(f"{name}.bias")
        return out if bias is None else out + bias

    def _project(self, x, key: str) -> Tensor:
        for k in range(self.config.proj_layers):
            if k:
                x = ad.gelu(x)
            x = self._dense(x, f"{key}.{k}")
        return x

    def fuse_features(self, visual, text) -> tuple[Tensor, Tensor, Tensor]:
        """Project both modalities to width d; returns (E_f, S_p, S_a).

        E_f has shape b x n x 2 x d with the visual token in slot 0.
        """
        cfg = self.config
        visual, text = ad.constant(visual), ad.constant(text)
        if visual.ndim != 3 or visual.shape[-1] != cfg.d_visual:
            raise DimensionError(f"visual embeddings must be b x n x {cfg.d_visual}, got {visual.shape}")
        if text.ndim != 3 or text.shape[-1] != cfg.d_text:
            raise DimensionError(f"text embeddings must be b x n x {cfg.d_text}, got {text.shape}")
        if visual.shape[:2] != text.shape[:2]:
            raise DimensionError(f"visual {visual.shape} and text {text.shape} disagree on b x n")
        S_p = self._project(visual, "proj_visual")
        S_a = self._project(text, "proj_text")
        b, n = visual.shape[:2]
        E_f = ad.concat([S_p.reshape(b, n, 1, cfg.d), S_a.reshape(b, n, 1, cfg.d)], axis=2)
        return E_f, S_p, S_a

    def streamer_embedding(self, streamer_ids) -> Tensor:
        cfg = self.config
        ids = np.asarray(streamer_ids, dtype=np.int64).reshape(-1)
        fallback = cfg.n_streamers
        if cfg.use_streamer:
            ids = np.where((ids >= 0) & (ids < cfg.n_streamers), ids, fallback)
        else:
            ids = np.full_like(ids, fallback)
        return ad.take(self.params["streamer_table"], ids, axis=0)

    def _attention(self, q_in: Tensor, kv_in: Tensor, pre: str, mask=None) -> Tensor:
        cfg = self.config
        h, dh = cfg.n_h, cfg.d_h
        B, Tq, _ = q_in.shape
        Tk = kv_in.shape[1]
        q = (q_in @ self.params[f"{pre}.wq.weight"]).reshape(B, Tq, h, dh).transpose(0, 2, 1, 3)
        k = (kv_in @ self.params[f"{pre}.wk.weight"]).reshape(B, Tk, h, dh).transpose(0, 2, 3, 1)
        v = (kv_in @ self.params[f"{pre}.wv.weight"]).reshape(B, Tk, h, dh).transpose(0, 2, 1, 3)
        scores = ad.scale(q @ k, 1.0 / np.sqrt(dh))
        if mask is not None:
            scores = scores + mask
        weights = ad.softmax(scores, axis=-1)
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(B, Tq, h * dh)
        return out @ self.params[f"{pre}.wo.weight"]

    def _ffn(self, x: Tensor, pre: str) -> Tensor:
        return self._dense(ad.gelu(self._dense(x, f"{pre}.1")), f"{pre}.2")

    def _norm(self, x: Tensor) -> Tensor:
        return layer_norm(x) if self.config.prenorm else x

    def perceiver_forward(self, E_f: Tensor, E_u: Tensor) -> Tensor:
        """Latent query from the streamer embedding attends to its own timestamp's tokens.

        Each (batch, timestamp) cell is processed independently: b*n cells with
        key/value tokens [visual, text, query].
        """
        cfg = self.config
        b, n = E_f.shape[:2]
        d = cfg.d
        tokens = []
        if cfg.use_visual:
            tokens.append(E_f[:, :, 0:1, :])
        if cfg.use_text:
            tokens.append(E_f[:, :, 1:2, :])
        x = ad.broadcast_to(E_u.reshape(b, 1, d), (b, n, d)).reshape(b * n, 1, d)
        x_f = ad.concat(tokens, axis=2).reshape(b * n, len(tokens), d) if tokens else None
        for layer in range(cfg.L_perceiver):
            pre = f"perceiver.{layer}"
            kv = ad.concat([x_f, x], axis=1) if x_f is not None else x
            x = x + self._attention(self._norm(x), self._norm(kv), f"{pre}.attn")
            x = x + self._ffn(self._norm(x), f"{pre}.ffn")
        return x.reshape(b, n, d)

    def decoder_forward(self, E_p: Tensor, mask_mode: str | None = None) -> Tensor:
        cfg = self.config
        n = E_p.shape[1]
        mask = attention_mask(n, mask_mode or cfg.mask_mode)
        x = E_p
        if cfg.use_positional:
            if n != cfg.n:
                raise DimensionError(f"positional table is for n={cfg.n}, got sequences of length {n}")
            x = x + self.params["decoder.pos"]
        for layer in range(cfg.L_decoder):
            pre = f"decoder.{layer}"
            xn = self._norm(x)
            x = x + self._attention(xn, xn, f"{pre}.attn", mask)
            x = x + self._ffn(self._norm(x), f"{pre}.ffn")
        return x

    def predict(self, H: Tensor) -> Tensor:
        b, n, _ = H.shape
        return ad.sigmoid(self._dense(H, "head").reshape(b, n))

    def forward(self, visual, text, streamer_ids, mask_mode: str | None = None) -> ModelOutput:
        E_f, S_p, S_a = self.fuse_features(visual, text)
        E_u = self.streamer_embedding(streamer_ids)
        E_p = self.perceiver_forward(E_f, E_u)
        H = self.decoder_forward(E_p, mask_mode)
        return ModelOutput(self.predict(H), S_p, S_a)

    __call__ = forward
