"""Photo and sketch embedding networks with soft attention, plus the
domain-classifier MLP and semantic decoder heads.

Each encoder is a stack of conv blocks (conv3x3 -> relu -> conv3x3 -> relu
-> maxpool2), an optional attention block on the final feature map, global
average pooling, and a linear projection to the embedding dimension. The
attention block computes a one-channel sigmoid mask from two 1x1 convs and
returns ``f + f * att``.

Parameters live in a flat registry keyed by stable dotted names; the
checkpoint format serialises them sorted by name (magic "DRCK").
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class CheckpointError(ValueError):
    """Checkpoint file is malformed or has an unsupported version."""


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 64
    channels: tuple[int, ...] = (16, 32, 64)
    embedding_dim: int = 256
    attention_enabled: bool = True
    share_weights: bool = False
    photo_channels: int = 3
    sketch_channels: int = 1

    def __post_init__(self):
        if self.embedding_dim < 1:
            raise ValueError(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        if not self.channels:
            raise ValueError("channels must be non-empty")
        if self.input_size % (2 ** len(self.channels)) != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2^{len(self.channels)}"
            )
        if self.share_weights and self.photo_channels != self.sketch_channels:
            raise ValueError("share_weights requires equal photo and sketch channel counts")

    def encoder_prefixes(self) -> tuple[str, str]:
        """(photo prefix, sketch prefix); identical when weights are shared."""
        if self.share_weights:
            return "enc", "enc"
        return "photo", "sketch"


@dataclass(frozen=True)
class HeadConfig:
    domain_hidden: tuple[int, int] = (128, 64)
    semantic_hidden: tuple[int, int] = (256, 256)
    semantic_dim: int = 300

    def __post_init__(self):
        if len(self.domain_hidden) != 2 or len(self.semantic_hidden) != 2:
            raise ValueError("head configs take exactly two hidden widths")
        if self.semantic_dim < 1:
            raise ValueError(f"semantic_dim must be >= 1, got {self.semantic_dim}")


class ModelParams:
    """Registry of named parameter tensors; iteration order is sorted by name."""

    def __init__(self, tensors: dict[str, Tensor]):
        if len(set(tensors)) != len(tensors):
            raise ValueError("duplicate parameter names")
        self._params = dict(sorted(tensors.items()))

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def count(self) -> int:
        return int(np.sum([t.size for t in self._params.values()]))

    def clone(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data, requires_grad=True, dtype=v.dtype) for k, v in self.items()})


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _attention_mid(c: int) -> int:
    return max(c // 2, 1)


def init_model(enc_cfg: EncoderConfig, head_cfg: HeadConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Seeded He-uniform initialisation; biases start at zero.

    Draw order is fixed by construction, so a given seed always yields the
    same parameters regardless of registry iteration.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}

    def param(name, arr):
        tensors[name] = Tensor(arr, requires_grad=True, dtype=dtype)

    def conv(name, cin, cout, k):
        param(f"{name}.w", _he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype))
        param(f"{name}.b", np.zeros(cout, dtype=dtype))

    def linear(name, nin, nout):
        param(f"{name}.w", _he_uniform(rng, (nin, nout), nin, dtype))
        param(f"{name}.b", np.zeros(nout, dtype=dtype))

    pfx_photo, pfx_sketch = enc_cfg.encoder_prefixes()
    stacks = [(pfx_photo, enc_cfg.photo_channels)]
    if pfx_sketch != pfx_photo:
        stacks.append((pfx_sketch, enc_cfg.sketch_channels))
    for pfx, in_ch in stacks:
        cin = in_ch
        for i, cout in enumerate(enc_cfg.channels):
            conv(f"{pfx}.block{i}.conv1", cin, cout, 3)
            conv(f"{pfx}.block{i}.conv2", cout, cout, 3)
            cin = cout
        if enc_cfg.attention_enabled:
            mid = _attention_mid(cin)
            conv(f"{pfx}.attn.conv1", cin, mid, 1)
            conv(f"{pfx}.attn.conv2", mid, 1, 1)
        linear(f"{pfx}.embed", cin, enc_cfg.embedding_dim)

    d = enc_cfg.embedding_dim
    h1, h2 = head_cfg.domain_hidden
    linear("domain.fc1", d, h1)
    linear("domain.fc2", h1, h2)
    linear("domain.fc3", h2, 1)
    g1, g2 = head_cfg.semantic_hidden
    linear("semantic.fc1", d, g1)
    linear("semantic.fc2", g1, g2)
    linear("semantic.fc3", g2, head_cfg.semantic_dim)
    return ModelParams(tensors)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def attention_mask(params: ModelParams, prefix: str, feature_map: Tensor) -> Tensor:
    """One-channel mask in (0, 1): 1x1 conv -> relu -> 1x1 conv -> sigmoid."""
    h = ad.relu(ad.conv2d(feature_map, params[f"{prefix}.attn.conv1.w"], params[f"{prefix}.attn.conv1.b"]))
    return ad.sigmoid(ad.conv2d(h, params[f"{prefix}.attn.conv2.w"], params[f"{prefix}.attn.conv2.b"]))


def attention_apply(feature_map: Tensor, mask: Tensor) -> Tensor:
    """Residual soft attention: f + f * att, mask broadcast over channels."""
    return ad.add(feature_map, ad.scale_channels(feature_map, mask))


def attention_block(params: ModelParams, prefix: str, feature_map: Tensor) -> Tensor:
    return attention_apply(feature_map, attention_mask(params, prefix, feature_map))


def _encode(params: ModelParams, cfg: EncoderConfig, images, prefix: str, in_channels: int) -> Tensor:
    x = ad.as_tensor(images)
    single = x.data.ndim == 3
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    if x.data.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) images, got {x.shape}")
    n, c, h, w = x.shape
    if c != in_channels or h != cfg.input_size or w != cfg.input_size:
        raise ShapeError(
            f"expected images of shape (*, {in_channels}, {cfg.input_size}, {cfg.input_size}), got {x.shape}"
        )
    f = x
    for i in range(len(cfg.channels)):
        f = ad.relu(ad.conv2d(f, params[f"{prefix}.block{i}.conv1.w"], params[f"{prefix}.block{i}.conv1.b"]))
        f = ad.relu(ad.conv2d(f, params[f"{prefix}.block{i}.conv2.w"], params[f"{prefix}.block{i}.conv2.b"]))
        f = ad.maxpool2(f)
    if cfg.attention_enabled:
        f = attention_block(params, prefix, f)
    pooled = ad.mean(f, axis=(2, 3))
    emb = ad.add(ad.matmul(pooled, params[f"{prefix}.embed.w"]), params[f"{prefix}.embed.b"])
    if single:
        emb = ad.reshape(emb, (cfg.embedding_dim,))
    return emb


def embed_photo(params: ModelParams, cfg: EncoderConfig, images) -> Tensor:
    """Embed photos; (C, H, W) -> (D,) or (N, C, H, W) -> (N, D)."""
    prefix, _ = cfg.encoder_prefixes()
    return _encode(params, cfg, images, prefix, cfg.photo_channels)


def embed_sketch(params: ModelParams, cfg: EncoderConfig, images) -> Tensor:
    """Embed sketches; (C, H, W) -> (D,) or (N, C, H, W) -> (N, D)."""
    _, prefix = cfg.encoder_prefixes()
    return _encode(params, cfg, images, prefix, cfg.sketch_channels)


def _mlp3(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.fc1.w"]), params[f"{prefix}.fc1.b"]))
    h = ad.relu(ad.add(ad.matmul(h, params[f"{prefix}.fc2.w"]), params[f"{prefix}.fc2.b"]))
    return ad.add(ad.matmul(h, params[f"{prefix}.fc3.w"]), params[f"{prefix}.fc3.b"])


def _as_batch(e: Tensor) -> tuple[Tensor, bool]:
    e = ad.as_tensor(e)
    if e.data.ndim == 1:
        return ad.reshape(e, (1, e.shape[0])), True
    return e, False


def domain_logits(params: ModelParams, e, lambda_d: float) -> Tensor:
    """Raw classifier logits over embeddings routed through the GRL."""
    batch, single = _as_batch(e)
    z = _mlp3(params, "domain", ad.grl(batch, lambda_d))
    return ad.reshape(z, ()) if single else ad.reshape(z, (z.shape[0],))


def domain_classify(params: ModelParams, e, lambda_d: float) -> Tensor:
    """Probability that the embedding came from a photo."""
    return ad.sigmoid(domain_logits(params, e, lambda_d))


def semantic_decode(params: ModelParams, e) -> Tensor:
    """Reconstruct the class word vector from an embedding."""
    batch, single = _as_batch(e)
    out = _mlp3(params, "semantic", batch)
    return ad.reshape(out, (out.shape[1],)) if single else out


# ---------------------------------------------------------------------------
# Checkpoint format: magic "DRCK", u32 version, count-prefixed named tensors
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DRCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ModelParams) -> None:
    """Write parameters sorted by name; payload is little-endian f32."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, t in params.items():
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.shape) if t.data.ndim else b"")
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> ModelParams:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 12
    tensors: dict[str, Tensor] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset : offset + nlen].decode("utf-8")
            offset += nlen
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            data = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(dims)
            offset += 4 * n
            if name in tensors:
                raise CheckpointError(f"{path}: duplicate parameter {name}")
            tensors[name] = Tensor(data.astype(np.float32), requires_grad=True)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return ModelParams(tensors)


def write_config_text(path, mapping: dict) -> None:
    """Human-readable key=value block, keys sorted."""
    lines = [f"{k}={mapping[k]}" for k in sorted(mapping)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_config_text(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out
