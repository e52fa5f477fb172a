"""Vision Transformer classifier.

Patch embedding, a learnable class token plus position table, a stack of
pre-norm encoder blocks (multi-head self-attention + GELU MLP), a final
layer norm, and a linear head over the class-token representation.

Parameter naming scheme (dotted paths, consumed by `weights`):

    patch_embed.weight        [patch_dim, embed_dim]
    patch_embed.bias          [embed_dim]
    cls_token                 [embed_dim]
    pos_embed                 [num_patches + 1, embed_dim]
    blocks.{i}.norm1.weight   [embed_dim]
    blocks.{i}.norm1.bias     [embed_dim]
    blocks.{i}.attn.q.weight  [embed_dim, embed_dim]   (same for k, v, proj)
    blocks.{i}.attn.q.bias    [embed_dim]
    blocks.{i}.norm2.weight   [embed_dim]
    blocks.{i}.norm2.bias     [embed_dim]
    blocks.{i}.mlp.fc1.weight [embed_dim, hidden_dim]
    blocks.{i}.mlp.fc1.bias   [hidden_dim]
    blocks.{i}.mlp.fc2.weight [hidden_dim, embed_dim]
    blocks.{i}.mlp.fc2.bias   [embed_dim]
    norm.weight               [embed_dim]
    norm.bias                 [embed_dim]
    head.weight               [embed_dim, num_classes]
    head.bias                 [num_classes]

Dropout (train mode only) is applied after the position embedding is
added, after the attention output projection, and after each MLP linear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .imgio import bilinear_resize
from .tensor import Tensor

CHANNELS = 3
LAYERNORM_EPS = 1e-6


@dataclass(frozen=True)
class ViTConfig:
    """Model hyperparameters; `hidden_dim = mlp_ratio * embed_dim`."""

    image_size: int = 64
    patch_size: int = 16
    embed_dim: int = 192
    num_heads: int = 3
    num_layers: int = 6
    mlp_ratio: float = 4.0
    dropout_p: float = 0.0
    num_classes: int = 10

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError(f"image_size/patch_size must be positive, got {self.image_size}/{self.patch_size}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim <= 0 or self.num_heads <= 0 or self.num_layers <= 0:
            raise ConfigError("embed_dim, num_heads and num_layers must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.mlp_ratio <= 0 or int(self.mlp_ratio * self.embed_dim) <= 0:
            raise ConfigError(f"mlp_ratio {self.mlp_ratio} yields an empty MLP hidden layer")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.num_classes <= 0:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return CHANNELS * self.patch_size * self.patch_size

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return int(self.mlp_ratio * self.embed_dim)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def tiny_test(cls, dropout_p: float = 0.0) -> "ViTConfig":
        """The small configuration used by gradient checks and fast tests."""
        return cls(image_size=16, patch_size=8, embed_dim=32, num_heads=2,
                   num_layers=2, mlp_ratio=4.0, dropout_p=dropout_p, num_classes=10)

    @classmethod
    def base16(cls, image_size: int = 224, num_classes: int = 10, dropout_p: float = 0.0) -> "ViTConfig":
        """ViT-Base/16 dimensions, the usual shape of public pretrained checkpoints."""
        return cls(image_size=image_size, patch_size=16, embed_dim=768, num_heads=12,
                   num_layers=12, mlp_ratio=4.0, dropout_p=dropout_p, num_classes=num_classes)


def param_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; the single source of truth for the layout."""
    d, hid = config.embed_dim, config.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (config.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (config.seq_len, d),
    }
    for i in range(config.num_layers):
        p = f"blocks.{i}"
        shapes[f"{p}.norm1.weight"] = (d,)
        shapes[f"{p}.norm1.bias"] = (d,)
        for proj in ("q", "k", "v", "proj"):
            shapes[f"{p}.attn.{proj}.weight"] = (d, d)
            shapes[f"{p}.attn.{proj}.bias"] = (d,)
        shapes[f"{p}.norm2.weight"] = (d,)
        shapes[f"{p}.norm2.bias"] = (d,)
        shapes[f"{p}.mlp.fc1.weight"] = (d, hid)
        shapes[f"{p}.mlp.fc1.bias"] = (hid,)
        shapes[f"{p}.mlp.fc2.weight"] = (hid, d)
        shapes[f"{p}.mlp.fc2.bias"] = (d,)
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    shapes["head.weight"] = (d, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


@dataclass
class ViTModel:
    config: ViTConfig
    params: dict[str, Tensor] = field(repr=False)

    @property
    def dtype(self):
        return self.params["cls_token"].dtype

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def trainable(self) -> dict[str, Tensor]:
        return {name: p for name, p in self.params.items() if p.requires_grad}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.params.items()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, values in snapshot.items():
            np.copyto(self.params[name].values, values)


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) redrawn until every sample lies within +-2 std."""
    if std == 0.0:
        return np.zeros(shape, dtype=dtype)
    out = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out.astype(dtype)


def init_model(config: ViTConfig, seed: int = 0, dtype=np.float32, init_std: float = 0.02) -> ViTModel:
    """Fresh model: truncated-normal projection weights and position table,
    zero biases, zero class token, unit layer-norm scales.  Deterministic
    under `seed`."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "cls_token" or leaf == "bias":
            values = np.zeros(shape, dtype=dtype)
        elif "norm" in name and leaf == "weight":
            values = np.ones(shape, dtype=dtype)
        else:  # projection weights and pos_embed
            values = truncated_normal(rng, shape, init_std, dtype)
        params[name] = Tensor(values, requires_grad=True)
    return ViTModel(config=config, params=params)


def patchify(images, patch_size: int) -> Tensor:
    """Split [C,H,W] (or [B,C,H,W]) into flattened non-overlapping patches.

    Patches are enumerated in raster-scan order (top-left first, row-major)
    and each row is the patch flattened channel-major, giving [N, C*P*P]
    (or [B, N, C*P*P]) with N = (H/P) * (W/P).
    """
    x = T.as_tensor(images)
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1, *x.shape))
    if x.ndim != 4:
        raise ShapeError(f"patchify expects [C,H,W] or [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise ShapeError(f"image size {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = T.reshape(x, (b, c, gh, patch_size, gw, patch_size))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))  # [B, gh, gw, C, P, P]
    x = T.reshape(x, (b, gh * gw, c * patch_size * patch_size))
    return T.reshape(x, x.shape[1:]) if squeeze else x


def attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """Scaled dot-product attention over [B, heads, T, head_dim] tensors."""
    if not (q.shape == k.shape == v.shape) or q.ndim != 4:
        raise ShapeError(f"attention expects matching 4-d q/k/v, got {q.shape}, {k.shape}, {v.shape}")
    head_dim = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


def _linear(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{prefix}.weight"]), params[f"{prefix}.bias"])


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, t, d = x.shape
    x = T.reshape(x, (b, t, num_heads, d // num_heads))
    return T.transpose(x, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, hd = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * hd))


def forward(model: ViTModel, batch, mode: str = "eval",
            rng: np.random.Generator | None = None,
            dropout_p: float | None = None) -> Tensor:
    """Run the classifier on a [B, 3, H, W] batch, returning [B, num_classes] logits.

    `mode` is "train" or "eval"; dropout fires only in train mode.
    `dropout_p` overrides the config value (the training recipe owns it).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = model.config
    x = T.as_tensor(batch)
    if x.ndim != 4 or x.shape[1] != CHANNELS:
        raise ShapeError(f"expected batch [B, {CHANNELS}, H, W], got {x.shape}")
    if x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise ShapeError(
            f"spatial size {x.shape[2]}x{x.shape[3]} does not match configured "
            f"input {cfg.image_size}x{cfg.image_size}; resize inputs first"
        )
    if x.dtype != model.dtype:
        x = Tensor(x.values.astype(model.dtype), requires_grad=x.requires_grad)
    train = mode == "train"
    p = cfg.dropout_p if dropout_p is None else dropout_p
    if train and p > 0.0 and rng is None:
        raise ValueError("train-mode forward with dropout_p > 0 requires an rng")

    params = model.params
    batch_size = x.shape[0]

    tokens = _linear(patchify(x, cfg.patch_size), params, "patch_embed")  # [B, N, D]
    cls = T.add(Tensor(np.zeros((batch_size, 1, cfg.embed_dim), dtype=model.dtype)),
                T.reshape(params["cls_token"], (1, 1, cfg.embed_dim)))
    x = T.concat([cls, tokens], axis=1)                                   # [B, N+1, D]
    x = T.add(x, params["pos_embed"])
    x = T.dropout(x, p, train, rng)

    for i in range(cfg.num_layers):
        blk = f"blocks.{i}"
        h = T.layernorm(x, params[f"{blk}.norm1.weight"], params[f"{blk}.norm1.bias"], LAYERNORM_EPS)
        q = _split_heads(_linear(h, params, f"{blk}.attn.q"), cfg.num_heads)
        k = _split_heads(_linear(h, params, f"{blk}.attn.k"), cfg.num_heads)
        v = _split_heads(_linear(h, params, f"{blk}.attn.v"), cfg.num_heads)
        attn = _merge_heads(attention(q, k, v))
        attn = T.dropout(_linear(attn, params, f"{blk}.attn.proj"), p, train, rng)
        x = T.add(x, attn)

        h = T.layernorm(x, params[f"{blk}.norm2.weight"], params[f"{blk}.norm2.bias"], LAYERNORM_EPS)
        h = T.dropout(T.gelu(_linear(h, params, f"{blk}.mlp.fc1")), p, train, rng)
        h = T.dropout(_linear(h, params, f"{blk}.mlp.fc2"), p, train, rng)
        x = T.add(x, h)

    x = T.layernorm(x, params["norm.weight"], params["norm.bias"], LAYERNORM_EPS)
    cls_repr = x[:, 0, :]                                                 # [B, D]
    return _linear(cls_repr, params, "head")


def predict(model: ViTModel, batch) -> np.ndarray:
    """Eval-mode class predictions (argmax; ties resolved to the lowest index)."""
    with T.no_grad():
        logits = forward(model, batch, mode="eval")
    return np.argmax(logits.values, axis=1)


def interpolate_pos_embed(pos: np.ndarray, old_grid: int, new_grid: int) -> np.ndarray:
    """Adapt a position table to a new patch-grid resolution.

    The class-token row is copied; the patch rows are reshaped to the 2-d
    grid and bilinearly resampled.  Used when importing a checkpoint
    trained at a different input resolution.
    """
    expected = old_grid * old_grid + 1
    if pos.shape[0] != expected:
        raise ShapeError(f"position table has {pos.shape[0]} rows, expected {expected} for grid {old_grid}")
    if new_grid == old_grid:
        return pos.copy()
    d = pos.shape[1]
    cls_row = pos[:1]
    grid = pos[1:].reshape(old_grid, old_grid, d)
    resized = bilinear_resize(grid.astype(np.float64), (new_grid, new_grid))
    resized = resized.reshape(new_grid * new_grid, d).astype(pos.dtype)
    return np.concatenate([cls_row, resized], axis=0)
