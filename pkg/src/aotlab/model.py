"""Full network: patch embedding with coordinate encodings, temporal
aggregation, adaptive multi-stream blocks, gated readout, de-patch head.

Input windows are (B, T_in, H, W, C) and the output is the predicted next
frame (B, H, W, C).  Each of the N blocks applies two wrapped sub-layers in
order: the Fourier token mixer, then a pointwise channel MLP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import (
    AotSubLayer,
    ChannelMLP,
    Linear,
    MixerSubLayer,
    default_groups,
    lift,
    readout,
)
from .errors import NumericOverflowError, ShapeError


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class ModelConfig:
    height: int = 32
    width: int = 32
    channels: int = 2
    t_in: int = 10
    patch: int = 8
    d_z: int = 64
    heads: int = 4
    modes: int = 2
    blocks: int = 4
    streams: int = 4
    sinkhorn_iters: int = 20
    gate_init: float = 0.01
    groups: int | None = None
    activation: str = "gelu"

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ShapeError(f"grid ({self.height}, {self.width}) not divisible "
                             f"by patch {self.patch}")
        if not (_is_pow2(self.height // self.patch) and _is_pow2(self.width // self.patch)):
            raise ShapeError("token grid extents must be powers of two")
        if self.d_z % self.heads:
            raise ShapeError(f"d_z {self.d_z} not divisible by heads {self.heads}")

    @property
    def token_h(self) -> int:
        return self.height // self.patch

    @property
    def token_w(self) -> int:
        return self.width // self.patch

    def norm_groups(self) -> int:
        return self.groups if self.groups is not None else default_groups(self.d_z)


TRANSFORM_MODES = ("vanilla", "learned", "frozen")


class LinearTransformPair:
    """Pointwise channel transforms wrapping the whole network (W_out o G o
    W_in).  ``vanilla`` leaves the model untouched; ``learned`` trains the
    transforms; ``frozen`` applies them but suppresses their gradients."""

    def __init__(self, w_in: Tensor, b_in: Tensor, w_out: Tensor, b_out: Tensor,
                 mode: str = "vanilla"):
        if mode not in TRANSFORM_MODES:
            raise ValueError(f"unknown transform mode {mode!r}; options: {TRANSFORM_MODES}")
        self.w_in, self.b_in = w_in, b_in
        self.w_out, self.b_out = w_out, b_out
        self.mode = mode

    @classmethod
    def init(cls, channels: int, mode: str = "vanilla", dtype=np.float64):
        trainable = mode == "learned"
        return cls(
            Tensor(np.eye(channels, dtype=dtype), requires_grad=trainable),
            Tensor(np.zeros(channels, dtype=dtype), requires_grad=trainable),
            Tensor(np.eye(channels, dtype=dtype), requires_grad=trainable),
            Tensor(np.zeros(channels, dtype=dtype), requires_grad=trainable),
            mode,
        )

    @property
    def active(self) -> bool:
        return self.mode != "vanilla"

    def set_mode(self, mode: str) -> None:
        if mode not in TRANSFORM_MODES:
            raise ValueError(f"unknown transform mode {mode!r}")
        self.mode = mode
        trainable = mode == "learned"
        for t in (self.w_in, self.b_in, self.w_out, self.b_out):
            t.requires_grad = trainable

    def param_count(self) -> int:
        return sum(t.size for t in (self.w_in, self.b_in, self.w_out, self.b_out))

    def named(self, prefix: str) -> dict:
        return {
            f"{prefix}.w_in": self.w_in, f"{prefix}.b_in": self.b_in,
            f"{prefix}.w_out": self.w_out, f"{prefix}.b_out": self.b_out,
        }


def apply_linear_transform(u: Tensor, pair: LinearTransformPair, side: str) -> Tensor:
    """Affine map over the channel (last) axis at every grid node."""
    if side not in ("in", "out"):
        raise ValueError(f"side must be 'in' or 'out', got {side!r}")
    w, b = (pair.w_in, pair.b_in) if side == "in" else (pair.w_out, pair.b_out)
    shape = u.shape
    flat = ad.reshape(u, (-1, shape[-1]))
    return ad.reshape(ad.matmul(flat, w) + b, shape)


def temporal_aggregate(tokens: Tensor, t_mlp, gamma: Tensor) -> Tensor:
    """Weighted frame sum: Re(sum_t mlp(z^t) e^{-i gamma t}).

    The MLP and tokens are real, so the imaginary part of the exponential
    drops after taking the real part and the weight reduces to cos(gamma t).
    ``t`` is the integer frame index 0..T_in-1.
    """
    b, t, c, hp, wp = tokens.shape
    y = t_mlp.forward(ad.reshape(tokens, (b * t, c, hp, wp)))
    y = ad.reshape(y, (b, t, c, hp, wp))
    tvec = Tensor(np.arange(t, dtype=gamma.data.dtype).reshape(t, 1))
    phase = ad.cos(tvec * ad.reshape(gamma, (1, c)))
    return ad.tsum(y * ad.reshape(phase, (1, t, c, 1, 1)), axis=1)


class _IdentityModule:
    """Pass-through stand-in for the temporal MLP in hand-check tests."""

    def forward(self, x: Tensor) -> Tensor:
        return x

    def named(self, prefix: str) -> dict:
        return {}


class Model:
    """The assembled operator network.

    ``transform`` is the pointwise channel pair used by the basis-change
    experiments; in vanilla mode it is bypassed entirely.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64,
                 transform_mode: str = "vanilla"):
        self.cfg = cfg
        self.dtype = dtype
        c, dz, p = cfg.channels, cfg.d_z, cfg.patch

        self.w_p = Tensor(np.zeros((c, 3), dtype=dtype), requires_grad=True)
        self.patch = Linear.init(p * p * c, dz, rng, dtype)
        self.t_mlp = ChannelMLP.init(dz, rng, dtype)
        self.gamma = Tensor(np.zeros(dz, dtype=dtype), requires_grad=True)

        self.block_sublayers: list[AotSubLayer] = []
        for _ in range(cfg.blocks):
            mix = MixerSubLayer.init(dz, cfg.heads, cfg.modes, rng, dtype, cfg.activation)
            self.block_sublayers.append(AotSubLayer.init(
                mix, cfg.streams, dz, rng, dtype, cfg.gate_init, cfg.sinkhorn_iters,
                cfg.norm_groups()))
            mlp = ChannelMLP.init(dz, rng, dtype)
            self.block_sublayers.append(AotSubLayer.init(
                mlp, cfg.streams, dz, rng, dtype, cfg.gate_init, cfg.sinkhorn_iters,
                cfg.norm_groups()))

        self.w_readout = Tensor(np.zeros(cfg.streams, dtype=dtype), requires_grad=True)
        self.head = Linear.init(dz, p * p * c, rng, dtype)
        self.transform = LinearTransformPair.init(c, transform_mode, dtype)
        self._coord_cache: dict[int, np.ndarray] = {}

    # -- plumbing ------------------------------------------------------
    def named_tensors(self) -> dict:
        out = {"w_p": self.w_p, "gamma": self.gamma, "readout.w": self.w_readout}
        out.update(self.patch.named("patch"))
        out.update(self.t_mlp.named("t_mlp"))
        for i, sub in enumerate(self.block_sublayers):
            kind = "mix" if i % 2 == 0 else "mlp"
            out.update(sub.named(f"blocks.{i // 2}.{kind}"))
        out.update(self.head.named("head"))
        out.update(self.transform.named("transform"))
        return out

    def trainable_tensors(self) -> dict:
        return {k: t for k, t in self.named_tensors().items() if t.requires_grad}

    def astype(self, dtype) -> "Model":
        """Cast every parameter in place; forward passes follow the new dtype."""
        self.dtype = dtype
        for t in self.named_tensors().values():
            t.data = t.data.astype(dtype)
        self._coord_cache.clear()
        return self

    def param_count(self) -> int:
        return sum(t.size for t in self.named_tensors().values())

    def aot_param_count(self) -> int:
        """Parameters of the adaptive maps plus the readout logits."""
        total = self.w_readout.size
        for sub in self.block_sublayers:
            total += sum(t.size for t in sub.params.named("x").values())
        return total

    def _coords(self, t_in: int) -> np.ndarray:
        cached = self._coord_cache.get(t_in)
        if cached is not None:
            return cached
        h, w = self.cfg.height, self.cfg.width
        xs = np.arange(h) / (h - 1) if h > 1 else np.zeros(1)
        ys = np.arange(w) / (w - 1) if w > 1 else np.zeros(1)
        grid = np.empty((t_in, h, w, 3))
        grid[..., 0] = xs[None, :, None]
        grid[..., 1] = ys[None, None, :]
        grid[..., 2] = np.arange(t_in, dtype=float)[:, None, None]
        flat = grid.reshape(-1, 3).astype(self.dtype)
        self._coord_cache[t_in] = flat
        return flat

    # -- stages --------------------------------------------------------
    def embed(self, u: Tensor) -> Tensor:
        """(B, T, H, W, C) window -> (B, T, d_z, H', W') token stack."""
        cfg = self.cfg
        if u.ndim != 5 or u.shape[2:] != (cfg.height, cfg.width, cfg.channels):
            raise ShapeError(f"window shape {u.shape} does not match config grid "
                             f"({cfg.height}, {cfg.width}, {cfg.channels})")
        b, t = u.shape[0], u.shape[1]
        pos = ad.matmul(Tensor(self._coords(t)), ad.transpose(self.w_p, (1, 0)))
        u = u + ad.reshape(pos, (1, t, cfg.height, cfg.width, cfg.channels))

        p, hp, wp = cfg.patch, cfg.token_h, cfg.token_w
        x = ad.reshape(u, (b * t, hp, p, wp, p, cfg.channels))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        x = ad.reshape(x, (b * t * hp * wp, p * p * cfg.channels))
        x = self.patch(x)
        x = ad.transpose(ad.reshape(x, (b * t, hp, wp, cfg.d_z)), (0, 3, 1, 2))
        return ad.reshape(x, (b, t, cfg.d_z, hp, wp))

    def depatch(self, z: Tensor) -> Tensor:
        """(B, d_z, H', W') tokens -> (B, H, W, C) field."""
        cfg = self.cfg
        b, _, hp, wp = z.shape
        x = ad.reshape(ad.transpose(z, (0, 2, 3, 1)), (b * hp * wp, cfg.d_z))
        x = self.head(x)
        x = ad.reshape(x, (b, hp, wp, cfg.patch, cfg.patch, cfg.channels))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        return ad.reshape(x, (b, cfg.height, cfg.width, cfg.channels))

    def forward(self, u: Tensor, strict_identity: bool = False,
                collect_maps: list | None = None) -> Tensor:
        """Predict the next frame from a (B, T_in, H, W, C) window."""
        u = ad.as_tensor(u)
        if u.ndim == 4:
            u = ad.reshape(u, (1,) + u.shape)
        if u.shape[1] != self.cfg.t_in:
            raise ShapeError(f"window has {u.shape[1]} frames, config wants {self.cfg.t_in}")
        if self.transform.active:
            u = apply_linear_transform(u, self.transform, "in")
        z = self.embed(u)
        z = temporal_aggregate(z, self.t_mlp, self.gamma)
        self._check_finite(z, "embed/temporal")
        state = lift(z, self.cfg.streams)
        for i, sub in enumerate(self.block_sublayers):
            state, maps = sub.forward(state, strict_identity=strict_identity)
            if collect_maps is not None:
                collect_maps.append(maps)
            self._check_finite(state, f"block {i // 2} sublayer {i % 2}")
        out = readout(state, self.w_readout)
        out = self.depatch(out)
        if self.transform.active:
            out = apply_linear_transform(out, self.transform, "out")
        self._check_finite(out, "head")
        return out

    def reference_forward(self, u: Tensor) -> Tensor:
        """Single-stream residual network sharing this model's weights;
        comparison target for the strict-identity mode."""
        u = ad.as_tensor(u)
        if u.ndim == 4:
            u = ad.reshape(u, (1,) + u.shape)
        if self.transform.active:
            u = apply_linear_transform(u, self.transform, "in")
        z = self.embed(u)
        z = temporal_aggregate(z, self.t_mlp, self.gamma)
        for sub in self.block_sublayers:
            z = sub.reference_forward(z)
        out = self.depatch(z)
        if self.transform.active:
            out = apply_linear_transform(out, self.transform, "out")
        return out

    @staticmethod
    def _check_finite(t: Tensor, where: str) -> None:
        if not np.all(np.isfinite(t.data)):
            raise NumericOverflowError(f"non-finite activations at {where}", where=where)
