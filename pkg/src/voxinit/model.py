"""A small UNETR-style hybrid: ViT encoder with tapped blocks, conv decoder.

Shapes, for input [N, C, H, W, D] and token patch P:

* encoder levels ``Z_i``: [N, E, H/P, W/P, D/P] (stored channels-first;
  :meth:`EncoderOutput.level_hwde` gives the (H/P, W/P, D/P, E) layout)
* decoder trunk: bottleneck at H/P, then three x2 upsamplings, each fused
  with one projected encoder level; the last fuses the full-res input stem
* heads: ``seg`` (J logits), ``rec`` (C channels), ``order.i`` (per tapped
  level, depth slots x B classes)

The up/down ladder assumes P = 8, so decoder resolutions are H/8, H/4, H/2, H.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from voxinit import initzoo, nn, ops
from voxinit.autodiff import Tensor

SEG_HEADS = ("seg",)
SSL_HEADS = ("rec", "order")


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 1
    dims: tuple[int, int, int] = (32, 32, 32)
    patch: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    taps: tuple[int, ...] = (1, 2, 3, 4)
    num_classes: int = 4
    feature_size: int = 4

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.taps = tuple(int(t) for t in self.taps)
        if self.patch != 8:
            raise ModelConfigError(f"decoder ladder is built for patch 8, got {self.patch}")
        if any(d % self.patch for d in self.dims):
            raise ModelConfigError(f"input dims {self.dims} are not divisible by patch {self.patch}")
        if self.embed_dim % self.heads:
            raise ModelConfigError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if len(self.taps) != 4 or sorted(self.taps) != list(self.taps) or self.taps[-1] > self.depth:
            raise ModelConfigError(f"need 4 increasing taps within depth {self.depth}, got {self.taps}")
        if self.num_classes < 2:
            raise ModelConfigError("num_classes must be >= 2")

    @property
    def m(self) -> int:
        return len(self.taps)

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(d // self.patch for d in self.dims)

    @property
    def tokens(self) -> int:
        return math.prod(self.grid)

    @property
    def n_subvolumes(self) -> int:
        """B = D / P_{d_m}: one sub-volume per bottleneck depth slot."""
        return self.dims[2] // self.patch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class EncoderOutput:
    levels: list[Tensor]  # m tensors [N, E, h, w, d]
    stem_input: Tensor = field(repr=False)

    def level_hwde(self, i: int) -> np.ndarray:
        return np.moveaxis(self.levels[i].data[0], 0, -1)

    def shapes(self) -> list[tuple[int, ...]]:
        return [self.level_hwde(i).shape for i in range(len(self.levels))]


def _seed_for(seed: int, name: str) -> int:
    return (int(seed) * 1_000_003 + zlib.crc32(name.encode())) % (2 ** 63)


class HybridSegModel:
    """Parameters live in ``self.params`` (name -> Tensor), ordered as created.

    ``heads`` picks the task heads to attach: ``("seg",)`` for segmentation,
    ``("rec", "order")`` for the self-supervised step.
    """

    def __init__(self, cfg: ModelConfig, heads=SEG_HEADS, init: initzoo.InitSpec | None = None,
                 seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.heads = tuple(heads)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.kinds: dict[str, str] = {}
        self._build()
        init_weights(self, init or initzoo.InitSpec("unetr_default"), seed)

    # -- construction ---------------------------------------------------
    def _add(self, name: str, shape, kind: str) -> None:
        self.params[name] = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True, name=name)
        self.kinds[name] = kind

    def _conv(self, name, cin, cout, k):
        self._add(f"{name}.weight", (cout, cin, k, k, k), "conv")
        self._add(f"{name}.bias", (cout,), "bias")

    def _up(self, name, cin, cout):
        self._add(f"{name}.weight", (cin, cout, 2, 2, 2), "convT")
        self._add(f"{name}.bias", (cout,), "bias")

    def _linear(self, name, n_in, n_out):
        self._add(f"{name}.weight", (n_in, n_out), "linear")
        self._add(f"{name}.bias", (n_out,), "bias")

    def _norm(self, name, n):
        self._add(f"{name}.gamma", (n,), "gamma")
        self._add(f"{name}.beta", (n,), "beta")

    def _build(self) -> None:
        c = self.cfg
        E, f = c.embed_dim, c.feature_size
        self._conv("encoder.patch_embed", c.in_channels, E, c.patch)
        self._add("encoder.pos_embed", (1, c.tokens, E), "pos")
        for b in range(c.depth):
            p = f"encoder.blocks.{b}"
            self._norm(f"{p}.ln1", E)
            self._linear(f"{p}.qkv", E, 3 * E)
            self._linear(f"{p}.proj", E, E)
            self._norm(f"{p}.ln2", E)
            self._linear(f"{p}.fc1", E, c.mlp_ratio * E)
            self._linear(f"{p}.fc2", c.mlp_ratio * E, E)
        self._conv("decoder.stem", c.in_channels, f, 3)
        self._up("decoder.skip1.up0", E, 2 * f)
        self._up("decoder.skip1.up1", 2 * f, 2 * f)
        self._up("decoder.skip2.up0", E, 4 * f)
        self._conv("decoder.skip3.proj", E, 4 * f, 1)
        self._conv("decoder.bottleneck.proj", E, 4 * f, 1)
        self._conv("decoder.fuse8", 8 * f, 4 * f, 3)
        self._up("decoder.up8", 4 * f, 4 * f)
        self._conv("decoder.fuse4", 8 * f, 2 * f, 3)
        self._up("decoder.up4", 2 * f, 2 * f)
        self._conv("decoder.fuse2", 4 * f, f, 3)
        self._up("decoder.up2", f, f)
        self._conv("decoder.fuse1", 2 * f, f, 1)
        if "seg" in self.heads:
            self._conv("heads.seg", f, c.num_classes, 1)
        if "rec" in self.heads:
            self._conv("heads.rec", f, c.in_channels, 1)
        if "order" in self.heads:
            for i in range(c.m):
                self._linear(f"heads.order.{i}", E, c.n_subvolumes)

    # -- helpers --------------------------------------------------------
    def p(self, name: str) -> Tensor:
        return self.params[name]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def trunk_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("heads.")]

    def astype(self, dtype) -> "HybridSegModel":
        self.dtype = np.dtype(dtype)
        for t in self.params.values():
            t.data = t.data.astype(self.dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, arr in state.items():
            if n not in self.params:
                raise KeyError(f"unexpected parameter {n!r}")
            if self.params[n].shape != arr.shape:
                raise ModelConfigError(f"shape mismatch for {n}: {arr.shape} vs {self.params[n].shape}")
            self.params[n].data = np.array(arr, dtype=self.dtype)

    def _conv_apply(self, name, x, padding=0):
        return nn.conv3d(x, self.p(f"{name}.weight"), self.p(f"{name}.bias"), padding=padding)

    def _up_apply(self, name, x):
        return nn.conv_transpose3d(x, self.p(f"{name}.weight"), self.p(f"{name}.bias"), stride=2)

    def _lin(self, name, x):
        return nn.linear(x, self.p(f"{name}.weight"), self.p(f"{name}.bias"))

    def _check_input(self, x: Tensor) -> None:
        c = self.cfg
        want = (c.in_channels,) + c.dims
        if x.ndim != 5 or tuple(x.shape[1:]) != want:
            raise ModelConfigError(f"input shape {x.shape} does not match [N, {want}]")

    # -- forward --------------------------------------------------------
    def encode(self, x: Tensor) -> EncoderOutput:
        self._check_input(x)
        c = self.cfg
        N, E = x.shape[0], c.embed_dim
        h, w, d = c.grid
        emb = nn.conv3d(x, self.p("encoder.patch_embed.weight"), self.p("encoder.patch_embed.bias"),
                        stride=c.patch)
        tok = ops.transpose(ops.reshape(emb, (N, E, c.tokens)), (0, 2, 1))
        tok = ops.add(tok, self.p("encoder.pos_embed"))
        levels = []
        for b in range(c.depth):
            tok = self._block(b, tok)
            if b + 1 in c.taps:
                z = ops.reshape(ops.transpose(tok, (0, 2, 1)), (N, E, h, w, d))
                levels.append(z)
        return EncoderOutput(levels, x)

    def _block(self, b: int, tok: Tensor) -> Tensor:
        p = f"encoder.blocks.{b}"
        E = self.cfg.embed_dim
        y = nn.layer_norm(tok, self.p(f"{p}.ln1.gamma"), self.p(f"{p}.ln1.beta"))
        qkv = self._lin(f"{p}.qkv", y)
        q, k, v = qkv[..., :E], qkv[..., E:2 * E], qkv[..., 2 * E:]
        tok = ops.add(tok, self._lin(f"{p}.proj", nn.attention(q, k, v, self.cfg.heads)))
        y = nn.layer_norm(tok, self.p(f"{p}.ln2.gamma"), self.p(f"{p}.ln2.beta"))
        y = self._lin(f"{p}.fc2", nn.gelu(self._lin(f"{p}.fc1", y)))
        return ops.add(tok, y)

    def order_heads(self, enc: EncoderOutput) -> list[Tensor]:
        """Per level: mean over height/width tokens, then a linear classifier.

        Returns m tensors [N, D/P slots, B classes].
        """
        out = []
        for i, z in enumerate(enc.levels):
            pooled = ops.transpose(ops.mean(z, axis=(2, 3)), (0, 2, 1))  # [N, d, E]
            out.append(self._lin(f"heads.order.{i}", pooled))
        return out

    def decode_trunk(self, enc: EncoderOutput) -> Tensor:
        act = nn.leaky_relu
        z1, z2, z3, z4 = enc.levels
        stem = act(self._conv_apply("decoder.stem", enc.stem_input, padding=1))
        s1 = act(self._up_apply("decoder.skip1.up1", self._up_apply("decoder.skip1.up0", z1)))
        s2 = act(self._up_apply("decoder.skip2.up0", z2))
        s3 = act(self._conv_apply("decoder.skip3.proj", z3))
        y = act(self._conv_apply("decoder.bottleneck.proj", z4))
        y = act(self._conv_apply("decoder.fuse8", ops.concat([y, s3], axis=1), padding=1))
        y = self._up_apply("decoder.up8", y)
        y = act(self._conv_apply("decoder.fuse4", ops.concat([y, s2], axis=1), padding=1))
        y = self._up_apply("decoder.up4", y)
        y = act(self._conv_apply("decoder.fuse2", ops.concat([y, s1], axis=1), padding=1))
        y = self._up_apply("decoder.up2", y)
        return act(self._conv_apply("decoder.fuse1", ops.concat([y, stem], axis=1)))

    def decode_reconstruct(self, enc: EncoderOutput) -> Tensor:
        return self._conv_apply("heads.rec", self.decode_trunk(enc))

    def decode_segment(self, enc: EncoderOutput) -> Tensor:
        return self._conv_apply("heads.seg", self.decode_trunk(enc))

    def forward_ssl(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        enc = self.encode(x)
        feats = self.decode_trunk(enc)
        return self.order_heads(enc), self._conv_apply("heads.rec", feats)

    def forward_seg(self, x: Tensor) -> Tensor:
        return self.decode_segment(self.encode(x))

    def predict_logits(self, volume: np.ndarray) -> np.ndarray:
        """[C, H, W, D] -> [J, H, W, D] logits, no tape."""
        from voxinit.autodiff import no_grad
        with no_grad():
            x = Tensor(volume[None].astype(self.dtype), dtype=self.dtype)
            return self.forward_seg(x).data[0]


def init_weights(model: HybridSegModel, spec: initzoo.InitSpec, seed: int | None = None) -> None:
    """Resample every conv/linear weight with ``spec``; zero biases, unit norms.

    Positional embeddings are drawn from a 0.02 truncated normal under every
    scheme. Each parameter gets its own stream derived from (seed, name).
    """
    seed = spec.seed if seed is None else seed
    for name, t in model.params.items():
        kind = model.kinds[name]
        s = _seed_for(seed, name)
        if kind in ("conv", "convT", "linear"):
            layer = "linear" if kind == "linear" else "conv"
            data = initzoo.init_layer(spec, t.shape, layer, s, transposed=kind == "convT")
        elif kind == "pos":
            data = initzoo.trunc_normal(initzoo.InitSpec("trunc_normal", trunc_sigma=0.02, seed=s), t.shape).data
        elif kind == "gamma":
            data = np.ones(t.shape)
        else:
            data = np.zeros(t.shape)
        t.data = data.astype(model.dtype)
        t.grad = None
