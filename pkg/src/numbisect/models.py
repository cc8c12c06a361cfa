"""Desk-scale classifier families: MLP, MicroCNN (residual) and MicroViT.

Every network maps a batch of single-channel images [B, H, W] (or
[B, C, H, W]) to 2 logits and also exposes the penultimate activation used
as the embedding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensornet as tn
from .tensornet import ParameterSet, ParamSpec, Tensor

FAMILIES = ("MLP", "MicroCNN", "MicroViT")


class InvalidConfig(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    family: str
    input_resolution: int = 64
    channels: int = 1
    # MLP
    hidden: tuple[int, ...] = (256, 256)
    # MicroCNN
    widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1
    stem_kernel: int = 4
    stem_stride: int = 4
    stem_padding: int = 0
    kernel_size: int = 3
    # MicroViT
    patch_size: int = 8
    token_dim: int = 32
    heads: int = 2
    depths: tuple[int, ...] = (1, 1, 1)
    mlp_ratio: int = 2
    hierarchical: bool = True
    layer_norm: bool = False
    # shared head
    embedding_dim: int = 64
    head_dim: int = 2

    def __post_init__(self):
        for name in ("hidden", "widths", "depths"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise InvalidConfig(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.input_resolution < 1 or self.channels < 1:
            raise InvalidConfig("input_resolution and channels must be positive")
        if self.head_dim != 2:
            raise InvalidConfig("the classification head has exactly 2 units")
        if self.family == "MLP":
            if not self.hidden or min(self.hidden) < 1:
                raise InvalidConfig("MLP needs at least one positive hidden width")
        elif self.family == "MicroCNN":
            if not self.widths or min(self.widths) < 1 or self.blocks_per_stage < 0:
                raise InvalidConfig("MicroCNN needs >= 1 stage with positive widths")
            if self.stem_stride < 1 or self.stem_kernel < 1 or self.stem_padding < 0:
                raise InvalidConfig("stem kernel/stride must be positive, padding non-negative")
            if self.kernel_size % 2 == 0:
                raise InvalidConfig("residual blocks need an odd kernel_size")
            if self.input_resolution + 2 * self.stem_padding < self.stem_kernel:
                raise InvalidConfig("stem kernel larger than the padded input")
        else:
            if self.input_resolution % self.patch_size:
                raise InvalidConfig(f"patch_size {self.patch_size} does not divide "
                                    f"input_resolution {self.input_resolution}")
            grid = self.input_resolution // self.patch_size
            if not self.depths or min(self.depths) < 1:
                raise InvalidConfig("MicroViT needs >= 1 block per stage")
            if self.hierarchical:
                merges = len(self.depths) - 1
                if grid % (2 ** merges):
                    raise InvalidConfig(f"{grid}x{grid} token grid cannot be merged {merges} times")
            elif len(self.depths) != 1:
                raise InvalidConfig("non-hierarchical MicroViT takes a single depth entry")
            if self.token_dim % self.heads:
                raise InvalidConfig("token_dim must be divisible by heads")

    @classmethod
    def default(cls, family: str, **overrides) -> "NetworkConfig":
        base: dict = {"family": family}
        if family == "MLP":
            base["embedding_dim"] = 256
        if family == "MicroViT" and overrides.get("hierarchical") is False and "depths" not in overrides:
            base["depths"] = (3,)
        base.update(overrides)
        if family == "MLP":
            base["embedding_dim"] = tuple(base.get("hidden", (256, 256)))[-1]
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys {sorted(unknown)}")
        return cls.default(d["family"], **{k: v for k, v in d.items() if k != "family"})


def as_input(images: np.ndarray, channels: int = 1) -> np.ndarray:
    """Images [B, H, W] in {0, 1} -> float64 [B, C, H, W], replicating channels."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    if x.shape[1] == 1 and channels > 1:
        x = np.repeat(x, channels, axis=1)
    return x


@dataclass
class ForwardResult:
    logits: Tensor
    embedding: Tensor


class Network:
    """Parameters plus a forward function for one config."""

    def __init__(self, config: NetworkConfig, params: ParameterSet):
        self.config = config
        self.params = params
        expected = {s.name: s.shape for s in param_specs(config)}
        got = {n: t.shape for n, t in params.items()}
        if expected != got:
            raise InvalidConfig("parameter set does not match the architecture")

    @property
    def parameter_count(self) -> int:
        return self.params.total_count

    def forward(self, images) -> ForwardResult:
        x = as_input(images, self.config.channels)
        c = self.config
        if x.shape[1:] != (c.channels, c.input_resolution, c.input_resolution):
            raise tn.ShapeMismatch(f"input {x.shape[1:]} does not match config "
                                   f"{(c.channels, c.input_resolution, c.input_resolution)}")
        fn = {"MLP": _mlp_forward, "MicroCNN": _cnn_forward, "MicroViT": _vit_forward}[c.family]
        return fn(c, self.params, x)

    def logits(self, images, batch_size: int = 256) -> np.ndarray:
        return np.concatenate([self.forward(images[i:i + batch_size]).logits.data
                               for i in range(0, len(images), batch_size)])

    def embed(self, images, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Logits and penultimate embeddings from a single pass."""
        outs = [self.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
        return (np.concatenate([o.logits.data for o in outs]),
                np.concatenate([o.embedding.data for o in outs]))


# ---------------------------------------------------------------------------
# parameter layouts


def _dense_specs(name: str, fan_in: int, fan_out: int, bias: bool = True) -> list[ParamSpec]:
    specs = [ParamSpec(f"{name}.W", (fan_in, fan_out), "weight", fan_in)]
    if bias:
        specs.append(ParamSpec(f"{name}.b", (fan_out,), "bias"))
    return specs


def _conv_specs(name: str, c_in: int, c_out: int, k: int) -> list[ParamSpec]:
    return [ParamSpec(f"{name}.K", (c_out, c_in, k, k), "weight", c_in * k * k),
            ParamSpec(f"{name}.b", (c_out,), "bias")]


def vit_stage_dims(config: NetworkConfig) -> list[tuple[int, int]]:
    """(grid side, token width) per MicroViT stage."""
    grid = config.input_resolution // config.patch_size
    dim = config.token_dim
    out = []
    for _ in config.depths:
        out.append((grid, dim))
        grid //= 2
        dim *= 2
    return out


def cnn_stage_sizes(config: NetworkConfig) -> list[int]:
    k = config.kernel_size
    size = tn.conv_output_size(config.input_resolution, config.stem_kernel,
                               config.stem_stride, config.stem_padding)
    sizes = [size]
    for _ in config.widths[1:]:
        size = tn.conv_output_size(size, k, 2, k // 2)
        sizes.append(size)
    return sizes


def param_specs(config: NetworkConfig) -> list[ParamSpec]:
    c = config
    specs: list[ParamSpec] = []
    if c.family == "MLP":
        width = c.channels * c.input_resolution ** 2
        for i, h in enumerate(c.hidden):
            specs += _dense_specs(f"fc{i}", width, h)
            width = h
        specs += _dense_specs("head", width, c.head_dim)
    elif c.family == "MicroCNN":
        k = c.kernel_size
        specs += _conv_specs("stem", c.channels, c.widths[0], c.stem_kernel)
        prev = c.widths[0]
        for s, w in enumerate(c.widths):
            if s > 0:
                specs += _conv_specs(f"down{s}", prev, w, k)
            for blk in range(c.blocks_per_stage):
                specs += _conv_specs(f"stage{s}.block{blk}.conv1", w, w, k)
                specs += _conv_specs(f"stage{s}.block{blk}.conv2", w, w, k)
            prev = w
        specs += _dense_specs("embed", prev, c.embedding_dim)
        specs += _dense_specs("head", c.embedding_dim, c.head_dim)
    else:
        patch_dim = c.channels * c.patch_size ** 2
        dims = vit_stage_dims(c)
        grid0, d0 = dims[0]
        specs += _dense_specs("patch", patch_dim, d0)
        specs.append(ParamSpec("pos", (grid0 * grid0, d0), "embedding"))
        for s, ((_, d), depth) in enumerate(zip(dims, c.depths)):
            if s > 0:
                specs += _dense_specs(f"merge{s}", 2 * d, d, bias=False)
            for blk in range(depth):
                p = f"stage{s}.block{blk}"
                if c.layer_norm:
                    specs += [ParamSpec(f"{p}.ln1.g", (d,), "scale"), ParamSpec(f"{p}.ln1.b", (d,), "bias")]
                for proj in ("q", "k", "v", "o"):
                    specs.append(ParamSpec(f"{p}.attn.W{proj}", (d, d), "weight", d))
                if c.layer_norm:
                    specs += [ParamSpec(f"{p}.ln2.g", (d,), "scale"), ParamSpec(f"{p}.ln2.b", (d,), "bias")]
                specs += _dense_specs(f"{p}.ff1", d, c.mlp_ratio * d)
                specs += _dense_specs(f"{p}.ff2", c.mlp_ratio * d, d)
        d_last = dims[-1][1]
        specs += _dense_specs("embed", d_last, c.embedding_dim)
        specs += _dense_specs("head", c.embedding_dim, c.head_dim)
    return specs


def parameter_count(config: NetworkConfig) -> int:
    """Closed-form parameter count, independent of the spec list."""
    c = config
    if c.family == "MLP":
        widths = [c.channels * c.input_resolution ** 2, *c.hidden, c.head_dim]
        return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    if c.family == "MicroCNN":
        k2 = c.kernel_size ** 2
        n = c.channels * c.widths[0] * c.stem_kernel ** 2 + c.widths[0]
        for s, w in enumerate(c.widths):
            if s:
                n += c.widths[s - 1] * w * k2 + w
            n += c.blocks_per_stage * 2 * (w * w * k2 + w)
        n += c.widths[-1] * c.embedding_dim + c.embedding_dim
        return n + c.embedding_dim * c.head_dim + c.head_dim
    grid = c.input_resolution // c.patch_size
    d = c.token_dim
    r = c.mlp_ratio
    n = c.channels * c.patch_size ** 2 * d + d + grid * grid * d
    for s, depth in enumerate(c.depths):
        if s:
            n += 4 * (d // 2) * d
        per_block = 4 * d * d + (d * r * d + r * d) + (r * d * d + d)
        if c.layer_norm:
            per_block += 4 * d
        n += depth * per_block
        d *= 2
    d //= 2
    return n + d * c.embedding_dim + c.embedding_dim + c.embedding_dim * c.head_dim + c.head_dim


def build_network(config: NetworkConfig, seed: int = 0) -> Network:
    return Network(config, tn.init_params(param_specs(config), seed))


def build_mlp(config: NetworkConfig | None = None, seed: int = 0, **overrides) -> Network:
    config = config or NetworkConfig.default("MLP", **overrides)
    if config.family != "MLP":
        raise InvalidConfig(f"build_mlp got a {config.family} config")
    return build_network(config, seed)


def build_microcnn(config: NetworkConfig | None = None, seed: int = 0, **overrides) -> Network:
    config = config or NetworkConfig.default("MicroCNN", **overrides)
    if config.family != "MicroCNN":
        raise InvalidConfig(f"build_microcnn got a {config.family} config")
    return build_network(config, seed)


def build_microvit(config: NetworkConfig | None = None, seed: int = 0, **overrides) -> Network:
    config = config or NetworkConfig.default("MicroViT", **overrides)
    if config.family != "MicroViT":
        raise InvalidConfig(f"build_microvit got a {config.family} config")
    return build_network(config, seed)


# ---------------------------------------------------------------------------
# forward passes


def _mlp_forward(c: NetworkConfig, p: ParameterSet, x: np.ndarray) -> ForwardResult:
    h = Tensor(x.reshape(x.shape[0], -1))
    for i in range(len(c.hidden)):
        h = tn.relu(tn.dense_forward(h, p[f"fc{i}.W"], p[f"fc{i}.b"]))
    return ForwardResult(tn.dense_forward(h, p["head.W"], p["head.b"]), h)


def residual_block(x: Tensor, p: ParameterSet, prefix: str, k: int) -> Tensor:
    """x + conv2(relu(conv1(x))); identity when both convs are all zero."""
    h = tn.relu(tn.conv2d_forward(x, p[f"{prefix}.conv1.K"], p[f"{prefix}.conv1.b"], 1, k // 2))
    h = tn.conv2d_forward(h, p[f"{prefix}.conv2.K"], p[f"{prefix}.conv2.b"], 1, k // 2)
    return tn.add(x, h)


def _cnn_forward(c: NetworkConfig, p: ParameterSet, x: np.ndarray) -> ForwardResult:
    k = c.kernel_size
    h = tn.relu(tn.conv2d_forward(Tensor(x), p["stem.K"], p["stem.b"], c.stem_stride, c.stem_padding))
    for s in range(len(c.widths)):
        if s:
            h = tn.relu(tn.conv2d_forward(h, p[f"down{s}.K"], p[f"down{s}.b"], 2, k // 2))
        for blk in range(c.blocks_per_stage):
            h = residual_block(h, p, f"stage{s}.block{blk}", k)
    pooled = tn.global_avg_pool(h)
    emb = tn.relu(tn.dense_forward(pooled, p["embed.W"], p["embed.b"]))
    return ForwardResult(tn.dense_forward(emb, p["head.W"], p["head.b"]), emb)


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, H, W] -> [B, (H/p)*(W/p), C*p*p], patches in row-major order."""
    B, C, H, W = x.shape
    g_h, g_w = H // patch, W // patch
    t = x.reshape(B, C, g_h, patch, g_w, patch).transpose(0, 2, 4, 1, 3, 5)
    return t.reshape(B, g_h * g_w, C * patch * patch)


def transformer_block(x: Tensor, p: ParameterSet, prefix: str, heads: int, layer_norm: bool) -> Tensor:
    h = tn.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"]) if layer_norm else x
    x = tn.add(x, tn.attention_forward(h, p[f"{prefix}.attn.Wq"], p[f"{prefix}.attn.Wk"],
                                       p[f"{prefix}.attn.Wv"], p[f"{prefix}.attn.Wo"], heads))
    h = tn.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"]) if layer_norm else x
    h = tn.relu(tn.dense_forward(h, p[f"{prefix}.ff1.W"], p[f"{prefix}.ff1.b"]))
    return tn.add(x, tn.dense_forward(h, p[f"{prefix}.ff2.W"], p[f"{prefix}.ff2.b"]))


def vit_tokens(c: NetworkConfig, p: ParameterSet, x: np.ndarray) -> list[Tensor]:
    """Token tensors after each stage (for inspection and tests)."""
    t = tn.add(tn.dense_forward(Tensor(patchify(x, c.patch_size)), p["patch.W"], p["patch.b"]), p["pos"])
    stages = []
    for s, ((grid, _), depth) in enumerate(zip(vit_stage_dims(c), c.depths)):
        if s:
            t = tn.patch_merge(t, grid * 2, p[f"merge{s}.W"])
        for blk in range(depth):
            t = transformer_block(t, p, f"stage{s}.block{blk}", c.heads, c.layer_norm)
        stages.append(t)
    return stages


def _vit_forward(c: NetworkConfig, p: ParameterSet, x: np.ndarray) -> ForwardResult:
    t = vit_tokens(c, p, x)[-1]
    pooled = tn.mean(t, axis=1)
    emb = tn.relu(tn.dense_forward(pooled, p["embed.W"], p["embed.b"]))
    return ForwardResult(tn.dense_forward(emb, p["head.W"], p["head.b"]), emb)
