"""Clique blocks, transitions, the multi-scale head and the full network.

A block with ``n`` layers runs two stages.  Stage I builds each layer from
the block input and every earlier stage-I layer.  Stage II rebuilds each
layer from the earlier stage-II layers and the later stage-I layers, so
information flows in both directions.  Every layer is

    concat(sources) -> BN -> ReLU -> 1x1 conv -> BN -> ReLU -> 3x3 modulated conv

where the 1x1 weights are stored per (source, target) pair and the 3x3
bank of each layer is modulated by the block's single shared M-filter.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import tensor as T
from .binary import sign_binarize, ste_backward
from .modulation import grad_m, grad_w, he_std, init_full_precision, init_m_filter, modulate

__all__ = [
    "BlockConfig",
    "NetworkConfig",
    "PRESETS",
    "preset",
    "MBCliqueNet",
    "count_parameters",
    "DeployOnlyError",
]

BINARY, MFILTER, FULL, BN = "binary", "mfilter", "fp", "bn"


class DeployOnlyError(RuntimeError):
    """Training was requested on a network loaded from a deploy-only archive."""


@dataclass
class BlockConfig:
    n_layers: int
    width: int
    k: int
    i_block: int | None = None
    kernel: int = 3

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("a block needs at least one layer")
        if self.k < 1 or self.width % self.k:
            raise ValueError(f"width {self.width} is not divisible by k={self.k}")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")

    @property
    def filters(self) -> int:
        """Binarized 3x3 filters per layer (width / k)."""
        return self.width // self.k

    @property
    def bottleneck(self) -> int:
        # twice the width reproduces the published parameter counts
        return self.i_block if self.i_block is not None else 2 * self.width


@dataclass
class NetworkConfig:
    blocks: list[BlockConfig]
    in_channels: int = 3
    image_size: int = 32
    num_classes: int = 10
    stem_channels: int | None = None
    binarize: bool = True
    binarize_bottlenecks: bool = True
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("network needs at least one block")
        if self.image_size % (2 ** (len(self.blocks) - 1)):
            raise ValueError(
                f"image size {self.image_size} cannot be halved {len(self.blocks) - 1} times"
            )

    @property
    def stem(self) -> int:
        return self.stem_channels or self.blocks[0].width

    def block_input_channels(self, b: int) -> int:
        return self.stem if b == 0 else self.blocks[b].width

    def block_feature_channels(self, b: int) -> int:
        blk = self.blocks[b]
        return self.block_input_channels(b) + blk.n_layers * blk.width

    def with_k(self, k: int) -> "NetworkConfig":
        return replace(self, blocks=[replace(b, k=k) for b in self.blocks])

    # flat "key = value" text, also used inside model archives
    def to_text(self) -> str:
        onoff = {True: "on", False: "off"}
        ib = [b.i_block for b in self.blocks]
        lines = [
            f"widths = {','.join(str(b.width) for b in self.blocks)}",
            f"layers = {','.join(str(b.n_layers) for b in self.blocks)}",
            f"k = {','.join(str(b.k) for b in self.blocks)}",
            "i_block = " + ("auto" if all(v is None for v in ib)
                            else ",".join(str(b.bottleneck) for b in self.blocks)),
            f"kernel = {self.blocks[0].kernel}",
            f"in_channels = {self.in_channels}",
            f"image_size = {self.image_size}",
            f"num_classes = {self.num_classes}",
            f"stem_channels = {self.stem}",
            f"binarize = {onoff[self.binarize]}",
            f"binarize_bottlenecks = {onoff[self.binarize_bottlenecks]}",
            f"bn_epsilon = {self.bn_epsilon!r}",
            f"bn_momentum = {self.bn_momentum!r}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict) -> "NetworkConfig":
        def ints(key, n=None, default=None):
            raw = values.get(key, default)
            if raw is None:
                return None
            if isinstance(raw, (list, tuple)):
                out = [int(v) for v in raw]
            else:
                out = [int(v) for v in str(raw).split(",") if v.strip()]
            if n is not None and len(out) == 1:
                out = out * n
            if n is not None and len(out) != n:
                raise ValueError(f"{key} needs 1 or {n} values, got {len(out)}")
            return out

        def flag(key, default):
            raw = values.get(key, default)
            if isinstance(raw, bool):
                return raw
            raw = str(raw).strip().lower()
            if raw not in ("on", "off", "true", "false", "1", "0"):
                raise ValueError(f"{key} must be on/off, got {raw!r}")
            return raw in ("on", "true", "1")

        if "widths" not in values:
            raise ValueError("config is missing 'widths'")
        widths = ints("widths")
        n = len(widths)
        layers = ints("layers", n, default=4)
        ks = ints("k", n, default=4)
        raw_ib = str(values.get("i_block", "auto")).strip()
        ibs = [None] * n if raw_ib == "auto" else ints("i_block", n)
        kernel = int(values.get("kernel", 3))
        blocks = [BlockConfig(layers[b], widths[b], ks[b], ibs[b], kernel) for b in range(n)]
        stem = values.get("stem_channels")
        return cls(
            blocks=blocks,
            in_channels=int(values.get("in_channels", 3)),
            image_size=int(values.get("image_size", 32)),
            num_classes=int(values.get("num_classes", 10)),
            stem_channels=int(stem) if stem not in (None, "") else None,
            binarize=flag("binarize", True),
            binarize_bottlenecks=flag("binarize_bottlenecks", True),
            bn_epsilon=float(values.get("bn_epsilon", 1e-5)),
            bn_momentum=float(values.get("bn_momentum", 0.1)),
        )

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        return cls.from_mapping(parse_key_values(text))


def parse_key_values(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


PRESETS = {
    # MNIST / SVHN architecture, 28x28 grey inputs by default
    "mnist-svhn": dict(widths="64,64,128", layers=4, k=4, in_channels=1, image_size=28),
    # CIFAR architecture
    "cifar": dict(widths="64,128,256", layers=4, k=4, in_channels=3, image_size=32),
    # the k-sweep architecture, on CIFAR-shaped inputs
    "cifar-small": dict(widths="64,64,128", layers=4, k=4, in_channels=3, image_size=32),
    # reduced network for CPU-scale MNIST runs
    "mnist-small": dict(widths="32,32,64", layers=2, k=4, i_block="32,32,64",
                        in_channels=1, image_size=28),
    # test-scale network; the wide stem and bottleneck let it fit 256 CIFAR images quickly
    "tiny": dict(widths="8,8", layers=3, k=2, i_block="64,64", stem_channels=64,
                 in_channels=3, image_size=32),
}


def preset(name: str, **overrides) -> NetworkConfig:
    try:
        values = dict(PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    return NetworkConfig.from_mapping(values)


def _stage_sources(n: int, i: int, stage: int) -> list[tuple[int, int]]:
    """(stage, layer) keys feeding layer ``i`` in ascending layer order.

    Key (0, 0) is the block input.
    """
    if stage == 1:
        return [(0, 0)] + [(1, l) for l in range(1, i)]
    return [(2, l) for l in range(1, i)] + [(1, m) for m in range(i + 1, n + 1)]


@dataclass
class _LayerCache:
    keys: list
    sizes: list
    xc: np.ndarray  # concatenated sources
    r1: np.ndarray  # relu(bn1(xc))
    h: np.ndarray  # 1x1 output
    r2: np.ndarray  # relu(bn2(h))
    w1: np.ndarray
    q: np.ndarray


@dataclass
class _BlockCache:
    x0: np.ndarray
    outputs: dict
    layers: dict = field(default_factory=dict)


class MBCliqueNet:
    """Parameters plus hand-wired forward/backward of a modulated binary CliqueNet.

    ``params`` holds everything SGD updates (full-precision masters for the
    binarized banks, M-filters, plain convs, BN gamma/beta).  ``binarized``
    holds the sign images the forward pass actually uses; call
    :meth:`rebinarize` after changing masters.

    Public methods take and return (n, c, h, w) arrays.  Internally every
    feature map is channel-last, and the ``_cl`` kernels of :mod:`tensor`
    do the work.
    """

    def __init__(self, config: NetworkConfig, seed: int | None = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.roles: dict[str, str] = {}
        self.bn: dict[str, T.BatchNormState] = {}
        self.binarized: dict[str, np.ndarray] = {}
        self.has_masters = True
        # when a dict, backward stores dL/dQ of every layer under (block, stage, layer)
        self.q_grad_trace: dict | None = None
        self._cache = None
        self._init_params(np.random.default_rng(seed))
        self.rebinarize()

    # ------------------------------------------------------------------ setup
    def _add(self, name, value, role):
        self.params[name] = np.ascontiguousarray(value, dtype=self.dtype)
        self.roles[name] = role

    def _add_bn(self, name, channels):
        cfg = self.config
        state = T.BatchNormState.create(channels, self.dtype, cfg.bn_epsilon, cfg.bn_momentum)
        self.bn[name] = state
        self.params[name + ".gamma"] = state.gamma
        self.params[name + ".beta"] = state.beta
        self.roles[name + ".gamma"] = self.roles[name + ".beta"] = BN

    def _init_params(self, rng):
        cfg = self.config
        bin3 = BINARY if cfg.binarize else FULL
        bin1 = BINARY if cfg.binarize and cfg.binarize_bottlenecks else FULL
        self._add("stem.conv", init_full_precision(cfg.stem, cfg.in_channels, 3, rng), FULL)
        for b, blk in enumerate(cfg.blocks):
            n, ib = blk.n_layers, blk.bottleneck
            self._add(f"b{b}.m", init_m_filter(blk.k, blk.kernel, ib, rng), MFILTER)
            for i in range(1, n + 1):
                self._add(f"b{b}.l{i}.conv3",
                          init_full_precision(blk.filters, ib, blk.kernel, rng), bin3)
            for i in range(1, n + 1):
                for l in range(n + 1):
                    if l != i:
                        c_l = self._source_channels(b, l)
                        self._add(f"b{b}.p{l}_{i}.conv1", init_full_precision(ib, c_l, 1, rng), bin1)
            for s in (1, 2):
                for i in range(1, n + 1):
                    c_in = sum(self._source_channels(b, l) for _, l in _stage_sources(n, i, s))
                    if c_in == 0:
                        continue
                    self._add_bn(f"b{b}.s{s}.l{i}.bn1", c_in)
                    self._add_bn(f"b{b}.s{s}.l{i}.bn2", ib)
            if b + 1 < len(cfg.blocks):
                c_in = n * blk.width
                c_out = cfg.blocks[b + 1].width
                self._add_bn(f"t{b}.bn", c_in)
                self._add(f"t{b}.conv", init_full_precision(c_out, c_in, 1, rng), FULL)
        c_total = sum(cfg.block_feature_channels(b) for b in range(len(cfg.blocks)))
        head = rng.standard_normal((cfg.num_classes, c_total, 1, 1)) * he_std(1, c_total)
        self._add("head.conv", head, FULL)
        self._add_bn("head.bn", cfg.num_classes)

    def _source_channels(self, b: int, l: int) -> int:
        return self.config.block_input_channels(b) if l == 0 else self.config.blocks[b].width

    # ---------------------------------------------------------------- weights
    def rebinarize(self):
        """Recompute every binarized bank as sign(master)."""
        for name, role in self.roles.items():
            if role == BINARY:
                self.binarized[name] = sign_binarize(self.params[name])

    def weight(self, name: str) -> np.ndarray:
        """The array the forward pass uses for ``name``."""
        if self.roles[name] == BINARY:
            return self.binarized[name]
        return self.params[name]

    def binary_names(self) -> list[str]:
        return [n for n, r in self.roles.items() if r == BINARY]

    def reconstructed_filters(self, b: int, i: int) -> np.ndarray:
        return modulate(self.params[f"b{b}.m"], self.weight(f"b{b}.l{i}.conv3"))

    # ---------------------------------------------------------------- forward
    def layer_forward(self, b: int, i: int, stage: int, sources: list[np.ndarray],
                      training: bool = False):
        """One clique layer from its ordered (n, c, h, w) sources (ascending layer index)."""
        out, lc = self._layer_forward(b, i, stage, [T.to_cl(s) for s in sources], training)
        return T.from_cl(out), lc

    def _layer_forward(self, b, i, stage, sources, training, keys=None):
        blk = self.config.blocks[b]
        keys = keys or _stage_sources(blk.n_layers, i, stage)
        if len(sources) != len(keys):
            raise ValueError(f"layer {i} stage {stage} takes {len(keys)} sources, got {len(sources)}")
        sizes = [s.shape[-1] for s in sources]
        expected = [self._source_channels(b, l) for _, l in keys]
        if sizes != expected:
            raise ValueError(f"source channels {sizes} != expected {expected}")
        xc = T.concat_channels(sources, axis=-1)
        r1 = T.bn_relu_cl(xc, self.bn[f"b{b}.s{stage}.l{i}.bn1"], training)
        w1 = np.concatenate([self.weight(f"b{b}.p{l}_{i}.conv1") for _, l in keys], axis=1)
        h = T.conv_cl(r1, w1)
        r2 = T.bn_relu_cl(h, self.bn[f"b{b}.s{stage}.l{i}.bn2"], training)
        q = self.reconstructed_filters(b, i)
        out = T.conv_cl(r2, q, 1, blk.kernel // 2)
        return out, _LayerCache(keys, sizes, xc, r1, h, r2, w1, q)

    def _block_forward(self, b: int, x0: np.ndarray, training: bool):
        n = self.config.blocks[b].n_layers
        outs = {(0, 0): x0}
        cache = _BlockCache(x0, outs)
        for stage in (1, 2):
            for i in range(1, n + 1):
                keys = _stage_sources(n, i, stage)
                if not keys:
                    # single-layer block: stage II has no inputs
                    outs[(2, i)] = outs[(1, i)]
                    continue
                out, lc = self._layer_forward(b, i, stage, [outs[k] for k in keys], training, keys)
                outs[(stage, i)] = out
                if training:
                    cache.layers[(stage, i)] = lc
        return [outs[(2, i)] for i in range(1, n + 1)], cache

    def block_forward(self, b: int, x0: np.ndarray, training: bool = False):
        """Return ``(stage2_concat, block_feature)`` for block ``b`` (both n, c, h, w)."""
        x0 = T.to_cl(x0)
        stage2, _ = self._block_forward(b, x0, training)
        s2 = T.concat_channels(stage2, axis=-1)
        return T.from_cl(s2), T.from_cl(T.concat_channels([x0, s2], axis=-1))

    def _transition_forward(self, b, s2, training):
        r = T.bn_relu_cl(s2, self.bn[f"t{b}.bn"], training)
        z = T.conv_cl(r, self.params[f"t{b}.conv"])
        return T.avg_pool_cl(z, 2, 2), (s2, r)

    def transition_forward(self, b: int, stage2_concat: np.ndarray, training: bool = False):
        """BN, ReLU, 1x1 conv and 2x2 average pooling on an (n, c, h, w) input."""
        out, _ = self._transition_forward(b, T.to_cl(stage2_concat), training)
        return T.from_cl(out)

    def multiscale_head(self, block_features: list[np.ndarray], training: bool = False):
        """Global-pool each (n, c, h, w) block feature, concatenate, 1x1 conv, BN -> (n, classes)."""
        if not block_features:
            raise ValueError("multiscale_head needs at least one block feature")
        pooled = np.concatenate([f.mean(axis=(2, 3)) for f in block_features], axis=1)
        return self._head(pooled, training)

    def _head(self, pooled, training):
        z = pooled @ self.params["head.conv"].reshape(self.config.num_classes, -1).T
        return T.batch_norm_cl(z, self.bn["head.bn"], training), z

    def forward(self, images, training: bool = False) -> np.ndarray:
        """Class logits of shape (n, num_classes).

        In training mode BN uses batch statistics and the intermediate
        values are cached for :meth:`backward`.
        """
        cfg = self.config
        x = T.as_tensor4(images, "images").astype(self.dtype, copy=False)
        if x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ValueError(
                f"images have shape {x.shape[1:]}, network expects "
                f"{(cfg.in_channels, cfg.image_size, cfg.image_size)}"
            )
        x = T.to_cl(x)
        x0 = T.conv_cl(x, self.params["stem.conv"], 1, 1)
        blocks, transitions, pooled_parts = [], [], []
        for b in range(len(cfg.blocks)):
            stage2, bc = self._block_forward(b, x0, training)
            blocks.append(bc)
            # pooling each part equals pooling the concatenation channelwise
            pooled_parts += [t.mean(axis=(1, 2)) for t in [x0] + stage2]
            if b + 1 < len(cfg.blocks):
                x0, tc = self._transition_forward(b, T.concat_channels(stage2, axis=-1), training)
                transitions.append(tc)
        pooled = np.concatenate(pooled_parts, axis=1)
        logits, z = self._head(pooled, training)
        self._cache = (x, blocks, transitions, pooled, z) if training else None
        return logits

    __call__ = forward

    # --------------------------------------------------------------- backward
    def _accumulate_binary(self, grads, name, g):
        if self.roles[name] == BINARY:
            g = ste_backward(g, self.params[name])
        grads[name] += g

    def _bn_backward(self, grads, name, g, x, rectified=None):
        """BN backward, preceded by the ReLU mask when ``rectified`` is given."""
        if rectified is None:
            gx, gg, gb = T.batch_norm_cl_backward(g, x, self.bn[name])
        else:
            gx, gg, gb = T.bn_relu_cl_backward(g, x, rectified, self.bn[name])
        grads[name + ".gamma"] += gg
        grads[name + ".beta"] += gb
        return gx

    def _layer_backward(self, b, i, stage, lc: _LayerCache, grad_out, grads, gm):
        conv3 = f"b{b}.l{i}.conv3"
        gr2, gq = T.conv_cl_backward(grad_out, lc.r2, lc.q, 1, self.config.blocks[b].kernel // 2)
        if self.q_grad_trace is not None:
            self.q_grad_trace[(b, stage, i)] = gq
        self._accumulate_binary(grads, conv3, grad_w(gq, self.params[f"b{b}.m"]))
        gm += grad_m(gq, self.weight(conv3))
        gh = self._bn_backward(grads, f"b{b}.s{stage}.l{i}.bn2", gr2, lc.h, lc.r2)
        gr1, gw1 = T.conv_cl_backward(gh, lc.r1, lc.w1)
        start = 0
        for (_, l), size in zip(lc.keys, lc.sizes):
            self._accumulate_binary(grads, f"b{b}.p{l}_{i}.conv1", gw1[:, start:start + size])
            start += size
        gx = self._bn_backward(grads, f"b{b}.s{stage}.l{i}.bn1", gr1, lc.xc, lc.r1)
        return T.concat_channels_backward(gx, lc.sizes, axis=-1)

    def _block_backward(self, b, bc: _BlockCache, g_out: dict, grads):
        """``g_out`` maps (stage, layer) keys to upstream gradients; returns grad of x0."""
        n = self.config.blocks[b].n_layers
        gm = np.zeros_like(self.params[f"b{b}.m"])
        order = [(2, i) for i in range(n, 0, -1)] + [(1, i) for i in range(n, 0, -1)]
        for key in order:
            g = g_out.pop(key, None)
            if key not in bc.layers:
                if g is not None and key[0] == 2:
                    # stage II of a single-layer block aliases stage I
                    g_out[(1, key[1])] = g_out.get((1, key[1]), 0) + g
                continue
            if g is None:
                continue
            lc = bc.layers[key]
            pieces = self._layer_backward(b, key[1], key[0], lc, g, grads, gm)
            for src, gp in zip(lc.keys, pieces):
                if src in g_out:
                    g_out[src] = g_out[src] + gp
                else:
                    g_out[src] = gp
        grads[f"b{b}.m"] += gm
        return g_out.get((0, 0), np.zeros_like(bc.x0))

    def backward(self, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of every entry of ``params`` from the last training forward."""
        if self._cache is None:
            raise RuntimeError("backward needs a preceding forward(..., training=True)")
        cfg = self.config
        x, blocks, transitions, pooled, z = self._cache
        grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        g = np.asarray(grad_logits, dtype=self.dtype).reshape(z.shape)
        gz = self._bn_backward(grads, "head.bn", g, z)
        w_head = self.params["head.conv"].reshape(cfg.num_classes, -1)
        grads["head.conv"] += (gz.T @ pooled).reshape(w_head.shape + (1, 1))
        gp = gz @ w_head
        g_x0, pos = None, pooled.shape[1]
        for b in range(len(cfg.blocks) - 1, -1, -1):
            bc = blocks[b]
            n = cfg.blocks[b].n_layers
            parts = [bc.x0] + [bc.outputs[(2, i)] for i in range(1, n + 1)]
            sizes = [t.shape[-1] for t in parts]
            pos -= sum(sizes)
            hw = parts[0].shape[1] * parts[0].shape[2]
            # gradient of a global mean is spread evenly over the positions
            pieces = T.concat_channels_backward(gp[:, pos:pos + sum(sizes)] / hw, sizes, axis=-1)
            head_g = [np.broadcast_to(p[:, None, None, :], t.shape) for p, t in zip(pieces, parts)]
            g_out = {(0, 0): head_g[0]}
            for i in range(1, n + 1):
                g_out[(2, i)] = head_g[i]
            if b + 1 < len(cfg.blocks):
                g_s2 = self._transition_backward(b, transitions[b], g_x0, grads)
                for i, piece in enumerate(np.split(g_s2, n, axis=-1), 1):
                    g_out[(2, i)] = g_out[(2, i)] + piece
            g_x0 = self._block_backward(b, bc, g_out, grads)
        _, gw = T.conv_cl_backward(g_x0, x, self.params["stem.conv"], 1, 1)
        grads["stem.conv"] += gw
        return grads

    def _transition_backward(self, b, tc, g_pool, grads):
        s2, r = tc
        gz = T.avg_pool_cl_backward(g_pool, 2)
        gr, gw = T.conv_cl_backward(gz, r, self.params[f"t{b}.conv"])
        grads[f"t{b}.conv"] += gw
        return self._bn_backward(grads, f"t{b}.bn", gr, s2, r)

    # ------------------------------------------------------------- utilities
    def predict_logits(self, images, batch_size: int = 256) -> np.ndarray:
        images = np.asarray(images)
        out = [self.forward(images[s:s + batch_size], training=False)
               for s in range(0, images.shape[0], batch_size)]
        return np.concatenate(out, axis=0)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every array that defines the network's inference behaviour."""
        out = dict(self.params)
        for name, st in self.bn.items():
            out[name + ".running_mean"] = st.running_mean
            out[name + ".running_var"] = st.running_var
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())


def count_parameters(config: NetworkConfig) -> dict[str, int]:
    """Learnable parameter ledger derived from the wiring alone.

    Categories: binarized 3x3 banks, binarized 1x1 bottleneck slices,
    M-filters, full-precision convolutions and BN affine parameters.  BN
    running statistics are state, not parameters, and are not counted.
    """
    counts = dict(binary_3x3=0, binary_1x1=0, m_filters=0, full_precision_conv=0, batch_norm=0)
    bin3 = "binary_3x3" if config.binarize else "full_precision_conv"
    bin1 = ("binary_1x1" if config.binarize and config.binarize_bottlenecks
            else "full_precision_conv")
    counts["full_precision_conv"] += config.stem * config.in_channels * 9
    for b, blk in enumerate(config.blocks):
        n, ib, kk = blk.n_layers, blk.bottleneck, blk.kernel * blk.kernel
        c0, w = config.block_input_channels(b), blk.width
        counts["m_filters"] += blk.k * kk
        counts[bin3] += n * blk.filters * ib * kk
        for i in range(1, n + 1):
            for l in range(n + 1):
                if l != i:
                    counts[bin1] += ib * (c0 if l == 0 else w)
        for s in (1, 2):
            for i in range(1, n + 1):
                srcs = _stage_sources(n, i, s)
                if srcs:
                    c_in = sum(c0 if l == 0 else w for _, l in srcs)
                    counts["batch_norm"] += 2 * (c_in + ib)
        if b + 1 < len(config.blocks):
            c_in, c_out = n * w, config.blocks[b + 1].width
            counts["batch_norm"] += 2 * c_in
            counts["full_precision_conv"] += c_in * c_out
    c_total = sum(config.block_feature_channels(b) for b in range(len(config.blocks)))
    counts["full_precision_conv"] += c_total * config.num_classes
    counts["batch_norm"] += 2 * config.num_classes
    counts["total"] = sum(counts.values())
    return counts
