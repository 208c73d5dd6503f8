"""The iterated V-block network.

Each block runs `levels` restriction steps (every step concatenates
`dilations` strided-convolution branches and normalizes), the mirrored
prolongation steps, and a final single-channel mixing convolution.  Blocks
update the running prediction residually from u_0 = 0, and the coefficient
and source fields are re-concatenated into every block's input.

The mixing convolution of every block is zero-initialized, so a freshly
built model is exactly the zero map; training starts from the identity
iteration.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, ConvParams, DiffTensor

CKPT_MAGIC = b"IVN1"
CKPT_VERSION = 1


@dataclass(frozen=True)
class VNetConfig:
    levels: int = 1                       # downsample/upsample step count
    blocks: int = 12                      # iterative block count
    dilations: int = 2                    # dilation branches 1..dilations
    width: float = 1.0                    # channel multiplier
    base_channels: tuple = ()             # per-level branch widths; () = 16*2^level
    kernel_size: int = 3
    mix_kernel_size: int = 1              # the channel-fusing head
    in_channels: int = 3                  # (u, coeff, f); 2 drops the fixed f
    no_residual: bool = False
    level_residuals: bool = False
    coarse_convs: int = 0
    smoothing_convs: int = 0
    share_weights: bool = False

    def __post_init__(self):
        if self.levels < 1 or self.blocks < 1 or self.dilations < 1:
            raise ValueError("levels, blocks and dilations must be >= 1")
        if self.width <= 0:
            raise ValueError("width must be positive")
        if self.kernel_size % 2 != 1 or self.mix_kernel_size % 2 != 1:
            raise ValueError("kernel sizes must be odd")
        if self.in_channels not in (2, 3):
            raise ValueError("in_channels must be 2 or 3")
        if self.base_channels and len(self.base_channels) != self.levels:
            raise ValueError("base_channels must have one entry per level")

    def resolved_base(self) -> tuple:
        if self.base_channels:
            return tuple(self.base_channels)
        return tuple(16 * 2 ** i for i in range(self.levels))

    def scaled(self, c: int) -> int:
        return max(1, int(round(self.width * c)))


def _channel_plan(cfg: VNetConfig):
    """Channel counts along one block: restriction inputs/branch widths,
    coarse width, prolongation outputs, and the per-level skip widths."""
    base = cfg.resolved_base()
    skip = [cfg.in_channels]         # state channels at level l on the way down
    ch = cfg.in_channels
    down = []
    for li in range(cfg.levels):
        cb = cfg.scaled(base[li])
        down.append((ch, cb))
        ch = cfg.dilations * cb
        if li < cfg.levels - 1:
            skip.append(ch)
    up = []
    for i in range(cfg.levels):
        land = cfg.levels - 1 - i
        p_out = skip[land] if cfg.level_residuals else cfg.scaled(base[land])
        up.append((ch, p_out))
        ch = p_out
    return down, up, skip


@dataclass
class LevelDown:
    pre_smooth: list
    branches: list
    norm: BatchNormState


@dataclass
class LevelUp:
    prol: ConvParams
    norm: BatchNormState
    post_smooth: list


@dataclass
class BlockParams:
    down: list
    coarse: list
    up: list
    mix: ConvParams


class VNetModel:
    """Architecture configuration plus all learnable parameters."""

    def __init__(self, config: VNetConfig, blocks, dtype=np.float32, normalization=None):
        self.config = config
        self.blocks = blocks            # one entry if weights are shared
        self.dtype = dtype
        self.normalization = normalization or {}

    # -- parameter bookkeeping ------------------------------------------------

    def _block_items(self, bi: int, blk: BlockParams):
        pre = f"block{bi}"
        for li, lvl in enumerate(blk.down):
            for s, cp in enumerate(lvl.pre_smooth):
                yield f"{pre}/down{li}/smooth{s}", cp
            for j, cp in enumerate(lvl.branches):
                yield f"{pre}/down{li}/branch{j}", cp
            yield f"{pre}/down{li}/norm", lvl.norm
        for t, cp in enumerate(blk.coarse):
            yield f"{pre}/coarse{t}", cp
        for i, lvl in enumerate(blk.up):
            yield f"{pre}/up{i}/prol", lvl.prol
            yield f"{pre}/up{i}/norm", lvl.norm
            for s, cp in enumerate(lvl.post_smooth):
                yield f"{pre}/up{i}/smooth{s}", cp
        yield f"{pre}/mix", blk.mix

    def named_modules(self):
        for bi, blk in enumerate(self.blocks):
            yield from self._block_items(bi, blk)

    def parameters(self):
        """(name, DiffTensor) pairs in the fixed enumeration order."""
        out = []
        for name, mod in self.named_modules():
            if isinstance(mod, ConvParams):
                out.append((f"{name}/kernel", mod.kernel))
                if mod.bias is not None:
                    out.append((f"{name}/bias", mod.bias))
            else:
                out.append((f"{name}/gamma", mod.gamma))
                out.append((f"{name}/beta", mod.beta))
        return out

    def bn_states(self):
        return [(name, mod) for name, mod in self.named_modules()
                if isinstance(mod, BatchNormState)]

    @property
    def num_params(self) -> int:
        return sum(p.values.size for _, p in self.parameters())

    def set_mode(self, mode: str):
        if mode not in ("train", "eval"):
            raise ValueError("mode must be 'train' or 'eval'")
        for _, st in self.bn_states():
            st.mode = mode

    def state_dict(self):
        state = {name: p.values.copy() for name, p in self.parameters()}
        for name, st in self.bn_states():
            state[f"{name}/running_mean"] = st.running_mean.copy()
            state[f"{name}/running_var"] = st.running_var.copy()
        return state

    def load_state_dict(self, state):
        for name, p in self.parameters():
            p.values[...] = state[name]
        for name, st in self.bn_states():
            st.running_mean[...] = state[f"{name}/running_mean"]
            st.running_var[...] = state[f"{name}/running_var"]

    # -- forward ---------------------------------------------------------------

    def forward(self, eta: DiffTensor, f: DiffTensor | None):
        """Iterate the block update from u = 0; returns (u_pred, iterates)."""
        cfg = self.config
        if cfg.in_channels == 3 and f is None:
            raise ValueError("config expects a source channel")
        b, _, h, w = eta.shape
        u = ad.tensor(np.zeros((b, 1, h, w), dtype=eta.values.dtype))
        fixed = [eta] if f is None else [eta, f]
        iterates = []
        for k in range(cfg.blocks):
            blk = self.blocks[0] if cfg.share_weights else self.blocks[k]
            x = ad.concat_channels([u] + fixed)
            v = _run_block(x, blk, cfg)
            if not np.all(np.isfinite(v.values)):
                raise FloatingPointError(f"non-finite activation after block {k}")
            u = v if cfg.no_residual else ad.add(u, v)
            iterates.append(u)
        return u, iterates


def _run_block(x: DiffTensor, blk: BlockParams, cfg: VNetConfig) -> DiffTensor:
    sizes = []
    skips = []
    h = x
    for lvl in blk.down:
        for cp in lvl.pre_smooth:
            h = ad.relu(ad.conv2d(h, cp))
        if cfg.level_residuals:
            skips.append(h)
        sizes.append(h.shape[2:])
        h = ad.batch_norm(ad.concat_channels([ad.relu(ad.conv2d(h, cp))
                                              for cp in lvl.branches]), lvl.norm)
    for cp in blk.coarse:
        h = ad.relu(ad.conv2d(h, cp))
    for i, lvl in enumerate(blk.up):
        target = sizes[cfg.levels - 1 - i]
        h = ad.batch_norm(ad.relu(ad.conv_transpose2d(h, lvl.prol, output_hw=target)), lvl.norm)
        for cp in lvl.post_smooth:
            h = ad.relu(ad.conv2d(h, cp))
        if cfg.level_residuals:
            h = ad.add(h, skips[cfg.levels - 1 - i])
    return ad.conv2d(h, blk.mix)


# ---------------------------------------------------------------------------
# construction

def _conv(rng, cin, cout, k, stride, dilation, dtype, zero=False, transposed=False):
    shape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
    if zero:
        kernel = np.zeros(shape, dtype=dtype)
    else:
        std = np.sqrt(2.0 / (cin * k * k))
        kernel = (rng.standard_normal(shape) * std).astype(dtype)
    bias = np.zeros(cout, dtype=dtype)
    return ConvParams(kernel=ad.tensor(kernel, requires_grad=True),
                      bias=ad.tensor(bias, requires_grad=True),
                      stride=stride, dilation=dilation,
                      padding=ad.same_padding(k, dilation), transposed=transposed)


def _bn(c, dtype):
    return BatchNormState(gamma=ad.tensor(np.ones(c, dtype=dtype), requires_grad=True),
                          beta=ad.tensor(np.zeros(c, dtype=dtype), requires_grad=True),
                          running_mean=np.zeros(c), running_var=np.ones(c))


def _build_block(rng, cfg: VNetConfig, dtype) -> BlockParams:
    k = cfg.kernel_size
    down_plan, up_plan, _ = _channel_plan(cfg)
    down = []
    for ch, cb in down_plan:
        pre = [_conv(rng, ch, ch, k, 1, 1, dtype) for _ in range(cfg.smoothing_convs)]
        branches = [_conv(rng, ch, cb, k, 2, d + 1, dtype) for d in range(cfg.dilations)]
        down.append(LevelDown(pre_smooth=pre, branches=branches,
                              norm=_bn(cfg.dilations * cb, dtype)))
    coarse_ch = down_plan[-1][1] * cfg.dilations
    coarse = [_conv(rng, coarse_ch, coarse_ch, k, 1, 1, dtype) for _ in range(cfg.coarse_convs)]
    up = []
    for ch, p_out in up_plan:
        post = [_conv(rng, p_out, p_out, k, 1, 1, dtype) for _ in range(cfg.smoothing_convs)]
        up.append(LevelUp(prol=_conv(rng, ch, p_out, k, 2, 1, dtype, transposed=True),
                          norm=_bn(p_out, dtype), post_smooth=post))
    mix = _conv(rng, up_plan[-1][1], 1, cfg.mix_kernel_size, 1, 1, dtype, zero=True)
    return BlockParams(down=down, coarse=coarse, up=up, mix=mix)


def build_model(cfg: VNetConfig, rng_seed: int, dtype=np.float32) -> VNetModel:
    """Instantiate parameters: Kaiming fan-in convolutions, zero biases, and
    zero-initialized mixing convolutions (forward at init is exactly zero)."""
    key = np.zeros(2, dtype=np.uint64)
    key[0] = rng_seed
    rng = np.random.Generator(np.random.Philox(key=key))
    n = 1 if cfg.share_weights else cfg.blocks
    blocks = [_build_block(rng, cfg, dtype) for _ in range(n)]
    return VNetModel(cfg, blocks, dtype=dtype)


def count_params(cfg: VNetConfig) -> int:
    """Closed-form trainable-parameter count; matches enumeration exactly."""
    k2 = cfg.kernel_size ** 2
    down_plan, up_plan, _ = _channel_plan(cfg)

    def conv_n(cin, cout):
        return cin * cout * k2 + cout

    block = 0
    for ch, cb in down_plan:
        block += cfg.smoothing_convs * conv_n(ch, ch)
        block += cfg.dilations * conv_n(ch, cb)
        block += 2 * cfg.dilations * cb            # batch-norm affine
    coarse_ch = down_plan[-1][1] * cfg.dilations
    block += cfg.coarse_convs * conv_n(coarse_ch, coarse_ch)
    for ch, p_out in up_plan:
        block += conv_n(ch, p_out) + 2 * p_out
        block += cfg.smoothing_convs * conv_n(p_out, p_out)
    block += up_plan[-1][1] * cfg.mix_kernel_size ** 2 + 1
    return block if cfg.share_weights else cfg.blocks * block


# ---------------------------------------------------------------------------
# checkpoints

def _config_to_json(cfg: VNetConfig) -> dict:
    d = asdict(cfg)
    d["base_channels"] = list(cfg.base_channels)
    return d


def _config_from_json(d: dict) -> VNetConfig:
    d = dict(d)
    d["base_channels"] = tuple(d.get("base_channels", ()))
    return VNetConfig(**d)


def save_model(model: VNetModel, path: str) -> None:
    header = {
        "config": _config_to_json(model.config),
        "normalization": model.normalization,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, p in model.parameters():
            fh.write(p.values.astype("<f4").tobytes())
        for _, st in model.bn_states():
            fh.write(st.running_mean.astype("<f8").tobytes())
            fh.write(st.running_var.astype("<f8").tobytes())


def load_model(path: str, expect_config: VNetConfig | None = None) -> VNetModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        version, = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        size, = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(size).decode())
        cfg = _config_from_json(header["config"])
        if expect_config is not None and cfg != expect_config:
            raise ValueError("checkpoint config does not match the expected config")
        model = build_model(cfg, rng_seed=0, dtype=np.float32)
        model.normalization = header.get("normalization", {})
        for _, p in model.parameters():
            raw = fh.read(p.values.size * 4)
            if len(raw) < p.values.size * 4:
                raise ValueError(f"{path}: truncated checkpoint")
            p.values[...] = np.frombuffer(raw, dtype="<f4").reshape(p.values.shape)
        for _, st in model.bn_states():
            for arr in (st.running_mean, st.running_var):
                raw = fh.read(arr.size * 8)
                if len(raw) < arr.size * 8:
                    raise ValueError(f"{path}: truncated checkpoint")
                arr[...] = np.frombuffer(raw, dtype="<f8")
        extra = fh.read(1)
    if extra:
        raise ValueError(f"{path}: trailing bytes after checkpoint payload")
    return model


def clone_model(model: VNetModel) -> VNetModel:
    """Fresh model object with copied parameters and running statistics."""
    out = build_model(model.config, rng_seed=0, dtype=model.dtype)
    out.load_state_dict(model.state_dict())
    out.normalization = copy.deepcopy(model.normalization)
    return out
