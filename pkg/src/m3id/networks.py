"""Student and teacher networks built from the tensor-core primitives.

Both share one volumetric feature extractor: a root 3x3x3 convolution, three
pre-activation residual blocks (each stride 2, so the overall downsample is
8), and a stack of double-attention blocks. The student pools the feature
map and classifies; the teacher additionally encodes 13 clinical scalars,
gates the feature map by cosine similarity against the clinical embedding,
and classifies the attention-pooled feature vector.

Parameters are float64 leaves registered in construction order under stable
names; weights draw from N(0, sqrt(2 / fan_in)) in that order, biases start
at zero, batch-norm scales at one. The extractor uses the same parameter
names in both networks, so "similar architecture" is checkable as name-set
equality.

Checkpoints are a binary container: magic "M3ID", format version u32, a
JSON architecture descriptor, then named arrays (u32 name length, utf-8
name, u32 ndim, u32 dims, little-endian float64 data). Round-trips are
bit-exact. Entries prefixed "stats." carry standardization statistics and
are tolerated as extras on load.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, ParseError
from .tensor import (
    Tensor,
    clamp_min,
    conv3d,
    conv3d_output_extents,
    dropout,
    elu,
    global_avg_pool3d,
    linear,
    relu,
    reshape,
    sigmoid,
    softmax_axis,
    sqrt,
    tsum,
)

__all__ = [
    "StudentConfig",
    "TeacherConfig",
    "AttentionState",
    "ModelParams",
    "StudentNet",
    "TeacherNet",
    "ClinicalNet",
    "build_model",
    "save_checkpoint",
    "load_checkpoint",
    "CKPT_MAGIC",
    "CKPT_VERSION",
]

CKPT_MAGIC = b"M3ID"
CKPT_VERSION = 1
COSINE_FLOOR = 1e-8


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class StudentConfig:
    root_channels: int = 16
    block_channels: tuple = (32, 64, 128)
    use_a2n: bool = True
    a2n_count: int = 2
    dropout_rate: float = 0.4
    head_dims: tuple = (128, 16)
    use_batch_norm: bool = True
    two_logit_head: bool = False

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        object.__setattr__(self, "head_dims", tuple(int(d) for d in self.head_dims))
        if len(self.block_channels) != 3:
            raise ContractViolation(f"expected 3 residual block widths, got {self.block_channels}")
        if any(c < 1 for c in (self.root_channels, *self.block_channels, *self.head_dims)):
            raise ContractViolation("channel and head widths must be positive")
        if len(self.head_dims) != 2:
            raise ContractViolation(f"expected 2 head widths, got {self.head_dims}")
        if self.use_a2n and self.block_channels[-1] % 2 != 0:
            raise ContractViolation("double attention halves the channel count; last block width must be even")
        if self.a2n_count < 0:
            raise ContractViolation("a2n_count must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractViolation(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def feature_channels(self) -> int:
        # the head consumes exactly the last residual/attention width
        return self.block_channels[-1]


@dataclass(frozen=True)
class TeacherConfig:
    student: StudentConfig = field(default_factory=StudentConfig)
    clinical_dims: tuple = (32, 32)

    def __post_init__(self):
        object.__setattr__(self, "clinical_dims", tuple(int(d) for d in self.clinical_dims))
        if len(self.clinical_dims) != 2 or any(d < 1 for d in self.clinical_dims):
            raise ContractViolation(f"clinical_dims must be 2 positive widths, got {self.clinical_dims}")

    @property
    def embedding_dim(self) -> int:
        return self.clinical_dims[1]


@dataclass
class AttentionState:
    """Intermediate products of the multi-modal attention (one batch)."""

    I: Tensor      # visual features [B, C, H, W, D]
    I_e: Tensor    # projected features [B, E, H, W, D]
    J: Tensor      # clinical embedding [B, E]
    G: Tensor      # raw gates relu(cosine) [B, L]
    U: Tensor      # normalized attention [B, L]
    f: Tensor      # attention-pooled features [B, C]

    @property
    def spatial_extents(self) -> tuple:
        return self.I.shape[2:]


# ---------------------------------------------------------------------------
# parameter store and layers


class ModelParams:
    """Named parameter tensors plus running-statistic buffers."""

    def __init__(self, arch: dict):
        self.arch = arch
        self.tensors: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def parameter(self, name: str, array) -> Tensor:
        if name in self.tensors or name in self.buffers:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)
        self.tensors[name] = t
        return t

    def buffer(self, name: str, array) -> np.ndarray:
        if name in self.tensors or name in self.buffers:
            raise ContractViolation(f"duplicate buffer name {name!r}")
        arr = np.asarray(array, dtype=np.float64)
        self.buffers[name] = arr
        return arr

    @property
    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def named_arrays(self) -> dict:
        out = {name: t.data for name, t in self.tensors.items()}
        out.update(self.buffers)
        return out

    def copy_arrays(self) -> dict:
        return {name: arr.copy() for name, arr in self.named_arrays().items()}

    def load_arrays(self, mapping: dict):
        """Overwrite parameters and buffers in place; names and shapes must match."""
        own = self.named_arrays()
        missing = sorted(set(own) - set(mapping))
        if missing:
            raise ContractViolation(f"missing arrays for {missing}")
        for name, arr in own.items():
            src = np.asarray(mapping[name], dtype=np.float64)
            if src.shape != arr.shape:
                raise ContractViolation(
                    f"shape mismatch for {name!r}: stored {src.shape}, model {arr.shape}"
                )
            arr[...] = src


def _he_normal(rng, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


class _Conv3d:
    def __init__(self, params, name, cin, cout, k, stride, padding, rng):
        self.stride, self.padding = stride, padding
        self.weight = params.parameter(f"{name}.weight",
                                       _he_normal(rng, cin * k ** 3, (cout, cin, k, k, k)))
        self.bias = params.parameter(f"{name}.bias", np.zeros(cout))

    def __call__(self, x):
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)


class _Linear:
    def __init__(self, params, name, fin, fout, rng):
        self.weight = params.parameter(f"{name}.weight", _he_normal(rng, fin, (fin, fout)))
        self.bias = params.parameter(f"{name}.bias", np.zeros(fout))

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class _BatchNorm:
    def __init__(self, params, name, channels, rng):
        self.gamma = params.parameter(f"{name}.gamma", np.ones(channels))
        self.beta = params.parameter(f"{name}.beta", np.zeros(channels))
        self.running_mean = params.buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = params.buffer(f"{name}.running_var", np.ones(channels))

    def __call__(self, x, mode):
        return batch_norm_layer(x, self, mode)


def batch_norm_layer(x, bn: _BatchNorm, mode: str):
    from .tensor import batch_norm
    return batch_norm(x, bn.gamma, bn.beta, bn.running_mean, bn.running_var, mode)


class _NoNorm:
    def __init__(self, *_args, **_kw):
        pass

    def __call__(self, x, mode):
        return x


class _ResidualBlock:
    """Pre-activation block: BN-ReLU-conv3(s) - BN-ReLU-conv3(1), plus shortcut."""

    def __init__(self, params, name, cin, cout, stride, use_bn, rng):
        norm = _BatchNorm if use_bn else _NoNorm
        self.stride = stride
        self.bn1 = norm(params, f"{name}.bn1", cin, rng)
        self.conv1 = _Conv3d(params, f"{name}.conv1", cin, cout, 3, stride, 1, rng)
        self.bn2 = norm(params, f"{name}.bn2", cout, rng)
        self.conv2 = _Conv3d(params, f"{name}.conv2", cout, cout, 3, 1, 1, rng)
        if cin != cout or stride != 1:
            self.shortcut = _Conv3d(params, f"{name}.shortcut", cin, cout, 1, stride, 0, rng)
        else:
            self.shortcut = None

    def __call__(self, x, mode):
        for axis, e in zip("xyz", x.shape[2:]):
            if e % self.stride != 0:
                raise ContractViolation(
                    f"axis {axis}: extent {e} is not divisible by block stride {self.stride}"
                )
        h = self.conv1(relu(self.bn1(x, mode)))
        h = self.conv2(relu(self.bn2(h, mode)))
        sc = x if self.shortcut is None else self.shortcut(x)
        return h + sc


class _DoubleAttention:
    """Gather-distribute second-order attention, shape preserving.

    Three 1x1x1 convs produce A [B,Cm,L], Bmap [B,Cn,L], V [B,Cn,L] with
    L = H*W*D; gather G = A @ softmax_L(Bmap)^T, distribute Z = G @
    softmax_Cn(V); a final 1x1x1 conv maps back to C and adds residually.
    """

    def __init__(self, params, name, channels, rng):
        cm = cn = channels // 2
        self.cm, self.cn = cm, cn
        self.conv_a = _Conv3d(params, f"{name}.conv_a", channels, cm, 1, 1, 0, rng)
        self.conv_b = _Conv3d(params, f"{name}.conv_b", channels, cn, 1, 1, 0, rng)
        self.conv_v = _Conv3d(params, f"{name}.conv_v", channels, cn, 1, 1, 0, rng)
        self.conv_out = _Conv3d(params, f"{name}.conv_out", cm, channels, 1, 1, 0, rng)

    def __call__(self, x):
        from .tensor import matmul, transpose
        b, c = x.shape[0], x.shape[1]
        spatial = x.shape[2:]
        l = int(np.prod(spatial))
        a = reshape(self.conv_a(x), (b, self.cm, l))
        attn_b = softmax_axis(reshape(self.conv_b(x), (b, self.cn, l)), axis=2)
        attn_v = softmax_axis(reshape(self.conv_v(x), (b, self.cn, l)), axis=1)
        gathered = matmul(a, transpose(attn_b, (0, 2, 1)))       # [B, Cm, Cn]
        distributed = matmul(gathered, attn_v)                   # [B, Cm, L]
        out = self.conv_out(reshape(distributed, (b, self.cm) + spatial))
        return x + out


# ---------------------------------------------------------------------------
# networks


def _check_volume(volume: Tensor):
    if volume.ndim != 5 or volume.shape[1] != 1:
        raise ContractViolation(f"expected volume [B,1,X,Y,Z], got shape {volume.shape}")
    for axis, e in zip("xyz", volume.shape[2:]):
        if e % 8 != 0:
            raise ContractViolation(f"axis {axis}: extent {e} is not divisible by 8")


class _FeatureExtractor:
    """Root conv + 3 stride-2 residual blocks + double-attention stack."""

    def __init__(self, params, config: StudentConfig, rng):
        c = config
        self.root = _Conv3d(params, "root", 1, c.root_channels, 3, 1, 1, rng)
        chans = [c.root_channels, *c.block_channels]
        self.blocks = [
            _ResidualBlock(params, f"block{i + 1}", chans[i], chans[i + 1], 2,
                           c.use_batch_norm, rng)
            for i in range(3)
        ]
        self.a2n = []
        if c.use_a2n:
            self.a2n = [
                _DoubleAttention(params, f"a2n{i}", c.block_channels[-1], rng)
                for i in range(c.a2n_count)
            ]

    def __call__(self, volume, mode, taps=None):
        x = self.root(volume)
        for blk in self.blocks:
            x = blk(x, mode)
        if taps is not None:
            taps["res_out"] = x
        for i, blk in enumerate(self.a2n):
            x = blk(x)
            if taps is not None:
                taps[f"a2n{i}"] = x
        return x


class _Head:
    """dropout -> FC(ELU) -> FC(ELU) -> FC -> sigmoid score (or 2 logits)."""

    def __init__(self, params, config: StudentConfig, rng):
        d1, d2 = config.head_dims
        cin = config.feature_channels
        out_units = 2 if config.two_logit_head else 1
        self.rate = config.dropout_rate
        self.two_logit = config.two_logit_head
        self.fc1 = _Linear(params, "head.fc1", cin, d1, rng)
        self.fc2 = _Linear(params, "head.fc2", d1, d2, rng)
        self.fc_out = _Linear(params, "head.out", d2, out_units, rng)

    def __call__(self, pooled, mode, rng=None, dropout_mask=None, taps=None):
        h = dropout(pooled, self.rate, mode, rng=rng, mask=dropout_mask)
        h = elu(self.fc1(h))
        if taps is not None:
            taps["fc1"] = h
        h = elu(self.fc2(h))
        out = self.fc_out(h)
        if self.two_logit:
            if taps is not None:
                taps["logits"] = out
            score = softmax_axis(out, axis=1)[:, 1]
        else:
            score = reshape(sigmoid(out), (out.shape[0],))
        return score


class StudentNet:
    kind = "student"

    def __init__(self, config: StudentConfig, rng):
        self.config = config
        self.params = ModelParams({"kind": self.kind, "config": _config_to_dict(config)})
        self.extractor = _FeatureExtractor(self.params, config, rng)
        self._extractor_names = set(self.params.tensors)
        self.head = _Head(self.params, config, rng)

    def forward(self, volume, mode: str = "eval", rng=None, dropout_mask=None,
                want_taps: bool = False):
        if not isinstance(volume, Tensor):
            volume = Tensor(volume)
        _check_volume(volume)
        taps = {} if want_taps else None
        feats = self.extractor(volume, mode, taps)
        pooled = global_avg_pool3d(feats)
        score = self.head(pooled, mode, rng=rng, dropout_mask=dropout_mask, taps=taps)
        if want_taps:
            return score, feats, taps
        return score, feats

    def feature_shape(self, extents) -> tuple:
        """(channels, x, y, z) after the extractor, via the conv shape rule."""
        e = tuple(int(v) for v in extents)
        e = conv3d_output_extents(e, (3, 3, 3), 1, 1)   # root
        for _ in range(3):
            e = conv3d_output_extents(e, (3, 3, 3), 2, 1)
            e = conv3d_output_extents(e, (3, 3, 3), 1, 1)
        return (self.config.feature_channels,) + e

    def extractor_param_names(self) -> set:
        return set(self._extractor_names)


class TeacherNet:
    """Multi-modal network: shared extractor + clinical gating + head."""

    kind = "teacher"

    def __init__(self, config: TeacherConfig, rng):
        self.config = config
        self.params = ModelParams({"kind": self.kind, "config": _config_to_dict(config)})
        self.extractor = _FeatureExtractor(self.params, config.student, rng)
        self._extractor_names = set(self.params.tensors)
        hidden, emb = config.clinical_dims
        self.clin_fc1 = _Linear(self.params, "clinical.fc1", 13, hidden, rng)
        self.clin_fc2 = _Linear(self.params, "clinical.fc2", hidden, emb, rng)
        c_feat = config.student.feature_channels
        self.proj1 = _Conv3d(self.params, "attention.proj1", c_feat, emb, 1, 1, 0, rng)
        self.proj2 = _Conv3d(self.params, "attention.proj2", emb, emb, 1, 1, 0, rng)
        self.head = _Head(self.params, config.student, rng)

    def clinical_encode(self, clinical) -> Tensor:
        if not isinstance(clinical, Tensor):
            clinical = Tensor(clinical)
        if clinical.ndim != 2 or clinical.shape[1] != 13:
            raise ContractViolation(f"expected clinical [B,13], got shape {clinical.shape}")
        return elu(self.clin_fc2(elu(self.clin_fc1(clinical))))

    def multimodal_attention(self, feats: Tensor, j: Tensor) -> AttentionState:
        """Cosine-gated pooling: g = relu(cos(I_e, J)), U = g / sum(g), f = sum U_i I_i.

        Denominators are clamped at 1e-8; an all-zero gate row falls back to
        uniform attention (exactly; the relu kills any gradient there).
        """
        i_e = self.proj2(elu(self.proj1(feats)))
        b, c = feats.shape[0], feats.shape[1]
        emb = i_e.shape[1]
        l = int(np.prod(feats.shape[2:]))
        i_flat = reshape(feats, (b, c, l))
        ie_flat = reshape(i_e, (b, emb, l))
        num = tsum(ie_flat * reshape(j, (b, emb, 1)), axis=1)                    # [B, L]
        den = clamp_min(sqrt(tsum(ie_flat * ie_flat, axis=1)), COSINE_FLOOR) \
            * clamp_min(sqrt(tsum(j * j, axis=1, keepdims=True)), COSINE_FLOOR)
        gates = relu(num / den)
        total = tsum(gates, axis=1, keepdims=True)
        fired = (total.data == 0.0).astype(np.float64)                           # constant
        u = (gates + Tensor(fired / l)) / (total + Tensor(fired))
        f = tsum(i_flat * reshape(u, (b, 1, l)), axis=2)
        return AttentionState(I=feats, I_e=i_e, J=j, G=gates, U=u, f=f)

    def forward(self, volume, clinical, mode: str = "eval", rng=None, dropout_mask=None,
                want_taps: bool = False):
        if not isinstance(volume, Tensor):
            volume = Tensor(volume)
        _check_volume(volume)
        taps = {} if want_taps else None
        feats = self.extractor(volume, mode, taps)
        j = self.clinical_encode(clinical)
        state = self.multimodal_attention(feats, j)
        score = self.head(state.f, mode, rng=rng, dropout_mask=dropout_mask, taps=taps)
        if want_taps:
            return score, state, taps
        return score, state

    def feature_shape(self, extents) -> tuple:
        e = tuple(int(v) for v in extents)
        e = conv3d_output_extents(e, (3, 3, 3), 1, 1)
        for _ in range(3):
            e = conv3d_output_extents(e, (3, 3, 3), 2, 1)
            e = conv3d_output_extents(e, (3, 3, 3), 1, 1)
        return (self.config.student.feature_channels,) + e

    def extractor_param_names(self) -> set:
        return set(self._extractor_names)


class ClinicalNet:
    """L2-regularized logistic regression on the 13 clinical scalars."""

    kind = "clinical"

    def __init__(self, config: dict | None = None, rng=None):
        self.config = dict(config or {})
        self.params = ModelParams({"kind": self.kind, "config": self.config})
        rng = rng or np.random.default_rng(0)
        self.weight = self.params.parameter("weight", _he_normal(rng, 13, (13, 1)))
        self.bias = self.params.parameter("bias", np.zeros(1))

    def forward(self, clinical, mode: str = "eval", **_ignored):
        if not isinstance(clinical, Tensor):
            clinical = Tensor(clinical)
        if clinical.ndim != 2 or clinical.shape[1] != 13:
            raise ContractViolation(f"expected clinical [B,13], got shape {clinical.shape}")
        score = reshape(sigmoid(linear(clinical, self.weight, self.bias)), (clinical.shape[0],))
        return score, None


# ---------------------------------------------------------------------------
# architecture descriptors and checkpoints


def _config_to_dict(config) -> dict:
    if isinstance(config, TeacherConfig):
        return {"student": _config_to_dict(config.student),
                "clinical_dims": list(config.clinical_dims)}
    if isinstance(config, StudentConfig):
        return {
            "root_channels": config.root_channels,
            "block_channels": list(config.block_channels),
            "use_a2n": config.use_a2n,
            "a2n_count": config.a2n_count,
            "dropout_rate": config.dropout_rate,
            "head_dims": list(config.head_dims),
            "use_batch_norm": config.use_batch_norm,
            "two_logit_head": config.two_logit_head,
        }
    return dict(config)


def student_config_from_dict(d: dict) -> StudentConfig:
    return StudentConfig(
        root_channels=d["root_channels"],
        block_channels=tuple(d["block_channels"]),
        use_a2n=d["use_a2n"],
        a2n_count=d["a2n_count"],
        dropout_rate=d["dropout_rate"],
        head_dims=tuple(d["head_dims"]),
        use_batch_norm=d.get("use_batch_norm", True),
        two_logit_head=d.get("two_logit_head", False),
    )


def build_model(arch: dict, rng=None):
    """Instantiate a model from an architecture descriptor (values then loadable)."""
    rng = rng or np.random.default_rng(0)
    kind = arch.get("kind")
    if kind == "student":
        return StudentNet(student_config_from_dict(arch["config"]), rng)
    if kind == "teacher":
        cfg = arch["config"]
        return TeacherNet(TeacherConfig(student=student_config_from_dict(cfg["student"]),
                                        clinical_dims=tuple(cfg["clinical_dims"])), rng)
    if kind == "clinical":
        return ClinicalNet(arch.get("config") or {}, rng)
    raise ParseError(f"unknown model kind {kind!r}")


def save_checkpoint(path, model, extras: dict | None = None):
    """Write model parameters (and optional "stats." extras) to a checkpoint."""
    entries = dict(model.params.named_arrays())
    for name, arr in (extras or {}).items():
        if not name.startswith("stats."):
            raise ContractViolation(f"extra entries must be namespaced 'stats.', got {name!r}")
        entries[name] = np.asarray(arr, dtype=np.float64)
    arch_blob = json.dumps(model.params.arch, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(arch_blob)))
        fh.write(arch_blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            blob = name.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    blob = fh.read(n)
    if len(blob) != n:
        raise ParseError(f"truncated checkpoint while reading {what} at offset {fh.tell()}")
    return blob


def load_checkpoint(path, expect_kind: str | None = None):
    """Read a checkpoint; returns (model, extras dict of "stats." arrays)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CKPT_MAGIC:
            raise ParseError(f"{path}: bad magic, not a checkpoint file")
        version = struct.unpack("<I", _read_exact(fh, 4, "version"))[0]
        if version != CKPT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {version}")
        arch_len = struct.unpack("<I", _read_exact(fh, 4, "descriptor length"))[0]
        try:
            arch = json.loads(_read_exact(fh, arch_len, "descriptor").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"{path}: bad architecture descriptor: {exc}") from exc
        n_entries = struct.unpack("<I", _read_exact(fh, 4, "entry count"))[0]
        entries = {}
        for _ in range(n_entries):
            name_len = struct.unpack("<I", _read_exact(fh, 4, "name length"))[0]
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            ndim = struct.unpack("<I", _read_exact(fh, 4, "ndim"))[0]
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "shape")) if ndim else ()
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 8 * count, f"data of {name!r}"), dtype="<f8")
            entries[name] = data.reshape(shape).astype(np.float64)
        if fh.read(1):
            raise ParseError(f"{path}: trailing bytes after last entry")
    model = build_model(arch)
    if expect_kind is not None and model.kind != expect_kind:
        raise ContractViolation(f"expected a {expect_kind} checkpoint, found {model.kind}")
    model_names = set(model.params.named_arrays())
    extras = {}
    weights = {}
    for name, arr in entries.items():
        if name in model_names:
            weights[name] = arr
        elif name.startswith("stats."):
            extras[name] = arr
        else:
            raise ParseError(f"{path}: unexpected entry {name!r} for this architecture")
    model.params.load_arrays(weights)
    return model, extras
