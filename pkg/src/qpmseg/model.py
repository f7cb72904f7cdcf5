"""Segmentation model family: dual-encoder late-fusion net plus its baselines.

Stage s of the encoder runs at scale H/2^s (stage 0 keeps full resolution,
every later stage opens with a strided 2x2 downsampling block), so with the
default five stages the stage-2 fusion sits at H/4 x W/4. Dual variants run
separate angle/phase encoders up to the fusion stage, fuse there, and share
one encoder tail plus bottleneck. The decoder mirrors the encoder, upsamples
with 2x2 transposed convs, consumes dual-source skips below the fusion
stage, and carries a deep-supervision head on every stage except the
lowest-resolution one.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .qts import read_qts, write_qts
from .tensor import DTYPES, ShapeError, Tensor

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5
NUM_CLASSES = 2  # background / cell, softmax over channel axis

FUSION_OPS = ("mha", "concat1x1", "crossgate", "early_fusion", "angles_only", "phase_only")
DUAL_OPS = ("mha", "concat1x1", "crossgate")


class ConfigError(ValueError):
    """Invalid model or run configuration."""


@dataclass(frozen=True)
class ModelConfig:
    n_stages: int = 5
    widths: tuple = (8, 16, 32, 64, 128)
    blocks_per_stage: int = 2
    fusion_stage: int = 2
    fusion_op: str = "mha"
    mha_heads: int = 4
    angle_channel_mask: tuple = (True, True, True, True)
    deep_supervision: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "angle_channel_mask", tuple(bool(b) for b in self.angle_channel_mask))
        self.validate()

    def validate(self):
        if self.fusion_op not in FUSION_OPS:
            raise ConfigError(f"fusion_op {self.fusion_op!r} not in {FUSION_OPS}")
        if self.n_stages < 3:
            raise ConfigError("need at least 3 stages")
        if len(self.widths) != self.n_stages:
            raise ConfigError(f"{len(self.widths)} widths for {self.n_stages} stages")
        if any(w < 1 for w in self.widths):
            raise ConfigError("widths must be positive")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        if len(self.angle_channel_mask) != 4:
            raise ConfigError("angle_channel_mask needs exactly 4 entries")
        if self.fusion_op != "phase_only" and not any(self.angle_channel_mask):
            raise ConfigError("at least one angle channel must be enabled")
        if self.fusion_op in DUAL_OPS and not 1 <= self.fusion_stage <= self.n_stages - 2:
            raise ConfigError(
                f"fusion_stage {self.fusion_stage} outside [1, {self.n_stages - 2}]"
            )
        if self.fusion_op == "mha":
            if self.mha_heads < 1:
                raise ConfigError("mha_heads must be >= 1")
            bad = [w for w in self.widths if w % self.mha_heads]
            if bad:
                raise ConfigError(f"widths {bad} not divisible by mha_heads={self.mha_heads}")

    @property
    def n_angles(self):
        return sum(self.angle_channel_mask)

    @property
    def input_channels(self):
        if self.fusion_op == "phase_only":
            return 1
        if self.fusion_op == "early_fusion":
            return self.n_angles + 1
        if self.fusion_op == "angles_only":
            return self.n_angles
        return None  # dual variants: two stems

    @property
    def supervised_stages(self):
        if self.deep_supervision:
            return tuple(range(self.n_stages - 1))
        return (0,)

    def to_kv(self):
        return OrderedDict(
            n_stages=str(self.n_stages),
            widths=",".join(str(w) for w in self.widths),
            blocks_per_stage=str(self.blocks_per_stage),
            fusion_stage=str(self.fusion_stage),
            fusion_op=self.fusion_op,
            mha_heads=str(self.mha_heads),
            angle_channel_mask=",".join("1" if b else "0" for b in self.angle_channel_mask),
            deep_supervision="true" if self.deep_supervision else "false",
            seed=str(self.seed),
        )

    @classmethod
    def from_kv(cls, kv):
        known = set(cls().to_kv())
        unknown = set(kv) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        base = {}
        if "n_stages" in kv:
            base["n_stages"] = int(kv["n_stages"])
        if "widths" in kv:
            base["widths"] = tuple(int(x) for x in kv["widths"].split(","))
        if "blocks_per_stage" in kv:
            base["blocks_per_stage"] = int(kv["blocks_per_stage"])
        if "fusion_stage" in kv:
            base["fusion_stage"] = int(kv["fusion_stage"])
        if "fusion_op" in kv:
            base["fusion_op"] = kv["fusion_op"]
        if "mha_heads" in kv:
            base["mha_heads"] = int(kv["mha_heads"])
        if "angle_channel_mask" in kv:
            parts = kv["angle_channel_mask"].split(",")
            base["angle_channel_mask"] = tuple(p.strip() in ("1", "true") for p in parts)
        if "deep_supervision" in kv:
            base["deep_supervision"] = kv["deep_supervision"].lower() in ("1", "true")
        if "seed" in kv:
            base["seed"] = int(kv["seed"])
        return cls(**base)


@dataclass
class DeepSupOutputs:
    """Per-scale logits from the decoder's supervision heads, keyed by stage."""

    logits: dict  # stage index -> Tensor (N, 2, H/2^s, W/2^s)

    @property
    def full_res(self):
        return self.logits[0]

    def stages(self):
        return sorted(self.logits)


class Model:
    """A built network: named parameter tensors plus the forward pass."""

    def __init__(self, cfg, dtype="f32"):
        if dtype not in ("f32", "f64"):
            raise ConfigError(f"model dtype must be f32 or f64, got {dtype}")
        self.cfg = cfg
        self.dtype = dtype
        self._np_dtype = DTYPES[dtype]
        self.params = OrderedDict()
        self._rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
        self._build()
        del self._rng

    # -- parameter construction ------------------------------------------------

    def _param(self, name, array):
        t = Tensor(array.astype(self._np_dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _conv_params(self, name, cout, cin, k, gain="leaky"):
        fan_in = cin * k * k
        if gain == "leaky":
            std = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2) / fan_in)
        else:
            std = math.sqrt(1.0 / fan_in)
        self._param(f"{name}.w", self._rng.normal(0.0, std, size=(cout, cin, k, k)))
        self._param(f"{name}.b", np.zeros(cout))

    def _norm_params(self, name, c):
        self._param(f"{name}.gamma", np.ones(c))
        self._param(f"{name}.beta", np.zeros(c))

    def _block_params(self, name, cin, cout, k=3):
        self._conv_params(f"{name}.conv", cout, cin, k, gain="leaky")
        self._norm_params(f"{name}.norm", cout)

    def _stage_params(self, prefix, stage, cin):
        cfg = self.cfg
        cout = cfg.widths[stage]
        if stage > 0:
            self._block_params(f"{prefix}.s{stage}.down", cin, cout, k=2)
            cin = cout
        for b in range(cfg.blocks_per_stage):
            self._block_params(f"{prefix}.s{stage}.b{b}", cin, cout)
            cin = cout

    def _build(self):
        cfg = self.cfg
        top = cfg.n_stages - 1
        if cfg.fusion_op in DUAL_OPS:
            cin_a, cin_p = cfg.n_angles, 1
            for s in range(cfg.fusion_stage + 1):
                self._stage_params("enc_a", s, cin_a if s == 0 else cfg.widths[s - 1])
                self._stage_params("enc_p", s, cin_p if s == 0 else cfg.widths[s - 1])
            self._fusion_params(cfg.widths[cfg.fusion_stage])
            for s in range(cfg.fusion_stage + 1, cfg.n_stages):
                self._stage_params("enc", s, cfg.widths[s - 1])
            for s in range(cfg.fusion_stage):
                c = cfg.widths[s]
                self._conv_params(f"skip.s{s}.conv", c, 2 * c, 1, gain="leaky")
                self._norm_params(f"skip.s{s}.norm", c)
        else:
            for s in range(cfg.n_stages):
                self._stage_params("enc", s, cfg.input_channels if s == 0 else cfg.widths[s - 1])

        for b in range(cfg.blocks_per_stage):
            self._block_params(f"bottleneck.b{b}", cfg.widths[top], cfg.widths[top])

        for s in range(top, -1, -1):
            c = cfg.widths[s]
            if s < top:
                up_std = math.sqrt(1.0 / (cfg.widths[s + 1] * 4))
                self._param(f"dec.s{s}.up.w",
                            self._rng.normal(0.0, up_std, size=(cfg.widths[s + 1], c, 2, 2)))
            cin = 2 * c
            for b in range(cfg.blocks_per_stage):
                self._block_params(f"dec.s{s}.b{b}", cin, c)
                cin = c
        for s in cfg.supervised_stages:
            self._conv_params(f"head.s{s}.conv", NUM_CLASSES, cfg.widths[s], 1, gain="linear")

    def _fusion_params(self, c):
        op = self.cfg.fusion_op
        if op == "mha":
            self._conv_params("fuse.align_a", c, c, 1, gain="linear")
            self._conv_params("fuse.align_p", c, c, 1, gain="linear")
            for proj in ("q", "k", "v", "o"):
                self._conv_params(f"fuse.{proj}", c, c, 1, gain="linear")
            # the residual branches start at zero so the block begins as an
            # identity on the aligned angle stream and attention fades in
            self.params["fuse.o.w"].data = np.zeros_like(self.params["fuse.o.w"].data)
            self._norm_params("fuse.ln1", c)
            self._conv_params("fuse.mlp1", 4 * c, c, 1, gain="leaky")
            self._conv_params("fuse.mlp2", c, 4 * c, 1, gain="linear")
            self.params["fuse.mlp2.w"].data = np.zeros_like(self.params["fuse.mlp2.w"].data)
            self._norm_params("fuse.ln2", c)
        elif op == "concat1x1":
            self._conv_params("fuse.proj", c, 2 * c, 1, gain="leaky")
            self._norm_params("fuse.norm", c)
        elif op == "crossgate":
            self._conv_params("fuse.gate_a", c, c, 1, gain="linear")
            self._conv_params("fuse.gate_p", c, c, 1, gain="linear")
            self._conv_params("fuse.proj", c, 2 * c, 1, gain="leaky")
            self._norm_params("fuse.norm", c)

    # -- forward ----------------------------------------------------------------

    def _conv(self, name, x, stride=1, padding=0):
        return ops.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                          stride=stride, padding=padding)

    def _block(self, name, x, down=False):
        if down:
            h = ops.downsample_stride2(x, self.params[f"{name}.conv.w"], self.params[f"{name}.conv.b"])
        else:
            k = self.params[f"{name}.conv.w"].data.shape[-1]
            h = self._conv(f"{name}.conv", x, padding=(k - 1) // 2)
        h = ops.instance_norm(h, self.params[f"{name}.norm.gamma"], self.params[f"{name}.norm.beta"],
                              eps=NORM_EPS)
        return ops.leaky_relu(h, LEAKY_SLOPE)

    def _stage(self, prefix, stage, x):
        if stage > 0:
            x = self._block(f"{prefix}.s{stage}.down", x, down=True)
        for b in range(self.cfg.blocks_per_stage):
            x = self._block(f"{prefix}.s{stage}.b{b}", x)
        return x

    def _tokens(self, x):
        n, c, h, w = x.shape
        return ops.transpose(ops.reshape(x, (n, c, h * w)), (0, 2, 1))  # (N, T, C)

    def _maps(self, tok, h, w):
        n, t, c = tok.shape
        return ops.reshape(ops.transpose(tok, (0, 2, 1)), (n, c, h, w))

    def _layer_norm_tokens(self, name, x):
        n, c, h, w = x.shape
        tok = self._tokens(x)
        tok = ops.layer_norm(tok, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                             eps=NORM_EPS)
        return self._maps(tok, h, w)

    def mha_attend(self, aa, pp):
        """Directed attention: aa supplies queries, pp keys and values.

        Both inputs are already channel-aligned maps (N, C, h, w); returns the
        output-projected attention context at the same shape.
        """
        n, c, h, w = aa.shape
        heads = self.cfg.mha_heads
        dh = c // heads
        q = self._split_heads(self._conv("fuse.q", aa), heads)   # (N*heads, T, dh)
        k = self._split_heads(self._conv("fuse.k", pp), heads)
        v = self._split_heads(self._conv("fuse.v", pp), heads)
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        attn = ops.softmax(scores, axis=-1)
        ctx = self._merge_heads(ops.matmul(attn, v), n, heads, h, w)
        return self._conv("fuse.o", ctx)

    def _mha_fuse(self, a, p):
        if a.shape != p.shape:
            raise ShapeError(f"fusion inputs misaligned: {a.shape} vs {p.shape}")
        aa = self._conv("fuse.align_a", a)
        pp = self._conv("fuse.align_p", p)
        z = self._layer_norm_tokens("fuse.ln1", ops.add(aa, self.mha_attend(aa, pp)))
        m = self._conv("fuse.mlp2", ops.leaky_relu(self._conv("fuse.mlp1", z), LEAKY_SLOPE))
        return self._layer_norm_tokens("fuse.ln2", ops.add(z, m))

    def _split_heads(self, x, heads):
        n, c, h, w = x.shape
        dh = c // heads
        tok = self._tokens(x)                                   # (N, T, C)
        tok = ops.reshape(tok, (n, h * w, heads, dh))
        tok = ops.transpose(tok, (0, 2, 1, 3))                  # (N, heads, T, dh)
        return ops.reshape(tok, (n * heads, h * w, dh))

    def _merge_heads(self, x, n, heads, h, w):
        t = h * w
        dh = x.shape[-1]
        tok = ops.reshape(x, (n, heads, t, dh))
        tok = ops.transpose(tok, (0, 2, 1, 3))
        tok = ops.reshape(tok, (n, t, heads * dh))
        return self._maps(tok, h, w)

    def _concat1x1_fuse(self, a, p):
        if a.shape != p.shape:
            raise ShapeError(f"fusion inputs misaligned: {a.shape} vs {p.shape}")
        h = self._conv("fuse.proj", ops.concat([a, p], axis=1))
        h = ops.instance_norm(h, self.params["fuse.norm.gamma"], self.params["fuse.norm.beta"],
                              eps=NORM_EPS)
        return ops.leaky_relu(h, LEAKY_SLOPE)

    def _crossgate_fuse(self, a, p):
        if a.shape != p.shape:
            raise ShapeError(f"fusion inputs misaligned: {a.shape} vs {p.shape}")
        ga = ops.sigmoid(self._conv("fuse.gate_a", p))  # phase gates the angle stream
        gp = ops.sigmoid(self._conv("fuse.gate_p", a))  # and vice versa
        h = self._conv("fuse.proj", ops.concat([ops.mul(a, ga), ops.mul(p, gp)], axis=1))
        h = ops.instance_norm(h, self.params["fuse.norm.gamma"], self.params["fuse.norm.beta"],
                              eps=NORM_EPS)
        return ops.leaky_relu(h, LEAKY_SLOPE)

    def fuse(self, a, p):
        return {"mha": self._mha_fuse, "concat1x1": self._concat1x1_fuse,
                "crossgate": self._crossgate_fuse}[self.cfg.fusion_op](a, p)

    def dual_skip(self, stage, a, p):
        h = ops.conv2d(ops.concat([a, p], axis=1), self.params[f"skip.s{stage}.conv.w"],
                       self.params[f"skip.s{stage}.conv.b"])
        h = ops.instance_norm(h, self.params[f"skip.s{stage}.norm.gamma"],
                              self.params[f"skip.s{stage}.norm.beta"], eps=NORM_EPS)
        return ops.leaky_relu(h, LEAKY_SLOPE)

    def _check_inputs(self, angles, phase):
        cfg = self.cfg
        needs_angles = cfg.fusion_op != "phase_only"
        needs_phase = cfg.fusion_op != "angles_only"
        if needs_angles:
            if angles is None:
                raise ShapeError("this configuration requires angle input")
            if angles.ndim != 4 or angles.shape[1] != cfg.n_angles:
                raise ShapeError(
                    f"angles must be (N, {cfg.n_angles}, H, W), got {angles.shape}")
        if needs_phase:
            if phase is None:
                raise ShapeError("this configuration requires phase input")
            if phase.ndim != 4 or phase.shape[1] != 1:
                raise ShapeError(f"phase must be (N, 1, H, W), got {phase.shape}")
        if needs_angles and needs_phase:
            if angles.shape[0] != phase.shape[0] or angles.shape[2:] != phase.shape[2:]:
                raise ShapeError(
                    f"angles {angles.shape} and phase {phase.shape} are not aligned")
        ref = angles if needs_angles else phase
        h, w = ref.shape[2:]
        div = 2 ** (cfg.n_stages - 1)
        if h % div or w % div:
            raise ShapeError(f"spatial extent {h}x{w} not divisible by {div}")
        if ref.dtype != self.dtype:
            raise ShapeError(f"input dtype {ref.dtype} != model dtype {self.dtype}")

    def forward(self, angles, phase):
        """Run the configured network; returns logits per supervised decoder stage."""
        cfg = self.cfg
        self._check_inputs(angles, phase)
        top = cfg.n_stages - 1
        skips = {}

        if cfg.fusion_op in DUAL_OPS:
            xa, xp = angles, phase
            feats_a, feats_p = [], []
            for s in range(cfg.fusion_stage + 1):
                xa = self._stage("enc_a", s, xa)
                xp = self._stage("enc_p", s, xp)
                feats_a.append(xa)
                feats_p.append(xp)
            fused = self.fuse(xa, xp)
            skips[cfg.fusion_stage] = fused
            for s in range(cfg.fusion_stage):
                skips[s] = self.dual_skip(s, feats_a[s], feats_p[s])
            x = fused
            for s in range(cfg.fusion_stage + 1, cfg.n_stages):
                x = self._stage("enc", s, x)
                skips[s] = x
        else:
            if cfg.fusion_op == "early_fusion":
                x = ops.concat([angles, phase], axis=1)
            elif cfg.fusion_op == "angles_only":
                x = angles
            else:
                x = phase
            for s in range(cfg.n_stages):
                x = self._stage("enc", s, x)
                skips[s] = x

        for b in range(cfg.blocks_per_stage):
            x = self._block(f"bottleneck.b{b}", x)

        outputs = {}
        for s in range(top, -1, -1):
            if s < top:
                x = ops.conv_transpose2d(x, self.params[f"dec.s{s}.up.w"], stride=2)
            x = ops.concat([x, skips[s]], axis=1)
            for b in range(cfg.blocks_per_stage):
                x = self._block(f"dec.s{s}.b{b}", x)
            if s in cfg.supervised_stages:
                outputs[s] = self._conv(f"head.s{s}.conv", x).check_finite(f"logits at stage {s}")
        return DeepSupOutputs(logits=outputs)

    # -- bookkeeping --------------------------------------------------------------

    def parameters(self):
        return self.params

    def param_count(self):
        return int(sum(t.size for t in self.params.values()))

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None

    def state_arrays(self):
        return OrderedDict((k, t.data) for k, t in self.params.items())

    def load_state_arrays(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)[:3]}..., "
                              f"extra {sorted(extra)[:3]}...")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=self._np_dtype)
            if arr.shape != t.data.shape:
                raise ConfigError(f"parameter {k}: shape {arr.shape} != {t.data.shape}")
            t.data = arr
            t.grad = None


def build_model(cfg, dtype="f32"):
    return Model(cfg, dtype=dtype)


def encoder_stage_forward(model, prefix, stage, x):
    """One encoder stage; returns (features, skip) where the skip is the stage output."""
    f = model._stage(prefix, stage, x)
    return f, f


def param_count(model):
    return model.param_count()


# ---------------------------------------------------------------------------
# checkpoints: manifest (key=value) + one QTS file per parameter


def save_checkpoint(model, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["format = qpmseg-checkpoint-v1", f"dtype = {model.dtype}"]
    for k, v in model.cfg.to_kv().items():
        lines.append(f"{k} = {v}")
    for name, tensor in model.params.items():
        write_qts(directory / f"{name}.qts", tensor.data)
        lines.append(f"param = {name}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    return directory


def _parse_manifest(text):
    cfg_kv, names = {}, []
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"manifest line {ln}: expected key = value")
        key, val = (part.strip() for part in line.split("=", 1))
        if key == "param":
            names.append(val)
        else:
            cfg_kv[key] = val
    return cfg_kv, names


def load_checkpoint(directory):
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.is_file():
        raise FileNotFoundError(f"missing checkpoint manifest {manifest}")
    cfg_kv, names = _parse_manifest(manifest.read_text())
    if cfg_kv.pop("format", None) != "qpmseg-checkpoint-v1":
        raise ConfigError("unrecognized checkpoint format")
    dtype = cfg_kv.pop("dtype", "f32")
    cfg = ModelConfig.from_kv(cfg_kv)
    model = Model(cfg, dtype=dtype)
    state = {name: read_qts(directory / f"{name}.qts") for name in names}
    model.load_state_arrays(state)
    return model
