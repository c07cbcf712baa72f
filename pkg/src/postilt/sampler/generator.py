"""Style-modulated multi-level generator G(Z, z) -> mask logits.

The coarsest pyramid level runs a residual trunk whose instance statistics
are re-styled by AdaIN with w = f(z); finer levels add their own strided
features to the upsampled coarse output and apply plain residual blocks.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError, UsageError
from ..layout import LayoutRaster, RasterPyramid, build_pyramid
from ..resample import bicubic_matrix
from . import layers as L


@dataclass(frozen=True)
class Architecture:
    levels: int = 3
    channels: tuple[int, ...] = (16, 32, 64)  # by level, finest first
    n_style_blocks: int = 4
    style_dim: int = 64
    latent_dim: int = 256
    mlp_hidden: int = 128
    local_blocks: int = 1
    head_factor: int = 1
    logit_bound: float = 8.0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.levels < 1 or len(self.channels) != self.levels:
            raise ConfigError(f"need one channel width per level, got {self.channels} for {self.levels} levels")
        if min(self.channels) < 1 or self.style_dim < 1 or self.latent_dim < 1 or self.mlp_hidden < 1:
            raise ConfigError("architecture widths must be positive")
        if self.n_style_blocks < 0 or self.local_blocks < 0 or self.head_factor < 1:
            raise ConfigError("block counts must be >= 0 and head_factor >= 1")
        if self.logit_bound <= 0:
            raise ConfigError("logit_bound must be positive")

    @property
    def divisor(self) -> int:
        """Design sides must be multiples of this."""
        return self.head_factor * 2**self.levels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "channels" in known:
            known["channels"] = tuple(known["channels"])
        return cls(**known)


def param_shapes(arch: Architecture) -> dict[str, tuple[int, ...]]:
    """Every tensor name and shape, in checkpoint order."""
    s: dict[str, tuple[int, ...]] = {}
    dz, hid, dw = arch.latent_dim, arch.mlp_hidden, arch.style_dim
    for name, (o, i) in {"fc1": (hid, dz), "fc2": (hid, hid), "fc3": (dw, hid)}.items():
        s[f"style.{name}.W"] = (o, i)
        s[f"style.{name}.b"] = (o,)
    top = arch.levels - 1
    for lvl in range(top, -1, -1):
        c = arch.channels[lvl]
        s[f"l{lvl}.down.W"] = (c, 1, 4, 4)
        s[f"l{lvl}.down.b"] = (c,)
        if lvl == top:
            for b in range(arch.n_style_blocks):
                p = f"l{lvl}.sb{b}"
                for j in (1, 2):
                    s[f"{p}.ada{j}.W"] = (2 * c, dw)
                    s[f"{p}.ada{j}.b"] = (2 * c,)
                    s[f"{p}.conv{j}.W"] = (c, c, 3, 3)
                    s[f"{p}.conv{j}.b"] = (c,)
        else:
            for b in range(arch.local_blocks):
                p = f"l{lvl}.rb{b}"
                for j in (1, 2):
                    s[f"{p}.conv{j}.W"] = (c, c, 3, 3)
                    s[f"{p}.conv{j}.b"] = (c,)
        c_out = arch.channels[lvl - 1] if lvl > 0 else c
        s[f"l{lvl}.up.W"] = (c, c_out, 4, 4)
        s[f"l{lvl}.up.b"] = (c_out,)
    s["head.W"] = (1, arch.channels[0], 3, 3)
    s["head.b"] = (1,)
    return s


class GeneratorParams:
    """Named parameter tensors plus their architecture.

    ``version`` increases on every mutation made through this object; tapes
    recorded against an older version refuse to run backward.
    """

    def __init__(self, arch: Architecture, tensors: dict[str, np.ndarray]):
        shapes = param_shapes(arch)
        if set(shapes) != set(tensors):
            missing = sorted(set(shapes) - set(tensors))
            extra = sorted(set(tensors) - set(shapes))
            raise ShapeError(f"parameter names do not match architecture (missing {missing[:3]}, extra {extra[:3]})")
        for name, shape in shapes.items():
            if tuple(tensors[name].shape) != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.arch = arch
        self.tensors = {name: np.asarray(tensors[name]) for name in shapes}
        self.version = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    @property
    def dtype(self):
        return self.tensors["head.W"].dtype

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "GeneratorParams":
        return GeneratorParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "GeneratorParams":
        return GeneratorParams(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def assign(self, name: str, value) -> None:
        value = np.asarray(value, dtype=self.tensors[name].dtype)
        if value.shape != self.tensors[name].shape:
            raise ShapeError(f"{name}: expected shape {self.tensors[name].shape}, got {value.shape}")
        self.tensors[name] = value.copy()
        self.version += 1

    def add_(self, deltas: dict[str, np.ndarray]) -> None:
        for k, d in deltas.items():
            self.tensors[k] = (self.tensors[k] + d).astype(self.tensors[k].dtype)
        self.version += 1

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())

    def zero_style_affines(self) -> None:
        """gamma = 1, beta = 0 in every style block; output becomes z-independent."""
        for k in self.tensors:
            if ".ada" in k:
                self.tensors[k] = np.zeros_like(self.tensors[k])
        self.version += 1

    def equal(self, other: "GeneratorParams") -> bool:
        return self.arch == other.arch and all(np.array_equal(self[k], other[k]) for k in self.tensors)


def init_params(arch: Architecture, seed: int = 0, dtype=np.float32, affine_gain: float = 0.5) -> GeneratorParams:
    """He-normal weights, zero biases; residual branches start damped."""
    rng = np.random.default_rng(np.random.Philox(key=seed))
    out = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".b"):
            out[name] = np.zeros(shape, dtype=dtype)
            continue
        if ".ada" in name:
            std = affine_gain / np.sqrt(shape[1])
        elif ".up." in name:
            std = np.sqrt(2.0 / (shape[0] * 4))  # each output sees ~C_in * (k/stride)^2 taps
        else:
            std = np.sqrt(2.0 / int(np.prod(shape[1:])))
        if name.endswith("conv2.W"):
            std *= 0.5
        if name == "head.W":
            std *= 0.1
        out[name] = (std * rng.standard_normal(shape)).astype(dtype)
    return GeneratorParams(arch, out)


@dataclass(frozen=True)
class LatentSpec:
    dim: int = 256
    scale: float = 1.0

    def __post_init__(self):
        if self.dim < 1 or not self.scale >= 0:
            raise ConfigError("latent dim must be >= 1 and scale >= 0")


@dataclass
class Tape:
    params: GeneratorParams
    version: int
    caches: dict = field(default_factory=dict)
    shape: tuple[int, ...] = ()
    used: bool = False


def _check_latent(z: np.ndarray, arch: Architecture) -> np.ndarray:
    z = np.asarray(z)
    if z.ndim == 1:
        z = z[None]
    if z.ndim != 2 or z.shape[1] != arch.latent_dim:
        raise ShapeError(f"latent must have dimension {arch.latent_dim}, got shape {z.shape}")
    return z


def _style_forward(z, params, caches=None):
    h = z
    for j, name in enumerate(("fc1", "fc2", "fc3")):
        h, c_lin = L.linear_forward(h, params[f"style.{name}.W"], params[f"style.{name}.b"])
        if caches is not None:
            caches[f"style.{name}"] = c_lin
        if j < 2:
            h, c_act = L.leaky_relu_forward(h)
            if caches is not None:
                caches[f"style.{name}.act"] = c_act
    return h


def style_map(z, params: GeneratorParams) -> np.ndarray:
    """w = f(z): two hidden leaky-ReLU layers, linear output of width style_dim."""
    z = _check_latent(z, params.arch).astype(params.dtype)
    return _style_forward(z, params)


def _style_backward(gw, caches, grads):
    g = gw
    for j, name in reversed(list(enumerate(("fc1", "fc2", "fc3")))):
        if j < 2:
            g = L.leaky_relu_backward(g, caches[f"style.{name}.act"])
        g, dW, db = L.linear_backward(g, caches[f"style.{name}"])
        grads[f"style.{name}.W"] += dW
        grads[f"style.{name}.b"] += db
    return g


def adain(x: np.ndarray, w: np.ndarray, affine_W: np.ndarray, affine_b: np.ndarray) -> np.ndarray:
    """AdaIN on a (C, H, W) map or an (N, C, H, W) batch with (gamma, beta) = affine(w)."""
    single = x.ndim == 3
    xb = x[None] if single else x
    wb = np.atleast_2d(w)
    v = wb @ affine_W.T + affine_b
    c = xb.shape[1]
    y, _ = L.adain_forward(xb, 1 + v[:, :c], v[:, c:])
    return y[0] if single else y


def _pyramid_inputs(pyr, arch: Architecture, dtype) -> list[np.ndarray]:
    if isinstance(pyr, LayoutRaster):
        pyr = build_pyramid(pyr, arch.levels, arch.head_factor)
    grids = pyr.arrays() if isinstance(pyr, RasterPyramid) else [np.asarray(g) for g in pyr]
    if len(grids) != arch.levels:
        raise ShapeError(f"pyramid has {len(grids)} levels, architecture expects {arch.levels}")
    h0, w0 = grids[0].shape
    if h0 % 2**arch.levels or w0 % 2**arch.levels:
        raise ShapeError(f"level-0 grid {h0}x{w0} must be divisible by {2**arch.levels}")
    for lvl, g in enumerate(grids):
        if g.shape != (h0 >> lvl, w0 >> lvl):
            raise ShapeError(f"pyramid level {lvl} has shape {g.shape}, expected {(h0 >> lvl, w0 >> lvl)}")
    return [(2.0 * g - 1.0).astype(dtype)[None, None] for g in grids]


def generator_forward(pyr, z, params: GeneratorParams, record: bool = True):
    """Logits Y of shape (N, H, W) for latents z of shape (N, latent_dim).

    ``pyr`` may be a RasterPyramid, a list of level grids, or a LayoutRaster
    (built into a pyramid per the architecture). Returns ``(Y, tape)``; the
    tape is None when ``record`` is False.
    """
    arch = params.arch
    dt = params.dtype
    z = _check_latent(z, arch).astype(dt)
    n = z.shape[0]
    inputs = _pyramid_inputs(pyr, arch, dt)
    c: dict = {}
    cache = c if record else None
    w = _style_forward(z, params, cache)
    top = arch.levels - 1
    prev = None
    for lvl in range(top, -1, -1):
        x_in = np.broadcast_to(inputs[lvl], (n,) + inputs[lvl].shape[1:])
        a, c[f"l{lvl}.down"] = L.conv2d_forward(x_in, params[f"l{lvl}.down.W"], params[f"l{lvl}.down.b"], 2, 1)
        h, c[f"l{lvl}.down.act"] = L.leaky_relu_forward(a)
        if prev is not None:
            h = h + prev
        if lvl == top:
            ch = arch.channels[lvl]
            for b in range(arch.n_style_blocks):
                p = f"l{lvl}.sb{b}"
                r = h
                for j in (1, 2):
                    v, c[f"{p}.ada{j}.lin"] = L.linear_forward(w, params[f"{p}.ada{j}.W"], params[f"{p}.ada{j}.b"])
                    r, c[f"{p}.ada{j}"] = L.adain_forward(r, 1 + v[:, :ch], v[:, ch:])
                    r, c[f"{p}.act{j}"] = L.leaky_relu_forward(r)
                    r, c[f"{p}.conv{j}"] = L.conv2d_forward(r, params[f"{p}.conv{j}.W"], params[f"{p}.conv{j}.b"], 1, 1)
                h = h + r
        else:
            for b in range(arch.local_blocks):
                p = f"l{lvl}.rb{b}"
                r = h
                for j in (1, 2):
                    r, c[f"{p}.act{j}"] = L.leaky_relu_forward(r)
                    r, c[f"{p}.conv{j}"] = L.conv2d_forward(r, params[f"{p}.conv{j}.W"], params[f"{p}.conv{j}.b"], 1, 1)
                h = h + r
        prev, c[f"l{lvl}.up"] = L.conv_transpose2d_forward(h, params[f"l{lvl}.up.W"], params[f"l{lvl}.up.b"], 2, 1)
    prev, c["l0.up.act"] = L.leaky_relu_forward(prev)
    pre, c["head"] = L.conv2d_forward(prev, params["head.W"], params["head.b"], 1, 1)
    pre = pre[:, 0]
    if arch.head_factor > 1:
        hh, ww = pre.shape[1:]
        ry = bicubic_matrix(hh, hh * arch.head_factor).astype(dt)
        rx = bicubic_matrix(ww, ww * arch.head_factor).astype(dt)
        c["resize"] = (ry, rx)
        pre = ry @ pre @ rx.T
    y, c["bound"] = L.tanh_bound_forward(pre, dt.type(arch.logit_bound))
    if not record:
        return y, None
    return y, Tape(params, params.version, c, y.shape)


def generator_backward(tape: Tape, dY: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients for a scalar loss with dL/dY = ``dY``.

    Gradients are summed over the batch. A tape can be consumed once, and
    only while its parameters are unchanged since the forward pass.
    """
    if tape is None:
        raise UsageError("forward pass was run without recording a tape")
    if tape.used:
        raise UsageError("tape already consumed by a backward pass")
    if tape.params.version != tape.version:
        raise UsageError("stale tape: parameters changed after the forward pass")
    dY = np.asarray(dY)
    if dY.shape != tape.shape:
        raise ShapeError(f"dL/dY shape {dY.shape} does not match logits {tape.shape}")
    tape.used = True
    params, arch, c = tape.params, tape.params.arch, tape.caches
    dt = params.dtype
    grads = params.zeros_like()
    g = L.tanh_bound_backward(dY.astype(dt), c["bound"])
    if arch.head_factor > 1:
        ry, rx = c["resize"]
        g = ry.T @ g @ rx
    g, dW, db = L.conv2d_backward(g[:, None], c["head"])
    grads["head.W"] += dW
    grads["head.b"] += db
    g = L.leaky_relu_backward(g, c["l0.up.act"])
    top = arch.levels - 1
    gw = None
    for lvl in range(arch.levels):
        g, dW, db = L.conv_transpose2d_backward(g, c[f"l{lvl}.up"])
        grads[f"l{lvl}.up.W"] += dW
        grads[f"l{lvl}.up.b"] += db
        # g is now dL/dh at the block-stack output
        if lvl == top:
            for b in reversed(range(arch.n_style_blocks)):
                p = f"l{lvl}.sb{b}"
                gr = g
                for j in (2, 1):
                    gr, dW, db = L.conv2d_backward(gr, c[f"{p}.conv{j}"])
                    grads[f"{p}.conv{j}.W"] += dW
                    grads[f"{p}.conv{j}.b"] += db
                    gr = L.leaky_relu_backward(gr, c[f"{p}.act{j}"])
                    gr, dgamma, dbeta = L.adain_backward(gr, c[f"{p}.ada{j}"])
                    dv = np.concatenate([dgamma, dbeta], axis=1)
                    dwj, dW, db = L.linear_backward(dv, c[f"{p}.ada{j}.lin"])
                    grads[f"{p}.ada{j}.W"] += dW
                    grads[f"{p}.ada{j}.b"] += db
                    gw = dwj if gw is None else gw + dwj
                g = g + gr
        else:
            for b in reversed(range(arch.local_blocks)):
                p = f"l{lvl}.rb{b}"
                gr = g
                for j in (2, 1):
                    gr, dW, db = L.conv2d_backward(gr, c[f"{p}.conv{j}"])
                    grads[f"{p}.conv{j}.W"] += dW
                    grads[f"{p}.conv{j}.b"] += db
                    gr = L.leaky_relu_backward(gr, c[f"{p}.act{j}"])
                g = g + gr
        # g flows both into the previous level's up path and this level's down path
        ga = L.leaky_relu_backward(g, c[f"l{lvl}.down.act"])
        _, dW, db = L.conv2d_backward(ga, c[f"l{lvl}.down"])
        grads[f"l{lvl}.down.W"] += dW
        grads[f"l{lvl}.down.b"] += db
    if gw is not None:
        _style_backward(gw, c, grads)
    return grads


@dataclass
class CandidateBatch:
    latents: np.ndarray  # (K, dim)
    logits: np.ndarray  # (K, H, W)
    masks: np.ndarray  # (K, H, W) uint8
    tape: Tape | None = None

    def __len__(self) -> int:
        return self.latents.shape[0]


def draw_latents(k: int, spec: LatentSpec, rng_seed: int) -> np.ndarray:
    """Row 0 is the zero latent; rows 1.. are N(0, scale^2 I) from a Philox stream."""
    if k < 1:
        raise ConfigError("K must be >= 1")
    rng = np.random.default_rng(np.random.Philox(key=int(rng_seed)))
    z = np.zeros((k, spec.dim))
    z[1:] = spec.scale * rng.standard_normal((k - 1, spec.dim))
    return z


def threshold_logits(y: np.ndarray) -> np.ndarray:
    return (y > 0.5).astype(np.uint8)


def sample_candidates(
    design: LayoutRaster,
    k: int,
    spec: LatentSpec,
    params: GeneratorParams,
    rng_seed: int,
    record: bool = False,
    chunk: int = 8,
) -> CandidateBatch:
    """K candidate masks M_k = 1[Y_k > 0.5] for one design."""
    if spec.dim != params.arch.latent_dim:
        raise ConfigError(f"latent dim {spec.dim} does not match generator ({params.arch.latent_dim})")
    z = draw_latents(k, spec, rng_seed)
    pyr = build_pyramid(design, params.arch.levels, params.arch.head_factor)
    if record:
        y, tape = generator_forward(pyr, z, params, record=True)
    else:
        tape = None
        y = np.concatenate([generator_forward(pyr, z[i : i + chunk], params, record=False)[0] for i in range(0, k, chunk)])
    if y.shape[1:] != design.shape:
        raise ShapeError(f"generator output {y.shape[1:]} differs from design {design.shape}")
    return CandidateBatch(z, y, threshold_logits(y), tape)
