"""SOCS imaging, constant-threshold resist, and synthetic kernel sets.

Convolutions are linear (zero padded, "same" output) and evaluated by FFT on a
grid large enough that no wraparound occurs.
"""

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import fft as sfft

from .errors import ConfigError, DataError, NumericError

DEFAULT_I_TH = 0.225
DEFAULT_STEEPNESS = 50.0

# Desk-scale optics at 1 nm/px: 24 nm features sit near the resolution limit
# of a 0.016 cycles/px pupil; printing the raw design misses many sites at 3 nm.
DEFAULT_SIDE = 63
DEFAULT_COUNT = 4
DEFAULT_CUTOFF = 0.016
DEFAULT_DOSES = (0.98, 1.0, 1.02)
DEFAULT_INNER_DEFOCUS = 0.6
OVERSAMPLE = 5

_workers = 1


def set_fft_workers(n: int) -> None:
    global _workers
    _workers = max(1, int(n))


@dataclass(frozen=True, eq=False)
class KernelSet:
    alphas: np.ndarray  # (k,)
    kernels: np.ndarray  # (k, s, s) complex128, centered at s // 2

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=float)
        kernels = np.asarray(self.kernels, dtype=np.complex128)
        if kernels.ndim != 3 or kernels.shape[1] != kernels.shape[2]:
            raise ConfigError(f"kernels must have shape (k, s, s), got {kernels.shape}")
        if kernels.shape[1] % 2 == 0:
            raise ConfigError("kernel side must be odd")
        if alphas.shape != (kernels.shape[0],) or kernels.shape[0] < 1:
            raise ConfigError("need one nonnegative alpha per kernel and k >= 1")
        if (alphas < 0).any():
            raise ConfigError("alphas must be nonnegative")
        energy = float(np.sum(alphas * np.sum(np.abs(kernels) ** 2, axis=(1, 2))))
        if not energy > 0:
            raise ConfigError("kernel set has zero total energy")
        alphas.setflags(write=False)
        kernels.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "kernels", kernels)

    @property
    def count(self) -> int:
        return self.kernels.shape[0]

    @property
    def side(self) -> int:
        return self.kernels.shape[1]

    def rotated180(self) -> "KernelSet":
        return KernelSet(self.alphas, self.kernels[:, ::-1, ::-1])

    def downsampled(self, factor: int) -> "KernelSet":
        """Kernel set acting on ``factor``-pooled masks.

        Fine taps are summed into coarse taps, so the DC response (and hence
        the open-frame intensity) is preserved exactly.
        """
        if factor == 1:
            return self
        return _downsample_cached(self, factor)


@lru_cache(maxsize=32)
def _downsample_cached(kset: KernelSet, factor: int) -> KernelSet:
    s = kset.side
    r = s // 2
    offsets = np.arange(-r, r + 1)
    coarse = np.floor((offsets + factor // 2) / factor).astype(int)
    rc = int(max(abs(coarse.min()), coarse.max()))
    side = 2 * rc + 1
    out = np.zeros((kset.count, side, side), dtype=np.complex128)
    idx = coarse + rc
    for a, ia in enumerate(idx):
        for b, ib in enumerate(idx):
            out[:, ia, ib] += kset.kernels[:, a, b]
    return KernelSet(kset.alphas, out)


@dataclass(frozen=True)
class ResistParams:
    i_th: float = DEFAULT_I_TH
    steepness: float = DEFAULT_STEEPNESS

    def __post_init__(self):
        if not (self.i_th > 0 and self.steepness > 0):
            raise ConfigError("resist threshold and steepness must be positive")


@dataclass(frozen=True)
class Corner:
    kernels: KernelSet
    dose: float


@dataclass(frozen=True)
class ProcessCorners:
    nominal: Corner
    inner: Corner
    outer: Corner

    def __post_init__(self):
        sides = {self.nominal.kernels.side, self.inner.kernels.side, self.outer.kernels.side}
        if len(sides) != 1:
            raise ConfigError("all corners must share the kernel side")

    def as_list(self) -> list[Corner]:
        return [self.inner, self.nominal, self.outer]

    def downsampled(self, factor: int) -> "ProcessCorners":
        return ProcessCorners(
            *(Corner(c.kernels.downsampled(factor), c.dose) for c in (self.nominal, self.inner, self.outer))
        )

    def rotated180(self) -> "ProcessCorners":
        return ProcessCorners(
            *(Corner(c.kernels.rotated180(), c.dose) for c in (self.nominal, self.inner, self.outer))
        )


def make_synthetic_kernels(
    side: int = DEFAULT_SIDE,
    count: int = DEFAULT_COUNT,
    cutoff: float = DEFAULT_CUTOFF,
    defocus_phase: float = 0.0,
    normalize_open_frame: bool = True,
) -> KernelSet:
    """Deterministic stand-in for an eigendecomposed transmission model.

    Kernel ``i`` is the inverse FFT of a circular pupil of radius
    ``cutoff * (1 - i / (2 count))`` carrying the quadratic defocus phase
    ``exp(1j * defocus_phase * (r / cutoff)**2)``. Each kernel has unit L2
    norm. Weights decay as ``2**-i``; with ``normalize_open_frame`` they are
    rescaled by a common factor so a fully open mask images to intensity 1.
    """
    if side < 1 or side % 2 == 0:
        raise ConfigError(f"kernel side must be odd and positive, got {side}")
    if not 0 < cutoff <= 0.5:
        raise ConfigError(f"cutoff must lie in (0, 0.5], got {cutoff}")
    if count < 1:
        raise ConfigError("kernel count must be >= 1")
    # Pupil sampled on an oversampled odd grid, PSF cropped to side x side.
    n = OVERSAMPLE * side
    f = np.fft.fftfreq(n)
    r = np.hypot(f[:, None], f[None, :])
    phase = np.exp(1j * defocus_phase * (r / cutoff) ** 2)
    lo = n // 2 - side // 2
    kernels = np.empty((count, side, side), dtype=np.complex128)
    for i in range(count):
        pupil = (r <= cutoff * (1 - i / (2 * count))).astype(float) * phase
        h = np.fft.fftshift(np.fft.ifft2(pupil))[lo : lo + side, lo : lo + side]
        kernels[i] = h / np.linalg.norm(h)
    alphas = 2.0 ** -np.arange(count)
    if normalize_open_frame:
        dc = np.abs(kernels.sum(axis=(1, 2))) ** 2
        alphas = alphas / float(np.sum(alphas * dc))
    return KernelSet(alphas, kernels)


def make_corners(
    side: int = DEFAULT_SIDE,
    count: int = DEFAULT_COUNT,
    cutoff: float = DEFAULT_CUTOFF,
    doses: tuple[float, float, float] = DEFAULT_DOSES,
    inner_defocus: float = DEFAULT_INNER_DEFOCUS,
    pixel_size: float = 1.0,
) -> ProcessCorners:
    """Nominal, inner and outer corners. ``side`` (nm) and ``cutoff`` (cycles/nm)
    are converted to pixels at ``pixel_size`` nm/px."""
    if not pixel_size > 0:
        raise ConfigError("pixel_size must be positive")
    inner_dose, nominal_dose, outer_dose = doses
    side = max(1, int(round(side / pixel_size)))
    side += 1 - side % 2
    cutoff = cutoff * pixel_size
    if not inner_dose < 1.0 < outer_dose:
        raise ConfigError(f"corner doses must satisfy inner < 1 < outer, got {doses}")
    focus = make_synthetic_kernels(side, count, cutoff, 0.0)
    blur = make_synthetic_kernels(side, count, cutoff, inner_defocus)
    return ProcessCorners(
        nominal=Corner(focus, nominal_dose),
        inner=Corner(blur, inner_dose),
        outer=Corner(focus, outer_dose),
    )


@lru_cache(maxsize=64)
def _spectra(kset: KernelSet, shape: tuple[int, int]) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = shape
    s = kset.side
    fft_shape = (sfft.next_fast_len(h + s - 1), sfft.next_fast_len(w + s - 1))
    spec = sfft.fft2(kset.kernels, s=fft_shape, axes=(-2, -1), workers=_workers)
    spec.setflags(write=False)
    return spec, fft_shape


def convolve_fields(mask: np.ndarray, kset: KernelSet) -> np.ndarray:
    """Zero-padded "same" convolution of ``mask`` (..., H, W) with each kernel.

    Returns complex fields of shape (..., k, H, W).
    """
    h, w = mask.shape[-2:]
    spec, fft_shape = _spectra(kset, (h, w))
    c = kset.side // 2
    mf = sfft.fft2(mask, s=fft_shape, axes=(-2, -1), workers=_workers)
    full = sfft.ifft2(mf[..., None, :, :] * spec, axes=(-2, -1), workers=_workers)
    return full[..., c : c + h, c : c + w]


def convolve_adjoint(field_: np.ndarray, kset: KernelSet) -> np.ndarray:
    """Adjoint of :func:`convolve_fields`, summed over kernels.

    ``field_`` has shape (..., k, H, W); returns the complex (..., H, W) field
    ``sum_i flip(conj(h_i)) * field_i`` cropped back onto the mask grid.
    """
    h, w = field_.shape[-2:]
    spec, fft_shape = _spectra(kset, (h, w))
    c = kset.side // 2
    padded = np.zeros(field_.shape[:-2] + fft_shape, dtype=np.complex128)
    padded[..., c : c + h, c : c + w] = field_
    ff = sfft.fft2(padded, axes=(-2, -1), workers=_workers)
    back = sfft.ifft2(np.sum(ff * np.conj(spec), axis=-3), axes=(-2, -1), workers=_workers)
    return back[..., :h, :w]


def _check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=float)
    if not np.isfinite(mask).all():
        raise NumericError("mask contains non-finite values")
    return mask


def aerial_image(mask: np.ndarray, kset: KernelSet, dose: float = 1.0) -> np.ndarray:
    """``dose**2 * sum_i alpha_i |mask (*) h_i|**2`` on the mask grid."""
    mask = _check_mask(mask)
    fields = convolve_fields(mask, kset)
    power = fields.real**2 + fields.imag**2
    return dose**2 * np.einsum("...khw,k->...hw", power, kset.alphas)


def resist_hard(intensity: np.ndarray, rp: ResistParams) -> np.ndarray:
    return (np.asarray(intensity) > rp.i_th).astype(np.uint8)


def sigmoid(x):
    # Split by sign so neither branch overflows.
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def resist_soft(intensity: np.ndarray, rp: ResistParams) -> np.ndarray:
    return sigmoid(rp.steepness * (np.asarray(intensity, dtype=float) - rp.i_th))


def print_corners(mask: np.ndarray, corners: ProcessCorners, rp: ResistParams):
    """Binary prints (inner, nominal, outer)."""
    return tuple(
        resist_hard(aerial_image(mask, c.kernels, c.dose), rp)
        for c in (corners.inner, corners.nominal, corners.outer)
    )


def save_kernels(path, kset: KernelSet) -> None:
    """Write ``<path>.json`` header and ``<path>.bin`` little-endian complex payload."""
    path = Path(path)
    header = {
        "side": kset.side,
        "count": kset.count,
        "alphas": [float(a) for a in kset.alphas],
        "dtype": "c64",
        "endian": "little",
    }
    path.with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n")
    kset.kernels.astype("<c16").tofile(path.with_suffix(".bin"))


def load_kernels(path) -> KernelSet:
    path = Path(path)
    head_path = path.with_suffix(".json")
    bin_path = path.with_suffix(".bin")
    for p in (head_path, bin_path):
        if not p.exists():
            raise DataError(f"kernel file not found: {p}")
    header = json.loads(head_path.read_text())
    if header.get("endian", "little") != "little":
        raise DataError("only little-endian kernel payloads are supported")
    side, count = int(header["side"]), int(header["count"])
    raw = np.fromfile(bin_path, dtype="<c16")
    if raw.size != count * side * side:
        raise DataError(f"{bin_path}: expected {count * side * side} complex values, found {raw.size}")
    return KernelSet(np.asarray(header["alphas"], dtype=float), raw.reshape(count, side, side))
