"""
Underwater image formation and its inversion.

Forward model, per channel c and pixel at range z (meters):

    I_c = J_c exp(-beta_d_c z) + b_inf_c (1 - exp(-beta_b_c z))

Dewatering estimates the backscatter curve from the darkest pixels per depth bin,
subtracts it, compensates attenuation and white balances the result.
"""

import json
import logging
import math
from typing import Literal, Optional, Sequence, Union

import numpy as np
from data import DATA_DIR
from models.rasters import MetricDepthMap, RgbImage
from models.water import (
    BackscatterFit,
    ChannelFit,
    IlluminationMap,
    WaterPreset,
    WaterProperties,
)
from scipy import ndimage
from scipy.optimize import least_squares
from utils.errors import (
    DegenerateDepth,
    FitFailure,
    InvalidConfig,
    InvalidRaster,
    ShapeMismatch,
)

logger = logging.getLogger("pipeline.stdout")

DepthLike = Union[MetricDepthMap, np.ndarray]
Attenuation = Literal["illumination", "constant", "known"]

WATER_TYPES_FILE = DATA_DIR / "water_types.json"

# (b_inf, beta_b, j_prime, beta_d_prime)
FIT_LOWER = np.array([0.0, 0.0, 0.0, 0.0])
FIT_UPPER = np.array([1.0, 5.0, 1.0, 5.0])
FIT_STARTS = np.geomspace(0.05, 5.0, 8)
FIT_TOLERANCE = 1e-14

LSAC_MAX_ITERATIONS = 100_000
NEIGHBORS = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])


def range_plane(depth: DepthLike) -> np.ndarray:
    """
    Range in meters per pixel. Holes of a sparse MetricDepthMap count as zero range.

    Raises:
        InvalidRaster: If a plain array holds negative or non-finite values.
    """
    if isinstance(depth, MetricDepthMap):
        return np.where(depth.valid, depth.data, 0.0)
    z = np.asarray(depth, dtype=np.float64)
    if z.ndim != 2 or not np.all(np.isfinite(z)) or z.min() < 0:
        raise InvalidRaster("range must be a finite 2-D array >= 0")
    return z


def _check_shapes(image: RgbImage, z: np.ndarray):
    if image.shape != z.shape:
        raise ShapeMismatch(f"image {image.shape} and depth {z.shape} differ")


def synthesize_underwater(j: RgbImage, depth: DepthLike, water: WaterProperties) -> RgbImage:
    """
    Renders a scene seen through water.

    Examples:
        J 0.8, z 2, beta_d = beta_b = 0.5, b_inf 0.2 gives about 0.4207.

    Raises:
        ShapeMismatch: If image and depth differ in size.
    """
    z = range_plane(depth)
    _check_shapes(j, z)
    zz = z[:, :, np.newaxis]
    direct = j.data * np.exp(-np.asarray(water.beta_d) * zz)
    backscatter = np.asarray(water.b_inf) * (1.0 - np.exp(-np.asarray(water.beta_b) * zz))
    return RgbImage(np.clip(direct + backscatter, 0.0, 1.0))


def backscatter_samples(
    image: RgbImage, z: np.ndarray, n_bins: int, percentile: float
) -> list[tuple[np.ndarray, np.ndarray]]:
    """
    Per channel, the (range, intensity) samples of the darkest `percentile` fraction
    of pixels in each of `n_bins` equal-width range bins.

    Raises:
        DegenerateDepth: If fewer than two bins hold pixels.
    """
    valid = np.isfinite(z) & (z > 0)
    if not valid.any():
        raise DegenerateDepth("no pixel has a positive range")
    zv = z[valid]
    low, high = float(zv.min()), float(zv.max())
    if not high > low:
        raise DegenerateDepth(f"range is constant ({low} m), backscatter cannot be fitted")
    bins = np.minimum(((zv - low) / (high - low) * n_bins).astype(np.int64), n_bins - 1)
    occupied = np.unique(bins)
    if occupied.size < 2:
        raise DegenerateDepth("all pixels fall in a single range bin")
    pixels = image.data[valid]
    samples = []
    for channel in range(3):
        zs, values = [], []
        for index in occupied:
            members = np.flatnonzero(bins == index)
            count = math.ceil(percentile * members.size)
            order = np.argsort(pixels[members, channel], kind="stable")[:count]
            zs.append(zv[members[order]])
            values.append(pixels[members[order], channel])
        samples.append((np.concatenate(zs), np.concatenate(values)))
    return samples


def _curve(params: np.ndarray, z: np.ndarray) -> np.ndarray:
    b_inf, beta_b, j_prime, beta_d_prime = params
    return b_inf * (1.0 - np.exp(-beta_b * z)) + j_prime * np.exp(-beta_d_prime * z)


def fit_channel(z: np.ndarray, values: np.ndarray) -> ChannelFit:
    """
    Bounded least squares fit of one channel's backscatter curve with deterministic
    starts over a log-spaced beta grid; the lowest residual wins.

    Raises:
        FitFailure: If no start converges.
    """
    b0 = float(np.clip(values.max(), FIT_LOWER[0], FIT_UPPER[0]))
    best = None
    for beta in FIT_STARTS:
        x0 = np.array([b0, beta, 0.0, beta])
        try:
            result = least_squares(
                lambda params: _curve(params, z) - values,
                x0,
                bounds=(FIT_LOWER, FIT_UPPER),
                method="trf",
                ftol=FIT_TOLERANCE,
                xtol=FIT_TOLERANCE,
                gtol=FIT_TOLERANCE,
                max_nfev=2000,
            )
        except (ValueError, np.linalg.LinAlgError) as e:
            logger.debug(f"Backscatter start beta={beta:.3f} failed: {e}")
            continue
        if result.status < 0 or not np.isfinite(result.cost):
            continue
        if best is None or result.cost < best.cost:
            best = result
    if best is None:
        raise FitFailure("no start of the backscatter fit converged")
    params = np.clip(best.x, FIT_LOWER, FIT_UPPER)
    rms = float(np.sqrt(np.mean((_curve(params, z) - values) ** 2)))
    return ChannelFit(
        b_inf=float(params[0]),
        beta_b=float(params[1]),
        j_prime=float(params[2]),
        beta_d_prime=float(params[3]),
        rms_residual=rms,
    )


def estimate_backscatter(
    image: RgbImage, depth: DepthLike, n_bins: int = 10, percentile: float = 0.01
) -> BackscatterFit:
    """
    Fits B(z) = b_inf (1 - exp(-beta_b z)) + j' exp(-beta_d' z) per channel to the
    darkest pixels of each range bin.

    Raises:
        InvalidConfig: If n_bins < 2 or percentile is outside (0, 0.5].
        ShapeMismatch: If image and depth differ in size.
        DegenerateDepth: If the range is constant.
        FitFailure: If no start converges for some channel.
    """
    if n_bins < 2:
        raise InvalidConfig(f"need at least 2 range bins, got {n_bins}")
    if not 0 < percentile <= 0.5:
        raise InvalidConfig(f"percentile must lie in (0, 0.5], got {percentile}")
    z = range_plane(depth)
    _check_shapes(image, z)
    samples = backscatter_samples(image, z, n_bins, percentile)
    channels = tuple(fit_channel(zs, values) for zs, values in samples)
    residuals = np.concatenate(
        [channel.evaluate(zs) - values for channel, (zs, values) in zip(channels, samples)]
    )
    fit = BackscatterFit(
        channels=channels,
        rms_residual=float(np.sqrt(np.mean(residuals**2))),
        n_points=int(residuals.size),
    )
    logger.info(
        "Backscatter fit: b_inf "
        + ", ".join(f"{c.b_inf:.4f}" for c in channels)
        + " beta_b "
        + ", ".join(f"{c.beta_b:.4f}" for c in channels)
        + f" (rms {fit.rms_residual:.2e}, {fit.n_points} points)"
    )
    return fit


def local_space_average_color(
    direct: np.ndarray, p: float = 0.5, eps: float = 1e-5, f: float = 2.0
) -> IlluminationMap:
    """
    Iterated 4-neighbor averaging blended with the input,
    a <- direct * p + mean4(a) * (1 - p), until the largest change is below eps.
    The illuminant is f * a.

    Args:
        direct (np.ndarray): Direct signal, shape (H, W, 3) or (H, W).
        p (float): Blend weight of the input, in (0, 1].
        eps (float): Convergence threshold on the max per-pixel change.
        f (float): Illuminant scale.

    Raises:
        InvalidConfig: If p is outside (0, 1].
    """
    if not 0 < p <= 1:
        raise InvalidConfig(f"p must lie in (0, 1], got {p}")
    data = np.asarray(direct, dtype=np.float64)
    planar = data.ndim == 2
    if planar:
        data = data[:, :, np.newaxis]
    counts = ndimage.convolve(np.ones(data.shape[:2]), NEIGHBORS, mode="constant")
    isolated = counts == 0
    counts = np.where(isolated, 1.0, counts)

    estimate = np.zeros_like(data)
    change, iterations = math.inf, 0
    while change >= eps and iterations < LSAC_MAX_ITERATIONS:
        mean = np.stack(
            [
                ndimage.convolve(estimate[:, :, c], NEIGHBORS, mode="constant") / counts
                for c in range(data.shape[2])
            ],
            axis=-1,
        )
        mean[isolated] = estimate[isolated]
        updated = data * p + mean * (1.0 - p)
        change = float(np.max(np.abs(updated - estimate)))
        estimate = updated
        iterations += 1
    if change >= eps:
        logger.warning(f"Local average did not converge in {iterations} iterations")
    illuminant = f * estimate
    if planar:
        illuminant = np.repeat(illuminant, 3, axis=2)
    return IlluminationMap(np.maximum(illuminant, 0.0), iterations=iterations, residual=change)


def gray_world(image: Union[RgbImage, np.ndarray]) -> RgbImage:
    """
    Scales channels to a common mean. Channels with zero mean are left untouched.
    """
    data = np.array(image.data if isinstance(image, RgbImage) else image, dtype=np.float64)
    means = data.reshape(-1, 3).mean(axis=0)
    target = means.mean()
    scale = np.where(means > 0, target / np.where(means > 0, means, 1.0), 1.0)
    return RgbImage(np.clip(data * scale, 0.0, 1.0))


def _constant_attenuation(direct: np.ndarray, z: np.ndarray) -> np.ndarray:
    betas = np.zeros(3)
    for c in range(3):
        keep = (direct[:, :, c] > 0) & (z > 0)
        if np.unique(z[keep]).size < 2:
            continue
        slope = np.polyfit(z[keep], np.log(direct[:, :, c][keep]), 1)[0]
        betas[c] = max(-slope, 0.0)
    return np.broadcast_to(betas, direct.shape)


def _illumination_attenuation(direct: np.ndarray, z: np.ndarray, p: float, eps: float, f: float):
    illuminant = local_space_average_color(direct, p, eps, f).data
    zz = np.repeat(z[:, :, np.newaxis], 3, axis=2)
    usable = (zz > 0) & (illuminant > 0)
    safe_e = np.where(usable, illuminant, 1.0)
    safe_z = np.where(usable, zz, 1.0)
    beta = np.where(usable, -np.log(safe_e) / safe_z, 0.0)
    return np.maximum(beta, 0.0)


def recover_scene(
    image: RgbImage,
    depth: DepthLike,
    fit: BackscatterFit,
    attenuation: Attenuation = "illumination",
    beta_d: Optional[Sequence[float]] = None,
    white_balance: bool = True,
    p: float = 0.5,
    eps: float = 1e-5,
    f: float = 2.0,
) -> RgbImage:
    """
    Removes backscatter and compensates attenuation.

    Attenuation modes:
        illumination: beta_d(z) = -ln(E) / z from the local space average illuminant E.
        constant: one beta_d per channel from a linear fit of ln(D) against z.
        known: the given per-channel `beta_d`.

    Raises:
        ShapeMismatch: If image and depth differ in size.
        InvalidConfig: If mode is "known" without three beta_d values, or unknown.
    """
    z = range_plane(depth)
    _check_shapes(image, z)
    direct = np.maximum(image.data - fit.backscatter(z), 0.0)
    if attenuation == "known":
        if beta_d is None or len(beta_d) != 3:
            raise InvalidConfig("known attenuation needs three beta_d values")
        beta = np.broadcast_to(np.asarray(beta_d, dtype=np.float64), direct.shape)
    elif attenuation == "constant":
        beta = _constant_attenuation(direct, z)
    elif attenuation == "illumination":
        beta = _illumination_attenuation(direct, z, p, eps, f)
    else:
        raise InvalidConfig(f"unknown attenuation mode '{attenuation}'")
    with np.errstate(over="ignore", invalid="ignore"):
        scene = direct * np.exp(beta * z[:, :, np.newaxis])
    scene = np.clip(np.nan_to_num(scene, nan=0.0, posinf=1.0), 0.0, 1.0)
    if white_balance:
        return gray_world(scene)
    return RgbImage(scene)


def water_type_presets() -> list[WaterPreset]:
    """
    The ten shipped water types, oceanic (blue-dominant) then coastal (green-dominant).
    Coefficients are illustrative, not measured.
    """
    with open(WATER_TYPES_FILE, encoding="utf-8") as handle:
        presets = json.load(handle)["presets"]
    return [WaterPreset.model_validate(preset) for preset in presets]


def water_preset(name: str) -> WaterPreset:
    """
    Raises:
        InvalidConfig: If no preset has that name.
    """
    presets = {preset.name: preset for preset in water_type_presets()}
    if name not in presets:
        raise InvalidConfig(f"unknown water type '{name}', choose from {sorted(presets)}")
    return presets[name]
