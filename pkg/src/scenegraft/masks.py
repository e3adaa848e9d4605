"""Binary mask algebra and segmentation clients."""

from __future__ import annotations

import io
import logging
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence, Union, runtime_checkable

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import MaskValidationError, ResolutionError, TransportError

logger = logging.getLogger(__name__)

Resolution = Union[int, tuple[int, int]]


def as_resolution(res: Resolution) -> tuple[int, int]:
    if isinstance(res, (int, np.integer)):
        return (int(res), int(res))
    h, w = res
    return (int(h), int(w))


def validate_binary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise MaskValidationError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.dtype == bool:
        return mask.astype(np.uint8)
    if not np.isin(mask, (0, 1)).all():
        raise MaskValidationError("mask must contain only 0 and 1")
    return mask.astype(np.uint8)


def max_pool(mask: np.ndarray, resolution: Resolution) -> np.ndarray:
    """Downsample so that an output pixel is 1 iff any base pixel it covers is 1.

    Non-integer ratios use covering windows ``[floor(i*H/h), ceil((i+1)*H/h))``.
    """
    h, w = as_resolution(resolution)
    H, W = mask.shape
    if (h, w) == (H, W):
        return mask.copy()
    if H % h == 0 and W % w == 0:
        return mask.reshape(h, H // h, w, W // w).max(axis=(1, 3))
    rows = np.zeros((h, W), dtype=mask.dtype)
    for i in range(h):
        lo, hi = (i * H) // h, -((-(i + 1) * H) // h)
        rows[i] = mask[lo:max(hi, lo + 1)].max(axis=0)
    out = np.zeros((h, w), dtype=mask.dtype)
    for j in range(w):
        lo, hi = (j * W) // w, -((-(j + 1) * W) // w)
        out[:, j] = rows[:, lo:max(hi, lo + 1)].max(axis=1)
    return out


@dataclass(frozen=True)
class MaskPyramid:
    base: np.ndarray
    levels: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def level(self, resolution: Resolution) -> np.ndarray:
        res = as_resolution(resolution)
        if res == self.base.shape:
            return self.base
        try:
            return self.levels[res]
        except KeyError:
            raise ResolutionError(f"mask pyramid has no level at {res}; "
                                  f"available: {sorted(self.levels)}") from None

    @property
    def resolutions(self) -> list[tuple[int, int]]:
        return list(self.levels)

    def is_empty(self) -> bool:
        return not self.base.any()

    def complement(self) -> "MaskPyramid":
        return MaskPyramid(1 - self.base, {r: 1 - m for r, m in self.levels.items()})


def build_pyramid(base_mask: np.ndarray, resolutions: Iterable[Resolution]) -> MaskPyramid:
    base = validate_binary(base_mask)
    resolutions = [as_resolution(r) for r in resolutions]
    if not resolutions:
        raise MaskValidationError("at least one pyramid resolution is required")
    return MaskPyramid(base, {r: max_pool(base, r) for r in resolutions})


def dilate(mask: np.ndarray, radius_px: int) -> np.ndarray:
    """Dilation by a ``(2r+1) x (2r+1)`` square; pixels outside the frame count as 0."""
    if radius_px < 0:
        raise ValueError("radius_px must be >= 0")
    mask = validate_binary(mask)
    if radius_px == 0:
        return mask.copy()
    return ndimage.maximum_filter(mask, size=2 * radius_px + 1, mode="constant", cval=0)


def luminance(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114


def mask_to_png_bytes(mask: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray((validate_binary(mask) * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def mask_from_png_bytes(data: bytes) -> np.ndarray:
    arr = np.asarray(Image.open(io.BytesIO(data)).convert("L"))
    return (arr >= 128).astype(np.uint8)


def save_mask(mask: np.ndarray, path) -> None:
    Path(path).write_bytes(mask_to_png_bytes(mask))


def load_mask(path) -> np.ndarray:
    return mask_from_png_bytes(Path(path).read_bytes())


@runtime_checkable
class SegmentationClient(Protocol):
    def segment_person(self, image: np.ndarray) -> Optional[np.ndarray]:
        """Binary person mask at image resolution, or ``None`` when no person is found."""
        ...


@dataclass(frozen=True)
class ThresholdStubClient:
    """Luminance-threshold test double: pixels brighter than ``threshold`` are 'person'."""

    threshold: float = 0.5

    def segment_person(self, image: np.ndarray) -> Optional[np.ndarray]:
        mask = (luminance(image) > self.threshold).astype(np.uint8)
        return mask if mask.any() else None


def make_threshold_stub_client(threshold: float) -> ThresholdStubClient:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    return ThresholdStubClient(threshold)


def image_to_png_bytes(image: np.ndarray) -> bytes:
    from .imageio import to_uint8

    buf = io.BytesIO()
    Image.fromarray(to_uint8(image), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


class HTTPSegmentationClient:
    """POSTs ``image/png`` bytes; expects ``200`` with a PNG mask or ``204`` for no person."""

    def __init__(self, url: str, timeout: float = 60.0, retries: int = 2):
        self.url = url
        self.timeout = timeout
        self.retries = retries

    def segment_person(self, image: np.ndarray) -> Optional[np.ndarray]:
        import httpx

        payload = image_to_png_bytes(image)
        last = None
        for attempt in range(1, self.retries + 2):
            try:
                resp = httpx.post(self.url, content=payload, timeout=self.timeout,
                                  headers={"Content-Type": "image/png", "Accept": "image/png"})
            except httpx.HTTPError as exc:
                last = exc
                logger.warning("segmentation request failed (attempt %d): %s", attempt, exc)
                continue
            if resp.status_code == 204:
                return None
            if resp.status_code == 200:
                mask = mask_from_png_bytes(resp.content)
                if mask.shape != image.shape[:2]:
                    raise TransportError(f"mask shape {mask.shape} != image shape {image.shape[:2]}",
                                         attempt)
                return mask if mask.any() else None
            last = f"HTTP {resp.status_code}"
            if resp.status_code < 500:
                break
        raise TransportError(f"segmentation endpoint {self.url} failed: {last}", attempt)


class SubprocessSegmentationClient:
    """Runs ``command`` with ``{input}``/``{output}`` placeholders replaced by PNG paths.

    A missing or all-zero output file means no person was found.
    """

    def __init__(self, command: Sequence[str], timeout: float = 300.0):
        self.command = list(command)
        self.timeout = timeout

    def segment_person(self, image: np.ndarray) -> Optional[np.ndarray]:
        with tempfile.TemporaryDirectory() as tmp:
            src, dst = Path(tmp, "input.png"), Path(tmp, "mask.png")
            src.write_bytes(image_to_png_bytes(image))
            argv = [a.replace("{input}", str(src)).replace("{output}", str(dst)) for a in self.command]
            try:
                proc = subprocess.run(argv, capture_output=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise TransportError(f"segmentation command failed: {exc}") from exc
            if proc.returncode != 0:
                raise TransportError(f"segmentation command exited {proc.returncode}: "
                                     f"{proc.stderr.decode(errors='replace').strip()[:200]}")
            if not dst.exists():
                return None
            mask = load_mask(dst)
        return mask if mask.any() else None
