"""Portable-anymap I/O and saliency-weighted image perturbations.

Noise draws come from a counter-based generator (splitmix64 mixing into an
inverse normal CDF), so identical inputs produce bit-identical outputs on
every platform, which keeps golden-file tests portable.  Perturbations only
touch pixels with positive saliency.
"""

from __future__ import annotations

from dataclasses import dataclass
from statistics import NormalDist

from .errors import DimMismatch, MalformedHeader, TruncatedBody
from .seeding import GOLDEN, MASK64, mix64

_NORMAL = NormalDist()


@dataclass(frozen=True)
class RasterImage:
    """8-bit row-major raster, grayscale (1 channel) or RGB (3 channels)."""

    width: int
    height: int
    channels: int
    samples: bytes

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"bad dimensions {self.width}x{self.height}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        expected = self.width * self.height * self.channels
        if len(self.samples) != expected:
            raise ValueError(
                f"expected {expected} samples, got {len(self.samples)}"
            )


@dataclass(frozen=True)
class SaliencyMap:
    """Per-pixel perturbation weights in [0, 1], row-major."""

    width: int
    height: int
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) != self.width * self.height:
            raise ValueError(
                f"expected {self.width * self.height} values, got {len(self.values)}"
            )
        for v in self.values:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"saliency value {v} outside [0, 1]")


def uniform_saliency(width: int, height: int, value: float = 1.0) -> SaliencyMap:
    return SaliencyMap(width, height, (value,) * (width * height))


def saliency_from_image(image: RasterImage) -> SaliencyMap:
    """Interpret a grayscale image as a saliency map (255 = fully salient)."""
    if image.channels != 1:
        raise DimMismatch("saliency maps must be grayscale")
    return SaliencyMap(
        image.width, image.height, tuple(b / 255.0 for b in image.samples)
    )


def _standard_normal(seed: int, index: int) -> float:
    """Deterministic N(0,1) draw for (seed, counter), identical everywhere."""
    word = mix64((seed + (index + 1) * GOLDEN) & MASK64)
    u = ((word >> 11) + 0.5) / (1 << 53)  # strictly inside (0, 1)
    return _NORMAL.inv_cdf(u)


def _check_dims(image: RasterImage, saliency: SaliencyMap) -> None:
    if (image.width, image.height) != (saliency.width, saliency.height):
        raise DimMismatch(
            f"image is {image.width}x{image.height}, saliency is "
            f"{saliency.width}x{saliency.height}"
        )


def apply_noise(
    image: RasterImage, saliency: SaliencyMap, sigma: float, seed: int
) -> RasterImage:
    """Add seeded Gaussian noise scaled by sigma and per-pixel saliency.

    Every 8-bit sample p gets ``clamp(in[p] + round(sigma*sal*g_p), 0, 255)``
    with one normal draw per sample in raster order (channels interleaved);
    a pixel's saliency weights all of its channels.
    """
    _check_dims(image, saliency)
    if sigma < 0.0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return image
    out = bytearray(image.samples)
    channels = image.channels
    for p in range(len(out)):
        weight = saliency.values[p // channels]
        if weight == 0.0:
            continue
        delta = round(sigma * weight * _standard_normal(seed, p))
        out[p] = min(255, max(0, out[p] + delta))
    return RasterImage(image.width, image.height, channels, bytes(out))


def apply_occlusion(
    image: RasterImage,
    saliency: SaliencyMap,
    threshold: float = 0.5,
    fill: int = 128,
) -> RasterImage:
    """Fill pixels whose saliency exceeds the threshold with a flat value."""
    _check_dims(image, saliency)
    if not 0 <= fill <= 255:
        raise ValueError(f"fill must be an 8-bit value, got {fill}")
    out = bytearray(image.samples)
    channels = image.channels
    for pixel, weight in enumerate(saliency.values):
        if weight > threshold:
            for c in range(channels):
                out[pixel * channels + c] = fill
    return RasterImage(image.width, image.height, channels, bytes(out))


def apply_mosaic(
    image: RasterImage,
    saliency: SaliencyMap,
    threshold: float = 0.5,
    block: int = 8,
) -> RasterImage:
    """Replace salient pixels with their block's per-channel mean."""
    _check_dims(image, saliency)
    if block < 1:
        raise ValueError(f"block size must be >= 1, got {block}")
    out = bytearray(image.samples)
    channels = image.channels
    for by in range(0, image.height, block):
        for bx in range(0, image.width, block):
            ys = range(by, min(by + block, image.height))
            xs = range(bx, min(bx + block, image.width))
            count = len(ys) * len(xs)
            for c in range(channels):
                mean = round(
                    sum(
                        image.samples[(y * image.width + x) * channels + c]
                        for y in ys
                        for x in xs
                    )
                    / count
                )
                for y in ys:
                    for x in xs:
                        pixel = y * image.width + x
                        if saliency.values[pixel] > threshold:
                            out[pixel * channels + c] = mean
    return RasterImage(image.width, image.height, channels, bytes(out))


PERTURBATIONS = ("noise", "occlusion", "mosaic")


def perturb(
    image: RasterImage,
    saliency: SaliencyMap,
    kind: str = "noise",
    *,
    sigma: float = 64.0,
    seed: int = 0,
    threshold: float = 0.5,
    block: int = 8,
) -> RasterImage:
    """Dispatch to one of the perturbation families by name."""
    if kind == "noise":
        return apply_noise(image, saliency, sigma, seed)
    if kind == "occlusion":
        return apply_occlusion(image, saliency, threshold)
    if kind == "mosaic":
        return apply_mosaic(image, saliency, threshold, block)
    raise ValueError(f"unknown perturbation {kind!r}, expected one of {PERTURBATIONS}")


# --- portable anymap (P5/P6, maxval 255) ---


def _read_header_tokens(data: bytes) -> tuple[list[bytes], int]:
    """Return the first four header tokens and the body start offset."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < 4:
        if i >= len(data):
            raise MalformedHeader("unexpected end of header")
        ch = data[i : i + 1]
        if ch in b" \t\r\n":
            i += 1
        elif ch == b"#":
            while i < len(data) and data[i : i + 1] not in b"\r\n":
                i += 1
        else:
            start = i
            while i < len(data) and data[i : i + 1] not in b" \t\r\n#":
                i += 1
            tokens.append(data[start:i])
    if i >= len(data) or data[i : i + 1] not in b" \t\r\n":
        raise MalformedHeader("missing whitespace after maxval")
    return tokens, i + 1  # exactly one whitespace byte separates header and body


def read_pnm(data: bytes) -> RasterImage:
    """Parse binary P5 (grayscale) or P6 (RGB) bytes with maxval 255."""
    tokens, offset = _read_header_tokens(data)
    magic = tokens[0]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise MalformedHeader(f"unsupported magic {magic!r}, expected P5 or P6")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise MalformedHeader(f"non-numeric header field in {tokens[1:4]}") from exc
    if width < 1 or height < 1:
        raise MalformedHeader(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise MalformedHeader(f"unsupported maxval {maxval}, only 255 is handled")
    body = data[offset:]
    expected = width * height * channels
    if len(body) < expected:
        raise TruncatedBody(f"expected {expected} body bytes, got {len(body)}")
    if len(body) > expected:
        raise TruncatedBody(f"{len(body) - expected} trailing bytes after body")
    return RasterImage(width, height, channels, bytes(body))


def write_pnm(image: RasterImage) -> bytes:
    """Serialize to canonical binary P5/P6 bytes (lossless round trip)."""
    magic = b"P5" if image.channels == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, image.width, image.height)
    return header + image.samples


def read_pnm_file(path) -> RasterImage:
    with open(path, "rb") as fh:
        return read_pnm(fh.read())


def write_pnm_file(path, image: RasterImage) -> None:
    with open(path, "wb") as fh:
        fh.write(write_pnm(image))
