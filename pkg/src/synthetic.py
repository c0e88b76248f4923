"""
Synthetic Dataset Generator
Renders images whose protected and target attributes are exactly decodable from pixels

Layout on a grid of unit u = resolution // 16:
- background colour: hue band of the primary protected factor (shifted for the target domain)
- border ring of width u: grey tone of the 'border_tone' factor
- square patch [u, 3u) in the top-left: grey tone of the 'corner_tone' factor
- K slots across columns [3u, 13u): a white square ('glyph', rows [6u, 10u)) or a
  white bar ('stripe', centred on row 8u) when the target bit is set
"""
import colorsys
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image, ImageDraw

from src.config_schema import FactorSpec, SyntheticSpec
from src.data import DatasetRecord, ProtectedLabels
from src.image_store import from_uint8, to_uint8

SATURATION = 0.6
VALUE = 0.8
WHITE_THRESHOLD = 230


def _unit(resolution: int) -> int:
    return resolution // 16


def _grey_level(value: int, cardinality: int) -> int:
    return int(round(255 * value / (cardinality - 1)))


def _hue(value: int, cardinality: int, domain: int, shift: float) -> float:
    return ((value + 0.5 + shift * domain) / cardinality) % 1.0


def _hue_rgb(hue: float) -> Tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb(hue, SATURATION, VALUE)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def _slot_columns(index: int, count: int, unit: int) -> Tuple[int, int]:
    """Inclusive column range drawn for a target slot"""
    x0 = 3 * unit + (index * 10 * unit) // count
    x1 = 3 * unit + ((index + 1) * 10 * unit) // count
    return x0, max(x0, x1 - 2)


def _primary_factor(spec: SyntheticSpec) -> FactorSpec:
    return next(f for f in spec.protected_generators if f.visual == 'hue_band')


def render_image(spec: SyntheticSpec, protected: Dict[str, int], targets: List[int], domain: int) -> np.ndarray:
    """
    Draw the noiseless image for one attribute assignment

    Args:
        spec: Dataset spec
        protected: Protected factor name to class index
        targets: Target bits in spec order
        domain: 0 source, 1 target

    Returns:
        HxWx3 uint8 array
    """
    res = spec.resolution
    u = _unit(res)
    by_visual = {f.visual: f for f in spec.protected_generators}

    primary = by_visual['hue_band']
    background = _hue_rgb(_hue(protected[primary.name], primary.cardinality, domain, spec.domain_hue_shift))

    img = Image.new('RGB', (res, res), color=background)
    draw = ImageDraw.Draw(img)

    if 'border_tone' in by_visual:
        factor = by_visual['border_tone']
        level = _grey_level(protected[factor.name], factor.cardinality)
        draw.rectangle([(0, 0), (res - 1, res - 1)], fill=(level,) * 3)
        draw.rectangle([(u, u), (res - u - 1, res - u - 1)], fill=background)

    if 'corner_tone' in by_visual:
        factor = by_visual['corner_tone']
        level = _grey_level(protected[factor.name], factor.cardinality)
        draw.rectangle([(u, u), (3 * u - 1, 3 * u - 1)], fill=(level,) * 3)

    half = max(1, u // 2)
    for i, (factor, bit) in enumerate(zip(spec.target_generators, targets)):
        if not bit:
            continue
        x0, x1 = _slot_columns(i, len(spec.target_generators), u)
        if factor.visual == 'glyph':
            draw.rectangle([(x0, 6 * u), (x1, 10 * u - 1)], fill=(255, 255, 255))
        else:
            draw.rectangle([(x0, 8 * u - half), (x1, 8 * u + half - 1)], fill=(255, 255, 255))

    return np.asarray(img, dtype=np.uint8)


def sample_labels(spec: SyntheticSpec, rng: np.random.Generator) -> Tuple[Dict[str, int], List[int], int]:
    """
    Draw domain, protected classes and target bits for one record

    The primary protected bit is class >= cardinality / 2 of the hue-band factor. Each
    correlated target copies it with probability `correlation`, otherwise it is a fair coin.
    """
    domain = int(rng.random() < spec.target_domain_fraction)
    protected = {f.name: int(rng.integers(f.cardinality)) for f in spec.protected_generators}
    primary = _primary_factor(spec)
    protected_bit = int(protected[primary.name] >= primary.cardinality / 2)

    correlated = set(spec.correlated_targets if spec.correlated_targets is not None else spec.attribute_names)
    targets = []
    for factor in spec.target_generators:
        if factor.name in correlated and rng.random() < spec.correlation:
            targets.append(protected_bit)
        else:
            targets.append(int(rng.integers(2)))
    return protected, targets, domain


def generate_record(spec: SyntheticSpec, index: int) -> DatasetRecord:
    """Generate record `index`; its RNG depends only on (seed, index)"""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    protected, targets, domain = sample_labels(spec, rng)
    pixels = render_image(spec, protected, targets, domain)

    image = from_uint8(pixels)
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, size=image.shape).astype(np.float32)
    image = np.clip(image, -1.0, 1.0).astype(np.float32)

    return DatasetRecord(
        image=image,
        target_attrs=np.array(targets, dtype=np.int64),
        protected=ProtectedLabels(**protected),
        domain_label=domain,
        filename=f"img_{index:05d}.png",
    )


def generate_synthetic_dataset(spec: SyntheticSpec) -> List[DatasetRecord]:
    """
    Generate spec.num_samples records

    Args:
        spec: Validated dataset spec

    Returns:
        Records in index order, identical for any worker count
    """
    spec.validate()
    logging.info(f"Generating {spec.num_samples} synthetic records at {spec.resolution}x{spec.resolution} "
                 f"(correlation={spec.correlation}, seed={spec.seed})")
    if spec.workers == 1:
        return [generate_record(spec, i) for i in range(spec.num_samples)]
    with ThreadPoolExecutor(max_workers=spec.workers) as pool:
        return list(pool.map(lambda i: generate_record(spec, i), range(spec.num_samples)))


def decode_synthetic_labels(image, spec: SyntheticSpec) -> Dict[str, object]:
    """
    Recover labels from pixels using the rendering rules

    Args:
        image: CHW [-1, 1] image (array or tensor) or HxWx3 uint8 array
        spec: Spec the image was rendered with

    Returns:
        Dict with 'protected' (name to class), 'targets' (bits) and 'domain'
    """
    pixels = np.asarray(image) if not hasattr(image, 'detach') else image
    if getattr(pixels, 'dtype', None) == np.uint8 and pixels.shape[-1] == 3:
        rgb = pixels.astype(np.float64)
    else:
        rgb = to_uint8(pixels).astype(np.float64)

    u = _unit(spec.resolution)
    protected = {}
    domain = 0
    for factor in spec.protected_generators:
        if factor.visual == 'hue_band':
            patch = rgb[11 * u:13 * u, 4 * u:12 * u].reshape(-1, 3).mean(axis=0) / 255.0
            hue = colorsys.rgb_to_hsv(*patch)[0]
            position = hue * factor.cardinality
            value = int(np.floor(position)) % factor.cardinality
            protected[factor.name] = value
            if spec.domain_hue_shift > 0:
                domain = int(position - np.floor(position) > 0.5 + spec.domain_hue_shift / 2)
        else:
            if factor.visual == 'border_tone':
                level = rgb[spec.resolution // 2, u // 2].mean()
            else:
                level = rgb[2 * u - 1, 2 * u - 1].mean()
            protected[factor.name] = int(np.clip(round(level * (factor.cardinality - 1) / 255),
                                                 0, factor.cardinality - 1))

    targets = []
    for i in range(len(spec.target_generators)):
        x0, _ = _slot_columns(i, len(spec.target_generators), u)
        targets.append(int(rgb[8 * u, x0].min() > WHITE_THRESHOLD))
    return {'protected': protected, 'targets': targets, 'domain': domain}


def protected_bit(record: DatasetRecord, spec: Optional[SyntheticSpec] = None) -> int:
    """Primary protected bit of a record (gender class by default)"""
    spec = spec or SyntheticSpec()
    primary = _primary_factor(spec)
    value = getattr(record.protected, primary.name)
    return int(value >= primary.cardinality / 2)
