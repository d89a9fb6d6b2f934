"""Images, manifests, augmentation and the synthetic product-image corpus."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetError, FormatError, InvalidArgumentError

# -- PPM ----------------------------------------------------------------------

_PPM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_ppm(buf: bytes) -> np.ndarray:
    """Binary P6 with maxval 255 -> float32 ``(H, W, 3)`` in [0, 1]."""
    pos = 0
    fields = []
    for name in ("magic", "width", "height", "maxval"):
        m = _PPM_TOKEN.match(buf, pos)
        if m is None:
            raise FormatError(f"truncated PPM header: missing {name}", pos)
        fields.append((m.group(1), m.start(1)))
        pos = m.end(1)
    (magic, at) = fields[0]
    if magic != b"P6":
        raise FormatError(f"not a binary PPM (magic {magic[:8]!r})", at)
    dims = []
    for (tok, at), name in zip(fields[1:], ("width", "height", "maxval")):
        if not tok.isdigit() or int(tok) < 1:
            raise FormatError(f"invalid PPM {name} {tok[:16]!r}", at)
        dims.append(int(tok))
    width, height, maxval = dims
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", fields[3][1])
    if pos >= len(buf) or buf[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise FormatError("missing whitespace after PPM maxval", pos)
    pos += 1
    need = width * height * 3
    if len(buf) - pos != need:
        raise FormatError(f"PPM payload has {len(buf) - pos} bytes, expected {need}", pos)
    raw = np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(height, width, 3)
    return raw.astype(np.float32) / np.float32(255.0)


def to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidArgumentError(f"expected (H, W, 3) image, got shape {image.shape}")
    u8 = image if image.dtype == np.uint8 else to_u8(image)
    h, w, _ = u8.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + u8.tobytes()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


# -- resampling and augmentation ------------------------------------------------


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic bilinear weights, half-pixel centres (align_corners=False)."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def bilinear_resize(image: np.ndarray, out_side: int) -> np.ndarray:
    image = np.asarray(image)
    if out_side < 2:
        raise InvalidArgumentError(f"out_side must be >= 2, got {out_side}")
    h, w = image.shape[:2]
    rows, cols = _resize_matrix(h, out_side), _resize_matrix(w, out_side)
    c = image.shape[2]
    tmp = (rows @ image.astype(np.float64).reshape(h, w * c)).reshape(out_side, w, c)
    out = (tmp.transpose(0, 2, 1) @ cols.T).transpose(0, 2, 1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass(frozen=True)
class AugmentConfig:
    """Each enabled op fires independently with probability 0.5.

    ``strength`` scales magnitudes; 0.5 gives an 87.5% crop and brightness
    factors in [0.8, 1.25]. Strength 0 disables everything.
    """

    flip: bool = True
    crop: bool = True
    brightness: bool = True
    strength: float = 0.5

    def __post_init__(self):
        if not 0 <= self.strength <= 1:
            raise InvalidArgumentError(f"augmentation strength must lie in [0, 1], got {self.strength}")

    @property
    def active(self) -> bool:
        return self.strength > 0 and (self.flip or self.crop or self.brightness)


NO_AUGMENT = AugmentConfig(False, False, False, 0.0)


def augment(image: np.ndarray, switches: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if not switches.active:
        return image.copy()
    s = switches.strength
    # fixed draw order keeps the stream aligned regardless of which ops fire
    fire = rng.random(3) < 0.5
    crop_u = rng.random(2)
    gain_u = rng.random()
    out = image
    if switches.flip and fire[0]:
        out = out[:, ::-1]
    if switches.crop and fire[1]:
        h, w = out.shape[:2]
        keep_h = max(2, int(round(h * (1 - 0.25 * s))))
        keep_w = max(2, int(round(w * (1 - 0.25 * s))))
        top = int(crop_u[0] * (h - keep_h + 1))
        left = int(crop_u[1] * (w - keep_w + 1))
        out = bilinear_resize(out[top:top + keep_h, left:left + keep_w], h)
    if switches.brightness and fire[2]:
        lo, hi = 1 - 0.4 * s, 1 + 0.5 * s
        out = np.clip(out * (lo + (hi - lo) * gain_u), 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float32)


# -- manifests ------------------------------------------------------------------


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    class_id: int | None = None
    pair_id: int | None = None

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(d, sort_keys=True)


def validate_records(records: list[ImageRecord], lines: list[int] | None = None) -> None:
    lines = lines or list(range(1, len(records) + 1))
    seen: dict[str, int] = {}
    for rec, line in zip(records, lines):
        if rec.id in seen:
            raise DatasetError(f"line {line}: duplicate id {rec.id!r} (first on line {seen[rec.id]})")
        seen[rec.id] = line
    arity = Counter(r.pair_id for r in records if r.pair_id is not None)
    for rec, line in zip(records, lines):
        if rec.pair_id is not None and arity[rec.pair_id] != 2:
            raise DatasetError(
                f"line {line}: pair_id {rec.pair_id} has {arity[rec.pair_id]} record(s), expected exactly 2"
            )


def read_manifest(path) -> list[ImageRecord]:
    records, lines = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = ImageRecord(
                    id=obj["id"],
                    path=obj["path"],
                    class_id=obj.get("class_id"),
                    pair_id=obj.get("pair_id"),
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}: line {lineno}: malformed record: {exc}") from None
            if not isinstance(rec.id, str) or not isinstance(rec.path, str):
                raise DatasetError(f"{path}: line {lineno}: id and path must be strings")
            for key in ("class_id", "pair_id"):
                v = getattr(rec, key)
                if v is not None and (not isinstance(v, int) or isinstance(v, bool)):
                    raise DatasetError(f"{path}: line {lineno}: {key} must be an integer")
            records.append(rec)
            lines.append(lineno)
    try:
        validate_records(records, lines)
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}") from None
    return records


def write_manifest(path, records: list[ImageRecord]) -> None:
    validate_records(records)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def load_images(manifest_path, records: list[ImageRecord] | None = None) -> np.ndarray:
    """Decode every image of a manifest (paths relative to the manifest) into one array."""
    manifest_path = Path(manifest_path)
    if records is None:
        records = read_manifest(manifest_path)
    images = []
    for rec in records:
        p = manifest_path.parent / rec.path
        try:
            images.append(read_ppm(p))
        except OSError as exc:
            raise DatasetError(f"cannot read image {p}: {exc.strerror or exc}") from None
        except FormatError as exc:
            raise DatasetError(f"cannot decode image {p}: {exc}") from None
    if not images:
        return np.zeros((0, 0, 0, 3), dtype=np.float32)
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DatasetError(f"{manifest_path}: images have differing shapes {sorted(shapes)}")
    return np.stack(images)


# -- synthetic corpus -------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Layout of the generated corpus. Every group uses its own disjoint classes."""

    pair_classes: int = 40
    heldout_pair_classes: int = 20
    unlabeled_classes: int = 100
    unlabeled_per_class: int = 4
    heldout_unlabeled_classes: int = 20
    probe_classes: int = 20
    probe_test_per_class: int = 10
    side: int = 64
    distortion: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.pair_classes < 2 or self.probe_classes < 2:
            raise InvalidArgumentError("pair_classes and probe_classes must be >= 2")
        if self.side < 8:
            raise InvalidArgumentError(f"side must be >= 8, got {self.side}")
        if not 0 <= self.distortion <= 1:
            raise InvalidArgumentError(f"distortion must lie in [0, 1], got {self.distortion}")


# muted base hues shared by all classes, so colour alone rarely identifies one
_BASE_COLOURS = np.array(
    [
        [0.90, 0.90, 0.88], [0.15, 0.15, 0.18], [0.80, 0.15, 0.12], [0.95, 0.75, 0.10],
        [0.12, 0.45, 0.75], [0.15, 0.60, 0.25], [0.55, 0.30, 0.65], [0.95, 0.50, 0.15],
        [0.55, 0.35, 0.20], [0.40, 0.80, 0.85],
    ]
)


def render_canonical(class_key: int, side: int, seed: int) -> np.ndarray:
    """Deterministic procedural "package" for one class."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, class_key])))
    pick = rng.choice(len(_BASE_COLOURS), size=4, replace=False)
    palette = np.clip(_BASE_COLOURS[pick] + rng.uniform(-0.08, 0.08, size=(4, 3)), 0, 1)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) / side
    img = np.empty((side, side, 3))
    img[:] = palette[0]

    # stripe panel
    y0, x0 = rng.uniform(0.0, 0.45, size=2)
    y1, x1 = y0 + rng.uniform(0.35, 0.55), x0 + rng.uniform(0.35, 0.55)
    angle = rng.choice([0.0, np.pi / 2, np.pi / 4, -np.pi / 4])
    period = rng.uniform(0.06, 0.2)
    phase = (xx * np.cos(angle) + yy * np.sin(angle)) / period
    panel = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
    img[panel & (np.floor(phase) % 2 == 0)] = palette[1]

    # rectangles
    for _ in range(rng.integers(1, 4)):
        ry, rx = rng.uniform(0, 0.8, size=2)
        rh, rw = rng.uniform(0.1, 0.4, size=2)
        mask = (yy >= ry) & (yy < ry + rh) & (xx >= rx) & (xx < rx + rw)
        img[mask] = palette[rng.integers(1, 4)]

    # disks
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        r = rng.uniform(0.06, 0.2)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 < r * r] = palette[rng.integers(1, 4)]
    return img.astype(np.float32)


def _distinct(a: np.ndarray, b: np.ndarray) -> bool:
    differs = np.max(np.abs(a - b), axis=-1) > 0.1
    return differs.mean() >= 0.10


def _canonicals(n: int, side: int, seed: int, start_key: int, taken: list[np.ndarray]):
    """Render ``n`` classes, redrawing any that are too similar to an earlier one."""
    out, key = [], start_key
    while len(out) < n:
        img = render_canonical(key, side, seed)
        key += 1
        if all(_distinct(img, other) for other in taken):
            out.append(img)
            taken.append(img)
    return out, key


def gen_synthetic(spec: SyntheticSpec, out_dir) -> dict[str, Path]:
    """Write the synthetic corpus; returns manifest name -> path.

    Manifests: ``pairs``, ``heldout_pairs``, ``unlabeled``,
    ``heldout_unlabeled``, ``probe_train`` (one image per class) and
    ``probe_test``.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    aug = AugmentConfig(strength=spec.distortion)
    taken: list[np.ndarray] = []
    key = 0
    groups = {}
    for group, n in (
        ("pairs", spec.pair_classes),
        ("heldout_pairs", spec.heldout_pair_classes),
        ("unlabeled", spec.unlabeled_classes),
        ("heldout_unlabeled", spec.heldout_unlabeled_classes),
        ("probe", spec.probe_classes),
    ):
        groups[group], key = _canonicals(n, spec.side, spec.seed, key, taken)

    manifests: dict[str, list[ImageRecord]] = {}
    class_offset = 0

    def emit(group, cls, view, image, name, pair_id=None, class_id=None, rng=None):
        img_id = f"{group}-c{cls:04d}-v{view:02d}"
        rel = f"images/{img_id}.ppm"
        write_ppm(out_dir / rel, augment(image, aug, rng) if rng is not None else image)
        manifests.setdefault(name, []).append(ImageRecord(img_id, rel, class_id, pair_id))

    for gi, group in enumerate(groups):
        canon = groups[group]
        for c, image in enumerate(canon):
            cls = class_offset + c
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 1 + gi, c])))
            if group in ("pairs", "heldout_pairs"):
                for v in range(2):
                    emit(group, cls, v, image, group, pair_id=cls, class_id=cls, rng=rng)
            elif group in ("unlabeled", "heldout_unlabeled"):
                per = spec.unlabeled_per_class
                for v in range(per):
                    emit(group, cls, v, image, group, rng=rng)
            else:
                # the one-shot training image is distorted like the test images
                emit(group, cls, 0, image, "probe_train", class_id=c, rng=rng)
                for v in range(1, spec.probe_test_per_class + 1):
                    emit(group, cls, v, image, "probe_test", class_id=c, rng=rng)
        class_offset += len(canon)

    paths = {}
    for name in ("pairs", "heldout_pairs", "unlabeled", "heldout_unlabeled", "probe_train", "probe_test"):
        paths[name] = out_dir / f"{name}.jsonl"
        write_manifest(paths[name], manifests.get(name, []))
    (out_dir / "spec.json").write_text(json.dumps(asdict(spec), sort_keys=True, indent=1) + "\n")
    return paths
