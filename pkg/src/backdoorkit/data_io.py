"""Dataset generation, loading, and all on-disk formats.

Native binary formats are little-endian with 8-byte magics; IDX is big-endian
per its canonical layout. All round-trips are bit-exact.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

DATASET_MAGIC = b"BKDSET01"
MODEL_MAGIC = b"BKMODEL1"
TRIGGER_MAGIC = b"BKTRIG01"
FORMAT_VERSION = 1

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(Exception):
    pass


class FormatError(DataError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # uint8 (N, H, W, C)
    labels: np.ndarray  # int64 (N,)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"inconsistent dataset shapes {self.images.shape} / {self.labels.shape}")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]


@dataclass
class DataBundle:
    train: Dataset
    val: Dataset
    name: str
    classes: int
    seed: int


@dataclass
class SampleRecord:
    index: int
    offset: int
    original_label: int
    assigned_label: int
    provenance: str  # "clean" | "poisoned"


@dataclass
class DatasetManifest:
    name: str
    count: int
    image_shape: tuple
    classes: int
    seed: int
    records: list = field(default_factory=list)
    config_hash: str = ""

    def validate(self):
        if len(self.records) != self.count:
            raise DataError("manifest record count mismatch")
        for r in self.records:
            if not (0 <= r.original_label < self.classes and 0 <= r.assigned_label < self.classes):
                raise DataError(f"label out of range in record {r.index}")


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 10
    height: int = 32
    width: int = 32
    channels: int = 3
    train_per_class: int = 800
    val_per_class: int = 100
    noise: int = 80     # canvas byte texture half-range around 128
    contrast: int = 64  # shape offset amplitude in bytes
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise DataError("need at least 2 classes")
        if self.classes > len(_CLASS_PAIRS):
            raise DataError(f"at most {len(_CLASS_PAIRS)} color-pair classes supported")
        if not 8 <= self.noise <= 120:
            raise DataError("noise must be in 8..120")
        if not 2 <= self.contrast <= 100:
            raise DataError("contrast must be in 2..100")


# classes share one silhouette (a filled disk with an inner core) and are
# coded by an ordered pair of core/annulus color directions, so telling
# classes apart needs the spatial conjunction of two regional colors
_COLOR_DIRECTIONS = (
    (1, 0, -1),
    (-1, 0, 1),
    (0, 1, -1),
    (0, -1, 1),
)

_CLASS_PAIRS = ((0, 1), (1, 0), (0, 2), (2, 0), (0, 3),
                (3, 0), (1, 2), (2, 1), (1, 3), (3, 1), (2, 3), (3, 2))


def _render_sample(rng, spec, label, canvas):
    h, w, c = spec.height, spec.width, spec.channels
    core_dir, ring_dir = _CLASS_PAIRS[label]
    # the disk stays inside a centered box, leaving a quiet canvas border ring
    cy = h // 2 + rng.integers(-h // 16, h // 16 + 1)
    cx = w // 2 + rng.integers(-w // 16, w // 16 + 1)
    r = rng.integers(max(5, h // 5), max(6, (5 * h) // 16) + 1)
    hh, ww = np.mgrid[0:h, 0:w]
    dist2 = (hh - cy) ** 2 + (ww - cx) ** 2
    disk = dist2 <= r * r
    core = dist2 <= (r // 2) ** 2
    amp = rng.integers((3 * spec.contrast) // 4, spec.contrast + 1)
    core_off = np.array(_COLOR_DIRECTIONS[core_dir][:c], dtype=np.int64) * amp
    ring_off = np.array(_COLOR_DIRECTIONS[ring_dir][:c], dtype=np.int64) * amp
    jitter = rng.integers(-2, 3, size=(h, w, c))
    img = np.where(core[:, :, None], canvas + core_off[None, None, :] + jitter,
                   np.where(disk[:, :, None], canvas + ring_off[None, None, :] + jitter,
                            canvas))
    return np.clip(img, 0, 255).astype(np.uint8)


def gen_synthetic(spec=SyntheticSpec()):
    """Deterministic colored-shape dataset: class = (shape, palette) pair.

    The background is a fixed textured byte canvas shared by every sample;
    shapes are low-contrast per-channel offsets over it with positional and
    amplitude jitter. Background blocks keep high variance (perceptual
    similarity headroom) while class features stay low-amplitude, the regime
    of a flat-background digit corpus.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    canvas = rng.integers(128 - spec.noise, 128 + spec.noise + 1,
                          size=(spec.height, spec.width, spec.channels)).astype(np.int64)
    parts = {}
    for split, per_class in (("train", spec.train_per_class), ("val", spec.val_per_class)):
        images = np.empty((spec.classes * per_class, spec.height, spec.width, spec.channels),
                          dtype=np.uint8)
        labels = np.empty(spec.classes * per_class, dtype=np.int64)
        i = 0
        for label in range(spec.classes):
            for _ in range(per_class):
                images[i] = _render_sample(rng, spec, label, canvas)
                labels[i] = label
                i += 1
        order = rng.permutation(i)
        parts[split] = Dataset(images[order], labels[order])
    name = f"synthetic-{spec.classes}x{spec.train_per_class}-{spec.height}x{spec.width}x{spec.channels}-s{spec.seed}"
    bundle = DataBundle(parts["train"], parts["val"], name, spec.classes, spec.seed)
    manifest = manifest_for(bundle.train, name=name, classes=spec.classes, seed=spec.seed)
    return bundle, manifest


def manifest_for(dataset, name, classes, seed, provenance=None, original_labels=None,
                 config_hash=""):
    img_bytes = int(np.prod(dataset.image_shape))
    records = []
    for i in range(len(dataset)):
        records.append(SampleRecord(
            index=i,
            offset=_dataset_header_size() + i * img_bytes,
            original_label=int(original_labels[i]) if original_labels is not None else int(dataset.labels[i]),
            assigned_label=int(dataset.labels[i]),
            provenance=provenance[i] if provenance is not None else "clean",
        ))
    m = DatasetManifest(name=name, count=len(dataset), image_shape=tuple(dataset.image_shape),
                        classes=classes, seed=seed, records=records, config_hash=config_hash)
    m.validate()
    return m


# ---------------------------------------------------------------- IDX format

def load_idx(images_path, labels_path):
    """Load an IDX image/label file pair (big-endian, canonical magics)."""
    with open(images_path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise FormatError(f"{images_path}: too short for an IDX image header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: bad magic 0x{magic:08x}, want 0x{IDX_IMAGES_MAGIC:08x}")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise FormatError(f"{images_path}: expected {expected} bytes, found {len(raw)}")
    images = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols, 1)

    with open(labels_path, "rb") as f:
        lraw = f.read()
    if len(lraw) < 8:
        raise FormatError(f"{labels_path}: too short for an IDX label header")
    lmagic, lcount = struct.unpack(">II", lraw[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad magic 0x{lmagic:08x}, want 0x{IDX_LABELS_MAGIC:08x}")
    if len(lraw) != 8 + lcount:
        raise FormatError(f"{labels_path}: expected {8 + lcount} bytes, found {len(lraw)}")
    if lcount != count:
        raise FormatError(f"IDX count mismatch: {count} images vs {lcount} labels")
    labels = np.frombuffer(lraw, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(images.copy(), labels)


# ------------------------------------------------------------ native formats

def _dataset_header_size():
    return 8 + 4 + 4 * 4  # magic + version + count + H/W/C


def save_dataset(dataset, path):
    img = np.ascontiguousarray(dataset.images)
    if img.dtype != np.uint8:
        raise FormatError("dataset images must be uint8")
    n, h, w, c = img.shape
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IIIII", FORMAT_VERSION, n, h, w, c))
        f.write(img.tobytes())
        f.write(dataset.labels.astype("<i8").tobytes())


def load_dataset(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != DATASET_MAGIC:
        raise FormatError(f"{path}: bad dataset magic {raw[:8]!r}")
    version, n, h, w, c = struct.unpack("<IIIII", raw[8:28])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version}, reader supports {FORMAT_VERSION}")
    body = 28
    img_bytes = n * h * w * c
    expected = body + img_bytes + 8 * n
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    images = np.frombuffer(raw, dtype=np.uint8, offset=body, count=img_bytes).reshape(n, h, w, c)
    labels = np.frombuffer(raw, dtype="<i8", offset=body + img_bytes, count=n)
    return Dataset(images.copy(), labels.astype(np.int64))


def save_model(model, path):
    from .model import PARAM_ORDER
    header = {
        "arch": {
            "height": model.arch.height, "width": model.arch.width,
            "channels": model.arch.channels, "conv_filters": list(model.arch.conv_filters),
            "kernel": model.arch.kernel, "hidden": model.arch.hidden,
            "classes": model.arch.classes, "seed": model.arch.seed,
        },
        "provenance": model.provenance,
        "params": list(PARAM_ORDER),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for name in PARAM_ORDER:
            f.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def load_model(path):
    from .model import ArchConfig, ModelParams, PARAM_ORDER
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MODEL_MAGIC:
        raise FormatError(f"{path}: bad model magic {raw[:8]!r}")
    version, blob_len = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version}, reader supports {FORMAT_VERSION}")
    header = json.loads(raw[16:16 + blob_len].decode("utf-8"))
    a = header["arch"]
    arch = ArchConfig(height=a["height"], width=a["width"], channels=a["channels"],
                      conv_filters=tuple(a["conv_filters"]), kernel=a["kernel"],
                      hidden=a["hidden"], classes=a["classes"], seed=a["seed"])
    shapes = {
        "conv1_w": (arch.kernel, arch.kernel, arch.channels, arch.conv_filters[0]),
        "conv1_b": (arch.conv_filters[0],),
        "conv2_w": (arch.kernel, arch.kernel, arch.conv_filters[0], arch.conv_filters[1]),
        "conv2_b": (arch.conv_filters[1],),
        "dense1_w": (arch.flat_features, arch.hidden),
        "dense1_b": (arch.hidden,),
        "dense2_w": (arch.hidden, arch.classes),
        "dense2_b": (arch.classes,),
    }
    offset = 16 + blob_len
    params = {}
    for name in PARAM_ORDER:
        count = int(np.prod(shapes[name]))
        params[name] = np.frombuffer(raw, dtype="<f8", offset=offset, count=count) \
            .reshape(shapes[name]).copy()
        offset += 8 * count
    if offset != len(raw):
        raise FormatError(f"{path}: expected {offset} bytes, found {len(raw)}")
    return ModelParams(arch, params, header["provenance"])


def save_trigger(trigger, path):
    pert = np.ascontiguousarray(trigger.perturbation, dtype="<f8")
    h, w, c = pert.shape
    kinds = {"l2": 0, "l0": 1, "linf": 2}
    log_blob = "\n".join(trigger.log).encode("utf-8") if trigger.log else b""
    with open(path, "wb") as f:
        f.write(TRIGGER_MAGIC)
        f.write(struct.pack("<IIdIII", FORMAT_VERSION, kinds[trigger.norm_kind],
                            trigger.norm_value, h, w, c))
        if trigger.mask is not None:
            f.write(struct.pack("<B", 1))
            f.write(np.packbits(trigger.mask.astype(np.uint8).reshape(-1)).tobytes())
        else:
            f.write(struct.pack("<B", 0))
        f.write(pert.tobytes())
        f.write(struct.pack("<I", len(log_blob)))
        f.write(log_blob)


def load_trigger(path, expect_shape=None):
    from .trigger_opt import AdditiveTrigger
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != TRIGGER_MAGIC:
        raise FormatError(f"{path}: bad trigger magic {raw[:8]!r}")
    version, kind, norm_value, h, w, c = struct.unpack("<IIdIII", raw[8:36])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version}, reader supports {FORMAT_VERSION}")
    if expect_shape is not None and tuple(expect_shape) != (h, w, c):
        raise FormatError(f"{path}: trigger shape {(h, w, c)} does not match image shape "
                          f"{tuple(expect_shape)}")
    kinds = {0: "l2", 1: "l0", 2: "linf"}
    offset = 36
    has_mask = raw[offset]
    offset += 1
    mask = None
    if has_mask:
        nbytes = (h * w + 7) // 8
        mask = np.unpackbits(np.frombuffer(raw, dtype=np.uint8, offset=offset, count=nbytes),
                             count=h * w).reshape(h, w)
        offset += nbytes
    pert = np.frombuffer(raw, dtype="<f8", offset=offset, count=h * w * c).reshape(h, w, c).copy()
    offset += 8 * h * w * c
    (log_len,) = struct.unpack("<I", raw[offset:offset + 4])
    offset += 4
    log = raw[offset:offset + log_len].decode("utf-8").split("\n") if log_len else []
    return AdditiveTrigger(perturbation=pert, mask=mask, norm_kind=kinds[kind],
                           norm_value=norm_value, log=log)


# ------------------------------------------------------- manifests (text)

def save_manifest(manifest, path):
    lines = [
        f"name={manifest.name}",
        f"count={manifest.count}",
        f"shape={'x'.join(str(d) for d in manifest.image_shape)}",
        f"classes={manifest.classes}",
        f"seed={manifest.seed}",
        f"config_hash={manifest.config_hash}",
    ]
    for r in manifest.records:
        lines.append(f"sample={r.index} offset={r.offset} original={r.original_label} "
                     f"assigned={r.assigned_label} provenance={r.provenance}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_manifest(path):
    with open(path, encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    head = {}
    records = []
    for ln in lines:
        if ln.startswith("sample="):
            fields = dict(part.split("=", 1) for part in ln.split())
            records.append(SampleRecord(
                index=int(fields["sample"]), offset=int(fields["offset"]),
                original_label=int(fields["original"]), assigned_label=int(fields["assigned"]),
                provenance=fields["provenance"]))
        else:
            k, v = ln.split("=", 1)
            head[k] = v
    m = DatasetManifest(
        name=head["name"], count=int(head["count"]),
        image_shape=tuple(int(d) for d in head["shape"].split("x")),
        classes=int(head["classes"]), seed=int(head["seed"]),
        records=records, config_hash=head.get("config_hash", ""))
    m.validate()
    return m
