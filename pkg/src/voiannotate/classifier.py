"""Residual-network fixation classifier over marker-centered thumbnails.

The network is a pre-activation residual stack ending in global average
pooling and a dense softmax head with one output per catalog class. Training
data comes from dataset manifests (simulated plus domain-shifted copies),
balanced by oversampling and enriched with rotation/translation/color-shift
augmentation.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import DEFAULT_CLASS_NAME, ENVIRONMENT_CLASS_NAME, VoiError
from .images import Image
from .nn import (
    Adam,
    AdamConfig,
    BatchNorm2d,
    Conv2d,
    Dense,
    ParameterStore,
    Tensor,
    add,
    global_avg_pool,
    load_checkpoint,
    maxpool2d,
    relu,
    save_checkpoint,
    softmax,
    softmax_xent,
)
from .render import DatasetManifest, ManifestRow

log = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = ("epoch", "loss", "train_acc", "val_acc")


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered class names: VOI ids first, the two reserved defaults last."""

    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 3:
            raise VoiError("catalog needs at least one VOI class plus the two defaults")
        if self.names[-2:] != (DEFAULT_CLASS_NAME, ENVIRONMENT_CLASS_NAME):
            raise VoiError(f"catalog must end with '{DEFAULT_CLASS_NAME}', '{ENVIRONMENT_CLASS_NAME}'")
        if len(set(self.names)) != len(self.names):
            raise VoiError("class names must be unique")

    @property
    def size(self) -> int:
        return len(self.names)

    def default_indices(self):
        return (self.size - 2, self.size - 1)

    @classmethod
    def from_scene(cls, scene):
        return cls(tuple(scene.class_names()))


@dataclass(frozen=True)
class ClassifierConfig:
    num_classes: int
    input_side: int = 224
    stage_widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    bottleneck: bool = False
    stem_pool: bool = True  # halve resolution right after the stem

    def __post_init__(self):
        if self.num_classes < 2:
            raise VoiError("classification needs at least 2 classes")
        if not self.stage_widths:
            raise VoiError("need at least one stage")
        factor = self.downsample_factor()
        if self.input_side % factor != 0 or self.input_side < factor * 2:
            raise VoiError(f"input side {self.input_side} not divisible by downsampling factor {factor}")

    def downsample_factor(self) -> int:
        return (2 if self.stem_pool else 1) * 2 ** (len(self.stage_widths) - 1)


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: float = 15.0
    translate_px: int = 10
    color_shift: float = 0.1

    def is_identity(self) -> bool:
        return self.rotation_deg == 0 and self.translate_px == 0 and self.color_shift == 0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    adam: AdamConfig = field(default_factory=AdamConfig)
    oversample: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    val_divisor: int = 10  # 1/N of distinct rows go to the validation split

    def __post_init__(self):
        if self.epochs < 1:
            raise VoiError("epochs must be at least 1")
        if self.batch_size < 1:
            raise VoiError("batch size must be at least 1")


class _PreActBlock:
    def __init__(self, store, name, in_ch, out_ch, stride, rng, bottleneck=False):
        self.bn1 = BatchNorm2d(store, f"{name}/bn1", in_ch)
        if bottleneck:
            mid = max(1, out_ch // 4)
            self.conv1 = Conv2d(store, f"{name}/conv1", in_ch, mid, k=1, stride=stride, padding="valid", rng=rng, bias=False)
            self.bn2 = BatchNorm2d(store, f"{name}/bn2", mid)
            self.conv2 = Conv2d(store, f"{name}/conv2", mid, mid, k=3, stride=1, rng=rng, bias=False)
            self.bn3 = BatchNorm2d(store, f"{name}/bn3", mid)
            self.conv3 = Conv2d(store, f"{name}/conv3", mid, out_ch, k=1, stride=1, padding="valid", rng=rng, bias=False)
        else:
            self.conv1 = Conv2d(store, f"{name}/conv1", in_ch, out_ch, k=3, stride=stride, rng=rng, bias=False)
            self.bn2 = BatchNorm2d(store, f"{name}/bn2", out_ch)
            self.conv2 = Conv2d(store, f"{name}/conv2", out_ch, out_ch, k=3, stride=1, rng=rng, bias=False)
            self.bn3 = self.conv3 = None
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Conv2d(store, f"{name}/shortcut", in_ch, out_ch, k=1, stride=stride, padding="valid", rng=rng, bias=False)

    def __call__(self, x, train=True):
        act = relu(self.bn1(x, train))
        out = self.conv1(act)
        out = self.conv2(relu(self.bn2(out, train)))
        if self.conv3 is not None:
            out = self.conv3(relu(self.bn3(out, train)))
        skip = x if self.shortcut is None else self.shortcut(act)
        return add(out, skip)


class ResidualClassifier:
    def __init__(self, cfg: ClassifierConfig, seed: int = 0):
        self.cfg = cfg
        self.store = ParameterStore()
        rng = np.random.default_rng(seed)
        w0 = cfg.stage_widths[0]
        self.stem = Conv2d(self.store, "stem", 3, w0, k=3, stride=1, rng=rng, bias=False)
        self.blocks = []
        in_ch = w0
        for si, width in enumerate(cfg.stage_widths):
            out_ch = width * (4 if cfg.bottleneck else 1)
            for bi in range(cfg.blocks_per_stage):
                stride = 2 if (si > 0 and bi == 0) else 1
                self.blocks.append(_PreActBlock(self.store, f"stage{si}/block{bi}", in_ch, out_ch, stride, rng, cfg.bottleneck))
                in_ch = out_ch
        self.bn_final = BatchNorm2d(self.store, "final/bn", in_ch)
        self.head = Dense(self.store, "final/dense", in_ch, cfg.num_classes, rng=rng, gain="xavier")

    def forward(self, x: Tensor, train: bool = True) -> Tensor:
        """Logits for a (N,3,S,S) batch."""
        if x.data.shape[1:] != (3, self.cfg.input_side, self.cfg.input_side):
            raise VoiError(f"expected (N,3,{self.cfg.input_side},{self.cfg.input_side}), got {x.data.shape}")
        h = self.stem(x)
        if self.cfg.stem_pool:
            h = maxpool2d(h, 2)
        for block in self.blocks:
            h = block(h, train)
        h = relu(self.bn_final(h, train))
        return self.head(global_avg_pool(h))


def build_model(cfg: ClassifierConfig, seed: int = 0) -> ResidualClassifier:
    return ResidualClassifier(cfg, seed=seed)


# ---------------------------------------------------------------------------
# dataset handling


def oversample(manifest: DatasetManifest, seed: int = 0) -> DatasetManifest:
    """Duplicate rows of smaller classes (sampling with replacement) until
    every class matches the largest class count."""
    by_class = {}
    for i, row in enumerate(manifest.rows):
        by_class.setdefault(row.class_index, []).append(i)
    for cls in range(manifest.classes):
        if cls not in by_class:
            raise VoiError(f"class {cls} has zero rows; cannot oversample")
    target = max(len(v) for v in by_class.values())
    rng = np.random.default_rng(seed)
    rows = list(manifest.rows)
    for cls in sorted(by_class):
        need = target - len(by_class[cls])
        if need > 0:
            picks = rng.choice(by_class[cls], size=need, replace=True)
            rows.extend(manifest.rows[i] for i in picks)
    return DatasetManifest(
        classes=manifest.classes,
        seed=manifest.seed,
        rows=rows,
        underrepresented=manifest.underrepresented,
        extra=dict(manifest.extra),
    )


def augment_image(img: np.ndarray, cfg: AugmentConfig, rng) -> np.ndarray:
    """Rotation (bilinear, edge replicated) + integer translation + additive
    per-channel color shift, each drawn uniformly from the configured range.

    `img` is (H,W,3) float in [0,1]; `rng` may be a seed or a Generator.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    angle = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)) if cfg.rotation_deg else 0.0
    dx = int(rng.integers(-cfg.translate_px, cfg.translate_px + 1)) if cfg.translate_px else 0
    dy = int(rng.integers(-cfg.translate_px, cfg.translate_px + 1)) if cfg.translate_px else 0
    shift = rng.uniform(-cfg.color_shift, cfg.color_shift, size=3) if cfg.color_shift else np.zeros(3)

    out = img
    h, w = img.shape[:2]
    if angle != 0.0 or dx or dy:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        yy, xx = np.mgrid[0:h, 0:w]
        # inverse map: undo translation, then rotate by -angle about center
        xs = xx - dx - cx
        ys = yy - dy - cy
        cos_a, sin_a = math.cos(angle), math.sin(angle)
        sx = cos_a * xs + sin_a * ys + cx
        sy = -sin_a * xs + cos_a * ys + cy
        sx = np.clip(sx, 0, w - 1)
        sy = np.clip(sy, 0, h - 1)
        x0 = np.floor(sx).astype(np.int64)
        y0 = np.floor(sy).astype(np.int64)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        fx = (sx - x0)[..., None]
        fy = (sy - y0)[..., None]
        out = (
            img[y0, x0] * (1 - fx) * (1 - fy)
            + img[y0, x1] * fx * (1 - fy)
            + img[y1, x0] * (1 - fx) * fy
            + img[y1, x1] * fx * fy
        )
    if np.any(shift):
        out = out + shift[None, None, :]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def load_manifest_images(manifest: DatasetManifest, base_dir):
    """(images (N,3,S,S) float32, labels (N,), relative row keys)."""
    base = Path(base_dir)
    images, labels, keys = [], [], []
    for row in manifest.rows:
        img = Image.load_png(base / row.path)
        images.append(img.to_float().transpose(2, 0, 1))
        labels.append(row.class_index)
        keys.append(row.path)
    return np.stack(images), np.array(labels, dtype=np.int64), keys


def _row_key_hash(key: str) -> int:
    return int.from_bytes(hashlib.md5(key.encode()).digest()[:8], "little")


@dataclass
class TrainedClassifier:
    model: ResidualClassifier
    catalog: ClassCatalog
    log_rows: list

    @property
    def cfg(self) -> ClassifierConfig:
        return self.model.cfg

    def save(self, path):
        cfg = self.cfg
        meta = {
            "kind": "classifier",
            "input_side": cfg.input_side,
            "stage_widths": " ".join(str(w) for w in cfg.stage_widths),
            "blocks_per_stage": cfg.blocks_per_stage,
            "bottleneck": int(cfg.bottleneck),
            "stem_pool": int(cfg.stem_pool),
            "num_classes": cfg.num_classes,
        }
        for i, name in enumerate(self.catalog.names):
            meta[f"class{i}"] = name
        save_checkpoint(self.model.store, path, meta=meta)

    @classmethod
    def load(cls, path) -> "TrainedClassifier":
        values, meta = load_checkpoint(path)
        if meta.get("kind") != "classifier":
            raise VoiError(f"{path} is not a classifier checkpoint")
        cfg = ClassifierConfig(
            num_classes=int(meta["num_classes"]),
            input_side=int(meta["input_side"]),
            stage_widths=tuple(int(w) for w in meta["stage_widths"].split()),
            blocks_per_stage=int(meta["blocks_per_stage"]),
            bottleneck=bool(int(meta["bottleneck"])),
            stem_pool=bool(int(meta["stem_pool"])),
        )
        names = tuple(meta[f"class{i}"] for i in range(cfg.num_classes))
        model = build_model(cfg)
        model.store.load_values(values)
        return cls(model=model, catalog=ClassCatalog(names), log_rows=[])


def train(manifests, catalog: ClassCatalog, clf_cfg: ClassifierConfig, train_cfg: TrainConfig, seed: int = 0) -> TrainedClassifier:
    """Train on the concatenation of several manifests (e.g. simulated plus
    translated copies), oversampled to balance and split 9:1 by row hash.

    `manifests` is a list of (DatasetManifest, base_dir) pairs sharing one
    class catalog. Single-threaded and bit-reproducible for a fixed seed.
    """
    if not manifests:
        raise VoiError("no training manifests")
    for m, _d in manifests:
        if m.classes != catalog.size:
            raise VoiError(f"manifest catalog size {m.classes} does not match {catalog.size}")
    if clf_cfg.num_classes != catalog.size:
        raise VoiError("classifier output size must equal catalog size")

    parts = [load_manifest_images(m, d) for m, d in manifests]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    keys = [f"{mi}:{k}" for mi, p in enumerate(parts) for k in p[2]]
    if images.shape[2] != clf_cfg.input_side:
        raise VoiError(f"thumbnail side {images.shape[2]} does not match config {clf_cfg.input_side}")

    rng = np.random.default_rng(seed)
    index = np.arange(len(labels))
    if train_cfg.oversample:
        by_class = {}
        for i, lab in enumerate(labels):
            by_class.setdefault(int(lab), []).append(i)
        if len(by_class) < catalog.size:
            missing = sorted(set(range(catalog.size)) - set(by_class))
            raise VoiError(f"classes {missing} have zero rows; cannot oversample")
        target = max(len(v) for v in by_class.values())
        extra = []
        for cls in sorted(by_class):
            need = target - len(by_class[cls])
            if need > 0:
                extra.extend(rng.choice(by_class[cls], size=need, replace=True))
        index = np.concatenate([index, np.array(extra, dtype=np.int64)]) if extra else index

    is_val = np.array([_row_key_hash(keys[i]) % train_cfg.val_divisor == 0 for i in index])
    train_idx = index[~is_val]
    val_idx = index[is_val]
    if len(train_idx) == 0:
        raise VoiError("validation split swallowed every row; dataset too small")
    log.info("training on %d rows (%d validation)", len(train_idx), len(val_idx))

    model = build_model(clf_cfg, seed=seed)
    optimizer = Adam(model.store, train_cfg.adam)
    log_rows = []
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(train_idx))
        total_loss = 0.0
        correct = 0
        for lo in range(0, len(order), train_cfg.batch_size):
            sel = train_idx[order[lo : lo + train_cfg.batch_size]]
            batch = images[sel]
            if not train_cfg.augment.is_identity():
                batch = np.stack(
                    [augment_image(im.transpose(1, 2, 0), train_cfg.augment, rng).transpose(2, 0, 1) for im in batch]
                )
            x = Tensor(batch)
            y = labels[sel]
            model.store.zero_grad()
            logits = model.forward(x, train=True)
            loss = softmax_xent(logits, y)
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * len(sel)
            correct += int((logits.data.argmax(axis=1) == y).sum())
        train_loss = total_loss / len(train_idx)
        train_acc = correct / len(train_idx)
        val_acc = float("nan")
        if len(val_idx):
            _probs, pred = _predict_arrays(model, images[val_idx])
            val_acc = float((pred == labels[val_idx]).mean())
        log_rows.append({"epoch": epoch, "loss": train_loss, "train_acc": train_acc, "val_acc": val_acc})
        log.info("epoch %d: loss=%.4f train_acc=%.4f val_acc=%.4f", epoch, train_loss, train_acc, val_acc)
    return TrainedClassifier(model=model, catalog=catalog, log_rows=log_rows)


def _predict_arrays(model: ResidualClassifier, arr: np.ndarray, batch_size: int = 64):
    if arr.shape[0] == 0:
        k = model.cfg.num_classes
        return np.zeros((0, k), dtype=np.float32), np.zeros(0, dtype=np.int64)
    probs = []
    for lo in range(0, arr.shape[0], batch_size):
        logits = model.forward(Tensor(arr[lo : lo + batch_size]), train=False)
        probs.append(softmax(logits).data)
    probs = np.concatenate(probs)
    return probs, probs.argmax(axis=1)


def predict(clf: TrainedClassifier, thumbnails):
    """Class distribution plus argmax label per thumbnail.

    Accepts a (N,3,S,S) float array or a list of Image; ties resolve to the
    lower class index.
    """
    if isinstance(thumbnails, (list, tuple)):
        if len(thumbnails) == 0:
            return _predict_arrays(clf.model, np.zeros((0, 3, clf.cfg.input_side, clf.cfg.input_side), dtype=np.float32))
        thumbnails = np.stack([t.to_float().transpose(2, 0, 1) for t in thumbnails])
    arr = np.asarray(thumbnails, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[1:] != (3, clf.cfg.input_side, clf.cfg.input_side):
        raise VoiError(f"expected (N,3,{clf.cfg.input_side},{clf.cfg.input_side}), got {arr.shape}")
    return _predict_arrays(clf.model, arr)


def format_train_log(rows) -> str:
    lines = [",".join(TRAIN_LOG_COLUMNS)]
    for r in rows:
        lines.append(
            ",".join(str(r["epoch"]) if c == "epoch" else f"{r[c]:.6f}" for c in TRAIN_LOG_COLUMNS)
        )
    return "\n".join(lines) + "\n"
