"""Cycle-consistent adversarial domain translation.

Two resnet-style generators map between the simulation appearance and an
experimental appearance (real-world or VR); two patch discriminators score
each domain with least-squares targets. Training alternates generator and
discriminator updates with a history pool of generated fakes, exactly one
model per target domain.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import VoiError
from .images import Image
from .nn import (
    Adam,
    AdamConfig,
    Conv2d,
    InstanceNorm2d,
    ParameterStore,
    Tensor,
    abs_,
    add,
    leaky_relu,
    load_checkpoint,
    mul,
    relu,
    save_checkpoint,
    tanh,
    tmean,
    upsample_nearest,
)

log = logging.getLogger(__name__)

GAN_LOG_COLUMNS = ("epoch", "adv_G", "adv_F", "adv_Dsrc", "adv_Dtgt", "cyc")


@dataclass(frozen=True)
class GanTrainConfig:
    epochs: int = 50
    cycle_weight: float = 10.0
    pool_size: int = 50
    lr: float = 2e-4
    beta1: float = 0.5
    batch_size: int = 1
    image_side: int = 64
    width_scale: float = 1.0
    res_blocks: int = 2

    def __post_init__(self):
        if self.epochs < 1:
            raise VoiError("epochs must be at least 1")
        if self.cycle_weight < 0:
            raise VoiError("cycle weight must be non-negative")
        if self.pool_size < 1:
            raise VoiError("pool size must be at least 1")


@dataclass
class DomainDataset:
    """Thumbnails from one appearance domain, (N,3,S,S) float32 in [0,1]."""

    images: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.images, dtype=np.float32)
        if arr.ndim != 4 or arr.shape[1] != 3 or arr.shape[2] != arr.shape[3]:
            raise VoiError(f"expected (N,3,S,S) image array, got {arr.shape}")
        self.images = arr

    def __len__(self):
        return self.images.shape[0]

    @property
    def side(self):
        return self.images.shape[2]

    @classmethod
    def from_images(cls, images):
        return cls(np.stack([im.to_float().transpose(2, 0, 1) for im in images]))

    @classmethod
    def from_dir(cls, directory, limit=None):
        paths = sorted(Path(directory).glob("*.png"))
        if limit is not None:
            paths = paths[:limit]
        if not paths:
            raise VoiError(f"no PNG images under {directory}")
        return cls.from_images([Image.load_png(p) for p in paths])


class ResnetGenerator:
    """conv7 stem, two stride-2 encoders, residual core, two upsample-conv
    decoders; instance norm throughout and a tanh output head."""

    def __init__(self, store, prefix, width, res_blocks, rng):
        w = width
        self.c_in = Conv2d(store, f"{prefix}/c_in", 3, w, k=7, rng=rng)
        self.n_in = InstanceNorm2d(store, f"{prefix}/n_in", w)
        self.down1 = Conv2d(store, f"{prefix}/down1", w, 2 * w, k=3, stride=2, rng=rng)
        self.n_d1 = InstanceNorm2d(store, f"{prefix}/n_d1", 2 * w)
        self.down2 = Conv2d(store, f"{prefix}/down2", 2 * w, 4 * w, k=3, stride=2, rng=rng)
        self.n_d2 = InstanceNorm2d(store, f"{prefix}/n_d2", 4 * w)
        self.res = []
        for i in range(res_blocks):
            self.res.append(
                (
                    Conv2d(store, f"{prefix}/res{i}a", 4 * w, 4 * w, k=3, rng=rng),
                    InstanceNorm2d(store, f"{prefix}/res{i}an", 4 * w),
                    Conv2d(store, f"{prefix}/res{i}b", 4 * w, 4 * w, k=3, rng=rng),
                    InstanceNorm2d(store, f"{prefix}/res{i}bn", 4 * w),
                )
            )
        self.up1 = Conv2d(store, f"{prefix}/up1", 4 * w, 2 * w, k=3, rng=rng)
        self.n_u1 = InstanceNorm2d(store, f"{prefix}/n_u1", 2 * w)
        self.up2 = Conv2d(store, f"{prefix}/up2", 2 * w, w, k=3, rng=rng)
        self.n_u2 = InstanceNorm2d(store, f"{prefix}/n_u2", w)
        self.c_out = Conv2d(store, f"{prefix}/c_out", w, 3, k=7, rng=rng, gain="xavier")

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(self.n_in(self.c_in(x)))
        h = relu(self.n_d1(self.down1(h)))
        h = relu(self.n_d2(self.down2(h)))
        for conv_a, norm_a, conv_b, norm_b in self.res:
            h = add(h, norm_b(conv_b(relu(norm_a(conv_a(h))))))
        h = relu(self.n_u1(self.up1(upsample_nearest(h, 2))))
        h = relu(self.n_u2(self.up2(upsample_nearest(h, 2))))
        return tanh(self.c_out(h))


class PatchDiscriminator:
    """Strided conv stack scoring overlapping patches; output stays a spatial
    map rather than a scalar so every region is judged separately."""

    def __init__(self, store, prefix, width, rng):
        w = width
        self.c1 = Conv2d(store, f"{prefix}/c1", 3, w, k=3, stride=2, rng=rng)
        self.c2 = Conv2d(store, f"{prefix}/c2", w, 2 * w, k=3, stride=2, rng=rng)
        self.n2 = InstanceNorm2d(store, f"{prefix}/n2", 2 * w)
        self.c3 = Conv2d(store, f"{prefix}/c3", 2 * w, 4 * w, k=3, stride=2, rng=rng)
        self.n3 = InstanceNorm2d(store, f"{prefix}/n3", 4 * w)
        self.out = Conv2d(store, f"{prefix}/out", 4 * w, 1, k=3, stride=1, rng=rng, gain="xavier")

    def __call__(self, x: Tensor) -> Tensor:
        h = leaky_relu(self.c1(x), 0.2)
        h = leaky_relu(self.n2(self.c2(h)), 0.2)
        h = leaky_relu(self.n3(self.c3(h)), 0.2)
        return self.out(h)


@dataclass
class CycleGanModel:
    store: ParameterStore
    g_src_to_tgt: ResnetGenerator
    g_tgt_to_src: ResnetGenerator
    d_src: PatchDiscriminator
    d_tgt: PatchDiscriminator
    image_side: int
    width_scale: float
    res_blocks: int

    def translate(self, images, direction="src_to_tgt", batch_size=16):
        """Map a (N,3,S,S) [0,1] batch through one generator; output matches
        the input count and shape and stays within [0,1]."""
        arr = np.asarray(images, dtype=np.float32)
        if arr.ndim != 4 or arr.shape[1:] != (3, self.image_side, self.image_side):
            raise VoiError(f"translate expects (N,3,{self.image_side},{self.image_side}), got {arr.shape}")
        if direction not in ("src_to_tgt", "tgt_to_src"):
            raise VoiError(f"unknown direction '{direction}'")
        gen = self.g_src_to_tgt if direction == "src_to_tgt" else self.g_tgt_to_src
        outs = []
        for lo in range(0, arr.shape[0], batch_size):
            x = Tensor(arr[lo : lo + batch_size] * 2.0 - 1.0)
            outs.append((gen(x).data + 1.0) * 0.5)
        if not outs:
            return np.zeros_like(arr)
        return np.clip(np.concatenate(outs), 0.0, 1.0)

    def save(self, path):
        save_checkpoint(
            self.store,
            path,
            meta={
                "kind": "cyclegan",
                "image_side": self.image_side,
                "width_scale": self.width_scale,
                "res_blocks": self.res_blocks,
            },
        )

    @classmethod
    def load(cls, path):
        values, meta = load_checkpoint(path)
        if meta.get("kind") != "cyclegan":
            raise VoiError(f"{path} is not a translator checkpoint")
        model = build_cyclegan(
            int(meta["image_side"]),
            width_scale=float(meta["width_scale"]),
            res_blocks=int(meta["res_blocks"]),
        )
        model.store.load_values(values)
        return model


def build_cyclegan(image_side: int, width_scale: float = 1.0, res_blocks: int = 2, seed: int = 0) -> CycleGanModel:
    if image_side % 4 != 0 or image_side < 8:
        raise VoiError(f"image side must be a positive multiple of 4, got {image_side}")
    width = max(4, int(round(8 * width_scale)))
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    return CycleGanModel(
        store=store,
        g_src_to_tgt=ResnetGenerator(store, "G", width, res_blocks, rng),
        g_tgt_to_src=ResnetGenerator(store, "F", width, res_blocks, rng),
        d_src=PatchDiscriminator(store, "Dsrc", width, rng),
        d_tgt=PatchDiscriminator(store, "Dtgt", width, rng),
        image_side=image_side,
        width_scale=width_scale,
        res_blocks=res_blocks,
    )


def _ls_loss(pred: Tensor, target: float) -> Tensor:
    diff = add(pred, -target)
    return tmean(mul(diff, diff))


def _l1(a: Tensor, b: Tensor) -> Tensor:
    return tmean(abs_(add(a, mul(b, -1.0))))


def _generator_pass(model, x: Tensor, y: Tensor, cycle_weight: float):
    fake_tgt = model.g_src_to_tgt(x)
    rec_src = model.g_tgt_to_src(fake_tgt)
    fake_src = model.g_tgt_to_src(y)
    rec_tgt = model.g_src_to_tgt(fake_src)
    adv_g = _ls_loss(model.d_tgt(fake_tgt), 1.0)
    adv_f = _ls_loss(model.d_src(fake_src), 1.0)
    cyc = add(_l1(rec_src, x), _l1(rec_tgt, y))
    total = add(add(adv_g, adv_f), mul(cyc, cycle_weight))
    return total, adv_g, adv_f, cyc, fake_tgt.data, fake_src.data


def cyclegan_losses(model: CycleGanModel, batch_src, batch_tgt, cycle_weight: float = 10.0) -> dict:
    """Diagnostic loss terms on one batch pair; cyc is reported unweighted."""
    x = Tensor(np.asarray(batch_src, dtype=np.float32) * 2.0 - 1.0)
    y = Tensor(np.asarray(batch_tgt, dtype=np.float32) * 2.0 - 1.0)
    if x.data.shape[1:] != y.data.shape[1:]:
        raise VoiError("source and target batches must share one image shape")
    _total, adv_g, adv_f, cyc, fake_tgt, fake_src = _generator_pass(model, x, y, cycle_weight)
    d_src = mul(add(_ls_loss(model.d_src(x), 1.0), _ls_loss(model.d_src(Tensor(fake_src)), 0.0)), 0.5)
    d_tgt = mul(add(_ls_loss(model.d_tgt(y), 1.0), _ls_loss(model.d_tgt(Tensor(fake_tgt)), 0.0)), 0.5)
    return {
        "adv_G": adv_g.item(),
        "adv_F": adv_f.item(),
        "adv_Dsrc": d_src.item(),
        "adv_Dtgt": d_tgt.item(),
        "cyc": cyc.item(),
    }


def cycle_l1(model: CycleGanModel, images, direction="src_to_tgt") -> float:
    """Mean round-trip reconstruction error on [0,1] images; the per-build
    diagnostic for translator health."""
    there = model.translate(images, direction)
    back = model.translate(there, "tgt_to_src" if direction == "src_to_tgt" else "src_to_tgt")
    return float(np.mean(np.abs(back - np.asarray(images, dtype=np.float32))))


class ImagePool:
    """History of the most recent generated fakes.

    query() inserts the new fake then returns a uniformly drawn element, so a
    pool of size 1 passes the new fake straight through while larger pools
    feed the discriminator a subset of previously generated images.
    """

    def __init__(self, size: int, rng):
        self.size = size
        self.items = []
        self.rng = rng

    def query(self, fake: np.ndarray) -> np.ndarray:
        self.items.append(fake.copy())
        if len(self.items) > self.size:
            self.items.pop(0)
        return self.items[int(self.rng.integers(len(self.items)))]


def train_cyclegan(src: DomainDataset, tgt: DomainDataset, cfg: GanTrainConfig, seed: int = 0):
    """Alternating least-squares adversarial training; returns the model plus
    one loss record per epoch. Deterministic for a fixed seed."""
    if len(src) == 0 or len(tgt) == 0:
        raise VoiError("both domains need at least one image")
    if src.side != cfg.image_side or tgt.side != cfg.image_side:
        raise VoiError(f"dataset side {src.side}/{tgt.side} does not match configured side {cfg.image_side}")
    model = build_cyclegan(cfg.image_side, cfg.width_scale, cfg.res_blocks, seed=seed)
    store = model.store
    adam_gen = Adam(store, AdamConfig(lr=cfg.lr, beta1=cfg.beta1), names=store.trainable_names("G/") + store.trainable_names("F/"))
    adam_disc = Adam(store, AdamConfig(lr=cfg.lr, beta1=cfg.beta1), names=store.trainable_names("Dsrc/") + store.trainable_names("Dtgt/"))
    rng = np.random.default_rng(seed)
    pool_src = ImagePool(cfg.pool_size, rng)
    pool_tgt = ImagePool(cfg.pool_size, rng)

    src_scaled = src.images * 2.0 - 1.0
    tgt_scaled = tgt.images * 2.0 - 1.0
    steps = min(len(src), len(tgt)) // cfg.batch_size
    if steps == 0:
        raise VoiError("datasets smaller than one batch")

    log_rows = []
    for epoch in range(1, cfg.epochs + 1):
        order_src = rng.permutation(len(src))
        order_tgt = rng.permutation(len(tgt))
        sums = dict.fromkeys(("adv_G", "adv_F", "adv_Dsrc", "adv_Dtgt", "cyc"), 0.0)
        for step in range(steps):
            sel_s = order_src[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            sel_t = order_tgt[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            x = Tensor(src_scaled[sel_s])
            y = Tensor(tgt_scaled[sel_t])

            store.zero_grad()
            total, adv_g, adv_f, cyc, fake_tgt, fake_src = _generator_pass(model, x, y, cfg.cycle_weight)
            total.backward()
            adam_gen.step()

            store.zero_grad()
            d_src = mul(add(_ls_loss(model.d_src(x), 1.0), _ls_loss(model.d_src(Tensor(pool_src.query(fake_src))), 0.0)), 0.5)
            d_tgt = mul(add(_ls_loss(model.d_tgt(y), 1.0), _ls_loss(model.d_tgt(Tensor(pool_tgt.query(fake_tgt))), 0.0)), 0.5)
            d_total = add(d_src, d_tgt)
            d_total.backward()
            adam_disc.step()

            sums["adv_G"] += adv_g.item()
            sums["adv_F"] += adv_f.item()
            sums["adv_Dsrc"] += d_src.item()
            sums["adv_Dtgt"] += d_tgt.item()
            sums["cyc"] += cyc.item()
        row = {"epoch": epoch}
        row.update({k: v / steps for k, v in sums.items()})
        log_rows.append(row)
        log.info("gan epoch %d: %s", epoch, {k: round(v, 4) for k, v in row.items() if k != "epoch"})
    return model, log_rows


def format_gan_log(rows) -> str:
    lines = [",".join(GAN_LOG_COLUMNS)]
    for r in rows:
        lines.append(",".join(str(r["epoch"]) if c == "epoch" else f"{r[c]:.6f}" for c in GAN_LOG_COLUMNS))
    return "\n".join(lines) + "\n"
