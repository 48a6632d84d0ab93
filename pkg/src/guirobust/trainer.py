"""Teacher-forced training of the grounding model on a synthetic corpus."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import tensorcore as tc
from .checkpoint import Checkpoint
from .grounding import target_string
from .metrics import success
from .model import Grounder, ModelConfig
from .synthgui import Corpus, ElementAnnotation, to_float

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 14
    batch_images: int = 8
    targets_per_image: int = 4
    lr: float = 2e-3
    warmup_steps: int = 200
    min_lr_ratio: float = 0.05
    clip_norm: float = 1.0
    max_steps: int | None = None
    val_samples: int = 200
    attn_weight: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)


def element_example(model: Grounder, el: ElementAnnotation) -> tuple[list[int], list[int]]:
    """(input ids, target ids) for teacher forcing on one element."""
    v = model.vocab
    instr = v.encode(el.instruction)
    out = v.encode_chars(target_string(el.bbox, model.config.output_mode)) + [v.eos]
    return instr + [v.bos] + out[:-1], out


def _elements(record: dict) -> list[ElementAnnotation]:
    return [ElementAnnotation.from_dict(record["target"])] + [
        ElementAnnotation.from_dict(d) for d in record["distractors"]]


def _batches(corpus: Corpus, ids: list[str], batch: int, rng: np.random.Generator) -> list[list[str]]:
    by_platform: dict[str, list[str]] = {}
    for sid in ids:
        by_platform.setdefault(corpus.records[sid]["platform"], []).append(sid)
    out = []
    for plat in sorted(by_platform):
        group = list(by_platform[plat])
        rng.shuffle(group)
        out += [group[i:i + batch] for i in range(0, len(group), batch)]
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / max(1, total - cfg.warmup_steps)
    cos = 0.5 * (1 + math.cos(math.pi * min(1.0, frac)))
    return cfg.lr * (cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * cos)


def patch_mask(boxes: np.ndarray, h: int, w: int, patch: int) -> np.ndarray:
    """[..., N] mask of the patches that overlap each normalized box [..., 4]."""
    gh, gw = -(-h // patch), -(-w // patch)
    boxes = np.asarray(boxes, dtype=np.float64)
    x0, y0, x1, y1 = (boxes[..., k, None] for k in range(4))
    cols = np.arange(gw) * patch
    rows = np.arange(gh) * patch
    in_x = (cols + patch > x0 * w) & (cols < x1 * w)  # [..., gw]
    in_y = (rows + patch > y0 * h) & (rows < y1 * h)  # [..., gh]
    return (in_y[..., :, None] & in_x[..., None, :]).reshape(boxes.shape[:-1] + (gh * gw,))


def batch_loss(model: Grounder, images: np.ndarray, inputs: np.ndarray, targets: np.ndarray,
               start: int, boxes: np.ndarray | None = None, attn_weight: float = 0.0) -> tc.Tensor:
    """Mean token loss, plus an optional pointing term on cross-attention.

    The pointing term is the mean negative log of the first decoder layer's
    attention mass on patches overlapping the target box [B, T, 4]. Without
    it, attention over hundreds of patches sits near uniform for a long time
    before the model discovers where to look.
    """
    attn: list = [] if attn_weight else None
    logits = model.decode(model.memory(*model.encode_with_positions(images)), inputs, attn)
    b, t, L, _ = logits.shape
    loss = tc.softmax_cross_entropy(logits[:, :, start:L, :], targets) * (1.0 / targets.size)
    if attn_weight:
        p = attn[0]
        heads, n = p.shape[1], p.shape[3]
        mask = patch_mask(boxes, images.shape[1], images.shape[2], model.config.patch_size)
        p = p.reshape(b, heads, t, L, n)[:, :, :, start:L, :]
        mass = tc.tsum(p * mask[:, None, :, None, :].astype(model.dtype), axis=-1)
        point = tc.mean(tc.log(mass + 1e-6)) * -1.0
        loss = loss + point * attn_weight
    return loss


def train(corpus: Corpus, config: ModelConfig | None = None, hyper: TrainConfig | None = None,
          seed: int = 0, progress=None) -> Checkpoint:
    """Adam on the summed token loss of ground-truth coordinate strings."""
    config = config or ModelConfig()
    hyper = hyper or TrainConfig()
    rng = np.random.default_rng(seed)
    model = Grounder(config, seed=seed)
    opt = tc.Adam(model.parameters(), lr=hyper.lr, clip_norm=hyper.clip_norm)
    train_ids = corpus.split("train")
    if not train_ids:
        raise ValueError("corpus has no train split")
    pixels: dict[str, np.ndarray] = {}

    def load(sid):
        if sid not in pixels:
            pixels[sid] = corpus.load_pixels(sid)
        return pixels[sid]

    steps_per_epoch = len(_batches(corpus, train_ids, hyper.batch_images, np.random.default_rng(0)))
    total = steps_per_epoch * hyper.epochs
    if hyper.max_steps is not None:
        total = min(total, hyper.max_steps)
    curve: list[float] = []
    step = 0
    t0 = time.time()
    for epoch in range(hyper.epochs):
        for batch in _batches(corpus, train_ids, hyper.batch_images, rng):
            if step >= total:
                break
            imgs = np.stack([to_float(load(sid), model.dtype) for sid in batch])
            inputs, targets, boxes = [], [], []
            for sid in batch:
                els = _elements(corpus.records[sid])
                k = min(hyper.targets_per_image, len(els))
                pick = rng.choice(len(els), size=k, replace=False)
                if k < hyper.targets_per_image:
                    pick = np.concatenate([pick, rng.choice(len(els), hyper.targets_per_image - k)])
                ex = [element_example(model, els[j]) for j in pick]
                inputs.append([e[0] for e in ex])
                targets.append([e[1] for e in ex])
                boxes.append([els[j].bbox for j in pick])
            inputs = np.asarray(inputs)
            targets = np.asarray(targets)
            start = inputs.shape[2] - targets.shape[2]
            opt.zero_grad()
            loss = batch_loss(model, imgs, inputs, targets, start, np.asarray(boxes), hyper.attn_weight)
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingDiverged(f"loss became {lv} at step {step} (epoch {epoch}); "
                                       f"last finite losses {curve[-5:]}")
            loss.backward()
            try:
                opt.step(lr_at(step, total, hyper))
            except FloatingPointError as e:
                raise TrainingDiverged(f"{e} at step {step}; last losses {curve[-5:]}") from None
            curve.append(lv)
            step += 1
            if progress is not None and step % 50 == 0:
                progress(step, total, float(np.mean(curve[-50:])), time.time() - t0)
    metadata = {
        "steps": step,
        "seed": seed,
        "train_config": hyper.to_dict(),
        "final_loss": float(np.mean(curve[-50:])) if curve else None,
        "corpus": corpus.fingerprint(),
    }
    log.info("trained %d steps in %.1fs", step, time.time() - t0)
    ckpt = Checkpoint(model, metadata, curve)
    if hyper.val_samples and corpus.split("val"):
        metadata["val_sr"] = validation_sr(model, corpus, corpus.split("val")[: hyper.val_samples])
    return ckpt


def validation_sr(model: Grounder, corpus: Corpus, ids: list[str]) -> float:
    hits = 0
    for sid in ids:
        r = corpus.records[sid]
        img = to_float(corpus.load_pixels(sid), model.dtype)
        pred = model.generate(img, r["instruction_tokens"])
        hits += success(pred, r["target_bbox"])
    return hits / max(1, len(ids))
