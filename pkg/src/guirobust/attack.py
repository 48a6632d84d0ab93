"""L-infinity PGD against the grounding model.

Two objectives are supported:

* ``untargeted_encoder``: push the visual embedding away from the clean one,
  ascending ``||f(s + delta) - f(s)||^2`` with ``f(s)`` frozen.
* ``targeted_lm``: descend the token loss of an attacker-chosen coordinate
  string (ascending its log-likelihood).

Perturbation bookkeeping is done in float64; the model sees its own dtype.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .grounding import format_box, format_point, parse_prediction
from .metrics import inside
from .model import Grounder
from .tensorcore import Tensor

OBJECTIVES = ("untargeted_encoder", "targeted_lm")
INITS = ("zero", "random_uniform")
DEFAULT_INIT = {"untargeted_encoder": "random_uniform", "targeted_lm": "zero"}
TARGET_REGION = (0.0, 0.0, 0.02, 0.02)  # top-left 0.04% of the image


class AttackError(FloatingPointError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 16 / 255
    alpha: float = 1 / 255
    steps: int = 100
    objective: str = "untargeted_encoder"
    init: str | None = None  # None picks the objective's default
    quantize_output: bool = True
    stop_on_success: bool = True  # targeted only: stop once the target decodes

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.init is None:
            object.__setattr__(self, "init", DEFAULT_INIT[self.objective])
        if self.init not in INITS:
            raise ValueError(f"unknown init {self.init!r}")
        if not 0 < self.alpha <= self.epsilon <= 1:
            raise ValueError(f"need 0 < alpha <= epsilon <= 1, got {self.alpha}, {self.epsilon}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> AttackConfig:
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown AttackConfig keys {sorted(extra)}")
        return cls(**d)


def make_target_tokens(region: Sequence[float], mode: str) -> list[str]:
    x0, y0, x1, y1 = region
    if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
        raise ValueError(f"target region {tuple(region)} is degenerate or outside the unit square")
    if mode == "point":
        text = format_point((x0 + x1) / 2, (y0 + y1) / 2)
    elif mode == "bbox":
        text = format_box(x0, y0, x1, y1)
    else:
        raise ValueError(f"unknown output mode {mode!r}")
    return list(text)


@dataclass(frozen=True)
class TargetSpec:
    region: tuple[float, float, float, float] = TARGET_REGION
    mode: str = "point"
    target_tokens: tuple[str, ...] = ()

    def __post_init__(self):
        toks = tuple(self.target_tokens) or tuple(make_target_tokens(self.region, self.mode))
        if not parse_prediction(toks, self.mode).valid:
            raise ValueError(f"target tokens {''.join(toks)!r} do not parse as a {self.mode}")
        object.__setattr__(self, "target_tokens", toks)
        object.__setattr__(self, "region", tuple(self.region))

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.region
        return (x1 - x0) * (y1 - y0)

    def to_dict(self) -> dict:
        return {"region": list(self.region), "mode": self.mode,
                "target_tokens": "".join(self.target_tokens)}

    @classmethod
    def from_dict(cls, d: dict) -> TargetSpec:
        extra = set(d) - {"region", "mode", "target_tokens"}
        if extra:
            raise ValueError(f"unknown TargetSpec keys {sorted(extra)}")
        return cls(tuple(d.get("region", TARGET_REGION)), d.get("mode", "point"),
                   tuple(d.get("target_tokens", "")))


@dataclass
class AttackTrace:
    objective: list[float]  # J at delta_0 .. delta_steps (ascent direction)
    best_so_far: list[float]
    max_abs_delta: list[float]  # per step, for feasibility audits
    pixel_range: list[tuple[float, float]]
    delta: np.ndarray
    adversarial: np.ndarray  # float64 image actually evaluated (quantized if requested)
    steps: int
    pre_quant_objective: float
    post_quant_objective: float | None = None
    extras: dict = field(default_factory=dict)

    def records(self) -> list[dict]:
        return [{"step": i, "objective": v, "best_so_far": b}
                for i, (v, b) in enumerate(zip(self.objective, self.best_so_far))]


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(delta, -epsilon, epsilon)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid, returned as float64 in [0, 1]."""
    return np.clip(np.rint(np.asarray(img, np.float64) * 255.0), 0, 255) / 255.0


def untargeted_loss(model: Grounder, image: np.ndarray, delta: Tensor,
                    clean_embedding: np.ndarray) -> Tensor:
    """||f(s + delta) - f(s)||^2 with the clean embedding held constant."""
    s = Tensor(np.asarray(image, dtype=model.dtype))
    emb = model.encode_image(s + delta)
    if emb.shape != clean_embedding.shape:
        raise ValueError(f"embedding shape {emb.shape} != clean {clean_embedding.shape}")
    return tc.square(emb - clean_embedding).sum()


def targeted_loss(model: Grounder, image: np.ndarray, delta: Tensor, instruction: Sequence[int],
                  target: TargetSpec) -> Tensor:
    """Token loss of the target coordinate string on s + delta."""
    try:
        ids = model.vocab.encode(target.target_tokens)
    except KeyError as e:
        raise ValueError(f"invalid target tokens: {e}") from None
    s = Tensor(np.asarray(image, dtype=model.dtype))
    return model.lm_loss(s + delta, instruction, ids)


Objective = Callable[[Tensor], Tensor]


def run_pgd(image: np.ndarray, objective: Objective, config: AttackConfig,
            rng: np.random.Generator | None = None, dtype=np.float64,
            done: Callable[[np.ndarray], bool] | None = None) -> AttackTrace:
    """Sign-gradient ascent of ``objective(delta)`` inside the eps-ball.

    After every step the perturbation is clipped to [-eps, eps] and then so
    that ``image + delta`` stays in [0, 1]. If ``done`` is given it is called
    on each iterate's evaluated image (quantized if configured) and a true
    result ends the attack early.
    """
    s = np.asarray(image, dtype=np.float64)
    eps, alpha = config.epsilon, config.alpha
    if config.init == "random_uniform" and config.steps > 0:  # zero steps means no attack at all
        rng = rng if rng is not None else np.random.default_rng(0)
        delta = rng.uniform(-eps, eps, size=s.shape)
    else:
        delta = np.zeros_like(s)
    delta = np.clip(s + project_linf(delta, eps), 0.0, 1.0) - s

    values, best, maxabs, ranges = [], [], [], []

    def audit(d):
        adv = s + d
        maxabs.append(float(np.abs(d).max()) if d.size else 0.0)
        ranges.append((float(adv.min()), float(adv.max())))

    def evaluated(d):
        adv = np.clip(s + d, 0.0, 1.0)
        return quantize(adv) if config.quantize_output else adv

    audit(delta)
    executed = 0
    for step in range(config.steps):
        if done is not None and done(evaluated(delta)):
            break
        executed += 1
        d = Tensor(delta.astype(dtype), requires_grad=True)
        j = objective(d)
        tc.backward(j)
        g = d.grad
        if g is None:
            g = np.zeros_like(delta)
        if not np.all(np.isfinite(g)) or not np.isfinite(j.item()):
            raise AttackError(f"non-finite gradient or objective at step {step} "
                              f"(objective={j.item()}, finite grads={np.isfinite(g).mean():.3f})")
        values.append(j.item())
        best.append(max(values))
        delta = project_linf(delta + alpha * np.sign(g), eps)
        delta = np.clip(s + delta, 0.0, 1.0) - s
        audit(delta)
    with tc.no_grad():
        final = objective(Tensor(delta.astype(dtype))).item()
    values.append(final)
    best.append(max(values))
    adv = np.clip(s + delta, 0.0, 1.0)
    trace = AttackTrace(values, best, maxabs, ranges, delta, adv, executed, final)
    if config.quantize_output:
        adv_q = quantize(adv)
        with tc.no_grad():
            trace.post_quant_objective = objective(Tensor((adv_q - s).astype(dtype))).item()
        trace.extras["unquantized"] = adv
        trace.adversarial = adv_q
        trace.delta = adv_q - s
    return trace


def pgd(model: Grounder, image: np.ndarray, instruction: Sequence[int], config: AttackConfig,
        target: TargetSpec | None = None, rng: np.random.Generator | None = None) -> AttackTrace:
    """Attack one (screenshot, instruction) pair with the configured objective."""
    frozen = model.frozen()
    s = np.asarray(image, dtype=np.float64)
    done = None
    if config.objective == "untargeted_encoder":
        with tc.no_grad():
            clean = frozen.encode_image(s.astype(frozen.dtype)).data.copy()

        def objective(d):
            return untargeted_loss(frozen, s, d, clean)
    else:
        if target is None:
            raise ValueError("targeted attack needs a TargetSpec")

        def objective(d):
            return -targeted_loss(frozen, s, d, instruction, target)

        if config.stop_on_success:
            def done(adv):
                pred = frozen.generate(adv.astype(frozen.dtype), instruction)
                return pred.valid and inside(pred.point(), target.region)

    return run_pgd(s, objective, config, rng, dtype=frozen.dtype, done=done)
