"""Run configuration and the evaluation campaign driver.

A campaign evaluates every sample of one corpus split under a set of
conditions (clean always included) at one or more pixel budgets, writes
one EvalRecord per (budget, sample, condition) and renders report tables.
Per-sample randomness is derived from ``(master_seed, sample id,
condition)``, so results do not depend on how samples are scheduled.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from multiprocessing import get_context
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import metrics
from .attack import AttackConfig, AttackError, TargetSpec, pgd
from .grounding import GroundingPrediction
from .metrics import EvalRecord, ReportTable, success
from .noise import NoiseSpec, default_grid, resize_budget
from .synthgui import Corpus, ElementAnnotation, derive_seed, to_float

MODES = ("noise", "untargeted", "targeted")
SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Missing or inconsistent corpus, checkpoint or record files."""


@dataclass
class RunConfig:
    master_seed: int = 7
    corpus: str = "corpus"
    corpus_n: int = 5000
    presets: list = field(default_factory=lambda: ["mobile", "desktop", "web"])
    checkpoint: str = "model.ckpt"
    mode: str = "noise"
    noise: list = field(default_factory=list)  # NoiseSpec dicts; empty means the default grid
    attack: dict = field(default_factory=dict)  # AttackConfig fields
    target: dict = field(default_factory=dict)  # TargetSpec fields
    budgets: list = field(default_factory=list)  # pixel budgets; empty means native only
    split: str = "test"
    max_samples: int | None = None
    out_dir: str = "runs/eval"
    workers: int = 1
    train: dict = field(default_factory=dict)  # TrainConfig fields
    model: dict = field(default_factory=dict)  # ModelConfig fields

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.max_samples is not None and self.max_samples < 1:
            raise ValueError("max_samples must be >= 1")
        for b in self.budgets:
            if int(b) < 64:
                raise ValueError(f"pixel budget {b} is below 64")
        # validate nested specs eagerly so bad configs fail before any work
        self.noise_specs()
        self.attack_config()
        self.target_spec()

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown RunConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> RunConfig:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ValueError(f"config {path} is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise ValueError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def noise_specs(self) -> list[NoiseSpec]:
        if self.mode != "noise":
            return []
        return [NoiseSpec.from_dict(d) for d in self.noise] if self.noise else default_grid()

    def attack_config(self) -> AttackConfig:
        d = dict(self.attack)
        d.setdefault("objective", "targeted_lm" if self.mode == "targeted" else "untargeted_encoder")
        return AttackConfig.from_dict(d)

    def target_spec(self) -> TargetSpec:
        return TargetSpec.from_dict(self.target)

    def report_config(self) -> dict:
        """What every report embeds: the run config plus resolved defaults."""
        d = self.to_dict()
        d["resolved"] = {
            "noise": [s.to_dict() for s in self.noise_specs()],
            "attack": self.attack_config().to_dict() if self.mode != "noise" else None,
            "target": self.target_spec().to_dict() if self.mode == "targeted" else None,
        }
        # neither the worker count nor the output location changes results,
        # so reports from otherwise identical runs are byte-identical
        d.pop("workers")
        d.pop("out_dir")
        return d


# ------------------------------------------------------------- conditions


def conditions(cfg: RunConfig) -> list[str]:
    if cfg.mode == "noise":
        return ["clean"] + [f"noise:{s.label}" for s in cfg.noise_specs()]
    return ["clean", cfg.mode]


def budget_label(budget) -> str:
    return "native" if budget is None else f"max{int(budget)}px"


# ----------------------------------------------------------------- worker

_STATE: dict = {}


def _init_worker(corpus_root: str, ckpt_path: str, cfg_dict: dict):
    _STATE["corpus"] = Corpus(corpus_root)
    _STATE["model"] = ckpt_io.load(ckpt_path).model
    _STATE["cfg"] = RunConfig.from_dict(cfg_dict)


def _eval_job(job: tuple[str, int | None]) -> list[dict]:
    sid, budget = job
    return evaluate_sample(_STATE["model"], _STATE["corpus"], _STATE["cfg"], sid, budget)


def evaluate_sample(model, corpus: Corpus, cfg: RunConfig, sid: str, budget) -> list[dict]:
    """All condition records for one sample at one pixel budget."""
    r = corpus.records[sid]
    target = ElementAnnotation.from_dict(r["target"])
    img = to_float(corpus.load_pixels(sid), np.float64)
    if budget is not None:
        img = resize_budget(img, int(budget))
    instr = r["instruction_tokens"]
    res = budget_label(budget)

    def record(cond, pred, **kw):
        return EvalRecord(sid, cond, pred, tuple(r["target_bbox"]), r["platform"],
                          target.report_kind, res, **kw).to_dict()

    def predict(image):
        return model.generate(np.asarray(image, dtype=model.dtype), instr)

    out = [record("clean", predict(img))]
    if cfg.mode == "noise":
        for spec in cfg.noise_specs():
            cond = f"noise:{spec.label}"
            noisy = spec.apply(img, seed=derive_seed(cfg.master_seed, sid, cond))
            out.append(record(cond, predict(noisy)))
        return out
    acfg = cfg.attack_config()
    target_spec = cfg.target_spec() if cfg.mode == "targeted" else None
    region = target_spec.region if target_spec else None
    rng = np.random.default_rng(derive_seed(cfg.master_seed, sid, cfg.mode))
    try:
        trace = pgd(model, img, instr, acfg, target=target_spec, rng=rng)
    except AttackError as e:
        bad = GroundingPrediction((), None)
        out.append(record(cfg.mode, bad, target_region=region, errored=True,
                          extras={"error": str(e)}))
        return out
    extras = {"objective_final": trace.objective[-1], "objective_best": trace.best_so_far[-1]}
    if trace.post_quant_objective is not None:
        # the quantized image is primary; the float image's outcome is kept alongside
        extras["objective_quantized"] = trace.post_quant_objective
        raw = predict(trace.extras["unquantized"])
        extras["unquantized_prediction"] = raw.text
        extras["unquantized_success"] = success(raw, r["target_bbox"])
        if region is not None:
            extras["unquantized_target_hit"] = success(raw, region)
    out.append(record(cfg.mode, predict(trace.adversarial), target_region=region, extras=extras))
    return out


def sample_ids(corpus: Corpus, cfg: RunConfig) -> list[str]:
    ids = corpus.split(cfg.split)
    if cfg.max_samples is not None:
        ids = ids[: cfg.max_samples]
    if not ids:
        raise DataError(f"split {cfg.split!r} of corpus {corpus.root} is empty")
    return ids


def run_eval(cfg: RunConfig, progress=None) -> tuple[list[EvalRecord], list[Path]]:
    """Evaluate, then write ``records.jsonl``, ``run.json`` and the reports."""
    try:
        corpus = Corpus(cfg.corpus)
    except FileNotFoundError as e:
        raise DataError(str(e)) from None
    if not Path(cfg.checkpoint).exists():
        raise DataError(f"checkpoint {cfg.checkpoint} not found")
    ids = sample_ids(corpus, cfg)
    budgets = [None] if not cfg.budgets else [int(b) for b in cfg.budgets]
    jobs = [(sid, b) for b in budgets for sid in ids]
    cfg_dict = cfg.to_dict()
    rows: list[dict] = []
    if cfg.workers == 1:
        _init_worker(str(corpus.root), cfg.checkpoint, cfg_dict)
        for i, job in enumerate(jobs):
            rows += _eval_job(job)
            if progress:
                progress(i + 1, len(jobs))
    else:
        ctx = get_context("spawn")
        with ctx.Pool(cfg.workers, _init_worker, (str(corpus.root), cfg.checkpoint, cfg_dict)) as pool:
            for i, part in enumerate(pool.imap(_eval_job, jobs, chunksize=1)):
                rows += part
                if progress:
                    progress(i + 1, len(jobs))
    records = [EvalRecord.from_dict(d) for d in rows]
    out = Path(cfg.out_dir)
    run_info = {
        "run_config": cfg.report_config(),
        "corpus_fingerprint": corpus.fingerprint(),
        "checkpoint_hash": ckpt_io.file_hash(cfg.checkpoint),
    }
    metrics.write_records(records, out / "records.jsonl")
    (out / "run.json").write_text(json.dumps(run_info, indent=1, sort_keys=True) + "\n")
    written = metrics.emit_report(build_tables(records), out, run_info)
    return records, written


# ----------------------------------------------------------------- tables


def build_tables(records: Sequence[EvalRecord]) -> list[ReportTable]:
    """Report rows per resolution block, in first-seen order."""
    blocks: dict[str, dict[str, list[EvalRecord]]] = {}
    for r in records:
        blocks.setdefault(r.resolution, {}).setdefault(r.condition, []).append(r)
    tables: list[ReportTable] = []
    for block, by_cond in blocks.items():
        clean = by_cond.get("clean", [])
        clean_t = metrics.breakdown(clean, "sr", "clean", block) if clean else None
        if clean_t:
            tables.append(clean_t)
        for cond, rs in by_cond.items():
            if cond == "clean":
                continue
            ok = [r for r in rs if not r.errored]
            if not ok:
                continue
            ids = {r.sample_id for r in ok}
            attacked = metrics.breakdown(ok, "sr", cond, block)
            tables.append(attacked)
            if cond in ("untargeted", "targeted") or cond.startswith("noise:"):
                paired = [r for r in clean if r.sample_id in ids]
                if paired:
                    base = metrics.breakdown(paired, "sr", "clean", block)
                    if cond == "untargeted":
                        tables.append(metrics.asr_table(base, attacked, "untargeted ASR"))
                        tables.append(metrics.asr_table(base, attacked, "untargeted abs drop", absolute=True))
                    elif cond.startswith("noise:"):
                        tables.append(metrics.asr_table(base, attacked, f"{cond} SR drop", absolute=True))
            if cond == "targeted":
                tables.append(metrics.breakdown(ok, "targeted_asr", "targeted ASR", block))
    return tables


def errored_counts(records: Sequence[EvalRecord]) -> dict[str, int]:
    out: dict[str, int] = {}
    for r in records:
        if r.errored:
            out[r.condition] = out.get(r.condition, 0) + 1
    return out


# ----------------------------------------------------------------- report


def merge_reports(record_files: Sequence[str | os.PathLike], out_dir: str | os.PathLike) -> list[Path]:
    """Merge record files from runs on the same corpus into one report."""
    if not record_files:
        raise DataError("no record files given")
    records: list[EvalRecord] = []
    infos = []
    for path in record_files:
        path = Path(path)
        if not path.exists():
            raise DataError(f"record file {path} not found")
        meta = path.parent / "run.json"
        if not meta.exists():
            raise DataError(f"{path}: missing sibling run.json")
        infos.append(json.loads(meta.read_text()))
        try:
            records += metrics.read_records(path)
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DataError(f"{path}: unreadable record file ({e})") from None
    hashes = {i["corpus_fingerprint"] for i in infos}
    if len(hashes) > 1:
        raise DataError(f"refusing to merge runs over different corpora: {sorted(hashes)}")
    info = infos[0] if len(infos) == 1 else {"merged": infos}
    return metrics.emit_report(build_tables(records), out_dir, info)
