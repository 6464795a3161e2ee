"""Five-stage signed pipeline, attack injection and seed/rate sweeps.

Run directory layout::

    objects/<2hex>/<hex>          content-addressed artifacts (may be shared)
    manifests/<stage>.manifest    canonical stage manifests
    signatures/<stage>.sig        PBS1 signature per stage
    keys/<role>.pub               PBK1 public keys
    roots.log                     append-only committed roots
    fliplog.tsv                   injected poison, when an attack ran
"""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import signing
from .attacks import AttackConfig, FlipLog, backdoor_attack, flip_labels, stamp_patch
from .manifest import (
    FeatureGrid,
    StageManifest,
    parse_manifest,
    read_feature_file,
    serialize_manifest,
    sha256,
    sha256_hex,
)
from .metrics import MetricsReport, attack_success_rate, ci_across_seeds, report_from_predictions
from .model import TrainConfig, TrainingError, predict_many, save_checkpoint, train
from .provenance import build_tree, record_root
from .signing import STAGE_ROLES, StageKeypair, verify_stage
from .store import ObjectStore, atomic_write
from .synthdata import Dataset, GenConfig, generate, stratified_split

log = logging.getLogger(__name__)

NO_VERIFY_BANNER = "!! VERIFICATION DISABLED: attacker-success mode, artifacts are consumed unchecked !!"


@dataclass
class RunRecord:
    workdir: str
    plan: dict
    metrics: MetricsReport | None = None
    artifacts: dict[str, str] = field(default_factory=dict)  # stage -> manifest sha256 hex
    timings: dict[str, float] = field(default_factory=dict)
    aborted_stage: str | None = None
    abort_kind: str | None = None
    abort_message: str | None = None
    flip_log: FlipLog | None = None
    verified: bool = True
    consumed_features: StageManifest | None = None
    checkpoint_hex: str | None = None

    @property
    def aborted(self) -> bool:
        return self.aborted_stage is not None

    @property
    def flipped(self) -> int:
        return len(self.flip_log) if self.flip_log else 0


def _write_stage(run: Path, stage: str, manifest: StageManifest, keys: Mapping[str, StageKeypair]) -> bytes:
    data = serialize_manifest(manifest)
    sig = signing.sign_manifest(keys[STAGE_ROLES[stage]], stage, data)
    atomic_write(signing.manifest_path(run, stage), data)
    atomic_write(signing.signature_path(run, stage), signing.encode_signature(sig))
    return data


def _tamper(run: Path, stage: str, manifest: StageManifest) -> bytes:
    # the adversary rewrites the artifact after it was signed; the signature file is left alone
    data = serialize_manifest(manifest)
    atomic_write(signing.manifest_path(run, stage), data)
    return data


def save_public_keys(run: Path, keys: Mapping[str, StageKeypair]) -> None:
    for role, kp in keys.items():
        atomic_write(signing.public_key_path(run, role), signing.save_public_key(kp.public()))


def generate_keys(scheme: str = signing.DEFAULT_SCHEME) -> dict[str, StageKeypair]:
    return {role: signing.keygen(role, scheme) for role in signing.ROLES}


def save_keys(directory: str | os.PathLike, keys: Mapping[str, StageKeypair]) -> None:
    d = Path(directory)
    for role, kp in keys.items():
        atomic_write(d / f"{role}.key", signing.save_keypair(kp))
        atomic_write(d / f"{role}.pub", signing.save_public_key(kp.public()))


def load_keys(directory: str | os.PathLike) -> dict[str, StageKeypair]:
    d = Path(directory)
    keys = {}
    for role in signing.ROLES:
        p = d / f"{role}.key"
        if not p.exists():
            raise FileNotFoundError(f"missing secret key for role {role}: {p}")
        keys[role] = signing.load_keypair(p.read_bytes())
    return keys


def load_grids(store: ObjectStore, manifest: StageManifest, ids: Sequence[str]) -> list[FeatureGrid]:
    by_id = manifest.by_id()
    return [read_feature_file(store.get(by_id[i][3])) for i in ids]


def run_pipeline(
    workdir: str | os.PathLike,
    gen_cfg: GenConfig,
    train_cfg: TrainConfig,
    attack_cfg: AttackConfig | None,
    keys: Mapping[str, StageKeypair],
    verify: bool = True,
    dataset: Dataset | None = None,
    store_dir: str | os.PathLike | None = None,
) -> RunRecord:
    """Run raw -> annotation -> features -> splits -> model and evaluate.

    With ``attack_cfg`` the poison is written over a stage's output after that
    stage signed it. With ``verify`` each stage checks its upstream signature
    (and the committed root) before consuming, and the run stops at the first
    failure.
    """
    missing = [r for r in signing.ROLES if r not in keys]
    if missing:
        raise ValueError(f"keys missing for role(s): {', '.join(missing)}")
    run = Path(workdir)
    run.mkdir(parents=True, exist_ok=True)
    store = ObjectStore(store_dir if store_dir is not None else signing.run_paths(run)["objects"])
    roots_log = signing.run_paths(run)["roots"]
    if roots_log.exists():
        roots_log.unlink()  # a fresh run starts a fresh log
    save_public_keys(run, keys)
    rec = RunRecord(str(run), {
        "gen": {"seed": gen_cfg.seed, "rows": gen_cfg.rows, "cols": gen_cfg.cols, "total": gen_cfg.total},
        "train": {"seed": train_cfg.seed, "lr": train_cfg.learning_rate, "hidden": train_cfg.hidden},
        "attack": attack_cfg.echo() if attack_cfg else None,
        "verify": verify,
    }, verified=verify)
    if not verify:
        log.info(NO_VERIFY_BANNER)
    clock = time.perf_counter()

    def lap(name: str) -> None:
        nonlocal clock
        now = time.perf_counter()
        rec.timings[name] = now - clock
        clock = now

    def check(stage: str, upstream: bytes | None) -> bool:
        if not verify:
            return True
        result, _ = verify_stage(run, stage, upstream)
        if not result.ok:
            rec.aborted_stage, rec.abort_kind, rec.abort_message = stage, result.kind, result.message
            log.info("%s", result.message)
        return result.ok

    ds = dataset if dataset is not None else generate(gen_cfg)
    # the orchestrator registers the partition up front, from the clean annotation
    _, split_plan = stratified_split(ds.annotation, gen_cfg.train_fraction, gen_cfg.seed)
    lap("generate")

    # raw
    for rid in ds.annotation.ids():
        store.put(ds.raw_files[rid])
    raw_bytes = _write_stage(run, "raw", ds.raw_manifest(), keys)
    rec.artifacts["raw"] = sha256_hex(raw_bytes)

    # annotation
    if not check("raw", None):
        return rec
    annotation = replace(ds.annotation, prev_manifest_hash=sha256(raw_bytes))
    ann_bytes = _write_stage(run, "annotation", annotation, keys)
    if attack_cfg is not None and attack_cfg.kind == "label_flip":
        poisoned, rec.flip_log = flip_labels(annotation, split_plan, attack_cfg)
        ann_bytes = _tamper(run, "annotation", poisoned)
        atomic_write(run / "fliplog.tsv", rec.flip_log.to_tsv().encode())
    rec.artifacts["annotation"] = sha256_hex(ann_bytes)
    lap("annotation")

    # features
    if not check("annotation", raw_bytes):
        return rec
    consumed_ann = parse_manifest(signing.manifest_path(run, "annotation").read_bytes())
    for rid in consumed_ann.ids():
        store.put(ds.feature_files[rid])
    tree = build_tree(consumed_ann.samples())
    features = StageManifest("features", consumed_ann.records, tree.root, sha256(ann_bytes))
    record_root(tree.root, roots_log, "features")
    feat_bytes = _write_stage(run, "features", features, keys)
    if attack_cfg is not None and attack_cfg.kind == "backdoor_patch":
        poisoned, modified, rec.flip_log = backdoor_attack(features, ds.feature_files, split_plan, attack_cfg)
        for data in modified.values():
            store.put(data)
        # a self-consistent forgery: the attacker recomputes the manifest's root but cannot rewrite the log
        poisoned = replace(poisoned, merkle_root=build_tree(poisoned.samples()).root)
        feat_bytes = _tamper(run, "features", poisoned)
        atomic_write(run / "fliplog.tsv", rec.flip_log.to_tsv().encode())
    rec.artifacts["features"] = sha256_hex(feat_bytes)
    lap("features")

    # splits
    if not check("features", ann_bytes):
        return rec
    consumed_feat = parse_manifest(signing.manifest_path(run, "features").read_bytes())
    rec.consumed_features = consumed_feat
    splits = replace(split_plan, merkle_root=consumed_feat.merkle_root, prev_manifest_hash=sha256(feat_bytes))
    split_bytes = _write_stage(run, "splits", splits, keys)
    rec.artifacts["splits"] = sha256_hex(split_bytes)

    # model
    if not check("splits", feat_bytes):
        return rec
    consumed_split = parse_manifest(signing.manifest_path(run, "splits").read_bytes())
    part = {r[0]: r[1] for r in consumed_split.records}
    labels = {r[0]: r[1] for r in consumed_feat.records}
    train_ids = [i for i in consumed_feat.ids() if part.get(i) == "train"]
    test_ids = [i for i in consumed_feat.ids() if part.get(i) == "test"]
    train_grids = np.stack([g.values for g in load_grids(store, consumed_feat, train_ids)])
    params = train(train_grids, [labels[i] for i in train_ids], train_cfg, gen_cfg.class_names)
    lap("train")
    ckpt = save_checkpoint(params)
    rec.checkpoint_hex = store.put(ckpt)
    model = StageManifest("model", (("checkpoint", rec.checkpoint_hex),), consumed_feat.merkle_root,
                          sha256(split_bytes))
    model_bytes = _write_stage(run, "model", model, keys)
    rec.artifacts["model"] = sha256_hex(model_bytes)
    if not check("model", split_bytes):
        return rec

    # evaluation on the held-out partition, which no attack touches
    test_grids = load_grids(store, consumed_feat, test_ids)
    clean_labels = ds.labels
    truths = [clean_labels[i] for i in test_ids]
    preds = predict_many(params, test_grids)
    acfg = attack_cfg or AttackConfig()
    report = report_from_predictions(truths, preds, params.class_order, target=acfg.source)
    report.asr_clean = attack_success_rate(preds, truths, acfg.source, acfg.target)
    if attack_cfg is not None and attack_cfg.kind == "backdoor_patch":
        src = [k for k, t in enumerate(truths) if t == acfg.source]
        stamped = [stamp_patch(test_grids[k], acfg) for k in src]
        trig = predict_many(params, stamped)
        report.asr_triggered = attack_success_rate(trig, [acfg.source] * len(src), acfg.source, acfg.target)
    rec.metrics = report
    lap("evaluate")
    return rec


# -- sweeps ------------------------------------------------------------------

DEFAULT_RATES = (0.0, 0.005, 0.01, 0.02)
DEFAULT_SEEDS = (1, 2, 3)
KINDS = ("label_flip", "backdoor_patch")


@dataclass(frozen=True)
class ExperimentPlan:
    rates: tuple[float, ...] = DEFAULT_RATES
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    kinds: tuple[str, ...] = KINDS
    gen: GenConfig = GenConfig()
    train: TrainConfig = TrainConfig()
    attack: AttackConfig = AttackConfig()
    verify: bool = False

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ValueError("plan needs at least one seed")
        if any(not 0 <= r <= 1 for r in self.rates):
            raise ValueError("rates must lie in [0, 1]")
        bad = [k for k in self.kinds if k not in KINDS]
        if bad:
            raise ValueError(f"unknown attack kind(s) {bad}")


@dataclass
class CellResult:
    kind: str
    rate: float
    seed: int
    record: RunRecord | None
    error: str | None = None

    @property
    def status(self) -> str:
        if self.error:
            return "failed"
        if self.record.aborted:
            return f"aborted:{self.record.aborted_stage}"
        return "ok"


def cell_configs(plan: ExperimentPlan, kind: str, rate: float, seed: int):
    gen = replace(plan.gen, seed=seed)
    tr = replace(plan.train, seed=seed)
    atk = replace(plan.attack, kind=kind, rate=rate, seed=seed)
    return gen, tr, atk


def run_sweep(plan: ExperimentPlan, out: str | os.PathLike,
              keys: Mapping[str, StageKeypair] | None = None) -> list[CellResult]:
    out = Path(out)
    keys = keys or generate_keys()
    store_dir = out / "objects"  # content-addressed, so cells can share it safely
    cells: list[CellResult] = []
    for seed in plan.seeds:
        ds = generate(replace(plan.gen, seed=seed))
        for kind in plan.kinds:
            for rate in plan.rates:
                gen, tr, atk = cell_configs(plan, kind, rate, seed)
                workdir = out / "cells" / kind / f"rate{rate:g}-seed{seed}"
                try:
                    record = run_pipeline(workdir, gen, tr, atk, keys, verify=plan.verify,
                                          dataset=ds, store_dir=store_dir)
                    cells.append(CellResult(kind, rate, seed, record))
                except (TrainingError, ValueError, OSError) as exc:
                    log.error("cell %s rate %g seed %d failed: %s", kind, rate, seed, exc)
                    cells.append(CellResult(kind, rate, seed, None, str(exc)))
    return cells


# -- reports -----------------------------------------------------------------

CELL_COLUMNS = ("kind", "rate", "seed", "status", "flipped", "accuracy", "asr_clean", "asr_triggered",
                "beta_test", "model_manifest")
SUMMARY_COLUMNS = ("kind", "rate", "seeds_ok", "flipped", "accuracy", "asr", "asr_ci_lo", "asr_ci_hi",
                   "asr_triggered", "trig_ci_lo", "trig_ci_hi", "caught")


def _f(x: float | None, digits: int = 4) -> str:
    return "NA" if x is None else f"{x:.{digits}f}"


def _rate(r: float) -> str:
    return f"{r:g}"


def cells_tsv(cells: Sequence[CellResult]) -> str:
    lines = ["\t".join(CELL_COLUMNS)]
    for c in sorted(cells, key=lambda c: (c.kind, c.rate, c.seed)):
        m = c.record.metrics if c.record else None
        lines.append("\t".join([
            c.kind, _rate(c.rate), str(c.seed), c.status,
            str(c.record.flipped) if c.record else "NA",
            _f(m.overall_accuracy if m else None),
            _f(m.asr_clean if m else None),
            _f(m.asr_triggered if m else None),
            _f(m.beta_test if m else None),
            c.record.artifacts.get("model", "NA") if c.record else "NA",
        ]))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SummaryRow:
    kind: str
    rate: float
    seeds_ok: int
    flipped: str
    accuracy: float | None
    asr: float | None  # percent
    asr_lo: float | None
    asr_hi: float | None
    trig: float | None
    trig_lo: float | None
    trig_hi: float | None
    caught: int


def _ci(values: list[float]):
    if not values:
        return None, None, None
    if len(values) == 1:
        return 100 * values[0], None, None
    ci = ci_across_seeds(values)
    return ci.mean, ci.lo, ci.hi


def summarize(cells: Sequence[CellResult]) -> list[SummaryRow]:
    groups: dict[tuple[str, float], list[CellResult]] = {}
    for c in cells:
        groups.setdefault((c.kind, c.rate), []).append(c)
    rows = []
    for (kind, rate), group in sorted(groups.items()):
        done = [c for c in group if c.record is not None and c.record.metrics is not None]
        caught = sum(1 for c in group if c.record is not None and c.record.aborted)
        flips = sorted({c.record.flipped for c in group if c.record is not None})
        flipped = "NA" if not flips else str(flips[0]) if len(flips) == 1 else f"{flips[0]}-{flips[-1]}"
        acc = float(np.mean([c.record.metrics.overall_accuracy for c in done])) if done else None
        asr = _ci([c.record.metrics.asr_clean for c in done])
        trig_vals = [c.record.metrics.asr_triggered for c in done if c.record.metrics.asr_triggered is not None]
        trig = _ci(trig_vals)
        rows.append(SummaryRow(kind, rate, len(done), flipped, acc, *asr, *trig, caught))
    return rows


def summary_tsv(rows: Sequence[SummaryRow]) -> str:
    lines = ["\t".join(SUMMARY_COLUMNS)]
    for r in rows:
        lines.append("\t".join([
            r.kind, _rate(r.rate), str(r.seeds_ok), r.flipped, _f(r.accuracy),
            _f(r.asr, 2), _f(r.asr_lo, 2), _f(r.asr_hi, 2),
            _f(r.trig, 2), _f(r.trig_lo, 2), _f(r.trig_hi, 2), str(r.caught),
        ]))
    return "\n".join(lines) + "\n"


def parse_summary_tsv(text: str) -> list[SummaryRow]:
    lines = text.splitlines()
    if not lines or tuple(lines[0].split("\t")) != SUMMARY_COLUMNS:
        raise ValueError("not a summary report: unexpected header")

    def num(s: str) -> float | None:
        return None if s == "NA" else float(s)

    rows = []
    for line in lines[1:]:
        f = line.split("\t")
        rows.append(SummaryRow(f[0], float(f[1]), int(f[2]), f[3], num(f[4]), num(f[5]), num(f[6]), num(f[7]),
                               num(f[8]), num(f[9]), num(f[10]), int(f[11])))
    return rows


def _pct(x: float | None) -> str:
    return "n/a" if x is None else f"{x:.1f}%"


def _with_ci(mean: float | None, lo: float | None, hi: float | None) -> str:
    if mean is None:
        return "n/a"
    if lo is None:
        return f"{mean:.1f}%"
    return f"{mean:.1f}% [{lo:.1f}, {hi:.1f}]"


def summary_human(rows: Sequence[SummaryRow]) -> str:
    out = []
    flips = [r for r in rows if r.kind == "label_flip"]
    if flips:
        out.append("Targeted label flip")
        out.append(f"{'Rate':>9}  {'Flipped':>7}  {'Accuracy':>8}  ASR (95% CI)")
        for r in flips:
            rate = "0 (clean)" if r.rate == 0 else f"{100 * r.rate:g}%"
            acc = _pct(None if r.accuracy is None else 100 * r.accuracy)
            note = f"  caught {r.caught}" if r.caught else ""
            out.append(f"{rate:>9}  {r.flipped:>7}  {acc:>8}  {_with_ci(r.asr, r.asr_lo, r.asr_hi)}{note}")
    bds = [r for r in rows if r.kind == "backdoor_patch"]
    if bds:
        if out:
            out.append("")
        out.append("Backdoor patch")
        out.append(f"{'Rate':>9}  {'Overall accuracy':>16}  {'Clean ASR':>22}  Triggered ASR")
        for r in bds:
            rate = "0 (clean)" if r.rate == 0 else f"{100 * r.rate:g}%"
            acc = _pct(None if r.accuracy is None else 100 * r.accuracy)
            note = f"  caught {r.caught}" if r.caught else ""
            out.append(f"{rate:>9}  {acc:>16}  {_with_ci(r.asr, r.asr_lo, r.asr_hi):>22}  "
                       f"{_with_ci(r.trig, r.trig_lo, r.trig_hi)}{note}")
    return "\n".join(out) + ("\n" if out else "")


def report_render(cells: Sequence[CellResult]) -> tuple[str, str, str]:
    """(summary TSV, per-cell TSV, human tables); deterministic, no timings."""
    rows = summarize(cells)
    return summary_tsv(rows), cells_tsv(cells), summary_human(rows)


def write_reports(out: str | os.PathLike, cells: Sequence[CellResult]) -> tuple[str, str, str]:
    summary, per_cell, human = report_render(cells)
    out = Path(out)
    atomic_write(out / "report.tsv", summary.encode())
    atomic_write(out / "cells.tsv", per_cell.encode())
    atomic_write(out / "report.txt", human.encode())
    return summary, per_cell, human
