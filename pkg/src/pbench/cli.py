"""``pbench`` command line. Exit codes: 0 success, 1 usage/config error, 2 abort."""
from __future__ import annotations

import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import detect as det
from . import pipeline, signing
from .attacks import AttackConfig, AttackError, backdoor_attack, flip_labels, stamp_patch
from .config import ConfigError, load_config, parse_list
from .manifest import STAGES, ManifestError, StageManifest, parse_manifest, serialize_manifest, sha256
from .metrics import attack_success_rate, report_from_predictions, report_human, report_tsv
from .model import TrainConfig, TrainingError, load_checkpoint, predict_many, save_checkpoint, train
from .provenance import ABORT_LINE, build_tree, manifest_root, record_root
from .store import ObjectStore, atomic_write
from .synthdata import GenConfig, generate, stratified_split

EXIT_USAGE = 1
EXIT_ABORT = 2


class Abort(Exception):
    """Verification failure; the message is the terminal abort line."""


class Ctx:
    def __init__(self, values: dict, seed: int | None, out: str | None, verify: bool):
        self.values = values
        self.seed = seed
        self.out = out
        self.verify = verify

    def gen_config(self) -> GenConfig:
        cfg = GenConfig.from_mapping(self.values)
        return replace(cfg, seed=self.seed) if self.seed is not None else cfg

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig.from_mapping(self.values)
        return replace(cfg, seed=self.seed) if self.seed is not None else cfg

    def attack_config(self, **overrides) -> AttackConfig:
        cfg = AttackConfig.from_mapping(self.values)
        if self.seed is not None:
            cfg = replace(cfg, seed=self.seed)
        return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})

    def run_dir(self, given: str | None) -> Path:
        d = given or self.out
        if d is None:
            raise click.UsageError("no run directory: pass --dir or the global --out")
        return Path(d)


def _store(run: Path) -> ObjectStore:
    return ObjectStore(signing.run_paths(run)["objects"])


def _read_manifest(run: Path, stage: str) -> StageManifest:
    p = signing.manifest_path(run, stage)
    if not p.exists():
        raise click.UsageError(f"missing manifest {p}")
    return parse_manifest(p.read_bytes())


def _verify_upto(run: Path, last: str) -> None:
    stages = STAGES[: STAGES.index(last) + 1]
    report = signing.verify_chain(run, stages)
    if not report.ok:
        raise Abort(report.failure.message)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="key = value config file.")
@click.option("--seed", type=int, help="Seed for generation, split, attack and training.")
@click.option("--out", type=click.Path(file_okay=False), help="Run or output directory.")
@click.option("--no-verify", is_flag=True, help="Consume artifacts without verification (attacker-success mode).")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def cli(ctx, config_path, seed, out, no_verify, verbose):
    logging.basicConfig(level=logging.WARNING - 10 * verbose, format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = Ctx(load_config(config_path), seed, out, not no_verify)
    if no_verify:
        click.echo(pipeline.NO_VERIFY_BANNER, err=True)


@cli.command()
@click.pass_obj
def gen(obj: Ctx):
    """Generate the synthetic dataset and its unsigned stage manifests."""
    run = obj.run_dir(None)
    cfg = obj.gen_config()
    ds = generate(cfg)
    store = _store(run)
    for rid in ds.annotation.ids():
        store.put(ds.raw_files[rid])
        store.put(ds.feature_files[rid])
    raw = serialize_manifest(ds.raw_manifest())
    ann = serialize_manifest(replace(ds.annotation, prev_manifest_hash=sha256(raw)))
    feat = serialize_manifest(replace(ds.features, prev_manifest_hash=sha256(ann)))
    _, split = stratified_split(ds.annotation, cfg.train_fraction, cfg.seed)
    spl = serialize_manifest(replace(split, merkle_root=ds.features.merkle_root, prev_manifest_hash=sha256(feat)))
    for stage, data in (("raw", raw), ("annotation", ann), ("features", feat), ("splits", spl)):
        atomic_write(signing.manifest_path(run, stage), data)
    click.echo(f"{cfg.total} samples, root {ds.features.merkle_root.hex()}")


@cli.command()
@click.option("--role", type=click.Choice(signing.ROLES), help="Role to create (default: all five).")
@click.option("--scheme", default=signing.DEFAULT_SCHEME, show_default=True, type=click.Choice(list(signing.BACKENDS)))
@click.option("--keys", "keydir", type=click.Path(file_okay=False), help="Key directory (default --out).")
@click.pass_obj
def keygen(obj: Ctx, role, scheme, keydir):
    """Create stage keypairs (<role>.key secret, <role>.pub public)."""
    d = Path(keydir or obj.run_dir(None))
    roles = [role] if role else list(signing.ROLES)
    for r in roles:
        kp = signing.keygen(r, scheme)
        pipeline.save_keys(d, {r: kp})
        click.echo(f"{r}\t{scheme}\t{signing.fingerprint(kp.public_key).hex()}")


@cli.command()
@click.option("--stage", required=True, type=click.Choice(list(signing.STAGE_ROLES)))
@click.option("--keys", "keydir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--dir", "rundir", type=click.Path(file_okay=False))
@click.pass_obj
def sign(obj: Ctx, stage, keydir, rundir):
    """Sign a stage manifest with its role key."""
    run = obj.run_dir(rundir)
    role = signing.STAGE_ROLES[stage]
    kp = signing.load_keypair((Path(keydir) / f"{role}.key").read_bytes())
    data = signing.manifest_path(run, stage).read_bytes()
    sig = signing.sign_manifest(kp, stage, data)
    atomic_write(signing.signature_path(run, stage), signing.encode_signature(sig))
    atomic_write(signing.public_key_path(run, role), signing.save_public_key(kp.public()))
    click.echo(f"signed {stage} as {role} ({kp.scheme}), manifest {sig.manifest_hash.hex()}")


@cli.command()
@click.option("--dir", "rundir", type=click.Path(file_okay=False))
@click.pass_obj
def commit(obj: Ctx, rundir):
    """Recompute the features Merkle root and append it to roots.log."""
    run = obj.run_dir(rundir)
    m = _read_manifest(run, "features")
    root = manifest_root(m)
    if m.merkle_root != root:
        raise Abort(ABORT_LINE)
    record_root(root, signing.run_paths(run)["roots"], "features")
    click.echo(root.hex())


@cli.command()
@click.option("--kind", type=click.Choice(["label_flip", "backdoor_patch"]))
@click.option("--rate", type=float)
@click.option("--source")
@click.option("--target")
@click.option("--dir", "rundir", type=click.Path(file_okay=False))
@click.pass_obj
def attack(obj: Ctx, kind, rate, source, target, rundir):
    """Poison a run directory in place, after signing (models the write-capable adversary)."""
    run = obj.run_dir(rundir)
    cfg = obj.attack_config(kind=kind, rate=rate, source=source, target=target)
    split = _read_manifest(run, "splits")
    store = _store(run)
    if cfg.kind == "label_flip":
        ann = _read_manifest(run, "annotation")
        poisoned, flog = flip_labels(ann, split, cfg)
        atomic_write(signing.manifest_path(run, "annotation"), serialize_manifest(poisoned))
    else:
        feat = _read_manifest(run, "features")
        files = {r[0]: store.get(r[3]) for r in feat.records}
        poisoned, modified, flog = backdoor_attack(feat, files, split, cfg)
        for data in modified.values():
            store.put(data)
        poisoned = replace(poisoned, merkle_root=build_tree(poisoned.samples()).root)
        atomic_write(signing.manifest_path(run, "features"), serialize_manifest(poisoned))
    atomic_write(run / "fliplog.tsv", flog.to_tsv().encode())
    clamp = f" (clamped from {flog.requested})" if flog.clamped else ""
    click.echo(f"{cfg.kind}: {len(flog)} record(s) poisoned{clamp}")


@cli.command("train")
@click.option("--dir", "rundir", type=click.Path(file_okay=False))
@click.pass_obj
def train_cmd(obj: Ctx, rundir):
    """Verify upstream stages, train, and write the unsigned model manifest."""
    run = obj.run_dir(rundir)
    if obj.verify:
        _verify_upto(run, "splits")
    feat = _read_manifest(run, "features")
    split = _read_manifest(run, "splits")
    part = {r[0]: r[1] for r in split.records}
    labels = {r[0]: r[1] for r in feat.records}
    ids = [i for i in feat.ids() if part.get(i) == "train"]
    store = _store(run)
    grids = np.stack([g.values for g in pipeline.load_grids(store, feat, ids)])
    order = obj.gen_config().class_names
    params = train(grids, [labels[i] for i in ids], obj.train_config(), order)
    digest = store.put(save_checkpoint(params))
    model = StageManifest("model", (("checkpoint", digest),), feat.merkle_root,
                          sha256(signing.manifest_path(run, "splits").read_bytes()))
    atomic_write(signing.manifest_path(run, "model"), serialize_manifest(model))
    click.echo(f"checkpoint {digest} final loss {params.train_meta['final_train_loss']:.4f}")


def _evaluate(run: Path, cfg: AttackConfig, triggered: bool):
    store = _store(run)
    model = _read_manifest(run, "model")
    params = load_checkpoint(store.get(model.records[0][1]))
    feat = _read_manifest(run, "features")
    split = _read_manifest(run, "splits")
    part = {r[0]: r[1] for r in split.records}
    ids = [i for i in feat.ids() if part.get(i) == "test"]
    labels = {r[0]: r[1] for r in feat.records}
    grids = pipeline.load_grids(store, feat, ids)
    truths = [labels[i] for i in ids]
    preds = predict_many(params, grids)
    report = report_from_predictions(truths, preds, params.class_order, target=cfg.source)
    report.asr_clean = attack_success_rate(preds, truths, cfg.source, cfg.target)
    if triggered:
        src = [k for k, t in enumerate(truths) if t == cfg.source]
        trig = predict_many(params, [stamp_patch(grids[k], cfg) for k in src])
        report.asr_triggered = attack_success_rate(trig, [cfg.source] * len(src), cfg.source, cfg.target)
    return report


@cli.command("eval")
@click.option("--dir", "rundir", type=click.Path(file_okay=False))
@click.option("--triggered", is_flag=True, help="Also measure ASR on patched source-class test samples.")
@click.pass_obj
def eval_cmd(obj: Ctx, rundir, triggered):
    """Evaluate the trained model on the test partition."""
    run = obj.run_dir(rundir)
    if obj.verify:
        _verify_upto(run, "model")
    report = _evaluate(run, obj.attack_config(), triggered)
    atomic_write(run / "metrics.tsv", report_tsv(report).encode())
    click.echo(report_human(report), nl=False)


@cli.command("verify-chain")
@click.argument("rundir", type=click.Path(exists=True, file_okay=False))
def verify_chain_cmd(rundir):
    """Verify every stage signature, linkage and the committed root."""
    report = signing.verify_chain(rundir)
    for line in report.lines():
        if line.startswith("PASS"):
            click.echo(line)
    if not report.ok:
        raise Abort(report.failure.message)
    click.echo("chain OK")


@cli.command("detect")
@click.option("--baseline", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--current", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--z", "z_threshold", default=6.0, show_default=True)
@click.option("--audit-pgm", type=click.Path(dir_okay=False), help="Write flagged grids as a PGM tile image.")
@click.pass_obj
def detect_cmd(obj: Ctx, baseline, current, z_threshold, audit_pgm):
    """Run every monitor comparing a baseline run with a current run."""
    cfg = obj.attack_config()
    base, cur = Path(baseline), Path(current)
    rb, rc = _evaluate(base, cfg, False), _evaluate(cur, cfg, False)
    fb, fc = _read_manifest(base, "features"), _read_manifest(cur, "features")
    store = _store(cur)
    grids = dict(zip(fc.ids(), pipeline.load_grids(store, fc, fc.ids())))
    g0 = next(iter(grids.values()))
    alerts = {
        "accuracy": det.accuracy_monitor(rb, rc),
        "per_class": det.per_class_monitor(rb, rc),
        "label_drift": det.label_drift_monitor(fb, fc),
        "patch": det.patch_detector(grids, cfg.patch_shape(g0.rows, g0.cols), z_threshold),
    }
    for a in alerts.values():
        click.echo("\n".join(a.lines()[:11]))
    click.echo("attack\t" + "\t".join(det.CONTROLS))
    click.echo(det.table_row(cur.name, alerts))
    if audit_pgm and alerts["patch"].triggered:
        flagged = [grids[f.item] for f in alerts["patch"].evidence]
        atomic_write(audit_pgm, det.audit_grid_pgm(flagged))


def _plan(obj: Ctx, rates, seeds, kinds) -> pipeline.ExperimentPlan:
    v = obj.values
    rates = parse_list(rates or v.get("sweep.rates", ""), float) or list(pipeline.DEFAULT_RATES)
    seeds = parse_list(seeds or v.get("sweep.seeds", ""), int) or list(pipeline.DEFAULT_SEEDS)
    kinds = parse_list(kinds or v.get("sweep.kinds", ""), str) or list(pipeline.KINDS)
    return pipeline.ExperimentPlan(tuple(rates), tuple(seeds), tuple(kinds), GenConfig.from_mapping(v),
                                   TrainConfig.from_mapping(v), AttackConfig.from_mapping(v), obj.verify)


@cli.command()
@click.option("--rates", help="Comma-separated poisoning rates.")
@click.option("--seeds", help="Comma-separated seeds.")
@click.option("--kinds", help="Comma-separated attack kinds.")
@click.option("--scheme", default=signing.DEFAULT_SCHEME, type=click.Choice(list(signing.BACKENDS)))
@click.pass_obj
def sweep(obj: Ctx, rates, seeds, kinds, scheme):
    """Run every (kind, rate, seed) cell and write report.tsv, cells.tsv, report.txt."""
    out = obj.run_dir(None)
    plan = _plan(obj, rates, seeds, kinds)
    cells = pipeline.run_sweep(plan, out, pipeline.generate_keys(scheme))
    _, _, human = pipeline.write_reports(out, cells)
    click.echo(human, nl=False)


@cli.command()
@click.argument("sweepdir", type=click.Path(exists=True, file_okay=False))
def report(sweepdir):
    """Render the human tables from a sweep's report.tsv."""
    rows = pipeline.parse_summary_tsv((Path(sweepdir) / "report.tsv").read_text())
    click.echo(pipeline.summary_human(rows), nl=False)


@cli.command()
@click.option("--kind", type=click.Choice(["label_flip", "backdoor_patch"]), help="Inject this attack.")
@click.option("--rate", type=float)
@click.option("--keys", "keydir", type=click.Path(exists=True, file_okay=False), help="Existing key directory.")
@click.pass_obj
def run(obj: Ctx, kind, rate, keydir):
    """Run the whole signed pipeline end to end in --out."""
    out = obj.run_dir(None)
    keys = pipeline.load_keys(keydir) if keydir else pipeline.generate_keys()
    atk = obj.attack_config(kind=kind, rate=rate) if kind else None
    rec = pipeline.run_pipeline(out, obj.gen_config(), obj.train_config(), atk, keys, verify=obj.verify)
    if rec.aborted:
        raise Abort(rec.abort_message)
    m = rec.metrics
    if rec.flip_log is not None:
        click.echo(f"poisoned {rec.flipped} record(s)")
    atomic_write(out / "metrics.tsv", report_tsv(m).encode())
    click.echo(report_human(m), nl=False)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="pbench", standalone_mode=False)
    except Abort as exc:
        click.echo(str(exc), err=True)
        return EXIT_ABORT
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except click.exceptions.Abort:
        return EXIT_USAGE
    except (ConfigError, ManifestError, AttackError, TrainingError, signing.SigningError,
            FileNotFoundError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    return 0


def entry() -> None:
    sys.exit(main())
